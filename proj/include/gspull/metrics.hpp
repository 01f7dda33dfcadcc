#pragma once

#include "gspull/image.hpp"
#include "gspull/surface.hpp"
#include "gspull/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace gspull {

// Closest point on triangle abc to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Bounding volume hierarchy answering exact point-to-surface distances.
class MeshDistance {
public:
    explicit MeshDistance(const TriangleMesh& mesh);
    Real distance(const Vec3& p) const;
    // Distance computed by scanning every triangle, for verification.
    Real distance_bruteforce(const Vec3& p) const;

private:
    struct Node {
        Vec3 lo, hi;
        int left = -1, right = -1; // children; leaves have left < 0
        int begin = 0, end = 0;    // triangle range for leaves
    };
    std::vector<Vec3> a_, b_, c_;
    std::vector<Node> nodes_;
    int build(int begin, int end, std::vector<int>& order, const std::vector<Vec3>& centroids);
};

// Area-weighted uniform samples. The stream depends on the seed and on the
// mesh content, so each mesh is sampled identically whatever its argument slot.
Points sample_mesh(const TriangleMesh& mesh, Index n, std::uint64_t seed);

struct MeshMetrics {
    Real accuracy = 0;     // mean distance from A-samples to B
    Real completeness = 0; // mean distance from B-samples to A
    Real chamfer = 0;      // 0.5 * (accuracy + completeness)
    Real precision = 0;
    Real recall = 0;
    Real f_score = 0;
    Real threshold = 0;
    Index samples = 0;
};

inline constexpr Real kDefaultFScoreThreshold = Real(0.02);
inline constexpr Index kDefaultMetricSamples = 100000;

// Throws std::invalid_argument on an empty mesh.
MeshMetrics evaluate_mesh(const TriangleMesh& a, const TriangleMesh& b, Real threshold = kDefaultFScoreThreshold,
                          Index n_samples = kDefaultMetricSamples, std::uint64_t seed = 0);
Real chamfer(const TriangleMesh& a, const TriangleMesh& b, Index n_samples = kDefaultMetricSamples,
             std::uint64_t seed = 0);
Real f_score(const TriangleMesh& a, const TriangleMesh& b, Real threshold = kDefaultFScoreThreshold,
             Index n_samples = kDefaultMetricSamples, std::uint64_t seed = 0);

inline constexpr Real kPsnrCap = 99;

// 10 log10(1 / MSE) over all channels; identical images give kPsnrCap.
Real psnr(const Image& a, const Image& b);

struct ViewMetrics {
    std::string name;
    Real psnr = 0;
    Real ssim = 0;
};

struct MetricReport {
    std::optional<MeshMetrics> mesh;
    std::vector<ViewMetrics> views;
    Real mean_psnr = 0;
    Real mean_ssim = 0;
    double runtime_seconds = 0;

    void summarize_views();
    std::string to_json() const;
    std::string to_table() const;
};

} // namespace gspull
