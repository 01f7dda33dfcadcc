#pragma once

#include "gspull/image.hpp"
#include "gspull/sdfnet.hpp"
#include "gspull/tape.hpp"
#include "gspull/types.hpp"

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace gspull {

struct LossWeights {
    Real alpha = 100;   // thin
    Real beta = Real(0.1);  // tangent
    Real gamma = 1;     // pull
    Real delta = Real(0.1); // orthogonal
    Real eikonal = 0;
};

struct LossReport {
    Real splatting = 0;
    Real thin = 0;
    Real tangent = 0;
    Real pull = 0;
    Real orthogonal = 0;
    Real eikonal = 0;
    Real total = 0;
};

// Weighted objective of the per-term values in `r`.
Real total(const LossReport& r, const LossWeights& w);

// Same weighting on tape values; null (invalid) terms are skipped.
struct LossTerms {
    ad::Value splatting, thin, tangent, pull, orthogonal, eikonal;
};
ad::Value total(ad::Tape& tape, const LossTerms& terms, const LossWeights& w);
LossReport report_of(const LossTerms& terms, const LossWeights& w);

// --- image terms ---------------------------------------------------------------

inline constexpr int kSsimWindow = 11;
inline constexpr Real kSsimSigma = Real(1.5);
inline constexpr Real kSsimC1 = Real(0.01 * 0.01);
inline constexpr Real kSsimC2 = Real(0.03 * 0.03);

// Mean SSIM over pixels and channels, Gaussian window, zero padding.
Real ssim(const Image& a, const Image& b);

// Differentiable SSIM of a (W*H) x 3 tape image against a fixed target.
ad::Value ssim(ad::Tape& tape, const ad::Value& image, const Image& target);

// 0.8 * L1 + 0.2 * (1 - SSIM) / 2.
Real loss_splatting(const Image& rendered, const Image& gt);
ad::Value loss_splatting(ad::Tape& tape, const ad::Value& image, const Image& gt);

// --- geometry terms -----------------------------------------------------------

// Mean over Gaussians of the smallest variance exp(2 * log_scale).
ad::Value loss_thin(ad::Tape& tape, const ad::Value& log_scales);

// Mean of 1 - |cos(grad_i, n_i)| over rows whose gradient norm exceeds the
// vanishing threshold. Used for both the tangent and the orthogonal term.
ad::Value loss_alignment(ad::Tape& tape, const ad::Value& sdf_grad, const ad::Value& normals,
                         Real min_grad_norm = kMinGradNorm);

inline ad::Value loss_tangent(ad::Tape& tape, const ad::Value& grad_at_pulled_centers, const ad::Value& normals) {
    return loss_alignment(tape, grad_at_pulled_centers, normals);
}
inline ad::Value loss_orthogonal(ad::Tape& tape, const ad::Value& grad_at_queries, const ad::Value& assigned_normals) {
    return loss_alignment(tape, grad_at_queries, assigned_normals);
}

// Mean of 0.5 (q' - mu)^T (Sigma + floor)^-1 (q' - mu); every input has one row per query.
ad::Value loss_pull(const ad::Value& pulled_queries, const ad::Value& assigned_centers, const ad::Value& assigned_quats,
                    const ad::Value& assigned_log_scales);

// Ablation: mean of 0.5 |q' - mu|^2.
ad::Value loss_pull_to_centers(const ad::Value& pulled_queries, const ad::Value& assigned_centers);

// exp(-0.5 d^T Sigma^-1 d) per query, for inspection.
Vec pull_probability(const Mat& pulled_queries, const Mat& assigned_centers, const Mat& quats, const Mat& log_scales);

// Mean of (|grad f| - 1)^2.
ad::Value loss_eikonal(const ad::Value& sdf_grad);

// --- nearest pulled Gaussian --------------------------------------------------

// Linear scan; ties go to the lowest index.
Index nearest_bruteforce(const Points& centers, const Vec3& q);

// Uniform-grid nearest-center queries with the same tie rule as the scan.
class NearestCenters {
public:
    NearestCenters() = default;
    explicit NearestCenters(const Points& centers, Real points_per_cell = 2);

    Index query(const Vec3& q) const;
    std::vector<Index> query(const Points& qs) const;
    // Distance to the k-th nearest center (k >= 1), skipping index `exclude`;
    // the farthest available neighbor when fewer exist, infinity when none.
    Real kth_distance(const Vec3& q, int k, Index exclude = -1) const;
    Index size() const { return centers_.rows(); }

private:
    Points centers_;
    Vec3 origin_ = Vec3::Zero();
    Real cell_ = 1;
    int dims_[3] = {1, 1, 1};
    std::vector<int> cell_start_;  // CSR over cells
    std::vector<Index> cell_items_;

    int cell_coord(Real x, int axis) const;
    template <typename F>
    void for_shell(const int c[3], int r, F&& visit) const;
    Real outside_bound(const Vec3& q, const int c[3], int r) const;
};

// Per point, the distance to its k-th nearest other point.
Vec kth_neighbor_distances(const Points& points, int k);

// --- training log -------------------------------------------------------------

class CsvLog {
public:
    CsvLog() = default;
    explicit CsvLog(const std::filesystem::path& path, bool append = false);
    void write(int iteration, const LossReport& r, double wall_seconds);
    bool is_open() const { return out_.is_open(); }
    static std::string header();

private:
    std::ofstream out_;
};

} // namespace gspull
