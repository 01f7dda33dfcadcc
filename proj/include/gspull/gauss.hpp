#pragma once

#include "gspull/adam.hpp"
#include "gspull/tape.hpp"
#include "gspull/types.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace gspull {

// Added to every variance before inverting a covariance.
inline constexpr Real kVarianceFloor = Real(1e-8);

Real logistic(Real x);
Real logit(Real p);

// Rotation matrix of a (not necessarily unit) quaternion stored as (w, x, y, z).
Mat3 quaternion_to_matrix(const Vec4& q);
// Unit quaternion (w, x, y, z) of a proper rotation matrix.
Vec4 matrix_to_quaternion(const Mat3& r);
// Unit quaternion rotating +z onto the given direction.
Vec4 quaternion_from_z(const Vec3& direction);

struct Gaussian {
    Vec3 center = Vec3::Zero();
    Vec3 log_scales = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0); // (w, x, y, z)
    Real opacity_logit = 0;
    Vec3 color = Vec3::Constant(Real(0.5));

    Vec3 scales() const { return log_scales.array().exp(); }
    Vec3 variances() const { return (Real(2) * log_scales.array()).exp(); }
    Real opacity() const { return logistic(opacity_logit); }
    Mat3 rotation_matrix() const { return quaternion_to_matrix(rotation); }
};

// Sigma = R diag(scales^2) R^T.
Mat3 covariance(const Gaussian& g);

// Unnormalized density exp(-0.5 d^T (Sigma + floor I)^-1 d) with d = q - center.
Real density3d(const Gaussian& g, const Vec3& q, Real variance_floor = kVarianceFloor);

// Index of the smallest scale; ties go to the lowest axis.
Index disk_axis(const Vec3& log_scales);

// Rotated basis axis of the smallest scale.
Vec3 disk_normal(const Gaussian& g);

// Structure-of-arrays primitive set. Each attribute is a parameter matrix with
// one row per Gaussian, plus row-aligned optimizer moments and screen-space
// gradient statistics used by densification.
class GaussianSet {
public:
    enum Attribute { Centers = 0, LogScales, Rotations, OpacityLogits, Colors, AttributeCount };

    ad::Parameter centers{"centers", Mat(0, 3)};
    ad::Parameter log_scales{"log_scales", Mat(0, 3)};
    ad::Parameter rotations{"rotations", Mat(0, 4)};
    ad::Parameter opacity_logits{"opacity_logits", Mat(0, 1)};
    ad::Parameter colors{"colors", Mat(0, 3)};

    std::array<AdamSlot, AttributeCount> moments;

    Vec grad_accum;  // summed screen-space positional gradient norms
    Vec grad_count;  // number of renders each Gaussian was visible in

    GaussianSet() = default;
    explicit GaussianSet(const std::vector<Gaussian>& gs);

    Index size() const { return centers.value.rows(); }
    bool empty() const { return size() == 0; }

    Gaussian get(Index i) const;
    void set(Index i, const Gaussian& g);
    void push_back(const Gaussian& g);
    // Appends rows with zeroed moments and statistics.
    void append(const std::vector<Gaussian>& gs);
    std::vector<Gaussian> to_vector() const;

    // Keeps rows whose flag is true, compacting every attribute, moment and statistic.
    void keep(const std::vector<bool>& flags);

    std::array<ad::Parameter*, AttributeCount> parameters();
    void zero_grad();
    void reset_stats();
    void normalize_rotations();

private:
    void resize_aux();
};

// Tape leaves for every attribute of a set.
struct GaussianLeaves {
    ad::Value centers;
    ad::Value log_scales;
    ad::Value rotations;
    ad::Value opacity_logits;
    ad::Value colors;
};

GaussianLeaves bind(ad::Tape& tape, GaussianSet& set);

// --- differentiable batched forms (one row per Gaussian) ----------------------

// Columns of the rotation matrix; axis k is R e_k, each N x 3. Quaternions are normalized inside.
std::array<ad::Value, 3> rotation_axes(const ad::Value& quats);

// Row-major flattened covariance, N x 9.
ad::Value covariance(const ad::Value& quats, const ad::Value& log_scales);

// Per-row d^T (Sigma + floor I)^-1 d, N x 1.
ad::Value mahalanobis_sq(const ad::Value& offsets, const ad::Value& quats, const ad::Value& log_scales,
                         Real variance_floor = kVarianceFloor);

// Per-row density of each Gaussian at the query in the same row, N x 1.
ad::Value density3d(const ad::Value& centers, const ad::Value& quats, const ad::Value& log_scales,
                    const ad::Value& queries, Real variance_floor = kVarianceFloor);

std::vector<Index> disk_axes(const Mat& log_scales);

// Unit disk normals, N x 3. The selected axis is a constant of the pass.
ad::Value disk_normals(const ad::Value& quats, const ad::Value& log_scales);

// --- checkpoint ---------------------------------------------------------------

// Binary layout: "GSPLGAUS" magic, u32 version, u64 count, then per Gaussian
// 14 little-endian f64: center xyz, log_scales xyz, quaternion wxyz,
// opacity_logit, color rgb.
void save_set(const GaussianSet& set, const std::filesystem::path& path);
GaussianSet load_set(const std::filesystem::path& path);

} // namespace gspull
