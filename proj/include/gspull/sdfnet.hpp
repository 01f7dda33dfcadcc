#pragma once

#include "gspull/adam.hpp"
#include "gspull/tape.hpp"
#include "gspull/types.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gspull {

inline constexpr Real kMinGradNorm = Real(1e-8);

// Fully connected ReLU network mapping a position to a signed distance.
//
// `layers` counts linear layers: layers - 1 hidden ReLU layers of `width`
// units followed by a linear scalar output. Weights are stored input-major
// (in x out) so a batch of row points evaluates as h * W + b.
class SdfNetwork {
public:
    std::vector<ad::Parameter> weights;
    std::vector<ad::Parameter> biases;
    std::vector<AdamSlot> weight_moments;
    std::vector<AdamSlot> bias_moments;
    std::uint64_t seed = 0;
    SceneTransform transform;

    // Geometric initialization: f(q) ~ |q| - radius.
    static SdfNetwork init_sphere(int layers, int width, Real radius, std::uint64_t seed);

    int layers() const { return static_cast<int>(weights.size()); }
    int width() const;
    Index parameter_count() const;
    std::vector<ad::Parameter*> parameters();
    void zero_grad();

    // Tape-free evaluation for extraction and diagnostics.
    Vec evaluate(const Points& q) const;
    Real evaluate(const Vec3& q) const;
    // Signed distances and exact gradients (a.e.) for a batch.
    void evaluate_with_gradient(const Points& q, Vec& sdf, Points& grad) const;
};

struct SdfEval {
    ad::Value sdf;  // N x 1
    ad::Value grad; // N x 3
};

ad::Value eval(ad::Tape& tape, SdfNetwork& net, const ad::Value& q);

// Value and Jacobian as one forward expression. ReLU masks are constants of
// this pass, so the gradient is differentiable with respect to the weights.
SdfEval eval_grad(ad::Tape& tape, SdfNetwork& net, const ad::Value& q);

struct PullOptions {
    bool detach_direction = false;
    Real min_grad_norm = kMinGradNorm;
};

struct PullResult {
    ad::Value points;       // q' = q - f(q) grad/|grad|
    ad::Value sdf;          // f(q)
    ad::Value grad;         // grad f(q)
    Index vanishing = 0;    // rows left in place because |grad| fell under the threshold
    std::vector<bool> valid;
};

PullResult pull(ad::Tape& tape, SdfNetwork& net, const ad::Value& q, const PullOptions& opts = {});

// Pull for an arbitrary field given its value and gradient callables.
template <typename Field, typename Gradient>
Vec3 pull_point(const Field& f, const Gradient& grad, const Vec3& q, Real min_grad_norm = kMinGradNorm) {
    const Vec3 g = grad(q);
    const Real n = g.norm();
    if (!(n > min_grad_norm)) return q;
    return q - f(q) * g / n;
}

// Binary layout: "GSPLSDFN" magic, u32 version, u32 layer count L, u32 dims[L+1],
// u64 seed, f64 transform scale, f64 offset xyz, then per layer the in x out
// weights row-major followed by the out biases; all little-endian f64.
void save_network(const SdfNetwork& net, const std::filesystem::path& path);
SdfNetwork load_network(const std::filesystem::path& path);

} // namespace gspull
