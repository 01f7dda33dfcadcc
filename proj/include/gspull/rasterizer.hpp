#pragma once

#include "gspull/gauss.hpp"
#include "gspull/image.hpp"
#include "gspull/tape.hpp"
#include "gspull/types.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace gspull {

// Pinhole camera, OpenCV convention: x right, y down, z forward.
// A world point maps to camera space as x_c = rotation * x_w + translation.
struct CameraView {
    Real fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    std::optional<Image> image;
    std::string name;

    Vec3 to_camera(const Vec3& x) const { return rotation * x + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }
    // Throws std::invalid_argument naming the broken invariant.
    void validate() const;

    // Principal point at the image center.
    static CameraView look_at(const Vec3& eye, const Vec3& target, const Vec3& up, Real focal, int width, int height);
};

struct RenderConfig {
    Vec3 background = Vec3::Zero();
    Real alpha_max = Real(0.99);
    Real min_transmittance = Real(1e-4);
    bool early_termination = true;
    Real dilation = Real(0.3);   // px^2 added to the screen covariance diagonal
    Real near_plane = Real(0.01);
    Real cull_sigma = 3;         // whole-splat culling footprint
    Real support_sigma = 6;      // per-pixel evaluation footprint
    int tile_size = 16;
};

struct Splat2D {
    Index source = -1;
    Vec2 mean = Vec2::Zero();
    Mat2 covariance = Mat2::Identity();
    Vec3 conic = Vec3::Zero(); // inverse covariance (a, b, c) for [[a, b], [b, c]]
    Real depth = 0;
    Real opacity = 0;
    Vec3 color = Vec3::Zero();
    Real radius = 0;           // support_sigma * sqrt(largest eigenvalue), px
};

// Perspective projection with the first-order covariance approximation,
// plus dilation. Returns nullopt when culled.
std::optional<Splat2D> project(const Gaussian& g, const CameraView& cam, const RenderConfig& cfg = {});

// Screen density exp(-0.5 d^T conic d) at pixel coordinate p.
Real splat_density(const Splat2D& s, const Vec2& p);

// Front-to-back compositing at one pixel coordinate over depth-sorted splats.
Vec3 composite(const std::vector<Splat2D>& sorted, const Vec2& pixel, const RenderConfig& cfg = {});

// Global stable depth order of visible splats; equal depths keep source order.
std::vector<Splat2D> project_all(const GaussianSet& set, const CameraView& cam, const RenderConfig& cfg = {});

struct RenderedImage {
    Image color;
    Vec alpha;       // accumulated opacity per pixel
    Vec screen_grad; // per Gaussian |dL/d mean2d| in NDC units, filled by backward
    Vec hits;        // 1 for Gaussians that survived culling
};

// Forward-only render of a set.
RenderedImage render(const GaussianSet& set, const CameraView& cam, const RenderConfig& cfg = {});

struct RenderOutput {
    ad::Value image; // (H*W) x 3, row y*W + x
    std::shared_ptr<RenderedImage> result;
};

// Differentiable render. Inputs are N x 3 centers, N x 3 log-scales,
// N x 4 quaternions, N x 1 opacity logits and N x 3 colors; centers may be
// any tape expression (e.g. pulled centers). Screen-gradient statistics are
// written into `result` when the tape runs backward.
RenderOutput render(ad::Tape& tape, const GaussianLeaves& leaves, const CameraView& cam, const RenderConfig& cfg = {});

} // namespace gspull
