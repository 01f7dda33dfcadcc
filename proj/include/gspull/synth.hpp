#pragma once

#include "gspull/gauss.hpp"
#include "gspull/image.hpp"
#include "gspull/rasterizer.hpp"
#include "gspull/surface.hpp"
#include "gspull/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gspull {

struct AnalyticShape {
    enum class Kind { Sphere, Box, Torus, Union };

    Kind kind = Kind::Sphere;
    Vec3 center = Vec3::Zero();
    Real radius = Real(0.5);                   // sphere radius, torus tube radius
    Real major_radius = 0;                     // torus ring radius, axis +z
    Vec3 half_extents = Vec3::Constant(Real(0.5));
    Vec3 albedo = Vec3::Constant(Real(0.7));
    std::vector<AnalyticShape> parts;          // exactly two for Union

    static AnalyticShape sphere(Real radius, const Vec3& center = Vec3::Zero());
    static AnalyticShape box(const Vec3& half_extents, const Vec3& center = Vec3::Zero());
    static AnalyticShape torus(Real major_radius, Real minor_radius, const Vec3& center = Vec3::Zero());
    static AnalyticShape union_of(AnalyticShape a, AnalyticShape b);

    // Named scenes: sphere, box, torus, sphere-union.
    static AnalyticShape preset(const std::string& name);

    // Positive parameters, two union parts, and the shape inside [-0.8, 0.8]^3.
    void validate() const;
    // Axis-aligned bounds of the solid.
    Bounds extent() const;
};

std::string to_string(AnalyticShape::Kind kind);
AnalyticShape::Kind parse_shape_kind(const std::string& name);

// Exact signed distance; unions take the minimum of their parts.
Real analytic_sdf(const AnalyticShape& shape, const Vec3& q);
// Gradient of analytic_sdf, unit length away from the medial axis.
Vec3 analytic_gradient(const AnalyticShape& shape, const Vec3& q);
// Albedo of the part closest to q.
Vec3 analytic_albedo(const AnalyticShape& shape, const Vec3& q);
BatchField analytic_field(const AnalyticShape& shape);

struct ShadingConfig {
    Vec3 light_direction = Vec3(Real(0.35), Real(-0.45), Real(0.82)).normalized(); // toward the light
    Real ambient = Real(0.2);
    Vec3 background = Vec3::Zero();
    int max_steps = 64;
    Real hit_threshold = Real(1e-4);
};

// Sphere-traced Lambertian image; `hits` receives the number of surface pixels.
Image render_analytic(const AnalyticShape& shape, const CameraView& cam, const ShadingConfig& shading,
                      Index* hits = nullptr);

// Ray through the center of pixel (x, y), in world coordinates.
void pixel_ray(const CameraView& cam, int x, int y, Vec3& origin, Vec3& direction);

struct SceneConfig {
    int n_views = 30;
    int image_size = 64;
    std::uint64_t seed = 0;
    Real camera_radius = Real(2.5);
    Real focal_factor = Real(1.2); // focal length = factor * width
    Real holdout_fraction = Real(0.1);
    int mesh_resolution = 256;
    Index reference_samples = 100000;
    ShadingConfig shading;
};

struct Dataset {
    std::vector<CameraView> views;
    std::vector<bool> holdout; // one flag per view
    SceneTransform transform;
    Vec3 background = Vec3::Zero();
    std::optional<AnalyticShape> shape;
    std::optional<TriangleMesh> reference_mesh;
    Points reference_samples = Points(0, 3);

    std::vector<const CameraView*> train_views() const;
    std::vector<const CameraView*> holdout_views() const;
    void validate() const;
};

// Unit directions on a Fibonacci spiral, rotated about z by `azimuth`.
std::vector<Vec3> fibonacci_directions(int n, Real azimuth = 0);

Dataset make_scene(const AnalyticShape& shape, const SceneConfig& cfg);

// Surface points by pulling uniform samples of [-1, 1]^3 onto the surface and
// rejecting those that do not land within 1e-9 of it.
Points sample_surface(const AnalyticShape& shape, Index n, std::uint64_t seed);

struct InitConfig {
    Index count = 5000;
    Real noise_std = Real(0.05);
    std::uint64_t seed = 0;
    Real opacity = Real(0.1);
    Vec3 color = Vec3::Constant(Real(0.5));
};

// Centers from reference samples plus isotropic noise, or uniform in
// [-0.8, 0.8]^3 when the dataset has none.
GaussianSet init_gaussians(const Dataset& data, const InitConfig& cfg);

// Manifest `transforms.json` next to PNG images:
//   {"format": "gspull-dataset", "version": 1,
//    "normalization": {"scale": s, "offset": [x, y, z]}, "background": [r, g, b],
//    "shape": {...} (optional), "reference_mesh": "reference.ply" (optional),
//    "reference_samples": "reference_samples.ply" (optional),
//    "frames": [{"file_path": "images/000.png", "split": "train" | "holdout",
//                "width": w, "height": h, "fx": ., "fy": ., "cx": ., "cy": .,
//                "world_to_camera": 4x4 row-major nested array}, ...]}
// Relative paths resolve against the manifest directory.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& path); // directory or manifest file

} // namespace gspull
