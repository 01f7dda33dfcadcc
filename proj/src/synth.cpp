#include "gspull/synth.hpp"

#include "gspull/binio.hpp"
#include "gspull/losses.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace gspull {

using nlohmann::json;

// --- shapes -------------------------------------------------------------------

AnalyticShape AnalyticShape::sphere(Real radius, const Vec3& center) {
    AnalyticShape s;
    s.kind = Kind::Sphere;
    s.radius = radius;
    s.center = center;
    return s;
}

AnalyticShape AnalyticShape::box(const Vec3& half_extents, const Vec3& center) {
    AnalyticShape s;
    s.kind = Kind::Box;
    s.half_extents = half_extents;
    s.center = center;
    return s;
}

AnalyticShape AnalyticShape::torus(Real major_radius, Real minor_radius, const Vec3& center) {
    AnalyticShape s;
    s.kind = Kind::Torus;
    s.major_radius = major_radius;
    s.radius = minor_radius;
    s.center = center;
    return s;
}

AnalyticShape AnalyticShape::union_of(AnalyticShape a, AnalyticShape b) {
    AnalyticShape s;
    s.kind = Kind::Union;
    s.parts = {std::move(a), std::move(b)};
    return s;
}

AnalyticShape AnalyticShape::preset(const std::string& name) {
    if (name == "sphere") {
        auto s = sphere(0.5);
        s.albedo = Vec3(0.8, 0.55, 0.35);
        return s;
    }
    if (name == "box") {
        auto s = box(Vec3(0.45, 0.35, 0.3));
        s.albedo = Vec3(0.35, 0.6, 0.8);
        return s;
    }
    if (name == "torus") {
        auto s = torus(0.5, 0.2);
        s.albedo = Vec3(0.7, 0.7, 0.3);
        return s;
    }
    if (name == "sphere-union") {
        auto a = sphere(0.42, Vec3(-0.2, 0, 0));
        a.albedo = Vec3(0.8, 0.45, 0.3);
        auto b = sphere(0.32, Vec3(0.35, 0.12, 0.05));
        b.albedo = Vec3(0.3, 0.55, 0.8);
        return union_of(a, b);
    }
    throw std::invalid_argument("unknown shape preset '" + name + "' (expected sphere, box, torus or sphere-union)");
}

std::string to_string(AnalyticShape::Kind kind) {
    switch (kind) {
    case AnalyticShape::Kind::Sphere: return "sphere";
    case AnalyticShape::Kind::Box: return "box";
    case AnalyticShape::Kind::Torus: return "torus";
    case AnalyticShape::Kind::Union: return "union";
    }
    return "unknown";
}

AnalyticShape::Kind parse_shape_kind(const std::string& name) {
    for (auto k : {AnalyticShape::Kind::Sphere, AnalyticShape::Kind::Box, AnalyticShape::Kind::Torus,
                   AnalyticShape::Kind::Union})
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown shape kind '" + name + "'");
}

Bounds AnalyticShape::extent() const {
    switch (kind) {
    case Kind::Sphere: return {center.array() - radius, center.array() + radius};
    case Kind::Box: return {center - half_extents, center + half_extents};
    case Kind::Torus: {
        const Vec3 e(major_radius + radius, major_radius + radius, radius);
        return {center - e, center + e};
    }
    case Kind::Union: {
        if (parts.size() != 2) throw std::invalid_argument("union shape needs exactly two parts");
        const Bounds a = parts[0].extent(), b = parts[1].extent();
        return {a.lo.cwiseMin(b.lo), a.hi.cwiseMax(b.hi)};
    }
    }
    return {};
}

void AnalyticShape::validate() const {
    const std::string what = "invalid " + to_string(kind) + " shape: ";
    switch (kind) {
    case Kind::Sphere:
        if (!(radius > 0)) throw std::invalid_argument(what + "radius must be positive");
        break;
    case Kind::Box:
        if (!(half_extents.minCoeff() > 0)) throw std::invalid_argument(what + "half extents must be positive");
        break;
    case Kind::Torus:
        if (!(radius > 0 && major_radius > radius))
            throw std::invalid_argument(what + "need 0 < tube radius < ring radius");
        break;
    case Kind::Union:
        if (parts.size() != 2) throw std::invalid_argument(what + "needs exactly two parts");
        for (const auto& p : parts) p.validate();
        break;
    }
    if (!(albedo.minCoeff() >= 0 && albedo.maxCoeff() <= 1)) throw std::invalid_argument(what + "albedo outside [0, 1]");
    const Bounds e = extent();
    if (!(e.lo.minCoeff() >= Real(-0.8) && e.hi.maxCoeff() <= Real(0.8)))
        throw std::invalid_argument(what + "does not fit in [-0.8, 0.8]^3");
}

namespace {

// Index of the union part nearest to q.
std::size_t nearest_part(const AnalyticShape& s, const Vec3& q) {
    return analytic_sdf(s.parts[1], q) < analytic_sdf(s.parts[0], q) ? 1 : 0;
}

} // namespace

Real analytic_sdf(const AnalyticShape& s, const Vec3& q) {
    const Vec3 p = q - s.center;
    switch (s.kind) {
    case AnalyticShape::Kind::Sphere: return p.norm() - s.radius;
    case AnalyticShape::Kind::Box: {
        const Vec3 d = p.cwiseAbs() - s.half_extents;
        return d.cwiseMax(Real(0)).norm() + std::min(d.maxCoeff(), Real(0));
    }
    case AnalyticShape::Kind::Torus: {
        const Vec2 v(std::hypot(p.x(), p.y()) - s.major_radius, p.z());
        return v.norm() - s.radius;
    }
    case AnalyticShape::Kind::Union: return std::min(analytic_sdf(s.parts[0], q), analytic_sdf(s.parts[1], q));
    }
    return 0;
}

Vec3 analytic_gradient(const AnalyticShape& s, const Vec3& q) {
    const Vec3 p = q - s.center;
    switch (s.kind) {
    case AnalyticShape::Kind::Sphere: {
        const Real n = p.norm();
        return n > 0 ? Vec3(p / n) : Vec3(Vec3::Zero());
    }
    case AnalyticShape::Kind::Box: {
        const Vec3 d = p.cwiseAbs() - s.half_extents;
        const Vec3 sign = p.unaryExpr([](Real v) { return v < 0 ? Real(-1) : Real(1); });
        if (d.maxCoeff() > 0) {
            const Vec3 out = d.cwiseMax(Real(0));
            return sign.cwiseProduct(out) / out.norm();
        }
        Index axis;
        d.maxCoeff(&axis);
        Vec3 g = Vec3::Zero();
        g(axis) = sign(axis);
        return g;
    }
    case AnalyticShape::Kind::Torus: {
        const Real rho = std::hypot(p.x(), p.y());
        const Vec2 v(rho - s.major_radius, p.z());
        const Real n = v.norm();
        if (!(n > 0)) return Vec3::Zero();
        const Vec2 radial = rho > 0 ? Vec2(p.x() / rho, p.y() / rho) : Vec2(1, 0);
        return Vec3(v.x() / n * radial.x(), v.x() / n * radial.y(), v.y() / n);
    }
    case AnalyticShape::Kind::Union: return analytic_gradient(s.parts[nearest_part(s, q)], q);
    }
    return Vec3::Zero();
}

Vec3 analytic_albedo(const AnalyticShape& s, const Vec3& q) {
    if (s.kind == AnalyticShape::Kind::Union) return analytic_albedo(s.parts[nearest_part(s, q)], q);
    return s.albedo;
}

BatchField analytic_field(const AnalyticShape& shape) {
    return batch_field([shape](const Vec3& q) { return analytic_sdf(shape, q); });
}

// --- rendering ----------------------------------------------------------------

void pixel_ray(const CameraView& cam, int x, int y, Vec3& origin, Vec3& direction) {
    const Vec3 d((Real(x) + Real(0.5) - cam.cx) / cam.fx, (Real(y) + Real(0.5) - cam.cy) / cam.fy, 1);
    origin = cam.center();
    direction = (cam.rotation.transpose() * d).normalized();
}

Image render_analytic(const AnalyticShape& shape, const CameraView& cam, const ShadingConfig& shading, Index* hits) {
    cam.validate();
    Image img(cam.width, cam.height, shading.background);
    const Vec3 light = shading.light_direction.normalized();
    const Real far = cam.center().norm() + 4;
    Index count = 0;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            Vec3 o, d;
            pixel_ray(cam, x, y, o, d);
            Real t = 0;
            for (int step = 0; step < shading.max_steps && t < far; ++step) {
                const Vec3 p = o + t * d;
                const Real f = analytic_sdf(shape, p);
                if (f < shading.hit_threshold) {
                    const Vec3 n = analytic_gradient(shape, p);
                    const Real lambert = std::max(Real(0), n.dot(light));
                    img.set(x, y, (analytic_albedo(shape, p) * std::min(Real(1), shading.ambient + lambert)));
                    ++count;
                    break;
                }
                t += f;
            }
        }
    if (hits) *hits = count;
    return img;
}

// --- scenes -------------------------------------------------------------------

std::vector<const CameraView*> Dataset::train_views() const {
    std::vector<const CameraView*> out;
    for (std::size_t i = 0; i < views.size(); ++i)
        if (!holdout[i]) out.push_back(&views[i]);
    return out;
}

std::vector<const CameraView*> Dataset::holdout_views() const {
    std::vector<const CameraView*> out;
    for (std::size_t i = 0; i < views.size(); ++i)
        if (holdout[i]) out.push_back(&views[i]);
    return out;
}

void Dataset::validate() const {
    if (holdout.size() != views.size()) throw std::invalid_argument("dataset split has wrong length");
    for (const auto& v : views) v.validate();
    if (shape) shape->validate();
    if (reference_mesh) reference_mesh->validate();
}

std::vector<Vec3> fibonacci_directions(int n, Real azimuth) {
    std::vector<Vec3> dirs;
    const Real golden = std::numbers::pi * (3 - std::sqrt(Real(5)));
    for (int i = 0; i < n; ++i) {
        const Real z = 1 - (2 * Real(i) + 1) / Real(n);
        const Real r = std::sqrt(std::max(Real(0), 1 - z * z));
        const Real phi = golden * Real(i) + azimuth;
        dirs.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
    }
    return dirs;
}

Points sample_surface(const AnalyticShape& shape, Index n, std::uint64_t seed) {
    shape.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Real> u(-1, 1);
    Points out(n, 3);
    Index filled = 0;
    for (Index attempts = 0; filled < n; ++attempts) {
        if (attempts > 100 * n + 1000) throw std::runtime_error("surface sampling rejected too many points");
        const Vec3 q(u(rng), u(rng), u(rng));
        const Vec3 p = pull_point([&](const Vec3& x) { return analytic_sdf(shape, x); },
                                  [&](const Vec3& x) { return analytic_gradient(shape, x); }, q);
        if (std::abs(analytic_sdf(shape, p)) < Real(1e-9)) out.row(filled++) = p.transpose();
    }
    return out;
}

Dataset make_scene(const AnalyticShape& shape, const SceneConfig& cfg) {
    shape.validate();
    if (cfg.n_views < 2) throw std::invalid_argument("make_scene: need at least 2 views, got " + std::to_string(cfg.n_views));
    if (cfg.image_size < 8) throw std::invalid_argument("make_scene: image size must be at least 8");
    std::mt19937_64 rng(cfg.seed);
    const Real azimuth = std::uniform_real_distribution<Real>(0, 2 * std::numbers::pi)(rng);

    Dataset data;
    data.shape = shape;
    data.background = cfg.shading.background;
    const auto dirs = fibonacci_directions(cfg.n_views, azimuth);
    for (int i = 0; i < cfg.n_views; ++i) {
        CameraView cam = CameraView::look_at(cfg.camera_radius * dirs[std::size_t(i)], Vec3::Zero(), Vec3::UnitZ(),
                                             cfg.focal_factor * Real(cfg.image_size), cfg.image_size, cfg.image_size);
        std::ostringstream name;
        name << "view_" << std::setw(3) << std::setfill('0') << i;
        cam.name = name.str();
        Index hits = 0;
        cam.image = render_analytic(shape, cam, cfg.shading, &hits).quantized();
        if (hits == 0) throw std::runtime_error("make_scene: view " + cam.name + " does not see the shape");
        data.views.push_back(std::move(cam));
    }

    std::vector<std::size_t> order(data.views.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_holdout = std::size_t(std::clamp<long>(std::lround(cfg.holdout_fraction * Real(cfg.n_views)), 1,
                                                        cfg.n_views - 1));
    data.holdout.assign(data.views.size(), false);
    for (std::size_t k = 0; k < n_holdout; ++k) data.holdout[order[k]] = true;

    if (cfg.mesh_resolution > 0) data.reference_mesh = marching_cubes(analytic_field(shape), default_bounds(), cfg.mesh_resolution);
    if (cfg.reference_samples > 0) data.reference_samples = sample_surface(shape, cfg.reference_samples, cfg.seed + 1);
    return data;
}

GaussianSet init_gaussians(const Dataset& data, const InitConfig& cfg) {
    if (cfg.count < 1) throw std::invalid_argument("init_gaussians: need at least one Gaussian");
    std::mt19937_64 rng(cfg.seed);
    Points centers(cfg.count, 3);
    const Index m = data.reference_samples.rows();
    if (m > 0) {
        std::vector<Index> pick(static_cast<std::size_t>(m));
        std::iota(pick.begin(), pick.end(), 0);
        std::shuffle(pick.begin(), pick.end(), rng);
        std::uniform_int_distribution<Index> any(0, m - 1);
        std::normal_distribution<Real> noise(0, cfg.noise_std);
        for (Index i = 0; i < cfg.count; ++i) {
            const Index j = i < m ? pick[std::size_t(i)] : any(rng);
            const Vec3 offset = cfg.noise_std > 0 ? Vec3(noise(rng), noise(rng), noise(rng)) : Vec3(Vec3::Zero());
            centers.row(i) = data.reference_samples.row(j) + offset.transpose();
        }
    } else {
        std::uniform_real_distribution<Real> u(-0.8, 0.8);
        for (Index i = 0; i < cfg.count; ++i) centers.row(i) << u(rng), u(rng), u(rng);
    }
    Real scale = Real(0.05);
    if (cfg.count > 1) {
        const Vec nn = kth_neighbor_distances(centers, 1);
        scale = std::max(nn.mean(), Real(1e-4));
    }
    std::vector<Gaussian> gs(static_cast<std::size_t>(cfg.count));
    for (Index i = 0; i < cfg.count; ++i) {
        Gaussian& g = gs[static_cast<std::size_t>(i)];
        g.center = centers.row(i).transpose();
        g.log_scales = Vec3::Constant(std::log(scale));
        g.opacity_logit = logit(cfg.opacity);
        g.color = cfg.color;
    }
    return GaussianSet(gs);
}

// --- dataset I/O --------------------------------------------------------------

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json shape_json(const AnalyticShape& s) {
    json j{{"kind", to_string(s.kind)}, {"albedo", vec_json(s.albedo)}};
    switch (s.kind) {
    case AnalyticShape::Kind::Sphere: j["center"] = vec_json(s.center); j["radius"] = s.radius; break;
    case AnalyticShape::Kind::Box: j["center"] = vec_json(s.center); j["half_extents"] = vec_json(s.half_extents); break;
    case AnalyticShape::Kind::Torus:
        j["center"] = vec_json(s.center);
        j["major_radius"] = s.major_radius;
        j["minor_radius"] = s.radius;
        break;
    case AnalyticShape::Kind::Union: j["parts"] = json::array({shape_json(s.parts[0]), shape_json(s.parts[1])}); break;
    }
    return j;
}

struct ManifestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const json& field(const json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw ManifestError(where + ": missing '" + key + "'");
    return j.at(key);
}

Real number(const json& j, const char* key, const std::string& where) {
    const json& v = field(j, key, where);
    if (!v.is_number()) throw ManifestError(where + ": '" + key + "' must be a number");
    return v.get<Real>();
}

Vec3 vec3(const json& j, const char* key, const std::string& where) {
    const json& v = field(j, key, where);
    if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number())
        throw ManifestError(where + ": '" + key + "' must be an array of 3 numbers");
    return Vec3(v[0].get<Real>(), v[1].get<Real>(), v[2].get<Real>());
}

AnalyticShape shape_from(const json& j, const std::string& where) {
    AnalyticShape s;
    s.kind = parse_shape_kind(field(j, "kind", where).get<std::string>());
    if (j.contains("albedo")) s.albedo = vec3(j, "albedo", where);
    switch (s.kind) {
    case AnalyticShape::Kind::Sphere: s.center = vec3(j, "center", where); s.radius = number(j, "radius", where); break;
    case AnalyticShape::Kind::Box: s.center = vec3(j, "center", where); s.half_extents = vec3(j, "half_extents", where); break;
    case AnalyticShape::Kind::Torus:
        s.center = vec3(j, "center", where);
        s.major_radius = number(j, "major_radius", where);
        s.radius = number(j, "minor_radius", where);
        break;
    case AnalyticShape::Kind::Union: {
        const json& parts = field(j, "parts", where);
        if (!parts.is_array() || parts.size() != 2) throw ManifestError(where + ": union needs two parts");
        s.parts = {shape_from(parts[0], where + ".parts[0]"), shape_from(parts[1], where + ".parts[1]")};
        break;
    }
    }
    return s;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

constexpr char kPointsMagic[9] = "GSPLPNTS";

void save_points(const Points& p, const std::filesystem::path& path) {
    io::Writer w;
    w.magic(kPointsMagic);
    w.u64(std::uint64_t(p.rows()));
    for (Index i = 0; i < p.size(); ++i) w.f64(double(p.data()[i]));
    w.save(path);
}

Points load_points(const std::filesystem::path& path) {
    auto r = io::Reader::open(path);
    r.expect_magic(kPointsMagic);
    const std::uint64_t n = r.u64("point count");
    if (n > r.remaining() / 24) throw io::FormatError("point count exceeds file size", r.offset());
    Points p(Index(n), 3);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = Real(r.f64("point coordinate"));
    r.expect_end();
    return p;
}

} // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    data.validate();
    std::filesystem::create_directories(dir / "images");
    json frames = json::array();
    for (std::size_t i = 0; i < data.views.size(); ++i) {
        const CameraView& v = data.views[i];
        if (!v.image) throw std::invalid_argument("save_dataset: view " + v.name + " has no image");
        const std::string name = (v.name.empty() ? "view_" + std::to_string(i) : v.name) + ".png";
        write_png(*v.image, dir / "images" / name);
        json m = json::array();
        for (int r = 0; r < 3; ++r)
            m.push_back({v.rotation(r, 0), v.rotation(r, 1), v.rotation(r, 2), v.translation(r)});
        m.push_back({0.0, 0.0, 0.0, 1.0});
        frames.push_back({{"name", v.name},
                          {"file_path", "images/" + name},
                          {"split", data.holdout[i] ? "holdout" : "train"},
                          {"width", v.width},
                          {"height", v.height},
                          {"fx", v.fx},
                          {"fy", v.fy},
                          {"cx", v.cx},
                          {"cy", v.cy},
                          {"world_to_camera", m}});
    }
    json manifest{{"format", "gspull-dataset"},
                  {"version", 1},
                  {"normalization", {{"scale", data.transform.scale}, {"offset", vec_json(data.transform.offset)}}},
                  {"background", vec_json(data.background)},
                  {"frames", frames}};
    if (data.shape) manifest["shape"] = shape_json(*data.shape);
    if (data.reference_mesh) {
        export_mesh(*data.reference_mesh, dir / "reference.ply", MeshFormat::Ply);
        manifest["reference_mesh"] = "reference.ply";
    }
    if (data.reference_samples.rows() > 0) {
        save_points(data.reference_samples, dir / "reference_samples.bin");
        manifest["reference_samples"] = "reference_samples.bin";
    }
    std::ofstream out(dir / "transforms.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + (dir / "transforms.json").string());
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + (dir / "transforms.json").string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    const std::filesystem::path file = std::filesystem::is_directory(path) ? path / "transforms.json" : path;
    const std::filesystem::path base = file.parent_path();
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open dataset manifest: " + file.string());
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + std::ptrdiff_t(upto), '\n');
        throw std::runtime_error(file.string() + ":" + std::to_string(line) + ": malformed manifest: " + e.what());
    }

    Dataset data;
    try {
        if (!j.is_object() || j.value("format", "") != "gspull-dataset")
            throw ManifestError("not a gspull dataset manifest");
        if (j.contains("normalization")) {
            const json& n = j["normalization"];
            data.transform.scale = number(n, "scale", "normalization");
            data.transform.offset = vec3(n, "offset", "normalization");
        }
        if (j.contains("background")) data.background = vec3(j, "background", "manifest");
        if (j.contains("shape")) data.shape = shape_from(j["shape"], "shape");
        const json& frames = field(j, "frames", "manifest");
        if (!frames.is_array()) throw ManifestError("'frames' must be an array");
        for (std::size_t i = 0; i < frames.size(); ++i) {
            const json& f = frames[i];
            const std::string where = "frame " + std::to_string(i);
            CameraView v;
            v.name = f.value("name", "view_" + std::to_string(i));
            v.width = int(number(f, "width", where));
            v.height = int(number(f, "height", where));
            v.fx = number(f, "fx", where);
            v.fy = number(f, "fy", where);
            v.cx = number(f, "cx", where);
            v.cy = number(f, "cy", where);
            const json& m = field(f, "world_to_camera", where);
            if (!m.is_array() || m.size() < 3) throw ManifestError(where + ": world_to_camera must be 3x4 or 4x4");
            for (int r = 0; r < 3; ++r) {
                if (!m[std::size_t(r)].is_array() || m[std::size_t(r)].size() != 4)
                    throw ManifestError(where + ": world_to_camera rows must have 4 entries");
                for (int c = 0; c < 3; ++c) v.rotation(r, c) = m[std::size_t(r)][std::size_t(c)].get<Real>();
                v.translation(r) = m[std::size_t(r)][3].get<Real>();
            }
            const std::string split = f.value("split", "train");
            if (split != "train" && split != "holdout") throw ManifestError(where + ": unknown split '" + split + "'");
            const auto image_path = resolve(base, field(f, "file_path", where).get<std::string>());
            if (!std::filesystem::exists(image_path)) throw ManifestError(where + ": missing image file " + image_path.string());
            v.image = read_image(image_path);
            v.validate();
            data.views.push_back(std::move(v));
            data.holdout.push_back(split == "holdout");
        }
        if (j.contains("reference_mesh")) data.reference_mesh = import_mesh(resolve(base, j["reference_mesh"].get<std::string>()));
        if (j.contains("reference_samples"))
            data.reference_samples = load_points(resolve(base, j["reference_samples"].get<std::string>()));
    } catch (const json::exception& e) {
        throw std::runtime_error(file.string() + ": invalid manifest: " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error(file.string() + ": " + e.what());
    }
    return data;
}

} // namespace gspull
