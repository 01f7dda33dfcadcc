// Acceptance checks. Prints one PASS/FAIL line per criterion; exits nonzero if any fail.
// Usage: acceptance [criterion numbers...]   (default: all)

#include "gspull/losses.hpp"
#include "gspull/metrics.hpp"
#include "gspull/rasterizer.hpp"
#include "gspull/sdfnet.hpp"
#include "gspull/surface.hpp"
#include "gspull/synth.hpp"
#include "gspull/trainer.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

using namespace gspull;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

Vec4 random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<Real> n(0, 1);
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

std::vector<Gaussian> random_scene(std::mt19937_64& rng, int n, Real extent, Real log_scale_lo, Real log_scale_hi,
                                   Real max_opacity) {
    std::uniform_real_distribution<Real> u(-1, 1), s(log_scale_lo, log_scale_hi), o(0.1, max_opacity), c(0, 1);
    std::vector<Gaussian> gs;
    for (int i = 0; i < n; ++i) {
        Gaussian g;
        g.center = extent * Vec3(u(rng), u(rng), u(rng));
        g.log_scales = Vec3(s(rng), s(rng), s(rng));
        g.rotation = random_quaternion(rng);
        g.opacity_logit = logit(o(rng));
        g.color = Vec3(c(rng), c(rng), c(rng));
        gs.push_back(g);
    }
    return gs;
}

// ---------------------------------------------------------------------------------------------------------------

void criterion_gradients(Outcome& o) {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<Real> u(-0.4, 0.4);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 4; ++i) {
        Gaussian g;
        g.center = Vec3(u(rng), u(rng), u(rng));
        g.log_scales = Vec3(-1.6, -1.9, -2.6) + Vec3::Constant(0.07 * i);
        g.rotation = random_quaternion(rng);
        g.opacity_logit = logit(0.6);
        g.color = Vec3(0.3 + 0.1 * i, 0.5, 0.7);
        gs.push_back(g);
    }
    GaussianSet set(gs);
    SdfNetwork net = SdfNetwork::init_sphere(3, 8, 0.3, 7);
    Mat queries(6, 3);
    for (Index i = 0; i < queries.size(); ++i) queries.data()[i] = u(rng);
    const CameraView cam = CameraView::look_at(Vec3(0.3, -0.2, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 9.6, 8, 8);
    RenderConfig rcfg;
    rcfg.early_termination = false;
    rcfg.background = Vec3(0.2, 0.3, 0.4);
    Image target(8, 8);
    for (Index i = 0; i < target.pixels.size(); ++i) target.pixels.data()[i] = std::abs(u(rng));

    std::vector<ad::Parameter*> params = net.parameters();
    for (auto* p : set.parameters()) params.push_back(p);
    const auto span = std::span<ad::Parameter* const>(params);

    struct Setup {
        GaussianLeaves leaves;
        PullResult centers;
        PullResult queries;
        std::vector<Index> assign;
    };
    auto setup = [&](ad::Tape& t) {
        Setup s;
        s.leaves = bind(t, set);
        s.centers = pull(t, net, s.leaves.centers);
        s.queries = pull(t, net, t.constant(queries));
        s.assign = NearestCenters(Points(s.centers.points.value())).query(Points(s.queries.points.value()));
        return s;
    };
    const std::vector<std::pair<std::string, ad::ScalarFn<Real>>> terms = {
        {"splatting",
         [&](ad::Tape& t) {
             Setup s = setup(t);
             GaussianLeaves pulled = s.leaves;
             pulled.centers = s.centers.points;
             return loss_splatting(t, render(t, pulled, cam, rcfg).image, target);
         }},
        {"rasterizer",
         [&](ad::Tape& t) {
             const RenderOutput out = render(t, bind(t, set), cam, rcfg);
             return ad::mean(ad::abs(out.image - t.constant(target.pixels)));
         }},
        {"thin", [&](ad::Tape& t) { return loss_thin(t, bind(t, set).log_scales); }},
        {"tangent",
         [&](ad::Tape& t) {
             Setup s = setup(t);
             const SdfEval at = eval_grad(t, net, s.centers.points);
             return loss_tangent(t, at.grad, disk_normals(s.leaves.rotations, s.leaves.log_scales));
         }},
        {"pull",
         [&](ad::Tape& t) {
             Setup s = setup(t);
             const std::span<const Index> a(s.assign);
             return loss_pull(s.queries.points, ad::gather_rows(s.centers.points, a),
                              ad::gather_rows(s.leaves.rotations, a), ad::gather_rows(s.leaves.log_scales, a));
         }},
        {"orthogonal",
         [&](ad::Tape& t) {
             Setup s = setup(t);
             const ad::Value n = disk_normals(s.leaves.rotations, s.leaves.log_scales);
             return loss_orthogonal(t, s.queries.grad, ad::gather_rows(n, std::span<const Index>(s.assign)));
         }},
        {"eikonal", [&](ad::Tape& t) { return loss_eikonal(eval_grad(t, net, t.constant(queries)).grad); }},
    };
    Real worst = 0;
    std::string worst_term;
    for (const auto& [name, fn] : terms) {
        const auto rep = ad::grad_check_report<Real>(fn, span, Real(1e-6));
        if (!(rep.max_relative_error <= worst)) {
            worst = rep.max_relative_error;
            worst_term = name;
        }
        o.require(rep.max_relative_error < 1e-4, name + " relative error " + std::to_string(rep.max_relative_error));
    }
    o.detail << "worst relative error " << worst << " (" << worst_term << ")";
}

// ---------------------------------------------------------------------------------------------------------------

Vec3 brute_force_pixel(const std::vector<Gaussian>& gs, const CameraView& cam, const RenderConfig& cfg, Real px, Real py) {
    struct Item {
        Real depth;
        std::size_t index;
        Vec2 mean;
        Mat2 cov;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < gs.size(); ++i) {
        const Vec3 t = cam.rotation * gs[i].center + cam.translation;
        Eigen::Matrix<Real, 2, 3> j;
        j << cam.fx / t.z(), 0, -cam.fx * t.x() / (t.z() * t.z()), 0, cam.fy / t.z(), -cam.fy * t.y() / (t.z() * t.z());
        Mat2 cov = j * cam.rotation * covariance(gs[i]) * cam.rotation.transpose() * j.transpose();
        cov += cfg.dilation * Mat2::Identity();
        items.push_back({t.z(), i, Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy), cov});
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    Vec3 color = Vec3::Zero();
    Real transmittance = 1;
    for (const auto& it : items) {
        const Vec2 d = Vec2(px, py) - it.mean;
        const Real alpha = std::min(cfg.alpha_max, gs[it.index].opacity() * std::exp(-0.5 * d.dot(it.cov.inverse() * d)));
        color += transmittance * alpha * gs[it.index].color;
        transmittance *= 1 - alpha;
    }
    return color + transmittance * cfg.background;
}

void criterion_compositing(Outcome& o) {
    std::mt19937_64 rng(202);
    const CameraView cam = CameraView::look_at(Vec3(0.4, -0.3, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 40, 32, 32);
    RenderConfig cfg;
    cfg.early_termination = false;
    cfg.background = Vec3(0.1, 0.2, 0.3);
    Real worst = 0;
    for (int scene = 0; scene < 50; ++scene) {
        const auto gs = random_scene(rng, 1 + scene % 8, 0.3, -2.5, -1.2, 0.95);
        const Image img = render(GaussianSet(gs), cam, cfg).color;
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x)
                worst = std::max(worst, (img.at(x, y) - brute_force_pixel(gs, cam, cfg, x + 0.5, y + 0.5)).cwiseAbs().maxCoeff());
    }
    o.detail << "50 scenes, max per-pixel difference " << worst;
    o.require(worst < 1e-6, "difference >= 1e-6");
}

// ---------------------------------------------------------------------------------------------------------------

void criterion_pulling(Outcome& o) {
    struct Field {
        std::string name;
        std::function<Real(const Vec3&)> f;
        std::function<Vec3(const Vec3&)> g;
        std::function<bool(const Vec3&)> off_medial;
    };
    const AnalyticShape sphere = AnalyticShape::sphere(0.5);
    const AnalyticShape box = AnalyticShape::box(Vec3(0.45, 0.35, 0.3));
    const Vec3 plane_n = Vec3(1, 2, 2).normalized();
    const std::vector<Field> fields = {
        {"sphere", [&](const Vec3& q) { return analytic_sdf(sphere, q); },
         [&](const Vec3& q) { return analytic_gradient(sphere, q); }, [](const Vec3& q) { return q.norm() > 1e-3; }},
        {"box", [&](const Vec3& q) { return analytic_sdf(box, q); }, [&](const Vec3& q) { return analytic_gradient(box, q); },
         [&](const Vec3& q) {
             const Vec3 d = box.half_extents - q.cwiseAbs();
             if ((d.array() < 0).any()) return true;
             std::array<Real, 3> s{d.x(), d.y(), d.z()};
             std::sort(s.begin(), s.end());
             return s[1] - s[0] > 1e-3;
         }},
        {"plane", [&](const Vec3& q) { return plane_n.dot(q) - Real(0.1); }, [&](const Vec3&) { return plane_n; },
         [](const Vec3&) { return true; }},
    };
    std::mt19937_64 rng(303);
    std::uniform_real_distribution<Real> u(-1, 1);
    Real worst_f = 0, worst_idem = 0;
    int tested = 0;
    for (const auto& fd : fields) {
        int n = 0;
        while (n < 10000) {
            const Vec3 q(u(rng), u(rng), u(rng));
            if (!fd.off_medial(q)) continue;
            ++n;
            const Vec3 p = pull_point(fd.f, fd.g, q);
            worst_f = std::max(worst_f, std::abs(fd.f(p)));
            worst_idem = std::max(worst_idem, (pull_point(fd.f, fd.g, p) - p).norm());
        }
        tested += n;
    }
    o.detail << tested << " points on sphere, box and plane, max |f(pull q)| " << worst_f << ", max idempotence drift "
             << worst_idem;
    o.require(worst_f < 1e-9, "|f(pull q)| >= 1e-9");
    o.require(worst_idem < 1e-9, "pull not idempotent");
}

// ---------------------------------------------------------------------------------------------------------------

GaussianSet frozen_sphere_disks(const AnalyticShape& shape, Index n) {
    const Points p = sample_surface(shape, n, 4);
    const Real spacing = kth_neighbor_distances(p, 1).mean();
    std::vector<Gaussian> gs;
    for (Index i = 0; i < n; ++i) {
        Gaussian g;
        g.center = p.row(i).transpose();
        g.rotation = quaternion_from_z(analytic_gradient(shape, g.center));
        g.log_scales = Vec3(std::log(spacing), std::log(spacing), std::log(Real(1e-3)));
        g.opacity_logit = logit(0.9);
        gs.push_back(g);
    }
    return GaussianSet(gs);
}

void criterion_disks(Outcome& o) {
    const auto t0 = Clock::now();
    const AnalyticShape shape = AnalyticShape::preset("sphere");
    const GaussianSet disks = frozen_sphere_disks(shape, 500);
    const TriangleMesh reference = marching_cubes(analytic_field(shape), default_bounds(), 256);
    Real cd[2] = {0, 0};
    double runtime[2] = {0, 0};
    for (int to_centers = 0; to_centers < 2; ++to_centers) {
        const auto t1 = Clock::now();
        SdfNetwork net = SdfNetwork::init_sphere(4, 128, 0.5, 1);
        NetworkFitConfig cfg;
        cfg.iterations = 2000;
        cfg.pull_to_centers = to_centers;
        fit_network(net, disks, cfg);
        const TriangleMesh mesh = marching_cubes(batch_field(net), default_bounds(), 64);
        cd[to_centers] = mesh.empty() ? std::numeric_limits<Real>::infinity() : chamfer(mesh, reference, kDefaultMetricSamples, 1);
        runtime[to_centers] = seconds_since(t1);
    }
    o.detail << "disks CD " << cd[0] << ", pull-to-centers CD " << cd[1] << ", fit runtimes " << runtime[0] << " s and "
             << runtime[1] << " s";
    o.require(cd[0] < 0.02, "disks CD >= 0.02");
    o.require(cd[1] > cd[0], "pull-to-centers not worse");
    o.require(seconds_since(t0) < 600, "runtime >= 10 min");
}

// ---------------------------------------------------------------------------------------------------------------

struct PipelineResult {
    Real chamfer = 0;
    Real psnr = 0;
    Real aligned = 0;
    double seconds = 0;
};

const Dataset& desk_scene() {
    static const Dataset d = make_scene(AnalyticShape::preset("sphere-union"), SceneConfig{});
    return d;
}

PipelineResult run_pipeline(const TrainConfig& cfg) {
    const auto t0 = Clock::now();
    const Dataset& d = desk_scene();
    const TrainState s = fit(cfg, d);
    PipelineResult r;
    const TriangleMesh mesh = marching_cubes(batch_field(s.net), default_bounds(), 128);
    r.chamfer = mesh.empty() ? std::numeric_limits<Real>::infinity()
                             : chamfer(mesh, *d.reference_mesh, kDefaultMetricSamples, 1);
    GaussianSet shown = s.set;
    shown.centers.value = pulled_centers(s.net, Points(s.set.centers.value));
    RenderConfig rc;
    rc.background = s.background;
    int k = 0;
    for (const CameraView* v : d.holdout_views()) {
        r.psnr += psnr(render(shown, *v, rc).color, *v->image);
        ++k;
    }
    r.psnr /= std::max(k, 1);
    r.aligned = aligned_fraction(s.net, Points(s.set.centers.value), 0.01);
    r.seconds = seconds_since(t0);
    return r;
}

std::optional<PipelineResult> g_default_run;

const PipelineResult& default_run() {
    if (!g_default_run) g_default_run = run_pipeline(TrainConfig{});
    return *g_default_run;
}

void criterion_pipeline(Outcome& o) {
    const PipelineResult& r = default_run();
    o.detail << "CD " << r.chamfer << ", holdout PSNR " << r.psnr << " dB, aligned " << 100 * r.aligned << "%, runtime "
             << r.seconds << " s";
    o.require(r.chamfer < 0.05, "CD >= 0.05");
    o.require(r.psnr > 25, "PSNR <= 25 dB");
    o.require(r.aligned > 0.95, "aligned <= 95%");
    o.require(r.seconds < 45 * 60, "runtime >= 45 min");
}

void criterion_eikonal(Outcome& o) {
    const PipelineResult& base = default_run();
    TrainConfig cfg;
    apply_ablation(cfg, "eikonal");
    const PipelineResult r = run_pipeline(cfg);
    o.detail << "eikonal weight " << cfg.weights.eikonal << " CD " << r.chamfer << " vs default CD " << base.chamfer;
    o.require(cfg.weights.eikonal == Real(0.1), "eikonal weight not 0.1");
    o.require(r.chamfer > base.chamfer, "eikonal CD not worse");
}

// ---------------------------------------------------------------------------------------------------------------

void criterion_disk_gradient(Outcome& o) {
    const Mat center = Mat::Zero(1, 3);
    const Mat quat = (Mat(1, 4) << 1, 0, 0, 0).finished();
    const Mat disk = (Mat(1, 3) << 0, 0, 0.5 * std::log(1e-6)).finished();
    std::vector<Real> disk_grads, center_grads;
    for (Real d : {0.5, 0.25, 0.125, 0.0625}) {
        ad::Parameter q("q", (Mat(1, 3) << d, 0, 0).finished());
        {
            ad::Tape t;
            t.backward(loss_pull(t.param(q), t.constant(center), t.constant(quat), t.constant(disk)));
            disk_grads.push_back(q.grad.norm());
        }
        q.zero_grad();
        {
            ad::Tape t;
            t.backward(ad::norm(t.param(q) - t.constant(center)));
            center_grads.push_back(q.grad.norm());
        }
    }
    o.detail << "disk gradients";
    for (Real g : disk_grads) o.detail << ' ' << g;
    o.detail << "; center gradients";
    for (Real g : center_grads) o.detail << ' ' << g;
    for (std::size_t i = 0; i + 1 < disk_grads.size(); ++i) {
        o.require(disk_grads[i + 1] < disk_grads[i], "disk gradient not decreasing");
        o.require(disk_grads[i + 1] / center_grads[i + 1] < disk_grads[i] / center_grads[i], "ratio not decreasing");
        o.require(std::abs(center_grads[i + 1] - center_grads[i]) < 1e-12, "center gradient not constant");
    }
}

// ---------------------------------------------------------------------------------------------------------------

Real median(std::vector<Real> v) {
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(v.size() / 2), v.end());
    return v[v.size() / 2];
}

Real directed_hausdorff(const TriangleMesh& a, const TriangleMesh& b) {
    const NearestCenters grid(b.vertices);
    Real worst = 0;
    for (Index i = 0; i < a.vertex_count(); ++i)
        worst = std::max(worst, (a.vertex(i) - b.vertex(grid.query(Vec3(a.vertex(i))))).norm());
    return worst;
}

void criterion_marching_cubes(Outcome& o) {
    const auto t0 = Clock::now();
    const Real r = 0.6;
    const BatchField sphere = batch_field([r](const Vec3& q) { return q.norm() - r; });
    Real previous = std::numeric_limits<Real>::infinity();
    o.detail << "median vertex error";
    for (int res : {32, 64, 128}) {
        const TriangleMesh m = marching_cubes(sphere, Bounds::cube(1), res);
        std::vector<Real> e;
        for (Index i = 0; i < m.vertex_count(); ++i) e.push_back(std::abs(m.vertex(i).norm() - r));
        const Real med = median(e);
        const MeshStats s = mesh_stats(m);
        o.detail << ' ' << res << ":" << med;
        o.require(med < previous, "median error not decreasing at res " + std::to_string(res));
        o.require(s.watertight, "not watertight at res " + std::to_string(res));
        o.require(s.euler_characteristic == 2, "Euler characteristic " + std::to_string(s.euler_characteristic));
        previous = med;
    }
    const TriangleMesh single = marching_cubes(sphere, Bounds::cube(1), 64);
    const TriangleMesh chunked = extract_chunked(sphere, Bounds::cube(1), {2, 2, 2}, 32);
    const Real gap = std::max(directed_hausdorff(chunked, single), directed_hausdorff(single, chunked));
    o.detail << "; chunked vs single-pass " << gap;
    o.require(chunked.vertex_count() == single.vertex_count() && chunked.triangle_count() == single.triangle_count(),
              "chunked element counts differ");
    o.require(gap < 1e-9, "chunked differs by >= 1e-9");
    o.require(seconds_since(t0) < 120, "runtime >= 2 min");
}

// ---------------------------------------------------------------------------------------------------------------

void criterion_metrics(Outcome& o) {
    const auto sphere_mesh = [](Real r) {
        return marching_cubes(analytic_field(AnalyticShape::sphere(r)), default_bounds(), 128);
    };
    const TriangleMesh a = sphere_mesh(0.5), b = sphere_mesh(0.6);
    const Real cd = chamfer(a, b, kDefaultMetricSamples, 9);
    const Real f = f_score(a, a, kDefaultFScoreThreshold, kDefaultMetricSamples, 9);
    std::mt19937_64 rng(909);
    std::uniform_real_distribution<Real> u(0, 1);
    Image img(32, 32);
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
    const Real s = ssim(img, img);
    o.detail << "concentric CD " << cd << " (gap 0.1), identical F-score " << f << ", identical SSIM " << s;
    o.require(std::abs(cd - 0.1) <= 0.005, "concentric CD outside 0.1 +- 5%");
    o.require(f == 1, "identical F-score != 1");
    o.require(std::abs(s - 1) < 1e-12, "identical SSIM != 1");
}

} // namespace

int main(int argc, char** argv) {
    const std::map<int, std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
        {1, {"gradient suite vs finite differences", criterion_gradients}},
        {2, {"compositing oracle", criterion_compositing}},
        {3, {"pulling oracle on analytic fields", criterion_pulling}},
        {4, {"SDF from frozen disks", criterion_disks}},
        {5, {"end-to-end desk pipeline", criterion_pipeline}},
        {6, {"disk vs center loss gradient", criterion_disk_gradient}},
        {7, {"eikonal ablation direction", criterion_eikonal}},
        {8, {"marching cubes", criterion_marching_cubes}},
        {9, {"metric sanity", criterion_metrics}},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        const int k = std::atoi(argv[i]);
        if (!criteria.count(k)) {
            std::cerr << "unknown criterion '" << argv[i] << "'\n";
            return 2;
        }
        selected.insert(k);
    }
    if (selected.empty())
        for (const auto& [k, _] : criteria) selected.insert(k);

    int failed = 0;
    for (int k : selected) {
        const auto& [name, fn] = criteria.at(k);
        Outcome o;
        const auto t0 = Clock::now();
        try {
            fn(o);
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        char timing[32];
        std::snprintf(timing, sizeof timing, "%.1f s", seconds_since(t0));
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << ": " << name << " | " << o.detail.str() << " | "
                  << timing << std::endl;
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
