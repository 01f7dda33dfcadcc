#include "gspull/rasterizer.hpp"

#include <doctest.h>

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace gspull;

namespace {

CameraView axis_camera(int w, int h, Real f) {
    CameraView cam;
    cam.fx = cam.fy = f;
    cam.width = w;
    cam.height = h;
    cam.cx = Real(0.5) * w;
    cam.cy = Real(0.5) * h;
    return cam;
}

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

// Independent evaluation of the splatting equation for one pixel over every Gaussian.
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
        const Mat3 sigma = covariance(gs[i]);
        Mat2 cov = j * cam.rotation * sigma * cam.rotation.transpose() * j.transpose();
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
        const Real p = std::exp(-0.5 * d.dot(it.cov.inverse() * d));
        const Real alpha = std::min(cfg.alpha_max, gs[it.index].opacity() * p);
        color += transmittance * alpha * gs[it.index].color;
        transmittance *= 1 - alpha;
    }
    return color + transmittance * cfg.background;
}

} // namespace

TEST_CASE("camera construction and validation") {
    const CameraView cam = CameraView::look_at(Vec3(0, 0, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 50, 64, 48);
    CHECK_NOTHROW(cam.validate());
    CHECK((cam.center() - Vec3(0, 0, -2.5)).norm() < 1e-12);
    CHECK(cam.to_camera(Vec3::Zero()).z() == doctest::Approx(2.5));
    CameraView bad = cam;
    bad.rotation(0, 0) = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cam;
    bad.fx = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("projection examples") {
    const CameraView cam = axis_camera(64, 64, 80);
    Gaussian g;
    g.center = Vec3(0, 0, 2);
    const Real s = 0.05;
    g.log_scales = Vec3::Constant(std::log(s));
    const auto sp = project(g, cam);
    REQUIRE(sp.has_value());
    CHECK(sp->mean.x() == doctest::Approx(cam.cx));
    CHECK(sp->mean.y() == doctest::Approx(cam.cy));
    const Real expect = std::pow(cam.fx * s / 2, 2) + 0.3;
    CHECK(sp->covariance(0, 0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(sp->covariance(1, 1) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(std::abs(sp->covariance(0, 1)) < 1e-12);
    CHECK(sp->depth == doctest::Approx(2));

    g.center = Vec3(0, 0, -1);
    CHECK_FALSE(project(g, cam).has_value());
    g.center = Vec3(0, 0, 0.005);
    CHECK_FALSE(project(g, cam).has_value());
    g.center = Vec3(10, 0, 2); // far outside the frustum
    CHECK_FALSE(project(g, cam).has_value());
}

TEST_CASE("compositing examples") {
    RenderConfig cfg;
    cfg.background = Vec3(0.2, 0.4, 0.6);
    CHECK(composite({}, Vec2(3, 3), cfg) == cfg.background);

    Splat2D a;
    a.mean = Vec2(3, 3);
    a.conic = Vec3(1, 0, 1);
    a.opacity = 1;
    a.color = Vec3(1, 0.5, 0.25);
    RenderConfig opaque = cfg;
    opaque.alpha_max = 1;
    CHECK((composite({a}, a.mean, opaque) - a.color).norm() < 1e-15);
    // The default clamp leaves 1% of the background visible.
    CHECK((composite({a}, a.mean, cfg) - (0.99 * a.color + 0.01 * cfg.background)).norm() < 1e-15);

    Splat2D b = a;
    a.opacity = 0.5;
    b.opacity = 0.5;
    b.color = Vec3(0, 1, 0);
    const Vec3 expect = 0.5 * a.color + 0.25 * b.color + 0.25 * cfg.background;
    CHECK((composite({a, b}, a.mean, cfg) - expect).norm() < 1e-15);
}

TEST_CASE("render of the empty set is the background") {
    const CameraView cam = axis_camera(16, 12, 20);
    RenderConfig cfg;
    cfg.background = Vec3(1, 1, 1);
    const RenderedImage img = render(GaussianSet{}, cam, cfg);
    CHECK(img.color.width == 16);
    CHECK(img.color.height == 12);
    CHECK((img.color.pixels.rowwise() - cfg.background.transpose()).cwiseAbs().maxCoeff() == 0);
    CHECK(img.alpha.cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("render matches the brute-force oracle") {
    std::mt19937_64 rng(21);
    const CameraView cam = CameraView::look_at(Vec3(0.4, -0.3, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 40, 32, 32);
    RenderConfig cfg;
    cfg.early_termination = false;
    cfg.background = Vec3(0.1, 0.2, 0.3);
    Real worst = 0;
    for (int scene = 0; scene < 50; ++scene) {
        const int n = 1 + scene % 8;
        const auto gs = random_scene(rng, n, 0.3, -2.5, -1.2, 0.95);
        const GaussianSet set(gs);
        REQUIRE(project_all(set, cam, cfg).size() == gs.size());
        const RenderedImage img = render(set, cam, cfg);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                const Vec3 ref = brute_force_pixel(gs, cam, cfg, x + 0.5, y + 0.5);
                worst = std::max(worst, (img.color.at(x, y) - ref).cwiseAbs().maxCoeff());
            }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("compositing weights and background sum to one") {
    std::mt19937_64 rng(22);
    const CameraView cam = CameraView::look_at(Vec3(0, 0, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 30, 24, 24);
    auto gs = random_scene(rng, 30, 0.4, -2.5, -1.5, 0.99);
    for (auto& g : gs) g.color = Vec3::Ones();
    RenderConfig cfg;
    cfg.background = Vec3::Ones();
    cfg.early_termination = false;
    const RenderedImage img = render(GaussianSet(gs), cam, cfg);
    CHECK((img.color.pixels.array() - 1).abs().maxCoeff() < 1e-12);
    CHECK(img.alpha.minCoeff() >= 0);
    CHECK(img.alpha.maxCoeff() <= 1);
}

TEST_CASE("render is deterministic and permutation invariant") {
    std::mt19937_64 rng(23);
    const CameraView cam = CameraView::look_at(Vec3(0.2, 0.1, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 40, 32, 32);
    auto gs = random_scene(rng, 40, 0.4, -2.5, -1.5, 0.9);
    const RenderedImage a = render(GaussianSet(gs), cam);
    const RenderedImage b = render(GaussianSet(gs), cam);
    CHECK(a.color.pixels == b.color.pixels);
    std::shuffle(gs.begin(), gs.end(), rng);
    const RenderedImage c = render(GaussianSet(gs), cam);
    CHECK((a.color.pixels - c.color.pixels).cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("equal depths break ties by index") {
    const CameraView cam = axis_camera(8, 8, 10);
    Gaussian front, back;
    front.center = back.center = Vec3(0, 0, 2);
    front.color = Vec3(1, 0, 0);
    back.color = Vec3(0, 0, 1);
    front.opacity_logit = back.opacity_logit = logit(0.9);
    const auto order = project_all(GaussianSet({front, back}), cam);
    REQUIRE(order.size() == 2);
    CHECK(order[0].source == 0);
    CHECK(order[1].source == 1);
    const RenderedImage img = render(GaussianSet({front, back}), cam);
    CHECK(img.color.at(4, 4).x() > img.color.at(4, 4).z());
}

TEST_CASE("L1 image loss gradient matches finite differences") {
    std::mt19937_64 rng(24);
    const CameraView cam = CameraView::look_at(Vec3(0.3, -0.2, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 9.6, 8, 8);
    RenderConfig cfg;
    cfg.early_termination = false;
    cfg.background = Vec3(0.3, 0.3, 0.3);
    for (int trial = 0; trial < 5; ++trial) {
        GaussianSet set(random_scene(rng, 1 + trial % 4, 0.3, -1.6, -0.8, 0.8));
        Mat target(64, 3);
        std::uniform_real_distribution<Real> u(0, 1);
        for (Index i = 0; i < target.size(); ++i) target.data()[i] = u(rng);
        ad::ScalarFn<Real> loss = [&](ad::Tape& t) {
            const RenderOutput out = render(t, bind(t, set), cam, cfg);
            return ad::mean(ad::abs(out.image - t.constant(target)));
        };
        auto params = set.parameters();
        const auto report = ad::grad_check_report<Real>(loss, std::span<ad::Parameter* const>(params), Real(1e-6));
        INFO("trial " << trial << " worst " << report.worst_parameter << "[" << report.worst_index << "] analytic "
                      << report.analytic << " numeric " << report.numeric);
        CHECK(report.max_relative_error < 1e-4);
    }
}

TEST_CASE("backward records screen-space gradient statistics") {
    std::mt19937_64 rng(25);
    const CameraView cam = CameraView::look_at(Vec3(0, 0, -2.5), Vec3::Zero(), Vec3(0, -1, 0), 19.2, 16, 16);
    GaussianSet set(random_scene(rng, 4, 0.3, -1.6, -1.0, 0.8));
    Gaussian hidden;
    hidden.center = Vec3(0, 0, -5); // behind the camera
    set.push_back(hidden);
    ad::Tape t;
    const RenderOutput out = render(t, bind(t, set), cam);
    t.backward(ad::mean(ad::square(out.image)));
    CHECK(out.result->hits(4) == 0);
    CHECK(out.result->screen_grad(4) == 0);
    for (Index i = 0; i < 4; ++i) {
        CHECK(out.result->hits(i) == 1);
        CHECK(out.result->screen_grad(i) > 0);
    }
}

TEST_CASE("image files round trip") {
    Image img(7, 5);
    std::mt19937_64 rng(26);
    std::uniform_real_distribution<Real> u(-0.1, 1.1);
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
    const Image q = img.quantized();
    const auto dir = std::filesystem::temp_directory_path();
    for (const char* name : {"gspull_rt.png", "gspull_rt.ppm"}) {
        const auto path = dir / name;
        write_image(img, path);
        const Image back = read_image(path);
        CHECK(back.same_size(img));
        CHECK(back.pixels == q.pixels);
        std::filesystem::remove(path);
    }
    CHECK_THROWS(write_image(img, dir / "gspull_rt.bmp"));
    CHECK_THROWS(read_image(dir / "does_not_exist.png"));
}
