#include "gspull/losses.hpp"
#include "gspull/metrics.hpp"
#include "gspull/synth.hpp"

#include <doctest.h>

#include <json.hpp>

#include <Eigen/Geometry>

#include <cmath>
#include <random>

using namespace gspull;

namespace {

TriangleMesh sphere_mesh(Real r, int res = 64, Vec3 c = Vec3::Zero()) {
    return marching_cubes(analytic_field(AnalyticShape::sphere(r, c)), Bounds::cube(0.98), res);
}

TriangleMesh plane_patch(Real half, Real z, int n = 8) {
    TriangleMesh m;
    m.vertices.resize((n + 1) * (n + 1), 3);
    for (int j = 0; j <= n; ++j)
        for (int i = 0; i <= n; ++i)
            m.vertices.row(j * (n + 1) + i) << -half + 2 * half * i / n, -half + 2 * half * j / n, z;
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const Index a = j * (n + 1) + i;
            m.triangles.push_back({a, a + 1, a + n + 2});
            m.triangles.push_back({a, a + n + 2, a + n + 1});
        }
    return m;
}

TriangleMesh transformed(TriangleMesh m, const Mat3& r, const Vec3& t) {
    for (Index i = 0; i < m.vertex_count(); ++i) m.vertices.row(i) = (r * m.vertex(i) + t).transpose();
    return m;
}

} // namespace

TEST_CASE("closest point on a triangle matches dense barycentric search") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<Real> u(-1, 1);
    for (int trial = 0; trial < 100; ++trial) {
        const Vec3 a(u(rng), u(rng), u(rng)), b(u(rng), u(rng), u(rng)), c(u(rng), u(rng), u(rng));
        const Vec3 p = 1.5 * Vec3(u(rng), u(rng), u(rng));
        const Real exact = (closest_point_on_triangle(p, a, b, c) - p).norm();
        Real grid = std::numeric_limits<Real>::infinity();
        const int n = 300;
        for (int i = 0; i <= n; ++i)
            for (int j = 0; i + j <= n; ++j) {
                const Real s = Real(i) / n, t = Real(j) / n;
                grid = std::min(grid, ((1 - s - t) * a + s * b + t * c - p).norm());
            }
        CHECK(exact <= grid + 1e-12);
        CHECK(grid - exact < 0.01);
    }
}

TEST_CASE("bvh distance equals the triangle scan") {
    std::mt19937_64 rng(62);
    std::uniform_real_distribution<Real> u(-1, 1);
    const TriangleMesh sphere = sphere_mesh(0.5, 24);
    TriangleMesh soup_mesh;
    soup_mesh.vertices.resize(300, 3);
    for (Index i = 0; i < soup_mesh.vertices.size(); ++i) soup_mesh.vertices.data()[i] = u(rng);
    for (Index t = 0; t < 100; ++t) soup_mesh.triangles.push_back({3 * t, 3 * t + 1, 3 * t + 2});
    const TriangleMesh& soup = soup_mesh;
    for (const TriangleMesh* mesh : {&sphere, &soup}) {
        const MeshDistance d(*mesh);
        for (int k = 0; k < 1000; ++k) {
            const Vec3 p = 1.2 * Vec3(u(rng), u(rng), u(rng));
            CHECK(d.distance(p) == doctest::Approx(d.distance_bruteforce(p)).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(MeshDistance(TriangleMesh{}), std::invalid_argument);
}

TEST_CASE("mesh sampling is area weighted and on the surface") {
    TriangleMesh two;
    two.vertices.resize(6, 3);
    two.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 3, 0, 1, 0, 1, 1;
    two.triangles = {{0, 1, 2}, {3, 4, 5}};
    const Points s = sample_mesh(two, 40000, 1);
    Index first = 0;
    for (Index i = 0; i < s.rows(); ++i) first += s(i, 2) == 0;
    CHECK(Real(first) / 40000 == doctest::Approx(0.25).epsilon(0.04));
    const MeshDistance d(two);
    for (Index i = 0; i < s.rows(); ++i) CHECK(d.distance(s.row(i).transpose()) < 1e-12);
    CHECK(sample_mesh(two, 10, 5) == sample_mesh(two, 10, 5));
    CHECK(sample_mesh(two, 10, 5) != sample_mesh(two, 10, 6));
}

TEST_CASE("chamfer distance") {
    const TriangleMesh a = sphere_mesh(0.5), b = sphere_mesh(0.6);
    CHECK(chamfer(a, a) < 1e-3);
    CHECK(chamfer(a, b, 20000) == doctest::Approx(0.1).epsilon(0.05));

    const TriangleMesh p = plane_patch(0.5, 0);
    const TriangleMesh shifted = transformed(p, Mat3::Identity(), Vec3(0, 0, 0.05));
    CHECK(chamfer(p, shifted, 20000) == doctest::Approx(0.05).epsilon(0.02));

    const TriangleMesh box = marching_cubes(analytic_field(AnalyticShape::preset("box")), Bounds::cube(0.98), 32);
    const MeshMetrics ab = evaluate_mesh(a, box, 0.02, 5000, 3), ba = evaluate_mesh(box, a, 0.02, 5000, 3);
    CHECK(ab.chamfer == ba.chamfer);
    CHECK(ab.f_score == ba.f_score);
    CHECK(ab.precision == ba.recall);
    CHECK(evaluate_mesh(a, box, 0.02, 5000, 3).chamfer == ab.chamfer);

    const Mat3 r = Eigen::AngleAxis<Real>(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    const Vec3 t(0.3, -0.2, 0.5);
    const Real moved = chamfer(transformed(a, r, t), transformed(box, r, t), 20000);
    CHECK(moved == doctest::Approx(chamfer(a, box, 20000)).epsilon(0.03));

    CHECK_THROWS_AS(chamfer(a, TriangleMesh{}), std::invalid_argument);
    CHECK_THROWS_AS(chamfer(TriangleMesh{}, a), std::invalid_argument);
}

TEST_CASE("f-score") {
    const TriangleMesh a = sphere_mesh(0.5);
    CHECK(f_score(a, a, 0.02, 20000) == 1);
    const TriangleMesh far = sphere_mesh(0.1, 32, Vec3(0.8, 0.8, 0.8));
    CHECK(f_score(sphere_mesh(0.2, 32, Vec3(-0.6, -0.6, -0.6)), far, 0.02, 5000) == 0);

    // Offset equal to the threshold sits on the boundary; compare with a scan of the same samples.
    const TriangleMesh b = sphere_mesh(0.52);
    const MeshMetrics m = evaluate_mesh(a, b, 0.02, 4000, 9);
    const Points sa = sample_mesh(a, 4000, 9), sb = sample_mesh(b, 4000, 9);
    const MeshDistance da(a), db(b);
    Index pa = 0, pb = 0;
    for (Index i = 0; i < 4000; ++i) {
        pa += db.distance_bruteforce(sa.row(i).transpose()) < 0.02;
        pb += da.distance_bruteforce(sb.row(i).transpose()) < 0.02;
    }
    const Real prec = Real(pa) / 4000, rec = Real(pb) / 4000;
    CHECK(m.precision == prec);
    CHECK(m.recall == rec);
    CHECK(m.f_score == doctest::Approx(2 * prec * rec / (prec + rec)));
    CHECK(m.f_score > 0.1);
    CHECK(m.f_score < 0.9);
    CHECK_THROWS_AS(f_score(a, TriangleMesh{}), std::invalid_argument);
}

TEST_CASE("psnr examples") {
    const Image zeros(8, 8, Vec3::Zero()), ones(8, 8, Vec3::Ones()), tenth(8, 8, Vec3::Constant(0.1));
    CHECK(psnr(zeros, zeros) == kPsnrCap);
    CHECK(psnr(zeros, tenth) == doctest::Approx(20));
    CHECK(psnr(zeros, ones) == doctest::Approx(0));
    CHECK_THROWS_AS(psnr(zeros, Image(4, 4)), std::invalid_argument);
}

TEST_CASE("metric report") {
    MetricReport r;
    MeshMetrics m;
    m.chamfer = 0.01;
    m.f_score = 0.9;
    r.mesh = m;
    r.views = {{"a", 30, 0.9}, {"b", 20, 0.7}};
    r.summarize_views();
    CHECK(r.mean_psnr == 25);
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["mesh"]["chamfer"].get<double>() == doctest::Approx(0.01));
    CHECK(j["mean_ssim"].get<double>() == doctest::Approx(0.8));
    CHECK(r.to_table().find("chamfer") != std::string::npos);
}
