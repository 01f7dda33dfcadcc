#include "gspull/binio.hpp"
#include "gspull/gauss.hpp"

#include <doctest.h>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace gspull;

namespace {

Vec4 random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<Real> n(0, 1);
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

Gaussian random_gaussian(std::mt19937_64& rng) {
    std::uniform_real_distribution<Real> u(-1, 1);
    Gaussian g;
    g.center = Vec3(u(rng), u(rng), u(rng));
    g.log_scales = Vec3(u(rng), u(rng), u(rng)) - Vec3::Constant(1);
    g.rotation = random_quaternion(rng);
    g.opacity_logit = u(rng) * 3;
    g.color = Vec3(u(rng), u(rng), u(rng)).cwiseAbs();
    return g;
}

Vec4 axis_angle(const Vec3& axis, Real angle) {
    return Vec4(std::cos(angle / 2), axis.x() * std::sin(angle / 2), axis.y() * std::sin(angle / 2),
                axis.z() * std::sin(angle / 2));
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("gspull_test_gauss_" + name);
}

} // namespace

TEST_CASE("covariance examples") {
    Gaussian g;
    g.log_scales = Vec3(0, std::log(2.0), std::log(3.0));
    Mat3 expect = Vec3(1, 4, 9).asDiagonal();
    CHECK((covariance(g) - expect).cwiseAbs().maxCoeff() < 1e-12);

    g.log_scales = Vec3(0, std::log(2.0), 0);
    g.rotation = axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
    expect = Vec3(4, 1, 1).asDiagonal();
    CHECK((covariance(g) - expect).cwiseAbs().maxCoeff() < 1e-12);

    std::mt19937_64 rng(1);
    g.log_scales = Vec3(0, std::log(2.0), std::log(3.0));
    for (int i = 0; i < 20; ++i) {
        g.rotation = random_quaternion(rng);
        Eigen::SelfAdjointEigenSolver<Mat3> es(covariance(g));
        CHECK((es.eigenvalues() - Vec3(1, 4, 9)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("covariance is symmetric positive definite") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 500; ++i) {
        const Gaussian g = random_gaussian(rng);
        const Mat3 s = covariance(g);
        CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-14);
        Eigen::LLT<Mat3> llt(s);
        CHECK(llt.info() == Eigen::Success);
    }
}

TEST_CASE("density examples") {
    std::mt19937_64 rng(3);
    Gaussian g = random_gaussian(rng);
    CHECK(density3d(g, g.center) == doctest::Approx(1));

    Gaussian iso;
    iso.center = Vec3(0.2, -0.1, 0.3);
    CHECK(density3d(iso, iso.center + Vec3(0.6, 0.8, 0)) == doctest::Approx(std::exp(-0.5)).epsilon(1e-7));

    for (int i = 0; i < 50; ++i) {
        g = random_gaussian(rng);
        const Vec3 q = g.center + Vec3(0.1, -0.2, 0.05);
        const Mat3 sigma = covariance(g) + kVarianceFloor * Mat3::Identity();
        const Vec3 d = q - g.center;
        const Real ref = std::exp(-0.5 * d.dot(sigma.inverse() * d));
        CHECK(std::abs(density3d(g, q) - ref) < 1e-12);
    }
}

TEST_CASE("density is invariant under joint rotation") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        Gaussian g = random_gaussian(rng);
        const Vec3 d(0.1, 0.2, -0.15);
        const Real before = density3d(g, g.center + d);
        const Vec4 r = random_quaternion(rng);
        const Eigen::Quaternion<Real> qr(r(0), r(1), r(2), r(3));
        const Eigen::Quaternion<Real> qg(g.rotation(0), g.rotation(1), g.rotation(2), g.rotation(3));
        const Eigen::Quaternion<Real> composed = qr * qg;
        g.rotation = Vec4(composed.w(), composed.x(), composed.y(), composed.z());
        const Real after = density3d(g, g.center + qr.toRotationMatrix() * d);
        CHECK(std::abs(before - after) < 1e-10);
    }
}

TEST_CASE("disk normal examples") {
    Gaussian g;
    g.log_scales = Vec3(0, 0, std::log(0.01));
    CHECK(std::abs(disk_normal(g).dot(Vec3::UnitZ())) == doctest::Approx(1));

    g.rotation = axis_angle(Vec3::UnitX(), std::numbers::pi / 2);
    CHECK(std::abs(disk_normal(g).dot(Vec3(0, -1, 0))) == doctest::Approx(1));

    Gaussian tie;
    tie.log_scales = Vec3::Constant(std::log(0.5));
    CHECK((disk_normal(tie) - Vec3::UnitX()).norm() < 1e-15);
    CHECK(disk_axis(Vec3(0.1, -2, -2)) == 1);
}

TEST_CASE("disk normal is orthogonal to the larger principal axes") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        const Gaussian g = random_gaussian(rng);
        const Vec3 n = disk_normal(g);
        CHECK(n.norm() == doctest::Approx(1));
        Eigen::SelfAdjointEigenSolver<Mat3> es(covariance(g));
        // Eigenvalues ascend; columns 1 and 2 span the two larger axes.
        CHECK(std::abs(n.dot(es.eigenvectors().col(1))) < 1e-10);
        CHECK(std::abs(n.dot(es.eigenvectors().col(2))) < 1e-10);
    }
}

TEST_CASE("quaternion helpers") {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 20; ++i) {
        const Vec4 q = random_quaternion(rng);
        const Mat3 r = quaternion_to_matrix(q);
        CHECK((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(r.determinant() == doctest::Approx(1));
        CHECK((quaternion_to_matrix(matrix_to_quaternion(r)) - r).cwiseAbs().maxCoeff() < 1e-12);
        const Vec3 dir = Vec3(q(1), q(2), q(3)).normalized();
        CHECK((quaternion_to_matrix(quaternion_from_z(dir)) * Vec3::UnitZ() - dir).norm() < 1e-12);
    }
    CHECK(logistic(logit(Real(0.3))) == doctest::Approx(0.3));
}

TEST_CASE("batched tape forms agree with scalar forms") {
    std::mt19937_64 rng(7);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 16; ++i) gs.push_back(random_gaussian(rng));
    GaussianSet set(gs);
    ad::Tape t;
    GaussianLeaves l = bind(t, set);
    const Mat cov = covariance(l.rotations, l.log_scales).value();
    Mat q = set.centers.value;
    q.array() += Real(0.07);
    const Mat dens = density3d(l.centers, l.rotations, l.log_scales, t.constant(q)).value();
    const Mat normals = disk_normals(l.rotations, l.log_scales).value();
    for (Index i = 0; i < set.size(); ++i) {
        const Mat3 c = covariance(gs[static_cast<std::size_t>(i)]);
        for (int k = 0; k < 9; ++k) CHECK(std::abs(cov(i, k) - c(k / 3, k % 3)) < 1e-12);
        CHECK(std::abs(dens(i, 0) - density3d(gs[static_cast<std::size_t>(i)], q.row(i).transpose())) < 1e-12);
        CHECK((normals.row(i).transpose() - disk_normal(gs[static_cast<std::size_t>(i)])).norm() < 1e-12);
    }
}

TEST_CASE("gradients of covariance, density and disk normal") {
    std::mt19937_64 rng(8);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 4; ++i) {
        Gaussian g = random_gaussian(rng);
        g.log_scales = Vec3(-1.0, -1.5, -2.5) + Vec3::Constant(0.1 * i); // distinct scales, no argmin ties
        gs.push_back(g);
    }
    GaussianSet set(gs);
    Mat q = set.centers.value;
    q.array() += Real(0.1);
    Mat w9(4, 9), w3(4, 3);
    std::uniform_real_distribution<Real> u(0.5, 1.5);
    for (Index i = 0; i < w9.size(); ++i) w9.data()[i] = u(rng);
    for (Index i = 0; i < w3.size(); ++i) w3.data()[i] = u(rng);
    ad::Parameter* params[] = {&set.centers, &set.log_scales, &set.rotations};
    auto span = std::span<ad::Parameter* const>(params);

    ad::ScalarFn<Real> cov_fn = [&](ad::Tape& t) {
        GaussianLeaves l = bind(t, set);
        return ad::sum(covariance(l.rotations, l.log_scales) * t.constant(w9));
    };
    ad::ScalarFn<Real> dens_fn = [&](ad::Tape& t) {
        GaussianLeaves l = bind(t, set);
        return ad::sum(density3d(l.centers, l.rotations, l.log_scales, t.constant(q)));
    };
    ad::ScalarFn<Real> normal_fn = [&](ad::Tape& t) {
        GaussianLeaves l = bind(t, set);
        return ad::sum(disk_normals(l.rotations, l.log_scales) * t.constant(w3));
    };
    CHECK(ad::grad_check<Real>(cov_fn, span, Real(1e-6)) < 1e-5);
    CHECK(ad::grad_check<Real>(dens_fn, span, Real(1e-6)) < 1e-5);
    CHECK(ad::grad_check<Real>(normal_fn, span, Real(1e-6)) < 1e-5);

    // Density is also differentiable with respect to the query.
    const Real qerr = ad::grad_check<Real>(
        std::function<ad::Value(ad::Tape&, ad::Value)>([&](ad::Tape& t, ad::Value x) {
            GaussianLeaves l = bind(t, set);
            return ad::sum(density3d(l.centers, l.rotations, l.log_scales, x));
        }),
        q, Real(1e-6));
    CHECK(qerr < 1e-5);
}

TEST_CASE("set editing keeps attributes aligned") {
    std::mt19937_64 rng(9);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 5; ++i) gs.push_back(random_gaussian(rng));
    GaussianSet set(gs);
    set.grad_accum.setLinSpaced(5, 0, 4);
    set.keep({true, false, true, false, true});
    REQUIRE(set.size() == 3);
    CHECK(set.get(1).center == gs[2].center);
    CHECK(set.grad_accum(2) == 4);
    CHECK(set.moments[GaussianSet::Centers].m.rows() == 3);
    set.push_back(gs[1]);
    CHECK(set.size() == 4);
    CHECK(set.grad_count.size() == 4);
    set.rotations.value.row(0) *= 3;
    set.normalize_rotations();
    CHECK(set.rotations.value.row(0).norm() == doctest::Approx(1));
}

TEST_CASE("checkpoint round trip") {
    std::mt19937_64 rng(10);
    std::vector<Gaussian> gs;
    for (int i = 0; i < 100; ++i) gs.push_back(random_gaussian(rng));
    const GaussianSet set(gs);
    const auto path = temp_path("set.bin");
    save_set(set, path);
    const GaussianSet back = load_set(path);
    CHECK(back.centers.value == set.centers.value);
    CHECK(back.log_scales.value == set.log_scales.value);
    CHECK(back.rotations.value == set.rotations.value);
    CHECK(back.opacity_logits.value == set.opacity_logits.value);
    CHECK(back.colors.value == set.colors.value);

    const auto empty_path = temp_path("empty.bin");
    save_set(GaussianSet{}, empty_path);
    CHECK(load_set(empty_path).empty());

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    CHECK_THROWS_AS(load_set(path), io::FormatError);
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS_AS(load_set(path), io::FormatError);
    {
        std::ofstream junk(path, std::ios::binary | std::ios::trunc);
        junk << "NOTASET!garbage";
    }
    CHECK_THROWS_AS(load_set(path), io::FormatError);
    std::filesystem::remove(path);
    std::filesystem::remove(empty_path);
}
