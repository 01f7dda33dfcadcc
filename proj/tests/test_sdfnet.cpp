#include "gspull/binio.hpp"
#include "gspull/sdfnet.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace gspull;

namespace {

Points random_points(std::mt19937_64& rng, Index n, Real lo = -1, Real hi = 1) {
    std::uniform_real_distribution<Real> u(lo, hi);
    Points p(n, 3);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    return p;
}

Real rel_err(Real a, Real b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), Real(1e-8)}); }

} // namespace

TEST_CASE("sphere initialization") {
    const SdfNetwork net = SdfNetwork::init_sphere(4, 64, 0.5, 1);
    CHECK(net.layers() == 4);
    CHECK(net.width() == 64);
    CHECK(net.parameter_count() == (3 * 64 + 64) + 2 * (64 * 64 + 64) + (64 + 1));
    CHECK(net.evaluate(Vec3(0, 0, 0)) < 0);
    CHECK(net.evaluate(Vec3(0, 0, 0)) == doctest::Approx(-0.5).epsilon(0.1));
    CHECK(net.evaluate(Vec3(0.9, 0, 0)) > 0);

    std::mt19937_64 rng(2);
    std::normal_distribution<Real> n(0, 1);
    Points shell(1000, 3);
    for (Index i = 0; i < 1000; ++i) {
        Vec3 d(n(rng), n(rng), n(rng));
        shell.row(i) = (Real(0.5) * d.normalized()).transpose();
    }
    CHECK(net.evaluate(shell).cwiseAbs().mean() < 0.05);

    const SdfNetwork again = SdfNetwork::init_sphere(4, 64, 0.5, 1);
    for (std::size_t k = 0; k < net.weights.size(); ++k) CHECK(again.weights[k].value == net.weights[k].value);

    CHECK_THROWS_AS(SdfNetwork::init_sphere(1, 64, 0.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(SdfNetwork::init_sphere(4, 4, 0.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(SdfNetwork::init_sphere(4, 64, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(SdfNetwork::init_sphere(4, 64, 0.0, 1), std::invalid_argument);
}

TEST_CASE("taped evaluation matches batch and single evaluation") {
    SdfNetwork net = SdfNetwork::init_sphere(3, 16, 0.4, 3);
    std::mt19937_64 rng(4);
    const Points q = random_points(rng, 20);
    ad::Tape t;
    const Mat taped = eval(t, net, t.constant(q)).value();
    const Vec batch = net.evaluate(q);
    for (Index i = 0; i < q.rows(); ++i) {
        CHECK(taped(i, 0) == doctest::Approx(batch(i)).epsilon(1e-14));
        CHECK(net.evaluate(Vec3(q.row(i).transpose())) == doctest::Approx(batch(i)).epsilon(1e-14));
    }
    ad::Tape t2;
    CHECK(eval(t2, net, t2.constant(q)).value() == taped);
}

TEST_CASE("eval_grad matches finite differences") {
    SdfNetwork net = SdfNetwork::init_sphere(4, 32, 0.5, 5);
    std::mt19937_64 rng(6);
    const Points q = random_points(rng, 100);
    ad::Tape t;
    const SdfEval e = eval_grad(t, net, t.constant(q));
    Vec sdf;
    Points grad;
    net.evaluate_with_gradient(q, sdf, grad);
    const Real h = 1e-6;
    Real worst = 0, worst_batch = 0;
    for (Index i = 0; i < q.rows(); ++i) {
        for (int k = 0; k < 3; ++k) {
            Vec3 p = q.row(i).transpose(), m = p;
            p(k) += h;
            m(k) -= h;
            const Real fd = (net.evaluate(p) - net.evaluate(m)) / (2 * h);
            worst = std::max(worst, rel_err(e.grad.value()(i, k), fd));
            worst_batch = std::max(worst_batch, rel_err(grad(i, k), e.grad.value()(i, k)));
        }
    }
    CHECK(worst < 1e-5);
    CHECK(worst_batch < 1e-12);
    CHECK((sdf - e.sdf.value().col(0)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("eval_grad of a network in its linear regime is the weight product") {
    SdfNetwork net = SdfNetwork::init_sphere(2, 8, 0.5, 7);
    net.biases[0].value.setConstant(100); // every hidden unit active on the unit cube
    const Mat expect = net.weights[0].value * net.weights[1].value;
    std::mt19937_64 rng(8);
    const Points q = random_points(rng, 10);
    ad::Tape t;
    const Mat g = eval_grad(t, net, t.constant(q)).grad.value();
    for (Index i = 0; i < q.rows(); ++i) CHECK((g.row(i).transpose() - expect.col(0)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("gradient expressions differentiate with respect to the weights") {
    SdfNetwork net = SdfNetwork::init_sphere(3, 8, 0.5, 9);
    std::mt19937_64 rng(10);
    const Points q = random_points(rng, 12);
    auto params = net.parameters();
    auto span = std::span<ad::Parameter* const>(params);

    ad::ScalarFn<Real> grad_sq = [&](ad::Tape& t) {
        const SdfEval e = eval_grad(t, net, t.constant(q));
        return ad::mean(ad::row_dot(e.grad, e.grad));
    };
    CHECK(ad::grad_check<Real>(grad_sq, span, Real(1e-6)) < 1e-5);

    // Composite through the full pull: sdf at the pulled point, plus its normal.
    ad::ScalarFn<Real> through_pull = [&](ad::Tape& t) {
        const PullResult p = pull(t, net, t.constant(q));
        const SdfEval at = eval_grad(t, net, p.points);
        return ad::mean(ad::square(at.sdf)) + ad::mean(ad::row_dot(ad::row_normalize(at.grad), p.grad));
    };
    CHECK(ad::grad_check<Real>(through_pull, span, Real(1e-6)) < 1e-5);

    const Real qerr = ad::grad_check<Real>(std::function<ad::Value(ad::Tape&, ad::Value)>([&](ad::Tape& t, ad::Value x) {
                                               return ad::sum(pull(t, net, x).points);
                                           }),
                                           Mat(q), Real(1e-6));
    CHECK(qerr < 1e-5);
}

TEST_CASE("pull on analytic fields") {
    auto sphere = [](const Vec3& q) { return q.norm() - 1; };
    auto sphere_grad = [](const Vec3& q) { return Vec3(q.normalized()); };
    CHECK((pull_point(sphere, sphere_grad, Vec3(2, 0, 0)) - Vec3(1, 0, 0)).norm() < 1e-15);
    const Vec3 on(0, 0.6, 0.8);
    CHECK((pull_point(sphere, sphere_grad, on) - on).norm() < 1e-15);

    auto plane = [](const Vec3& q) { return q.z(); };
    auto plane_grad = [](const Vec3&) { return Vec3(0, 0, 1); };
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<Real> u(-3, 3);
    for (int i = 0; i < 50; ++i) {
        const Vec3 q(u(rng), u(rng), u(rng));
        const Vec3 p = pull_point(plane, plane_grad, q);
        CHECK(p.x() == q.x());
        CHECK(p.y() == q.y());
        CHECK(std::abs(p.z()) < 1e-15);
    }
    auto flat = [](const Vec3&) { return Real(1); };
    auto zero = [](const Vec3&) { return Vec3(Vec3::Zero()); };
    CHECK(pull_point(flat, zero, Vec3(1, 2, 3)) == Vec3(1, 2, 3));
}

TEST_CASE("taped pull agrees with the point form and counts vanishing gradients") {
    SdfNetwork net = SdfNetwork::init_sphere(3, 16, 0.5, 12);
    std::mt19937_64 rng(13);
    const Points q = random_points(rng, 15);
    ad::Tape t;
    const PullResult p = pull(t, net, t.constant(q));
    CHECK(p.vanishing == 0);
    for (Index i = 0; i < q.rows(); ++i) {
        auto f = [&](const Vec3& x) { return net.evaluate(x); };
        auto g = [&](const Vec3& x) {
            Points one(1, 3);
            one.row(0) = x.transpose();
            Vec s;
            Points gr;
            net.evaluate_with_gradient(one, s, gr);
            return Vec3(gr.row(0).transpose());
        };
        const Vec3 ref = pull_point(f, g, q.row(i).transpose());
        CHECK((p.points.value().row(i).transpose() - ref).norm() < 1e-12);
    }

    SdfNetwork dead = net;
    dead.weights.back().value.setZero();
    ad::Tape t2;
    const PullResult pd = pull(t2, dead, t2.constant(q));
    CHECK(pd.vanishing == q.rows());
    CHECK(pd.points.value() == Mat(q));

    // ReLU network gradients are piecewise constant in q, so the direction only
    // carries weight gradients; freezing it must change those.
    auto first_layer_grad = [&](const PullOptions& opts) {
        net.zero_grad();
        ad::Tape tt;
        tt.backward(ad::sum(pull(tt, net, tt.constant(q), opts).points));
        return net.weights[0].grad;
    };
    PullOptions frozen;
    frozen.detach_direction = true;
    CHECK((first_layer_grad(frozen) - first_layer_grad({})).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("network checkpoint round trip") {
    SdfNetwork net = SdfNetwork::init_sphere(4, 16, 0.3, 14);
    net.transform.scale = 0.25;
    net.transform.offset = Vec3(1, -2, 3);
    const auto path = std::filesystem::temp_directory_path() / "gspull_test_net.bin";
    save_network(net, path);
    const SdfNetwork back = load_network(path);
    REQUIRE(back.layers() == net.layers());
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
        CHECK(back.weights[k].value == net.weights[k].value);
        CHECK(back.biases[k].value == net.biases[k].value);
    }
    CHECK(back.seed == 14);
    CHECK(back.transform.scale == 0.25);
    CHECK(back.transform.offset == Vec3(1, -2, 3));

    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    CHECK_THROWS_AS(load_network(path), io::FormatError);
    std::filesystem::remove(path);
}
