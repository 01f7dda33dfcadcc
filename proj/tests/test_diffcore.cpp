#include "gspull/tape.hpp"

#include <doctest.h>

#include <functional>
#include <random>
#include <string>

using namespace gspull;
using ad::Tape;
using ad::Value;

namespace {

using PointFn = std::function<Value(Tape&, Value)>;

Mat random_matrix(std::mt19937_64& rng, Index r, Index c, Real lo = -1, Real hi = 1) {
    std::uniform_real_distribution<Real> u(lo, hi);
    Mat m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

// Entries bounded away from zero, with random sign.
Mat away_from_zero(std::mt19937_64& rng, Index r, Index c) {
    Mat m = random_matrix(rng, r, c, Real(0.2), Real(1.5));
    std::bernoulli_distribution flip(0.5);
    for (Index i = 0; i < m.size(); ++i)
        if (flip(rng)) m.data()[i] = -m.data()[i];
    return m;
}

// Weighted sum so every output entry gets an O(1) non-uniform upstream gradient.
Value project(Tape& t, const Value& v, const Mat& w) { return ad::sum(v * t.constant(w)); }

} // namespace

TEST_CASE("forward examples") {
    Tape t;
    Value x = t.scalar(3);
    CHECK((x * x).item() == doctest::Approx(9));
    CHECK(ad::exp(t.scalar(0)).item() == doctest::Approx(1));
    Mat m(2, 2);
    m << 1, 2, 3, 4;
    Value prod = ad::matmul(t.constant(m), t.constant(Mat::Identity(2, 2)));
    CHECK(prod.value() == m);
}

TEST_CASE("backward examples") {
    ad::Parameter x("x", Mat::Constant(1, 1, 3));
    {
        Tape t;
        Value v = t.param(x);
        t.backward(v * v);
        CHECK(x.grad(0, 0) == doctest::Approx(6));
    }
    ad::Parameter y("y", Mat::Constant(1, 1, -1));
    {
        Tape t;
        t.backward(ad::relu(t.param(y)));
        CHECK(y.grad(0, 0) == 0);
    }
    Mat v0(1, 2);
    v0 << 3, 4;
    ad::Parameter v("v", v0);
    {
        Tape t;
        t.backward(ad::norm(t.param(v)));
        CHECK(v.grad(0, 0) == doctest::Approx(0.6));
        CHECK(v.grad(0, 1) == doctest::Approx(0.8));
    }
}

TEST_CASE("subgradient conventions at kinks") {
    ad::Parameter a("a", Mat::Zero(1, 1));
    ad::Parameter b("b", Mat::Zero(1, 1));
    Tape t;
    Value va = t.param(a), vb = t.param(b);
    t.backward(ad::relu(va) + ad::abs(vb));
    CHECK(a.grad(0, 0) == 0);
    CHECK(b.grad(0, 0) == 0);

    Tape t2;
    Value x = t2.param(a), y = t2.param(b);
    t2.backward(ad::minimum(x, y) + Real(2) * ad::maximum(x, y));
    CHECK(a.grad(0, 0) == 3); // both ties resolve to the first operand
    CHECK(b.grad(0, 0) == 0);
}

TEST_CASE("errors are diagnosed") {
    Tape t;
    Value a = t.constant(Mat::Ones(2, 3));
    Value b = t.constant(Mat::Ones(3, 2));
    try {
        (void)(a + b);
        FAIL("expected a shape error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("3x2") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS(ad::log(t.scalar(-1)), std::domain_error);
    CHECK_THROWS_AS(ad::log(t.scalar(0)), std::domain_error);
    CHECK_THROWS_AS(ad::sqrt(t.scalar(-1)), std::domain_error);
    CHECK_THROWS_AS(t.backward(a), std::invalid_argument);
}

TEST_CASE("grad_check examples") {
    std::mt19937_64 rng(7);
    const Mat p = random_matrix(rng, 1, 10);
    CHECK(ad::grad_check<Real>(PointFn([](Tape&, Value x) { return ad::sum(ad::square(x)); }), p, Real(1e-5)) < 1e-6);

    const Mat w = random_matrix(rng, 1, 4);
    const Mat x0 = random_matrix(rng, 1, 4);
    CHECK(ad::grad_check<Real>(PointFn([&](Tape& t, Value x) { return ad::exp(ad::dot(t.constant(w), x)); }), x0,
                               Real(1e-5)) < 1e-6);

    CHECK(ad::grad_check<Real>(PointFn([](Tape& t, Value) { return t.scalar(5); }), p, Real(1e-5)) == 0);
}

TEST_CASE("grad_check reports NaN as infinity") {
    const Mat p = Mat::Constant(1, 1, 1);
    const Real err = ad::grad_check<Real>(PointFn([](Tape& t, Value x) {
                                              Mat nan = Mat::Constant(1, 1, std::numeric_limits<Real>::quiet_NaN());
                                              return x * t.constant(nan);
                                          }),
                                          p, Real(1e-5));
    CHECK(std::isinf(err));
}

TEST_CASE("every primitive passes grad_check at random smooth points") {
    std::mt19937_64 rng(2024);
    struct Case {
        std::string name;
        std::function<Mat(std::mt19937_64&)> point;
        std::function<Value(Tape&, Value, const Mat&)> fn;
        Index out_rows, out_cols;
    };
    auto any = [](Index r, Index c) { return [r, c](std::mt19937_64& g) { return random_matrix(g, r, c); }; };
    auto positive = [](Index r, Index c) { return [r, c](std::mt19937_64& g) { return random_matrix(g, r, c, 0.3, 2.0); }; };
    auto nonzero = [](Index r, Index c) { return [r, c](std::mt19937_64& g) { return away_from_zero(g, r, c); }; };
    // Pairs split along columns: left half vs right half, separated so min/max have no ties.
    auto separated = [](std::mt19937_64& g) {
        Mat m = random_matrix(g, 3, 4);
        for (Index i = 0; i < 3; ++i)
            for (Index j = 0; j < 2; ++j)
                if (std::abs(m(i, j) - m(i, j + 2)) < 0.2) m(i, j + 2) += 0.5;
        return m;
    };
    const std::vector<Index> rows_pick{2, 0, 2, 1};
    const std::vector<Index> cols_pick{1, 0, 2};

    std::vector<Case> cases = {
        {"add", any(3, 4), [](Tape&, Value x, const Mat&) { return ad::cols(x, 0, 2) + ad::cols(x, 2, 2); }, 3, 2},
        {"add broadcast", any(3, 4), [](Tape&, Value x, const Mat&) { return x + ad::col(x, 1); }, 3, 4},
        {"sub", any(3, 4), [](Tape&, Value x, const Mat&) { return ad::cols(x, 0, 2) - ad::cols(x, 2, 2); }, 3, 2},
        {"mul", any(3, 4), [](Tape&, Value x, const Mat&) { return ad::cols(x, 0, 2) * ad::cols(x, 2, 2); }, 3, 2},
        {"div", nonzero(3, 4), [](Tape&, Value x, const Mat&) { return ad::cols(x, 0, 2) / ad::cols(x, 2, 2); }, 3, 2},
        {"minimum", separated, [](Tape&, Value x, const Mat&) { return ad::minimum(ad::cols(x, 0, 2), ad::cols(x, 2, 2)); }, 3, 2},
        {"maximum", separated, [](Tape&, Value x, const Mat&) { return ad::maximum(ad::cols(x, 0, 2), ad::cols(x, 2, 2)); }, 3, 2},
        {"neg", any(3, 2), [](Tape&, Value x, const Mat&) { return -x; }, 3, 2},
        {"scale", any(3, 2), [](Tape&, Value x, const Mat&) { return x * Real(2.5); }, 3, 2},
        {"add_scalar", any(3, 2), [](Tape&, Value x, const Mat&) { return x + Real(0.7); }, 3, 2},
        {"exp", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::exp(x); }, 3, 2},
        {"log", positive(3, 2), [](Tape&, Value x, const Mat&) { return ad::log(x); }, 3, 2},
        {"sqrt", positive(3, 2), [](Tape&, Value x, const Mat&) { return ad::sqrt(x); }, 3, 2},
        {"pow", positive(3, 2), [](Tape&, Value x, const Mat&) { return ad::pow(x, Real(1.7)); }, 3, 2},
        {"square", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::square(x); }, 3, 2},
        {"abs", nonzero(3, 2), [](Tape&, Value x, const Mat&) { return ad::abs(x); }, 3, 2},
        {"relu", nonzero(3, 2), [](Tape&, Value x, const Mat&) { return ad::relu(x); }, 3, 2},
        {"clamp_below", nonzero(3, 2), [](Tape&, Value x, const Mat&) { return ad::clamp_below(x, Real(0.1)); }, 3, 2},
        {"sum", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::sum(ad::square(x)); }, 1, 1},
        {"mean", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::mean(ad::square(x)); }, 1, 1},
        {"row_sum", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::row_sum(x); }, 3, 1},
        {"row_min", separated, [](Tape&, Value x, const Mat&) { return ad::row_min(ad::cols(x, 0, 2) - ad::cols(x, 2, 2) * Real(3)); }, 3, 1},
        {"dot", any(1, 6), [](Tape&, Value x, const Mat&) { return ad::dot(ad::cols(x, 0, 3), ad::exp(ad::cols(x, 3, 3))); }, 1, 1},
        {"row_dot", any(3, 6), [](Tape&, Value x, const Mat&) { return ad::row_dot(ad::cols(x, 0, 3), ad::cols(x, 3, 3)); }, 3, 1},
        {"matmul", any(3, 4), [](Tape&, Value x, const Mat&) { return ad::matmul(x, ad::transpose(x)); }, 3, 3},
        {"matvec", any(3, 4), [](Tape&, Value x, const Mat&) { return ad::matvec(ad::cols(x, 0, 3), ad::col(x, 3)); }, 3, 1},
        {"transpose", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::transpose(x); }, 2, 3},
        {"norm", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::norm(x); }, 1, 1},
        {"normalize", any(1, 4), [](Tape&, Value x, const Mat&) { return ad::normalize(x); }, 1, 4},
        {"row_norm", any(3, 3), [](Tape&, Value x, const Mat&) { return ad::row_norm(x); }, 3, 1},
        {"row_normalize", any(3, 3), [](Tape&, Value x, const Mat&) { return ad::row_normalize(x); }, 3, 3},
        {"hcat", any(3, 2), [](Tape&, Value x, const Mat&) { return ad::hcat<Real>({x, ad::square(x)}); }, 3, 4},
        {"gather_rows", any(3, 2), [&](Tape&, Value x, const Mat&) { return ad::gather_rows(x, std::span<const Index>(rows_pick)); }, 4, 2},
        {"select_per_row", any(3, 3), [&](Tape&, Value x, const Mat&) { return ad::select_per_row(x, std::span<const Index>(cols_pick)); }, 3, 1},
    };

    for (const auto& c : cases) {
        Real worst = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const Mat p = c.point(rng);
            const Mat w = random_matrix(rng, c.out_rows, c.out_cols, 0.5, 1.5);
            PointFn fn = [&](Tape& t, Value x) { return project(t, c.fn(t, x, w), w); };
            worst = std::max(worst, ad::grad_check<Real>(fn, p, Real(1e-6)));
        }
        INFO("primitive " << c.name);
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("backward is linear in the root") {
    std::mt19937_64 rng(11);
    ad::Parameter x("x", random_matrix(rng, 2, 3));
    auto f = [](Tape& t, Value v) { return ad::sum(ad::exp(v) * v); };
    auto g = [](Tape& t, Value v) { return ad::norm(ad::matmul(v, ad::transpose(v))); };
    std::uniform_real_distribution<Real> u(-2, 2);
    for (int trial = 0; trial < 10; ++trial) {
        const Real a = u(rng), b = u(rng);
        x.zero_grad();
        Tape tf;
        tf.backward(f(tf, tf.param(x)));
        const Mat gf = x.grad;
        x.zero_grad();
        Tape tg;
        tg.backward(g(tg, tg.param(x)));
        const Mat gg = x.grad;
        x.zero_grad();
        Tape th;
        Value v = th.param(x);
        th.backward(f(th, v) * a + g(th, v) * b);
        CHECK((x.grad - (a * gf + b * gg)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("forward and backward are deterministic") {
    std::mt19937_64 rng(3);
    ad::Parameter x("x", random_matrix(rng, 8, 3));
    auto run = [&]() {
        x.zero_grad();
        Tape t;
        Value v = t.param(x);
        t.backward(ad::mean(ad::row_norm(ad::matmul(v, ad::transpose(v)))));
        return x.grad;
    };
    const Mat a = run();
    const Mat b = run();
    CHECK(a == b);
}

TEST_CASE("parameters accumulate across repeated use and reset") {
    ad::Parameter x("x", Mat::Constant(1, 1, 2));
    Tape t;
    Value a = t.param(x);
    Value b = t.param(x);
    CHECK(a.id() == b.id());
    t.backward(a * b + a);
    CHECK(x.grad(0, 0) == doctest::Approx(5));
    t.zero_grad();
    CHECK(x.grad(0, 0) == 0);
}

TEST_CASE("detach blocks gradient flow") {
    ad::Parameter x("x", Mat::Constant(1, 1, 2));
    Tape t;
    Value v = t.param(x);
    t.backward(v * ad::detach(v));
    CHECK(x.grad(0, 0) == doctest::Approx(2));
}
