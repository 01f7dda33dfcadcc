#include "gspull/sdfnet.hpp"

#include "gspull/binio.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace gspull {

SdfNetwork SdfNetwork::init_sphere(int layers, int width, Real radius, std::uint64_t seed) {
    if (layers < 2) throw std::invalid_argument("init_sphere: need at least 2 layers, got " + std::to_string(layers));
    if (width < 8) throw std::invalid_argument("init_sphere: width must be >= 8, got " + std::to_string(width));
    if (!(radius > 0 && radius < 1)) throw std::invalid_argument("init_sphere: radius must lie in (0, 1)");

    SdfNetwork net;
    net.seed = seed;
    std::mt19937_64 rng(seed);
    std::vector<int> dims{3};
    for (int k = 0; k < layers - 1; ++k) dims.push_back(width);
    dims.push_back(1);

    for (int k = 0; k < layers; ++k) {
        const int in = dims[static_cast<std::size_t>(k)];
        const int out = dims[static_cast<std::size_t>(k) + 1];
        Mat w(in, out);
        Mat b = Mat::Zero(1, out);
        const bool last = k == layers - 1;
        std::normal_distribution<double> dist(
            last ? std::sqrt(std::numbers::pi) / std::sqrt(static_cast<double>(in)) : 0.0,
            last ? 1e-6 : std::sqrt(2.0) / std::sqrt(static_cast<double>(out)));
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Real>(dist(rng));
        if (last) b(0, 0) = -radius;
        net.weights.emplace_back("W" + std::to_string(k), std::move(w));
        net.biases.emplace_back("b" + std::to_string(k), std::move(b));
    }
    net.weight_moments.resize(net.weights.size());
    net.bias_moments.resize(net.biases.size());

    // Refit the output layer to |q| - radius by ridge regression toward the
    // drawn weights; finite-width draws otherwise leave a visibly bumpy sphere.
    const Index m = std::max<Index>(4096, 16 * Index(width));
    Points q(m, 3);
    std::uniform_real_distribution<double> cube(-1, 1);
    std::normal_distribution<double> gauss(0, 1), shell(radius, 0.1);
    for (Index i = 0; i < m; ++i) {
        if (i % 2 == 0) {
            q.row(i) << Real(cube(rng)), Real(cube(rng)), Real(cube(rng));
        } else {
            Vec3 d(Real(gauss(rng)), Real(gauss(rng)), Real(gauss(rng)));
            q.row(i) = (d.normalized() * Real(shell(rng))).transpose();
        }
    }
    Mat h = q;
    for (std::size_t k = 0; k + 1 < net.weights.size(); ++k)
        h = ((h * net.weights[k].value).rowwise() + net.biases[k].value.row(0)).cwiseMax(Real(0));
    Eigen::MatrixXd a(m, h.cols() + 1);
    a.leftCols(h.cols()) = h.cast<double>();
    a.col(h.cols()).setOnes();
    Eigen::VectorXd y(m), theta0(h.cols() + 1);
    for (Index i = 0; i < m; ++i) y(i) = double(q.row(i).norm()) - radius;
    theta0.head(h.cols()) = net.weights.back().value.col(0).cast<double>();
    theta0(h.cols()) = -radius;
    const double lambda = 1e-3 * double(m);
    Eigen::MatrixXd normal = a.transpose() * a;
    normal.diagonal().array() += lambda;
    const Eigen::VectorXd theta = normal.ldlt().solve(a.transpose() * y + lambda * theta0);
    net.weights.back().value.col(0) = theta.head(h.cols()).cast<Real>();
    net.biases.back().value(0, 0) = Real(theta(h.cols()));
    return net;
}

int SdfNetwork::width() const {
    return weights.empty() ? 0 : static_cast<int>(weights.front().value.cols());
}

Index SdfNetwork::parameter_count() const {
    Index n = 0;
    for (const auto& w : weights) n += w.value.size();
    for (const auto& b : biases) n += b.value.size();
    return n;
}

std::vector<ad::Parameter*> SdfNetwork::parameters() {
    std::vector<ad::Parameter*> out;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        out.push_back(&weights[k]);
        out.push_back(&biases[k]);
    }
    return out;
}

void SdfNetwork::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

Vec SdfNetwork::evaluate(const Points& q) const {
    Mat h = q;
    for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
        h = ((h * weights[k].value).rowwise() + biases[k].value.row(0)).cwiseMax(Real(0));
    }
    Mat out = (h * weights.back().value).rowwise() + biases.back().value.row(0);
    return out.col(0);
}

Real SdfNetwork::evaluate(const Vec3& q) const {
    Points p(1, 3);
    p.row(0) = q.transpose();
    return evaluate(p)(0);
}

void SdfNetwork::evaluate_with_gradient(const Points& q, Vec& sdf, Points& grad) const {
    std::vector<Mat> masks;
    Mat h = q;
    for (std::size_t k = 0; k + 1 < weights.size(); ++k) {
        Mat z = (h * weights[k].value).rowwise() + biases[k].value.row(0);
        masks.push_back((z.array() > Real(0)).template cast<Real>().matrix());
        h = z.cwiseMax(Real(0));
    }
    sdf = ((h * weights.back().value).rowwise() + biases.back().value.row(0)).col(0);
    Mat g = masks.back().array().rowwise() * weights.back().value.col(0).transpose().array();
    for (std::size_t k = weights.size() - 2; k >= 1; --k) {
        g = (g * weights[k].value.transpose()).cwiseProduct(masks[k - 1]);
    }
    grad = g * weights.front().value.transpose();
}

ad::Value eval(ad::Tape& tape, SdfNetwork& net, const ad::Value& q) {
    if (q.cols() != 3) throw std::invalid_argument("sdf eval: queries must be N x 3");
    ad::Value h = q;
    const std::size_t last = net.weights.size() - 1;
    for (std::size_t k = 0; k < last; ++k) {
        h = ad::relu(ad::matmul(h, tape.param(net.weights[k])) + tape.param(net.biases[k]));
    }
    return ad::matmul(h, tape.param(net.weights[last])) + tape.param(net.biases[last]);
}

SdfEval eval_grad(ad::Tape& tape, SdfNetwork& net, const ad::Value& q) {
    if (q.cols() != 3) throw std::invalid_argument("sdf eval_grad: queries must be N x 3");
    const std::size_t last = net.weights.size() - 1;
    std::vector<ad::Value> masks;
    ad::Value h = q;
    for (std::size_t k = 0; k < last; ++k) {
        const ad::Value z = ad::matmul(h, tape.param(net.weights[k])) + tape.param(net.biases[k]);
        masks.push_back(tape.constant((z.value().array() > Real(0)).template cast<Real>().matrix()));
        h = ad::relu(z);
    }
    const ad::Value w_last = tape.param(net.weights[last]);
    const ad::Value sdf = ad::matmul(h, w_last) + tape.param(net.biases[last]);

    ad::Value g = masks[last - 1] * ad::transpose(w_last);
    for (std::size_t k = last - 1; k >= 1; --k) {
        g = ad::matmul(g, ad::transpose(tape.param(net.weights[k]))) * masks[k - 1];
    }
    const ad::Value grad = ad::matmul(g, ad::transpose(tape.param(net.weights[0])));
    return {sdf, grad};
}

PullResult pull(ad::Tape& tape, SdfNetwork& net, const ad::Value& q, const PullOptions& opts) {
    PullResult out;
    const SdfEval e = eval_grad(tape, net, q);
    out.sdf = e.sdf;
    out.grad = e.grad;
    const Vec norms = e.grad.value().rowwise().norm();
    const Index n = q.rows();
    Mat keep(n, 1), pad(n, 1);
    out.valid.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const bool ok = norms(i) > opts.min_grad_norm;
        out.valid[static_cast<std::size_t>(i)] = ok;
        keep(i, 0) = ok ? Real(1) : Real(0);
        pad(i, 0) = ok ? Real(0) : Real(1);
        if (!ok) ++out.vanishing;
    }
    ad::Value dir = e.grad / (ad::row_norm(e.grad) + tape.constant(pad));
    if (opts.detach_direction) dir = ad::detach(dir);
    out.points = q - (e.sdf * tape.constant(keep)) * dir;
    return out;
}

// --- checkpoint ---------------------------------------------------------------

namespace {
constexpr char kNetMagic[9] = "GSPLSDFN";
constexpr std::uint32_t kNetVersion = 1;
} // namespace

void save_network(const SdfNetwork& net, const std::filesystem::path& path) {
    io::Writer w;
    w.magic(kNetMagic);
    w.u32(kNetVersion);
    w.u32(static_cast<std::uint32_t>(net.weights.size()));
    w.u32(static_cast<std::uint32_t>(net.weights.front().value.rows()));
    for (const auto& l : net.weights) w.u32(static_cast<std::uint32_t>(l.value.cols()));
    w.u64(net.seed);
    w.f64(static_cast<double>(net.transform.scale));
    for (Index k = 0; k < 3; ++k) w.f64(static_cast<double>(net.transform.offset(k)));
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
        const Mat& m = net.weights[k].value;
        for (Index i = 0; i < m.size(); ++i) w.f64(static_cast<double>(m.data()[i]));
        const Mat& b = net.biases[k].value;
        for (Index i = 0; i < b.size(); ++i) w.f64(static_cast<double>(b.data()[i]));
    }
    w.save(path);
}

SdfNetwork load_network(const std::filesystem::path& path) {
    io::Reader r = io::Reader::open(path);
    r.expect_magic(kNetMagic);
    const std::uint64_t at = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != kNetVersion) throw io::FormatError("unsupported network version " + std::to_string(version), at);
    const std::uint64_t count_at = r.offset();
    const std::uint32_t layers = r.u32("layer count");
    if (layers < 2 || layers > 64) throw io::FormatError("implausible layer count " + std::to_string(layers), count_at);
    std::vector<std::uint32_t> dims;
    for (std::uint32_t k = 0; k <= layers; ++k) {
        const std::uint64_t dim_at = r.offset();
        dims.push_back(r.u32("layer size"));
        if (dims.back() == 0 || dims.back() > 1u << 16) throw io::FormatError("implausible layer size", dim_at);
    }
    if (dims.front() != 3 || dims.back() != 1) throw io::FormatError("network must map 3 inputs to 1 output", count_at);
    SdfNetwork net;
    net.seed = r.u64("seed");
    net.transform.scale = static_cast<Real>(r.f64("transform scale"));
    for (Index k = 0; k < 3; ++k) net.transform.offset(k) = static_cast<Real>(r.f64("transform offset"));
    for (std::uint32_t k = 0; k < layers; ++k) {
        Mat w(dims[k], dims[k + 1]);
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Real>(r.f64("weights"));
        Mat b(1, dims[k + 1]);
        for (Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<Real>(r.f64("biases"));
        net.weights.emplace_back("W" + std::to_string(k), std::move(w));
        net.biases.emplace_back("b" + std::to_string(k), std::move(b));
    }
    r.expect_end();
    net.weight_moments.resize(net.weights.size());
    net.bias_moments.resize(net.biases.size());
    return net;
}

} // namespace gspull
