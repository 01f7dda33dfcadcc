#include "gspull/losses.hpp"

#include "gspull/gauss.hpp"
#include "gspull/log.hpp"

#include <array>
#include <cmath>
#include <queue>
#include <iomanip>
#include <limits>
#include <memory>
#include <stdexcept>

namespace gspull {

Real total(const LossReport& r, const LossWeights& w) {
    return r.splatting + w.alpha * r.thin + w.beta * r.tangent + w.gamma * r.pull + w.delta * r.orthogonal +
           w.eikonal * r.eikonal;
}

ad::Value total(ad::Tape& tape, const LossTerms& t, const LossWeights& w) {
    ad::Value sum = t.splatting.valid() ? t.splatting : tape.scalar(0);
    auto add = [&](const ad::Value& v, Real weight) {
        if (v.valid() && weight != 0) sum = sum + v * weight;
    };
    add(t.thin, w.alpha);
    add(t.tangent, w.beta);
    add(t.pull, w.gamma);
    add(t.orthogonal, w.delta);
    add(t.eikonal, w.eikonal);
    return sum;
}

LossReport report_of(const LossTerms& t, const LossWeights& w) {
    auto item = [](const ad::Value& v) { return v.valid() ? v.item() : Real(0); };
    LossReport r;
    r.splatting = item(t.splatting);
    r.thin = item(t.thin);
    r.tangent = item(t.tangent);
    r.pull = item(t.pull);
    r.orthogonal = item(t.orthogonal);
    r.eikonal = item(t.eikonal);
    r.total = total(r, w);
    return r;
}

// --- SSIM ---------------------------------------------------------------------

namespace {

using Plane = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const std::array<Real, kSsimWindow>& ssim_kernel() {
    static const std::array<Real, kSsimWindow> k = [] {
        std::array<Real, kSsimWindow> w{};
        Real s = 0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const Real d = static_cast<Real>(i - kSsimWindow / 2);
            w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
            s += w[static_cast<std::size_t>(i)];
        }
        for (auto& v : w) v /= s;
        return w;
    }();
    return k;
}

// Separable symmetric Gaussian filter with zero padding; self-adjoint.
Plane gaussian_filter(const Plane& in) {
    const auto& k = ssim_kernel();
    const int r = kSsimWindow / 2;
    const Index h = in.rows(), w = in.cols();
    Plane tmp = Plane::Zero(h, w), out = Plane::Zero(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            Real s = 0;
            for (int d = -r; d <= r; ++d) {
                const Index xx = x + d;
                if (xx >= 0 && xx < w) s += k[static_cast<std::size_t>(d + r)] * in(y, xx);
            }
            tmp(y, x) = s;
        }
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            Real s = 0;
            for (int d = -r; d <= r; ++d) {
                const Index yy = y + d;
                if (yy >= 0 && yy < h) s += k[static_cast<std::size_t>(d + r)] * tmp(yy, x);
            }
            out(y, x) = s;
        }
    return out;
}

Plane channel(const Mat& pixels, int width, int height, int c) {
    Plane p(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) p(y, x) = pixels(static_cast<Index>(y) * width + x, c);
    return p;
}

struct SsimChannel {
    Plane x, y, mx, my, a1, a2, b1, b2, s;
};

SsimChannel ssim_channel(const Plane& x, const Plane& y) {
    SsimChannel c;
    c.x = x;
    c.y = y;
    c.mx = gaussian_filter(x);
    c.my = gaussian_filter(y);
    const Plane exx = gaussian_filter(x.cwiseProduct(x));
    const Plane eyy = gaussian_filter(y.cwiseProduct(y));
    const Plane exy = gaussian_filter(x.cwiseProduct(y));
    const auto mx = c.mx.array(), my = c.my.array();
    c.a1 = (2 * mx * my + kSsimC1).matrix();
    c.a2 = (2 * (exy.array() - mx * my) + kSsimC2).matrix();
    c.b1 = (mx * mx + my * my + kSsimC1).matrix();
    c.b2 = (exx.array() - mx * mx + eyy.array() - my * my + kSsimC2).matrix();
    c.s = (c.a1.array() * c.a2.array() / (c.b1.array() * c.b2.array())).matrix();
    return c;
}

// d mean(S) / dx for one channel, scaled by `scale`.
Plane ssim_channel_grad(const SsimChannel& c, Real scale) {
    const auto my = c.my.array(), mx = c.mx.array();
    const auto b1b2 = c.b1.array() * c.b2.array();
    const Plane d_mx = (scale * ((2 * my * c.a2.array() - 2 * my * c.a1.array()) / b1b2 -
                                 c.s.array() * (2 * mx / c.b1.array() - 2 * mx / c.b2.array())))
                           .matrix();
    const Plane d_exx = (scale * (-c.s.array() / c.b2.array())).matrix();
    const Plane d_exy = (scale * (2 * c.a1.array() / b1b2)).matrix();
    return gaussian_filter(d_mx) + Plane(2 * c.x.array() * gaussian_filter(d_exx).array()) +
           Plane(c.y.array() * gaussian_filter(d_exy).array());
}

void require_same_size(Index rows_a, const Image& b, const char* what) {
    if (rows_a != b.pixel_count())
        throw std::invalid_argument(std::string(what) + ": image sizes differ (" + std::to_string(rows_a) + " vs " +
                                    std::to_string(b.pixel_count()) + " pixels)");
}

} // namespace

Real ssim(const Image& a, const Image& b) {
    if (!a.same_size(b))
        throw std::invalid_argument("ssim: image sizes differ (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                                    " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
    if (a.pixel_count() == 0) throw std::invalid_argument("ssim: empty images");
    Real s = 0;
    for (int c = 0; c < 3; ++c)
        s += ssim_channel(channel(a.pixels, a.width, a.height, c), channel(b.pixels, b.width, b.height, c)).s.mean();
    return s / 3;
}

ad::Value ssim(ad::Tape& tape, const ad::Value& image, const Image& target) {
    if (image.cols() != 3) throw std::invalid_argument("ssim: image must be (W*H) x 3");
    require_same_size(image.rows(), target, "ssim");
    if (target.pixel_count() == 0) throw std::invalid_argument("ssim: empty images");
    const int w = target.width, h = target.height;
    auto chans = std::make_shared<std::array<SsimChannel, 3>>();
    Real s = 0;
    for (int c = 0; c < 3; ++c) {
        (*chans)[static_cast<std::size_t>(c)] =
            ssim_channel(channel(image.value(), w, h, c), channel(target.pixels, w, h, c));
        s += (*chans)[static_cast<std::size_t>(c)].s.mean();
    }
    Mat value(1, 1);
    value(0, 0) = s / 3;
    return tape.custom({image}, std::move(value), [chans, w, h](const Mat& up) {
        const Real scale = up(0, 0) / (Real(3) * w * h);
        Mat g(static_cast<Index>(w) * h, 3);
        for (int c = 0; c < 3; ++c) {
            const Plane d = ssim_channel_grad((*chans)[static_cast<std::size_t>(c)], scale);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) g(static_cast<Index>(y) * w + x, c) = d(y, x);
        }
        return std::vector<Mat>{g};
    });
}

Real loss_splatting(const Image& rendered, const Image& gt) {
    const Real s = ssim(rendered, gt);
    const Real l1 = (rendered.pixels - gt.pixels).cwiseAbs().mean();
    return Real(0.8) * l1 + Real(0.2) * (1 - s) / 2;
}

ad::Value loss_splatting(ad::Tape& tape, const ad::Value& image, const Image& gt) {
    require_same_size(image.rows(), gt, "loss_splatting");
    const ad::Value l1 = ad::mean(ad::abs(image - tape.constant(gt.pixels)));
    const ad::Value s = ssim(tape, image, gt);
    return l1 * Real(0.8) + (Real(1) - s) * Real(0.1);
}

// --- geometry terms -----------------------------------------------------------

ad::Value loss_thin(ad::Tape& tape, const ad::Value& log_scales) {
    if (log_scales.rows() == 0) {
        log_warning("loss_thin: empty Gaussian set, term is 0");
        return tape.scalar(0);
    }
    return ad::mean(ad::row_min(ad::exp(log_scales * Real(2))));
}

ad::Value loss_alignment(ad::Tape& tape, const ad::Value& sdf_grad, const ad::Value& normals, Real min_grad_norm) {
    if (sdf_grad.rows() != normals.rows() || sdf_grad.cols() != 3 || normals.cols() != 3)
        throw std::invalid_argument("loss_alignment: gradients and normals must both be N x 3");
    const Vec norms = sdf_grad.value().rowwise().norm();
    std::vector<Index> keep;
    for (Index i = 0; i < norms.size(); ++i)
        if (norms(i) > min_grad_norm) keep.push_back(i);
    if (keep.empty()) return tape.scalar(0);
    ad::Value g = sdf_grad, n = normals;
    if (static_cast<Index>(keep.size()) != norms.size()) {
        g = ad::gather_rows(sdf_grad, std::span<const Index>(keep));
        n = ad::gather_rows(normals, std::span<const Index>(keep));
    }
    const ad::Value cosine = ad::row_dot(g, n) / (ad::row_norm(g) * ad::row_norm(n));
    return Real(1) - ad::mean(ad::abs(cosine));
}

ad::Value loss_pull(const ad::Value& pulled_queries, const ad::Value& assigned_centers, const ad::Value& assigned_quats,
                    const ad::Value& assigned_log_scales) {
    if (pulled_queries.rows() == 0) return pulled_queries.tape().scalar(0);
    const ad::Value d = pulled_queries - assigned_centers;
    return ad::mean(mahalanobis_sq(d, assigned_quats, assigned_log_scales)) * Real(0.5);
}

ad::Value loss_pull_to_centers(const ad::Value& pulled_queries, const ad::Value& assigned_centers) {
    if (pulled_queries.rows() == 0) return pulled_queries.tape().scalar(0);
    const ad::Value d = pulled_queries - assigned_centers;
    return ad::mean(ad::row_dot(d, d)) * Real(0.5);
}

Vec pull_probability(const Mat& pulled_queries, const Mat& assigned_centers, const Mat& quats, const Mat& log_scales) {
    ad::Tape t;
    const ad::Value m = mahalanobis_sq(t.constant(pulled_queries - assigned_centers), t.constant(quats), t.constant(log_scales));
    return (Real(-0.5) * m.value().col(0).array()).exp().matrix();
}

ad::Value loss_eikonal(const ad::Value& sdf_grad) {
    if (sdf_grad.rows() == 0) return sdf_grad.tape().scalar(0);
    return ad::mean(ad::square(ad::row_norm(sdf_grad) - Real(1)));
}

// --- nearest pulled Gaussian --------------------------------------------------

Index nearest_bruteforce(const Points& centers, const Vec3& q) {
    Index best = -1;
    Real best_d = std::numeric_limits<Real>::infinity();
    for (Index i = 0; i < centers.rows(); ++i) {
        const Real d = (centers.row(i).transpose() - q).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

NearestCenters::NearestCenters(const Points& centers, Real points_per_cell) : centers_(centers) {
    const Index n = centers.rows();
    if (n == 0) return;
    const Vec3 lo = centers.colwise().minCoeff().transpose();
    const Vec3 hi = centers.colwise().maxCoeff().transpose();
    const Vec3 ext = (hi - lo).cwiseMax(Real(1e-9));
    origin_ = lo;
    // Size cells from the axes the points actually span.
    Real volume = 1;
    int spanned = 0;
    for (int a = 0; a < 3; ++a)
        if (ext(a) > Real(1e-6) * ext.maxCoeff()) {
            volume *= ext(a);
            ++spanned;
        }
    cell_ = std::pow(volume * points_per_cell / static_cast<Real>(n), Real(1) / Real(std::max(spanned, 1)));
    cell_ = std::max(cell_, ext.maxCoeff() / 256);
    for (int a = 0; a < 3; ++a) dims_[a] = std::clamp(static_cast<int>(std::ceil(ext(a) / cell_)), 1, 256);
    const std::size_t cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    std::vector<int> counts(cells + 1, 0);
    std::vector<std::size_t> cell_of(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const int cx = cell_coord(centers(i, 0), 0), cy = cell_coord(centers(i, 1), 1), cz = cell_coord(centers(i, 2), 2);
        const std::size_t c = (static_cast<std::size_t>(cz) * dims_[1] + cy) * dims_[0] + cx;
        cell_of[static_cast<std::size_t>(i)] = c;
        ++counts[c + 1];
    }
    for (std::size_t c = 0; c < cells; ++c) counts[c + 1] += counts[c];
    cell_start_ = counts;
    cell_items_.assign(static_cast<std::size_t>(n), 0);
    std::vector<int> fill(counts.begin(), counts.end() - 1);
    for (Index i = 0; i < n; ++i) cell_items_[static_cast<std::size_t>(fill[cell_of[static_cast<std::size_t>(i)]]++)] = i;
}

int NearestCenters::cell_coord(Real x, int axis) const {
    const auto c = static_cast<int>(std::floor((x - origin_(axis)) / cell_));
    return std::clamp(c, 0, dims_[axis] - 1);
}

template <typename F>
void NearestCenters::for_shell(const int c[3], int r, F&& visit) const {
    const int zlo = std::max(c[2] - r, 0), zhi = std::min(c[2] + r, dims_[2] - 1);
    const int ylo = std::max(c[1] - r, 0), yhi = std::min(c[1] + r, dims_[1] - 1);
    const int xlo = std::max(c[0] - r, 0), xhi = std::min(c[0] + r, dims_[0] - 1);
    auto cell = [&](int x, int y, int z) {
        const std::size_t id = (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
        for (int e = cell_start_[id]; e < cell_start_[id + 1]; ++e) visit(cell_items_[static_cast<std::size_t>(e)]);
    };
    for (int z = zlo; z <= zhi; ++z)
        for (int y = ylo; y <= yhi; ++y) {
            if (std::abs(z - c[2]) == r || std::abs(y - c[1]) == r) {
                for (int x = xlo; x <= xhi; ++x) cell(x, y, z);
            } else {
                if (c[0] - r >= 0) cell(c[0] - r, y, z);
                if (r > 0 && c[0] + r < dims_[0]) cell(c[0] + r, y, z);
            }
        }
}

Real NearestCenters::outside_bound(const Vec3& q, const int c[3], int r) const {
    Real bound = std::numeric_limits<Real>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (c[a] - r > 0) bound = std::min(bound, q(a) - (origin_(a) + (c[a] - r) * cell_));
        if (c[a] + r < dims_[a] - 1) bound = std::min(bound, origin_(a) + (c[a] + r + 1) * cell_ - q(a));
    }
    return std::isinf(bound) ? bound : std::max(bound, Real(0));
}

Index NearestCenters::query(const Vec3& q) const {
    if (centers_.rows() == 0) return -1;
    const int c[3] = {cell_coord(q.x(), 0), cell_coord(q.y(), 1), cell_coord(q.z(), 2)};
    Index best = -1;
    Real best_d = std::numeric_limits<Real>::infinity();
    for (int r = 0;; ++r) {
        for_shell(c, r, [&](Index i) {
            const Real d = (centers_.row(i).transpose() - q).squaredNorm();
            if (d < best_d || (d == best_d && i < best)) {
                best_d = d;
                best = i;
            }
        });
        // Distance from q to any cell outside the searched box.
        const Real bound = outside_bound(q, c, r);
        if (std::isinf(bound)) break;
        if (best >= 0 && best_d < bound * bound) break;
    }
    return best;
}

std::vector<Index> NearestCenters::query(const Points& qs) const {
    std::vector<Index> out(static_cast<std::size_t>(qs.rows()));
    for (Index i = 0; i < qs.rows(); ++i) out[static_cast<std::size_t>(i)] = query(Vec3(qs.row(i).transpose()));
    return out;
}

Real NearestCenters::kth_distance(const Vec3& q, int k, Index exclude) const {
    if (k < 1) throw std::invalid_argument("kth_distance: k must be at least 1");
    if (centers_.rows() == 0) return std::numeric_limits<Real>::infinity();
    std::priority_queue<Real> best; // squared distances, largest on top
    const int c[3] = {cell_coord(q.x(), 0), cell_coord(q.y(), 1), cell_coord(q.z(), 2)};
    for (int r = 0;; ++r) {
        for_shell(c, r, [&](Index i) {
            if (i == exclude) return;
            const Real d = (centers_.row(i).transpose() - q).squaredNorm();
            if (static_cast<int>(best.size()) < k) best.push(d);
            else if (d < best.top()) {
                best.pop();
                best.push(d);
            }
        });
        const Real bound = outside_bound(q, c, r);
        if (std::isinf(bound)) break;
        if (static_cast<int>(best.size()) == k && best.top() < bound * bound) break;
    }
    return best.empty() ? std::numeric_limits<Real>::infinity() : std::sqrt(best.top());
}

Vec kth_neighbor_distances(const Points& points, int k) {
    const NearestCenters grid(points);
    Vec out(points.rows());
    for (Index i = 0; i < points.rows(); ++i) out(i) = grid.kth_distance(Vec3(points.row(i).transpose()), k, i);
    return out;
}

// --- training log -------------------------------------------------------------

CsvLog::CsvLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open training log: " + path.string());
    if (!append || std::filesystem::file_size(path) == 0) out_ << header() << '\n';
    out_ << std::setprecision(17);
}

std::string CsvLog::header() { return "iteration,splatting,thin,tangent,pull,orthogonal,eikonal,total,wall_seconds"; }

void CsvLog::write(int iteration, const LossReport& r, double wall_seconds) {
    out_ << iteration << ',' << r.splatting << ',' << r.thin << ',' << r.tangent << ',' << r.pull << ',' << r.orthogonal
         << ',' << r.eikonal << ',' << r.total << ',' << wall_seconds << '\n';
    out_.flush();
}

} // namespace gspull
