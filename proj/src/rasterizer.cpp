#include "gspull/rasterizer.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <unsupported/Eigen/AutoDiff>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gspull {

void CameraView::validate() const {
    if (!(fx > 0 && fy > 0)) throw std::invalid_argument("camera '" + name + "': focal lengths must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("camera '" + name + "': image size must be positive");
    const Real err = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(err <= Real(1e-10)) || rotation.determinant() < 0)
        throw std::invalid_argument("camera '" + name + "': pose rotation is not orthonormal");
    if (image && (image->width != width || image->height != height))
        throw std::invalid_argument("camera '" + name + "': image size does not match intrinsics");
}

CameraView CameraView::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, Real focal, int width, int height) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 u = up.normalized();
    if (std::abs(forward.dot(u)) > Real(0.999)) u = std::abs(forward.x()) < Real(0.9) ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 right = forward.cross(u).normalized();
    const Vec3 down = forward.cross(right);
    CameraView cam;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    cam.fx = cam.fy = focal;
    cam.width = width;
    cam.height = height;
    cam.cx = Real(0.5) * width;
    cam.cy = Real(0.5) * height;
    return cam;
}

namespace {

// Outputs: mean x, mean y, dilated covariance (a, b, c), conic (a, b, c).
constexpr int kOutputs = 8;
constexpr int kInputs = 10;

template <typename T>
void screen_terms(const T* mu, const T* ls, const T* q, const CameraView& cam, Real dilation, T* out) {
    using std::exp;
    using std::sqrt;
    const T qn = sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    const T w = q[0] / qn, x = q[1] / qn, y = q[2] / qn, z = q[3] / qn;
    const T r[9] = {Real(1) - Real(2) * (y * y + z * z), Real(2) * (x * y - w * z), Real(2) * (x * z + w * y),
                    Real(2) * (x * y + w * z), Real(1) - Real(2) * (x * x + z * z), Real(2) * (y * z - w * x),
                    Real(2) * (x * z - w * y), Real(2) * (y * z + w * x), Real(1) - Real(2) * (x * x + y * y)};
    const T s[3] = {exp(ls[0]), exp(ls[1]), exp(ls[2])};

    const Mat3& W = cam.rotation;
    T t[3];
    for (int i = 0; i < 3; ++i) t[i] = W(i, 0) * mu[0] + W(i, 1) * mu[1] + W(i, 2) * mu[2] + cam.translation(i);
    const T iz = Real(1) / t[2];
    const T j00 = cam.fx * iz, j02 = -cam.fx * t[0] * iz * iz;
    const T j11 = cam.fy * iz, j12 = -cam.fy * t[1] * iz * iz;

    // U = J W R diag(s); screen covariance = U U^T.
    T jw0[3], jw1[3];
    for (int k = 0; k < 3; ++k) {
        jw0[k] = j00 * W(0, k) + j02 * W(2, k);
        jw1[k] = j11 * W(1, k) + j12 * W(2, k);
    }
    T u0[3], u1[3];
    for (int k = 0; k < 3; ++k) {
        u0[k] = (jw0[0] * r[k] + jw0[1] * r[3 + k] + jw0[2] * r[6 + k]) * s[k];
        u1[k] = (jw1[0] * r[k] + jw1[1] * r[3 + k] + jw1[2] * r[6 + k]) * s[k];
    }
    const T a = u0[0] * u0[0] + u0[1] * u0[1] + u0[2] * u0[2] + dilation;
    const T b = u0[0] * u1[0] + u0[1] * u1[1] + u0[2] * u1[2];
    const T c = u1[0] * u1[0] + u1[1] * u1[1] + u1[2] * u1[2] + dilation;
    const T det = a * c - b * b;
    out[0] = cam.fx * t[0] * iz + cam.cx;
    out[1] = cam.fy * t[1] * iz + cam.cy;
    out[2] = a;
    out[3] = b;
    out[4] = c;
    out[5] = c / det;
    out[6] = -b / det;
    out[7] = a / det;
}

struct Inputs {
    Real v[kInputs]; // mu xyz, log_scales xyz, quat wxyz
};

Inputs gather(const Mat& centers, const Mat& log_scales, const Mat& quats, Index i) {
    Inputs in;
    for (int k = 0; k < 3; ++k) {
        in.v[k] = centers(i, k);
        in.v[3 + k] = log_scales(i, k);
    }
    for (int k = 0; k < 4; ++k) in.v[6 + k] = quats(i, k);
    return in;
}

std::optional<Splat2D> project_raw(const Inputs& in, Index source, Real opacity, const Vec3& color,
                                   const CameraView& cam, const RenderConfig& cfg) {
    const Vec3 mu(in.v[0], in.v[1], in.v[2]);
    const Real depth = cam.to_camera(mu).z();
    if (!(depth > cfg.near_plane)) return std::nullopt;
    Real out[kOutputs];
    screen_terms<Real>(in.v, in.v + 3, in.v + 6, cam, cfg.dilation, out);
    for (Real o : out)
        if (!std::isfinite(o)) return std::nullopt;
    Splat2D s;
    s.source = source;
    s.mean = Vec2(out[0], out[1]);
    s.covariance << out[2], out[3], out[3], out[4];
    s.conic = Vec3(out[5], out[6], out[7]);
    s.depth = depth;
    s.opacity = opacity;
    s.color = color;
    const Real mid = Real(0.5) * (out[2] + out[4]);
    const Real det = out[2] * out[4] - out[3] * out[3];
    const Real lmax = mid + std::sqrt(std::max(mid * mid - det, Real(0)));
    const Real sd = std::sqrt(lmax);
    const Real r3 = cfg.cull_sigma * sd;
    if (s.mean.x() + r3 < 0 || s.mean.x() - r3 > cam.width || s.mean.y() + r3 < 0 || s.mean.y() - r3 > cam.height)
        return std::nullopt;
    s.radius = cfg.support_sigma * sd;
    return s;
}

void sort_splats(std::vector<Splat2D>& splats) {
    std::stable_sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.source < b.source;
    });
}

// Exponent -0.5 d^T conic d of a splat at a pixel coordinate.
inline Real splat_power(const Splat2D& s, Real px, Real py, Real& dx, Real& dy) {
    dx = px - s.mean.x();
    dy = py - s.mean.y();
    return Real(-0.5) * (s.conic(0) * dx * dx + Real(2) * s.conic(1) * dx * dy + s.conic(2) * dy * dy);
}

struct Contribution {
    int splat;
    Real p;
    Real alpha;
    Real transmittance; // before this splat
};

// Shared forward/backward machinery for one view.
class Rasterizer {
public:
    Rasterizer(const CameraView& cam, const RenderConfig& cfg) : cam_(cam), cfg_(cfg) {
        if (cfg.tile_size <= 0) throw std::invalid_argument("render: tile size must be positive");
        cam.validate();
    }

    void prepare(const Mat& centers, const Mat& log_scales, const Mat& quats, const Mat& opacity_logits,
                 const Mat& colors) {
        const Index n = centers.rows();
        if (log_scales.rows() != n || quats.rows() != n || opacity_logits.rows() != n || colors.rows() != n ||
            centers.cols() != 3 || log_scales.cols() != 3 || quats.cols() != 4 || opacity_logits.cols() != 1 ||
            colors.cols() != 3)
            throw std::invalid_argument("render: Gaussian attribute shapes disagree");
        count_ = n;
        splats_.clear();
        inputs_.clear();
        for (Index i = 0; i < n; ++i) {
            const Inputs in = gather(centers, log_scales, quats, i);
            const Real o = logistic(opacity_logits(i, 0));
            auto s = project_raw(in, i, o, colors.row(i).transpose(), cam_, cfg_);
            if (s) splats_.push_back(*s);
        }
        sort_splats(splats_);
        for (const auto& s : splats_) inputs_.push_back(gather(centers, log_scales, quats, s.source));
        bin();
    }

    void forward(RenderedImage& out, bool record) {
        const int w = cam_.width, h = cam_.height;
        out.color = Image(w, h);
        out.alpha = Vec::Zero(static_cast<Index>(w) * h);
        out.screen_grad = Vec::Zero(count_);
        out.hits = Vec::Zero(count_);
        for (const auto& s : splats_) out.hits(s.source) = 1;
        if (record) {
            offsets_.assign(static_cast<std::size_t>(w) * h + 1, 0);
            contribs_.clear();
        }
        const Real cutoff = Real(-0.5) * cfg_.support_sigma * cfg_.support_sigma;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const Index pix = static_cast<Index>(y) * w + x;
                const auto& list = tiles_[static_cast<std::size_t>(tile_of(x, y))];
                const Real px = x + Real(0.5), py = y + Real(0.5);
                Vec3 c = Vec3::Zero();
                Real t = 1;
                for (int k : list) {
                    const Splat2D& s = splats_[static_cast<std::size_t>(k)];
                    Real dx, dy;
                    const Real power = splat_power(s, px, py, dx, dy);
                    if (power < cutoff) continue;
                    const Real p = std::exp(power);
                    const Real alpha = std::min(cfg_.alpha_max, s.opacity * p);
                    if (record) contribs_.push_back({k, p, alpha, t});
                    c += (alpha * t) * s.color;
                    t *= Real(1) - alpha;
                    if (cfg_.early_termination && t < cfg_.min_transmittance) break;
                }
                c += t * cfg_.background;
                out.color.pixels.row(pix) = c.transpose();
                out.alpha(pix) = Real(1) - t;
                if (record) offsets_[static_cast<std::size_t>(pix) + 1] = contribs_.size();
            }
        }
    }

    // Gradients for centers, log-scales, quaternions, opacity logits, colors.
    std::vector<Mat> backward(const Mat& upstream, RenderedImage& out) {
        const int w = cam_.width, h = cam_.height;
        const std::size_t m = splats_.size();
        std::vector<Real> d_mean(2 * m, 0), d_conic(3 * m, 0), d_opacity(m, 0);
        std::vector<Vec3> d_color(m, Vec3::Zero());

        for (Index pix = 0; pix < static_cast<Index>(w) * h; ++pix) {
            const Vec3 g = upstream.row(pix).transpose();
            if (g.isZero()) continue;
            const Real px = static_cast<Real>(pix % w) + Real(0.5);
            const Real py = static_cast<Real>(pix / w) + Real(0.5);
            Vec3 behind = cfg_.background;
            const std::size_t lo = offsets_[static_cast<std::size_t>(pix)];
            for (std::size_t e = offsets_[static_cast<std::size_t>(pix) + 1]; e-- > lo;) {
                const Contribution& ct = contribs_[e];
                const auto k = static_cast<std::size_t>(ct.splat);
                const Splat2D& s = splats_[k];
                d_color[k] += (ct.alpha * ct.transmittance) * g;
                const Real d_alpha = ct.transmittance * (s.color - behind).dot(g);
                behind = ct.alpha * s.color + (Real(1) - ct.alpha) * behind;
                if (s.opacity * ct.p > cfg_.alpha_max) continue;
                d_opacity[k] += ct.p * d_alpha;
                const Real d_power = s.opacity * ct.p * d_alpha;
                Real dx, dy;
                splat_power(s, px, py, dx, dy);
                d_conic[3 * k + 0] += Real(-0.5) * dx * dx * d_power;
                d_conic[3 * k + 1] += -dx * dy * d_power;
                d_conic[3 * k + 2] += Real(-0.5) * dy * dy * d_power;
                d_mean[2 * k + 0] += (s.conic(0) * dx + s.conic(1) * dy) * d_power;
                d_mean[2 * k + 1] += (s.conic(1) * dx + s.conic(2) * dy) * d_power;
            }
        }

        std::vector<Mat> grads{Mat::Zero(count_, 3), Mat::Zero(count_, 3), Mat::Zero(count_, 4), Mat::Zero(count_, 1),
                               Mat::Zero(count_, 3)};
        using Deriv = Eigen::Matrix<Real, kInputs, 1>;
        using AD = Eigen::AutoDiffScalar<Deriv>;
        for (std::size_t k = 0; k < m; ++k) {
            const Splat2D& s = splats_[k];
            const Index i = s.source;
            AD v[kInputs];
            for (int a = 0; a < kInputs; ++a) v[a] = AD(inputs_[k].v[a], kInputs, a);
            AD o[kOutputs];
            screen_terms<AD>(v, v + 3, v + 6, cam_, cfg_.dilation, o);
            Deriv total = d_mean[2 * k] * o[0].derivatives() + d_mean[2 * k + 1] * o[1].derivatives() +
                          d_conic[3 * k] * o[5].derivatives() + d_conic[3 * k + 1] * o[6].derivatives() +
                          d_conic[3 * k + 2] * o[7].derivatives();
            for (int a = 0; a < 3; ++a) {
                grads[0](i, a) = total(a);
                grads[1](i, a) = total(3 + a);
            }
            for (int a = 0; a < 4; ++a) grads[2](i, a) = total(6 + a);
            grads[3](i, 0) = d_opacity[k] * s.opacity * (Real(1) - s.opacity);
            grads[4].row(i) = d_color[k].transpose();
            const Real gx = d_mean[2 * k] * Real(0.5) * w;
            const Real gy = d_mean[2 * k + 1] * Real(0.5) * h;
            out.screen_grad(i) = std::sqrt(gx * gx + gy * gy);
        }
        return grads;
    }

    const std::vector<Splat2D>& splats() const { return splats_; }

private:
    int tile_of(int x, int y) const { return (y / cfg_.tile_size) * tiles_x_ + x / cfg_.tile_size; }

    void bin() {
        const int ts = cfg_.tile_size;
        tiles_x_ = (cam_.width + ts - 1) / ts;
        tiles_y_ = (cam_.height + ts - 1) / ts;
        tiles_.assign(static_cast<std::size_t>(tiles_x_) * tiles_y_, {});
        for (std::size_t k = 0; k < splats_.size(); ++k) {
            const Splat2D& s = splats_[k];
            const auto lo_x = static_cast<int>(std::floor((s.mean.x() - s.radius) / ts));
            const auto hi_x = static_cast<int>(std::floor((s.mean.x() + s.radius) / ts));
            const auto lo_y = static_cast<int>(std::floor((s.mean.y() - s.radius) / ts));
            const auto hi_y = static_cast<int>(std::floor((s.mean.y() + s.radius) / ts));
            for (int ty = std::max(lo_y, 0); ty <= std::min(hi_y, tiles_y_ - 1); ++ty)
                for (int tx = std::max(lo_x, 0); tx <= std::min(hi_x, tiles_x_ - 1); ++tx)
                    tiles_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(static_cast<int>(k));
        }
    }

    CameraView cam_;
    RenderConfig cfg_;
    Index count_ = 0;
    std::vector<Splat2D> splats_;
    std::vector<Inputs> inputs_;
    int tiles_x_ = 0, tiles_y_ = 0;
    std::vector<std::vector<int>> tiles_;
    std::vector<std::size_t> offsets_;
    std::vector<Contribution> contribs_;
};

} // namespace

std::optional<Splat2D> project(const Gaussian& g, const CameraView& cam, const RenderConfig& cfg) {
    Inputs in;
    for (int k = 0; k < 3; ++k) {
        in.v[k] = g.center(k);
        in.v[3 + k] = g.log_scales(k);
    }
    for (int k = 0; k < 4; ++k) in.v[6 + k] = g.rotation(k);
    return project_raw(in, 0, g.opacity(), g.color, cam, cfg);
}

Real splat_density(const Splat2D& s, const Vec2& p) {
    Real dx, dy;
    return std::exp(splat_power(s, p.x(), p.y(), dx, dy));
}

Vec3 composite(const std::vector<Splat2D>& sorted, const Vec2& pixel, const RenderConfig& cfg) {
    Vec3 c = Vec3::Zero();
    Real t = 1;
    for (const auto& s : sorted) {
        const Real alpha = std::min(cfg.alpha_max, s.opacity * splat_density(s, pixel));
        c += (alpha * t) * s.color;
        t *= Real(1) - alpha;
        if (cfg.early_termination && t < cfg.min_transmittance) break;
    }
    return c + t * cfg.background;
}

std::vector<Splat2D> project_all(const GaussianSet& set, const CameraView& cam, const RenderConfig& cfg) {
    std::vector<Splat2D> out;
    for (Index i = 0; i < set.size(); ++i) {
        const Inputs in = gather(set.centers.value, set.log_scales.value, set.rotations.value, i);
        auto s = project_raw(in, i, logistic(set.opacity_logits.value(i, 0)), set.colors.value.row(i).transpose(), cam, cfg);
        if (s) out.push_back(*s);
    }
    sort_splats(out);
    return out;
}

RenderedImage render(const GaussianSet& set, const CameraView& cam, const RenderConfig& cfg) {
    Rasterizer r(cam, cfg);
    r.prepare(set.centers.value, set.log_scales.value, set.rotations.value, set.opacity_logits.value, set.colors.value);
    RenderedImage out;
    r.forward(out, false);
    return out;
}

RenderOutput render(ad::Tape& tape, const GaussianLeaves& leaves, const CameraView& cam, const RenderConfig& cfg) {
    auto r = std::make_shared<Rasterizer>(cam, cfg);
    r->prepare(leaves.centers.value(), leaves.log_scales.value(), leaves.rotations.value(),
               leaves.opacity_logits.value(), leaves.colors.value());
    auto result = std::make_shared<RenderedImage>();
    r->forward(*result, true);
    Mat pixels = result->color.pixels;
    ad::Value image = tape.custom({leaves.centers, leaves.log_scales, leaves.rotations, leaves.opacity_logits, leaves.colors},
                                  std::move(pixels), [r, result](const Mat& upstream) { return r->backward(upstream, *result); });
    return {image, result};
}

} // namespace gspull
