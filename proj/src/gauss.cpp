#include "gspull/gauss.hpp"

#include "gspull/binio.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>

namespace gspull {

Real logistic(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

Real logit(Real p) {
    return std::log(p / (Real(1) - p));
}

Mat3 quaternion_to_matrix(const Vec4& q) {
    const Vec4 n = q / q.norm();
    const Real w = n(0), x = n(1), y = n(2), z = n(3);
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Vec4 matrix_to_quaternion(const Mat3& r) {
    Eigen::Quaternion<Real> q(r);
    q.normalize();
    return Vec4(q.w(), q.x(), q.y(), q.z());
}

Vec4 quaternion_from_z(const Vec3& direction) {
    Eigen::Quaternion<Real> q = Eigen::Quaternion<Real>::FromTwoVectors(Vec3::UnitZ(), direction.normalized());
    q.normalize();
    return Vec4(q.w(), q.x(), q.y(), q.z());
}

Mat3 covariance(const Gaussian& g) {
    const Mat3 r = g.rotation_matrix();
    return r * g.variances().asDiagonal() * r.transpose();
}

Real density3d(const Gaussian& g, const Vec3& q, Real variance_floor) {
    const Mat3 r = g.rotation_matrix();
    const Vec3 local = r.transpose() * (q - g.center);
    const Vec3 var = g.variances().array() + variance_floor;
    return std::exp(Real(-0.5) * (local.array().square() / var.array()).sum());
}

Index disk_axis(const Vec3& log_scales) {
    Index best = 0;
    for (Index k = 1; k < 3; ++k)
        if (log_scales(k) < log_scales(best)) best = k;
    return best;
}

Vec3 disk_normal(const Gaussian& g) {
    return g.rotation_matrix().col(disk_axis(g.log_scales));
}

// --- GaussianSet --------------------------------------------------------------

GaussianSet::GaussianSet(const std::vector<Gaussian>& gs) {
    const auto n = static_cast<Index>(gs.size());
    centers.value.resize(n, 3);
    log_scales.value.resize(n, 3);
    rotations.value.resize(n, 4);
    opacity_logits.value.resize(n, 1);
    colors.value.resize(n, 3);
    for (Index i = 0; i < n; ++i) set(i, gs[static_cast<std::size_t>(i)]);
    resize_aux();
}

Gaussian GaussianSet::get(Index i) const {
    Gaussian g;
    g.center = centers.value.row(i).transpose();
    g.log_scales = log_scales.value.row(i).transpose();
    g.rotation = rotations.value.row(i).transpose();
    g.opacity_logit = opacity_logits.value(i, 0);
    g.color = colors.value.row(i).transpose();
    return g;
}

void GaussianSet::set(Index i, const Gaussian& g) {
    centers.value.row(i) = g.center.transpose();
    log_scales.value.row(i) = g.log_scales.transpose();
    rotations.value.row(i) = g.rotation.transpose();
    opacity_logits.value(i, 0) = g.opacity_logit;
    colors.value.row(i) = g.color.transpose();
}

namespace {

void grow(Mat& m, Index cols, Index extra = 1) {
    Mat next(m.rows() + extra, cols);
    next.topRows(m.rows()) = m;
    next.bottomRows(extra).setZero();
    m = std::move(next);
}

void grow(Vec& v, Index extra = 1) {
    Vec next(v.size() + extra);
    next.head(v.size()) = v;
    next.tail(extra).setZero();
    v = std::move(next);
}

Mat keep_rows(const Mat& m, const std::vector<bool>& flags, Index kept) {
    if (m.rows() != static_cast<Index>(flags.size())) return Mat::Zero(kept, m.cols());
    Mat out(kept, m.cols());
    Index j = 0;
    for (Index i = 0; i < m.rows(); ++i)
        if (flags[static_cast<std::size_t>(i)]) out.row(j++) = m.row(i);
    return out;
}

Vec keep_rows(const Vec& v, const std::vector<bool>& flags, Index kept) {
    if (v.size() != static_cast<Index>(flags.size())) return Vec::Zero(kept);
    Vec out(kept);
    Index j = 0;
    for (Index i = 0; i < v.size(); ++i)
        if (flags[static_cast<std::size_t>(i)]) out(j++) = v(i);
    return out;
}

} // namespace

void GaussianSet::push_back(const Gaussian& g) {
    resize_aux();
    auto params = parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Index c = params[k]->value.cols();
        grow(params[k]->value, c);
        grow(moments[k].m, c);
        grow(moments[k].v, c);
        params[k]->zero_grad();
    }
    grow(grad_accum);
    grow(grad_count);
    set(size() - 1, g);
}

void GaussianSet::append(const std::vector<Gaussian>& gs) {
    if (gs.empty()) return;
    resize_aux();
    const Index n = size(), extra = static_cast<Index>(gs.size());
    auto params = parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Index c = params[k]->value.cols();
        grow(params[k]->value, c, extra);
        grow(moments[k].m, c, extra);
        grow(moments[k].v, c, extra);
        params[k]->zero_grad();
    }
    grow(grad_accum, extra);
    grow(grad_count, extra);
    for (Index i = 0; i < extra; ++i) set(n + i, gs[static_cast<std::size_t>(i)]);
}

std::vector<Gaussian> GaussianSet::to_vector() const {
    std::vector<Gaussian> out;
    out.reserve(static_cast<std::size_t>(size()));
    for (Index i = 0; i < size(); ++i) out.push_back(get(i));
    return out;
}

void GaussianSet::keep(const std::vector<bool>& flags) {
    if (static_cast<Index>(flags.size()) != size())
        throw std::invalid_argument("GaussianSet::keep: flag count does not match set size");
    resize_aux();
    Index kept = 0;
    for (bool f : flags) kept += f ? 1 : 0;
    auto params = parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        params[k]->value = keep_rows(params[k]->value, flags, kept);
        moments[k].m = keep_rows(moments[k].m, flags, kept);
        moments[k].v = keep_rows(moments[k].v, flags, kept);
        params[k]->zero_grad();
    }
    grad_accum = keep_rows(grad_accum, flags, kept);
    grad_count = keep_rows(grad_count, flags, kept);
}

std::array<ad::Parameter*, GaussianSet::AttributeCount> GaussianSet::parameters() {
    return {&centers, &log_scales, &rotations, &opacity_logits, &colors};
}

void GaussianSet::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

void GaussianSet::reset_stats() {
    grad_accum = Vec::Zero(size());
    grad_count = Vec::Zero(size());
}

void GaussianSet::normalize_rotations() {
    for (Index i = 0; i < size(); ++i) {
        const Real n = rotations.value.row(i).norm();
        if (n > 0)
            rotations.value.row(i) /= n;
        else
            rotations.value.row(i) << 1, 0, 0, 0;
    }
}

void GaussianSet::resize_aux() {
    auto params = parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        moments[k].fit(params[k]->value);
        if (params[k]->grad.rows() != params[k]->value.rows()) params[k]->zero_grad();
    }
    if (grad_accum.size() != size()) grad_accum = Vec::Zero(size());
    if (grad_count.size() != size()) grad_count = Vec::Zero(size());
}

GaussianLeaves bind(ad::Tape& tape, GaussianSet& set) {
    return {tape.param(set.centers), tape.param(set.log_scales), tape.param(set.rotations),
            tape.param(set.opacity_logits), tape.param(set.colors)};
}

// --- differentiable forms -------------------------------------------------------

std::array<ad::Value, 3> rotation_axes(const ad::Value& quats) {
    using ad::col;
    const ad::Value q = ad::row_normalize(quats);
    const ad::Value w = col(q, 0), x = col(q, 1), y = col(q, 2), z = col(q, 3);
    const ad::Value xx = x * x, yy = y * y, zz = z * z;
    const ad::Value xy = x * y, xz = x * z, yz = y * z;
    const ad::Value wx = w * x, wy = w * y, wz = w * z;
    const Real one = 1, two = 2;
    // R e_k is column k of the rotation matrix.
    ad::Value a0 = ad::hcat({one - two * (yy + zz), two * (xy + wz), two * (xz - wy)});
    ad::Value a1 = ad::hcat({two * (xy - wz), one - two * (xx + zz), two * (yz + wx)});
    ad::Value a2 = ad::hcat({two * (xz + wy), two * (yz - wx), one - two * (xx + yy)});
    return {a0, a1, a2};
}

ad::Value covariance(const ad::Value& quats, const ad::Value& log_scales) {
    const auto axes = rotation_axes(quats);
    const ad::Value var = ad::exp(Real(2) * log_scales);
    std::vector<ad::Value> entries;
    entries.reserve(9);
    for (Index a = 0; a < 3; ++a) {
        for (Index b = 0; b < 3; ++b) {
            ad::Value e = ad::col(var, 0) * ad::col(axes[0], a) * ad::col(axes[0], b);
            for (Index k = 1; k < 3; ++k) e = e + ad::col(var, k) * ad::col(axes[k], a) * ad::col(axes[k], b);
            entries.push_back(e);
        }
    }
    return ad::hcat(std::span<const ad::Value>(entries));
}

ad::Value mahalanobis_sq(const ad::Value& offsets, const ad::Value& quats, const ad::Value& log_scales,
                         Real variance_floor) {
    const auto axes = rotation_axes(quats);
    const ad::Value var = ad::exp(Real(2) * log_scales) + variance_floor;
    ad::Value total;
    for (Index k = 0; k < 3; ++k) {
        const ad::Value proj = ad::row_dot(offsets, axes[static_cast<std::size_t>(k)]);
        const ad::Value term = proj * proj / ad::col(var, k);
        total = k == 0 ? term : total + term;
    }
    return total;
}

ad::Value density3d(const ad::Value& centers, const ad::Value& quats, const ad::Value& log_scales,
                    const ad::Value& queries, Real variance_floor) {
    return ad::exp(Real(-0.5) * mahalanobis_sq(queries - centers, quats, log_scales, variance_floor));
}

std::vector<Index> disk_axes(const Mat& log_scales) {
    std::vector<Index> out(static_cast<std::size_t>(log_scales.rows()));
    for (Index i = 0; i < log_scales.rows(); ++i)
        out[static_cast<std::size_t>(i)] = disk_axis(log_scales.row(i).transpose());
    return out;
}

ad::Value disk_normals(const ad::Value& quats, const ad::Value& log_scales) {
    const auto axes = rotation_axes(quats);
    const std::vector<Index> which = disk_axes(log_scales.value());
    const Index n = quats.rows();
    ad::Tape& tape = quats.tape();
    ad::Value out;
    for (Index k = 0; k < 3; ++k) {
        Mat mask = Mat::Zero(n, 1);
        bool any = false;
        for (Index i = 0; i < n; ++i) {
            if (which[static_cast<std::size_t>(i)] == k) {
                mask(i, 0) = 1;
                any = true;
            }
        }
        if (!any) continue;
        const ad::Value term = axes[static_cast<std::size_t>(k)] * tape.constant(mask);
        out = out.valid() ? out + term : term;
    }
    if (!out.valid()) out = tape.constant(Mat::Zero(n, 3));
    return out;
}

// --- checkpoint -------------------------------------------------------------------

namespace {
constexpr char kGaussMagic[9] = "GSPLGAUS";
constexpr std::uint32_t kGaussVersion = 1;
} // namespace

void save_set(const GaussianSet& set, const std::filesystem::path& path) {
    io::Writer w;
    w.magic(kGaussMagic);
    w.u32(kGaussVersion);
    w.u64(static_cast<std::uint64_t>(set.size()));
    for (Index i = 0; i < set.size(); ++i) {
        for (Index k = 0; k < 3; ++k) w.f64(static_cast<double>(set.centers.value(i, k)));
        for (Index k = 0; k < 3; ++k) w.f64(static_cast<double>(set.log_scales.value(i, k)));
        for (Index k = 0; k < 4; ++k) w.f64(static_cast<double>(set.rotations.value(i, k)));
        w.f64(static_cast<double>(set.opacity_logits.value(i, 0)));
        for (Index k = 0; k < 3; ++k) w.f64(static_cast<double>(set.colors.value(i, k)));
    }
    w.save(path);
}

GaussianSet load_set(const std::filesystem::path& path) {
    io::Reader r = io::Reader::open(path);
    r.expect_magic(kGaussMagic);
    const std::uint64_t version_at = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != kGaussVersion) throw io::FormatError("unsupported Gaussian set version " + std::to_string(version), version_at);
    const std::uint64_t count = r.u64("count");
    constexpr std::uint64_t kRecord = 14 * 8;
    if (count > r.remaining() / kRecord)
        throw io::FormatError("truncated file: header declares " + std::to_string(count) + " Gaussians", r.offset());
    std::vector<Gaussian> gs(static_cast<std::size_t>(count));
    for (auto& g : gs) {
        for (Index k = 0; k < 3; ++k) g.center(k) = static_cast<Real>(r.f64("center"));
        for (Index k = 0; k < 3; ++k) g.log_scales(k) = static_cast<Real>(r.f64("log_scales"));
        for (Index k = 0; k < 4; ++k) g.rotation(k) = static_cast<Real>(r.f64("rotation"));
        g.opacity_logit = static_cast<Real>(r.f64("opacity_logit"));
        for (Index k = 0; k < 3; ++k) g.color(k) = static_cast<Real>(r.f64("color"));
    }
    r.expect_end();
    return GaussianSet(gs);
}

} // namespace gspull
