#include "gspull/metrics.hpp"

#include "gspull/losses.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace gspull {

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const Real d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return a;
    const Vec3 bp = p - b;
    const Real d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return b;
    const Real vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + d1 / (d1 - d3) * ab;
    const Vec3 cp = p - c;
    const Real d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return c;
    const Real vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + d2 / (d2 - d6) * ac;
    const Real va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b);
    const Real denom = 1 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

// --- BVH ----------------------------------------------------------------------

MeshDistance::MeshDistance(const TriangleMesh& mesh) {
    if (mesh.empty()) throw std::invalid_argument("mesh distance: empty mesh");
    mesh.validate();
    const auto n = static_cast<std::size_t>(mesh.triangle_count());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<Vec3> centroids(n);
    for (std::size_t t = 0; t < n; ++t) {
        const auto& tri = mesh.triangles[t];
        centroids[t] = (mesh.vertex(tri[0]) + mesh.vertex(tri[1]) + mesh.vertex(tri[2])) / 3;
    }
    nodes_.reserve(2 * n);
    build(0, int(n), order, centroids);
    a_.resize(n);
    b_.resize(n);
    c_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& tri = mesh.triangles[std::size_t(order[k])];
        a_[k] = mesh.vertex(tri[0]);
        b_[k] = mesh.vertex(tri[1]);
        c_[k] = mesh.vertex(tri[2]);
    }
    // Node bounds from the reordered triangles.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& node = *it;
        if (node.left < 0) {
            node.lo = Vec3::Constant(std::numeric_limits<Real>::infinity());
            node.hi = -node.lo;
            for (int k = node.begin; k < node.end; ++k)
                for (const Vec3* v : {&a_[std::size_t(k)], &b_[std::size_t(k)], &c_[std::size_t(k)]}) {
                    node.lo = node.lo.cwiseMin(*v);
                    node.hi = node.hi.cwiseMax(*v);
                }
        } else {
            node.lo = nodes_[std::size_t(node.left)].lo.cwiseMin(nodes_[std::size_t(node.right)].lo);
            node.hi = nodes_[std::size_t(node.left)].hi.cwiseMax(nodes_[std::size_t(node.right)].hi);
        }
    }
}

int MeshDistance::build(int begin, int end, std::vector<int>& order, const std::vector<Vec3>& centroids) {
    const int id = int(nodes_.size());
    nodes_.push_back({});
    if (end - begin <= 4) {
        nodes_[std::size_t(id)].begin = begin;
        nodes_[std::size_t(id)].end = end;
        return id;
    }
    Vec3 lo = Vec3::Constant(std::numeric_limits<Real>::infinity()), hi = -lo;
    for (int k = begin; k < end; ++k) {
        lo = lo.cwiseMin(centroids[std::size_t(order[std::size_t(k)])]);
        hi = hi.cwiseMax(centroids[std::size_t(order[std::size_t(k)])]);
    }
    Index axis;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end, [&](int x, int y) {
        const Real cx = centroids[std::size_t(x)](axis), cy = centroids[std::size_t(y)](axis);
        return cx < cy || (cx == cy && x < y);
    });
    const int left = build(begin, mid, order, centroids);
    const int right = build(mid, end, order, centroids);
    nodes_[std::size_t(id)].left = left;
    nodes_[std::size_t(id)].right = right;
    return id;
}

Real MeshDistance::distance(const Vec3& p) const {
    auto box_sq = [&](const Node& n) { return (n.lo - p).cwiseMax(p - n.hi).cwiseMax(Real(0)).squaredNorm(); };
    Real best = std::numeric_limits<Real>::infinity();
    std::vector<std::pair<Real, int>> stack{{box_sq(nodes_[0]), 0}};
    while (!stack.empty()) {
        const auto [d, id] = stack.back();
        stack.pop_back();
        if (d >= best) continue;
        const Node& node = nodes_[std::size_t(id)];
        if (node.left < 0) {
            for (int k = node.begin; k < node.end; ++k) {
                const auto i = std::size_t(k);
                best = std::min(best, (closest_point_on_triangle(p, a_[i], b_[i], c_[i]) - p).squaredNorm());
            }
            continue;
        }
        const Real dl = box_sq(nodes_[std::size_t(node.left)]), dr = box_sq(nodes_[std::size_t(node.right)]);
        // Push the farther child first so the nearer one is searched next.
        if (dl < dr) {
            stack.emplace_back(dr, node.right);
            stack.emplace_back(dl, node.left);
        } else {
            stack.emplace_back(dl, node.left);
            stack.emplace_back(dr, node.right);
        }
    }
    return std::sqrt(best);
}

Real MeshDistance::distance_bruteforce(const Vec3& p) const {
    Real best = std::numeric_limits<Real>::infinity();
    for (std::size_t i = 0; i < a_.size(); ++i)
        best = std::min(best, (closest_point_on_triangle(p, a_[i], b_[i], c_[i]) - p).squaredNorm());
    return std::sqrt(best);
}

// --- sampling -----------------------------------------------------------------

namespace {

std::uint64_t fingerprint(const TriangleMesh& mesh) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
    };
    mix(mesh.vertices.data(), sizeof(Real) * std::size_t(mesh.vertices.size()));
    for (const auto& t : mesh.triangles) mix(t.data(), sizeof(Index) * 3);
    return h;
}

void require_nonempty(const TriangleMesh& m, const char* which) {
    if (m.empty()) throw std::invalid_argument(std::string("mesh metrics: mesh ") + which + " is empty");
}

} // namespace

Points sample_mesh(const TriangleMesh& mesh, Index n, std::uint64_t seed) {
    if (mesh.empty()) throw std::invalid_argument("sample_mesh: empty mesh");
    std::vector<Real> cdf(mesh.triangles.size());
    Real total = 0;
    for (Index t = 0; t < mesh.triangle_count(); ++t) cdf[std::size_t(t)] = total += mesh.face_normal(t).norm();
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(fingerprint(mesh)),
                      std::uint32_t(fingerprint(mesh) >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<Real> u(0, 1);
    Points out(n, 3);
    for (Index i = 0; i < n; ++i) {
        const Real r = u(rng) * total;
        const auto t = std::size_t(std::min<std::ptrdiff_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin(),
                                                            std::ptrdiff_t(cdf.size()) - 1));
        const auto& tri = mesh.triangles[t];
        const Real s = std::sqrt(u(rng)), w = u(rng);
        const Vec3 p = (1 - s) * mesh.vertex(tri[0]) + s * (1 - w) * mesh.vertex(tri[1]) + s * w * mesh.vertex(tri[2]);
        out.row(i) = p.transpose();
    }
    return out;
}

MeshMetrics evaluate_mesh(const TriangleMesh& a, const TriangleMesh& b, Real threshold, Index n_samples,
                          std::uint64_t seed) {
    require_nonempty(a, "A");
    require_nonempty(b, "B");
    if (n_samples < 1) throw std::invalid_argument("mesh metrics: need at least one sample");
    if (!(threshold > 0)) throw std::invalid_argument("mesh metrics: threshold must be positive");
    const MeshDistance to_a(a), to_b(b);
    const Points sa = sample_mesh(a, n_samples, seed), sb = sample_mesh(b, n_samples, seed);
    MeshMetrics m;
    m.threshold = threshold;
    m.samples = n_samples;
    Index within_a = 0, within_b = 0;
    for (Index i = 0; i < n_samples; ++i) {
        const Real da = to_b.distance(sa.row(i).transpose());
        const Real db = to_a.distance(sb.row(i).transpose());
        m.accuracy += da;
        m.completeness += db;
        within_a += da < threshold;
        within_b += db < threshold;
    }
    m.accuracy /= Real(n_samples);
    m.completeness /= Real(n_samples);
    m.chamfer = Real(0.5) * (m.accuracy + m.completeness);
    m.precision = Real(within_a) / Real(n_samples);
    m.recall = Real(within_b) / Real(n_samples);
    m.f_score = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0;
    return m;
}

Real chamfer(const TriangleMesh& a, const TriangleMesh& b, Index n_samples, std::uint64_t seed) {
    return evaluate_mesh(a, b, kDefaultFScoreThreshold, n_samples, seed).chamfer;
}

Real f_score(const TriangleMesh& a, const TriangleMesh& b, Real threshold, Index n_samples, std::uint64_t seed) {
    return evaluate_mesh(a, b, threshold, n_samples, seed).f_score;
}

Real psnr(const Image& a, const Image& b) {
    if (!a.same_size(b)) throw std::invalid_argument("psnr: image sizes differ");
    if (a.pixels.size() == 0) throw std::invalid_argument("psnr: empty images");
    const Real mse = (a.pixels - b.pixels).squaredNorm() / Real(a.pixels.size());
    if (!(mse > 0)) return kPsnrCap;
    return std::min(kPsnrCap, Real(-10) * std::log10(mse));
}

// --- reports ------------------------------------------------------------------

void MetricReport::summarize_views() {
    mean_psnr = mean_ssim = 0;
    for (const auto& v : views) {
        mean_psnr += v.psnr;
        mean_ssim += v.ssim;
    }
    if (!views.empty()) {
        mean_psnr /= Real(views.size());
        mean_ssim /= Real(views.size());
    }
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    if (mesh)
        j["mesh"] = {{"chamfer", mesh->chamfer},     {"accuracy", mesh->accuracy}, {"completeness", mesh->completeness},
                     {"f_score", mesh->f_score},     {"precision", mesh->precision}, {"recall", mesh->recall},
                     {"threshold", mesh->threshold}, {"samples", mesh->samples}};
    if (!views.empty()) {
        nlohmann::json vs = nlohmann::json::array();
        for (const auto& v : views) vs.push_back({{"name", v.name}, {"psnr", v.psnr}, {"ssim", v.ssim}});
        j["views"] = vs;
        j["mean_psnr"] = mean_psnr;
        j["mean_ssim"] = mean_ssim;
    }
    j["runtime_seconds"] = runtime_seconds;
    return j.dump(2);
}

std::string MetricReport::to_table() const {
    std::ostringstream s;
    s << std::fixed;
    if (mesh) {
        s << std::setprecision(5) << "chamfer       " << mesh->chamfer << "\n"
          << "accuracy      " << mesh->accuracy << "\n"
          << "completeness  " << mesh->completeness << "\n"
          << std::setprecision(4) << "f-score@" << mesh->threshold << "  " << mesh->f_score << " (precision "
          << mesh->precision << ", recall " << mesh->recall << ")\n"
          << "samples       " << mesh->samples << "\n";
    }
    if (!views.empty()) {
        s << std::setprecision(3);
        for (const auto& v : views) s << std::left << std::setw(14) << v.name << "psnr " << v.psnr << "  ssim " << v.ssim << "\n";
        s << std::left << std::setw(14) << "mean" << "psnr " << mean_psnr << "  ssim " << mean_ssim << "\n";
    }
    s << std::setprecision(2) << "runtime       " << runtime_seconds << " s\n";
    return s.str();
}

} // namespace gspull
