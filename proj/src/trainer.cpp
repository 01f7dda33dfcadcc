#include "gspull/trainer.hpp"

#include "gspull/binio.hpp"
#include "gspull/log.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <type_traits>

namespace gspull {

namespace {

using json = nlohmann::json;

template <typename Cfg, typename F>
void visit_fields(Cfg& c, F&& f) {
    f("total_iters", c.total_iters);
    f("phase_switch_iter", c.phase_switch_iter);
    f("weight_thin", c.weights.alpha);
    f("weight_tangent", c.weights.beta);
    f("weight_pull", c.weights.gamma);
    f("weight_orthogonal", c.weights.delta);
    f("weight_eikonal", c.weights.eikonal);
    f("lr_centers", c.lr.centers);
    f("lr_centers_final", c.lr.centers_final);
    f("lr_scales", c.lr.log_scales);
    f("lr_rotations", c.lr.rotations);
    f("lr_opacity", c.lr.opacity);
    f("lr_colors", c.lr.colors);
    f("lr_network", c.lr.network);
    f("pull_to_centers", c.ablation.pull_to_centers);
    f("no_thin", c.ablation.no_thin);
    f("no_tangent", c.ablation.no_tangent);
    f("no_orthogonal", c.ablation.no_orthogonal);
    f("no_pull_gaussians", c.ablation.no_pull_gaussians);
    f("anchor_pull_targets", c.anchor_pull_targets);
    f("densify_start", c.densify_start);
    f("densify_interval", c.densify_interval);
    f("densify_grad_threshold", c.densify_grad_threshold);
    f("densify_size_fraction", c.densify_size_fraction);
    f("prune_opacity", c.prune_opacity);
    f("max_gaussians", c.max_gaussians);
    f("queries", c.queries);
    f("init_count", c.init_count);
    f("init_noise", c.init_noise);
    f("network_layers", c.network_layers);
    f("network_width", c.network_width);
    f("init_radius", c.init_radius);
    f("checkpoint_every", c.checkpoint_every);
    f("seed", c.seed);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_value(const std::string& text, T& out) {
    if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes" || text == "on") return out = true, true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return out = false, true;
        return false;
    } else if constexpr (std::is_floating_point_v<T>) {
        std::istringstream in(text);
        in.imbue(std::locale::classic());
        T v;
        if (!(in >> v) || !in.eof() || !std::isfinite(v)) return false;
        out = v;
        return true;
    } else {
        T v{};
        const auto* end = text.data() + text.size();
        const auto [p, ec] = std::from_chars(text.data(), end, v);
        if (ec != std::errc() || p != end) return false;
        out = v;
        return true;
    }
}

template <typename T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
        return buf;
    } else {
        return std::to_string(v);
    }
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

Vec3 sample_gaussian(const Gaussian& g, std::mt19937_64& rng) {
    std::normal_distribution<Real> n(0, 1);
    const Vec3 z(n(rng), n(rng), n(rng));
    return g.center + g.rotation_matrix() * g.scales().cwiseProduct(z);
}

void check_term(const char* name, Real v, int iteration) {
    if (std::isnan(v))
        throw std::runtime_error(std::string("train_step: loss term '") + name + "' is NaN at iteration " +
                                 std::to_string(iteration));
}

void check_report(const LossReport& r, int iteration) {
    check_term("splatting", r.splatting, iteration);
    check_term("thin", r.thin, iteration);
    check_term("tangent", r.tangent, iteration);
    check_term("pull", r.pull, iteration);
    check_term("orthogonal", r.orthogonal, iteration);
    check_term("eikonal", r.eikonal, iteration);
    check_term("total", r.total, iteration);
}

void fit_network_moments(SdfNetwork& net) {
    net.weight_moments.resize(net.weights.size());
    net.bias_moments.resize(net.biases.size());
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
        net.weight_moments[k].fit(net.weights[k].value);
        net.bias_moments[k].fit(net.biases[k].value);
    }
}

void update_network(const Adam& adam, SdfNetwork& net, Real lr) {
    fit_network_moments(net);
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
        adam.update(net.weights[k], net.weight_moments[k], lr);
        adam.update(net.biases[k], net.bias_moments[k], lr);
    }
}

constexpr char kOptimizerMagic[9] = "GSPLOPTM";
constexpr std::uint32_t kOptimizerVersion = 1;

void put_matrix(io::Writer& w, const Mat& m) {
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) w.f64(static_cast<double>(m.data()[i]));
}

Mat get_matrix(io::Reader& r, Index rows, Index cols) {
    const std::uint64_t at = r.offset();
    const auto rr = static_cast<Index>(r.u64("rows"));
    const auto cc = static_cast<Index>(r.u64("cols"));
    if (rr != rows || cc != cols) throw io::FormatError("optimizer state does not match parameter shape", at);
    Mat m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(r.f64("moment"));
    return m;
}

Mat gather(const Mat& m, std::span<const Index> rows) {
    Mat out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(Index(i)) = m.row(rows[i]);
    return out;
}

std::string checkpoint_name(int iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "iter_%06d", iteration);
    return buf;
}

} // namespace

// --- config -------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(phase_switch_iter > 0 && phase_switch_iter < total_iters))
        throw std::invalid_argument("config: need 0 < phase_switch_iter < total_iters");
    const Real rates[] = {lr.centers, lr.centers_final, lr.log_scales, lr.rotations, lr.opacity, lr.colors, lr.network};
    for (Real r : rates)
        if (!(r > 0)) throw std::invalid_argument("config: learning rates must be positive");
    const Real weights_[] = {weights.alpha, weights.beta, weights.gamma, weights.delta, weights.eikonal};
    for (Real w : weights_)
        if (!(w >= 0)) throw std::invalid_argument("config: loss weights must be non-negative");
    if (densify_interval < 1) throw std::invalid_argument("config: densify_interval must be at least 1");
    if (queries < 1) throw std::invalid_argument("config: queries must be at least 1");
    if (init_count < 1) throw std::invalid_argument("config: init_count must be at least 1");
    if (max_gaussians < 0) throw std::invalid_argument("config: max_gaussians must be non-negative");
    if (network_layers < 2 || network_width < 8) throw std::invalid_argument("config: network needs layers >= 2, width >= 8");
    if (!(init_radius > 0 && init_radius < 1)) throw std::invalid_argument("config: init_radius must be in (0, 1)");
    if (checkpoint_every < 0) throw std::invalid_argument("config: checkpoint_every must be non-negative");
    if (!(init_noise >= 0)) throw std::invalid_argument("config: init_noise must be non-negative");
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.total_iters = 15000;
    c.phase_switch_iter = 7000;
    c.densify_start = 500;
    c.network_layers = 8;
    c.network_width = 256;
    c.max_gaussians = 0;
    return c;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
    bool found = false, ok = false;
    visit_fields(*this, [&](const char* name, auto& field) {
        if (found || key != name) return;
        found = true;
        ok = parse_value(value, field);
    });
    if (!found) throw std::invalid_argument("config: unknown key '" + key + "'");
    if (!ok) throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
}

std::string TrainConfig::to_text() const {
    std::ostringstream out;
    visit_fields(const_cast<TrainConfig&>(*this),
                 [&](const char* name, const auto& field) { out << name << " = " << format_value(field) << '\n'; });
    return out.str();
}

TrainConfig TrainConfig::parse(const std::string& text, const TrainConfig& base) {
    TrainConfig c = base;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(number) + ": expected key = value");
        try {
            c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(number) + ": " + e.what());
        }
    }
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path, const TrainConfig& base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse(ss.str(), base);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

TrainConfig TrainConfig::parse(const std::string& text) { return parse(text, TrainConfig{}); }

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return load(path, TrainConfig{}); }

void TrainConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << to_text();
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::string> TrainConfig::keys() {
    std::vector<std::string> out;
    TrainConfig c;
    visit_fields(c, [&](const char* name, auto&) { out.emplace_back(name); });
    return out;
}

std::vector<std::string> ablation_names() {
    return {"pull-to-centers", "no-thin", "no-tangent", "no-orthogonal", "no-pull-gaussians", "eikonal"};
}

bool apply_ablation(TrainConfig& cfg, const std::string& name) {
    if (name == "pull-to-centers") cfg.ablation.pull_to_centers = true;
    else if (name == "no-thin") cfg.ablation.no_thin = true;
    else if (name == "no-tangent") cfg.ablation.no_tangent = true;
    else if (name == "no-orthogonal") cfg.ablation.no_orthogonal = true;
    else if (name == "no-pull-gaussians") cfg.ablation.no_pull_gaussians = true;
    else if (name == "eikonal") cfg.weights.eikonal = Real(0.1);
    else return false;
    return true;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t iteration, std::uint64_t purpose) {
    return splitmix(splitmix(splitmix(seed) ^ iteration) ^ (purpose * 0xD6E8FEB86659FD93ull));
}

// --- queries ------------------------------------------------------------------

Vec query_std_devs(const Points& centers) {
    const Index n = centers.rows();
    if (n == 0) return Vec(0);
    if (n == 1) return Vec::Constant(1, kQueryStdMin);
    const int k = static_cast<int>(std::min<Index>(kQueryNeighborRank, n - 1));
    return kth_neighbor_distances(centers, k).cwiseMax(kQueryStdMin).cwiseMin(kQueryStdMax);
}

QueryBatch sample_queries(const Points& centers, Index n, std::uint64_t seed) {
    if (centers.rows() == 0) throw std::invalid_argument("sample_queries: empty Gaussian set");
    if (n < 0) throw std::invalid_argument("sample_queries: negative query count");
    QueryBatch b;
    if (n == 0) return b;
    const Index m = centers.rows();
    const NearestCenters grid(centers);
    const int k = static_cast<int>(std::min<Index>(kQueryNeighborRank, m - 1));
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Index> pick(0, m - 1);
    std::normal_distribution<Real> noise(0, 1);
    b.queries.resize(n, 3);
    b.source.resize(static_cast<std::size_t>(n));
    b.std_dev.resize(n);
    for (Index i = 0; i < n; ++i) {
        const Index s = pick(rng);
        const Vec3 c = centers.row(s).transpose();
        const Real sd = k == 0 ? kQueryStdMin : std::clamp(grid.kth_distance(c, k, s), kQueryStdMin, kQueryStdMax);
        const Vec3 q = c + sd * Vec3(noise(rng), noise(rng), noise(rng));
        b.queries.row(i) = q.cwiseMax(Real(-1)).cwiseMin(Real(1)).transpose();
        b.source[static_cast<std::size_t>(i)] = s;
        b.std_dev(i) = sd;
    }
    b.assigned = grid.query(b.queries);
    return b;
}

QueryBatch sample_queries(const GaussianSet& set, Index n, std::uint64_t seed) {
    return sample_queries(Points(set.centers.value), n, seed);
}

// --- densification ---------------------------------------------------------------

DensifyStats densify(GaussianSet& set, const DensifyConfig& cfg, std::uint64_t seed) {
    DensifyStats stats;
    const Index n = set.size();
    if (set.grad_accum.size() != n || set.grad_count.size() != n) {
        set.reset_stats();
        return stats;
    }
    std::vector<std::pair<Real, Index>> over;
    for (Index i = 0; i < n; ++i) {
        if (set.grad_count(i) <= 0) continue;
        const Real g = set.grad_accum(i) / set.grad_count(i);
        if (g > cfg.grad_threshold) over.emplace_back(g, i);
    }
    if (cfg.max_gaussians > 0) {
        const Index budget = std::max<Index>(0, cfg.max_gaussians - n);
        if (static_cast<Index>(over.size()) > budget) {
            std::stable_sort(over.begin(), over.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
            over.resize(static_cast<std::size_t>(budget));
            std::sort(over.begin(), over.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
        }
    }
    std::mt19937_64 rng(seed);
    std::vector<bool> keep(static_cast<std::size_t>(n), true);
    std::vector<Gaussian> added;
    const Real split_log = std::log(Real(1.6));
    for (const auto& [g, i] : over) {
        const Gaussian src = set.get(i);
        if (src.scales().maxCoeff() < cfg.size_threshold) {
            Gaussian child = src;
            child.center = sample_gaussian(src, rng);
            added.push_back(child);
            ++stats.cloned;
        } else {
            for (int c = 0; c < 2; ++c) {
                Gaussian child = src;
                child.center = sample_gaussian(src, rng);
                child.log_scales = src.log_scales.array() - split_log;
                added.push_back(child);
            }
            keep[static_cast<std::size_t>(i)] = false;
            ++stats.split;
        }
    }
    if (stats.split > 0) set.keep(keep);
    set.append(added);
    set.reset_stats();
    return stats;
}

Index prune(GaussianSet& set, Real min_opacity, Real max_scale) {
    const Index n = set.size();
    std::vector<bool> keep(static_cast<std::size_t>(n), true);
    Index removed = 0;
    for (Index i = 0; i < n; ++i) {
        const Real o = logistic(set.opacity_logits.value(i, 0));
        const Real s = std::exp(set.log_scales.value.row(i).maxCoeff());
        if (o < min_opacity || s > max_scale) {
            keep[static_cast<std::size_t>(i)] = false;
            ++removed;
        }
    }
    if (removed > 0) set.keep(keep);
    return removed;
}

Real scene_extent(const std::vector<CameraView>& views) {
    if (views.empty()) return 1;
    Vec3 centroid = Vec3::Zero();
    for (const auto& v : views) centroid += v.center();
    centroid /= Real(views.size());
    Real r = 0;
    for (const auto& v : views) r = std::max(r, (v.center() - centroid).norm());
    return r > 0 ? Real(1.1) * r : Real(1);
}

// --- training -----------------------------------------------------------------

TrainState make_state(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    data.validate();
    if (data.train_views().empty()) throw std::invalid_argument("dataset has no training views");
    TrainState s;
    s.config = cfg;
    InitConfig init;
    init.count = cfg.init_count;
    init.noise_std = cfg.init_noise;
    init.seed = derive_seed(cfg.seed, 0, 10);
    s.set = init_gaussians(data, init);
    s.net = SdfNetwork::init_sphere(cfg.network_layers, cfg.network_width, cfg.init_radius, derive_seed(cfg.seed, 0, 11));
    s.net.transform = data.transform;
    fit_network_moments(s.net);
    s.extent = scene_extent(data.views);
    s.background = data.background;
    return s;
}

Real center_learning_rate(const TrainConfig& cfg, int iteration) {
    const Real t = std::clamp(Real(iteration) / Real(std::max(1, cfg.total_iters)), Real(0), Real(1));
    return std::exp((1 - t) * std::log(cfg.lr.centers) + t * std::log(cfg.lr.centers_final));
}

LossReport train_step(TrainState& s, const CameraView& view) {
    if (!view.image) throw std::invalid_argument("train_step: view '" + view.name + "' has no image");
    if (s.set.empty()) throw std::runtime_error("train_step: Gaussian set is empty");
    const TrainConfig& c = s.config;
    const int it = s.iteration;
    const bool phase2 = s.in_phase2();

    s.set.zero_grad();
    s.net.zero_grad();
    ad::Tape tape;
    const GaussianLeaves leaves = bind(tape, s.set);
    RenderConfig rc;
    rc.background = s.background;
    LossTerms terms;
    std::shared_ptr<RenderedImage> rendered;

    if (!phase2) {
        const RenderOutput out = render(tape, leaves, view, rc);
        terms.splatting = loss_splatting(tape, out.image, *view.image);
        rendered = out.result;
    } else {
        const PullResult pc = pull(tape, s.net, leaves.centers);
        const ad::Value centers = c.ablation.no_pull_gaussians ? leaves.centers : pc.points;
        GaussianLeaves shown = leaves;
        shown.centers = centers;
        const RenderOutput out = render(tape, shown, view, rc);
        terms.splatting = loss_splatting(tape, out.image, *view.image);

        const ad::Value normals = disk_normals(leaves.rotations, leaves.log_scales);
        if (!c.ablation.no_thin) terms.thin = loss_thin(tape, leaves.log_scales);
        if (!c.ablation.no_tangent) terms.tangent = loss_tangent(tape, eval_grad(tape, s.net, centers).grad, normals);

        const bool anchor = c.anchor_pull_targets || c.ablation.no_pull_gaussians;
        const QueryBatch qb = sample_queries(Points((anchor ? leaves.centers : centers).value()), c.queries, derive_seed(c.seed, std::uint64_t(it), 1));
        const PullResult pq = pull(tape, s.net, tape.constant(Mat(qb.queries)));
        const std::span<const Index> idx(qb.assigned);
        // Pulled targets keep their value but carry no gradient into the network.
        const ad::Value anchored = anchor ? leaves.centers : leaves.centers + ad::detach(pc.points - leaves.centers);
        const ad::Value target = ad::gather_rows(anchored, idx);
        terms.pull = c.ablation.pull_to_centers
                         ? loss_pull_to_centers(pq.points, target)
                         : loss_pull(pq.points, target, ad::gather_rows(leaves.rotations, idx),
                                     ad::gather_rows(leaves.log_scales, idx));
        if (!c.ablation.no_orthogonal) terms.orthogonal = loss_orthogonal(tape, pq.grad, ad::gather_rows(normals, idx));
        if (c.weights.eikonal > 0) terms.eikonal = loss_eikonal(pq.grad);
    }

    const LossReport report = report_of(terms, c.weights);
    check_report(report, it);
    tape.backward(total(tape, terms, c.weights));

    if (rendered && rendered->screen_grad.size() == s.set.size()) {
        if (s.set.grad_accum.size() != s.set.size()) s.set.reset_stats();
        s.set.grad_accum += rendered->screen_grad;
        s.set.grad_count += rendered->hits;
    }

    s.adam.tick();
    const Real rates[GaussianSet::AttributeCount] = {center_learning_rate(c, it), c.lr.log_scales, c.lr.rotations,
                                                     c.lr.opacity, c.lr.colors};
    auto params = s.set.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) s.adam.update(*params[k], s.set.moments[k], rates[k]);
    if (phase2) update_network(s.adam, s.net, c.lr.network);
    s.set.normalize_rotations();

    s.iteration = it + 1;
    const int next = s.iteration;
    if (!phase2 && next < c.phase_switch_iter && next >= c.densify_start && next % c.densify_interval == 0) {
        DensifyConfig dc;
        dc.grad_threshold = c.densify_grad_threshold;
        dc.size_threshold = c.densify_size_fraction * s.extent;
        dc.max_gaussians = c.max_gaussians;
        densify(s.set, dc, derive_seed(c.seed, std::uint64_t(it), 2));
        prune(s.set, c.prune_opacity, Real(0.5) * s.extent);
    }
    return report;
}

const CameraView& pick_view(const TrainState& s, const Dataset& data) {
    const auto train = data.train_views();
    if (train.empty()) throw std::invalid_argument("dataset has no training views");
    std::mt19937_64 rng(derive_seed(s.config.seed, std::uint64_t(s.iteration), 0));
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    return *train[pick(rng)];
}

// --- checkpoints --------------------------------------------------------------

void save_checkpoint(const TrainState& s, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    s.config.save(dir / "config.txt");
    save_set(s.set, dir / "gaussians.bin");
    save_network(s.net, dir / "network.bin");

    GaussianSet& set = const_cast<GaussianSet&>(s.set);
    SdfNetwork& net = const_cast<SdfNetwork&>(s.net);
    auto params = set.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) set.moments[k].fit(params[k]->value);
    if (set.grad_accum.size() != set.size()) set.reset_stats();
    fit_network_moments(net);

    io::Writer w;
    w.magic(kOptimizerMagic);
    w.u32(kOptimizerVersion);
    for (const auto& m : set.moments) {
        put_matrix(w, m.m);
        put_matrix(w, m.v);
    }
    put_matrix(w, set.grad_accum);
    put_matrix(w, set.grad_count);
    for (std::size_t k = 0; k < net.weights.size(); ++k) {
        put_matrix(w, net.weight_moments[k].m);
        put_matrix(w, net.weight_moments[k].v);
        put_matrix(w, net.bias_moments[k].m);
        put_matrix(w, net.bias_moments[k].v);
    }
    w.save(dir / "optimizer.bin");

    json j;
    j["iteration"] = s.iteration;
    j["adam_step"] = s.adam.step();
    j["extent"] = s.extent;
    j["background"] = {s.background.x(), s.background.y(), s.background.z()};
    j["gaussians"] = s.set.size();
    std::ofstream out(dir / "state.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + (dir / "state.json").string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + (dir / "state.json").string());
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("checkpoint directory not found: " + dir.string());
    TrainState s;
    s.config = TrainConfig::load(dir / "config.txt");
    s.config.validate();
    s.set = load_set(dir / "gaussians.bin");
    s.net = load_network(dir / "network.bin");

    const auto state_path = dir / "state.json";
    std::ifstream in(state_path);
    if (!in) throw std::runtime_error("cannot open for reading: " + state_path.string());
    json j;
    try {
        in >> j;
        s.iteration = j.at("iteration").get<int>();
        s.adam.set_step(j.at("adam_step").get<long>());
        s.extent = j.at("extent").get<Real>();
        const auto& bg = j.at("background");
        s.background = Vec3(bg.at(0).get<Real>(), bg.at(1).get<Real>(), bg.at(2).get<Real>());
    } catch (const json::exception& e) {
        throw std::runtime_error(state_path.string() + ": " + e.what());
    }

    io::Reader r = io::Reader::open(dir / "optimizer.bin");
    try {
        r.expect_magic(kOptimizerMagic);
        const std::uint64_t at = r.offset();
        if (r.u32("version") != kOptimizerVersion) throw io::FormatError("unsupported optimizer version", at);
        auto params = s.set.parameters();
        for (std::size_t k = 0; k < params.size(); ++k) {
            const Mat& p = params[k]->value;
            s.set.moments[k].m = get_matrix(r, p.rows(), p.cols());
            s.set.moments[k].v = get_matrix(r, p.rows(), p.cols());
        }
        s.set.grad_accum = get_matrix(r, s.set.size(), 1);
        s.set.grad_count = get_matrix(r, s.set.size(), 1);
        fit_network_moments(s.net);
        for (std::size_t k = 0; k < s.net.weights.size(); ++k) {
            const Mat& wv = s.net.weights[k].value;
            const Mat& bv = s.net.biases[k].value;
            s.net.weight_moments[k].m = get_matrix(r, wv.rows(), wv.cols());
            s.net.weight_moments[k].v = get_matrix(r, wv.rows(), wv.cols());
            s.net.bias_moments[k].m = get_matrix(r, bv.rows(), bv.cols());
            s.net.bias_moments[k].v = get_matrix(r, bv.rows(), bv.cols());
        }
        r.expect_end();
    } catch (const io::FormatError& e) {
        throw std::runtime_error((dir / "optimizer.bin").string() + ": " + e.what());
    }
    return s;
}

TrainState fit(const TrainConfig& cfg, const Dataset& data, const FitOptions& opts) {
    if (data.views.empty() || data.train_views().empty()) throw std::invalid_argument("fit: empty dataset");
    TrainState s = opts.resume_from.empty() ? make_state(cfg, data) : load_checkpoint(opts.resume_from);
    CsvLog log;
    if (!opts.log_path.empty()) {
        std::error_code ec;
        if (opts.log_path.has_parent_path()) std::filesystem::create_directories(opts.log_path.parent_path(), ec);
        log = CsvLog(opts.log_path, !opts.resume_from.empty());
        if (!log.is_open()) throw std::runtime_error("cannot open training log: " + opts.log_path.string());
    }
    const auto start = std::chrono::steady_clock::now();
    const int total_iters = s.config.total_iters;
    const int every = s.config.checkpoint_every;
    while (s.iteration < total_iters && (opts.stop_after < 0 || s.iteration < opts.stop_after)) {
        const LossReport r = train_step(s, pick_view(s, data));
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (log.is_open()) log.write(s.iteration, r, wall);
        if (opts.on_step) opts.on_step(s, r);
        if (!opts.checkpoint_dir.empty() && every > 0 && s.iteration % every == 0 && s.iteration < total_iters)
            save_checkpoint(s, opts.checkpoint_dir / checkpoint_name(s.iteration));
    }
    if (!opts.checkpoint_dir.empty()) {
        save_checkpoint(s, opts.checkpoint_dir / checkpoint_name(s.iteration));
        if (s.iteration >= total_iters) save_checkpoint(s, opts.checkpoint_dir / "final");
    }
    return s;
}

// --- alignment and network-only fitting ------------------------------------------

Points pulled_centers(const SdfNetwork& net, const Points& centers) {
    if (centers.rows() == 0) return centers;
    Vec f;
    Points g;
    net.evaluate_with_gradient(centers, f, g);
    Points out = centers;
    for (Index i = 0; i < centers.rows(); ++i) {
        const Real n = g.row(i).norm();
        if (n > kMinGradNorm) out.row(i) -= f(i) * g.row(i) / n;
    }
    return out;
}

Real aligned_fraction(const SdfNetwork& net, const Points& centers, Real tol) {
    if (centers.rows() == 0) return 0;
    const Vec f = net.evaluate(pulled_centers(net, centers));
    Index ok = 0;
    for (Index i = 0; i < f.size(); ++i) ok += std::abs(f(i)) < tol;
    return Real(ok) / Real(f.size());
}

std::vector<LossReport> fit_network(SdfNetwork& net, const GaussianSet& frozen, const NetworkFitConfig& cfg) {
    if (frozen.empty()) throw std::invalid_argument("fit_network: empty Gaussian set");
    const Points centers(frozen.centers.value);
    Mat normals(frozen.size(), 3);
    for (Index i = 0; i < frozen.size(); ++i) normals.row(i) = disk_normal(frozen.get(i)).transpose();
    LossWeights w;
    w.gamma = cfg.gamma;
    w.delta = cfg.delta;
    w.eikonal = cfg.eikonal;
    Adam adam;
    fit_network_moments(net);
    std::vector<LossReport> history;
    history.reserve(static_cast<std::size_t>(std::max(0, cfg.iterations)));
    for (int it = 0; it < cfg.iterations; ++it) {
        net.zero_grad();
        ad::Tape tape;
        const QueryBatch qb = sample_queries(centers, cfg.queries, derive_seed(cfg.seed, std::uint64_t(it), 1));
        const PullResult pq = pull(tape, net, tape.constant(Mat(qb.queries)));
        const std::span<const Index> idx(qb.assigned);
        const ad::Value target = tape.constant(gather(Mat(centers), idx));
        LossTerms terms;
        terms.pull = cfg.pull_to_centers
                         ? loss_pull_to_centers(pq.points, target)
                         : loss_pull(pq.points, target, tape.constant(gather(frozen.rotations.value, idx)),
                                     tape.constant(gather(frozen.log_scales.value, idx)));
        const Mat n = gather(normals, idx);
        if (cfg.delta > 0) terms.orthogonal = loss_orthogonal(tape, pq.grad, tape.constant(n));
        if (cfg.eikonal > 0) terms.eikonal = loss_eikonal(pq.grad);
        const LossReport r = report_of(terms, w);
        check_report(r, it);
        tape.backward(total(tape, terms, w));
        adam.tick();
        update_network(adam, net, cfg.lr);
        history.push_back(r);
    }
    return history;
}

} // namespace gspull
