#pragma once

#include "gspull/adam.hpp"
#include "gspull/gauss.hpp"
#include "gspull/losses.hpp"
#include "gspull/rasterizer.hpp"
#include "gspull/sdfnet.hpp"
#include "gspull/synth.hpp"
#include "gspull/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace gspull {

struct LearningRates {
    Real centers = Real(1.6e-4);
    Real centers_final = Real(1.6e-6);
    Real log_scales = Real(5e-3);
    Real rotations = Real(1e-3);
    Real opacity = Real(5e-2);
    Real colors = Real(2.5e-3);
    Real network = Real(1e-3);
};

struct Ablation {
    bool pull_to_centers = false;
    bool no_thin = false;
    bool no_tangent = false;
    bool no_orthogonal = false;
    bool no_pull_gaussians = false;
};

struct TrainConfig {
    int total_iters = 3000;
    int phase_switch_iter = 1400;
    LossWeights weights;
    LearningRates lr;
    Ablation ablation;
    // Queries and pull targets use the Gaussian centers instead of the pulled centers.
    bool anchor_pull_targets = true;

    int densify_start = 100;
    int densify_interval = 100;
    Real densify_grad_threshold = Real(2e-4); // mean screen gradient, NDC units
    Real densify_size_fraction = Real(0.005); // clone/split boundary as a fraction of the scene extent
    Real prune_opacity = Real(0.005);
    Index max_gaussians = 4000;

    Index queries = 2000;
    Index init_count = 2000;
    Real init_noise = Real(0.01);
    int network_layers = 4;
    int network_width = 128;
    Real init_radius = Real(0.5);

    int checkpoint_every = 500;
    std::uint64_t seed = 0;

    void validate() const;

    // Long schedule with the 8x256 network.
    static TrainConfig full_scale();

    // Key=value assignment; throws std::invalid_argument naming the key on bad input.
    void set(const std::string& key, const std::string& value);
    // One "key = value" line per field, in schema order.
    std::string to_text() const;
    // Parses "key = value" lines; '#' starts a comment. Errors carry the line number.
    static TrainConfig parse(const std::string& text, const TrainConfig& base);
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path, const TrainConfig& base);
    static TrainConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    static std::vector<std::string> keys();
};

// Sets the ablation flag (or eikonal weight) named by a CLI flag; false if unknown.
bool apply_ablation(TrainConfig& cfg, const std::string& name);
std::vector<std::string> ablation_names();

// Seed for the purpose-th random stream of an iteration.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t iteration, std::uint64_t purpose);

inline constexpr int kQueryNeighborRank = 25;
inline constexpr Real kQueryStdMin = Real(0.01);
inline constexpr Real kQueryStdMax = Real(0.3);

struct QueryBatch {
    Points queries = Points(0, 3);
    std::vector<Index> assigned; // nearest center per query
    std::vector<Index> source;   // center each query was drawn around
    Vec std_dev;                 // noise scale used per query
    Index size() const { return queries.rows(); }
};

// Noise scale per center: distance to the 25th nearest other center, clamped.
Vec query_std_devs(const Points& centers);
QueryBatch sample_queries(const Points& centers, Index n, std::uint64_t seed);
QueryBatch sample_queries(const GaussianSet& set, Index n, std::uint64_t seed);

struct DensifyConfig {
    Real grad_threshold = Real(2e-4);
    Real size_threshold = Real(0.01);
    Index max_gaussians = 0; // 0 disables the cap
};

struct DensifyStats {
    Index cloned = 0;
    Index split = 0;
};

// Clone or split Gaussians whose mean screen gradient exceeds the threshold, then reset statistics.
DensifyStats densify(GaussianSet& set, const DensifyConfig& cfg, std::uint64_t seed);

// Removes Gaussians with opacity below min_opacity or largest scale above max_scale; returns the count removed.
Index prune(GaussianSet& set, Real min_opacity = Real(0.005), Real max_scale = std::numeric_limits<Real>::infinity());

// Extent of a camera rig: 1.1 times the largest camera-center distance from the centroid.
Real scene_extent(const std::vector<CameraView>& views);

struct TrainState {
    TrainConfig config;
    GaussianSet set;
    SdfNetwork net;
    Adam adam;
    int iteration = 0;
    Real extent = 1;
    Vec3 background = Vec3::Zero();

    bool in_phase2() const { return iteration >= config.phase_switch_iter; }
};

TrainState make_state(const TrainConfig& cfg, const Dataset& data);

// Centers learning rate at an iteration: exponential interpolation to the final rate.
Real center_learning_rate(const TrainConfig& cfg, int iteration);

// One optimization step on the given view, then advances the iteration.
// Throws std::runtime_error naming the term when a loss is NaN.
LossReport train_step(TrainState& state, const CameraView& view);

// Picks a uniformly random training view for the current iteration.
const CameraView& pick_view(const TrainState& state, const Dataset& data);

// Checkpoint directory: config.txt, gaussians.bin, network.bin, optimizer.bin, state.json.
void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);

struct FitOptions {
    std::filesystem::path checkpoint_dir; // empty disables checkpoints
    std::filesystem::path log_path;       // empty disables the CSV log
    std::filesystem::path resume_from;    // checkpoint to continue from
    int stop_after = -1;                  // stop early at this iteration (for interrupted runs)
    std::function<void(const TrainState&, const LossReport&)> on_step;
};

// Runs the schedule; checkpoints every config.checkpoint_every iterations and at the end.
TrainState fit(const TrainConfig& cfg, const Dataset& data, const FitOptions& opts = {});

// Fraction of centers whose pulled position satisfies |f| < tol.
Real aligned_fraction(const SdfNetwork& net, const Points& centers, Real tol = Real(0.01));

// Centers projected once onto the zero level set of the network.
Points pulled_centers(const SdfNetwork& net, const Points& centers);

// Network-only fitting to a frozen Gaussian set with the pull and orthogonal terms.
struct NetworkFitConfig {
    int iterations = 2000;
    Index queries = 2000;
    Real lr = Real(1e-3);
    Real gamma = 1;
    Real delta = Real(0.1);
    Real eikonal = 0;
    bool pull_to_centers = false;
    std::uint64_t seed = 0;
};

std::vector<LossReport> fit_network(SdfNetwork& net, const GaussianSet& frozen, const NetworkFitConfig& cfg);

} // namespace gspull
