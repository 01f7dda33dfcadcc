#include "cli.hpp"

#include "gspull/log.hpp"
#include "gspull/metrics.hpp"
#include "gspull/surface.hpp"
#include "gspull/synth.hpp"
#include "gspull/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace gspull::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void error_line(std::ostream& err, const std::string& command, const std::string& kind, const std::string& message) {
    err << json{{"error", kind}, {"command", command}, {"message", message}}.dump() << '\n';
}

struct TrainFlags {
    fs::path config;
    std::vector<std::string> sets;
    std::vector<std::string> ablations;
    int iters = -1;
    int phase_switch = -1;
    int queries = -1;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--config", f.config, "key = value config file (printed by 'train --print-config')");
    cmd->add_option("--set", f.sets, "override one config key, as key=value (repeatable)")->allow_extra_args(false);
    cmd->add_option("--ablation", f.ablations, "ablation switch (repeatable)")->allow_extra_args(false)
        ->check(CLI::IsMember(ablation_names()));
    cmd->add_option("--iters", f.iters, "total iterations");
    cmd->add_option("--switch", f.phase_switch, "iteration at which pulling and the geometry terms start");
    cmd->add_option("--queries", f.queries, "queries per iteration");
}

// Config file first, then explicit flags; the seed flag always wins.
TrainConfig resolve_config(const TrainFlags& f, const std::uint64_t* seed) {
    TrainConfig c = f.config.empty() ? TrainConfig{} : TrainConfig::load(f.config);
    for (const auto& kv : f.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (f.iters > 0) {
        c.total_iters = f.iters;
        if (f.phase_switch < 0 && c.phase_switch_iter >= c.total_iters)
            c.phase_switch_iter = std::max(1, c.total_iters * 14 / 30);
    }
    if (f.phase_switch >= 0) c.phase_switch_iter = f.phase_switch;
    if (f.queries > 0) c.queries = f.queries;
    for (const auto& a : f.ablations) apply_ablation(c, a);
    if (seed) c.seed = *seed;
    c.validate();
    return c;
}

fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::exists(p / "gaussians.bin")) return p;
    for (const auto& sub : {fs::path("final"), fs::path("checkpoints") / "final"})
        if (fs::exists(p / sub / "gaussians.bin")) return p / sub;
    if (fs::is_directory(p / "checkpoints")) {
        fs::path last;
        for (const auto& e : fs::directory_iterator(p / "checkpoints"))
            if (e.is_directory() && e.path().filename().string().rfind("iter_", 0) == 0 && e.path() > last) last = e.path();
        if (!last.empty()) return last;
    }
    throw std::runtime_error("no checkpoint found at " + p.string());
}

std::vector<const CameraView*> select_views(const Dataset& d, const std::string& split) {
    if (split == "train") return d.train_views();
    if (split == "holdout") return d.holdout_views();
    std::vector<const CameraView*> all;
    for (const auto& v : d.views) all.push_back(&v);
    return all;
}

GaussianSet displayed_set(const TrainState& s, bool original) {
    GaussianSet shown = s.set;
    if (!original && s.in_phase2()) shown.centers.value = pulled_centers(s.net, Points(s.set.centers.value));
    return shown;
}

std::vector<ViewMetrics> view_metrics(const TrainState& s, const std::vector<const CameraView*>& views, bool original) {
    const GaussianSet shown = displayed_set(s, original);
    RenderConfig rc;
    rc.background = s.background;
    std::vector<ViewMetrics> out;
    for (const CameraView* v : views) {
        if (!v->image) continue;
        const Image img = render(shown, *v, rc).color;
        out.push_back({v->name, psnr(img, *v->image), ssim(img, *v->image)});
    }
    return out;
}

TriangleMesh extract(const SdfNetwork& net, int resolution, int chunks) {
    const BatchField f = batch_field(net);
    if (chunks <= 1) return marching_cubes(f, default_bounds(), resolution);
    if (resolution % chunks != 0) throw UsageError("--resolution must be divisible by --chunks");
    return extract_chunked(f, default_bounds(), {chunks, chunks, chunks}, resolution / chunks);
}

const TriangleMesh& reference_of(const Dataset& d) {
    if (!d.reference_mesh || d.reference_mesh->empty()) throw std::runtime_error("dataset has no reference mesh");
    return *d.reference_mesh;
}

TriangleMesh load_reference(const fs::path& p) {
    if (fs::is_directory(p) || p.extension() == ".json") return reference_of(load_dataset(p));
    return import_mesh(p);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

void emit(std::ostream& out, const MetricReport& r, const fs::path& json_path, bool json_only) {
    const std::string j = r.to_json();
    if (!json_path.empty()) write_text(json_path, j + "\n");
    if (!json_only) out << r.to_table();
    out << j << '\n';
}

std::string fmt(Real v, int digits = 5) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint Gaussian splatting and neural SDF reconstruction", "gspull"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "progress messages on stderr");

    std::uint64_t seed = 0;
    auto add_seed = [&](CLI::App* c) { return c->add_option("--seed", seed, "random seed"); };

    // make-scene
    auto* mk = app.add_subcommand("make-scene", "render a synthetic analytic scene with cameras and a reference mesh");
    std::string shape_name = "sphere-union";
    fs::path mk_out;
    SceneConfig sc;
    mk->add_option("--shape", shape_name, "sphere, box, torus or sphere-union")
        ->check(CLI::IsMember({"sphere", "box", "torus", "sphere-union"}));
    mk->add_option("--out", mk_out, "output directory")->required();
    mk->add_option("--views", sc.n_views, "number of cameras")->check(CLI::PositiveNumber);
    mk->add_option("--size", sc.image_size, "image width and height in pixels")->check(CLI::PositiveNumber);
    mk->add_option("--holdout", sc.holdout_fraction, "fraction of views held out")->check(CLI::Range(0.0, 1.0));
    mk->add_option("--mesh-resolution", sc.mesh_resolution, "reference mesh marching-cubes cells per axis");
    mk->add_option("--samples", sc.reference_samples, "reference surface samples");
    add_seed(mk);

    // train
    auto* tr = app.add_subcommand("train", "optimize Gaussians and the SDF network; writes checkpoints and a CSV log");
    TrainFlags tf;
    fs::path tr_data, tr_out, tr_resume;
    bool print_config = false;
    add_train_flags(tr, tf);
    tr->add_option("--data", tr_data, "dataset directory or transforms.json");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--resume", tr_resume, "checkpoint directory to continue from");
    tr->add_flag("--print-config", print_config, "print the effective config and exit");
    add_seed(tr);

    // render
    auto* rd = app.add_subcommand("render", "render a checkpoint from the dataset cameras to PNG files");
    fs::path rd_ckpt, rd_data, rd_out;
    std::string rd_split = "all";
    bool rd_original = false;
    rd->add_option("--checkpoint", rd_ckpt, "checkpoint or training output directory")->required();
    rd->add_option("--data", rd_data, "dataset directory")->required();
    rd->add_option("--out", rd_out, "output directory")->required();
    rd->add_option("--split", rd_split, "all, train or holdout")->check(CLI::IsMember({"all", "train", "holdout"}));
    rd->add_flag("--original", rd_original, "render the unpulled Gaussians");
    add_seed(rd);

    // extract-mesh
    auto* ex = app.add_subcommand("extract-mesh", "marching cubes on the SDF network of a checkpoint");
    fs::path ex_ckpt, ex_out;
    int ex_res = 128, ex_chunks = 1;
    ex->add_option("--checkpoint", ex_ckpt, "checkpoint or training output directory")->required();
    ex->add_option("--out", ex_out, "mesh file (.obj or .ply)")->required();
    ex->add_option("--resolution", ex_res, "cells per axis")->check(CLI::PositiveNumber);
    ex->add_option("--chunks", ex_chunks, "chunks per axis")->check(CLI::PositiveNumber);
    add_seed(ex);

    // eval-mesh
    auto* em = app.add_subcommand("eval-mesh", "Chamfer distance and F-score between a mesh and a reference");
    fs::path em_mesh, em_ref, em_json;
    Real em_tau = kDefaultFScoreThreshold;
    Index em_samples = kDefaultMetricSamples;
    bool json_only = false;
    em->add_option("--mesh", em_mesh, "mesh file")->required();
    em->add_option("--reference", em_ref, "reference mesh file or dataset directory")->required();
    em->add_option("--threshold", em_tau, "F-score distance threshold in scene units")->check(CLI::PositiveNumber);
    em->add_option("--samples", em_samples, "surface samples per mesh")->check(CLI::PositiveNumber);
    em->add_option("--json", em_json, "also write the report to this file");
    em->add_flag("--json-only", json_only, "print only the JSON report");
    add_seed(em);

    // eval-views
    auto* ev = app.add_subcommand(
        "eval-views", "PSNR and SSIM of rendered views against the dataset images. LPIPS is not reported: it needs a "
                      "pretrained perceptual network, which this tool does not ship.");
    fs::path ev_ckpt, ev_data, ev_json;
    std::string ev_split = "holdout";
    bool ev_original = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint or training output directory")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "all, train or holdout")->check(CLI::IsMember({"all", "train", "holdout"}));
    ev->add_flag("--original", ev_original, "render the unpulled Gaussians");
    ev->add_option("--json", ev_json, "also write the report to this file");
    ev->add_flag("--json-only", json_only, "print only the JSON report");
    add_seed(ev);

    // ablate
    auto* ab = app.add_subcommand("ablate", "train the default and each named variant, then compare meshes and views");
    TrainFlags af;
    std::vector<std::string> variants;
    fs::path ab_data, ab_out;
    int ab_res = 128;
    Index ab_samples = 20000;
    bool no_baseline = false;
    ab->add_option("variants", variants, "ablation switches")->required()->check(CLI::IsMember(ablation_names()));
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--resolution", ab_res, "mesh cells per axis")->check(CLI::PositiveNumber);
    ab->add_option("--samples", ab_samples, "metric surface samples")->check(CLI::PositiveNumber);
    ab->add_flag("--no-baseline", no_baseline, "skip the default configuration");
    add_train_flags(ab, af);
    ab->get_option("--ablation")->description("extra ablation switch applied to every run (repeatable)");
    add_seed(ab);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    std::string command = args.empty() ? "" : args.front();
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        error_line(err, command, "usage", e.what());
        return 2;
    }
    command = app.get_subcommands().front()->get_name();
    const std::uint64_t* seed_flag = nullptr;
    if (auto* opt = app.get_subcommands().front()->get_option_no_throw("--seed"); opt && opt->count() > 0) seed_flag = &seed;
    log_level() = verbose ? LogLevel::Info : LogLevel::Warn;

    try {
        if (mk->parsed()) {
            sc.seed = seed;
            const AnalyticShape shape = AnalyticShape::preset(shape_name);
            const Dataset d = make_scene(shape, sc);
            save_dataset(d, mk_out);
            out << json{{"command", command},
                        {"shape", shape_name},
                        {"views", d.views.size()},
                        {"holdout", d.holdout_views().size()},
                        {"reference_triangles", d.reference_mesh ? d.reference_mesh->triangle_count() : 0},
                        {"out", mk_out.string()}}
                       .dump()
                << '\n';
        } else if (tr->parsed()) {
            const TrainConfig c = resolve_config(tf, seed_flag);
            if (print_config) {
                out << c.to_text();
                return 0;
            }
            if (tr_data.empty() || tr_out.empty()) throw UsageError("train needs --data and --out");
            const Dataset d = load_dataset(tr_data);
            fs::create_directories(tr_out);
            c.save(tr_out / "config.txt");
            if (c.weights.eikonal > 0) err << "eikonal term on, weight " << fmt(c.weights.eikonal) << '\n';
            FitOptions o;
            o.checkpoint_dir = tr_out / "checkpoints";
            o.log_path = tr_out / "train.csv";
            o.resume_from = tr_resume;
            const auto t0 = std::chrono::steady_clock::now();
            o.on_step = [&](const TrainState& s, const LossReport& r) {
                if (s.iteration % 100 == 0)
                    log_info("iter " + std::to_string(s.iteration) + " gaussians " + std::to_string(s.set.size()) +
                             " total " + fmt(r.total));
            };
            const TrainState s = fit(c, d, o);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out << json{{"command", command},
                        {"iterations", s.iteration},
                        {"gaussians", s.set.size()},
                        {"aligned_fraction", aligned_fraction(s.net, Points(s.set.centers.value))},
                        {"weight_eikonal", s.config.weights.eikonal},
                        {"runtime_seconds", secs},
                        {"checkpoint", (tr_out / "checkpoints" / "final").string()},
                        {"log", (tr_out / "train.csv").string()}}
                       .dump()
                << '\n';
        } else if (rd->parsed()) {
            const TrainState s = load_checkpoint(resolve_checkpoint(rd_ckpt));
            const Dataset d = load_dataset(rd_data);
            const GaussianSet shown = displayed_set(s, rd_original);
            RenderConfig rc;
            rc.background = s.background;
            fs::create_directories(rd_out);
            json files = json::array();
            for (const CameraView* v : select_views(d, rd_split)) {
                const fs::path p = rd_out / (v->name + ".png");
                write_png(render(shown, *v, rc).color, p);
                files.push_back(p.string());
            }
            out << json{{"command", command}, {"images", files}}.dump() << '\n';
        } else if (ex->parsed()) {
            const TrainState s = load_checkpoint(resolve_checkpoint(ex_ckpt));
            const TriangleMesh m = extract(s.net, ex_res, ex_chunks);
            if (m.empty()) throw std::runtime_error("the network has no zero level set inside the bounds");
            if (ex_out.has_parent_path()) fs::create_directories(ex_out.parent_path());
            export_mesh(m, ex_out, s.net.transform);
            const MeshStats st = mesh_stats(m);
            out << json{{"command", command},         {"vertices", st.vertices},
                        {"triangles", st.triangles},   {"euler_characteristic", st.euler_characteristic},
                        {"watertight", st.watertight}, {"out", ex_out.string()}}
                       .dump()
                << '\n';
        } else if (em->parsed()) {
            const auto t0 = std::chrono::steady_clock::now();
            const TriangleMesh a = import_mesh(em_mesh);
            const TriangleMesh b = load_reference(em_ref);
            MetricReport r;
            r.mesh = evaluate_mesh(a, b, em_tau, em_samples, seed);
            r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            emit(out, r, em_json, json_only);
        } else if (ev->parsed()) {
            const auto t0 = std::chrono::steady_clock::now();
            const TrainState s = load_checkpoint(resolve_checkpoint(ev_ckpt));
            const Dataset d = load_dataset(ev_data);
            MetricReport r;
            r.views = view_metrics(s, select_views(d, ev_split), ev_original);
            if (r.views.empty()) throw std::runtime_error("no views with images in split '" + ev_split + "'");
            r.summarize_views();
            r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            emit(out, r, ev_json, json_only);
        } else if (ab->parsed()) {
            const Dataset d = load_dataset(ab_data);
            const TriangleMesh& ref = reference_of(d);
            std::vector<std::string> runs;
            if (!no_baseline) runs.push_back("default");
            runs.insert(runs.end(), variants.begin(), variants.end());
            json results = json::array();
            std::ostringstream table;
            table << std::left << std::setw(20) << "variant" << std::setw(12) << "chamfer" << std::setw(10) << "f_score"
                  << std::setw(10) << "psnr" << std::setw(10) << "aligned" << "eikonal\n";
            for (const auto& name : runs) {
                TrainConfig c = resolve_config(af, seed_flag);
                if (name != "default") apply_ablation(c, name);
                const fs::path dir = ab_out / name;
                fs::create_directories(dir);
                c.save(dir / "config.txt");
                if (c.weights.eikonal > 0) err << name << ": eikonal term on, weight " << fmt(c.weights.eikonal) << '\n';
                FitOptions o;
                o.checkpoint_dir = dir / "checkpoints";
                o.log_path = dir / "train.csv";
                const auto t0 = std::chrono::steady_clock::now();
                const TrainState s = fit(c, d, o);
                const TriangleMesh m = extract(s.net, ab_res, 1);
                json row{{"variant", name}, {"weight_eikonal", c.weights.eikonal}};
                MetricReport r;
                if (!m.empty()) {
                    export_mesh(m, dir / "mesh.ply", s.net.transform);
                    r.mesh = evaluate_mesh(m, ref, kDefaultFScoreThreshold, ab_samples, seed);
                }
                r.views = view_metrics(s, d.holdout_views(), false);
                r.summarize_views();
                r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                write_text(dir / "metrics.json", r.to_json() + "\n");
                const Real aligned = aligned_fraction(s.net, Points(s.set.centers.value));
                row["metrics"] = json::parse(r.to_json());
                row["aligned_fraction"] = aligned;
                results.push_back(row);
                table << std::left << std::setw(20) << name << std::setw(12)
                      << (r.mesh ? fmt(r.mesh->chamfer) : std::string("empty")) << std::setw(10)
                      << (r.mesh ? fmt(r.mesh->f_score, 4) : std::string("-")) << std::setw(10) << fmt(r.mean_psnr, 4)
                      << std::setw(10) << fmt(aligned, 4) << fmt(c.weights.eikonal, 3) << '\n';
            }
            const json report{{"command", command}, {"runs", results}};
            write_text(ab_out / "ablation.json", report.dump(2) + "\n");
            if (!json_only) out << table.str();
            out << report.dump() << '\n';
        }
    } catch (const UsageError& e) {
        err << app.get_subcommands().front()->help();
        error_line(err, command, "usage", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        error_line(err, command, "invalid", e.what());
        return 1;
    } catch (const std::exception& e) {
        error_line(err, command, "failed", e.what());
        return 1;
    }
    return 0;
}

} // namespace gspull::cli
