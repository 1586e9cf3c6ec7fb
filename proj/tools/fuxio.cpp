// Command-line front end: synthetic data generation, two-stage training,
// autoregressive prediction, evaluation reports, and ablation sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fuxio/config.hpp"
#include "fuxio/rollout.hpp"
#include "fuxio/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// Guards an output directory against concurrent writers. The lock file is
// created exclusively and removed on scope exit.
class DirLock {
public:
    DirLock(const fs::path& dir, bool force) : path_(dir / ".lock") {
        fs::create_directories(dir);
        if (fs::exists(path_) && !force)
            throw fuxio::IoError("output directory is locked by another run: " + path_.string() +
                                 " (remove the lock or pass --force)");
        std::ofstream f(path_);
        if (!f) throw fuxio::IoError("cannot create lock file: " + path_.string());
        f << "pid unknown\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

std::uint64_t file_hash(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw fuxio::IoError("cannot open for hashing: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fuxio::fnv1a(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_manifest(const fs::path& dir, const fs::path& config_path, const std::string& stage,
                    const fuxio::Checkpoint& cp, const std::vector<std::string>& checkpoints) {
    json m;
    m["tool_version"] = kVersion;
    m["config_file"] = config_path.string();
    m["config_hash"] = hex64(file_hash(config_path));
    m["stage"] = stage;
    m["iteration"] = cp.iteration;
    m["param_hash"] = hex64(fuxio::fnv1a(cp.params.data(), cp.params.size() * sizeof(double)));
    m["net"] = fuxio::net_config_to_json(cp.net);
    m["checkpoints"] = checkpoints;
    std::ofstream f(dir / "manifest.json");
    if (!f) throw fuxio::IoError("cannot write manifest.json");
    f << m.dump(2) << '\n';
}

fuxio::SeriesStore load_series(const fuxio::RunConfig& rc) {
    auto store = fuxio::ingest_raw(rc.data_dir);
    store.validate();
    return store;
}

fuxio::NormStats load_or_compute_stats(const fuxio::RunConfig& rc, const fuxio::SeriesStore& store,
                                       const fuxio::SplitRange& split) {
    const fs::path stats_path = rc.output_dir / "norm_stats.json";
    if (fs::exists(stats_path)) {
        std::ifstream f(stats_path);
        json j;
        f >> j;
        return fuxio::norm_stats_from_json(j);
    }
    auto stats = fuxio::compute_norm_stats(store, split.train_begin, split.train_end);
    fs::create_directories(rc.output_dir);
    std::ofstream f(stats_path);
    if (!f) throw fuxio::IoError("cannot write norm_stats.json");
    f << fuxio::norm_stats_to_json(stats).dump(2) << '\n';
    return stats;
}

int cmd_gen_data(const fs::path& config_path, bool force) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto grid = fuxio::GridSpec::regular(rc.n_lat, rc.n_lon, rc.depth_levels);
    const auto layout = fuxio::build_channel_layout(
        rc.variables, static_cast<int>(rc.depth_levels.size()), rc.has_ssh);
    const auto mask = fuxio::synthetic_mask(rc.n_lat, rc.n_lon, rc.land_fraction, rc.mask_seed);
    const auto store = fuxio::generate_synthetic(rc.recipe, grid, layout, mask, rc.n_steps);
    fuxio::export_store(store, rc.data_dir, force);
    std::cout << "wrote " << store.steps.size() << " steps to " << rc.data_dir << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path, bool force) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto store = load_series(rc);
    const auto split = fuxio::resolve_split(rc.split, store);
    DirLock lock(rc.output_dir, force);
    const auto stats = load_or_compute_stats(rc, store, split);
    fuxio::TrainConfig tc = rc.train;
    tc.stage = "pretrain";
    fuxio::TrainEngine engine(store, stats, rc.net, tc, rc.loss, split.train_begin,
                              split.train_end);
    const fs::path ckpt_dir = rc.output_dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    engine.run(rc.output_dir / "train_log.csv", ckpt_dir);
    const auto cp = engine.make_checkpoint();
    fuxio::save_checkpoint(cp, ckpt_dir / "checkpoint_pretrain.bin");
    fuxio::write_selection_csv(rc.output_dir / "selection_matrix.csv", engine.selection(),
                               store.layout, store.grid);
    write_manifest(rc.output_dir, config_path, "pretrain", cp,
                   {"checkpoints/checkpoint_pretrain.bin"});
    std::cout << "pretrain finished after " << engine.iteration() << " iterations\n";
    return 0;
}

int cmd_finetune(const fs::path& config_path, const fs::path& from, bool force) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto store = load_series(rc);
    const auto split = fuxio::resolve_split(rc.split, store);
    DirLock lock(rc.output_dir, force);
    const auto cp_in = fuxio::load_checkpoint(from);
    fuxio::TrainEngine engine(store, cp_in, split.train_begin, split.train_end);
    engine.set_stage("finetune", rc.train.iterations, rc.train.horizon);
    const fs::path ckpt_dir = rc.output_dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    engine.run(rc.output_dir / "train_log.csv", ckpt_dir);
    const auto cp = engine.make_checkpoint();
    fuxio::save_checkpoint(cp, ckpt_dir / "checkpoint_finetune.bin");
    fuxio::write_selection_csv(rc.output_dir / "selection_matrix.csv", engine.selection(),
                               store.layout, store.grid);
    write_manifest(rc.output_dir, config_path, "finetune", cp,
                   {"checkpoints/checkpoint_finetune.bin"});
    std::cout << "finetune finished after " << engine.iteration() << " iterations\n";
    return 0;
}

int cmd_predict(const fs::path& config_path, const fs::path& from, const std::string& init,
                int steps, const std::string& run_id, bool force) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto store = load_series(rc);
    const auto cp = fuxio::load_checkpoint(from);
    fuxio::Forecaster fc(cp, store);
    std::int64_t t0;
    try {
        t0 = fuxio::parse_time_field(json::parse(init), store.timestamps.front());
    } catch (const json::exception&) {
        t0 = fuxio::parse_timestamp(init);
    }
    const auto run = fc.rollout(t0, steps);
    const fs::path dir = rc.output_dir / "forecasts" / run_id;
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw fuxio::IoError("forecast directory exists (use --force): " + dir.string());
    fs::create_directories(dir);
    json meta;
    meta["init"] = fuxio::format_timestamp(t0);
    meta["steps"] = steps;
    meta["checkpoint_hash"] = hex64(run.checkpoint_hash);
    json files = json::array();
    for (int k = 0; k < steps; ++k) {
        const std::string name =
            "forecast_" + fuxio::format_timestamp(run.valid_time(k + 1)) + ".f32";
        fuxio::write_f32_file(dir / name, run.states[k]);
        files.push_back(name);
    }
    meta["files"] = files;
    std::ofstream f(dir / "forecast.json");
    f << meta.dump(2) << '\n';
    std::cout << "wrote " << steps << "-step forecast to " << dir << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& config_path, const fs::path& from, const std::string& run_id) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto store = load_series(rc);
    const auto split = fuxio::resolve_split(rc.split, store);
    const auto cp = fuxio::load_checkpoint(from);
    fuxio::Forecaster fc(cp, store);
    const auto inits = fuxio::eval_inits(store, split.eval_begin, split.eval_end, rc.eval.steps,
                                         rc.eval.init_stride, rc.eval.max_inits);
    const auto report = fuxio::evaluate(fc, store, inits, rc.eval);
    const fs::path dir = rc.output_dir / "reports" / run_id;
    fuxio::write_report(report, store, dir);
    std::cout << "evaluated " << report.n_inits << " initializations; report in " << dir << "\n";
    return 0;
}

int cmd_ablate(const fs::path& config_path, const std::string& variants_csv,
               const std::string& seeds_csv, const std::string& run_id) {
    const auto rc = fuxio::load_run_config(config_path);
    const auto store = load_series(rc);
    const auto split = fuxio::resolve_split(rc.split, store);
    const auto stats = fuxio::compute_norm_stats(store, split.train_begin, split.train_end);

    std::vector<fuxio::AblationVariant> variants;
    std::vector<std::uint64_t> seeds;
    {
        std::stringstream ss(variants_csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            variants.push_back(fuxio::ablation_variant_from_string(tok));
        std::stringstream s2(seeds_csv);
        while (std::getline(s2, tok, ',')) seeds.push_back(std::stoull(tok));
    }
    if (variants.empty() || seeds.empty())
        throw fuxio::ConfigError("ablate requires at least one variant and one seed");

    const auto rows = fuxio::run_ablation(store, stats, rc.net, rc.train, rc.loss,
                                          split.train_begin, split.train_end, split.eval_begin,
                                          split.eval_end, variants, seeds, rc.eval.steps,
                                          rc.eval.max_inits);
    const fs::path dir = rc.output_dir / "reports" / run_id;
    fs::create_directories(dir);
    fuxio::write_ablation_csv(dir / "ablation_compare.csv", rows, store.layout, store.grid);
    std::cout << "ablation table in " << dir / "ablation_compare.csv" << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ocean state forecasting: training, prediction, evaluation"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config_path, from, init, run_id = "run", variants = "full,woMoT,woMoT_2times",
                seeds = "1";
    int steps = 4;
    bool force = false;

    auto add_common = [&](CLI::App* sub, bool needs_from) {
        sub->add_option("--config", config_path, "run configuration JSON")->required();
        sub->add_flag("--force", force, "overwrite existing outputs / ignore locks");
        if (needs_from)
            sub->add_option("--from", from, "checkpoint file")->required();
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic series");
    add_common(gen, false);
    auto* train = app.add_subcommand("train", "pretrain from scratch");
    add_common(train, false);
    auto* finetune = app.add_subcommand("finetune", "multi-step finetune from a checkpoint");
    add_common(finetune, true);
    auto* predict = app.add_subcommand("predict", "autoregressive forecast from a checkpoint");
    add_common(predict, true);
    predict->add_option("--init", init, "initialization time (ISO8601 or step index)")->required();
    predict->add_option("--steps", steps, "forecast length in 6-hour steps");
    predict->add_option("--run-id", run_id, "output subdirectory name");
    auto* evaluate = app.add_subcommand("evaluate", "score forecasts against held-out truth");
    add_common(evaluate, true);
    evaluate->add_option("--run-id", run_id, "report subdirectory name");
    auto* ablate = app.add_subcommand("ablate", "train and compare model variants");
    add_common(ablate, false);
    ablate->add_option("--variants", variants, "comma-separated variant list");
    ablate->add_option("--seeds", seeds, "comma-separated seed list");
    ablate->add_option("--run-id", run_id, "report subdirectory name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, force);
        if (train->parsed()) return cmd_train(config_path, force);
        if (finetune->parsed()) return cmd_finetune(config_path, from, force);
        if (predict->parsed()) return cmd_predict(config_path, from, init, steps, run_id, force);
        if (evaluate->parsed()) return cmd_evaluate(config_path, from, run_id);
        if (ablate->parsed()) return cmd_ablate(config_path, variants, seeds, run_id);
    } catch (const fuxio::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const fuxio::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const fuxio::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
