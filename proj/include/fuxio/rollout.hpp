#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"
#include "fuxio/loss.hpp"
#include "fuxio/mot.hpp"
#include "fuxio/net.hpp"
#include "fuxio/series.hpp"
#include "fuxio/train.hpp"

namespace fuxio {

// ---------------------------------------------------------------------------
// ForecastRun: merged autoregressive predictions X^{t0+tau}, tau = 1..L, in
// physical units (land cells at the physical fill = per-channel mean).
// ---------------------------------------------------------------------------
struct ForecastRun {
    std::int64_t t0 = 0;
    std::vector<std::vector<double>> states;          // L fields, C*H*W
    std::vector<std::vector<double>> states_norm;     // same, normalized units
    std::uint64_t checkpoint_hash = 0, config_hash = 0;

    std::int64_t valid_time(int lead) const { return t0 + lead * kStepSeconds; }
};

// Read-only inference wrapper around a trained checkpoint. Rollouts never
// mutate parameters or V; distinct initializations may run concurrently.
class Forecaster {
public:
    Forecaster(const Checkpoint& cp, const SeriesStore& store)
        : store_(store), cp_(cp), model_(cp.net, store.C(), store.H(), store.W()) {
        if (cp.C != store.C() || cp.H != store.H() || cp.W != store.W())
            throw ShapeError("checkpoint dimensions do not match the series");
        selector_ = cp.train.mot_enabled ? topk_select(cp.V) : all_ones();
        merge_k_ = cp.train.mot_enabled ? cp.V.K : cp.net.n_steps;
        const auto j = net_config_to_json(cp.net).dump();
        config_hash_ = fnv1a(j.data(), j.size());
        checkpoint_hash_ =
            fnv1a(cp.params.data(), cp.params.size() * sizeof(double));
    }

    const ForecastModel& model() const { return model_; }
    const Checkpoint& checkpoint() const { return cp_; }

    // Initialization windows come from ground truth (analysis-like init);
    // every subsequent step feeds the merged prediction back.
    ForecastRun rollout(std::int64_t t0, int steps) const {
        if (steps < 1) throw ConfigError("rollout length must be >= 1");
        std::deque<std::vector<double>> window;
        for (int k = kInputSteps - 1; k >= 0; --k) {
            const std::int64_t ts = t0 - k * kStepSeconds;
            const auto idx = store_.index_of(ts);
            if (!idx) throw DataGapError("missing timestep " + format_timestamp(ts));
            window.push_back(normalize_step(store_.steps[*idx], store_, cp_.stats));
        }
        ForecastRun run;
        run.t0 = t0;
        run.checkpoint_hash = checkpoint_hash_;
        run.config_hash = config_hash_;
        const int N = cp_.net.n_steps;
        ForwardCache cache;
        for (int k = 0; k < steps; ++k) {
            const std::int64_t t = t0 + k * kStepSeconds;
            std::vector<const double*> by_skip(N);
            for (int i = 0; i < N; ++i) by_skip[i] = window[window.size() - 1 - i].data();
            const auto signals = ContextSignals::at(t, store_.grid, store_.mask);
            model_.forward(by_skip, signals, cp_.params.data(), store_.mask, store_.layout, cache);
            auto merged = merge_candidates(cache.candidates, selector_, merge_k_, store_.mask,
                                           store_.layout);
            for (double v : merged)
                if (!std::isfinite(v))
                    throw NumericError("non-finite prediction at rollout step " +
                                       std::to_string(k + 1));
            run.states.push_back(denormalize_step(merged, store_, cp_.stats));
            run.states_norm.push_back(merged);
            window.pop_front();
            window.push_back(std::move(merged));
        }
        return run;
    }

private:
    const SeriesStore& store_;
    Checkpoint cp_;
    ForecastModel model_;
    TopKSelector selector_;
    int merge_k_ = 1;
    std::uint64_t checkpoint_hash_ = 0, config_hash_ = 0;

    TopKSelector all_ones() const {
        TopKSelector sel;
        sel.C = store_.C();
        sel.n = cp_.net.n_steps;
        sel.K = sel.n;
        sel.ones.assign(static_cast<size_t>(sel.C) * sel.n, 1);
        return sel;
    }
};

// Arithmetic mean of each full day (four 6-hourly steps); partial trailing
// days are dropped. Fewer than four steps yields an empty result.
inline std::vector<std::vector<double>> daily_average(
    const std::vector<std::vector<double>>& states) {
    std::vector<std::vector<double>> days;
    const size_t full_days = states.size() / 4;
    for (size_t d = 0; d < full_days; ++d) {
        std::vector<double> mean(states[0].size(), 0.0);
        for (int k = 0; k < 4; ++k) {
            const auto& s = states[d * 4 + k];
            for (size_t i = 0; i < mean.size(); ++i) mean[i] += s[i];
        }
        for (double& v : mean) v *= 0.25;
        days.push_back(std::move(mean));
    }
    return days;
}

// ---------------------------------------------------------------------------
// Sparse point observations (synthetic buoys / IV-TT-style path)
// ---------------------------------------------------------------------------
struct SparseObs {
    std::int64_t timestamp = 0;
    double lat = 0.0, lon = 0.0;
    std::string variable;
    double value = 0.0;
};

struct GriddedObs {
    std::vector<double> field;      // H*W, mean of observations per cell
    std::vector<int> count;         // observations per cell; 0 = unobserved
    int rejected = 0;               // out-of-bounds records
};

// Nearest grid-cell center in (lat, lon) index space; longitude wraps, ties
// break toward the lower index. Observations outside the (half-spacing
// extended) latitude range are rejected and counted.
inline GriddedObs grid_sparse_obs(const std::vector<SparseObs>& obs, const GridSpec& grid,
                                  std::int64_t bin_begin, std::int64_t bin_end) {
    const int H = grid.n_lat, W = grid.n_lon;
    GriddedObs out;
    out.field.assign(static_cast<size_t>(H) * W, 0.0);
    out.count.assign(static_cast<size_t>(H) * W, 0);
    const double lat_lo = std::min(grid.latitudes.front(), grid.latitudes.back());
    const double lat_hi = std::max(grid.latitudes.front(), grid.latitudes.back());
    const double half = H > 1 ? std::abs(grid.latitudes[1] - grid.latitudes[0]) / 2.0 : 90.0;
    const double lon_span = W > 1 ? (grid.longitudes[1] - grid.longitudes[0]) * W : 360.0;
    for (const auto& o : obs) {
        if (o.timestamp < bin_begin || o.timestamp >= bin_end) continue;
        if (o.lat < lat_lo - half || o.lat > lat_hi + half || std::abs(o.lat) >= 90.0) {
            ++out.rejected;
            continue;
        }
        int best_i = 0;
        double best_d = std::abs(o.lat - grid.latitudes[0]);
        for (int i = 1; i < H; ++i) {
            const double d = std::abs(o.lat - grid.latitudes[i]);
            if (d < best_d) {
                best_d = d;
                best_i = i;
            }
        }
        int best_j = 0;
        double best_dj = 1e300;
        for (int j = 0; j < W; ++j) {
            double d = std::abs(o.lon - grid.longitudes[j]);
            d = std::min(d, std::abs(lon_span - d));  // periodic wrap
            if (d < best_dj - 1e-12) {
                best_dj = d;
                best_j = j;
            }
        }
        const size_t cell = static_cast<size_t>(best_i) * W + best_j;
        out.field[cell] += o.value;
        out.count[cell] += 1;
    }
    for (size_t i = 0; i < out.field.size(); ++i)
        if (out.count[i] > 0) out.field[i] /= out.count[i];
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------
struct EvalOptions {
    int steps = 8;             // rollout length per initialization
    int init_stride = 1;       // every k-th possible initialization
    int max_inits = 16;
    std::vector<int> map_leads = {1, 4};
    bool with_obs = true;
    int obs_per_bin = 60;
    double obs_noise_sigma = 0.1;   // normalized units
    std::uint64_t obs_seed = 7;
};

struct ForecastReport {
    MetricTable table;  // physical units, per (channel, lead)
    // time-mean squared error per cell, keyed "var_leadh" (surface channel)
    std::map<std::string, std::vector<double>> mse_maps;
    std::vector<std::pair<int, double>> daily_sst;  // (day index, rmse)
    std::vector<std::array<double, 3>> obs_rows;    // (lead, rmse, n_cells)
    int n_inits = 0;
};

inline std::vector<std::int64_t> eval_inits(const SeriesStore& store, std::int64_t t_begin,
                                            std::int64_t t_end, int steps, int stride,
                                            int max_inits) {
    std::vector<std::int64_t> inits;
    int k = 0;
    for (std::int64_t t : store.timestamps) {
        if (t < t_begin || t > t_end) continue;
        if (!store.index_of(t - 3 * kStepSeconds) || !store.index_of(t + steps * kStepSeconds))
            continue;
        if (k++ % stride != 0) continue;
        inits.push_back(t);
        if (static_cast<int>(inits.size()) >= max_inits) break;
    }
    if (inits.empty()) throw ConfigError("no valid evaluation initializations in range");
    return inits;
}

inline ForecastReport evaluate(const Forecaster& fc, const SeriesStore& truth,
                               const std::vector<std::int64_t>& inits, const EvalOptions& opt) {
    const int C = truth.C(), H = truth.H(), W = truth.W();
    const auto weights = latitude_weights(truth.grid.latitudes);
    ForecastReport report;
    report.n_inits = static_cast<int>(inits.size());

    std::vector<ForecastRun> runs;
    runs.reserve(inits.size());
    for (auto t0 : inits) runs.push_back(fc.rollout(t0, opt.steps));

    std::vector<ForecastPair> pairs;
    for (const auto& run : runs)
        for (int tau = 1; tau <= opt.steps; ++tau) {
            const auto idx = truth.index_of(run.valid_time(tau));
            if (!idx) throw DataGapError("missing truth at " + format_timestamp(run.valid_time(tau)));
            pairs.push_back({tau, &run.states[tau - 1], &truth.steps[*idx]});
        }
    report.table = latitude_rmse(pairs, weights, truth.mask, truth.layout);

    // spatial time-mean squared error maps for surface channels
    for (int lead : opt.map_leads) {
        if (lead < 1 || lead > opt.steps) continue;
        for (size_t p = 0; p <= truth.layout.variables.size(); ++p) {
            const bool ssh = p == truth.layout.variables.size();
            if (ssh && !truth.layout.has_ssh) continue;
            const int c = ssh ? truth.layout.ssh_channel()
                              : truth.layout.channel_of(static_cast<int>(p), 0);
            const std::string var = ssh ? "SSH" : truth.layout.variables[p];
            std::vector<double> mse(static_cast<size_t>(H) * W, 0.0);
            for (const auto& run : runs) {
                const auto idx = truth.index_of(run.valid_time(lead));
                const double* pred = &run.states[lead - 1][static_cast<size_t>(c) * H * W];
                const double* tr = &truth.steps[*idx][static_cast<size_t>(c) * H * W];
                for (int s = 0; s < H * W; ++s) {
                    const double d = pred[s] - tr[s];
                    mse[s] += d * d / runs.size();
                }
            }
            report.mse_maps[var + "_" + std::to_string(lead * 6) + "h"] = std::move(mse);
        }
    }

    // daily-mean SST comparison (surface T channel)
    if (opt.steps >= 4) {
        const int c_sst = truth.layout.channel_of("T", 0);
        const auto& m = truth.mask.for_channel(truth.layout, c_sst);
        const size_t base = static_cast<size_t>(c_sst) * H * W;
        const int n_days = opt.steps / 4;
        for (int d = 0; d < n_days; ++d) {
            double sum_sq = 0.0;
            size_t n = 0;
            for (const auto& run : runs) {
                const auto fdays = daily_average(run.states);
                std::vector<std::vector<double>> tsteps;
                for (int k = 0; k < 4; ++k) {
                    const auto idx = truth.index_of(run.valid_time(d * 4 + k + 1));
                    tsteps.push_back(truth.steps[*idx]);
                }
                const auto tday = daily_average(tsteps);
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const size_t s = static_cast<size_t>(h) * W + w;
                        if (!m[s]) continue;
                        const double diff = fdays[d][base + s] - tday[0][base + s];
                        sum_sq += weights.weights[h] * diff * diff;
                        ++n;
                    }
            }
            report.daily_sst.push_back({d + 1, std::sqrt(sum_sq / n)});
        }
    }

    // synthetic-buoy verification of surface T
    if (opt.with_obs) {
        std::mt19937_64 rng(opt.obs_seed);
        const int c_sst = truth.layout.channel_of("T", 0);
        const auto& m = truth.mask.for_channel(truth.layout, c_sst);
        std::vector<size_t> ocean_cells;
        for (size_t s = 0; s < m.size(); ++s)
            if (m[s]) ocean_cells.push_back(s);
        std::uniform_int_distribution<size_t> pick(0, ocean_cells.size() - 1);
        std::normal_distribution<double> noise(0.0, opt.obs_noise_sigma * fc.checkpoint().stats.stddev[c_sst]);
        for (int tau = 1; tau <= opt.steps; ++tau) {
            double sum_sq = 0.0;
            size_t n = 0;
            for (const auto& run : runs) {
                const std::int64_t vt = run.valid_time(tau);
                const auto idx = truth.index_of(vt);
                std::vector<SparseObs> obs;
                for (int i = 0; i < opt.obs_per_bin; ++i) {
                    const size_t cell = ocean_cells[pick(rng)];
                    SparseObs o;
                    o.timestamp = vt;
                    o.lat = truth.grid.latitudes[cell / W];
                    o.lon = truth.grid.longitudes[cell % W];
                    o.variable = "T";
                    o.value = truth.steps[*idx][static_cast<size_t>(c_sst) * H * W + cell] +
                              noise(rng);
                    obs.push_back(o);
                }
                const auto gridded =
                    grid_sparse_obs(obs, truth.grid, vt, vt + kStepSeconds);
                const double* pred = &run.states[tau - 1][static_cast<size_t>(c_sst) * H * W];
                for (size_t s = 0; s < gridded.count.size(); ++s) {
                    if (gridded.count[s] == 0) continue;
                    const double d = pred[s] - gridded.field[s];
                    sum_sq += d * d;
                    ++n;
                }
            }
            report.obs_rows.push_back({static_cast<double>(tau), std::sqrt(sum_sq / n),
                                       static_cast<double>(n)});
        }
    }
    return report;
}

inline void write_report(const ForecastReport& report, const SeriesStore& truth,
                         const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_rmse_csv(dir / "rmse.csv", report.table, truth.layout, truth.grid);
    {
        std::ofstream f(dir / "rmse_by_depth.csv");
        if (!f) throw IoError("cannot write rmse_by_depth.csv");
        f << "variable,lead_hours,depth_m,rmse\n";
        for (const auto& [key, val] : report.table.rmse) {
            const auto [c, lead] = key;
            if (truth.layout.has_ssh && c == truth.layout.ssh_channel()) continue;
            f << truth.layout.variable_name(c) << ',' << lead * 6 << ','
              << truth.grid.depth_levels[truth.layout.depth_index(c)] << ',' << val << '\n';
        }
    }
    nlohmann::json maps_index = nlohmann::json::array();
    for (const auto& [key, mse] : report.mse_maps) {
        const std::string fname = "rmse_map_" + key + ".f32";
        write_f32_file(dir / fname, mse);
        maps_index.push_back({{"key", key},
                              {"file", fname},
                              {"contents", "time_mean_squared_error"},
                              {"n_lat", truth.grid.n_lat},
                              {"n_lon", truth.grid.n_lon}});
    }
    {
        std::ofstream f(dir / "maps.json");
        f << maps_index.dump(2) << '\n';
    }
    {
        std::ofstream f(dir / "daily_sst.csv");
        f << "day,rmse\n";
        for (const auto& [day, rmse] : report.daily_sst) f << day << ',' << rmse << '\n';
    }
    if (!report.obs_rows.empty()) {
        std::ofstream f(dir / "obs_eval.csv");
        f << "lead_hours,rmse,n_cells\n";
        for (const auto& row : report.obs_rows)
            f << static_cast<int>(row[0]) * 6 << ',' << row[1] << ',' << static_cast<int>(row[2])
              << '\n';
    }
}

// ---------------------------------------------------------------------------
// Ablations: full, woMoT (unweighted mean of all candidates, no V updates),
// woMoT_2times (additionally N = 2 input steps / candidates).
// ---------------------------------------------------------------------------
enum class AblationVariant { Full, WoMot, WoMot2Times };

inline AblationVariant ablation_variant_from_string(const std::string& s) {
    if (s == "full") return AblationVariant::Full;
    if (s == "woMoT") return AblationVariant::WoMot;
    if (s == "woMoT_2times") return AblationVariant::WoMot2Times;
    throw ConfigError("unknown ablation variant: " + s);
}

inline std::string to_string(AblationVariant v) {
    switch (v) {
        case AblationVariant::Full: return "full";
        case AblationVariant::WoMot: return "woMoT";
        case AblationVariant::WoMot2Times: return "woMoT_2times";
    }
    return "?";
}

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    MetricTable table;  // RMSE vs lead, physical units
};

// Trains each (variant, seed) under the shared budget and evaluates RMSE by
// lead. The only differences between variants are the ablated elements.
inline std::vector<AblationRow> run_ablation(
    const SeriesStore& store, const NormStats& stats, NetConfig base_net, TrainConfig base_train,
    LossConfig lcfg, std::int64_t train_begin, std::int64_t train_end, std::int64_t eval_begin,
    std::int64_t eval_end, const std::vector<AblationVariant>& variants,
    const std::vector<std::uint64_t>& seeds, int eval_steps = 4, int max_inits = 8) {
    std::vector<AblationRow> rows;
    for (auto seed : seeds) {
        for (auto variant : variants) {
            NetConfig net = base_net;
            TrainConfig tc = base_train;
            tc.seed = seed;
            switch (variant) {
                case AblationVariant::Full:
                    tc.mot_enabled = true;
                    break;
                case AblationVariant::WoMot:
                    tc.mot_enabled = false;
                    break;
                case AblationVariant::WoMot2Times:
                    tc.mot_enabled = false;
                    net.n_steps = 2;
                    break;
            }
            TrainEngine engine(store, stats, net, tc, lcfg, train_begin, train_end);
            engine.run({});
            const Checkpoint cp = engine.make_checkpoint();
            Forecaster fc(cp, store);
            const auto inits = eval_inits(store, eval_begin, eval_end, eval_steps, 1, max_inits);
            EvalOptions opt;
            opt.steps = eval_steps;
            opt.with_obs = false;
            opt.map_leads = {};
            const auto report = evaluate(fc, store, inits, opt);
            rows.push_back({to_string(variant), seed, report.table});
        }
    }
    return rows;
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationRow>& rows, const ChannelLayout& layout,
                               const GridSpec& grid) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "variant,seed,variable,depth_m,lead_hours,rmse\n";
    for (const auto& row : rows)
        for (const auto& [key, val] : row.table.rmse) {
            const auto [c, lead] = key;
            const double depth = (layout.has_ssh && c == layout.ssh_channel())
                                     ? 0.0
                                     : grid.depth_levels[layout.depth_index(c)];
            f << row.variant << ',' << row.seed << ',' << layout.variable_name(c) << ',' << depth
              << ',' << lead * 6 << ',' << val << '\n';
        }
}

}  // namespace fuxio
