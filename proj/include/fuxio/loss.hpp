#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"
#include "fuxio/net_types.hpp"

namespace fuxio {

struct LossConfig {
    double epsilon = 1e-3;  // Charbonnier smoothing, normalized units
    int horizon = 4;        // multi-step finetune horizon (6-hour steps)
    double discount = 1.0;  // per-step discount in (0, 1]

    void validate() const {
        if (epsilon <= 0.0) throw ConfigError("Charbonnier epsilon must be > 0");
        if (horizon < 1) throw ConfigError("horizon must be >= 1");
        if (discount <= 0.0 || discount > 1.0) throw ConfigError("discount must be in (0,1]");
    }
};

// Latitude-weighted Charbonnier loss over ocean cells:
//   (1/N_ocean) * sum_c sum_ocean w_h * sqrt((pred-target)^2 + eps^2)
// The denominator counts ocean cells only (land cells carry no information and
// would otherwise add a mask-fraction-dependent eps floor). If grad_pred is
// non-null it receives dL/dpred (land entries zero).
inline double charbonnier_loss(const std::vector<double>& pred, const std::vector<double>& target,
                               const LatitudeWeights& weights, const LandSeaMask& mask,
                               const ChannelLayout& layout, double epsilon,
                               std::vector<double>* grad_pred = nullptr) {
    if (epsilon <= 0.0) throw ConfigError("Charbonnier epsilon must be > 0");
    if (pred.size() != target.size()) throw ShapeError("pred/target size mismatch");
    const int C = layout.total_channels();
    const int H = mask.n_lat, W = mask.n_lon;
    if (pred.size() != static_cast<size_t>(C) * H * W)
        throw ShapeError("field size does not match C*H*W");
    if (static_cast<int>(weights.weights.size()) != H)
        throw ShapeError("latitude weight length mismatch");
    if (grad_pred) grad_pred->assign(pred.size(), 0.0);

    double sum = 0.0;
    size_t n_ocean = 0;
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        for (int s = 0; s < H * W; ++s)
            if (m[s]) ++n_ocean;
    }
    if (n_ocean == 0) throw ConfigError("mask has no ocean cells");
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        const size_t base = static_cast<size_t>(c) * H * W;
        for (int h = 0; h < H; ++h) {
            const double wl = weights.weights[h];
            for (int w = 0; w < W; ++w) {
                const size_t s = static_cast<size_t>(h) * W + w;
                if (!m[s]) continue;
                const double d = pred[base + s] - target[base + s];
                const double r = std::sqrt(d * d + epsilon * epsilon);
                sum += wl * r;
                if (grad_pred) (*grad_pred)[base + s] = wl * d / r / n_ocean;
            }
        }
    }
    return sum / n_ocean;
}

// Discounted multi-step loss: (1/n) * sum_k discount^k * L_k.
inline double multi_step_loss(const std::vector<std::vector<double>>& preds,
                              const std::vector<std::vector<double>>& targets,
                              const LossConfig& cfg, const LatitudeWeights& weights,
                              const LandSeaMask& mask, const ChannelLayout& layout,
                              std::vector<std::vector<double>>* grads = nullptr) {
    cfg.validate();
    if (preds.size() != targets.size()) throw ShapeError("rollout pred/target length mismatch");
    if (preds.empty() || static_cast<int>(preds.size()) > cfg.horizon)
        throw ShapeError("rollout length must be in [1, horizon]");
    if (grads) grads->resize(preds.size());
    double total = 0.0;
    double disc = 1.0;
    for (size_t k = 0; k < preds.size(); ++k) {
        std::vector<double>* g = grads ? &(*grads)[k] : nullptr;
        total += disc * charbonnier_loss(preds[k], targets[k], weights, mask, layout, cfg.epsilon, g);
        if (g) {
            const double scale = disc / preds.size();
            for (double& v : *g) v *= scale;
        }
        disc *= cfg.discount;
    }
    return total / preds.size();
}

// ---------------------------------------------------------------------------
// Per-channel, per-candidate MAE over ocean cells (the AvgPool(MAE) statistic).
// ---------------------------------------------------------------------------
struct MaeMatrix {
    int C = 0, n = 0;
    std::vector<double> mae;          // C x n, row-major
    std::vector<std::uint8_t> valid;  // C, 0 for all-land channels

    double at(int c, int i) const { return mae[static_cast<size_t>(c) * n + i]; }
};

inline MaeMatrix channel_candidate_mae(const CandidateSet& candidates,
                                       const std::vector<double>& target,
                                       const LandSeaMask& mask, const ChannelLayout& layout) {
    const int C = candidates.C, H = candidates.H, W = candidates.W, n = candidates.n;
    if (target.size() != static_cast<size_t>(C) * H * W)
        throw ShapeError("target size does not match candidates");
    MaeMatrix out;
    out.C = C;
    out.n = n;
    out.mae.assign(static_cast<size_t>(C) * n, 0.0);
    out.valid.assign(C, 1);
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        size_t count = 0;
        for (int s = 0; s < H * W; ++s)
            if (m[s]) ++count;
        if (count == 0) {
            out.valid[c] = 0;
            continue;
        }
        const size_t base = static_cast<size_t>(c) * H * W;
        for (int i = 0; i < n; ++i) {
            const auto& cand = candidates.fields[i];
            double sum = 0.0;
            for (int s = 0; s < H * W; ++s)
                if (m[s]) sum += std::abs(cand[base + s] - target[base + s]);
            out.mae[static_cast<size_t>(c) * n + i] = sum / count;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Latitude-weighted RMSE table: per (channel, lead), sqrt taken per
// initialization, then averaged over initializations.
// ---------------------------------------------------------------------------
struct MetricTable {
    int C = 0;
    std::vector<int> leads;                      // 6-hour steps, ascending
    std::map<std::pair<int, int>, double> rmse;  // (channel, lead) -> value
    std::map<std::pair<int, int>, int> counts;   // number of initializations

    double at(int c, int lead) const {
        const auto it = rmse.find({c, lead});
        if (it == rmse.end()) throw ConfigError("no metric entry for requested (channel, lead)");
        return it->second;
    }
};

// One (pred, truth) pair per (t0, lead).
struct ForecastPair {
    int lead = 1;  // 6-hour steps
    const std::vector<double>* pred = nullptr;
    const std::vector<double>* truth = nullptr;
};

inline MetricTable latitude_rmse(const std::vector<ForecastPair>& pairs,
                                 const LatitudeWeights& weights, const LandSeaMask& mask,
                                 const ChannelLayout& layout) {
    if (pairs.empty()) throw ConfigError("no forecast/truth pairs to evaluate");
    const int C = layout.total_channels();
    const int H = mask.n_lat, W = mask.n_lon;
    MetricTable table;
    table.C = C;
    std::map<std::pair<int, int>, double> sums;
    for (const auto& p : pairs) {
        if (p.pred->size() != static_cast<size_t>(C) * H * W || p.pred->size() != p.truth->size())
            throw ShapeError("forecast/truth size mismatch");
        for (int c = 0; c < C; ++c) {
            const auto& m = mask.for_channel(layout, c);
            const size_t base = static_cast<size_t>(c) * H * W;
            double ss = 0.0;
            size_t n = 0;
            for (int h = 0; h < H; ++h) {
                const double wl = weights.weights[h];
                for (int w = 0; w < W; ++w) {
                    const size_t s = static_cast<size_t>(h) * W + w;
                    if (!m[s]) continue;
                    const double d = (*p.pred)[base + s] - (*p.truth)[base + s];
                    ss += wl * d * d;
                    ++n;
                }
            }
            if (n == 0) continue;
            sums[{c, p.lead}] += std::sqrt(ss / n);
            table.counts[{c, p.lead}] += 1;
        }
    }
    for (const auto& [key, sum] : sums) table.rmse[key] = sum / table.counts[key];
    for (const auto& p : pairs)
        if (std::find(table.leads.begin(), table.leads.end(), p.lead) == table.leads.end())
            table.leads.push_back(p.lead);
    std::sort(table.leads.begin(), table.leads.end());
    return table;
}

inline void write_rmse_csv(const std::filesystem::path& path, const MetricTable& table,
                           const ChannelLayout& layout, const GridSpec& grid) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "variable,depth_m,lead_hours,rmse,n_inits\n";
    for (const auto& [key, val] : table.rmse) {
        const auto [c, lead] = key;
        const double depth = (layout.has_ssh && c == layout.ssh_channel())
                                 ? 0.0
                                 : grid.depth_levels[layout.depth_index(c)];
        f << layout.variable_name(c) << ',' << depth << ',' << lead * 6 << ',' << val << ','
          << table.counts.at(key) << '\n';
    }
}

}  // namespace fuxio
