#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"
#include "fuxio/loss.hpp"
#include "fuxio/net_types.hpp"

namespace fuxio {

// ---------------------------------------------------------------------------
// SelectionMatrix V (C x n): row-stochastic reliability statistic over the n
// temporal windows. Smaller entries mark more reliable windows. Updated by an
// EMA of the softmax-normalized per-channel MAE; not a trained parameter.
// ---------------------------------------------------------------------------
struct SelectionMatrix {
    int C = 0;
    int n = 4;
    double alpha = 0.99;  // EMA momentum
    int K = 1;            // selected windows per channel
    std::vector<double> values;  // C x n, row-major

    static SelectionMatrix uniform(int C, int n = 4, double alpha = 0.99, int K = 1) {
        if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("MoT alpha must be in (0,1)");
        if (K < 1 || K > n) throw ConfigError("MoT K must be in [1, n]");
        SelectionMatrix v;
        v.C = C;
        v.n = n;
        v.alpha = alpha;
        v.K = K;
        v.values.assign(static_cast<size_t>(C) * n, 1.0 / n);
        return v;
    }

    double at(int c, int i) const { return values[static_cast<size_t>(c) * n + i]; }

    int argmin_row(int c) const {
        const double* row = &values[static_cast<size_t>(c) * n];
        return static_cast<int>(std::min_element(row, row + n) - row);
    }
};

// Per-channel indicator of the K smallest V entries. Ties break toward
// smaller i (more recent context).
struct TopKSelector {
    int C = 0, n = 4, K = 1;
    std::vector<std::uint8_t> ones;  // C x n
};

inline TopKSelector topk_select(const SelectionMatrix& V) {
    TopKSelector sel;
    sel.C = V.C;
    sel.n = V.n;
    sel.K = V.K;
    sel.ones.assign(static_cast<size_t>(V.C) * V.n, 0);
    std::vector<int> order(V.n);
    for (int c = 0; c < V.C; ++c) {
        const double* row = &V.values[static_cast<size_t>(c) * V.n];
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return row[a] < row[b]; });
        for (int k = 0; k < V.K; ++k) sel.ones[static_cast<size_t>(c) * V.n + order[k]] = 1;
    }
    return sel;
}

// Per-channel mean of the K selected candidates; land cells re-filled.
inline std::vector<double> merge_candidates(const CandidateSet& candidates,
                                            const TopKSelector& selector, int K,
                                            const LandSeaMask& mask, const ChannelLayout& layout) {
    const int C = candidates.C, H = candidates.H, W = candidates.W;
    if (selector.C != C || selector.n != candidates.n) throw ShapeError("selector shape mismatch");
    for (int c = 0; c < C; ++c) {
        int count = 0;
        for (int i = 0; i < selector.n; ++i) count += selector.ones[static_cast<size_t>(c) * selector.n + i];
        if (count != K)
            throw ConfigError("selector row " + std::to_string(c) + " has " +
                              std::to_string(count) + " ones, expected " + std::to_string(K));
    }
    std::vector<double> out(static_cast<size_t>(C) * H * W, 0.0);
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        const size_t base = static_cast<size_t>(c) * H * W;
        for (int i = 0; i < selector.n; ++i) {
            if (!selector.ones[static_cast<size_t>(c) * selector.n + i]) continue;
            const auto& cand = candidates.fields[i];
            for (int s = 0; s < H * W; ++s) out[base + s] += cand[base + s];
        }
        for (int s = 0; s < H * W; ++s) out[base + s] = m[s] ? out[base + s] / K : kLandFill;
    }
    return out;
}

// Distribute a gradient on the merged field back onto the selected candidates.
inline void merge_backward(const TopKSelector& selector, int K, const LandSeaMask& mask,
                           const ChannelLayout& layout, const std::vector<double>& grad_merged,
                           CandidateSet& grad_candidates) {
    const int C = grad_candidates.C, H = grad_candidates.H, W = grad_candidates.W;
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        const size_t base = static_cast<size_t>(c) * H * W;
        for (int i = 0; i < selector.n; ++i) {
            if (!selector.ones[static_cast<size_t>(c) * selector.n + i]) continue;
            auto& g = grad_candidates.fields[i];
            for (int s = 0; s < H * W; ++s)
                if (m[s]) g[base + s] += grad_merged[base + s] / K;
        }
    }
}

// EMA update from a per-channel MAE row: softmax across the n windows, then
// V_row <- alpha * V_row + (1-alpha) * softmax_row. All-land channels are
// skipped (no valid error statistic).
inline SelectionMatrix update_selection(const SelectionMatrix& V, const MaeMatrix& mae) {
    if (mae.C != V.C || mae.n != V.n) throw ShapeError("MAE matrix shape mismatch");
    SelectionMatrix out = V;
    std::vector<double> sm(V.n);
    for (int c = 0; c < V.C; ++c) {
        if (!mae.valid[c]) continue;
        const double* row = &mae.mae[static_cast<size_t>(c) * V.n];
        const double mx = *std::max_element(row, row + V.n);
        double z = 0.0;
        for (int i = 0; i < V.n; ++i) {
            sm[i] = std::exp(row[i] - mx);
            z += sm[i];
        }
        double* dst = &out.values[static_cast<size_t>(c) * V.n];
        for (int i = 0; i < V.n; ++i) dst[i] = V.alpha * dst[i] + (1.0 - V.alpha) * sm[i] / z;
    }
    return out;
}

inline SelectionMatrix update_selection(const SelectionMatrix& V, const CandidateSet& candidates,
                                        const std::vector<double>& target, const LandSeaMask& mask,
                                        const ChannelLayout& layout) {
    return update_selection(V, channel_candidate_mae(candidates, target, mask, layout));
}

inline void write_selection_csv(const std::filesystem::path& path, const SelectionMatrix& V,
                                const ChannelLayout& layout, const GridSpec& grid) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "channel,variable,depth_m";
    for (int i = 0; i < V.n; ++i) f << ",i" << i;
    f << '\n';
    for (int c = 0; c < V.C; ++c) {
        const double depth = (layout.has_ssh && c == layout.ssh_channel())
                                 ? 0.0
                                 : grid.depth_levels[layout.depth_index(c)];
        f << c << ',' << layout.variable_name(c) << ',' << depth;
        for (int i = 0; i < V.n; ++i) f << ',' << V.at(c, i);
        f << '\n';
    }
}

}  // namespace fuxio
