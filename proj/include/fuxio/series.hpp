#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"

namespace fuxio {

// ---------------------------------------------------------------------------
// SeriesStore: an in-memory 6-hourly series plus its grid/layout/mask.
// On disk: grid.json + mask.u8 + state_<ISO8601>.f32 (row-major f32 LE,
// channel-major). Values are quantized to f32 at generation so that
// ingest(export(S)) == S bitwise.
// ---------------------------------------------------------------------------
struct SeriesStore {
    GridSpec grid;
    ChannelLayout layout;
    LandSeaMask mask;
    std::vector<std::int64_t> timestamps;    // strictly increasing, uniform 6 h
    std::vector<std::vector<double>> steps;  // each C*H*W

    int C() const { return layout.total_channels(); }
    int H() const { return grid.n_lat; }
    int W() const { return grid.n_lon; }

    std::optional<size_t> index_of(std::int64_t t) const {
        if (timestamps.empty() || t < timestamps.front() || t > timestamps.back()) return {};
        const auto d = t - timestamps.front();
        if (d % kStepSeconds != 0) return {};
        const size_t i = static_cast<size_t>(d / kStepSeconds);
        return i < timestamps.size() ? std::optional<size_t>(i) : std::nullopt;
    }

    void validate() const {
        grid.validate();
        mask.validate();
        if (timestamps.size() != steps.size()) throw ShapeError("timestamp/step count mismatch");
        for (size_t i = 1; i < timestamps.size(); ++i)
            if (timestamps[i] - timestamps[i - 1] != kStepSeconds)
                throw ConfigError("timestamps must be uniformly 6-hourly");
        const size_t n = static_cast<size_t>(C()) * H() * W();
        for (const auto& s : steps)
            if (s.size() != n) throw ShapeError("step value count does not match C*H*W");
    }
};

// ---------------------------------------------------------------------------
// Synthetic dynamics
// ---------------------------------------------------------------------------
enum class DynamicKind { Diurnal, SlowAr, AdvectedEddy, LaggedCopy };

inline DynamicKind dynamic_kind_from_string(const std::string& s) {
    if (s == "diurnal") return DynamicKind::Diurnal;
    if (s == "slow_ar") return DynamicKind::SlowAr;
    if (s == "advected_eddy") return DynamicKind::AdvectedEddy;
    if (s == "lagged_copy") return DynamicKind::LaggedCopy;
    throw ConfigError("unknown dynamic kind: " + s);
}

inline std::string to_string(DynamicKind k) {
    switch (k) {
        case DynamicKind::Diurnal: return "diurnal";
        case DynamicKind::SlowAr: return "slow_ar";
        case DynamicKind::AdvectedEddy: return "advected_eddy";
        case DynamicKind::LaggedCopy: return "lagged_copy";
    }
    return "?";
}

struct ChannelDynamics {
    DynamicKind kind = DynamicKind::SlowAr;
    double amplitude = 1.0;
    int lag = 1;  // lagged_copy only, in {1,2,3,4}
};

struct SyntheticRecipe {
    std::vector<ChannelDynamics> channels;  // one per layout channel
    double noise_level = 0.0;
    std::uint64_t seed = 0;

    void validate(const ChannelLayout& layout) const {
        if (static_cast<int>(channels.size()) != layout.total_channels())
            throw ConfigError("recipe channel count does not match layout");
        for (const auto& ch : channels)
            if (ch.kind == DynamicKind::LaggedCopy && (ch.lag < 1 || ch.lag > 4))
                throw ConfigError("lagged_copy lag must be in {1,2,3,4}");
    }
};

// Smooth random field: a handful of low-wavenumber Fourier modes, periodic in
// longitude, scaled to the requested RMS.
inline std::vector<double> smooth_field(std::mt19937_64& rng, int H, int W, double rms) {
    constexpr int kModes = 6;
    std::vector<double> f(static_cast<size_t>(H) * W, 0.0);
    std::uniform_int_distribution<int> kdist(-3, 3);
    std::uniform_real_distribution<double> pdist(0.0, 2.0 * M_PI);
    std::normal_distribution<double> adist(0.0, 1.0);
    for (int m = 0; m < kModes; ++m) {
        const int k1 = kdist(rng), k2 = kdist(rng);
        const double phi = pdist(rng), a = adist(rng);
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                f[static_cast<size_t>(h) * W + w] +=
                    a * std::sin(2.0 * M_PI * (k1 * double(h) / H + k2 * double(w) / W) + phi);
    }
    double ss = 0.0;
    for (double v : f) ss += v * v;
    const double cur = std::sqrt(ss / f.size());
    const double scale = cur > 1e-12 ? rms / cur : 0.0;
    for (double& v : f) v *= scale;
    return f;
}

// Deterministic synthetic series. Per-channel dynamics:
//   diurnal       base + A*sin(2*pi*t/4 + phase(h,w)), exact period 4 at noise 0
//   slow_ar       x <- 0.97 x + 0.2*A*innovation
//   advected_eddy Gaussian blobs advected by a fixed solenoidal flow, lon wrap
//   lagged_copy   x^{t} = 0.95 * x^{t-L} + noise*A*innovation
// Measurement noise (noise_level*A*smooth) is added to diurnal/eddy channels.
inline SeriesStore generate_synthetic(const SyntheticRecipe& recipe, const GridSpec& grid,
                                      const ChannelLayout& layout, const LandSeaMask& mask,
                                      int n_steps, std::int64_t t0 = 0) {
    if (n_steps < 6) throw ConfigError("n_steps must be >= 6");
    recipe.validate(layout);
    grid.validate();
    const int H = grid.n_lat, W = grid.n_lon, C = layout.total_channels();
    const size_t plane = static_cast<size_t>(H) * W;

    SeriesStore store;
    store.grid = grid;
    store.layout = layout;
    store.mask = mask;
    store.timestamps.resize(n_steps);
    for (int t = 0; t < n_steps; ++t) store.timestamps[t] = t0 + t * kStepSeconds;
    store.steps.assign(n_steps, std::vector<double>(static_cast<size_t>(C) * plane, 0.0));

    std::mt19937_64 rng(recipe.seed);
    for (int c = 0; c < C; ++c) {
        const auto& dyn = recipe.channels[c];
        const double A = dyn.amplitude;
        std::vector<std::vector<double>> series(n_steps);
        switch (dyn.kind) {
            case DynamicKind::Diurnal: {
                const auto base = smooth_field(rng, H, W, A);
                const auto phase = smooth_field(rng, H, W, 2.0);
                for (int t = 0; t < n_steps; ++t) {
                    series[t].resize(plane);
                    for (size_t s = 0; s < plane; ++s)
                        series[t][s] = base[s] + A * std::sin(2.0 * M_PI * t / 4.0 + phase[s]);
                    if (recipe.noise_level > 0.0) {
                        const auto n = smooth_field(rng, H, W, recipe.noise_level * A);
                        for (size_t s = 0; s < plane; ++s) series[t][s] += n[s];
                    }
                }
                break;
            }
            case DynamicKind::SlowAr: {
                auto x = smooth_field(rng, H, W, A);
                for (int t = 0; t < n_steps; ++t) {
                    series[t] = x;
                    const auto drive = smooth_field(rng, H, W, 0.2 * A);
                    for (size_t s = 0; s < plane; ++s) x[s] = 0.97 * x[s] + drive[s];
                }
                break;
            }
            case DynamicKind::AdvectedEddy: {
                constexpr int kBlobs = 5;
                const auto psi = smooth_field(rng, H, W, 1.0);  // streamfunction
                struct Blob {
                    double h, w, amp, sigma;
                };
                std::vector<Blob> blobs(kBlobs);
                std::uniform_real_distribution<double> uh(0.0, double(H)), uw(0.0, double(W));
                std::uniform_real_distribution<double> ua(-1.0, 1.0);
                for (auto& b : blobs)
                    b = {uh(rng), uw(rng), A * (ua(rng) > 0 ? 1.0 : -1.0), std::max(2.0, H / 8.0)};
                auto vel_at = [&](double h, double w, double& vh, double& vw) {
                    const int ih = std::clamp(static_cast<int>(h), 0, H - 1);
                    const int iw = ((static_cast<int>(w) % W) + W) % W;
                    const auto p = [&](int dh, int dw) {
                        return psi[static_cast<size_t>(std::clamp(ih + dh, 0, H - 1)) * W +
                                   (((iw + dw) % W) + W) % W];
                    };
                    vh = 0.5 * (p(0, 1) - p(0, -1));
                    vw = -0.5 * (p(1, 0) - p(-1, 0));
                };
                for (int t = 0; t < n_steps; ++t) {
                    series[t].assign(plane, 0.0);
                    for (const auto& b : blobs) {
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) {
                                const double dh = h - b.h;
                                double dw = std::fmod(w - b.w + 1.5 * W, double(W)) - 0.5 * W;
                                series[t][static_cast<size_t>(h) * W + w] +=
                                    b.amp * std::exp(-(dh * dh + dw * dw) / (2.0 * b.sigma * b.sigma));
                            }
                    }
                    if (recipe.noise_level > 0.0) {
                        const auto n = smooth_field(rng, H, W, recipe.noise_level * A);
                        for (size_t s = 0; s < plane; ++s) series[t][s] += n[s];
                    }
                    for (auto& b : blobs) {
                        double vh, vw;
                        vel_at(b.h, b.w, vh, vw);
                        b.h = std::clamp(b.h + 2.0 * vh, 0.0, H - 1.0);
                        b.w = std::fmod(b.w + 2.0 * vw + W, double(W));
                    }
                }
                break;
            }
            case DynamicKind::LaggedCopy: {
                const int L = dyn.lag;
                for (int t = 0; t < n_steps; ++t) {
                    if (t < L) {
                        series[t] = smooth_field(rng, H, W, A);
                    } else {
                        series[t].resize(plane);
                        for (size_t s = 0; s < plane; ++s) series[t][s] = 0.95 * series[t - L][s];
                        if (recipe.noise_level > 0.0) {
                            const auto n = smooth_field(rng, H, W, recipe.noise_level * A);
                            for (size_t s = 0; s < plane; ++s) series[t][s] += n[s];
                        }
                    }
                }
                break;
            }
        }
        for (int t = 0; t < n_steps; ++t) {
            double* dst = &store.steps[t][static_cast<size_t>(c) * plane];
            for (size_t s = 0; s < plane; ++s)
                dst[s] = static_cast<double>(static_cast<float>(series[t][s]));  // f32 quantize
        }
    }
    return store;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------
struct NormStats {
    std::vector<double> mean;  // per channel, ocean cells of the training range only
    std::vector<double> stddev;
};

inline NormStats compute_norm_stats(const SeriesStore& store, std::int64_t t_begin,
                                    std::int64_t t_end) {
    if (t_end < t_begin) throw ConfigError("empty training range for normalization");
    const int C = store.C(), H = store.H(), W = store.W();
    const size_t plane = static_cast<size_t>(H) * W;
    NormStats st;
    st.mean.assign(C, 0.0);
    st.stddev.assign(C, 0.0);
    for (int c = 0; c < C; ++c) {
        const auto& m = store.mask.for_channel(store.layout, c);
        double sum = 0.0;
        size_t n = 0;
        for (size_t t = 0; t < store.timestamps.size(); ++t) {
            if (store.timestamps[t] < t_begin || store.timestamps[t] > t_end) continue;
            const double* v = &store.steps[t][static_cast<size_t>(c) * plane];
            for (size_t s = 0; s < plane; ++s)
                if (m[s]) {
                    sum += v[s];
                    ++n;
                }
        }
        if (n == 0) throw ConfigError("normalization range contains no samples");
        const double mean = sum / n;
        double ss = 0.0;
        for (size_t t = 0; t < store.timestamps.size(); ++t) {
            if (store.timestamps[t] < t_begin || store.timestamps[t] > t_end) continue;
            const double* v = &store.steps[t][static_cast<size_t>(c) * plane];
            for (size_t s = 0; s < plane; ++s)
                if (m[s]) ss += (v[s] - mean) * (v[s] - mean);
        }
        const double sd = std::sqrt(ss / n);
        if (sd < 1e-12)
            throw ConfigError("degenerate channel (zero variance): " +
                              store.layout.variable_name(c));
        st.mean[c] = mean;
        st.stddev[c] = sd;
    }
    return st;
}

inline nlohmann::json norm_stats_to_json(const NormStats& st) {
    return {{"mean", st.mean}, {"stddev", st.stddev}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats st;
    st.mean = j.at("mean").get<std::vector<double>>();
    st.stddev = j.at("stddev").get<std::vector<double>>();
    return st;
}

// ---------------------------------------------------------------------------
// Sample windows: N=4 consecutive normalized inputs + the next-step target.
// inputs are chronological: inputs[0] = X^{t-18h} ... inputs[3] = X^{t}.
// ---------------------------------------------------------------------------
constexpr int kInputSteps = 4;

struct SampleWindow {
    std::array<std::vector<double>, kInputSteps> inputs;
    std::vector<double> target;
    std::int64_t t = 0;  // timestamp of the newest input
};

// Normalize one raw step and zero-fill land cells (fill = per-channel mean).
inline std::vector<double> normalize_step(const std::vector<double>& raw, const SeriesStore& store,
                                          const NormStats& stats) {
    const int C = store.C();
    const size_t plane = static_cast<size_t>(store.H()) * store.W();
    std::vector<double> out(raw.size());
    for (int c = 0; c < C; ++c) {
        const auto& m = store.mask.for_channel(store.layout, c);
        const double* src = &raw[static_cast<size_t>(c) * plane];
        double* dst = &out[static_cast<size_t>(c) * plane];
        for (size_t s = 0; s < plane; ++s)
            dst[s] = m[s] ? (src[s] - stats.mean[c]) / stats.stddev[c] : kLandFill;
    }
    return out;
}

inline std::vector<double> denormalize_step(const std::vector<double>& norm,
                                            const SeriesStore& store, const NormStats& stats) {
    const int C = store.C();
    const size_t plane = static_cast<size_t>(store.H()) * store.W();
    std::vector<double> out(norm.size());
    for (int c = 0; c < C; ++c) {
        const double* src = &norm[static_cast<size_t>(c) * plane];
        double* dst = &out[static_cast<size_t>(c) * plane];
        for (size_t s = 0; s < plane; ++s) dst[s] = src[s] * stats.stddev[c] + stats.mean[c];
    }
    return out;
}

inline SampleWindow make_window(const SeriesStore& store, const NormStats& stats, std::int64_t t) {
    SampleWindow w;
    w.t = t;
    for (int k = 0; k < kInputSteps + 1; ++k) {
        const std::int64_t ts = t + (k - (kInputSteps - 1)) * kStepSeconds;
        const auto idx = store.index_of(ts);
        if (!idx) throw DataGapError("missing timestep " + format_timestamp(ts));
        auto norm = normalize_step(store.steps[*idx], store, stats);
        if (k < kInputSteps)
            w.inputs[k] = std::move(norm);
        else
            w.target = std::move(norm);
    }
    return w;
}

// ---------------------------------------------------------------------------
// Export / ingest
// ---------------------------------------------------------------------------
inline void write_f32_file(const std::filesystem::path& path, const std::vector<double>& values) {
    std::vector<float> buf(values.size());
    for (size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw IoError("short write: " + path.string());
}

inline std::vector<double> read_f32_file(const std::filesystem::path& path, size_t expected) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path.string());
    const auto size = static_cast<size_t>(f.tellg());
    if (size != expected * sizeof(float))
        throw IoError("file " + path.filename().string() + " has size " + std::to_string(size) +
                      ", expected " + std::to_string(expected * sizeof(float)));
    std::vector<float> buf(expected);
    f.seekg(0);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    if (!f) throw IoError("short read: " + path.string());
    std::vector<double> out(expected);
    for (size_t i = 0; i < expected; ++i) out[i] = static_cast<double>(buf[i]);
    return out;
}

inline void export_store(const SeriesStore& store, const std::filesystem::path& dir,
                         bool force = false) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw IoError("output directory exists and is not empty (use --force): " + dir.string());
    fs::create_directories(dir);
    auto j = grid_to_json(store.grid, store.layout, "mask.u8");
    std::vector<std::string> ts;
    ts.reserve(store.timestamps.size());
    for (auto t : store.timestamps) ts.push_back(format_timestamp(t));
    j["timestamps"] = ts;
    std::ofstream meta(dir / "grid.json");
    if (!meta) throw IoError("cannot write grid.json");
    meta << j.dump(2) << '\n';
    write_mask_file(dir / "mask.u8", store.mask);
    for (size_t t = 0; t < store.steps.size(); ++t)
        write_f32_file(dir / ("state_" + format_timestamp(store.timestamps[t]) + ".f32"),
                       store.steps[t]);
}

inline SeriesStore ingest_raw(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const auto meta_path = dir / "grid.json";
    std::ifstream meta(meta_path);
    if (!meta) throw IoError("missing metadata: " + meta_path.string());
    nlohmann::json j;
    try {
        meta >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed grid.json: " + std::string(e.what()));
    }
    SeriesStore store;
    try {
        const auto& jg = j.at("grid");
        store.grid.n_lat = jg.at("n_lat").get<int>();
        store.grid.n_lon = jg.at("n_lon").get<int>();
        store.grid.latitudes = jg.at("latitudes_deg").get<std::vector<double>>();
        store.grid.longitudes = jg.at("longitudes_deg").get<std::vector<double>>();
        store.grid.depth_levels = jg.at("depth_levels_m").get<std::vector<double>>();
        const auto& jl = j.at("layout");
        store.layout = build_channel_layout(jl.at("variables").get<std::vector<std::string>>(),
                                            jl.at("n_depths").get<int>(),
                                            jl.at("has_ssh").get<bool>());
        store.grid.validate();
        store.mask = read_mask_file(dir / j.at("mask").at("file").get<std::string>(),
                                    store.grid.n_lat, store.grid.n_lon,
                                    static_cast<int>(store.grid.depth_levels.size()));
        for (const auto& ts : j.at("timestamps"))
            store.timestamps.push_back(parse_timestamp(ts.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed grid.json: " + std::string(e.what()));
    }
    for (size_t i = 1; i < store.timestamps.size(); ++i)
        if (store.timestamps[i] - store.timestamps[i - 1] != kStepSeconds)
            throw IoError("non-6-hourly spacing at state_" +
                          format_timestamp(store.timestamps[i]) + ".f32");
    const size_t n = static_cast<size_t>(store.C()) * store.H() * store.W();
    for (auto t : store.timestamps)
        store.steps.push_back(read_f32_file(dir / ("state_" + format_timestamp(t) + ".f32"), n));
    store.validate();
    return store;
}

}  // namespace fuxio
