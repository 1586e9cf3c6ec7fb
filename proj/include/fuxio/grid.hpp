#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"

namespace fuxio {

// ---------------------------------------------------------------------------
// GridSpec: regular lat/lon grid plus depth levels.
// ---------------------------------------------------------------------------
struct GridSpec {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> latitudes;     // degrees, strictly monotonic, |lat| < 90
    std::vector<double> longitudes;    // degrees
    std::vector<double> depth_levels;  // meters, ascending, first element 0

    void validate() const {
        if (n_lat <= 0 || n_lon <= 0) throw ConfigError("grid dimensions must be positive");
        if (static_cast<int>(latitudes.size()) != n_lat ||
            static_cast<int>(longitudes.size()) != n_lon) {
            throw ShapeError("latitude/longitude list length does not match grid dimensions");
        }
        const bool asc = latitudes.size() < 2 || latitudes[1] > latitudes[0];
        for (size_t i = 0; i < latitudes.size(); ++i) {
            if (std::abs(latitudes[i]) >= 90.0)
                throw ConfigError("latitudes must lie strictly within (-90, 90)");
            if (i > 0 && (asc ? latitudes[i] <= latitudes[i - 1] : latitudes[i] >= latitudes[i - 1]))
                throw ConfigError("latitudes must be strictly monotonic");
        }
        if (depth_levels.empty() || depth_levels.front() != 0.0)
            throw ConfigError("depth_levels must be nonempty with first element 0");
        for (size_t i = 1; i < depth_levels.size(); ++i)
            if (depth_levels[i] <= depth_levels[i - 1])
                throw ConfigError("depth_levels must be strictly increasing");
    }

    // Equally spaced grid spanning [lat_min, lat_max] x [lon_min, lon_max) with cell centers.
    static GridSpec regular(int n_lat, int n_lon, std::vector<double> depths,
                            double lat_min = -89.25, double lat_max = 89.25, double lon_min = 0.0,
                            double lon_max = 360.0) {
        GridSpec g;
        g.n_lat = n_lat;
        g.n_lon = n_lon;
        g.latitudes.resize(n_lat);
        for (int i = 0; i < n_lat; ++i)
            g.latitudes[i] = lat_min + (lat_max - lat_min) * (n_lat == 1 ? 0.5 : double(i) / (n_lat - 1));
        g.longitudes.resize(n_lon);
        for (int j = 0; j < n_lon; ++j) g.longitudes[j] = lon_min + (lon_max - lon_min) * j / n_lon;
        g.depth_levels = std::move(depths);
        g.validate();
        return g;
    }
};

// ---------------------------------------------------------------------------
// ChannelLayout: bijection (variable, depth) <-> flat channel index, SSH last.
// ---------------------------------------------------------------------------
struct ChannelLayout {
    std::vector<std::string> variables;  // 3D variables, each with n_depths levels
    int n_depths = 0;
    bool has_ssh = false;

    int total_channels() const {
        return static_cast<int>(variables.size()) * n_depths + (has_ssh ? 1 : 0);
    }
    int ssh_channel() const { return static_cast<int>(variables.size()) * n_depths; }

    int channel_of(int var_index, int depth_index) const {
        return var_index * n_depths + depth_index;
    }
    int channel_of(const std::string& var, int depth_index) const {
        for (size_t p = 0; p < variables.size(); ++p)
            if (variables[p] == var) return channel_of(static_cast<int>(p), depth_index);
        if (has_ssh && var == "SSH") return ssh_channel();
        throw ConfigError("unknown variable: " + var);
    }

    // (var_index, depth_index); SSH decodes to (|variables|, 0).
    std::pair<int, int> decode(int channel) const {
        if (channel < 0 || channel >= total_channels()) throw ConfigError("channel out of range");
        if (has_ssh && channel == ssh_channel()) return {static_cast<int>(variables.size()), 0};
        return {channel / n_depths, channel % n_depths};
    }

    std::string variable_name(int channel) const {
        auto [p, d] = decode(channel);
        return p == static_cast<int>(variables.size()) ? "SSH" : variables[p];
    }
    int depth_index(int channel) const { return decode(channel).second; }
};

inline ChannelLayout build_channel_layout(std::vector<std::string> variables, int n_depths,
                                          bool has_ssh) {
    if (variables.empty()) throw ConfigError("variable list must be nonempty");
    if (n_depths < 1) throw ConfigError("n_depths must be >= 1");
    std::unordered_set<std::string> seen;
    for (const auto& v : variables)
        if (!seen.insert(v).second) throw ConfigError("duplicate variable name: " + v);
    ChannelLayout layout;
    layout.variables = std::move(variables);
    layout.n_depths = n_depths;
    layout.has_ssh = has_ssh;
    return layout;
}

// ---------------------------------------------------------------------------
// LandSeaMask: 1 = ocean, 0 = land; optional per-depth-level masks.
// ---------------------------------------------------------------------------
struct LandSeaMask {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<std::uint8_t> surface;               // H*W
    std::vector<std::vector<std::uint8_t>> levels;   // optional, one H*W field per depth level

    void validate() const {
        if (static_cast<int>(surface.size()) != n_lat * n_lon)
            throw ShapeError("mask size does not match grid");
        bool any_ocean = false;
        for (auto v : surface) {
            if (v != 0 && v != 1) throw ConfigError("mask values must be exactly 0 or 1");
            any_ocean |= (v == 1);
        }
        if (!any_ocean) throw ConfigError("mask has no ocean cells");
        for (const auto& lv : levels) {
            if (lv.size() != surface.size()) throw ShapeError("depth-level mask size mismatch");
            for (auto v : lv)
                if (v != 0 && v != 1) throw ConfigError("mask values must be exactly 0 or 1");
        }
    }

    // Mask for a depth level; defaults to the surface mask when no per-level masks exist.
    const std::vector<std::uint8_t>& level(int depth_index) const {
        if (levels.empty()) return surface;
        if (depth_index < 0 || depth_index >= static_cast<int>(levels.size()))
            throw ConfigError("depth index out of range for mask");
        return levels[depth_index];
    }

    const std::vector<std::uint8_t>& for_channel(const ChannelLayout& layout, int channel) const {
        if (layout.has_ssh && channel == layout.ssh_channel()) return level(0);
        return level(layout.depth_index(channel));
    }

    static LandSeaMask all_ocean(int n_lat, int n_lon) {
        LandSeaMask m;
        m.n_lat = n_lat;
        m.n_lon = n_lon;
        m.surface.assign(static_cast<size_t>(n_lat) * n_lon, 1);
        return m;
    }
};

// ---------------------------------------------------------------------------
// OceanState: one time step, C x H x W, physical or normalized units.
// ---------------------------------------------------------------------------
struct OceanState {
    int C = 0, H = 0, W = 0;
    std::int64_t timestamp = 0;  // unix seconds, multiple of 6 h
    std::vector<double> values;  // channel-major

    OceanState() = default;
    OceanState(int c, int h, int w, std::int64_t ts)
        : C(c), H(h), W(w), timestamp(ts), values(static_cast<size_t>(c) * h * w, 0.0) {
        if (ts % kStepSeconds != 0) throw ConfigError("timestamp must align to a 6-hour boundary");
    }

    double& at(int c, int h, int w) { return values[(static_cast<size_t>(c) * H + h) * W + w]; }
    double at(int c, int h, int w) const {
        return values[(static_cast<size_t>(c) * H + h) * W + w];
    }
};

constexpr double kLandFill = 0.0;  // in normalized units: the per-channel mean

inline OceanState apply_mask(const OceanState& state, const LandSeaMask& mask,
                             const ChannelLayout& layout, double fill = kLandFill) {
    if (mask.n_lat != state.H || mask.n_lon != state.W)
        throw ShapeError("mask dimensions do not match state");
    OceanState out = state;
    for (int c = 0; c < state.C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        double* v = &out.values[static_cast<size_t>(c) * state.H * state.W];
        for (int s = 0; s < state.H * state.W; ++s)
            if (!m[s]) v[s] = fill;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Latitude weights: w_i = H * cos(phi_i) / sum_j cos(phi_j), sum w = H.
// ---------------------------------------------------------------------------
struct LatitudeWeights {
    std::vector<double> weights;  // length H
};

inline LatitudeWeights latitude_weights(const std::vector<double>& latitudes) {
    if (latitudes.empty()) throw ConfigError("latitude list must be nonempty");
    const double deg = M_PI / 180.0;
    std::vector<double> cosv(latitudes.size());
    double sum = 0.0;
    for (size_t i = 0; i < latitudes.size(); ++i) {
        if (std::abs(latitudes[i]) >= 90.0)
            throw ConfigError("latitude out of domain: grid centers must satisfy |lat| < 90");
        cosv[i] = std::cos(latitudes[i] * deg);
        sum += cosv[i];
    }
    LatitudeWeights lw;
    lw.weights.resize(latitudes.size());
    const double h = static_cast<double>(latitudes.size());
    for (size_t i = 0; i < latitudes.size(); ++i) lw.weights[i] = h * cosv[i] / sum;
    return lw;
}

inline LatitudeWeights uniform_weights(int n_lat) {
    LatitudeWeights lw;
    lw.weights.assign(n_lat, 1.0);
    return lw;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization: grid.json + row-major u8 mask payload.
// ---------------------------------------------------------------------------
inline nlohmann::json grid_to_json(const GridSpec& grid, const ChannelLayout& layout,
                                   const std::string& mask_file) {
    nlohmann::json j;
    j["grid"] = {{"n_lat", grid.n_lat},
                 {"n_lon", grid.n_lon},
                 {"latitudes_deg", grid.latitudes},
                 {"longitudes_deg", grid.longitudes},
                 {"depth_levels_m", grid.depth_levels}};
    j["layout"] = {{"variables", layout.variables},
                   {"n_depths", layout.n_depths},
                   {"has_ssh", layout.has_ssh}};
    j["mask"] = {{"file", mask_file}, {"encoding", "u8_row_major"}};
    j["units"] = {{"T", "degC"}, {"S", "psu"}, {"U", "m/s"}, {"V", "m/s"}, {"SSH", "m"}};
    return j;
}

inline void write_mask_file(const std::filesystem::path& path, const LandSeaMask& mask) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open mask file for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(mask.surface.data()),
            static_cast<std::streamsize>(mask.surface.size()));
    for (const auto& lv : mask.levels)
        f.write(reinterpret_cast<const char*>(lv.data()), static_cast<std::streamsize>(lv.size()));
    if (!f) throw IoError("short write to mask file: " + path.string());
}

inline LandSeaMask read_mask_file(const std::filesystem::path& path, int n_lat, int n_lon,
                                  int n_levels) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open mask file: " + path.string());
    const auto size = static_cast<size_t>(f.tellg());
    const size_t plane = static_cast<size_t>(n_lat) * n_lon;
    LandSeaMask mask;
    mask.n_lat = n_lat;
    mask.n_lon = n_lon;
    mask.surface.resize(plane);
    f.seekg(0);
    f.read(reinterpret_cast<char*>(mask.surface.data()), static_cast<std::streamsize>(plane));
    if (size == plane * static_cast<size_t>(1 + n_levels)) {
        mask.levels.resize(n_levels);
        for (auto& lv : mask.levels) {
            lv.resize(plane);
            f.read(reinterpret_cast<char*>(lv.data()), static_cast<std::streamsize>(plane));
        }
    } else if (size != plane) {
        throw IoError("mask file has unexpected size: " + path.string());
    }
    if (!f) throw IoError("short read from mask file: " + path.string());
    mask.validate();
    return mask;
}

}  // namespace fuxio
