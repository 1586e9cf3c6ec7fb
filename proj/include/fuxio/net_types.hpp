#pragma once

#include <cstdint>
#include <vector>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"

namespace fuxio {

// Architecture hyperparameters. H, W must be divisible by patch; the latent
// grid (H/patch x W/patch) must be divisible by window.
struct NetConfig {
    int latent_dim = 96;     // C'
    int patch = 4;
    int blocks = 4;
    int window = 8;
    int ffn_mult = 4;
    int heads = 4;
    int spatial_embed_dim = 8;   // channels of the learnable coordinate embedding
    int n_steps = 4;             // input window length N (2 for the woMoT_2times ablation)

    void validate() const {
        if (latent_dim <= 0 || patch <= 0 || blocks <= 0 || window <= 0 || ffn_mult <= 0 ||
            heads <= 0 || spatial_embed_dim <= 0)
            throw ConfigError("net config fields must be positive");
        if (latent_dim % heads != 0) throw ConfigError("latent_dim must be divisible by heads");
        if (n_steps != 2 && n_steps != 4) throw ConfigError("n_steps must be 2 or 4");
    }

    void check_grid(int H, int W) const {
        validate();
        if (H % patch != 0 || W % patch != 0)
            throw ShapeError("grid dimensions must be divisible by patch size");
        const int Hp = H / patch, Wp = W / patch;
        if (Hp % window != 0 || Wp % window != 0)
            throw ShapeError("latent grid must be divisible by attention window");
    }
};

// Conditioning inputs to the context prior network.
struct ContextSignals {
    int phase = 0;        // 6-hour bin of the day, {0,1,2,3}
    int day_of_year = 1;  // [1, 366]
    std::vector<double> lat_grid;   // H*W, degrees
    std::vector<double> lon_grid;   // H*W, degrees
    std::vector<double> land;       // H*W, 1 = land, 0 = ocean

    void validate() const {
        if (phase < 0 || phase > 3) throw ConfigError("phase must be in {0,1,2,3}");
        if (day_of_year < 1 || day_of_year > 366) throw ConfigError("day_of_year out of range");
    }

    static ContextSignals at(std::int64_t ts, const GridSpec& grid, const LandSeaMask& mask) {
        ContextSignals s;
        s.phase = fuxio::phase_of_day(ts);
        s.day_of_year = fuxio::day_of_year(ts);
        const int H = grid.n_lat, W = grid.n_lon;
        s.lat_grid.resize(static_cast<size_t>(H) * W);
        s.lon_grid.resize(static_cast<size_t>(H) * W);
        s.land.resize(static_cast<size_t>(H) * W);
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const size_t i = static_cast<size_t>(h) * W + w;
                s.lat_grid[i] = grid.latitudes[h];
                s.lon_grid[i] = grid.longitudes[w];
                s.land[i] = mask.surface[i] ? 0.0 : 1.0;
            }
        return s;
    }
};

// Output of the context prior network. The spatial field lives at latent
// resolution (token-major: [s][k], s = h'*W' + w'); the modulation vector
// scales encoder output channels.
struct ContextFeatures {
    int Hp = 0, Wp = 0, Cp = 0;
    std::vector<double> field;       // (Hp*Wp) x Cp
    std::vector<double> pooled;      // Cp, spatial mean of field
    std::vector<double> modulation;  // Cp
};

// The N decoder outputs, one per temporal skip. fields[i] used historical
// context beginning at t-i (i = 0 is the most recent input step).
struct CandidateSet {
    int n = 0;
    int C = 0, H = 0, W = 0;
    std::vector<std::vector<double>> fields;  // n entries, each C*H*W, normalized units
};

}  // namespace fuxio
