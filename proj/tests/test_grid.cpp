#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "fuxio/grid.hpp"

using namespace fuxio;

TEST_CASE("channel layout index formula") {
    const auto full = build_channel_layout({"T", "S", "U", "V"}, 20, true);
    CHECK(full.total_channels() == 81);
    CHECK(full.ssh_channel() == 80);

    const auto tiny = build_channel_layout({"T"}, 1, false);
    CHECK(tiny.total_channels() == 1);
    CHECK(tiny.channel_of("T", 0) == 0);

    const auto two = build_channel_layout({"T", "S"}, 4, true);
    CHECK(two.channel_of("S", 2) == 6);
    CHECK(two.channel_of("SSH", 0) == 8);
    CHECK(two.total_channels() == 9);
}

TEST_CASE("channel layout round trip and errors") {
    const auto layout = build_channel_layout({"T", "S", "U"}, 3, true);
    for (int c = 0; c < layout.total_channels(); ++c) {
        const auto [p, d] = layout.decode(c);
        if (c == layout.ssh_channel()) {
            CHECK(layout.variable_name(c) == "SSH");
        } else {
            CHECK(layout.channel_of(p, d) == c);
        }
    }
    CHECK_THROWS_AS(build_channel_layout({"T", "T"}, 2, false), ConfigError);
    CHECK_THROWS_AS(build_channel_layout({}, 2, false), ConfigError);
    CHECK_THROWS_AS(layout.channel_of("X", 0), ConfigError);
}

TEST_CASE("latitude weights match the cosine formula") {
    CHECK(latitude_weights({0.0}).weights[0] == Catch::Approx(1.0).epsilon(1e-12));

    const auto sym = latitude_weights({45.0, -45.0});
    CHECK(sym.weights[0] == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(sym.weights[1] == Catch::Approx(1.0).epsilon(1e-12));

    // cos(0) = 1, cos(60 deg) = 1/2 -> weights 2*[1, 1/2]/1.5 = [4/3, 2/3]
    const auto two = latitude_weights({0.0, 60.0});
    CHECK(two.weights[0] == Catch::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(two.weights[1] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(latitude_weights({0.0, 90.0}), ConfigError);
    CHECK_THROWS_AS(latitude_weights({-95.0}), ConfigError);
}

TEST_CASE("latitude weights sum to H for random grids") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> lat(-89.0, 89.0);
    for (int trial = 0; trial < 20; ++trial) {
        const int H = 1 + static_cast<int>(rng() % 64);
        std::vector<double> lats(H);
        for (auto& v : lats) v = lat(rng);
        const auto w = latitude_weights(lats);
        double sum = 0.0;
        for (double v : w.weights) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum == Catch::Approx(static_cast<double>(H)).epsilon(1e-9));
    }
}

TEST_CASE("apply_mask semantics") {
    const auto layout = build_channel_layout({"T", "S"}, 1, false);
    const int H = 4, W = 6, C = layout.total_channels();
    OceanState state(C, H, W, 0);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> val(-2.0, 2.0);
    for (auto& v : state.values) v = val(rng);

    SECTION("all-ocean mask is the identity") {
        const auto out = apply_mask(state, LandSeaMask::all_ocean(H, W), layout);
        CHECK(out.values == state.values);
    }
    SECTION("checkerboard mask matches the elementwise oracle and is idempotent") {
        LandSeaMask mask;
        mask.n_lat = H;
        mask.n_lon = W;
        mask.surface.resize(static_cast<size_t>(H) * W);
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) mask.surface[static_cast<size_t>(h) * W + w] = (h + w) % 2;
        const auto out = apply_mask(state, mask, layout);
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double got = out.at(c, h, w);
                    if (mask.surface[static_cast<size_t>(h) * W + w])
                        CHECK(got == state.at(c, h, w));
                    else
                        CHECK(got == kLandFill);
                }
        const auto twice = apply_mask(out, mask, layout);
        CHECK(twice.values == out.values);
    }
    SECTION("dimension mismatch is a shape error") {
        CHECK_THROWS_AS(apply_mask(state, LandSeaMask::all_ocean(H + 1, W), layout), ShapeError);
    }
}

TEST_CASE("mask validation") {
    LandSeaMask m = LandSeaMask::all_ocean(2, 2);
    m.surface[0] = 7;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.surface = {0, 0, 0, 0};
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("grid spec validation") {
    CHECK_NOTHROW(GridSpec::regular(8, 16, {0.0, 50.0}));
    GridSpec g = GridSpec::regular(8, 16, {0.0, 50.0});
    g.depth_levels = {10.0, 50.0};  // first element must be 0
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GridSpec::regular(8, 16, {0.0});
    g.latitudes[3] = g.latitudes[2];  // not strictly monotonic
    CHECK_THROWS_AS(g.validate(), ConfigError);
}

TEST_CASE("mask file round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "fuxio_mask_test";
    std::filesystem::create_directories(dir);
    LandSeaMask m = LandSeaMask::all_ocean(3, 5);
    m.surface[4] = 0;
    m.levels = {m.surface, m.surface};
    m.levels[1][7] = 0;
    write_mask_file(dir / "mask.u8", m);
    const auto back = read_mask_file(dir / "mask.u8", 3, 5, 2);
    CHECK(back.surface == m.surface);
    REQUIRE(back.levels.size() == 2);
    CHECK(back.levels[1] == m.levels[1]);
    std::filesystem::remove_all(dir);
}
