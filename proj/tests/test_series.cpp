#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fuxio/series.hpp"

using namespace fuxio;

namespace {

SyntheticRecipe recipe_of(std::vector<ChannelDynamics> dyn, double noise, std::uint64_t seed) {
    SyntheticRecipe r;
    r.channels = std::move(dyn);
    r.noise_level = noise;
    r.seed = seed;
    return r;
}

SeriesStore small_store(double noise = 0.0, std::uint64_t seed = 5) {
    const auto grid = GridSpec::regular(8, 16, {0.0});
    const auto layout = build_channel_layout({"T", "S"}, 1, false);
    const auto recipe = recipe_of({{DynamicKind::Diurnal, 1.0, 1}, {DynamicKind::SlowAr, 2.0, 1}},
                                  noise, seed);
    return generate_synthetic(recipe, grid, layout, LandSeaMask::all_ocean(8, 16), 16);
}

}  // namespace

TEST_CASE("diurnal channel repeats with period 4 at zero noise") {
    const auto store = small_store();
    const size_t plane = 8 * 16;
    for (size_t t = 0; t + 4 < store.steps.size(); ++t)
        for (size_t s = 0; s < plane; ++s)
            CHECK(store.steps[t][s] == store.steps[t + 4][s]);
}

TEST_CASE("generator determinism") {
    const auto a = small_store(0.1, 42);
    const auto b = small_store(0.1, 42);
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t t = 0; t < a.steps.size(); ++t) CHECK(a.steps[t] == b.steps[t]);
    const auto c = small_store(0.1, 43);
    bool all_equal = true;
    for (size_t t = 0; t < a.steps.size(); ++t) all_equal &= (a.steps[t] == c.steps[t]);
    CHECK_FALSE(all_equal);
}

TEST_CASE("lagged copy has unit correlation with its lag at zero noise") {
    const auto grid = GridSpec::regular(8, 16, {0.0});
    const auto layout = build_channel_layout({"T"}, 1, false);
    const int L = 4;
    const auto store = generate_synthetic(
        recipe_of({{DynamicKind::LaggedCopy, 1.0, L}}, 0.0, 9), grid, layout,
        LandSeaMask::all_ocean(8, 16), 24);
    // correlation of X^t with X^{t-L} across all (t, cell)
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    size_t n = 0;
    for (size_t t = L; t < store.steps.size(); ++t)
        for (size_t s = 0; s < store.steps[t].size(); ++s) {
            const double x = store.steps[t][s], y = store.steps[t - L][s];
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            ++n;
        }
    const double corr = (n * sxy - sx * sy) /
                        std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
    CHECK(corr == Catch::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("norm stats") {
    SECTION("constant channel is degenerate") {
        auto store = small_store();
        for (auto& step : store.steps)
            for (size_t s = 0; s < static_cast<size_t>(8) * 16; ++s) step[s] = 3.5;
        CHECK_THROWS_AS(compute_norm_stats(store, store.timestamps.front(),
                                           store.timestamps.back()),
                        ConfigError);
    }
    SECTION("symmetric +-1 channel has mean 0, std 1") {
        auto store = small_store();
        for (auto& step : store.steps)
            for (size_t s = 0; s < static_cast<size_t>(8) * 16; ++s)
                step[s] = (s % 2 == 0) ? 1.0 : -1.0;
        const auto st =
            compute_norm_stats(store, store.timestamps.front(), store.timestamps.back());
        CHECK(st.mean[0] == Catch::Approx(0.0).margin(1e-12));
        CHECK(st.stddev[0] == Catch::Approx(1.0).epsilon(1e-12));
    }
    SECTION("matches a two-pass oracle over explicit ocean cells") {
        const auto grid = GridSpec::regular(8, 16, {0.0});
        const auto layout = build_channel_layout({"T"}, 1, false);
        LandSeaMask mask = LandSeaMask::all_ocean(8, 16);
        for (size_t s = 0; s < mask.surface.size(); s += 3) mask.surface[s] = 0;
        const auto store = generate_synthetic(recipe_of({{DynamicKind::SlowAr, 1.0, 1}}, 0.0, 2),
                                              grid, layout, mask, 10);
        const auto st =
            compute_norm_stats(store, store.timestamps.front(), store.timestamps.back());
        std::vector<double> vals;
        for (const auto& step : store.steps)
            for (size_t s = 0; s < mask.surface.size(); ++s)
                if (mask.surface[s]) vals.push_back(step[s]);
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= vals.size();
        double ss = 0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / vals.size());
        CHECK(st.mean[0] == Catch::Approx(mean).margin(1e-12));
        CHECK(st.stddev[0] == Catch::Approx(sd).epsilon(1e-12));
    }
}

TEST_CASE("sample windows") {
    const auto store = small_store();
    const auto stats =
        compute_norm_stats(store, store.timestamps.front(), store.timestamps.back());

    SECTION("earliest valid head uses indices 0..3 and target 4") {
        const auto w = make_window(store, stats, store.timestamps[3]);
        CHECK(w.inputs[0] == normalize_step(store.steps[0], store, stats));
        CHECK(w.inputs[3] == normalize_step(store.steps[3], store, stats));
        CHECK(w.target == normalize_step(store.steps[4], store, stats));
    }
    SECTION("insufficient history raises a data-gap error naming the instant") {
        try {
            make_window(store, stats, store.timestamps[2]);
            FAIL("expected DataGapError");
        } catch (const DataGapError& e) {
            CHECK(std::string(e.what()).find(
                      format_timestamp(store.timestamps[2] - 3 * kStepSeconds)) !=
                  std::string::npos);
        }
    }
    SECTION("denormalization round trip on ocean cells") {
        const auto w = make_window(store, stats, store.timestamps[5]);
        const auto raw = denormalize_step(w.inputs[3], store, stats);
        for (size_t s = 0; s < raw.size(); ++s)
            CHECK(raw[s] == Catch::Approx(store.steps[5][s]).margin(1e-6));
    }
}

TEST_CASE("export/ingest closure and failure modes") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fuxio_series_test";
    fs::remove_all(dir);
    const auto store = small_store(0.05, 17);
    export_store(store, dir);

    SECTION("round trip is bitwise") {
        const auto back = ingest_raw(dir);
        CHECK(back.timestamps == store.timestamps);
        for (size_t t = 0; t < store.steps.size(); ++t) CHECK(back.steps[t] == store.steps[t]);
        CHECK(back.mask.surface == store.mask.surface);
    }
    SECTION("non-empty directory requires force") {
        CHECK_THROWS_AS(export_store(store, dir), IoError);
        CHECK_NOTHROW(export_store(store, dir, true));
    }
    SECTION("truncated state file is reported by name") {
        const auto victim = dir / ("state_" + format_timestamp(store.timestamps[2]) + ".f32");
        const auto size = fs::file_size(victim);
        fs::resize_file(victim, size - 4);
        try {
            ingest_raw(dir);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find(victim.filename().string()) != std::string::npos);
        }
    }
    SECTION("metadata/payload channel mismatch is rejected") {
        std::ifstream in(dir / "grid.json");
        nlohmann::json j;
        in >> j;
        in.close();
        j["layout"]["variables"].push_back("U");  // declares one channel more than the files hold
        std::ofstream out(dir / "grid.json");
        out << j.dump();
        out.close();
        CHECK_THROWS_AS(ingest_raw(dir), IoError);
    }
    SECTION("malformed metadata is an ingestion error") {
        std::ofstream out(dir / "grid.json");
        out << "{ not json";
        out.close();
        CHECK_THROWS_AS(ingest_raw(dir), IoError);
    }
    fs::remove_all(dir);
}
