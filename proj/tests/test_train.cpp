#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fuxio/train.hpp"

using namespace fuxio;

namespace {

struct TrainFixture {
    GridSpec grid = GridSpec::regular(16, 32, {0.0});
    ChannelLayout layout = build_channel_layout({"T", "S"}, 1, false);
    LandSeaMask mask = LandSeaMask::all_ocean(16, 32);
    SeriesStore store;
    NormStats stats;
    NetConfig net;
    TrainConfig tcfg;
    LossConfig lcfg;

    TrainFixture() {
        SyntheticRecipe recipe;
        recipe.channels = {{DynamicKind::Diurnal, 1.0, 1}, {DynamicKind::SlowAr, 1.0, 1}};
        recipe.noise_level = 0.05;
        recipe.seed = 3;
        store = generate_synthetic(recipe, grid, layout, mask, 48);
        stats = compute_norm_stats(store, store.timestamps.front(), store.timestamps.back());
        net.latent_dim = 16;
        net.patch = 4;
        net.blocks = 2;
        net.window = 4;
        net.ffn_mult = 2;
        net.heads = 2;
        net.spatial_embed_dim = 4;
        net.n_steps = 4;
        tcfg.iterations = 8;
        tcfg.seed = 11;
        tcfg.checkpoint_every = 0;
    }

    TrainEngine engine(TrainConfig tc) const {
        return TrainEngine(store, stats, net, tc, lcfg, store.timestamps.front(),
                           store.timestamps.back());
    }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cosine learning-rate schedule") {
    TrainConfig cfg;
    cfg.iterations = 1000;
    CHECK(lr_at(0, cfg) == Catch::Approx(2.5e-4).epsilon(1e-12));
    CHECK(lr_at(1000, cfg) == Catch::Approx(1e-8).epsilon(1e-12));
    CHECK(lr_at(5000, cfg) == Catch::Approx(1e-8).epsilon(1e-12));  // clamps past the end
    CHECK(lr_at(500, cfg) == Catch::Approx((2.5e-4 + 1e-8) / 2.0).epsilon(1e-9));
    for (int s = 1; s <= 1000; ++s) REQUIRE(lr_at(s, cfg) <= lr_at(s - 1, cfg));
    CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);
}

TEST_CASE("fresh engine starts from the seeded initialization") {
    TrainFixture fx;
    auto eng = fx.engine(fx.tcfg);
    const ForecastModel model(fx.net, fx.store.C(), fx.store.H(), fx.store.W());
    CHECK(eng.parameters() == model.init_params(fx.tcfg.seed));
    for (double v : eng.selection().values) CHECK(v == 0.25);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fuxio_ckpt_test";
    fs::create_directories(dir);
    TrainFixture fx;
    auto eng = fx.engine(fx.tcfg);
    eng.run_iteration();
    eng.run_iteration();
    const Checkpoint cp = eng.make_checkpoint();
    save_checkpoint(cp, dir / "a.bin");
    const Checkpoint back = load_checkpoint(dir / "a.bin");

    SECTION("all state survives exactly") {
        CHECK(back.params == cp.params);
        CHECK(back.adam_m == cp.adam_m);
        CHECK(back.adam_v == cp.adam_v);
        CHECK(back.V.values == cp.V.values);
        CHECK(back.iteration == 2);
        CHECK(back.stage == "pretrain");
        CHECK(back.stats.mean == cp.stats.mean);
        CHECK(back.rng_state == cp.rng_state);
        CHECK(back.net.latent_dim == fx.net.latent_dim);
    }
    SECTION("save -> load -> save is byte-identical") {
        save_checkpoint(back, dir / "b.bin");
        CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
    }
    SECTION("truncation is an I/O error") {
        fs::copy_file(dir / "a.bin", dir / "t.bin", fs::copy_options::overwrite_existing);
        fs::resize_file(dir / "t.bin", fs::file_size(dir / "t.bin") - 16);
        CHECK_THROWS_AS(load_checkpoint(dir / "t.bin"), IoError);
    }
    SECTION("foreign files are rejected by magic") {
        std::ofstream f(dir / "junk.bin", std::ios::binary);
        f << "definitely not a checkpoint, padded to be long enough to read";
        f.close();
        CHECK_THROWS_AS(load_checkpoint(dir / "junk.bin"), IoError);
    }
    fs::remove_all(dir);
}

TEST_CASE("training is deterministic in the seed") {
    TrainFixture fx;
    auto a = fx.engine(fx.tcfg);
    auto b = fx.engine(fx.tcfg);
    for (int i = 0; i < 3; ++i) CHECK(a.run_iteration() == b.run_iteration());
    CHECK(a.parameters() == b.parameters());
    CHECK(a.selection().values == b.selection().values);

    TrainConfig other = fx.tcfg;
    other.seed = 12;
    auto c = fx.engine(other);
    for (int i = 0; i < 3; ++i) c.run_iteration();
    CHECK(a.parameters() != c.parameters());
}

TEST_CASE("a one-step rollout stage reproduces single-step training") {
    TrainFixture fx;
    auto pre = fx.engine(fx.tcfg);
    TrainConfig ft = fx.tcfg;
    ft.stage = "finetune";
    ft.horizon = 1;
    auto fine = fx.engine(ft);
    const double la = pre.run_iteration();
    const double lb = fine.run_iteration();
    CHECK(la == Catch::Approx(lb).margin(1e-12));
    const auto& pa = pre.parameters();
    const auto& pb = fine.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(std::abs(pa[i] - pb[i]) < 1e-12);
}

TEST_CASE("resuming from a checkpoint continues the same trajectory") {
    TrainFixture fx;
    auto eng = fx.engine(fx.tcfg);
    eng.run_iteration();
    eng.run_iteration();
    const Checkpoint cp = eng.make_checkpoint();
    std::vector<double> more = {eng.run_iteration(), eng.run_iteration()};

    TrainEngine resumed(fx.store, cp, fx.store.timestamps.front(), fx.store.timestamps.back());
    CHECK(resumed.iteration() == 2);
    std::vector<double> replay = {resumed.run_iteration(), resumed.run_iteration()};
    CHECK(replay[0] == Catch::Approx(more[0]).margin(1e-12));
    CHECK(replay[1] == Catch::Approx(more[1]).margin(1e-12));
    const auto& pa = eng.parameters();
    const auto& pb = resumed.parameters();
    for (size_t i = 0; i < pa.size(); ++i) REQUIRE(std::abs(pa[i] - pb[i]) < 1e-6);
}

TEST_CASE("rollout training feeds predictions back, never truth") {
    TrainFixture fx;
    TrainConfig ft = fx.tcfg;
    ft.stage = "finetune";
    ft.horizon = 4;
    auto eng = fx.engine(ft);

    std::vector<std::vector<double>> norm_truth;
    for (const auto& step : fx.store.steps)
        norm_truth.push_back(normalize_step(step, fx.store, fx.stats));

    std::vector<std::vector<std::vector<double>>> snaps;
    TrainEngine::Instrument instr = [&](int, const std::vector<std::vector<double>>& w) {
        snaps.push_back(w);
    };
    eng.run_iteration(&instr);
    REQUIRE(snaps.size() == 4);
    for (const auto& s : snaps) REQUIRE(s.size() == kInputSteps);

    // the first window is four consecutive ground-truth steps
    size_t j0 = norm_truth.size();
    for (size_t j = 0; j < norm_truth.size(); ++j)
        if (norm_truth[j] == snaps[0][0]) j0 = j;
    REQUIRE(j0 < norm_truth.size());
    for (size_t i = 1; i < kInputSteps; ++i) CHECK(snaps[0][i] == norm_truth[j0 + i]);

    // each step slides the window by one
    for (size_t k = 0; k + 1 < snaps.size(); ++k)
        for (size_t i = 0; i + 1 < kInputSteps; ++i)
            CHECK(snaps[k + 1][i] == snaps[k][i + 1]);

    // the newest entry after step k is the model's own output, not any truth step
    for (size_t k = 1; k < snaps.size(); ++k)
        for (const auto& truth : norm_truth) CHECK(snaps[k].back() != truth);
}

TEST_CASE("later rollout steps contribute to the gradient") {
    TrainFixture fx;
    TrainConfig ft = fx.tcfg;
    ft.stage = "finetune";
    ft.horizon = 2;
    LossConfig heavy = fx.lcfg, light = fx.lcfg;
    heavy.discount = 1.0;
    light.discount = 1e-3;
    TrainEngine a(fx.store, fx.stats, fx.net, ft, heavy, fx.store.timestamps.front(),
                  fx.store.timestamps.back());
    TrainEngine b(fx.store, fx.stats, fx.net, ft, light, fx.store.timestamps.front(),
                  fx.store.timestamps.back());
    a.run_iteration();
    b.run_iteration();
    double diff = 0.0;
    for (size_t i = 0; i < a.parameters().size(); ++i)
        diff = std::max(diff, std::abs(a.parameters()[i] - b.parameters()[i]));
    CHECK(diff > 0.0);
}

TEST_CASE("routing can be disabled: selection stays uniform") {
    TrainFixture fx;
    TrainConfig off = fx.tcfg;
    off.mot_enabled = false;
    auto plain = fx.engine(off);
    plain.run_iteration();
    plain.run_iteration();
    for (double v : plain.selection().values) CHECK(v == 0.25);

    auto routed = fx.engine(fx.tcfg);
    routed.run_iteration();
    bool moved = false;
    for (double v : routed.selection().values) moved |= (v != 0.25);
    CHECK(moved);
}

TEST_CASE("config and range validation") {
    TrainFixture fx;
    TrainConfig bad = fx.tcfg;
    bad.floor_lr = bad.peak_lr;
    CHECK_THROWS_AS(fx.engine(bad), ConfigError);
    bad = fx.tcfg;
    bad.stage = "warmup";
    CHECK_THROWS_AS(fx.engine(bad), ConfigError);
    // a range too narrow to hold a full sample window
    CHECK_THROWS_AS(TrainEngine(fx.store, fx.stats, fx.net, fx.tcfg, fx.lcfg,
                                fx.store.timestamps.front(), fx.store.timestamps.front()),
                    ConfigError);
}

TEST_CASE("run() writes an append-only training log") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fuxio_trainlog_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    TrainFixture fx;
    TrainConfig tc = fx.tcfg;
    tc.iterations = 3;
    auto eng = fx.engine(tc);
    eng.run(dir / "train_log.csv");
    std::ifstream f(dir / "train_log.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "iteration,lr,loss,stage");
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    CHECK(eng.iteration() == 3);
    fs::remove_all(dir);
}
