#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fuxio/loss.hpp"

using namespace fuxio;

namespace {

struct Fixture {
    ChannelLayout layout = build_channel_layout({"T", "S", "U"}, 1, false);
    int H = 8, W = 16;
    LandSeaMask mask = LandSeaMask::all_ocean(8, 16);
    LatitudeWeights uw = uniform_weights(8);

    std::vector<double> random_field(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> val(-2.0, 2.0);
        std::vector<double> f(static_cast<size_t>(layout.total_channels()) * H * W);
        for (auto& v : f) v = val(rng);
        return f;
    }
};

// independent transcription: (1/N_ocean) sum_c sum_ocean w_h sqrt(d^2 + eps^2)
double charbonnier_oracle(const std::vector<double>& pred, const std::vector<double>& target,
                          const std::vector<double>& wlat, const LandSeaMask& mask,
                          const ChannelLayout& layout, double eps) {
    const int C = layout.total_channels(), H = mask.n_lat, W = mask.n_lon;
    double sum = 0.0;
    long n = 0;
    for (int c = 0; c < C; ++c) {
        const auto& m = mask.for_channel(layout, c);
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const size_t s = static_cast<size_t>(h) * W + w;
                if (!m[s]) continue;
                const double d = pred[static_cast<size_t>(c) * H * W + s] -
                                 target[static_cast<size_t>(c) * H * W + s];
                sum += wlat[h] * std::sqrt(d * d + eps * eps);
                ++n;
            }
    }
    return sum / n;
}

}  // namespace

TEST_CASE("charbonnier loss fixed points and oracle") {
    Fixture fx;
    std::mt19937_64 rng(1);
    const auto x = fx.random_field(rng);

    SECTION("identical fields give exactly epsilon") {
        CHECK(charbonnier_loss(x, x, fx.uw, fx.mask, fx.layout, 1e-3) ==
              Catch::Approx(1e-3).margin(1e-9));
    }
    SECTION("small-epsilon limit approaches the constant error") {
        auto pred = x;
        for (auto& v : pred) v += 0.7;
        const double l = charbonnier_loss(pred, x, fx.uw, fx.mask, fx.layout, 1e-9);
        CHECK(l == Catch::Approx(0.7).epsilon(1e-6));
    }
    SECTION("matches the triple-loop oracle with two-band weights") {
        LatitudeWeights w2 = fx.uw;
        for (int h = 0; h < fx.H; ++h) w2.weights[h] = h < fx.H / 2 ? 1.5 : 0.5;
        const auto pred = fx.random_field(rng);
        const double got = charbonnier_loss(pred, x, w2, fx.mask, fx.layout, 1e-3);
        CHECK(got ==
              Catch::Approx(charbonnier_oracle(pred, x, w2.weights, fx.mask, fx.layout, 1e-3))
                  .margin(1e-7));
    }
    SECTION("epsilon must be positive") {
        CHECK_THROWS_AS(charbonnier_loss(x, x, fx.uw, fx.mask, fx.layout, 0.0), ConfigError);
    }
}

TEST_CASE("charbonnier gradient matches central finite differences") {
    Fixture fx;
    fx.mask.surface[10] = fx.mask.surface[40] = 0;  // some land
    std::mt19937_64 rng(2);
    const auto wlat = latitude_weights(GridSpec::regular(fx.H, fx.W, {0.0}).latitudes);
    for (int trial = 0; trial < 20; ++trial) {
        const auto pred = fx.random_field(rng);
        const auto target = fx.random_field(rng);
        std::vector<double> grad;
        charbonnier_loss(pred, target, wlat, fx.mask, fx.layout, 1e-3, &grad);
        std::uniform_int_distribution<size_t> pick(0, pred.size() - 1);
        for (int probe = 0; probe < 5; ++probe) {
            const size_t i = pick(rng);
            const double h = 1e-5;
            auto plus = pred, minus = pred;
            plus[i] += h;
            minus[i] -= h;
            const double fd = (charbonnier_loss(plus, target, wlat, fx.mask, fx.layout, 1e-3) -
                               charbonnier_loss(minus, target, wlat, fx.mask, fx.layout, 1e-3)) /
                              (2 * h);
            const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
            REQUIRE(std::abs(fd - grad[i]) / scale < 1e-6);
        }
    }
}

TEST_CASE("land cells never influence the loss") {
    Fixture fx;
    for (size_t s = 0; s < fx.mask.surface.size(); s += 5) fx.mask.surface[s] = 0;
    std::mt19937_64 rng(3);
    const auto pred = fx.random_field(rng);
    const auto target = fx.random_field(rng);
    const double base = charbonnier_loss(pred, target, fx.uw, fx.mask, fx.layout, 1e-3);
    auto perturbed = pred;
    for (int c = 0; c < fx.layout.total_channels(); ++c)
        for (size_t s = 0; s < fx.mask.surface.size(); ++s)
            if (!fx.mask.surface[s]) perturbed[static_cast<size_t>(c) * fx.H * fx.W + s] += 100.0;
    CHECK(charbonnier_loss(perturbed, target, fx.uw, fx.mask, fx.layout, 1e-3) == base);
}

TEST_CASE("multi-step loss") {
    Fixture fx;
    std::mt19937_64 rng(4);
    LossConfig cfg;
    cfg.epsilon = 1e-3;
    cfg.horizon = 4;

    SECTION("single step reduces to the plain loss") {
        const auto pred = fx.random_field(rng);
        const auto tgt = fx.random_field(rng);
        CHECK(multi_step_loss({pred}, {tgt}, cfg, fx.uw, fx.mask, fx.layout) ==
              Catch::Approx(charbonnier_loss(pred, tgt, fx.uw, fx.mask, fx.layout, 1e-3))
                  .margin(1e-12));
    }
    SECTION("perfect rollout gives epsilon") {
        const auto x = fx.random_field(rng);
        CHECK(multi_step_loss({x, x, x}, {x, x, x}, cfg, fx.uw, fx.mask, fx.layout) ==
              Catch::Approx(1e-3).margin(1e-9));
    }
    SECTION("discounted three-step oracle") {
        cfg.discount = 0.5;
        std::vector<std::vector<double>> preds, tgts;
        for (int k = 0; k < 3; ++k) {
            preds.push_back(fx.random_field(rng));
            tgts.push_back(fx.random_field(rng));
        }
        double expect = 0.0;
        for (int k = 0; k < 3; ++k)
            expect += std::pow(0.5, k) *
                      charbonnier_loss(preds[k], tgts[k], fx.uw, fx.mask, fx.layout, 1e-3);
        expect /= 3.0;
        CHECK(multi_step_loss(preds, tgts, cfg, fx.uw, fx.mask, fx.layout) ==
              Catch::Approx(expect).margin(1e-10));
    }
    SECTION("length mismatch is a shape error") {
        const auto x = fx.random_field(rng);
        CHECK_THROWS_AS(multi_step_loss({x, x}, {x}, cfg, fx.uw, fx.mask, fx.layout), ShapeError);
    }
}

TEST_CASE("per-channel candidate MAE") {
    Fixture fx;
    std::mt19937_64 rng(5);
    const auto target = fx.random_field(rng);
    CandidateSet cs;
    cs.n = 4;
    cs.C = fx.layout.total_channels();
    cs.H = fx.H;
    cs.W = fx.W;
    cs.fields.assign(4, target);

    SECTION("perfect candidate yields zero, constant offset its magnitude") {
        for (auto& v : cs.fields[1]) v += 0.3;
        const auto mae = channel_candidate_mae(cs, target, fx.mask, fx.layout);
        for (int c = 0; c < cs.C; ++c) {
            CHECK(mae.at(c, 0) == Catch::Approx(0.0).margin(1e-12));
            CHECK(mae.at(c, 1) == Catch::Approx(0.3).margin(1e-9));
        }
    }
    SECTION("random inputs match the per-cell loop oracle") {
        for (auto& f : cs.fields)
            for (auto& v : f) v += 0.01 * static_cast<double>(rng() % 100);
        const auto mae = channel_candidate_mae(cs, target, fx.mask, fx.layout);
        const size_t plane = static_cast<size_t>(fx.H) * fx.W;
        for (int c = 0; c < cs.C; ++c)
            for (int i = 0; i < 4; ++i) {
                double sum = 0.0;
                for (size_t s = 0; s < plane; ++s)
                    sum += std::abs(cs.fields[i][c * plane + s] - target[c * plane + s]);
                CHECK(mae.at(c, i) == Catch::Approx(sum / plane).margin(1e-7));
            }
    }
}

TEST_CASE("latitude-weighted RMSE") {
    const auto layout = build_channel_layout({"T", "S"}, 1, false);
    const int H = 4, W = 8;
    const auto mask = LandSeaMask::all_ocean(H, W);
    const auto uw = uniform_weights(H);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> val(-1.0, 1.0);
    auto field = [&] {
        std::vector<double> f(static_cast<size_t>(2) * H * W);
        for (auto& v : f) v = val(rng);
        return f;
    };

    SECTION("perfect forecast scores zero; constant error scores its magnitude") {
        const auto x = field();
        auto biased = x;
        for (auto& v : biased) v += 0.25;
        const auto t =
            latitude_rmse({{1, &x, &x}, {2, &biased, &x}}, uw, mask, layout);
        CHECK(t.at(0, 1) == Catch::Approx(0.0).margin(1e-12));
        CHECK(t.at(0, 2) == Catch::Approx(0.25).margin(1e-9));
        CHECK(t.at(1, 2) == Catch::Approx(0.25).margin(1e-9));
    }
    SECTION("sqrt is taken per initialization, then averaged") {
        // init 1: zero error; init 2: constant error 2.
        // per-init sqrt then average -> (0 + 2)/2 = 1
        // (averaging squared errors first would give sqrt(2) instead)
        const auto x = field();
        auto off = x;
        for (auto& v : off) v += 2.0;
        const auto t = latitude_rmse({{1, &x, &x}, {1, &off, &x}}, uw, mask, layout);
        CHECK(t.at(0, 1) == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("matches the formula transcription oracle on a random case") {
        const auto wlat = latitude_weights({-40.0, -10.0, 10.0, 40.0});
        std::vector<std::vector<double>> preds, truths;
        for (int k = 0; k < 3; ++k) {
            preds.push_back(field());
            truths.push_back(field());
        }
        std::vector<ForecastPair> pairs;
        for (int k = 0; k < 3; ++k) pairs.push_back({1, &preds[k], &truths[k]});
        const auto t = latitude_rmse(pairs, wlat, mask, layout);
        const size_t plane = static_cast<size_t>(H) * W;
        for (int c = 0; c < 2; ++c) {
            double avg = 0.0;
            for (int k = 0; k < 3; ++k) {
                double ss = 0.0;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const size_t s = static_cast<size_t>(h) * W + w;
                        const double d = preds[k][c * plane + s] - truths[k][c * plane + s];
                        ss += wlat.weights[h] * d * d;
                    }
                avg += std::sqrt(ss / plane);
            }
            CHECK(t.at(c, 1) == Catch::Approx(avg / 3.0).margin(1e-7));
        }
    }
    SECTION("empty pair set is an error") {
        CHECK_THROWS_AS(latitude_rmse({}, uw, mask, layout), ConfigError);
    }
}
