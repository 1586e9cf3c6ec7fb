#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"
#include "fuxio/loss.hpp"
#include "fuxio/net_types.hpp"
#include "fuxio/rollout.hpp"
#include "fuxio/series.hpp"
#include "fuxio/train.hpp"

namespace fuxio {

// Reject unknown keys so typos fail loudly instead of silently using defaults.
inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("section '" + section + "' must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end())
            throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
}

// Time fields accept either an integer step index (relative to the first
// series timestamp) or an ISO8601 string.
inline std::int64_t parse_time_field(const nlohmann::json& v, std::int64_t t0) {
    if (v.is_number_integer()) return t0 + v.get<std::int64_t>() * kStepSeconds;
    if (v.is_string()) return parse_timestamp(v.get<std::string>());
    throw ConfigError("time fields must be a step index or an ISO8601 string");
}

struct RunConfig {
    std::filesystem::path data_dir = "data";
    std::filesystem::path output_dir = "out";

    // synthetic generation
    int n_lat = 16, n_lon = 32;
    std::vector<double> depth_levels = {0.0};
    std::vector<std::string> variables = {"T"};
    bool has_ssh = false;
    double land_fraction = 0.0;
    std::uint64_t mask_seed = 0;
    int n_steps = 64;
    SyntheticRecipe recipe;
    bool recipe_given = false;

    NetConfig net;
    TrainConfig train;
    LossConfig loss;

    // split: raw JSON kept so indexes can be resolved against the actual series
    nlohmann::json split;

    EvalOptions eval;
};

inline SyntheticRecipe recipe_from_json(const nlohmann::json& j, int n_channels) {
    check_keys(j, "recipe", {"seed", "noise_level", "channels", "default"});
    SyntheticRecipe r;
    if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("noise_level")) r.noise_level = j.at("noise_level").get<double>();
    ChannelDynamics def;
    auto parse_dyn = [](const nlohmann::json& d, const std::string& where) {
        check_keys(d, where, {"kind", "amplitude", "lag"});
        ChannelDynamics out;
        out.kind = dynamic_kind_from_string(d.at("kind").get<std::string>());
        if (d.contains("amplitude")) out.amplitude = d.at("amplitude").get<double>();
        if (d.contains("lag")) out.lag = d.at("lag").get<int>();
        return out;
    };
    if (j.contains("default")) def = parse_dyn(j.at("default"), "recipe.default");
    r.channels.assign(n_channels, def);
    if (j.contains("channels")) {
        const auto& arr = j.at("channels");
        if (!arr.is_array() || static_cast<int>(arr.size()) > n_channels)
            throw ConfigError("recipe.channels must list at most one entry per channel");
        for (size_t i = 0; i < arr.size(); ++i)
            r.channels[i] = parse_dyn(arr[i], "recipe.channels[" + std::to_string(i) + "]");
    }
    return r;
}

inline NetConfig net_config_from_user_json(const nlohmann::json& j) {
    check_keys(j, "net",
               {"latent_dim", "patch", "blocks", "window", "ffn_mult", "heads",
                "spatial_embed_dim", "n_steps"});
    NetConfig c;
    if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim");
    if (j.contains("patch")) c.patch = j.at("patch");
    if (j.contains("blocks")) c.blocks = j.at("blocks");
    if (j.contains("window")) c.window = j.at("window");
    if (j.contains("ffn_mult")) c.ffn_mult = j.at("ffn_mult");
    if (j.contains("heads")) c.heads = j.at("heads");
    if (j.contains("spatial_embed_dim")) c.spatial_embed_dim = j.at("spatial_embed_dim");
    if (j.contains("n_steps")) c.n_steps = j.at("n_steps");
    c.validate();
    return c;
}

inline TrainConfig train_config_from_user_json(const nlohmann::json& j) {
    check_keys(j, "train",
               {"stage", "iterations", "batch_size", "peak_lr", "floor_lr", "beta1", "beta2",
                "weight_decay", "grad_clip", "mot_alpha", "mot_k", "mot_enabled",
                "merged_loss_weight", "candidate_loss_weight", "horizon", "seed",
                "checkpoint_every"});
    TrainConfig c;
    if (j.contains("stage")) c.stage = j.at("stage");
    if (j.contains("iterations")) c.iterations = j.at("iterations");
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size");
    if (j.contains("peak_lr")) c.peak_lr = j.at("peak_lr");
    if (j.contains("floor_lr")) c.floor_lr = j.at("floor_lr");
    if (j.contains("beta1")) c.beta1 = j.at("beta1");
    if (j.contains("beta2")) c.beta2 = j.at("beta2");
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay");
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip");
    if (j.contains("mot_alpha")) c.mot_alpha = j.at("mot_alpha");
    if (j.contains("mot_k")) c.mot_k = j.at("mot_k");
    if (j.contains("mot_enabled")) c.mot_enabled = j.at("mot_enabled");
    if (j.contains("merged_loss_weight")) c.merged_loss_weight = j.at("merged_loss_weight");
    if (j.contains("candidate_loss_weight")) c.candidate_loss_weight = j.at("candidate_loss_weight");
    if (j.contains("horizon")) c.horizon = j.at("horizon");
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every");
    c.validate();
    return c;
}

inline LossConfig loss_config_from_user_json(const nlohmann::json& j) {
    check_keys(j, "loss", {"epsilon", "horizon", "discount"});
    LossConfig c;
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon");
    if (j.contains("horizon")) c.horizon = j.at("horizon");
    if (j.contains("discount")) c.discount = j.at("discount");
    c.validate();
    return c;
}

inline EvalOptions eval_options_from_user_json(const nlohmann::json& j) {
    check_keys(j, "eval",
               {"steps", "init_stride", "max_inits", "map_leads", "with_obs", "obs_per_bin",
                "obs_noise_sigma", "obs_seed"});
    EvalOptions e;
    if (j.contains("steps")) e.steps = j.at("steps");
    if (j.contains("init_stride")) e.init_stride = j.at("init_stride");
    if (j.contains("max_inits")) e.max_inits = j.at("max_inits");
    if (j.contains("map_leads")) e.map_leads = j.at("map_leads").get<std::vector<int>>();
    if (j.contains("with_obs")) e.with_obs = j.at("with_obs");
    if (j.contains("obs_per_bin")) e.obs_per_bin = j.at("obs_per_bin");
    if (j.contains("obs_noise_sigma")) e.obs_noise_sigma = j.at("obs_noise_sigma");
    if (j.contains("obs_seed")) e.obs_seed = j.at("obs_seed");
    if (e.steps < 1 || e.init_stride < 1 || e.max_inits < 1 || e.obs_per_bin < 1)
        throw ConfigError("eval counts must be >= 1");
    return e;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config JSON: " + std::string(e.what()));
    }
    check_keys(j, "config",
               {"data_dir", "output_dir", "grid", "recipe", "net", "train", "loss", "split",
                "eval"});
    RunConfig rc;
    if (j.contains("data_dir")) rc.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("output_dir")) rc.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("grid")) {
        const auto& jg = j.at("grid");
        check_keys(jg, "grid",
                   {"n_lat", "n_lon", "depth_levels_m", "variables", "has_ssh", "land_fraction",
                    "mask_seed", "n_steps"});
        if (jg.contains("n_lat")) rc.n_lat = jg.at("n_lat");
        if (jg.contains("n_lon")) rc.n_lon = jg.at("n_lon");
        if (jg.contains("depth_levels_m"))
            rc.depth_levels = jg.at("depth_levels_m").get<std::vector<double>>();
        if (jg.contains("variables"))
            rc.variables = jg.at("variables").get<std::vector<std::string>>();
        if (jg.contains("has_ssh")) rc.has_ssh = jg.at("has_ssh");
        if (jg.contains("land_fraction")) rc.land_fraction = jg.at("land_fraction");
        if (jg.contains("mask_seed")) rc.mask_seed = jg.at("mask_seed").get<std::uint64_t>();
        if (jg.contains("n_steps")) rc.n_steps = jg.at("n_steps");
        if (rc.land_fraction < 0.0 || rc.land_fraction >= 1.0)
            throw ConfigError("land_fraction must be in [0, 1)");
    }
    const auto layout =
        build_channel_layout(rc.variables, static_cast<int>(rc.depth_levels.size()), rc.has_ssh);
    if (j.contains("recipe")) {
        rc.recipe = recipe_from_json(j.at("recipe"), layout.total_channels());
        rc.recipe_given = true;
    } else {
        rc.recipe.channels.assign(layout.total_channels(), ChannelDynamics{});
    }
    if (j.contains("net")) rc.net = net_config_from_user_json(j.at("net"));
    if (j.contains("train")) rc.train = train_config_from_user_json(j.at("train"));
    if (j.contains("loss")) rc.loss = loss_config_from_user_json(j.at("loss"));
    if (j.contains("split")) {
        check_keys(j.at("split"), "split",
                   {"train_begin", "train_end", "eval_begin", "eval_end"});
        rc.split = j.at("split");
    }
    if (j.contains("eval")) rc.eval = eval_options_from_user_json(j.at("eval"));
    return rc;
}

struct SplitRange {
    std::int64_t train_begin, train_end, eval_begin, eval_end;
};

// Resolve the split against an actual series; defaults to an 80/20 cut.
inline SplitRange resolve_split(const nlohmann::json& split, const SeriesStore& store) {
    if (store.timestamps.empty()) throw ConfigError("empty series");
    const std::int64_t t0 = store.timestamps.front();
    const std::int64_t tn = store.timestamps.back();
    SplitRange r;
    const std::int64_t cut =
        t0 + (4 * static_cast<std::int64_t>(store.timestamps.size()) / 5) * kStepSeconds;
    r.train_begin = t0;
    r.train_end = std::min(cut, tn);
    r.eval_begin = r.train_end + kStepSeconds;
    r.eval_end = tn;
    if (split.contains("train_begin")) r.train_begin = parse_time_field(split.at("train_begin"), t0);
    if (split.contains("train_end")) r.train_end = parse_time_field(split.at("train_end"), t0);
    if (split.contains("eval_begin")) r.eval_begin = parse_time_field(split.at("eval_begin"), t0);
    if (split.contains("eval_end")) r.eval_end = parse_time_field(split.at("eval_end"), t0);
    if (r.train_end < r.train_begin || r.eval_end < r.eval_begin)
        throw ConfigError("split ranges must be non-empty");
    return r;
}

// Smooth-threshold land mask with (approximately) the requested land fraction.
inline LandSeaMask synthetic_mask(int H, int W, double land_fraction, std::uint64_t seed) {
    LandSeaMask mask = LandSeaMask::all_ocean(H, W);
    if (land_fraction <= 0.0) return mask;
    std::mt19937_64 rng(seed ^ 0x6d61736bULL);
    const auto field = smooth_field(rng, H, W, 1.0);
    std::vector<double> sorted = field;
    std::sort(sorted.begin(), sorted.end());
    const size_t cut = std::min(sorted.size() - 1,
                                static_cast<size_t>(land_fraction * sorted.size()));
    const double thresh = sorted[cut];
    for (size_t s = 0; s < field.size(); ++s) mask.surface[s] = field[s] < thresh ? 0 : 1;
    bool any = false;
    for (auto v : mask.surface) any |= (v == 1);
    if (!any) mask.surface[0] = 1;
    return mask;
}

}  // namespace fuxio
