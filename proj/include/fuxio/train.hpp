#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fuxio/common.hpp"
#include "fuxio/loss.hpp"
#include "fuxio/mot.hpp"
#include "fuxio/net.hpp"
#include "fuxio/series.hpp"

namespace fuxio {

struct TrainConfig {
    std::string stage = "pretrain";  // pretrain | finetune
    int iterations = 2000;
    int batch_size = 1;
    double peak_lr = 2.5e-4;
    double floor_lr = 1e-8;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double mot_alpha = 0.99;
    int mot_k = 1;
    bool mot_enabled = true;            // false: woMoT (plain mean, no V updates)
    double merged_loss_weight = 1.0;
    double candidate_loss_weight = 1.0;
    int horizon = 4;                    // finetune rollout length
    std::uint64_t seed = 0;
    int checkpoint_every = 500;

    void validate() const {
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
        if (floor_lr >= peak_lr) throw ConfigError("floor learning rate must be below peak");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (horizon < 1) throw ConfigError("horizon must be >= 1");
        if (stage != "pretrain" && stage != "finetune")
            throw ConfigError("stage must be pretrain or finetune");
    }
};

// Cosine annealing: floor + (peak - floor)/2 * (1 + cos(pi * step/total)).
// Steps past the end clamp to the floor.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0) throw ConfigError("negative step");
    if (step >= cfg.iterations) return cfg.floor_lr;
    return cfg.floor_lr +
           0.5 * (cfg.peak_lr - cfg.floor_lr) *
               (1.0 + std::cos(M_PI * static_cast<double>(step) / cfg.iterations));
}

// ---------------------------------------------------------------------------
// Checkpoint: self-contained training state. Binary layout: magic, version,
// length-prefixed JSON header, then raw little-endian doubles for params,
// optimizer moments, and the selection matrix.
// ---------------------------------------------------------------------------
struct Checkpoint {
    static constexpr std::uint32_t kMagic = 0x4b435846;  // "FXCK"
    static constexpr std::uint32_t kVersion = 1;

    NetConfig net;
    TrainConfig train;
    LossConfig loss;
    int C = 0, H = 0, W = 0;
    std::uint64_t iteration = 0;
    std::string stage = "pretrain";
    std::vector<double> params, adam_m, adam_v;
    SelectionMatrix V;
    NormStats stats;
    std::string rng_state;
};

inline nlohmann::json net_config_to_json(const NetConfig& c) {
    return {{"latent_dim", c.latent_dim}, {"patch", c.patch},     {"blocks", c.blocks},
            {"window", c.window},         {"ffn_mult", c.ffn_mult}, {"heads", c.heads},
            {"spatial_embed_dim", c.spatial_embed_dim}, {"n_steps", c.n_steps}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig c;
    c.latent_dim = j.at("latent_dim");
    c.patch = j.at("patch");
    c.blocks = j.at("blocks");
    c.window = j.at("window");
    c.ffn_mult = j.at("ffn_mult");
    c.heads = j.at("heads");
    c.spatial_embed_dim = j.at("spatial_embed_dim");
    c.n_steps = j.at("n_steps");
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"stage", c.stage},
            {"iterations", c.iterations},
            {"batch_size", c.batch_size},
            {"peak_lr", c.peak_lr},
            {"floor_lr", c.floor_lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"mot_alpha", c.mot_alpha},
            {"mot_k", c.mot_k},
            {"mot_enabled", c.mot_enabled},
            {"merged_loss_weight", c.merged_loss_weight},
            {"candidate_loss_weight", c.candidate_loss_weight},
            {"horizon", c.horizon},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage = j.at("stage");
    c.iterations = j.at("iterations");
    c.batch_size = j.at("batch_size");
    c.peak_lr = j.at("peak_lr");
    c.floor_lr = j.at("floor_lr");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.weight_decay = j.at("weight_decay");
    c.grad_clip = j.at("grad_clip");
    c.mot_alpha = j.at("mot_alpha");
    c.mot_k = j.at("mot_k");
    c.mot_enabled = j.at("mot_enabled");
    c.merged_loss_weight = j.at("merged_loss_weight");
    c.candidate_loss_weight = j.at("candidate_loss_weight");
    c.horizon = j.at("horizon");
    c.seed = j.at("seed");
    c.checkpoint_every = j.at("checkpoint_every");
    return c;
}

inline nlohmann::json loss_config_to_json(const LossConfig& c) {
    return {{"epsilon", c.epsilon}, {"horizon", c.horizon}, {"discount", c.discount}};
}

inline LossConfig loss_config_from_json(const nlohmann::json& j) {
    LossConfig c;
    c.epsilon = j.at("epsilon");
    c.horizon = j.at("horizon");
    c.discount = j.at("discount");
    return c;
}

inline std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
    nlohmann::json j;
    j["net"] = net_config_to_json(cp.net);
    j["train"] = train_config_to_json(cp.train);
    j["loss"] = loss_config_to_json(cp.loss);
    j["dims"] = {{"C", cp.C}, {"H", cp.H}, {"W", cp.W}};
    j["iteration"] = cp.iteration;
    j["stage"] = cp.stage;
    j["n_params"] = cp.params.size();
    j["selection"] = {{"C", cp.V.C}, {"n", cp.V.n}, {"alpha", cp.V.alpha}, {"K", cp.V.K}};
    j["norm_stats"] = norm_stats_to_json(cp.stats);
    j["rng_state"] = cp.rng_state;
    const std::string header = j.dump();

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write checkpoint: " + path.string());
        const std::uint32_t magic = Checkpoint::kMagic, version = Checkpoint::kVersion;
        f.write(reinterpret_cast<const char*>(&magic), 4);
        f.write(reinterpret_cast<const char*>(&version), 4);
        const std::uint64_t len = header.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(header.data(), static_cast<std::streamsize>(header.size()));
        auto dump = [&](const std::vector<double>& v) {
            f.write(reinterpret_cast<const char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(double)));
        };
        dump(cp.params);
        dump(cp.adam_m);
        dump(cp.adam_v);
        dump(cp.V.values);
        if (!f) throw IoError("short write to checkpoint: " + path.string());
    }
    std::filesystem::rename(tmp, path);  // atomic replace
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());
    std::uint32_t magic = 0, version = 0;
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&magic), 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&len), 8);
    if (!f || magic != Checkpoint::kMagic)
        throw IoError("not a checkpoint file: " + path.string());
    if (version != Checkpoint::kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::string header(len, '\0');
    f.read(header.data(), static_cast<std::streamsize>(len));
    if (!f) throw IoError("truncated checkpoint header: " + path.string());
    Checkpoint cp;
    try {
        const auto j = nlohmann::json::parse(header);
        cp.net = net_config_from_json(j.at("net"));
        cp.train = train_config_from_json(j.at("train"));
        cp.loss = loss_config_from_json(j.at("loss"));
        cp.C = j.at("dims").at("C");
        cp.H = j.at("dims").at("H");
        cp.W = j.at("dims").at("W");
        cp.iteration = j.at("iteration");
        cp.stage = j.at("stage");
        cp.stats = norm_stats_from_json(j.at("norm_stats"));
        cp.rng_state = j.at("rng_state");
        const auto& js = j.at("selection");
        cp.V = SelectionMatrix::uniform(js.at("C"), js.at("n"), js.at("alpha"), js.at("K"));
        const std::uint64_t n_params = j.at("n_params");
        cp.params.resize(n_params);
        cp.adam_m.resize(n_params);
        cp.adam_v.resize(n_params);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header: " + std::string(e.what()));
    }
    auto slurp = [&](std::vector<double>& v) {
        f.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    };
    slurp(cp.params);
    slurp(cp.adam_m);
    slurp(cp.adam_v);
    slurp(cp.V.values);
    if (!f) throw IoError("truncated checkpoint payload: " + path.string());
    return cp;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm gradient clipping.
// ---------------------------------------------------------------------------
struct AdamW {
    std::vector<double> m, v;
    std::uint64_t t = 0;

    void init(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }

    void step(std::vector<double>& params, std::vector<double>& grads, double lr,
              const TrainConfig& cfg) {
        ++t;
        if (cfg.grad_clip > 0.0) {
            double ss = 0.0;
            for (double g : grads) ss += g * g;
            const double norm = std::sqrt(ss);
            if (norm > cfg.grad_clip) {
                const double s = cfg.grad_clip / norm;
                for (double& g : grads) g *= s;
            }
        }
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            params[i] -= lr * (mh / (std::sqrt(vh) + 1e-8) + cfg.weight_decay * params[i]);
        }
    }
};

// ---------------------------------------------------------------------------
// TrainEngine: two-stage optimization over a SeriesStore. Single-writer on
// (params, optimizer state, V); data access is read-only.
// ---------------------------------------------------------------------------
class TrainEngine {
public:
    // Called once per rollout step with the chronological window contents
    // (oldest first) before the forward pass.
    using Instrument = std::function<void(int step, const std::vector<std::vector<double>>&)>;

    TrainEngine(const SeriesStore& store, NormStats stats, NetConfig net_cfg, TrainConfig tcfg,
                LossConfig lcfg, std::int64_t train_t_begin, std::int64_t train_t_end)
        : store_(store), stats_(std::move(stats)), net_cfg_(net_cfg), tcfg_(tcfg), lcfg_(lcfg),
          model_(net_cfg, store.C(), store.H(), store.W()),
          weights_(latitude_weights(store.grid.latitudes)), rng_(tcfg.seed) {
        tcfg_.validate();
        lcfg_.validate();
        params_ = model_.init_params(tcfg.seed);
        adam_.init(params_.size());
        V_ = SelectionMatrix::uniform(store.C(), net_cfg.n_steps, tcfg.mot_alpha, tcfg.mot_k);
        build_sample_index(train_t_begin, train_t_end);
    }

    // Resume from a checkpoint (stage and iteration continue from it).
    TrainEngine(const SeriesStore& store, const Checkpoint& cp, std::int64_t train_t_begin,
                std::int64_t train_t_end)
        : store_(store), stats_(cp.stats), net_cfg_(cp.net), tcfg_(cp.train), lcfg_(cp.loss),
          model_(cp.net, store.C(), store.H(), store.W()),
          weights_(latitude_weights(store.grid.latitudes)), rng_(cp.train.seed) {
        params_ = cp.params;
        adam_.m = cp.adam_m;
        adam_.v = cp.adam_v;
        adam_.t = cp.iteration;
        iteration_ = cp.iteration;
        V_ = cp.V;
        std::istringstream ss(cp.rng_state);
        ss >> rng_;
        build_sample_index(train_t_begin, train_t_end);
    }

    const std::vector<double>& parameters() const { return params_; }
    const SelectionMatrix& selection() const { return V_; }
    const ForecastModel& model() const { return model_; }
    const NormStats& norm_stats() const { return stats_; }
    std::uint64_t iteration() const { return iteration_; }
    const std::vector<double>& loss_history() const { return loss_history_; }

    // Switch stage (pretrain checkpoint -> finetune) keeping model state.
    void set_stage(const std::string& stage, int iterations, int horizon) {
        tcfg_.stage = stage;
        tcfg_.iterations = iterations;
        if (horizon > 0) tcfg_.horizon = horizon;
        tcfg_.validate();
        iteration_ = 0;
        adam_.t = 0;
        loss_history_.clear();
        // the horizon shrinks the valid sample range
        build_sample_index(range_begin_, range_end_);
    }

    double run_iteration(const Instrument* instrument = nullptr) {
        const bool multi = tcfg_.stage == "finetune";
        const int horizon = multi ? tcfg_.horizon : 1;
        std::vector<double> grads(params_.size(), 0.0);
        double total_loss = 0.0;
        for (int b = 0; b < tcfg_.batch_size; ++b)
            total_loss += rollout_step(horizon, grads, instrument);
        total_loss /= tcfg_.batch_size;
        if (!std::isfinite(total_loss))
            throw NumericError("non-finite loss at iteration " + std::to_string(iteration_));
        if (tcfg_.batch_size > 1)
            for (double& g : grads) g /= tcfg_.batch_size;
        const double lr = lr_at(static_cast<int>(iteration_), tcfg_);
        adam_.step(params_, grads, lr, tcfg_);
        ++iteration_;
        loss_history_.push_back(total_loss);
        return total_loss;
    }

    void run(const std::filesystem::path& log_path, const std::filesystem::path& ckpt_dir = {}) {
        std::ofstream log;
        if (!log_path.empty()) {
            const bool fresh = !std::filesystem::exists(log_path);
            log.open(log_path, std::ios::app);
            if (!log) throw IoError("cannot open log: " + log_path.string());
            if (fresh) log << "iteration,lr,loss,stage\n";
        }
        while (iteration_ < static_cast<std::uint64_t>(tcfg_.iterations)) {
            const double lr = lr_at(static_cast<int>(iteration_), tcfg_);
            const double loss = run_iteration();
            if (log)
                log << iteration_ << ',' << lr << ',' << loss << ',' << tcfg_.stage << '\n';
            if (!ckpt_dir.empty() && tcfg_.checkpoint_every > 0 &&
                iteration_ % tcfg_.checkpoint_every == 0)
                save_checkpoint(make_checkpoint(), ckpt_dir / "checkpoint_latest.bin");
        }
    }

    Checkpoint make_checkpoint() const {
        Checkpoint cp;
        cp.net = net_cfg_;
        cp.train = tcfg_;
        cp.loss = lcfg_;
        cp.C = store_.C();
        cp.H = store_.H();
        cp.W = store_.W();
        cp.iteration = iteration_;
        cp.stage = tcfg_.stage;
        cp.params = params_;
        cp.adam_m = adam_.m;
        cp.adam_v = adam_.v;
        cp.V = V_;
        cp.stats = stats_;
        std::ostringstream ss;
        ss << rng_;
        cp.rng_state = ss.str();
        return cp;
    }

private:
    const SeriesStore& store_;
    NormStats stats_;
    NetConfig net_cfg_;
    TrainConfig tcfg_;
    LossConfig lcfg_;
    ForecastModel model_;
    LatitudeWeights weights_;
    std::mt19937_64 rng_;
    std::vector<double> params_;
    AdamW adam_;
    SelectionMatrix V_;
    std::uint64_t iteration_ = 0;
    std::vector<double> loss_history_;
    std::vector<std::int64_t> valid_inits_;  // timestamps t usable as window heads
    std::int64_t range_begin_ = 0, range_end_ = 0;

    void build_sample_index(std::int64_t t_begin, std::int64_t t_end) {
        range_begin_ = t_begin;
        range_end_ = t_end;
        const int horizon = tcfg_.stage == "finetune" ? tcfg_.horizon : 1;
        valid_inits_.clear();
        for (std::int64_t t : store_.timestamps) {
            if (t < t_begin || t > t_end) continue;
            if (!store_.index_of(t - 3 * kStepSeconds)) continue;
            if (!store_.index_of(t + horizon * kStepSeconds)) continue;
            if (t + horizon * kStepSeconds > t_end) continue;
            valid_inits_.push_back(t);
        }
        if (valid_inits_.empty()) throw ConfigError("no valid training windows in range");
    }

    // One sample: rollout of `horizon` merged steps with BPTT. Returns the
    // scalar loss; accumulates parameter gradients.
    double rollout_step(int horizon, std::vector<double>& grads, const Instrument* instrument) {
        const int N = net_cfg_.n_steps;
        std::uniform_int_distribution<size_t> pick(0, valid_inits_.size() - 1);
        const std::int64_t t0 = valid_inits_[pick(rng_)];
        const SampleWindow w0 = make_window(store_, stats_, t0);

        // chronological window; provenance: -1 = ground truth, else rollout step
        std::deque<std::vector<double>> window(w0.inputs.begin(), w0.inputs.end());
        std::deque<int> prov(kInputSteps, -1);

        struct StepRecord {
            ForwardCache cache;
            TopKSelector selector;
            std::vector<double> merged;
            std::vector<int> prov;  // provenance of its N inputs, skip-indexed
        };
        std::vector<StepRecord> recs(horizon);
        std::vector<std::vector<double>> targets(horizon);
        std::vector<std::vector<double>> merged_preds(horizon);

        for (int k = 0; k < horizon; ++k) {
            const std::int64_t t = t0 + k * kStepSeconds;
            if (instrument) {
                std::vector<std::vector<double>> snap(window.begin(), window.end());
                (*instrument)(k, snap);
            }
            auto& rec = recs[k];
            std::vector<const double*> by_skip(N);
            rec.prov.resize(N);
            for (int i = 0; i < N; ++i) {
                by_skip[i] = window[window.size() - 1 - i].data();
                rec.prov[i] = prov[prov.size() - 1 - i];
            }
            const auto signals = ContextSignals::at(t, store_.grid, store_.mask);
            model_.forward(by_skip, signals, params_.data(), store_.mask, store_.layout,
                           rec.cache);
            rec.selector = tcfg_.mot_enabled ? topk_select(V_) : all_ones_selector();
            const int K = tcfg_.mot_enabled ? V_.K : N;
            rec.merged =
                merge_candidates(rec.cache.candidates, rec.selector, K, store_.mask, store_.layout);
            merged_preds[k] = rec.merged;
            const auto tgt_idx = store_.index_of(t + kStepSeconds);
            targets[k] = normalize_step(store_.steps[*tgt_idx], store_, stats_);
            window.pop_front();
            window.push_back(rec.merged);
            prov.pop_front();
            prov.push_back(k);
        }

        // multi-step loss on merged predictions
        std::vector<std::vector<double>> dmerged;
        LossConfig lc = lcfg_;
        lc.horizon = std::max(lc.horizon, horizon);
        double loss =
            tcfg_.merged_loss_weight * multi_step_loss(merged_preds, targets, lc, weights_,
                                                       store_.mask, store_.layout, &dmerged);
        for (auto& g : dmerged)
            for (double& v : g) v *= tcfg_.merged_loss_weight;

        // auxiliary per-candidate terms on step 1 (weight/horizon per candidate)
        std::vector<std::vector<double>> dcand0(N);
        if (tcfg_.candidate_loss_weight > 0.0) {
            const double cw = tcfg_.candidate_loss_weight / horizon;
            for (int i = 0; i < N; ++i) {
                std::vector<double> g;
                loss += cw * charbonnier_loss(recs[0].cache.candidates.fields[i], targets[0],
                                              weights_, store_.mask, store_.layout, lcfg_.epsilon,
                                              &g);
                for (double& v : g) v *= cw;
                dcand0[i] = std::move(g);
            }
        }

        // BPTT: walk steps in reverse, routing input-state gradients back to
        // the producing step's merged output.
        std::vector<std::vector<double>> carry(horizon);  // extra grad on merged_k
        const size_t field_size = targets[0].size();
        for (int k = horizon - 1; k >= 0; --k) {
            auto& rec = recs[k];
            std::vector<double> dm = dmerged[k];
            if (!carry[k].empty())
                for (size_t i = 0; i < field_size; ++i) dm[i] += carry[k][i];
            CandidateSet gc;
            gc.n = N;
            gc.C = store_.C();
            gc.H = store_.H();
            gc.W = store_.W();
            gc.fields.assign(N, std::vector<double>(field_size, 0.0));
            const int K = tcfg_.mot_enabled ? V_.K : N;
            merge_backward(rec.selector, K, store_.mask, store_.layout, dm, gc);
            if (k == 0 && tcfg_.candidate_loss_weight > 0.0)
                for (int i = 0; i < N; ++i)
                    for (size_t j = 0; j < field_size; ++j) gc.fields[i][j] += dcand0[i][j];
            const bool need_state_grads =
                std::any_of(rec.prov.begin(), rec.prov.end(), [](int p) { return p >= 0; });
            std::vector<std::vector<double>> dstates;
            if (need_state_grads) dstates.assign(N, std::vector<double>(field_size, 0.0));
            model_.backward(rec.cache, params_.data(), gc, store_.mask, store_.layout,
                            grads.data(), need_state_grads ? &dstates : nullptr);
            if (need_state_grads)
                for (int i = 0; i < N; ++i) {
                    const int src = rec.prov[i];
                    if (src < 0) continue;
                    if (carry[src].empty()) carry[src].assign(field_size, 0.0);
                    for (size_t j = 0; j < field_size; ++j) carry[src][j] += dstates[i][j];
                }
        }

        // EMA reliability update from the single-step candidates, after the
        // gradient computation (V is frozen within the step).
        if (tcfg_.mot_enabled)
            V_ = update_selection(V_, recs[0].cache.candidates, targets[0], store_.mask,
                                  store_.layout);
        return loss;
    }

    TopKSelector all_ones_selector() const {
        TopKSelector sel;
        sel.C = store_.C();
        sel.n = net_cfg_.n_steps;
        sel.K = sel.n;
        sel.ones.assign(static_cast<size_t>(sel.C) * sel.n, 1);
        return sel;
    }
};

}  // namespace fuxio
