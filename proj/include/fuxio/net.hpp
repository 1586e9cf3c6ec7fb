#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "fuxio/common.hpp"
#include "fuxio/grid.hpp"
#include "fuxio/net_types.hpp"

namespace fuxio {

// ---------------------------------------------------------------------------
// Dense helpers. Linear convention: y = W x + b, W row-major [Dout][Din].
// Backward variants accumulate into their gradient arguments.
// ---------------------------------------------------------------------------
inline void linear(const double* W, const double* b, const double* x, int Dout, int Din,
                   double* y) {
    for (int o = 0; o < Dout; ++o) {
        double acc = b ? b[o] : 0.0;
        const double* row = W + static_cast<size_t>(o) * Din;
        for (int i = 0; i < Din; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

inline void linear_backward(const double* W, const double* x, const double* dy, int Dout, int Din,
                            double* dW, double* db, double* dx) {
    for (int o = 0; o < Dout; ++o) {
        const double g = dy[o];
        if (db) db[o] += g;
        double* dWrow = dW ? dW + static_cast<size_t>(o) * Din : nullptr;
        const double* Wrow = W + static_cast<size_t>(o) * Din;
        for (int i = 0; i < Din; ++i) {
            if (dWrow) dWrow[i] += g * x[i];
            if (dx) dx[i] += g * Wrow[i];
        }
    }
}

constexpr double kLnEps = 1e-5;

// Per-token layer norm over D channels with elementwise gamma/beta.
// Caches xhat and 1/sigma for the backward pass.
inline void ln_forward(const double* x, int S, int D, const double* gamma, const double* beta,
                       double* out, double* rstd, double* xhat) {
    for (int s = 0; s < S; ++s) {
        const double* xs = x + static_cast<size_t>(s) * D;
        double mean = 0.0;
        for (int d = 0; d < D; ++d) mean += xs[d];
        mean /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) var += (xs[d] - mean) * (xs[d] - mean);
        var /= D;
        const double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[s] = r;
        double* xh = xhat + static_cast<size_t>(s) * D;
        double* os = out + static_cast<size_t>(s) * D;
        for (int d = 0; d < D; ++d) {
            xh[d] = (xs[d] - mean) * r;
            os[d] = gamma[d] * xh[d] + beta[d];
        }
    }
}

inline void ln_backward(const double* dout, const double* xhat, const double* rstd,
                        const double* gamma, int S, int D, double* dx, double* dgamma,
                        double* dbeta) {
    std::vector<double> dxh(D);
    for (int s = 0; s < S; ++s) {
        const double* dos = dout + static_cast<size_t>(s) * D;
        const double* xh = xhat + static_cast<size_t>(s) * D;
        double m1 = 0.0, m2 = 0.0;
        for (int d = 0; d < D; ++d) {
            if (dgamma) dgamma[d] += dos[d] * xh[d];
            if (dbeta) dbeta[d] += dos[d];
            dxh[d] = dos[d] * gamma[d];
            m1 += dxh[d];
            m2 += dxh[d] * xh[d];
        }
        m1 /= D;
        m2 /= D;
        double* dxs = dx + static_cast<size_t>(s) * D;
        for (int d = 0; d < D; ++d) dxs[d] += rstd[s] * (dxh[d] - m1 - xh[d] * m2);
    }
}

// ---------------------------------------------------------------------------
// Parameter layout: every tensor lives in one flat double vector at a fixed
// offset, which keeps the optimizer, checkpointing, and finite-difference
// probing trivial.
// ---------------------------------------------------------------------------
struct BlockOffsets {
    size_t ada1_w, ada1_b, qkv_w, qkv_b, proj_w, proj_b, ada2_w, ada2_b, f1_w, f1_b, f2_w, f2_b;
};

struct ParamLayout {
    static constexpr int kTemporalDim = 16;  // 4 sinusoid frequencies x sin/cos x {phase, doy}

    int C, H, W, Cp, P, Hp, Wp, S, B, win, heads, Fm, E, N;

    size_t prior_embed, prior_w1, prior_b1, prior_w2, prior_b2, prior_mw, prior_mb;
    size_t enc_w, enc_b, enc_lng, enc_lnb;
    size_t fuse_w, fuse_b, fuse_lng, fuse_lnb;
    std::vector<BlockOffsets> blocks;
    size_t skip_w, skip_b, dec_lng, dec_lnb, dec_w, dec_b;
    size_t total = 0;

    int prior_in_dim() const { return E + 1 + kTemporalDim; }

    ParamLayout(const NetConfig& cfg, int C_, int H_, int W_)
        : C(C_), H(H_), W(W_), Cp(cfg.latent_dim), P(cfg.patch), B(cfg.blocks),
          win(cfg.window), heads(cfg.heads), Fm(cfg.ffn_mult), E(cfg.spatial_embed_dim),
          N(cfg.n_steps) {
        cfg.check_grid(H, W);
        Hp = H / P;
        Wp = W / P;
        S = Hp * Wp;
        size_t off = 0;
        auto alloc = [&](size_t n) {
            const size_t o = off;
            off += n;
            return o;
        };
        const int Din = prior_in_dim();
        prior_embed = alloc(static_cast<size_t>(E) * S);
        prior_w1 = alloc(static_cast<size_t>(Cp) * Din);
        prior_b1 = alloc(Cp);
        prior_w2 = alloc(static_cast<size_t>(Cp) * Cp);
        prior_b2 = alloc(Cp);
        prior_mw = alloc(static_cast<size_t>(Cp) * Cp);
        prior_mb = alloc(Cp);
        enc_w = alloc(static_cast<size_t>(Cp) * C * P * P);
        enc_b = alloc(Cp);
        enc_lng = alloc(Cp);
        enc_lnb = alloc(Cp);
        fuse_w = alloc(static_cast<size_t>(Cp) * N * Cp);
        fuse_b = alloc(Cp);
        fuse_lng = alloc(Cp);
        fuse_lnb = alloc(Cp);
        blocks.resize(B);
        for (auto& bo : blocks) {
            bo.ada1_w = alloc(static_cast<size_t>(2) * Cp * Cp);
            bo.ada1_b = alloc(2 * Cp);
            bo.qkv_w = alloc(static_cast<size_t>(3) * Cp * Cp);
            bo.qkv_b = alloc(3 * Cp);
            bo.proj_w = alloc(static_cast<size_t>(Cp) * Cp);
            bo.proj_b = alloc(Cp);
            bo.ada2_w = alloc(static_cast<size_t>(2) * Cp * Cp);
            bo.ada2_b = alloc(2 * Cp);
            bo.f1_w = alloc(static_cast<size_t>(Fm) * Cp * Cp);
            bo.f1_b = alloc(static_cast<size_t>(Fm) * Cp);
            bo.f2_w = alloc(static_cast<size_t>(Cp) * Fm * Cp);
            bo.f2_b = alloc(Cp);
        }
        skip_w = alloc(static_cast<size_t>(Cp) * 2 * Cp);
        skip_b = alloc(Cp);
        dec_lng = alloc(Cp);
        dec_lnb = alloc(Cp);
        dec_w = alloc(static_cast<size_t>(Cp) * C * P * P);
        dec_b = alloc(C);
        total = off;
    }
};

// ---------------------------------------------------------------------------
// Forward caches
// ---------------------------------------------------------------------------
struct PriorCache {
    std::array<double, ParamLayout::kTemporalDim> tfeat{};
    std::vector<double> bathy;   // S, patch-pooled land fraction
    std::vector<double> h_pre;   // S x Cp
    std::vector<double> h_act;   // S x Cp
    ContextFeatures ctx;
};

struct EncodeCache {
    std::vector<double> input;  // C*H*W copy
    std::vector<double> raw;    // S x Cp, conv response without bias/modulation
    std::vector<double> pre;    // S x Cp, pre-LN
    std::vector<double> rstd;   // S
    std::vector<double> xhat;   // S x Cp
};

struct BlockCache {
    std::vector<double> x_in;
    std::vector<double> rstd1, xhat1;  // AdaLN 1
    std::vector<double> a1;
    std::vector<double> qkv;     // S x 3Cp
    std::vector<double> probs;   // n_windows x heads x n x n
    std::vector<double> attn;    // S x Cp, pre out-projection
    std::vector<double> x_mid;
    std::vector<double> rstd2, xhat2;
    std::vector<double> a2;
    std::vector<double> ffn_pre;  // S x Fm*Cp
    std::vector<double> ffn_act;
    std::vector<double> x_out;
};

struct DecodeCache {
    std::vector<std::vector<double>> proj_pre;  // per candidate, S x Cp
    std::vector<std::vector<double>> rstd;
    std::vector<std::vector<double>> xhat;
    std::vector<std::vector<double>> proj_out;
};

struct ForwardCache {
    PriorCache prior;
    std::vector<EncodeCache> enc;               // N, indexed by temporal skip i
    std::vector<std::vector<double>> latents;   // N x (S x Cp)
    std::vector<double> fuse_pre;
    std::vector<double> fuse_rstd, fuse_xhat;
    std::vector<double> fused;
    std::vector<BlockCache> blocks;
    std::vector<double> predicted;
    DecodeCache dec;
    CandidateSet candidates;
};

// ---------------------------------------------------------------------------
// ForecastModel: context prior -> modulated patch encoder (x N) -> temporal
// fusion -> windowed attention blocks with AdaLN -> shared decoder emitting
// one candidate per temporal skip. All math in double; analytic backward for
// every stage, including gradients w.r.t. the input states (needed for
// backprop through autoregressive rollouts).
// ---------------------------------------------------------------------------
class ForecastModel {
public:
    ForecastModel(NetConfig cfg, int C, int H, int W)
        : cfg_(cfg), layout_(cfg, C, H, W) {
        build_windows();
    }

    const ParamLayout& params() const { return layout_; }
    const NetConfig& config() const { return cfg_; }
    size_t param_count() const { return layout_.total; }

    // Truncated normal (std 0.02) for projections; zeros for AdaLN generators
    // and residual-branch output projections so each block starts as the
    // identity map; unit gamma for layer norms.
    std::vector<double> init_params(std::uint64_t seed) const {
        const ParamLayout& L = layout_;
        std::vector<double> p(L.total, 0.0);
        std::mt19937_64 rng(seed);
        auto fill = [&](size_t off, size_t n) {
            for (size_t i = 0; i < n; ++i) p[off + i] = trunc_normal(rng, 0.02);
        };
        auto ones = [&](size_t off, size_t n) {
            for (size_t i = 0; i < n; ++i) p[off + i] = 1.0;
        };
        fill(L.prior_embed, static_cast<size_t>(L.E) * L.S);
        fill(L.prior_w1, static_cast<size_t>(L.Cp) * L.prior_in_dim());
        fill(L.prior_w2, static_cast<size_t>(L.Cp) * L.Cp);
        fill(L.prior_mw, static_cast<size_t>(L.Cp) * L.Cp);
        fill(L.enc_w, static_cast<size_t>(L.Cp) * L.C * L.P * L.P);
        ones(L.enc_lng, L.Cp);
        fill(L.fuse_w, static_cast<size_t>(L.Cp) * L.N * L.Cp);
        ones(L.fuse_lng, L.Cp);
        for (const auto& bo : L.blocks) {
            fill(bo.qkv_w, static_cast<size_t>(3) * L.Cp * L.Cp);
            fill(bo.f1_w, static_cast<size_t>(L.Fm) * L.Cp * L.Cp);
            // ada*_w/b, proj_w/b, f2_w/b stay zero
        }
        fill(L.skip_w, static_cast<size_t>(L.Cp) * 2 * L.Cp);
        ones(L.dec_lng, L.Cp);
        fill(L.dec_w, static_cast<size_t>(L.Cp) * L.C * L.P * L.P);
        return p;
    }

    // ---- stage 1: context prior --------------------------------------------
    static void temporal_features(int phase, int day_of_year,
                                  std::array<double, ParamLayout::kTemporalDim>& out) {
        for (int k = 0; k < 4; ++k) {
            const double a = 2.0 * M_PI * phase * (k + 1) / 4.0;
            out[2 * k] = std::sin(a);
            out[2 * k + 1] = std::cos(a);
        }
        for (int m = 0; m < 4; ++m) {
            const double a = 2.0 * M_PI * day_of_year * (m + 1) / 365.25;
            out[8 + 2 * m] = std::sin(a);
            out[8 + 2 * m + 1] = std::cos(a);
        }
    }

    void encode_prior(const ContextSignals& signals, const double* p, PriorCache& cache) const {
        signals.validate();
        const ParamLayout& L = layout_;
        if (signals.land.size() != static_cast<size_t>(L.H) * L.W)
            throw ShapeError("context signals do not match the grid");
        temporal_features(signals.phase, signals.day_of_year, cache.tfeat);
        cache.bathy.assign(L.S, 0.0);
        for (int ph = 0; ph < L.Hp; ++ph)
            for (int pw = 0; pw < L.Wp; ++pw) {
                double acc = 0.0;
                for (int u = 0; u < L.P; ++u)
                    for (int v = 0; v < L.P; ++v)
                        acc += signals.land[static_cast<size_t>(ph * L.P + u) * L.W + pw * L.P + v];
                cache.bathy[static_cast<size_t>(ph) * L.Wp + pw] = acc / (L.P * L.P);
            }
        const int Din = L.prior_in_dim();
        cache.h_pre.resize(static_cast<size_t>(L.S) * L.Cp);
        cache.h_act.resize(static_cast<size_t>(L.S) * L.Cp);
        cache.ctx.Hp = L.Hp;
        cache.ctx.Wp = L.Wp;
        cache.ctx.Cp = L.Cp;
        cache.ctx.field.assign(static_cast<size_t>(L.S) * L.Cp, 0.0);
        std::vector<double> in(Din);
        for (int s = 0; s < L.S; ++s) {
            for (int e = 0; e < L.E; ++e) in[e] = p[L.prior_embed + static_cast<size_t>(e) * L.S + s];
            in[L.E] = cache.bathy[s];
            for (int t = 0; t < ParamLayout::kTemporalDim; ++t) in[L.E + 1 + t] = cache.tfeat[t];
            double* hp = &cache.h_pre[static_cast<size_t>(s) * L.Cp];
            double* ha = &cache.h_act[static_cast<size_t>(s) * L.Cp];
            linear(p + L.prior_w1, p + L.prior_b1, in.data(), L.Cp, Din, hp);
            for (int k = 0; k < L.Cp; ++k) ha[k] = gelu(hp[k]);
            linear(p + L.prior_w2, p + L.prior_b2, ha, L.Cp,
                   L.Cp, &cache.ctx.field[static_cast<size_t>(s) * L.Cp]);
        }
        cache.ctx.pooled.assign(L.Cp, 0.0);
        for (int s = 0; s < L.S; ++s)
            for (int k = 0; k < L.Cp; ++k)
                cache.ctx.pooled[k] += cache.ctx.field[static_cast<size_t>(s) * L.Cp + k] / L.S;
        cache.ctx.modulation.assign(L.Cp, 0.0);
        linear(p + L.prior_mw, p + L.prior_mb, cache.ctx.pooled.data(), L.Cp, L.Cp,
               cache.ctx.modulation.data());
    }

    // dfield/dpooled/dmod are gradients flowing back into the prior outputs.
    void encode_prior_backward(const PriorCache& cache, const double* p,
                               const std::vector<double>& dpooled,
                               const std::vector<double>& dmod, double* dp) const {
        const ParamLayout& L = layout_;
        const int Din = L.prior_in_dim();
        std::vector<double> dmu(L.Cp, 0.0);
        for (int k = 0; k < L.Cp; ++k) dmu[k] = dpooled[k];
        linear_backward(p + L.prior_mw, cache.ctx.pooled.data(), dmod.data(), L.Cp, L.Cp,
                        dp + L.prior_mw, dp + L.prior_mb, dmu.data());
        std::vector<double> dfield_s(L.Cp), dh_act(L.Cp), dh_pre(L.Cp), din(Din), in(Din);
        for (int s = 0; s < L.S; ++s) {
            for (int k = 0; k < L.Cp; ++k) dfield_s[k] = dmu[k] / L.S;
            const double* ha = &cache.h_act[static_cast<size_t>(s) * L.Cp];
            const double* hp = &cache.h_pre[static_cast<size_t>(s) * L.Cp];
            std::fill(dh_act.begin(), dh_act.end(), 0.0);
            linear_backward(p + L.prior_w2, ha, dfield_s.data(), L.Cp, L.Cp, dp + L.prior_w2,
                            dp + L.prior_b2, dh_act.data());
            for (int k = 0; k < L.Cp; ++k) dh_pre[k] = dh_act[k] * gelu_grad(hp[k]);
            for (int e = 0; e < L.E; ++e) in[e] = p[L.prior_embed + static_cast<size_t>(e) * L.S + s];
            in[L.E] = cache.bathy[s];
            for (int t = 0; t < ParamLayout::kTemporalDim; ++t) in[L.E + 1 + t] = cache.tfeat[t];
            std::fill(din.begin(), din.end(), 0.0);
            linear_backward(p + L.prior_w1, in.data(), dh_pre.data(), L.Cp, Din, dp + L.prior_w1,
                            dp + L.prior_b1, din.data());
            for (int e = 0; e < L.E; ++e)
                dp[L.prior_embed + static_cast<size_t>(e) * L.S + s] += din[e];
        }
    }

    // ---- stage 2: modulated patch encoder -----------------------------------
    void encode_state(const double* state, const ContextFeatures& ctx, const double* p,
                      EncodeCache& cache, std::vector<double>& latent) const {
        const ParamLayout& L = layout_;
        cache.input.assign(state, state + static_cast<size_t>(L.C) * L.H * L.W);
        cache.raw.assign(static_cast<size_t>(L.S) * L.Cp, 0.0);
        cache.pre.resize(static_cast<size_t>(L.S) * L.Cp);
        for (int ph = 0; ph < L.Hp; ++ph)
            for (int pw = 0; pw < L.Wp; ++pw) {
                const int s = ph * L.Wp + pw;
                double* raw = &cache.raw[static_cast<size_t>(s) * L.Cp];
                for (int k = 0; k < L.Cp; ++k) {
                    double acc = 0.0;
                    const double* wk = p + L.enc_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                    for (int c = 0; c < L.C; ++c)
                        for (int u = 0; u < L.P; ++u) {
                            const double* row =
                                state + (static_cast<size_t>(c) * L.H + ph * L.P + u) * L.W +
                                pw * L.P;
                            const double* wrow = wk + (static_cast<size_t>(c) * L.P + u) * L.P;
                            for (int v = 0; v < L.P; ++v) acc += wrow[v] * row[v];
                        }
                    raw[k] = acc;
                    cache.pre[static_cast<size_t>(s) * L.Cp + k] =
                        p[L.enc_b + k] + (1.0 + ctx.modulation[k]) * acc;
                }
            }
        cache.rstd.resize(L.S);
        cache.xhat.resize(static_cast<size_t>(L.S) * L.Cp);
        latent.resize(static_cast<size_t>(L.S) * L.Cp);
        ln_forward(cache.pre.data(), L.S, L.Cp, p + L.enc_lng, p + L.enc_lnb, latent.data(),
                   cache.rstd.data(), cache.xhat.data());
    }

    void encode_state_backward(const EncodeCache& cache, const ContextFeatures& ctx,
                               const double* p, const std::vector<double>& dlatent, double* dp,
                               std::vector<double>* dmod, std::vector<double>* dstate) const {
        const ParamLayout& L = layout_;
        std::vector<double> dpre(static_cast<size_t>(L.S) * L.Cp, 0.0);
        ln_backward(dlatent.data(), cache.xhat.data(), cache.rstd.data(), p + L.enc_lng, L.S, L.Cp,
                    dpre.data(), dp + L.enc_lng, dp + L.enc_lnb);
        for (int ph = 0; ph < L.Hp; ++ph)
            for (int pw = 0; pw < L.Wp; ++pw) {
                const int s = ph * L.Wp + pw;
                const double* dpres = &dpre[static_cast<size_t>(s) * L.Cp];
                const double* raw = &cache.raw[static_cast<size_t>(s) * L.Cp];
                for (int k = 0; k < L.Cp; ++k) {
                    const double g = dpres[k];
                    dp[L.enc_b + k] += g;
                    if (dmod) (*dmod)[k] += g * raw[k];
                    const double gscaled = g * (1.0 + ctx.modulation[k]);
                    const double* wk = p + L.enc_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                    double* dwk = dp + L.enc_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                    for (int c = 0; c < L.C; ++c)
                        for (int u = 0; u < L.P; ++u) {
                            const size_t xoff =
                                (static_cast<size_t>(c) * L.H + ph * L.P + u) * L.W + pw * L.P;
                            const size_t woff = (static_cast<size_t>(c) * L.P + u) * L.P;
                            for (int v = 0; v < L.P; ++v) {
                                dwk[woff + v] += gscaled * cache.input[xoff + v];
                                if (dstate) (*dstate)[xoff + v] += gscaled * wk[woff + v];
                            }
                        }
                }
            }
    }

    // ---- stage 3: temporal fusion -------------------------------------------
    void fuse_temporal(const std::vector<std::vector<double>>& latents, const double* p,
                       ForwardCache& cache) const {
        const ParamLayout& L = layout_;
        if (static_cast<int>(latents.size()) != L.N) throw ShapeError("expected N temporal latents");
        for (const auto& l : latents)
            if (l.size() != static_cast<size_t>(L.S) * L.Cp)
                throw ShapeError("latent shape mismatch in fusion");
        cache.fuse_pre.resize(static_cast<size_t>(L.S) * L.Cp);
        std::vector<double> cat(static_cast<size_t>(L.N) * L.Cp);
        for (int s = 0; s < L.S; ++s) {
            for (int i = 0; i < L.N; ++i)
                std::memcpy(&cat[static_cast<size_t>(i) * L.Cp],
                            &latents[i][static_cast<size_t>(s) * L.Cp], L.Cp * sizeof(double));
            linear(p + L.fuse_w, p + L.fuse_b, cat.data(), L.Cp, L.N * L.Cp,
                   &cache.fuse_pre[static_cast<size_t>(s) * L.Cp]);
        }
        cache.fuse_rstd.resize(L.S);
        cache.fuse_xhat.resize(static_cast<size_t>(L.S) * L.Cp);
        cache.fused.resize(static_cast<size_t>(L.S) * L.Cp);
        ln_forward(cache.fuse_pre.data(), L.S, L.Cp, p + L.fuse_lng, p + L.fuse_lnb,
                   cache.fused.data(), cache.fuse_rstd.data(), cache.fuse_xhat.data());
    }

    void fuse_backward(const ForwardCache& cache, const double* p,
                       const std::vector<double>& dfused, double* dp,
                       std::vector<std::vector<double>>& dlatents) const {
        const ParamLayout& L = layout_;
        std::vector<double> dpre(static_cast<size_t>(L.S) * L.Cp, 0.0);
        ln_backward(dfused.data(), cache.fuse_xhat.data(), cache.fuse_rstd.data(), p + L.fuse_lng,
                    L.S, L.Cp, dpre.data(), dp + L.fuse_lng, dp + L.fuse_lnb);
        std::vector<double> cat(static_cast<size_t>(L.N) * L.Cp), dcat(static_cast<size_t>(L.N) * L.Cp);
        for (int s = 0; s < L.S; ++s) {
            for (int i = 0; i < L.N; ++i)
                std::memcpy(&cat[static_cast<size_t>(i) * L.Cp],
                            &cache.latents[i][static_cast<size_t>(s) * L.Cp],
                            L.Cp * sizeof(double));
            std::fill(dcat.begin(), dcat.end(), 0.0);
            linear_backward(p + L.fuse_w, cat.data(), &dpre[static_cast<size_t>(s) * L.Cp], L.Cp,
                            L.N * L.Cp, dp + L.fuse_w, dp + L.fuse_b, dcat.data());
            for (int i = 0; i < L.N; ++i)
                for (int k = 0; k < L.Cp; ++k)
                    dlatents[i][static_cast<size_t>(s) * L.Cp + k] +=
                        dcat[static_cast<size_t>(i) * L.Cp + k];
        }
    }

    // ---- stage 4: attention blocks with AdaLN -------------------------------
    // AdaLN scale/shift come from the spatially pooled context features; block
    // parity selects the shifted window partition.
    void predict_latent(const std::vector<double>& fused, const std::vector<double>& cond,
                        const double* p, std::vector<BlockCache>& blocks,
                        std::vector<double>& out) const {
        const ParamLayout& L = layout_;
        if (fused.size() != static_cast<size_t>(L.S) * L.Cp) throw ShapeError("fused shape mismatch");
        blocks.resize(L.B);
        std::vector<double> x = fused;
        for (int b = 0; b < L.B; ++b) {
            BlockCache& bc = blocks[b];
            const BlockOffsets& bo = L.blocks[b];
            bc.x_in = x;
            adaln_forward(x, cond, p + bo.ada1_w, p + bo.ada1_b, bc.rstd1, bc.xhat1, bc.a1, p);
            attention_forward(bc, p, bo, b % 2 == 1);
            bc.x_mid.resize(x.size());
            std::vector<double> proj(static_cast<size_t>(L.S) * L.Cp);
            for (int s = 0; s < L.S; ++s)
                linear(p + bo.proj_w, p + bo.proj_b, &bc.attn[static_cast<size_t>(s) * L.Cp], L.Cp,
                       L.Cp, &proj[static_cast<size_t>(s) * L.Cp]);
            for (size_t i = 0; i < x.size(); ++i) bc.x_mid[i] = x[i] + proj[i];
            adaln_forward(bc.x_mid, cond, p + bo.ada2_w, p + bo.ada2_b, bc.rstd2, bc.xhat2, bc.a2,
                          p);
            const int Dh = L.Fm * L.Cp;
            bc.ffn_pre.resize(static_cast<size_t>(L.S) * Dh);
            bc.ffn_act.resize(static_cast<size_t>(L.S) * Dh);
            bc.x_out.resize(x.size());
            std::vector<double> y(L.Cp);
            for (int s = 0; s < L.S; ++s) {
                double* hp = &bc.ffn_pre[static_cast<size_t>(s) * Dh];
                double* ha = &bc.ffn_act[static_cast<size_t>(s) * Dh];
                linear(p + bo.f1_w, p + bo.f1_b, &bc.a2[static_cast<size_t>(s) * L.Cp], Dh, L.Cp,
                       hp);
                for (int d = 0; d < Dh; ++d) ha[d] = gelu(hp[d]);
                linear(p + bo.f2_w, p + bo.f2_b, ha, L.Cp, Dh, y.data());
                for (int k = 0; k < L.Cp; ++k)
                    bc.x_out[static_cast<size_t>(s) * L.Cp + k] =
                        bc.x_mid[static_cast<size_t>(s) * L.Cp + k] + y[k];
            }
            x = bc.x_out;
        }
        out = x;
    }

    // dcond accumulates the gradient w.r.t. the pooled context features.
    void predict_latent_backward(const std::vector<BlockCache>& blocks,
                                 const std::vector<double>& cond, const double* p,
                                 const std::vector<double>& dout, double* dp,
                                 std::vector<double>& dfused, std::vector<double>& dcond) const {
        const ParamLayout& L = layout_;
        std::vector<double> dx = dout;
        for (int b = L.B - 1; b >= 0; --b) {
            const BlockCache& bc = blocks[b];
            const BlockOffsets& bo = L.blocks[b];
            const int Dh = L.Fm * L.Cp;
            // FFN branch
            std::vector<double> da2(static_cast<size_t>(L.S) * L.Cp, 0.0);
            std::vector<double> dhact(Dh), dhpre(Dh);
            std::vector<double> dx_mid = dx;  // residual path
            for (int s = 0; s < L.S; ++s) {
                const double* dy = &dx[static_cast<size_t>(s) * L.Cp];
                const double* ha = &bc.ffn_act[static_cast<size_t>(s) * Dh];
                const double* hp = &bc.ffn_pre[static_cast<size_t>(s) * Dh];
                std::fill(dhact.begin(), dhact.end(), 0.0);
                linear_backward(p + bo.f2_w, ha, dy, L.Cp, Dh, dp + bo.f2_w, dp + bo.f2_b,
                                dhact.data());
                for (int d = 0; d < Dh; ++d) dhpre[d] = dhact[d] * gelu_grad(hp[d]);
                linear_backward(p + bo.f1_w, &bc.a2[static_cast<size_t>(s) * L.Cp], dhpre.data(),
                                Dh, L.Cp, dp + bo.f1_w, dp + bo.f1_b,
                                &da2[static_cast<size_t>(s) * L.Cp]);
            }
            adaln_backward(da2, bc.xhat2, bc.rstd2, cond, p + bo.ada2_w, p + bo.ada2_b,
                           dp + bo.ada2_w, dp + bo.ada2_b, dx_mid, dcond);
            // attention branch
            std::vector<double> dattn(static_cast<size_t>(L.S) * L.Cp, 0.0);
            std::vector<double> dx_in = dx_mid;  // residual path
            for (int s = 0; s < L.S; ++s)
                linear_backward(p + bo.proj_w, &bc.attn[static_cast<size_t>(s) * L.Cp],
                                &dx_mid[static_cast<size_t>(s) * L.Cp], L.Cp, L.Cp, dp + bo.proj_w,
                                dp + bo.proj_b, dattn.data() + static_cast<size_t>(s) * L.Cp);
            std::vector<double> da1(static_cast<size_t>(L.S) * L.Cp, 0.0);
            attention_backward(bc, p, bo, b % 2 == 1, dattn, dp, da1);
            adaln_backward(da1, bc.xhat1, bc.rstd1, cond, p + bo.ada1_w, p + bo.ada1_b,
                           dp + bo.ada1_w, dp + bo.ada1_b, dx_in, dcond);
            dx = std::move(dx_in);
        }
        dfused = std::move(dx);
    }

    // ---- stage 5: shared decoder, one candidate per temporal skip -----------
    CandidateSet decode_candidates(const std::vector<double>& predicted,
                                   const std::vector<std::vector<double>>& latents,
                                   const double* p, DecodeCache& cache, const LandSeaMask* mask,
                                   const ChannelLayout* chan_layout) const {
        const ParamLayout& L = layout_;
        if (static_cast<int>(latents.size()) != L.N) throw ShapeError("expected N temporal latents");
        CandidateSet out;
        out.n = L.N;
        out.C = L.C;
        out.H = L.H;
        out.W = L.W;
        out.fields.assign(L.N, std::vector<double>(static_cast<size_t>(L.C) * L.H * L.W, 0.0));
        cache.proj_pre.assign(L.N, {});
        cache.rstd.assign(L.N, {});
        cache.xhat.assign(L.N, {});
        cache.proj_out.assign(L.N, {});
        std::vector<double> cat(2 * L.Cp);
        for (int i = 0; i < L.N; ++i) {
            if (latents[i].size() != predicted.size()) throw ShapeError("latent shape mismatch");
            auto& pre = cache.proj_pre[i];
            pre.resize(static_cast<size_t>(L.S) * L.Cp);
            for (int s = 0; s < L.S; ++s) {
                std::memcpy(cat.data(), &predicted[static_cast<size_t>(s) * L.Cp],
                            L.Cp * sizeof(double));
                std::memcpy(cat.data() + L.Cp, &latents[i][static_cast<size_t>(s) * L.Cp],
                            L.Cp * sizeof(double));
                linear(p + L.skip_w, p + L.skip_b, cat.data(), L.Cp, 2 * L.Cp,
                       &pre[static_cast<size_t>(s) * L.Cp]);
            }
            cache.rstd[i].resize(L.S);
            cache.xhat[i].resize(static_cast<size_t>(L.S) * L.Cp);
            cache.proj_out[i].resize(static_cast<size_t>(L.S) * L.Cp);
            ln_forward(pre.data(), L.S, L.Cp, p + L.dec_lng, p + L.dec_lnb,
                       cache.proj_out[i].data(), cache.rstd[i].data(), cache.xhat[i].data());
            auto& field = out.fields[i];
            for (int c = 0; c < L.C; ++c)
                for (int h = 0; h < L.H; ++h)
                    for (int w = 0; w < L.W; ++w)
                        field[(static_cast<size_t>(c) * L.H + h) * L.W + w] = p[L.dec_b + c];
            for (int ph = 0; ph < L.Hp; ++ph)
                for (int pw = 0; pw < L.Wp; ++pw) {
                    const int s = ph * L.Wp + pw;
                    const double* z = &cache.proj_out[i][static_cast<size_t>(s) * L.Cp];
                    for (int k = 0; k < L.Cp; ++k) {
                        const double zk = z[k];
                        const double* wk = p + L.dec_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                        for (int c = 0; c < L.C; ++c)
                            for (int u = 0; u < L.P; ++u) {
                                double* row =
                                    &field[(static_cast<size_t>(c) * L.H + ph * L.P + u) * L.W +
                                           pw * L.P];
                                const double* wrow = wk + (static_cast<size_t>(c) * L.P + u) * L.P;
                                for (int v = 0; v < L.P; ++v) row[v] += zk * wrow[v];
                            }
                    }
                }
            if (mask && chan_layout) {
                for (int c = 0; c < L.C; ++c) {
                    const auto& m = mask->for_channel(*chan_layout, c);
                    double* fc = &field[static_cast<size_t>(c) * L.H * L.W];
                    for (int s2 = 0; s2 < L.H * L.W; ++s2)
                        if (!m[s2]) fc[s2] = kLandFill;
                }
            }
        }
        return out;
    }

    void decode_backward(const ForwardCache& cache, const double* p,
                         const CandidateSet& grad_candidates, const LandSeaMask* mask,
                         const ChannelLayout* chan_layout, double* dp,
                         std::vector<double>& dpredicted,
                         std::vector<std::vector<double>>& dlatents) const {
        const ParamLayout& L = layout_;
        std::vector<double> dz(static_cast<size_t>(L.S) * L.Cp);
        std::vector<double> dpre(static_cast<size_t>(L.S) * L.Cp);
        std::vector<double> cat(2 * L.Cp), dcat(2 * L.Cp);
        for (int i = 0; i < L.N; ++i) {
            std::vector<double> g = grad_candidates.fields[i];
            if (mask && chan_layout) {
                for (int c = 0; c < L.C; ++c) {
                    const auto& m = mask->for_channel(*chan_layout, c);
                    double* gc = &g[static_cast<size_t>(c) * L.H * L.W];
                    for (int s2 = 0; s2 < L.H * L.W; ++s2)
                        if (!m[s2]) gc[s2] = 0.0;
                }
            }
            std::fill(dz.begin(), dz.end(), 0.0);
            for (int ph = 0; ph < L.Hp; ++ph)
                for (int pw = 0; pw < L.Wp; ++pw) {
                    const int s = ph * L.Wp + pw;
                    const double* z = &cache.dec.proj_out[i][static_cast<size_t>(s) * L.Cp];
                    for (int k = 0; k < L.Cp; ++k) {
                        const double* wk = p + L.dec_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                        double* dwk = dp + L.dec_w + static_cast<size_t>(k) * L.C * L.P * L.P;
                        double acc = 0.0;
                        for (int c = 0; c < L.C; ++c)
                            for (int u = 0; u < L.P; ++u) {
                                const double* grow =
                                    &g[(static_cast<size_t>(c) * L.H + ph * L.P + u) * L.W +
                                       pw * L.P];
                                const double* wrow = wk + (static_cast<size_t>(c) * L.P + u) * L.P;
                                double* dwrow = dwk + (static_cast<size_t>(c) * L.P + u) * L.P;
                                for (int v = 0; v < L.P; ++v) {
                                    acc += grow[v] * wrow[v];
                                    dwrow[v] += grow[v] * z[k];
                                }
                            }
                        dz[static_cast<size_t>(s) * L.Cp + k] = acc;
                    }
                }
            for (int c = 0; c < L.C; ++c) {
                const double* gc = &g[static_cast<size_t>(c) * L.H * L.W];
                double acc = 0.0;
                for (int s2 = 0; s2 < L.H * L.W; ++s2) acc += gc[s2];
                dp[L.dec_b + c] += acc;
            }
            std::fill(dpre.begin(), dpre.end(), 0.0);
            ln_backward(dz.data(), cache.dec.xhat[i].data(), cache.dec.rstd[i].data(),
                        p + L.dec_lng, L.S, L.Cp, dpre.data(), dp + L.dec_lng, dp + L.dec_lnb);
            for (int s = 0; s < L.S; ++s) {
                std::memcpy(cat.data(), &cache.predicted[static_cast<size_t>(s) * L.Cp],
                            L.Cp * sizeof(double));
                std::memcpy(cat.data() + L.Cp, &cache.latents[i][static_cast<size_t>(s) * L.Cp],
                            L.Cp * sizeof(double));
                std::fill(dcat.begin(), dcat.end(), 0.0);
                linear_backward(p + L.skip_w, cat.data(), &dpre[static_cast<size_t>(s) * L.Cp],
                                L.Cp, 2 * L.Cp, dp + L.skip_w, dp + L.skip_b, dcat.data());
                for (int k = 0; k < L.Cp; ++k) {
                    dpredicted[static_cast<size_t>(s) * L.Cp + k] += dcat[k];
                    dlatents[i][static_cast<size_t>(s) * L.Cp + k] += dcat[L.Cp + k];
                }
            }
        }
    }

    // ---- full composition ----------------------------------------------------
    // states_by_skip[i] is the normalized, masked input state X^{t-i} (i = 0
    // newest). Candidate i carries the skip connection from states_by_skip[i].
    CandidateSet forward(const std::vector<const double*>& states_by_skip,
                         const ContextSignals& signals, const double* p, const LandSeaMask& mask,
                         const ChannelLayout& chan_layout, ForwardCache& cache) const {
        const ParamLayout& L = layout_;
        if (static_cast<int>(states_by_skip.size()) != L.N)
            throw ShapeError("expected N input states");
        encode_prior(signals, p, cache.prior);
        cache.enc.resize(L.N);
        cache.latents.assign(L.N, {});
        for (int i = 0; i < L.N; ++i)
            encode_state(states_by_skip[i], cache.prior.ctx, p, cache.enc[i], cache.latents[i]);
        fuse_temporal(cache.latents, p, cache);
        predict_latent(cache.fused, cache.prior.ctx.pooled, p, cache.blocks, cache.predicted);
        cache.candidates =
            decode_candidates(cache.predicted, cache.latents, p, cache.dec, &mask, &chan_layout);
        return cache.candidates;
    }

    void backward(const ForwardCache& cache, const double* p, const CandidateSet& grad_candidates,
                  const LandSeaMask& mask, const ChannelLayout& chan_layout, double* dp,
                  std::vector<std::vector<double>>* grad_states) const {
        const ParamLayout& L = layout_;
        std::vector<double> dpredicted(static_cast<size_t>(L.S) * L.Cp, 0.0);
        std::vector<std::vector<double>> dlatents(
            L.N, std::vector<double>(static_cast<size_t>(L.S) * L.Cp, 0.0));
        decode_backward(cache, p, grad_candidates, &mask, &chan_layout, dp, dpredicted, dlatents);
        std::vector<double> dfused, dcond(L.Cp, 0.0);
        predict_latent_backward(cache.blocks, cache.prior.ctx.pooled, p, dpredicted, dp, dfused,
                                dcond);
        fuse_backward(cache, p, dfused, dp, dlatents);
        std::vector<double> dmod(L.Cp, 0.0);
        for (int i = 0; i < L.N; ++i) {
            std::vector<double>* ds = grad_states ? &(*grad_states)[i] : nullptr;
            encode_state_backward(cache.enc[i], cache.prior.ctx, p, dlatents[i], dp, &dmod, ds);
        }
        encode_prior_backward(cache.prior, p, dcond, dmod, dp);
    }

    // window token lists for the (un)shifted partition; each entry is a list
    // of original token ids of one win x win window.
    const std::vector<std::vector<int>>& window_tokens(bool shifted) const {
        return shifted ? windows_shifted_ : windows_;
    }

private:
    NetConfig cfg_;
    ParamLayout layout_;
    std::vector<std::vector<int>> windows_, windows_shifted_;

    void build_windows() {
        const ParamLayout& L = layout_;
        const int nwh = L.Hp / L.win, nww = L.Wp / L.win;
        auto build = [&](int shift) {
            std::vector<std::vector<int>> wins;
            wins.reserve(static_cast<size_t>(nwh) * nww);
            for (int bh = 0; bh < nwh; ++bh)
                for (int bw = 0; bw < nww; ++bw) {
                    std::vector<int> toks;
                    toks.reserve(static_cast<size_t>(L.win) * L.win);
                    for (int r = 0; r < L.win; ++r)
                        for (int c = 0; c < L.win; ++c) {
                            const int gr = (bh * L.win + r + shift) % L.Hp;
                            const int gc = (bw * L.win + c + shift) % L.Wp;
                            toks.push_back(gr * L.Wp + gc);
                        }
                    wins.push_back(std::move(toks));
                }
            return wins;
        };
        windows_ = build(0);
        windows_shifted_ = build(L.win / 2);
    }

    // AdaLN: plain LN (no elementwise affine), then (1 + scale) * xhat + shift
    // with [scale; shift] = A * cond + b.
    void adaln_forward(const std::vector<double>& x, const std::vector<double>& cond,
                       const double* A, const double* b, std::vector<double>& rstd,
                       std::vector<double>& xhat, std::vector<double>& out,
                       const double* /*p*/) const {
        const ParamLayout& L = layout_;
        std::vector<double> sh(2 * L.Cp);
        linear(A, b, cond.data(), 2 * L.Cp, L.Cp, sh.data());
        std::vector<double> gamma(L.Cp), beta(L.Cp);
        for (int k = 0; k < L.Cp; ++k) {
            gamma[k] = 1.0 + sh[k];
            beta[k] = sh[L.Cp + k];
        }
        rstd.resize(L.S);
        xhat.resize(static_cast<size_t>(L.S) * L.Cp);
        out.resize(static_cast<size_t>(L.S) * L.Cp);
        ln_forward(x.data(), L.S, L.Cp, gamma.data(), beta.data(), out.data(), rstd.data(),
                   xhat.data());
    }

    // AdaLN backward (gamma = 1 + scale). dgamma/dbeta propagate through the
    // generator into dA/db and dcond.
    void adaln_backward(const std::vector<double>& dout, const std::vector<double>& xhat,
                        const std::vector<double>& rstd, const std::vector<double>& cond,
                        const double* A, const double* b, double* dA, double* db,
                        std::vector<double>& dx, std::vector<double>& dcond) const {
        const ParamLayout& L = layout_;
        std::vector<double> sh(2 * L.Cp);
        linear(A, b, cond.data(), 2 * L.Cp, L.Cp, sh.data());
        std::vector<double> gamma(L.Cp);
        for (int k = 0; k < L.Cp; ++k) gamma[k] = 1.0 + sh[k];
        std::vector<double> dgb(2 * L.Cp, 0.0);  // [dscale; dshift]
        ln_backward(dout.data(), xhat.data(), rstd.data(), gamma.data(), L.S, L.Cp, dx.data(),
                    dgb.data(), dgb.data() + L.Cp);
        linear_backward(A, cond.data(), dgb.data(), 2 * L.Cp, L.Cp, dA, db, dcond.data());
    }

private:
    void attention_forward(BlockCache& bc, const double* p, const BlockOffsets& bo,
                           bool shifted) const {
        const ParamLayout& L = layout_;
        bc.qkv.resize(static_cast<size_t>(L.S) * 3 * L.Cp);
        for (int s = 0; s < L.S; ++s)
            linear(p + bo.qkv_w, p + bo.qkv_b, &bc.a1[static_cast<size_t>(s) * L.Cp], 3 * L.Cp,
                   L.Cp, &bc.qkv[static_cast<size_t>(s) * 3 * L.Cp]);
        const auto& wins = window_tokens(shifted);
        const int n = L.win * L.win;
        const int dk = L.Cp / L.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        bc.probs.assign(wins.size() * L.heads * n * n, 0.0);
        bc.attn.assign(static_cast<size_t>(L.S) * L.Cp, 0.0);
        std::vector<double> logits(n);
        for (size_t wi = 0; wi < wins.size(); ++wi) {
            const auto& toks = wins[wi];
            for (int hd = 0; hd < L.heads; ++hd) {
                double* probs = &bc.probs[((wi * L.heads) + hd) * n * n];
                for (int a = 0; a < n; ++a) {
                    const double* q = &bc.qkv[static_cast<size_t>(toks[a]) * 3 * L.Cp + hd * dk];
                    double mx = -1e300;
                    for (int b2 = 0; b2 < n; ++b2) {
                        const double* k =
                            &bc.qkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + L.Cp + hd * dk];
                        double acc = 0.0;
                        for (int d = 0; d < dk; ++d) acc += q[d] * k[d];
                        logits[b2] = acc * scale;
                        mx = std::max(mx, logits[b2]);
                    }
                    double z = 0.0;
                    for (int b2 = 0; b2 < n; ++b2) {
                        logits[b2] = std::exp(logits[b2] - mx);
                        z += logits[b2];
                    }
                    double* prow = probs + static_cast<size_t>(a) * n;
                    for (int b2 = 0; b2 < n; ++b2) prow[b2] = logits[b2] / z;
                    double* out = &bc.attn[static_cast<size_t>(toks[a]) * L.Cp + hd * dk];
                    for (int b2 = 0; b2 < n; ++b2) {
                        const double* v =
                            &bc.qkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + 2 * L.Cp + hd * dk];
                        for (int d = 0; d < dk; ++d) out[d] += prow[b2] * v[d];
                    }
                }
            }
        }
    }

    void attention_backward(const BlockCache& bc, const double* p, const BlockOffsets& bo,
                            bool shifted, const std::vector<double>& dattn, double* dp,
                            std::vector<double>& da1) const {
        const ParamLayout& L = layout_;
        const auto& wins = window_tokens(shifted);
        const int n = L.win * L.win;
        const int dk = L.Cp / L.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        std::vector<double> dqkv(static_cast<size_t>(L.S) * 3 * L.Cp, 0.0);
        std::vector<double> dprow(n), dlog(n);
        for (size_t wi = 0; wi < wins.size(); ++wi) {
            const auto& toks = wins[wi];
            for (int hd = 0; hd < L.heads; ++hd) {
                const double* probs = &bc.probs[((wi * L.heads) + hd) * n * n];
                for (int a = 0; a < n; ++a) {
                    const double* dout = &dattn[static_cast<size_t>(toks[a]) * L.Cp + hd * dk];
                    const double* prow = probs + static_cast<size_t>(a) * n;
                    double dot = 0.0;
                    for (int b2 = 0; b2 < n; ++b2) {
                        const double* v =
                            &bc.qkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + 2 * L.Cp + hd * dk];
                        double acc = 0.0;
                        for (int d = 0; d < dk; ++d) acc += dout[d] * v[d];
                        dprow[b2] = acc;
                        dot += prow[b2] * acc;
                        double* dv =
                            &dqkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + 2 * L.Cp + hd * dk];
                        for (int d = 0; d < dk; ++d) dv[d] += prow[b2] * dout[d];
                    }
                    for (int b2 = 0; b2 < n; ++b2) dlog[b2] = prow[b2] * (dprow[b2] - dot);
                    const double* q = &bc.qkv[static_cast<size_t>(toks[a]) * 3 * L.Cp + hd * dk];
                    double* dq = &dqkv[static_cast<size_t>(toks[a]) * 3 * L.Cp + hd * dk];
                    for (int b2 = 0; b2 < n; ++b2) {
                        const double g = dlog[b2] * scale;
                        const double* k =
                            &bc.qkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + L.Cp + hd * dk];
                        double* dkk =
                            &dqkv[static_cast<size_t>(toks[b2]) * 3 * L.Cp + L.Cp + hd * dk];
                        for (int d = 0; d < dk; ++d) {
                            dq[d] += g * k[d];
                            dkk[d] += g * q[d];
                        }
                    }
                }
            }
        }
        for (int s = 0; s < L.S; ++s)
            linear_backward(p + bo.qkv_w, &bc.a1[static_cast<size_t>(s) * L.Cp],
                            &dqkv[static_cast<size_t>(s) * 3 * L.Cp], 3 * L.Cp, L.Cp,
                            dp + bo.qkv_w, dp + bo.qkv_b, &da1[static_cast<size_t>(s) * L.Cp]);
    }
};

}  // namespace fuxio
