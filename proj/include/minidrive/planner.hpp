#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "minidrive/backbone.hpp"
#include "minidrive/config.hpp"
#include "minidrive/metrics.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tape.hpp"

namespace minidrive::planner {

/// Per-coordinate bounds mapping trajectories into [-1,1]. The heading
/// range is fixed to [-pi, pi]; x/y are empirical with a 5% pad (and a
/// minimum half-span guard so straight-only data cannot degenerate).
struct NormalizationRanges {
    double x_min = -1.0, x_max = 1.0;
    double y_min = -1.0, y_max = 1.0;
    double psi_min = -M_PI, psi_max = M_PI;

    double norm(double v, double lo, double hi) const { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
    double denorm(double n, double lo, double hi) const { return lo + (n + 1.0) * 0.5 * (hi - lo); }

    template <typename S>
    Tensor<S> normalize(const Tensor<S>& traj) const {  // [T,3]
        Tensor<S> out(traj.shape());
        for (int k = 0; k < traj.dim(0); ++k) {
            out.at(k, 0) = static_cast<S>(norm(traj.at(k, 0), x_min, x_max));
            out.at(k, 1) = static_cast<S>(norm(traj.at(k, 1), y_min, y_max));
            out.at(k, 2) = static_cast<S>(norm(traj.at(k, 2), psi_min, psi_max));
        }
        return out;
    }

    template <typename S>
    Tensor<S> denormalize(const Tensor<S>& traj) const {
        Tensor<S> out(traj.shape());
        for (int k = 0; k < traj.dim(0); ++k) {
            out.at(k, 0) = static_cast<S>(denorm(traj.at(k, 0), x_min, x_max));
            out.at(k, 1) = static_cast<S>(denorm(traj.at(k, 1), y_min, y_max));
            out.at(k, 2) = static_cast<S>(denorm(traj.at(k, 2), psi_min, psi_max));
        }
        return out;
    }
};

NormalizationRanges compute_ranges(const std::vector<const sim::Scenario*>& train_set);

inline double sample_tau(Rng& rng, double mu, double s) {
    const double z = mu + s * rng.normal();
    const double tau = 1.0 / (1.0 + std::exp(-z));
    return std::clamp(tau, 1e-4, 1.0 - 1e-4);
}

/// A_tau = (1-tau) eps + tau A_norm, with the timestep features kept for
/// the denoiser.
template <typename S>
struct NoisyAction {
    Tensor<S> a_tau;     // [T,3]
    Tensor<S> epsilon;   // [T,3]
    double tau = 0.0;
    Tensor<S> e_tau;     // sinusoidal features of tau
};

template <typename S>
NoisyAction<S> make_noisy_action(const Tensor<S>& a_norm, const Tensor<S>& epsilon, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("make_noisy_action: tau must be in (0,1)");
    if (a_norm.shape() != epsilon.shape()) throw std::invalid_argument("make_noisy_action: shape mismatch");
    NoisyAction<S> out;
    out.tau = tau;
    out.epsilon = epsilon;
    out.a_tau = Tensor<S>(a_norm.shape());
    for (std::int64_t i = 0; i < a_norm.numel(); ++i) {
        out.a_tau[i] = static_cast<S>((1.0 - tau) * epsilon[i] + tau * a_norm[i]);
    }
    out.e_tau = sinusoidal_features<S>(tau, 32);
    return out;
}

/// Single cross-attention from a fixed set of learnable queries onto a
/// source token sequence; output length equals the query count. With
/// identical source tokens every query collapses to that token's value
/// projection.
template <typename S>
struct PerceiverCompressor {
    Param<S>* queries = nullptr;  // [n_queries, d]
    Linear<S> src_proj;
    LayerNorm<S> ln_kv;
    MultiheadAttention<S> attn;
    int n_queries = 0;

    PerceiverCompressor() = default;
    PerceiverCompressor(ParamStore<S>& ps, const std::string& prefix, int src_dim, int d, int heads,
                        int n_queries_, Rng& rng)
        : src_proj(ps, prefix + ".src_proj", src_dim, d, rng),
          ln_kv(ps, prefix + ".ln_kv", d),
          attn(ps, prefix + ".attn", d, heads, rng),
          n_queries(n_queries_) {
        queries = &ps.create_normal(prefix + ".queries", {n_queries_, d}, rng, 0.5);
    }

    Value<S> forward(Tape<S>& t, Value<S> src, const Tensor<S>* src_mask = nullptr) const {
        Value<S> kv = ln_kv.forward(t, src_proj.forward(t, src));
        return attn.forward(t, t.param(*queries), kv, src_mask);
    }
};

/// Expert-specific bidirectional encoder; tokens of the same future step
/// share one positional embedding and are averaged into one per-step
/// feature row, so same-step tokens are interchangeable.
template <typename S>
struct ExpertBranchEncoder {
    Linear<S> proj;
    Param<S>* step_pos = nullptr;  // [horizon, d]
    TransformerBlock<S> block;
    int k_per_step = 1, horizon = 0;

    ExpertBranchEncoder() = default;
    ExpertBranchEncoder(ParamStore<S>& ps, const std::string& prefix, int src_dim, int d, int heads,
                        int k_per_step_, int horizon_, Rng& rng)
        : proj(ps, prefix + ".proj", src_dim, d, rng),
          block(ps, prefix + ".block", d, heads, 2 * d, rng),
          k_per_step(k_per_step_),
          horizon(horizon_) {
        step_pos = &ps.create_normal(prefix + ".pos", {horizon_, d}, rng, 0.1);
    }

    /// tokens: [k_per_step*horizon, src_dim] -> [horizon, d]
    Value<S> forward(Tape<S>& t, Value<S> tokens) const {
        if (tokens.shape()[0] != k_per_step * horizon) {
            throw std::invalid_argument("ExpertBranchEncoder: token count mismatch");
        }
        std::vector<int> step_of(static_cast<std::size_t>(k_per_step * horizon));
        for (int i = 0; i < k_per_step * horizon; ++i) step_of[static_cast<std::size_t>(i)] = i / k_per_step;
        Value<S> x = add(proj.forward(t, tokens), gather_rows(t.param(*step_pos), step_of));
        x = block.forward(t, x);
        return mean_row_blocks(x, k_per_step);
    }
};

/// History poses and ego status encoded by small MLPs and fused into one
/// conditioning vector.
template <typename S>
struct EgoConditionEncoder {
    Linear<S> hist1, hist2, status1, status2, fuse;

    EgoConditionEncoder() = default;
    EgoConditionEncoder(ParamStore<S>& ps, int n_history, int d, Rng& rng)
        : hist1(ps, "ego.hist1", 3 * n_history, d, rng),
          hist2(ps, "ego.hist2", d, d, rng),
          status1(ps, "ego.status1", 2, d, rng),
          status2(ps, "ego.status2", d, d, rng),
          fuse(ps, "ego.fuse", 2 * d, d, rng) {}

    Value<S> forward(Tape<S>& t, Value<S> hist_flat, Value<S> status) const {
        Value<S> h = hist2.forward(t, gelu(hist1.forward(t, hist_flat)));
        Value<S> s = status2.forward(t, gelu(status1.forward(t, status)));
        return fuse.forward(t, concat_cols<S>({h, s}));
    }

    Value<S> forward(Tape<S>& t, const Tensor<S>& hist_flat, const Tensor<S>& status) const {
        return forward(t, t.constant(hist_flat), t.constant(status));
    }
};

/// Everything the planner consumes for one scenario at the current frame.
/// Backbone hidden states arrive as plain tensors: stage 3 treats the
/// backbone as frozen.
template <typename S>
struct PlannerInputs {
    Tensor<S> ctx;                               // [n_ctx, D] backbone context rows
    int ctx_real = 0;                            // visible prefix of ctx (text padding masked)
    std::map<std::string, Tensor<S>> expert_hidden;  // [k*T, D] per enabled expert
    Tensor<S> sem_tokens;                        // [sem_k, 6] current-frame interaction features
    Tensor<S> geo_tokens;                        // [1, 8]   current-frame structure features
    Tensor<S> hist_flat;                         // [1, 3*n_h]
    Tensor<S> status;                            // [1, 2]
};

/// Two-stream denoiser block: joint self-attention over scene and action
/// tokens, then stream-specific feed-forward layers.
template <typename S>
struct TwoStreamBlock {
    LayerNorm<S> ln_attn;
    MultiheadAttention<S> attn;
    LayerNorm<S> ln_scene, ln_act;
    Mlp<S> ffn_scene, ffn_act;

    TwoStreamBlock() = default;
    TwoStreamBlock(ParamStore<S>& ps, const std::string& prefix, int d, int heads, Rng& rng)
        : ln_attn(ps, prefix + ".ln_attn", d),
          attn(ps, prefix + ".attn", d, heads, rng),
          ln_scene(ps, prefix + ".ln_scene", d),
          ln_act(ps, prefix + ".ln_act", d),
          ffn_scene(ps, prefix + ".ffn_scene", d, 2 * d, rng),
          ffn_act(ps, prefix + ".ffn_act", d, 2 * d, rng) {}

    std::pair<Value<S>, Value<S>> forward(Tape<S>& t, Value<S> scene, Value<S> act) const {
        const int n_s = scene.shape()[0];
        const int n_a = act.shape()[0];
        Value<S> x = concat_rows<S>({scene, act});
        Value<S> h = ln_attn.forward(t, x);
        x = add(x, attn.forward(t, h, h));
        Value<S> s = slice_rows(x, 0, n_s);
        Value<S> a = slice_rows(x, n_s, n_a);
        s = add(s, ffn_scene.forward(t, ln_scene.forward(t, s)));
        a = add(a, ffn_act.forward(t, ln_act.forward(t, a)));
        return {s, a};
    }
};

/// Stage-3 planner: per-source scene compression, per-expert branch
/// encoders, ego conditioning, a two-stream denoiser predicting clean
/// normalized trajectories per expert, and learnable fusion logits.
template <typename S>
struct PlannerModel {
    ParamStore<S> params;
    std::vector<std::string> experts;  // enabled, in canonical order
    PerceiverCompressor<S> comp_ctx, comp_sem, comp_geo;
    std::map<std::string, ExpertBranchEncoder<S>> branches;
    EgoConditionEncoder<S> ego;
    Linear<S> tau_proj, r_proj, decode;
    LayerNorm<S> ln_decode;
    Param<S>* step_pos = nullptr;    // [T, d]
    Param<S>* expert_emb = nullptr;  // [N_e, d]
    Param<S>* fusion_logits = nullptr;
    std::vector<TwoStreamBlock<S>> blocks;
    int d = 0, horizon = 0, tau_dim = 0;
    NormalizationRanges ranges;

    PlannerModel(const RunConfig& cfg, int backbone_dim, Rng& rng) {
        experts.clear();
        for (const auto& name : backbone::expert_order()) {
            const auto enabled = cfg.enabled_experts();
            if (std::find(enabled.begin(), enabled.end(), name) != enabled.end()) experts.push_back(name);
        }
        d = cfg.d_model;
        horizon = cfg.horizon;
        tau_dim = cfg.tau_embed_dim;
        comp_ctx = PerceiverCompressor<S>(params, "comp.ctx", backbone_dim, d, cfg.heads,
                                          cfg.queries_per_source, rng);
        comp_sem = PerceiverCompressor<S>(params, "comp.sem", 6, d, cfg.heads, cfg.queries_per_source, rng);
        comp_geo = PerceiverCompressor<S>(params, "comp.geo", sim::SimParams::kGeoDim, d, cfg.heads,
                                          cfg.queries_per_source, rng);
        for (const auto& name : experts) {
            branches.emplace(name, ExpertBranchEncoder<S>(params, "branch." + name, backbone_dim, d, cfg.heads,
                                                          cfg.k_per_step, cfg.horizon, rng));
        }
        ego = EgoConditionEncoder<S>(params, cfg.n_history, d, rng);
        tau_proj = Linear<S>(params, "denoiser.tau_proj", 32, tau_dim, rng);
        r_proj = Linear<S>(params, "denoiser.r_proj", 3 + tau_dim + d + d, d, rng);
        decode = Linear<S>(params, "denoiser.decode", d, 3, rng);
        ln_decode = LayerNorm<S>(params, "denoiser.ln_decode", d);
        step_pos = &params.create_normal("denoiser.step_pos", {horizon, d}, rng, 0.1);
        expert_emb = &params.create_normal("denoiser.expert_emb", {static_cast<int>(experts.size()), d}, rng, 0.5);
        fusion_logits = &params.create("fusion.logits", {static_cast<int>(experts.size())});
        for (int l = 0; l < cfg.planner_layers; ++l) {
            blocks.emplace_back(params, "denoiser.block" + std::to_string(l), d, cfg.heads, rng);
        }
    }

    int n_experts() const { return static_cast<int>(experts.size()); }

    /// Fixed-length scene stream: each enabled source compressed by its own
    /// Perceiver, outputs concatenated in fixed order.
    Value<S> compress_scene(Tape<S>& t, const PlannerInputs<S>& in) const {
        const Tensor<S> mask = pad_mask<S>(in.ctx.dim(0), in.ctx_real);
        std::vector<Value<S>> parts;
        parts.push_back(comp_ctx.forward(t, t.constant(in.ctx), &mask));
        parts.push_back(comp_sem.forward(t, t.constant(in.sem_tokens)));
        parts.push_back(comp_geo.forward(t, t.constant(in.geo_tokens)));
        return concat_rows(parts);
    }

    /// One denoiser pass: per-expert clean trajectory predictions in the
    /// normalized action space.
    std::map<std::string, Value<S>> denoise(Tape<S>& t, const PlannerInputs<S>& in,
                                            const std::map<std::string, Tensor<S>>& a_tau, double tau) const {
        Value<S> scene = compress_scene(t, in);
        Value<S> ego_cond = ego.forward(t, in.hist_flat, in.status);
        Value<S> e_tau = tau_proj.forward(t, reshape(t.constant(sinusoidal_features<S>(tau, 32)), {1, 32}));

        std::vector<Value<S>> ego_rows(static_cast<std::size_t>(horizon), ego_cond);
        std::vector<Value<S>> tau_rows(static_cast<std::size_t>(horizon), e_tau);
        Value<S> ego_rep = concat_rows(ego_rows);
        Value<S> tau_rep = concat_rows(tau_rows);

        std::vector<Value<S>> act_parts;
        for (std::size_t e = 0; e < experts.size(); ++e) {
            const auto& name = experts[e];
            Value<S> f_e = branches.at(name).forward(t, t.constant(in.expert_hidden.at(name)));
            Value<S> r = concat_cols<S>({t.constant(a_tau.at(name)), tau_rep, ego_rep, f_e});
            r = add(r_proj.forward(t, r), t.param(*step_pos));
            Value<S> emb_row = slice_rows(t.param(*expert_emb), static_cast<int>(e), 1);
            r = add_rowvec(r, reshape(emb_row, {d}));
            act_parts.push_back(r);
        }
        Value<S> act = concat_rows(act_parts);
        for (const auto& b : blocks) std::tie(scene, act) = b.forward(t, scene, act);

        std::map<std::string, Value<S>> preds;
        for (std::size_t e = 0; e < experts.size(); ++e) {
            Value<S> rows = slice_rows(act, static_cast<int>(e) * horizon, horizon);
            preds[experts[e]] = decode.forward(t, ln_decode.forward(t, rows));
        }
        return preds;
    }

    /// Softmax fusion weights as plain numbers.
    std::vector<double> fusion_alpha() const {
        std::vector<double> a(static_cast<std::size_t>(n_experts()));
        double mx = -1e300;
        for (int i = 0; i < n_experts(); ++i) mx = std::max(mx, static_cast<double>(fusion_logits->value[i]));
        double sum = 0.0;
        for (int i = 0; i < n_experts(); ++i) {
            a[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(fusion_logits->value[i]) - mx);
            sum += a[static_cast<std::size_t>(i)];
        }
        for (auto& v : a) v /= sum;
        return a;
    }
};

/// L_act = mean_e ||A_hat_e - A_norm||^2 + lambda ||sum_e alpha_e
/// detach(A_hat_e) - A_norm||^2. The fusion term reaches only the logits.
template <typename S>
struct PlannerLoss {
    Value<S> total;
    Value<S> diff;
    Value<S> fusion;
};

template <typename S>
PlannerLoss<S> planner_loss(Tape<S>& t, PlannerModel<S>& model, const std::map<std::string, Value<S>>& preds,
                            const Tensor<S>& a_norm, double lambda_fusion) {
    Value<S> target = t.constant(a_norm);
    Value<S> diff{};
    bool first = true;
    for (const auto& name : model.experts) {
        Value<S> term = mse_loss(preds.at(name), target);
        diff = first ? term : add(diff, term);
        first = false;
    }
    diff = scale(diff, S(1) / static_cast<S>(model.n_experts()));

    Value<S> logits = reshape(t.param(*model.fusion_logits), {1, model.n_experts()});
    Value<S> alpha = softmax_rows(logits);
    Value<S> fused{};
    first = true;
    for (std::size_t e = 0; e < model.experts.size(); ++e) {
        Value<S> a_e = slice_cols(alpha, static_cast<int>(e), 1);
        Value<S> term = mul_by_scalar(detach(preds.at(model.experts[e])), reshape(a_e, {1}));
        fused = first ? term : add(fused, term);
        first = false;
    }
    Value<S> fusion_term = mse_loss(fused, target);
    PlannerLoss<S> out;
    out.diff = diff;
    out.fusion = fusion_term;
    out.total = add(diff, scale(fusion_term, static_cast<S>(lambda_fusion)));
    return out;
}

/// Generic iterative denoising: start at tau=0 from noise, derive the
/// velocity from the X0 prediction through the interpolation identity, and
/// Euler-advance each expert trajectory independently.
template <typename S>
using DenoiseFn = std::function<std::map<std::string, Tensor<S>>(const std::map<std::string, Tensor<S>>&, double)>;

template <typename S>
std::map<std::string, Tensor<S>> denoise_iterate(const DenoiseFn<S>& fn, std::map<std::string, Tensor<S>> a,
                                                 int steps, double tau_cap = 0.999) {
    if (steps < 1) throw std::invalid_argument("denoise_iterate: steps must be >= 1");
    const double d_tau = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double tau = std::min(static_cast<double>(k) / steps, tau_cap);
        const auto x0 = fn(a, tau);
        for (auto& [name, a_e] : a) {
            const Tensor<S>& x0_e = x0.at(name);
            for (std::int64_t i = 0; i < a_e.numel(); ++i) {
                const double eps_hat = (a_e[i] - tau * x0_e[i]) / (1.0 - tau);
                const double v_hat = x0_e[i] - eps_hat;
                a_e[i] += static_cast<S>(d_tau * v_hat);
            }
        }
    }
    return a;
}

/// Full planner inference: shared noise across experts, iterative
/// denoising, fusion with softmax weights, denormalization.
template <typename S>
metrics::Trajectory infer_trajectory(const PlannerModel<S>& model, const PlannerInputs<S>& in, int steps,
                                     std::uint64_t seed) {
    Rng rng = Rng::derived(seed, "planner.infer");
    Tensor<S> noise({model.horizon, 3});
    rng.fill_normal(noise, 1.0);
    std::map<std::string, Tensor<S>> a;
    for (const auto& name : model.experts) a[name] = noise.clone();

    DenoiseFn<S> fn = [&](const std::map<std::string, Tensor<S>>& cur, double tau) {
        Tape<S> t;
        auto preds = model.denoise(t, in, cur, tau);
        std::map<std::string, Tensor<S>> out;
        for (auto& [name, v] : preds) out[name] = v.val().clone();
        return out;
    };
    const auto final_a = denoise_iterate<S>(fn, std::move(a), steps);

    const std::vector<double> alpha = model.fusion_alpha();
    Tensor<S> fused({model.horizon, 3});
    for (std::size_t e = 0; e < model.experts.size(); ++e) {
        const Tensor<S>& a_e = final_a.at(model.experts[e]);
        for (std::int64_t i = 0; i < fused.numel(); ++i) fused[i] += static_cast<S>(alpha[e]) * a_e[i];
    }
    const Tensor<S> world = model.ranges.template denormalize<S>(fused);
    metrics::Trajectory traj;
    for (int k = 0; k < model.horizon; ++k) {
        traj.push_back({static_cast<double>(world.at(k, 0)), static_cast<double>(world.at(k, 1)),
                        static_cast<double>(world.at(k, 2))});
    }
    return traj;
}

}  // namespace minidrive::planner
