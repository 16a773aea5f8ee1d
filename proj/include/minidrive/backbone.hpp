#pragma once

#include <map>
#include <string>
#include <vector>

#include "minidrive/config.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tape.hpp"
#include "minidrive/worldmodel.hpp"

namespace minidrive::backbone {

inline const std::vector<std::string>& expert_order() {
    static const std::vector<std::string> kOrder{"sem", "geo", "dyn", "traj"};
    return kOrder;
}

struct Segment {
    int start = 0;
    int length = 0;
};

/// Fixed token arrangement: image patches, text (padded to a fixed width),
/// then the enabled expert groups in declared order.
struct TokenLayout {
    Segment image;
    Segment text;
    std::vector<std::pair<std::string, Segment>> experts;
    int total = 0;
    int text_real = 0;

    const Segment& expert(const std::string& name) const {
        for (const auto& [n, seg] : experts)
            if (n == name) return seg;
        throw std::out_of_range("TokenLayout: no expert segment " + name);
    }
    bool has_expert(const std::string& name) const {
        for (const auto& [n, seg] : experts)
            if (n == name) return true;
        return false;
    }
};

/// Hidden states extracted at the layout positions.
template <typename S>
struct ExpertHiddenBundle {
    Value<S> ctx;  // image + text rows
    std::map<std::string, Value<S>> experts;
};

/// Per-branch projections from backbone hidden space into the expert
/// feature spaces, plus the trajectory regression head.
template <typename S>
struct AdapterSet {
    Linear<S> sem1, sem2;
    Linear<S> geo1, geo2;
    Linear<S> dyn1, dyn2;
    Linear<S> traj1, traj2;

    AdapterSet() = default;
    AdapterSet(ParamStore<S>& ps, int d, int sem_dim, int geo_dim, int cond_dim, int horizon, Rng& rng)
        : sem1(ps, "adapter.sem1", d, d, rng),
          sem2(ps, "adapter.sem2", d, sem_dim, rng),
          geo1(ps, "adapter.geo1", d, d, rng),
          geo2(ps, "adapter.geo2", d, geo_dim, rng),
          dyn1(ps, "adapter.dyn1", d, d, rng),
          dyn2(ps, "adapter.dyn2", d, cond_dim, rng),
          traj1(ps, "head.traj1", d, 2 * d, rng),
          traj2(ps, "head.traj2", 2 * d, 3 * horizon, rng) {}

    Value<S> semantic(Tape<S>& t, Value<S> h) const { return sem2.forward(t, gelu(sem1.forward(t, h))); }
    Value<S> geometric(Tape<S>& t, Value<S> h) const { return geo2.forward(t, gelu(geo1.forward(t, h))); }
    Value<S> dynamic(Tape<S>& t, Value<S> h) const { return dyn2.forward(t, gelu(dyn1.forward(t, h))); }
    Value<S> trajectory(Tape<S>& t, Value<S> h_last) const {
        return traj2.forward(t, gelu(traj1.forward(t, h_last)));
    }
};

/// Toy VLM stand-in: full bidirectional transformer over image patches,
/// text tokens, and learnable expert-token groups.
template <typename S>
struct ExpertBackbone {
    Linear<S> patch_embed;
    Param<S>* text_embedding = nullptr;
    Param<S>* pos = nullptr;
    std::vector<std::pair<std::string, Param<S>*>> expert_tokens;  // each [k*T, d]
    std::vector<TransformerBlock<S>> blocks;

    int n_patches = 0, max_text = 0, k_per_step = 1, horizon = 0, d = 0;

    ExpertBackbone() = default;
    ExpertBackbone(ParamStore<S>& ps, const RunConfig& cfg, const std::vector<std::string>& enabled, Rng& rng) {
        n_patches = (cfg.grid_size / cfg.patch_size) * (cfg.grid_size / cfg.patch_size);
        const int patch_dim = sim::SimParams::kGridChannels * cfg.patch_size * cfg.patch_size;
        max_text = cfg.max_text_tokens;
        k_per_step = cfg.k_per_step;
        horizon = cfg.horizon;
        d = cfg.d_model;
        wm::PromptTokenizer tok;
        patch_embed = Linear<S>(ps, "bb.patch_embed", patch_dim, d, rng);
        text_embedding = &ps.create_normal("bb.text_embedding", {tok.vocab_size(), d}, rng, 0.5);
        for (const auto& name : expert_order()) {
            if (std::find(enabled.begin(), enabled.end(), name) == enabled.end()) continue;
            expert_tokens.emplace_back(name,
                                       &ps.create_normal("bb.expert." + name, {k_per_step * horizon, d}, rng, 0.5));
        }
        const int total = n_patches + max_text + static_cast<int>(expert_tokens.size()) * k_per_step * horizon;
        pos = &ps.create_normal("bb.pos", {total, d}, rng, 0.1);
        for (int l = 0; l < cfg.backbone_layers; ++l) {
            blocks.emplace_back(ps, "bb.block" + std::to_string(l), d, cfg.heads, 2 * d, rng);
        }
    }

    TokenLayout layout(int text_real) const {
        TokenLayout lay;
        lay.image = {0, n_patches};
        lay.text = {n_patches, max_text};
        lay.text_real = std::min(text_real, max_text);
        int at = n_patches + max_text;
        for (const auto& [name, p] : expert_tokens) {
            lay.experts.emplace_back(name, Segment{at, k_per_step * horizon});
            at += k_per_step * horizon;
        }
        lay.total = at;
        return lay;
    }

    /// Embedded input sequence in layout order.
    Value<S> assemble(Tape<S>& t, const Tensor<S>& patches, const std::vector<int>& text_ids,
                      const TokenLayout& lay) const {
        std::vector<Value<S>> parts;
        parts.push_back(patch_embed.forward(t, t.constant(patches)));
        parts.push_back(gather_rows(t.param(*text_embedding), text_ids));
        for (const auto& [name, p] : expert_tokens) parts.push_back(t.param(*p));
        Value<S> x = concat_rows(parts);
        if (x.shape()[0] != lay.total) throw std::runtime_error("assemble: layout mismatch");
        return add(x, t.param(*pos));
    }

    /// Runs the block stack and extracts the hidden-state bundle. Padded
    /// text positions are masked out of attention.
    ExpertHiddenBundle<S> forward(Tape<S>& t, Value<S> x, const TokenLayout& lay) const {
        Tensor<S> mask({lay.total});
        for (int i = lay.text.start + lay.text_real; i < lay.text.start + lay.text.length; ++i)
            mask[i] = S(-1e30);
        for (const auto& b : blocks) x = b.forward(t, x, &mask);
        ExpertHiddenBundle<S> out;
        out.ctx = slice_rows(x, 0, n_patches + max_text);
        for (const auto& [name, seg] : lay.experts) out.experts[name] = slice_rows(x, seg.start, seg.length);
        return out;
    }
};

/// Oracle features per future step -> target matrix aligned row-for-row
/// with an expert group: each step's (single) feature vector is shared by
/// that step's k_per_step slots.
template <typename S>
Tensor<S> pool_expert_target(const std::vector<sim::OracleFeatures>& per_step, int k_per_step) {
    if (per_step.empty()) throw std::invalid_argument("pool_expert_target: empty feature sequence");
    const int t_steps = static_cast<int>(per_step.size());
    const int dim = static_cast<int>(per_step[0].values.size());
    Tensor<S> out({t_steps * k_per_step, dim});
    for (int s = 0; s < t_steps; ++s) {
        if (static_cast<int>(per_step[static_cast<std::size_t>(s)].values.size()) != dim) {
            throw std::invalid_argument("pool_expert_target: inconsistent feature dims");
        }
        for (int k = 0; k < k_per_step; ++k)
            for (int j = 0; j < dim; ++j)
                out.at(s * k_per_step + k, j) = static_cast<S>(per_step[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(j)]);
    }
    return out;
}

template <typename S>
Value<S> semantic_loss(Tape<S>& t, Value<S> h_sem, const Tensor<S>& z_sem, const AdapterSet<S>& adapters,
                       double lambda_l1, double lambda_cos, double beta, int* zero_rows = nullptr) {
    Value<S> z_hat = adapters.semantic(t, h_sem);
    Value<S> target = t.constant(z_sem);
    Value<S> l1 = smooth_l1_loss(z_hat, target, static_cast<S>(beta));
    Value<S> cos = cosine_alignment_loss(z_hat, target, zero_rows);
    return add(scale(l1, static_cast<S>(lambda_l1)), scale(cos, static_cast<S>(lambda_cos)));
}

template <typename S>
Value<S> geometric_loss(Tape<S>& t, Value<S> h_geo, const Tensor<S>& z_geo, const AdapterSet<S>& adapters) {
    return mse_loss(adapters.geometric(t, h_geo), t.constant(z_geo));
}

/// World-model conditioning branch: the adapted dynamic-token rows replace
/// the text condition of the (frozen) stage-1 velocity network.
template <typename S>
Value<S> dynamic_loss(Tape<S>& t, Value<S> h_dyn, const AdapterSet<S>& adapters,
                      const wm::VelocityNet<S>& velocity, const Tensor<S>& z_h,
                      const wm::PerturbedFuture<S>& perturbed) {
    Value<S> cond = adapters.dynamic(t, h_dyn);
    Value<S> v_all = velocity.forward(t, t.constant(z_h), t.constant(perturbed.z_tilde), cond,
                                      cond.shape()[0], perturbed.sigma);
    return wm::flow_loss(t, v_all, perturbed.v_target, velocity.n_h, velocity.n_f);
}

/// MLP head on the last trajectory-token hidden state -> T x 3 waypoints.
template <typename S>
Value<S> trajectory_head(Tape<S>& t, Value<S> h_traj, const AdapterSet<S>& adapters, int horizon) {
    Value<S> last = slice_rows(h_traj, h_traj.shape()[0] - 1, 1);
    return reshape(adapters.trajectory(t, last), {horizon, 3});
}

template <typename S>
Value<S> trajectory_loss(Tape<S>& t, Value<S> pred_waypoints, const Tensor<S>& gt_waypoints) {
    return mse_loss(pred_waypoints, t.constant(gt_waypoints));
}

/// Weighted sum of the enabled branch losses.
template <typename S>
Value<S> total_loss(const std::vector<std::pair<double, Value<S>>>& weighted_parts) {
    if (weighted_parts.empty()) throw std::invalid_argument("total_loss: no parts");
    Value<S> out = scale(weighted_parts[0].second, static_cast<S>(weighted_parts[0].first));
    for (std::size_t i = 1; i < weighted_parts.size(); ++i) {
        out = add(out, scale(weighted_parts[i].second, static_cast<S>(weighted_parts[i].first)));
    }
    return out;
}

/// Ground-truth future as a [T,3] tensor (x, y, psi).
template <typename S>
Tensor<S> future_tensor(const sim::Scenario& scn) {
    Tensor<S> out({scn.horizon, 3});
    for (int k = 0; k < scn.horizon; ++k) {
        out.at(k, 0) = static_cast<S>(scn.ego_future[static_cast<std::size_t>(k)].x);
        out.at(k, 1) = static_cast<S>(scn.ego_future[static_cast<std::size_t>(k)].y);
        out.at(k, 2) = static_cast<S>(scn.ego_future[static_cast<std::size_t>(k)].psi);
    }
    return out;
}

}  // namespace minidrive::backbone
