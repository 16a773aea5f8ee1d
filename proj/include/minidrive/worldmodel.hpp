#pragma once

#include <functional>
#include <string>
#include <vector>

#include "minidrive/config.hpp"
#include "minidrive/drivesim.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/prompt.hpp"
#include "minidrive/tape.hpp"

namespace minidrive::wm {

/// Flattens a rendered grid into per-patch rows: [n_patches, C*ps*ps].
template <typename S>
Tensor<S> patchify(const sim::ObservationGrid& grid, int patch_size) {
    const int ch = grid.data.dim(0), h = grid.data.dim(1), w = grid.data.dim(2);
    const int pr = h / patch_size, pc = w / patch_size;
    const int patch_dim = ch * patch_size * patch_size;
    Tensor<S> out({pr * pc, patch_dim});
    for (int bi = 0; bi < pr; ++bi)
        for (int bj = 0; bj < pc; ++bj) {
            S* row = out.data() + static_cast<std::int64_t>(bi * pc + bj) * patch_dim;
            std::int64_t k = 0;
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < patch_size; ++i)
                    for (int j = 0; j < patch_size; ++j) {
                        row[k++] = static_cast<S>(grid.at(c, bi * patch_size + i, bj * patch_size + j));
                    }
        }
    return out;
}

/// Frame autoencoder: shared per-patch projection, then a bottleneck over
/// the concatenated patch codes. Pretrained by reconstruction and frozen.
template <typename S>
struct FrameAutoencoder {
    Linear<S> enc_patch, enc_bottleneck, dec_bottleneck, dec_patch;
    int n_patches = 0, patch_dim = 0, patch_code = 0, latent_dim = 0;

    FrameAutoencoder() = default;
    FrameAutoencoder(ParamStore<S>& ps, int n_patches_, int patch_dim_, int latent_dim_, Rng& rng,
                     int patch_code_ = 32)
        : enc_patch(ps, "ae.enc_patch", patch_dim_, patch_code_, rng),
          enc_bottleneck(ps, "ae.enc_bottleneck", n_patches_ * patch_code_, latent_dim_, rng),
          dec_bottleneck(ps, "ae.dec_bottleneck", latent_dim_, n_patches_ * patch_code_, rng),
          dec_patch(ps, "ae.dec_patch", patch_code_, patch_dim_, rng),
          n_patches(n_patches_),
          patch_dim(patch_dim_),
          patch_code(patch_code_),
          latent_dim(latent_dim_) {}

    /// patches: [n_patches, patch_dim] -> latent [1, latent_dim]
    Value<S> encode(Tape<S>& t, Value<S> patches) const {
        Value<S> codes = gelu(enc_patch.forward(t, patches));
        return enc_bottleneck.forward(t, reshape(codes, {1, n_patches * patch_code}));
    }

    /// latent [1, latent_dim] -> patches [n_patches, patch_dim]
    Value<S> decode(Tape<S>& t, Value<S> latent) const {
        Value<S> codes = gelu(reshape(dec_bottleneck.forward(t, latent), {n_patches, patch_code}));
        return dec_patch.forward(t, codes);
    }

    Tensor<S> encode_frame(const Tensor<S>& patches) const {
        Tape<S> t;
        return encode(t, t.constant(patches)).val();
    }
};

/// History/future latent pair. The history side is never perturbed.
template <typename S>
struct LatentSequence {
    Tensor<S> z_h;  // [n_h_frames, latent_dim]
    Tensor<S> z_f;  // [n_f_frames, latent_dim]
};

/// Linear interpolation toward noise at level sigma, with its velocity
/// target: z_tilde = (1-sigma) z_f + sigma eps, v_target = eps - z_f.
template <typename S>
struct PerturbedFuture {
    Tensor<S> z_tilde;
    Tensor<S> epsilon;
    double sigma = 0.0;
    Tensor<S> v_target;
};

template <typename S>
PerturbedFuture<S> perturb_future(const Tensor<S>& z_f, const Tensor<S>& epsilon, double sigma) {
    if (!(sigma > 0.0 && sigma < 1.0)) throw std::invalid_argument("perturb_future: sigma must be in (0,1)");
    if (z_f.shape() != epsilon.shape()) throw std::invalid_argument("perturb_future: shape mismatch");
    PerturbedFuture<S> out;
    out.sigma = sigma;
    out.epsilon = epsilon;
    out.z_tilde = Tensor<S>(z_f.shape());
    out.v_target = Tensor<S>(z_f.shape());
    for (std::int64_t i = 0; i < z_f.numel(); ++i) {
        out.z_tilde[i] = static_cast<S>((1.0 - sigma) * z_f[i] + sigma * epsilon[i]);
        out.v_target[i] = epsilon[i] - z_f[i];
    }
    return out;
}

/// Token-sequence condition encoder: embedding table plus one pre-norm
/// block. Trained in stage 1 and frozen afterwards.
template <typename S>
struct CondEncoder {
    Param<S>* embedding = nullptr;  // [vocab, cond_dim]
    Param<S>* pos = nullptr;        // [max_tokens, cond_dim]
    TransformerBlock<S> block;
    int max_tokens = 0, cond_dim = 0;

    CondEncoder() = default;
    CondEncoder(ParamStore<S>& ps, int vocab, int max_tokens_, int cond_dim_, int heads, Rng& rng)
        : block(ps, "cond.block", cond_dim_, heads, 2 * cond_dim_, rng),
          max_tokens(max_tokens_),
          cond_dim(cond_dim_) {
        embedding = &ps.create_normal("cond.embedding", {vocab, cond_dim_}, rng, 0.5);
        pos = &ps.create_normal("cond.pos", {max_tokens_, cond_dim_}, rng, 0.1);
    }

    /// ids padded to max_tokens; n_real marks the visible prefix.
    Value<S> forward(Tape<S>& t, const std::vector<int>& ids, int n_real, Tensor<S>* mask_out = nullptr) const {
        Value<S> emb = add(gather_rows(t.param(*embedding), ids), t.param(*pos));
        const Tensor<S> mask = pad_mask<S>(max_tokens, n_real);
        if (mask_out) *mask_out = mask;
        return block.forward(t, emb, &mask);
    }
};

/// Velocity network over [history latents | perturbed future latents |
/// condition tokens], with a sigma embedding added to every future token.
/// The head reads all latent positions; the loss later keeps only the
/// future rows.
template <typename S>
struct VelocityNet {
    Linear<S> lat_proj, cond_proj, sigma_proj, head;
    Param<S>* pos = nullptr;
    LayerNorm<S> final_ln;
    std::vector<TransformerBlock<S>> blocks;
    int n_h = 0, n_f = 0, max_cond = 0, d = 0, sigma_feat = 32;

    VelocityNet() = default;
    VelocityNet(ParamStore<S>& ps, int n_h_, int n_f_, int max_cond_, int latent_dim, int cond_dim, int d_model,
                int heads, int layers, Rng& rng)
        : lat_proj(ps, "vel.lat_proj", latent_dim, d_model, rng),
          cond_proj(ps, "vel.cond_proj", cond_dim, d_model, rng),
          sigma_proj(ps, "vel.sigma_proj", 32, d_model, rng),
          head(ps, "vel.head", d_model, latent_dim, rng),
          final_ln(ps, "vel.final_ln", d_model),
          n_h(n_h_),
          n_f(n_f_),
          max_cond(max_cond_),
          d(d_model) {
        pos = &ps.create_normal("vel.pos", {n_h_ + n_f_ + max_cond_, d_model}, rng, 0.1);
        for (int l = 0; l < layers; ++l) {
            blocks.emplace_back(ps, "vel.block" + std::to_string(l), d_model, heads, 2 * d_model, rng);
        }
    }

    /// cond must be [n_cond, cond_dim] with n_cond <= max_cond; positions
    /// past n_cond_real are masked out of attention.
    Value<S> forward(Tape<S>& t, Value<S> z_h, Value<S> z_tilde, Value<S> cond, int n_cond_real,
                     double sigma) const {
        if (cond.shape()[0] > max_cond) throw std::invalid_argument("VelocityNet: too many condition tokens");
        Value<S> lat = lat_proj.forward(t, concat_rows<S>({z_h, z_tilde}));
        const Tensor<S> sig_feat = sinusoidal_features<S>(sigma, 32);
        Value<S> sig = sigma_proj.forward(t, reshape(t.constant(sig_feat), {1, 32}));
        // add sigma embedding to every future token
        std::vector<Value<S>> sig_rows(static_cast<std::size_t>(n_f), sig);
        Value<S> hist = slice_rows(lat, 0, n_h);
        Value<S> fut = add(slice_rows(lat, n_h, n_f), concat_rows<S>(sig_rows));
        Value<S> cseq = cond_proj.forward(t, cond);
        const int n_cond = cond.shape()[0];
        Value<S> x = concat_rows<S>({hist, fut, cseq});
        Value<S> posv = slice_rows(t.param(*pos), 0, n_h + n_f + n_cond);
        x = add(x, posv);
        Tensor<S> mask = pad_mask<S>(n_h + n_f + n_cond, n_h + n_f + n_cond_real);
        for (const auto& b : blocks) x = b.forward(t, x, &mask);
        return head.forward(t, final_ln.forward(t, slice_rows(x, 0, n_h + n_f)));
    }
};

/// Flow-matching loss restricted to the future segment: history-position
/// outputs do not contribute.
template <typename S>
Value<S> flow_loss(Tape<S>& t, Value<S> v_all, const Tensor<S>& v_target, int n_h, int n_f) {
    Value<S> v_fut = slice_rows(v_all, n_h, n_f);
    return mse_loss(v_fut, t.constant(v_target));
}

/// Euler integration of dz/dsigma = field(z, sigma) from sigma=1 (noise)
/// down to sigma=0, on a uniform grid.
template <typename S>
Tensor<S> sample_future_with(const std::function<Tensor<S>(const Tensor<S>&, double)>& field,
                             const Tensor<S>& noise, int steps) {
    if (steps < 1) throw std::invalid_argument("sample_future_with: steps must be >= 1");
    Tensor<S> z = noise.clone();
    for (int k = 0; k < steps; ++k) {
        const double sigma = 1.0 - static_cast<double>(k) / steps;
        const double d_sigma = 1.0 / steps;
        const Tensor<S> v = field(z, sigma);
        if (v.shape() != z.shape()) throw std::runtime_error("sample_future_with: field shape mismatch");
        for (std::int64_t i = 0; i < z.numel(); ++i) z[i] -= static_cast<S>(d_sigma) * v[i];
    }
    return z;
}

/// Stage-1 model bundle (frozen autoencoder + condition encoder + velocity
/// network share one parameter store each).
template <typename S>
struct Stage1Model {
    ParamStore<S> ae_params;
    ParamStore<S> params;  // condition encoder + velocity net
    FrameAutoencoder<S> ae;
    CondEncoder<S> cond_encoder;
    VelocityNet<S> velocity;
    PromptTokenizer tokenizer;

    Stage1Model(const RunConfig& cfg, Rng& rng) {
        const int n_patches = (cfg.grid_size / cfg.patch_size) * (cfg.grid_size / cfg.patch_size);
        const int patch_dim = sim::SimParams::kGridChannels * cfg.patch_size * cfg.patch_size;
        ae = FrameAutoencoder<S>(ae_params, n_patches, patch_dim, cfg.latent_dim, rng);
        cond_encoder = CondEncoder<S>(params, tokenizer.vocab_size(), cfg.max_cond_tokens, cfg.cond_dim,
                                      cfg.heads, rng);
        velocity = VelocityNet<S>(params, cfg.n_history, cfg.horizon, cfg.max_cond_tokens, cfg.latent_dim,
                                  cfg.cond_dim, cfg.d_model, cfg.heads, cfg.wm_layers, rng);
    }

    /// Deterministic sampler around the trained velocity network.
    Tensor<S> sample_future(const Tensor<S>& z_h, const std::vector<int>& cond_ids, int n_cond_real, int steps,
                            Rng& rng) const {
        Tensor<S> noise({velocity.n_f, ae.latent_dim});
        rng.fill_normal(noise, 1.0);
        auto field = [&](const Tensor<S>& z, double sigma) -> Tensor<S> {
            Tape<S> t;
            Value<S> cond = cond_encoder.forward(t, cond_ids, n_cond_real);
            Value<S> v = velocity.forward(t, t.constant(z_h), t.constant(z), cond, n_cond_real, sigma);
            Tensor<S> fut({velocity.n_f, ae.latent_dim});
            const Tensor<S>& all = v.val();
            std::copy_n(all.data() + static_cast<std::int64_t>(velocity.n_h) * ae.latent_dim, fut.numel(),
                        fut.data());
            return fut;
        };
        return sample_future_with<S>(field, noise, steps);
    }
};

}  // namespace minidrive::wm
