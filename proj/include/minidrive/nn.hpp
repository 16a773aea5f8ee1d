#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "minidrive/tape.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

/// Owns all parameters of a model; names are unique and stable, used for
/// checkpointing and optimizer state.
template <typename S>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Param<S>& create(const std::string& name, std::vector<int> shape) {
        if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate parameter " + name);
        storage_.push_back(Param<S>{name, Tensor<S>(std::move(shape)), Tensor<S>(), true});
        Param<S>& p = storage_.back();
        p.value.requires_grad = true;
        order_.push_back(&p);
        index_[name] = &p;
        return p;
    }

    Param<S>& create_normal(const std::string& name, std::vector<int> shape, Rng& rng, double stddev) {
        Param<S>& p = create(name, std::move(shape));
        rng.fill_normal(p.value, stddev);
        return p;
    }

    Param<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : it->second;
    }

    const std::vector<Param<S>*>& params() const { return order_; }
    std::size_t size() const { return order_.size(); }

    std::int64_t numel() const {
        std::int64_t n = 0;
        for (auto* p : order_) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto* p : order_) {
            if (p->grad.empty()) p->grad = Tensor<S>(p->value.shape());
            else p->grad.fill(S(0));
        }
    }

    void set_trainable(bool trainable) {
        for (auto* p : order_) p->trainable = trainable;
    }

    /// FNV-1a over the raw parameter bytes in registration order. Used to
    /// assert that frozen stages stay bit-identical.
    std::uint64_t content_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        for (auto* p : order_) {
            const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
            const std::size_t nb = static_cast<std::size_t>(p->value.numel()) * sizeof(S);
            for (std::size_t i = 0; i < nb; ++i) { h ^= bytes[i]; h *= 1099511628211ull; }
        }
        return h;
    }

private:
    std::deque<Param<S>> storage_;  // deque: stable addresses
    std::vector<Param<S>*> order_;
    std::unordered_map<std::string, Param<S>*> index_;
};

// ---------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------

template <typename S>
struct Linear {
    Param<S>* W = nullptr;  // [in, out]
    Param<S>* b = nullptr;  // [out]

    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& prefix, int in, int out, Rng& rng, double init_std = -1.0) {
        if (init_std < 0) init_std = 1.0 / std::sqrt(static_cast<double>(in));
        W = &ps.create_normal(prefix + ".weight", {in, out}, rng, init_std);
        b = &ps.create(prefix + ".bias", {out});
    }

    Value<S> forward(Tape<S>& t, Value<S> x) const {
        return add_rowvec(matmul(x, t.param(*W)), t.param(*b));
    }
};

template <typename S>
struct LayerNorm {
    Param<S>* gamma = nullptr;
    Param<S>* beta = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore<S>& ps, const std::string& prefix, int dim) {
        gamma = &ps.create(prefix + ".gamma", {dim});
        gamma->value.fill(S(1));
        beta = &ps.create(prefix + ".beta", {dim});
    }

    Value<S> forward(Tape<S>& t, Value<S> x) const {
        return add_rowvec(mul_rowvec(layer_norm_rows(x), t.param(*gamma)), t.param(*beta));
    }
};

template <typename S>
struct Mlp {
    Linear<S> fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore<S>& ps, const std::string& prefix, int dim, int hidden, Rng& rng)
        : fc1(ps, prefix + ".fc1", dim, hidden, rng), fc2(ps, prefix + ".fc2", hidden, dim, rng) {}

    Value<S> forward(Tape<S>& t, Value<S> x) const { return fc2.forward(t, gelu(fc1.forward(t, x))); }
};

/// Scaled dot-product attention with head split/merge on the tape.
/// `key_mask`, when given, is an additive [n_k] row (0 for visible keys,
/// a large negative value for masked ones).
template <typename S>
struct MultiheadAttention {
    Linear<S> wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore<S>& ps, const std::string& prefix, int dim_, int heads_, Rng& rng)
        : wq(ps, prefix + ".q", dim_, dim_, rng),
          wk(ps, prefix + ".k", dim_, dim_, rng),
          wv(ps, prefix + ".v", dim_, dim_, rng),
          wo(ps, prefix + ".o", dim_, dim_, rng),
          heads(heads_),
          dim(dim_) {
        if (heads_ <= 0 || dim_ % heads_ != 0) {
            throw std::invalid_argument("MultiheadAttention: dim " + std::to_string(dim_) +
                                        " not divisible by heads " + std::to_string(heads_));
        }
    }

    Value<S> forward(Tape<S>& t, Value<S> q_in, Value<S> kv_in, const Tensor<S>* key_mask = nullptr) const {
        const int dh = dim / heads;
        Value<S> q = wq.forward(t, q_in);
        Value<S> k = wk.forward(t, kv_in);
        Value<S> v = wv.forward(t, kv_in);
        Value<S> maskv{};
        if (key_mask) {
            if (key_mask->numel() != kv_in.shape()[0]) throw std::invalid_argument("attention: mask length mismatch");
            maskv = t.constant(*key_mask);
        }
        const S scl = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
        std::vector<Value<S>> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Value<S> qh = slice_cols(q, h * dh, dh);
            Value<S> kh = slice_cols(k, h * dh, dh);
            Value<S> vh = slice_cols(v, h * dh, dh);
            Value<S> scores = scale(matmul(qh, transpose(kh)), scl);
            if (key_mask) scores = add_rowvec(scores, maskv);
            head_outs.push_back(matmul(softmax_rows(scores), vh));
        }
        return wo.forward(t, concat_cols(head_outs));
    }
};

/// Pre-norm residual transformer block.
template <typename S>
struct TransformerBlock {
    LayerNorm<S> ln1, ln2;
    MultiheadAttention<S> attn;
    Mlp<S> mlp;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<S>& ps, const std::string& prefix, int dim, int heads, int mlp_hidden, Rng& rng)
        : ln1(ps, prefix + ".ln1", dim),
          ln2(ps, prefix + ".ln2", dim),
          attn(ps, prefix + ".attn", dim, heads, rng),
          mlp(ps, prefix + ".mlp", dim, mlp_hidden, rng) {}

    Value<S> forward(Tape<S>& t, Value<S> x, const Tensor<S>* key_mask = nullptr) const {
        Value<S> h = ln1.forward(t, x);
        x = add(x, attn.forward(t, h, h, key_mask));
        return add(x, mlp.forward(t, ln2.forward(t, x)));
    }
};

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

/// AdamW with decoupled weight decay and bias-corrected moments.
template <typename S>
class AdamW {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Options opt = {}) : opt_(opt) {}

    Options& options() { return opt_; }
    std::int64_t step_count() const { return step_; }

    void step(ParamStore<S>& ps) {
        ++step_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
        for (Param<S>* p : ps.params()) {
            if (!p->trainable) continue;
            if (p->grad.empty()) p->grad = Tensor<S>(p->value.shape());
            if (p->grad.shape() != p->value.shape()) throw std::runtime_error("AdamW: grad shape mismatch for " + p->name);
            Slot& s = slot(*p);
            for (std::int64_t i = 0; i < p->value.numel(); ++i) {
                const double g = static_cast<double>(p->grad[i]);
                double m = opt_.beta1 * static_cast<double>(s.m[i]) + (1.0 - opt_.beta1) * g;
                double v = opt_.beta2 * static_cast<double>(s.v[i]) + (1.0 - opt_.beta2) * g * g;
                s.m[i] = static_cast<S>(m);
                s.v[i] = static_cast<S>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                double x = static_cast<double>(p->value[i]);
                x -= opt_.lr * opt_.weight_decay * x;  // decoupled decay
                x -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
                p->value[i] = static_cast<S>(x);
            }
        }
    }

    /// Moment buffers as named tensors, for exact resume.
    std::vector<std::pair<std::string, Tensor<S>>> state_tensors() const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        for (const auto& [name, s] : slots_) {
            out.emplace_back("adam.m." + name, s.m);
            out.emplace_back("adam.v." + name, s.v);
        }
        return out;
    }

    void load_state(const std::string& param_name, const Tensor<S>& m, const Tensor<S>& v) {
        slots_[param_name] = Slot{m.clone(), v.clone()};
    }

    void set_step_count(std::int64_t s) { step_ = s; }

private:
    struct Slot {
        Tensor<S> m, v;
    };

    Slot& slot(const Param<S>& p) {
        auto it = slots_.find(p.name);
        if (it == slots_.end()) {
            it = slots_.emplace(p.name, Slot{Tensor<S>(p.value.shape()), Tensor<S>(p.value.shape())}).first;
        }
        return it->second;
    }

    Options opt_;
    std::int64_t step_ = 0;
    std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------

/// Sinusoidal features for a scalar in [0,1]; half sines, half cosines
/// over log-spaced periods.
template <typename S>
Tensor<S> sinusoidal_features(double x, int dim, double max_period = 100.0) {
    Tensor<S> out({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(max_period, -static_cast<double>(i) / std::max(1, half - 1));
        out[i] = static_cast<S>(std::sin(2.0 * M_PI * x / freq));
        out[half + i] = static_cast<S>(std::cos(2.0 * M_PI * x / freq));
    }
    return out;
}

/// Additive key mask: 0 for the first `visible` positions, -1e30 after.
template <typename S>
Tensor<S> pad_mask(int total, int visible) {
    Tensor<S> m({total});
    for (int i = visible; i < total; ++i) m[i] = S(-1e30);
    return m;
}

}  // namespace minidrive
