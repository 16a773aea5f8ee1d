#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "minidrive/tensor.hpp"

namespace minidrive {

/// Named trainable tensor. `grad` is accumulated by Tape::backward and
/// cleared by the optimizer / ParamStore::zero_grad.
template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;
    bool trainable = true;
};

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy, valid for the tape's lifetime.
template <typename S>
struct Value {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Tensor<S>& val() const { return tape->node_value(id); }
    const std::vector<int>& shape() const { return val().shape(); }
    S item() const {
        if (val().numel() != 1) throw std::runtime_error("Value::item: not a scalar");
        return val()[0];
    }
};

/// Reverse-mode tape. Nodes are recorded in execution order (already
/// topologically sorted); backward replays them in reverse exactly once.
/// Constants (leaves with requires_grad=false, detached values) have
/// needs_grad=false and block gradient flow.
template <typename S>
class Tape {
public:
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapMat = Eigen::Map<Mat>;
    using CMapMat = Eigen::Map<const Mat>;

    struct Node {
        Tensor<S> value;
        Tensor<S> grad;  // lazily allocated
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;  // empty for leaves
        bool needs_grad = false;
    };

    Value<S> leaf(const Tensor<S>& t) {
        Node n;
        n.value = t;
        n.needs_grad = t.requires_grad;
        return push(std::move(n));
    }

    Value<S> constant(const Tensor<S>& t) {
        Node n;
        n.value = t;
        n.needs_grad = false;
        return push(std::move(n));
    }

    Value<S> constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }

    /// Tracked leaf for a parameter; backward accumulates into param.grad.
    /// Frozen parameters enter as constants: gradients still flow *through*
    /// ops that consume them, just not *into* them.
    Value<S> param(Param<S>& p) {
        Node n;
        n.value = p.value;
        n.needs_grad = p.trainable;
        Value<S> v = push(std::move(n));
        if (p.trainable) param_leaves_.emplace_back(&p, v.id);
        return v;
    }

    const Tensor<S>& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor<S>& node_grad(int id) { return grad_buffer(id); }
    std::size_t size() const { return nodes_.size(); }

    /// Backpropagate from a scalar loss. Gradients of tracked parameter
    /// leaves are accumulated into their Param::grad buffers.
    void backward(Value<S> loss) {
        if (loss.tape != this) throw std::runtime_error("backward: value from another tape");
        const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
        if (ln.value.numel() != 1) throw std::runtime_error("backward: loss must be scalar");
        if (!std::isfinite(static_cast<double>(ln.value[0]))) {
            throw std::runtime_error("backward: non-finite loss value");
        }
        grad_buffer(loss.id)[0] = S(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
        for (auto& [p, id] : param_leaves_) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.empty()) continue;
            if (p->grad.empty()) p->grad = Tensor<S>(p->value.shape());
            for (std::int64_t k = 0; k < n.grad.numel(); ++k) p->grad[k] += n.grad[k];
        }
    }

    // ---- op internals ------------------------------------------------

    Value<S> make(Tensor<S> value, std::vector<int> parents, std::function<void(Tape&, int)> bw) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        for (int p : n.parents) {
            if (nodes_[static_cast<std::size_t>(p)].needs_grad) { n.needs_grad = true; break; }
        }
        if (n.needs_grad) n.backward = std::move(bw);
        return push(std::move(n));
    }

    bool parent_needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Tensor<S>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<S>(n.value.shape());
        return n.grad;
    }

    /// Adds `g` into the grad buffer of `id` (skips constants).
    void accumulate(int id, const S* g, std::int64_t n) {
        Node& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.needs_grad) return;
        Tensor<S>& buf = grad_buffer(id);
        for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i];
    }

private:
    Value<S> push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Value<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<Param<S>*, int>> param_leaves_;
};

// ---------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------

namespace detail {
template <typename S>
void check_same_shape(const Value<S>& a, const Value<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}
}  // namespace detail

template <typename S>
Value<S> add(Value<S> a, Value<S> b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
    return a.tape->make(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        t.accumulate(pa, g.data(), g.numel());
        t.accumulate(pb, g.data(), g.numel());
    });
}

template <typename S>
Value<S> sub(Value<S> a, Value<S> b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
    return a.tape->make(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        t.accumulate(pa, g.data(), g.numel());
        if (t.parent_needs(pb)) {
            Tensor<S> neg(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) neg[i] = -g[i];
            t.accumulate(pb, neg.data(), neg.numel());
        }
    });
}

template <typename S>
Value<S> mul(Value<S> a, Value<S> b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    return a.tape->make(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& av = t.node_value(pa);
        const Tensor<S>& bv = t.node_value(pb);
        if (t.parent_needs(pa)) {
            Tensor<S> ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * bv[i];
            t.accumulate(pa, ga.data(), ga.numel());
        }
        if (t.parent_needs(pb)) {
            Tensor<S> gb(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * av[i];
            t.accumulate(pb, gb.data(), gb.numel());
        }
    });
}

template <typename S>
Value<S> scale(Value<S> a, S c) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * c;
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, c](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        Tensor<S> ga(g.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * c;
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> add_scalar(Value<S> a, S c) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + c;
    return a.tape->make(std::move(out), {a.id}, [pa = a.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        t.accumulate(pa, g.data(), g.numel());
    });
}

template <typename S>
Value<S> matmul(Value<S> a, Value<S> b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor<S> out({n, m});
    {
        typename Tape<S>::CMapMat A(a.val().data(), n, k), B(b.val().data(), k, m);
        typename Tape<S>::MapMat C(out.data(), n, m);
        C.noalias() = A * B;
    }
    return a.tape->make(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id, n, k, m](Tape<S>& t, int self) {
        typename Tape<S>::CMapMat G(t.node_grad(self).data(), n, m);
        typename Tape<S>::CMapMat A(t.node_value(pa).data(), n, k);
        typename Tape<S>::CMapMat B(t.node_value(pb).data(), k, m);
        if (t.parent_needs(pa)) {
            Tensor<S> ga({n, k});
            typename Tape<S>::MapMat GA(ga.data(), n, k);
            GA.noalias() = G * B.transpose();
            t.accumulate(pa, ga.data(), ga.numel());
        }
        if (t.parent_needs(pb)) {
            Tensor<S> gb({k, m});
            typename Tape<S>::MapMat GB(gb.data(), k, m);
            GB.noalias() = A.transpose() * G;
            t.accumulate(pb, gb.data(), gb.numel());
        }
    });
}

template <typename S>
Value<S> transpose(Value<S> a) {
    if (a.shape().size() != 2) throw std::invalid_argument("transpose: need 2-D");
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor<S> out({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(j, i) = a.val().at(i, j);
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);  // [m,n]
        Tensor<S> ga({n, m});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) ga.at(i, j) = g.at(j, i);
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

/// a: [n,m], v: [m] (or [1,m]); broadcast add per row.
template <typename S>
Value<S> add_rowvec(Value<S> a, Value<S> v) {
    const int n = a.shape()[0], m = a.shape()[1];
    if (v.val().numel() != m) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor<S> out({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(i, j) = a.val().at(i, j) + v.val()[j];
    return a.tape->make(std::move(out), {a.id, v.id}, [pa = a.id, pv = v.id, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        t.accumulate(pa, g.data(), g.numel());
        if (t.parent_needs(pv)) {
            Tensor<S> gv({m});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gv[j] += g.at(i, j);
            t.accumulate(pv, gv.data(), gv.numel());
        }
    });
}

/// a: [n,m], v: [m]; broadcast multiply per row.
template <typename S>
Value<S> mul_rowvec(Value<S> a, Value<S> v) {
    const int n = a.shape()[0], m = a.shape()[1];
    if (v.val().numel() != m) throw std::invalid_argument("mul_rowvec: width mismatch");
    Tensor<S> out({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(i, j) = a.val().at(i, j) * v.val()[j];
    return a.tape->make(std::move(out), {a.id, v.id}, [pa = a.id, pv = v.id, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& av = t.node_value(pa);
        const Tensor<S>& vv = t.node_value(pv);
        if (t.parent_needs(pa)) {
            Tensor<S> ga({n, m});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) ga.at(i, j) = g.at(i, j) * vv[j];
            t.accumulate(pa, ga.data(), ga.numel());
        }
        if (t.parent_needs(pv)) {
            Tensor<S> gv({m});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gv[j] += g.at(i, j) * av.at(i, j);
            t.accumulate(pv, gv.data(), gv.numel());
        }
    });
}

template <typename S>
Value<S> slice_rows(Value<S> a, int r0, int count) {
    const int n = a.shape()[0], m = a.shape()[1];
    if (r0 < 0 || count < 0 || r0 + count > n) throw std::invalid_argument("slice_rows: out of range");
    Tensor<S> out({count, m});
    std::copy_n(a.val().data() + static_cast<std::int64_t>(r0) * m, static_cast<std::int64_t>(count) * m, out.data());
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, r0, count, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        Tensor<S> ga({n, m});
        std::copy_n(g.data(), static_cast<std::int64_t>(count) * m, ga.data() + static_cast<std::int64_t>(r0) * m);
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> concat_rows(const std::vector<Value<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const int m = parts[0].shape()[1];
    int n = 0;
    std::vector<int> ids;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[1] != m) throw std::invalid_argument("concat_rows: width mismatch");
        n += p.shape()[0];
        ids.push_back(p.id);
    }
    Tensor<S> out({n, m});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.val().data(), p.val().numel(), out.data() + off);
        off += p.val().numel();
    }
    Tape<S>* tape = parts[0].tape;
    return tape->make(std::move(out), ids, [ids, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        std::int64_t off = 0;
        for (int pid : ids) {
            std::int64_t cnt = t.node_value(pid).numel();
            t.accumulate(pid, g.data() + off, cnt);
            off += cnt;
        }
    });
}

template <typename S>
Value<S> slice_cols(Value<S> a, int c0, int count) {
    const int n = a.shape()[0], m = a.shape()[1];
    if (c0 < 0 || count < 0 || c0 + count > m) throw std::invalid_argument("slice_cols: out of range");
    Tensor<S> out({n, count});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < count; ++j) out.at(i, j) = a.val().at(i, c0 + j);
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, c0, count, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        Tensor<S> ga({n, m});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < count; ++j) ga.at(i, c0 + j) = g.at(i, j);
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> concat_cols(const std::vector<Value<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int n = parts[0].shape()[0];
    int m = 0;
    std::vector<int> ids;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != n) throw std::invalid_argument("concat_cols: height mismatch");
        m += p.shape()[1];
        widths.push_back(p.shape()[1]);
        ids.push_back(p.id);
    }
    Tensor<S> out({n, m});
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.shape()[1];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j) out.at(i, c0 + j) = p.val().at(i, j);
        c0 += w;
    }
    Tape<S>* tape = parts[0].tape;
    return tape->make(std::move(out), ids, [ids, widths, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        int c0 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const int w = widths[k];
            if (t.parent_needs(ids[k])) {
                Tensor<S> gp({n, w});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j) gp.at(i, j) = g.at(i, c0 + j);
                t.accumulate(ids[k], gp.data(), gp.numel());
            }
            c0 += w;
        }
    });
}

/// Row gather (embedding lookup). Backward scatter-adds into the table.
template <typename S>
Value<S> gather_rows(Value<S> table, std::vector<int> indices) {
    const int n = table.shape()[0], m = table.shape()[1];
    Tensor<S> out({static_cast<int>(indices.size()), m});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int r = indices[i];
        if (r < 0 || r >= n) throw std::out_of_range("gather_rows: index out of range");
        std::copy_n(table.val().data() + static_cast<std::int64_t>(r) * m, m,
                    out.data() + static_cast<std::int64_t>(i) * m);
    }
    return table.tape->make(std::move(out), {table.id},
                            [pt = table.id, idx = std::move(indices), n, m](Tape<S>& t, int self) {
                                const Tensor<S>& g = t.node_grad(self);
                                Tensor<S> gt({n, m});
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (int j = 0; j < m; ++j) gt.at(idx[i], j) += g.at(static_cast<int>(i), j);
                                t.accumulate(pt, gt.data(), gt.numel());
                            });
}

/// Mean over consecutive blocks of `k` rows: [n,m] -> [n/k, m].
template <typename S>
Value<S> mean_row_blocks(Value<S> a, int k) {
    const int n = a.shape()[0], m = a.shape()[1];
    if (k <= 0 || n % k != 0) throw std::invalid_argument("mean_row_blocks: rows not divisible by block size");
    const int nb = n / k;
    Tensor<S> out({nb, m});
    for (int b = 0; b < nb; ++b)
        for (int r = 0; r < k; ++r)
            for (int j = 0; j < m; ++j) out.at(b, j) += a.val().at(b * k + r, j) / static_cast<S>(k);
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, k, n, m, nb](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        Tensor<S> ga({n, m});
        for (int b = 0; b < nb; ++b)
            for (int r = 0; r < k; ++r)
                for (int j = 0; j < m; ++j) ga.at(b * k + r, j) = g.at(b, j) / static_cast<S>(k);
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> softmax_rows(Value<S> a) {
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor<S> out({n, m});
    for (int i = 0; i < n; ++i) {
        S mx = a.val().at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, a.val().at(i, j));
        S sum = 0;
        for (int j = 0; j < m; ++j) {
            out.at(i, j) = std::exp(a.val().at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (int j = 0; j < m; ++j) out.at(i, j) /= sum;
    }
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& y = t.node_value(self);
        Tensor<S> ga({n, m});
        for (int i = 0; i < n; ++i) {
            S dot = 0;
            for (int j = 0; j < m; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < m; ++j) ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
        }
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

/// Row-wise normalization to zero mean / unit variance (no affine part).
template <typename S>
Value<S> layer_norm_rows(Value<S> a, S eps = S(1e-5)) {
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor<S> out({n, m});
    Tensor<S> inv_std({n});
    for (int i = 0; i < n; ++i) {
        S mean = 0;
        for (int j = 0; j < m; ++j) mean += a.val().at(i, j);
        mean /= static_cast<S>(m);
        S var = 0;
        for (int j = 0; j < m; ++j) {
            const S d = a.val().at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<S>(m);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < m; ++j) out.at(i, j) = (a.val().at(i, j) - mean) * is;
    }
    return a.tape->make(std::move(out), {a.id}, [pa = a.id, inv_std, n, m](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& y = t.node_value(self);  // normalized output
        Tensor<S> ga({n, m});
        for (int i = 0; i < n; ++i) {
            S gmean = 0, gymean = 0;
            for (int j = 0; j < m; ++j) {
                gmean += g.at(i, j);
                gymean += g.at(i, j) * y.at(i, j);
            }
            gmean /= static_cast<S>(m);
            gymean /= static_cast<S>(m);
            for (int j = 0; j < m; ++j)
                ga.at(i, j) = inv_std[i] * (g.at(i, j) - gmean - y.at(i, j) * gymean);
        }
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> gelu(Value<S> a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(a.val()[i]);
        out[i] = static_cast<S>(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
    }
    return a.tape->make(std::move(out), {a.id}, [pa = a.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& av = t.node_value(pa);
        Tensor<S> ga(g.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const double x = static_cast<double>(av[i]);
            const double u = kC * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
            const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
            ga[i] = g[i] * static_cast<S>(d);
        }
        t.accumulate(pa, ga.data(), ga.numel());
    });
}

template <typename S>
Value<S> sum_all(Value<S> a) {
    S s = 0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    Tensor<S> out = Tensor<S>::scalar(s);
    return a.tape->make(std::move(out), {a.id}, [pa = a.id](Tape<S>& t, int self) {
        const S g = t.node_grad(self)[0];
        const std::int64_t n = t.node_value(pa).numel();
        Tensor<S> ga(t.node_value(pa).shape());
        for (std::int64_t i = 0; i < n; ++i) ga[i] = g;
        t.accumulate(pa, ga.data(), n);
    });
}

template <typename S>
Value<S> mean_all(Value<S> a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.val().numel()));
}

/// Mean squared error over all elements.
template <typename S>
Value<S> mse_loss(Value<S> pred, Value<S> target) {
    detail::check_same_shape(pred, target, "mse_loss");
    const std::int64_t n = pred.val().numel();
    S s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const S d = pred.val()[i] - target.val()[i];
        s += d * d;
    }
    Tensor<S> out = Tensor<S>::scalar(s / static_cast<S>(n));
    return pred.tape->make(std::move(out), {pred.id, target.id},
                           [pp = pred.id, pt = target.id, n](Tape<S>& t, int self) {
                               const S g = t.node_grad(self)[0];
                               const Tensor<S>& pv = t.node_value(pp);
                               const Tensor<S>& tv = t.node_value(pt);
                               const S c = g * S(2) / static_cast<S>(n);
                               if (t.parent_needs(pp)) {
                                   Tensor<S> gp(pv.shape());
                                   for (std::int64_t i = 0; i < n; ++i) gp[i] = c * (pv[i] - tv[i]);
                                   t.accumulate(pp, gp.data(), n);
                               }
                               if (t.parent_needs(pt)) {
                                   Tensor<S> gt(tv.shape());
                                   for (std::int64_t i = 0; i < n; ++i) gt[i] = -c * (pv[i] - tv[i]);
                                   t.accumulate(pt, gt.data(), n);
                               }
                           });
}

/// Piecewise quadratic/linear penalty, mean over all elements:
/// 0.5*d^2/beta for |d|<beta, |d|-beta/2 otherwise.
template <typename S>
Value<S> smooth_l1_loss(Value<S> pred, Value<S> target, S beta) {
    detail::check_same_shape(pred, target, "smooth_l1_loss");
    if (!(beta > S(0))) throw std::invalid_argument("smooth_l1_loss: beta must be > 0");
    const std::int64_t n = pred.val().numel();
    S s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const S d = pred.val()[i] - target.val()[i];
        const S ad = std::abs(d);
        s += (ad < beta) ? S(0.5) * d * d / beta : ad - beta / S(2);
    }
    Tensor<S> out = Tensor<S>::scalar(s / static_cast<S>(n));
    return pred.tape->make(std::move(out), {pred.id, target.id},
                           [pp = pred.id, pt = target.id, n, beta](Tape<S>& t, int self) {
                               const S g = t.node_grad(self)[0];
                               const Tensor<S>& pv = t.node_value(pp);
                               const Tensor<S>& tv = t.node_value(pt);
                               auto dloss = [&](std::int64_t i) {
                                   const S d = pv[i] - tv[i];
                                   const S dd = (std::abs(d) < beta) ? d / beta : (d > 0 ? S(1) : S(-1));
                                   return g * dd / static_cast<S>(n);
                               };
                               if (t.parent_needs(pp)) {
                                   Tensor<S> gp(pv.shape());
                                   for (std::int64_t i = 0; i < n; ++i) gp[i] = dloss(i);
                                   t.accumulate(pp, gp.data(), n);
                               }
                               if (t.parent_needs(pt)) {
                                   Tensor<S> gt(tv.shape());
                                   for (std::int64_t i = 0; i < n; ++i) gt[i] = -dloss(i);
                                   t.accumulate(pt, gt.data(), n);
                               }
                           });
}

/// 1 - cosine similarity, averaged over rows. A zero-norm row on either
/// side contributes the defined value 1 with zero gradient; the count of
/// such rows is reported through `zero_rows` when given.
template <typename S>
Value<S> cosine_alignment_loss(Value<S> a, Value<S> b, int* zero_rows = nullptr) {
    detail::check_same_shape(a, b, "cosine_alignment_loss");
    const int n = a.shape().size() == 2 ? a.shape()[0] : 1;
    const int m = a.shape().size() == 2 ? a.shape()[1] : static_cast<int>(a.val().numel());
    S total = 0;
    int zeros = 0;
    std::vector<S> dots(n), nas(n), nbs(n);
    for (int i = 0; i < n; ++i) {
        S dot = 0, na = 0, nb = 0;
        for (int j = 0; j < m; ++j) {
            const S x = a.val()[static_cast<std::int64_t>(i) * m + j];
            const S y = b.val()[static_cast<std::int64_t>(i) * m + j];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        dots[i] = dot;
        nas[i] = std::sqrt(na);
        nbs[i] = std::sqrt(nb);
        if (nas[i] == S(0) || nbs[i] == S(0)) {
            ++zeros;
            total += S(1);
        } else {
            total += S(1) - dot / (nas[i] * nbs[i]);
        }
    }
    if (zero_rows) *zero_rows = zeros;
    Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(n));
    return a.tape->make(
        std::move(out), {a.id, b.id},
        [pa = a.id, pb = b.id, n, m, dots, nas, nbs](Tape<S>& t, int self) {
            const S g = t.node_grad(self)[0];
            const Tensor<S>& av = t.node_value(pa);
            const Tensor<S>& bv = t.node_value(pb);
            const S inv_n = S(1) / static_cast<S>(n);
            // d/da_i [1 - a.b/(|a||b|)] = -(b/(|a||b|) - (a.b) a/(|a|^3 |b|))
            auto emit = [&](int pid, const Tensor<S>& x, const Tensor<S>& y, bool swap) {
                if (!t.parent_needs(pid)) return;
                Tensor<S> gx(x.shape());
                for (int i = 0; i < n; ++i) {
                    const S nx = swap ? nbs[i] : nas[i];
                    const S ny = swap ? nas[i] : nbs[i];
                    if (nx == S(0) || ny == S(0)) continue;
                    const S inv = S(1) / (nx * ny);
                    const S c2 = dots[i] / (nx * nx * nx * ny);
                    for (int j = 0; j < m; ++j) {
                        const std::int64_t k = static_cast<std::int64_t>(i) * m + j;
                        gx[k] = g * inv_n * (-(y[k] * inv) + x[k] * c2);
                    }
                }
                t.accumulate(pid, gx.data(), gx.numel());
            };
            emit(pa, av, bv, false);
            emit(pb, bv, av, true);
        });
}

/// Multiply a tensor by a scalar-valued node (gradient flows to both).
template <typename S>
Value<S> mul_by_scalar(Value<S> a, Value<S> s) {
    if (s.val().numel() != 1) throw std::invalid_argument("mul_by_scalar: scalar operand must have one element");
    const S sv = s.val()[0];
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * sv;
    return a.tape->make(std::move(out), {a.id, s.id}, [pa = a.id, psc = s.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        const Tensor<S>& av = t.node_value(pa);
        const S sv2 = t.node_value(psc)[0];
        if (t.parent_needs(pa)) {
            Tensor<S> ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * sv2;
            t.accumulate(pa, ga.data(), ga.numel());
        }
        if (t.parent_needs(psc)) {
            S acc = 0;
            for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
            Tensor<S> gs = Tensor<S>::scalar(acc);
            t.accumulate(psc, gs.data(), 1);
        }
    });
}

/// Cuts the gradient: the result is a constant with the same value.
template <typename S>
Value<S> detach(Value<S> a) {
    return a.tape->constant(a.val());
}

template <typename S>
Value<S> reshape(Value<S> a, std::vector<int> shape) {
    Tensor<S> out = a.val().clone().reshaped(shape);
    out.requires_grad = false;
    return a.tape->make(std::move(out), {a.id}, [pa = a.id](Tape<S>& t, int self) {
        const Tensor<S>& g = t.node_grad(self);
        t.accumulate(pa, g.data(), g.numel());
    });
}

// ---------------------------------------------------------------------
// Gradient map interface
// ---------------------------------------------------------------------

template <typename S>
using GradMap = std::map<std::string, Tensor<S>>;

/// Runs one backward pass and returns a shape-matched gradient per
/// parameter. Parameters unreachable from the loss get zero gradients.
template <typename S>
GradMap<S> reverse_gradient(Tape<S>& tape, Value<S> loss, const std::vector<Param<S>*>& params) {
    for (Param<S>* p : params) p->grad = Tensor<S>(p->value.shape());
    tape.backward(loss);
    GradMap<S> out;
    for (Param<S>* p : params) out[p->name] = p->grad.clone();
    return out;
}

/// Sums gradient maps produced by independent graphs (data-parallel
/// accumulation).
template <typename S>
GradMap<S> sum_grad_maps(const std::vector<GradMap<S>>& maps) {
    GradMap<S> out;
    for (const auto& m : maps) {
        for (const auto& [name, g] : m) {
            auto it = out.find(name);
            if (it == out.end()) {
                out[name] = g.clone();
            } else {
                if (it->second.shape() != g.shape()) throw std::runtime_error("sum_grad_maps: shape mismatch");
                for (std::int64_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
            }
        }
    }
    return out;
}

}  // namespace minidrive
