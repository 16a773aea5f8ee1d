#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace minidrive {

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major tensor. Copies share storage; every op that needs a
/// distinct result allocates fresh storage, so sharing is safe as long as
/// in-place mutation is confined to parameter updates.
template <typename S>
class Tensor {
public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<S>>()) {}

    explicit Tensor(std::vector<int> shape, S fill = S(0))
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<S>>(static_cast<std::size_t>(shape_numel(shape_)), fill)) {
        for (int d : shape_) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, S v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(S v) { return Tensor({1}, v); }

    static Tensor from(std::vector<int> shape, std::vector<S> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(t.shape_)) {
            throw std::invalid_argument("Tensor::from: data length does not match shape " + shape_str(t.shape_));
        }
        t.data_ = std::make_shared<std::vector<S>>(std::move(values));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }
    bool empty() const { return data_->empty(); }

    int rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : throw_rows()); }
    int cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : throw_rows()); }

    S* data() { return data_->data(); }
    const S* data() const { return data_->data(); }
    std::vector<S>& vec() { return *data_; }
    const std::vector<S>& vec() const { return *data_; }

    S& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    S operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    S& at(int r, int c) { return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c]; }
    S at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c]; }

    /// Deep copy with its own storage.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<S>>(*data_);
        t.requires_grad = requires_grad;
        return t;
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (shape_numel(shape) != numel()) {
            throw std::invalid_argument("reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(shape));
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(S v) { std::fill(data_->begin(), data_->end(), v); }

    bool all_finite() const {
        for (S v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> t(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) t[i] = static_cast<T>((*data_)[i]);
        return t;
    }

    bool requires_grad = false;

private:
    [[noreturn]] static int throw_rows() { throw std::runtime_error("Tensor: rows/cols on non-matrix"); }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<S>> data_;
};

/// Deterministic RNG used everywhere; streams are derived from a base seed
/// and a purpose tag so resume and re-runs replay identical draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
        std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
        x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27; x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

    static std::uint64_t tag(const std::string& s) {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) { h ^= c; h *= 1099511628211ull; }
        return h;
    }

    static Rng derived(std::uint64_t seed, const std::string& purpose, std::uint64_t salt = 0) {
        return Rng(mix(mix(seed, tag(purpose)), salt));
    }

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::int64_t index(std::int64_t n) {
        return static_cast<std::int64_t>(gen_() % static_cast<std::uint64_t>(n));
    }

    template <typename S>
    void fill_normal(Tensor<S>& t, double stddev) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(normal() * stddev);
    }

    template <typename S>
    Tensor<S> normal_tensor(std::vector<int> shape, double stddev = 1.0) {
        Tensor<S> t(std::move(shape));
        fill_normal(t, stddev);
        return t;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace minidrive
