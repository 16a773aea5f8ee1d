#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

/// Atomic text write: temp file in the same directory, then rename.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("write_text_atomic: cannot open " + tmp.string());
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!f) throw std::runtime_error("write_text_atomic: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_text: cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------
// Named-tensor blob: magic, version, scalar width, count, then per entry
// (name, dims, raw little-endian values).
// ---------------------------------------------------------------------

namespace detail {
constexpr char kBlobMagic[4] = {'M', 'D', 'T', 'B'};
constexpr std::uint32_t kBlobVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("tensor blob: truncated file");
    return v;
}
}  // namespace detail

template <typename S>
void write_tensor_blob(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, Tensor<S>>>& tensors) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("write_tensor_blob: cannot open " + tmp.string());
        f.write(detail::kBlobMagic, 4);
        detail::put<std::uint32_t>(f, detail::kBlobVersion);
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(sizeof(S)));
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(t.shape().size()));
            for (int d : t.shape()) detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(d));
            f.write(reinterpret_cast<const char*>(t.data()),
                    static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(S))));
        }
        if (!f) throw std::runtime_error("write_tensor_blob: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename S>
std::map<std::string, Tensor<S>> read_tensor_blob(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_tensor_blob: cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != std::string(detail::kBlobMagic, 4)) {
        throw std::runtime_error("read_tensor_blob: bad magic in " + path.string());
    }
    const auto version = detail::get<std::uint32_t>(f);
    if (version != detail::kBlobVersion) throw std::runtime_error("read_tensor_blob: unsupported version");
    const auto width = detail::get<std::uint32_t>(f);
    if (width != sizeof(S)) {
        throw std::runtime_error("read_tensor_blob: scalar width mismatch (file " + std::to_string(width) +
                                 ", expected " + std::to_string(sizeof(S)) + ")");
    }
    const auto count = detail::get<std::uint32_t>(f);
    std::map<std::string, Tensor<S>> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get<std::uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const auto ndim = detail::get<std::uint32_t>(f);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(detail::get<std::uint32_t>(f));
        Tensor<S> t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(S))));
        if (!f) throw std::runtime_error("read_tensor_blob: truncated tensor " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

/// Copies blob entries into an already-constructed store; every parameter
/// must be present with a matching shape. Extra blob entries (e.g.
/// optimizer moments) are ignored.
template <typename S>
void load_params(ParamStore<S>& ps, const std::map<std::string, Tensor<S>>& blob) {
    for (Param<S>* p : ps.params()) {
        auto it = blob.find(p->name);
        if (it == blob.end()) throw std::runtime_error("checkpoint: missing tensor " + p->name);
        if (it->second.shape() != p->value.shape()) {
            throw std::runtime_error("checkpoint: shape mismatch for " + p->name + ": file " +
                                     shape_str(it->second.shape()) + " vs model " + shape_str(p->value.shape()));
        }
        std::copy_n(it->second.data(), it->second.numel(), p->value.data());
    }
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> dump_params(const ParamStore<S>& ps) {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (Param<S>* p : ps.params()) out.emplace_back(p->name, p->value);
    return out;
}

}  // namespace minidrive
