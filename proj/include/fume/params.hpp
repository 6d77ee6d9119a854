#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fume/common.hpp"
#include "fume/tensor.hpp"

namespace fume {

// Named parameter tensors in registration order. Trainable entries carry
// gradients and optimizer state; non-trainable entries are buffers (BN
// running statistics).
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool trainable = true;
        Tensor<T> grad;      // accumulated by the training loop
        Tensor<T> adam_m, adam_v;
    };

    int add(std::string name, Tensor<T> value, bool trainable = true) {
        if (index_.count(name))
            throw ConfigError("duplicate parameter name: " + name);
        Entry e;
        e.name = std::move(name);
        e.trainable = trainable;
        if (trainable) {
            e.grad = Tensor<T>::zeros(value.shape);
            e.adam_m = Tensor<T>::zeros(value.shape);
            e.adam_v = Tensor<T>::zeros(value.shape);
        }
        e.value = std::move(value);
        index_[e.name] = static_cast<int>(entries_.size());
        entries_.push_back(std::move(e));
        return static_cast<int>(entries_.size()) - 1;
    }

    Entry& operator[](int i) { return entries_[i]; }
    const Entry& operator[](int i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    std::size_t count_trainable_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_)
            if (e.trainable)
                std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

    template <typename F>
    void for_each(F&& f) {
        for (auto& e : entries_) f(e);
    }
    template <typename F>
    void for_each(F&& f) const {
        for (const auto& e : entries_) f(e);
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

// Checkpoint container: magic, version, variant string, seed, then each named
// tensor as (name, rank, dims, float64 little-endian values). Byte-stable for
// equal seeds because parameters are written in registration order.
namespace ckpt {

inline void write_u64(std::ofstream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::ifstream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ofstream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    write_u64(os, v);
}

inline double read_f64(std::ifstream& is) {
    std::uint64_t v = read_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

inline void write_string(std::ofstream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& is) {
    std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

constexpr const char* kMagic = "FUMECKP1";

template <typename T>
void save(const std::string& path, const ParamStore<T>& store,
          const std::string& variant, std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    os.write(kMagic, 8);
    write_string(os, variant);
    write_u64(os, seed);
    write_u64(os, store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& e = store[static_cast<int>(i)];
        write_string(os, e.name);
        write_u64(os, e.value.shape.size());
        for (int d : e.value.shape) write_u64(os, static_cast<std::uint64_t>(d));
        for (const T& v : e.value.data) write_f64(os, static_cast<double>(v));
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

struct Header {
    std::string variant;
    std::uint64_t seed = 0;
};

template <typename T>
Header load(const std::string& path, ParamStore<T>& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("corrupt checkpoint (bad magic): " + path);
    Header h;
    h.variant = read_string(is);
    h.seed = read_u64(is);
    std::uint64_t count = read_u64(is);
    if (count != store.size())
        throw DataError("checkpoint parameter count " + std::to_string(count) +
                        " does not match model (" + std::to_string(store.size()) + ")");
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(is);
        auto& e = store[static_cast<int>(i)];
        if (name != e.name)
            throw DataError("checkpoint parameter order mismatch at " + name);
        std::uint64_t rank = read_u64(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u64(is));
        if (shape != e.value.shape)
            throw DataError("checkpoint shape mismatch for " + name + ": " +
                            shape_str(shape) + " vs " + shape_str(e.value.shape));
        for (T& v : e.value.data) v = static_cast<T>(read_f64(is));
    }
    if (!is) throw DataError("corrupt checkpoint (truncated): " + path);
    return h;
}

// Reads just the header (variant + seed) so the model can be built first.
inline Header peek(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("corrupt checkpoint (bad magic): " + path);
    Header h;
    h.variant = read_string(is);
    h.seed = read_u64(is);
    if (!is) throw DataError("corrupt checkpoint (truncated header): " + path);
    return h;
}

}  // namespace ckpt

// Kaiming-uniform fan-in initialization for conv/linear weights.
template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(shape);
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace fume
