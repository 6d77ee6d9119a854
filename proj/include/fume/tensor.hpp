#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "fume/common.hpp"

namespace fume {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ")";
    return os.str();
}

// Dense row-major tensor of rank <= 4.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {
        if (shape.size() > 4) throw ShapeError("tensor rank > 4: " + shape_str(shape));
    }
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape.size() > 4) throw ShapeError("tensor rank > 4: " + shape_str(shape));
        if (data.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    int dim(std::size_t i) const { return shape[i]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i)
            out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

}  // namespace fume
