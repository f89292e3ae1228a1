#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <vector>

#include "traceseg/common.hpp"

namespace traceseg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor. Rank is dynamic; kernels document the layout they
// expect (e.g. NCHW for image batches). Scalar type T is float in production
// code and double inside test reference paths.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

    int rank() const { return static_cast<int>(shape.size()); }
    std::size_t numel() const { return data.size(); }

    int dim(int i) const {
        const int r = rank();
        if (i < 0) i += r;
        if (i < 0 || i >= r) throw ShapeError("dim index out of range for " + shape_str(shape));
        return shape[static_cast<std::size_t>(i)];
    }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // Variadic element access, mostly for tests and glue code; hot loops index
    // the flat buffer directly.
    template <typename... Ix>
    T& at(Ix... ix) {
        return data[flat_index({static_cast<int>(ix)...})];
    }
    template <typename... Ix>
    const T& at(Ix... ix) const {
        return data[flat_index({static_cast<int>(ix)...})];
    }

    std::size_t flat_index(std::initializer_list<int> ix) const {
        if (static_cast<int>(ix.size()) != rank())
            throw ShapeError("index rank mismatch for " + shape_str(shape));
        std::size_t flat = 0;
        auto it = ix.begin();
        for (int d = 0; d < rank(); ++d, ++it) {
            const int i = *it;
            if (i < 0 || i >= shape[static_cast<std::size_t>(d)])
                throw ShapeError("index out of bounds for " + shape_str(shape));
            flat = flat * static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]) +
                   static_cast<std::size_t>(i);
        }
        return flat;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

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
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Seeding and random fills. All stochastic behaviour in the library flows
// through explicitly seeded engines so runs are reproducible bit-for-bit.
// ---------------------------------------------------------------------------

// splitmix64 finalizer; used to derive stream seeds (e.g. per-epoch shuffle
// seeds) from a base seed without correlated streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct Rng {
    std::mt19937_64 engine;

    explicit Rng(std::uint64_t seed = 0) : engine(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine);
    }
    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine);
    }
};

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (T& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
    for (T& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
}

}  // namespace traceseg
