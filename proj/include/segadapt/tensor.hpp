#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "segadapt/core.hpp"

namespace segadapt {

// Dense row-major tensor of doubles. Everything in the library runs in
// 64-bit arithmetic; model and data sizes are small enough that this is
// both fast and keeps gradient checks tight.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(count(shape)), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<long long>(v.size()) != count(shape))
            throw InvalidArgument("Tensor: data size does not match shape");
    }

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d < 0) throw InvalidArgument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = rng.normal(0.0, stddev);
        return t;
    }

    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    size_t numel() const { return v.size(); }

    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }

    // 2-D / 3-D accessors (row-major).
    double& at(int i, int j) { return v[static_cast<size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * dim(1) + j]; }
    double& at(int i, int j, int k) {
        return v[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at(int i, int j, int k) const {
        return v[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double sum() const { return std::accumulate(v.begin(), v.end(), 0.0); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw InvalidArgument(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                              b.shape_str());
}

// Binary mask on a pixel grid, one instance per Mask. Values are 0/1.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int height, int width) : h(height), w(width), v(static_cast<size_t>(height) * width, 0) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

    size_t area() const {
        size_t n = 0;
        for (uint8_t b : v) n += (b != 0);
        return n;
    }

    bool empty_fg() const { return area() == 0; }

    bool same_shape(const Mask& o) const { return h == o.h && w == o.w; }
};

// RGB image, channel-major [3,h,w], values expected in [0,1].
struct Image {
    int h = 0, w = 0;
    std::vector<double> v;

    Image() = default;
    Image(int height, int width) : h(height), w(width), v(3ULL * height * width, 0.0) {}

    double& at(int c, int y, int x) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
    double at(int c, int y, int x) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline uint64_t hash_tensor(const Tensor& t, uint64_t h = 0xcbf29ce484222325ULL) {
    h = fnv1a_bytes(t.shape.data(), t.shape.size() * sizeof(int), h);
    return fnv1a_bytes(t.v.data(), t.v.size() * sizeof(double), h);
}

}  // namespace segadapt
