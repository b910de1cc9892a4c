#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace modula {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

/// Dense row-major tensor of 64-bit floats, rank 1 or 2.
/// `grad` stays empty until a backward pass deposits something; an empty
/// grad means "no gradient". Plain value type: safe to copy and to hand
/// between threads as long as no Graph references it.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape_, bool requires_grad_ = false) {
        validate_shape(shape_);
        Tensor t;
        t.shape = std::move(shape_);
        t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0);
        t.requires_grad = requires_grad_;
        return t;
    }

    static Tensor of(std::vector<int> shape_, std::vector<double> values, bool requires_grad_ = false) {
        validate_shape(shape_);
        if (numel_of(shape_) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("tensor: shape " + shape_str_of(shape_) + " does not match " +
                                        std::to_string(values.size()) + " values");
        Tensor t;
        t.shape = std::move(shape_);
        t.data = std::move(values);
        t.requires_grad = requires_grad_;
        return t;
    }

    static Tensor scalar(double v) { return of({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    int rows() const { return rank() == 2 ? shape[0] : 1; }
    int cols() const { return rank() == 2 ? shape[1] : shape[0]; }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void clear_grad() { grad.clear(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const { return shape_str_of(shape); }

    static std::string shape_str_of(const std::vector<int>& s) {
        std::string r = "[";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) r += "x";
            r += std::to_string(s[i]);
        }
        return r + "]";
    }

    static void validate_shape(const std::vector<int>& s) {
        if (s.empty() || s.size() > 2)
            throw std::invalid_argument("tensor: rank must be 1 or 2, got shape " + shape_str_of(s));
        for (int d : s)
            if (d <= 0)
                throw std::invalid_argument("tensor: dimensions must be positive, got shape " + shape_str_of(s));
    }
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

/// FNV-1a over raw bytes. Used for content hashes in checkpoints and
/// freeze-soundness checks.
inline uint64_t fnv1a64(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64_str(uint64_t h, const char* s) {
    for (; *s; ++s) {
        h ^= static_cast<unsigned char>(*s);
        h *= 1099511628211ull;
    }
    return h;
}

/// Bit-exact hash of tensor contents (shape + float64 payload).
inline uint64_t content_hash(const Tensor& t) {
    uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int));
    h ^= fnv1a64(t.data.data(), t.data.size() * sizeof(double));
    return h;
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace modula
