#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tca/errors.hpp"

namespace tca {

using Vector = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw InvalidArgument("dot: dimension mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

// a += s * b
inline void axpy(double s, std::span<const double> b, std::span<double> a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += s * b[i];
    }
}

inline Vector scaled(std::span<const double> a, double s) {
    Vector out(a.begin(), a.end());
    for (double& x : out) {
        x *= s;
    }
    return out;
}

inline Vector difference(std::span<const double> a, std::span<const double> b) {
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return out;
}

/// A real vector in token, raw-feature or embedding space. Entries are always
/// finite; vectors built through `unit` additionally carry the normalized tag
/// and satisfy | ||v|| - 1 | <= 1e-9.
class EmbeddingVector {
public:
    static constexpr double kUnitTolerance = 1e-9;

    EmbeddingVector() = default;

    explicit EmbeddingVector(Vector values, bool normalized = false)
        : values_(std::move(values)), normalized_(normalized) {
        if (values_.empty()) {
            throw InvalidArgument("EmbeddingVector: dimension must be positive");
        }
        if (!all_finite(values_)) {
            throw InvalidArgument("EmbeddingVector: non-finite entry");
        }
        if (normalized_ && std::abs(l2_norm(values_) - 1.0) > kUnitTolerance) {
            throw InvalidArgument("EmbeddingVector: tagged normalized but norm is not 1");
        }
    }

    /// Rescales to unit length. Throws DegenerateInput for the zero vector.
    static EmbeddingVector unit(Vector values) {
        const double n = l2_norm(values);
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw DegenerateInput("cannot normalize a zero or non-finite vector");
        }
        for (double& x : values) {
            x /= n;
        }
        return EmbeddingVector(std::move(values), true);
    }

    std::size_t dim() const noexcept { return values_.size(); }
    std::span<const double> values() const noexcept { return values_; }
    const Vector& vec() const noexcept { return values_; }
    bool is_normalized() const noexcept { return normalized_; }
    double operator[](std::size_t i) const { return values_[i]; }
    double norm() const { return l2_norm(values_); }

    bool operator==(const EmbeddingVector&) const = default;

private:
    Vector values_;
    bool normalized_ = false;
};

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw InvalidArgument("cosine_similarity: dimension mismatch");
    }
    const double nu = l2_norm(u);
    const double nv = l2_norm(v);
    if (!(nu > 0.0) || !(nv > 0.0)) {
        throw DegenerateInput("cosine_similarity: zero vector");
    }
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline double cosine_similarity(const EmbeddingVector& u, const EmbeddingVector& v) {
    return cosine_similarity(u.values(), v.values());
}

}  // namespace tca
