#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tca/embedding.hpp"
#include "tca/objective.hpp"

namespace tca::test {

inline std::filesystem::path data_dir() { return TCA_DATA_DIR; }

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("tca_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline Vector random_vector(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector v(d);
    for (double& x : v) {
        x = n(rng);
    }
    return v;
}

inline EmbeddingVector random_unit(std::mt19937_64& rng, std::size_t d) {
    Vector v = random_vector(rng, d);
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    s = std::sqrt(s);
    for (double& x : v) {
        x /= s;
    }
    return EmbeddingVector(std::move(v), true);
}

inline ProbVector random_probs(std::mt19937_64& rng, std::size_t k) {
    std::exponential_distribution<double> e(1.0);
    Vector p(k);
    double s = 0.0;
    for (double& x : p) {
        x = e(rng);
        s += x;
    }
    for (double& x : p) {
        x /= s;
    }
    return ProbVector(std::move(p));
}

inline ClassTextSet random_set(std::mt19937_64& rng, std::size_t k, std::size_t m, std::size_t d) {
    std::vector<std::vector<EmbeddingVector>> members(k);
    for (auto& cls : members) {
        for (std::size_t j = 0; j < m; ++j) {
            cls.push_back(random_unit(rng, d));
        }
    }
    return ClassTextSet(std::move(members));
}

// Haar-distributed orthogonal matrix via Gram-Schmidt, row-major.
inline Vector random_orthogonal(std::mt19937_64& rng, std::size_t d) {
    std::vector<Vector> rows;
    while (rows.size() < d) {
        Vector v = random_vector(rng, d);
        for (const auto& r : rows) {
            double p = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                p += r[c] * v[c];
            }
            for (std::size_t c = 0; c < d; ++c) {
                v[c] -= p * r[c];
            }
        }
        double n = 0.0;
        for (double x : v) {
            n += x * x;
        }
        n = std::sqrt(n);
        if (n < 1e-6) {
            continue;
        }
        for (double& x : v) {
            x /= n;
        }
        rows.push_back(std::move(v));
    }
    Vector q;
    for (const auto& r : rows) {
        q.insert(q.end(), r.begin(), r.end());
    }
    return q;
}

inline Vector matvec(const Vector& m, std::size_t rows, std::size_t cols, const Vector& x) {
    Vector y(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            y[r] += m[r * cols + c] * x[c];
        }
    }
    return y;
}

inline double norm_of(const Vector& v) {
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

}  // namespace tca::test
