#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tca/embedding.hpp"
#include "tca/errors.hpp"
#include "tca/objective.hpp"
#include "tca/rng.hpp"

namespace tca {

struct PredictionRecord {
    std::size_t predicted_label = 0;
    std::size_t true_label = 0;
    double confidence = 0.0;

    bool correct() const noexcept { return predicted_label == true_label; }
};

struct BinStats {
    std::size_t bin_index = 0;  // 0-based
    double lower = 0.0;
    double upper = 0.0;
    std::size_t count = 0;
    double accuracy = 0.0;
    double confidence = 0.0;
};

struct CalibrationReport {
    double ece = 0.0;
    double accuracy = 0.0;
    std::size_t n_samples = 0;
    std::vector<BinStats> bins;
    double atfd_final = 0.0;
    double mean_mtas_final = 0.0;
};

struct EceResult {
    double ece = 0.0;
    std::vector<BinStats> bins;
};

/// Right-closed equal-width bins over (0, 1]: confidence c goes to bin
/// ceil(c * n_bins) (1-based), with c == 0 in the first bin.
inline std::size_t confidence_bin(double confidence, std::size_t n_bins) {
    const double scaled = std::ceil(confidence * static_cast<double>(n_bins));
    const auto k = static_cast<std::size_t>(std::max(scaled, 1.0));
    return std::min(k, n_bins) - 1;
}

inline void validate_records(std::span<const PredictionRecord> records) {
    if (records.empty()) {
        throw InvalidArgument("calibration: no records");
    }
    for (const auto& r : records) {
        if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) {
            throw InvalidArgument("calibration: confidence outside [0, 1]");
        }
    }
}

inline EceResult ece(std::span<const PredictionRecord> records, std::size_t n_bins) {
    validate_records(records);
    if (n_bins < 1) {
        throw InvalidArgument("ece: n_bins must be >= 1");
    }
    std::vector<std::size_t> count(n_bins, 0);
    std::vector<std::size_t> hits(n_bins, 0);
    std::vector<double> conf_sum(n_bins, 0.0);
    for (const auto& r : records) {
        const std::size_t k = confidence_bin(r.confidence, n_bins);
        ++count[k];
        hits[k] += r.correct() ? 1 : 0;
        conf_sum[k] += r.confidence;
    }
    EceResult out;
    const double m = static_cast<double>(records.size());
    for (std::size_t k = 0; k < n_bins; ++k) {
        BinStats b;
        b.bin_index = k;
        b.lower = static_cast<double>(k) / static_cast<double>(n_bins);
        b.upper = static_cast<double>(k + 1) / static_cast<double>(n_bins);
        b.count = count[k];
        if (count[k] > 0) {
            const double n = static_cast<double>(count[k]);
            b.accuracy = static_cast<double>(hits[k]) / n;
            b.confidence = conf_sum[k] / n;
            out.ece += (n / m) * std::abs(b.accuracy - b.confidence);
        }
        out.bins.push_back(b);
    }
    return out;
}

inline double accuracy(std::span<const PredictionRecord> records) {
    validate_records(records);
    std::size_t hits = 0;
    for (const auto& r : records) {
        hits += r.correct() ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

struct DispersionSummary {
    double atfd = 0.0;
    double mean_mtas = 0.0;
};

inline DispersionSummary dispersion_summary(const ClassTextSet& set) {
    return {atfd(set), intra_class_loss(set)};
}

/// Projects centered embeddings onto their top `out_dim` principal directions,
/// found by power iteration with deflation. Directions with (numerically)
/// zero variance give zero coordinates.
inline std::vector<Vector> pca_projection(std::span<const EmbeddingVector> embeddings, std::size_t out_dim = 2,
                                          std::uint64_t seed = 0) {
    if (embeddings.size() < 2) {
        throw InvalidArgument("pca_projection: need at least two embeddings");
    }
    const std::size_t d = embeddings.front().dim();
    if (out_dim < 1 || out_dim >= d) {
        throw InvalidArgument("pca_projection: out_dim must be in [1, dim)");
    }
    const std::size_t n = embeddings.size();
    Vector mean(d, 0.0);
    for (const auto& e : embeddings) {
        if (e.dim() != d) {
            throw InvalidArgument("pca_projection: dimension mismatch");
        }
        axpy(1.0 / static_cast<double>(n), e.values(), mean);
    }
    std::vector<Vector> centered;
    centered.reserve(n);
    for (const auto& e : embeddings) {
        centered.push_back(difference(e.values(), mean));
    }
    Vector cov(d * d, 0.0);
    for (const auto& x : centered) {
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) {
                cov[a * d + b] += x[a] * x[b];
            }
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
        trace += cov[a * d + a];
    }

    std::vector<Vector> directions;
    CounterRng rng(combine_seeds(seed, 0x706361ULL));
    for (std::size_t k = 0; k < out_dim; ++k) {
        Vector v(d);
        for (double& x : v) {
            x = rng.gaussian();
        }
        double lambda = 0.0;
        bool null_direction = !(trace > 0.0);
        for (int it = 0; it < 10000 && !null_direction; ++it) {
            Vector w(d, 0.0);
            for (std::size_t a = 0; a < d; ++a) {
                w[a] = dot(std::span<const double>(cov).subspan(a * d, d), v);
            }
            const double nw = l2_norm(w);
            if (!(nw > 1e-12 * trace)) {
                null_direction = true;
                break;
            }
            for (double& x : w) {
                x /= nw;
            }
            const double change = l2_norm(difference(w, v));
            v = std::move(w);
            lambda = nw;
            if (change < 1e-13) {
                break;
            }
        }
        if (null_direction) {
            directions.emplace_back(d, 0.0);
            continue;
        }
        // Deterministic sign: largest-magnitude component positive.
        const auto big = std::max_element(v.begin(), v.end(),
                                          [](double a, double b) { return std::abs(a) < std::abs(b); });
        if (*big < 0.0) {
            for (double& x : v) {
                x = -x;
            }
        }
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        directions.push_back(std::move(v));
    }

    std::vector<Vector> coords;
    coords.reserve(n);
    for (const auto& x : centered) {
        Vector c(out_dim);
        for (std::size_t k = 0; k < out_dim; ++k) {
            c[k] = dot(x, directions[k]);
        }
        coords.push_back(std::move(c));
    }
    return coords;
}

}  // namespace tca
