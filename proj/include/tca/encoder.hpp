#pragma once

#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tca/embedding.hpp"
#include "tca/errors.hpp"
#include "tca/rng.hpp"

namespace tca {

// Frozen toy encoders standing in for a dual-tower image/text model. Both
// towers share one projection so that raw features and token vectors live in
// a common aligned space.

struct EncoderConfig {
    std::size_t d_tok = 64;
    std::size_t d_embed = 32;
    std::uint64_t projection_seed = 0;
    bool use_identity_projection = false;

    void validate() const {
        if (d_tok < 2 || d_embed < 1) {
            throw InvalidArgument("EncoderConfig: d_tok must be >= 2 and d_embed >= 1");
        }
        if (use_identity_projection && d_embed > d_tok) {
            throw InvalidArgument("EncoderConfig: identity projection requires d_embed <= d_tok");
        }
    }
};

/// Hash-seeded Gaussian direction for a token string.
inline EmbeddingVector embed_token(std::string_view token_text, std::size_t d_tok,
                                   std::uint64_t global_seed) {
    if (token_text.empty()) {
        throw InvalidArgument("embed_token: empty token text");
    }
    if (d_tok < 2) {
        throw InvalidArgument("embed_token: d_tok must be >= 2");
    }
    CounterRng rng(hash_string(token_text) ^ mix64(global_seed));
    Vector v(d_tok);
    for (double& x : v) {
        x = rng.gaussian();
    }
    return EmbeddingVector::unit(std::move(v));
}

struct TokenEmbedding {
    std::string token_text;
    EmbeddingVector vector;
    bool frozen = true;

    bool operator==(const TokenEmbedding&) const = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) {
            ++j;
        }
        if (j > i) {
            words.emplace_back(text.substr(i, j - i));
        }
        i = j;
    }
    return words;
}

/// Dense row-major linear map, rows = output dim.
class Projection {
public:
    Projection() = default;
    Projection(std::size_t rows, std::size_t cols, Vector data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw InvalidArgument("Projection: data size does not match shape");
        }
    }

    static Projection identity_truncation(std::size_t rows, std::size_t cols) {
        if (rows > cols) {
            throw InvalidArgument("identity truncation needs rows <= cols");
        }
        Vector data(rows * cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            data[r * cols + r] = 1.0;
        }
        return {rows, cols, std::move(data)};
    }

    // Entries N(0, 1/cols).
    static Projection gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
        CounterRng rng(combine_seeds(seed, 0x70726f6aULL));
        Vector data(rows * cols);
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
        for (double& x : data) {
            x = rng.gaussian() * scale;
        }
        return {rows, cols, std::move(data)};
    }

    static Projection from_config(const EncoderConfig& cfg) {
        cfg.validate();
        return cfg.use_identity_projection ? identity_truncation(cfg.d_embed, cfg.d_tok)
                                           : gaussian(cfg.d_embed, cfg.d_tok, cfg.projection_seed);
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::span<const double> data() const noexcept { return data_; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    Vector apply(std::span<const double> x) const {
        if (x.size() != cols_) {
            throw InvalidArgument("Projection::apply: dimension mismatch");
        }
        Vector y(rows_, 0.0);
        for (std::size_t r = 0; r < rows_; ++r) {
            const double* row = data_.data() + r * cols_;
            double s = 0.0;
            for (std::size_t c = 0; c < cols_; ++c) {
                s += row[c] * x[c];
            }
            y[r] = s;
        }
        return y;
    }

    Vector apply_transpose(std::span<const double> y) const {
        if (y.size() != rows_) {
            throw InvalidArgument("Projection::apply_transpose: dimension mismatch");
        }
        Vector x(cols_, 0.0);
        for (std::size_t r = 0; r < rows_; ++r) {
            const double* row = data_.data() + r * cols_;
            for (std::size_t c = 0; c < cols_; ++c) {
                x[c] += row[c] * y[r];
            }
        }
        return x;
    }

    /// Returns Q * this, where Q is rows x rows (row-major).
    Projection left_multiplied(std::span<const double> q) const {
        if (q.size() != rows_ * rows_) {
            throw InvalidArgument("left_multiplied: Q must be square with side rows()");
        }
        Vector out(rows_ * cols_, 0.0);
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = 0; k < rows_; ++k) {
                const double qik = q[i * rows_ + k];
                for (std::size_t c = 0; c < cols_; ++c) {
                    out[i * cols_ + c] += qik * data_[k * cols_ + c];
                }
            }
        }
        return {rows_, cols_, std::move(out)};
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

/// Gradient of y = u / ||u|| pulled back to u, given dL/dy.
inline Vector normalize_backward(std::span<const double> unit_out, double input_norm,
                                 std::span<const double> grad_out) {
    const double along = dot(unit_out, grad_out);
    Vector g(unit_out.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = (grad_out[i] - unit_out[i] * along) / input_norm;
    }
    return g;
}

class Encoder {
public:
    explicit Encoder(EncoderConfig cfg = {}, std::uint64_t token_seed = 0)
        : cfg_(cfg), projection_(Projection::from_config(cfg)), token_seed_(token_seed) {}

    Encoder(EncoderConfig cfg, Projection projection, std::uint64_t token_seed)
        : cfg_(cfg), projection_(std::move(projection)), token_seed_(token_seed) {
        if (projection_.rows() != cfg_.d_embed || projection_.cols() != cfg_.d_tok) {
            throw InvalidArgument("Encoder: projection shape does not match config");
        }
    }

    const EncoderConfig& config() const noexcept { return cfg_; }
    const Projection& projection() const noexcept { return projection_; }
    std::uint64_t token_seed() const noexcept { return token_seed_; }

    TokenEmbedding token(std::string_view text, bool frozen) const {
        return {std::string(text), embed_token(text, cfg_.d_tok, token_seed_), frozen};
    }

    std::vector<TokenEmbedding> tokenize(std::string_view phrase, bool frozen) const {
        std::vector<TokenEmbedding> out;
        for (const auto& w : split_words(phrase)) {
            out.push_back(token(w, frozen));
        }
        return out;
    }

    /// Mean of the word-token vectors of a phrase, in token space (not unit).
    Vector phrase_mean(std::string_view phrase) const {
        const auto toks = tokenize(phrase, true);
        if (toks.empty()) {
            throw InvalidArgument("phrase_mean: phrase has no tokens");
        }
        Vector m(cfg_.d_tok, 0.0);
        for (const auto& t : toks) {
            axpy(1.0, t.vector.values(), m);
        }
        for (double& x : m) {
            x /= static_cast<double>(toks.size());
        }
        return m;
    }

    /// W * mean(tokens), before normalization.
    Vector project_mean(std::span<const TokenEmbedding> tokens) const {
        if (tokens.empty()) {
            throw InvalidArgument("encode_text: empty token sequence");
        }
        Vector m(cfg_.d_tok, 0.0);
        for (const auto& t : tokens) {
            if (t.vector.dim() != cfg_.d_tok) {
                throw InvalidArgument("encode_text: token '" + t.token_text + "' has wrong dimension");
            }
            axpy(1.0, t.vector.values(), m);
        }
        for (double& x : m) {
            x /= static_cast<double>(tokens.size());
        }
        return projection_.apply(m);
    }

    EmbeddingVector encode_text(std::span<const TokenEmbedding> tokens) const {
        Vector u = project_mean(tokens);
        if (!(l2_norm(u) > 0.0)) {
            throw DegenerateInput("encode_text: pooled token mean projects to zero");
        }
        return EmbeddingVector::unit(std::move(u));
    }

    EmbeddingVector encode_text(std::string_view phrase) const {
        const auto toks = tokenize(phrase, true);
        return encode_text(toks);
    }

    EmbeddingVector encode_image(const EmbeddingVector& raw_feature) const {
        if (raw_feature.dim() != cfg_.d_tok) {
            throw InvalidArgument("encode_image: raw feature dimension must equal d_tok");
        }
        if (!(raw_feature.norm() > 0.0)) {
            throw DegenerateInput("encode_image: zero raw feature");
        }
        Vector u = projection_.apply(raw_feature.values());
        if (!(l2_norm(u) > 0.0)) {
            throw DegenerateInput("encode_image: raw feature lies in the projection null space");
        }
        return EmbeddingVector::unit(std::move(u));
    }

private:
    EncoderConfig cfg_;
    Projection projection_;
    std::uint64_t token_seed_;
};

struct AugmentationConfig {
    std::size_t n_views = 64;
    // Expected norm of the additive noise (per-coordinate std noise_sigma / sqrt(d)).
    double noise_sigma = 0.15;
    double dropout_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_views < 1) {
            throw InvalidArgument("AugmentationConfig: n_views must be >= 1");
        }
        if (!(noise_sigma >= 0.0) || !(dropout_fraction >= 0.0 && dropout_fraction < 1.0)) {
            throw InvalidArgument("AugmentationConfig: need noise_sigma >= 0 and dropout in [0, 1)");
        }
    }
};

/// View 0 is the input itself. Every other view gets seeded Gaussian noise,
/// then seeded coordinate dropout, then is rescaled to the input's norm.
inline std::vector<EmbeddingVector> augment(const EmbeddingVector& raw_feature,
                                            const AugmentationConfig& cfg) {
    cfg.validate();
    std::vector<EmbeddingVector> views;
    views.reserve(cfg.n_views);
    views.push_back(raw_feature);
    if (cfg.noise_sigma == 0.0 && cfg.dropout_fraction == 0.0) {
        for (std::size_t v = 1; v < cfg.n_views; ++v) {
            views.push_back(raw_feature);
        }
        return views;
    }
    const std::size_t d = raw_feature.dim();
    const double per_coord = cfg.noise_sigma / std::sqrt(static_cast<double>(d));
    const double target_norm = raw_feature.norm();
    for (std::size_t v = 1; v < cfg.n_views; ++v) {
        CounterRng rng(combine_seeds(cfg.seed, v));
        Vector x(raw_feature.values().begin(), raw_feature.values().end());
        for (double& xi : x) {
            xi += per_coord * rng.gaussian();
        }
        for (double& xi : x) {
            if (rng.uniform() <= cfg.dropout_fraction) {
                xi = 0.0;
            }
        }
        const double n = l2_norm(x);
        if (!(n > 0.0)) {
            views.push_back(raw_feature);
            continue;
        }
        for (double& xi : x) {
            xi *= target_norm / n;
        }
        views.emplace_back(std::move(x));
    }
    return views;
}

}  // namespace tca
