#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "tca/embedding.hpp"
#include "tca/encoder.hpp"
#include "tca/errors.hpp"
#include "tca/prompt.hpp"

namespace tca {

struct ClassifierConfig {
    double temperature = 0.01;
    std::size_t n_classes = 0;

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) {
            throw InvalidArgument("ClassifierConfig: temperature must be positive and finite");
        }
    }
};

class ProbVector {
public:
    static constexpr double kSumTolerance = 1e-9;

    ProbVector() = default;
    explicit ProbVector(Vector probs) : probs_(std::move(probs)) {
        if (probs_.empty()) {
            throw InvalidArgument("ProbVector: empty");
        }
        double s = 0.0;
        for (double p : probs_) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw InvalidArgument("ProbVector: entry outside [0, 1]");
            }
            s += p;
        }
        if (std::abs(s - 1.0) > kSumTolerance) {
            throw InvalidArgument("ProbVector: entries do not sum to 1");
        }
    }

    std::size_t size() const noexcept { return probs_.size(); }
    std::span<const double> values() const noexcept { return probs_; }
    double operator[](std::size_t i) const { return probs_[i]; }

    // Lowest index wins ties.
    std::size_t argmax() const {
        return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
    }
    double max() const { return *std::max_element(probs_.begin(), probs_.end()); }

    bool operator==(const ProbVector&) const = default;

private:
    Vector probs_;
};

inline Vector softmax(std::span<const double> logits) {
    const double top = *std::max_element(logits.begin(), logits.end());
    Vector p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - top);
        s += p[i];
    }
    for (double& x : p) {
        x /= s;
    }
    return p;
}

/// cos(text_i, image) / tau for every class.
inline Vector class_logits(const EmbeddingVector& image_embed, std::span<const EmbeddingVector> text_embeds,
                           const ClassifierConfig& cfg) {
    cfg.validate();
    if (text_embeds.size() < 2) {
        throw InvalidArgument("class_probabilities: need at least two classes");
    }
    Vector z(text_embeds.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = cosine_similarity(text_embeds[i], image_embed) / cfg.temperature;
    }
    return z;
}

inline ProbVector class_probabilities(const EmbeddingVector& image_embed,
                                      std::span<const EmbeddingVector> text_embeds,
                                      const ClassifierConfig& cfg) {
    return ProbVector(softmax(class_logits(image_embed, text_embeds, cfg)));
}

inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0.0) {
            h -= x * std::log(x);
        }
    }
    return std::max(h, 0.0);
}

inline double entropy(const ProbVector& p) { return entropy(p.values()); }

/// Indices of the ceil(rho * N) lowest-entropy views, ascending by
/// (entropy, index). At least one view is always kept.
inline std::vector<std::size_t> confidence_filter(std::span<const ProbVector> view_probs, double rho) {
    if (view_probs.empty()) {
        throw InvalidArgument("confidence_filter: no views");
    }
    if (!(rho > 0.0 && rho <= 1.0)) {
        throw InvalidArgument("confidence_filter: rho must lie in (0, 1]");
    }
    const std::size_t n = view_probs.size();
    std::size_t keep = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n)));
    keep = std::clamp<std::size_t>(keep, 1, n);
    std::vector<double> h(n);
    for (std::size_t v = 0; v < n; ++v) {
        h[v] = entropy(view_probs[v]);
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
    idx.resize(keep);
    return idx;
}

inline ProbVector average_probs(std::span<const ProbVector> view_probs, std::span<const std::size_t> retained) {
    if (retained.empty()) {
        throw InvalidArgument("tpt_loss: empty retained set");
    }
    if (retained.front() >= view_probs.size()) {
        throw InvalidArgument("tpt_loss: retained index out of range");
    }
    Vector mean(view_probs[retained.front()].size(), 0.0);
    for (std::size_t v : retained) {
        if (v >= view_probs.size()) {
            throw InvalidArgument("tpt_loss: retained index out of range");
        }
        axpy(1.0, view_probs[v].values(), mean);
    }
    for (double& x : mean) {
        x /= static_cast<double>(retained.size());
    }
    return ProbVector(std::move(mean));
}

/// Entropy of the mean prediction over the retained views.
inline double tpt_loss(std::span<const ProbVector> view_probs, std::span<const std::size_t> retained) {
    for (std::size_t v : retained) {
        if (v >= view_probs.size()) {
            throw InvalidArgument("tpt_loss: retained index out of range");
        }
    }
    return entropy(average_probs(view_probs, retained));
}

/// Encoded (class, attribute) texts with their per-class and grand means.
class ClassTextSet {
public:
    ClassTextSet() = default;

    explicit ClassTextSet(std::vector<std::vector<EmbeddingVector>> members) : members_(std::move(members)) {
        if (members_.empty()) {
            throw InvalidArgument("ClassTextSet: no classes");
        }
        const std::size_t d = members_.front().empty() ? 0 : members_.front().front().dim();
        if (d == 0) {
            throw InvalidArgument("ClassTextSet: class 0 has no embeddings");
        }
        grand_mean_.assign(d, 0.0);
        for (std::size_t i = 0; i < members_.size(); ++i) {
            const auto& cls = members_[i];
            if (cls.empty()) {
                throw InvalidArgument("ClassTextSet: class " + std::to_string(i) + " has no embeddings");
            }
            Vector mean(d, 0.0);
            for (const auto& e : cls) {
                if (e.dim() != d) {
                    throw InvalidArgument("ClassTextSet: dimension mismatch");
                }
                axpy(1.0, e.values(), mean);
            }
            for (double& x : mean) {
                x /= static_cast<double>(cls.size());
            }
            axpy(1.0, mean, grand_mean_);
            means_.push_back(std::move(mean));
        }
        for (double& x : grand_mean_) {
            x /= static_cast<double>(members_.size());
        }
    }

    std::size_t n_classes() const noexcept { return members_.size(); }
    std::size_t dim() const noexcept { return grand_mean_.size(); }
    const std::vector<EmbeddingVector>& members(std::size_t cls) const { return members_.at(cls); }
    const std::vector<std::vector<EmbeddingVector>>& all_members() const noexcept { return members_; }
    const Vector& class_mean(std::size_t cls) const { return means_.at(cls); }
    const std::vector<Vector>& class_means() const noexcept { return means_; }
    const Vector& grand_mean() const noexcept { return grand_mean_; }

    /// Unit class means: the per-class text embedding used by the classifier.
    std::vector<EmbeddingVector> classifier_embeddings() const {
        std::vector<EmbeddingVector> out;
        out.reserve(means_.size());
        for (const auto& m : means_) {
            out.push_back(EmbeddingVector::unit(m));
        }
        return out;
    }

private:
    std::vector<std::vector<EmbeddingVector>> members_;
    std::vector<Vector> means_;
    Vector grand_mean_;
};

/// Mean text attribute spread of one class: (1/M) sum_j ||g_ij - mean_i||.
inline double mtas(const ClassTextSet& set, std::size_t cls) {
    const auto& members = set.members(cls);
    const auto& mean = set.class_mean(cls);
    double s = 0.0;
    for (const auto& e : members) {
        s += l2_norm(difference(e.values(), mean));
    }
    return s / static_cast<double>(members.size());
}

/// Mean of the per-class MTAS values.
inline double intra_class_loss(const ClassTextSet& set) {
    double s = 0.0;
    for (std::size_t i = 0; i < set.n_classes(); ++i) {
        s += mtas(set, i);
    }
    return s / static_cast<double>(set.n_classes());
}

/// Average text feature dispersion: (1/K) sum_i ||grand_mean - mean_i||.
inline double atfd(const ClassTextSet& set) {
    if (set.n_classes() < 2) {
        throw InvalidArgument("atfd: need at least two classes");
    }
    double s = 0.0;
    for (const auto& m : set.class_means()) {
        s += l2_norm(difference(set.grand_mean(), m));
    }
    return s / static_cast<double>(set.n_classes());
}

inline double inter_class_loss(const ClassTextSet& set) { return -atfd(set); }

struct LossWeights {
    double alpha = 0.0;
    double beta = 0.0;

    void validate() const {
        if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0 || beta < 0.0) {
            throw InvalidArgument("LossWeights: alpha and beta must be finite and nonnegative");
        }
    }
};

struct LossBreakdown {
    double l_tpt = 0.0;
    double l_inter = 0.0;
    double l_intra = 0.0;
    double l_total = 0.0;
    // Over the flat token layout of PromptState (prefix first). Empty when only
    // values were requested.
    Vector grad_prompt;
    std::vector<std::size_t> retained_view_indices;
    std::size_t n_prefix_values = 0;

    std::span<const double> grad_prefix() const {
        return std::span<const double>(grad_prompt).first(n_prefix_values);
    }
};

/// Loss values only.
inline LossBreakdown total_loss(std::span<const ProbVector> view_probs, std::span<const std::size_t> retained,
                                const ClassTextSet& set, const LossWeights& weights) {
    weights.validate();
    LossBreakdown out;
    out.l_tpt = tpt_loss(view_probs, retained);
    out.l_inter = inter_class_loss(set);
    out.l_intra = intra_class_loss(set);
    out.l_total = out.l_tpt + weights.alpha * out.l_inter + weights.beta * out.l_intra;
    out.retained_view_indices.assign(retained.begin(), retained.end());
    return out;
}

/// Forward values of every text in a prompt, kept for the backward pass.
struct TextForward {
    // [class][attr]
    std::vector<std::vector<Vector>> projected;
    std::vector<std::vector<double>> projected_norm;
    std::vector<std::vector<std::size_t>> token_counts;
    ClassTextSet set;
};

inline TextForward encode_prompt(const PromptState& prompt, const Encoder& encoder) {
    TextForward fw;
    std::vector<std::vector<EmbeddingVector>> members(prompt.n_classes());
    fw.projected.resize(prompt.n_classes());
    fw.projected_norm.resize(prompt.n_classes());
    fw.token_counts.resize(prompt.n_classes());
    for (std::size_t i = 0; i < prompt.n_classes(); ++i) {
        for (std::size_t j = 0; j < prompt.n_texts(i); ++j) {
            const auto seq = prompt.sequence(i, j);
            Vector u = encoder.project_mean(seq);
            const double r = l2_norm(u);
            if (!(r > 0.0)) {
                throw DegenerateInput("encode_prompt: text projects to zero");
            }
            members[i].push_back(EmbeddingVector::unit(u));
            fw.projected[i].push_back(std::move(u));
            fw.projected_norm[i].push_back(r);
            fw.token_counts[i].push_back(seq.size());
        }
    }
    fw.set = ClassTextSet(std::move(members));
    return fw;
}

inline ClassTextSet class_text_set(const PromptState& prompt, const Encoder& encoder) {
    return encode_prompt(prompt, encoder).set;
}

namespace detail {

inline Vector unit_or_zero(Vector v) {
    const double n = l2_norm(v);
    if (n > 0.0) {
        for (double& x : v) {
            x /= n;
        }
    } else {
        std::fill(v.begin(), v.end(), 0.0);
    }
    return v;
}

// Gradient of (1/n) sum_k ||x_k - mean(x)|| w.r.t. each x_k; zero subgradient
// where a point coincides with the mean.
inline std::vector<Vector> spread_gradient(std::span<const Vector> points, std::span<const double> mean) {
    const std::size_t n = points.size();
    std::vector<Vector> w(n);
    Vector w_sum(mean.size(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        w[k] = unit_or_zero(difference(points[k], mean));
        axpy(1.0, w[k], w_sum);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (auto& wk : w) {
        for (std::size_t c = 0; c < wk.size(); ++c) {
            wk[c] = inv_n * (wk[c] - inv_n * w_sum[c]);
        }
    }
    return w;
}

}  // namespace detail

/// Full objective for one test sample: classifier on the unit class means,
/// confidence filter, entropy of the retained mean prediction, ATFD and MTAS
/// regularizers, and the reverse-mode gradient w.r.t. the prefix tokens.
/// Pass `retained` to pin the view selection (finite-difference checks).
inline LossBreakdown evaluate_objective(const PromptState& prompt, std::span<const EmbeddingVector> view_embeds,
                                        const Encoder& encoder, const ClassifierConfig& clf,
                                        const LossWeights& weights, double rho,
                                        std::optional<std::span<const std::size_t>> retained = std::nullopt) {
    clf.validate();
    weights.validate();
    if (view_embeds.empty()) {
        throw InvalidArgument("evaluate_objective: no views");
    }
    const std::size_t n_cls = prompt.n_classes();
    if (n_cls < 2) {
        throw InvalidArgument("evaluate_objective: need at least two classes");
    }
    const TextForward fw = encode_prompt(prompt, encoder);
    const ClassTextSet& set = fw.set;
    const std::size_t d = set.dim();

    std::vector<EmbeddingVector> heads = set.classifier_embeddings();
    std::vector<double> head_norm(n_cls);
    for (std::size_t i = 0; i < n_cls; ++i) {
        head_norm[i] = l2_norm(set.class_mean(i));
    }

    std::vector<ProbVector> probs;
    probs.reserve(view_embeds.size());
    for (const auto& f : view_embeds) {
        probs.push_back(class_probabilities(f, heads, clf));
    }

    LossBreakdown out;
    if (retained) {
        out.retained_view_indices.assign(retained->begin(), retained->end());
    } else {
        out.retained_view_indices = confidence_filter(probs, rho);
    }
    const auto& keep = out.retained_view_indices;
    const ProbVector mean_p = average_probs(probs, keep);
    out.l_tpt = entropy(mean_p);
    const double dispersion = atfd(set);
    out.l_inter = -dispersion;
    out.l_intra = intra_class_loss(set);
    out.l_total = out.l_tpt + weights.alpha * out.l_inter + weights.beta * out.l_intra;

    // dL/d(mean prob)
    Vector d_mean(n_cls);
    for (std::size_t k = 0; k < n_cls; ++k) {
        const double p = std::max(mean_p[k], std::numeric_limits<double>::min());
        d_mean[k] = -(std::log(p) + 1.0) / static_cast<double>(keep.size());
    }
    // Back through softmax and the cosine logits into the unit class heads.
    std::vector<Vector> d_head(n_cls, Vector(d, 0.0));
    for (std::size_t v : keep) {
        const auto& p = probs[v];
        const double along = dot(p.values(), d_mean);
        for (std::size_t k = 0; k < n_cls; ++k) {
            const double dz = p[k] * (d_mean[k] - along);
            axpy(dz / clf.temperature, view_embeds[v].values(), d_head[k]);
        }
    }
    std::vector<Vector> d_class_mean(n_cls);
    for (std::size_t k = 0; k < n_cls; ++k) {
        d_class_mean[k] = normalize_backward(heads[k].values(), head_norm[k], d_head[k]);
    }
    if (weights.alpha != 0.0) {
        const auto g_atfd = detail::spread_gradient(set.class_means(), set.grand_mean());
        for (std::size_t k = 0; k < n_cls; ++k) {
            axpy(-weights.alpha, g_atfd[k], d_class_mean[k]);
        }
    }

    const std::size_t d_tok = encoder.config().d_tok;
    Vector d_prefix(d_tok, 0.0);
    const double intra_scale = weights.beta / static_cast<double>(n_cls);
    for (std::size_t i = 0; i < n_cls; ++i) {
        const std::size_t m = prompt.n_texts(i);
        std::vector<Vector> pts;
        pts.reserve(m);
        for (const auto& e : set.members(i)) {
            pts.push_back(e.vec());
        }
        std::vector<Vector> g_mtas;
        if (weights.beta != 0.0) {
            g_mtas = detail::spread_gradient(pts, set.class_mean(i));
        }
        for (std::size_t j = 0; j < m; ++j) {
            Vector d_text = scaled(d_class_mean[i], 1.0 / static_cast<double>(m));
            if (!g_mtas.empty()) {
                axpy(intra_scale, g_mtas[j], d_text);
            }
            const Vector d_proj = normalize_backward(pts[j], fw.projected_norm[i][j], d_text);
            const Vector d_pooled = encoder.projection().apply_transpose(d_proj);
            axpy(1.0 / static_cast<double>(fw.token_counts[i][j]), d_pooled, d_prefix);
        }
    }

    // Mean pooling gives every prefix token the same gradient; frozen tokens
    // stay exactly zero.
    out.n_prefix_values = prompt.prefix.size() * d_tok;
    out.grad_prompt.assign(prompt.token_count() * d_tok, 0.0);
    for (std::size_t t = 0; t < prompt.prefix.size(); ++t) {
        std::copy(d_prefix.begin(), d_prefix.end(), out.grad_prompt.begin() + static_cast<long>(t * d_tok));
    }
    return out;
}

}  // namespace tca
