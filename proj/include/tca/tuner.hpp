#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tca/embedding.hpp"
#include "tca/encoder.hpp"
#include "tca/errors.hpp"
#include "tca/objective.hpp"
#include "tca/optimizer.hpp"
#include "tca/prompt.hpp"

namespace tca {

struct TunerConfig {
    double learning_rate = 0.005;
    std::size_t n_steps = 1;
    OptimizerKind optimizer = OptimizerKind::adaptive_moments_decoupled_decay;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    // Fraction of lowest-entropy views kept by the confidence filter.
    double rho = 0.1;
    LossWeights weights{};
    std::size_t n_views = 64;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw InvalidArgument("TunerConfig: learning_rate must be finite and >= 0");
        }
        if (n_steps < 1) {
            throw InvalidArgument("TunerConfig: n_steps must be >= 1");
        }
        if (!(rho > 0.0 && rho <= 1.0)) {
            throw InvalidArgument("TunerConfig: rho must lie in (0, 1]");
        }
        if (n_views < 1) {
            throw InvalidArgument("TunerConfig: n_views must be >= 1");
        }
        if (!(epsilon > 0.0) || weight_decay < 0.0 || !(beta1 >= 0.0 && beta1 < 1.0) ||
            !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw InvalidArgument("TunerConfig: invalid optimizer hyperparameters");
        }
        weights.validate();
    }

    OptimizerParams optimizer_params() const {
        return {learning_rate, beta1, beta2, epsilon, weight_decay};
    }
};

struct EnsembleSpec {
    std::vector<std::string> templates{"a photo of a", "a photo of the", "a picture of a", "a picture of the"};
};

struct Prediction {
    std::size_t label = 0;
    double confidence = 0.0;
    ProbVector probs;
};

struct TuningResult {
    PromptState prompt;
    // Loss at the start of each step.
    std::vector<LossBreakdown> history;
    // Mean prediction of the tuned prompt over its retained views.
    ProbVector final_probs;
    ClassTextSet final_texts;
};

inline std::vector<EmbeddingVector> encode_views(const EmbeddingVector& raw_feature, const Encoder& encoder,
                                                 const AugmentationConfig& aug) {
    std::vector<EmbeddingVector> out;
    for (const auto& v : augment(raw_feature, aug)) {
        out.push_back(encoder.encode_image(v));
    }
    return out;
}

/// One episodic tuning run on a single test sample. `prompt` is taken by
/// value: the caller's state is never modified.
inline TuningResult tune_on_sample(const EmbeddingVector& raw_feature, PromptState prompt, const TunerConfig& cfg,
                                   AugmentationConfig aug, const Encoder& encoder, const ClassifierConfig& clf) {
    cfg.validate();
    aug.n_views = cfg.n_views;
    const auto views = encode_views(raw_feature, encoder, aug);

    Vector params = prompt.prefix_parameters();
    AdamW adam(params.size(), cfg.optimizer_params());
    TuningResult result;
    for (std::size_t step = 0; step < cfg.n_steps; ++step) {
        LossBreakdown loss;
        try {
            loss = evaluate_objective(prompt, views, encoder, clf, cfg.weights, cfg.rho);
        } catch (const DegenerateInput& e) {
            throw NumericFailure(std::string("degenerate prompt: ") + e.what(), step);
        }
        if (!std::isfinite(loss.l_total)) {
            throw NumericFailure("non-finite loss", step);
        }
        if (!all_finite(loss.grad_prompt)) {
            throw NumericFailure("non-finite gradient", step);
        }
        const auto grad = loss.grad_prefix();
        if (cfg.optimizer == OptimizerKind::adaptive_moments_decoupled_decay) {
            adam.step(params, grad);
        } else {
            gradient_descent_step(params, grad, cfg.learning_rate);
        }
        if (!all_finite(params)) {
            throw NumericFailure("non-finite prompt after update", step);
        }
        prompt.set_prefix_parameters(params);
        result.history.push_back(std::move(loss));
    }

    try {
        result.final_texts = class_text_set(prompt, encoder);
    } catch (const DegenerateInput& e) {
        throw NumericFailure(std::string("degenerate prompt: ") + e.what(), cfg.n_steps);
    }
    const auto heads = result.final_texts.classifier_embeddings();
    std::vector<ProbVector> probs;
    probs.reserve(views.size());
    for (const auto& f : views) {
        probs.push_back(class_probabilities(f, heads, clf));
    }
    result.final_probs = average_probs(probs, confidence_filter(probs, cfg.rho));
    result.prompt = std::move(prompt);
    return result;
}

inline Prediction predict_from_logits(const Vector& logits) {
    ProbVector p(softmax(logits));
    const std::size_t label = p.argmax();
    return {label, p[label], std::move(p)};
}

/// Zero-shot prediction on the unaugmented sample.
inline Prediction predict(const EmbeddingVector& raw_feature, const PromptState& prompt, const Encoder& encoder,
                          const ClassifierConfig& clf) {
    const auto heads = class_text_set(prompt, encoder).classifier_embeddings();
    return predict_from_logits(class_logits(encoder.encode_image(raw_feature), heads, clf));
}

/// Averages the pre-softmax logits of one tuned prompt per template, then
/// applies a single softmax.
inline Prediction ensemble_predict(const EmbeddingVector& raw_feature, const EnsembleSpec& spec,
                                   std::span<const PromptState> prompts, const Encoder& encoder,
                                   const ClassifierConfig& clf) {
    if (prompts.empty()) {
        throw InvalidArgument("ensemble_predict: no prompts");
    }
    if (prompts.size() != spec.templates.size()) {
        throw InvalidArgument("ensemble_predict: " + std::to_string(prompts.size()) + " prompts for " +
                              std::to_string(spec.templates.size()) + " templates");
    }
    const EmbeddingVector image = encoder.encode_image(raw_feature);
    Vector sum;
    for (const auto& prompt : prompts) {
        const auto heads = class_text_set(prompt, encoder).classifier_embeddings();
        const Vector z = class_logits(image, heads, clf);
        if (sum.empty()) {
            sum.assign(z.size(), 0.0);
        }
        if (z.size() != sum.size()) {
            throw InvalidArgument("ensemble_predict: prompts disagree on class count");
        }
        axpy(1.0, z, sum);
    }
    for (double& x : sum) {
        x /= static_cast<double>(prompts.size());
    }
    return predict_from_logits(sum);
}

}  // namespace tca
