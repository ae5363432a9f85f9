#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tca/attributes.hpp"
#include "tca/encoder.hpp"
#include "tca/errors.hpp"

namespace tca {

/// Frozen tokens of one class: one token run per selected attribute (empty
/// when prompting without attributes) followed by the class-name tokens.
struct ClassSegment {
    std::string class_name;
    std::vector<std::vector<TokenEmbedding>> attributes;
    std::vector<TokenEmbedding> class_tokens;

    bool operator==(const ClassSegment&) const = default;
};

/// Learnable prefix shared by every (class, attribute) text plus the frozen
/// per-class segments. Text (i, j) is prefix + attributes[j] + class_tokens.
///
/// Flat token layout used for gradients: prefix tokens first, then for each
/// class its attribute runs in order followed by its class tokens.
struct PromptState {
    std::vector<TokenEmbedding> prefix;
    std::vector<ClassSegment> classes;

    bool operator==(const PromptState&) const = default;

    std::size_t n_classes() const noexcept { return classes.size(); }
    std::size_t n_texts(std::size_t cls) const { return classes.at(cls).attributes.size(); }

    std::size_t d_tok() const { return prefix.empty() ? 0 : prefix.front().vector.dim(); }

    std::vector<TokenEmbedding> sequence(std::size_t cls, std::size_t attr) const {
        const auto& seg = classes.at(cls);
        std::vector<TokenEmbedding> seq(prefix);
        const auto& a = seg.attributes.at(attr);
        seq.insert(seq.end(), a.begin(), a.end());
        seq.insert(seq.end(), seg.class_tokens.begin(), seg.class_tokens.end());
        return seq;
    }

    std::size_t token_count() const {
        std::size_t n = prefix.size();
        for (const auto& seg : classes) {
            for (const auto& a : seg.attributes) {
                n += a.size();
            }
            n += seg.class_tokens.size();
        }
        return n;
    }

    /// Prefix token values, concatenated.
    Vector prefix_parameters() const {
        Vector out;
        out.reserve(prefix.size() * d_tok());
        for (const auto& t : prefix) {
            out.insert(out.end(), t.vector.values().begin(), t.vector.values().end());
        }
        return out;
    }

    void set_prefix_parameters(std::span<const double> values) {
        const std::size_t d = d_tok();
        if (values.size() != prefix.size() * d) {
            throw InvalidArgument("set_prefix_parameters: size mismatch");
        }
        for (std::size_t t = 0; t < prefix.size(); ++t) {
            const auto first = values.begin() + static_cast<long>(t * d);
            const auto cur = prefix[t].vector.values();
            if (std::equal(cur.begin(), cur.end(), first)) {
                continue;
            }
            prefix[t].vector = EmbeddingVector(Vector(first, first + static_cast<long>(d)));
        }
    }
};

enum class MissingAttributePolicy {
    error,
    // Substitute the class name as the class's only attribute.
    use_class_name,
};

struct PromptOptions {
    MissingAttributePolicy missing = MissingAttributePolicy::error;
    // When non-empty, one vector per class replacing the hashed class-name
    // tokens (e.g. precomputed text features from a real encoder).
    std::span<const EmbeddingVector> class_vectors{};
};

/// Builds the prompt for a hard-prompt template. `ranked` is either empty
/// (no attributes: one text per class) or holds one entry per class.
inline PromptState init_prompt(const std::string& template_text, std::span<const RankedAttributes> ranked,
                               const std::vector<std::string>& class_names, const Encoder& encoder,
                               const PromptOptions& options = {}) {
    if (split_words(template_text).empty()) {
        throw InvalidArgument("init_prompt: empty template");
    }
    if (class_names.empty()) {
        throw InvalidArgument("init_prompt: no classes");
    }
    if (!ranked.empty() && ranked.size() != class_names.size()) {
        throw InvalidArgument("init_prompt: ranked attributes must cover every class");
    }
    if (!options.class_vectors.empty() && options.class_vectors.size() != class_names.size()) {
        throw InvalidArgument("init_prompt: class vector count must equal class count");
    }
    PromptState state;
    state.prefix = encoder.tokenize(template_text, false);
    state.classes.reserve(class_names.size());
    for (std::size_t i = 0; i < class_names.size(); ++i) {
        ClassSegment seg;
        seg.class_name = class_names[i];
        if (!options.class_vectors.empty()) {
            const auto& v = options.class_vectors[i];
            if (v.dim() != encoder.config().d_tok) {
                throw InvalidArgument("init_prompt: class vector dimension must equal d_tok");
            }
            seg.class_tokens.push_back({class_names[i], v, true});
        } else {
            seg.class_tokens = encoder.tokenize(class_names[i], true);
        }
        if (seg.class_tokens.empty()) {
            throw InvalidArgument("init_prompt: class name has no tokens");
        }
        if (ranked.empty()) {
            seg.attributes.emplace_back();
        } else {
            if (ranked[i].class_name != class_names[i]) {
                throw InvalidArgument("init_prompt: ranked attributes out of class order at '" +
                                      class_names[i] + "'");
            }
            for (const auto& a : ranked[i].selected) {
                seg.attributes.push_back(encoder.tokenize(a, true));
            }
            if (seg.attributes.empty()) {
                if (options.missing == MissingAttributePolicy::error) {
                    throw InvalidArgument("init_prompt: class '" + class_names[i] + "' has no attributes");
                }
                seg.attributes.push_back(encoder.tokenize(class_names[i], true));
            }
        }
        state.classes.push_back(std::move(seg));
    }
    return state;
}

}  // namespace tca
