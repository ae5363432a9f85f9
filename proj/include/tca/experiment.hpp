#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <exception>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tca/attributes.hpp"
#include "tca/bench.hpp"
#include "tca/calibration.hpp"
#include "tca/encoder.hpp"
#include "tca/errors.hpp"
#include "tca/objective.hpp"
#include "tca/prompt.hpp"
#include "tca/tuner.hpp"

namespace tca {

/// Config problem detected before any compute (CLI exit code 1).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kSeedEnvVar = "TCA_SEED";

struct MethodDescriptor {
    std::string name;
    std::string label;
    bool use_attributes = false;
    std::size_t top_m = 2;
    LossWeights weights{};
    bool ensemble = false;
    // 0 means the hard prompt is used as-is.
    std::size_t n_steps = 1;
};

/// Named methods matching the rows of the comparison table.
inline std::optional<MethodDescriptor> method_preset(const std::string& name) {
    static const std::vector<MethodDescriptor> presets = {
        {"hard_prompt", "CLIP_HardPrompt", false, 2, {0.0, 0.0}, false, 0},
        {"tpt", "+TPT_HardPrompt", false, 2, {0.0, 0.0}, false, 1},
        {"tpt_inter", "+TPT_HardPrompt+inter-class only", false, 2, {10.0, 0.0}, false, 1},
        {"tpt_intra", "+TPT_HardPrompt+intra-class only (2 Attribute)", true, 2, {0.0, 35.0}, false, 1},
        {"tpt_tca", "+TPT_HardPrompt+TCA (2 Attribute)", true, 2, {10.0, 35.0}, false, 1},
        {"hard_prompt_ensemble", "CLIP_Ensemble", false, 2, {0.0, 0.0}, true, 0},
        {"tpt_ensemble", "+TPT_Ensemble", false, 2, {0.0, 0.0}, true, 1},
        {"tpt_tca_ensemble", "+TPT_Ensemble+TCA (2 Attribute)", true, 2, {10.0, 35.0}, true, 1},
    };
    for (const auto& p : presets) {
        if (p.name == name) {
            return p;
        }
    }
    return std::nullopt;
}

struct ExperimentConfig {
    std::optional<SyntheticSpec> synthetic;
    std::string bundle_path;
    std::string catalog_path;
    std::vector<MethodDescriptor> methods;
    EncoderConfig encoder{};
    std::uint64_t token_seed = 0;
    ClassifierConfig classifier{};
    TunerConfig tuner{};
    AugmentationConfig augmentation{};
    std::string template_text = "a photo of a";
    EnsembleSpec ensemble{};
    MissingAttributePolicy missing_attributes = MissingAttributePolicy::error;
    std::size_t n_bins = 15;
    std::string output_dir = "results";
    std::vector<std::uint64_t> seeds{0};
    std::size_t failure_budget = 0;
    std::size_t threads = 1;
    std::string grid_method;
};

namespace detail {

using nlohmann::json;
using nlohmann::ordered_json;

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline std::string resolve_path(const std::string& path, const std::filesystem::path& base) {
    if (path.empty()) {
        return path;
    }
    std::filesystem::path p(path);
    return p.is_absolute() ? p.string() : (base / p).lexically_normal().string();
}

inline Shift parse_shift(const json& j) {
    reject_unknown(j, {"kind", "sigma", "angle_budget", "flip_fraction"}, "dataset.synthetic.shift");
    const std::string kind = j.value("kind", "none");
    if (kind == "none") {
        return NoShift{};
    }
    if (kind == "noise") {
        return NoiseShift{j.value("sigma", NoiseShift{}.sigma)};
    }
    if (kind == "rotation") {
        return RotationShift{j.value("angle_budget", RotationShift{}.angle_budget)};
    }
    if (kind == "sketch") {
        return SketchShift{j.value("flip_fraction", SketchShift{}.flip_fraction)};
    }
    throw ConfigError("dataset.synthetic.shift.kind: unknown shift '" + kind + "'");
}

inline ordered_json shift_to_json(const Shift& s) {
    return std::visit(
        [](const auto& v) -> ordered_json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, NoShift>) {
                return {{"kind", "none"}};
            } else if constexpr (std::is_same_v<T, NoiseShift>) {
                return {{"kind", "noise"}, {"sigma", v.sigma}};
            } else if constexpr (std::is_same_v<T, RotationShift>) {
                return {{"kind", "rotation"}, {"angle_budget", v.angle_budget}};
            } else {
                return {{"kind", "sketch"}, {"flip_fraction", v.flip_fraction}};
            }
        },
        s);
}

inline std::string optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::adaptive_moments_decoupled_decay ? "adamw" : "sgd";
}

}  // namespace detail

/// Builds a config from its JSON document. Relative paths resolve against
/// `base_dir`. Unknown keys are errors.
inline ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".") {
    using detail::read;
    using detail::reject_unknown;
    reject_unknown(doc,
                   {"dataset", "catalog", "methods", "encoder", "classifier", "tuner", "augmentation", "template",
                    "ensemble_templates", "missing_attributes", "n_bins", "output_dir", "seeds", "failure_budget",
                    "threads", "grid"},
                   "config");
    ExperimentConfig cfg;

    if (!doc.contains("dataset")) {
        throw ConfigError("config: missing 'dataset'");
    }
    const auto& ds = doc.at("dataset");
    reject_unknown(ds, {"synthetic", "bundle"}, "dataset");
    if (ds.contains("synthetic") == ds.contains("bundle")) {
        throw ConfigError("dataset: specify exactly one of 'synthetic' or 'bundle'");
    }
    if (ds.contains("synthetic")) {
        const auto& sj = ds.at("synthetic");
        reject_unknown(sj,
                       {"n_classes", "samples_per_class", "d_raw", "cluster_sigma", "shift", "attribute_alignment",
                        "class_names"},
                       "dataset.synthetic");
        SyntheticSpec spec;
        read(sj, "n_classes", spec.n_classes, "dataset.synthetic");
        read(sj, "samples_per_class", spec.samples_per_class, "dataset.synthetic");
        spec.d_raw = 0;
        read(sj, "d_raw", spec.d_raw, "dataset.synthetic");
        read(sj, "cluster_sigma", spec.cluster_sigma, "dataset.synthetic");
        read(sj, "attribute_alignment", spec.attribute_alignment, "dataset.synthetic");
        read(sj, "class_names", spec.class_names, "dataset.synthetic");
        if (sj.contains("shift")) {
            spec.shift = detail::parse_shift(sj.at("shift"));
        }
        cfg.synthetic = spec;
    } else {
        std::string p;
        read(ds, "bundle", p, "dataset");
        cfg.bundle_path = detail::resolve_path(p, base_dir);
    }

    std::string catalog;
    read(doc, "catalog", catalog, "config");
    cfg.catalog_path = detail::resolve_path(catalog, base_dir);

    if (doc.contains("encoder")) {
        const auto& e = doc.at("encoder");
        reject_unknown(e, {"d_tok", "d_embed", "projection_seed", "use_identity_projection", "token_seed"},
                       "encoder");
        read(e, "d_tok", cfg.encoder.d_tok, "encoder");
        read(e, "d_embed", cfg.encoder.d_embed, "encoder");
        read(e, "projection_seed", cfg.encoder.projection_seed, "encoder");
        read(e, "use_identity_projection", cfg.encoder.use_identity_projection, "encoder");
        read(e, "token_seed", cfg.token_seed, "encoder");
    }
    if (cfg.synthetic && cfg.synthetic->d_raw == 0) {
        cfg.synthetic->d_raw = cfg.encoder.d_tok;
    }
    if (doc.contains("classifier")) {
        reject_unknown(doc.at("classifier"), {"temperature"}, "classifier");
        read(doc.at("classifier"), "temperature", cfg.classifier.temperature, "classifier");
    }
    if (doc.contains("tuner")) {
        const auto& t = doc.at("tuner");
        reject_unknown(t,
                       {"learning_rate", "optimizer", "beta1", "beta2", "epsilon", "weight_decay", "rho",
                        "n_views"},
                       "tuner");
        read(t, "learning_rate", cfg.tuner.learning_rate, "tuner");
        read(t, "beta1", cfg.tuner.beta1, "tuner");
        read(t, "beta2", cfg.tuner.beta2, "tuner");
        read(t, "epsilon", cfg.tuner.epsilon, "tuner");
        read(t, "weight_decay", cfg.tuner.weight_decay, "tuner");
        read(t, "rho", cfg.tuner.rho, "tuner");
        read(t, "n_views", cfg.tuner.n_views, "tuner");
        std::string opt = "adamw";
        read(t, "optimizer", opt, "tuner");
        if (opt == "adamw") {
            cfg.tuner.optimizer = OptimizerKind::adaptive_moments_decoupled_decay;
        } else if (opt == "sgd") {
            cfg.tuner.optimizer = OptimizerKind::plain_gradient_descent;
        } else {
            throw ConfigError("tuner.optimizer: expected 'adamw' or 'sgd'");
        }
    }
    if (doc.contains("augmentation")) {
        const auto& a = doc.at("augmentation");
        reject_unknown(a, {"noise_sigma", "dropout_fraction"}, "augmentation");
        read(a, "noise_sigma", cfg.augmentation.noise_sigma, "augmentation");
        read(a, "dropout_fraction", cfg.augmentation.dropout_fraction, "augmentation");
    }
    read(doc, "template", cfg.template_text, "config");
    read(doc, "ensemble_templates", cfg.ensemble.templates, "config");
    std::string missing = "error";
    read(doc, "missing_attributes", missing, "config");
    if (missing == "error") {
        cfg.missing_attributes = MissingAttributePolicy::error;
    } else if (missing == "use_class_name") {
        cfg.missing_attributes = MissingAttributePolicy::use_class_name;
    } else {
        throw ConfigError("missing_attributes: expected 'error' or 'use_class_name'");
    }
    read(doc, "n_bins", cfg.n_bins, "config");
    std::string out = cfg.output_dir;
    read(doc, "output_dir", out, "config");
    cfg.output_dir = detail::resolve_path(out, base_dir);
    read(doc, "seeds", cfg.seeds, "config");
    read(doc, "failure_budget", cfg.failure_budget, "config");
    read(doc, "threads", cfg.threads, "config");
    if (doc.contains("grid")) {
        reject_unknown(doc.at("grid"), {"method"}, "grid");
        read(doc.at("grid"), "method", cfg.grid_method, "grid");
    }

    if (!doc.contains("methods") || !doc.at("methods").is_array()) {
        throw ConfigError("config: 'methods' must be an array");
    }
    for (const auto& mj : doc.at("methods")) {
        if (mj.is_string()) {
            const auto preset = method_preset(mj.get<std::string>());
            if (!preset) {
                throw ConfigError("methods: unknown method '" + mj.get<std::string>() + "'");
            }
            cfg.methods.push_back(*preset);
            continue;
        }
        detail::reject_unknown(mj,
                               {"name", "preset", "label", "use_attributes", "top_m", "alpha", "beta", "ensemble",
                                "n_steps"},
                               "methods[]");
        MethodDescriptor m;
        read(mj, "name", m.name, "methods[]");
        std::string preset_name = m.name;
        read(mj, "preset", preset_name, "methods[]");
        if (const auto preset = method_preset(preset_name)) {
            const std::string name = m.name;
            m = *preset;
            m.name = name.empty() ? preset->name : name;
        } else if (mj.contains("preset")) {
            throw ConfigError("methods[]: unknown preset '" + preset_name + "'");
        }
        read(mj, "label", m.label, "methods[]");
        read(mj, "use_attributes", m.use_attributes, "methods[]");
        read(mj, "top_m", m.top_m, "methods[]");
        read(mj, "alpha", m.weights.alpha, "methods[]");
        read(mj, "beta", m.weights.beta, "methods[]");
        read(mj, "ensemble", m.ensemble, "methods[]");
        read(mj, "n_steps", m.n_steps, "methods[]");
        if (m.label.empty()) {
            m.label = m.name;
        }
        cfg.methods.push_back(m);
    }

    if (const char* env = std::getenv(kSeedEnvVar); env != nullptr && *env != '\0') {
        try {
            cfg.seeds = {static_cast<std::uint64_t>(std::stoull(env))};
        } catch (const std::exception&) {
            throw ConfigError(std::string(kSeedEnvVar) + ": not an unsigned integer");
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path + "'");
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    return parse_config(doc, std::filesystem::path(path).parent_path());
}

/// Checks everything that can be checked without running: value ranges,
/// unique method names, resolvable paths, catalog and bundle contents.
inline void validate_config(const ExperimentConfig& cfg) {
    auto check = [](bool ok, const std::string& msg) {
        if (!ok) {
            throw ConfigError(msg);
        }
    };
    check(!cfg.methods.empty(), "config: at least one method is required");
    check(!cfg.seeds.empty(), "config: at least one seed is required");
    check(cfg.n_bins >= 1, "config: n_bins must be >= 1");
    check(!cfg.catalog_path.empty(), "config: 'catalog' is required");
    check(std::filesystem::is_regular_file(cfg.catalog_path), "config: catalog not found: " + cfg.catalog_path);
    std::set<std::string> names;
    for (const auto& m : cfg.methods) {
        check(!m.name.empty(), "methods: every method needs a name");
        check(names.insert(m.name).second, "methods: duplicate method name '" + m.name + "'");
        check(m.top_m >= 1, "methods: top_m must be >= 1 for '" + m.name + "'");
    }
    check(!cfg.ensemble.templates.empty(), "ensemble_templates: at least one template is required");
    try {
        cfg.encoder.validate();
        cfg.classifier.validate();
        TunerConfig t = cfg.tuner;
        t.validate();
        cfg.augmentation.validate();
        for (const auto& m : cfg.methods) {
            m.weights.validate();
        }
        if (cfg.synthetic) {
            cfg.synthetic->validate();
        }
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    AttributeCatalog catalog;
    try {
        catalog = load_catalog(cfg.catalog_path);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("catalog: ") + e.what());
    }
    if (cfg.synthetic) {
        check(cfg.synthetic->d_raw == cfg.encoder.d_tok, "dataset.synthetic.d_raw must equal encoder.d_tok");
        if (cfg.synthetic->class_names.empty()) {
            check(catalog.size() >= cfg.synthetic->n_classes, "catalog has fewer classes than n_classes");
        } else {
            for (const auto& n : cfg.synthetic->class_names) {
                check(catalog.contains(n), "catalog has no class '" + n + "'");
            }
        }
    } else {
        check(std::filesystem::is_regular_file(cfg.bundle_path), "config: bundle not found: " + cfg.bundle_path);
        FeatureBundle b;
        try {
            b = read_bundle(cfg.bundle_path);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("bundle: ") + e.what());
        }
        check(b.d_embed == cfg.encoder.d_tok, "bundle d_embed must equal encoder.d_tok");
        const bool any_attrs = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                           [](const MethodDescriptor& m) { return m.use_attributes; });
        if (any_attrs && cfg.missing_attributes == MissingAttributePolicy::error) {
            for (const auto& n : b.class_names) {
                check(catalog.contains(n), "catalog has no class '" + n + "' (bundle class)");
            }
        }
    }
    if (!cfg.grid_method.empty()) {
        check(names.count(cfg.grid_method) == 1, "grid.method: no method named '" + cfg.grid_method + "'");
    }
}

/// Every setting the run uses, defaults included.
inline nlohmann::ordered_json manifest_json(const ExperimentConfig& cfg) {
    using nlohmann::ordered_json;
    ordered_json m;
    ordered_json ds;
    if (cfg.synthetic) {
        const auto& s = *cfg.synthetic;
        ds["synthetic"] = {{"n_classes", s.n_classes},
                           {"samples_per_class", s.samples_per_class},
                           {"d_raw", s.d_raw},
                           {"cluster_sigma", s.cluster_sigma},
                           {"shift", detail::shift_to_json(s.shift)},
                           {"attribute_alignment", s.attribute_alignment},
                           {"class_names", s.class_names}};
    } else {
        ds["bundle"] = cfg.bundle_path;
    }
    m["dataset"] = ds;
    m["catalog"] = cfg.catalog_path;
    ordered_json methods = ordered_json::array();
    for (const auto& md : cfg.methods) {
        methods.push_back({{"name", md.name},
                           {"label", md.label},
                           {"use_attributes", md.use_attributes},
                           {"top_m", md.top_m},
                           {"alpha", md.weights.alpha},
                           {"beta", md.weights.beta},
                           {"ensemble", md.ensemble},
                           {"n_steps", md.n_steps}});
    }
    m["methods"] = methods;
    m["encoder"] = {{"d_tok", cfg.encoder.d_tok},
                    {"d_embed", cfg.encoder.d_embed},
                    {"projection_seed", cfg.encoder.projection_seed},
                    {"use_identity_projection", cfg.encoder.use_identity_projection},
                    {"token_seed", cfg.token_seed}};
    m["classifier"] = {{"temperature", cfg.classifier.temperature}};
    m["tuner"] = {{"learning_rate", cfg.tuner.learning_rate},
                  {"optimizer", detail::optimizer_name(cfg.tuner.optimizer)},
                  {"beta1", cfg.tuner.beta1},
                  {"beta2", cfg.tuner.beta2},
                  {"epsilon", cfg.tuner.epsilon},
                  {"weight_decay", cfg.tuner.weight_decay},
                  {"rho", cfg.tuner.rho},
                  {"n_views", cfg.tuner.n_views}};
    m["augmentation"] = {{"noise_sigma", cfg.augmentation.noise_sigma},
                         {"dropout_fraction", cfg.augmentation.dropout_fraction}};
    m["template"] = cfg.template_text;
    m["ensemble_templates"] = cfg.ensemble.templates;
    m["missing_attributes"] =
        cfg.missing_attributes == MissingAttributePolicy::error ? "error" : "use_class_name";
    m["n_bins"] = cfg.n_bins;
    m["output_dir"] = cfg.output_dir;
    m["seeds"] = cfg.seeds;
    m["failure_budget"] = cfg.failure_budget;
    m["threads"] = cfg.threads;
    m["grid"] = {{"method", cfg.grid_method}};
    return m;
}

// ---------------------------------------------------------------------------
// Execution

enum class SampleStatus { scored, numeric_failure };

struct SampleOutcome {
    SampleStatus status = SampleStatus::scored;
    PredictionRecord record{};
    double atfd = 0.0;
    double mean_mtas = 0.0;
    std::string error;
};

struct ResultRow {
    std::string method;
    std::uint64_t seed = 0;
    std::size_t n_samples = 0;
    std::size_t n_scored = 0;
    std::size_t n_failed = 0;
    double accuracy = 0.0;
    double ece = 0.0;
    double mean_atfd = 0.0;
    double mean_mtas = 0.0;
    double wall_time = 0.0;
};

/// Per-class tuned text embeddings of one sample, for 2-D projection.
struct EmbeddingSnapshot {
    std::size_t sample_id = 0;
    std::vector<std::size_t> class_labels;
    std::vector<std::size_t> attribute_index;
    std::vector<EmbeddingVector> embeddings;
};

struct CellResult {
    ResultRow row;
    std::vector<SampleOutcome> samples;
    std::optional<EmbeddingSnapshot> snapshot;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<std::string> class_names;
    // Cells ordered by (seed, method) in config order.
    std::vector<CellResult> cells;

    std::size_t total_failures() const {
        std::size_t n = 0;
        for (const auto& c : cells) {
            n += c.row.n_failed;
        }
        return n;
    }
};

/// Shared, read-only state for one experiment.
class ExperimentContext {
public:
    explicit ExperimentContext(const ExperimentConfig& cfg)
        : cfg_(cfg), encoder_(cfg.encoder, cfg.token_seed), catalog_(load_catalog(cfg.catalog_path)) {
        if (!cfg.synthetic) {
            bundle_dataset_ = to_dataset(read_bundle(cfg.bundle_path));
        }
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const Encoder& encoder() const noexcept { return encoder_; }
    const AttributeCatalog& catalog() const noexcept { return catalog_; }

    Dataset dataset(std::uint64_t seed) const {
        if (!cfg_.synthetic) {
            return bundle_dataset_;
        }
        SyntheticSpec spec = *cfg_.synthetic;
        spec.seed = seed;
        return generate(spec, catalog_, encoder_);
    }

    /// Initial prompt for each ensemble member (one when not ensembling).
    std::vector<PromptState> initial_prompts(const MethodDescriptor& m, const Dataset& ds) const {
        std::vector<RankedAttributes> ranked;
        if (m.use_attributes) {
            for (const auto& name : ds.class_names) {
                if (catalog_.contains(name)) {
                    ranked.push_back(rank_attributes(name, catalog_.attributes(name), encoder_, m.top_m));
                } else if (cfg_.missing_attributes == MissingAttributePolicy::use_class_name) {
                    ranked.push_back({name, {}, {}});
                } else {
                    throw MissingClass(name);
                }
            }
        }
        PromptOptions opts;
        opts.missing = cfg_.missing_attributes;
        opts.class_vectors = ds.class_text_features;
        std::vector<PromptState> out;
        if (m.ensemble) {
            for (const auto& t : cfg_.ensemble.templates) {
                out.push_back(init_prompt(t, ranked, ds.class_names, encoder_, opts));
            }
        } else {
            out.push_back(init_prompt(cfg_.template_text, ranked, ds.class_names, encoder_, opts));
        }
        return out;
    }

private:
    ExperimentConfig cfg_;
    Encoder encoder_;
    AttributeCatalog catalog_;
    Dataset bundle_dataset_;
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (threads == 0) {
        threads = std::max(1U, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, std::max<std::size_t>(n, 1));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                fn(i);
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
}

inline AugmentationConfig sample_augmentation(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t sample,
                                              std::size_t member) {
    AugmentationConfig aug = cfg.augmentation;
    aug.n_views = cfg.tuner.n_views;
    aug.seed = combine_seeds(combine_seeds(seed, sample), member);
    return aug;
}

}  // namespace detail

/// Episodic evaluation of one method on one seed: every sample starts from
/// the same freshly initialized prompt(s).
inline CellResult run_cell(const ExperimentContext& ctx, const MethodDescriptor& method, std::uint64_t seed,
                           const Dataset& ds) {
    const auto& cfg = ctx.config();
    const auto start = std::chrono::steady_clock::now();
    const std::vector<PromptState> initial = ctx.initial_prompts(method, ds);
    TunerConfig tcfg = cfg.tuner;
    tcfg.weights = method.weights;
    tcfg.n_steps = std::max<std::size_t>(method.n_steps, 1);
    ClassifierConfig clf = cfg.classifier;
    clf.n_classes = ds.n_classes();

    CellResult cell;
    cell.samples.resize(ds.size());
    std::vector<std::optional<EmbeddingSnapshot>> snap(1);
    std::mutex error_mutex;
    std::exception_ptr first_error;
    detail::parallel_for(ds.size(), cfg.threads, [&](std::size_t s) {
        SampleOutcome out;
        try {
            std::vector<PromptState> prompts;
            std::vector<ClassTextSet> texts;
            for (std::size_t k = 0; k < initial.size(); ++k) {
                if (method.n_steps == 0) {
                    prompts.push_back(initial[k]);
                    texts.push_back(class_text_set(initial[k], ctx.encoder()));
                } else {
                    auto r = tune_on_sample(ds.features[s], initial[k], tcfg,
                                            detail::sample_augmentation(cfg, seed, s, k), ctx.encoder(), clf);
                    prompts.push_back(std::move(r.prompt));
                    texts.push_back(std::move(r.final_texts));
                }
            }
            const Prediction pred =
                method.ensemble ? ensemble_predict(ds.features[s], cfg.ensemble, prompts, ctx.encoder(), clf)
                                : predict(ds.features[s], prompts.front(), ctx.encoder(), clf);
            if (!std::isfinite(pred.confidence)) {
                throw NumericFailure("non-finite prediction", tcfg.n_steps);
            }
            out.record = {pred.label, ds.labels[s], pred.confidence};
            for (const auto& t : texts) {
                const auto disp = dispersion_summary(t);
                out.atfd += disp.atfd / static_cast<double>(texts.size());
                out.mean_mtas += disp.mean_mtas / static_cast<double>(texts.size());
            }
            if (s == 0) {
                EmbeddingSnapshot es;
                es.sample_id = 0;
                const auto& t = texts.front();
                for (std::size_t i = 0; i < t.n_classes(); ++i) {
                    for (std::size_t j = 0; j < t.members(i).size(); ++j) {
                        es.class_labels.push_back(i);
                        es.attribute_index.push_back(j);
                        es.embeddings.push_back(t.members(i)[j]);
                    }
                }
                snap[0] = std::move(es);
            }
        } catch (const NumericFailure& e) {
            out = SampleOutcome{};
            out.status = SampleStatus::numeric_failure;
            out.record = {0, ds.labels[s], 0.0};
            out.error = e.what();
        } catch (const DegenerateInput& e) {
            out = SampleOutcome{};
            out.status = SampleStatus::numeric_failure;
            out.record = {0, ds.labels[s], 0.0};
            out.error = e.what();
        } catch (...) {
            const std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) {
                first_error = std::current_exception();
            }
        }
        cell.samples[s] = std::move(out);
    });
    if (first_error) {
        std::rethrow_exception(first_error);
    }
    cell.snapshot = std::move(snap[0]);

    ResultRow& row = cell.row;
    row.method = method.name;
    row.seed = seed;
    row.n_samples = ds.size();
    std::vector<PredictionRecord> scored;
    for (const auto& o : cell.samples) {
        if (o.status == SampleStatus::scored) {
            scored.push_back(o.record);
            row.mean_atfd += o.atfd;
            row.mean_mtas += o.mean_mtas;
        } else {
            ++row.n_failed;
        }
    }
    row.n_scored = scored.size();
    if (!scored.empty()) {
        row.accuracy = accuracy(scored);
        row.ece = ece(scored, cfg.n_bins).ece;
        row.mean_atfd /= static_cast<double>(scored.size());
        row.mean_mtas /= static_cast<double>(scored.size());
    }
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return cell;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    ExperimentContext ctx(cfg);
    ExperimentResult result;
    result.config = cfg;
    for (const auto seed : cfg.seeds) {
        const Dataset ds = ctx.dataset(seed);
        if (result.class_names.empty()) {
            result.class_names = ds.class_names;
        }
        for (const auto& m : cfg.methods) {
            result.cells.push_back(run_cell(ctx, m, seed, ds));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline std::string fmt_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidArgument("cannot read '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cols;
        std::size_t start = 0;
        for (;;) {
            const std::size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) {
                break;
            }
            start = tab + 1;
        }
        rows.push_back(std::move(cols));
    }
    return rows;
}

}  // namespace detail

inline const char* kAggregateHeader =
    "method\tlabel\tseed\tn_samples\tn_scored\tn_failed\taccuracy\tece\tmean_atfd\tmean_mtas\n";

/// Writes manifest.json, records.tsv, aggregate.tsv, aggregate.json,
/// snapshots.json and timings.tsv. Everything except timings.tsv is a pure
/// function of the config.
inline void write_results(const ExperimentResult& result, const std::filesystem::path& dir) {
    using detail::fmt_real;
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "manifest.json", manifest_json(result.config).dump(2) + "\n");

    std::map<std::string, std::string> labels;
    for (const auto& m : result.config.methods) {
        labels[m.name] = m.label;
    }

    std::string records = "seed\tmethod\tsample_id\tpredicted\ttrue\tconfidence\tstatus\n";
    std::string aggregate = kAggregateHeader;
    std::string timings = "method\tseed\twall_time_s\n";
    nlohmann::ordered_json agg_rows = nlohmann::ordered_json::array();
    nlohmann::ordered_json snapshots = nlohmann::ordered_json::array();
    for (const auto& cell : result.cells) {
        const auto& r = cell.row;
        for (std::size_t s = 0; s < cell.samples.size(); ++s) {
            const auto& o = cell.samples[s];
            records += std::to_string(r.seed) + "\t" + r.method + "\t" + std::to_string(s) + "\t";
            if (o.status == SampleStatus::scored) {
                records += std::to_string(o.record.predicted_label) + "\t" + std::to_string(o.record.true_label) +
                           "\t" + fmt_real(o.record.confidence) + "\tscored\n";
            } else {
                records += "-\t" + std::to_string(o.record.true_label) + "\t-\tnumeric_failure\n";
            }
        }
        aggregate += r.method + "\t" + labels[r.method] + "\t" + std::to_string(r.seed) + "\t" +
                     std::to_string(r.n_samples) + "\t" + std::to_string(r.n_scored) + "\t" +
                     std::to_string(r.n_failed) + "\t" + fmt_real(r.accuracy) + "\t" + fmt_real(r.ece) + "\t" +
                     fmt_real(r.mean_atfd) + "\t" + fmt_real(r.mean_mtas) + "\n";
        timings += r.method + "\t" + std::to_string(r.seed) + "\t" + fmt_real(r.wall_time) + "\n";
        agg_rows.push_back({{"method", r.method},
                            {"label", labels[r.method]},
                            {"seed", r.seed},
                            {"n_samples", r.n_samples},
                            {"n_scored", r.n_scored},
                            {"n_failed", r.n_failed},
                            {"accuracy", r.accuracy},
                            {"ece", r.ece},
                            {"mean_atfd", r.mean_atfd},
                            {"mean_mtas", r.mean_mtas}});
        if (cell.snapshot) {
            nlohmann::ordered_json pts = nlohmann::ordered_json::array();
            for (std::size_t p = 0; p < cell.snapshot->embeddings.size(); ++p) {
                pts.push_back({{"class", cell.snapshot->class_labels[p]},
                               {"attribute", cell.snapshot->attribute_index[p]},
                               {"embedding", cell.snapshot->embeddings[p].vec()}});
            }
            snapshots.push_back(
                {{"method", r.method}, {"seed", r.seed}, {"sample_id", cell.snapshot->sample_id}, {"points", pts}});
        }
    }
    nlohmann::ordered_json agg;
    agg["class_names"] = result.class_names;
    agg["rows"] = agg_rows;
    nlohmann::ordered_json means = nlohmann::ordered_json::array();
    for (const auto& m : result.config.methods) {
        double acc = 0.0, e = 0.0, at = 0.0, mt = 0.0;
        std::size_t n = 0;
        for (const auto& cell : result.cells) {
            if (cell.row.method == m.name) {
                acc += cell.row.accuracy;
                e += cell.row.ece;
                at += cell.row.mean_atfd;
                mt += cell.row.mean_mtas;
                ++n;
            }
        }
        const double dn = static_cast<double>(std::max<std::size_t>(n, 1));
        means.push_back({{"method", m.name},
                         {"label", m.label},
                         {"accuracy", acc / dn},
                         {"ece", e / dn},
                         {"mean_atfd", at / dn},
                         {"mean_mtas", mt / dn}});
    }
    agg["method_means"] = means;
    agg["n_failed"] = result.total_failures();

    detail::write_text(dir / "records.tsv", records);
    detail::write_text(dir / "aggregate.tsv", aggregate);
    detail::write_text(dir / "aggregate.json", agg.dump(2) + "\n");
    detail::write_text(dir / "snapshots.json", snapshots.dump() + "\n");
    detail::write_text(dir / "timings.tsv", timings);
}

// ---------------------------------------------------------------------------
// Grid search

struct GridCell {
    double alpha = 0.0;
    double beta = 0.0;
    double mean_ece = 0.0;
    double mean_accuracy = 0.0;
};

struct GridResult {
    double best_alpha = 0.0;
    double best_beta = 0.0;
    std::vector<GridCell> cells;
};

/// Picks the lowest mean ECE; ties go to the smaller alpha, then smaller beta.
inline GridCell select_grid_winner(const std::vector<GridCell>& cells) {
    if (cells.empty()) {
        throw InvalidArgument("grid_search: empty grid");
    }
    return *std::min_element(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
        if (a.mean_ece != b.mean_ece) {
            return a.mean_ece < b.mean_ece;
        }
        if (a.alpha != b.alpha) {
            return a.alpha < b.alpha;
        }
        return a.beta < b.beta;
    });
}

/// Evaluates every (alpha, beta) pair for the grid method (config
/// `grid.method`, default the first method that tunes) on the configured
/// dataset over all seeds.
inline GridResult grid_search(const ExperimentConfig& cfg, const std::vector<double>& alpha_grid,
                              const std::vector<double>& beta_grid) {
    if (alpha_grid.empty() || beta_grid.empty()) {
        throw InvalidArgument("grid_search: alpha and beta grids must be non-empty");
    }
    validate_config(cfg);
    const MethodDescriptor* base = nullptr;
    for (const auto& m : cfg.methods) {
        if (cfg.grid_method.empty() ? m.n_steps > 0 : m.name == cfg.grid_method) {
            base = &m;
            break;
        }
    }
    if (base == nullptr) {
        throw ConfigError("grid: no tuning method to search over");
    }
    ExperimentContext ctx(cfg);
    std::vector<Dataset> datasets;
    for (auto seed : cfg.seeds) {
        datasets.push_back(ctx.dataset(seed));
    }
    GridResult out;
    for (double a : alpha_grid) {
        for (double b : beta_grid) {
            MethodDescriptor m = *base;
            m.weights = {a, b};
            try {
                m.weights.validate();
            } catch (const InvalidArgument& e) {
                throw ConfigError(e.what());
            }
            GridCell gc{a, b, 0.0, 0.0};
            for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
                const auto cell = run_cell(ctx, m, cfg.seeds[k], datasets[k]);
                gc.mean_ece += cell.row.ece / static_cast<double>(cfg.seeds.size());
                gc.mean_accuracy += cell.row.accuracy / static_cast<double>(cfg.seeds.size());
            }
            out.cells.push_back(gc);
        }
    }
    const GridCell best = select_grid_winner(out.cells);
    out.best_alpha = best.alpha;
    out.best_beta = best.beta;
    return out;
}

inline void write_grid(const GridResult& grid, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string tsv = "alpha\tbeta\tmean_ece\tmean_accuracy\n";
    for (const auto& c : grid.cells) {
        tsv += detail::fmt_real(c.alpha) + "\t" + detail::fmt_real(c.beta) + "\t" + detail::fmt_real(c.mean_ece) +
               "\t" + detail::fmt_real(c.mean_accuracy) + "\n";
    }
    detail::write_text(dir / "grid.tsv", tsv);
    nlohmann::ordered_json best{{"alpha", grid.best_alpha}, {"beta", grid.best_beta}, {"objective", "min_ece"}};
    detail::write_text(dir / "grid_best.json", best.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Plot data

struct PlotSummary {
    std::size_t reliability_rows = 0;
    std::size_t pca_points = 0;
    std::size_t scatter_rows = 0;
};

/// Emits, under `<dir>/plots`: reliability_<method>.tsv (records pooled over
/// seeds), pca_<method>.tsv (first seed's snapshot projected to 2-D), and
/// dispersion_scatter.tsv (ECE and mean ATFD per method and seed, copied from
/// the aggregate table).
inline PlotSummary emit_plot_data(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
    const std::size_t n_bins = manifest.at("n_bins").get<std::size_t>();
    const auto records = detail::read_tsv(dir / "records.tsv");
    const auto aggregate = detail::read_tsv(dir / "aggregate.tsv");
    if (records.size() <= 1 || aggregate.size() <= 1) {
        throw InvalidArgument("emit_plot_data: no results in '" + dir.string() + "'");
    }
    const auto plots = dir / "plots";
    std::filesystem::create_directories(plots);
    PlotSummary summary;

    std::vector<std::string> method_order;
    std::map<std::string, std::vector<PredictionRecord>> by_method;
    for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.size() != 7) {
            throw FormatError("records.tsv: malformed line " + std::to_string(i + 1));
        }
        if (!by_method.count(r[1])) {
            method_order.push_back(r[1]);
            by_method[r[1]];
        }
        if (r[6] != "scored") {
            continue;
        }
        by_method[r[1]].push_back(
            {std::stoul(r[3]), std::stoul(r[4]), std::strtod(r[5].c_str(), nullptr)});
    }
    for (const auto& m : method_order) {
        std::string tsv = "bin\tbin_center\taccuracy\tconfidence\tcount\n";
        if (!by_method[m].empty()) {
            for (const auto& b : ece(by_method[m], n_bins).bins) {
                tsv += std::to_string(b.bin_index) + "\t" + detail::fmt_real(0.5 * (b.lower + b.upper)) + "\t" +
                       detail::fmt_real(b.accuracy) + "\t" + detail::fmt_real(b.confidence) + "\t" +
                       std::to_string(b.count) + "\n";
                ++summary.reliability_rows;
            }
        }
        detail::write_text(plots / ("reliability_" + m + ".tsv"), tsv);
    }

    std::string scatter = "method\tseed\tmean_atfd\tece\n";
    for (std::size_t i = 1; i < aggregate.size(); ++i) {
        const auto& a = aggregate[i];
        scatter += a[0] + "\t" + a[2] + "\t" + a[8] + "\t" + a[7] + "\n";
        ++summary.scatter_rows;
    }
    detail::write_text(plots / "dispersion_scatter.tsv", scatter);

    std::vector<std::string> class_names;
    if (std::filesystem::exists(dir / "aggregate.json")) {
        const auto agg = nlohmann::json::parse(detail::read_text(dir / "aggregate.json"));
        class_names = agg.value("class_names", std::vector<std::string>{});
    }
    if (std::filesystem::exists(dir / "snapshots.json")) {
        const auto snaps = nlohmann::json::parse(detail::read_text(dir / "snapshots.json"));
        std::set<std::string> done;
        for (const auto& s : snaps) {
            const auto method = s.at("method").get<std::string>();
            if (!done.insert(method).second) {
                continue;
            }
            std::vector<EmbeddingVector> emb;
            std::vector<std::size_t> cls, attr;
            for (const auto& p : s.at("points")) {
                emb.emplace_back(p.at("embedding").get<Vector>());
                cls.push_back(p.at("class").get<std::size_t>());
                attr.push_back(p.at("attribute").get<std::size_t>());
            }
            std::string tsv = "class\tclass_name\tattribute\tx\ty\n";
            if (emb.size() >= 2 && emb.front().dim() > 2) {
                const auto coords = pca_projection(emb, 2);
                for (std::size_t p = 0; p < coords.size(); ++p) {
                    const std::string name = cls[p] < class_names.size() ? class_names[cls[p]] : "";
                    tsv += std::to_string(cls[p]) + "\t" + name + "\t" + std::to_string(attr[p]) + "\t" +
                           detail::fmt_real(coords[p][0]) + "\t" + detail::fmt_real(coords[p][1]) + "\n";
                    ++summary.pca_points;
                }
            }
            detail::write_text(plots / ("pca_" + method + ".tsv"), tsv);
        }
    }
    return summary;
}

}  // namespace tca
