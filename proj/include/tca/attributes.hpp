#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tca/encoder.hpp"
#include "tca/errors.hpp"

namespace tca {

/// Per-class visual attribute lists, in file order.
class AttributeCatalog {
public:
    using Entry = std::pair<std::string, std::vector<std::string>>;

    AttributeCatalog() = default;

    explicit AttributeCatalog(std::vector<Entry> entries) : entries_(std::move(entries)) {
        std::set<std::string> seen;
        for (const auto& [name, attrs] : entries_) {
            if (name.empty()) {
                throw SchemaError("catalog: empty class name");
            }
            if (!seen.insert(name).second) {
                throw SchemaError("catalog: duplicate class '" + name + "'");
            }
            if (attrs.empty()) {
                throw SchemaError("catalog: class '" + name + "' has no attributes");
            }
            for (const auto& a : attrs) {
                if (a.empty() || split_words(a).empty()) {
                    throw SchemaError("catalog: class '" + name + "' has an empty attribute");
                }
            }
        }
    }

    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    bool contains(const std::string& class_name) const { return find(class_name) != nullptr; }

    const std::vector<std::string>& attributes(const std::string& class_name) const {
        if (const auto* attrs = find(class_name)) {
            return *attrs;
        }
        throw MissingClass(class_name);
    }

private:
    const std::vector<std::string>* find(const std::string& class_name) const {
        for (const auto& [name, attrs] : entries_) {
            if (name == class_name) {
                return &attrs;
            }
        }
        return nullptr;
    }

    std::vector<Entry> entries_;
};

namespace detail {

inline std::string line_context(const std::string& text, std::size_t byte) {
    const std::size_t end = std::min(byte, text.size());
    const std::size_t line = 1 + static_cast<std::size_t>(
                                     std::count(text.begin(), text.begin() + static_cast<long>(end), '\n'));
    return "line " + std::to_string(line);
}

}  // namespace detail

/// Parses a catalog document: one top-level object mapping class name to an
/// array of attribute strings. Any top-level member that is not such an array
/// is rejected, as are duplicate class names.
inline AttributeCatalog parse_catalog(const std::string& text) {
    using nlohmann::json;
    std::vector<std::string> keys;
    std::string duplicate;
    std::set<std::string> seen;
    json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
        if (event == json::parse_event_t::key && depth == 1) {
            const auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) {
                duplicate = key;
            }
            keys.push_back(key);
        }
        return true;
    };
    json doc;
    try {
        doc = json::parse(text, cb);
    } catch (const json::parse_error& e) {
        throw FormatError("catalog parse error at " + detail::line_context(text, e.byte) + ": " + e.what());
    }
    if (!duplicate.empty()) {
        throw SchemaError("catalog: duplicate class '" + duplicate + "'");
    }
    if (!doc.is_object()) {
        throw SchemaError("catalog: top level must be an object of class -> attribute list");
    }
    std::vector<AttributeCatalog::Entry> entries;
    for (const auto& key : keys) {
        const auto& value = doc.at(key);
        if (!value.is_array()) {
            throw SchemaError("catalog: unknown top-level key '" + key + "' (value is not an attribute list)");
        }
        std::vector<std::string> attrs;
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (!value[i].is_string()) {
                throw SchemaError("catalog: class '" + key + "' attribute " + std::to_string(i) +
                                  " is not a string");
            }
            attrs.push_back(value[i].get<std::string>());
        }
        entries.emplace_back(key, std::move(attrs));
    }
    return AttributeCatalog(std::move(entries));
}

inline AttributeCatalog load_catalog(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("catalog: cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_catalog(ss.str());
}

inline nlohmann::ordered_json catalog_to_json(const AttributeCatalog& catalog) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (const auto& [name, attrs] : catalog.entries()) {
        doc[name] = attrs;
    }
    return doc;
}

struct ScoredAttribute {
    std::string attribute;
    double score = 0.0;

    bool operator==(const ScoredAttribute&) const = default;
};

struct RankedAttributes {
    std::string class_name;
    std::vector<ScoredAttribute> ranked;
    std::vector<std::string> selected;

    bool operator==(const RankedAttributes&) const = default;
};

/// Scores each attribute by cosine similarity between the encoded class name
/// and the encoded attribute phrase, sorts descending (stable, so ties keep
/// catalog order) and keeps the first top_m.
inline RankedAttributes rank_attributes(const std::string& class_name,
                                        const std::vector<std::string>& attrs,
                                        const Encoder& encoder, std::size_t top_m) {
    if (attrs.empty()) {
        throw InvalidArgument("rank_attributes: empty attribute list for '" + class_name + "'");
    }
    if (top_m < 1) {
        throw InvalidArgument("rank_attributes: top_m must be >= 1");
    }
    const EmbeddingVector anchor = encoder.encode_text(class_name);
    RankedAttributes out;
    out.class_name = class_name;
    out.ranked.reserve(attrs.size());
    for (const auto& a : attrs) {
        out.ranked.push_back({a, cosine_similarity(anchor, encoder.encode_text(a))});
    }
    std::stable_sort(out.ranked.begin(), out.ranked.end(),
                     [](const ScoredAttribute& x, const ScoredAttribute& y) { return x.score > y.score; });
    const std::size_t keep = std::min(top_m, out.ranked.size());
    for (std::size_t i = 0; i < keep; ++i) {
        out.selected.push_back(out.ranked[i].attribute);
    }
    return out;
}

enum class AttributeSourceMode { offline_catalog, client_stub };

struct AttributeSourceConfig {
    AttributeSourceMode mode = AttributeSourceMode::offline_catalog;
    std::string catalog_path;
    std::size_t top_m = 2;
};

/// Seam where a language-model client would be plugged in.
class AttributeClient {
public:
    virtual ~AttributeClient() = default;
    virtual std::vector<std::string> fetch(const std::string& class_name) = 0;
};

class CatalogClient final : public AttributeClient {
public:
    explicit CatalogClient(AttributeCatalog catalog) : catalog_(std::move(catalog)) {}

    std::vector<std::string> fetch(const std::string& class_name) override {
        return catalog_.attributes(class_name);
    }

    const AttributeCatalog& catalog() const noexcept { return catalog_; }

private:
    AttributeCatalog catalog_;
};

/// Deterministic offline stand-in; keeps every request for inspection.
class StubClient final : public AttributeClient {
public:
    std::vector<std::string> fetch(const std::string& class_name) override {
        requests_.push_back(class_name);
        return {"distinctive shape", "characteristic color", "typical texture"};
    }

    const std::vector<std::string>& requests() const noexcept { return requests_; }

private:
    std::vector<std::string> requests_;
};

inline std::unique_ptr<AttributeClient> make_attribute_client(const AttributeSourceConfig& cfg) {
    if (cfg.top_m < 1) {
        throw InvalidArgument("AttributeSourceConfig: top_m must be >= 1");
    }
    if (cfg.mode == AttributeSourceMode::client_stub) {
        return std::make_unique<StubClient>();
    }
    return std::make_unique<CatalogClient>(load_catalog(cfg.catalog_path));
}

inline std::vector<std::string> fetch_attributes(const std::string& class_name, AttributeClient& client) {
    return client.fetch(class_name);
}

}  // namespace tca
