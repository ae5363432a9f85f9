#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "tca/attributes.hpp"
#include "tca/embedding.hpp"
#include "tca/encoder.hpp"
#include "tca/errors.hpp"
#include "tca/rng.hpp"

namespace tca {

// Distribution-shift variants applied after sampling. They are qualitative
// analogues of natural shifts: extra noise, a rotated feature basis, and
// sign flips on a subset of coordinates.
struct NoShift {
    bool operator==(const NoShift&) const = default;
};
struct NoiseShift {
    double sigma = 0.3;
    bool operator==(const NoiseShift&) const = default;
};
struct RotationShift {
    // Max |angle| (radians) of each random Givens rotation.
    double angle_budget = 0.3;
    bool operator==(const RotationShift&) const = default;
};
struct SketchShift {
    double flip_fraction = 0.1;
    bool operator==(const SketchShift&) const = default;
};
using Shift = std::variant<NoShift, NoiseShift, RotationShift, SketchShift>;

struct SyntheticSpec {
    std::size_t n_classes = 10;
    std::size_t samples_per_class = 50;
    std::size_t d_raw = 64;
    // Expected norm of the per-sample Gaussian offset from the prototype.
    double cluster_sigma = 0.35;
    Shift shift = NoShift{};
    std::uint64_t seed = 0;
    double attribute_alignment = 0.6;
    // Classes to draw from the catalog; empty means its first n_classes.
    std::vector<std::string> class_names;

    void validate() const {
        if (n_classes < 2 || samples_per_class < 1 || d_raw < 2) {
            throw InvalidArgument("SyntheticSpec: need n_classes >= 2, samples_per_class >= 1, d_raw >= 2");
        }
        if (!(cluster_sigma >= 0.0) || !(attribute_alignment >= 0.0 && attribute_alignment <= 1.0)) {
            throw InvalidArgument("SyntheticSpec: need cluster_sigma >= 0 and attribute_alignment in [0, 1]");
        }
        if (!class_names.empty() && class_names.size() != n_classes) {
            throw InvalidArgument("SyntheticSpec: class_names must list exactly n_classes names");
        }
    }
};

struct Dataset {
    std::vector<std::string> class_names;
    std::vector<EmbeddingVector> features;
    std::vector<std::size_t> labels;
    // One vector per class when the source supplies precomputed text features.
    std::vector<EmbeddingVector> class_text_features;

    std::size_t size() const noexcept { return features.size(); }
    std::size_t n_classes() const noexcept { return class_names.size(); }

    bool operator==(const Dataset&) const = default;
};

namespace detail {

inline Vector gaussian_vector(CounterRng& rng, std::size_t d, double expected_norm) {
    const double per_coord = expected_norm / std::sqrt(static_cast<double>(d));
    Vector v(d);
    for (double& x : v) {
        x = per_coord * rng.gaussian();
    }
    return v;
}

inline Vector unit_vector(Vector v) { return EmbeddingVector::unit(std::move(v)).vec(); }

}  // namespace detail

/// Class prototypes: normalize((1 - a) * name_dir + a * attr_dir), where
/// name_dir is the class name's token-space direction and attr_dir the
/// normalized mean of the class's attribute phrase embeddings.
inline std::vector<Vector> class_prototypes(const SyntheticSpec& spec, const std::vector<std::string>& names,
                                            const AttributeCatalog& catalog, const Encoder& encoder) {
    std::vector<Vector> protos;
    const double a = spec.attribute_alignment;
    for (const auto& name : names) {
        const auto& attrs = catalog.attributes(name);
        Vector attr_mean(spec.d_raw, 0.0);
        for (const auto& attr : attrs) {
            axpy(1.0 / static_cast<double>(attrs.size()), encoder.phrase_mean(attr), attr_mean);
        }
        const Vector name_dir = detail::unit_vector(encoder.phrase_mean(name));
        const Vector attr_dir = detail::unit_vector(std::move(attr_mean));
        Vector p(spec.d_raw);
        for (std::size_t c = 0; c < p.size(); ++c) {
            p[c] = (1.0 - a) * name_dir[c] + a * attr_dir[c];
        }
        protos.push_back(detail::unit_vector(std::move(p)));
    }
    return protos;
}

inline Dataset generate(const SyntheticSpec& spec, const AttributeCatalog& catalog, const Encoder& encoder) {
    spec.validate();
    if (spec.d_raw != encoder.config().d_tok) {
        throw InvalidArgument("generate: d_raw must equal the encoder's d_tok");
    }
    Dataset ds;
    if (spec.class_names.empty()) {
        if (catalog.size() < spec.n_classes) {
            throw InvalidArgument("generate: catalog has fewer than n_classes classes");
        }
        for (std::size_t i = 0; i < spec.n_classes; ++i) {
            ds.class_names.push_back(catalog.entries()[i].first);
        }
    } else {
        for (const auto& n : spec.class_names) {
            if (!catalog.contains(n)) {
                throw MissingClass(n);
            }
        }
        ds.class_names = spec.class_names;
    }
    const auto protos = class_prototypes(spec, ds.class_names, catalog, encoder);
    const std::size_t d = spec.d_raw;

    // Shift state shared by every sample.
    std::vector<std::pair<std::size_t, std::size_t>> givens_axes;
    std::vector<double> givens_angles;
    std::vector<bool> flip(d, false);
    CounterRng shift_rng(combine_seeds(spec.seed, 0x7368696674ULL));
    if (const auto* rot = std::get_if<RotationShift>(&spec.shift)) {
        for (std::size_t r = 0; r < d; ++r) {
            const std::size_t p = shift_rng.below(d);
            std::size_t q = shift_rng.below(d - 1);
            q += q >= p ? 1 : 0;
            givens_axes.emplace_back(p, q);
            givens_angles.push_back(rot->angle_budget * (2.0 * shift_rng.uniform() - 1.0));
        }
    } else if (const auto* sk = std::get_if<SketchShift>(&spec.shift)) {
        for (std::size_t c = 0; c < d; ++c) {
            flip[c] = shift_rng.uniform() <= sk->flip_fraction;
        }
    }

    for (std::size_t i = 0; i < spec.n_classes; ++i) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            CounterRng rng(combine_seeds(spec.seed, i * spec.samples_per_class + s));
            Vector x = protos[i];
            if (spec.cluster_sigma > 0.0) {
                axpy(1.0, detail::gaussian_vector(rng, d, spec.cluster_sigma), x);
            }
            if (const auto* ns = std::get_if<NoiseShift>(&spec.shift)) {
                axpy(1.0, detail::gaussian_vector(rng, d, ns->sigma), x);
            }
            for (std::size_t r = 0; r < givens_axes.size(); ++r) {
                const auto [p, q] = givens_axes[r];
                const double c = std::cos(givens_angles[r]);
                const double sn = std::sin(givens_angles[r]);
                const double xp = x[p];
                const double xq = x[q];
                x[p] = c * xp - sn * xq;
                x[q] = sn * xp + c * xq;
            }
            for (std::size_t c = 0; c < d; ++c) {
                if (flip[c]) {
                    x[c] = -x[c];
                }
            }
            ds.features.push_back(spec.cluster_sigma > 0.0 || !std::holds_alternative<NoShift>(spec.shift)
                                      ? EmbeddingVector::unit(std::move(x))
                                      : EmbeddingVector(std::move(x), true));
            ds.labels.push_back(i);
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Feature bundle: binary carrier for precomputed encoder features.
//
//   offset  field
//   0       magic "TCAB"
//   4       u32 version (= 1)
//   8       u32 d_embed
//   12      u32 n_samples
//   16      u32 n_classes
//   20      n_classes x (u32 byte length, UTF-8 bytes) class names
//   ...     n_samples x d_embed f32 image features, row-major
//   ...     n_samples x u32 labels
//   ...     u8 has_text_features
//   ...     [n_classes x d_embed f32 text features]
//
// All integers and floats little-endian.

struct FeatureBundle {
    static constexpr char kMagic[4] = {'T', 'C', 'A', 'B'};
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::uint32_t d_embed = 0;
    std::vector<std::string> class_names;
    std::vector<float> image_features;
    std::vector<std::uint32_t> true_labels;
    std::optional<std::vector<float>> text_features;

    std::size_t n_samples() const noexcept { return true_labels.size(); }
    std::size_t n_classes() const noexcept { return class_names.size(); }

    void validate() const {
        if (d_embed == 0) {
            throw FormatError("bundle: d_embed must be positive");
        }
        if (image_features.size() != n_samples() * d_embed) {
            throw FormatError("bundle: image feature count does not match n_samples x d_embed");
        }
        if (text_features && text_features->size() != n_classes() * d_embed) {
            throw FormatError("bundle: text feature count does not match n_classes x d_embed");
        }
        for (float f : image_features) {
            if (!std::isfinite(f)) {
                throw FormatError("bundle: non-finite image feature");
            }
        }
        if (text_features) {
            for (float f : *text_features) {
                if (!std::isfinite(f)) {
                    throw FormatError("bundle: non-finite text feature");
                }
            }
        }
        for (auto l : true_labels) {
            if (l >= n_classes()) {
                throw FormatError("bundle: label out of range");
            }
        }
    }

    bool operator==(const FeatureBundle&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
public:
    explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw CorruptionError(std::string("bundle truncated while reading ") + what, pos_);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_bundle(const FeatureBundle& b) {
    b.validate();
    std::string out(FeatureBundle::kMagic, 4);
    detail::put_u32(out, b.version);
    detail::put_u32(out, b.d_embed);
    detail::put_u32(out, static_cast<std::uint32_t>(b.n_samples()));
    detail::put_u32(out, static_cast<std::uint32_t>(b.n_classes()));
    for (const auto& name : b.class_names) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
    }
    for (float f : b.image_features) {
        detail::put_f32(out, f);
    }
    for (auto l : b.true_labels) {
        detail::put_u32(out, l);
    }
    out.push_back(b.text_features ? '\1' : '\0');
    if (b.text_features) {
        for (float f : *b.text_features) {
            detail::put_f32(out, f);
        }
    }
    return out;
}

inline FeatureBundle decode_bundle(const std::string& bytes) {
    detail::ByteReader rd(bytes);
    if (bytes.size() < 4 || bytes.compare(0, 4, FeatureBundle::kMagic, 4) != 0) {
        throw FormatError("bundle: bad magic tag");
    }
    rd.str(4, "magic");
    FeatureBundle b;
    b.version = rd.u32("version");
    if (b.version != FeatureBundle::kVersion) {
        throw VersionError("bundle: unsupported version " + std::to_string(b.version));
    }
    b.d_embed = rd.u32("d_embed");
    const std::uint32_t n = rd.u32("n_samples");
    const std::uint32_t k = rd.u32("n_classes");
    for (std::uint32_t i = 0; i < k; ++i) {
        const std::uint32_t len = rd.u32("class name length");
        b.class_names.push_back(rd.str(len, "class name"));
    }
    const std::size_t n_feat = static_cast<std::size_t>(n) * b.d_embed;
    rd.need(n_feat * 4, "image features");
    b.image_features.resize(n_feat);
    for (float& f : b.image_features) {
        f = rd.f32("image features");
    }
    rd.need(static_cast<std::size_t>(n) * 4, "labels");
    b.true_labels.resize(n);
    for (auto& l : b.true_labels) {
        l = rd.u32("labels");
    }
    const std::uint8_t has_text = rd.u8("text feature flag");
    if (has_text > 1) {
        throw CorruptionError("bundle: invalid text feature flag", rd.pos() - 1);
    }
    if (has_text) {
        const std::size_t n_text = static_cast<std::size_t>(k) * b.d_embed;
        rd.need(n_text * 4, "text features");
        std::vector<float> text(n_text);
        for (float& f : text) {
            f = rd.f32("text features");
        }
        b.text_features = std::move(text);
    }
    if (rd.remaining() != 0) {
        throw CorruptionError("bundle: trailing bytes", rd.pos());
    }
    b.validate();
    return b;
}

inline void write_bundle(const FeatureBundle& bundle, const std::string& path) {
    const std::string bytes = encode_bundle(bundle);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("bundle: cannot open '" + path + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("bundle: write failed for '" + path + "'");
    }
}

inline FeatureBundle read_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("bundle: cannot open '" + path + "'");
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_bundle(bytes);
}

/// Narrows features to f32.
inline FeatureBundle to_bundle(const Dataset& ds) {
    FeatureBundle b;
    b.class_names = ds.class_names;
    b.d_embed = ds.features.empty() ? 0 : static_cast<std::uint32_t>(ds.features.front().dim());
    for (std::size_t s = 0; s < ds.size(); ++s) {
        if (ds.features[s].dim() != b.d_embed) {
            throw InvalidArgument("to_bundle: ragged features");
        }
        for (double x : ds.features[s].values()) {
            b.image_features.push_back(static_cast<float>(x));
        }
        b.true_labels.push_back(static_cast<std::uint32_t>(ds.labels.at(s)));
    }
    if (!ds.class_text_features.empty()) {
        std::vector<float> text;
        for (const auto& t : ds.class_text_features) {
            for (double x : t.values()) {
                text.push_back(static_cast<float>(x));
            }
        }
        b.text_features = std::move(text);
    }
    b.validate();
    return b;
}

inline Dataset to_dataset(const FeatureBundle& b) {
    b.validate();
    Dataset ds;
    ds.class_names = b.class_names;
    const std::size_t d = b.d_embed;
    for (std::size_t s = 0; s < b.n_samples(); ++s) {
        ds.features.emplace_back(Vector(b.image_features.begin() + static_cast<long>(s * d),
                                        b.image_features.begin() + static_cast<long>((s + 1) * d)));
        ds.labels.push_back(b.true_labels[s]);
    }
    if (b.text_features) {
        for (std::size_t k = 0; k < b.n_classes(); ++k) {
            ds.class_text_features.emplace_back(Vector(b.text_features->begin() + static_cast<long>(k * d),
                                                       b.text_features->begin() + static_cast<long>((k + 1) * d)));
        }
    }
    return ds;
}

}  // namespace tca
