#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "tca/bench.hpp"
#include "tca/calibration.hpp"
#include "tca/tuner.hpp"

using namespace tca;

namespace {

class BenchFixture : public ::testing::Test {
protected:
    void SetUp() override { catalog = load_catalog((tca::test::data_dir() / "catalog_demo.json").string()); }

    double hard_prompt_accuracy(const SyntheticSpec& spec) const {
        const auto ds = generate(spec, catalog, enc);
        const auto prompt = init_prompt("a photo of a", {}, ds.class_names, enc);
        const ClassifierConfig clf{0.01, ds.n_classes()};
        std::vector<PredictionRecord> recs;
        for (std::size_t s = 0; s < ds.size(); ++s) {
            const auto p = predict(ds.features[s], prompt, enc, clf);
            recs.push_back({p.label, ds.labels[s], p.confidence});
        }
        return accuracy(recs);
    }

    AttributeCatalog catalog;
    Encoder enc{EncoderConfig{}, 0};
};

}  // namespace

TEST_F(BenchFixture, ZeroSigmaGivesPrototypes) {
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.samples_per_class = 3;
    spec.cluster_sigma = 0.0;
    const auto ds = generate(spec, catalog, enc);
    const auto protos = class_prototypes(spec, ds.class_names, catalog, enc);
    ASSERT_EQ(ds.size(), 12u);
    for (std::size_t s = 0; s < ds.size(); ++s) {
        EXPECT_EQ(ds.features[s].vec(), protos[ds.labels[s]]);
    }
}

TEST_F(BenchFixture, PrototypeFormula) {
    SyntheticSpec spec;
    spec.n_classes = 3;
    spec.attribute_alignment = 0.3;
    const std::vector<std::string> names{"dolphin", "lotus", "ferry"};
    const auto protos = class_prototypes(spec, names, catalog, enc);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& attrs = catalog.attributes(names[i]);
        Vector am(64, 0.0);
        for (const auto& a : attrs) {
            const auto m = enc.phrase_mean(a);
            for (std::size_t c = 0; c < 64; ++c) {
                am[c] += m[c] / static_cast<double>(attrs.size());
            }
        }
        const Vector nm = enc.phrase_mean(names[i]);
        const double na = tca::test::norm_of(am);
        const double nn = tca::test::norm_of(nm);
        Vector p(64);
        for (std::size_t c = 0; c < 64; ++c) {
            p[c] = 0.7 * nm[c] / nn + 0.3 * am[c] / na;
        }
        const double np = tca::test::norm_of(p);
        for (std::size_t c = 0; c < 64; ++c) {
            EXPECT_NEAR(protos[i][c], p[c] / np, 1e-14);
        }
    }
}

TEST_F(BenchFixture, ZeroAlignmentIndependentOfAttributes) {
    Encoder big(EncoderConfig{2048, 32, 0, false}, 0);
    SyntheticSpec spec;
    spec.n_classes = 12;
    spec.d_raw = 2048;
    spec.attribute_alignment = 0.0;
    const auto protos = class_prototypes(spec, [&] {
        std::vector<std::string> n;
        for (const auto& e : catalog.entries()) {
            n.push_back(e.first);
        }
        return n;
    }(), catalog, big);
    double mean_abs = 0.0;
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        Vector am(2048, 0.0);
        for (const auto& a : catalog.entries()[i].second) {
            const auto m = big.phrase_mean(a);
            for (std::size_t c = 0; c < am.size(); ++c) {
                am[c] += m[c];
            }
        }
        mean_abs += std::abs(cosine_similarity(protos[i], am)) / static_cast<double>(catalog.size());
    }
    // Independent unit vectors in 2048-d have |cos| of order 1/sqrt(2048) ~ 0.02.
    EXPECT_LT(mean_abs, 0.06);
}

TEST_F(BenchFixture, DeterministicAndSeeded) {
    SyntheticSpec spec;
    spec.n_classes = 5;
    spec.samples_per_class = 6;
    spec.seed = 3;
    EXPECT_EQ(generate(spec, catalog, enc), generate(spec, catalog, enc));
    auto other = spec;
    other.seed = 4;
    EXPECT_NE(generate(spec, catalog, enc).features, generate(other, catalog, enc).features);
    for (const auto& f : generate(spec, catalog, enc).features) {
        EXPECT_NEAR(f.norm(), 1.0, 1e-12);
    }
}

TEST_F(BenchFixture, Errors) {
    SyntheticSpec spec;
    spec.n_classes = 2;
    spec.class_names = {"red panda", "unicorn"};
    EXPECT_THROW(generate(spec, catalog, enc), MissingClass);
    spec.class_names.clear();
    spec.n_classes = 1;
    EXPECT_THROW(generate(spec, catalog, enc), InvalidArgument);
    spec.n_classes = 50;
    EXPECT_THROW(generate(spec, catalog, enc), InvalidArgument);
    spec.n_classes = 3;
    spec.d_raw = 32;
    EXPECT_THROW(generate(spec, catalog, enc), InvalidArgument);
}

TEST_F(BenchFixture, SeparabilityKnob) {
    // Nearest-prototype accuracy measures cluster overlap independent of the text side.
    std::vector<double> acc;
    for (double sigma : {0.05, 0.5, 1.0, 2.0, 4.0}) {
        std::size_t hits = 0;
        std::size_t total = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            SyntheticSpec spec;
            spec.cluster_sigma = sigma;
            spec.seed = seed;
            spec.samples_per_class = 20;
            const auto ds = generate(spec, catalog, enc);
            const auto protos = class_prototypes(spec, ds.class_names, catalog, enc);
            for (std::size_t s = 0; s < ds.size(); ++s) {
                std::size_t best = 0;
                double best_dot = -2.0;
                for (std::size_t k = 0; k < protos.size(); ++k) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < protos[k].size(); ++c) {
                        dot += protos[k][c] * ds.features[s][c];
                    }
                    if (dot > best_dot) {
                        best_dot = dot;
                        best = k;
                    }
                }
                hits += best == ds.labels[s];
                ++total;
            }
        }
        acc.push_back(static_cast<double>(hits) / static_cast<double>(total));
    }
    EXPECT_EQ(acc.front(), 1.0);
    for (std::size_t i = 1; i < acc.size(); ++i) {
        EXPECT_LE(acc[i], acc[i - 1]) << "sigma index " << i;
    }
    EXPECT_LT(acc.back(), acc.front());
}

TEST_F(BenchFixture, ShiftsDoNotHelp) {
    const std::vector<Shift> shifts{NoiseShift{}, RotationShift{}, SketchShift{}};
    double base = 0.0;
    std::vector<double> shifted(shifts.size(), 0.0);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SyntheticSpec spec;
        spec.seed = seed;
        spec.samples_per_class = 20;
        base += hard_prompt_accuracy(spec);
        for (std::size_t k = 0; k < shifts.size(); ++k) {
            spec.shift = shifts[k];
            shifted[k] += hard_prompt_accuracy(spec);
        }
    }
    for (std::size_t k = 0; k < shifts.size(); ++k) {
        EXPECT_LE(shifted[k], base) << "shift " << k;
    }
}

namespace {

FeatureBundle small_bundle(bool with_text) {
    FeatureBundle b;
    b.d_embed = 4;
    b.class_names = {"cat", "dög", "red panda"};
    for (int s = 0; s < 10; ++s) {
        for (int c = 0; c < 4; ++c) {
            b.image_features.push_back(0.25f * static_cast<float>(s) - 0.1f * static_cast<float>(c));
        }
        b.true_labels.push_back(static_cast<std::uint32_t>(s % 3));
    }
    if (with_text) {
        b.text_features = std::vector<float>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
    }
    return b;
}

}  // namespace

TEST(Bundle, RoundTripThroughFile) {
    const auto dir = tca::test::scratch_dir("bundle");
    for (bool text : {false, true}) {
        const auto b = small_bundle(text);
        const auto path = (dir / "b.tcab").string();
        write_bundle(b, path);
        const auto r = read_bundle(path);
        EXPECT_EQ(r, b);
        EXPECT_EQ(encode_bundle(r), encode_bundle(b));
    }
}

TEST(Bundle, DatasetRoundTrip) {
    const auto b = small_bundle(true);
    const auto ds = to_dataset(b);
    EXPECT_EQ(ds.size(), 10u);
    EXPECT_EQ(ds.class_text_features.size(), 3u);
    EXPECT_EQ(to_bundle(ds), b);
}

TEST(Bundle, HeaderLayout) {
    const auto bytes = encode_bundle(small_bundle(false));
    EXPECT_EQ(bytes.substr(0, 4), "TCAB");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 4u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 10u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3u);
    const std::size_t names = 3 * 4 + 3 + 4 + 9;
    EXPECT_EQ(bytes.size(), 20 + names + 10 * 4 * 4 + 10 * 4 + 1);
}

TEST(Bundle, FlippedMagic) {
    auto bytes = encode_bundle(small_bundle(false));
    bytes[0] = 'X';
    EXPECT_THROW(decode_bundle(bytes), FormatError);
    EXPECT_THROW(decode_bundle("TC"), FormatError);
}

TEST(Bundle, VersionMismatch) {
    auto bytes = encode_bundle(small_bundle(false));
    bytes[4] = 2;
    EXPECT_THROW(decode_bundle(bytes), VersionError);
}

TEST(Bundle, TruncationReportsOffset) {
    const auto bytes = encode_bundle(small_bundle(true));
    for (std::size_t cut : {6u, 30u, 80u, static_cast<unsigned>(bytes.size() - 1)}) {
        try {
            decode_bundle(bytes.substr(0, cut));
            FAIL() << "cut " << cut;
        } catch (const CorruptionError& e) {
            EXPECT_LE(e.offset(), cut);
        }
    }
    try {
        decode_bundle(bytes + "x");
        FAIL();
    } catch (const CorruptionError& e) {
        EXPECT_EQ(e.offset(), bytes.size());
    }
}

TEST(Bundle, InvalidContents) {
    auto b = small_bundle(false);
    b.true_labels[0] = 7;
    EXPECT_THROW(encode_bundle(b), FormatError);
    b = small_bundle(false);
    b.image_features.pop_back();
    EXPECT_THROW(b.validate(), FormatError);
    b = small_bundle(false);
    b.image_features[3] = NAN;
    EXPECT_THROW(b.validate(), FormatError);
}

TEST(Bundle, MissingFile) { EXPECT_THROW(read_bundle("/nonexistent/x.tcab"), FormatError); }
