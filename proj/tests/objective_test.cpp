#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "support.hpp"
#include "tca/objective.hpp"
#include "tca/prompt.hpp"

using namespace tca;
using tca::test::random_probs;
using tca::test::random_set;
using tca::test::random_unit;

namespace {

double brute_entropy(const Vector& p) {
    double h = 0.0;
    for (double x : p) {
        if (x > 0) {
            h += -x * std::log(x);
        }
    }
    return h;
}

double dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s);
}

}  // namespace

TEST(Classifier, IdenticalTextsGiveUniform) {
    std::mt19937_64 rng(1);
    const auto t = random_unit(rng, 6);
    const std::vector<EmbeddingVector> texts(4, t);
    const auto p = class_probabilities(random_unit(rng, 6), texts, {0.01, 4});
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(p[i], 0.25, 1e-15);
    }
}

TEST(Classifier, TwoClassHandArithmetic) {
    const EmbeddingVector img(Vector{1.0, 0.0}, true);
    const std::vector<EmbeddingVector> texts{EmbeddingVector(Vector{1.0, 0.0}, true),
                                             EmbeddingVector(Vector{0.0, 1.0}, true)};
    const auto p = class_probabilities(img, texts, {1.0, 2});
    EXPECT_NEAR(p[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
    EXPECT_NEAR(p[0], 0.7310586, 1e-7);
    EXPECT_NEAR(p[1], 0.2689414, 1e-7);
}

TEST(Classifier, TemperatureKeepsArgmax) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
        std::vector<EmbeddingVector> texts;
        for (int k = 0; k < 5; ++k) {
            texts.push_back(random_unit(rng, 8));
        }
        const auto img = random_unit(rng, 8);
        const auto a = class_probabilities(img, texts, {0.01, 5}).argmax();
        EXPECT_EQ(a, class_probabilities(img, texts, {0.1, 5}).argmax());
        EXPECT_EQ(a, class_probabilities(img, texts, {1.0, 5}).argmax());
    }
}

TEST(Classifier, Errors) {
    std::mt19937_64 rng(3);
    const auto u = random_unit(rng, 4);
    EXPECT_THROW(class_probabilities(u, std::vector<EmbeddingVector>{u}, {0.01, 1}), InvalidArgument);
    EXPECT_THROW(class_probabilities(u, std::vector<EmbeddingVector>{u, u}, {0.0, 2}), InvalidArgument);
}

TEST(Softmax, NormalizedAndStable) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 300.0);
    for (int t = 0; t < 200; ++t) {
        Vector z(7);
        for (double& x : z) {
            x = n(rng);
        }
        const auto p = softmax(z);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        EXPECT_TRUE(all_finite(p));
    }
}

TEST(ProbVectorType, Invariants) {
    EXPECT_THROW(ProbVector(Vector{0.5, 0.6}), InvalidArgument);
    EXPECT_THROW(ProbVector(Vector{-0.1, 1.1}), InvalidArgument);
    EXPECT_THROW(ProbVector(Vector{}), InvalidArgument);
    EXPECT_EQ(ProbVector(Vector{0.4, 0.4, 0.2}).argmax(), 0u);
}

TEST(Entropy, Examples) {
    EXPECT_EQ(entropy(ProbVector(Vector{0.0, 1.0, 0.0})), 0.0);
    EXPECT_NEAR(entropy(ProbVector(Vector(4, 0.25))), 1.3862944, 1e-7);
    EXPECT_NEAR(entropy(ProbVector(Vector{0.5, 0.25, 0.25})), 1.5 * std::log(2.0), 1e-15);
    EXPECT_NEAR(entropy(ProbVector(Vector{0.5, 0.25, 0.25})), 1.0397208, 1e-7);
}

TEST(Entropy, Bounds) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
        const auto p = random_probs(rng, 6);
        const double h = entropy(p);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(6.0) + 1e-12);
    }
}

TEST(ConfidenceFilter, Examples) {
    std::mt19937_64 rng(6);
    std::vector<ProbVector> views;
    for (int i = 0; i < 10; ++i) {
        views.push_back(random_probs(rng, 4));
    }
    const auto all = confidence_filter(views, 1.0);
    EXPECT_EQ(all.size(), 10u);
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(sorted[i], i);
    }

    views[6] = ProbVector(Vector{0.97, 0.01, 0.01, 0.01});
    EXPECT_EQ(confidence_filter(views, 0.1), std::vector<std::size_t>{6});
}

TEST(ConfidenceFilter, MatchesSortOracle) {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 20; ++t) {
        std::vector<ProbVector> views;
        std::vector<std::pair<double, std::size_t>> oracle;
        for (std::size_t i = 0; i < 8; ++i) {
            views.push_back(random_probs(rng, 5));
            oracle.emplace_back(brute_entropy(Vector(views.back().values().begin(), views.back().values().end())), i);
        }
        std::sort(oracle.begin(), oracle.end());
        const auto got = confidence_filter(views, 0.25);
        ASSERT_EQ(got.size(), 2u);
        EXPECT_EQ(got[0], oracle[0].second);
        EXPECT_EQ(got[1], oracle[1].second);
    }
}

TEST(ConfidenceFilter, TiesGoToLowerIndex) {
    const std::vector<ProbVector> views(5, ProbVector(Vector{0.5, 0.5}));
    EXPECT_EQ(confidence_filter(views, 0.4), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(confidence_filter(views, 1e-9).size(), 1u);
    EXPECT_THROW(confidence_filter(views, 0.0), InvalidArgument);
    EXPECT_THROW(confidence_filter({}, 0.5), InvalidArgument);
}

TEST(TptLoss, Examples) {
    const std::vector<ProbVector> one_hot{ProbVector(Vector{1.0, 0.0})};
    EXPECT_EQ(tpt_loss(one_hot, std::vector<std::size_t>{0}), 0.0);
    const std::vector<ProbVector> two{ProbVector(Vector{1.0, 0.0}), ProbVector(Vector{0.0, 1.0})};
    EXPECT_NEAR(tpt_loss(two, std::vector<std::size_t>{0, 1}), std::log(2.0), 1e-15);
    EXPECT_THROW(tpt_loss(two, std::vector<std::size_t>{}), InvalidArgument);
    EXPECT_THROW(tpt_loss(two, std::vector<std::size_t>{2}), InvalidArgument);
}

TEST(TptLoss, MatchesAverageThenEntropyOracle) {
    std::mt19937_64 rng(8);
    std::vector<ProbVector> views;
    for (int i = 0; i < 5; ++i) {
        views.push_back(random_probs(rng, 4));
    }
    const std::vector<std::size_t> keep{0, 2, 4};
    Vector mean(4, 0.0);
    for (auto v : keep) {
        for (std::size_t k = 0; k < 4; ++k) {
            mean[k] += views[v][k] / 3.0;
        }
    }
    EXPECT_NEAR(tpt_loss(views, keep), brute_entropy(mean), 1e-14);
}

TEST(Mtas, Examples) {
    std::mt19937_64 rng(9);
    const auto u = random_unit(rng, 5);
    const auto v = random_unit(rng, 5);
    const ClassTextSet single({{u}, {v}});
    EXPECT_EQ(mtas(single, 0), 0.0);
    EXPECT_EQ(intra_class_loss(single), 0.0);

    const ClassTextSet pair({{u, v}, {u}});
    EXPECT_NEAR(mtas(pair, 0), dist(u.values(), v.values()) / 2.0, 1e-15);
}

TEST(Mtas, MatchesBruteForce) {
    std::mt19937_64 rng(10);
    const auto set = random_set(rng, 3, 4, 6);
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        Vector mean(6, 0.0);
        for (const auto& e : set.members(i)) {
            for (std::size_t c = 0; c < 6; ++c) {
                mean[c] += e[c] / 4.0;
            }
        }
        double s = 0.0;
        for (const auto& e : set.members(i)) {
            s += dist(e.values(), mean);
        }
        EXPECT_NEAR(mtas(set, i), s / 4.0, 1e-14);
        total += s / 4.0;
    }
    EXPECT_NEAR(intra_class_loss(set), total / 3.0, 1e-14);
}

TEST(IntraClass, ArithmeticMean) {
    // Class 0: points at distance 0.2 from their mean; class 1: 0.4.
    const ClassTextSet set({{EmbeddingVector(Vector{0.2, 0.0}), EmbeddingVector(Vector{-0.2, 0.0})},
                            {EmbeddingVector(Vector{0.0, 0.4}), EmbeddingVector(Vector{0.0, -0.4})}});
    EXPECT_NEAR(mtas(set, 0), 0.2, 1e-15);
    EXPECT_NEAR(mtas(set, 1), 0.4, 1e-15);
    EXPECT_NEAR(intra_class_loss(set), 0.3, 1e-15);
}

TEST(Atfd, Examples) {
    std::mt19937_64 rng(11);
    const auto u = random_unit(rng, 5);
    const ClassTextSet same({{u}, {u}, {u}});
    EXPECT_NEAR(atfd(same), 0.0, 1e-15);

    Vector neg(u.values().begin(), u.values().end());
    for (double& x : neg) {
        x = -x;
    }
    const ClassTextSet sym({{u}, {EmbeddingVector(neg)}});
    EXPECT_NEAR(atfd(sym), u.norm(), 1e-15);
    EXPECT_NEAR(inter_class_loss(sym), -u.norm(), 1e-15);
    EXPECT_THROW(atfd(ClassTextSet({{u}})), InvalidArgument);
}

TEST(Atfd, BruteForceAndScaling) {
    std::mt19937_64 rng(12);
    const auto set = random_set(rng, 5, 1, 7);
    Vector grand(7, 0.0);
    for (const auto& m : set.class_means()) {
        for (std::size_t c = 0; c < 7; ++c) {
            grand[c] += m[c] / 5.0;
        }
    }
    double s = 0.0;
    for (const auto& m : set.class_means()) {
        s += dist(m, grand);
    }
    EXPECT_NEAR(atfd(set), s / 5.0, 1e-14);

    for (double lambda : {0.5, 2.0, 10.0}) {
        std::vector<std::vector<EmbeddingVector>> scaled_members;
        for (const auto& m : set.class_means()) {
            Vector x(7);
            for (std::size_t c = 0; c < 7; ++c) {
                x[c] = grand[c] + lambda * (m[c] - grand[c]);
            }
            scaled_members.push_back({EmbeddingVector(x)});
        }
        EXPECT_NEAR(atfd(ClassTextSet(scaled_members)), lambda * atfd(set), 1e-9);
    }
}

TEST(Dispersion, Nonnegative) {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 20; ++t) {
        const auto set = random_set(rng, 4, 3, 5);
        EXPECT_GE(atfd(set), 0.0);
        EXPECT_GE(intra_class_loss(set), 0.0);
    }
}

TEST(TotalLoss, ZeroWeightsIsTpt) {
    std::mt19937_64 rng(14);
    std::vector<ProbVector> views{random_probs(rng, 3), random_probs(rng, 3)};
    const std::vector<std::size_t> keep{0, 1};
    const auto set = random_set(rng, 3, 2, 4);
    const auto l = total_loss(views, keep, set, {0.0, 0.0});
    EXPECT_EQ(l.l_total, l.l_tpt);
}

TEST(TotalLoss, WeightedCombination) {
    // (l_tpt, atfd, intra) = (1.0, 0.2, 0.05) with (alpha, beta) = (10, 35).
    const double total = 1.0 + 10.0 * (-0.2) + 35.0 * 0.05;
    EXPECT_NEAR(total, 0.75, 1e-15);

    std::mt19937_64 rng(15);
    std::vector<ProbVector> views{random_probs(rng, 3), random_probs(rng, 3), random_probs(rng, 3)};
    const std::vector<std::size_t> keep{1, 2};
    const auto set = random_set(rng, 3, 2, 4);
    const auto l = total_loss(views, keep, set, {10.0, 35.0});
    EXPECT_NEAR(l.l_total, l.l_tpt + 10.0 * l.l_inter + 35.0 * l.l_intra, 1e-9);
    EXPECT_NEAR(l.l_inter, -atfd(set), 1e-15);
    EXPECT_THROW(total_loss(views, keep, set, {-1.0, 0.0}), InvalidArgument);
    EXPECT_THROW(total_loss(views, keep, set, {NAN, 0.0}), InvalidArgument);
}

namespace {

struct GradFixture {
    Encoder enc;
    PromptState prompt;
    std::vector<EmbeddingVector> views;
};

GradFixture make_grad_fixture(std::uint64_t seed, std::size_t k, std::size_t m, std::size_t d_embed) {
    EncoderConfig cfg{12, d_embed, seed, false};
    GradFixture f{Encoder(cfg, seed), {}, {}};
    std::vector<std::string> names;
    std::vector<RankedAttributes> ranked;
    for (std::size_t i = 0; i < k; ++i) {
        names.push_back("class" + std::to_string(i));
        RankedAttributes r;
        r.class_name = names.back();
        for (std::size_t j = 0; j < m; ++j) {
            r.selected.push_back("attr" + std::to_string(i) + "x" + std::to_string(j) + " shared");
        }
        ranked.push_back(r);
    }
    f.prompt = init_prompt("a photo of a", ranked, names, f.enc);
    std::mt19937_64 rng(seed);
    for (int v = 0; v < 6; ++v) {
        f.views.push_back(random_unit(rng, d_embed));
    }
    return f;
}

}  // namespace

TEST(Gradient, MatchesFiniteDifferences) {
    const ClassifierConfig clf{0.5, 0};
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto f = make_grad_fixture(seed, 3, 2, 8);
        const LossWeights w{10.0, 35.0};
        const auto l = evaluate_objective(f.prompt, f.views, f.enc, clf, w, 0.5);
        const auto params = f.prompt.prefix_parameters();
        const double h = 1e-6;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params;
            p[i] += h;
            PromptState a = f.prompt;
            a.set_prefix_parameters(p);
            p[i] -= 2 * h;
            PromptState b = f.prompt;
            b.set_prefix_parameters(p);
            const double fd = (evaluate_objective(a, f.views, f.enc, clf, w, 0.5, l.retained_view_indices).l_total -
                               evaluate_objective(b, f.views, f.enc, clf, w, 0.5, l.retained_view_indices).l_total) /
                              (2 * h);
            const double an = l.grad_prompt[i];
            EXPECT_LE(std::abs(fd - an), 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-4})) << i;
        }
    }
}

TEST(Gradient, FrozenEntriesExactlyZeroAndPrefixShared) {
    auto f = make_grad_fixture(4, 3, 2, 8);
    const auto l = evaluate_objective(f.prompt, f.views, f.enc, {0.01, 0}, {10.0, 35.0}, 0.5);
    const std::size_t d = f.prompt.d_tok();
    ASSERT_EQ(l.grad_prompt.size(), f.prompt.token_count() * d);
    ASSERT_EQ(l.n_prefix_values, f.prompt.prefix.size() * d);
    for (std::size_t i = l.n_prefix_values; i < l.grad_prompt.size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(l.grad_prompt[i]), 0u);
    }
    for (std::size_t t = 1; t < f.prompt.prefix.size(); ++t) {
        for (std::size_t c = 0; c < d; ++c) {
            EXPECT_EQ(l.grad_prompt[t * d + c], l.grad_prompt[c]);
        }
    }
    EXPECT_TRUE(all_finite(l.grad_prompt));
}

TEST(Gradient, BreakdownConsistent) {
    auto f = make_grad_fixture(5, 4, 3, 8);
    const LossWeights w{10.0, 35.0};
    const auto l = evaluate_objective(f.prompt, f.views, f.enc, {0.01, 0}, w, 0.25);
    EXPECT_NEAR(l.l_total, l.l_tpt + w.alpha * l.l_inter + w.beta * l.l_intra, 1e-9);
    EXPECT_GE(l.l_tpt, 0.0);
    EXPECT_LE(l.l_tpt, std::log(4.0) + 1e-12);
    EXPECT_EQ(l.retained_view_indices.size(), 2u);
}

TEST(Gradient, SubgradientZeroAtCoincidence) {
    // M = 1: every text coincides with its class mean, so the intra term
    // contributes nothing and its weight must not change the gradient.
    auto f = make_grad_fixture(6, 3, 1, 8);
    const auto a = evaluate_objective(f.prompt, f.views, f.enc, {0.01, 0}, {10.0, 0.0}, 0.5);
    const auto b = evaluate_objective(f.prompt, f.views, f.enc, {0.01, 0}, {10.0, 35.0}, 0.5);
    EXPECT_EQ(b.l_intra, 0.0);
    EXPECT_EQ(a.grad_prompt, b.grad_prompt);
}
