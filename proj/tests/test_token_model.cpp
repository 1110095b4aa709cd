#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lowent/token_model.hpp"
#include "lowent/watermark.hpp"
#include "reference.hpp"

using namespace lowent;

namespace {

std::vector<double> probs_of(const LogitProvider& m, std::vector<TokenId> prefix) {
    return softmax(m.next_logits(prefix));
}

}  // namespace

TEST(NGram, UnigramAddKHandCount) {
    // "a a a b" with a=0, b=1, k=0.5: P(a) = (3 + 0.5) / (4 + 0.5 * 2) = 0.7
    const std::vector<std::vector<TokenId>> corpus{{0, 0, 0, 1}};
    const auto m = train_ngram(corpus, 2, 1, 0.5);
    const auto p = probs_of(m, {1});
    EXPECT_NEAR(p[0], 0.7, 1e-12);
    EXPECT_NEAR(p[1], 0.3, 1e-12);
}

TEST(NGram, BigramAddKHandCount) {
    // "a b a b", n = 2: c(a, b) = 2, c(a) = 2, so P(b|a) = (2 + k) / (2 + k|V|)
    const std::vector<std::vector<TokenId>> corpus{{0, 1, 0, 1}};
    for (double k : {0.1, 1.0, 2.5}) {
        const auto m = train_ngram(corpus, 3, 2, k);
        const auto p = probs_of(m, {2, 0});
        EXPECT_NEAR(p[1], (2 + k) / (2 + 3 * k), 1e-12) << "k=" << k;
    }
}

TEST(NGram, BacksOffToUnigramForUnseenContext) {
    const std::vector<std::vector<TokenId>> corpus{{0, 1, 0, 1}};
    const auto m = train_ngram(corpus, 3, 2, 1.0);
    // token 2 never occurs as a context; unigram: c(0)=2, c(1)=2, total 4
    const auto p = probs_of(m, {2});
    EXPECT_NEAR(p[0], 3.0 / 7.0, 1e-12);
    EXPECT_NEAR(p[2], 1.0 / 7.0, 1e-12);
}

TEST(NGram, UniformCorpusGivesNearUniformUnigram) {
    std::vector<std::vector<TokenId>> corpus{{}};
    for (int rep = 0; rep < 50; ++rep)
        for (TokenId t = 0; t < 8; ++t) corpus[0].push_back(t);
    const auto m = train_ngram(corpus, 8, 1, 1.0);
    for (double p : probs_of(m, {3})) EXPECT_NEAR(p, 0.125, 1e-12);
}

TEST(NGram, EmptyCorpusIsAnInputError) {
    const std::vector<std::vector<TokenId>> none;
    EXPECT_THROW(train_ngram(none, 4, 2, 1.0), InputError);
    const std::vector<std::vector<TokenId>> empty_docs{{}, {}};
    EXPECT_THROW(train_ngram(empty_docs, 4, 2, 1.0), InputError);
}

TEST(NGram, RejectsBadPrefixes) {
    const std::vector<std::vector<TokenId>> corpus{{0, 1, 2}};
    const auto m = train_ngram(corpus, 3, 2, 1.0);
    EXPECT_THROW(m.next_logits(std::vector<TokenId>{}), InputError);
    EXPECT_THROW(m.next_logits(std::vector<TokenId>{0, 7}), InputError);
}

TEST(NGram, SoftmaxSumsToOneAndIsDeterministic) {
    RngState rng{11};
    std::vector<std::vector<TokenId>> corpus(5);
    for (auto& d : corpus)
        for (int i = 0; i < 60; ++i) d.push_back(static_cast<TokenId>(next_below(rng, 20)));
    const auto m = train_ngram(corpus, 20, 3, 0.3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<TokenId> prefix(1 + next_below(rng, 6));
        for (auto& t : prefix) t = static_cast<TokenId>(next_below(rng, 20));
        const auto p = probs_of(m, prefix);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
        EXPECT_EQ(m.next_logits(prefix), m.next_logits(prefix));
    }
}

TEST(NGram, SamplingIsReproducible) {
    const std::vector<std::vector<TokenId>> corpus{{0, 1, 2, 3, 1, 2, 0, 3, 3, 2}};
    const auto m = train_ngram(corpus, 4, 2, 0.5);
    auto run = [&](std::uint64_t seed) {
        RngState rng{seed};
        WatermarkConfig cfg;
        cfg.delta = 0.0;
        return generate(m, std::vector<TokenId>{0}, cfg, EntropyGate::always(), 50, rng).tokens.tokens;
    };
    EXPECT_EQ(run(5), run(5));
    EXPECT_NE(run(5), run(6));
}

TEST(NGram, JsonRoundTripPreservesLogits) {
    const std::vector<std::vector<TokenId>> corpus{{0, 1, 2, 1, 0, 2, 2, 1}};
    const auto m = train_ngram(corpus, 3, 3, 0.7);
    const auto loaded = model_from_json(model_to_json(m, Vocabulary::synthetic(3)));
    for (TokenId a = 0; a < 3; ++a)
        for (TokenId b = 0; b < 3; ++b) {
            const std::vector<TokenId> prefix{a, b};
            EXPECT_EQ(loaded.model->next_logits(prefix), m.next_logits(prefix));
        }
    EXPECT_EQ(loaded.vocab.size(), 3u);
}

TEST(ControlledEntropy, ZeroTargetIsOneHot) {
    const ControlledEntropyModel m(8, {{0.0, 3}});
    const auto p = probs_of(m, {0});
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], i == 3 ? 1.0 : 0.0);
}

TEST(ControlledEntropy, RealizedEntropyWithinTolerance) {
    for (std::size_t v : {2u, 5u, 64u, 1000u}) {
        const double hmax = std::log(static_cast<double>(v));
        for (int i = 0; i <= 40; ++i) {
            const double target = hmax * i / 40.0;
            const ControlledEntropyModel m(v, {{target, 1}});
            const double h = reference::entropy_of_logits(m.next_logits(std::vector<TokenId>{0}));
            EXPECT_NEAR(h, target, 1e-6) << "v=" << v << " target=" << target;
        }
    }
    EXPECT_THROW(ControlledEntropyModel(4, {{std::log(4.0) + 0.1, 0}}), InputError);
    EXPECT_THROW(ControlledEntropyModel(4, {{-0.1, 0}}), InputError);
}

TEST(ControlledEntropy, ScheduleKeyedByPreviousTokenOrPosition) {
    const ControlledEntropyModel by_token(6, {{0.0, 1}, {0.0, 4}});
    EXPECT_EQ(probs_of(by_token, {2})[1], 1.0);
    EXPECT_EQ(probs_of(by_token, {3})[4], 1.0);
    const ControlledEntropyModel by_pos(6, {{0.0, 1}, {0.0, 4}}, ControlledEntropyModel::KeyMode::position);
    EXPECT_EQ(probs_of(by_pos, {5})[1], 1.0);
    EXPECT_EQ(probs_of(by_pos, {5, 5})[4], 1.0);
}

TEST(ControlledEntropy, ChainModelIsMostlyLowEntropy) {
    const auto m = make_chain_model(72, 8, 0.05, 4.0, 3);
    RngState rng{1};
    WatermarkConfig cfg;
    cfg.delta = 0.0;
    const auto g = generate(m, std::vector<TokenId>{0}, cfg, EntropyGate::always(), 4000, rng);
    const auto low = std::count_if(g.trace.begin(), g.trace.end(), [](const TraceStep& s) { return s.entropy < 0.6; });
    const double frac = static_cast<double>(low) / static_cast<double>(g.trace.size());
    EXPECT_GT(frac, 0.7);
    EXPECT_LT(frac, 0.9);
}

TEST(Sampling, OneHotAlwaysReturnsHotId) {
    const std::vector<double> p{0.0, 0.0, 1.0, 0.0};
    RngState rng{0};
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_token(p, rng), 2u);
}

TEST(Sampling, FixedSeedFixedDraw) {
    const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
    RngState a{99}, b{99};
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_token(p, a), sample_token(p, b));
    EXPECT_EQ(a, b);
}

TEST(Sampling, UniformFrequenciesConverge) {
    const std::vector<double> p(4, 0.25);
    RngState rng{2024};
    std::vector<int> counts(4, 0);
    constexpr int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[sample_token(p, rng)];
    for (int c : counts) EXPECT_NEAR(c / static_cast<double>(n), 0.25, 0.01);
}

TEST(Sampling, RejectsInvalidMass) {
    RngState rng{0};
    EXPECT_THROW(sample_token(std::vector<double>{1.2, -0.2}, rng), InputError);
    EXPECT_THROW(sample_token(std::vector<double>{0.5, 0.4}, rng), InputError);
}
