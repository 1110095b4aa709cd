#include <gtest/gtest.h>

#include <cmath>

#include "brute_force.hpp"
#include "lowent/detectors.hpp"
#include "lowent/eval.hpp"
#include "reference.hpp"

using namespace lowent;

namespace {

TaggerBank constant_bank(std::size_t v, const std::vector<std::pair<double, double>>& tau_to_bias) {
    ExtractorConfig ex;
    ex.dimension = 4;
    TaggerBank bank(ex, Vocabulary::synthetic(v));
    for (auto [tau, bias] : tau_to_bias) {
        std::vector<double> params(MlpHead::param_size(4, 2), 0.0);
        params.back() = bias;
        bank.add_head(tau, MlpHead(4, 2, HeadOutput::logistic, params));
    }
    return bank;
}

std::vector<TokenId> uniform_doc(std::size_t n, std::size_t v, std::uint64_t seed) {
    RngState rng{seed};
    std::vector<TokenId> d(n);
    for (auto& t : d) t = static_cast<TokenId>(next_below(rng, v));
    return d;
}

}  // namespace

TEST(ZScore, HandValues) {
    EXPECT_DOUBLE_EQ(z_score(60, 100, 0.5), 2.0);
    EXPECT_DOUBLE_EQ(z_score(0, 16, 0.5), -4.0);
    EXPECT_NEAR(z_score(20, 20, 0.5), std::sqrt(20.0), 1e-12);
    EXPECT_NEAR(z_score(20, 20, 0.5), 4.472, 1e-3);
    EXPECT_THROW(z_score(0, 0, 0.5), InsufficientDataError);
}

TEST(ZScore, RatioFormAgreesWithCountForm) {
    EXPECT_DOUBLE_EQ(z_from_ratio(30, 0.5, 100, 0.5), z_score(30, 50, 0.5));
    EXPECT_THROW(z_from_ratio(1, 0.0, 100, 0.5), InsufficientDataError);
}

TEST(ZScore, PartialDerivativeSigns) {
    RngState rng{77};
    for (int i = 0; i < 200; ++i) {
        const double total = 20.0 + 500.0 * next_unit(rng);
        const double wr = 0.05 + 0.9 * next_unit(rng);
        const double gamma = 0.1 + 0.8 * next_unit(rng);
        const double green = wr * total * next_unit(rng);
        const double h = 1e-5;
        EXPECT_GT(z_from_ratio(green + h, wr, total, gamma) - z_from_ratio(green - h, wr, total, gamma), 0.0);
        EXPECT_LT(z_from_ratio(green, wr + h, total, gamma) - z_from_ratio(green, wr - h, total, gamma), 0.0);
    }
}

TEST(DetectFull, AllGreenDocument) {
    // Build a 21-token document where every token after the first is green.
    WatermarkConfig cfg;
    PartitionCache cache(cfg.key, cfg.gamma, 50);
    std::vector<TokenId> doc{3};
    for (int i = 0; i < 20; ++i) doc.push_back(cache.get(doc.back()).green[static_cast<std::size_t>(i) % 25]);
    const auto r = detect_full(doc, cfg, 50);
    EXPECT_EQ(r.green_count, 20u);
    EXPECT_EQ(r.total_tokens, 20u);
    EXPECT_NEAR(r.z, 4.472, 1e-3);
    EXPECT_TRUE(r.verdict);
}

TEST(DetectFull, TooShortIsInsufficient) {
    WatermarkConfig cfg;
    for (const std::vector<TokenId>& doc : {std::vector<TokenId>{}, std::vector<TokenId>{1}}) {
        const auto r = detect_full(doc, cfg, 10);
        EXPECT_TRUE(r.insufficient);
        EXPECT_EQ(r.z, 0.0);
        EXPECT_FALSE(r.verdict);
    }
}

TEST(DetectFull, RejectsOutOfRangeTokens) {
    WatermarkConfig cfg;
    EXPECT_THROW(detect_full(std::vector<TokenId>{0, 10}, cfg, 10), InputError);
}

TEST(DetectSelective, NothingScoredIsInsufficient) {
    WatermarkConfig cfg;
    const std::vector<TokenId> doc{1, 2, 3, 4};
    const auto r = detect_selective(doc, cfg, 10, EntropySource::external({0.1, 0.2, 0.3}), 0.6);
    EXPECT_TRUE(r.insufficient);
    EXPECT_EQ(r.scored_tokens, 0u);
    EXPECT_EQ(r.total_tokens, 3u);
    EXPECT_EQ(r.z, 0.0);
    EXPECT_FALSE(r.verdict);
}

TEST(DetectSelective, ZeroThresholdWithPositiveEntropyEqualsFull) {
    WatermarkConfig cfg;
    const auto doc = uniform_doc(200, 100, 3);
    const std::vector<double> h(doc.size(), 1.0);
    const auto a = detect_selective(doc, cfg, 100, EntropySource::external(h), 0.0);
    auto b = detect_full(doc, cfg, 100);
    EXPECT_EQ(a, b);
}

TEST(DetectSelective, ScoredCountNonIncreasingInTau) {
    WatermarkConfig cfg;
    const ControlledEntropyModel model(40, {{0.1, 2}, {0.7, 5}, {1.3, 9}, {2.5, 0}, {3.0, 1}});
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto doc = uniform_doc(60, 40, s);
        const auto src = EntropySource::oracle(model);
        std::size_t last = doc.size();
        for (double tau = 0.0; tau <= 3.5; tau += 0.1) {
            const auto r = detect_selective(doc, cfg, 40, src, tau);
            EXPECT_LE(r.scored_tokens, last);
            last = r.scored_tokens;
        }
    }
}

TEST(DetectSelective, ExternalSourceLengthChecked) {
    WatermarkConfig cfg;
    const std::vector<TokenId> doc{1, 2, 3};
    EXPECT_THROW(detect_selective(doc, cfg, 10, EntropySource::external({1.0}), 0.5), FormatError);
    EXPECT_NO_THROW(detect_selective(doc, cfg, 10, EntropySource::external({1.0, 1.0}), 0.5));
    EXPECT_NO_THROW(detect_selective(doc, cfg, 10, EntropySource::external({1.0, 1.0, 1.0}), 0.5));
}

TEST(DetectSelective, OracleSourceMatchesReference) {
    WatermarkConfig cfg;
    const ControlledEntropyModel model(30, {{0.2, 2}, {0.9, 5}, {2.0, 9}});
    const auto doc = uniform_doc(80, 30, 12);
    std::vector<double> h(doc.size(), 0.0);
    for (std::size_t t = 1; t < doc.size(); ++t)
        h[t] = reference::entropy_of_logits(model.next_logits(std::span<const TokenId>(doc.data(), t)));
    for (double tau : {0.1, 0.6, 1.0, 2.5}) {
        const auto got = detect_selective(doc, cfg, 30, EntropySource::oracle(model), tau);
        const auto want = reference::selective(doc, h, cfg.key, cfg.gamma, 30, tau);
        EXPECT_EQ(got.green_count, want.green);
        EXPECT_EQ(got.scored_tokens, want.scored);
        EXPECT_NEAR(got.z, want.z, 1e-12);
    }
}

TEST(DetectEwd, ConstantWeightsEqualFull) {
    WatermarkConfig cfg;
    const auto doc = uniform_doc(150, 64, 9);
    const auto e = detect_ewd(doc, cfg, 64, EntropySource::external(std::vector<double>(doc.size(), 1.7)));
    const auto f = detect_full(doc, cfg, 64);
    EXPECT_NEAR(e.z, f.z, 1e-12);
}

TEST(DetectEwd, ZeroEntropyTokensDoNotContribute) {
    WatermarkConfig cfg;
    const auto doc = uniform_doc(40, 20, 4);
    std::vector<double> h(doc.size(), 0.0);
    for (std::size_t t = 1; t < h.size(); t += 2) h[t] = 1.0;
    const auto r1 = detect_ewd(doc, cfg, 20, EntropySource::external(h));
    const auto want = reference::weighted(doc, h, cfg.key, cfg.gamma, 20);
    EXPECT_DOUBLE_EQ(r1.z, want.z);
    EXPECT_EQ(r1.scored_tokens, (doc.size()) / 2);
    EXPECT_TRUE(detect_ewd(doc, cfg, 20, EntropySource::external(std::vector<double>(doc.size(), 0.0))).insufficient);
}

TEST(DetectEwd, TaggerSourceIsAConfigError) {
    WatermarkConfig cfg;
    const auto bank = constant_bank(10, {{0.6, 0.0}});
    EXPECT_THROW(detect_ewd(std::vector<TokenId>{1, 2, 3}, cfg, 10, EntropySource::tagger(bank)), ConfigError);
}

TEST(BruteForce, DetectorsMatchReferenceExactly) {
    const auto t = brute::full_sweep();
    EXPECT_GT(t.cases, 30000u);
    EXPECT_EQ(t.mismatches, 0u) << t.first_mismatch;
}

TEST(NullBehavior, UniformDocumentsHaveStandardNormalZ) {
    WatermarkConfig cfg;
    const auto c = type1_calibration(5000, 200, cfg, 1000, RngState{314});
    EXPECT_NEAR(c.mean_z, 0.0, 0.08);
    EXPECT_NEAR(c.var_z, 1.0, 0.08);
}

TEST(NullBehavior, WrongKeyGivesNullZ) {
    const ControlledEntropyModel model(100, {{std::log(100.0), 0}});
    WatermarkConfig cfg;
    double sum_right = 0.0, sum_wrong = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        RngState rng{s};
        const auto g = generate(model, std::vector<TokenId>{0}, cfg, EntropyGate::always(), 200, rng);
        std::vector<TokenId> doc{0};
        doc.insert(doc.end(), g.tokens.tokens.begin(), g.tokens.tokens.end());
        sum_right += detect_full(doc, cfg, 100).z;
        WatermarkConfig wrong = cfg;
        wrong.key = cfg.key + 1;
        sum_wrong += detect_full(doc, wrong, 100).z;
    }
    EXPECT_GT(sum_right / 50.0, 2.0);
    EXPECT_NEAR(sum_wrong / 50.0, 0.0, 0.5);
}

TEST(RoundTrip, GenerationGreenFlagsMatchDetectorCounts) {
    const ControlledEntropyModel model(60, {{0.3, 1}, {2.0, 4}, {3.5, 9}}, ControlledEntropyModel::KeyMode::position);
    WatermarkConfig cfg;
    RngState rng{21};
    const std::vector<TokenId> prompt{5, 7};
    const auto g = generate(model, prompt, cfg, EntropyGate::above(0.6), 120, rng);
    std::vector<TokenId> doc{prompt.back()};
    doc.insert(doc.end(), g.tokens.tokens.begin(), g.tokens.tokens.end());
    std::size_t greens = 0, gated_greens = 0, gated = 0;
    for (const auto& s : g.trace) {
        greens += s.green;
        gated += s.watermarked;
        gated_greens += s.watermarked && s.green;
    }
    EXPECT_EQ(detect_full(doc, cfg, 60).green_count, greens);
    std::vector<double> h{0.0};
    for (const auto& s : g.trace) h.push_back(s.entropy);
    const auto sel = detect_selective(doc, cfg, 60, EntropySource::external(h), 0.6);
    EXPECT_EQ(sel.scored_tokens, gated);
    EXPECT_EQ(sel.green_count, gated_greens);
}

TEST(Report, JsonRoundTrip) {
    DetectionReport r;
    r.z = 3.25;
    r.green_count = 12;
    r.total_tokens = 30;
    r.scored_tokens = 17;
    r.watermark_ratio = 17.0 / 30.0;
    r.tau_hat = 0.9;
    r.verdict = false;
    EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
    r.tau_hat.reset();
    r.insufficient = true;
    EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
}

TEST(DetectIe, AlwaysHighHeadsEqualFullDetection) {
    WatermarkConfig cfg;
    const auto bank = constant_bank(50, {{1.5, -10}, {1.2, -10}, {0.9, -10}, {0.6, -10}, {0.3, -10}});
    const auto doc = uniform_doc(100, 50, 8);
    const auto r = detect_ie(doc, cfg, bank, NavigatorConfig{});
    const auto f = detect_full(doc, cfg, 50);
    EXPECT_EQ(r.report.green_count, f.green_count);
    EXPECT_EQ(r.report.scored_tokens, f.scored_tokens);
    ASSERT_TRUE(r.report.tau_hat.has_value());
    // identical stats at every threshold never trip the stop rule
    EXPECT_DOUBLE_EQ(*r.report.tau_hat, 1.5);
}

TEST(DetectIe, AlwaysLowHeadsAreInsufficient) {
    WatermarkConfig cfg;
    const auto bank = constant_bank(50, {{1.5, 10}, {1.2, 10}, {0.9, 10}, {0.6, 10}, {0.3, 10}});
    const auto r = detect_ie(uniform_doc(100, 50, 8), cfg, bank, NavigatorConfig{});
    EXPECT_TRUE(r.report.insufficient);
    EXPECT_FALSE(r.report.verdict);
}

TEST(DetectIe, MissingHeadIsAConfigError) {
    WatermarkConfig cfg;
    const auto bank = constant_bank(50, {{1.5, 0}, {0.3, 0}});
    EXPECT_THROW(detect_ie(uniform_doc(20, 50, 1), cfg, bank, NavigatorConfig{}), ConfigError);
}

TEST(DetectNavigated, ReportUsesSelectedThreshold) {
    WatermarkConfig cfg;
    const auto doc = uniform_doc(300, 80, 6);
    RngState rng{44};
    std::vector<double> h(doc.size() - 1);
    for (auto& x : h) x = 2.0 * next_unit(rng);
    PartitionCache cache(cfg.key, cfg.gamma, 80);
    const auto prepared = PreparedDocument::from_entropies(h);
    const auto res = detect_navigated(doc, cfg, cache, prepared, NavigatorConfig{});
    ASSERT_TRUE(res.report.tau_hat);
    const auto direct = detect_masked(doc, cfg, cache, prepared.scored_mask(*res.report.tau_hat));
    EXPECT_EQ(res.report.z, direct.z);
    EXPECT_EQ(res.report.green_count, direct.green_count);
}
