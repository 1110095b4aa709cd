#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lowent/features.hpp"
#include "lowent/token_model.hpp"

using namespace lowent;

namespace {

double norm(const FeatureVector& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

Vocabulary code_vocab() {
    const std::vector<std::string> docs{"def add(a, b):\n    return a + b\n", "for i in range(10):\n    print(i)\n"};
    return Vocabulary::from_corpus(docs);
}

}  // namespace

TEST(Pretokenize, WordUnitsKeepLeadingSpace) {
    const auto u = pretokenize("def f(x):  return x");
    const std::vector<std::string> want{"def", " f", "(", "x", ")", ":", " ", " return", " x"};
    EXPECT_EQ(u, want);
}

TEST(Pretokenize, ByteUnits) {
    const auto u = pretokenize("ab ", TokenizerKind::byte);
    EXPECT_EQ(u, (std::vector<std::string>{"a", "b", " "}));
}

TEST(Vocabulary, TokenizeRoundTripsText) {
    const auto v = code_vocab();
    const std::string text = "def add(a, b):\n    return a + b\n";
    const auto ids = v.tokenize(text);
    EXPECT_EQ(translate_tokens(ids, v), text);
    EXPECT_THROW(v.tokenize("zebra"), InputError);
    EXPECT_THROW(v.surface(static_cast<TokenId>(v.size())), InputError);
}

TEST(Vocabulary, ByteVocabularyCoversEverything) {
    const auto v = Vocabulary::bytes();
    EXPECT_EQ(v.size(), 256u);
    const std::string text = "x = \xce\xbb + 1";
    EXPECT_EQ(translate_tokens(v.tokenize(text), v), text);
}

TEST(Vocabulary, RejectsDuplicates) {
    EXPECT_THROW(Vocabulary(std::vector<std::string>{"a", "a"}), InputError);
    EXPECT_THROW(Vocabulary(std::vector<std::string>{"a", ""}), InputError);
}

TEST(Extract, FixedDimensionAndUnitNorm) {
    const auto v = code_vocab();
    ExtractorConfig cfg;
    cfg.dimension = 64;
    const auto ids = v.tokenize("for i in range(10):\n    print(i)\n");
    for (std::size_t k = 1; k <= ids.size(); ++k) {
        const auto f = extract(std::span<const TokenId>(ids.data(), k), v, cfg);
        EXPECT_EQ(f.size(), 64u);
        EXPECT_NEAR(norm(f), 1.0, 1e-12);
    }
}

TEST(Extract, DeterministicAndSeedDependent) {
    const auto v = code_vocab();
    ExtractorConfig cfg;
    const auto ids = v.tokenize("def add(a, b):");
    EXPECT_EQ(extract(ids, v, cfg), extract(ids, v, cfg));
    ExtractorConfig other = cfg;
    other.hash_seed = 1;
    EXPECT_NE(extract(ids, v, cfg), extract(ids, v, other));
}

TEST(Extract, DiffersByLastToken) {
    const auto v = code_vocab();
    ExtractorConfig cfg;
    const auto a = v.tokenize("for i in range(");
    const auto b = v.tokenize("for i in range");
    EXPECT_NE(extract(a, v, cfg), extract(b, v, cfg));
}

TEST(Extract, OnlyTheLastWindowMatters) {
    const auto v = Vocabulary::synthetic(10);
    ExtractorConfig cfg;
    cfg.max_prefix_len = 4;
    const std::vector<TokenId> a{1, 2, 3, 4, 5, 6};
    const std::vector<TokenId> b{9, 9, 3, 4, 5, 6};
    EXPECT_EQ(extract(a, v, cfg), extract(b, v, cfg));
}

TEST(Extract, EmptyPrefixAndExternalVariantRejected) {
    const auto v = Vocabulary::synthetic(4);
    ExtractorConfig cfg;
    EXPECT_THROW(extract(std::vector<TokenId>{}, v, cfg), InputError);
    cfg.variant = ExtractorConfig::Variant::external_file;
    EXPECT_THROW(extract(std::vector<TokenId>{1}, v, cfg), ConfigError);
    cfg = {};
    cfg.dimension = 0;
    EXPECT_THROW(extract(std::vector<TokenId>{1}, v, cfg), ConfigError);
}

TEST(Extract, ConfigJsonRoundTrip) {
    ExtractorConfig cfg;
    cfg.dimension = 33;
    cfg.max_prefix_len = 7;
    cfg.hash_seed = 99;
    const auto back = extractor_config_from_json(to_json(cfg));
    EXPECT_EQ(back.dimension, 33u);
    EXPECT_EQ(back.max_prefix_len, 7u);
    EXPECT_EQ(back.hash_seed, 99u);
}

TEST(ExternalEmbeddings, RoundTrip) {
    const std::vector<FeatureVector> rows{{0.1, -2.5, 1e-17}, {3.0, 0.0, 1.0 / 3.0}};
    std::stringstream ss;
    write_external_embeddings(ss, rows);
    EXPECT_EQ(read_external_embeddings(ss), rows);
}

TEST(ExternalEmbeddings, RaggedRowIsAFormatError) {
    std::stringstream ss("dim=3\n1 2 3\n1 2\n");
    EXPECT_THROW(read_external_embeddings(ss), FormatError);
    std::stringstream bad("1 2 3\n");
    EXPECT_THROW(read_external_embeddings(bad), FormatError);
    std::stringstream nan_row("dim=2\n1 x\n");
    EXPECT_THROW(read_external_embeddings(nan_row), FormatError);
}
