#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lowent/errors.hpp"
#include "lowent/rng.hpp"
#include "lowent/vocabulary.hpp"

namespace lowent {

using FeatureVector = std::vector<double>;

struct ExtractorConfig {
    enum class Variant { hashed_ngram, external_file };

    std::size_t dimension = 256;
    std::size_t max_prefix_len = 128;
    Variant variant = Variant::hashed_ngram;
    std::uint64_t hash_seed = 0;

    void validate() const {
        if (dimension < 1) throw ConfigError("feature dimension must be >= 1");
        if (max_prefix_len < 1) throw ConfigError("max_prefix_len must be >= 1");
    }
};

inline nlohmann::json to_json(const ExtractorConfig& c) {
    return {{"dimension", c.dimension},
            {"max_prefix_len", c.max_prefix_len},
            {"variant", c.variant == ExtractorConfig::Variant::external_file ? "external_file" : "hashed_ngram"},
            {"hash_seed", c.hash_seed}};
}

inline ExtractorConfig extractor_config_from_json(const nlohmann::json& j) {
    ExtractorConfig c;
    c.dimension = j.at("dimension").get<std::size_t>();
    c.max_prefix_len = j.at("max_prefix_len").get<std::size_t>();
    c.variant = j.value("variant", std::string("hashed_ngram")) == "external_file"
                    ? ExtractorConfig::Variant::external_file
                    : ExtractorConfig::Variant::hashed_ngram;
    c.hash_seed = j.value("hash_seed", std::uint64_t{0});
    c.validate();
    return c;
}

namespace detail {

inline std::uint64_t ngram_hash(std::span<const std::string> units, std::uint64_t salt) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& u : units) {
        h = fnv1a64(u, h);
        h = fnv1a64("\x1f", h);
    }
    return mix64(h ^ salt);
}

}  // namespace detail

/// Signed feature hashing over re-tokenized units.
///
/// Every 1-, 2- and 3-gram inside the window contributes with weight
/// 1 / (1 + distance of its last unit from the end); n-grams ending at the final
/// unit are hashed a second time into a separate "tail" namespace at full weight,
/// so the vector is anchored on the last position. The result is L2-normalized.
inline FeatureVector extract_units(std::span<const std::string> units, const ExtractorConfig& cfg) {
    cfg.validate();
    FeatureVector v(cfg.dimension, 0.0);
    const std::size_t keep = std::min(units.size(), cfg.max_prefix_len);
    const auto window = units.subspan(units.size() - keep);
    if (window.empty()) return v;
    const std::size_t last = window.size() - 1;
    auto add = [&](std::span<const std::string> gram, std::uint64_t salt, double weight) {
        const std::uint64_t h = detail::ngram_hash(gram, salt);
        const double sign = (mix64(h) & 1U) ? 1.0 : -1.0;
        v[h % cfg.dimension] += sign * weight;
    };
    for (std::size_t e = 0; e <= last; ++e) {
        const double weight = 1.0 / (1.0 + static_cast<double>(last - e));
        for (std::size_t n = 1; n <= 3 && n <= e + 1; ++n) {
            const auto gram = window.subspan(e + 1 - n, n);
            add(gram, mix64(cfg.hash_seed ^ n), weight);
            if (e == last) add(gram, mix64(cfg.hash_seed ^ (n + 0x7a11ULL)), 1.0);
        }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
    }
    return v;
}

/// Feature vector for a token prefix. Only the last max_prefix_len source
/// tokens are translated to text; the text is re-tokenized with the word
/// splitter and cut again to max_prefix_len units.
inline FeatureVector extract(std::span<const TokenId> prefix, const Vocabulary& vocab, const ExtractorConfig& cfg) {
    if (prefix.empty()) throw InputError("cannot extract features from an empty prefix");
    if (cfg.variant != ExtractorConfig::Variant::hashed_ngram)
        throw ConfigError("external-file features are positional; look them up in the loaded table");
    const std::size_t keep = std::min(prefix.size(), cfg.max_prefix_len);
    const auto text = translate_tokens(prefix.subspan(prefix.size() - keep), vocab);
    const auto units = pretokenize(text, TokenizerKind::word);
    return extract_units(units, cfg);
}

// ---------------------------------------------------------------------------
// external embeddings: "dim=<d>" header, then one whitespace-separated row per sample

inline std::vector<FeatureVector> read_external_embeddings(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("embedding file is empty");
    if (line.rfind("dim=", 0) != 0) throw FormatError("embedding file must start with 'dim=<d>'");
    std::size_t dim = 0;
    try {
        dim = std::stoul(line.substr(4));
    } catch (const std::exception&) {
        throw FormatError("bad dimension header '" + line + "'");
    }
    if (dim == 0) throw FormatError("embedding dimension must be positive");
    std::vector<FeatureVector> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        FeatureVector row;
        std::string tok;
        while (ss >> tok) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw FormatError("line " + std::to_string(lineno) + ": '" + tok + "' is not a number");
            }
        }
        if (row.size() != dim)
            throw FormatError("line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                              " values, expected " + std::to_string(dim));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<FeatureVector> load_external_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open embedding file " + path);
    return read_external_embeddings(in);
}

inline void write_external_embeddings(std::ostream& out, std::span<const FeatureVector> rows) {
    if (rows.empty()) throw InputError("no embedding rows to write");
    const std::size_t dim = rows.front().size();
    out << "dim=" << dim << '\n' << std::setprecision(17);
    for (const auto& r : rows) {
        if (r.size() != dim) throw FormatError("ragged embedding rows");
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? " " : "") << r[i];
        out << '\n';
    }
}

}  // namespace lowent
