#pragma once

// Sweeps detectors against the reference implementations over every short
// sequence on tiny vocabularies plus random longer cases.

#include <cstdint>
#include <string>
#include <vector>

#include "lowent/detectors.hpp"
#include "lowent/rng.hpp"
#include "reference.hpp"

namespace lowent::brute {

struct Tally {
    std::size_t cases = 0;
    std::size_t mismatches = 0;
    std::string first_mismatch;
};

inline std::vector<double> entropies_for(std::size_t n, std::uint64_t salt) {
    static constexpr double levels[] = {0.0, 0.1, 0.3, 0.6, 0.6000000001, 0.9, 1.2, 2.0};
    std::vector<double> h(n);
    RngState rng{salt};
    for (auto& x : h) x = levels[next_below(rng, 8)];
    return h;
}

inline void check_one(const std::vector<TokenId>& tokens, std::size_t v, std::uint64_t key, double gamma,
                      const std::vector<double>& h, Tally& tally) {
    WatermarkConfig cfg;
    cfg.key = key;
    cfg.gamma = gamma;
    auto note = [&](const char* what) {
        if (tally.mismatches++ == 0) {
            tally.first_mismatch = std::string(what) + " v=" + std::to_string(v) + " len=" + std::to_string(tokens.size());
        }
    };
    const std::vector<double> all_high(tokens.size(), 1e9);
    ++tally.cases;
    {
        const auto got = detect_full(tokens, cfg, v);
        const auto want = reference::selective(tokens, all_high, key, gamma, v, 0.0);
        if (got.green_count != want.green || got.scored_tokens != want.scored || got.z != want.z ||
            got.insufficient != want.insufficient)
            note("full");
    }
    const auto src = EntropySource::external(h);
    for (double tau : {0.0, 0.3, 0.6, 1.5}) {
        const auto got = detect_selective(tokens, cfg, v, src, tau);
        const auto want = reference::selective(tokens, h, key, gamma, v, tau);
        if (got.green_count != want.green || got.scored_tokens != want.scored || got.z != want.z ||
            got.insufficient != want.insufficient || (!want.insufficient && got.watermark_ratio != want.wr))
            note("selective");
    }
    {
        const auto got = detect_ewd(tokens, cfg, v, src);
        const auto want = reference::weighted(tokens, h, key, gamma, v);
        if (got.z != want.z || got.insufficient != want.insufficient) note("ewd");
    }
}

/// Every sequence of length 2..max_len over each vocabulary size, with
/// per-position entropies drawn from a fixed level set.
inline Tally exhaustive(std::size_t v, std::size_t max_len, std::uint64_t key, double gamma) {
    Tally t;
    for (std::size_t len = 2; len <= max_len; ++len) {
        std::vector<TokenId> seq(len, 0);
        for (;;) {
            std::uint64_t salt = len;
            for (TokenId x : seq) salt = salt * 31 + x;
            check_one(seq, v, key, gamma, entropies_for(len, salt), t);
            std::size_t i = 0;
            while (i < len && ++seq[i] == v) seq[i++] = 0;
            if (i == len) break;
        }
    }
    return t;
}

inline Tally random_cases(std::size_t count, std::uint64_t seed) {
    Tally t;
    RngState rng{seed};
    for (std::size_t c = 0; c < count; ++c) {
        const std::size_t v = 2 + next_below(rng, 5);
        const std::size_t len = 2 + next_below(rng, 11);
        const double gamma = v >= 4 && next_below(rng, 2) ? 0.25 * static_cast<double>(1 + next_below(rng, 3)) : 0.5;
        std::vector<TokenId> seq(len);
        for (auto& x : seq) x = static_cast<TokenId>(next_below(rng, v));
        check_one(seq, v, next_u64(rng), gamma, entropies_for(len, next_u64(rng)), t);
    }
    return t;
}

/// The grid used by both the unit tests and the acceptance binary.
inline Tally full_sweep() {
    Tally total;
    auto add = [&](const Tally& t) {
        if (total.mismatches == 0 && t.mismatches > 0) total.first_mismatch = t.first_mismatch;
        total.cases += t.cases;
        total.mismatches += t.mismatches;
    };
    for (std::size_t v : {2u, 3u, 4u}) add(exhaustive(v, 7, 15485863, 0.5));
    add(exhaustive(4, 6, 99, 0.25));
    for (std::size_t v : {5u, 6u}) add(exhaustive(v, 5, 7, 0.5));
    add(random_cases(1000, 2024));
    return total;
}

}  // namespace lowent::brute
