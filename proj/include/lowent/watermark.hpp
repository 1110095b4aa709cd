#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lowent/errors.hpp"
#include "lowent/rng.hpp"
#include "lowent/token_model.hpp"
#include "lowent/vocabulary.hpp"

namespace lowent {

/// kgw watermarks and scores every position. sweet gates both sides on true
/// entropy. ewd generates like kgw and weights detection by entropy. ie gates
/// on a tagger instead of the language model.
enum class Scheme { kgw, sweet, ewd, ie };

inline std::string_view to_string(Scheme s) {
    switch (s) {
        case Scheme::kgw: return "kgw";
        case Scheme::sweet: return "sweet";
        case Scheme::ewd: return "ewd";
        case Scheme::ie: return "ie";
    }
    return "kgw";
}

inline Scheme parse_scheme(std::string_view s) {
    if (s == "kgw") return Scheme::kgw;
    if (s == "sweet") return Scheme::sweet;
    if (s == "ewd") return Scheme::ewd;
    if (s == "ie") return Scheme::ie;
    throw ConfigError("unknown scheme '" + std::string(s) + "'");
}

struct WatermarkConfig {
    double gamma = 0.5;
    double delta = 3.0;
    std::uint64_t key = 15485863;
    double z_threshold = 4.0;
    Scheme scheme = Scheme::kgw;
    double tau_gen = 0.6;

    void validate() const {
        if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
        if (!(delta >= 0.0) || !std::isfinite(delta)) throw ConfigError("delta must be finite and >= 0");
    }
};

/// floor(gamma * |V|); the 1e-9 nudge keeps products like 0.29 * 100 from
/// landing one below the intended integer.
inline std::size_t green_list_size(double gamma, std::size_t vocab_size) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
    const auto g = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(vocab_size) + 1e-9));
    if (vocab_size < 2 || g < 1 || g > vocab_size - 1)
        throw ConfigError("green list size floor(gamma*|V|) = " + std::to_string(g) + " outside [1, |V|-1] for |V|=" +
                          std::to_string(vocab_size));
    return g;
}

struct GreenRedPartition {
    std::vector<TokenId> green;
    std::vector<std::uint8_t> mask;  // mask[id] == 1 iff id is green

    bool is_green(TokenId id) const { return mask.at(id) != 0; }

    std::vector<TokenId> red() const {
        std::vector<TokenId> r;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (!mask[i]) r.push_back(static_cast<TokenId>(i));
        return r;
    }
};

/// Seed for the partition following `prev_token`.
inline std::uint64_t partition_seed(TokenId prev_token, std::uint64_t key) noexcept {
    return mix64(key ^ ((static_cast<std::uint64_t>(prev_token) + 1) * kGoldenGamma));
}

/// Green list = first floor(gamma|V|) entries of a descending Fisher-Yates
/// shuffle of 0..|V|-1 driven by the splitmix64 stream at partition_seed().
inline GreenRedPartition partition_vocab(TokenId prev_token, std::uint64_t key, double gamma, std::size_t vocab_size) {
    const std::size_t g = green_list_size(gamma, vocab_size);
    if (prev_token >= vocab_size) throw InputError("previous token out of vocabulary range");
    std::vector<TokenId> perm(vocab_size);
    std::iota(perm.begin(), perm.end(), TokenId{0});
    RngState rng{partition_seed(prev_token, key)};
    for (std::size_t i = vocab_size - 1; i > 0; --i) std::swap(perm[i], perm[next_below(rng, i + 1)]);
    GreenRedPartition part;
    part.green.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(g));
    part.mask.assign(vocab_size, 0);
    for (TokenId t : part.green) part.mask[t] = 1;
    return part;
}

/// Lazily memoized partitions for one (key, gamma, |V|). Not thread-safe; give
/// each worker its own cache.
class PartitionCache {
public:
    PartitionCache(std::uint64_t key, double gamma, std::size_t vocab_size)
        : key_(key), gamma_(gamma), vocab_size_(vocab_size), slots_(vocab_size) {
        (void)green_list_size(gamma, vocab_size);
    }

    const GreenRedPartition& get(TokenId prev_token) {
        if (prev_token >= vocab_size_) throw InputError("previous token out of vocabulary range");
        auto& slot = slots_[prev_token];
        if (!slot) slot = std::make_unique<GreenRedPartition>(partition_vocab(prev_token, key_, gamma_, vocab_size_));
        return *slot;
    }

    bool is_green(TokenId prev_token, TokenId token) { return get(prev_token).is_green(token); }

    std::size_t vocab_size() const noexcept { return vocab_size_; }

private:
    std::uint64_t key_;
    double gamma_;
    std::size_t vocab_size_;
    std::vector<std::unique_ptr<GreenRedPartition>> slots_;
};

/// Shannon entropy in nats, 0 ln 0 := 0.
inline double shannon_entropy(std::span<const double> probs) {
    detail::check_distribution(probs);
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h < 0.0 ? 0.0 : h;
}

/// Softmax of the logits with delta added to every green entry. With delta = 0
/// the arithmetic is identical to softmax(), bit for bit.
inline std::vector<double> apply_green_bias(std::span<const double> logits, const GreenRedPartition& partition,
                                            double delta) {
    if (partition.mask.size() != logits.size()) throw InputError("partition and logits disagree on vocabulary size");
    std::vector<double> biased(logits.begin(), logits.end());
    for (std::size_t i = 0; i < biased.size(); ++i) {
        if (!std::isfinite(biased[i])) throw InputError("logits must be finite");
        if (partition.mask[i]) biased[i] += delta;
    }
    return softmax(biased);
}

// ---------------------------------------------------------------------------
// generation

/// Decides whether a generation step is watermarked.
class EntropyGate {
public:
    /// context is the full token history before the step; entropy is the true
    /// predictive entropy (always available at generation time).
    using Predicate = std::function<bool(std::span<const TokenId> context, double entropy)>;

    static EntropyGate always() { return EntropyGate([](std::span<const TokenId>, double) { return true; }); }

    static EntropyGate above(double tau) {
        return EntropyGate([tau](std::span<const TokenId>, double h) { return h > tau; });
    }

    static EntropyGate custom(Predicate p) { return EntropyGate(std::move(p)); }

    bool operator()(std::span<const TokenId> context, double entropy) const { return pred_(context, entropy); }

private:
    explicit EntropyGate(Predicate p) : pred_(std::move(p)) {}
    Predicate pred_;
};

struct TraceStep {
    TokenId token = 0;
    double entropy = 0.0;
    bool watermarked = false;
    bool green = false;
};

using GenerationTrace = std::vector<TraceStep>;

struct Generation {
    TokenSequence tokens;  // generated tokens only, origin = generated
    GenerationTrace trace;
};

/// Autoregressive sampling with green-list biasing on gated steps. The
/// partition for step t is seeded by the previous token, which for the first
/// step is the last prompt token. One uniform is drawn per step whatever the
/// gate decides, so delta = 0 reproduces unwatermarked output exactly.
inline Generation generate(const LogitProvider& model, std::span<const TokenId> prompt, const WatermarkConfig& cfg,
                           const EntropyGate& gate, int max_tokens, RngState& rng) {
    if (max_tokens <= 0) throw InputError("max_tokens must be positive");
    if (prompt.empty()) throw InputError("prompt must be non-empty");
    cfg.validate();
    check_token_ids(prompt, model.vocab_size());
    PartitionCache partitions(cfg.key, cfg.gamma, model.vocab_size());

    std::vector<TokenId> context(prompt.begin(), prompt.end());
    Generation out;
    out.tokens.origin = Origin::generated;
    out.trace.reserve(static_cast<std::size_t>(max_tokens));
    for (int step = 0; step < max_tokens; ++step) {
        const auto logits = model.next_logits(context);
        const auto probs = softmax(logits);
        TraceStep rec;
        rec.entropy = shannon_entropy(probs);
        rec.watermarked = gate(context, rec.entropy);
        const auto& part = partitions.get(context.back());
        if (rec.watermarked) {
            const auto biased = apply_green_bias(logits, part, cfg.delta);
            rec.token = sample_token(biased, rng);
        } else {
            rec.token = sample_token(probs, rng);
        }
        rec.green = part.is_green(rec.token);
        context.push_back(rec.token);
        out.tokens.tokens.push_back(rec.token);
        out.trace.push_back(rec);
    }
    return out;
}

inline nlohmann::json trace_to_json(const TraceStep& s) {
    return {{"token", s.token}, {"entropy", s.entropy}, {"watermarked", s.watermarked}, {"green", s.green}};
}

}  // namespace lowent
