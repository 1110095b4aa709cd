#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowent/errors.hpp"
#include "lowent/rng.hpp"
#include "lowent/vocabulary.hpp"

namespace lowent {

/// Anything that maps a token prefix to next-token logits over a fixed vocabulary.
/// Implementations must be immutable after construction and deterministic.
class LogitProvider {
public:
    virtual ~LogitProvider() = default;

    virtual std::size_t vocab_size() const = 0;

    /// Logits for the token following `prefix`. Throws InputError on an empty
    /// prefix or an out-of-range id.
    virtual std::vector<double> next_logits(std::span<const TokenId> prefix) const = 0;

    /// Number of stored parameters, used for detector-size reporting.
    virtual std::size_t parameter_count() const = 0;
};

/// Logit assigned to zero-probability tokens. exp() of it underflows to exactly 0.
inline constexpr double kZeroLogit = -1000.0;

inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

namespace detail {

inline void check_distribution(std::span<const double> probs) {
    if (probs.empty()) throw InputError("empty probability vector");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw InputError("probability vector has a negative or NaN entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InputError("probability vector sums to " + std::to_string(sum));
}

inline void check_prefix(std::span<const TokenId> prefix, std::size_t vocab_size) {
    if (prefix.empty()) throw InputError("prefix must be non-empty");
    check_token_ids(prefix, vocab_size);
}

}  // namespace detail

/// Inverse-CDF draw. Consumes exactly one uniform from `rng`.
inline TokenId sample_token(std::span<const double> probs, RngState& rng) {
    detail::check_distribution(probs);
    const double u = next_unit(rng);
    double cum = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        cum += probs[i];
        last_positive = i;
        if (u < cum) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last_positive);
}

// ---------------------------------------------------------------------------
// n-gram model

/// Add-k smoothed n-gram model with backoff to the longest context seen in
/// training. The unigram table always exists, so every prefix resolves.
class NGramModel final : public LogitProvider {
public:
    struct Row {
        std::map<TokenId, std::uint64_t> next;
        std::uint64_t total = 0;
    };
    using Table = std::map<std::vector<TokenId>, Row>;

    NGramModel(std::size_t vocab_size, std::size_t order, double k, std::vector<Table> tables)
        : vocab_size_(vocab_size), order_(order), k_(k), tables_(std::move(tables)) {
        if (order_ < 1) throw InputError("n-gram order must be >= 1");
        if (!(k_ > 0.0)) throw InputError("smoothing constant k must be > 0");
        if (tables_.size() != order_) throw FormatError("n-gram model needs one table per context length");
        if (tables_[0].find({}) == tables_[0].end()) throw FormatError("n-gram model has no unigram row");
    }

    std::size_t vocab_size() const override { return vocab_size_; }
    std::size_t order() const noexcept { return order_; }
    double smoothing() const noexcept { return k_; }
    const std::vector<Table>& tables() const noexcept { return tables_; }

    std::size_t parameter_count() const override {
        std::size_t n = 0;
        for (const auto& t : tables_)
            for (const auto& [ctx, row] : t) n += row.next.size();
        return n;
    }

    /// The table row used for `prefix` after backoff.
    const Row& resolve(std::span<const TokenId> prefix) const {
        const std::size_t longest = std::min(order_ - 1, prefix.size());
        for (std::size_t m = longest + 1; m-- > 0;) {
            std::vector<TokenId> ctx(prefix.end() - static_cast<std::ptrdiff_t>(m), prefix.end());
            auto it = tables_[m].find(ctx);
            if (it != tables_[m].end()) return it->second;
        }
        return tables_[0].at({});
    }

    std::vector<double> next_logits(std::span<const TokenId> prefix) const override {
        detail::check_prefix(prefix, vocab_size_);
        const Row& row = resolve(prefix);
        const double denom = static_cast<double>(row.total) + k_ * static_cast<double>(vocab_size_);
        std::vector<double> logits(vocab_size_, std::log(k_ / denom));
        for (const auto& [tok, c] : row.next) logits[tok] = std::log((static_cast<double>(c) + k_) / denom);
        return logits;
    }

private:
    std::size_t vocab_size_;
    std::size_t order_;
    double k_;
    std::vector<Table> tables_;
};

inline NGramModel train_ngram(std::span<const std::vector<TokenId>> corpus, std::size_t vocab_size, std::size_t n,
                              double k) {
    if (n < 1) throw InputError("n-gram order must be >= 1");
    if (vocab_size < 1) throw InputError("vocabulary must be non-empty");
    std::vector<NGramModel::Table> tables(n);
    std::size_t total = 0;
    for (const auto& doc : corpus) {
        check_token_ids(doc, vocab_size);
        total += doc.size();
        for (std::size_t i = 0; i < doc.size(); ++i) {
            for (std::size_t m = 0; m < n && m <= i; ++m) {
                std::vector<TokenId> ctx(doc.begin() + static_cast<std::ptrdiff_t>(i - m),
                                         doc.begin() + static_cast<std::ptrdiff_t>(i));
                auto& row = tables[m][ctx];
                ++row.next[doc[i]];
                ++row.total;
            }
        }
    }
    if (total == 0) throw InputError("cannot train an n-gram model on an empty corpus");
    return NGramModel(vocab_size, n, k, std::move(tables));
}

// ---------------------------------------------------------------------------
// controlled-entropy model

/// Emits, per context, a distribution with mass (1 - eps) on a peak token and
/// eps spread uniformly over the rest, with eps chosen so the Shannon entropy
/// hits a target. The schedule entry is picked by the previous token (or by the
/// prefix length), modulo the schedule size.
class ControlledEntropyModel final : public LogitProvider {
public:
    struct Entry {
        double target_entropy = 0.0;
        TokenId peak = 0;
    };
    enum class KeyMode { previous_token, position };

    ControlledEntropyModel(std::size_t vocab_size, std::vector<Entry> schedule, KeyMode mode = KeyMode::previous_token)
        : vocab_size_(vocab_size), schedule_(std::move(schedule)), mode_(mode) {
        if (vocab_size_ < 2) throw InputError("controlled-entropy model needs at least 2 tokens");
        if (schedule_.empty()) throw InputError("controlled-entropy schedule is empty");
        const double hmax = std::log(static_cast<double>(vocab_size_));
        logits_.reserve(schedule_.size());
        for (const auto& e : schedule_) {
            if (e.peak >= vocab_size_) throw InputError("schedule peak id out of range");
            if (!(e.target_entropy >= 0.0) || e.target_entropy > hmax + 1e-12)
                throw InputError("target entropy " + std::to_string(e.target_entropy) + " outside [0, ln|V|]");
            logits_.push_back(build_logits(e));
        }
    }

    std::size_t vocab_size() const override { return vocab_size_; }
    std::size_t parameter_count() const override { return 2 * schedule_.size(); }
    const std::vector<Entry>& schedule() const noexcept { return schedule_; }
    KeyMode key_mode() const noexcept { return mode_; }

    std::size_t entry_index(std::span<const TokenId> prefix) const {
        const std::size_t key = mode_ == KeyMode::previous_token ? prefix.back() : prefix.size() - 1;
        return key % schedule_.size();
    }

    std::vector<double> next_logits(std::span<const TokenId> prefix) const override {
        detail::check_prefix(prefix, vocab_size_);
        return logits_[entry_index(prefix)];
    }

    /// Entropy of the peak-plus-uniform distribution with off-peak mass eps.
    static double entropy_for_eps(double eps, std::size_t vocab_size) {
        double h = 0.0;
        if (eps < 1.0) h -= (1.0 - eps) * std::log(1.0 - eps);
        if (eps > 0.0) h -= eps * std::log(eps / static_cast<double>(vocab_size - 1));
        return h;
    }

    /// Bisection on [0, (|V|-1)/|V|], where entropy is increasing in eps.
    static double solve_eps(double target, std::size_t vocab_size) {
        if (target <= 0.0) return 0.0;
        double lo = 0.0;
        double hi = static_cast<double>(vocab_size - 1) / static_cast<double>(vocab_size);
        if (target >= entropy_for_eps(hi, vocab_size)) return hi;
        for (int it = 0; it < 200 && hi > lo; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (mid == lo || mid == hi) break;
            (entropy_for_eps(mid, vocab_size) < target ? lo : hi) = mid;
        }
        const double dl = std::abs(entropy_for_eps(lo, vocab_size) - target);
        const double dh = std::abs(entropy_for_eps(hi, vocab_size) - target);
        return dl <= dh ? lo : hi;
    }

private:
    std::vector<double> build_logits(const Entry& e) const {
        const double eps = solve_eps(e.target_entropy, vocab_size_);
        const double off = eps > 0.0 ? std::log(eps / static_cast<double>(vocab_size_ - 1)) : kZeroLogit;
        std::vector<double> logits(vocab_size_, off);
        logits[e.peak] = eps < 1.0 ? std::log(1.0 - eps) : kZeroLogit;
        return logits;
    }

    std::size_t vocab_size_;
    std::vector<Entry> schedule_;
    KeyMode mode_;
    std::vector<std::vector<double>> logits_;
};

/// Toy low-entropy language: tokens are grouped into chains of `chain_length`
/// deterministic steps (entropy `low_entropy`, peak = next chain member), and
/// the last member of each chain opens a high-entropy step. With uniform entry
/// points a chain of length L spends about (L/2)/(L/2 + 1) of its steps in
/// low-entropy contexts.
inline ControlledEntropyModel make_chain_model(std::size_t vocab_size, std::size_t chain_length, double low_entropy,
                                               double high_entropy, std::uint64_t seed) {
    if (chain_length < 1 || vocab_size < chain_length + 1) throw InputError("vocabulary too small for chain length");
    std::vector<TokenId> order(vocab_size);
    std::iota(order.begin(), order.end(), TokenId{0});
    RngState rng{seed};
    for (std::size_t i = vocab_size - 1; i > 0; --i) std::swap(order[i], order[next_below(rng, i + 1)]);

    std::vector<ControlledEntropyModel::Entry> schedule(vocab_size);
    const std::size_t group = chain_length + 1;
    for (std::size_t i = 0; i < vocab_size; ++i) {
        const std::size_t pos = i % group;
        const bool tail = pos == chain_length || i + 1 == vocab_size;
        auto& e = schedule[order[i]];
        if (tail) {
            e = {high_entropy, static_cast<TokenId>(next_below(rng, vocab_size))};
        } else {
            e = {low_entropy, order[i + 1]};
        }
    }
    return ControlledEntropyModel(vocab_size, std::move(schedule), ControlledEntropyModel::KeyMode::previous_token);
}

// ---------------------------------------------------------------------------
// persistence

/// A model together with the vocabulary its ids refer to.
struct LoadedModel {
    std::shared_ptr<const LogitProvider> model;
    Vocabulary vocab;
};

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
    return {{"tokenizer", v.tokenizer() == TokenizerKind::byte ? "byte" : "word"}, {"surfaces", v.surfaces()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
    const auto kind = j.value("tokenizer", std::string("word")) == "byte" ? TokenizerKind::byte : TokenizerKind::word;
    return Vocabulary(j.at("surfaces").get<std::vector<std::string>>(), kind);
}

inline nlohmann::json model_to_json(const LogitProvider& model, const Vocabulary& vocab) {
    nlohmann::json j;
    j["vocab"] = vocab_to_json(vocab);
    if (const auto* ng = dynamic_cast<const NGramModel*>(&model)) {
        j["type"] = "ngram";
        j["order"] = ng->order();
        j["k"] = ng->smoothing();
        auto tables = nlohmann::json::array();
        for (const auto& t : ng->tables()) {
            auto rows = nlohmann::json::array();
            for (const auto& [ctx, row] : t) {
                auto next = nlohmann::json::array();
                for (const auto& [tok, c] : row.next) next.push_back({tok, c});
                rows.push_back({{"ctx", ctx}, {"next", next}});
            }
            tables.push_back(rows);
        }
        j["counts"] = tables;
    } else if (const auto* ce = dynamic_cast<const ControlledEntropyModel*>(&model)) {
        j["type"] = "controlled";
        j["key"] = ce->key_mode() == ControlledEntropyModel::KeyMode::position ? "position" : "previous_token";
        auto sched = nlohmann::json::array();
        for (const auto& e : ce->schedule()) sched.push_back({e.target_entropy, e.peak});
        j["schedule"] = sched;
    } else {
        throw InputError("model type has no JSON form");
    }
    return j;
}

inline LoadedModel model_from_json(const nlohmann::json& j) {
    try {
        LoadedModel out;
        out.vocab = vocab_from_json(j.at("vocab"));
        const auto type = j.at("type").get<std::string>();
        if (type == "ngram") {
            std::vector<NGramModel::Table> tables;
            for (const auto& rows : j.at("counts")) {
                NGramModel::Table t;
                for (const auto& r : rows) {
                    NGramModel::Row row;
                    for (const auto& pair : r.at("next")) {
                        const auto tok = pair.at(0).get<TokenId>();
                        const auto c = pair.at(1).get<std::uint64_t>();
                        if (tok >= out.vocab.size()) throw FormatError("count table references unknown token");
                        row.next[tok] = c;
                        row.total += c;
                    }
                    t.emplace(r.at("ctx").get<std::vector<TokenId>>(), std::move(row));
                }
                tables.push_back(std::move(t));
            }
            out.model = std::make_shared<NGramModel>(out.vocab.size(), j.at("order").get<std::size_t>(),
                                                     j.at("k").get<double>(), std::move(tables));
        } else if (type == "controlled") {
            std::vector<ControlledEntropyModel::Entry> sched;
            for (const auto& e : j.at("schedule")) sched.push_back({e.at(0).get<double>(), e.at(1).get<TokenId>()});
            const auto mode = j.value("key", std::string("previous_token")) == "position"
                                  ? ControlledEntropyModel::KeyMode::position
                                  : ControlledEntropyModel::KeyMode::previous_token;
            out.model = std::make_shared<ControlledEntropyModel>(out.vocab.size(), std::move(sched), mode);
        } else {
            throw FormatError("unknown model type '" + type + "'");
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model file: ") + e.what());
    }
}

}  // namespace lowent
