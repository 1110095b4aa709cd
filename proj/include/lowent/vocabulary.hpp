#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lowent/errors.hpp"

namespace lowent {

using TokenId = std::uint32_t;

enum class Origin { prompt, generated, human };

inline std::string_view to_string(Origin o) {
    switch (o) {
        case Origin::prompt: return "prompt";
        case Origin::generated: return "generated";
        case Origin::human: return "human";
    }
    return "generated";
}

struct TokenSequence {
    std::vector<TokenId> tokens;
    Origin origin = Origin::generated;
};

enum class TokenizerKind { word, byte };

namespace detail {

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

inline bool is_word(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c >= 0x80;
}

}  // namespace detail

/// Splits text into units whose byte-exact concatenation is the input.
///
/// word: a unit is an optional single leading space followed by either a run of
/// word characters or one punctuation byte; other whitespace forms its own run.
/// Non-ASCII bytes count as word characters so UTF-8 sequences stay whole.
/// byte: one unit per byte.
inline std::vector<std::string> pretokenize(std::string_view text, TokenizerKind kind = TokenizerKind::word) {
    std::vector<std::string> units;
    if (kind == TokenizerKind::byte) {
        units.reserve(text.size());
        for (char c : text) units.emplace_back(1, c);
        return units;
    }
    const std::size_t n = text.size();
    std::size_t i = 0;
    auto take_core = [&](std::size_t start) {
        std::size_t j = start;
        if (j < n && detail::is_word(static_cast<unsigned char>(text[j]))) {
            while (j < n && detail::is_word(static_cast<unsigned char>(text[j]))) ++j;
        } else if (j < n) {
            ++j;
        }
        return j;
    };
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (detail::is_space(c)) {
            std::size_t j = i;
            while (j < n && detail::is_space(static_cast<unsigned char>(text[j]))) ++j;
            if (j < n && text[j - 1] == ' ') {
                if (j - 1 > i) units.emplace_back(text.substr(i, j - 1 - i));
                const std::size_t end = take_core(j);
                units.emplace_back(text.substr(j - 1, end - (j - 1)));
                i = end;
            } else {
                units.emplace_back(text.substr(i, j - i));
                i = j;
            }
        } else {
            const std::size_t end = take_core(i);
            units.emplace_back(text.substr(i, end - i));
            i = end;
        }
    }
    return units;
}

/// Dense id <-> surface-string bijection. Surfaces join byte-exactly.
class Vocabulary {
public:
    Vocabulary() = default;

    explicit Vocabulary(std::vector<std::string> surfaces, TokenizerKind kind = TokenizerKind::word)
        : surfaces_(std::move(surfaces)), kind_(kind) {
        for (std::size_t i = 0; i < surfaces_.size(); ++i) {
            if (surfaces_[i].empty()) throw InputError("vocabulary surface strings must be non-empty");
            if (!index_.emplace(surfaces_[i], static_cast<TokenId>(i)).second)
                throw InputError("duplicate vocabulary surface '" + surfaces_[i] + "'");
        }
    }

    /// Surfaces " t0", " t1", ... for toy models.
    static Vocabulary synthetic(std::size_t size) {
        std::vector<std::string> s;
        s.reserve(size);
        for (std::size_t i = 0; i < size; ++i) s.push_back(" t" + std::to_string(i));
        return Vocabulary(std::move(s), TokenizerKind::word);
    }

    static Vocabulary bytes() {
        std::vector<std::string> s;
        for (int b = 0; b < 256; ++b) s.emplace_back(1, static_cast<char>(b));
        return Vocabulary(std::move(s), TokenizerKind::byte);
    }

    /// Sorted set of every unit occurring in the documents.
    static Vocabulary from_corpus(std::span<const std::string> documents, TokenizerKind kind = TokenizerKind::word) {
        if (kind == TokenizerKind::byte) return bytes();
        std::set<std::string> seen;
        for (const auto& doc : documents)
            for (auto& u : pretokenize(doc, kind)) seen.insert(std::move(u));
        return Vocabulary(std::vector<std::string>(seen.begin(), seen.end()), kind);
    }

    std::size_t size() const noexcept { return surfaces_.size(); }
    TokenizerKind tokenizer() const noexcept { return kind_; }
    const std::vector<std::string>& surfaces() const noexcept { return surfaces_; }

    const std::string& surface(TokenId id) const {
        if (id >= surfaces_.size()) throw InputError("unknown token id " + std::to_string(id));
        return surfaces_[id];
    }

    std::optional<TokenId> find(std::string_view s) const {
        auto it = index_.find(s);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<TokenId> tokenize(std::string_view text) const {
        std::vector<TokenId> ids;
        for (const auto& u : pretokenize(text, kind_)) {
            auto id = find(u);
            if (!id) throw InputError("unit '" + u + "' is not in the vocabulary");
            ids.push_back(*id);
        }
        return ids;
    }

private:
    std::vector<std::string> surfaces_;
    std::map<std::string, TokenId, std::less<>> index_;
    TokenizerKind kind_ = TokenizerKind::word;
};

inline void check_token_ids(std::span<const TokenId> tokens, std::size_t vocab_size) {
    for (TokenId t : tokens)
        if (t >= vocab_size)
            throw InputError("token id " + std::to_string(t) + " out of range for vocabulary of size " +
                             std::to_string(vocab_size));
}

/// Tokenizer translator, first half: ids back to raw text.
inline std::string translate_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab) {
    std::string text;
    for (TokenId t : tokens) text += vocab.surface(t);
    return text;
}

}  // namespace lowent
