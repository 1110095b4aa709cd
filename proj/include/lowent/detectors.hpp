#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowent/errors.hpp"
#include "lowent/features.hpp"
#include "lowent/navigator.hpp"
#include "lowent/tagger.hpp"
#include "lowent/token_model.hpp"
#include "lowent/watermark.hpp"

namespace lowent {

struct DetectionReport {
    double z = 0.0;
    std::size_t green_count = 0;
    std::size_t total_tokens = 0;
    std::size_t scored_tokens = 0;
    double watermark_ratio = 0.0;
    std::optional<double> tau_hat;
    bool verdict = false;
    bool insufficient = false;

    friend bool operator==(const DetectionReport&, const DetectionReport&) = default;
};

inline nlohmann::json to_json(const DetectionReport& r) {
    return {{"z", r.z},
            {"green_count", r.green_count},
            {"total_tokens", r.total_tokens},
            {"scored_tokens", r.scored_tokens},
            {"watermark_ratio", r.watermark_ratio},
            {"tau_hat", r.tau_hat ? nlohmann::json(*r.tau_hat) : nlohmann::json(nullptr)},
            {"verdict", r.verdict},
            {"insufficient", r.insufficient}};
}

inline DetectionReport report_from_json(const nlohmann::json& j) {
    DetectionReport r;
    r.z = j.at("z").get<double>();
    r.green_count = j.at("green_count").get<std::size_t>();
    r.total_tokens = j.at("total_tokens").get<std::size_t>();
    r.scored_tokens = j.at("scored_tokens").get<std::size_t>();
    r.watermark_ratio = j.at("watermark_ratio").get<double>();
    if (!j.at("tau_hat").is_null()) r.tau_hat = j.at("tau_hat").get<double>();
    r.verdict = j.at("verdict").get<bool>();
    r.insufficient = j.at("insufficient").get<bool>();
    return r;
}

/// (|S|_G - gamma |T|) / sqrt(gamma (1 - gamma) |T|).
inline double z_score(std::size_t green_count, std::size_t scored, double gamma) {
    if (scored == 0) throw InsufficientDataError("z-score needs at least one scored token");
    const double t = static_cast<double>(scored);
    return (static_cast<double>(green_count) - gamma * t) / std::sqrt(gamma * (1.0 - gamma) * t);
}

inline double z_score_full(std::size_t green_count, std::size_t total, double gamma) {
    return z_score(green_count, total, gamma);
}

/// The same statistic written in terms of the watermark ratio, |T^| = WR |T|,
/// over continuous arguments.
inline double z_from_ratio(double green_count, double watermark_ratio, double total, double gamma) {
    const double scored = watermark_ratio * total;
    if (!(scored > 0.0)) throw InsufficientDataError("z-score needs a positive scored count");
    return (green_count - gamma * scored) / std::sqrt(gamma * (1.0 - gamma) * scored);
}

/// Per-position gating signal for one document, computed once so several
/// thresholds can be scored cheaply. Position t (t >= 1) concerns the
/// distribution that produced tokens[t], i.e. the one conditioned on
/// context + tokens[0..t).
class PreparedDocument {
public:
    enum class Kind { entropy, tagger };

    static PreparedDocument from_entropies(std::vector<double> per_position) {
        PreparedDocument d;
        d.kind_ = Kind::entropy;
        d.entropy_ = std::move(per_position);
        return d;
    }

    static PreparedDocument from_features(const TaggerBank& bank, std::vector<FeatureVector> per_position) {
        PreparedDocument d;
        d.kind_ = Kind::tagger;
        d.bank_ = &bank;
        d.features_ = std::move(per_position);
        return d;
    }

    Kind kind() const noexcept { return kind_; }
    bool continuous() const noexcept { return kind_ == Kind::entropy; }

    /// Number of scorable positions (document length - 1).
    std::size_t positions() const noexcept { return kind_ == Kind::entropy ? entropy_.size() : features_.size(); }

    /// entropies()[i] belongs to token i + 1.
    std::span<const double> entropies() const {
        if (kind_ != Kind::entropy) throw ConfigError("tagger sources give labels, not continuous entropy");
        return entropy_;
    }

    /// mask[i] == true when token i + 1 is scored at threshold tau.
    std::vector<bool> scored_mask(double tau) const {
        std::vector<bool> mask(positions());
        if (kind_ == Kind::entropy) {
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = entropy_[i] > tau;
        } else {
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = !predict_low_features(*bank_, features_[i], tau).low;
        }
        return mask;
    }

private:
    Kind kind_ = Kind::entropy;
    std::vector<double> entropy_;
    std::vector<FeatureVector> features_;
    const TaggerBank* bank_ = nullptr;
};

/// Where the detector gets entropy information: the original model (oracle),
/// a tagger bank, or precomputed per-token values. Borrowed models and banks
/// must outlive the source.
class EntropySource {
public:
    enum class Variant { oracle, tagger, external };

    /// `context` is prepended to the document when querying the model, for
    /// higher-order models that need more than the anchor token.
    static EntropySource oracle(const LogitProvider& model, std::vector<TokenId> context = {}) {
        EntropySource s;
        s.variant_ = Variant::oracle;
        s.model_ = &model;
        s.context_ = std::move(context);
        return s;
    }

    static EntropySource tagger(const TaggerBank& bank, std::vector<TokenId> context = {}) {
        EntropySource s;
        s.variant_ = Variant::tagger;
        s.bank_ = &bank;
        s.context_ = std::move(context);
        return s;
    }

    /// One value per document token (first ignored) or per scorable token.
    static EntropySource external(std::vector<double> entropies) {
        EntropySource s;
        s.variant_ = Variant::external;
        s.external_ = std::move(entropies);
        return s;
    }

    Variant variant() const noexcept { return variant_; }

    PreparedDocument prepare(std::span<const TokenId> tokens) const {
        const std::size_t n = tokens.empty() ? 0 : tokens.size() - 1;
        switch (variant_) {
            case Variant::external: {
                if (external_.size() == n) return PreparedDocument::from_entropies(external_);
                if (external_.size() == n + 1 && n > 0)
                    return PreparedDocument::from_entropies(std::vector<double>(external_.begin() + 1, external_.end()));
                throw FormatError("external entropy array has " + std::to_string(external_.size()) +
                                  " values for a document of " + std::to_string(tokens.size()) + " tokens");
            }
            case Variant::oracle: {
                std::vector<TokenId> ctx = context_;
                std::vector<double> h;
                h.reserve(n);
                for (std::size_t t = 0; t < n; ++t) {
                    ctx.push_back(tokens[t]);
                    h.push_back(shannon_entropy(softmax(model_->next_logits(ctx))));
                }
                return PreparedDocument::from_entropies(std::move(h));
            }
            case Variant::tagger: {
                std::vector<TokenId> ctx = context_;
                std::vector<FeatureVector> f;
                f.reserve(n);
                for (std::size_t t = 0; t < n; ++t) {
                    ctx.push_back(tokens[t]);
                    f.push_back(extract(ctx, bank_->vocab(), bank_->extractor()));
                }
                return PreparedDocument::from_features(*bank_, std::move(f));
            }
        }
        throw ConfigError("unknown entropy source");
    }

private:
    Variant variant_ = Variant::oracle;
    const LogitProvider* model_ = nullptr;
    const TaggerBank* bank_ = nullptr;
    std::vector<TokenId> context_;
    std::vector<double> external_;
};

/// Counts green tokens among positions selected by `mask` (mask[i] covers
/// token i + 1; the first token only seeds the partition of the second).
inline DetectionReport detect_masked(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                     PartitionCache& partitions, const std::vector<bool>& mask) {
    cfg.validate();
    check_token_ids(tokens, partitions.vocab_size());
    DetectionReport r;
    if (tokens.size() < 2) {
        r.insufficient = true;
        return r;
    }
    if (mask.size() != tokens.size() - 1) throw InputError("gate mask length does not match document");
    r.total_tokens = tokens.size() - 1;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        if (!mask[t - 1]) continue;
        ++r.scored_tokens;
        if (partitions.is_green(tokens[t - 1], tokens[t])) ++r.green_count;
    }
    r.watermark_ratio = static_cast<double>(r.scored_tokens) / static_cast<double>(r.total_tokens);
    if (r.scored_tokens == 0) {
        r.insufficient = true;
        return r;
    }
    r.z = z_score(r.green_count, r.scored_tokens, cfg.gamma);
    r.verdict = r.z > cfg.z_threshold;
    return r;
}

inline DetectionReport detect_full(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                   PartitionCache& partitions) {
    const std::vector<bool> all(tokens.empty() ? 0 : tokens.size() - 1, true);
    return detect_masked(tokens, cfg, partitions, all);
}

inline DetectionReport detect_full(std::span<const TokenId> tokens, const WatermarkConfig& cfg, std::size_t vocab_size) {
    PartitionCache partitions(cfg.key, cfg.gamma, vocab_size);
    return detect_full(tokens, cfg, partitions);
}

/// Scores only positions whose gate says "high entropy" at `tau`.
inline DetectionReport detect_selective(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                        std::size_t vocab_size, const EntropySource& source, double tau) {
    PartitionCache partitions(cfg.key, cfg.gamma, vocab_size);
    if (tokens.size() < 2) return detect_masked(tokens, cfg, partitions, {});
    return detect_masked(tokens, cfg, partitions, source.prepare(tokens).scored_mask(tau));
}

/// Entropy-weighted statistic with w_t = max(H_t, 0):
/// z = (sum_green w - gamma sum w) / sqrt(gamma (1 - gamma) sum w^2).
/// scored_tokens / green_count count positions with positive weight.
inline DetectionReport detect_ewd_prepared(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                           PartitionCache& partitions, const PreparedDocument& doc) {
    cfg.validate();
    check_token_ids(tokens, partitions.vocab_size());
    DetectionReport r;
    if (tokens.size() < 2) {
        r.insufficient = true;
        return r;
    }
    const auto h = doc.entropies();
    if (h.size() != tokens.size() - 1) throw InputError("entropy count does not match document");
    r.total_tokens = tokens.size() - 1;
    double sum_w = 0.0, sum_w2 = 0.0, green_w = 0.0;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        const double w = std::max(h[t - 1], 0.0);
        const bool green = partitions.is_green(tokens[t - 1], tokens[t]);
        sum_w += w;
        sum_w2 += w * w;
        if (green) green_w += w;
        if (w > 0.0) {
            ++r.scored_tokens;
            if (green) ++r.green_count;
        }
    }
    r.watermark_ratio = static_cast<double>(r.scored_tokens) / static_cast<double>(r.total_tokens);
    if (sum_w2 <= 0.0) {
        r.insufficient = true;
        return r;
    }
    r.z = (green_w - cfg.gamma * sum_w) / std::sqrt(cfg.gamma * (1.0 - cfg.gamma) * sum_w2);
    r.verdict = r.z > cfg.z_threshold;
    return r;
}

inline DetectionReport detect_ewd(std::span<const TokenId> tokens, const WatermarkConfig& cfg, std::size_t vocab_size,
                                  const EntropySource& source) {
    if (source.variant() == EntropySource::Variant::tagger)
        throw ConfigError("entropy-weighted detection needs continuous entropy (oracle or external)");
    PartitionCache partitions(cfg.key, cfg.gamma, vocab_size);
    if (tokens.size() < 2) return detect_masked(tokens, cfg, partitions, {});
    return detect_ewd_prepared(tokens, cfg, partitions, source.prepare(tokens));
}

struct NavigatedDetection {
    DetectionReport report;
    NavigatorResult navigation;
};

/// Runs the threshold navigator with selective detection as the per-threshold
/// scorer, then reports the detection at the chosen threshold.
inline NavigatedDetection detect_navigated(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                           PartitionCache& partitions, const PreparedDocument& doc,
                                           const NavigatorConfig& nav) {
    NavigatedDetection out;
    if (tokens.size() < 2) {
        out.report = detect_masked(tokens, cfg, partitions, {});
        out.navigation.grid = nav.grid();
        out.navigation.tau_hat = out.navigation.grid.front();
        out.report.tau_hat = out.navigation.tau_hat;
        return out;
    }
    out.navigation = navigate(nav, [&](double tau) {
        const auto r = detect_masked(tokens, cfg, partitions, doc.scored_mask(tau));
        return TauStats{tau, r.watermark_ratio, r.green_count};
    });
    out.report = detect_masked(tokens, cfg, partitions, doc.scored_mask(out.navigation.tau_hat));
    out.report.tau_hat = out.navigation.tau_hat;
    return out;
}

/// Tagger-gated detection with per-document threshold search. The tagger
/// replaces the language model entirely; only the bank is needed.
inline NavigatedDetection detect_ie(std::span<const TokenId> tokens, const WatermarkConfig& cfg,
                                    const TaggerBank& bank, const NavigatorConfig& nav,
                                    std::vector<TokenId> context = {}) {
    for (double tau : nav.grid()) (void)bank.head(tau);
    PartitionCache partitions(cfg.key, cfg.gamma, bank.vocab().size());
    if (tokens.size() < 2) return detect_navigated(tokens, cfg, partitions, PreparedDocument{}, nav);
    const auto doc = EntropySource::tagger(bank, std::move(context)).prepare(tokens);
    return detect_navigated(tokens, cfg, partitions, doc, nav);
}

}  // namespace lowent
