#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowent/detectors.hpp"
#include "lowent/errors.hpp"
#include "lowent/navigator.hpp"
#include "lowent/rng.hpp"
#include "lowent/tagger.hpp"
#include "lowent/token_model.hpp"
#include "lowent/watermark.hpp"

namespace lowent {

// ---------------------------------------------------------------------------
// detection metrics

/// Mann-Whitney AUROC: P(pos > neg) + 0.5 P(pos == neg).
inline double auroc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) throw InputError("AUROC needs non-empty positive and negative scores");
    std::vector<double> neg(negatives.begin(), negatives.end());
    std::sort(neg.begin(), neg.end());
    double wins = 0.0;
    for (double x : positives) {
        const auto [lo, hi] = std::equal_range(neg.begin(), neg.end(), x);
        wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

struct TprAtFpr {
    double tpr = 0.0;
    double fpr = 0.0;
    double threshold = 0.0;  // scores strictly above are flagged
};

/// Highest TPR over thresholds drawn from the negative scores whose empirical
/// FPR (share of negatives strictly above) stays within `fpr_cap`.
inline TprAtFpr tpr_at_fpr_detail(std::span<const double> positives, std::span<const double> negatives,
                                  double fpr_cap = 0.05) {
    if (positives.empty() || negatives.empty()) throw InputError("TPR@FPR needs non-empty positive and negative scores");
    std::vector<double> neg(negatives.begin(), negatives.end());
    std::sort(neg.begin(), neg.end());
    const double n = static_cast<double>(neg.size());
    TprAtFpr out;
    out.threshold = neg.back();
    for (std::size_t i = neg.size(); i-- > 0;) {
        const auto above = static_cast<double>(neg.end() - std::upper_bound(neg.begin(), neg.end(), neg[i]));
        if (above / n > fpr_cap) break;
        out.threshold = neg[i];
        out.fpr = above / n;
    }
    const auto hits = std::count_if(positives.begin(), positives.end(), [&](double x) { return x > out.threshold; });
    out.tpr = static_cast<double>(hits) / static_cast<double>(positives.size());
    return out;
}

inline double tpr_at_fpr(std::span<const double> positives, std::span<const double> negatives, double fpr_cap = 0.05) {
    return tpr_at_fpr_detail(positives, negatives, fpr_cap).tpr;
}

/// Unified effectiveness: mean of relative quality and mean detectability.
inline double ues(double pass_rate, double pass_rate_non, double auroc_value, double tpr) {
    if (!(pass_rate_non > 0.0)) throw InputError("pass_rate_non must be > 0");
    return (pass_rate / pass_rate_non + 0.5 * (auroc_value + tpr)) / 2.0;
}

/// Performance-to-params ratio, params in billions.
inline double ppr(double ues_value, double params_billions) {
    if (!(params_billions > 0.0)) throw InputError("params must be > 0");
    return ues_value / params_billions;
}

// ---------------------------------------------------------------------------
// Type-I calibration

struct CalibrationResult {
    std::size_t trials = 0;
    std::size_t flagged = 0;
    double fpr = 0.0;
    double mean_z = 0.0;
    double var_z = 0.0;  // unbiased
    std::size_t insufficient = 0;
};

/// Uniform-random documents of `length` scored tokens (plus one anchor) run
/// through full detection, or through selective detection when a gate source
/// is supplied. Insufficient documents count toward the trial total but not
/// toward the z moments.
inline CalibrationResult type1_calibration(std::size_t trials, std::size_t length, const WatermarkConfig& cfg,
                                           std::size_t vocab_size, RngState rng,
                                           const EntropySource* gate = nullptr, double tau = 0.0) {
    if (trials == 0 || length == 0) throw InputError("calibration needs trials > 0 and length > 0");
    PartitionCache partitions(cfg.key, cfg.gamma, vocab_size);
    CalibrationResult out;
    out.trials = trials;
    std::vector<TokenId> doc(length + 1);
    double sum = 0.0, sum2 = 0.0;
    std::size_t used = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        for (auto& t : doc) t = static_cast<TokenId>(next_below(rng, vocab_size));
        const auto r = gate ? detect_masked(doc, cfg, partitions, gate->prepare(doc).scored_mask(tau))
                            : detect_full(doc, cfg, partitions);
        if (r.insufficient) {
            ++out.insufficient;
            continue;
        }
        if (r.verdict) ++out.flagged;
        sum += r.z;
        sum2 += r.z * r.z;
        ++used;
    }
    out.fpr = static_cast<double>(out.flagged) / static_cast<double>(trials);
    if (used > 0) out.mean_z = sum / static_cast<double>(used);
    if (used > 1) out.var_z = (sum2 - static_cast<double>(used) * out.mean_z * out.mean_z) / static_cast<double>(used - 1);
    return out;
}

inline nlohmann::json to_json(const CalibrationResult& c) {
    return {{"trials", c.trials}, {"flagged", c.flagged},       {"fpr", c.fpr},
            {"mean_z", c.mean_z}, {"var_z", c.var_z},           {"insufficient", c.insufficient}};
}

// ---------------------------------------------------------------------------
// substitution attack

/// Replacement policy: the reference model's conditional distribution with
/// the original token removed, or uniform over all other tokens.
class AttackSampler {
public:
    static AttackSampler uniform(std::size_t vocab_size) {
        AttackSampler s;
        s.vocab_size_ = vocab_size;
        return s;
    }

    static AttackSampler from_model(const LogitProvider& model) {
        AttackSampler s;
        s.model_ = &model;
        s.vocab_size_ = model.vocab_size();
        return s;
    }

    std::size_t vocab_size() const noexcept { return vocab_size_; }

    TokenId replace(std::span<const TokenId> context, TokenId original, RngState& rng) const {
        if (vocab_size_ < 2) return original;
        if (model_ && !context.empty()) {
            auto p = softmax(model_->next_logits(context));
            p[original] = 0.0;
            double z = 0.0;
            for (double v : p) z += v;
            if (z > 0.0) {
                for (double& v : p) v /= z;
                return sample_token(p, rng);
            }
        }
        const auto r = static_cast<TokenId>(next_below(rng, vocab_size_ - 1));
        return r >= original ? r + 1 : r;
    }

private:
    const LogitProvider* model_ = nullptr;
    std::size_t vocab_size_ = 0;
};

/// Replaces floor(level * |T|) uniformly chosen positions. `context` is the
/// text preceding the sequence, used by model-based replacement.
inline std::vector<TokenId> substitution_attack(std::span<const TokenId> tokens, double level, RngState& rng,
                                                const AttackSampler& sampler, std::span<const TokenId> context = {}) {
    if (!(level >= 0.0 && level <= 1.0)) throw InputError("attack level must lie in [0, 1]");
    std::vector<TokenId> out(tokens.begin(), tokens.end());
    const auto m = static_cast<std::size_t>(std::floor(level * static_cast<double>(out.size()) + 1e-9));
    if (m == 0) return out;
    check_token_ids(tokens, sampler.vocab_size());
    std::vector<std::size_t> idx(out.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + next_below(rng, idx.size() - i)]);
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(chosen.begin(), chosen.end());
    std::vector<TokenId> history(context.begin(), context.end());
    std::size_t next = 0;
    for (std::size_t pos = 0; pos < out.size(); ++pos) {
        if (next < chosen.size() && chosen[next] == pos) {
            out[pos] = sampler.replace(history, out[pos], rng);
            ++next;
        }
        history.push_back(out[pos]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// quality proxy

/// Mean log-likelihood per generated token under the reference model.
inline double mean_log_likelihood(const LogitProvider& model, std::span<const TokenId> prompt,
                                  std::span<const TokenId> generated) {
    if (generated.empty()) return 0.0;
    std::vector<TokenId> ctx(prompt.begin(), prompt.end());
    double ll = 0.0;
    for (TokenId t : generated) {
        const auto p = softmax(model.next_logits(ctx));
        ll += std::log(std::max(p[t], 1e-300));
        ctx.push_back(t);
    }
    return ll / static_cast<double>(generated.size());
}

/// exp(LL_watermarked - LL_unwatermarked), clipped to [0, 1].
inline double pass_rate_proxy(double ll_watermarked, double ll_unwatermarked) {
    return std::clamp(std::exp(ll_watermarked - ll_unwatermarked), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// sweep

struct SweepScheme {
    Scheme scheme = Scheme::kgw;
    bool navigator = false;

    std::string label() const { return std::string(to_string(scheme)) + (navigator ? "+nav" : ""); }
};

/// "kgw", "sweet", "ewd", "ie", optionally suffixed with "+nav" (sweet and ie only).
inline SweepScheme parse_sweep_scheme(std::string_view s) {
    SweepScheme out;
    constexpr std::string_view suffix = "+nav";
    if (s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix) {
        out.navigator = true;
        s.remove_suffix(suffix.size());
    }
    out.scheme = parse_scheme(s);
    if (out.navigator && out.scheme != Scheme::sweet && out.scheme != Scheme::ie)
        throw ConfigError("the navigator applies to sweet and ie only");
    return out;
}

struct SweepConfig {
    std::vector<SweepScheme> schemes;
    std::vector<double> deltas{0.0, 1.0, 2.0, 3.0, 5.0};
    std::vector<double> gammas{0.5};
    double tau = 0.6;
    NavigatorConfig navigator;
    std::size_t n_docs = 200;
    int length = 200;
    std::uint64_t key = 15485863;
    double z_threshold = 4.0;
    std::uint64_t seed = 0;
};

struct SweepRow {
    std::string scheme;
    double gamma = 0.0;
    double delta = 0.0;
    double tau = 0.0;
    bool navigator = false;
    double auroc = 0.0;
    double tpr = 0.0;
    double pass_rate = 0.0;
    double ues = 0.0;
    std::optional<double> ppr;
    std::size_t n_docs = 0;
    std::uint64_t seed = 0;
    std::string error;
};

struct CellScores {
    std::vector<double> positive;
    std::vector<double> negative;
    double pass_rate = 0.0;
};

namespace detail {

struct SweepDoc {
    std::vector<TokenId> prompt;
    std::vector<TokenId> generated;
};

inline std::vector<TokenId> anchored(const SweepDoc& d) {
    std::vector<TokenId> doc{d.prompt.back()};
    doc.insert(doc.end(), d.generated.begin(), d.generated.end());
    return doc;
}

inline std::vector<TokenId> oracle_context(const SweepDoc& d) {
    return std::vector<TokenId>(d.prompt.begin(), d.prompt.end() - 1);
}

}  // namespace detail

/// Generates watermarked and unwatermarked documents for one grid cell and
/// scores both with the scheme's detector.
inline CellScores run_cell(const LogitProvider& model, std::span<const std::vector<TokenId>> prompts,
                           const SweepScheme& scheme, const WatermarkConfig& cfg, const SweepConfig& sc,
                           const TaggerBank* bank) {
    if (prompts.empty()) throw InputError("sweep needs at least one prompt");
    if (scheme.scheme == Scheme::ie && !bank) throw ConfigError("scheme ie needs a tagger bank");
    const EntropyGate gate = [&] {
        switch (scheme.scheme) {
            case Scheme::sweet: return EntropyGate::above(sc.tau);
            case Scheme::ie: return make_tagger_gate(*bank, sc.tau);
            default: return EntropyGate::always();
        }
    }();
    WatermarkConfig null_cfg = cfg;
    null_cfg.delta = 0.0;
    const std::size_t vocab = model.vocab_size();
    PartitionCache partitions(cfg.key, cfg.gamma, vocab);

    auto score = [&](const detail::SweepDoc& d) {
        const auto doc = detail::anchored(d);
        switch (scheme.scheme) {
            case Scheme::kgw: return detect_full(doc, cfg, partitions).z;
            case Scheme::ewd:
                return detect_ewd_prepared(doc, cfg, partitions,
                                           EntropySource::oracle(model, detail::oracle_context(d)).prepare(doc))
                    .z;
            case Scheme::sweet: {
                const auto prepared = EntropySource::oracle(model, detail::oracle_context(d)).prepare(doc);
                if (scheme.navigator) return detect_navigated(doc, cfg, partitions, prepared, sc.navigator).report.z;
                return detect_masked(doc, cfg, partitions, prepared.scored_mask(sc.tau)).z;
            }
            case Scheme::ie: {
                const auto prepared = EntropySource::tagger(*bank, detail::oracle_context(d)).prepare(doc);
                if (scheme.navigator) return detect_navigated(doc, cfg, partitions, prepared, sc.navigator).report.z;
                return detect_masked(doc, cfg, partitions, prepared.scored_mask(sc.tau)).z;
            }
        }
        return 0.0;
    };

    CellScores out;
    double ll_wm = 0.0, ll_null = 0.0;
    const std::string cell = scheme.label() + "/" + std::to_string(cfg.gamma) + "/" + std::to_string(cfg.delta);
    for (std::size_t i = 0; i < sc.n_docs; ++i) {
        const auto& prompt = prompts[i % prompts.size()];
        RngState wm_rng = substream(sc.seed, "sweep/watermarked/" + cell + "/" + std::to_string(i));
        RngState null_rng = substream(sc.seed, "sweep/human/" + std::to_string(i));
        detail::SweepDoc wm{prompt, generate(model, prompt, cfg, gate, sc.length, wm_rng).tokens.tokens};
        detail::SweepDoc human{prompt,
                               generate(model, prompt, null_cfg, EntropyGate::always(), sc.length, null_rng).tokens.tokens};
        out.positive.push_back(score(wm));
        out.negative.push_back(score(human));
        ll_wm += mean_log_likelihood(model, prompt, wm.generated);
        ll_null += mean_log_likelihood(model, prompt, human.generated);
    }
    const double n = static_cast<double>(sc.n_docs);
    out.pass_rate = pass_rate_proxy(ll_wm / n, ll_null / n);
    return out;
}

/// One row per (scheme, gamma, delta). Cell failures land in the error column.
inline std::vector<SweepRow> sweep(const LogitProvider& model, std::span<const std::vector<TokenId>> prompts,
                                   const SweepConfig& sc, const TaggerBank* bank = nullptr) {
    std::vector<SweepRow> rows;
    for (const auto& scheme : sc.schemes) {
        for (double gamma : sc.gammas) {
            for (double delta : sc.deltas) {
                SweepRow row;
                row.scheme = scheme.label();
                row.gamma = gamma;
                row.delta = delta;
                row.tau = sc.tau;
                row.navigator = scheme.navigator;
                row.n_docs = sc.n_docs;
                row.seed = sc.seed;
                try {
                    WatermarkConfig cfg;
                    cfg.gamma = gamma;
                    cfg.delta = delta;
                    cfg.key = sc.key;
                    cfg.z_threshold = sc.z_threshold;
                    cfg.scheme = scheme.scheme;
                    cfg.tau_gen = sc.tau;
                    const auto cell = run_cell(model, prompts, scheme, cfg, sc, bank);
                    row.auroc = auroc(cell.positive, cell.negative);
                    row.tpr = tpr_at_fpr(cell.positive, cell.negative, 0.05);
                    row.pass_rate = cell.pass_rate;
                    row.ues = ues(row.pass_rate, 1.0, row.auroc, row.tpr);
                    std::size_t params = 0;
                    if (scheme.scheme == Scheme::sweet || scheme.scheme == Scheme::ewd) params = model.parameter_count();
                    if (scheme.scheme == Scheme::ie && bank) params = bank->parameter_count();
                    if (params > 0) row.ppr = ppr(row.ues, static_cast<double>(params) * 1e-9);
                } catch (const std::exception& e) {
                    row.error = e.what();
                }
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

inline nlohmann::json to_json(const SweepRow& r) {
    return {{"scheme", r.scheme},
            {"gamma", r.gamma},
            {"delta", r.delta},
            {"tau", r.tau},
            {"navigator", r.navigator},
            {"auroc", r.auroc},
            {"tpr", r.tpr},
            {"pass_rate", r.pass_rate},
            {"ues", r.ues},
            {"ppr", r.ppr ? nlohmann::json(*r.ppr) : nlohmann::json(nullptr)},
            {"n_docs", r.n_docs},
            {"seed", r.seed},
            {"error", r.error}};
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
    std::string out = "scheme,gamma,delta,tau,navigator,auroc,tpr,pass_rate,ues,ppr,n_docs,seed,error\n";
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out += r.scheme + "," + num(r.gamma) + "," + num(r.delta) + "," + num(r.tau) + "," +
               (r.navigator ? "true" : "false") + "," + num(r.auroc) + "," + num(r.tpr) + "," + num(r.pass_rate) + "," +
               num(r.ues) + "," + (r.ppr ? num(*r.ppr) : std::string()) + "," + std::to_string(r.n_docs) + "," +
               std::to_string(r.seed) + "," + err + "\n";
    }
    return out;
}

}  // namespace lowent
