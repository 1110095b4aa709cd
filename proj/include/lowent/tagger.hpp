#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowent/errors.hpp"
#include "lowent/features.hpp"
#include "lowent/rng.hpp"
#include "lowent/token_model.hpp"
#include "lowent/vocabulary.hpp"
#include "lowent/watermark.hpp"

namespace lowent {

struct TaggerSample {
    FeatureVector features;
    double entropy = 0.0;  // nats, from the reference model
};

/// Low-entropy label: strictly below the threshold.
inline bool label_low(double entropy, double tau) noexcept { return entropy < tau; }

/// One sample per (sequence, k) for k = 1 .. len-1: the features of the first
/// k tokens and the exact entropy of the model's next-token distribution.
inline std::vector<TaggerSample> preprocess(std::span<const std::vector<TokenId>> corpus, const LogitProvider& model,
                                            const Vocabulary& vocab, const ExtractorConfig& extractor) {
    std::vector<TaggerSample> out;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) throw InputError("preprocess needs sequences of length >= 2");
        for (std::size_t k = 1; k < seq.size(); ++k) {
            const std::span<const TokenId> prefix(seq.data(), k);
            TaggerSample s;
            s.entropy = shannon_entropy(softmax(model.next_logits(prefix)));
            s.features = extract(prefix, vocab, extractor);
            out.push_back(std::move(s));
        }
    }
    return out;
}

/// Same as preprocess() but features come from a precomputed table whose rows
/// align 1:1 with the emitted samples.
inline std::vector<TaggerSample> preprocess_with_table(std::span<const std::vector<TokenId>> corpus,
                                                       const LogitProvider& model,
                                                       std::span<const FeatureVector> table) {
    std::vector<TaggerSample> out;
    std::size_t row = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) throw InputError("preprocess needs sequences of length >= 2");
        for (std::size_t k = 1; k < seq.size(); ++k, ++row) {
            if (row >= table.size()) throw FormatError("embedding table has fewer rows than samples");
            out.push_back({table[row], shannon_entropy(softmax(model.next_logits({seq.data(), k})))});
        }
    }
    if (row != table.size()) throw FormatError("embedding table has more rows than samples");
    return out;
}

/// Mean binary cross-entropy; predictions are clamped to [1e-12, 1 - 1e-12].
inline double bce_loss(std::span<const double> predictions, std::span<const double> labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw InputError("bce_loss needs equally sized, non-empty inputs");
    double sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double p = std::clamp(predictions[i], 1e-12, 1.0 - 1e-12);
        sum += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    return -sum / static_cast<double>(predictions.size());
}

/// Entropy bin index: floor(x / 0.3) clamped to [0, 5] (5 covers >= 1.5 nats).
inline int entropy_bin_index(double x) {
    return static_cast<int>(std::clamp(std::floor(x / 0.3 + 1e-9), 0.0, 5.0));
}

inline double entropy_bin(double x) { return entropy_bin_index(x) * 0.3; }

// ---------------------------------------------------------------------------
// MLP head: input -> hidden (ReLU) -> 1 (logistic or linear)

enum class HeadOutput { logistic, linear };

class MlpHead {
public:
    MlpHead() = default;

    /// PyTorch-style init: every parameter ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    MlpHead(std::size_t input, std::size_t hidden, HeadOutput output, RngState& rng)
        : input_(input), hidden_(hidden), output_(output), params_(param_size(input, hidden)) {
        if (input == 0 || hidden == 0) throw ConfigError("MLP dimensions must be positive");
        const double b1 = 1.0 / std::sqrt(static_cast<double>(input));
        const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const double bound = i < w2_offset() ? b1 : b2;
            params_[i] = (2.0 * next_unit(rng) - 1.0) * bound;
        }
    }

    MlpHead(std::size_t input, std::size_t hidden, HeadOutput output, std::vector<double> params)
        : input_(input), hidden_(hidden), output_(output), params_(std::move(params)) {
        if (params_.size() != param_size(input, hidden)) throw FormatError("MLP parameter count mismatch");
        for (double p : params_)
            if (!std::isfinite(p)) throw FormatError("MLP parameters must be finite");
    }

    static std::size_t param_size(std::size_t input, std::size_t hidden) { return input * hidden + 2 * hidden + 1; }

    std::size_t input_dim() const noexcept { return input_; }
    std::size_t hidden_dim() const noexcept { return hidden_; }
    HeadOutput output() const noexcept { return output_; }
    std::span<const double> params() const noexcept { return params_; }
    std::span<double> params() noexcept { return params_; }

    // Layout: W1 as input x hidden row-major, then b1, w2, b2.
    std::size_t b1_offset() const noexcept { return input_ * hidden_; }
    std::size_t w2_offset() const noexcept { return b1_offset() + hidden_; }
    std::size_t b2_offset() const noexcept { return w2_offset() + hidden_; }

    /// Output pre-activation; fills `hidden_pre` when given.
    double logit(std::span<const double> x, std::vector<double>* hidden_pre = nullptr) const {
        if (x.size() != input_) throw InputError("feature dimension mismatch");
        std::vector<double> pre(params_.begin() + static_cast<std::ptrdiff_t>(b1_offset()),
                                params_.begin() + static_cast<std::ptrdiff_t>(w2_offset()));
        for (std::size_t k = 0; k < input_; ++k) {
            const double xk = x[k];
            if (xk == 0.0) continue;
            const double* row = params_.data() + k * hidden_;
            for (std::size_t j = 0; j < hidden_; ++j) pre[j] += row[j] * xk;
        }
        double z = params_[b2_offset()];
        const double* w2 = params_.data() + w2_offset();
        for (std::size_t j = 0; j < hidden_; ++j)
            if (pre[j] > 0.0) z += w2[j] * pre[j];
        if (hidden_pre) *hidden_pre = std::move(pre);
        return z;
    }

    /// Probability for logistic heads, raw value for linear heads.
    double forward(std::span<const double> x) const {
        const double z = logit(x);
        return output_ == HeadOutput::logistic ? sigmoid(z) : z;
    }

    static double sigmoid(double z) {
        if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
        const double e = std::exp(z);
        return e / (1.0 + e);
    }

    /// Mean batch loss (BCE for logistic, squared error for linear) and its
    /// gradient with respect to every parameter, accumulated into `grad`.
    double loss_and_gradient(std::span<const FeatureVector> xs, std::span<const double> targets,
                             std::vector<double>& grad) const {
        grad.assign(params_.size(), 0.0);
        const double n = static_cast<double>(xs.size());
        double loss = 0.0;
        std::vector<double> pre;
        const double* w2 = params_.data() + w2_offset();
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double z = logit(xs[i], &pre);
            double dz = 0.0;
            if (output_ == HeadOutput::logistic) {
                const double p = sigmoid(z);
                const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
                loss -= targets[i] * std::log(pc) + (1.0 - targets[i]) * std::log(1.0 - pc);
                dz = (p - targets[i]) / n;
            } else {
                const double r = z - targets[i];
                loss += r * r;
                dz = 2.0 * r / n;
            }
            grad[b2_offset()] += dz;
            for (std::size_t j = 0; j < hidden_; ++j) {
                if (pre[j] <= 0.0) continue;
                grad[w2_offset() + j] += dz * pre[j];
                const double dpre = dz * w2[j];
                grad[b1_offset() + j] += dpre;
                const auto& x = xs[i];
                for (std::size_t k = 0; k < input_; ++k) {
                    if (x[k] == 0.0) continue;
                    grad[k * hidden_ + j] += dpre * x[k];
                }
            }
        }
        return loss / n;
    }

private:
    std::size_t input_ = 0;
    std::size_t hidden_ = 0;
    HeadOutput output_ = HeadOutput::logistic;
    std::vector<double> params_;
};

struct TrainConfig {
    int epochs = 100;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t hidden = 128;
    double decision_threshold = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs <= 0 || batch_size == 0 || hidden == 0) throw ConfigError("epochs, batch_size and hidden must be positive");
        if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight_decay must be non-negative");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
};

struct TrainResult {
    MlpHead head;
    std::vector<EpochMetrics> history;
    int best_epoch = 0;
    double best_validation_accuracy = 0.0;
};

/// Decoupled-weight-decay Adam (AdamW) state over a flat parameter vector.
class AdamW {
public:
    AdamW(std::size_t n, const TrainConfig& cfg) : m_(n, 0.0), v_(n, 0.0), cfg_(cfg) {}

    void step(std::span<double> params, std::span<const double> grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] *= decay;
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_eps);
        }
    }

private:
    std::vector<double> m_, v_;
    TrainConfig cfg_;
    int t_ = 0;
};

namespace detail {

/// Accuracy of `head` on (xs, targets): class agreement for logistic heads,
/// entropy-bin agreement for linear heads.
inline double head_accuracy(const MlpHead& head, std::span<const FeatureVector> xs, std::span<const double> targets,
                            double threshold) {
    if (xs.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double out = head.forward(xs[i]);
        if (head.output() == HeadOutput::logistic) {
            hit += ((out >= threshold) == (targets[i] >= 0.5)) ? 1 : 0;
        } else {
            hit += entropy_bin_index(out) == entropy_bin_index(targets[i]) ? 1 : 0;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(xs.size());
}

}  // namespace detail

/// Mini-batch AdamW training. Returns the parameters of the epoch with the
/// highest validation accuracy (earliest on ties; training accuracy when the
/// validation set is empty).
inline TrainResult train_mlp(std::span<const FeatureVector> train_x, std::span<const double> train_y,
                             std::span<const FeatureVector> val_x, std::span<const double> val_y, HeadOutput output,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (train_x.empty()) throw TrainingError("empty training set");
    if (train_x.size() != train_y.size() || val_x.size() != val_y.size()) throw InputError("feature/target count mismatch");
    const std::size_t dim = train_x.front().size();
    RngState init = substream(cfg.seed, "init");
    RngState shuffle = substream(cfg.seed, "shuffle");
    TrainResult result;
    MlpHead head(dim, cfg.hidden, output, init);
    AdamW opt(head.params().size(), cfg);

    std::vector<std::size_t> order(train_x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> grad;
    std::vector<FeatureVector> bx;
    std::vector<double> by;
    result.best_validation_accuracy = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[next_below(shuffle, i + 1)]);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            bx.clear();
            by.clear();
            for (std::size_t i = start; i < end; ++i) {
                bx.push_back(train_x[order[i]]);
                by.push_back(train_y[order[i]]);
            }
            loss_sum += head.loss_and_gradient(bx, by, grad) * static_cast<double>(end - start);
            opt.step(head.params(), grad);
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_sum / static_cast<double>(order.size());
        m.train_accuracy = detail::head_accuracy(head, train_x, train_y, cfg.decision_threshold);
        m.validation_accuracy = val_x.empty() ? m.train_accuracy
                                              : detail::head_accuracy(head, val_x, val_y, cfg.decision_threshold);
        result.history.push_back(m);
        if (m.validation_accuracy > result.best_validation_accuracy) {
            result.best_validation_accuracy = m.validation_accuracy;
            result.best_epoch = epoch;
            result.head = head;
        }
    }
    return result;
}

namespace detail {

inline void split_labeled(std::span<const TaggerSample> samples, double tau, std::vector<FeatureVector>& x,
                          std::vector<double>& y) {
    x.clear();
    y.clear();
    for (const auto& s : samples) {
        x.push_back(s.features);
        y.push_back(label_low(s.entropy, tau) ? 1.0 : 0.0);
    }
}

}  // namespace detail

/// Binary low-entropy head for one threshold. Fails when the training split
/// holds only one class.
inline TrainResult train_head(std::span<const TaggerSample> train, std::span<const TaggerSample> validation, double tau,
                              const TrainConfig& cfg) {
    std::vector<FeatureVector> tx, vx;
    std::vector<double> ty, vy;
    detail::split_labeled(train, tau, tx, ty);
    detail::split_labeled(validation, tau, vx, vy);
    const auto positives = std::count(ty.begin(), ty.end(), 1.0);
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(ty.size()))
        throw TrainingError("training split is single-class at tau=" + std::to_string(tau));
    return train_mlp(tx, ty, vx, vy, HeadOutput::logistic, cfg);
}

/// Deterministic train/validation split: a seeded shuffle, last `fraction` held out.
inline std::pair<std::vector<TaggerSample>, std::vector<TaggerSample>> split_samples(std::vector<TaggerSample> samples,
                                                                                     double fraction,
                                                                                     std::uint64_t seed) {
    RngState rng = substream(seed, "split");
    for (std::size_t i = samples.size(); i > 1; --i) std::swap(samples[i - 1], samples[next_below(rng, i)]);
    const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(samples.size())));
    std::vector<TaggerSample> val(samples.end() - static_cast<std::ptrdiff_t>(n_val), samples.end());
    samples.resize(samples.size() - n_val);
    return {std::move(samples), std::move(val)};
}

struct ObjectiveComparison {
    double classification_accuracy = 0.0;
    double regression_accuracy = 0.0;  // entropy-bin agreement
};

/// Trains a classifier head at `tau` and a squared-error regressor on raw
/// entropy with the same body, and scores both on `test`.
inline ObjectiveComparison classification_vs_regression_report(std::span<const TaggerSample> train,
                                                               std::span<const TaggerSample> validation,
                                                               std::span<const TaggerSample> test, double tau,
                                                               const TrainConfig& cfg) {
    ObjectiveComparison out;
    const auto cls = train_head(train, validation, tau, cfg);
    std::vector<FeatureVector> x;
    std::vector<double> y;
    detail::split_labeled(test, tau, x, y);
    out.classification_accuracy = detail::head_accuracy(cls.head, x, y, cfg.decision_threshold);

    std::vector<FeatureVector> tx, vx;
    std::vector<double> te, ve, test_e;
    for (const auto& s : train) tx.push_back(s.features), te.push_back(s.entropy);
    for (const auto& s : validation) vx.push_back(s.features), ve.push_back(s.entropy);
    for (const auto& s : test) test_e.push_back(s.entropy);
    const auto reg = train_mlp(tx, te, vx, ve, HeadOutput::linear, cfg);
    out.regression_accuracy = detail::head_accuracy(reg.head, x, test_e, cfg.decision_threshold);
    return out;
}

// ---------------------------------------------------------------------------
// tagger bank

struct HeadMetadata {
    int epochs = 0;
    int best_epoch = 0;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    double low_fraction = 0.0;  // share of training samples labeled low
};

/// Shared featurizer plus one low-entropy head per threshold. Immutable once
/// built; safe for concurrent inference.
class TaggerBank {
public:
    struct Head {
        double tau = 0.0;
        MlpHead mlp;
        HeadMetadata meta;
    };

    TaggerBank(ExtractorConfig extractor, Vocabulary vocab, double decision_threshold = 0.5)
        : extractor_(extractor), vocab_(std::move(vocab)), threshold_(decision_threshold) {
        extractor_.validate();
    }

    void add_head(double tau, MlpHead mlp, HeadMetadata meta = {}) {
        if (mlp.input_dim() != extractor_.dimension) throw ConfigError("head input dimension differs from extractor");
        if (find(tau)) throw ConfigError("duplicate head for tau=" + std::to_string(tau));
        heads_.push_back({tau, std::move(mlp), meta});
        std::sort(heads_.begin(), heads_.end(), [](const Head& a, const Head& b) { return a.tau > b.tau; });
    }

    const Head* find(double tau) const {
        for (const auto& h : heads_)
            if (std::abs(h.tau - tau) < 1e-9) return &h;
        return nullptr;
    }

    const Head& head(double tau) const {
        if (const auto* h = find(tau)) return *h;
        throw ConfigError("tagger bank has no head for tau=" + std::to_string(tau));
    }

    std::vector<double> grid() const {
        std::vector<double> g;
        for (const auto& h : heads_) g.push_back(h.tau);
        return g;
    }

    const std::vector<Head>& heads() const noexcept { return heads_; }
    const ExtractorConfig& extractor() const noexcept { return extractor_; }
    const Vocabulary& vocab() const noexcept { return vocab_; }
    double decision_threshold() const noexcept { return threshold_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& h : heads_) n += h.mlp.params().size();
        return n;
    }

private:
    ExtractorConfig extractor_;
    Vocabulary vocab_;
    double threshold_;
    std::vector<Head> heads_;
};

struct TaggerPrediction {
    bool low = false;
    double probability = 0.0;  // P(next-token entropy < tau)
};

inline TaggerPrediction predict_low_features(const TaggerBank& bank, std::span<const double> features, double tau) {
    const auto& h = bank.head(tau);
    const double p = h.mlp.forward(features);
    return {p >= bank.decision_threshold(), p};
}

/// Low-entropy prediction for the token that follows `prefix`.
inline TaggerPrediction predict_low(const TaggerBank& bank, std::span<const TokenId> prefix, double tau) {
    const auto& h = bank.head(tau);
    const auto v = extract(prefix, bank.vocab(), bank.extractor());
    const double p = h.mlp.forward(v);
    return {p >= bank.decision_threshold(), p};
}

/// Generation gate for the ie scheme: watermark when the tagger says "high".
/// The bank must outlive the gate.
inline EntropyGate make_tagger_gate(const TaggerBank& bank, double tau) {
    (void)bank.head(tau);
    return EntropyGate::custom(
        [&bank, tau](std::span<const TokenId> context, double) { return !predict_low(bank, context, tau).low; });
}

struct BankTrainingReport {
    double tau = 0.0;
    TrainResult result;
    std::size_t train_samples = 0;
    std::size_t validation_samples = 0;
};

/// Trains one head per grid threshold on the same split.
inline TaggerBank train_bank(std::span<const TaggerSample> train, std::span<const TaggerSample> validation,
                             std::span<const double> grid, const ExtractorConfig& extractor, const Vocabulary& vocab,
                             const TrainConfig& cfg, std::vector<BankTrainingReport>* reports = nullptr) {
    TaggerBank bank(extractor, vocab, cfg.decision_threshold);
    for (double tau : grid) {
        auto r = train_head(train, validation, tau, cfg);
        HeadMetadata meta;
        meta.epochs = cfg.epochs;
        meta.best_epoch = r.best_epoch;
        meta.train_accuracy = r.history.at(static_cast<std::size_t>(r.best_epoch - 1)).train_accuracy;
        meta.validation_accuracy = r.best_validation_accuracy;
        meta.low_fraction = static_cast<double>(std::count_if(train.begin(), train.end(),
                                                              [tau](const TaggerSample& s) {
                                                                  return label_low(s.entropy, tau);
                                                              })) /
                            static_cast<double>(train.size());
        bank.add_head(tau, r.head, meta);
        if (reports) reports->push_back({tau, std::move(r), train.size(), validation.size()});
    }
    return bank;
}

inline nlohmann::json bank_to_json(const TaggerBank& bank) {
    nlohmann::json j;
    j["extractor"] = to_json(bank.extractor());
    j["vocab"] = vocab_to_json(bank.vocab());
    j["decision_threshold"] = bank.decision_threshold();
    j["grid"] = bank.grid();
    auto heads = nlohmann::json::array();
    for (const auto& h : bank.heads()) {
        const auto p = h.mlp.params();
        const auto seg = [&](std::size_t a, std::size_t b) {
            return std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(a), p.begin() + static_cast<std::ptrdiff_t>(b));
        };
        heads.push_back({{"tau", h.tau},
                         {"dims", {h.mlp.input_dim(), h.mlp.hidden_dim(), 1}},
                         {"w1", seg(0, h.mlp.b1_offset())},
                         {"b1", seg(h.mlp.b1_offset(), h.mlp.w2_offset())},
                         {"w2", seg(h.mlp.w2_offset(), h.mlp.b2_offset())},
                         {"b2", p[h.mlp.b2_offset()]},
                         {"metadata",
                          {{"epochs", h.meta.epochs},
                           {"best_epoch", h.meta.best_epoch},
                           {"train_accuracy", h.meta.train_accuracy},
                           {"validation_accuracy", h.meta.validation_accuracy},
                           {"low_fraction", h.meta.low_fraction}}}});
    }
    j["heads"] = heads;
    return j;
}

inline TaggerBank bank_from_json(const nlohmann::json& j) {
    try {
        TaggerBank bank(extractor_config_from_json(j.at("extractor")), vocab_from_json(j.at("vocab")),
                        j.value("decision_threshold", 0.5));
        for (const auto& h : j.at("heads")) {
            const auto dims = h.at("dims").get<std::vector<std::size_t>>();
            if (dims.size() != 3 || dims[2] != 1) throw FormatError("head dims must be [input, hidden, 1]");
            std::vector<double> params = h.at("w1").get<std::vector<double>>();
            const auto b1 = h.at("b1").get<std::vector<double>>();
            const auto w2 = h.at("w2").get<std::vector<double>>();
            params.insert(params.end(), b1.begin(), b1.end());
            params.insert(params.end(), w2.begin(), w2.end());
            params.push_back(h.at("b2").get<double>());
            HeadMetadata meta;
            if (h.contains("metadata")) {
                const auto& m = h["metadata"];
                meta.epochs = m.value("epochs", 0);
                meta.best_epoch = m.value("best_epoch", 0);
                meta.train_accuracy = m.value("train_accuracy", 0.0);
                meta.validation_accuracy = m.value("validation_accuracy", 0.0);
                meta.low_fraction = m.value("low_fraction", 0.0);
            }
            bank.add_head(h.at("tau").get<double>(), MlpHead(dims[0], dims[1], HeadOutput::logistic, std::move(params)),
                          meta);
        }
        return bank;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed tagger bank: ") + e.what());
    }
}

}  // namespace lowent
