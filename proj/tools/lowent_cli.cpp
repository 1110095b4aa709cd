#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "lowent/lowent.hpp"

using nlohmann::json;
using namespace lowent;

namespace {

// ---------------------------------------------------------------------------
// small utilities

std::string now_utc() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

void write_atomic(const std::string& path, const std::string& content) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write " + tmp);
        out << content;
        if (!out.flush()) throw InputError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, target);
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (blank(item)) continue;
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("'" + item + "' is not a number");
        }
    }
    if (out.empty()) throw ConfigError("empty list '" + s + "'");
    return out;
}

std::vector<std::string> parse_words(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        out.push_back(item.substr(a, item.find_last_not_of(" \t") - a + 1));
    }
    return out;
}

LoadedModel load_model(const std::string& path) {
    try {
        return model_from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

TaggerBank load_bank(const std::string& path) {
    try {
        return bank_from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

// ---------------------------------------------------------------------------
// config file + manifest

/// key=value lines ('#' comments) or a flat JSON object.
std::map<std::string, std::string> load_config(const std::string& path) {
    const std::string text = read_file(path);
    std::map<std::string, std::string> out;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + path + ": " + e.what());
        }
        for (const auto& [k, v] : j.items()) {
            if (v.is_string()) {
                out[k] = v.get<std::string>();
            } else if (v.is_array()) {
                std::string joined;
                for (const auto& x : v) joined += (joined.empty() ? "" : ",") + (x.is_string() ? x.get<std::string>() : x.dump());
                out[k] = joined;
            } else {
                out[k] = v.dump();
            }
        }
        return out;
    }
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (blank(line)) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config " + path + " line " + std::to_string(n) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
        };
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

struct RunContext {
    std::string command;
    json config = json::object();
    json sources = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    json outputs = json::object();
    std::string started = now_utc();

    void write_manifest(const std::string& out_path) const {
        json m;
        m["command"] = command;
        m["config"] = config;
        m["config_sources"] = sources;
        m["seed"] = seed;
        m["inputs"] = inputs;
        m["outputs"] = outputs;
        m["version"] = kVersion;
        m["started_at"] = started;
        m["finished_at"] = now_utc();
        write_atomic(out_path + ".manifest.json", m.dump(2) + "\n");
    }
};

/// Fills options missing from the command line with config-file values, then
/// records the effective configuration.
void resolve_config(CLI::App* sub, const std::map<std::string, std::string>& file_values, RunContext& ctx) {
    std::set<std::string> known;
    for (CLI::Option* opt : sub->get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help") continue;
        known.insert(name);
        std::string source = "default";
        if (opt->count() > 0) {
            source = "flag";
        } else if (auto it = file_values.find(name); it != file_values.end()) {
            opt->add_result(it->second);
            opt->run_callback();
            source = "config";
        }
        std::string value;
        if (opt->count() > 0) {
            for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
        } else {
            value = opt->get_default_str();
        }
        ctx.config[name] = value;
        ctx.sources[name] = source;
    }
    for (const auto& [k, v] : file_values)
        if (!known.count(k) && k != "config") std::cerr << "warning: config key '" << k << "' is not an option of " << sub->get_name() << "\n";
}

// ---------------------------------------------------------------------------
// records

struct Document {
    json id;
    std::vector<TokenId> prompt;
    std::vector<TokenId> tokens;
    std::optional<int> label;
};

std::vector<TokenId> token_field(const json& rec, const char* ids_key, const char* text_key, const Vocabulary* vocab) {
    if (rec.contains(ids_key)) return rec.at(ids_key).get<std::vector<TokenId>>();
    if (rec.contains(text_key)) {
        if (!vocab) throw ConfigError(std::string("field '") + text_key + "' needs a vocabulary (pass --model)");
        return vocab->tokenize(rec.at(text_key).get<std::string>());
    }
    return {};
}

Document parse_document(const std::string& line, std::size_t index, const Vocabulary* vocab) {
    json rec;
    try {
        rec = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("not JSON: ") + e.what());
    }
    if (!rec.is_object()) throw FormatError("record must be a JSON object");
    Document d;
    d.id = rec.contains("id") ? rec["id"] : json(index);
    try {
        d.tokens = token_field(rec, "tokens", "text", vocab);
        d.prompt = token_field(rec, "prompt", "prompt_text", vocab);
        if (rec.contains("label")) {
            const auto& l = rec["label"];
            d.label = l.is_boolean() ? static_cast<int>(l.get<bool>()) : l.get<int>();
        }
    } catch (const json::exception& e) {
        throw FormatError(e.what());
    }
    if (!rec.contains("tokens") && !rec.contains("text")) throw FormatError("record has neither 'tokens' nor 'text'");
    return d;
}

/// Detector input: the last prompt token anchors the first generated token;
/// without a prompt the document's own first token is the anchor.
std::vector<TokenId> anchored(const Document& d) {
    if (d.prompt.empty()) return d.tokens;
    std::vector<TokenId> out{d.prompt.back()};
    out.insert(out.end(), d.tokens.begin(), d.tokens.end());
    return out;
}

std::vector<TokenId> oracle_context(const Document& d) {
    if (d.prompt.empty()) return {};
    return std::vector<TokenId>(d.prompt.begin(), d.prompt.end() - 1);
}

/// Prompt file: JSONL with "tokens" or "text", or plain text lines.
std::vector<std::vector<TokenId>> load_prompts(const std::string& path, const Vocabulary& vocab) {
    std::vector<std::vector<TokenId>> prompts;
    std::size_t n = 0;
    for (const auto& line : read_lines(path)) {
        ++n;
        if (blank(line)) continue;
        std::vector<TokenId> p;
        try {
            if (line[line.find_first_not_of(" \t")] == '{') {
                const auto rec = json::parse(line);
                p = rec.contains("tokens") ? rec.at("tokens").get<std::vector<TokenId>>()
                                           : vocab.tokenize(rec.at("text").get<std::string>());
            } else {
                p = vocab.tokenize(line);
            }
        } catch (const std::exception& e) {
            throw FormatError(path + " line " + std::to_string(n) + ": " + e.what());
        }
        if (p.empty()) throw FormatError(path + " line " + std::to_string(n) + ": empty prompt");
        check_token_ids(p, vocab.size());
        prompts.push_back(std::move(p));
    }
    if (prompts.empty()) throw InputError("no prompts in " + path);
    return prompts;
}

/// Corpus file: JSONL with "tokens" or "text", or plain text lines.
std::vector<std::vector<TokenId>> load_corpus(const std::string& path, const Vocabulary& vocab, std::size_t min_len) {
    std::vector<std::vector<TokenId>> docs;
    std::size_t n = 0, skipped = 0;
    for (const auto& line : read_lines(path)) {
        ++n;
        if (blank(line)) continue;
        try {
            std::vector<TokenId> d;
            if (line[line.find_first_not_of(" \t")] == '{') {
                const auto rec = json::parse(line);
                d = token_field(rec, "tokens", "text", &vocab);
            } else {
                d = vocab.tokenize(line);
            }
            check_token_ids(d, vocab.size());
            if (d.size() < min_len) throw InputError("document shorter than " + std::to_string(min_len) + " tokens");
            docs.push_back(std::move(d));
        } catch (const std::exception& e) {
            ++skipped;
            std::cerr << "warning: " << path << " line " << n << " skipped: " << e.what() << "\n";
        }
    }
    if (docs.empty()) throw InputError("no usable documents in " + path);
    return docs;
}

// ---------------------------------------------------------------------------
// shared option groups

struct WmOptions {
    std::string scheme = "kgw";
    double gamma = 0.5;
    double delta = 3.0;
    std::uint64_t key = 15485863;
    double z = 4.0;
    double tau = 0.6;

    void add(CLI::App* app, bool with_delta) {
        app->add_option("--scheme", scheme, "kgw, sweet, ewd or ie");
        app->add_option("--gamma", gamma, "green-list fraction");
        if (with_delta) app->add_option("--delta", delta, "green logit bias");
        app->add_option("--key", key, "watermark key");
        app->add_option("--z", z, "detection z threshold");
        app->add_option("--tau", tau, "entropy threshold for sweet/ie gating");
    }

    WatermarkConfig config() const {
        WatermarkConfig c;
        c.scheme = parse_scheme(scheme);
        c.gamma = gamma;
        c.delta = delta;
        c.key = key;
        c.z_threshold = z;
        c.tau_gen = tau;
        c.validate();
        return c;
    }
};

struct NavOptions {
    double tau_start = 1.5;
    double step = 0.3;
    std::string direction = "high-to-low";

    void add(CLI::App* app) {
        app->add_option("--tau-start", tau_start, "first navigator threshold");
        app->add_option("--tau-step", step, "navigator grid step");
        app->add_option("--direction", direction, "high-to-low or low-to-high");
    }

    NavigatorConfig config() const {
        NavigatorConfig c;
        c.tau_start = tau_start;
        c.step = step;
        if (direction == "high-to-low") c.direction = NavigatorConfig::Direction::high_to_low;
        else if (direction == "low-to-high") c.direction = NavigatorConfig::Direction::low_to_high;
        else throw ConfigError("direction must be high-to-low or low-to-high");
        (void)c.grid();
        return c;
    }
};

// ---------------------------------------------------------------------------
// commands

struct GenerateArgs {
    WmOptions wm;
    std::string model, prompts, bank, out;
    int max_tokens = 200;
    std::size_t num_docs = 0;
    bool no_trace = false;
    std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a, RunContext& ctx) {
    const auto cfg = a.wm.config();
    const auto lm = load_model(a.model);
    std::optional<TaggerBank> bank;
    if (cfg.scheme == Scheme::ie) {
        if (a.bank.empty()) throw ConfigError("--scheme ie needs --tagger-bank");
        bank = load_bank(a.bank);
        if (bank->vocab().size() != lm.vocab.size()) throw ConfigError("tagger bank and model vocabularies differ");
    }
    const auto prompts = load_prompts(a.prompts, lm.vocab);
    const EntropyGate gate = [&] {
        switch (cfg.scheme) {
            case Scheme::sweet: return EntropyGate::above(cfg.tau_gen);
            case Scheme::ie: return make_tagger_gate(*bank, cfg.tau_gen);
            default: return EntropyGate::always();
        }
    }();
    const std::size_t n = a.num_docs ? a.num_docs : prompts.size();
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& prompt = prompts[i % prompts.size()];
        RngState rng = substream(a.seed, "generate/" + std::to_string(i));
        const auto g = generate(*lm.model, prompt, cfg, gate, a.max_tokens, rng);
        json rec;
        rec["id"] = i;
        rec["prompt"] = prompt;
        rec["tokens"] = g.tokens.tokens;
        rec["text"] = translate_tokens(g.tokens.tokens, lm.vocab);
        rec["label"] = cfg.delta > 0.0 ? 1 : 0;
        rec["scheme"] = to_string(cfg.scheme);
        if (!a.no_trace) {
            auto tr = json::array();
            for (const auto& s : g.trace) tr.push_back(trace_to_json(s));
            rec["trace"] = tr;
        }
        out += dump(rec) + "\n";
    }
    write_atomic(a.out, out);
    ctx.inputs = {{"model", a.model}, {"prompts", a.prompts}};
    if (!a.bank.empty()) ctx.inputs["tagger_bank"] = a.bank;
    ctx.outputs = {{"generations", a.out}};
    ctx.write_manifest(a.out);
    std::cerr << "wrote " << n << " generations to " << a.out << "\n";
    return 0;
}

struct DetectArgs {
    WmOptions wm;
    NavOptions nav;
    std::string model, bank, in, out;
    std::size_t vocab_size = 0;
    bool navigate = false;
    bool with_trace = false;
    std::uint64_t seed = 0;
};

struct Detector {
    WatermarkConfig cfg;
    std::optional<LoadedModel> lm;
    std::optional<TaggerBank> bank;
    std::size_t vocab_size = 0;
    bool navigate = false;
    NavigatorConfig nav;
    std::optional<PartitionCache> cache;

    const Vocabulary* vocab() const {
        if (lm) return &lm->vocab;
        if (bank) return &bank->vocab();
        return nullptr;
    }

    void setup(const DetectArgs& a) {
        cfg = a.wm.config();
        navigate = a.navigate;
        nav = a.nav.config();
        if (!a.model.empty()) lm = load_model(a.model);
        if (!a.bank.empty()) bank = load_bank(a.bank);
        if (lm) vocab_size = lm->vocab.size();
        else if (bank) vocab_size = bank->vocab().size();
        else vocab_size = a.vocab_size;
        if (a.vocab_size && a.vocab_size != vocab_size) throw ConfigError("--vocab-size disagrees with the loaded model");
        if (vocab_size == 0) throw ConfigError("pass --model, --tagger-bank or --vocab-size");
        if ((cfg.scheme == Scheme::sweet || cfg.scheme == Scheme::ewd) && !lm)
            throw ConfigError("--scheme " + std::string(to_string(cfg.scheme)) + " needs --model for entropy");
        if (cfg.scheme == Scheme::ie && !bank) throw ConfigError("--scheme ie needs --tagger-bank");
        if (bank && bank->vocab().size() != vocab_size) throw ConfigError("tagger bank and model vocabularies differ");
        if (navigate && cfg.scheme != Scheme::sweet && cfg.scheme != Scheme::ie)
            throw ConfigError("--navigate applies to sweet and ie only");
        if (cfg.scheme == Scheme::ie) {
            if (navigate) {
                for (double t : nav.grid()) (void)bank->head(t);
            } else {
                (void)bank->head(cfg.tau_gen);
            }
        }
        cache.emplace(cfg.key, cfg.gamma, vocab_size);
    }

    json run(const Document& d) {
        const auto doc = anchored(d);
        check_token_ids(doc, vocab_size);
        json rec;
        std::optional<NavigatorResult> navigation;
        DetectionReport r;
        switch (cfg.scheme) {
            case Scheme::kgw: r = detect_full(doc, cfg, *cache); break;
            case Scheme::ewd:
                r = detect_ewd_prepared(doc, cfg, *cache,
                                        EntropySource::oracle(*lm->model, oracle_context(d)).prepare(doc));
                break;
            case Scheme::sweet:
            case Scheme::ie: {
                const auto src = cfg.scheme == Scheme::sweet ? EntropySource::oracle(*lm->model, oracle_context(d))
                                                             : EntropySource::tagger(*bank, oracle_context(d));
                const auto prepared = doc.size() < 2 ? PreparedDocument{} : src.prepare(doc);
                if (navigate) {
                    auto res = detect_navigated(doc, cfg, *cache, prepared, nav);
                    r = res.report;
                    navigation = std::move(res.navigation);
                } else {
                    r = doc.size() < 2 ? detect_masked(doc, cfg, *cache, {})
                                       : detect_masked(doc, cfg, *cache, prepared.scored_mask(cfg.tau_gen));
                }
                break;
            }
        }
        rec = to_json(r);
        rec["id"] = d.id;
        if (d.label) rec["label"] = *d.label;
        if (navigation) rec["navigation"] = to_json(*navigation);
        return rec;
    }
};

json summarize(std::size_t docs, std::size_t errors, const std::vector<double>& z, const std::vector<int>& labels,
               std::size_t flagged) {
    json s;
    s["documents"] = docs;
    s["errors"] = errors;
    s["flagged"] = flagged;
    double mean = 0.0;
    for (double v : z) mean += v;
    s["mean_z"] = z.empty() ? 0.0 : mean / static_cast<double>(z.size());
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (labels[i] < 0) continue;
        (labels[i] ? pos : neg).push_back(z[i]);
    }
    if (!pos.empty() && !neg.empty()) {
        s["auroc"] = auroc(pos, neg);
        s["tpr_at_fpr_0.05"] = tpr_at_fpr(pos, neg, 0.05);
        s["positives"] = pos.size();
        s["negatives"] = neg.size();
    }
    return {{"summary", s}};
}

int cmd_detect(const DetectArgs& a, RunContext& ctx) {
    Detector det;
    det.setup(a);
    std::string out;
    std::vector<double> zs;
    std::vector<int> labels;
    std::size_t docs = 0, errors = 0, flagged = 0, lineno = 0;
    for (const auto& line : read_lines(a.in)) {
        ++lineno;
        if (blank(line)) continue;
        try {
            const auto d = parse_document(line, docs, det.vocab());
            auto rec = det.run(d);
            ++docs;
            zs.push_back(rec["z"].get<double>());
            labels.push_back(d.label ? *d.label : -1);
            flagged += rec["verdict"].get<bool>();
            out += dump(rec) + "\n";
        } catch (const std::exception& e) {
            ++errors;
            out += dump(json{{"line", lineno}, {"error", e.what()}}) + "\n";
        }
    }
    const auto summary = summarize(docs, errors, zs, labels, flagged);
    out += dump(summary) + "\n";
    if (a.out.empty()) {
        std::cout << out;
    } else {
        write_atomic(a.out, out);
        std::cout << dump(summary) << "\n";
        ctx.inputs = {{"documents", a.in}};
        if (!a.model.empty()) ctx.inputs["model"] = a.model;
        if (!a.bank.empty()) ctx.inputs["tagger_bank"] = a.bank;
        ctx.outputs = {{"reports", a.out}};
        ctx.write_manifest(a.out);
    }
    return 0;
}

int cmd_navigate(DetectArgs a, RunContext& ctx) {
    a.navigate = true;
    const auto scheme = parse_scheme(a.wm.scheme);
    if (scheme != Scheme::sweet && scheme != Scheme::ie) throw ConfigError("navigate needs --scheme sweet or ie");
    Detector det;
    det.setup(a);
    std::string out;
    std::size_t lineno = 0, docs = 0;
    for (const auto& line : read_lines(a.in)) {
        ++lineno;
        if (blank(line)) continue;
        try {
            const auto d = parse_document(line, docs++, det.vocab());
            const auto rec = det.run(d);
            json row = rec.contains("navigation") ? rec["navigation"] : json::object();
            row["id"] = d.id;
            row["tau_hat"] = rec["tau_hat"];
            row["z"] = rec["z"];
            out += dump(row) + "\n";
        } catch (const std::exception& e) {
            out += dump(json{{"line", lineno}, {"error", e.what()}}) + "\n";
        }
    }
    if (a.out.empty()) {
        std::cout << out;
    } else {
        write_atomic(a.out, out);
        ctx.inputs = {{"documents", a.in}};
        ctx.outputs = {{"navigation", a.out}};
        ctx.write_manifest(a.out);
    }
    return 0;
}

struct TrainTaggerArgs {
    std::string model, corpus, embeddings, out, grid = "1.5,1.2,0.9,0.6,0.3";
    TrainConfig train;
    std::size_t dim = 256, max_prefix_len = 128;
    double val_fraction = 0.2;
    std::size_t sample_docs = 0;
    int sample_length = 100;
    double compare_tau = -1.0;
    std::uint64_t seed = 0;
};

int cmd_train_tagger(const TrainTaggerArgs& a, RunContext& ctx) {
    const auto lm = load_model(a.model);
    const auto grid = parse_doubles(a.grid);
    std::vector<std::vector<TokenId>> corpus;
    if (!a.corpus.empty()) {
        corpus = load_corpus(a.corpus, lm.vocab, 2);
    } else if (a.sample_docs > 0) {
        RngState rng = substream(a.seed, "corpus");
        WatermarkConfig plain;
        plain.delta = 0.0;
        for (std::size_t i = 0; i < a.sample_docs; ++i) {
            std::vector<TokenId> start{static_cast<TokenId>(next_below(rng, lm.vocab.size()))};
            auto g = generate(*lm.model, start, plain, EntropyGate::always(), a.sample_length, rng);
            start.insert(start.end(), g.tokens.tokens.begin(), g.tokens.tokens.end());
            corpus.push_back(std::move(start));
        }
    } else {
        throw ConfigError("pass --corpus or --sample-docs");
    }
    ExtractorConfig ex;
    ex.dimension = a.dim;
    ex.max_prefix_len = a.max_prefix_len;
    std::vector<TaggerSample> samples;
    if (!a.embeddings.empty()) {
        const auto table = load_external_embeddings(a.embeddings);
        samples = preprocess_with_table(corpus, *lm.model, table);
        ex.variant = ExtractorConfig::Variant::external_file;
        ex.dimension = table.front().size();
    } else {
        samples = preprocess(corpus, *lm.model, lm.vocab, ex);
    }
    auto [train, val] = split_samples(std::move(samples), a.val_fraction, substream(a.seed, "split").state);
    TrainConfig tc = a.train;
    tc.seed = substream(a.seed, "train").state;
    std::vector<BankTrainingReport> reports;
    const auto bank = train_bank(train, val, grid, ex, lm.vocab, tc, &reports);
    write_atomic(a.out, bank_to_json(bank).dump() + "\n");

    std::printf("%-6s %-9s %-10s %-10s %-10s\n", "tau", "low_frac", "train_acc", "val_acc", "best_epoch");
    json table = json::array();
    for (const auto& h : bank.heads()) {
        std::printf("%-6.2f %-9.3f %-10.4f %-10.4f %-10d\n", h.tau, h.meta.low_fraction, h.meta.train_accuracy,
                    h.meta.validation_accuracy, h.meta.best_epoch);
        table.push_back({{"tau", h.tau},
                         {"low_fraction", h.meta.low_fraction},
                         {"train_accuracy", h.meta.train_accuracy},
                         {"validation_accuracy", h.meta.validation_accuracy},
                         {"best_epoch", h.meta.best_epoch}});
    }
    if (a.compare_tau > 0.0) {
        auto [tr2, te] = split_samples(train, 0.25, substream(a.seed, "compare").state);
        const auto cmp = classification_vs_regression_report(tr2, val, te, a.compare_tau, tc);
        std::printf("objective comparison at tau=%.2f: classification %.4f, regression (binned) %.4f\n", a.compare_tau,
                    cmp.classification_accuracy, cmp.regression_accuracy);
        ctx.config["comparison"] = {{"tau", a.compare_tau},
                                    {"classification_accuracy", cmp.classification_accuracy},
                                    {"regression_accuracy", cmp.regression_accuracy}};
    }
    ctx.inputs = {{"model", a.model}};
    if (!a.corpus.empty()) ctx.inputs["corpus"] = a.corpus;
    if (!a.embeddings.empty()) ctx.inputs["embeddings"] = a.embeddings;
    ctx.outputs = {{"tagger_bank", a.out}, {"accuracy", table}};
    ctx.write_manifest(a.out);
    return 0;
}

struct CalibrateArgs {
    WmOptions wm;
    std::size_t trials = 100000, length = 200, vocab_size = 1000;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_calibrate(const CalibrateArgs& a, RunContext& ctx) {
    const auto cfg = a.wm.config();
    const auto r = type1_calibration(a.trials, a.length, cfg, a.vocab_size, substream(a.seed, "calibrate"));
    json j = to_json(r);
    j["z_threshold"] = cfg.z_threshold;
    j["gamma"] = cfg.gamma;
    j["length"] = a.length;
    j["vocab_size"] = a.vocab_size;
    std::cout << j.dump() << "\n";
    if (!a.out.empty()) {
        write_atomic(a.out, j.dump(2) + "\n");
        ctx.outputs = {{"calibration", a.out}};
        ctx.write_manifest(a.out);
    }
    return 0;
}

struct AttackArgs {
    std::string in, out, model, sampler = "uniform";
    double level = 0.1;
    std::size_t vocab_size = 0;
    std::uint64_t seed = 0;
};

int cmd_attack(const AttackArgs& a, RunContext& ctx) {
    if (!(a.level >= 0.0 && a.level <= 1.0)) throw ConfigError("--level must lie in [0, 1]");
    std::optional<LoadedModel> lm;
    if (!a.model.empty()) lm = load_model(a.model);
    const std::size_t v = lm ? lm->vocab.size() : a.vocab_size;
    if (v == 0 && a.level > 0.0) throw ConfigError("pass --model or --vocab-size");
    AttackSampler sampler = AttackSampler::uniform(std::max<std::size_t>(v, 2));
    if (a.sampler == "model") {
        if (!lm) throw ConfigError("--sampler model needs --model");
        sampler = AttackSampler::from_model(*lm->model);
    } else if (a.sampler != "uniform") {
        throw ConfigError("--sampler must be uniform or model");
    }
    std::string out;
    std::size_t lineno = 0, docs = 0;
    for (const auto& line : read_lines(a.in)) {
        ++lineno;
        if (blank(line)) continue;
        if (a.level == 0.0) {
            out += line + "\n";
            continue;
        }
        try {
            auto rec = json::parse(line);
            const auto d = parse_document(line, docs, lm ? &lm->vocab : nullptr);
            RngState rng = substream(a.seed, "attack/" + std::to_string(docs++));
            const auto attacked = substitution_attack(d.tokens, a.level, rng, sampler, d.prompt);
            rec["tokens"] = attacked;
            if (lm) rec["text"] = translate_tokens(attacked, lm->vocab);
            else rec.erase("text");
            rec.erase("trace");
            rec["attack_level"] = a.level;
            out += dump(rec) + "\n";
        } catch (const std::exception& e) {
            out += dump(json{{"line", lineno}, {"error", e.what()}}) + "\n";
        }
    }
    write_atomic(a.out, out);
    ctx.inputs = {{"documents", a.in}};
    ctx.outputs = {{"attacked", a.out}};
    ctx.write_manifest(a.out);
    return 0;
}

struct SweepArgs {
    std::string model, prompts, bank, out, schemes = "kgw,sweet,ewd", deltas = "0,1,2,3,5", gammas = "0.5";
    std::string format = "csv";
    NavOptions nav;
    double tau = 0.6, z = 4.0;
    std::size_t n_docs = 200;
    int length = 200;
    std::uint64_t key = 15485863, seed = 0;
};

int cmd_sweep(const SweepArgs& a, RunContext& ctx) {
    const auto lm = load_model(a.model);
    const auto prompts = load_prompts(a.prompts, lm.vocab);
    std::optional<TaggerBank> bank;
    if (!a.bank.empty()) bank = load_bank(a.bank);
    SweepConfig sc;
    for (const auto& s : parse_words(a.schemes)) sc.schemes.push_back(parse_sweep_scheme(s));
    for (const auto& s : sc.schemes)
        if (s.scheme == Scheme::ie && !bank) throw ConfigError("scheme ie needs --tagger-bank");
    sc.deltas = parse_doubles(a.deltas);
    sc.gammas = parse_doubles(a.gammas);
    sc.tau = a.tau;
    sc.navigator = a.nav.config();
    sc.n_docs = a.n_docs;
    sc.length = a.length;
    sc.key = a.key;
    sc.z_threshold = a.z;
    sc.seed = a.seed;
    const auto rows = sweep(*lm.model, prompts, sc, bank ? &*bank : nullptr);
    std::string out;
    if (a.format == "csv") {
        out = sweep_csv(rows);
    } else if (a.format == "json") {
        json arr = json::array();
        for (const auto& r : rows) arr.push_back(to_json(r));
        out = arr.dump(2) + "\n";
    } else {
        throw ConfigError("--format must be csv or json");
    }
    if (a.out.empty()) {
        std::cout << out;
    } else {
        write_atomic(a.out, out);
        ctx.inputs = {{"model", a.model}, {"prompts", a.prompts}};
        if (!a.bank.empty()) ctx.inputs["tagger_bank"] = a.bank;
        ctx.outputs = {{"sweep", a.out}};
        ctx.write_manifest(a.out);
    }
    return 0;
}

struct TrainLmArgs {
    std::string corpus, out, tokenizer = "word";
    std::size_t order = 3;
    double k = 0.1;
    std::uint64_t seed = 0;
};

int cmd_train_lm(const TrainLmArgs& a, RunContext& ctx) {
    TokenizerKind kind;
    if (a.tokenizer == "word") kind = TokenizerKind::word;
    else if (a.tokenizer == "byte") kind = TokenizerKind::byte;
    else throw ConfigError("--tokenizer must be word or byte");
    std::vector<std::string> texts;
    for (const auto& line : read_lines(a.corpus)) {
        if (blank(line)) continue;
        if (line[line.find_first_not_of(" \t")] == '{') {
            try {
                texts.push_back(json::parse(line).at("text").get<std::string>());
            } catch (const std::exception& e) {
                std::cerr << "warning: skipped corpus line: " << e.what() << "\n";
            }
        } else {
            texts.push_back(line + "\n");
        }
    }
    if (texts.empty()) throw InputError("no documents in " + a.corpus);
    const auto vocab = Vocabulary::from_corpus(texts, kind);
    std::vector<std::vector<TokenId>> docs;
    for (const auto& t : texts) docs.push_back(vocab.tokenize(t));
    const auto model = train_ngram(docs, vocab.size(), a.order, a.k);
    write_atomic(a.out, model_to_json(model, vocab).dump() + "\n");
    std::cerr << "vocabulary " << vocab.size() << ", order " << a.order << ", documents " << docs.size() << "\n";
    ctx.inputs = {{"corpus", a.corpus}};
    ctx.outputs = {{"model", a.out}};
    ctx.write_manifest(a.out);
    return 0;
}

struct ToyModelArgs {
    std::string kind = "chain", out, schedule, key_mode = "previous";
    std::size_t vocab_size = 72, chain_length = 8;
    double low = 0.05, high = -1.0;
    std::uint64_t seed = 0;
};

int cmd_toy_model(const ToyModelArgs& a, RunContext& ctx) {
    if (a.vocab_size < 2) throw ConfigError("--vocab-size must be >= 2");
    const double hmax = std::log(static_cast<double>(a.vocab_size));
    std::unique_ptr<LogitProvider> model;
    if (a.kind == "uniform") {
        model = std::make_unique<ControlledEntropyModel>(a.vocab_size, std::vector<ControlledEntropyModel::Entry>{{hmax, 0}});
    } else if (a.kind == "chain") {
        const double high = a.high < 0.0 ? 0.98 * hmax : a.high;
        model = std::make_unique<ControlledEntropyModel>(
            make_chain_model(a.vocab_size, a.chain_length, a.low, high, substream(a.seed, "toy-model").state));
    } else if (a.kind == "controlled") {
        std::vector<ControlledEntropyModel::Entry> sched;
        for (const auto& item : parse_words(a.schedule)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) throw ConfigError("schedule entries look like entropy:peak");
            sched.push_back({parse_doubles(item.substr(0, colon)).at(0),
                             static_cast<TokenId>(std::stoul(item.substr(colon + 1)))});
        }
        if (sched.empty()) throw ConfigError("--schedule is required for --kind controlled");
        const auto mode = a.key_mode == "position" ? ControlledEntropyModel::KeyMode::position
                                                   : ControlledEntropyModel::KeyMode::previous_token;
        model = std::make_unique<ControlledEntropyModel>(a.vocab_size, std::move(sched), mode);
    } else {
        throw ConfigError("--kind must be uniform, chain or controlled");
    }
    write_atomic(a.out, model_to_json(*model, Vocabulary::synthetic(a.vocab_size)).dump() + "\n");
    ctx.outputs = {{"model", a.out}};
    ctx.write_manifest(a.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entropy-aware green/red-list watermarking toolkit"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "key=value or JSON config file (default: $LOWENT_WM_CONFIG)");

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "sample watermarked continuations");
    gen.wm.add(g, true);
    g->add_option("--model", gen.model, "model JSON")->required();
    g->add_option("--prompts", gen.prompts, "prompt file (JSONL or text lines)")->required();
    g->add_option("--tagger-bank", gen.bank, "tagger bank for --scheme ie");
    g->add_option("--max-tokens", gen.max_tokens, "tokens per generation");
    g->add_option("--num-docs", gen.num_docs, "documents to generate, cycling prompts (default: one per prompt)");
    g->add_flag("--no-trace", gen.no_trace, "omit per-step traces");
    g->add_option("--seed", gen.seed, "seed");
    g->add_option("--out", gen.out, "output JSONL")->required();

    DetectArgs det;
    auto* d = app.add_subcommand("detect", "score documents for a watermark");
    det.wm.add(d, false);
    det.nav.add(d);
    d->add_option("--model", det.model, "model JSON (vocabulary and oracle entropy)");
    d->add_option("--tagger-bank", det.bank, "tagger bank for --scheme ie");
    d->add_option("--vocab-size", det.vocab_size, "vocabulary size when no model is given");
    d->add_option("--in", det.in, "input JSONL")->required();
    d->add_option("--out", det.out, "output JSONL (stdout when omitted)");
    d->add_flag("--navigate", det.navigate, "per-document threshold search (sweet, ie)");
    d->add_option("--seed", det.seed, "seed");

    DetectArgs navargs;
    navargs.wm.scheme = "sweet";
    auto* n = app.add_subcommand("navigate", "per-document threshold search traces");
    navargs.wm.add(n, false);
    navargs.nav.add(n);
    n->add_option("--model", navargs.model, "model JSON");
    n->add_option("--tagger-bank", navargs.bank, "tagger bank for --scheme ie");
    n->add_option("--in", navargs.in, "input JSONL")->required();
    n->add_option("--out", navargs.out, "output JSONL (stdout when omitted)");
    n->add_option("--seed", navargs.seed, "seed");

    TrainTaggerArgs tt;
    auto* t = app.add_subcommand("train-tagger", "train the entropy tagger bank");
    t->add_option("--model", tt.model, "reference model JSON")->required();
    t->add_option("--corpus", tt.corpus, "training corpus (JSONL or text lines)");
    t->add_option("--sample-docs", tt.sample_docs, "sample a corpus of this many documents from the model");
    t->add_option("--sample-length", tt.sample_length, "length of sampled documents");
    t->add_option("--embeddings", tt.embeddings, "precomputed feature table instead of hashed n-grams");
    t->add_option("--grid", tt.grid, "comma-separated thresholds");
    t->add_option("--epochs", tt.train.epochs, "epochs");
    t->add_option("--batch-size", tt.train.batch_size, "batch size");
    t->add_option("--lr", tt.train.lr, "learning rate");
    t->add_option("--weight-decay", tt.train.weight_decay, "decoupled weight decay");
    t->add_option("--hidden", tt.train.hidden, "hidden units");
    t->add_option("--decision-threshold", tt.train.decision_threshold, "probability above which a prefix is low");
    t->add_option("--dim", tt.dim, "feature dimension");
    t->add_option("--max-prefix-len", tt.max_prefix_len, "feature window in tokens");
    t->add_option("--val-fraction", tt.val_fraction, "held-out fraction");
    t->add_option("--compare-objectives", tt.compare_tau, "also report classification vs regression at this tau");
    t->add_option("--seed", tt.seed, "seed");
    t->add_option("--out", tt.out, "bank JSON")->required();

    CalibrateArgs cal;
    auto* c = app.add_subcommand("calibrate", "false-positive rate on uniform random text");
    cal.wm.add(c, false);
    c->add_option("--trials", cal.trials, "documents");
    c->add_option("--length", cal.length, "scored tokens per document");
    c->add_option("--vocab-size", cal.vocab_size, "vocabulary size");
    c->add_option("--seed", cal.seed, "seed");
    c->add_option("--out", cal.out, "output JSON");

    AttackArgs att;
    auto* at = app.add_subcommand("attack", "random token substitution");
    at->add_option("--in", att.in, "input JSONL")->required();
    at->add_option("--out", att.out, "output JSONL")->required();
    at->add_option("--level", att.level, "fraction of tokens replaced");
    at->add_option("--sampler", att.sampler, "uniform or model");
    at->add_option("--model", att.model, "model JSON");
    at->add_option("--vocab-size", att.vocab_size, "vocabulary size when no model is given");
    at->add_option("--seed", att.seed, "seed");

    SweepArgs sw;
    auto* s = app.add_subcommand("sweep", "detectability/quality grid");
    s->add_option("--model", sw.model, "model JSON")->required();
    s->add_option("--prompts", sw.prompts, "prompt file")->required();
    s->add_option("--tagger-bank", sw.bank, "tagger bank for ie");
    s->add_option("--schemes", sw.schemes, "comma-separated: kgw, sweet, ewd, ie, sweet+nav, ie+nav");
    s->add_option("--delta", sw.deltas, "comma-separated deltas");
    s->add_option("--gamma", sw.gammas, "comma-separated gammas");
    s->add_option("--tau", sw.tau, "entropy threshold");
    s->add_option("--z", sw.z, "detection z threshold");
    s->add_option("--key", sw.key, "watermark key");
    s->add_option("--n-docs", sw.n_docs, "documents per cell and class");
    s->add_option("--length", sw.length, "tokens per document");
    s->add_option("--format", sw.format, "csv or json");
    sw.nav.add(s);
    s->add_option("--seed", sw.seed, "seed");
    s->add_option("--out", sw.out, "output file (stdout when omitted)");

    TrainLmArgs lmargs;
    auto* l = app.add_subcommand("train-lm", "fit an n-gram model to a text corpus");
    l->add_option("--corpus", lmargs.corpus, "JSONL with text or plain text lines")->required();
    l->add_option("--order", lmargs.order, "n-gram order");
    l->add_option("--k", lmargs.k, "add-k smoothing");
    l->add_option("--tokenizer", lmargs.tokenizer, "word or byte");
    l->add_option("--seed", lmargs.seed, "seed");
    l->add_option("--out", lmargs.out, "model JSON")->required();

    ToyModelArgs toy;
    auto* tm = app.add_subcommand("toy-model", "write a synthetic model with controlled entropy");
    tm->add_option("--kind", toy.kind, "uniform, chain or controlled");
    tm->add_option("--vocab-size", toy.vocab_size, "vocabulary size");
    tm->add_option("--chain-length", toy.chain_length, "deterministic steps per chain");
    tm->add_option("--low", toy.low, "entropy of chain steps");
    tm->add_option("--high", toy.high, "entropy at chain ends (default 0.98 ln|V|)");
    tm->add_option("--schedule", toy.schedule, "entropy:peak,... for --kind controlled");
    tm->add_option("--key-mode", toy.key_mode, "previous or position");
    tm->add_option("--seed", toy.seed, "seed");
    tm->add_option("--out", toy.out, "model JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    CLI::App* sub = app.get_subcommands().front();
    RunContext ctx;
    ctx.command = sub->get_name();
    try {
        std::map<std::string, std::string> file_values;
        std::string path = config_path;
        if (path.empty())
            if (const char* env = std::getenv("LOWENT_WM_CONFIG")) path = env;
        if (!path.empty()) {
            file_values = load_config(path);
            ctx.inputs["config"] = path;
        }
        resolve_config(sub, file_values, ctx);
        auto run = [&](auto&& fn, auto& args) {
            ctx.seed = args.seed;
            return fn(args, ctx);
        };
        if (sub == g) return run(cmd_generate, gen);
        if (sub == d) return run(cmd_detect, det);
        if (sub == n) return run(cmd_navigate, navargs);
        if (sub == t) return run(cmd_train_tagger, tt);
        if (sub == c) return run(cmd_calibrate, cal);
        if (sub == at) return run(cmd_attack, att);
        if (sub == s) return run(cmd_sweep, sw);
        if (sub == l) return run(cmd_train_lm, lmargs);
        if (sub == tm) return run(cmd_toy_model, toy);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
