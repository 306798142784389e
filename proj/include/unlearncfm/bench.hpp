#pragma once

// Config-driven pipeline orchestration: corpus generation, pretraining,
// unlearning, evaluation, recovery and report consolidation over a run directory.

#include "protocol.hpp"
#include "unlearn.hpp"

#include <charconv>
#include <chrono>
#include <filesystem>
#include <set>

namespace unlearncfm {

inline constexpr std::string_view kToolVersion = "unlearncfm 1.0.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int diverged = 3;
inline constexpr int missing_dependency = 4;
}  // namespace exit_code

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingDependency : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// key=value config

struct ConfigEntry {
    std::string value;
    int line = 0;
};

/// Flat `key = value` lines; `#` starts a comment; keys may carry dotted prefixes.
class KvConfig {
public:
    static KvConfig parse(const std::string& text, const std::string& source = "config") {
        KvConfig cfg;
        cfg.source_ = source;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string s = trim(line);
            if (s.empty()) continue;
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + s + "'");
            const std::string key = trim(s.substr(0, eq));
            const std::string value = trim(s.substr(eq + 1));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
            if (auto it = cfg.entries_.find(key); it != cfg.entries_.end())
                throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "' (first set on line " +
                                  std::to_string(it->second.line) + ")");
            cfg.entries_[key] = {value, lineno};
        }
        return cfg;
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    template <typename T>
    T get(const std::string& key, T fallback) {
        used_.insert(key);
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        return convert<T>(key, it->second);
    }

    template <typename T>
    T require_key(const std::string& key) {
        used_.insert(key);
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError(source_ + ": missing required key '" + key + "'");
        return convert<T>(key, it->second);
    }

    /// Comma-separated list.
    template <typename T>
    std::vector<T> get_list(const std::string& key, std::vector<T> fallback) {
        used_.insert(key);
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        std::vector<T> out;
        std::istringstream is(it->second.value);
        std::string item;
        while (std::getline(is, item, ',')) out.push_back(convert<T>(key, {trim(item), it->second.line}));
        if (out.empty()) fail(key, it->second.line, "empty list");
        return out;
    }

    /// Rejects keys that no getter asked for.
    void check_all_used() const {
        for (const auto& [k, e] : entries_)
            if (!used_.count(k)) throw ConfigError(source_ + ":" + std::to_string(e.line) + ": unknown key '" + k + "'");
    }

    [[noreturn]] void fail(const std::string& key, int line, const std::string& what) const {
        throw ConfigError(source_ + ":" + std::to_string(line) + ": key '" + key + "': " + what);
    }

    int line_of(const std::string& key) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? 0 : it->second.line;
    }

    const std::string& source() const { return source_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    template <typename T>
    T convert(const std::string& key, const ConfigEntry& e) const {
        if constexpr (std::is_same_v<T, std::string>) {
            return e.value;
        } else if constexpr (std::is_same_v<T, bool>) {
            if (e.value == "true" || e.value == "1") return true;
            if (e.value == "false" || e.value == "0") return false;
            fail(key, e.line, "expected true|false, got '" + e.value + "'");
        } else if constexpr (std::is_floating_point_v<T>) {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(e.value, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos == 0 || pos != e.value.size() || !std::isfinite(v))
                fail(key, e.line, "expected a finite number, got '" + e.value + "'");
            return static_cast<T>(v);
        } else {
            T v{};
            const auto* b = e.value.data();
            const auto* end = b + e.value.size();
            auto [p, ec] = std::from_chars(b, end, v);
            if (ec != std::errc() || p != end) fail(key, e.line, "expected an integer, got '" + e.value + "'");
            return v;
        }
    }

    std::string source_;
    std::map<std::string, ConfigEntry> entries_;
    mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "run";
    CorpusSpec corpus;
    std::vector<int> k_sweep;
    TrainConfig pretrain;
    UnlearnConfig unlearn;
    EvalConfig eval;
    std::vector<Scenario> scenarios{Scenario::Standard};
    TrainConfig recover;
    double tiny_step_fraction = 0.4;
    int tiny_per_speaker = 1;
    int stage_points = 10;
    bool stage_eval = true;
    std::string text;  // raw config bytes

    /// Re-derives every stage seed from the global seed.
    void derive_seeds() {
        corpus.seed = derive_seed(seed, "corpus");
        pretrain.seed = derive_seed(seed, "pretrain");
        unlearn.seed = derive_seed(seed, "unlearn");
        unlearn.retrain.seed = pretrain.seed;
        eval.seed = derive_seed(seed, "eval");
        recover.seed = derive_seed(seed, "recover");
    }
};

inline std::uint64_t config_hash(const std::string& text) { return hash_str(text); }

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

namespace detail {

template <typename Fn>
void check_value(KvConfig& kv, const std::string& key, Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        kv.fail(key, kv.line_of(key), e.what());
    }
}

inline void read_schedule(KvConfig& kv, const std::string& prefix, LrSchedule& s, int steps) {
    s.peak = kv.get<double>(prefix + ".lr", s.peak);
    s.warmup = kv.get<std::int64_t>(prefix + ".warmup", s.warmup);
    s.total = steps;
    if (s.peak <= 0.0) kv.fail(prefix + ".lr", kv.line_of(prefix + ".lr"), "must be positive");
    if (s.warmup < 0) kv.fail(prefix + ".warmup", kv.line_of(prefix + ".warmup"), "must be >= 0");
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
    KvConfig kv = KvConfig::parse(text, source);
    RunConfig rc;
    rc.text = text;
    rc.seed = kv.require_key<std::uint64_t>("seed");
    rc.out = kv.get<std::string>("out", rc.out);

    auto& c = rc.corpus;
    c.n_remain = kv.get("corpus.n_remain", c.n_remain);
    c.n_forget = kv.get("corpus.n_forget", c.n_forget);
    c.n_unseen = kv.get("corpus.n_unseen", c.n_unseen);
    c.utts_min = kv.get("corpus.utts_min", c.utts_min);
    c.utts_max = kv.get("corpus.utts_max", c.utts_max);
    c.eval_per_speaker = kv.get("corpus.eval_per_speaker", c.eval_per_speaker);
    c.t_min = kv.get("corpus.t_min", c.t_min);
    c.t_max = kv.get("corpus.t_max", c.t_max);
    c.vocab = kv.get("corpus.vocab", c.vocab);
    c.d_content = kv.get("corpus.d_content", c.d_content);
    c.d_speaker = kv.get("corpus.d_speaker", c.d_speaker);
    c.sigma_data = kv.get("corpus.sigma_data", c.sigma_data);
    c.style_std = kv.get("corpus.style_std", c.style_std);
    c.run_min = kv.get("corpus.run_min", c.run_min);
    c.run_max = kv.get("corpus.run_max", c.run_max);
    rc.k_sweep = kv.get_list<int>("corpus.k_sweep", {});
    for (int k : rc.k_sweep)
        if (k < 1 || k > c.n_forget)
            kv.fail("corpus.k_sweep", kv.line_of("corpus.k_sweep"), "each k must be in [1, corpus.n_forget]");

    auto& a = rc.pretrain.arch;
    a.hidden = kv.get("model.hidden", a.hidden);
    a.layers = kv.get("model.layers", a.layers);
    a.token_dim = kv.get("model.token_dim", a.token_dim);
    a.time_pairs = kv.get("model.time_pairs", a.time_pairs);
    a.activation = kv.get<std::string>("model.activation", a.activation);
    detail::check_value(kv, "model.activation", [&] { a.validate(); });

    auto& p = rc.pretrain;
    p.steps = kv.get("pretrain.steps", p.steps);
    p.batch = kv.get("pretrain.batch", p.batch);
    detail::read_schedule(kv, "pretrain", p.schedule, p.steps);
    p.mask_min_frac = kv.get("pretrain.mask_min", p.mask_min_frac);
    p.mask_max_frac = kv.get("pretrain.mask_max", p.mask_max_frac);
    p.cond_drop = kv.get("pretrain.cond_drop", p.cond_drop);
    p.path.sigma_min = kv.get("path.sigma_min", p.path.sigma_min);
    detail::check_value(kv, "pretrain.steps", [&] { p.validate(); });

    auto& s = rc.eval.sampler;
    s.nfe = kv.get("sampler.nfe", s.nfe);
    s.alpha = kv.get("sampler.alpha", s.alpha);
    const auto solver = kv.get<std::string>("sampler.solver", std::string(solver_name(s.solver)));
    detail::check_value(kv, "sampler.solver", [&] { s.solver = parse_solver(solver); });
    detail::check_value(kv, "sampler.nfe", [&] { s.validate(); });

    auto& u = rc.unlearn;
    u.steps = kv.get("unlearn.steps", u.steps);
    u.batch = kv.get("unlearn.batch", u.batch);
    detail::read_schedule(kv, "unlearn", u.schedule, u.steps);
    u.ascent_schedule.warmup = u.schedule.warmup;
    u.ascent_schedule.peak = kv.get("unlearn.ascent_lr", u.ascent_schedule.peak);
    u.ascent_schedule.total = u.steps;
    u.lambda = kv.get("unlearn.lambda", u.lambda);
    u.forget_batch_prob = kv.get("unlearn.forget_batch_prob", u.forget_batch_prob);
    u.kl_lambda = kv.get("unlearn.kl_lambda", u.kl_lambda);
    u.blowup_threshold = kv.get("unlearn.blowup_threshold", u.blowup_threshold);
    u.blowup_strikes = kv.get("unlearn.blowup_strikes", u.blowup_strikes);
    u.mask_min_frac = p.mask_min_frac;
    u.mask_max_frac = p.mask_max_frac;
    u.cond_drop = p.cond_drop;
    u.path = p.path;
    u.teacher_sampler = s;
    u.teacher_sampler.nfe = kv.get("unlearn.teacher_nfe", s.nfe);
    u.retrain = p;
    rc.stage_points = kv.get("unlearn.stage_points", rc.stage_points);
    rc.stage_eval = kv.get("unlearn.stage_eval", rc.stage_eval);
    detail::check_value(kv, "unlearn.steps", [&] { u.validate(); });
    if (rc.stage_points < 1) kv.fail("unlearn.stage_points", kv.line_of("unlearn.stage_points"), "must be >= 1");

    auto& e = rc.eval;
    e.prompt_len = kv.get("eval.prompt_len", e.prompt_len);
    e.snr_db = kv.get("eval.snr_db", e.snr_db);
    e.noise_fraction = kv.get("eval.noise_fraction", e.noise_fraction);
    e.robust_percentile = kv.get("eval.robust_percentile", e.robust_percentile);
    e.zrf_temperature = kv.get("eval.temperature", e.zrf_temperature);
    e.fsd_components = kv.get("eval.fsd_components", e.fsd_components);
    detail::check_value(kv, "eval.prompt_len", [&] { e.validate(); });
    const auto scen = kv.get_list<std::string>("eval.scenarios", {"standard"});
    rc.scenarios.clear();
    for (const auto& sc : scen) detail::check_value(kv, "eval.scenarios", [&] { rc.scenarios.push_back(parse_scenario(sc)); });

    auto& r = rc.recover;
    r = p;
    r.steps = kv.get("recover.steps", 300);
    r.schedule = LrSchedule{p.schedule.peak, 0, r.steps};
    detail::read_schedule(kv, "recover", r.schedule, r.steps);
    rc.tiny_step_fraction = kv.get("recover.tiny_step_fraction", rc.tiny_step_fraction);
    rc.tiny_per_speaker = kv.get("recover.tiny_per_speaker", rc.tiny_per_speaker);
    if (rc.tiny_step_fraction < 0.0 || rc.tiny_step_fraction > 1.0)
        kv.fail("recover.tiny_step_fraction", kv.line_of("recover.tiny_step_fraction"), "must be in [0,1]");
    if (rc.tiny_per_speaker < 1)
        kv.fail("recover.tiny_per_speaker", kv.line_of("recover.tiny_per_speaker"), "must be >= 1");

    detail::check_value(kv, "corpus.n_remain", [&] { c.validate(); });
    kv.check_all_used();
    rc.derive_seeds();
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingDependency("config file not found: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Run directory

namespace fs = std::filesystem;

/// Every file of a run lives directly in one directory; the manifest lists all of them.
class RunDir {
public:
    explicit RunDir(fs::path root) : root_(std::move(root)) {}

    const fs::path& root() const { return root_; }
    fs::path file(const std::string& name) const { return root_ / name; }
    bool exists(const std::string& name) const { return fs::exists(file(name)); }

    void ensure() const { fs::create_directories(root_); }

    fs::path need(const std::string& name, const std::string& hint) const {
        if (!exists(name)) throw MissingDependency("missing " + file(name).string() + " (" + hint + ")");
        return file(name);
    }

    void write_text(const std::string& name, const std::string& text) const {
        std::ofstream os(file(name), std::ios::binary);
        require(static_cast<bool>(os), ErrorKind::Io, "cannot write " + file(name).string());
        os << text;
    }

    std::string read_text(const std::string& name) const {
        std::ifstream is(file(name), std::ios::binary);
        require(static_cast<bool>(is), ErrorKind::Io, "cannot read " + file(name).string());
        std::ostringstream ss;
        ss << is.rdbuf();
        return ss.str();
    }

    std::vector<std::string> files() const {
        std::vector<std::string> out;
        if (!fs::exists(root_)) return out;
        for (const auto& e : fs::directory_iterator(root_))
            if (e.is_regular_file()) out.push_back(e.path().filename().string());
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    fs::path root_;
};

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kStageLogName = "stages.log";

/// Appends a timestamped stage line, then rewrites the manifest over the
/// current directory contents.
inline void update_manifest(const RunDir& dir, const RunConfig& rc, const std::string& stage) {
    {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::ofstream log(dir.file(kStageLogName), std::ios::app);
        log << stage << " " << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ") << "\n";
    }
    std::ostringstream os;
    os << "tool_version=" << kToolVersion << "\n";
    os << "config_hash=" << hex64(config_hash(rc.text)) << "\n";
    os << "seed=" << rc.seed << "\n";
    for (const auto& f : dir.files()) {
        if (f == kManifestName) continue;
        os << "file=" << f << " bytes=" << fs::file_size(dir.file(f));
        if (f != kStageLogName) os << " hash=" << hex64(hash_str(dir.read_text(f)));
        os << "\n";
    }
    dir.write_text(kManifestName, os.str());
}

// ---------------------------------------------------------------------------
// Commands

struct CommandOptions {
    std::string method;    // unlearn, eval, recover
    std::string scenario;  // eval; empty means the configured list
    std::string budget;    // recover
};

inline std::ostream* g_log = &std::cerr;

namespace detail {

inline Corpus need_corpus(const RunDir& dir) { return load_corpus(dir.need("corpus.bin", "run gen-corpus first").string()); }

inline Checkpoint need_pretrained(const RunDir& dir) {
    return load_checkpoint(dir.need("pretrain.ckpt", "run pretrain first").string());
}

inline std::string model_label(const std::string& method) { return method.empty() ? "pretrained" : method; }

inline Checkpoint need_model(const RunDir& dir, const std::string& label) {
    if (label == "pretrained") return need_pretrained(dir);
    return load_checkpoint(dir.need("unlearn_" + label + ".ckpt", "run unlearn --method " + label + " first").string());
}

inline bool model_diverged(const RunDir& dir, const std::string& label) {
    return dir.exists("unlearn_" + label + ".status") && dir.read_text("unlearn_" + label + ".status").rfind("diverged", 0) == 0;
}

inline void write_eval_files(const RunDir& dir, const std::string& stem, const std::string& label, const EvalReport& rep) {
    dir.write_text(stem + ".txt", report_summary(rep));
    dir.write_text(stem + ".md", markdown_table({{label, rep}}));
    dir.write_text(stem + "_rows.csv", rows_csv(rep));
    dir.write_text(stem + "_emb.csv", embeddings_csv(rep));
}

}  // namespace detail

inline int cmd_gen_corpus(const RunConfig& rc, const RunDir& dir) {
    dir.ensure();
    dir.write_text("config.txt", rc.text);
    Corpus c = generate_corpus(rc.corpus);
    save_corpus(dir.file("corpus.bin").string(), c);
    dir.write_text("corpus_manifest.txt", corpus_manifest(c));
    for (int k : rc.k_sweep) {
        Corpus ck = with_forget_subset(c, k, derive_seed(rc.seed, "corpus/k-sweep"));
        save_corpus(dir.file("corpus_k" + std::to_string(k) + ".bin").string(), ck);
        dir.write_text("corpus_k" + std::to_string(k) + "_manifest.txt", corpus_manifest(ck));
    }
    *g_log << "corpus: " << c.utterances.size() << " utterances, hash " << hex64(hash_str(corpus_bytes(c))) << "\n";
    update_manifest(dir, rc, "gen-corpus");
    return exit_code::ok;
}

inline int cmd_pretrain(const RunConfig& rc, const RunDir& dir) {
    Corpus c = detail::need_corpus(dir);
    TrainResult tr = pretrain(c, rc.pretrain, [&](std::int64_t step, const ModelParams&) {
        if (step % 500 == 0) *g_log << "pretrain step " << step << "\n";
    });
    save_checkpoint(dir.file("pretrain.ckpt").string(), tr.checkpoint);
    write_loss_curve(dir.file("pretrain_loss.csv").string(), tr.curve);
    update_manifest(dir, rc, "pretrain");
    if (tr.diverged) {
        *g_log << "pretrain diverged: " << tr.message << "\n";
        return exit_code::diverged;
    }
    return exit_code::ok;
}

/// Stage checkpoints at every 1/stage_points of the unlearning budget.
inline std::vector<std::int64_t> stage_steps(int steps, int points) {
    std::vector<std::int64_t> out;
    for (int i = 1; i <= points; ++i) out.push_back(static_cast<std::int64_t>(std::llround(static_cast<double>(steps) * i / points)));
    return out;
}

inline int cmd_unlearn(const RunConfig& rc, const RunDir& dir, const std::string& method_str) {
    const Method method = parse_method(method_str);
    Corpus c = detail::need_corpus(dir);
    Checkpoint pre = detail::need_pretrained(dir);
    UnlearnConfig uc = rc.unlearn;
    uc.method = method;
    uc.seed = derive_seed(rc.unlearn.seed, method_name(method));
    uc.retrain.arch = pre.params.arch;

    const int budget = method == Method::Exact ? uc.retrain.steps : uc.steps;
    const auto marks = stage_steps(budget, rc.stage_points);
    std::vector<std::pair<std::int64_t, ModelParams>> stages;
    auto hook = [&](std::int64_t step, const ModelParams& p) {
        if (std::find(marks.begin(), marks.end(), step) != marks.end()) stages.emplace_back(step, p);
        if (step % 200 == 0) *g_log << method_name(method) << " step " << step << "\n";
    };
    UnlearnResult res = unlearn(pre, c, uc, hook);
    const std::string stem = "unlearn_" + std::string(method_name(method));
    save_checkpoint(dir.file(stem + ".ckpt").string(), res.checkpoint);
    write_unlearn_log(dir.file(stem + ".jsonl").string(), res.log);
    dir.write_text(stem + ".status", res.diverged ? "diverged: " + res.message + "\n" : "ok\n");

    if (rc.stage_eval) {
        std::ostringstream os;
        os << "method,stage,step,cer_r,sim_r,cer_f,sim_f,spk_zrf_r,spk_zrf_f\n";
        int idx = 0;
        for (const auto& [step, params] : stages) {
            EvalReport rep = run_protocol(params, pre.params, c, Scenario::Standard, rc.eval);
            os << method_name(method) << "," << ++idx << "," << step;
            for (const auto& col : report_columns(Scenario::Standard)) os << "," << detail::csv_value(report_value(rep, col));
            os << "\n";
        }
        dir.write_text(stem + "_curve.csv", os.str());
    }
    update_manifest(dir, rc, "unlearn " + std::string(method_name(method)));
    if (res.diverged) {
        *g_log << method_name(method) << " halted: " << res.message << "\n";
        return exit_code::diverged;
    }
    return exit_code::ok;
}

inline int cmd_eval(const RunConfig& rc, const RunDir& dir, const std::string& method, const std::string& scenario) {
    Corpus c = detail::need_corpus(dir);
    Checkpoint pre = detail::need_pretrained(dir);
    const std::string label = detail::model_label(method);
    if (label != "pretrained") parse_method(label);
    Checkpoint model = detail::need_model(dir, label);
    std::vector<Scenario> scenarios = rc.scenarios;
    if (!scenario.empty()) scenarios = {parse_scenario(scenario)};
    for (Scenario s : scenarios) {
        EvalReport rep = run_protocol(model.params, pre.params, c, s, rc.eval);
        rep.diverged = detail::model_diverged(dir, label);
        detail::write_eval_files(dir, "eval_" + label + "_" + std::string(scenario_name(s)), label, rep);
        *g_log << markdown_table({{label, rep}});
    }
    update_manifest(dir, rc, "eval " + label);
    return exit_code::ok;
}

inline int cmd_recover(const RunConfig& rc, const RunDir& dir, const std::string& method, const std::string& budget) {
    require(budget == "full" || budget == "tiny", ErrorKind::InvalidArgument,
            "unknown budget '" + budget + "' (expected full|tiny)");
    Corpus c = detail::need_corpus(dir);
    Checkpoint pre = detail::need_pretrained(dir);
    const std::string label = method.empty() ? "tgu" : method;
    parse_method(label);
    Checkpoint start = detail::need_model(dir, label);
    TrainConfig tc = rc.recover;
    tc.seed = derive_seed(rc.recover.seed, budget);
    int per_speaker = 0;
    if (budget == "tiny") {
        tc.steps = static_cast<int>(std::llround(rc.tiny_step_fraction * tc.steps));
        tc.schedule.total = tc.steps;
        per_speaker = rc.tiny_per_speaker;
    }
    EvalReport before = run_protocol(start.params, pre.params, c, Scenario::Standard, rc.eval);
    TrainResult tr = recover_train(start.params, c, tc, per_speaker);
    EvalReport after = run_protocol(tr.checkpoint.params, pre.params, c, Scenario::Standard, rc.eval);
    const std::string stem = "recover_" + label + "_" + budget;
    save_checkpoint(dir.file(stem + ".ckpt").string(), tr.checkpoint);
    dir.write_text(stem + "_before.txt", report_summary(before));
    dir.write_text(stem + "_after.txt", report_summary(after));
    dir.write_text(stem + ".md", "recover steps: " + std::to_string(tc.steps) + ", budget: " + budget + "\n\n" +
                                     markdown_table({{label + " before", before}, {label + " after", after}}));
    update_manifest(dir, rc, "recover " + label + " " + budget);
    return tr.diverged ? exit_code::diverged : exit_code::ok;
}

namespace detail {

/// Parses a rows CSV back into per-row metric columns.
inline std::map<std::string, std::vector<double>> read_row_metrics(const std::string& csv) {
    std::map<std::string, std::vector<double>> out;
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() < 6) continue;
        const bool forget = f[1] == "forget";
        const std::string suffix = forget ? "-F" : "-R";
        if (!f[3].empty()) out["SIM" + suffix].push_back(std::stod(f[3]));
        if (!f[4].empty()) out["CER" + suffix].push_back(std::stod(f[4]));
        if (!f[5].empty()) out["spk-ZRF" + suffix].push_back(1.0 - std::stod(f[5]));
    }
    return out;
}

}  // namespace detail

inline int cmd_report(const RunConfig& rc, const RunDir& dir) {
    const std::string suffix = "_standard.txt";
    std::vector<std::pair<std::string, EvalReport>> reports;
    std::vector<std::string> labels;
    for (const auto& f : dir.files()) {
        if (f.rfind("eval_", 0) != 0 || f.size() <= suffix.size() || f.compare(f.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        const std::string label = f.substr(5, f.size() - 5 - suffix.size());
        reports.emplace_back(label, parse_report_summary(dir.read_text(f)));
        labels.push_back(label);
    }
    if (reports.empty()) throw MissingDependency("report: no standard evaluations in " + dir.root().string() + " (run eval first)");
    // pretrained first, then methods in their canonical order
    auto rank = [](const std::string& l) {
        if (l == "pretrained") return -1;
        try {
            return static_cast<int>(parse_method(l));
        } catch (const Error&) {
            return 100;
        }
    };
    std::stable_sort(reports.begin(), reports.end(), [&](const auto& a, const auto& b) { return rank(a.first) < rank(b.first); });

    std::ostringstream md, matrix, anova;
    md << "# Unlearning report\n\nconfig hash " << hex64(config_hash(rc.text)) << ", seed " << rc.seed << "\n\n";
    md << markdown_table(reports) << "\n";
    const auto cols = report_columns(Scenario::Standard);
    matrix << "method";
    for (const auto& ccol : cols) matrix << "," << ccol;
    matrix << ",diverged\n";
    for (const auto& [label, rep] : reports) {
        matrix << label;
        for (const auto& ccol : cols) matrix << "," << detail::csv_value(report_value(rep, ccol));
        matrix << "," << (rep.diverged ? 1 : 0) << "\n";
    }

    anova << "metric,f,df_between,df_within\n";
    std::map<std::string, std::vector<std::vector<double>>> groups;
    std::vector<std::string> methods_in_anova;
    for (const auto& [label, rep] : reports) {
        if (label == "pretrained") continue;
        const auto rows = detail::read_row_metrics(dir.read_text("eval_" + label + "_standard_rows.csv"));
        for (const auto& ccol : cols) groups[ccol].push_back(rows.count(ccol) ? rows.at(ccol) : std::vector<double>{});
        methods_in_anova.push_back(label);
    }
    md << "## One-way ANOVA across methods\n\n";
    if (methods_in_anova.size() >= 2) {
        md << "| Metric | F | df |\n|---|---|---|\n";
        for (const auto& ccol : cols) {
            const auto res = anova_f(groups[ccol]);
            anova << ccol << "," << detail::csv_value(res.f) << "," << res.df_between << "," << res.df_within << "\n";
            md << "| " << ccol << " | " << detail::fmt(res.f) << " | (" << res.df_between << ", " << res.df_within << ") |\n";
        }
    } else {
        md << "needs at least two evaluated methods\n";
    }

    std::ostringstream curves;
    curves << "method,stage,step,cer_r,sim_r,cer_f,sim_f,spk_zrf_r,spk_zrf_f\n";
    bool any_curve = false;
    for (const auto& f : dir.files()) {
        if (f.rfind("unlearn_", 0) != 0 || f.find("_curve.csv") == std::string::npos) continue;
        const std::string body = dir.read_text(f);
        curves << body.substr(body.find('\n') + 1);
        any_curve = true;
    }
    for (const auto& f : dir.files())
        if (f.rfind("recover_", 0) == 0 && f.size() > 3 && f.compare(f.size() - 3, 3, ".md") == 0)
            md << "\n## " << f.substr(0, f.size() - 3) << "\n\n" << dir.read_text(f);
    dir.write_text("report.md", md.str());
    dir.write_text("report_matrix.csv", matrix.str());
    dir.write_text("report_anova.csv", anova.str());
    if (any_curve) dir.write_text("report_curves.csv", curves.str());
    update_manifest(dir, rc, "report");
    return exit_code::ok;
}

/// Maps exceptions from a command onto the exit-code contract.
template <typename Fn>
int guarded(Fn&& fn, std::ostream& err = std::cerr) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_code::config;
    } catch (const MissingDependency& e) {
        err << "missing dependency: " << e.what() << "\n";
        return exit_code::missing_dependency;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Diverged) {
            err << "diverged: " << e.what() << "\n";
            return exit_code::diverged;
        }
        if (e.kind() == ErrorKind::InvalidArgument) {
            err << "invalid argument: " << e.what() << "\n";
            return exit_code::config;
        }
        err << "error: " << e.what() << "\n";
        return exit_code::failure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::failure;
    }
}

}  // namespace unlearncfm
