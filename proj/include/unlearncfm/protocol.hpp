#pragma once

// Zero-shot evaluation protocol: prompt construction, sampling through a
// generator, and aggregation into SIM / CER / spk-ZRF / FSD reports.

#include "flowmatch.hpp"
#include "metrics.hpp"
#include "parallel.hpp"

#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

namespace unlearncfm {

enum class Scenario { Standard, Robustness, Noise, Diverse };

inline std::string_view scenario_name(Scenario s) {
    switch (s) {
        case Scenario::Standard: return "standard";
        case Scenario::Robustness: return "robustness";
        case Scenario::Noise: return "noise";
        case Scenario::Diverse: return "diverse";
    }
    return "?";
}

inline Scenario parse_scenario(std::string_view s) {
    for (Scenario x : {Scenario::Standard, Scenario::Robustness, Scenario::Noise, Scenario::Diverse})
        if (scenario_name(x) == s) return x;
    throw Error(ErrorKind::InvalidArgument,
                "unknown scenario '" + std::string(s) + "' (expected standard|robustness|noise|diverse)");
}

struct EvalConfig {
    SamplerConfig sampler{};
    int prompt_len = 8;
    double snr_db = -10.0;
    double noise_fraction = 0.5;
    double robust_percentile = 0.9;
    double zrf_temperature = 1.0;
    int fsd_components = 8;
    int chunk = 16;  // requests per batched sampler call
    std::uint64_t seed = 23;

    void validate() const {
        sampler.validate();
        require(prompt_len >= 1, ErrorKind::InvalidArgument, "eval: prompt_len must be >= 1");
        require(noise_fraction > 0.0 && noise_fraction <= 1.0, ErrorKind::InvalidArgument,
                "eval: noise_fraction must be in (0,1]");
        require(robust_percentile > 0.0 && robust_percentile < 1.0, ErrorKind::InvalidArgument,
                "eval: robust_percentile must be in (0,1)");
        require(zrf_temperature > 0.0, ErrorKind::InvalidArgument, "eval: zrf_temperature must be positive");
        require(fsd_components >= 1 && chunk >= 1, ErrorKind::InvalidArgument, "eval: fsd_components, chunk >= 1");
    }
};

/// Maps sampling requests to generated frame sequences. Must be a pure
/// function of the requests so results do not depend on chunk scheduling.
using Generator = std::function<std::vector<Matrix>(std::span<const SampleRequest>, const SamplerConfig&)>;

inline Generator model_generator(ModelParams params) {
    return [p = std::move(params)](std::span<const SampleRequest> reqs, const SamplerConfig& scfg) {
        return sample_ode_batch(p, reqs, scfg);
    };
}

// ---------------------------------------------------------------------------
// Baselines and scenario helpers

struct SimBaselines {
    double same_mean = 0.0;
    double same_std = 0.0;
    double diff_mean = 0.0;
    double diff_std = 0.0;
    double diff_q1 = 0.0, diff_q3 = 0.0, same_q1 = 0.0, same_q3 = 0.0;
    double diff_percentile = 0.0;  // at EvalConfig::robust_percentile
    std::size_t same_pairs = 0;
    std::size_t diff_pairs = 0;

    /// SIM level below which a cloned voice counts as a different speaker.
    double forget_threshold() const { return diff_mean + 2.0 * diff_std; }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Linear-interpolated quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
    require(!v.empty(), ErrorKind::InvalidArgument, "quantile of empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// The utterance whose leading frames prompt `target`: the next eval
/// utterance of the same speaker, or the next utterance if none other exists.
inline const Utterance& prompt_source(const Corpus& corpus, const Utterance& target) {
    auto ids = corpus.utterances_of(target.speaker, true);
    if (ids.size() < 2) ids = corpus.utterances_of(target.speaker, false);
    require(ids.size() >= 2, ErrorKind::InvalidArgument,
            "eval: speaker " + std::to_string(target.speaker) + " has no second utterance for a prompt");
    const auto it = std::find(ids.begin(), ids.end(), target.id);
    const std::size_t pos = it == ids.end() ? 0 : static_cast<std::size_t>(it - ids.begin());
    return corpus.utterances[ids[(pos + 1) % ids.size()]];
}

}  // namespace detail

/// Same-speaker pairs: every eval utterance against its protocol prompt.
/// Different-speaker pairs: first-utterance prompt of one speaker against the
/// first utterance of every other speaker.
inline SimBaselines sim_baselines(const Corpus& corpus, int prompt_len, double percentile = 0.9) {
    std::vector<double> same, diff;
    for (const auto& u : corpus.utterances) {
        if (!u.eval) continue;
        const auto& src = detail::prompt_source(corpus, u);
        same.push_back(sim(speaker_extract(u.frames, corpus), speaker_extract(make_prompt(src, prompt_len).frames, corpus)));
    }
    std::vector<Vector> prompt_emb, full_emb;
    for (const auto& s : corpus.speakers) {
        const auto& first = corpus.utterances[corpus.utterances_of(s.id, false).front()];
        prompt_emb.push_back(speaker_extract(make_prompt(first, prompt_len).frames, corpus));
        full_emb.push_back(speaker_extract(first.frames, corpus));
    }
    for (std::size_t a = 0; a < prompt_emb.size(); ++a)
        for (std::size_t b = 0; b < full_emb.size(); ++b)
            if (a != b) diff.push_back(sim(prompt_emb[a], full_emb[b]));
    SimBaselines r;
    r.same_mean = detail::mean_of(same);
    r.same_std = detail::std_of(same);
    r.diff_mean = detail::mean_of(diff);
    r.diff_std = detail::std_of(diff);
    r.same_q1 = detail::quantile(same, 0.25);
    r.same_q3 = detail::quantile(same, 0.75);
    r.diff_q1 = detail::quantile(diff, 0.25);
    r.diff_q3 = detail::quantile(diff, 0.75);
    r.diff_percentile = detail::quantile(diff, percentile);
    r.same_pairs = same.size();
    r.diff_pairs = diff.size();
    return r;
}

/// Per-coordinate noise variance for a target SNR in dB relative to the mean
/// squared value of `frames`.
inline double noise_power(const Matrix& frames, double snr_db) {
    require(frames.size() > 0, ErrorKind::InvalidArgument, "noise_power: empty frames");
    const double signal = frames.squaredNorm() / static_cast<double>(frames.size());
    return signal * std::pow(10.0, -snr_db / 10.0);
}

/// Adds white noise at `snr_db` over rows [begin, begin + count).
inline Matrix corrupt_segment(const Matrix& frames, Eigen::Index begin, Eigen::Index count, double snr_db, Rng& rng) {
    require(begin >= 0 && count >= 0 && begin + count <= frames.rows(), ErrorKind::InvalidArgument,
            "corrupt_segment: range outside the sequence");
    Matrix out = frames;
    const double sd = std::sqrt(noise_power(frames, snr_db));
    out.middleRows(begin, count) += gaussian_matrix(rng, count, frames.cols(), sd);
    return out;
}

/// Mean frame of each sequence as a feature row.
inline Matrix sequence_features(const std::vector<Matrix>& seqs) {
    require(!seqs.empty(), ErrorKind::InvalidArgument, "features: empty set");
    Matrix f(static_cast<Eigen::Index>(seqs.size()), seqs.front().cols());
    for (std::size_t i = 0; i < seqs.size(); ++i) f.row(static_cast<Eigen::Index>(i)) = seqs[i].colwise().mean();
    return f;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
    std::uint32_t utt_id = 0;
    Split split = Split::Unseen;
    bool forget_group = false;
    std::optional<double> sim;
    double cer = 0.0;
    std::optional<double> jsd;
    double covariate = 0.0;  // robustness: max prompt SIM to any forget prompt
    Vector embedding;
};

struct EvalReport {
    Scenario scenario = Scenario::Standard;
    std::optional<double> sim_r, sim_f, cer_r, cer_f, zrf_r, zrf_f;
    std::optional<double> fsd, pearson_r, pearson_p;
    std::optional<double> noisy_sim_r, noisy_cer_r;
    std::optional<double> threshold;  // robustness prompt-selection level
    std::size_t n_r = 0, n_f = 0;
    std::vector<EvalRow> rows;
    bool diverged = false;
    std::string note;
};

namespace detail {

inline void aggregate(EvalReport& rep) {
    auto mean_if = [&](bool forget, auto get) -> std::optional<double> {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : rep.rows) {
            if (r.forget_group != forget) continue;
            auto v = get(r);
            if (!v) return std::nullopt;
            s += *v;
            ++n;
        }
        if (n == 0) return std::nullopt;
        return s / static_cast<double>(n);
    };
    auto get_sim = [](const EvalRow& r) { return r.sim; };
    auto get_cer = [](const EvalRow& r) { return std::optional<double>(r.cer); };
    auto get_zrf = [](const EvalRow& r) { return r.jsd ? std::optional<double>(1.0 - *r.jsd) : std::nullopt; };
    rep.sim_r = mean_if(false, get_sim);
    rep.sim_f = mean_if(true, get_sim);
    rep.cer_r = mean_if(false, get_cer);
    rep.cer_f = mean_if(true, get_cer);
    rep.zrf_r = mean_if(false, get_zrf);
    rep.zrf_f = mean_if(true, get_zrf);
    rep.n_r = static_cast<std::size_t>(std::count_if(rep.rows.begin(), rep.rows.end(), [](const auto& r) { return !r.forget_group; }));
    rep.n_f = rep.rows.size() - rep.n_r;
}

/// Runs the generator over fixed-size chunks; chunk boundaries depend only on
/// the request order, never on the worker count.
inline std::vector<Matrix> generate_chunked(const Generator& gen, const std::vector<SampleRequest>& reqs,
                                            const SamplerConfig& scfg, int chunk) {
    const std::size_t n_chunks = (reqs.size() + static_cast<std::size_t>(chunk) - 1) / static_cast<std::size_t>(chunk);
    std::vector<std::vector<Matrix>> parts(n_chunks);
    parallel_for(n_chunks, [&](std::size_t c) {
        const std::size_t b = c * static_cast<std::size_t>(chunk);
        const std::size_t e = std::min(reqs.size(), b + static_cast<std::size_t>(chunk));
        parts[c] = gen(std::span<const SampleRequest>(reqs.data() + b, e - b), scfg);
    });
    std::vector<Matrix> out;
    out.reserve(reqs.size());
    for (auto& p : parts)
        for (auto& m : p) out.push_back(std::move(m));
    require(out.size() == reqs.size(), ErrorKind::ShapeMismatch, "generator returned the wrong number of samples");
    return out;
}

struct Item {
    const Utterance* target = nullptr;
    bool forget_group = false;
    SampleRequest request;
    SampleRequest teacher_request;
    Eigen::Index region_begin = 0;
    Vector reference;  // speaker embedding the output is compared with
    double covariate = 0.0;
    std::optional<double> noisy_sim, noisy_cer;
};

inline Matrix item_noise(const EvalConfig& cfg, const Utterance& u, Eigen::Index rows, int dim) {
    Rng rng(derive_seed(cfg.seed, "eval/noise", u.id));
    return gaussian_matrix(rng, rows, dim);
}

/// Prompted zero-shot item: prompt frames first, target text region second.
inline Item prompted_item(const Corpus& corpus, const Utterance& target, const Utterance& source,
                          const EvalConfig& cfg) {
    const Prompt p = make_prompt(source, cfg.prompt_len);
    const Eigen::Index P = p.frames.rows();
    const Eigen::Index T = P + target.length();
    Item it;
    it.target = &target;
    it.region_begin = P;
    it.reference = speaker_extract(p.frames, corpus);
    it.request.x0 = item_noise(cfg, target, T, corpus.dim());
    TokenSeq toks = p.content;
    toks.insert(toks.end(), target.content.begin(), target.content.end());
    it.request.content = std::move(toks);
    Matrix ctx = Matrix::Zero(T, corpus.dim());
    ctx.topRows(P) = p.frames;
    it.request.context = std::move(ctx);
    it.request.mask.assign(static_cast<std::size_t>(T), true);
    std::fill(it.request.mask.begin(), it.request.mask.begin() + P, false);
    it.teacher_request.x0 = it.request.x0.bottomRows(target.length());
    it.teacher_request.content = target.content;
    return it;
}

inline std::vector<const Utterance*> eval_targets(const Corpus& corpus, Split split) {
    std::vector<const Utterance*> out;
    for (auto id : corpus.eval_utterances(split)) out.push_back(&corpus.utterances[id]);
    return out;
}

}  // namespace detail

/// Builds the scenario's evaluation items. Remain-side (-R) items come from
/// unseen speakers, except in the robustness scenario which screens remain and
/// unseen prompts by their similarity to forget speakers.
inline std::vector<detail::Item> build_items(const Corpus& corpus, Scenario scenario, const EvalConfig& cfg,
                                             const SimBaselines& base) {
    std::vector<detail::Item> items;
    switch (scenario) {
        case Scenario::Standard: {
            for (Split s : {Split::Unseen, Split::Forget})
                for (const auto* u : detail::eval_targets(corpus, s)) {
                    auto it = detail::prompted_item(corpus, *u, detail::prompt_source(corpus, *u), cfg);
                    it.forget_group = s == Split::Forget;
                    items.push_back(std::move(it));
                }
            break;
        }
        case Scenario::Robustness: {
            std::vector<Vector> forget_prompts;
            for (auto spk : corpus.speakers_in(Split::Forget))
                for (auto id : corpus.utterances_of(spk, false))
                    forget_prompts.push_back(speaker_extract(make_prompt(corpus.utterances[id], cfg.prompt_len).frames, corpus));
            require(!forget_prompts.empty(), ErrorKind::InvalidArgument, "robustness: corpus has no forget speakers");
            for (Split s : {Split::Remain, Split::Unseen})
                for (const auto* u : detail::eval_targets(corpus, s)) {
                    auto it = detail::prompted_item(corpus, *u, detail::prompt_source(corpus, *u), cfg);
                    double best = -1.0;
                    for (const auto& f : forget_prompts) best = std::max(best, sim(it.reference, f));
                    it.covariate = best;
                    items.push_back(std::move(it));
                }
            (void)base;
            break;
        }
        case Scenario::Noise: {
            for (Split s : {Split::Unseen, Split::Forget})
                for (const auto* u : detail::eval_targets(corpus, s)) {
                    const Eigen::Index T = u->length();
                    const Eigen::Index n = std::max<Eigen::Index>(
                        1, static_cast<Eigen::Index>(std::floor(cfg.noise_fraction * static_cast<double>(T))));
                    Rng rng(derive_seed(cfg.seed, "eval/corrupt", u->id));
                    const Eigen::Index begin = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(T - n + 1)));
                    const Matrix noisy = corrupt_segment(u->frames, begin, n, cfg.snr_db, rng);
                    detail::Item it;
                    it.target = u;
                    it.forget_group = s == Split::Forget;
                    it.region_begin = 0;
                    it.reference = speaker_extract(u->frames, corpus);
                    it.noisy_sim = sim(speaker_extract(noisy, corpus), it.reference);
                    it.noisy_cer = content_error_rate(u->content, content_decode(noisy, corpus));
                    it.request.x0 = detail::item_noise(cfg, *u, T, corpus.dim());
                    it.request.content = u->content;
                    Matrix ctx = noisy;
                    ctx.middleRows(begin, n).setZero();
                    it.request.context = std::move(ctx);
                    it.request.mask.assign(static_cast<std::size_t>(T), false);
                    std::fill(it.request.mask.begin() + begin, it.request.mask.begin() + begin + n, true);
                    it.teacher_request.x0 = it.request.x0;
                    it.teacher_request.content = u->content;
                    items.push_back(std::move(it));
                }
            break;
        }
        case Scenario::Diverse: {
            for (Split s : {Split::Unseen, Split::Forget})
                for (const auto* u : detail::eval_targets(corpus, s)) {
                    detail::Item it;
                    it.target = u;
                    it.forget_group = s == Split::Forget;
                    it.request.x0 = detail::item_noise(cfg, *u, u->length(), corpus.dim());
                    it.request.content = u->content;
                    items.push_back(std::move(it));
                }
            break;
        }
    }
    return items;
}

/// Evaluates `tested` against the reference teacher under one scenario.
inline EvalReport run_protocol(const Generator& tested, const Generator& teacher, const Corpus& corpus,
                               Scenario scenario, const EvalConfig& cfg) {
    cfg.validate();
    const SimBaselines base = sim_baselines(corpus, cfg.prompt_len, cfg.robust_percentile);
    auto items = build_items(corpus, scenario, cfg, base);
    require(!items.empty(), ErrorKind::InvalidArgument, "eval: scenario produced no items");

    SamplerConfig scfg = cfg.sampler;
    if (scenario == Scenario::Diverse) scfg.alpha = 0.0;
    std::vector<SampleRequest> reqs, teacher_reqs;
    for (const auto& it : items) {
        reqs.push_back(it.request);
        teacher_reqs.push_back(it.teacher_request);
    }
    const auto outs = detail::generate_chunked(tested, reqs, scfg, cfg.chunk);
    std::vector<Matrix> teacher_outs;
    if (scenario != Scenario::Diverse) teacher_outs = detail::generate_chunked(teacher, teacher_reqs, scfg, cfg.chunk);

    EvalReport rep;
    rep.scenario = scenario;
    std::vector<double> cov_all, sim_all;
    std::vector<Matrix> generated, real;
    double noisy_sim = 0.0, noisy_cer = 0.0;
    std::size_t n_noisy = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        const Utterance& u = *it.target;
        require(outs[i].rows() == it.request.x0.rows() && outs[i].allFinite(), ErrorKind::NonFinite,
                "eval: sampling failed for utterance " + std::to_string(u.id));
        const Matrix region = outs[i].bottomRows(outs[i].rows() - it.region_begin);
        EvalRow row;
        row.utt_id = u.id;
        row.split = corpus.split_of(u.speaker);
        row.forget_group = it.forget_group;
        row.embedding = speaker_extract(region, corpus);
        row.cer = content_error_rate(u.content, content_decode(region, corpus));
        if (scenario == Scenario::Diverse) {
            generated.push_back(region);
            real.push_back(u.frames);
        } else {
            row.sim = sim(row.embedding, it.reference);
            const Vector te = speaker_extract(teacher_outs[i], corpus);
            row.jsd = jsd(softmax(row.embedding, cfg.zrf_temperature), softmax(te, cfg.zrf_temperature));
        }
        if (it.noisy_sim && !it.forget_group) {
            noisy_sim += *it.noisy_sim;
            noisy_cer += *it.noisy_cer;
            ++n_noisy;
        }
        row.covariate = it.covariate;
        if (scenario == Scenario::Robustness) {
            cov_all.push_back(it.covariate);
            sim_all.push_back(*row.sim);
            if (it.covariate <= base.diff_percentile) continue;
        }
        rep.rows.push_back(std::move(row));
    }
    if (scenario == Scenario::Robustness) {
        rep.threshold = base.diff_percentile;
        const auto pr = pearson(cov_all, sim_all);
        rep.pearson_r = pr.r;
        rep.pearson_p = pr.p_value;
        require(!rep.rows.empty(), ErrorKind::InvalidArgument,
                "robustness: no prompt exceeds the similarity threshold " + std::to_string(base.diff_percentile));
    }
    if (n_noisy > 0) {
        rep.noisy_sim_r = noisy_sim / static_cast<double>(n_noisy);
        rep.noisy_cer_r = noisy_cer / static_cast<double>(n_noisy);
    }
    std::sort(rep.rows.begin(), rep.rows.end(), [](const auto& a, const auto& b) { return a.utt_id < b.utt_id; });
    detail::aggregate(rep);
    if (scenario == Scenario::Diverse) {
        auto [g, r] = pca_project(sequence_features(generated), sequence_features(real), cfg.fsd_components);
        rep.fsd = frechet_distance(g, r);
    }
    return rep;
}

inline EvalReport run_protocol(const ModelParams& tested, const ModelParams& teacher, const Corpus& corpus,
                               Scenario scenario, const EvalConfig& cfg) {
    return run_protocol(model_generator(tested), model_generator(teacher), corpus, scenario, cfg);
}

// ---------------------------------------------------------------------------
// Output formats

namespace detail {

inline std::string fmt(double v, int prec = 4) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

inline std::string fmt(const std::optional<double>& v, int prec = 4) { return v ? fmt(*v, prec) : "-"; }

inline std::string csv_value(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    return os.str();
}

}  // namespace detail

inline std::string rows_csv(const EvalReport& rep) {
    std::ostringstream os;
    os << "utt_id,split,scenario,sim,cer,jsd\n";
    for (const auto& r : rep.rows)
        os << r.utt_id << "," << split_name(r.split) << "," << scenario_name(rep.scenario) << ","
           << detail::csv_value(r.sim) << "," << detail::csv_value(r.cer) << "," << detail::csv_value(r.jsd) << "\n";
    return os.str();
}

inline std::string embeddings_csv(const EvalReport& rep) {
    std::ostringstream os;
    os << "utt_id,split";
    const Eigen::Index d = rep.rows.empty() ? 0 : rep.rows.front().embedding.size();
    for (Eigen::Index k = 0; k < d; ++k) os << ",e_" << (k + 1);
    os << "\n" << std::setprecision(17);
    for (const auto& r : rep.rows) {
        os << r.utt_id << "," << split_name(r.split);
        for (Eigen::Index k = 0; k < r.embedding.size(); ++k) os << "," << r.embedding[k];
        os << "\n";
    }
    return os.str();
}

/// Column set of the markdown table for a scenario.
inline std::vector<std::string> report_columns(Scenario s) {
    switch (s) {
        case Scenario::Diverse: return {"FSD", "CER-R", "CER-F"};
        case Scenario::Robustness: return {"CER-R", "SIM-R"};
        default: return {"CER-R", "SIM-R", "CER-F", "SIM-F", "spk-ZRF-R", "spk-ZRF-F"};
    }
}

inline std::optional<double> report_value(const EvalReport& r, const std::string& column) {
    if (column == "CER-R") return r.cer_r;
    if (column == "SIM-R") return r.sim_r;
    if (column == "CER-F") return r.cer_f;
    if (column == "SIM-F") return r.sim_f;
    if (column == "spk-ZRF-R") return r.zrf_r;
    if (column == "spk-ZRF-F") return r.zrf_f;
    if (column == "FSD") return r.fsd;
    throw Error(ErrorKind::InvalidArgument, "unknown report column " + column);
}

/// Markdown table with one row per labelled report.
inline std::string markdown_table(const std::vector<std::pair<std::string, EvalReport>>& reports) {
    require(!reports.empty(), ErrorKind::InvalidArgument, "markdown: no reports");
    const auto cols = report_columns(reports.front().second.scenario);
    std::ostringstream os;
    os << "| Method |";
    for (const auto& c : cols) os << " " << c << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& [label, rep] : reports) {
        os << "| " << label << (rep.diverged ? " (diverged)" : "") << " |";
        for (const auto& c : cols) os << " " << detail::fmt(report_value(rep, c)) << " |";
        os << "\n";
    }
    return os.str();
}

/// Aggregates as key=value lines, used for report files and determinism checks.
inline std::string report_summary(const EvalReport& r) {
    std::ostringstream os;
    os << "scenario=" << scenario_name(r.scenario) << "\n";
    os << "n_r=" << r.n_r << "\nn_f=" << r.n_f << "\n";
    const std::pair<const char*, const std::optional<double>*> fields[] = {
        {"cer_r", &r.cer_r},   {"sim_r", &r.sim_r},         {"cer_f", &r.cer_f},         {"sim_f", &r.sim_f},
        {"spk_zrf_r", &r.zrf_r}, {"spk_zrf_f", &r.zrf_f},   {"fsd", &r.fsd},             {"pearson_r", &r.pearson_r},
        {"pearson_p", &r.pearson_p}, {"noisy_sim_r", &r.noisy_sim_r}, {"noisy_cer_r", &r.noisy_cer_r},
        {"threshold", &r.threshold}};
    for (const auto& [k, v] : fields)
        if (*v) os << k << "=" << detail::csv_value(*v) << "\n";
    os << "diverged=" << (r.diverged ? 1 : 0) << "\n";
    if (!r.note.empty()) os << "note=" << r.note << "\n";
    return os.str();
}

/// Inverse of report_summary for the aggregate fields.
inline EvalReport parse_report_summary(const std::string& text) {
    EvalReport r;
    std::istringstream is(text);
    std::string line;
    std::map<std::string, std::optional<double>*> fields = {
        {"cer_r", &r.cer_r}, {"sim_r", &r.sim_r}, {"cer_f", &r.cer_f}, {"sim_f", &r.sim_f},
        {"spk_zrf_r", &r.zrf_r}, {"spk_zrf_f", &r.zrf_f}, {"fsd", &r.fsd}, {"pearson_r", &r.pearson_r},
        {"pearson_p", &r.pearson_p}, {"noisy_sim_r", &r.noisy_sim_r}, {"noisy_cer_r", &r.noisy_cer_r},
        {"threshold", &r.threshold}};
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "scenario") r.scenario = parse_scenario(v);
        else if (k == "n_r") r.n_r = std::stoul(v);
        else if (k == "n_f") r.n_f = std::stoul(v);
        else if (k == "diverged") r.diverged = v == "1";
        else if (k == "note") r.note = v;
        else if (auto it = fields.find(k); it != fields.end()) *it->second = std::stod(v);
    }
    return r;
}

}  // namespace unlearncfm
