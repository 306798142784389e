#pragma once

// Speaker-identity unlearning procedures. Each one maps a pretrained
// checkpoint plus a corpus with a designated forget split to a new checkpoint.

#include "flowmatch.hpp"

#include "json.hpp"

namespace unlearncfm {

enum class Method { Tgu, Sgu, Ng, Kl, Ft, Exact };

inline std::string_view method_name(Method m) {
    switch (m) {
        case Method::Tgu: return "tgu";
        case Method::Sgu: return "sgu";
        case Method::Ng: return "ng";
        case Method::Kl: return "kl";
        case Method::Ft: return "ft";
        case Method::Exact: return "exact";
    }
    return "?";
}

inline Method parse_method(std::string_view s) {
    for (Method m : {Method::Tgu, Method::Sgu, Method::Ng, Method::Kl, Method::Ft, Method::Exact})
        if (method_name(m) == s) return m;
    throw Error(ErrorKind::InvalidArgument, "unknown method '" + std::string(s) + "' (expected tgu|sgu|ng|kl|ft|exact)");
}

struct UnlearnConfig {
    Method method = Method::Tgu;
    double lambda = 0.2;             // remain weight in the TGU objective
    double forget_batch_prob = 0.2;  // per-slot forget probability (TGU, KL) / SGU pair ratio
    int steps = 1200;
    int batch = 16;
    LrSchedule schedule{1e-3, 200, 1200};
    LrSchedule ascent_schedule{1e-4, 200, 1200};  // NG and KL
    double kl_lambda = 0.5;
    double blowup_threshold = 1e6;
    int blowup_strikes = 3;
    double mask_min_frac = 0.7;
    double mask_max_frac = 1.0;
    double cond_drop = 0.2;          // applied to remain examples only
    SamplerConfig teacher_sampler{};  // generation of teacher targets
    PathConfig path;
    TrainConfig retrain;             // exact retraining reuses the pretraining setup
    std::uint64_t seed = 11;

    void validate() const {
        require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::InvalidArgument, "unlearn: lambda must be in [0,1]");
        require(kl_lambda >= 0.0 && kl_lambda <= 1.0, ErrorKind::InvalidArgument, "unlearn: kl_lambda must be in [0,1]");
        require(forget_batch_prob >= 0.0 && forget_batch_prob <= 1.0, ErrorKind::InvalidArgument,
                "unlearn: forget_batch_prob must be in [0,1]");
        require(steps >= 0 && batch >= 1, ErrorKind::InvalidArgument, "unlearn: steps >= 0 and batch >= 1 required");
        require(blowup_threshold > 0.0 && blowup_strikes >= 1, ErrorKind::InvalidArgument, "unlearn: bad blow-up settings");
        teacher_sampler.validate();
        path.validate();
    }

    TrainConfig as_train_config() const {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch = batch;
        tc.schedule = schedule;
        tc.mask_min_frac = mask_min_frac;
        tc.mask_max_frac = mask_max_frac;
        tc.cond_drop = cond_drop;
        tc.path = path;
        tc.seed = seed;
        return tc;
    }
};

/// Counts batch losses above a threshold; trips after `strikes` of them or
/// on the first non-finite loss.
class BlowupDetector {
public:
    BlowupDetector(double threshold, int strikes) : threshold_(threshold), strikes_(strikes) {}

    /// Returns true once the run must halt.
    bool update(double loss) {
        if (!std::isfinite(loss)) {
            hits_ = strikes_;
        } else if (std::abs(loss) > threshold_) {
            ++hits_;
        }
        return tripped();
    }
    bool tripped() const { return hits_ >= strikes_; }
    int hits() const { return hits_; }

private:
    double threshold_;
    int strikes_;
    int hits_ = 0;
};

struct UnlearnLogRow {
    std::int64_t step = 0;
    double remain_loss = 0.0;
    double forget_loss = 0.0;
    double total = 0.0;
    double lr = 0.0;
    bool blowup = false;
    int n_forget = 0;  // forget examples in the batch
};

struct UnlearnResult {
    Checkpoint checkpoint;
    std::vector<UnlearnLogRow> log;
    bool diverged = false;
    std::string message;
    std::uint64_t teacher_draws = 0;
};

inline std::string log_row_json(const UnlearnLogRow& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["remain_loss"] = r.remain_loss;
    j["forget_loss"] = r.forget_loss;
    j["total"] = r.total;
    j["lr"] = r.lr;
    j["blowup_flag"] = r.blowup;
    return j.dump();
}

inline void write_unlearn_log(const std::string& path, const std::vector<UnlearnLogRow>& log) {
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path);
    for (const auto& r : log) os << log_row_json(r) << "\n";
}

// ---------------------------------------------------------------------------
// Building blocks

/// A teacher target generated from content alone.
struct TeacherSample {
    Matrix frames;
    TokenSeq content;
    std::uint64_t noise_seed = 0;
    Matrix x0;
};

/// x_bar = teacher(y): content-only generation from noise drawn with `noise_seed`.
inline std::vector<TeacherSample> teacher_generate(const ModelParams& teacher, std::span<const TokenSeq> contents,
                                                   std::span<const std::uint64_t> noise_seeds,
                                                   const SamplerConfig& scfg) {
    require(contents.size() == noise_seeds.size(), ErrorKind::ShapeMismatch, "teacher: seeds/content count mismatch");
    std::vector<SampleRequest> reqs;
    std::vector<TeacherSample> out(contents.size());
    for (std::size_t i = 0; i < contents.size(); ++i) {
        Rng rng(noise_seeds[i]);
        out[i].content = contents[i];
        out[i].noise_seed = noise_seeds[i];
        out[i].x0 = gaussian_matrix(rng, static_cast<Eigen::Index>(contents[i].size()), teacher.arch.dim);
        SampleRequest r;
        r.x0 = out[i].x0;
        r.content = contents[i];
        reqs.push_back(std::move(r));
    }
    auto gen = sample_ode_batch(teacher, reqs, scfg);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].frames = std::move(gen[i]);
    return out;
}

/// TGU forget example: context from the real forget frames, state and target
/// on the path from the teacher's own noise to the teacher sample.
inline CfmExample make_tgu_forget_example(const Utterance& forget, const TeacherSample& target, const Mask& mask,
                                          double t, const PathConfig& pcfg) {
    require(target.frames.rows() == forget.length(), ErrorKind::ShapeMismatch, "tgu: teacher sample length != T");
    return make_cfm_example(target.frames, forget.frames, forget.content, mask, target.x0, t, pcfg, false);
}

struct SguPair {
    Matrix frames;
    TokenSeq content;
    Mask mask;  // true exactly on the remain segment
};

/// Forget segment first (context only), remain segment second (generated).
inline SguPair sgu_build_pair(const Utterance& forget, const Utterance& remain) {
    require(forget.frames.cols() == remain.frames.cols(), ErrorKind::ShapeMismatch, "sgu: frame width mismatch");
    require(forget.length() >= 1 && remain.length() >= 1, ErrorKind::InvalidArgument, "sgu: empty utterance");
    SguPair p;
    const auto tf = forget.length(), tr = remain.length();
    p.frames.resize(tf + tr, forget.frames.cols());
    p.frames << forget.frames, remain.frames;
    p.content = forget.content;
    p.content.insert(p.content.end(), remain.content.begin(), remain.content.end());
    p.mask.assign(static_cast<std::size_t>(tf + tr), false);
    std::fill(p.mask.begin() + tf, p.mask.end(), true);
    return p;
}

/// Per-frame softmax over output coordinates.
inline Matrix row_softmax(const Matrix& x) {
    Matrix p = x.colwise() - x.rowwise().maxCoeff();
    p = p.array().exp().matrix();
    p = p.array().colwise() / p.rowwise().sum().array();
    return p;
}

/// sum over masked frames of KL(softmax(teacher_t) || softmax(student_t)) (natural log),
/// with the gradient with respect to the student outputs.
inline double frame_kl(const Matrix& teacher_out, const Matrix& student_out, const Mask& mask, Matrix* grad) {
    const Matrix p = row_softmax(teacher_out);
    const Matrix q = row_softmax(student_out);
    double kl = 0.0;
    if (grad) *grad = Matrix::Zero(student_out.rows(), student_out.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        kl += (p.row(r).array() * (p.row(r).array().log() - q.row(r).array().log())).sum();
        if (grad) grad->row(r) = q.row(r) - p.row(r);
    }
    return kl;
}

namespace detail {

struct Pools {
    std::vector<std::uint32_t> remain;
    std::vector<std::uint32_t> forget;
};

inline Pools training_pools(const Corpus& corpus) {
    Pools p{corpus.train_utterances({Split::Remain}), corpus.train_utterances({Split::Forget})};
    require(!p.remain.empty(), ErrorKind::InvalidArgument, "unlearn: no remain training utterances");
    require(!p.forget.empty(), ErrorKind::InvalidArgument, "unlearn: no forget training utterances");
    return p;
}

inline CfmExample remain_example(Rng& rng, const Utterance& u, int dim, const UnlearnConfig& cfg) {
    const double t = uniform01(rng);
    Matrix x0 = gaussian_matrix(rng, u.length(), dim);
    Mask m = sample_span_mask(rng, u.length(), cfg.mask_min_frac, cfg.mask_max_frac);
    const bool drop = uniform01(rng) < cfg.cond_drop;
    return make_cfm_example(u.frames, u.frames, u.content, m, x0, t, cfg.path, drop);
}

inline CfmExample plain_example(Rng& rng, const Utterance& u, int dim, const UnlearnConfig& cfg) {
    const double t = uniform01(rng);
    Matrix x0 = gaussian_matrix(rng, u.length(), dim);
    Mask m = sample_span_mask(rng, u.length(), cfg.mask_min_frac, cfg.mask_max_frac);
    return make_cfm_example(u.frames, u.frames, u.content, m, x0, t, cfg.path, false);
}

/// Adds the gradients of two separately weighted sub-batches.
inline LossAndGrad weighted_pair(const ModelParams& params, const std::vector<CfmExample>& a, double wa,
                                 const std::vector<CfmExample>& b, double wb, double* loss_a, double* loss_b) {
    LossAndGrad total{0.0, Vector::Zero(params.values.size())};
    *loss_a = 0.0;
    *loss_b = 0.0;
    if (!a.empty()) {
        auto lg = cfm_batch_loss(params, a);
        *loss_a = lg.loss;
        total.loss += wa * lg.loss;
        total.grad += wa * lg.grad;
    }
    if (!b.empty()) {
        auto lg = cfm_batch_loss(params, b);
        *loss_b = lg.loss;
        total.loss += wb * lg.loss;
        total.grad += wb * lg.grad;
    }
    return total;
}

}  // namespace detail

/// lambda * L_remain + (1 - lambda) * L_forget; an empty group contributes 0.
inline double tgu_total(double lambda, double remain_loss, double forget_loss) {
    return lambda * remain_loss + (1.0 - lambda) * forget_loss;
}

// ---------------------------------------------------------------------------
// Methods

/// Shared driver: `make_step` produces the loss row and gradient for one update.
template <typename StepFn>
UnlearnResult run_updates(ModelParams student, const UnlearnConfig& cfg, const LrSchedule& schedule, bool watch_blowup,
                          StepFn&& make_step, const StepHook& hook) {
    UnlearnResult res;
    OptimizerState opt = OptimizerState::for_params(student, schedule);
    BlowupDetector detector(cfg.blowup_threshold, cfg.blowup_strikes);
    ModelParams last_good = student;
    for (int step = 0; step < cfg.steps; ++step) {
        UnlearnLogRow row;
        Vector grad;
        make_step(student, row, grad);
        row.step = step + 1;
        row.lr = opt.next_lr();
        const bool over = watch_blowup && (std::abs(row.total) > cfg.blowup_threshold || !std::isfinite(row.total));
        row.blowup = over;
        if (watch_blowup && detector.update(row.total)) {
            res.log.push_back(row);
            res.diverged = true;
            res.message = "unbounded: batch loss exceeded " + std::to_string(cfg.blowup_threshold) + " " +
                          std::to_string(detector.hits()) + " times by step " + std::to_string(step + 1);
            student = last_good;
            break;
        }
        if (!std::isfinite(row.total)) {
            res.log.push_back(row);
            res.diverged = true;
            res.message = "non-finite loss at step " + std::to_string(step + 1);
            student = last_good;
            break;
        }
        if (!over) last_good = student;
        adam_step(opt, student, grad);
        res.log.push_back(row);
        if (hook) hook(opt.step, student);
    }
    res.checkpoint = Checkpoint{std::move(student), opt.step, {}};
    return res;
}

/// Teacher-guided unlearning.
inline UnlearnResult tgu_run(const ModelParams& teacher, const Corpus& corpus, const UnlearnConfig& cfg,
                             const StepHook& hook = {}) {
    auto pools = detail::training_pools(corpus);
    Rng rng(derive_seed(cfg.seed, "unlearn/tgu"));
    std::uint64_t draws = 0;
    auto res = run_updates(
        teacher, cfg, cfg.schedule, false,
        [&](const ModelParams& student, UnlearnLogRow& row, Vector& grad) {
            std::vector<CfmExample> remain, forget;
            std::vector<const Utterance*> forget_utts;
            for (int b = 0; b < cfg.batch; ++b) {
                if (uniform01(rng) < cfg.forget_batch_prob)
                    forget_utts.push_back(&corpus.utterances[pools.forget[uniform_index(rng, pools.forget.size())]]);
                else
                    remain.push_back(detail::remain_example(rng, corpus.utterances[pools.remain[uniform_index(rng, pools.remain.size())]],
                                                            corpus.dim(), cfg));
            }
            if (!forget_utts.empty()) {
                std::vector<TokenSeq> contents;
                std::vector<std::uint64_t> seeds;
                for (const auto* u : forget_utts) {
                    contents.push_back(u->content);
                    seeds.push_back(derive_seed(cfg.seed, "unlearn/tgu/teacher", draws++));
                }
                auto targets = teacher_generate(teacher, contents, seeds, cfg.teacher_sampler);
                for (std::size_t i = 0; i < forget_utts.size(); ++i) {
                    if (!targets[i].frames.allFinite()) {
                        stderr_warning("tgu: teacher sample failed, skipping");
                        continue;
                    }
                    Mask m = sample_span_mask(rng, forget_utts[i]->length(), cfg.mask_min_frac, cfg.mask_max_frac);
                    forget.push_back(make_tgu_forget_example(*forget_utts[i], targets[i], m, uniform01(rng), cfg.path));
                }
            }
            auto lg = detail::weighted_pair(student, remain, cfg.lambda, forget, 1.0 - cfg.lambda, &row.remain_loss,
                                            &row.forget_loss);
            row.total = lg.loss;
            row.n_forget = static_cast<int>(forget.size());
            grad = std::move(lg.grad);
        },
        hook);
    res.teacher_draws = draws;
    return res;
}

/// Sample-guided unlearning.
inline UnlearnResult sgu_run(const ModelParams& pretrained, const Corpus& corpus, const UnlearnConfig& cfg,
                             const StepHook& hook = {}) {
    auto pools = detail::training_pools(corpus);
    Rng rng(derive_seed(cfg.seed, "unlearn/sgu"));
    return run_updates(
        pretrained, cfg, cfg.schedule, false,
        [&](const ModelParams& student, UnlearnLogRow& row, Vector& grad) {
            std::vector<CfmExample> remain, forget;
            for (int b = 0; b < cfg.batch; ++b) {
                const auto& r = corpus.utterances[pools.remain[uniform_index(rng, pools.remain.size())]];
                if (uniform01(rng) < cfg.forget_batch_prob) {
                    const auto& f = corpus.utterances[pools.forget[uniform_index(rng, pools.forget.size())]];
                    SguPair pair = sgu_build_pair(f, r);
                    const double t = uniform01(rng);
                    Matrix x0 = gaussian_matrix(rng, pair.frames.rows(), corpus.dim());
                    forget.push_back(make_cfm_example(pair.frames, pair.frames, pair.content, pair.mask, x0, t, cfg.path, false));
                } else {
                    remain.push_back(detail::remain_example(rng, r, corpus.dim(), cfg));
                }
            }
            const double n = static_cast<double>(remain.size() + forget.size());
            auto lg = detail::weighted_pair(student, remain, static_cast<double>(remain.size()) / n, forget,
                                            static_cast<double>(forget.size()) / n, &row.remain_loss, &row.forget_loss);
            row.total = lg.loss;
            row.n_forget = static_cast<int>(forget.size());
            grad = std::move(lg.grad);
        },
        hook);
}

/// Negative gradient: ascent on the CFM loss of forget samples only.
inline UnlearnResult ng_run(const ModelParams& pretrained, const Corpus& corpus, const UnlearnConfig& cfg,
                            const StepHook& hook = {}) {
    auto pools = detail::training_pools(corpus);
    Rng rng(derive_seed(cfg.seed, "unlearn/ng"));
    return run_updates(
        pretrained, cfg, cfg.ascent_schedule, true,
        [&](const ModelParams& student, UnlearnLogRow& row, Vector& grad) {
            std::vector<CfmExample> forget;
            for (int b = 0; b < cfg.batch; ++b)
                forget.push_back(detail::plain_example(rng, corpus.utterances[pools.forget[uniform_index(rng, pools.forget.size())]],
                                                       corpus.dim(), cfg));
            auto lg = cfm_batch_loss(student, forget, -1.0);
            row.forget_loss = -lg.loss;
            row.total = lg.loss;
            row.n_forget = static_cast<int>(forget.size());
            grad = std::move(lg.grad);
        },
        hook);
}

/// Selective KL: pull the student towards the teacher on remain inputs and
/// push it away on forget inputs.
inline UnlearnResult kl_run(const ModelParams& teacher, const Corpus& corpus, const UnlearnConfig& cfg,
                            const StepHook& hook = {}) {
    auto pools = detail::training_pools(corpus);
    Rng rng(derive_seed(cfg.seed, "unlearn/kl"));
    VectorField teacher_field(teacher);
    return run_updates(
        teacher, cfg, cfg.ascent_schedule, true,
        [&](const ModelParams& student, UnlearnLogRow& row, Vector& grad) {
            std::vector<CfmExample> batch;
            std::vector<bool> is_forget;
            for (int b = 0; b < cfg.batch; ++b) {
                const bool f = uniform01(rng) < cfg.forget_batch_prob;
                const auto& pool = f ? pools.forget : pools.remain;
                batch.push_back(detail::plain_example(rng, corpus.utterances[pool[uniform_index(rng, pool.size())]],
                                                      corpus.dim(), cfg));
                is_forget.push_back(f);
            }
            std::vector<ConditioningBundle> conds;
            for (const auto& ex : batch) conds.push_back(ex.cond);
            auto t_out = teacher_field.forward(conds);
            VectorField student_field(student);
            ForwardCache cache;
            auto s_out = student_field.forward(conds, &cache);
            const auto n_f = static_cast<double>(std::count(is_forget.begin(), is_forget.end(), true));
            const double n_r = static_cast<double>(batch.size()) - n_f;
            std::vector<Matrix> grads(batch.size());
            double kl_r = 0.0, kl_f = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const double kl = frame_kl(t_out[i], s_out[i], batch[i].mask, &grads[i]);
                if (is_forget[i]) {
                    kl_f += kl / n_f;
                    grads[i] *= -(1.0 - cfg.kl_lambda) / n_f;
                } else {
                    kl_r += kl / n_r;
                    grads[i] *= cfg.kl_lambda / n_r;
                }
            }
            row.remain_loss = kl_r;
            row.forget_loss = kl_f;
            row.total = cfg.kl_lambda * kl_r - (1.0 - cfg.kl_lambda) * kl_f;
            row.n_forget = static_cast<int>(n_f);
            grad = student_field.backward(cache, grads);
        },
        hook);
}

/// Fine-tuning on remain speakers only, starting from the pretrained weights.
inline UnlearnResult ft_run(const ModelParams& pretrained, const Corpus& corpus, const UnlearnConfig& cfg,
                            const StepHook& hook = {}) {
    auto pool = corpus.train_utterances({Split::Remain});
    auto tr = train_cfm(pretrained, corpus, pool, cfg.as_train_config(), "unlearn/ft", hook);
    UnlearnResult res;
    res.checkpoint = std::move(tr.checkpoint);
    res.diverged = tr.diverged;
    res.message = tr.message;
    for (const auto& c : tr.curve) res.log.push_back({c.step, c.loss, 0.0, c.loss, c.lr, false, 0});
    return res;
}

/// Retraining from a fresh initialization on remain speakers only.
inline UnlearnResult exact_run(const Corpus& corpus, const UnlearnConfig& cfg, const Architecture& arch,
                               const StepHook& hook = {}) {
    TrainConfig tc = cfg.retrain;
    tc.seed = derive_seed(cfg.seed, "unlearn/exact/seed");
    Architecture a = arch;
    a.dim = corpus.dim();
    a.vocab = corpus.vocab();
    ModelParams init = init_params(a, derive_seed(tc.seed, "exact/init"));
    auto tr = train_cfm(std::move(init), corpus, corpus.train_utterances({Split::Remain}), tc, "unlearn/exact", hook);
    UnlearnResult res;
    res.checkpoint = std::move(tr.checkpoint);
    res.diverged = tr.diverged;
    res.message = tr.message;
    for (const auto& c : tr.curve) res.log.push_back({c.step, c.loss, 0.0, c.loss, c.lr, false, 0});
    return res;
}

inline UnlearnResult unlearn(const Checkpoint& pretrained, const Corpus& corpus, const UnlearnConfig& cfg,
                             const StepHook& hook = {}) {
    cfg.validate();
    const ModelParams& p = pretrained.params;
    require(p.arch.dim == corpus.dim() && p.arch.vocab == corpus.vocab(), ErrorKind::ShapeMismatch,
            "unlearn: checkpoint does not match corpus dimensions");
    switch (cfg.method) {
        case Method::Tgu: return tgu_run(p, corpus, cfg, hook);
        case Method::Sgu: return sgu_run(p, corpus, cfg, hook);
        case Method::Ng: return ng_run(p, corpus, cfg, hook);
        case Method::Kl: return kl_run(p, corpus, cfg, hook);
        case Method::Ft: return ft_run(p, corpus, cfg, hook);
        case Method::Exact: return exact_run(corpus, cfg, p.arch, hook);
    }
    throw Error(ErrorKind::InvalidArgument, "unlearn: unhandled method");
}

/// Continued CFM training of an unlearned model on forget-speaker data.
/// `per_speaker_limit` > 0 keeps only that many training utterances per speaker.
inline TrainResult recover_train(const ModelParams& unlearned, const Corpus& corpus, const TrainConfig& cfg,
                                 int per_speaker_limit) {
    std::vector<std::uint32_t> pool;
    for (auto spk : corpus.speakers_in(Split::Forget)) {
        int kept = 0;
        for (const auto& u : corpus.utterances) {
            if (u.speaker != spk || u.eval) continue;
            if (per_speaker_limit > 0 && kept >= per_speaker_limit) break;
            pool.push_back(u.id);
            ++kept;
        }
    }
    if (cfg.steps == 0) {
        TrainResult r;
        r.checkpoint = Checkpoint{unlearned, 0, {}};
        return r;
    }
    return train_cfm(unlearned, corpus, pool, cfg, "recover/batches");
}

}  // namespace unlearncfm
