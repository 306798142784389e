#pragma once

// Conditional flow matching: Gaussian path, target field, masked loss,
// fixed-step ODE sampling with classifier-free guidance, and the training
// loop shared by pretraining, fine-tuning, retraining and recovery.

#include "corpus.hpp"
#include "diffnet.hpp"

#include <array>
#include <fstream>

namespace unlearncfm {

struct PathConfig {
    double sigma_min = 1e-4;

    void validate() const {
        require(sigma_min > 0.0 && sigma_min <= 0.1, ErrorKind::InvalidArgument, "path: sigma_min must be in (0, 0.1]");
    }
    double sigma_t(double t) const { return 1.0 - (1.0 - sigma_min) * t; }
};

enum class Solver { Euler, Midpoint };

inline std::string_view solver_name(Solver s) { return s == Solver::Euler ? "euler" : "midpoint"; }

inline Solver parse_solver(std::string_view s) {
    if (s == "euler") return Solver::Euler;
    if (s == "midpoint") return Solver::Midpoint;
    throw Error(ErrorKind::InvalidArgument, "unknown solver '" + std::string(s) + "'");
}

struct SamplerConfig {
    int nfe = 32;
    double alpha = 0.7;
    Solver solver = Solver::Midpoint;

    void validate() const {
        require(nfe >= 1, ErrorKind::InvalidArgument, "sampler: nfe must be >= 1");
        require(alpha >= 0.0 && std::isfinite(alpha), ErrorKind::InvalidArgument, "sampler: alpha must be >= 0");
    }
    /// Midpoint spends two field evaluations per step.
    int steps() const { return solver == Solver::Euler ? nfe : std::max(1, nfe / 2); }
};

/// Per-frame mask: true marks frames the model must generate (and the loss
/// covers); false marks context frames.
using Mask = std::vector<bool>;

inline std::size_t mask_count(const Mask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), true)); }

inline Mask invert(const Mask& m) {
    Mask out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = !m[i];
    return out;
}

/// Contiguous span, uniform start, length uniform in [min_frac*T, max_frac*T].
inline Mask sample_span_mask(Rng& rng, Eigen::Index T, double min_frac, double max_frac) {
    require(T >= 1, ErrorKind::InvalidArgument, "mask: empty sequence");
    auto lo = static_cast<Eigen::Index>(std::ceil(min_frac * static_cast<double>(T)));
    auto hi = static_cast<Eigen::Index>(std::floor(max_frac * static_cast<double>(T)));
    lo = std::clamp<Eigen::Index>(lo, 1, T);
    hi = std::clamp<Eigen::Index>(hi, lo, T);
    const auto len = lo + static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(hi - lo + 1)));
    const auto start = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(T - len + 1)));
    Mask m(static_cast<std::size_t>(T), false);
    for (Eigen::Index i = start; i < start + len; ++i) m[static_cast<std::size_t>(i)] = true;
    return m;
}

// ---------------------------------------------------------------------------
// Path and target field

inline Matrix gaussian_path(const Matrix& x0, const Matrix& x1, double t, const PathConfig& cfg) {
    require(x0.rows() == x1.rows() && x0.cols() == x1.cols(), ErrorKind::ShapeMismatch, "path: shape mismatch");
    require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "path: t must be in [0, 1]");
    return cfg.sigma_t(t) * x0 + t * x1;
}

/// u_t(x | x1) = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t).
inline Matrix target_vector_field(const Matrix& x, const Matrix& x1, double t, const PathConfig& cfg) {
    require(x.rows() == x1.rows() && x.cols() == x1.cols(), ErrorKind::ShapeMismatch, "target field: shape mismatch");
    require(t >= 0.0 && t <= 1.0, ErrorKind::InvalidArgument, "target field: t must be in [0, 1]");
    const double s = cfg.sigma_t(t);
    require(s > 1e-9, ErrorKind::Singular, "target field: sigma_t vanishes at t=" + std::to_string(t));
    return (x1 - (1.0 - cfg.sigma_min) * x) / s;
}

// ---------------------------------------------------------------------------
// Masked loss

/// One regression example: the model sees `cond` and must match `target`
/// on the rows selected by `mask`.
struct CfmExample {
    ConditioningBundle cond;
    Matrix target;
    Mask mask;
};

/// Builds the standard infilling example. Context comes from `context_source`
/// (the real frames) on unmasked rows; the regression target is the path
/// field towards `x1`.
inline CfmExample make_cfm_example(const Matrix& x1, const Matrix& context_source, const TokenSeq& tokens,
                                   const Mask& mask, const Matrix& x0, double t, const PathConfig& pcfg,
                                   bool drop_condition) {
    require(static_cast<Eigen::Index>(mask.size()) == x1.rows(), ErrorKind::ShapeMismatch, "cfm: mask length != T");
    require(mask_count(mask) > 0, ErrorKind::InvalidArgument, "cfm: mask selects no frames");
    require(context_source.rows() == x1.rows() && context_source.cols() == x1.cols(), ErrorKind::ShapeMismatch,
            "cfm: context shape != target shape");
    CfmExample ex;
    ex.cond.t = t;
    ex.cond.w = gaussian_path(x0, x1, t, pcfg);
    ex.target = target_vector_field(ex.cond.w, x1, t, pcfg);
    ex.mask = mask;
    if (!drop_condition) {
        ex.cond.content = tokens;
        ex.cond.context = context_source;
        ex.cond.visible = invert(mask);
    }
    return ex;
}

/// Mean squared error over masked frame-coordinates and its gradient with
/// respect to the prediction.
inline double masked_mse(const Matrix& target, const Matrix& pred, const Mask& mask, Matrix* grad_pred) {
    require(target.rows() == pred.rows() && target.cols() == pred.cols(), ErrorKind::ShapeMismatch,
            "loss: prediction shape != target shape");
    require(static_cast<Eigen::Index>(mask.size()) == target.rows(), ErrorKind::ShapeMismatch, "loss: mask length");
    const auto n = mask_count(mask);
    require(n > 0, ErrorKind::InvalidArgument, "loss: empty mask");
    const double denom = static_cast<double>(n) * static_cast<double>(target.cols());
    double loss = 0.0;
    if (grad_pred) *grad_pred = Matrix::Zero(pred.rows(), pred.cols());
    for (Eigen::Index r = 0; r < target.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        Eigen::RowVectorXd diff = pred.row(r) - target.row(r);
        loss += diff.squaredNorm();
        if (grad_pred) grad_pred->row(r) = 2.0 * diff / denom;
    }
    return loss / denom;
}

struct LossAndGrad {
    double loss = 0.0;
    Vector grad;
};

/// Mean of per-example masked losses with the exact parameter gradient.
/// Scale multiplies both loss and gradient (negative for gradient ascent).
inline LossAndGrad cfm_batch_loss(const ModelParams& params, std::span<const CfmExample> batch, double scale = 1.0) {
    require(!batch.empty(), ErrorKind::InvalidArgument, "cfm: empty batch");
    VectorField field(params);
    std::vector<ConditioningBundle> conds;
    conds.reserve(batch.size());
    for (const auto& ex : batch) conds.push_back(ex.cond);
    ForwardCache cache;
    auto preds = field.forward(conds, &cache);
    std::vector<Matrix> grads(batch.size());
    double loss = 0.0;
    const double w = scale / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        loss += masked_mse(batch[i].target, preds[i], batch[i].mask, &grads[i]);
        grads[i] *= w;
    }
    return {loss * w, field.backward(cache, grads)};
}

/// Single-utterance flow matching loss
/// || m * (u_t(w | x1) - v_t(w, y, x_ctx)) ||^2 averaged over masked coordinates.
inline LossAndGrad cfm_loss(const ModelParams& params, const Matrix& x1, const TokenSeq& y, const Mask& mask,
                            const Matrix& x0, double t, const PathConfig& pcfg) {
    CfmExample ex = make_cfm_example(x1, x1, y, mask, x0, t, pcfg, false);
    return cfm_batch_loss(params, std::span<const CfmExample>(&ex, 1));
}

// ---------------------------------------------------------------------------
// Sampling

/// dx/dt = f(t, x)
using OdeField = std::function<Matrix(double, const Matrix&)>;

inline Matrix integrate(const OdeField& f, Matrix x, int steps, Solver solver) {
    require(steps >= 1, ErrorKind::InvalidArgument, "integrate: steps must be >= 1");
    const double h = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = k * h;
        if (solver == Solver::Euler) {
            x += h * f(t, x);
        } else {
            Matrix mid = x + 0.5 * h * f(t, x);
            x += h * f(t + 0.5 * h, mid);
        }
        require(x.allFinite(), ErrorKind::NonFinite, "sampling: non-finite state at step " + std::to_string(k + 1));
    }
    return x;
}

inline Matrix integrate(const OdeField& f, Matrix x, const SamplerConfig& scfg) {
    scfg.validate();
    return integrate(f, std::move(x), scfg.steps(), scfg.solver);
}

/// (1 + alpha) v_cond - alpha v_uncond.
inline Matrix cfg_combine(const Matrix& v_cond, const Matrix& v_uncond, double alpha) {
    return (1.0 + alpha) * v_cond - alpha * v_uncond;
}

/// Guided field at one state. Both branches run in one batched pass.
inline Matrix guided_field(const ModelParams& params, const ConditioningBundle& cond, double alpha) {
    VectorField field(params);
    if (alpha == 0.0) return field.forward(cond);
    std::array<ConditioningBundle, 2> pair{cond, cond.dropped()};
    auto out = field.forward(pair);
    return cfg_combine(out[0], out[1], alpha);
}

/// One generation job. Context rows (mask false) are copied from `context`
/// at the end; all rows are integrated.
struct SampleRequest {
    Matrix x0;
    std::optional<TokenSeq> content;
    std::optional<Matrix> context;
    Mask mask;  // generated rows; ignored when context is absent
};

/// Integrates a batch of requests on a shared time grid with CFG.
inline std::vector<Matrix> sample_ode_batch(const ModelParams& params, std::span<const SampleRequest> reqs,
                                            const SamplerConfig& scfg) {
    scfg.validate();
    if (reqs.empty()) return {};
    VectorField field(params);
    std::vector<Eigen::Index> offs{0};
    for (const auto& r : reqs) {
        require(r.x0.cols() == params.arch.dim, ErrorKind::ShapeMismatch, "sample: x0 width != model dim");
        if (r.context)
            require(static_cast<Eigen::Index>(r.mask.size()) == r.x0.rows(), ErrorKind::ShapeMismatch,
                    "sample: mask length != T");
        offs.push_back(offs.back() + r.x0.rows());
    }
    Matrix state(offs.back(), params.arch.dim);
    for (std::size_t i = 0; i < reqs.size(); ++i) state.middleRows(offs[i], reqs[i].x0.rows()) = reqs[i].x0;

    const bool guided = scfg.alpha != 0.0;
    OdeField f = [&](double t, const Matrix& x) {
        std::vector<ConditioningBundle> conds;
        conds.reserve(reqs.size() * (guided ? 2 : 1));
        for (std::size_t i = 0; i < reqs.size(); ++i) {
            ConditioningBundle c;
            c.t = t;
            c.w = x.middleRows(offs[i], offs[i + 1] - offs[i]);
            c.content = reqs[i].content;
            if (reqs[i].context) {
                c.context = reqs[i].context;
                c.visible = invert(reqs[i].mask);
            }
            conds.push_back(std::move(c));
        }
        if (guided)
            for (std::size_t i = 0; i < reqs.size(); ++i) conds.push_back(conds[i].dropped());
        auto out = field.forward(conds);
        Matrix v(x.rows(), x.cols());
        for (std::size_t i = 0; i < reqs.size(); ++i) {
            auto rows = offs[i + 1] - offs[i];
            if (guided)
                v.middleRows(offs[i], rows) = cfg_combine(out[i], out[reqs.size() + i], scfg.alpha);
            else
                v.middleRows(offs[i], rows) = out[i];
        }
        return v;
    };
    Matrix final_state = integrate(f, std::move(state), scfg);

    std::vector<Matrix> result;
    result.reserve(reqs.size());
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        Matrix x = final_state.middleRows(offs[i], offs[i + 1] - offs[i]);
        if (reqs[i].context)
            for (Eigen::Index r = 0; r < x.rows(); ++r)
                if (!reqs[i].mask[static_cast<std::size_t>(r)]) x.row(r) = reqs[i].context->row(r);
        result.push_back(std::move(x));
    }
    return result;
}

inline Matrix sample_ode(const ModelParams& params, const SampleRequest& req, const SamplerConfig& scfg) {
    return sample_ode_batch(params, std::span<const SampleRequest>(&req, 1), scfg).front();
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    int steps = 4000;
    int batch = 16;
    LrSchedule schedule{1e-3, 200, 4000};
    double mask_min_frac = 0.7;
    double mask_max_frac = 1.0;
    double cond_drop = 0.2;
    PathConfig path;
    Architecture arch;
    std::uint64_t seed = 1;

    void validate() const {
        require(steps >= 0 && batch >= 1, ErrorKind::InvalidArgument, "train: steps >= 0 and batch >= 1 required");
        require(mask_min_frac > 0.0 && mask_min_frac <= mask_max_frac && mask_max_frac <= 1.0,
                ErrorKind::InvalidArgument, "train: need 0 < mask_min_frac <= mask_max_frac <= 1");
        require(cond_drop >= 0.0 && cond_drop <= 1.0, ErrorKind::InvalidArgument, "train: cond_drop in [0,1]");
        require(schedule.peak > 0.0, ErrorKind::InvalidArgument, "train: peak lr must be positive");
        path.validate();
    }
};

struct CurveRow {
    std::int64_t step;
    double loss;
    double lr;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<CurveRow> curve;
    bool diverged = false;
    std::string message;
};

inline void write_loss_curve(const std::string& path, const std::vector<CurveRow>& curve) {
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path);
    os << "step,loss,lr\n";
    os.precision(10);
    for (const auto& r : curve) os << r.step << "," << r.loss << "," << r.lr << "\n";
}

/// Observer called after each applied update with the 1-based step.
using StepHook = std::function<void(std::int64_t, const ModelParams&)>;

/// Masked CFM training over `pool` (utterance ids) starting from `init`.
/// Used for pretraining, fine-tuning, exact retraining and recovery.
inline TrainResult train_cfm(ModelParams init, const Corpus& corpus, const std::vector<std::uint32_t>& pool,
                             const TrainConfig& cfg, std::string_view stream, const StepHook& hook = {}) {
    cfg.validate();
    require(!pool.empty(), ErrorKind::InvalidArgument, "train: empty utterance pool");
    TrainResult res;
    ModelParams params = std::move(init);
    ModelParams last_good = params;
    OptimizerState opt = OptimizerState::for_params(params, cfg.schedule);
    Rng rng(derive_seed(cfg.seed, stream));
    std::vector<CfmExample> batch;
    for (int step = 0; step < cfg.steps; ++step) {
        batch.clear();
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& u = corpus.utterances.at(pool[uniform_index(rng, pool.size())]);
            const double t = uniform01(rng);
            Matrix x0 = gaussian_matrix(rng, u.length(), corpus.dim());
            Mask m = sample_span_mask(rng, u.length(), cfg.mask_min_frac, cfg.mask_max_frac);
            const bool drop = uniform01(rng) < cfg.cond_drop;
            batch.push_back(make_cfm_example(u.frames, u.frames, u.content, m, x0, t, cfg.path, drop));
        }
        const double lr = opt.next_lr();
        auto lg = cfm_batch_loss(params, batch);
        if (!std::isfinite(lg.loss)) {
            res.diverged = true;
            res.message = "loss became non-finite at step " + std::to_string(step + 1);
            params = last_good;
            break;
        }
        last_good = params;
        adam_step(opt, params, lg.grad);
        res.curve.push_back({opt.step, lg.loss, lr});
        if (hook) hook(opt.step, params);
    }
    res.checkpoint = Checkpoint{std::move(params), opt.step, rng_state_string(rng)};
    return res;
}

/// Pretraining sees every training utterance of remain and forget speakers.
inline TrainResult pretrain(const Corpus& corpus, const TrainConfig& cfg, const StepHook& hook = {}) {
    Architecture arch = cfg.arch;
    arch.dim = corpus.dim();
    arch.vocab = corpus.vocab();
    ModelParams init = init_params(arch, derive_seed(cfg.seed, "pretrain/init"));
    return train_cfm(std::move(init), corpus, corpus.train_utterances({Split::Remain, Split::Forget}), cfg,
                     "pretrain/batches", hook);
}

}  // namespace unlearncfm
