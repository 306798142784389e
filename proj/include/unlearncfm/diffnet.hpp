#pragma once

// Per-frame residual MLP used as the vector-field estimator, with an exact
// reverse pass, Adam with warmup/decay, and checkpoint persistence.

#include "core.hpp"

#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>

namespace unlearncfm {

struct Architecture {
    int dim = 16;         // frame width D
    int vocab = 16;
    int token_dim = 16;   // learned content embedding width
    int hidden = 128;
    int layers = 3;       // hidden layers: 1 input projection + (layers-1) residual blocks
    int time_pairs = 8;   // sinusoidal frequency pairs
    std::string activation = "tanh";

    int time_features() const { return 2 * time_pairs; }
    /// [w | ctx_t | visible bit | ctx summary | ctx present | y present]
    int frame_inputs() const { return 3 * dim + 3; }

    std::size_t param_count() const {
        const std::size_t H = static_cast<std::size_t>(hidden);
        std::size_t n = static_cast<std::size_t>(vocab) * token_dim;
        n += H * frame_inputs() + H * token_dim + H * time_features() + H;
        n += static_cast<std::size_t>(layers - 1) * (H * H + H);
        n += static_cast<std::size_t>(dim) * H + dim;
        return n;
    }

    void validate() const {
        require(dim > 0 && vocab > 0 && token_dim > 0 && hidden > 0 && layers >= 1 && time_pairs >= 1,
                ErrorKind::InvalidArgument, "architecture: all sizes must be positive");
        require(activation == "tanh" || activation == "gelu", ErrorKind::InvalidArgument,
                "architecture: unknown activation '" + activation + "'");
    }

    bool operator==(const Architecture&) const = default;
};

/// Flat parameter vector plus the descriptor that gives it structure.
struct ModelParams {
    Architecture arch;
    Vector values;

    bool operator==(const ModelParams& o) const {
        return arch == o.arch && values.size() == o.values.size() && (values.array() == o.values.array()).all();
    }
};

using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using VecMap = Eigen::Map<Vector>;
using ConstVecMap = Eigen::Map<const Vector>;

/// Offsets of each parameter block inside the flat vector.
struct ParamLayout {
    std::size_t token_embed, in_w, y_proj, time_proj, in_b, hidden_begin, out_w, out_b, total;

    explicit ParamLayout(const Architecture& a) {
        const std::size_t H = static_cast<std::size_t>(a.hidden);
        std::size_t o = 0;
        token_embed = o;
        o += static_cast<std::size_t>(a.vocab) * a.token_dim;
        in_w = o;
        o += H * a.frame_inputs();
        y_proj = o;
        o += H * a.token_dim;
        time_proj = o;
        o += H * a.time_features();
        in_b = o;
        o += H;
        hidden_begin = o;
        o += static_cast<std::size_t>(a.layers - 1) * (H * H + H);
        out_w = o;
        o += static_cast<std::size_t>(a.dim) * H;
        out_b = o;
        o += a.dim;
        total = o;
    }

    std::size_t hidden_w(const Architecture& a, int l) const {
        const std::size_t H = static_cast<std::size_t>(a.hidden);
        return hidden_begin + static_cast<std::size_t>(l) * (H * H + H);
    }
    std::size_t hidden_b(const Architecture& a, int l) const {
        return hidden_w(a, l) + static_cast<std::size_t>(a.hidden) * a.hidden;
    }
};

/// Named parameter block, used by gradient checks and diagnostics.
struct ParamBlock {
    std::string name;
    std::size_t offset;
    std::size_t size;
};

inline std::vector<ParamBlock> param_blocks(const Architecture& a) {
    ParamLayout L(a);
    const std::size_t H = static_cast<std::size_t>(a.hidden);
    std::vector<ParamBlock> out{
        {"token_embed", L.token_embed, static_cast<std::size_t>(a.vocab) * a.token_dim},
        {"input_weight", L.in_w, H * a.frame_inputs()},
        {"content_projection", L.y_proj, H * a.token_dim},
        {"time_projection", L.time_proj, H * a.time_features()},
        {"input_bias", L.in_b, H},
    };
    for (int l = 0; l < a.layers - 1; ++l) {
        out.push_back({"hidden" + std::to_string(l) + "_weight", L.hidden_w(a, l), H * H});
        out.push_back({"hidden" + std::to_string(l) + "_bias", L.hidden_b(a, l), H});
    }
    out.push_back({"output_weight", L.out_w, static_cast<std::size_t>(a.dim) * H});
    out.push_back({"output_bias", L.out_b, static_cast<std::size_t>(a.dim)});
    return out;
}

inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    ModelParams p{arch, Vector::Zero(static_cast<Eigen::Index>(arch.param_count()))};
    ParamLayout L(arch);
    Rng rng(derive_seed(seed, "diffnet/init"));
    auto fill = [&](std::size_t off, std::size_t n, double stddev) {
        std::normal_distribution<double> nd(0.0, stddev);
        for (std::size_t i = 0; i < n; ++i) p.values[static_cast<Eigen::Index>(off + i)] = nd(rng);
    };
    const std::size_t H = static_cast<std::size_t>(arch.hidden);
    const double fan_in = arch.frame_inputs() + arch.token_dim + arch.time_features();
    fill(L.token_embed, static_cast<std::size_t>(arch.vocab) * arch.token_dim, 1.0);
    fill(L.in_w, H * arch.frame_inputs(), 1.0 / std::sqrt(fan_in));
    fill(L.y_proj, H * arch.token_dim, 1.0 / std::sqrt(fan_in));
    fill(L.time_proj, H * arch.time_features(), 1.0 / std::sqrt(fan_in));
    for (int l = 0; l < arch.layers - 1; ++l) fill(L.hidden_w(arch, l), H * H, 0.5 / std::sqrt(static_cast<double>(H)));
    fill(L.out_w, static_cast<std::size_t>(arch.dim) * H, 0.1 / std::sqrt(static_cast<double>(H)));
    return p;
}

// ---------------------------------------------------------------------------
// Conditioning

/// Inputs of one vector-field evaluation. Absent content or context is an
/// explicit state, not zeros, so the unconditional branch is well defined.
struct ConditioningBundle {
    double t = 0.0;
    Matrix w;                          // noisy state, T x D
    std::optional<TokenSeq> content;   // per-frame tokens
    std::optional<Matrix> context;     // T x D, only rows with visible[t] are read
    std::vector<bool> visible;         // per-frame: true = context frame, false = generated

    static ConditioningBundle unconditional(double t, Matrix w) {
        ConditioningBundle c;
        c.t = t;
        c.w = std::move(w);
        return c;
    }

    /// Same state and time, content and context dropped.
    ConditioningBundle dropped() const { return unconditional(t, w); }

    void validate(int dim, int vocab) const {
        require(w.cols() == dim, ErrorKind::ShapeMismatch, "conditioning: state width != model dim");
        require(w.rows() >= 1, ErrorKind::ShapeMismatch, "conditioning: empty state");
        require(std::isfinite(t), ErrorKind::NonFinite, "conditioning: non-finite t");
        require(w.allFinite(), ErrorKind::NonFinite, "conditioning: non-finite state");
        if (content) {
            require(static_cast<Eigen::Index>(content->size()) == w.rows(), ErrorKind::ShapeMismatch,
                    "conditioning: content length != state length");
            for (Token tok : *content)
                require(tok < vocab, ErrorKind::InvalidArgument, "conditioning: token out of vocabulary");
        }
        if (context) {
            require(context->rows() == w.rows() && context->cols() == dim, ErrorKind::ShapeMismatch,
                    "conditioning: context shape != state shape");
            require(static_cast<Eigen::Index>(visible.size()) == w.rows(), ErrorKind::ShapeMismatch,
                    "conditioning: visibility length != state length");
            require(context->allFinite(), ErrorKind::NonFinite, "conditioning: non-finite context");
        }
    }
};

inline Eigen::RowVectorXd time_features(double t, int pairs) {
    Eigen::RowVectorXd f(2 * pairs);
    constexpr double two_pi = 6.283185307179586;
    for (int k = 0; k < pairs; ++k) {
        const double freq = 0.25 * std::ldexp(1.0, k);
        f[2 * k] = std::sin(two_pi * freq * t);
        f[2 * k + 1] = std::cos(two_pi * freq * t);
    }
    return f;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline void activate(const std::string& kind, const Matrix& z, Matrix& h) {
    if (kind == "tanh") {
        h = z.array().tanh().matrix();
    } else {
        // Smooth GELU approximation x * sigmoid(1.702 x).
        h = (z.array() / (1.0 + (-1.702 * z.array()).exp())).matrix();
    }
}

inline Matrix activation_grad(const std::string& kind, const Matrix& z, const Matrix& h) {
    if (kind == "tanh") return (1.0 - h.array().square()).matrix();
    Eigen::ArrayXXd s = 1.0 / (1.0 + (-1.702 * z.array()).exp());
    return (s + 1.702 * z.array() * s * (1.0 - s)).matrix();
}

}  // namespace detail

/// Cached activations of a batched forward pass over stacked frames.
struct ForwardCache {
    Matrix frame_in;                 // N x frame_inputs
    Matrix token_in;                 // N x token_dim
    Matrix time_in;                  // N x time_features
    std::vector<int> tokens;         // per row, -1 when content absent
    std::vector<Matrix> pre;         // pre-activations per hidden layer
    std::vector<Matrix> act;         // activation outputs per hidden layer
    std::vector<Matrix> post;        // hidden state after each layer (residual sums for l>0)
    std::vector<Eigen::Index> offsets;  // row offset of each bundle, size = bundles+1
};

/// Evaluates the field for a batch of bundles. Returns one T_i x D block per bundle.
class VectorField {
public:
    explicit VectorField(const ModelParams& p) : p_(p), L_(p.arch) {
        require(static_cast<std::size_t>(p.values.size()) == p.arch.param_count(), ErrorKind::ShapeMismatch,
                "params: vector length does not match architecture");
    }

    std::vector<Matrix> forward(std::span<const ConditioningBundle> batch, ForwardCache* cache = nullptr) const {
        ForwardCache local;
        ForwardCache& c = cache ? *cache : local;
        build_inputs(batch, c);
        const auto& a = p_.arch;
        Matrix z = c.frame_in * mat(L_.in_w, a.hidden, a.frame_inputs()).transpose();
        z.noalias() += c.token_in * mat(L_.y_proj, a.hidden, a.token_dim).transpose();
        z.noalias() += c.time_in * mat(L_.time_proj, a.hidden, a.time_features()).transpose();
        z.rowwise() += vec(L_.in_b, a.hidden).transpose();
        c.pre.clear();
        c.act.clear();
        c.post.clear();
        Matrix h;
        detail::activate(a.activation, z, h);
        c.pre.push_back(std::move(z));
        c.act.push_back(h);
        c.post.push_back(h);
        for (int l = 0; l < a.layers - 1; ++l) {
            Matrix zl = h * mat(L_.hidden_w(a, l), a.hidden, a.hidden).transpose();
            zl.rowwise() += vec(L_.hidden_b(a, l), a.hidden).transpose();
            Matrix hl;
            detail::activate(a.activation, zl, hl);
            h += hl;
            c.pre.push_back(std::move(zl));
            c.act.push_back(std::move(hl));
            c.post.push_back(h);
        }
        Matrix out = h * mat(L_.out_w, a.dim, a.hidden).transpose();
        out.rowwise() += vec(L_.out_b, a.dim).transpose();
        std::vector<Matrix> result;
        result.reserve(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b)
            result.emplace_back(out.middleRows(c.offsets[b], c.offsets[b + 1] - c.offsets[b]));
        return result;
    }

    Matrix forward(const ConditioningBundle& cond) const {
        return forward(std::span<const ConditioningBundle>(&cond, 1)).front();
    }

    /// Gradient of sum_b <grad_out[b], forward(batch)[b]> with respect to the parameters.
    Vector backward(const ForwardCache& c, std::span<const Matrix> grad_out) const {
        const auto& a = p_.arch;
        const Eigen::Index N = c.frame_in.rows();
        require(grad_out.size() + 1 == c.offsets.size(), ErrorKind::ShapeMismatch, "backward: batch size mismatch");
        Matrix g(N, a.dim);
        for (std::size_t b = 0; b < grad_out.size(); ++b) {
            require(grad_out[b].rows() == c.offsets[b + 1] - c.offsets[b] && grad_out[b].cols() == a.dim,
                    ErrorKind::ShapeMismatch, "backward: loss gradient shape != output shape");
            g.middleRows(c.offsets[b], grad_out[b].rows()) = grad_out[b];
        }
        require(g.allFinite(), ErrorKind::NonFinite, "backward: non-finite loss gradient");

        Vector grad = Vector::Zero(p_.values.size());
        const Matrix& h_last = c.post.back();
        gmat(grad, L_.out_w, a.dim, a.hidden).noalias() = g.transpose() * h_last;
        gvec(grad, L_.out_b, a.dim) = g.colwise().sum().transpose();
        Matrix dh = g * mat(L_.out_w, a.dim, a.hidden);  // N x H

        for (int l = a.layers - 2; l >= 0; --l) {
            // h_{l+1} = h_l + act(h_l W^T + b)
            const Matrix& h_in = c.post[static_cast<std::size_t>(l)];
            const Matrix& zl = c.pre[static_cast<std::size_t>(l + 1)];
            const Matrix& act_l = c.act[static_cast<std::size_t>(l + 1)];
            Matrix dz = dh.cwiseProduct(detail::activation_grad(a.activation, zl, act_l));
            gmat(grad, L_.hidden_w(a, l), a.hidden, a.hidden).noalias() = dz.transpose() * h_in;
            gvec(grad, L_.hidden_b(a, l), a.hidden) = dz.colwise().sum().transpose();
            dh.noalias() += dz * mat(L_.hidden_w(a, l), a.hidden, a.hidden);
        }
        Matrix dz = dh.cwiseProduct(detail::activation_grad(a.activation, c.pre[0], c.act[0]));
        gmat(grad, L_.in_w, a.hidden, a.frame_inputs()).noalias() = dz.transpose() * c.frame_in;
        gmat(grad, L_.y_proj, a.hidden, a.token_dim).noalias() = dz.transpose() * c.token_in;
        gmat(grad, L_.time_proj, a.hidden, a.time_features()).noalias() = dz.transpose() * c.time_in;
        gvec(grad, L_.in_b, a.hidden) = dz.colwise().sum().transpose();
        Matrix dtok = dz * mat(L_.y_proj, a.hidden, a.token_dim);  // N x token_dim
        MatMap gE = gmat(grad, L_.token_embed, a.vocab, a.token_dim);
        for (Eigen::Index r = 0; r < N; ++r) {
            int tok = c.tokens[static_cast<std::size_t>(r)];
            if (tok >= 0) gE.row(tok) += dtok.row(r);
        }
        return grad;
    }

    const ModelParams& params() const { return p_; }

private:
    ConstMatMap mat(std::size_t off, int rows, int cols) const { return ConstMatMap(p_.values.data() + off, rows, cols); }
    ConstVecMap vec(std::size_t off, int n) const { return ConstVecMap(p_.values.data() + off, n); }
    static MatMap gmat(Vector& g, std::size_t off, int rows, int cols) { return MatMap(g.data() + off, rows, cols); }
    static VecMap gvec(Vector& g, std::size_t off, int n) { return VecMap(g.data() + off, n); }

    void build_inputs(std::span<const ConditioningBundle> batch, ForwardCache& c) const {
        const auto& a = p_.arch;
        const int D = a.dim;
        Eigen::Index N = 0;
        c.offsets.assign(1, 0);
        for (const auto& b : batch) {
            b.validate(D, a.vocab);
            N += b.w.rows();
            c.offsets.push_back(N);
        }
        c.frame_in = Matrix::Zero(N, a.frame_inputs());
        c.token_in = Matrix::Zero(N, a.token_dim);
        c.time_in.resize(N, a.time_features());
        c.tokens.assign(static_cast<std::size_t>(N), -1);
        ConstMatMap E(p_.values.data() + L_.token_embed, a.vocab, a.token_dim);
        for (std::size_t bi = 0; bi < batch.size(); ++bi) {
            const auto& b = batch[bi];
            const Eigen::Index r0 = c.offsets[bi];
            const Eigen::Index T = b.w.rows();
            c.frame_in.block(r0, 0, T, D) = b.w;
            c.time_in.middleRows(r0, T).rowwise() = time_features(b.t, a.time_pairs);
            if (b.context) {
                Eigen::RowVectorXd summary = Eigen::RowVectorXd::Zero(D);
                int n_visible = 0;
                for (Eigen::Index t = 0; t < T; ++t) {
                    if (!b.visible[static_cast<std::size_t>(t)]) continue;
                    c.frame_in.block(r0 + t, D, 1, D) = b.context->row(t);
                    c.frame_in(r0 + t, 2 * D) = 1.0;
                    summary += b.context->row(t);
                    ++n_visible;
                }
                if (n_visible > 0) {
                    summary /= n_visible;
                    c.frame_in.block(r0, 2 * D + 1, T, D).rowwise() = summary;
                    c.frame_in.block(r0, 3 * D + 1, T, 1).setOnes();
                }
            }
            if (b.content) {
                c.frame_in.block(r0, 3 * D + 2, T, 1).setOnes();
                for (Eigen::Index t = 0; t < T; ++t) {
                    int tok = (*b.content)[static_cast<std::size_t>(t)];
                    c.tokens[static_cast<std::size_t>(r0 + t)] = tok;
                    c.token_in.row(r0 + t) = E.row(tok);
                }
            }
        }
    }

    const ModelParams& p_;
    ParamLayout L_;
};

inline Matrix forward(const ModelParams& params, const ConditioningBundle& cond) {
    return VectorField(params).forward(cond);
}

inline Vector backward(const ModelParams& params, const ConditioningBundle& cond, const Matrix& loss_grad) {
    VectorField f(params);
    ForwardCache cache;
    f.forward(std::span<const ConditioningBundle>(&cond, 1), &cache);
    return f.backward(cache, std::span<const Matrix>(&loss_grad, 1));
}

// ---------------------------------------------------------------------------
// Optimizer

struct LrSchedule {
    double peak = 1e-3;
    std::int64_t warmup = 200;
    std::int64_t total = 4000;  // linear decay to zero at `total`; <= warmup means constant after warmup

    /// Learning rate applied by update number `step` (1-based).
    double at(std::int64_t step) const {
        if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
        if (total <= warmup) return peak;
        double frac = static_cast<double>(total - step) / static_cast<double>(total - warmup);
        return peak * std::clamp(frac, 0.0, 1.0);
    }
};

struct OptimizerState {
    Vector m;
    Vector v;
    std::int64_t step = 0;
    LrSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerState for_params(const ModelParams& p, LrSchedule sched) {
        OptimizerState s;
        s.m = Vector::Zero(p.values.size());
        s.v = Vector::Zero(p.values.size());
        s.schedule = sched;
        return s;
    }

    double next_lr() const { return schedule.at(step + 1); }
};

using WarningSink = std::function<void(const std::string&)>;

inline void stderr_warning(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

/// One Adam update. A non-finite gradient leaves params and state untouched
/// and returns false.
inline bool adam_step(OptimizerState& s, ModelParams& p, const Vector& grad, const WarningSink& warn = stderr_warning) {
    require(grad.size() == p.values.size() && s.m.size() == p.values.size() && s.v.size() == p.values.size(),
            ErrorKind::ShapeMismatch, "adam: gradient/moment length mismatch");
    if (!grad.allFinite()) {
        if (warn) warn("adam: non-finite gradient at step " + std::to_string(s.step + 1) + ", update skipped");
        return false;
    }
    const std::int64_t k = s.step + 1;
    const double lr = s.schedule.at(k);
    s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
    s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(k));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(k));
    p.values.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + s.eps);
    s.step = k;
    return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    ModelParams params;
    std::int64_t step = 0;
    std::string rng_state;  // textual std::mt19937_64 state

    bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::string_view kCheckpointMagic = "UNLCFM-CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string rng_state_string(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline Rng rng_from_state(const std::string& state) {
    Rng rng;
    if (state.empty()) return rng;
    std::istringstream is(state);
    is >> rng;
    require(!is.fail(), ErrorKind::Format, "checkpoint: bad RNG state");
    return rng;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    const auto& a = ck.params.arch;
    io::put_magic(os, kCheckpointMagic);
    io::put<std::uint32_t>(os, kCheckpointVersion);
    for (int v : {a.dim, a.vocab, a.token_dim, a.hidden, a.layers, a.time_pairs})
        io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
    io::put_string(os, a.activation);
    io::put_vector(os, ck.params.values);
    io::put<std::int64_t>(os, ck.step);
    io::put_string(os, ck.rng_state);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    io::expect_magic(is, kCheckpointMagic);
    auto version = io::get<std::uint32_t>(is);
    require(version == kCheckpointVersion, ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    auto& a = ck.params.arch;
    for (int* v : {&a.dim, &a.vocab, &a.token_dim, &a.hidden, &a.layers, &a.time_pairs})
        *v = static_cast<int>(io::get<std::uint32_t>(is));
    a.activation = io::get_string(is);
    a.validate();
    ck.params.values = io::get_vector(is);
    require(static_cast<std::size_t>(ck.params.values.size()) == a.param_count(), ErrorKind::Format,
            "checkpoint: parameter count does not match architecture");
    require(ck.params.values.allFinite(), ErrorKind::Format, "checkpoint: non-finite parameters");
    ck.step = io::get<std::int64_t>(is);
    ck.rng_state = io::get_string(is);
    return ck;
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, ck);
    return os.str();
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    std::istringstream is(bytes, std::ios::binary);
    return read_checkpoint(is);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path + " for writing");
    write_checkpoint(os, ck);
    require(static_cast<bool>(os), ErrorKind::Io, "write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::Io, "cannot open checkpoint " + path);
    return read_checkpoint(is);
}

}  // namespace unlearncfm
