#pragma once

// Evaluation metrics. The speaker embedder and content decoder are exact
// linear oracles of the synthetic corpus; the rest are standard statistics.

#include "corpus.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <limits>
#include <span>

namespace unlearncfm {

/// e = pinv(S) * mean_t frames_t  (pinv(S) already annihilates the content block).
inline Vector speaker_extract(const Matrix& frames, const Corpus& corpus) {
    require(frames.cols() == corpus.dim(), ErrorKind::ShapeMismatch, "speaker_extract: frame width != corpus dim");
    require(frames.rows() >= 1, ErrorKind::InvalidArgument, "speaker_extract: no frames");
    const Vector mean = frames.colwise().mean().transpose();
    const Matrix& S = corpus.speaker_basis;
    return (S.transpose() * S).ldlt().solve(S.transpose() * mean);
}

inline double sim(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), ErrorKind::ShapeMismatch, "sim: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    require(na > 0.0 && nb > 0.0, ErrorKind::InvalidArgument, "sim: zero embedding");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline Vector softmax(const Vector& e, double temperature = 1.0) {
    require(e.allFinite(), ErrorKind::NonFinite, "softmax: non-finite input");
    require(temperature > 0.0, ErrorKind::InvalidArgument, "softmax: temperature must be positive");
    Vector z = e / temperature;
    z.array() -= z.maxCoeff();
    Vector p = z.array().exp().matrix();
    return p / p.sum();
}

/// KL(p || q) in the given log base; zero-probability entries of p contribute 0.
inline double kl_divergence(const Vector& p, const Vector& q, double log_base = 2.0) {
    require(p.size() == q.size(), ErrorKind::ShapeMismatch, "kl: dimension mismatch");
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
    return s / std::log(log_base);
}

/// Jensen-Shannon divergence, base 2, so the value lies in [0, 1].
inline double jsd(const Vector& p, const Vector& q) {
    require(p.size() == q.size(), ErrorKind::ShapeMismatch, "jsd: dimension mismatch");
    const Vector m = 0.5 * (p + q);
    const double v = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m);
    return std::clamp(v, 0.0, 1.0);
}

/// 1 - mean_i JSD(softmax(tested_i), softmax(reference_i)).
inline double spk_zrf_from_embeddings(std::span<const Vector> tested, std::span<const Vector> reference,
                                      double temperature = 1.0) {
    require(!tested.empty(), ErrorKind::InvalidArgument, "spk-ZRF: empty evaluation set");
    require(tested.size() == reference.size(), ErrorKind::ShapeMismatch, "spk-ZRF: set sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < tested.size(); ++i)
        s += jsd(softmax(tested[i], temperature), softmax(reference[i], temperature));
    return 1.0 - s / static_cast<double>(tested.size());
}

/// Per frame: argmax_k <pinv(C) frame, E[k]>, lowest index on ties.
inline TokenSeq content_decode(const Matrix& frames, const Corpus& corpus) {
    require(frames.cols() == corpus.dim(), ErrorKind::ShapeMismatch, "content_decode: frame width != corpus dim");
    const Matrix& C = corpus.content_basis;
    const Matrix coords = (C.transpose() * C).ldlt().solve(C.transpose() * frames.transpose()).transpose();
    const Matrix scores = coords * corpus.embeddings.transpose();
    TokenSeq out(static_cast<std::size_t>(frames.rows()));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < scores.cols(); ++k)
            if (scores(r, k) > scores(r, best)) best = k;
        out[static_cast<std::size_t>(r)] = static_cast<Token>(best);
    }
    return out;
}

/// Levenshtein distance with unit costs.
template <typename Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double content_error_rate(const TokenSeq& ref, const TokenSeq& hyp) {
    require(!ref.empty(), ErrorKind::InvalidArgument, "content_error_rate: empty reference");
    return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Distribution distances

struct GaussianStats {
    Vector mean;
    Matrix cov;
};

/// Sample mean and unbiased covariance of the rows of `x`. A small ridge is
/// added when there are too few samples for a full-rank estimate.
inline GaussianStats gaussian_stats(const Matrix& x) {
    require(x.rows() >= 2, ErrorKind::InvalidArgument, "frechet: need at least 2 samples per set");
    GaussianStats g;
    g.mean = x.colwise().mean().transpose();
    Matrix centered = x.rowwise() - g.mean.transpose();
    g.cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    if (x.rows() <= x.cols()) g.cov += 1e-6 * Matrix::Identity(x.cols(), x.cols());
    return g;
}

inline Matrix sqrt_psd(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    require(es.info() == Eigen::Success, ErrorKind::Singular, "frechet: eigendecomposition failed");
    Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    require(a.mean.size() == b.mean.size() && a.cov.rows() == b.cov.rows(), ErrorKind::ShapeMismatch,
            "frechet: dimension mismatch");
    require(a.cov.allFinite() && b.cov.allFinite(), ErrorKind::Singular, "frechet: degenerate covariance");
    // Tr (S1 S2)^{1/2} = Tr (A S2 A)^{1/2} with A = S1^{1/2}, which stays symmetric.
    const Matrix A = sqrt_psd(a.cov);
    const Matrix cross = sqrt_psd(A * b.cov * A);
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    return std::max(d, 0.0);
}

inline double frechet_distance(const Matrix& set1, const Matrix& set2) {
    require(set1.cols() == set2.cols(), ErrorKind::ShapeMismatch, "frechet: feature width mismatch");
    return frechet_distance(gaussian_stats(set1), gaussian_stats(set2));
}

/// Projects both sets onto the top-k principal axes of their union.
inline std::pair<Matrix, Matrix> pca_project(const Matrix& set1, const Matrix& set2, int k) {
    require(set1.cols() == set2.cols(), ErrorKind::ShapeMismatch, "pca: feature width mismatch");
    Matrix all(set1.rows() + set2.rows(), set1.cols());
    all << set1, set2;
    const Eigen::RowVectorXd mu = all.colwise().mean();
    Matrix centered = all.rowwise() - mu;
    Eigen::SelfAdjointEigenSolver<Matrix> es(centered.transpose() * centered);
    k = std::min<int>(k, static_cast<int>(set1.cols()));
    Matrix axes = es.eigenvectors().rightCols(k);  // ascending eigenvalues
    return {(set1.rowwise() - mu) * axes, (set2.rowwise() - mu) * axes};
}

// ---------------------------------------------------------------------------
// Statistics

struct PearsonResult {
    double r;
    double p_value;
};

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    return boost::math::ibeta(0.5 * df, 0.5, df / (df + t * t));
}

inline PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), ErrorKind::ShapeMismatch, "pearson: lengths differ");
    require(x.size() >= 3, ErrorKind::InvalidArgument, "pearson: need at least 3 points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    require(sxx > 0.0 && syy > 0.0, ErrorKind::InvalidArgument, "pearson: zero variance");
    const double r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double df = n - 2.0;
    const double denom = 1.0 - r * r;
    const double t = denom <= 0.0 ? std::numeric_limits<double>::infinity() : r * std::sqrt(df / denom);
    return {r, student_t_two_sided_p(t, df)};
}

struct AnovaResult {
    double f;
    int df_between;
    int df_within;
};

/// One-way ANOVA. Zero within-group variance yields +inf, or 0 when the
/// between-group sum of squares is also zero.
inline AnovaResult anova_f(const std::vector<std::vector<double>>& groups) {
    require(groups.size() >= 2, ErrorKind::InvalidArgument, "anova: need at least 2 groups");
    double grand = 0.0;
    std::size_t n = 0;
    for (const auto& g : groups) {
        require(g.size() >= 2, ErrorKind::InvalidArgument, "anova: each group needs at least 2 values");
        for (double v : g) grand += v;
        n += g.size();
    }
    grand /= static_cast<double>(n);
    double ss_between = 0.0, ss_within = 0.0;
    for (const auto& g : groups) {
        double m = 0.0;
        for (double v : g) m += v;
        m /= static_cast<double>(g.size());
        ss_between += static_cast<double>(g.size()) * (m - grand) * (m - grand);
        for (double v : g) ss_within += (v - m) * (v - m);
    }
    const int k = static_cast<int>(groups.size());
    AnovaResult res{0.0, k - 1, static_cast<int>(n) - k};
    constexpr double tiny = 1e-300;
    if (ss_within <= tiny) {
        res.f = ss_between <= tiny ? 0.0 : std::numeric_limits<double>::infinity();
        return res;
    }
    res.f = (ss_between / res.df_between) / (ss_within / res.df_within);
    return res;
}

}  // namespace unlearncfm
