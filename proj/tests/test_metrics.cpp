#include "unlearncfm/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>

using namespace unlearncfm;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

Vector random_dist(Rng& rng, int n) {
    Vector p(n);
    for (int i = 0; i < n; ++i) p[i] = uniform01(rng) + 1e-3;
    return p / p.sum();
}

// Plain recursive Levenshtein, exponential but fine for short inputs.
std::size_t brute_edit(const std::vector<int>& a, std::size_t i, const std::vector<int>& b, std::size_t j,
                       std::vector<std::vector<long>>& memo) {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    long& m = memo[i][j];
    if (m >= 0) return static_cast<std::size_t>(m);
    std::size_t best = brute_edit(a, i + 1, b, j + 1, memo) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, brute_edit(a, i + 1, b, j, memo) + 1);
    best = std::min(best, brute_edit(a, i, b, j + 1, memo) + 1);
    m = static_cast<long>(best);
    return best;
}

std::vector<int> random_seq(Rng& rng, int max_len, int alphabet) {
    std::vector<int> s(uniform_index(rng, static_cast<std::size_t>(max_len) + 1));
    for (auto& x : s) x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(alphabet)));
    return s;
}

}  // namespace

TEST(Softmax, KnownValues) {
    const Vector a = softmax(vec({0.0, 0.0}));
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    const Vector b = softmax(vec({std::log(3.0), 0.0}));
    EXPECT_NEAR(b[0], 0.75, 1e-15);
    EXPECT_NEAR(b[1], 0.25, 1e-15);
}

TEST(Softmax, ShiftInvariantAndStable) {
    const Vector e = vec({1.0, -2.0, 0.5});
    EXPECT_LT((softmax(e) - softmax(e.array() + 700.0)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_THROW(softmax(vec({1.0, NAN})), Error);
    EXPECT_THROW(softmax(e, 0.0), Error);
}

TEST(Divergence, KlTwoCoordinateCase) {
    const double expected = 0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(0.5 / 0.25);
    EXPECT_NEAR(kl_divergence(vec({0.5, 0.5}), vec({0.75, 0.25})), expected, 1e-15);
    EXPECT_NEAR(expected, 0.2075, 5e-5);
}

TEST(Divergence, JsdLimitCase) {
    const double eps = 1e-12;
    EXPECT_NEAR(jsd(vec({0.5, 0.5}), vec({1.0 - eps, eps})), 0.3113, 5e-5);
}

TEST(Divergence, JsdPropertiesOnRandomPairs) {
    Rng rng(42);
    for (int i = 0; i < 1000; ++i) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 8));
        const Vector p = random_dist(rng, n), q = random_dist(rng, n);
        const double d = jsd(p, q);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
        EXPECT_NEAR(d, jsd(q, p), 1e-15);
        EXPECT_LE(jsd(p, p), 1e-12);
        if ((p - q).cwiseAbs().maxCoeff() > 1e-6) {
            EXPECT_GT(d, 0.0);
        }
    }
    // disjoint supports reach the upper bound
    EXPECT_NEAR(jsd(vec({1.0, 0.0}), vec({0.0, 1.0})), 1.0, 1e-12);
    EXPECT_THROW(jsd(vec({1.0}), vec({0.5, 0.5})), Error);
}

TEST(SpkZrf, ReplayScoresOneAndFixedEmbeddingScoresLower) {
    Rng rng(5);
    std::vector<Vector> reference;
    for (int i = 0; i < 12; ++i) reference.push_back(gaussian_matrix(rng, 8, 1).col(0));
    EXPECT_DOUBLE_EQ(spk_zrf_from_embeddings(reference, reference), 1.0);

    const std::vector<Vector> fixed(reference.size(), reference.front() * 3.0);
    const double z = spk_zrf_from_embeddings(fixed, reference);
    EXPECT_LT(z, 1.0);
    EXPECT_GE(z, 0.0);
    EXPECT_THROW(spk_zrf_from_embeddings(std::span<const Vector>{}, std::span<const Vector>{}), Error);
}

TEST(SpkZrf, InvariantUnderJointPermutation) {
    Rng rng(6);
    std::vector<Vector> a, b;
    for (int i = 0; i < 10; ++i) {
        a.push_back(gaussian_matrix(rng, 4, 1).col(0));
        b.push_back(gaussian_matrix(rng, 4, 1).col(0));
    }
    const double z = spk_zrf_from_embeddings(a, b);
    std::reverse(a.begin(), a.end());
    std::reverse(b.begin(), b.end());
    EXPECT_NEAR(spk_zrf_from_embeddings(a, b), z, 1e-14);
}

TEST(EditDistance, HandExamples) {
    EXPECT_EQ(content_error_rate({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_NEAR(content_error_rate({0, 1, 2}, {0, 9, 2}), 1.0 / 3.0, 1e-15);
    // drop the second token, append a new one at the end
    EXPECT_NEAR(content_error_rate({1, 2, 3, 4, 5}, {1, 3, 4, 5, 6}), 2.0 / 5.0, 1e-15);
    EXPECT_THROW(content_error_rate({}, {1}), Error);
}

TEST(EditDistance, MatchesBruteForceAndMetricAxioms) {
    Rng rng(9);
    for (int i = 0; i < 500; ++i) {
        const auto a = random_seq(rng, 12, 4), b = random_seq(rng, 12, 4), c = random_seq(rng, 12, 4);
        std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
        const std::size_t dab = edit_distance(a, b);
        EXPECT_EQ(dab, brute_edit(a, 0, b, 0, memo));
        EXPECT_EQ(edit_distance(a, a), 0u);
        EXPECT_EQ(dab, edit_distance(b, a));
        EXPECT_LE(edit_distance(a, c), dab + edit_distance(b, c));
        if (dab == 0) {
            EXPECT_EQ(a, b);
        }
    }
}

TEST(Frechet, ClosedFormOneDimensional) {
    GaussianStats a{Vector::Zero(1), Matrix::Constant(1, 1, 1.0)};
    GaussianStats b{Vector::Constant(1, 1.0), Matrix::Constant(1, 1, 1.0)};
    GaussianStats c{Vector::Zero(1), Matrix::Constant(1, 1, 4.0)};
    EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-8);
    EXPECT_NEAR(frechet_distance(a, c), 1.0, 1e-8);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(Frechet, IdenticalSetsAndNonNegativity) {
    Rng rng(3);
    const Matrix x = gaussian_matrix(rng, 40, 5);
    EXPECT_NEAR(frechet_distance(x, x), 0.0, 1e-8);
    for (int i = 0; i < 20; ++i) {
        const Matrix y = gaussian_matrix(rng, 30, 5) * (0.5 + uniform01(rng));
        EXPECT_GE(frechet_distance(x, y), -1e-10);
    }
    // fewer samples than dims is regularised, not rejected
    EXPECT_TRUE(std::isfinite(frechet_distance(gaussian_matrix(rng, 3, 5), x)));
}

TEST(Frechet, PcaKeepsRequestedComponents) {
    Rng rng(4);
    auto [a, b] = pca_project(gaussian_matrix(rng, 30, 16), gaussian_matrix(rng, 20, 16), 8);
    EXPECT_EQ(a.cols(), 8);
    EXPECT_EQ(a.rows(), 30);
    EXPECT_EQ(b.rows(), 20);
}

TEST(Pearson, DerivedAndTrivialExamples) {
    const std::vector<double> x{1, 2, 3, 4}, y{2, 1, 4, 3};
    const auto res = pearson(x, y);
    EXPECT_NEAR(res.r, 0.6, 1e-9);
    // with 2 degrees of freedom the two-sided t tail is 1 - t / sqrt(t^2 + 2)
    const double t = 0.6 * std::sqrt(2.0 / (1.0 - 0.36));
    EXPECT_NEAR(res.p_value, 1.0 - t / std::sqrt(t * t + 2.0), 1e-9);

    const std::vector<double> y2{2, 4, 6, 8}, yneg{-1, -2, -3, -4};
    EXPECT_NEAR(pearson(x, y2).r, 1.0, 1e-12);
    EXPECT_NEAR(pearson(x, y2).p_value, 0.0, 1e-12);
    EXPECT_NEAR(pearson(x, yneg).r, -1.0, 1e-12);
    EXPECT_THROW(pearson(x, std::vector<double>{1, 1, 1, 1}), Error);
    EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
}

TEST(Pearson, PValueMatchesNumericIntegration) {
    // Simpson integration of the t density as an independent check on the incomplete beta.
    for (double df : {3.0, 7.0, 20.0}) {
        for (double t : {0.3, 1.1, 2.5}) {
            const double c = std::exp(std::lgamma(0.5 * (df + 1)) - std::lgamma(0.5 * df)) / std::sqrt(df * M_PI);
            auto dens = [&](double u) { return c * std::pow(1.0 + u * u / df, -0.5 * (df + 1)); };
            const int n = 20000;
            const double h = t / n;
            double s = dens(0) + dens(t);
            for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * dens(i * h);
            const double central = s * h / 3.0;
            EXPECT_NEAR(student_t_two_sided_p(t, df), 1.0 - 2.0 * central, 1e-6);
        }
    }
}

TEST(Anova, HandExampleAndDegenerateCases) {
    const auto res = anova_f({{1, 2, 3}, {2, 3, 4}});
    EXPECT_NEAR(res.f, 1.5, 1e-9);
    EXPECT_EQ(res.df_between, 1);
    EXPECT_EQ(res.df_within, 4);
    EXPECT_EQ(anova_f({{2, 2}, {2, 2}}).f, 0.0);
    EXPECT_TRUE(std::isinf(anova_f({{1, 1}, {2, 2}}).f));
    EXPECT_THROW(anova_f({{1, 2}}), Error);
    EXPECT_THROW(anova_f({{1, 2}, {3}}), Error);
}

TEST(Oracles, ZeroFramesDecodeToTokenZero) {
    const Corpus c = generate_corpus(CorpusSpec{});
    const TokenSeq y = content_decode(Matrix::Zero(5, c.dim()), c);
    for (Token t : y) EXPECT_EQ(t, 0);
}

TEST(Oracles, SmallNoiseDecodesExactly) {
    const Corpus c = generate_corpus(CorpusSpec{});
    double min_gap = 1e9;
    for (Eigen::Index i = 0; i < c.embeddings.rows(); ++i)
        for (Eigen::Index j = i + 1; j < c.embeddings.rows(); ++j)
            min_gap = std::min(min_gap, (c.embeddings.row(i) - c.embeddings.row(j)).norm());
    const double sigma = 0.1 * min_gap;
    Rng rng(12);
    std::size_t errors = 0, frames = 0;
    for (int trial = 0; trial < 50; ++trial) {
        TokenSeq y;
        for (int i = 0; i < 40; ++i) y.push_back(static_cast<Token>(uniform_index(rng, 16)));
        const Matrix f = render_frames(y, gaussian_matrix(rng, c.d_speaker(), 1).col(0) * 0.5, c, sigma,
                                       static_cast<std::uint64_t>(trial));
        const TokenSeq back = content_decode(f, c);
        for (std::size_t i = 0; i < y.size(); ++i) errors += back[i] != y[i];
        frames += y.size();
    }
    EXPECT_LE(static_cast<double>(errors) / static_cast<double>(frames), 1e-3);
}

TEST(Oracles, SimBoundsAndScaleInvariance) {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        const Vector a = gaussian_matrix(rng, 8, 1).col(0), b = gaussian_matrix(rng, 8, 1).col(0);
        const double s = sim(a, b);
        EXPECT_LE(std::abs(s), 1.0);
        EXPECT_NEAR(sim(a, 2.5 * b), s, 1e-12);
        EXPECT_NEAR(sim(a, a), 1.0, 1e-12);
    }
    EXPECT_THROW(sim(Vector::Zero(3), Vector::Ones(3)), Error);
}
