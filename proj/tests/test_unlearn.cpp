#include "unlearncfm/unlearn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>

using namespace unlearncfm;

namespace {

Architecture tiny_arch() {
    Architecture a;
    a.hidden = 16;
    a.layers = 2;
    a.token_dim = 4;
    a.time_pairs = 2;
    return a;
}

CorpusSpec small_spec() {
    CorpusSpec s;
    s.n_remain = 6;
    s.n_forget = 2;
    s.n_unseen = 2;
    s.utts_min = 4;
    s.utts_max = 5;
    s.t_min = 12;
    s.t_max = 16;
    return s;
}

UnlearnConfig quick_cfg(Method m, int steps = 4) {
    UnlearnConfig c;
    c.method = m;
    c.steps = steps;
    c.batch = 6;
    c.schedule = {1e-3, 1, steps};
    c.ascent_schedule = {1e-4, 1, steps};
    c.teacher_sampler.nfe = 4;
    c.retrain.steps = steps;
    c.retrain.batch = 4;
    c.retrain.schedule = {1e-3, 1, steps};
    c.forget_batch_prob = 0.5;
    return c;
}

Utterance make_utt(int len, int dim, double fill) {
    Utterance u;
    u.frames = Matrix::Constant(len, dim, fill);
    u.content.assign(static_cast<std::size_t>(len), 1);
    return u;
}

struct Fixture {
    Corpus corpus = generate_corpus(small_spec());
    Checkpoint pre{init_params(tiny_arch(), 99), 0, {}};
};

}  // namespace

TEST(TguObjective, LambdaEndpointsAndAffinity) {
    EXPECT_EQ(tgu_total(1.0, 3.0, 5.0), 3.0);
    EXPECT_EQ(tgu_total(0.0, 3.0, 5.0), 5.0);
    EXPECT_NEAR(tgu_total(0.2, 3.0, 5.0), 0.2 * 3.0 + 0.8 * 5.0, 1e-15);
    // affine in lambda: midpoint of the endpoints
    EXPECT_NEAR(tgu_total(0.5, 3.0, 5.0), 0.5 * (tgu_total(0.0, 3.0, 5.0) + tgu_total(1.0, 3.0, 5.0)), 1e-15);
    // an empty forget group contributes nothing
    EXPECT_NEAR(tgu_total(0.2, 3.0, 0.0), 0.6, 1e-15);
}

TEST(Sgu, PairConcatenatesForgetThenRemain) {
    const Utterance f = make_utt(24, 4, 1.0), r = make_utt(32, 4, 2.0);
    const SguPair p = sgu_build_pair(f, r);
    ASSERT_EQ(p.frames.rows(), 56);
    EXPECT_EQ(p.content.size(), 56u);
    EXPECT_EQ(mask_count(p.mask), 32u);
    for (int i = 0; i < 56; ++i) {
        EXPECT_EQ(p.mask[static_cast<std::size_t>(i)], i >= 24);
        EXPECT_EQ(p.frames(i, 0), i < 24 ? 1.0 : 2.0);
    }
    EXPECT_THROW(sgu_build_pair(f, make_utt(8, 3, 0.0)), Error);
}

TEST(NegativeGradient, GradientIsNegatedCfmGradient) {
    const ModelParams p = init_params(tiny_arch(), 4);
    Rng rng(8);
    std::vector<CfmExample> batch;
    for (int i = 0; i < 3; ++i) {
        const Matrix x1 = gaussian_matrix(rng, 10, 16), x0 = gaussian_matrix(rng, 10, 16);
        batch.push_back(make_cfm_example(x1, x1, TokenSeq(10, 2), sample_span_mask(rng, 10, 0.7, 1.0), x0,
                                         uniform01(rng), PathConfig{}, false));
    }
    const auto down = cfm_batch_loss(p, batch);
    const auto up = cfm_batch_loss(p, batch, -1.0);
    EXPECT_NEAR(up.loss, -down.loss, 1e-14);
    EXPECT_LT((up.grad + down.grad).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(NegativeGradient, BatchesContainOnlyForgetSamples) {
    Fixture fx;
    const auto res = unlearn(fx.pre, fx.corpus, quick_cfg(Method::Ng, 3));
    ASSERT_EQ(res.log.size(), 3u);
    for (const auto& row : res.log) {
        EXPECT_EQ(row.n_forget, 6);
        EXPECT_EQ(row.remain_loss, 0.0);
        EXPECT_NEAR(row.total, -row.forget_loss, 1e-15);
    }
}

TEST(Blowup, DetectorCountsStrikesAndTripsOnNonFinite) {
    BlowupDetector d(1e6, 3);
    double loss = 1.0;
    int tripped_at = -1;
    for (int step = 1; step <= 40 && tripped_at < 0; ++step, loss *= 2.0)
        if (d.update(loss)) tripped_at = step;
    // 2^20 is the first value above 1e6, so strikes land on steps 21, 22, 23
    EXPECT_EQ(tripped_at, 23);

    BlowupDetector nan(1e6, 3);
    EXPECT_TRUE(nan.update(std::numeric_limits<double>::quiet_NaN()));
}

TEST(Blowup, RunRestoresLastGoodParameters) {
    UnlearnConfig cfg = quick_cfg(Method::Ng, 40);
    const ModelParams start = init_params(tiny_arch(), 2);
    std::map<std::int64_t, Vector> seen;
    double loss = 1.0;
    auto res = run_updates(
        start, cfg, cfg.ascent_schedule, true,
        [&](const ModelParams& p, UnlearnLogRow& row, Vector& grad) {
            row.total = loss;
            loss *= 2.0;
            grad = Vector::Ones(p.values.size());
        },
        [&](std::int64_t step, const ModelParams& p) { seen[step] = p.values; });
    EXPECT_TRUE(res.diverged);
    EXPECT_NE(res.message.find("unbounded"), std::string::npos);
    ASSERT_EQ(res.log.size(), 23u);
    EXPECT_TRUE(res.log.back().blowup);
    // step 20 saw the last loss below the threshold; its parameters are what step 19 produced
    EXPECT_EQ(res.checkpoint.params.values, seen.at(19));
}

TEST(SelectiveKl, FrameKlValuesAndGradient) {
    const Mask all(1, true);
    Matrix t(1, 2), s(1, 2);
    t << 0.0, 0.0;
    s << std::log(3.0), 0.0;
    Matrix g;
    EXPECT_NEAR(frame_kl(t, t, all, &g), 0.0, 1e-15);
    EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-15);

    const double kl = frame_kl(t, s, all, &g);
    EXPECT_NEAR(kl / std::log(2.0), 0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(0.5 / 0.25), 1e-14);
    EXPECT_NEAR(g(0, 0), 0.25, 1e-14);
    EXPECT_NEAR(g(0, 1), -0.25, 1e-14);

    // finite-difference check over several masked frames
    Rng rng(3);
    const Matrix tt = gaussian_matrix(rng, 4, 5), ss = gaussian_matrix(rng, 4, 5);
    const Mask m{true, false, true, true};
    frame_kl(tt, ss, m, &g);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 5; ++c) {
            Matrix a = ss, b = ss;
            a(r, c) += 1e-6;
            b(r, c) -= 1e-6;
            const double fd = (frame_kl(tt, a, m, nullptr) - frame_kl(tt, b, m, nullptr)) / 2e-6;
            EXPECT_NEAR(g(r, c), fd, 1e-7);
        }
}

TEST(SelectiveKl, FirstStepStudentEqualsTeacher) {
    Fixture fx;
    const auto res = unlearn(fx.pre, fx.corpus, quick_cfg(Method::Kl, 2));
    ASSERT_FALSE(res.log.empty());
    EXPECT_NEAR(res.log.front().remain_loss, 0.0, 1e-12);
    EXPECT_NEAR(res.log.front().forget_loss, 0.0, 1e-12);
}

TEST(Teacher, SamplesAreSeededAndDistinctPerDraw) {
    const ModelParams p = init_params(tiny_arch(), 6);
    const std::vector<TokenSeq> y{TokenSeq(9, 3), TokenSeq(9, 3)};
    const std::vector<std::uint64_t> seeds{derive_seed(1, "t", 0), derive_seed(1, "t", 1)};
    SamplerConfig sc;
    sc.nfe = 4;
    const auto a = teacher_generate(p, y, seeds, sc);
    const auto b = teacher_generate(p, y, seeds, sc);
    EXPECT_EQ(a[0].frames, b[0].frames);
    EXPECT_GT((a[0].x0 - a[1].x0).cwiseAbs().maxCoeff(), 0.1);
    EXPECT_GT((a[0].frames - a[1].frames).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(a[0].frames.rows(), 9);
}

TEST(Teacher, ForgetExampleUsesRealContextAndTeacherTarget) {
    Fixture fx;
    const Utterance& f = fx.corpus.utterances[fx.corpus.train_utterances({Split::Forget}).front()];
    SamplerConfig sc;
    sc.nfe = 2;
    const std::vector<TokenSeq> y{f.content};
    const std::vector<std::uint64_t> seeds{5};
    const auto ts = teacher_generate(fx.pre.params, y, seeds, sc);
    Mask m(static_cast<std::size_t>(f.length()), true);
    m[0] = false;
    const CfmExample ex = make_tgu_forget_example(f, ts[0], m, 0.0, PathConfig{});
    // at t = 0 the state is the teacher's own noise
    EXPECT_LT((ex.cond.w - ts[0].x0).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_TRUE(ex.cond.context.has_value());
    EXPECT_EQ(ex.cond.context->row(0), f.frames.row(0));
}

TEST(Tgu, ZeroStepsKeepsTeacherAndRunsAreDeterministic) {
    Fixture fx;
    const auto none = unlearn(fx.pre, fx.corpus, quick_cfg(Method::Tgu, 0));
    EXPECT_EQ(none.checkpoint.params.values, fx.pre.params.values);

    const auto a = unlearn(fx.pre, fx.corpus, quick_cfg(Method::Tgu, 3));
    const auto b = unlearn(fx.pre, fx.corpus, quick_cfg(Method::Tgu, 3));
    EXPECT_EQ(a.checkpoint.params.values, b.checkpoint.params.values);
    EXPECT_NE(a.checkpoint.params.values, fx.pre.params.values);
    std::uint64_t forget_seen = 0;
    for (const auto& row : a.log) forget_seen += static_cast<std::uint64_t>(row.n_forget);
    EXPECT_EQ(a.teacher_draws, forget_seen);
    EXPECT_GT(forget_seen, 0u);
}

TEST(Tgu, LambdaOneIgnoresForgetGroup) {
    Fixture fx;
    UnlearnConfig cfg = quick_cfg(Method::Tgu, 2);
    cfg.lambda = 1.0;
    const auto res = unlearn(fx.pre, fx.corpus, cfg);
    for (const auto& row : res.log) EXPECT_NEAR(row.total, row.remain_loss, 1e-12);
}

TEST(RemainOnly, FineTuneAndExactNeverTouchForgetData) {
    Fixture fx;
    // poison every forget frame: any forget sample in a batch would produce a non-finite loss
    for (auto& u : fx.corpus.utterances)
        if (fx.corpus.split_of(u.speaker) == Split::Forget) u.frames.setConstant(std::numeric_limits<double>::quiet_NaN());
    for (Method m : {Method::Ft, Method::Exact}) {
        const auto res = unlearn(fx.pre, fx.corpus, quick_cfg(m, 5));
        EXPECT_FALSE(res.diverged) << method_name(m);
        EXPECT_TRUE(res.checkpoint.params.values.allFinite()) << method_name(m);
    }
}

TEST(Exact, StartsFromIndependentInitialization) {
    Fixture fx;
    UnlearnConfig cfg = quick_cfg(Method::Exact, 0);
    const auto res = unlearn(fx.pre, fx.corpus, cfg);
    const auto expected = init_params(fx.pre.params.arch,
                                      derive_seed(derive_seed(cfg.seed, "unlearn/exact/seed"), "exact/init"));
    EXPECT_EQ(res.checkpoint.params.values, expected.values);
    EXPECT_NE(res.checkpoint.params.values, fx.pre.params.values);
}

TEST(Recovery, ZeroStepsIsIdentity) {
    Fixture fx;
    TrainConfig tc;
    tc.steps = 0;
    const auto r = recover_train(fx.pre.params, fx.corpus, tc, 1);
    EXPECT_EQ(r.checkpoint.params.values, fx.pre.params.values);

    tc.steps = 3;
    tc.batch = 4;
    tc.schedule = {1e-3, 1, 3};
    const auto moved = recover_train(fx.pre.params, fx.corpus, tc, 1);
    EXPECT_NE(moved.checkpoint.params.values, fx.pre.params.values);
}

TEST(Log, JsonRowHasExpectedKeys) {
    UnlearnLogRow row{7, 0.5, 1.5, 1.3, 1e-3, true, 2};
    const auto j = nlohmann::json::parse(log_row_json(row));
    for (const char* k : {"step", "remain_loss", "forget_loss", "total", "lr", "blowup_flag"})
        EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["step"].get<int>(), 7);
    EXPECT_TRUE(j["blowup_flag"].get<bool>());
}

TEST(Config, InvalidValuesAndMismatchedCheckpointRejected) {
    Fixture fx;
    UnlearnConfig cfg = quick_cfg(Method::Tgu);
    cfg.lambda = 1.5;
    EXPECT_THROW(unlearn(fx.pre, fx.corpus, cfg), Error);
    Architecture wrong = tiny_arch();
    wrong.dim = 8;
    EXPECT_THROW(unlearn(Checkpoint{init_params(wrong, 1), 0, {}}, fx.corpus, quick_cfg(Method::Tgu)), Error);
    EXPECT_EQ(parse_method("tgu"), Method::Tgu);
    EXPECT_THROW(parse_method("bogus"), Error);
}
