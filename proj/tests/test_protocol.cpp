#include "unlearncfm/protocol.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <map>

using namespace unlearncfm;

namespace {

CorpusSpec small_spec() {
    CorpusSpec s;
    s.n_remain = 6;
    s.n_forget = 2;
    s.n_unseen = 3;
    s.utts_min = 4;
    s.utts_max = 5;
    s.t_min = 14;
    s.t_max = 20;
    return s;
}

Architecture tiny_arch() {
    Architecture a;
    a.hidden = 16;
    a.layers = 2;
    a.token_dim = 4;
    a.time_pairs = 2;
    return a;
}

EvalConfig quick_eval() {
    EvalConfig e;
    e.sampler.nfe = 4;
    e.chunk = 3;
    return e;
}

/// Returns the real utterance frames for whatever the request asks to generate.
Generator ground_truth(const Corpus& c) {
    auto by_content = std::make_shared<std::map<TokenSeq, Matrix>>();
    for (const auto& u : c.utterances) (*by_content)[u.content] = u.frames;
    return [by_content](std::span<const SampleRequest> reqs, const SamplerConfig&) {
        std::vector<Matrix> out;
        for (const auto& r : reqs) {
            const auto& toks = *r.content;
            if (auto whole = by_content->find(toks); whole != by_content->end()) {
                out.push_back(whole->second);
                continue;
            }
            const auto P = static_cast<Eigen::Index>(std::count(r.mask.begin(), r.mask.end(), false));
            const TokenSeq tail(toks.begin() + P, toks.end());
            Matrix m(r.x0.rows(), r.x0.cols());
            m << r.context->topRows(P), by_content->at(tail);
            out.push_back(std::move(m));
        }
        return out;
    };
}

}  // namespace

TEST(Protocol, GroundTruthOutputsReproduceSameSpeakerBaseline) {
    const Corpus c = generate_corpus(small_spec());
    const EvalConfig cfg = quick_eval();
    const auto gt = ground_truth(c);
    const EvalReport rep = run_protocol(gt, gt, c, Scenario::Standard, cfg);

    double expected = 0.0;
    std::size_t n = 0;
    for (auto id : c.eval_utterances(Split::Unseen)) {
        const auto& u = c.utterances[id];
        const auto& src = detail::prompt_source(c, u);
        expected += sim(speaker_extract(u.frames, c), speaker_extract(make_prompt(src, cfg.prompt_len).frames, c));
        ++n;
    }
    ASSERT_EQ(rep.n_r, n);
    EXPECT_NEAR(*rep.sim_r, expected / static_cast<double>(n), 1e-12);
    EXPECT_EQ(*rep.cer_r, 0.0);
    EXPECT_EQ(*rep.cer_f, 0.0);
    EXPECT_NEAR(*rep.zrf_r, 1.0, 1e-12);
    EXPECT_EQ(rep.n_f, c.eval_utterances(Split::Forget).size());
}

TEST(Protocol, PromptComesFromAnotherUtteranceOfTheSameSpeaker) {
    const Corpus c = generate_corpus(small_spec());
    for (auto id : c.eval_utterances(Split::Forget)) {
        const auto& u = c.utterances[id];
        const auto& src = detail::prompt_source(c, u);
        EXPECT_NE(src.id, u.id);
        EXPECT_EQ(src.speaker, u.speaker);
    }
}

TEST(Protocol, AggregatesEqualRowMeans) {
    const Corpus c = generate_corpus(small_spec());
    const ModelParams p = init_params(tiny_arch(), 3);
    const EvalReport rep = run_protocol(p, p, c, Scenario::Standard, quick_eval());
    double sr = 0, sf = 0, cr = 0, zf = 0;
    for (const auto& r : rep.rows) {
        if (r.forget_group) {
            sf += *r.sim;
            zf += 1.0 - *r.jsd;
        } else {
            sr += *r.sim;
            cr += r.cer;
        }
    }
    EXPECT_NEAR(*rep.sim_r, sr / static_cast<double>(rep.n_r), 1e-9);
    EXPECT_NEAR(*rep.cer_r, cr / static_cast<double>(rep.n_r), 1e-9);
    EXPECT_NEAR(*rep.sim_f, sf / static_cast<double>(rep.n_f), 1e-9);
    EXPECT_NEAR(*rep.zrf_f, zf / static_cast<double>(rep.n_f), 1e-9);
    EXPECT_GE(*rep.zrf_r, 0.0);
    EXPECT_LE(*rep.zrf_r, 1.0);
}

TEST(Protocol, IndependentOfChunkingAndWorkerCount) {
    const Corpus c = generate_corpus(small_spec());
    const ModelParams p = init_params(tiny_arch(), 5);
    // chunk size is part of the configuration; the worker count is not
    ::setenv("UNLCFM_THREADS", "1", 1);
    const std::string one = rows_csv(run_protocol(p, p, c, Scenario::Standard, quick_eval()));
    ::setenv("UNLCFM_THREADS", "4", 1);
    const std::string four = rows_csv(run_protocol(p, p, c, Scenario::Standard, quick_eval()));
    ::unsetenv("UNLCFM_THREADS");
    EXPECT_EQ(one, four);
}

TEST(Protocol, RowOrderIndependentOfGeneratorCallOrder) {
    const Corpus c = generate_corpus(small_spec());
    const auto gt = ground_truth(c);
    EvalConfig a = quick_eval(), b = quick_eval();
    b.chunk = 1;
    EXPECT_EQ(rows_csv(run_protocol(gt, gt, c, Scenario::Standard, a)),
              rows_csv(run_protocol(gt, gt, c, Scenario::Standard, b)));
}

TEST(Noise, PowerFollowsDecibelRatio) {
    Matrix two(2, 1);
    two << 1.0, 3.0;  // mean square 5
    EXPECT_NEAR(noise_power(two, -10.0), 50.0, 1e-12);
    EXPECT_NEAR(noise_power(two, 10.0), 0.5, 1e-12);
    EXPECT_NEAR(noise_power(two, 0.0), 5.0, 1e-12);
}

TEST(Noise, CorruptionTouchesOnlyTheSegment) {
    Rng rng(1);
    const Matrix f = Matrix::Ones(10, 3);
    const Matrix g = corrupt_segment(f, 2, 5, -10.0, rng);
    EXPECT_EQ(g.topRows(2), f.topRows(2));
    EXPECT_EQ(g.bottomRows(3), f.bottomRows(3));
    EXPECT_GT((g.middleRows(2, 5) - f.middleRows(2, 5)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_THROW(corrupt_segment(f, 8, 5, -10.0, rng), Error);
}

TEST(Noise, ScenarioReportsNoisyBaselines) {
    const Corpus c = generate_corpus(small_spec());
    const auto gt = ground_truth(c);
    const EvalReport rep = run_protocol(gt, gt, c, Scenario::Noise, quick_eval());
    ASSERT_TRUE(rep.noisy_sim_r.has_value());
    EXPECT_LT(*rep.noisy_sim_r, 1.0);
    EXPECT_GT(*rep.noisy_cer_r, 0.0);
    // the clean infill restores the utterance exactly
    EXPECT_NEAR(*rep.sim_r, 1.0, 1e-12);
    EXPECT_EQ(*rep.cer_r, 0.0);
}

TEST(Diverse, ReportsFsdWithoutSimilarity) {
    const Corpus c = generate_corpus(small_spec());
    const auto gt = ground_truth(c);
    const EvalReport rep = run_protocol(gt, gt, c, Scenario::Diverse, quick_eval());
    ASSERT_TRUE(rep.fsd.has_value());
    EXPECT_NEAR(*rep.fsd, 0.0, 1e-8);
    EXPECT_FALSE(rep.sim_r.has_value());
    EXPECT_FALSE(rep.zrf_f.has_value());

    const ModelParams p = init_params(tiny_arch(), 2);
    EXPECT_GT(*run_protocol(p, p, c, Scenario::Diverse, quick_eval()).fsd, 0.0);
}

TEST(Robustness, KeepsOnlyPromptsAboveThreshold) {
    CorpusSpec s = small_spec();
    s.n_remain = 16;
    s.n_unseen = 8;
    const Corpus c = generate_corpus(s);
    const auto gt = ground_truth(c);
    const EvalConfig cfg = quick_eval();
    const EvalReport rep = run_protocol(gt, gt, c, Scenario::Robustness, cfg);
    ASSERT_TRUE(rep.threshold.has_value());
    ASSERT_TRUE(rep.pearson_r.has_value());
    EXPECT_FALSE(rep.rows.empty());
    for (const auto& r : rep.rows) {
        EXPECT_GT(r.covariate, *rep.threshold);
        EXPECT_NE(r.split, Split::Forget);
    }
    EXPECT_EQ(rep.n_f, 0u);
}

TEST(Baselines, SameSpeakerAboveDifferentSpeaker) {
    const Corpus c = generate_corpus(CorpusSpec{});
    const SimBaselines b = sim_baselines(c, 8);
    EXPECT_GT(b.same_mean, 0.95);
    EXPECT_LT(b.diff_mean, 0.5);
    EXPECT_EQ(b.diff_pairs, c.speakers.size() * (c.speakers.size() - 1));
    EXPECT_GT(b.forget_threshold(), b.diff_mean);
}

TEST(Output, SummaryRoundTripAndTables) {
    const Corpus c = generate_corpus(small_spec());
    const auto gt = ground_truth(c);
    const EvalReport rep = run_protocol(gt, gt, c, Scenario::Standard, quick_eval());
    const EvalReport back = parse_report_summary(report_summary(rep));
    EXPECT_EQ(*back.sim_r, *rep.sim_r);
    EXPECT_EQ(back.n_f, rep.n_f);
    EXPECT_EQ(report_summary(back), report_summary(rep));

    const std::string md = markdown_table({{"pretrained", rep}});
    EXPECT_NE(md.find("| CER-R | SIM-R | CER-F | SIM-F | spk-ZRF-R | spk-ZRF-F |"), std::string::npos);
    EXPECT_EQ(rows_csv(rep).substr(0, 31), "utt_id,split,scenario,sim,cer,j");
    EXPECT_NE(embeddings_csv(rep).find("e_8"), std::string::npos);
}

TEST(Errors, EmptyOrFailingEvaluationRejected) {
    const Corpus c = generate_corpus(small_spec());
    Generator bad = [](std::span<const SampleRequest> reqs, const SamplerConfig&) {
        std::vector<Matrix> out;
        for (const auto& r : reqs) out.push_back(Matrix::Constant(r.x0.rows(), r.x0.cols(), NAN));
        return out;
    };
    try {
        run_protocol(bad, bad, c, Scenario::Standard, quick_eval());
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("utterance"), std::string::npos);
    }
    EXPECT_THROW(parse_scenario("loud"), Error);
}
