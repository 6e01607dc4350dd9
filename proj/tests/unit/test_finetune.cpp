#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dollar/error.hpp"
#include "dollar/netcore/gradcheck.hpp"
#include "dollar/reward/finetune.hpp"
#include "test_util.hpp"
#include "tiny_models.hpp"

using namespace dollar;

namespace {

const NoiseSchedule& vp() {
    static const NoiseSchedule s = NoiseSchedule::vp_cosine();
    return s;
}

DistillState tiny_state(std::vector<int> grid, std::uint64_t seed = 1) {
    DistillConfig c;
    c.student_grid = std::move(grid);
    c.batch = 4;
    c.fake_ratio = 1;
    return make_distill_state(DenoiserModel(testutil::tiny_denoiser_config(), seed), c, vp());
}

DistillState small_state(std::vector<int> grid, double lr, std::uint64_t seed) {
    DenoiserConfig dc = testutil::tiny_denoiser_config();
    dc.hidden = 16;
    dc.depth = 2;
    dc.temb_dim = 8;
    DistillConfig c;
    c.student_grid = std::move(grid);
    c.lr_student = lr;
    return make_distill_state(DenoiserModel(dc, seed), c, vp());
}

Tensor column_means(const Tensor& x) {
    Tensor m({x.cols()});
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t d = 0; d < x.cols(); ++d) {
            m[d] += x.at(r, d) / static_cast<double>(x.rows());
        }
    }
    return m;
}

}  // namespace

TEST(DdpoWindow, FourStepGridTruncatesAt249And499) {
    const TimeGrid g = make_grid({249, 499, 749, 999}, vp());
    EXPECT_EQ(ddpo_window(g, 2, vp()), (std::vector<int>{249, 499}));
    EXPECT_EQ(ddpo_window(g, 1, vp()), (std::vector<int>{249}));
    EXPECT_EQ(ddpo_window(g, 3, vp()), (std::vector<int>{249, 499, 749}));
    // The landing step 249 -> 0 has no density, so four asks for three.
    EXPECT_EQ(ddpo_window(g, 4, vp()), (std::vector<int>{249, 499, 749}));
    EXPECT_THROW(ddpo_window(g, 5, vp()), ContractViolation);

    const auto tr = ddpo_transitions(g, 2, vp());
    ASSERT_EQ(tr.size(), 4u);
    EXPECT_EQ(tr.back().t_to, 0);
    EXPECT_EQ(tr.back().sigma, 0.0);
    EXPECT_FALSE(tr.back().in_window);
    EXPECT_GT(tr.front().sigma, 0.0);
}

TEST(DdpoWindow, RolloutRecordsOneLogProbPerWindowStep) {
    const DistillState s = tiny_state({249, 499, 749, 999});
    Rng rng(2);
    const DdpoRollout r = ddpo_rollout(s, {0, 1, 2}, 2, rng);
    EXPECT_EQ(r.window, (std::vector<int>{249, 499}));
    ASSERT_EQ(r.log_probs.size(), 2u);
    EXPECT_EQ(r.log_probs[0].shape(), (Shape{3, 1}));
    EXPECT_EQ(r.x0.shape(), (Shape{3, 2}));
}

TEST(GaussianLogProb, AtTheMeanIsTheNormalizer) {
    const double sigma = 0.3;
    Rng rng(3);
    const Tensor mu = rng.normal({4, 5});
    const Var lp = gaussian_log_prob(mu, Var::constant(mu), sigma);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(lp.value()[i] / 5.0, -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma), 1e-14);
    }
    Tensor x = mu;
    x[0] += sigma;
    EXPECT_NEAR(gaussian_log_prob(x, Var::constant(mu), sigma).value()[0], lp.value()[0] - 0.5, 1e-12);
}

TEST(Ddpo, ZeroRewardGivesExactlyZeroGradient) {
    DistillState s = tiny_state({249, 499, 749, 999});
    Rng rng(4);
    const DdpoRollout r = ddpo_rollout(s, {0, 1, 2, 0}, 2, rng);
    zero_grads(s.student.parameters());
    backward(ddpo_loss(r, Tensor({4})));
    EXPECT_TRUE(grads_all_zero(s.student.parameters()));

    const auto before = param_hash(s.student.parameters());
    const LatentCodec codec = LatentCodec::identity(2);
    ddpo_step(s, reward_constant(0.0), codec, {0, 1, 2, 0}, 2, rng);
    EXPECT_EQ(param_hash(s.student.parameters()), before);
}

TEST(Ddpo, LossGradientMatchesFiniteDifferences) {
    const DistillState s = tiny_state({249, 499, 749, 999});
    Rng rr(5);
    const Tensor rewards = rr.normal({3});
    const auto r = gradcheck(s.student.parameters(), [&] {
        Rng rng(6);
        return ddpo_loss(ddpo_rollout(s, {0, 1, 2}, 2, rng), rewards);
    });
    EXPECT_LT(r.rel_error, 1e-5);
    EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(Ddpo, EstimatorMatchesAnalyticReinforceGradient) {
    // Policy N(mu, sigma^2 I), reward w.x: the true gradient of E[R] is w.
    const std::size_t n = 10000, D = 3;
    const double sigma = 0.5;
    const std::vector<double> w{1.0, -2.0, 0.5};
    Rng rng(7);
    Var mu = Var::parameter(Tensor({n, D}, 0.2));
    Tensor x = rng.normal({n, D});
    Tensor R({n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < D; ++d) {
            x.at(i, d) = 0.2 + sigma * x.at(i, d);
            R[i] += w[d] * x.at(i, d);
        }
    }
    DdpoRollout roll;
    roll.x0 = x;
    roll.log_probs = {gaussian_log_prob(x, mu, sigma)};
    backward(ddpo_loss(roll, R));
    for (std::size_t d = 0; d < D; ++d) {
        std::vector<double> per;
        for (std::size_t i = 0; i < n; ++i) {
            // Row i of the mean-loss gradient is -(1/n) times trajectory i's estimate.
            per.push_back(-static_cast<double>(n) * mu.grad().at(i, d));
        }
        const double se = testutil::stddev(per) / std::sqrt(static_cast<double>(n));
        EXPECT_NEAR(testutil::mean(per), w[d], 3.0 * se) << "dim " << d;
    }
}

TEST(LrmFinetune, ConstantRewardGivesExactlyZeroGradient) {
    DistillState s = tiny_state({499, 999});
    const LatentRewardFn r = [](const Var& z, const std::vector<int>&) {
        return ops::add_scalar(ops::scale(ops::row_sum(z), 0.0), 3.0);
    };
    Rng rng(8);
    zero_grads(s.student.parameters());
    backward(reward_finetune_loss(s, r, {0, 1}, rng));
    EXPECT_TRUE(grads_all_zero(s.student.parameters()));

    // A constant LRM (zero head weights) behaves the same.
    LrmConfig lc;
    LatentRewardModel lrm(lc, 1);
    for (auto& p : lrm.parameters()) {
        Var v = p;
        if (v.shape().size() == 2 && v.shape()[1] == 1) {
            v.mutable_value().fill(0.0);
        }
    }
    zero_grads(s.student.parameters());
    backward(reward_finetune_loss(s, lrm_reward(lrm), {0, 1}, rng));
    EXPECT_TRUE(grads_all_zero(s.student.parameters()));
    EXPECT_TRUE(grads_all_zero(lrm.parameters()));
}

TEST(LrmFinetune, LossGradientMatchesFiniteDifferences) {
    LrmConfig lc;
    lc.width = 4;
    lc.groups = 2;
    lc.conditional = true;
    lc.num_classes = 3;
    const LatentRewardModel lrm(lc, 2);
    DistillState s = tiny_state({499, 999});
    s.config.grad_mode = GradMode::last_step;
    const auto r = gradcheck(s.student.parameters(), [&] {
        Rng rng(9);
        return reward_finetune_loss(s, lrm_reward(lrm), {0, 1, 2}, rng);
    });
    EXPECT_LT(r.rel_error, 1e-5);
    EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(LrmFinetune, QuadraticRewardPullsTheMeanMonotonically) {
    DistillState s = small_state({999}, 5e-4, 10);
    s.config.grad_mode = GradMode::last_step;
    const Tensor target = Tensor::matrix(1, 2, {1.5, -1.0});
    const LatentRewardFn r = [&](const Var& z, const std::vector<int>&) {
        Tensor ones({z.rows(), 1}, 1.0);
        const Var mu = ops::matmul(Var::constant(ones), Var::constant(target));
        return ops::neg(ops::row_sum(ops::square(z - mu)));
    };
    const std::vector<int> c(64, 0);
    auto distance = [&] {
        Rng er(11);
        const Tensor m = column_means(student_sample(s, c, er));
        return std::hypot(m[0] - target[0], m[1] - target[1]);
    };
    std::vector<double> d{distance()};
    Rng rng(12);
    for (int it = 0; it < 100; ++it) {
        reward_finetune_step(s, r, c, rng);
        d.push_back(distance());
    }
    for (std::size_t i = 1; i < d.size(); ++i) {
        EXPECT_LT(d[i], d[i - 1]) << i;
    }
    EXPECT_LT(d.back(), 0.8 * d.front());
}

TEST(LrmFinetune, AccumulationTakesOneOptimizerStep) {
    DistillState a = tiny_state({999}), b = tiny_state({999});
    b.config.ft_accum = 3;
    const LatentRewardFn r = [](const Var& z, const std::vector<int>&) { return ops::row_sum(z); };
    Rng ra(13), rb(13);
    const double la = reward_finetune_step(a, r, {0, 1}, ra);
    const double lb = reward_finetune_step(b, r, {0, 1}, rb);
    EXPECT_TRUE(std::isfinite(la));
    EXPECT_TRUE(std::isfinite(lb));
    EXPECT_EQ(a.student_opt.steps(), 1);
    EXPECT_EQ(b.student_opt.steps(), 1);
}

TEST(FinetuneCompare, DifferentiableRewardProvenance) {
    // LRM mode: the generator gradient flows through the LRM. DDPO: the
    // reward is a detached weight on log-probabilities.
    DistillState s = tiny_state({249, 499, 749, 999});
    LrmConfig lc;
    const LatentRewardModel lrm(lc, 3);
    Rng rng(14);
    zero_grads(s.student.parameters());
    const Var l = reward_finetune_loss(s, lrm_reward(lrm), {0, 1}, rng);
    EXPECT_TRUE(l.has_graph());
    backward(l);
    EXPECT_FALSE(grads_all_zero(s.student.parameters()));
    EXPECT_TRUE(grads_all_zero(lrm.parameters()));

    const DdpoRollout roll = ddpo_rollout(s, {0, 1}, 2, rng);
    const Tensor R = reward_brightness().evaluate_batch(roll.x0, {0, 1});
    static_assert(std::is_same_v<decltype(R), const Tensor>);
    zero_grads(s.student.parameters());
    backward(ddpo_loss(roll, R));
    EXPECT_FALSE(grads_all_zero(s.student.parameters()));
}

TEST(FinetuneCompare, RunsBothModesFromTheSameStart) {
    const DistillState s = tiny_state({499, 999});
    Rng rng(15);
    LabeledData data{rng.normal({128, 2}), std::vector<int>(128, 0)};
    for (std::size_t i = 0; i < 128; ++i) {
        data.c[i] = static_cast<int>(i % 2);
    }
    const LatentCodec codec = LatentCodec::identity(2);
    LrmConfig lc;
    RewardBundle bundle{reward_brightness(), LatentRewardModel(lc, 4), AdamW(), RewardMode::lrm};
    FinetuneConfig fc;
    fc.iters = 6;
    fc.eval_every = 3;
    fc.eval_samples = 32;
    const auto cmp = finetune_compare(s, bundle, codec, data, fc);
    for (const auto* run : {&cmp.lrm, &cmp.ddpo}) {
        ASSERT_EQ(run->curve.size(), 3u);
        EXPECT_EQ(run->curve[0].iter, 0);
        EXPECT_EQ(run->curve[2].iter, 6);
        EXPECT_EQ(run->result.iterations, 6);
    }
    EXPECT_EQ(cmp.lrm.curve[0].reward_true, cmp.ddpo.curve[0].reward_true);
    EXPECT_NE(std::count(cmp.lrm.result.trace.begin(), cmp.lrm.result.trace.end(), "finetune"), 0);
    EXPECT_EQ(std::count(cmp.ddpo.result.trace.begin(), cmp.ddpo.result.trace.end(), "ddpo"), 6);
    EXPECT_EQ(std::count(cmp.ddpo.result.trace.begin(), cmp.ddpo.result.trace.end(), "lrm"), 0);
    EXPECT_EQ(finetune_curve_csv(cmp.lrm).substr(0, 32), "iter,reward_pred,reward_true,w2\n");
}
