#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "dollar/diffusion/oracles.hpp"
#include "dollar/distill/distill.hpp"
#include "dollar/error.hpp"
#include "dollar/netcore/gradcheck.hpp"
#include "test_util.hpp"
#include "tiny_models.hpp"

using namespace dollar;

namespace {

const NoiseSchedule& vp() {
    static const NoiseSchedule s = NoiseSchedule::vp_cosine();
    return s;
}

DistillConfig small_config(std::vector<int> grid = {249, 499, 749, 999}) {
    DistillConfig c;
    c.student_grid = std::move(grid);
    c.batch = 4;
    c.fake_ratio = 2;
    return c;
}

DistillState tiny_state(std::vector<int> grid = {249, 499, 749, 999}, std::uint64_t seed = 1) {
    return make_distill_state(DenoiserModel(testutil::tiny_denoiser_config(), seed), small_config(std::move(grid)),
                              vp());
}

/// Trained on N(0, I) with one real class (shared by the suite).
const DenoiserModel& gaussian_teacher() {
    static const DenoiserModel m = [] {
        DenoiserConfig cfg;
        cfg.latent_dim = 2;
        cfg.num_classes = 2;
        cfg.hidden = 64;
        cfg.depth = 2;
        cfg.temb_dim = 16;
        cfg.class_dim = 4;
        DenoiserModel model(cfg, 5);
        Rng rng(105);
        LabeledData data{rng.normal({65536, 2}), std::vector<int>(65536, 0)};
        TeacherTrainConfig tc;
        tc.steps = 5000;
        tc.batch = 512;
        tc.lr = 2e-3;
        tc.seed = 5;
        train_denoiser(model, data, vp(), tc);
        return model;
    }();
    return m;
}

Tensor flat_grad(const std::vector<Var>& params) {
    const auto g = flatten_grads(params);
    return Tensor({g.size()}, g);
}

double norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) {
        s += v * v;
    }
    return std::sqrt(s);
}

}  // namespace

TEST(ConsistencyHead, BoundaryCondition) {
    ConsistencyHead h;
    EXPECT_EQ(h.c_skip(h.t_min), 1.0);
    EXPECT_EQ(h.c_out(h.t_min), 0.0);
    EXPECT_LT(h.c_skip(999), 1e-8);
    EXPECT_NEAR(h.c_out(999), 1.0, 1e-8);
    EXPECT_NEAR(h.c_skip(20), 0.25 / (100.0 + 0.25), 1e-15);

    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const DenoiserModel net(testutil::tiny_denoiser_config(), seed);
        Rng rng(seed);
        const Tensor x = rng.normal({5, 2});
        const Var f = consistency_fn(net, h, Var::constant(x), std::vector<int>(5, h.t_min), {0, 1, 2, 0, 1}, vp());
        EXPECT_EQ(f.value(), x);
    }
}

TEST(ConsistencyHead, HuberBelowDeltaIsHalfMse) {
    ConsistencyHead h;
    h.huber_delta = 0.1;
    Rng rng(4);
    Tensor a = rng.normal({6, 3}), b = a;
    for (std::size_t i = 0; i < b.size(); ++i) {
        b[i] += 0.09 * std::sin(static_cast<double>(i));
    }
    const double hub = h.distance_loss(Var::constant(a), Var::constant(b)).value()[0];
    h.distance = Distance::mse;
    const double mse = h.distance_loss(Var::constant(a), Var::constant(b)).value()[0];
    EXPECT_EQ(hub, 0.5 * mse);
}

TEST(DistillState, StartsFromTeacherCopies) {
    const DenoiserModel teacher(testutil::tiny_denoiser_config(), 7);
    const DistillState s = make_distill_state(teacher, small_config(), vp());
    const auto h = param_hash(teacher.parameters());
    EXPECT_EQ(param_hash(s.student.parameters()), h);
    EXPECT_EQ(param_hash(s.fake.parameters()), h);
    EXPECT_EQ(param_hash(s.target.parameters()), h);
    EXPECT_NE(s.student.parameters()[0].node(), teacher.parameters()[0].node());
    EXPECT_EQ(s.config.head.t_min, 19);
    EXPECT_EQ(s.cd_grid.size(), 50u);

    DistillConfig bad = small_config();
    bad.fake_ratio = 0;
    EXPECT_THROW(make_distill_state(teacher, bad, vp()), ContractViolation);
    EXPECT_THROW(make_distill_state(teacher, small_config({10, 999}), vp()), ContractViolation);
    bad = small_config();
    bad.m = 50;
    EXPECT_THROW(make_distill_state(teacher, bad, vp()), ContractViolation);
}

TEST(StudentSample, SingleStepCarriesGradient) {
    DistillState s = tiny_state({999});
    Rng rng(1);
    const Var x = student_sample(s, {0, 1}, rng, GradMode::last_step);
    zero_grads(s.student.parameters());
    backward(ops::sum(ops::square(x)));
    EXPECT_GT(grad_norm(s.student.parameters()), 0.0);
}

TEST(StudentSample, NoneIsDeterministicAndGraphFree) {
    const DistillState s = tiny_state();
    Rng r1(9), r2(9);
    const Var a = student_sample(s, {0, 1, 2}, r1, GradMode::none);
    const Var b = student_sample(s, {0, 1, 2}, r2, GradMode::none);
    EXPECT_EQ(a.value(), b.value());
    EXPECT_FALSE(a.has_graph());
    Rng r3(9);
    EXPECT_EQ(student_sample(s, {0, 1, 2}, r3), a.value());
}

TEST(StudentSample, EveryPickReachesTheParameters) {
    // Whichever evaluation keeps gradients, later ones pass the input path on.
    DistillState s = tiny_state();
    std::map<std::size_t, int> hits;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        Rng rng(seed);
        const Var x = student_sample(s, {0, 1}, rng, GradMode::one_random_step);
        zero_grads(s.student.parameters());
        backward(ops::sum(x));
        EXPECT_GT(grad_norm(s.student.parameters()), 0.0) << "seed " << seed;
        Rng peek(seed);
        ++hits[static_cast<std::size_t>(peek.uniform_int(0, 3))];
    }
    EXPECT_EQ(hits.size(), 4u);
}

TEST(StudentSample, LastStepGradientMatchesFiniteDifferences) {
    // Earlier evaluations are replayed as constants, so this is exact.
    DistillState s = tiny_state({499, 999});
    const auto r = gradcheck(s.student.parameters(), [&] {
        Rng rng(3);
        return ops::sum(ops::square(student_sample(s, {0, 2}, rng, GradMode::last_step)));
    });
    EXPECT_LT(r.rel_error, 1e-6);
    EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(StudentSample, GaussianStudentAfterDistillationMatchesStandardNormal) {
    DistillConfig cfg;
    cfg.batch = 64;
    cfg.fake_ratio = 5;
    cfg.beta_cd = 0.5;
    cfg.w_cd = 0.0;
    cfg.w_vsd = 0.0;
    cfg.lr_student = 1e-3;
    cfg.lr_fake = 1e-3;
    DistillState s = make_distill_state(gaussian_teacher(), cfg, vp());
    Rng rng(6);
    LabeledData data{rng.normal({8192, 2}), std::vector<int>(8192, 0)};
    const LatentCodec codec = LatentCodec::identity(2);
    const auto res = distill_loop(s, data, nullptr, codec, 400, 7);
    ASSERT_FALSE(res.halted) << res.halt_reason;
    Rng er(8);
    const Tensor x = student_sample(s, std::vector<int>(8192, 0), er);
    for (std::size_t d = 0; d < 2; ++d) {
        const auto col = testutil::column(x, d);
        EXPECT_NEAR(testutil::mean(col), 0.0, 0.05);
        EXPECT_NEAR(testutil::stddev(col), 1.0, 0.05);
    }
}

TEST(CdLoss, ExactConsistencyFunctionOfGaussianFlowHasZeroLoss) {
    // For N(0, I) data one DDIM step is x -> (a a' + b b') x, so composing
    // the factors down to the lowest grid step is the exact consistency map.
    const auto oracle = MixtureOracle::gaussian(2);
    const TimeGrid grid = ddim_grid(vp(), 50);
    auto factor = [&](int t) {
        double f = 1.0;
        for (std::size_t k = grid.index_of(t); k > 0; --k) {
            const int hi = grid[k], lo = grid[k - 1];
            f *= vp().a(hi) * vp().a(lo) + vp().b(hi) * vp().b(lo);
        }
        return f;
    };
    const ConsistencyFn f = [&](const Var& x, const std::vector<int>& t, const std::vector<int>&) {
        std::vector<double> k;
        for (int ti : t) {
            k.push_back(factor(ti));
        }
        return ops::scale_rows(x, k);
    };
    ConsistencyHead head;
    Rng rng(10);
    for (const int m : {1, 5}) {
        for (std::size_t n : {0u, 7u, 30u, 49u - static_cast<unsigned>(m)}) {
            const Tensor x0 = rng.normal({8, 2}), eps = rng.normal({8, 2});
            const Var l = cd_loss_with(f, f, oracle, head, x0, std::vector<int>(8, 0), n, m, grid, 7.5, eps, vp());
            EXPECT_LT(l.value()[0], 1e-10) << "n=" << n << " m=" << m;
        }
    }
}

TEST(CdLoss, GradientMatchesFiniteDifferences) {
    const DistillState s = tiny_state();
    Rng rng(11);
    const Tensor x0 = rng.normal({3, 2}), eps = rng.normal({3, 2});
    for (const Distance d : {Distance::huber, Distance::mse}) {
        ConsistencyHead head = s.config.head;
        head.distance = d;
        const auto r = gradcheck(s.student.parameters(), [&] {
            return cd_loss_at(s.student, s.target, *s.teacher, head, x0, {0, 1, 2}, 20, 5, s.cd_grid, 2.0, eps, vp());
        });
        EXPECT_LT(r.rel_error, 1e-6) << to_string(d);
        EXPECT_GT(r.analytic_norm, 0.0);
    }
}

TEST(CdLoss, TargetAndTeacherReceiveNoGradient) {
    DistillState s = tiny_state();
    // Perturb the student so the loss is not zero.
    auto p = s.student.parameters();
    for (auto& v : p[0].mutable_value().values()) {
        v += 0.1;
    }
    Rng rng(12);
    const Tensor x0 = rng.normal({4, 2});
    const Var l = cd_loss(s, x0, {0, 1, 2, 0}, rng);
    backward(l);
    const auto* teacher = dynamic_cast<const DenoiserModel*>(s.teacher.get());
    ASSERT_NE(teacher, nullptr);
    EXPECT_TRUE(grads_all_zero(teacher->parameters()));
    EXPECT_TRUE(grads_all_zero(s.target.parameters()));
    EXPECT_FALSE(grads_all_zero(s.student.parameters()));
}

TEST(CdLoss, IndexSamplingStaysInRange) {
    Rng rng(13);
    std::vector<int> counts(50, 0);
    for (int i = 0; i < 45000; ++i) {
        const std::size_t n = sample_cd_index(50, 5, rng);
        ASSERT_LT(n + 5, 50u);
        ++counts[n];
    }
    for (std::size_t n = 0; n < 45; ++n) {
        EXPECT_NEAR(counts[n], 1000, 130) << n;
    }
    EXPECT_THROW(sample_cd_index(5, 5, rng), ContractViolation);
}

TEST(Vsd, IdenticalScoresGiveZeroGradient) {
    DistillConfig cfg = small_config({999});
    cfg.w_vsd = 0.0;
    DistillState s = make_distill_state(DenoiserModel(testutil::tiny_denoiser_config(), 14), cfg, vp());
    Rng rng(15);
    const Var l = vsd_loss(s, {0, 1, 2}, rng);
    zero_grads(s.student.parameters());
    backward(l);
    EXPECT_EQ(l.value()[0], 0.0);
    EXPECT_TRUE(grads_all_zero(s.student.parameters()));
}

TEST(Vsd, GaussianShiftIsReduced) {
    const Tensor shift = Tensor::matrix(1, 2, {0.8, -0.5});
    const auto teacher = MixtureOracle::gaussian(2);
    const MixtureOracle fake(shift, 1.0, {1.0}, vp());
    Rng rng(16);
    const std::size_t n = 256;
    Var mu = Var::parameter(shift);
    Tensor ones({n, 1}, 1.0);
    const Var x_hat = ops::add_const(ops::matmul(Var::constant(ones), mu), rng.normal({n, 2}));
    std::vector<int> t(n);
    for (auto& ti : t) {
        ti = static_cast<int>(rng.uniform_int(20, 980));
    }
    backward(vsd_surrogate(teacher, fake, x_hat, std::vector<int>(n, 0), t, rng.normal({n, 2}), 3.5, vp()));
    const Tensor g = mu.grad();
    // The descent direction -g points along -shift.
    EXPECT_GT(g[0] * shift[0] + g[1] * shift[1], 0.0);
}

TEST(Vsd, FixedPointGradientIsZeroInExpectation) {
    // Generator samples follow the teacher's distribution and the fake score
    // is that distribution's exact score through another parameterization.
    const auto teacher = MixtureOracle::gaussian(2, 0.0, 1.0, vp(), ParamKind::conjugate_v);
    const auto fake = MixtureOracle::gaussian(2, 0.0, 1.0, vp(), ParamKind::x_pred);
    Rng rng(17);
    std::vector<double> g0, g1;
    for (int draw = 0; draw < 1000; ++draw) {
        Var mu = Var::parameter(Tensor({1, 2}));
        const Var x_hat = ops::add_const(mu, rng.normal({1, 2}));
        const std::vector<int> t{static_cast<int>(rng.uniform_int(20, 980))};
        backward(vsd_surrogate(teacher, fake, x_hat, {0}, t, rng.normal({1, 2}), 3.5, vp()));
        g0.push_back(mu.grad()[0]);
        g1.push_back(mu.grad()[1]);
    }
    for (const auto* g : {&g0, &g1}) {
        const double se = testutil::stddev(*g) / std::sqrt(1000.0);
        EXPECT_LE(std::abs(testutil::mean(*g)), 3.0 * se + 1e-12);
    }
}

TEST(Vsd, SurrogateGradientMatchesFiniteDifferences) {
    const DistillState s = tiny_state({499, 999});
    DenoiserModel fake = s.fake;
    auto fp = fake.parameters();
    for (auto& v : fp[1].mutable_value().values()) {
        v -= 0.2;
    }
    const auto r = gradcheck(s.student.parameters(), [&] {
        Rng rng(18);
        const Var x = student_sample(s, {0, 1, 2}, rng, GradMode::last_step);
        return vsd_surrogate(*s.teacher, fake, x, {0, 1, 2}, {100, 500, 900}, rng.normal({3, 2}), 1.5, vp());
    });
    EXPECT_LT(r.rel_error, 1e-5);
    EXPECT_GT(r.analytic_norm, 0.0);
}

TEST(Vsd, SurrogateGradientIsScaledScoreDifference) {
    const auto teacher = MixtureOracle::gaussian(3);
    const MixtureOracle fake(Tensor::matrix(1, 3, {0.3, 0.0, -0.2}), 1.0, {1.0}, vp());
    Rng rng(19);
    Var x = Var::parameter(rng.normal({2, 3}));
    const std::vector<int> t{300, 700};
    const Tensor eps = rng.normal({2, 3});
    backward(vsd_surrogate(teacher, fake, x, {0, 0}, t, eps, 0.0, vp()));
    const Tensor xt = forward_diffuse_rows(x.value(), t, eps, vp());
    for (std::size_t i = 0; i < 2; ++i) {
        const Tensor row = xt.row(i);
        const Tensor sr = score_from_x0(row, teacher.posterior_mean(row, t[i], 0), t[i], vp());
        const Tensor sf = score_from_x0(row, fake.posterior_mean(row, t[i], 0), t[i], vp());
        double mabs = 0.0;
        for (std::size_t d = 0; d < 3; ++d) {
            mabs += std::abs(sr[d] - sf[d]) / 3.0;
        }
        const double eta = (1.0 - vp().alpha_bar(t[i])) / (mabs + 1e-8);
        for (std::size_t d = 0; d < 3; ++d) {
            // Mean over the two rows.
            EXPECT_NEAR(x.grad().at(i, d), -eta * (sr[d] - sf[d]) / 2.0, 1e-9);
        }
    }
}

TEST(FakeScore, LearnsTheStudentsGaussianScore) {
    // A one-step student from the Gaussian teacher emits roughly
    // N(0, s^2 I) with small s; the fake net adapts to that distribution.
    DistillConfig cfg;
    cfg.student_grid = {999};
    cfg.lr_fake = 1e-3;
    DistillState s = make_distill_state(gaussian_teacher(), cfg, vp());
    Rng rng(20);
    const std::vector<int> c(256, 0);
    for (int it = 0; it < 600; ++it) {
        fake_score_update(s, c, rng);
    }
    Rng sr(21);
    const Tensor xs = student_sample(s, std::vector<int>(8192, 0), sr);
    double var = 0.0;
    for (std::size_t d = 0; d < 2; ++d) {
        var += std::pow(testutil::stddev(testutil::column(xs, d)), 2) / 2.0;
    }
    double total = 0.0;
    const std::vector<int> ts{100, 300, 500, 700, 900};
    for (int t : ts) {
        const double a = vp().a(t), b = vp().b(t);
        const Tensor xt = rng.normal({512, 2});
        Tensor x0 = xt;
        // Posterior mean of N(0, var I) data.
        for (auto& v : x0.values()) {
            v *= a * var / (a * a * var + b * b);
        }
        const Tensor pred = predict_x0(s.fake, xt, t, std::vector<int>(512, 0), 0.0, vp());
        total += testutil::mean_l2(score_from_x0(xt, pred, t, vp()), score_from_x0(xt, x0, t, vp())) *
                 (b * b);
    }
    EXPECT_LT(total / static_cast<double>(ts.size()), 0.1);
}

TEST(DistillLoop, TraceFollowsTheUpdateOrder) {
    DistillState s = tiny_state();
    s.config.fake_ratio = 5;
    Rng rng(22);
    LabeledData data{rng.normal({64, 2}), std::vector<int>(64, 1)};
    const LatentCodec codec = LatentCodec::identity(2);
    const auto res = distill_loop(s, data, nullptr, codec, 3, 23);
    ASSERT_FALSE(res.halted);
    std::vector<std::string> one{"vsd", "cd", "generator", "fake", "fake", "fake", "fake", "fake"};
    std::vector<std::string> expect;
    for (int i = 0; i < 3; ++i) {
        expect.insert(expect.end(), one.begin(), one.end());
    }
    EXPECT_EQ(res.trace, expect);
    EXPECT_EQ(res.log.size(), 3u);
    EXPECT_EQ(s.iteration, 3);
}

TEST(DistillLoop, PureVsdNeverRunsCdOrRewardBranches) {
    DistillState s = tiny_state();
    s.config.beta_cd = 0.0;
    s.config.beta_ft = 0.0;
    Rng rng(24);
    LabeledData data{rng.normal({64, 2}), std::vector<int>(64, 0)};
    const LatentCodec codec = LatentCodec::identity(2);
    LrmConfig lc;
    RewardBundle bundle{reward_brightness(), LatentRewardModel(lc, 1), AdamW(), RewardMode::lrm};
    const auto res = distill_loop(s, data, &bundle, codec, 4, 25);
    for (const auto& e : res.trace) {
        EXPECT_TRUE(e == "vsd" || e == "generator" || e == "fake") << e;
    }
    EXPECT_EQ(bundle.lrm.steps_trained, 0);
}

TEST(DistillLoop, TeacherNeverChanges) {
    DistillState s = tiny_state();
    const auto* teacher = dynamic_cast<const DenoiserModel*>(s.teacher.get());
    const auto h = param_hash(teacher->parameters());
    Rng rng(26);
    LabeledData data{rng.normal({64, 2}), std::vector<int>(64, 2)};
    const LatentCodec codec = LatentCodec::identity(2);
    LrmConfig lc;
    lc.conditional = true;
    lc.num_classes = 3;
    RewardBundle bundle{make_pixel_reward("mode_affinity", DomainKind::gauss2d), LatentRewardModel(lc, 2), AdamW(),
                        RewardMode::lrm};
    const auto res = distill_loop(s, data, &bundle, codec, 5, 27);
    ASSERT_FALSE(res.halted) << res.halt_reason;
    EXPECT_EQ(param_hash(teacher->parameters()), h);
    EXPECT_TRUE(grads_all_zero(teacher->parameters()));
    EXPECT_NE(param_hash(s.student.parameters()), h);
    // ema rate 0: the target follows the student exactly.
    EXPECT_EQ(param_hash(s.target.parameters()), param_hash(s.student.parameters()));
    EXPECT_EQ(bundle.lrm.steps_trained, 5);
}

TEST(DistillLoop, NonFiniteLossHaltsWithLastGoodParameters) {
    DistillState s = tiny_state();
    Rng rng(28);
    LabeledData data{rng.normal({64, 2}), std::vector<int>(64, 0)};
    const LatentCodec codec = LatentCodec::identity(2);
    std::uint64_t good = 0;
    DistillHooks hooks;
    hooks.every = 2;
    hooks.on_eval = [&](const DistillState& st, long) {
        good = param_hash(st.student.parameters());
        Var p = st.student.parameters()[0];
        p.mutable_value()[0] = std::nan("");
    };
    const auto res = distill_loop(s, data, nullptr, codec, 10, 29, hooks);
    EXPECT_TRUE(res.halted);
    EXPECT_FALSE(res.halt_reason.empty());
    EXPECT_EQ(res.iterations, 2);
    EXPECT_EQ(param_hash(s.student.parameters()), good);
}

TEST(DistillLoop, SameSeedSameLog) {
    Rng rng(30);
    LabeledData data{rng.normal({64, 2}), std::vector<int>(64, 0)};
    const LatentCodec codec = LatentCodec::identity(2);
    DistillState a = tiny_state(), b = tiny_state();
    const auto ra = distill_loop(a, data, nullptr, codec, 3, 31);
    const auto rb = distill_loop(b, data, nullptr, codec, 3, 31);
    EXPECT_EQ(distill_log_csv(ra.log), distill_log_csv(rb.log));
    EXPECT_EQ(param_hash(a.student.parameters()), param_hash(b.student.parameters()));
    EXPECT_EQ(distill_log_csv({}), "iter,L_VSD,L_CD,L_FT,fake_loss,reward,lrm_loss\n");
}

TEST(DistillLoop, HeterogeneousStudentUsesCleanSampleHead) {
    DistillConfig cfg = small_config();
    cfg.student_kind = ParamKind::x_pred;
    const DistillState s = make_distill_state(DenoiserModel(testutil::tiny_denoiser_config(), 32), cfg, vp());
    EXPECT_EQ(s.student.param_kind(), ParamKind::x_pred);
    EXPECT_EQ(s.target.param_kind(), ParamKind::x_pred);
    EXPECT_EQ(s.fake.param_kind(), ParamKind::conjugate_v);
}

TEST(Checkpoints, DenoisersRoundTrip) {
    const DistillState s = tiny_state();
    const auto cks = distill_checkpoints(s);
    ASSERT_EQ(cks.size(), 3u);
    EXPECT_EQ(cks[0].first, "student");
    const DenoiserModel back = DenoiserModel::from_checkpoint(checkpoint_from_json(checkpoint_to_json(cks[0].second)));
    EXPECT_EQ(param_hash(back.parameters()), param_hash(s.student.parameters()));
    Rng rng(33);
    const Tensor x = rng.normal({2, 2});
    EXPECT_EQ(apply_cfg(back, x, 500, {0, 1}, 0.0), apply_cfg(s.student, x, 500, {0, 1}, 0.0));
    EXPECT_EQ(cks[0].second.meta.at("student_grid").get<std::vector<int>>(), (std::vector<int>{249, 499, 749, 999}));
}
