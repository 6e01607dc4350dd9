#include <gtest/gtest.h>

#include <cmath>

#include "dollar/diffusion/diffusion.hpp"
#include "dollar/diffusion/oracles.hpp"
#include "dollar/diffusion/training.hpp"
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

/// Returns a fixed tensor regardless of input; per-class values optional.
class Injected : public Denoiser {
public:
    Injected(ParamKind kind, std::size_t dim, int classes, std::function<Tensor(const Tensor&, int, int)> f)
        : kind_(kind), dim_(dim), classes_(classes), f_(std::move(f)) {}
    ParamKind param_kind() const override { return kind_; }
    int num_classes() const override { return classes_; }
    std::size_t latent_dim() const override { return dim_; }
    Var forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const override {
        Tensor out(x_t.shape());
        for (std::size_t r = 0; r < x_t.rows(); ++r) {
            const Tensor row = f_(x_t.value().row(r), t[r], c[r]);
            std::copy_n(row.data(), dim_, out.data() + r * dim_);
        }
        return Var::constant(out);
    }

private:
    ParamKind kind_;
    std::size_t dim_;
    int classes_;
    std::function<Tensor(const Tensor&, int, int)> f_;
};

/// Exact std of the deterministic 50-step reverse process on N(0,1) data
/// with the exact posterior-mean denoiser, by variance recursion.
double ddim_gaussian_terminal_std(const TimeGrid& grid, NoiseMode mode) {
    double var = 1.0;
    for (std::size_t i = grid.size() - 1; i > 0; --i) {
        const double at = vp().alpha_bar(grid[i]), ap = vp().alpha_bar(grid[i - 1]);
        double sigma = 0.0;
        if (mode == NoiseMode::ancestral && i - 1 > 0) {
            sigma = std::sqrt((1.0 - at / ap) * (1.0 - ap) / (1.0 - at));
        }
        const double dir = std::sqrt(1.0 - ap - sigma * sigma);
        const double gain = (std::sqrt(ap) - dir * std::sqrt(at) / std::sqrt(1.0 - at)) * std::sqrt(at) +
                            dir / std::sqrt(1.0 - at);
        var = gain * gain * var + sigma * sigma;
    }
    return std::sqrt(var * vp().alpha_bar(grid[0]));
}

DenoiserModel train_gaussian_model(ParamKind kind, std::uint64_t seed) {
    DenoiserConfig cfg;
    cfg.latent_dim = 2;
    cfg.num_classes = 2;
    cfg.hidden = 64;
    cfg.depth = 2;
    cfg.temb_dim = 16;
    cfg.class_dim = 4;
    cfg.kind = kind;
    DenoiserModel model(cfg, seed);
    Rng rng(seed + 100);
    LabeledData data{rng.normal({65536, 2}), std::vector<int>(65536, 0)};
    TeacherTrainConfig tc;
    tc.steps = 5000;
    tc.batch = 512;
    tc.lr = 2e-3;
    tc.seed = seed;
    train_denoiser(model, data, vp(), tc);
    return model;
}

}  // namespace

TEST(ConjugateV, PerfectModelHasZeroLoss) {
    Rng rng(1);
    const Tensor x0 = rng.normal({16, 2}), eps = rng.normal({16, 2});
    std::vector<int> t(16);
    for (auto& ti : t) {
        ti = static_cast<int>(rng.uniform_int(1, 1000));
    }
    // The injected model sees x_t and recovers (x0 - eps) for its row.
    const Tensor xt = forward_diffuse_rows(x0, t, eps, vp());
    Injected perfect(ParamKind::conjugate_v, 2, 2, [&](const Tensor& x, int, int) {
        for (std::size_t r = 0; r < 16; ++r) {
            if (x[0] == xt.at(r, 0) && x[1] == xt.at(r, 1)) {
                return Tensor::matrix(1, 2, {x0.at(r, 0) - eps.at(r, 0), x0.at(r, 1) - eps.at(r, 1)});
            }
        }
        return Tensor({1, 2}, NAN);
    });
    EXPECT_EQ(loss_conjugate_v(perfect, x0, std::vector<int>(16, 0), t, eps, vp()).value()[0], 0.0);
}

TEST(ConjugateV, ZeroModelOnZeroDataHasUnitLoss) {
    Rng rng(2);
    const std::size_t n = 20000;
    Injected zero(ParamKind::conjugate_v, 2, 2, [](const Tensor&, int, int) { return Tensor({1, 2}); });
    std::vector<int> t(n, 500);
    const double l = loss_conjugate_v(zero, Tensor({n, 2}), std::vector<int>(n, 0), t, rng.normal({n, 2}), vp())
                         .value()[0];
    // E[eps^2] = 1; the sample mean has std sqrt(2 / (2n)).
    EXPECT_NEAR(l, 1.0, 4.0 * std::sqrt(2.0 / (2.0 * n)));
}

TEST(ConjugateV, WrongParamKindOrShapeIsContractViolation) {
    DenoiserConfig cfg = testutil::tiny_denoiser_config();
    cfg.kind = ParamKind::x_pred;
    DenoiserModel xm(cfg, 1);
    EXPECT_THROW(loss_conjugate_v(xm, Tensor({2, 2}), {0, 0}, {1, 1}, Tensor({2, 2}), vp()), ContractViolation);
    DenoiserModel vm(testutil::tiny_denoiser_config(), 1);
    EXPECT_THROW(loss_conjugate_v(vm, Tensor({2, 2}), {0, 0}, {1, 1}, Tensor({2, 3}), vp()), ContractViolation);
}

TEST(ConjugateV, LossGradientMatchesFiniteDifferences) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 3);
    Rng rng(4);
    const Tensor x0 = rng.normal({5, 2}), eps = rng.normal({5, 2});
    const std::vector<int> t{10, 250, 500, 750, 999}, c{0, 1, 2, 0, 1};
    const auto r = gradcheck(model.parameters(), [&] { return loss_conjugate_v(model, x0, c, t, eps, vp()); });
    EXPECT_LT(r.rel_error, 1e-4);
}

TEST(ConjugateV, TrainedMlpMatchesGaussianConditionalExpectation) {
    const DenoiserModel model = train_gaussian_model(ParamKind::conjugate_v, 11);
    Rng rng(12);
    double total = 0.0;
    const std::vector<int> ts{20, 100, 250, 500, 750, 900, 999};
    for (int t : ts) {
        const Tensor xt = rng.normal({512, 2});
        Tensor expect = xt;
        const double k = std::sqrt(vp().alpha_bar(t)) - std::sqrt(1.0 - vp().alpha_bar(t));
        for (auto& v : expect.values()) {
            v *= k;
        }
        total += testutil::mean_l2(apply_cfg(model, xt, t, std::vector<int>(512, 0), 0.0), expect);
    }
    EXPECT_LT(total / static_cast<double>(ts.size()), 0.05);
}

TEST(XFromV, RecoversCleanSampleExactly) {
    Rng rng(5);
    for (int t : {1, 19, 250, 500, 999, 1000}) {
        const Tensor x0 = rng.normal({4, 3}), eps = rng.normal({4, 3});
        Tensor v(x0.shape());
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = x0[i] - eps[i];
        }
        const Tensor xh = x_from_v(forward_diffuse(x0, t, eps, vp()), v, t, vp());
        EXPECT_LE(max_abs_diff(xh, x0), 1e-12) << t;
    }
}

TEST(XFromV, CleanEndReturnsInput) {
    Rng rng(6);
    const Tensor x = rng.normal({3, 2}), v = rng.normal({3, 2});
    EXPECT_EQ(x_from_v(x, v, 0, vp()), x);
}

TEST(XFromV, MatchesConjugatePointFormula) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int t = static_cast<int>(rng.uniform_int(0, 1000));
        const Tensor x = rng.normal({2, 2}), v = rng.normal({2, 2});
        const auto cp = conjugate_point(x, t, vp());
        const Tensor xh = x_from_v(x, v, t, vp());
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_NEAR(xh[i], cp.y[i] + (1.0 - cp.gamma) * v[i], 1e-12);
        }
    }
}

TEST(XFromV, TapeVersionMatchesTensorVersion) {
    Rng rng(8);
    const Tensor x = rng.normal({3, 2}), v = rng.normal({3, 2});
    const Var out = x_from_v(Var::constant(x), Var::constant(v), {400, 400, 400}, vp());
    EXPECT_LE(max_abs_diff(out.value(), x_from_v(x, v, 400, vp())), 1e-15);
}

TEST(Cfg, ZeroWeightIsConditional) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 9);
    Rng rng(9);
    const Tensor x = rng.normal({4, 2});
    const std::vector<int> c{0, 1, 0, 1};
    NoGradGuard ng;
    const Tensor cond = model.forward(Var::constant(x), {300, 300, 300, 300}, c).value();
    EXPECT_EQ(apply_cfg(model, x, 300, c, 0.0), cond);
}

TEST(Cfg, EqualPredictionsIgnoreWeight) {
    Injected same(ParamKind::conjugate_v, 1, 2, [](const Tensor& x, int, int) { return x; });
    const Tensor x = Tensor::matrix(2, 1, {0.3, -0.7});
    EXPECT_EQ(apply_cfg(same, x, 100, {0, 0}, 4.0), x);
}

TEST(Cfg, ScalarProbeAtSevenPointFive) {
    Injected probe(ParamKind::conjugate_v, 1, 2,
                   [](const Tensor&, int, int c) { return Tensor({1, 1}, c == 0 ? 1.0 : 0.0); });
    EXPECT_DOUBLE_EQ(apply_cfg(probe, Tensor({1, 1}), 100, {0}, 7.5)[0], 8.5);
}

TEST(Cfg, AffineInWeight) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 10);
    Rng rng(10);
    const Tensor x = rng.normal({4, 2});
    const std::vector<int> c{0, 1, 0, 1};
    NoGradGuard ng;
    const std::vector<int> t(4, 600);
    const Tensor vc = model.forward(Var::constant(x), t, c).value();
    const Tensor vn = model.forward(Var::constant(x), t, std::vector<int>(4, model.null_class())).value();
    for (double w : {0.5, 3.5, 7.5}) {
        const Tensor g = apply_cfg(model, x, 600, c, w);
        const Tensor g0 = apply_cfg(model, x, 600, c, 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            EXPECT_NEAR(g[i] - g0[i], w * (vc[i] - vn[i]), 1e-12);
        }
    }
}

TEST(Cfg, NegativeWeightRejected) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 1);
    EXPECT_THROW(apply_cfg(model, Tensor({1, 2}), 10, {0}, -1.0), ContractViolation);
}

TEST(DenoiseStep, DeterministicModeIsBitIdentical) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 12);
    Rng rng(12);
    const Tensor x = rng.normal({6, 2});
    const std::vector<int> c(6, 1);
    Rng r1(5), r2(77);
    const Tensor a = denoise_step(model, x, 499, 479, c, 2.0, vp(), NoiseMode::ddim, r1);
    const Tensor b = denoise_step(model, x, 499, 479, c, 2.0, vp(), NoiseMode::ddim, r2);
    EXPECT_EQ(a, b);
    // It is the deterministic mean of the update.
    const Tensor x0 = predict_x0(model, x, 499, c, 2.0, vp());
    const auto k = step_coefficients(vp().alpha_bar(499), vp().alpha_bar(479), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_NEAR(a[i], k.c_x0 * x0[i] + k.c_xt * x[i], 1e-14);
    }
}

TEST(DenoiseStep, AncestralMeanEqualsPosteriorMean) {
    // With the posterior sigma the update's mean is the Gaussian posterior mean.
    Rng rng(13);
    const Tensor x0 = rng.normal({1, 3}), xt = rng.normal({1, 3});
    for (auto [t, tp] : {std::pair{999, 979}, std::pair{500, 480}, std::pair{39, 19}}) {
        const auto post = posterior_params(xt, x0, t, tp, vp());
        const auto k = step_coefficients(vp().alpha_bar(t), vp().alpha_bar(tp), post.sigma);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_NEAR(k.c_x0 * x0[i] + k.c_xt * xt[i], post.mu[i], 1e-12);
        }
    }
}

TEST(DenoiseStep, MatchesTweedieTermOnLongStep) {
    Rng rng(14);
    const Tensor xt = rng.normal({4, 2}), eps_hat = rng.normal({4, 2});
    const Tensor tweedie = tweedie_x0(xt, eps_hat, 999, vp());
    Tensor v(xt.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = tweedie[i] - eps_hat[i];
    }
    EXPECT_LE(max_abs_diff(x_from_v(xt, v, 999, vp()), tweedie), 1e-10);
    Injected model(ParamKind::conjugate_v, 2, 2, [&](const Tensor& x, int, int) {
        for (std::size_t r = 0; r < 4; ++r) {
            if (x[0] == xt.at(r, 0)) {
                return v.row(r);
            }
        }
        return Tensor({1, 2}, NAN);
    });
    Rng unused(0);
    const Tensor out = denoise_step(model, xt, 999, 19, std::vector<int>(4, 0), 0.0, vp(), NoiseMode::ddim, unused);
    const auto k = step_coefficients(vp().alpha_bar(999), vp().alpha_bar(19), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_NEAR(out[i], k.c_x0 * tweedie[i] + k.c_xt * xt[i], 1e-10);
    }
}

TEST(DenoiseStep, LandingOnCleanEndReturnsPrediction) {
    const auto oracle = MixtureOracle::gaussian(2);
    const Tensor x = Tensor::matrix(1, 2, {0.5, -1.0});
    Rng rng(1);
    const Tensor out = denoise_step(oracle, x, 19, 0, {0}, 0.0, vp(), NoiseMode::ancestral, rng);
    EXPECT_LE(max_abs_diff(out, predict_x0(oracle, x, 19, {0}, 0.0, vp())), 1e-15);
}

TEST(DenoiseStep, NonFinitePredictionRaisesNumericalError) {
    Injected bad(ParamKind::conjugate_v, 1, 2, [](const Tensor&, int, int) { return Tensor({1, 1}, NAN); });
    Rng rng(1);
    EXPECT_THROW(denoise_step(bad, Tensor({1, 1}), 100, 80, {0}, 0.0, vp(), NoiseMode::ddim, rng), NumericalError);
}

TEST(DenoiseStep, OrderViolationIsContractViolation) {
    const auto oracle = MixtureOracle::gaussian(1);
    Rng rng(1);
    EXPECT_THROW(denoise_step(oracle, Tensor({1, 1}), 100, 100, {0}, 0.0, vp(), NoiseMode::ddim, rng),
                 ContractViolation);
}

TEST(DenoiseStep, GaussianOracleFiftyStepsMatchesAnalyticReverseProcess) {
    // The exact posterior-mean denoiser on N(0,1) data. The analytic value
    // of the terminal std is obtained from the linear variance recursion;
    // it sits below 1 because each coarse step contracts the variance.
    const auto oracle = MixtureOracle::gaussian(1);
    const auto grid = ddim_grid(vp(), 50);
    for (NoiseMode mode : {NoiseMode::ddim, NoiseMode::ancestral}) {
        Rng rng(15);
        const Tensor xs = ddim_sample(oracle, std::vector<int>(10000, 0), 0.0, grid, vp(), rng, mode);
        const double expected_std = ddim_gaussian_terminal_std(grid, mode);
        EXPECT_LT(std::abs(testutil::mean(xs.to_vector())), 0.02);
        EXPECT_NEAR(testutil::stddev(xs.to_vector()), expected_std, 0.02);
        EXPECT_LT(expected_std, 0.98);
    }
}

TEST(DenoiseM, SingleStepEqualsDenoiseStep) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 16);
    const auto grid = ddim_grid(vp(), 50);
    Rng rng(16);
    const Tensor x = rng.normal({3, 2});
    Rng r1(3), r2(3);
    const std::vector<int> c{0, 1, 2};
    EXPECT_EQ(denoise_m(model, x, 519, 499, grid, 1, c, 1.5, vp(), NoiseMode::ancestral, r1),
              denoise_step(model, x, 519, 499, c, 1.5, vp(), NoiseMode::ancestral, r2));
}

TEST(DenoiseM, TwoStepsIsComposition) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 17);
    const auto grid = ddim_grid(vp(), 50);
    Rng rng(17);
    const Tensor x = rng.normal({3, 2});
    const std::vector<int> c{0, 1, 2};
    Rng r1(4), r2(4);
    const Tensor composed = denoise_step(model, denoise_step(model, x, 539, 519, c, 0.0, vp(), NoiseMode::ancestral, r2),
                                         519, 499, c, 0.0, vp(), NoiseMode::ancestral, r2);
    EXPECT_EQ(denoise_m(model, x, 539, 499, grid, 2, c, 0.0, vp(), NoiseMode::ancestral, r1), composed);
}

TEST(DenoiseM, SpacingMismatchIsContractViolation) {
    const auto oracle = MixtureOracle::gaussian(1);
    const auto grid = ddim_grid(vp(), 50);
    Rng rng(1);
    EXPECT_THROW(denoise_m(oracle, Tensor({1, 1}), 539, 499, grid, 3, {0}, 0.0, vp(), NoiseMode::ddim, rng),
                 ContractViolation);
    EXPECT_THROW(denoise_m(oracle, Tensor({1, 1}), 540, 500, grid, 2, {0}, 0.0, vp(), NoiseMode::ddim, rng),
                 ContractViolation);
}

TEST(DenoiseM, FiveStepsCloserToFineOdeThanOneStepOnMixtureOracle) {
    Tensor means({8, 2});
    for (std::size_t k = 0; k < 8; ++k) {
        means.at(k, 0) = 4.0 / 2.83 * std::cos(2.0 * M_PI * k / 8.0);
        means.at(k, 1) = 4.0 / 2.83 * std::sin(2.0 * M_PI * k / 8.0);
    }
    MixtureOracle oracle(means, 0.1 / 2.83, std::vector<double>(8, 1.0), vp());
    const auto grid = ddim_grid(vp(), 50);
    Rng rng(18);
    std::vector<int> c(256);
    for (auto& k : c) {
        k = static_cast<int>(rng.uniform_int(0, 8));
    }
    double d1 = 0.0, d5 = 0.0;
    for (std::size_t n = 5; n + 5 < grid.size(); n += 9) {
        const int ts = grid[n + 5], te = grid[n];
        const Tensor x = forward_diffuse(
            [&] {
                Tensor x0({256, 2});
                for (std::size_t r = 0; r < 256; ++r) {
                    const std::size_t k = static_cast<std::size_t>(c[r] % 8);
                    x0.at(r, 0) = means.at(k, 0) + 0.1 / 2.83 * rng.normal();
                    x0.at(r, 1) = means.at(k, 1) + 0.1 / 2.83 * rng.normal();
                }
                return x0;
            }(),
            ts, rng.normal({256, 2}), vp());
        const Tensor fine = ddim_integrate(oracle, x, ts, te, 100, c, 0.0, vp());
        Rng unused(0);
        d5 += testutil::mean_l2(denoise_m(oracle, x, ts, te, grid, 5, c, 0.0, vp(), NoiseMode::ddim, unused), fine);
        d1 += testutil::mean_l2(ddim_integrate(oracle, x, ts, te, 1, c, 0.0, vp()), fine);
    }
    EXPECT_LT(d5, d1);
}

TEST(DdimSample, SingleStepUntrainedModelIsFinite) {
    DenoiserModel model(DenoiserConfig{}, 19);
    Rng rng(19);
    const Tensor xs = ddim_sample(model, std::vector<int>(32, 3), 3.5, make_grid({999}, vp()), vp(), rng);
    EXPECT_EQ(xs.shape(), (Shape{32, 2}));
    EXPECT_TRUE(xs.all_finite());
}

TEST(DdimSample, SameSeedSameSamples) {
    DenoiserModel model(testutil::tiny_denoiser_config(), 20);
    const auto grid = ddim_grid(vp(), 4);
    Rng a(5), b(5);
    EXPECT_EQ(ddim_sample(model, {0, 1}, 1.0, grid, vp(), a, NoiseMode::ancestral),
              ddim_sample(model, {0, 1}, 1.0, grid, vp(), b, NoiseMode::ancestral));
}

TEST(Tweedie, ExactNoiseRecoversData) {
    Rng rng(21);
    const Tensor x0 = rng.normal({4, 2}), eps = rng.normal({4, 2});
    for (int t : {1, 300, 999}) {
        EXPECT_LE(max_abs_diff(tweedie_x0(forward_diffuse(x0, t, eps, vp()), eps, t, vp()), x0), 1e-9);
    }
}

TEST(Tweedie, GaussianOptimumIsScaledInput) {
    Rng rng(22);
    const Tensor xt = rng.normal({4, 2});
    for (int t : {50, 500, 950}) {
        Tensor eps_opt = xt;
        for (auto& v : eps_opt.values()) {
            v *= std::sqrt(1.0 - vp().alpha_bar(t));
        }
        const Tensor x0 = tweedie_x0(xt, eps_opt, t, vp());
        for (std::size_t i = 0; i < xt.size(); ++i) {
            EXPECT_NEAR(x0[i], std::sqrt(vp().alpha_bar(t)) * xt[i], 1e-12);
        }
        // The oracle denoiser agrees.
        const auto oracle = MixtureOracle::gaussian(2);
        EXPECT_LE(max_abs_diff(predict_x0(oracle, xt, t, {0, 0, 0, 0}, 0.0, vp()), x0), 1e-12);
    }
}

TEST(Tweedie, CleanEndReturnsInput) {
    const Tensor x = Tensor::matrix(1, 2, {1.0, 2.0});
    EXPECT_EQ(tweedie_x0(x, Tensor({1, 2}, 5.0), 0, vp()), x);
}

TEST(Parameterization, ConjugateVAndXPredAgreeOnGaussianData) {
    const DenoiserModel v_model = train_gaussian_model(ParamKind::conjugate_v, 31);
    const DenoiserModel x_model = train_gaussian_model(ParamKind::x_pred, 31);
    Rng rng(32);
    double total = 0.0;
    const std::vector<int> ts{20, 250, 500, 750, 999};
    for (int t : ts) {
        const Tensor xt = rng.normal({512, 2});
        const std::vector<int> c(512, 0);
        total += testutil::mean_l2(predict_x0(v_model, xt, t, c, 0.0, vp()), predict_x0(x_model, xt, t, c, 0.0, vp()));
    }
    EXPECT_LT(total / static_cast<double>(ts.size()), 0.05);
}

TEST(Parameterization, StandardVelocityReferenceAgreesAtOptimum) {
    DenoiserConfig cfg;
    cfg.latent_dim = 2;
    cfg.num_classes = 2;
    cfg.hidden = 64;
    cfg.depth = 2;
    DenoiserModel model(cfg, 41);
    Rng rng(42);
    const Tensor data = rng.normal({8192, 2});
    AdamW opt({.lr = 2e-3});
    for (int step = 0; step < 4000; ++step) {
        Tensor x0({128, 2});
        std::vector<int> t(128);
        for (std::size_t r = 0; r < 128; ++r) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, 8191));
            x0.at(r, 0) = data.at(i, 0);
            x0.at(r, 1) = data.at(i, 1);
            t[r] = static_cast<int>(rng.uniform_int(1, 1000));
        }
        zero_grads(model.parameters());
        backward(loss_standard_v(model, x0, std::vector<int>(128, 0), t, rng.normal({128, 2}), vp()));
        ASSERT_TRUE(opt.step(model.parameters()).ok);
    }
    double total = 0.0;
    for (int t : {20, 250, 500, 750}) {
        const Tensor xt = rng.normal({512, 2});
        Tensor expect = xt;
        for (auto& v : expect.values()) {
            v *= std::sqrt(vp().alpha_bar(t));
        }
        const Tensor v = apply_cfg(model, xt, t, std::vector<int>(512, 0), 0.0);
        total += testutil::mean_l2(x_from_standard_v(xt, v, t, vp()), expect);
    }
    EXPECT_LT(total / 4.0, 0.05);
}
