#include "dollar/reward/finetune.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dollar/error.hpp"
#include "dollar/metrics/metrics.hpp"

namespace dollar {

namespace {

std::vector<int> repeat(int t, std::size_t n) { return std::vector<int>(n, t); }

double mean_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) {
        s += v;
    }
    return t.empty() ? 0.0 : s / static_cast<double>(t.size());
}

void generator_step(DistillState& s, const char* who) {
    const auto st = s.student_opt.step(s.student.parameters());
    if (!st.ok) {
        throw NumericalError(std::string(who) + ": " + st.diagnostic);
    }
    update_target(s);
}

}  // namespace

LatentRewardFn lrm_reward(const LatentRewardModel& lrm) {
    return [&lrm](const Var& z, const std::vector<int>& c) {
        FreezeParamsGuard fp;
        return lrm.forward(z, c);
    };
}

Var reward_finetune_loss(const DistillState& s, const LatentRewardFn& r, const std::vector<int>& c, Rng& rng) {
    const Var x = student_sample(s, c, rng, s.config.grad_mode);
    return ops::neg(ops::mean(r(x, c)));
}

double reward_finetune_step(DistillState& s, const LatentRewardFn& r, const std::vector<int>& c, Rng& rng) {
    const int A = s.config.ft_accum;
    require(A >= 1, "reward_finetune_step: ft_accum must be >= 1");
    const auto params = s.student.parameters();
    zero_grads(params);
    double total = 0.0;
    for (int k = 0; k < A; ++k) {
        const Var loss = reward_finetune_loss(s, r, c, rng);
        const double v = loss.value()[0];
        if (!std::isfinite(v)) {
            throw NumericalError("reward_finetune_step: non-finite loss");
        }
        total += v;
        backward(ops::scale(loss, s.config.beta_ft / A));
    }
    generator_step(s, "reward_finetune_step");
    return total / A;
}

double lrm_finetune_step(DistillState& s, const LatentRewardModel& lrm, const std::vector<int>& c, Rng& rng) {
    return reward_finetune_step(s, lrm_reward(lrm), c, rng);
}

std::vector<DdpoTransition> ddpo_transitions(const TimeGrid& grid, int n_trunc, const NoiseSchedule& sched) {
    require(n_trunc >= 0 && static_cast<std::size_t>(n_trunc) <= grid.size(),
            "ddpo: N_trunc must be within the grid length");
    std::vector<DdpoTransition> out;
    for (std::size_t i = grid.size(); i-- > 0;) {
        const int to = i > 0 ? grid[i - 1] : 0;
        out.push_back({grid[i], to, posterior_coefficients(sched.alpha_bar(grid[i]), sched.alpha_bar(to)).sigma});
    }
    int left = n_trunc;
    for (auto it = out.rbegin(); it != out.rend() && left > 0; ++it) {
        if (it->sigma > 0.0) {
            it->in_window = true;
            --left;
        }
    }
    return out;
}

std::vector<int> ddpo_window(const TimeGrid& grid, int n_trunc, const NoiseSchedule& sched) {
    std::vector<int> w;
    for (const auto& tr : ddpo_transitions(grid, n_trunc, sched)) {
        if (tr.in_window) {
            w.insert(w.begin(), tr.t_to);
        }
    }
    return w;
}

Var gaussian_log_prob(const Tensor& x, const Var& mu, double sigma) {
    require(x.shape() == mu.shape(), "gaussian_log_prob: shape mismatch");
    require(sigma > 0.0, "gaussian_log_prob: sigma must be positive");
    const double D = static_cast<double>(x.size() / x.rows());
    const Var sq = ops::row_sum(ops::square(mu - Var::constant(x)));
    return ops::add_scalar(ops::scale(sq, -0.5 / (sigma * sigma)),
                           -0.5 * D * std::log(2.0 * std::numbers::pi * sigma * sigma));
}

DdpoRollout ddpo_rollout(const DistillState& s, const std::vector<int>& c, int n_trunc, Rng& rng) {
    const std::size_t n = c.size(), D = s.student.latent_dim();
    DdpoRollout r;
    Tensor x = rng.normal({n, D});
    for (const auto& tr : ddpo_transitions(s.student_grid, n_trunc, s.sched)) {
        const auto pc = posterior_coefficients(s.sched.alpha_bar(tr.t_from), s.sched.alpha_bar(tr.t_to));
        Var mu;
        {
            std::unique_ptr<NoGradGuard> ng;
            if (!tr.in_window) {
                ng = std::make_unique<NoGradGuard>();
            }
            const Var xt = Var::constant(x);
            const Var x0 = predict_x0(s.student, xt, repeat(tr.t_from, n), c, 0.0, s.sched);
            mu = ops::scale(x0, pc.c_x0) + ops::scale(xt, pc.c_xt);
        }
        Tensor next = mu.value();
        if (tr.sigma > 0.0) {
            const Tensor eps = rng.normal({n, D});
            for (std::size_t i = 0; i < next.size(); ++i) {
                next[i] += tr.sigma * eps[i];
            }
        }
        // Sampled states are constants of the estimator.
        next = Var::constant(std::move(next)).detach().value();
        if (tr.in_window) {
            r.log_probs.push_back(gaussian_log_prob(next, mu, tr.sigma));
            r.window.insert(r.window.begin(), tr.t_to);
        }
        x = std::move(next);
    }
    r.x0 = std::move(x);
    return r;
}

Var ddpo_loss(const DdpoRollout& r, const Tensor& rewards) {
    require(!r.log_probs.empty(), "ddpo_loss: empty window");
    const std::size_t n = r.x0.rows();
    require(rewards.size() == n, "ddpo_loss: one reward per trajectory");
    Var sum_lp = r.log_probs.front();
    for (std::size_t k = 1; k < r.log_probs.size(); ++k) {
        sum_lp = sum_lp + r.log_probs[k];
    }
    return ops::neg(ops::mean(ops::mul_const(sum_lp, rewards.reshaped({n, 1}))));
}

double ddpo_step(DistillState& s, const PixelReward& pixel, const LatentCodec& codec, const std::vector<int>& c,
                 int n_trunc, Rng& rng) {
    const auto params = s.student.parameters();
    zero_grads(params);
    const DdpoRollout r = ddpo_rollout(s, c, n_trunc, rng);
    const Tensor rewards = pixel.evaluate_batch(codec.decode(r.x0), c);
    const Var loss = ddpo_loss(r, rewards);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) {
        throw NumericalError("ddpo_step: non-finite loss");
    }
    backward(ops::scale(loss, s.config.beta_ft));
    generator_step(s, "ddpo_step");
    return v;
}

GeneratorEval evaluate_generator(const DistillState& s, const RewardBundle& bundle, const LatentCodec& codec,
                                 const LabeledData& data, std::size_t n, std::uint64_t seed) {
    std::vector<int> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        c[i] = static_cast<int>(i % static_cast<std::size_t>(s.num_real_classes()));
    }
    Rng rng(seed);
    const Tensor x = student_sample(s, c, rng);
    GeneratorEval e;
    if (bundle.pixel.fn) {
        e.reward_true = mean_of(bundle.pixel.evaluate_batch(codec.decode(x), c));
    }
    if (bundle.mode == RewardMode::lrm) {
        e.reward_pred = mean_of(bundle.lrm.predict(x, c));
    }
    e.w2 = wasserstein2(x, data.x, 128, seed);
    return e;
}

double data_reward_mean(const PixelReward& pixel, const LatentCodec& codec, const LabeledData& data) {
    return mean_of(pixel.evaluate_batch(codec.decode(data.x), data.c));
}

FinetuneRun finetune_run(const DistillState& start, const RewardBundle& bundle, RewardMode mode,
                         const LatentCodec& codec, const LabeledData& data, const FinetuneConfig& config,
                         DistillState* final_state, RewardBundle* final_bundle) {
    DistillState s = start;
    RewardBundle b = bundle;
    b.mode = mode;
    FinetuneRun run;
    run.mode = mode;
    auto record = [&](const DistillState& st, long iter) {
        const GeneratorEval e = evaluate_generator(st, b, codec, data, config.eval_samples, config.eval_seed);
        run.curve.push_back({iter, e.reward_pred, e.reward_true, e.w2});
    };
    record(s, 0);
    DistillHooks hooks;
    hooks.every = config.eval_every;
    hooks.on_eval = [&](const DistillState& st, long) { record(st, static_cast<long>(st.iteration - start.iteration)); };
    const auto t0 = std::chrono::steady_clock::now();
    run.result = distill_loop(s, data, &b, codec, config.iters, config.seed, hooks);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.final_reward = run.curve.back().reward_true;
    run.final_w2 = run.curve.back().w2;
    if (final_state != nullptr) {
        *final_state = std::move(s);
    }
    if (final_bundle != nullptr) {
        *final_bundle = std::move(b);
    }
    return run;
}

FinetuneComparison finetune_compare(const DistillState& start, const RewardBundle& bundle, const LatentCodec& codec,
                                    const LabeledData& data, const FinetuneConfig& config) {
    return {finetune_run(start, bundle, RewardMode::lrm, codec, data, config),
            finetune_run(start, bundle, RewardMode::ddpo, codec, data, config)};
}

std::string finetune_curve_csv(const FinetuneRun& run) {
    std::ostringstream os;
    os.precision(10);
    os << "iter,reward_pred,reward_true,w2\n";
    for (const auto& p : run.curve) {
        os << p.iter << ',' << p.reward_pred << ',' << p.reward_true << ',' << p.w2 << '\n';
    }
    return os.str();
}

}  // namespace dollar
