#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dollar/distill/distill.hpp"

namespace dollar {

/// Differentiable latent reward, [n, D] -> [n, 1] or [n].
using LatentRewardFn = std::function<Var(const Var& z, const std::vector<int>& c)>;

/// The LRM as a reward with its own parameters read as constants.
LatentRewardFn lrm_reward(const LatentRewardModel& lrm);

/// -mean r(x_hat, c) on student samples drawn with the configured grad mode.
Var reward_finetune_loss(const DistillState& s, const LatentRewardFn& r, const std::vector<int>& c, Rng& rng);

/// ft_accum micro-batches of beta_ft * loss / ft_accum, then one generator
/// step. Returns the mean unscaled loss.
double reward_finetune_step(DistillState& s, const LatentRewardFn& r, const std::vector<int>& c, Rng& rng);
double lrm_finetune_step(DistillState& s, const LatentRewardModel& lrm, const std::vector<int>& c, Rng& rng);

/// One transition of the DDPO rollout.
struct DdpoTransition {
    int t_from = 0;
    int t_to = 0;
    double sigma = 0.0;
    bool in_window = false;
};

/// Student grid transitions down to 0. The window is the last n_trunc
/// transitions with sigma > 0; deterministic ones never carry a log-prob.
std::vector<DdpoTransition> ddpo_transitions(const TimeGrid& grid, int n_trunc, const NoiseSchedule& sched);
/// Destination timesteps of the window, ascending.
std::vector<int> ddpo_window(const TimeGrid& grid, int n_trunc, const NoiseSchedule& sched);

/// Per-row log N(x; mu, sigma^2 I) -> [n, 1]; x is a fixed sample.
Var gaussian_log_prob(const Tensor& x, const Var& mu, double sigma);

struct DdpoRollout {
    /// Final clean latent.
    Tensor x0;
    /// One [n, 1] log-prob per window transition, in rollout order.
    std::vector<Var> log_probs;
    std::vector<int> window;
};

/// Samples the student grid with posterior transitions (x_theta from the
/// student's clean prediction). Only window transitions record a graph.
DdpoRollout ddpo_rollout(const DistillState& s, const std::vector<int>& c, int n_trunc, Rng& rng);

/// -mean_i R_i sum_k log p_ik with R detached.
Var ddpo_loss(const DdpoRollout& r, const Tensor& rewards);

/// Rollout, pixel reward on the decoded sample, one generator step on
/// beta_ft * ddpo_loss. Returns the unscaled loss.
double ddpo_step(DistillState& s, const PixelReward& pixel, const LatentCodec& codec, const std::vector<int>& c,
                 int n_trunc, Rng& rng);

struct GeneratorEval {
    double reward_true = 0.0;
    /// LRM prediction on the same samples (0 when the LRM is unused).
    double reward_pred = 0.0;
    /// Sliced W2 between generated and data latents.
    double w2 = 0.0;
};

/// Fixed-seed evaluation batch with classes cycling over the real classes.
GeneratorEval evaluate_generator(const DistillState& s, const RewardBundle& bundle, const LatentCodec& codec,
                                 const LabeledData& data, std::size_t n, std::uint64_t seed);
double data_reward_mean(const PixelReward& pixel, const LatentCodec& codec, const LabeledData& data);

struct FinetuneCurvePoint {
    long iter = 0;
    double reward_pred = 0.0;
    double reward_true = 0.0;
    double w2 = 0.0;
};

struct FinetuneRun {
    RewardMode mode = RewardMode::none;
    std::vector<FinetuneCurvePoint> curve;
    double final_reward = 0.0;
    double final_w2 = 0.0;
    double seconds = 0.0;
    DistillResult result;
};

struct FinetuneConfig {
    long iters = 2000;
    long eval_every = 100;
    std::size_t eval_samples = 512;
    std::uint64_t seed = 0;
    std::uint64_t eval_seed = 1;
};

/// Runs the loop from a copy of `start` in the given mode and records the
/// curve (point 0 is the starting checkpoint). The final state and the
/// trained bundle are returned through the optional pointers.
FinetuneRun finetune_run(const DistillState& start, const RewardBundle& bundle, RewardMode mode,
                         const LatentCodec& codec, const LabeledData& data, const FinetuneConfig& config,
                         DistillState* final_state = nullptr, RewardBundle* final_bundle = nullptr);

struct FinetuneComparison {
    FinetuneRun lrm;
    FinetuneRun ddpo;
};

/// LRM and DDPO modes from the same start with matched budgets.
FinetuneComparison finetune_compare(const DistillState& start, const RewardBundle& bundle, const LatentCodec& codec,
                                    const LabeledData& data, const FinetuneConfig& config);

/// iter,reward_pred,reward_true,w2
std::string finetune_curve_csv(const FinetuneRun& run);

}  // namespace dollar
