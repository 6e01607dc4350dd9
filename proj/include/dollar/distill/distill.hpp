#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dollar/diffusion/diffusion.hpp"
#include "dollar/diffusion/training.hpp"
#include "dollar/latentspace/codec.hpp"
#include "dollar/netcore/optim.hpp"
#include "dollar/reward/lrm.hpp"

namespace dollar {

enum class Distance { mse, huber };
std::string to_string(Distance d);
Distance distance_from_string(const std::string& s);

enum class GradMode {
    /// Every evaluation detached.
    none,
    /// Only the final grid evaluation keeps parameter gradients.
    last_step,
    /// One uniformly chosen grid evaluation keeps parameter gradients.
    one_random_step,
};
std::string to_string(GradMode m);
GradMode grad_mode_from_string(const std::string& s);

/// Consistency reparameterization f(x, t) = c_skip(t) x + c_out(t) x0_hat(x, t)
/// with tau = (t - t_min) * time_scale:
///   c_skip = sigma_d^2 / (tau^2 + sigma_d^2), c_out = tau / sqrt(tau^2 + sigma_d^2).
/// At large t f is the clean-sample prediction itself.
struct ConsistencyHead {
    int t_min = 19;
    double sigma_d = 0.5;
    double time_scale = 10.0;
    Distance distance = Distance::huber;
    double huber_delta = 0.1;

    double c_skip(int t) const;
    double c_out(int t) const;
    double lambda(int) const { return 1.0; }
    /// Mean over elements of mse or huber(a - b).
    Var distance_loss(const Var& a, const Var& b) const;
};

/// f_theta(x, t, c) for a denoiser through the head (unguided).
Var consistency_fn(const Denoiser& net, const ConsistencyHead& head, const Var& x, const std::vector<int>& t,
                   const std::vector<int>& c, const NoiseSchedule& sched);

struct DistillConfig {
    double beta_vsd = 1.0;
    double beta_cd = 0.5;
    double beta_ft = 1.0;
    double w_cd = 7.5;
    double w_vsd = 3.5;
    int fake_ratio = 5;
    int m = 5;
    std::vector<int> student_grid{249, 499, 749, 999};
    int cd_steps = 50;
    /// theta^- <- rate theta^- + (1 - rate) theta after each generator step.
    double ema_rate = 0.0;
    ConsistencyHead head;
    GradMode grad_mode = GradMode::one_random_step;
    /// x_pred gives the heterogeneous parameterization.
    ParamKind student_kind = ParamKind::conjugate_v;
    std::size_t batch = 8;
    double lr_student = 1e-4;
    double lr_fake = 1e-4;
    /// VSD noise levels drawn uniformly from [lo * T, hi * T].
    double vsd_t_lo = 0.02;
    double vsd_t_hi = 0.98;
    /// Micro-batches per reward fine-tuning step.
    int ft_accum = 1;
    /// DDPO: stochastic transitions (counted from the clean end) with a log-prob.
    int ddpo_trunc = 2;
    /// Generate, score and distill under the null condition only, so the
    /// student targets the full mixture instead of one class at a time.
    bool unconditional = false;
};

/// The four networks of the distillation loop and their optimizers.
struct DistillState {
    std::shared_ptr<const Denoiser> teacher;
    DenoiserModel student;
    DenoiserModel fake;
    DenoiserModel target;
    AdamW student_opt;
    AdamW fake_opt;
    DistillConfig config;
    NoiseSchedule sched;
    TimeGrid student_grid;
    TimeGrid cd_grid;
    long iteration = 0;

    int num_real_classes() const { return teacher->num_classes() - 1; }
};

/// Student, fake and target start as copies of `init` (the teacher itself
/// in the regular setup); the head's t_min is the lowest CD grid step.
DistillState make_distill_state(std::shared_ptr<const Denoiser> teacher, const DenoiserModel& init,
                                const DistillConfig& config, const NoiseSchedule& sched);
DistillState make_distill_state(const DenoiserModel& teacher, const DistillConfig& config,
                                const NoiseSchedule& sched);

/// Few-step consistency sampling on the student grid: x_T ~ N(0, I), then
/// x0_hat = f_theta(x_t, t) and re-noising to the next lower grid step with
/// fresh noise. Parameters receive gradients only at the evaluation picked
/// by `mode`; later evaluations keep the input path.
Var student_sample(const DistillState& s, const std::vector<int>& c, Rng& rng, GradMode mode);
Tensor student_sample(const DistillState& s, const std::vector<int>& c, Rng& rng);

/// The CD loss for a given grid index n (t_n = cd_grid[n]) and noise.
Var cd_loss_at(const Denoiser& student, const Denoiser& target, const Denoiser& teacher, const ConsistencyHead& head,
               const Tensor& x0, const std::vector<int>& c, std::size_t n, int m, const TimeGrid& cd_grid,
               double w_cd, const Tensor& eps, const NoiseSchedule& sched);
/// Same with injected consistency functions on both sides.
using ConsistencyFn = std::function<Var(const Var& x, const std::vector<int>& t, const std::vector<int>& c)>;
Var cd_loss_with(const ConsistencyFn& f_student, const ConsistencyFn& f_target, const Denoiser& teacher,
                 const ConsistencyHead& head, const Tensor& x0, const std::vector<int>& c, std::size_t n, int m,
                 const TimeGrid& cd_grid, double w_cd, const Tensor& eps, const NoiseSchedule& sched);

/// Index n uniform on the grid; an overflowing n + m is redrawn uniformly
/// from the valid range.
std::size_t sample_cd_index(std::size_t grid_size, int m, Rng& rng);

/// Draws n and the noise, then cd_loss_at with the state's networks.
Var cd_loss(const DistillState& s, const Tensor& x0, const std::vector<int>& c, Rng& rng);

/// VSD surrogate for grad-carrying generator samples x_hat at per-row noise
/// levels t: sum_d 0.5 (x_hat - sg(x_hat + eta * ds))^2 averaged over rows,
/// ds = s_real - s_fake, eta = b_t^2 / (mean_d |ds| + 1e-8). Its gradient in
/// x_hat is -eta * ds.
Var vsd_surrogate(const Denoiser& teacher, const Denoiser& fake, const Var& x_hat, const std::vector<int>& c,
                  const std::vector<int>& t, const Tensor& eps, double w_vsd, const NoiseSchedule& sched);

/// Student sample with the configured grad mode, t ~ U[lo T, hi T], then the
/// surrogate. `x_hat_out` receives the detached samples.
Var vsd_loss(const DistillState& s, const std::vector<int>& c, Rng& rng, Tensor* x_hat_out = nullptr);

/// One optimizer step of the fake network's diffusion loss on detached
/// student samples. Returns the pre-step loss.
double fake_score_update(DistillState& s, const std::vector<int>& c, Rng& rng);

/// theta^- update from the live student.
void update_target(DistillState& s);

struct DistillLogRow {
    long iter = 0;
    double l_vsd = 0.0;
    double l_cd = 0.0;
    double l_ft = 0.0;
    double fake_loss = 0.0;
    double lrm_loss = 0.0;
    /// Mean true pixel reward of the generator batch (0 without a reward).
    double reward = 0.0;
};

struct DistillHooks {
    /// Called after every `every` iterations (and after the last).
    std::function<void(const DistillState&, long iter)> on_eval;
    long every = 0;
};

struct DistillResult {
    std::vector<DistillLogRow> log;
    /// One entry per executed branch: generator, vsd, cd, fake, lrm, finetune, ddpo.
    std::vector<std::string> trace;
    bool halted = false;
    std::string halt_reason;
    long iterations = 0;
    double seconds = 0.0;
};

/// Per iteration: generator step on beta_vsd L_VSD +
/// beta_cd L_CD, fake_ratio fake steps, one LRM step, one reward step
/// (lrm fine-tuning or DDPO, scaled by beta_ft). A non-finite loss restores
/// the last good parameters and halts. `reward` may be null.
DistillResult distill_loop(DistillState& s, const LabeledData& data, RewardBundle* reward, const LatentCodec& codec,
                           long iters, std::uint64_t seed, const DistillHooks& hooks = {});

/// Checkpoints for student, fake and target (kind "denoiser") plus state meta.
std::vector<std::pair<std::string, Checkpoint>> distill_checkpoints(const DistillState& s);

std::string distill_log_csv(const std::vector<DistillLogRow>& log);

}  // namespace dollar
