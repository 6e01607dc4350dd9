#pragma once

#include <vector>

#include "dollar/diffusion/denoiser.hpp"
#include "dollar/netcore/rng.hpp"
#include "dollar/schedule/schedule.hpp"

namespace dollar {

/// Clean-sample estimate implied by a conjugate-velocity prediction:
/// (x_t + sqrt(1 - abar) v) / (sqrt(abar) + sqrt(1 - abar)).
Tensor x_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched);
/// Row-wise version on the tape; one timestep per row.
Var x_from_v(const Var& x_t, const Var& v, const std::vector<int>& t, const NoiseSchedule& sched);

/// (x_t - sqrt(1 - abar) eps_pred) / sqrt(abar)
Tensor tweedie_x0(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched);

/// v(c) + w (v(c) - v(null))
Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w);
Var cfg_combine(const Var& cond, const Var& uncond, double w);

/// Guided raw prediction (the model's own output kind). w = 0 costs one
/// evaluation; otherwise the null class is evaluated as well.
Var apply_cfg(const Denoiser& model, const Var& x_t, const std::vector<int>& t, const std::vector<int>& c, double w);
Tensor apply_cfg(const Denoiser& model, const Tensor& x_t, int t, const std::vector<int>& c, double w);

/// Clean-sample estimate with optional guidance, converting v when needed.
Var predict_x0(const Denoiser& model, const Var& x_t, const std::vector<int>& t, const std::vector<int>& c,
               double w, const NoiseSchedule& sched);
Tensor predict_x0(const Denoiser& model, const Tensor& x_t, int t, const std::vector<int>& c, double w,
                  const NoiseSchedule& sched);

/// Score estimate -(x_t - sqrt(abar) x_hat) / (1 - abar).
Tensor score_from_x0(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& sched);

/// Coefficients of the reverse update
/// x_prev = c_x0 x0_hat + c_xt x_t + sigma eps, where
/// c_x0 = sqrt(abar_prev) - sqrt(1 - abar_prev - sigma^2) sqrt(abar_t) / sqrt(1 - abar_t),
/// c_xt = sqrt(1 - abar_prev - sigma^2) / sqrt(1 - abar_t).
struct StepCoefficients {
    double c_x0 = 0.0;
    double c_xt = 0.0;
    double sigma = 0.0;
};
StepCoefficients step_coefficients(double alpha_bar_t, double alpha_bar_prev, double sigma);

enum class NoiseMode {
    /// sigma = 0 (deterministic DDIM)
    ddim,
    /// sigma^2 = (1 - alpha) (1 - abar_prev) / (1 - abar_t) with alpha = abar_t / abar_prev
    ancestral,
};

/// One reverse step t -> t_prev. t_prev = 0 lands on x0_hat. A non-finite
/// prediction raises NumericalError.
Tensor denoise_step(const Denoiser& model, const Tensor& x_t, int t, int t_prev, const std::vector<int>& c, double w,
                    const NoiseSchedule& sched, NoiseMode noise, Rng& rng);

/// m consecutive grid steps from t_start down to t_end (both on the grid,
/// exactly m positions apart).
Tensor denoise_m(const Denoiser& model, const Tensor& x_start, int t_start, int t_end, const TimeGrid& grid, int m,
                 const std::vector<int>& c, double w, const NoiseSchedule& sched, NoiseMode noise, Rng& rng);

/// Draws x_T ~ N(0, I) at the top of the grid, steps down the grid, and
/// returns x0_hat predicted at the lowest grid step. The step into the lowest
/// grid step is always deterministic.
Tensor ddim_sample(const Denoiser& model, const std::vector<int>& c, double w, const TimeGrid& grid,
                   const NoiseSchedule& sched, Rng& rng, NoiseMode noise = NoiseMode::ddim);

/// Deterministic fine-grained integration from t_start down to t_end using
/// `substeps` DDIM steps on integer timesteps spaced as evenly as possible.
Tensor ddim_integrate(const Denoiser& model, const Tensor& x_start, int t_start, int t_end, int substeps,
                      const std::vector<int>& c, double w, const NoiseSchedule& sched);

/// Mean over elements of (v - (x0 - eps))^2 with x_t from forward_diffuse.
Var loss_conjugate_v(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                     const Tensor& eps, const NoiseSchedule& sched);
/// Mean over elements of (x_pred - x0)^2.
Var loss_x_pred(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                const Tensor& eps, const NoiseSchedule& sched);
/// Dispatches on the model's param_kind.
Var diffusion_loss(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                   const Tensor& eps, const NoiseSchedule& sched);
/// Reference standard-velocity objective, target a_t eps - b_t x0.
Var loss_standard_v(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                    const Tensor& eps, const NoiseSchedule& sched);
/// Clean estimate from a standard-velocity prediction: a_t x_t - b_t v.
Tensor x_from_standard_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched);

/// Diffuses row r of x0 to its own timestep t[r].
Tensor forward_diffuse_rows(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                            const NoiseSchedule& sched);

}  // namespace dollar
