#pragma once

#include <string>
#include <vector>

#include "dollar/netcore/tensor.hpp"

namespace dollar {

enum class ScheduleKind { vp_cosine, rectified_flow };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::vp_cosine;
    int T = 1000;
    double s = 0.008;
    /// Lower bound on the per-step alpha_t before the cumulative product.
    double clip_floor = 1e-3;
};

/// Discrete diffusion coefficients indexed by integer t in [0, T]. Index 0
/// is the clean end (alpha_bar = 1, a = 1, b = 0).
class NoiseSchedule {
public:
    explicit NoiseSchedule(const ScheduleConfig& config = {});

    static NoiseSchedule vp_cosine(int T = 1000, double s = 0.008, double clip_floor = 1e-3);
    static NoiseSchedule rectified_flow(int T = 1000);

    const ScheduleConfig& config() const noexcept { return config_; }
    ScheduleKind kind() const noexcept { return config_.kind; }
    int T() const noexcept { return config_.T; }

    double alpha_bar(int t) const;
    /// Per-step alpha_t = alpha_bar_t / alpha_bar_{t-1}; 1 at t = 0.
    double alpha(int t) const;
    double a(int t) const;
    double b(int t) const;

    /// Throws ContractViolation unless 0 <= t <= T.
    void check_t(int t) const;

private:
    ScheduleConfig config_;
    std::vector<double> alpha_bar_, a_, b_;
};

/// Strictly increasing timesteps within [0, T].
struct TimeGrid {
    std::vector<int> steps;

    std::size_t size() const noexcept { return steps.size(); }
    int operator[](std::size_t i) const { return steps.at(i); }
    int front() const { return steps.front(); }
    int back() const { return steps.back(); }
    /// Position of t in the grid; throws when absent.
    std::size_t index_of(int t) const;
    bool contains(int t) const;
};

/// Validates and wraps an explicit list of steps.
TimeGrid make_grid(std::vector<int> steps, const NoiseSchedule& sched);

/// N uniformly spaced steps with stride T/N and offset T/N - 1, so the last
/// step is T - 1 (N=50, T=1000 gives 19, 39, ..., 999).
TimeGrid ddim_grid(const NoiseSchedule& sched, int N);

/// x_t = a_t x0 + b_t eps
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

struct ConjugatePoint {
    Tensor y;
    double gamma = 0.0;
};

/// gamma = sqrt(abar) / (sqrt(abar) + sqrt(1 - abar))
double conjugate_gamma(double alpha_bar);
/// Scale of the map x_t -> y_t, 1 / (sqrt(abar) + sqrt(1 - abar)).
double conjugate_scale(double alpha_bar);
/// y_t = x_t / (sqrt(abar_t) + sqrt(1 - abar_t)); vp schedules only.
ConjugatePoint conjugate_point(const Tensor& x_t, int t, const NoiseSchedule& sched);

struct PosteriorCoefficients {
    double c_x0 = 0.0;
    double c_xt = 0.0;
    double sigma = 0.0;
};

/// Gaussian posterior q(x_prev | x_t, x0) between two noise levels:
/// mu = c_x0 x0 + c_xt x_t, std sigma. Equal levels give the identity step.
PosteriorCoefficients posterior_coefficients(double alpha_bar_t, double alpha_bar_prev);

struct Posterior {
    Tensor mu;
    double sigma = 0.0;
};

Posterior posterior_params(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const NoiseSchedule& sched);

}  // namespace dollar
