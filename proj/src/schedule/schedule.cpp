#include "dollar/schedule/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dollar/error.hpp"

namespace dollar {

std::string to_string(ScheduleKind kind) {
    return kind == ScheduleKind::vp_cosine ? "vp-ddpm" : "rectified-flow";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "vp-ddpm" || s == "vp_cosine") {
        return ScheduleKind::vp_cosine;
    }
    if (s == "rectified-flow") {
        return ScheduleKind::rectified_flow;
    }
    throw ContractViolation("unknown schedule kind '" + s + "' (expected vp-ddpm or rectified-flow)");
}

NoiseSchedule::NoiseSchedule(const ScheduleConfig& config) : config_(config) {
    require(config_.T >= 1, "schedule: T must be positive");
    const auto n = static_cast<std::size_t>(config_.T) + 1;
    alpha_bar_.assign(n, 1.0);
    a_.assign(n, 1.0);
    b_.assign(n, 0.0);
    const double T = config_.T;
    if (config_.kind == ScheduleKind::rectified_flow) {
        for (std::size_t t = 0; t < n; ++t) {
            a_[t] = 1.0 - static_cast<double>(t) / T;
            b_[t] = static_cast<double>(t) / T;
            alpha_bar_[t] = a_[t] * a_[t];
        }
        return;
    }
    require(config_.clip_floor > 0.0 && config_.clip_floor < 1.0, "schedule: clip_floor must lie in (0,1)");
    const double s = config_.s;
    auto f = [&](double t) {
        const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0.0);
    for (std::size_t t = 1; t < n; ++t) {
        const double closed = f(static_cast<double>(t)) / f0;
        const double prev_closed = f(static_cast<double>(t - 1)) / f0;
        const double step = std::clamp(closed / prev_closed, config_.clip_floor, 1.0);
        alpha_bar_[t] = alpha_bar_[t - 1] * step;
    }
    for (std::size_t t = 0; t < n; ++t) {
        a_[t] = std::sqrt(alpha_bar_[t]);
        b_[t] = std::sqrt(1.0 - alpha_bar_[t]);
    }
}

NoiseSchedule NoiseSchedule::vp_cosine(int T, double s, double clip_floor) {
    return NoiseSchedule(ScheduleConfig{ScheduleKind::vp_cosine, T, s, clip_floor});
}

NoiseSchedule NoiseSchedule::rectified_flow(int T) {
    return NoiseSchedule(ScheduleConfig{ScheduleKind::rectified_flow, T, 0.0, 1e-3});
}

void NoiseSchedule::check_t(int t) const {
    require(t >= 0 && t <= config_.T,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(config_.T) + "]");
}

double NoiseSchedule::alpha_bar(int t) const {
    check_t(t);
    return alpha_bar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha(int t) const {
    check_t(t);
    return t == 0 ? 1.0 : alpha_bar_[static_cast<std::size_t>(t)] / alpha_bar_[static_cast<std::size_t>(t) - 1];
}

double NoiseSchedule::a(int t) const {
    check_t(t);
    return a_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::b(int t) const {
    check_t(t);
    return b_[static_cast<std::size_t>(t)];
}

std::size_t TimeGrid::index_of(int t) const {
    auto it = std::find(steps.begin(), steps.end(), t);
    require(it != steps.end(), "timestep " + std::to_string(t) + " is not on the grid");
    return static_cast<std::size_t>(it - steps.begin());
}

bool TimeGrid::contains(int t) const { return std::find(steps.begin(), steps.end(), t) != steps.end(); }

TimeGrid make_grid(std::vector<int> steps, const NoiseSchedule& sched) {
    require(!steps.empty(), "time grid must be nonempty");
    for (std::size_t i = 0; i < steps.size(); ++i) {
        sched.check_t(steps[i]);
        require(i == 0 || steps[i] > steps[i - 1], "time grid must be strictly increasing");
    }
    return TimeGrid{std::move(steps)};
}

TimeGrid ddim_grid(const NoiseSchedule& sched, int N) {
    const int T = sched.T();
    require(N >= 1 && N <= T, "ddim_grid: N=" + std::to_string(N) + " must lie in [1, T=" + std::to_string(T) + "]");
    require(T % N == 0, "ddim_grid: N=" + std::to_string(N) + " does not divide T=" + std::to_string(T));
    const int stride = T / N;
    std::vector<int> steps;
    for (int k = 0; k < N; ++k) {
        steps.push_back(stride - 1 + k * stride);
    }
    return TimeGrid{std::move(steps)};
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require(x0.shape() == eps.shape(), "forward_diffuse: eps shape " + shape_str(eps.shape()) +
                                           " != x0 shape " + shape_str(x0.shape()));
    const double a = sched.a(t), b = sched.b(t);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * x0[i] + b * eps[i];
    }
    return out;
}

double conjugate_scale(double alpha_bar) { return 1.0 / (std::sqrt(alpha_bar) + std::sqrt(1.0 - alpha_bar)); }

double conjugate_gamma(double alpha_bar) { return std::sqrt(alpha_bar) * conjugate_scale(alpha_bar); }

ConjugatePoint conjugate_point(const Tensor& x_t, int t, const NoiseSchedule& sched) {
    require(sched.kind() == ScheduleKind::vp_cosine,
            "conjugate_point: unsupported for rectified-flow (the mapping is the identity there)");
    const double abar = sched.alpha_bar(t);
    const double k = conjugate_scale(abar);
    ConjugatePoint out{Tensor(x_t.shape()), conjugate_gamma(abar)};
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        out.y[i] = k * x_t[i];
    }
    return out;
}

PosteriorCoefficients posterior_coefficients(double alpha_bar_t, double alpha_bar_prev) {
    require(alpha_bar_t > 0.0 && alpha_bar_t <= alpha_bar_prev && alpha_bar_prev <= 1.0,
            "posterior_coefficients: need 0 < abar_t <= abar_prev <= 1");
    if (alpha_bar_t == alpha_bar_prev) {
        return {0.0, 1.0, 0.0};
    }
    const double alpha = alpha_bar_t / alpha_bar_prev;
    const double denom = 1.0 - alpha_bar_t;
    PosteriorCoefficients c;
    c.c_x0 = std::sqrt(alpha_bar_prev) * (1.0 - alpha) / denom;
    c.c_xt = std::sqrt(alpha) * (1.0 - alpha_bar_prev) / denom;
    c.sigma = std::sqrt((1.0 - alpha) * (1.0 - alpha_bar_prev) / denom);
    return c;
}

Posterior posterior_params(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const NoiseSchedule& sched) {
    require(sched.kind() == ScheduleKind::vp_cosine, "posterior_params: vp-ddpm schedule required");
    require(t_prev < t, "posterior_params: t_prev=" + std::to_string(t_prev) + " must be < t=" + std::to_string(t));
    require(x_t.shape() == x0_hat.shape(), "posterior_params: shape mismatch");
    const auto c = posterior_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev));
    Posterior p{Tensor(x_t.shape()), c.sigma};
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        p.mu[i] = c.c_x0 * x0_hat[i] + c.c_xt * x_t[i];
    }
    return p;
}

}  // namespace dollar
