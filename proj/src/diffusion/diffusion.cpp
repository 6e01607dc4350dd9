#include "dollar/diffusion/diffusion.hpp"

#include <cmath>

#include "dollar/error.hpp"

namespace dollar {

namespace {

std::vector<int> repeat(int t, std::size_t n) { return std::vector<int>(n, t); }

void check_classes(const std::vector<int>& c, std::size_t rows, int num_classes) {
    require(c.size() == rows, "class vector length " + std::to_string(c.size()) + " != batch " +
                                  std::to_string(rows));
    for (int k : c) {
        require(k >= 0 && k < num_classes, "class index " + std::to_string(k) + " out of range");
    }
}

}  // namespace

Tensor x_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched) {
    require(x_t.shape() == v.shape(), "x_from_v: shape mismatch");
    require(sched.kind() == ScheduleKind::vp_cosine, "x_from_v: vp-ddpm schedule required");
    const double abar = sched.alpha_bar(t);
    const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (x_t[i] + sb * v[i]) / (sa + sb);
    }
    return out;
}

Var x_from_v(const Var& x_t, const Var& v, const std::vector<int>& t, const NoiseSchedule& sched) {
    require(x_t.shape() == v.shape(), "x_from_v: shape mismatch");
    require(sched.kind() == ScheduleKind::vp_cosine, "x_from_v: vp-ddpm schedule required");
    require(t.size() == x_t.rows(), "x_from_v: one timestep per row");
    std::vector<double> kx, kv;
    for (int ti : t) {
        const double abar = sched.alpha_bar(ti);
        const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
        kx.push_back(1.0 / (sa + sb));
        kv.push_back(sb / (sa + sb));
    }
    return ops::scale_rows(x_t, kx) + ops::scale_rows(v, kv);
}

Tensor tweedie_x0(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched) {
    require(x_t.shape() == eps_pred.shape(), "tweedie_x0: shape mismatch");
    require(sched.kind() == ScheduleKind::vp_cosine, "tweedie_x0: vp-ddpm schedule required");
    const double abar = sched.alpha_bar(t);
    const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (x_t[i] - sb * eps_pred[i]) / sa;
    }
    return out;
}

Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w) {
    require(cond.shape() == uncond.shape(), "cfg_combine: shape mismatch");
    Tensor out(cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = cond[i] + w * (cond[i] - uncond[i]);
    }
    return out;
}

Var cfg_combine(const Var& cond, const Var& uncond, double w) {
    return cond + ops::scale(cond - uncond, w);
}

Var apply_cfg(const Denoiser& model, const Var& x_t, const std::vector<int>& t, const std::vector<int>& c, double w) {
    require(w >= 0.0, "apply_cfg: guidance weight must be non-negative");
    check_classes(c, x_t.rows(), model.num_classes());
    Var cond = model.forward(x_t, t, c);
    if (w == 0.0) {
        return cond;
    }
    Var uncond = model.forward(x_t, t, std::vector<int>(c.size(), model.null_class()));
    return cfg_combine(cond, uncond, w);
}

Tensor apply_cfg(const Denoiser& model, const Tensor& x_t, int t, const std::vector<int>& c, double w) {
    NoGradGuard ng;
    return apply_cfg(model, Var::constant(x_t), repeat(t, x_t.rows()), c, w).value();
}

Var predict_x0(const Denoiser& model, const Var& x_t, const std::vector<int>& t, const std::vector<int>& c,
               double w, const NoiseSchedule& sched) {
    Var pred = apply_cfg(model, x_t, t, c, w);
    return model.param_kind() == ParamKind::conjugate_v ? x_from_v(x_t, pred, t, sched) : pred;
}

Tensor predict_x0(const Denoiser& model, const Tensor& x_t, int t, const std::vector<int>& c, double w,
                  const NoiseSchedule& sched) {
    NoGradGuard ng;
    return predict_x0(model, Var::constant(x_t), repeat(t, x_t.rows()), c, w, sched).value();
}

Tensor score_from_x0(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& sched) {
    require(x_t.shape() == x0_hat.shape(), "score_from_x0: shape mismatch");
    const double abar = sched.alpha_bar(t);
    require(abar < 1.0, "score_from_x0: undefined at the clean end");
    const double sa = std::sqrt(abar);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = -(x_t[i] - sa * x0_hat[i]) / (1.0 - abar);
    }
    return out;
}

StepCoefficients step_coefficients(double alpha_bar_t, double alpha_bar_prev, double sigma) {
    require(alpha_bar_t > 0.0 && alpha_bar_t < alpha_bar_prev && alpha_bar_prev <= 1.0,
            "step_coefficients: need 0 < abar_t < abar_prev <= 1");
    const double rest = 1.0 - alpha_bar_prev - sigma * sigma;
    require(rest > -1e-15, "step_coefficients: sigma too large for this step");
    const double dir = std::sqrt(std::max(rest, 0.0));
    const double sb = std::sqrt(1.0 - alpha_bar_t);
    return {std::sqrt(alpha_bar_prev) - dir * std::sqrt(alpha_bar_t) / sb, dir / sb, sigma};
}

Tensor denoise_step(const Denoiser& model, const Tensor& x_t, int t, int t_prev, const std::vector<int>& c, double w,
                    const NoiseSchedule& sched, NoiseMode noise, Rng& rng) {
    require(t_prev < t, "denoise_step: t_prev=" + std::to_string(t_prev) + " must be < t=" + std::to_string(t));
    require(t_prev >= 0, "denoise_step: t_prev must be >= 0");
    const Tensor x0 = predict_x0(model, x_t, t, c, w, sched);
    if (!x0.all_finite()) {
        throw NumericalError("denoise_step: non-finite prediction at t=" + std::to_string(t));
    }
    const double abar_t = sched.alpha_bar(t), abar_p = sched.alpha_bar(t_prev);
    double sigma = 0.0;
    if (noise == NoiseMode::ancestral && t_prev > 0) {
        sigma = posterior_coefficients(abar_t, abar_p).sigma;
    }
    const auto k = step_coefficients(abar_t, abar_p, sigma);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = k.c_x0 * x0[i] + k.c_xt * x_t[i];
    }
    if (sigma > 0.0) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += sigma * rng.normal();
        }
    }
    return out;
}

Tensor denoise_m(const Denoiser& model, const Tensor& x_start, int t_start, int t_end, const TimeGrid& grid, int m,
                 const std::vector<int>& c, double w, const NoiseSchedule& sched, NoiseMode noise, Rng& rng) {
    require(m >= 1, "denoise_m: m must be >= 1");
    const std::size_t hi = grid.index_of(t_start), lo = grid.index_of(t_end);
    require(hi >= lo && hi - lo == static_cast<std::size_t>(m),
            "denoise_m: t_start=" + std::to_string(t_start) + " and t_end=" + std::to_string(t_end) + " are not " +
                std::to_string(m) + " grid steps apart");
    Tensor x = x_start;
    for (std::size_t i = hi; i > lo; --i) {
        x = denoise_step(model, x, grid[i], grid[i - 1], c, w, sched, noise, rng);
    }
    return x;
}

Tensor ddim_sample(const Denoiser& model, const std::vector<int>& c, double w, const TimeGrid& grid,
                   const NoiseSchedule& sched, Rng& rng, NoiseMode noise) {
    require(grid.size() > 0, "ddim_sample: empty grid");
    const std::size_t dim = model.latent_dim();
    Tensor x = rng.normal({c.size(), dim});
    for (std::size_t i = grid.size() - 1; i > 0; --i) {
        const NoiseMode mode = (i - 1 == 0) ? NoiseMode::ddim : noise;
        x = denoise_step(model, x, grid[i], grid[i - 1], c, w, sched, mode, rng);
    }
    return denoise_step(model, x, grid[0], 0, c, w, sched, NoiseMode::ddim, rng);
}

Tensor ddim_integrate(const Denoiser& model, const Tensor& x_start, int t_start, int t_end, int substeps,
                      const std::vector<int>& c, double w, const NoiseSchedule& sched) {
    require(t_end < t_start && substeps >= 1 && substeps <= t_start - t_end,
            "ddim_integrate: need t_end < t_start and 1 <= substeps <= t_start - t_end");
    Rng unused(0);
    Tensor x = x_start;
    int t = t_start;
    for (int k = 1; k <= substeps; ++k) {
        const double u = static_cast<double>(k) / substeps;
        const int next = t_start - static_cast<int>(std::lround(u * (t_start - t_end)));
        x = denoise_step(model, x, t, next, c, w, sched, NoiseMode::ddim, unused);
        t = next;
    }
    return x;
}

Tensor forward_diffuse_rows(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                            const NoiseSchedule& sched) {
    require(x0.shape() == eps.shape(), "forward_diffuse_rows: shape mismatch");
    require(t.size() == x0.rows(), "forward_diffuse_rows: one timestep per row");
    const std::size_t D = x0.cols();
    Tensor out(x0.shape());
    for (std::size_t r = 0; r < t.size(); ++r) {
        const double a = sched.a(t[r]), b = sched.b(t[r]);
        for (std::size_t j = 0; j < D; ++j) {
            out[r * D + j] = a * x0[r * D + j] + b * eps[r * D + j];
        }
    }
    return out;
}

namespace {

struct Prepared {
    Tensor x_t;
    std::vector<int> t;
};

Prepared prepare(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                 const Tensor& eps, const NoiseSchedule& sched) {
    require(x0.shape() == eps.shape(), "diffusion loss: eps shape " + shape_str(eps.shape()) + " != x0 shape " +
                                           shape_str(x0.shape()));
    require(t.size() == x0.rows(), "diffusion loss: one timestep per row");
    check_classes(c, x0.rows(), model.num_classes());
    return {forward_diffuse_rows(x0, t, eps, sched), t};
}

Var mse(const Var& pred, const Tensor& target) {
    require(pred.value().size() == target.size(), "diffusion loss: prediction shape " + shape_str(pred.shape()) +
                                                       " does not match target " + shape_str(target.shape()));
    return ops::mean(ops::square(pred - Var::constant(target.reshaped(pred.shape()))));
}

}  // namespace

Var loss_conjugate_v(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                     const Tensor& eps, const NoiseSchedule& sched) {
    require(model.param_kind() == ParamKind::conjugate_v, "loss_conjugate_v: model must be conjugate-v");
    auto p = prepare(model, x0, c, t, eps, sched);
    Tensor target(x0.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
        target[i] = x0[i] - eps[i];
    }
    return mse(model.forward(Var::constant(p.x_t), p.t, c), target);
}

Var loss_x_pred(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                const Tensor& eps, const NoiseSchedule& sched) {
    require(model.param_kind() == ParamKind::x_pred, "loss_x_pred: model must be x-pred");
    auto p = prepare(model, x0, c, t, eps, sched);
    return mse(model.forward(Var::constant(p.x_t), p.t, c), x0);
}

Var diffusion_loss(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                   const Tensor& eps, const NoiseSchedule& sched) {
    return model.param_kind() == ParamKind::conjugate_v ? loss_conjugate_v(model, x0, c, t, eps, sched)
                                                        : loss_x_pred(model, x0, c, t, eps, sched);
}

Var loss_standard_v(const Denoiser& model, const Tensor& x0, const std::vector<int>& c, const std::vector<int>& t,
                    const Tensor& eps, const NoiseSchedule& sched) {
    auto p = prepare(model, x0, c, t, eps, sched);
    const std::size_t D = x0.cols();
    Tensor target(x0.shape());
    for (std::size_t r = 0; r < t.size(); ++r) {
        const double a = sched.a(t[r]), b = sched.b(t[r]);
        for (std::size_t j = 0; j < D; ++j) {
            target[r * D + j] = a * eps[r * D + j] - b * x0[r * D + j];
        }
    }
    return mse(model.forward(Var::constant(p.x_t), p.t, c), target);
}

Tensor x_from_standard_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& sched) {
    require(x_t.shape() == v.shape(), "x_from_standard_v: shape mismatch");
    const double a = sched.a(t), b = sched.b(t);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * x_t[i] - b * v[i];
    }
    return out;
}

}  // namespace dollar
