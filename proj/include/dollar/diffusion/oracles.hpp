#pragma once

#include <vector>

#include "dollar/diffusion/denoiser.hpp"
#include "dollar/schedule/schedule.hpp"

namespace dollar {

/// Exact posterior-mean denoiser for data drawn from an isotropic Gaussian
/// mixture: class k < K selects component k, the null class the full
/// mixture with the given weights. Output carries no gradient.
class MixtureOracle : public Denoiser {
public:
    /// means [K, D]
    MixtureOracle(Tensor means, double stddev, std::vector<double> weights, NoiseSchedule sched,
                  ParamKind kind = ParamKind::conjugate_v);

    /// N(mean, stddev^2 I) as a single component.
    static MixtureOracle gaussian(std::size_t dim, double mean = 0.0, double stddev = 1.0,
                                  NoiseSchedule sched = NoiseSchedule::vp_cosine(),
                                  ParamKind kind = ParamKind::conjugate_v);

    ParamKind param_kind() const override { return kind_; }
    int num_classes() const override { return static_cast<int>(means_.rows()) + 1; }
    std::size_t latent_dim() const override { return means_.cols(); }
    Var forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const override;

    /// E[x0 | x_t, c]
    Tensor posterior_mean(const Tensor& x_t, int t, int c) const;

private:
    Tensor means_;
    double stddev_;
    std::vector<double> weights_;
    NoiseSchedule sched_;
    ParamKind kind_;
};

}  // namespace dollar
