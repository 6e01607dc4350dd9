#include "dollar/diffusion/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dollar/error.hpp"

namespace dollar {

MixtureOracle::MixtureOracle(Tensor means, double stddev, std::vector<double> weights, NoiseSchedule sched,
                             ParamKind kind)
    : means_(std::move(means)), stddev_(stddev), weights_(std::move(weights)), sched_(std::move(sched)), kind_(kind) {
    require(means_.rank() == 2 && means_.rows() >= 1, "MixtureOracle: means must be [K, D]");
    require(weights_.size() == means_.rows(), "MixtureOracle: one weight per component");
    require(stddev_ >= 0.0, "MixtureOracle: negative stddev");
    const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    for (auto& w : weights_) {
        w /= total;
    }
}

MixtureOracle MixtureOracle::gaussian(std::size_t dim, double mean, double stddev, NoiseSchedule sched,
                                      ParamKind kind) {
    return MixtureOracle(Tensor({1, dim}, mean), stddev, {1.0}, std::move(sched), kind);
}

Tensor MixtureOracle::posterior_mean(const Tensor& x_t, int t, int c) const {
    const std::size_t K = means_.rows(), D = means_.cols();
    require(x_t.size() == D, "MixtureOracle: expected a single row of width " + std::to_string(D));
    require(c >= 0 && c <= static_cast<int>(K), "MixtureOracle: class out of range");
    const double a = sched_.a(t), b = sched_.b(t);
    const double s2 = stddev_ * stddev_;
    const double var = a * a * s2 + b * b;
    if (var == 0.0) {
        // Clean end with point-mass components: x_t already is the sample.
        return x_t;
    }
    const double gain = a * s2 / var;
    std::vector<std::size_t> comps;
    if (c < static_cast<int>(K)) {
        comps.push_back(static_cast<std::size_t>(c));
    } else {
        comps.resize(K);
        std::iota(comps.begin(), comps.end(), 0);
    }
    std::vector<double> logw;
    for (std::size_t k : comps) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
            const double d = x_t[j] - a * means_.at(k, j);
            d2 += d * d;
        }
        logw.push_back(std::log(weights_[k]) - 0.5 * d2 / var);
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double z = 0.0;
    for (auto& l : logw) {
        l = std::exp(l - mx);
        z += l;
    }
    Tensor out({1, D});
    for (std::size_t i = 0; i < comps.size(); ++i) {
        const double r = logw[i] / z;
        for (std::size_t j = 0; j < D; ++j) {
            const double mu = means_.at(comps[i], j);
            out[j] += r * (mu + gain * (x_t[j] - a * mu));
        }
    }
    return out;
}

Var MixtureOracle::forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const {
    const std::size_t B = x_t.rows(), D = means_.cols();
    require(x_t.cols() == D, "MixtureOracle: latent width mismatch");
    require(t.size() == B && c.size() == B, "MixtureOracle: one timestep and class per row");
    Tensor out({B, D});
    for (std::size_t r = 0; r < B; ++r) {
        const Tensor xr = x_t.value().row(r);
        const Tensor x0 = posterior_mean(xr, t[r], c[r]);
        if (kind_ == ParamKind::x_pred) {
            std::copy_n(x0.data(), D, out.data() + r * D);
            continue;
        }
        // v = E[x0] - E[eps] with E[eps] = (x_t - a E[x0]) / b
        const double a = sched_.a(t[r]), b = sched_.b(t[r]);
        for (std::size_t j = 0; j < D; ++j) {
            const double e = b > 0.0 ? (xr[j] - a * x0[j]) / b : 0.0;
            out[r * D + j] = x0[j] - e;
        }
    }
    return Var::constant(std::move(out));
}

}  // namespace dollar
