#pragma once

#include <string>
#include <vector>

#include "dollar/netcore/autodiff.hpp"

namespace dollar {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct StepStatus {
    bool ok = true;
    std::string diagnostic;
};

/// AdamW with decoupled weight decay. Moments are bound to parameter
/// positions on the first step and shape-checked afterwards.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// Applies one update from the accumulated grads. A non-finite grad
    /// aborts the step with nothing modified.
    StepStatus step(const std::vector<Var>& params);

    AdamWConfig& config() noexcept { return config_; }
    const AdamWConfig& config() const noexcept { return config_; }
    long steps() const noexcept { return t_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }

private:
    AdamWConfig config_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// target <- rate * target + (1 - rate) * source
void ema_update(const std::vector<Var>& target, const std::vector<Var>& source, double rate);

}  // namespace dollar
