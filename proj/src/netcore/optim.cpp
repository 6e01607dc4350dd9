#include "dollar/netcore/optim.hpp"

#include <cmath>

#include "dollar/error.hpp"

namespace dollar {

StepStatus AdamW::step(const std::vector<Var>& params) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }
    require(m_.size() == params.size(), "AdamW: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i].shape() == m_[i].shape(), "AdamW: moment shape mismatch at parameter " + std::to_string(i));
        if (params[i].has_grad() && !params[i].grad().all_finite()) {
            return {false, "non-finite gradient in parameter " + std::to_string(i) + " " +
                               shape_str(params[i].shape()) + "; step skipped"};
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var p = params[i];
        if (!p.has_grad()) {
            continue;
        }
        const Tensor g = p.grad();
        Tensor& w = p.mutable_value();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            w[k] -= config_.lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * w[k]);
        }
    }
    return {};
}

void ema_update(const std::vector<Var>& target, const std::vector<Var>& source, double rate) {
    require(rate >= 0.0 && rate <= 1.0, "ema_update: rate outside [0,1]");
    require(target.size() == source.size(), "ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < target.size(); ++i) {
        require(target[i].shape() == source[i].shape(), "ema_update: shape mismatch at " + std::to_string(i));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        Var t = target[i];
        Tensor& tv = t.mutable_value();
        const Tensor& sv = source[i].value();
        if (rate == 0.0) {
            tv = sv;
            continue;
        }
        for (std::size_t k = 0; k < tv.size(); ++k) {
            tv[k] = rate * tv[k] + (1.0 - rate) * sv[k];
        }
    }
}

}  // namespace dollar
