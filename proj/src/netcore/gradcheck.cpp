#include "dollar/netcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dollar/netcore/network.hpp"

namespace dollar {

GradCheckResult gradcheck(const std::vector<Var>& params, const std::function<Var()>& loss, double h) {
    std::vector<Tensor> detached;
    zero_grads(params);
    {
        DetachReplay rec(DetachReplay::Mode::record, &detached);
        backward(loss());
    }
    const std::vector<double> analytic = flatten_grads(params);
    std::vector<double> theta = flatten_values(params);
    std::vector<double> numeric(theta.size());

    auto eval = [&]() {
        DetachReplay rep(DetachReplay::Mode::replay, &detached);
        NoGradGuard ng;
        return loss().value()[0];
    };
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = theta[i];
        theta[i] = orig + h;
        assign_values(params, theta);
        const double fp = eval();
        theta[i] = orig - h;
        assign_values(params, theta);
        const double fm = eval();
        theta[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    assign_values(params, theta);

    GradCheckResult r;
    r.coordinates = theta.size();
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = analytic[i] - numeric[i];
        diff += d * d;
        na += analytic[i] * analytic[i];
        nf += numeric[i] * numeric[i];
        r.max_abs_error = std::max(r.max_abs_error, std::abs(d));
    }
    r.analytic_norm = std::sqrt(na);
    const double denom = std::max(std::sqrt(na), std::sqrt(nf));
    r.rel_error = denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
    return r;
}

}  // namespace dollar
