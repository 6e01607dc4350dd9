#pragma once

#include <functional>
#include <vector>

#include "dollar/netcore/autodiff.hpp"

namespace dollar {

struct GradCheckResult {
    /// ||g_autodiff - g_fd|| / max(||g_autodiff||, ||g_fd||)
    double rel_error = 0.0;
    double max_abs_error = 0.0;
    double analytic_norm = 0.0;
    std::size_t coordinates = 0;
};

/// Central finite differences over every parameter coordinate. `loss` must
/// be a deterministic function of the parameter values (reseed inside).
/// Values passed through detach() on the reference pass are replayed on the
/// perturbed passes, so stop-gradient inputs are held fixed exactly as the
/// autodiff gradient assumes.
GradCheckResult gradcheck(const std::vector<Var>& params, const std::function<Var()>& loss, double h = 1e-5);

}  // namespace dollar
