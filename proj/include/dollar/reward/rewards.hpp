#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dollar/harness/datasets.hpp"
#include "dollar/netcore/tensor.hpp"

namespace dollar {

/// Pixel-space reward oracle. Works on plain tensors only, so it can never
/// sit on a recorded graph.
struct PixelReward {
    std::string name;
    /// (pixel row [D], condition) -> scalar
    std::function<double(const double* x, std::size_t dim, int c)> fn;
    bool differentiable = false;
    bool conditional = false;
    /// > 1: consecutive groups of rows share their mean reward.
    std::size_t group = 1;

    double evaluate(const Tensor& row, int c = -1) const;
    /// One reward per row of pixels [n, D] -> [n].
    Tensor evaluate_batch(const Tensor& pixels, const std::vector<int>& c) const;
};

/// Mean pixel value.
PixelReward reward_brightness();
/// Negative number of distinct levels after clamping to [0, 1] and 4-level
/// quantization.
PixelReward reward_compressibility();
/// Negative Euclidean distance to row c of `targets`; c outside
/// [0, targets.rows()) uses the nearest target.
PixelReward reward_mode_affinity(Tensor targets);
PixelReward reward_constant(double value);

/// Registry: brightness, compressibility, mode_affinity (domain targets),
/// constant:<value>.
PixelReward make_pixel_reward(const std::string& name, DomainKind domain);
std::vector<std::string> pixel_reward_names();

/// Each consecutive group of `group` rows receives the group's mean reward
/// (stands in for averaging a per-frame reward over a clip).
PixelReward group_average(PixelReward base, std::size_t group);

}  // namespace dollar
