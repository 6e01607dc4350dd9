#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dollar/diffusion/denoiser.hpp"
#include "dollar/netcore/optim.hpp"
#include "dollar/schedule/schedule.hpp"

namespace dollar {

/// Latent rows with one class label each.
struct LabeledData {
    Tensor x;
    std::vector<int> c;

    std::size_t size() const { return c.size(); }
};

struct TeacherTrainConfig {
    int steps = 20000;
    std::size_t batch = 256;
    double lr = 1e-3;
    /// Probability of replacing the label with the null class.
    double cfg_dropout = 0.1;
    /// Cosine decay of the learning rate down to lr * lr_floor.
    bool cosine_decay = true;
    double lr_floor = 0.05;
    std::uint64_t seed = 0;
};

/// Fits the model's own objective (conjugate-v or x-pred) with uniform
/// t in [1, T]. Returns the per-step training loss.
std::vector<double> train_denoiser(DenoiserModel& model, const LabeledData& data, const NoiseSchedule& sched,
                                   const TeacherTrainConfig& config,
                                   const std::function<void(int, double)>& on_step = {});

}  // namespace dollar
