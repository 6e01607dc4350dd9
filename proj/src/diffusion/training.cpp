#include "dollar/diffusion/training.hpp"

#include <cmath>
#include <numbers>

#include "dollar/diffusion/diffusion.hpp"
#include "dollar/error.hpp"

namespace dollar {

std::vector<double> train_denoiser(DenoiserModel& model, const LabeledData& data, const NoiseSchedule& sched,
                                   const TeacherTrainConfig& config, const std::function<void(int, double)>& on_step) {
    require(data.size() > 0 && data.x.rows() == data.size(), "train_denoiser: empty or inconsistent dataset");
    Rng rng(config.seed);
    AdamW opt({.lr = config.lr});
    const auto params = model.parameters();
    const std::size_t D = data.x.cols();
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        if (config.cosine_decay) {
            const double u = static_cast<double>(step) / std::max(1, config.steps - 1);
            const double k = config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
            opt.config().lr = config.lr * k;
        }
        Tensor x0({config.batch, D});
        std::vector<int> c(config.batch), t(config.batch);
        for (std::size_t r = 0; r < config.batch; ++r) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(data.size()) - 1));
            std::copy_n(data.x.data() + i * D, D, x0.data() + r * D);
            c[r] = rng.bernoulli(config.cfg_dropout) ? model.null_class() : data.c[i];
            t[r] = static_cast<int>(rng.uniform_int(1, sched.T()));
        }
        const Tensor eps = rng.normal({config.batch, D});
        zero_grads(params);
        Var loss = diffusion_loss(model, x0, c, t, eps, sched);
        backward(loss);
        const auto st = opt.step(params);
        if (!st.ok) {
            throw NumericalError("train_denoiser step " + std::to_string(step) + ": " + st.diagnostic);
        }
        losses.push_back(loss.value()[0]);
        if (on_step) {
            on_step(step, losses.back());
        }
    }
    return losses;
}

}  // namespace dollar
