#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dollar/latentspace/codec.hpp"
#include "dollar/netcore/optim.hpp"
#include "dollar/reward/rewards.hpp"

namespace dollar {

enum class LrmArch {
    /// [n, D] latents: affine + group-norm blocks.
    vector,
    /// [n, C*S*S] latents viewed as [C, S, S]: conv + group-norm blocks.
    image,
    /// Single affine map to the scalar (no hidden layer).
    linear,
};

std::string to_string(LrmArch a);
LrmArch lrm_arch_from_string(const std::string& s);

struct LrmConfig {
    LrmArch arch = LrmArch::vector;
    std::size_t latent_dim = 2;
    std::size_t channels = 4;
    std::size_t side = 2;
    std::size_t width = 64;
    std::size_t groups = 4;
    bool conditional = false;
    /// Including the null class (conditional only).
    int num_classes = 9;
};

/// Compact latent-space reward regressor: two blocks of (conv | affine) +
/// group norm + SiLU, pooling, then a scalar head. The conditional variant
/// attends from a class-embedding query over the feature tokens (spatial
/// positions, or the single pooled vector) and mixes [pooled, attended,
/// class] through one SiLU layer before the head.
class LatentRewardModel {
public:
    LatentRewardModel() = default;
    LatentRewardModel(const LrmConfig& config, std::uint64_t seed);

    /// [n, latent_dim] -> [n, 1]
    Var forward(const Var& z, const std::vector<int>& c) const;
    Tensor predict(const Tensor& z, const std::vector<int>& c) const;

    std::vector<Var> parameters() const;
    std::vector<std::string> parameter_names() const;
    const LrmConfig& config() const noexcept { return config_; }

    long steps_trained = 0;

private:
    LrmConfig config_;
    Network trunk_{"lrm.trunk"};
    Network head_{"lrm.head"};
    Network mix_{"lrm.mix"};
    ParamStore attn_;
    std::size_t emb_ = 0, wq_ = 0, wk_ = 0, wv_ = 0;
};

/// Everything the reward phase needs: the pixel oracle, the LRM and its
/// optimizer, and the fine-tuning mode.
enum class RewardMode { none, lrm, ddpo };
std::string to_string(RewardMode m);
RewardMode reward_mode_from_string(const std::string& s);

struct RewardBundle {
    PixelReward pixel;
    LatentRewardModel lrm;
    AdamW lrm_opt;
    RewardMode mode = RewardMode::none;
};

/// One optimizer step on the mean squared error between lrm(x, c) and
/// pixel(decode(x), c) over the merged real + generated batch (equal
/// weighting per row). Returns the pre-step loss.
double lrm_train_step(RewardBundle& bundle, const LatentCodec& codec, const Tensor& real_latents,
                      const std::vector<int>& real_c, const Tensor& gen_latents, const std::vector<int>& gen_c);

/// Regression loss on the tape, for gradient checks and custom loops.
Var lrm_regression_loss(const LatentRewardModel& lrm, const Tensor& latents, const std::vector<int>& c,
                        const Tensor& targets);

/// Held-out mean squared error of the LRM against the oracle.
double lrm_eval_mse(const LatentRewardModel& lrm, const PixelReward& pixel, const LatentCodec& codec,
                    const Tensor& latents, const std::vector<int>& c);

/// The reward-model path an LRM replaces: a pixel-space MLP (64 -> 256 ->
/// 256 -> 1) standing in for a pretrained image reward network. Only its
/// size is used, for the compactness accounting.
Network pixel_surrogate_network(std::size_t pixel_dim, std::uint64_t seed);

struct LrmAccounting {
    std::size_t lrm_params = 0;
    std::size_t decoder_params = 0;
    std::size_t surrogate_params = 0;
    /// lrm / (decoder + surrogate)
    double ratio = 0.0;
};
LrmAccounting lrm_accounting(const LatentRewardModel& lrm, const LatentCodec& codec);

}  // namespace dollar
