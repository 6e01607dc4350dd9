#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dollar/netcore/checkpoint.hpp"
#include "dollar/netcore/network.hpp"

namespace dollar {

enum class ParamKind { conjugate_v, x_pred };

std::string to_string(ParamKind kind);
ParamKind param_kind_from_string(const std::string& s);

/// Anything that maps (x_t, t, c) to a latent-shaped prediction. The
/// prediction is a conjugate velocity or a clean-sample estimate per
/// param_kind(). Analytic oracles implement this without parameters.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual ParamKind param_kind() const = 0;
    virtual int num_classes() const = 0;
    virtual std::size_t latent_dim() const = 0;
    int null_class() const { return num_classes() - 1; }
    /// x_t [B, D], one timestep and one class per row.
    virtual Var forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const = 0;
    virtual std::vector<Var> parameters() const { return {}; }
};

enum class DenoiserArch { mlp, conv };

struct DenoiserConfig {
    DenoiserArch arch = DenoiserArch::mlp;
    std::size_t latent_dim = 2;
    /// Includes the null class, which is always the last index.
    int num_classes = 9;
    std::size_t hidden = 256;
    std::size_t depth = 3;
    std::size_t temb_dim = 64;
    std::size_t class_dim = 32;
    ParamKind kind = ParamKind::conjugate_v;
    int T = 1000;
    /// conv arch: the latent is viewed as [channels, side, side].
    std::size_t channels = 4;
    std::size_t side = 2;
    std::size_t conv_width = 32;
};

std::string to_string(DenoiserArch arch);
DenoiserArch denoiser_arch_from_string(const std::string& s);

/// Sinusoidal features of t/T: angle (t/T) * 1000 * f_k, f_k geometric
/// from 1 to 1e-4; first half sin, second half cos.
Tensor time_embedding(const std::vector<int>& t, int T, std::size_t dim);

/// Conditional network: input x_t ⊕ time embedding ⊕ learned class
/// embedding. The conv arch first runs two 3x3 convolutions over the latent
/// grid and feeds the flattened features together with x_t to the MLP.
class DenoiserModel : public Denoiser {
public:
    DenoiserModel() = default;
    DenoiserModel(const DenoiserConfig& config, std::uint64_t seed);

    ParamKind param_kind() const override { return config_.kind; }
    int num_classes() const override { return config_.num_classes; }
    std::size_t latent_dim() const override { return config_.latent_dim; }
    Var forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const override;
    std::vector<Var> parameters() const override;
    std::vector<std::string> parameter_names() const;

    const DenoiserConfig& config() const noexcept { return config_; }
    /// Reinterprets the output head (heterogeneous students start from
    /// teacher weights with an x-prediction head).
    void set_param_kind(ParamKind kind) { config_.kind = kind; }

    /// kind "denoiser"; meta carries the full config.
    Checkpoint to_checkpoint() const;
    static DenoiserModel from_checkpoint(const Checkpoint& ckpt);

private:
    DenoiserConfig config_;
    Network conv_;
    Network mlp_;
    ParamStore embed_;
};

}  // namespace dollar
