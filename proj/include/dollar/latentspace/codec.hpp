#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dollar/netcore/checkpoint.hpp"
#include "dollar/netcore/network.hpp"

namespace dollar {

enum class CodecKind { identity, trained_ae };

std::string to_string(CodecKind k);
CodecKind codec_kind_from_string(const std::string& s);

struct CodecConfig {
    std::size_t side = 8;
    /// 2x2x4 for 8x8 images.
    std::size_t latent_dim = 16;
    std::size_t decoder_hidden = 256;
    int steps = 4000;
    std::size_t batch = 64;
    double lr = 2e-3;
    /// Fraction of training rows multiplied by a uniform factor in [0, 1].
    double dim_fraction = 0.25;
    /// Held-out reconstruction MSE required before the codec is usable.
    double threshold = 0.01;
    std::uint64_t seed = 0;
};

/// Pixel <-> latent map. Pixels are flat rows [n, side*side]. The trained
/// autoencoder's latents are standardized per dimension with statistics
/// fixed at freeze time.
class LatentCodec {
public:
    LatentCodec() = default;

    static LatentCodec identity(std::size_t dim);
    /// Untrained autoencoder: conv encoder 8x8 -> 2x2x4, MLP decoder.
    static LatentCodec autoencoder(const CodecConfig& config, std::uint64_t seed);

    CodecKind kind() const noexcept { return kind_; }
    std::size_t pixel_dim() const noexcept { return pixel_dim_; }
    std::size_t latent_dim() const noexcept { return latent_dim_; }
    /// pixel_dim / latent_dim
    double compression_factor() const;

    /// Raw network maps without standardization (for pretraining).
    Var encode_raw(const Var& x) const;
    Var decode_raw(const Var& z) const;

    /// Deterministic frozen maps; parameters never receive gradients, the
    /// input path does.
    Var encode(const Var& x) const;
    Var decode(const Var& z) const;
    Tensor encode(const Tensor& x) const;
    Tensor decode(const Tensor& z) const;

    void freeze(const Tensor& latent_mean, const Tensor& latent_std, double recon_threshold, double heldout_mse);
    bool frozen() const noexcept { return frozen_; }
    /// Throws ContractViolation unless frozen.
    void require_frozen(const std::string& who) const;

    double recon_threshold() const noexcept { return recon_threshold_; }
    double heldout_mse() const noexcept { return heldout_mse_; }
    bool usable() const noexcept { return frozen_ && heldout_mse_ < recon_threshold_; }

    std::vector<Var> parameters() const;
    std::vector<Var> encoder_parameters() const { return encoder_.parameters(); }
    std::vector<Var> decoder_parameters() const { return decoder_.parameters(); }
    std::uint64_t hash() const { return param_hash(parameters()); }

    Checkpoint to_checkpoint() const;
    static LatentCodec from_checkpoint(const Checkpoint& ckpt);

private:
    void build(const CodecConfig& config, std::uint64_t seed);

    CodecKind kind_ = CodecKind::identity;
    CodecConfig config_;
    std::uint64_t build_seed_ = 0;
    std::size_t pixel_dim_ = 0;
    std::size_t latent_dim_ = 0;
    Network encoder_{"enc"};
    Network decoder_{"dec"};
    Tensor mean_, std_;
    bool frozen_ = false;
    double recon_threshold_ = 0.0;
    double heldout_mse_ = 0.0;
};

struct CodecTrainResult {
    LatentCodec codec;
    double heldout_mse = 0.0;
    bool usable = false;
    std::vector<double> losses;
};

/// Trains the autoencoder on `train` pixels, measures held-out MSE on
/// `heldout`, sets latent standardization from the training latents and
/// freezes. A miss on the threshold leaves the codec frozen but unusable.
CodecTrainResult pretrain_codec(const Tensor& train, const Tensor& heldout, const CodecConfig& config);

/// Mean squared reconstruction error decode(encode(x)) vs x.
double reconstruction_mse(const LatentCodec& codec, const Tensor& x);

}  // namespace dollar
