#include "dollar/latentspace/codec.hpp"

#include <cmath>

#include "dollar/error.hpp"
#include "dollar/netcore/optim.hpp"

namespace dollar {

namespace {

Tensor tile_rows(const Tensor& row, std::size_t n) {
    Tensor out({n, row.size()});
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(row.data(), row.size(), out.data() + r * row.size());
    }
    return out;
}

std::vector<std::string> names_of(const Network& net) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < net.params().size(); ++i) {
        out.push_back(net.params().name(i));
    }
    return out;
}

}  // namespace

std::string to_string(CodecKind k) {
    return k == CodecKind::identity ? "identity" : "trained-ae";
}

CodecKind codec_kind_from_string(const std::string& s) {
    if (s == "identity") {
        return CodecKind::identity;
    }
    if (s == "trained-ae") {
        return CodecKind::trained_ae;
    }
    throw ContractViolation("unknown codec kind '" + s + "'");
}

LatentCodec LatentCodec::identity(std::size_t dim) {
    LatentCodec c;
    c.kind_ = CodecKind::identity;
    c.pixel_dim_ = dim;
    c.latent_dim_ = dim;
    c.frozen_ = true;
    c.recon_threshold_ = 0.0;
    return c;
}

LatentCodec LatentCodec::autoencoder(const CodecConfig& config, std::uint64_t seed) {
    LatentCodec c;
    c.build(config, seed);
    return c;
}

void LatentCodec::build(const CodecConfig& config, std::uint64_t seed) {
    require(config.side % 4 == 0, "autoencoder: side must be divisible by 4");
    const std::size_t cells = (config.side / 4) * (config.side / 4);
    require(config.latent_dim % cells == 0, "autoencoder: latent_dim must fill the downsampled grid");
    kind_ = CodecKind::trained_ae;
    config_ = config;
    build_seed_ = seed;
    pixel_dim_ = config.side * config.side;
    latent_dim_ = config.latent_dim;
    Rng rng(seed);
    encoder_ = Network("enc");
    encoder_.reshape({1, config.side, config.side})
        .conv2d(1, 16, 3, 1, 1, rng)
        .silu()
        .conv2d(16, 32, 4, 2, 1, rng)
        .silu()
        .conv2d(32, config.latent_dim / cells, 4, 2, 1, rng)
        .reshape({config.latent_dim});
    decoder_ = Network("dec");
    decoder_.linear(config.latent_dim, config.decoder_hidden, rng)
        .silu()
        .linear(config.decoder_hidden, config.decoder_hidden, rng)
        .silu()
        .linear(config.decoder_hidden, pixel_dim_, rng)
        .sigmoid();
    mean_ = Tensor({latent_dim_});
    std_ = Tensor({latent_dim_}, 1.0);
    frozen_ = false;
}

double LatentCodec::compression_factor() const {
    return static_cast<double>(pixel_dim_) / static_cast<double>(latent_dim_);
}

Var LatentCodec::encode_raw(const Var& x) const {
    require(x.value().size() == x.rows() * pixel_dim_, "encode: expected [n, " + std::to_string(pixel_dim_) + "]");
    return kind_ == CodecKind::identity ? x : encoder_.forward(x);
}

Var LatentCodec::decode_raw(const Var& z) const {
    require(z.value().size() == z.rows() * latent_dim_, "decode: expected [n, " + std::to_string(latent_dim_) + "]");
    return kind_ == CodecKind::identity ? z : decoder_.forward(z);
}

Var LatentCodec::encode(const Var& x) const {
    if (kind_ == CodecKind::identity) {
        return encode_raw(x);
    }
    FreezeParamsGuard frozen;
    const std::size_t n = x.rows();
    Tensor inv(std_.shape());
    for (std::size_t i = 0; i < inv.size(); ++i) {
        inv[i] = 1.0 / std_[i];
    }
    Tensor neg_mean = mean_;
    for (auto& v : neg_mean.values()) {
        v = -v;
    }
    return ops::mul_const(ops::add_const(encode_raw(x), tile_rows(neg_mean, n)), tile_rows(inv, n));
}

Var LatentCodec::decode(const Var& z) const {
    if (kind_ == CodecKind::identity) {
        return decode_raw(z);
    }
    FreezeParamsGuard frozen;
    const std::size_t n = z.rows();
    return decode_raw(ops::add_const(ops::mul_const(z, tile_rows(std_, n)), tile_rows(mean_, n)));
}

Tensor LatentCodec::encode(const Tensor& x) const {
    if (kind_ == CodecKind::identity) {
        return x;
    }
    NoGradGuard ng;
    return encode(Var::constant(x)).value();
}

Tensor LatentCodec::decode(const Tensor& z) const {
    if (kind_ == CodecKind::identity) {
        return z;
    }
    NoGradGuard ng;
    return decode(Var::constant(z)).value();
}

void LatentCodec::freeze(const Tensor& latent_mean, const Tensor& latent_std, double recon_threshold,
                         double heldout_mse) {
    require(latent_mean.size() == latent_dim_ && latent_std.size() == latent_dim_,
            "freeze: standardization statistics must have latent_dim entries");
    for (double s : latent_std.values()) {
        require(s > 0.0, "freeze: latent std must be positive");
    }
    mean_ = latent_mean.reshaped({latent_dim_});
    std_ = latent_std.reshaped({latent_dim_});
    recon_threshold_ = recon_threshold;
    heldout_mse_ = heldout_mse;
    frozen_ = true;
}

void LatentCodec::require_frozen(const std::string& who) const {
    require(frozen_, who + ": codec must be frozen (pretrain_codec) before use");
}

std::vector<Var> LatentCodec::parameters() const {
    std::vector<Var> p = encoder_.parameters();
    const auto d = decoder_.parameters();
    p.insert(p.end(), d.begin(), d.end());
    return p;
}

Checkpoint LatentCodec::to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "codec";
    ck.meta = {{"codec_kind", to_string(kind_)},
               {"pixel_dim", pixel_dim_},
               {"latent_dim", latent_dim_},
               {"frozen", frozen_},
               {"recon_threshold", recon_threshold_},
               {"heldout_mse", heldout_mse_},
               {"compression_factor", compression_factor()},
               {"side", config_.side},
               {"decoder_hidden", config_.decoder_hidden}};
    if (kind_ == CodecKind::trained_ae) {
        auto names = names_of(encoder_);
        const auto dn = names_of(decoder_);
        names.insert(names.end(), dn.begin(), dn.end());
        ck.tensors = snapshot(names, parameters());
        ck.tensors.emplace_back("latent.mean", mean_);
        ck.tensors.emplace_back("latent.std", std_);
    }
    return ck;
}

LatentCodec LatentCodec::from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "codec", "from_checkpoint: not a codec checkpoint (kind '" + ck.kind + "')");
    const auto kind = codec_kind_from_string(ck.meta.at("codec_kind").get<std::string>());
    if (kind == CodecKind::identity) {
        return identity(ck.meta.at("latent_dim").get<std::size_t>());
    }
    CodecConfig cfg;
    cfg.side = ck.meta.at("side").get<std::size_t>();
    cfg.latent_dim = ck.meta.at("latent_dim").get<std::size_t>();
    cfg.decoder_hidden = ck.meta.at("decoder_hidden").get<std::size_t>();
    LatentCodec c = autoencoder(cfg, 0);
    auto names = names_of(c.encoder_);
    const auto dn = names_of(c.decoder_);
    names.insert(names.end(), dn.begin(), dn.end());
    std::vector<std::pair<std::string, Tensor>> net_tensors;
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("latent.", 0) != 0) {
            net_tensors.emplace_back(name, t);
        }
    }
    restore(net_tensors, names, c.parameters());
    if (ck.meta.at("frozen").get<bool>()) {
        c.freeze(ck.tensor("latent.mean"), ck.tensor("latent.std"), ck.meta.at("recon_threshold").get<double>(),
                 ck.meta.at("heldout_mse").get<double>());
    }
    return c;
}

double reconstruction_mse(const LatentCodec& codec, const Tensor& x) {
    const Tensor r = codec.decode(codec.encode(x));
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += (r[i] - x[i]) * (r[i] - x[i]);
    }
    return s / static_cast<double>(x.size());
}

CodecTrainResult pretrain_codec(const Tensor& train, const Tensor& heldout, const CodecConfig& config) {
    CodecTrainResult res;
    res.codec = LatentCodec::autoencoder(config, config.seed);
    LatentCodec& codec = res.codec;
    require(train.rows() >= 1 && train.size() == train.rows() * codec.pixel_dim(),
            "pretrain_codec: training pixels must be [n, " + std::to_string(codec.pixel_dim()) + "]");
    Rng rng(config.seed + 1);
    AdamW opt({.lr = config.lr});
    const auto params = codec.parameters();
    const std::size_t n = train.rows(), D = codec.pixel_dim();
    for (int step = 0; step < config.steps; ++step) {
        // Cosine decay to 5% of the base rate.
        const double u = static_cast<double>(step) / std::max(1, config.steps - 1);
        opt.config().lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(3.141592653589793 * u)));
        Tensor batch({config.batch, D});
        for (std::size_t r = 0; r < config.batch; ++r) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(n) - 1));
            // Dimmed copies extend coverage down to the blank image.
            const double dim = rng.bernoulli(config.dim_fraction) ? rng.uniform() : 1.0;
            for (std::size_t p = 0; p < D; ++p) {
                batch[r * D + p] = dim * train[i * D + p];
            }
        }
        zero_grads(params);
        const Var x = Var::constant(batch);
        const Var loss = ops::mean(ops::square(codec.decode_raw(codec.encode_raw(x)) - x));
        res.losses.push_back(loss.value()[0]);
        backward(loss);
        const auto st = opt.step(params);
        if (!st.ok) {
            throw NumericalError("pretrain_codec: " + st.diagnostic);
        }
    }
    // Standardization statistics from the training latents.
    Tensor z;
    {
        NoGradGuard ng;
        z = codec.encode_raw(Var::constant(train)).value();
    }
    const std::size_t L = codec.latent_dim();
    Tensor mean({L}), sd({L});
    for (std::size_t j = 0; j < L; ++j) {
        double m = 0.0, s = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            m += z.at(r, j);
        }
        m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            s += (z.at(r, j) - m) * (z.at(r, j) - m);
        }
        mean[j] = m;
        sd[j] = std::max(std::sqrt(s / static_cast<double>(n)), 1e-6);
    }
    zero_grads(params);
    codec.freeze(mean, sd, config.threshold, 0.0);
    res.heldout_mse = reconstruction_mse(codec, heldout);
    codec.freeze(mean, sd, config.threshold, res.heldout_mse);
    res.usable = codec.usable();
    return res;
}

}  // namespace dollar
