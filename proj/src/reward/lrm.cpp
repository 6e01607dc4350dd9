#include "dollar/reward/lrm.hpp"

#include <cmath>

#include "dollar/error.hpp"

namespace dollar {

LatentRewardModel::LatentRewardModel(const LrmConfig& config, std::uint64_t seed) : config_(config) {
    Rng rng(seed);
    const std::size_t W = config.width;
    require(W % config.groups == 0, "LatentRewardModel: width not divisible by groups");
    if (config.arch == LrmArch::image) {
        require(config.latent_dim == config.channels * config.side * config.side,
                "LatentRewardModel: latent_dim must equal channels * side^2");
        trunk_.reshape({config.channels, config.side, config.side})
            .conv2d(config.channels, W, 3, 1, 1, rng)
            .group_norm(W, config.groups)
            .silu()
            .conv2d(W, W, 3, 1, 1, rng)
            .group_norm(W, config.groups)
            .silu();
    } else if (config.arch == LrmArch::linear) {
        require(!config.conditional, "LatentRewardModel: the linear model is unconditional");
        head_.linear(config.latent_dim, 1, rng);
        return;
    } else {
        trunk_.linear(config.latent_dim, W, rng).group_norm(W, config.groups).silu().linear(W, W, rng).group_norm(
            W, config.groups).silu();
    }
    if (config.conditional) {
        require(config.num_classes >= 1, "LatentRewardModel: conditional model needs classes");
        auto init = [&](Shape s, double std) {
            Tensor t = rng.normal(std::move(s));
            for (auto& v : t.values()) {
                v *= std;
            }
            return t;
        };
        const double s = 1.0 / std::sqrt(static_cast<double>(W));
        emb_ = attn_.add("lrm.attn.embed", init({static_cast<std::size_t>(config.num_classes), W}, 1.0));
        wq_ = attn_.add("lrm.attn.wq", init({W, W}, s));
        wk_ = attn_.add("lrm.attn.wk", init({W, W}, s));
        wv_ = attn_.add("lrm.attn.wv", init({W, W}, s));
        mix_.linear(3 * W, W, rng).silu();
    }
    head_.linear(W, 1, rng);
}

Var LatentRewardModel::forward(const Var& z, const std::vector<int>& c) const {
    require(z.value().size() == z.rows() * config_.latent_dim,
            "LatentRewardModel: expected [n, " + std::to_string(config_.latent_dim) + "]");
    const std::size_t n = z.rows(), W = config_.width;
    if (config_.arch == LrmArch::linear) {
        return head_.forward(z);
    }
    Var h = trunk_.forward(z);
    Var pooled = config_.arch == LrmArch::image ? ops::global_avg_pool(h) : h;
    if (!config_.conditional) {
        return head_.forward(pooled);
    }
    require(c.size() == n, "LatentRewardModel: one condition per row");
    // Tokens [n * P, W]: spatial positions, or the pooled vector.
    std::size_t P = 1;
    Var tokens = pooled;
    if (config_.arch == LrmArch::image) {
        P = config_.side * config_.side;
        tokens = ops::reshape(ops::swap_last(h), {n * P, W});
    }
    const Var e = ops::embedding(attn_.use(emb_), c);
    const Var q = ops::matmul(e, attn_.use(wq_));
    const Var k = ops::matmul(tokens, attn_.use(wk_));
    const Var v = ops::matmul(tokens, attn_.use(wv_));
    const Var w = ops::softmax_rows(ops::scale(ops::token_dot(q, k, P), 1.0 / std::sqrt(static_cast<double>(W))));
    const Var attended = ops::token_mix(w, v);
    return head_.forward(mix_.forward(ops::concat_cols({pooled, attended, e})));
}

Tensor LatentRewardModel::predict(const Tensor& z, const std::vector<int>& c) const {
    NoGradGuard ng;
    return forward(Var::constant(z), c).value().reshaped({z.rows()});
}

std::vector<Var> LatentRewardModel::parameters() const {
    std::vector<Var> p = trunk_.parameters();
    for (const Network* net : {&mix_, &head_}) {
        const auto q = net->parameters();
        p.insert(p.end(), q.begin(), q.end());
    }
    p.insert(p.end(), attn_.vars().begin(), attn_.vars().end());
    return p;
}

std::vector<std::string> LatentRewardModel::parameter_names() const {
    std::vector<std::string> out;
    for (const Network* net : {&trunk_, &mix_, &head_}) {
        for (std::size_t i = 0; i < net->params().size(); ++i) {
            out.push_back(net->params().name(i));
        }
    }
    for (std::size_t i = 0; i < attn_.size(); ++i) {
        out.push_back(attn_.name(i));
    }
    return out;
}

std::string to_string(LrmArch a) {
    switch (a) {
        case LrmArch::vector:
            return "vector";
        case LrmArch::image:
            return "image";
        case LrmArch::linear:
            return "linear";
    }
    return "vector";
}

LrmArch lrm_arch_from_string(const std::string& s) {
    if (s == "vector") {
        return LrmArch::vector;
    }
    if (s == "image") {
        return LrmArch::image;
    }
    if (s == "linear") {
        return LrmArch::linear;
    }
    throw ContractViolation("unknown LRM architecture '" + s + "' (expected vector, image or linear)");
}

std::string to_string(RewardMode m) {
    switch (m) {
        case RewardMode::none:
            return "none";
        case RewardMode::lrm:
            return "lrm";
        case RewardMode::ddpo:
            return "ddpo";
    }
    return "none";
}

RewardMode reward_mode_from_string(const std::string& s) {
    if (s == "none") {
        return RewardMode::none;
    }
    if (s == "lrm") {
        return RewardMode::lrm;
    }
    if (s == "ddpo") {
        return RewardMode::ddpo;
    }
    throw ContractViolation("unknown reward mode '" + s + "' (expected none, lrm or ddpo)");
}

Var lrm_regression_loss(const LatentRewardModel& lrm, const Tensor& latents, const std::vector<int>& c,
                        const Tensor& targets) {
    require(targets.size() == latents.rows(), "lrm_regression_loss: one target per row");
    const Var pred = lrm.forward(Var::constant(latents), c);
    return ops::mean(ops::square(pred - Var::constant(targets.reshaped(pred.shape()))));
}

double lrm_train_step(RewardBundle& bundle, const LatentCodec& codec, const Tensor& real_latents,
                      const std::vector<int>& real_c, const Tensor& gen_latents, const std::vector<int>& gen_c) {
    codec.require_frozen("lrm_train_step");
    const Tensor x = concat_rows({real_latents, gen_latents});
    std::vector<int> c = real_c;
    c.insert(c.end(), gen_c.begin(), gen_c.end());
    const Tensor targets = bundle.pixel.evaluate_batch(codec.decode(x), c);
    const auto params = bundle.lrm.parameters();
    zero_grads(params);
    const Var loss = lrm_regression_loss(bundle.lrm, x, c, targets);
    backward(loss);
    const auto st = bundle.lrm_opt.step(params);
    if (!st.ok) {
        throw NumericalError("lrm_train_step: " + st.diagnostic);
    }
    ++bundle.lrm.steps_trained;
    return loss.value()[0];
}

double lrm_eval_mse(const LatentRewardModel& lrm, const PixelReward& pixel, const LatentCodec& codec,
                    const Tensor& latents, const std::vector<int>& c) {
    const Tensor truth = pixel.evaluate_batch(codec.decode(latents), c);
    const Tensor pred = lrm.predict(latents, c);
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    }
    return s / static_cast<double>(truth.size());
}

Network pixel_surrogate_network(std::size_t pixel_dim, std::uint64_t seed) {
    Rng rng(seed);
    Network net("surrogate");
    net.linear(pixel_dim, 256, rng).silu().linear(256, 256, rng).silu().linear(256, 1, rng);
    return net;
}

LrmAccounting lrm_accounting(const LatentRewardModel& lrm, const LatentCodec& codec) {
    LrmAccounting a;
    a.lrm_params = param_count(lrm.parameters());
    a.decoder_params = param_count(codec.decoder_parameters());
    a.surrogate_params = param_count(pixel_surrogate_network(codec.pixel_dim(), 0).parameters());
    a.ratio = static_cast<double>(a.lrm_params) / static_cast<double>(a.decoder_params + a.surrogate_params);
    return a;
}

}  // namespace dollar
