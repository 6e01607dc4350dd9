#include "dollar/diffusion/denoiser.hpp"

#include <cmath>

#include "dollar/error.hpp"

namespace dollar {

std::string to_string(ParamKind kind) { return kind == ParamKind::conjugate_v ? "conjugate-v" : "x-pred"; }

ParamKind param_kind_from_string(const std::string& s) {
    if (s == "conjugate-v") {
        return ParamKind::conjugate_v;
    }
    if (s == "x-pred") {
        return ParamKind::x_pred;
    }
    throw ContractViolation("unknown param_kind '" + s + "' (expected conjugate-v or x-pred)");
}

std::string to_string(DenoiserArch arch) { return arch == DenoiserArch::conv ? "conv" : "mlp"; }

DenoiserArch denoiser_arch_from_string(const std::string& s) {
    if (s == "mlp") {
        return DenoiserArch::mlp;
    }
    if (s == "conv") {
        return DenoiserArch::conv;
    }
    throw ContractViolation("unknown denoiser arch '" + s + "' (expected mlp or conv)");
}

Tensor time_embedding(const std::vector<int>& t, int T, std::size_t dim) {
    require(dim % 2 == 0 && dim >= 2, "time_embedding: dim must be even");
    const std::size_t half = dim / 2;
    Tensor out({t.size(), dim});
    for (std::size_t r = 0; r < t.size(); ++r) {
        const double u = static_cast<double>(t[r]) / static_cast<double>(T) * 1000.0;
        for (std::size_t k = 0; k < half; ++k) {
            const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            out[r * dim + k] = std::sin(u * f);
            out[r * dim + half + k] = std::cos(u * f);
        }
    }
    return out;
}

DenoiserModel::DenoiserModel(const DenoiserConfig& config, std::uint64_t seed)
    : config_(config), conv_("conv"), mlp_("mlp") {
    require(config_.num_classes >= 1, "denoiser: need at least the null class");
    require(config_.depth >= 1, "denoiser: depth must be positive");
    Rng rng(seed);
    std::size_t in = config_.latent_dim + config_.temb_dim + config_.class_dim;
    if (config_.arch == DenoiserArch::conv) {
        require(config_.channels * config_.side * config_.side == config_.latent_dim,
                "denoiser: channels*side*side must equal latent_dim");
        conv_.reshape({config_.channels, config_.side, config_.side})
            .conv2d(config_.channels, config_.conv_width, 3, 1, 1, rng)
            .silu()
            .conv2d(config_.conv_width, config_.conv_width, 3, 1, 1, rng)
            .silu()
            .reshape({config_.conv_width * config_.side * config_.side});
        in += config_.conv_width * config_.side * config_.side;
    }
    mlp_.linear(in, config_.hidden, rng).silu();
    for (std::size_t d = 1; d < config_.depth; ++d) {
        mlp_.linear(config_.hidden, config_.hidden, rng).silu();
    }
    mlp_.linear(config_.hidden, config_.latent_dim, rng);
    Tensor table = rng.normal({static_cast<std::size_t>(config_.num_classes), config_.class_dim});
    embed_.add("class_embed", std::move(table));
}

Var DenoiserModel::forward(const Var& x_t, const std::vector<int>& t, const std::vector<int>& c) const {
    const std::size_t B = x_t.rows();
    require(x_t.cols() == config_.latent_dim, "denoiser: latent width " + std::to_string(x_t.cols()) +
                                                  " != " + std::to_string(config_.latent_dim));
    require(t.size() == B && c.size() == B, "denoiser: need one timestep and one class per row");
    std::vector<Var> parts{x_t, Var::constant(time_embedding(t, config_.T, config_.temb_dim)),
                           ops::embedding(embed_.use(0), c)};
    if (config_.arch == DenoiserArch::conv) {
        parts.insert(parts.begin(), conv_.forward(x_t));
    }
    return mlp_.forward(ops::concat_cols(parts));
}

std::vector<Var> DenoiserModel::parameters() const {
    std::vector<Var> out = conv_.parameters();
    const auto m = mlp_.parameters();
    out.insert(out.end(), m.begin(), m.end());
    out.push_back(embed_.var(0));
    return out;
}

std::vector<std::string> DenoiserModel::parameter_names() const {
    std::vector<std::string> out;
    for (const ParamStore* s : {&conv_.params(), &mlp_.params(), &embed_}) {
        for (std::size_t i = 0; i < s->size(); ++i) {
            out.push_back(s->name(i));
        }
    }
    return out;
}

Checkpoint DenoiserModel::to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "denoiser";
    const auto& c = config_;
    ck.meta = {{"arch", to_string(c.arch)}, {"latent_dim", c.latent_dim}, {"num_classes", c.num_classes},
               {"hidden", c.hidden},        {"depth", c.depth},           {"temb_dim", c.temb_dim},
               {"class_dim", c.class_dim},  {"param_kind", to_string(c.kind)}, {"T", c.T},
               {"channels", c.channels},    {"side", c.side},             {"conv_width", c.conv_width}};
    ck.tensors = snapshot(parameter_names(), parameters());
    return ck;
}

DenoiserModel DenoiserModel::from_checkpoint(const Checkpoint& ck) {
    require(ck.kind == "denoiser", "from_checkpoint: not a denoiser checkpoint (kind '" + ck.kind + "')");
    const auto& m = ck.meta;
    DenoiserConfig c;
    c.arch = denoiser_arch_from_string(m.at("arch").get<std::string>());
    c.latent_dim = m.at("latent_dim").get<std::size_t>();
    c.num_classes = m.at("num_classes").get<int>();
    c.hidden = m.at("hidden").get<std::size_t>();
    c.depth = m.at("depth").get<std::size_t>();
    c.temb_dim = m.at("temb_dim").get<std::size_t>();
    c.class_dim = m.at("class_dim").get<std::size_t>();
    c.kind = param_kind_from_string(m.at("param_kind").get<std::string>());
    c.T = m.at("T").get<int>();
    c.channels = m.at("channels").get<std::size_t>();
    c.side = m.at("side").get<std::size_t>();
    c.conv_width = m.at("conv_width").get<std::size_t>();
    DenoiserModel model(c, 0);
    restore(ck.tensors, model.parameter_names(), model.parameters());
    return model;
}

}  // namespace dollar
