#include "dollar/netcore/network.hpp"

#include <cmath>
#include <cstring>

#include "dollar/error.hpp"

namespace dollar {

ParamStore::ParamStore(const ParamStore& other) : names_(other.names_) {
    vars_.reserve(other.vars_.size());
    for (const auto& v : other.vars_) {
        vars_.push_back(Var::parameter(v.value()));
    }
}

ParamStore& ParamStore::operator=(const ParamStore& other) {
    if (this != &other) {
        ParamStore tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

std::size_t ParamStore::add(std::string name, Tensor init) {
    names_.push_back(std::move(name));
    vars_.push_back(Var::parameter(std::move(init)));
    return vars_.size() - 1;
}

Var ParamStore::use(std::size_t i) const {
    const Var& v = vars_.at(i);
    return params_frozen() ? Var::constant(v.value()) : v;
}

std::size_t param_count(const std::vector<Var>& params) {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.value().size();
    }
    return n;
}

void zero_grads(const std::vector<Var>& params) {
    for (auto p : params) {
        p.zero_grad();
    }
}

namespace {
std::uint64_t fnv(std::uint64_t h, const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}
}  // namespace

std::uint64_t param_hash(const std::vector<Var>& params) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& p : params) {
        h = fnv(h, p.value());
    }
    return h;
}

std::uint64_t grad_hash(const std::vector<Var>& params) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& p : params) {
        h = fnv(h, p.grad());
    }
    return h;
}

bool grads_all_zero(const std::vector<Var>& params) {
    for (const auto& p : params) {
        if (!p.has_grad()) {
            continue;
        }
        const Tensor grad = p.grad();
        for (double g : grad.values()) {
            if (g != 0.0) {
                return false;
            }
        }
    }
    return true;
}

double grad_norm(const std::vector<Var>& params) {
    double s = 0.0;
    for (const auto& p : params) {
        if (p.has_grad()) {
            const Tensor grad = p.grad();
            for (double g : grad.values()) {
                s += g * g;
            }
        }
    }
    return std::sqrt(s);
}

std::vector<double> flatten_values(const std::vector<Var>& params) {
    std::vector<double> out;
    for (const auto& p : params) {
        out.insert(out.end(), p.value().values().begin(), p.value().values().end());
    }
    return out;
}

std::vector<double> flatten_grads(const std::vector<Var>& params) {
    std::vector<double> out;
    for (const auto& p : params) {
        const Tensor g = p.grad();
        out.insert(out.end(), g.values().begin(), g.values().end());
    }
    return out;
}

void assign_values(const std::vector<Var>& params, const std::vector<double>& flat) {
    require(flat.size() == param_count(params), "assign_values: size mismatch");
    std::size_t off = 0;
    for (auto p : params) {
        auto& v = p.mutable_value().values();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.begin());
        off += v.size();
    }
}

void copy_values(const std::vector<Var>& target, const std::vector<Var>& source) {
    require(target.size() == source.size(), "copy_values: parameter count mismatch");
    for (std::size_t i = 0; i < target.size(); ++i) {
        require(target[i].shape() == source[i].shape(), "copy_values: shape mismatch at " + std::to_string(i));
        Var t = target[i];
        t.mutable_value() = source[i].value();
    }
}

std::string Network::next_name(const char* kind) {
    return prefix_ + (prefix_.empty() ? "" : ".") + std::to_string(layers_.size()) + "." + kind;
}

Network& Network::linear(std::size_t in, std::size_t out, Rng& rng, double gain) {
    const double std = gain / std::sqrt(static_cast<double>(in));
    Tensor w = rng.normal({in, out});
    for (auto& v : w.values()) {
        v *= std;
    }
    const auto name = next_name("linear");
    const std::size_t wi = store_.add(name + ".w", std::move(w));
    const std::size_t bi = store_.add(name + ".b", Tensor({out}));
    layers_.emplace_back(layer::Linear{wi, bi});
    return *this;
}

Network& Network::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
                         Rng& rng) {
    const double std = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    Tensor w = rng.normal({out, in, kernel, kernel});
    for (auto& v : w.values()) {
        v *= std;
    }
    const auto name = next_name("conv");
    const std::size_t wi = store_.add(name + ".w", std::move(w));
    const std::size_t bi = store_.add(name + ".b", Tensor({out}));
    layers_.emplace_back(layer::Conv2d{wi, bi, stride, pad});
    return *this;
}

Network& Network::group_norm(std::size_t channels, std::size_t groups) {
    require(groups > 0 && channels % groups == 0, "group_norm: channels not divisible by groups");
    const auto name = next_name("gn");
    const std::size_t g = store_.add(name + ".gamma", Tensor({channels}, 1.0));
    const std::size_t b = store_.add(name + ".beta", Tensor({channels}));
    layers_.emplace_back(layer::GroupNorm{g, b, groups});
    return *this;
}

Network& Network::silu() {
    layers_.emplace_back(layer::SiLU{});
    return *this;
}

Network& Network::sigmoid() {
    layers_.emplace_back(layer::Sigmoid{});
    return *this;
}

Network& Network::global_avg_pool() {
    layers_.emplace_back(layer::GlobalAvgPool{});
    return *this;
}

Network& Network::reshape(Shape shape) {
    layers_.emplace_back(layer::Reshape{std::move(shape)});
    return *this;
}

Var Network::forward(const Var& x) const {
    Var h = x;
    for (const auto& l : layers_) {
        h = std::visit(
            [&](const auto& op) -> Var {
                using T = std::decay_t<decltype(op)>;
                if constexpr (std::is_same_v<T, layer::Linear>) {
                    return ops::linear(h, store_.use(op.w), store_.use(op.b));
                } else if constexpr (std::is_same_v<T, layer::Conv2d>) {
                    return ops::conv2d(h, store_.use(op.w), store_.use(op.b), op.stride, op.pad);
                } else if constexpr (std::is_same_v<T, layer::GroupNorm>) {
                    return ops::group_norm(h, store_.use(op.gamma), store_.use(op.beta), op.groups);
                } else if constexpr (std::is_same_v<T, layer::SiLU>) {
                    return ops::silu(h);
                } else if constexpr (std::is_same_v<T, layer::Sigmoid>) {
                    return ops::sigmoid(h);
                } else if constexpr (std::is_same_v<T, layer::GlobalAvgPool>) {
                    return ops::global_avg_pool(h);
                } else {
                    Shape s{h.rows()};
                    s.insert(s.end(), op.shape.begin(), op.shape.end());
                    return ops::reshape(h, std::move(s));
                }
            },
            l);
    }
    return h;
}

Tensor Network::forward(const Tensor& x) const {
    NoGradGuard guard;
    return forward(Var::constant(x)).value();
}

}  // namespace dollar
