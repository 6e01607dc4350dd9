#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dollar/netcore/autodiff.hpp"
#include "dollar/netcore/rng.hpp"

namespace dollar {

/// Named trainable tensors. Copies are deep: the copy owns fresh leaves.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore& other);
    ParamStore& operator=(const ParamStore& other);
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    std::size_t add(std::string name, Tensor init);

    /// Parameter for use in a forward pass. Under FreezeParamsGuard this is
    /// a constant carrying the same value.
    Var use(std::size_t i) const;
    const Var& var(std::size_t i) const { return vars_.at(i); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    std::size_t size() const noexcept { return vars_.size(); }
    const std::vector<Var>& vars() const noexcept { return vars_; }

private:
    std::vector<std::string> names_;
    std::vector<Var> vars_;
};

/// Helpers over a flat list of parameter handles.
std::size_t param_count(const std::vector<Var>& params);
void zero_grads(const std::vector<Var>& params);
/// FNV-1a over the raw bytes of every value (order sensitive).
std::uint64_t param_hash(const std::vector<Var>& params);
/// Same hash over accumulated gradients (zeros when absent).
std::uint64_t grad_hash(const std::vector<Var>& params);
bool grads_all_zero(const std::vector<Var>& params);
double grad_norm(const std::vector<Var>& params);
std::vector<double> flatten_values(const std::vector<Var>& params);
std::vector<double> flatten_grads(const std::vector<Var>& params);
void assign_values(const std::vector<Var>& params, const std::vector<double>& flat);
void copy_values(const std::vector<Var>& target, const std::vector<Var>& source);

namespace layer {
struct Linear {
    std::size_t w, b;
};
struct Conv2d {
    std::size_t w, b, stride, pad;
};
struct GroupNorm {
    std::size_t gamma, beta, groups;
};
struct SiLU {};
struct Sigmoid {};
struct GlobalAvgPool {};
/// Reshape keeping the batch extent; `shape` excludes it.
struct Reshape {
    Shape shape;
};
}  // namespace layer

using Layer = std::variant<layer::Linear, layer::Conv2d, layer::GroupNorm, layer::SiLU, layer::Sigmoid,
                           layer::GlobalAvgPool, layer::Reshape>;

/// Sequential stack of parameterized maps.
class Network {
public:
    Network() = default;
    explicit Network(std::string prefix) : prefix_(std::move(prefix)) {}

    Network& linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
    Network& conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
                    Rng& rng);
    Network& group_norm(std::size_t channels, std::size_t groups);
    Network& silu();
    Network& sigmoid();
    Network& global_avg_pool();
    Network& reshape(Shape shape);

    Var forward(const Var& x) const;
    Tensor forward(const Tensor& x) const;

    const ParamStore& params() const noexcept { return store_; }
    std::vector<Var> parameters() const { return store_.vars(); }
    std::size_t layer_count() const noexcept { return layers_.size(); }

private:
    std::string next_name(const char* kind);

    std::string prefix_;
    std::vector<Layer> layers_;
    ParamStore store_;
};

}  // namespace dollar
