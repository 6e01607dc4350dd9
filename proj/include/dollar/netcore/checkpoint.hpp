#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dollar/netcore/autodiff.hpp"
#include "json.hpp"

namespace dollar {

inline constexpr int kCheckpointSchema = 1;

/// Self-describing parameter container: (name, shape, values) triples plus
/// free-form metadata.
struct Checkpoint {
    int schema_version = kCheckpointSchema;
    std::string kind;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws ContractViolation on a schema-version mismatch or malformed file.
Checkpoint load_checkpoint(const std::string& path);

/// Names are paired positionally with params.
std::vector<std::pair<std::string, Tensor>> snapshot(const std::vector<std::string>& names,
                                                     const std::vector<Var>& params);
/// Restores params in order; names and shapes must match.
void restore(const std::vector<std::pair<std::string, Tensor>>& tensors, const std::vector<std::string>& names,
             const std::vector<Var>& params);

}  // namespace dollar
