#include "dollar/netcore/checkpoint.hpp"

#include <fstream>

#include "dollar/error.hpp"

namespace dollar {

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw ContractViolation("checkpoint has no tensor '" + name + "'");
}

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json j;
    j["schema_version"] = ckpt.schema_version;
    j["kind"] = ckpt.kind;
    j["meta"] = ckpt.meta;
    auto arr = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        arr.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.values()}});
    }
    j["tensors"] = std::move(arr);
    return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("schema_version"), "checkpoint: missing schema_version");
    Checkpoint c;
    c.schema_version = j.at("schema_version").get<int>();
    require(c.schema_version == kCheckpointSchema,
            "checkpoint: schema_version " + std::to_string(c.schema_version) + " unsupported (expected " +
                std::to_string(kCheckpointSchema) + ")");
    c.kind = j.value("kind", "");
    c.meta = j.value("meta", nlohmann::json::object());
    for (const auto& e : j.at("tensors")) {
        c.tensors.emplace_back(e.at("name").get<std::string>(),
                               Tensor(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>()));
    }
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path);
    }
    out << checkpoint_to_json(ckpt).dump();
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "checkpoint not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("checkpoint " + path + " is malformed: " + e.what());
    }
    return checkpoint_from_json(j);
}

std::vector<std::pair<std::string, Tensor>> snapshot(const std::vector<std::string>& names,
                                                     const std::vector<Var>& params) {
    require(names.size() == params.size(), "snapshot: names/params length mismatch");
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.emplace_back(names[i], params[i].value());
    }
    return out;
}

void restore(const std::vector<std::pair<std::string, Tensor>>& tensors, const std::vector<std::string>& names,
             const std::vector<Var>& params) {
    require(tensors.size() == params.size() && names.size() == params.size(),
            "restore: expected " + std::to_string(params.size()) + " tensors, got " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(tensors[i].first == names[i], "restore: expected tensor '" + names[i] + "', found '" +
                                                  tensors[i].first + "'");
        require(tensors[i].second.shape() == params[i].shape(), "restore: shape mismatch for " + names[i]);
        Var p = params[i];
        p.mutable_value() = tensors[i].second;
    }
}

}  // namespace dollar
