#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dollar/diffusion/training.hpp"
#include "dollar/distill/distill.hpp"
#include "dollar/harness/datasets.hpp"
#include "dollar/latentspace/codec.hpp"
#include "dollar/metrics/metrics.hpp"
#include "dollar/reward/finetune.hpp"
#include "dollar/schedule/schedule.hpp"
#include "json.hpp"

namespace dollar {

inline constexpr int kManifestSchema = 1;

/// Invalid manifest or command line: a user-fixable configuration problem.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataSection {
    std::size_t n = 65536;
    std::size_t heldout = 4096;
};

struct TeacherSection {
    DenoiserArch arch = DenoiserArch::mlp;
    std::size_t hidden = 256;
    std::size_t depth = 3;
    std::size_t temb_dim = 64;
    std::size_t class_dim = 32;
    ParamKind kind = ParamKind::conjugate_v;
    TeacherTrainConfig train;
};

struct DistillSection {
    DistillConfig config;
    long iters = 5000;
    long eval_every = 500;
    std::size_t eval_samples = 1024;
};

struct RewardSection {
    std::string name = "brightness";
    RewardMode mode = RewardMode::lrm;
    LrmArch arch = LrmArch::vector;
    std::size_t width = 64;
    std::size_t groups = 4;
    bool conditional = false;
    double lr = 1e-3;
    /// > 1 averages the pixel reward over consecutive groups of rows.
    std::size_t group = 1;
};

struct FinetuneSection {
    long iters = 2000;
    long eval_every = 100;
    std::size_t eval_samples = 512;
};

struct AblateSection {
    std::vector<std::vector<int>> grids{{999}, {499, 999}, {249, 499, 749, 999}};
    std::vector<int> m_values{1, 5};
    std::vector<ParamKind> kinds{ParamKind::conjugate_v, ParamKind::x_pred};
    long iters = 2000;
};

struct EvalSection {
    std::size_t samples = 1024;
    /// Guidance for class-conditional evaluation samples of the teacher.
    double teacher_w = 0.0;
    int teacher_steps = 50;
    /// 0 disables the wall-clock rows (they are not reproducible).
    int timing_trials = 5;
    std::vector<int> timing_steps{1, 2, 4, 50};
    std::size_t timing_batch = 256;
};

struct Seeds {
    std::uint64_t data = 0;
    std::uint64_t codec = 1;
    std::uint64_t teacher = 2;
    std::uint64_t distill = 3;
    std::uint64_t finetune = 4;
    std::uint64_t eval = 5;
};

/// Everything a run depends on. Serialized with every field present.
struct RunManifest {
    int schema_version = kManifestSchema;
    std::string name = "run";
    DomainKind domain = DomainKind::gauss2d;
    ScheduleConfig schedule;
    DataSection data;
    CodecConfig codec;
    TeacherSection teacher;
    DistillSection distill;
    RewardSection reward;
    FinetuneSection finetune;
    AblateSection ablate;
    EvalSection eval;
    Seeds seeds;
    std::string out_dir = "runs/run";

    std::size_t latent_dim() const;
    /// Real classes plus the null class.
    int num_classes() const;
    DenoiserConfig teacher_model() const;
    LrmConfig lrm_config() const;
    TeacherTrainConfig teacher_train() const;
    CodecConfig codec_config() const;
    FinetuneConfig finetune_config() const;
};

/// Domain-dependent defaults (teacher budget, codec use).
RunManifest default_manifest(DomainKind domain);

/// Reads over the domain defaults. Unknown fields, wrong types and invalid
/// values raise ConfigError naming the field path.
RunManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const RunManifest& m);

/// Cross-field checks (grids on the schedule, positive budgets, reward name).
void validate(const RunManifest& m);

/// Hex digest of the canonical manifest without out_dir.
std::string config_hash(const RunManifest& m);

/// Every seed becomes base + stage offset (data 0 ... eval 5).
void override_seeds(RunManifest& m, std::uint64_t base);

}  // namespace dollar
