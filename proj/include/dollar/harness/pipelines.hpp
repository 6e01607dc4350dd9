#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dollar/harness/manifest.hpp"

namespace dollar {

namespace fs = std::filesystem;

/// A required upstream artifact is missing or unreadable. The message names
/// the stage that produces it.
class StageError : public std::runtime_error {
public:
    StageError(const std::string& what, std::string stage) : std::runtime_error(what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct MetricRow {
    std::string metric;
    double value = 0.0;
    double std = 0.0;
    std::string config_hash;
    long iter = 0;
};

/// JSON-lines metric log, one object per row, written as rows arrive.
class MetricLog {
public:
    MetricLog(const fs::path& path, std::string config_hash);
    void add(const std::string& metric, double value, double std = 0.0, long iter = 0);
    const std::vector<MetricRow>& rows() const noexcept { return rows_; }
    const fs::path& path() const noexcept { return path_; }

private:
    fs::path path_;
    std::string hash_;
    std::vector<MetricRow> rows_;
};

std::vector<MetricRow> read_metric_log(const fs::path& path);
/// FNV-1a of the file bytes, hex.
std::string file_hash(const fs::path& path);

/// Data for one manifest: train/held-out splits of a single generated set,
/// the frozen codec, and the latents the diffusion models see.
struct RunData {
    ToyDataset train;
    ToyDataset heldout;
    LatentCodec codec;
    LabeledData train_latents;
    LabeledData heldout_latents;
    int null_class = 0;
};

/// gauss2d uses the identity codec; sprites8 loads checkpoints/codec.json.
RunData load_run_data(const RunManifest& m, const fs::path& out);
ToyDataset generate_split(const RunManifest& m, bool heldout);

struct SampleMetrics {
    double w2 = 0.0;
    /// Mean within-class rbf Vendi, bandwidth from the same-class reference.
    double vendi = 0.0;
    /// rbf Vendi of the whole set, bandwidth from the whole reference.
    double vendi_pooled = 0.0;
    /// Mean pixel reward (reward-less evaluation leaves 0).
    double reward = 0.0;
};

/// Metrics on decoded features (pixels for sprites8, coordinates for
/// gauss2d) against the held-out reference.
SampleMetrics sample_metrics(const Tensor& latents, const std::vector<int>& c, const RunData& data,
                             const PixelReward* reward, std::uint64_t seed);

/// Within-class rbf Vendi averaged over the classes present in `c`. Samples
/// under `null_class` are scored against the whole reference.
double class_vendi(const Tensor& x, const std::vector<int>& c, const Tensor& ref, const std::vector<int>& ref_c,
                   int null_class = -1);

/// Classes 0, 1, ..., k-1, 0, 1, ... for n samples.
std::vector<int> cycle_classes(std::size_t n, int k);
/// All n labels set to the null class k when unconditional, else cycled.
std::vector<int> sample_classes(std::size_t n, int k, bool unconditional);

RewardBundle make_reward_bundle(const RunManifest& m, std::uint64_t seed);

DenoiserModel load_teacher(const fs::path& out);
/// Distill state with student, fake and target restored from `prefix`
/// checkpoints (student, fake, target or finetuned_*).
DistillState load_distill_state(const RunManifest& m, const fs::path& out, const std::string& prefix = "");

struct PipelineOptions {
    int threads = 1;
    std::ostream* log = nullptr;
};

void run_train_codec(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
void run_train_teacher(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
void run_distill(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
void run_finetune(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
void run_ablate(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
void run_eval(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});
/// Summary table per metric log found under `out`, written to report.md,
/// plus plot_recipe.json for the CSV curves.
void run_report(const RunManifest& m, const fs::path& out, const PipelineOptions& opt = {});

const std::vector<std::string>& pipeline_commands();
/// Dispatches by command name and writes the resolved manifest to the output
/// directory first.
void run_pipeline(const std::string& command, const RunManifest& m, const fs::path& out,
                  const PipelineOptions& opt = {});

/// Output directory: --out if given, else manifest out_dir; relative paths
/// resolve under `root` (the output-root environment variable) when set.
fs::path resolve_out_dir(const RunManifest& m, const std::optional<std::string>& out_flag, const char* root);

}  // namespace dollar
