#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dollar/error.hpp"
#include "dollar/harness/pipelines.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dollar: few-step diffusion distillation experiments on toy domains"};
    app.require_subcommand(1);

    std::string manifest_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed_override;
    bool dry_run = false;
    int threads = 1;

    for (const auto& name : dollar::pipeline_commands()) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--manifest", manifest_path, "Run manifest (JSON)")->required();
        sub->add_option("--out", out, "Output directory (overrides out_dir; relative to $DOLLAR_OUT_ROOT)");
        sub->add_option("--seed-override", seed_override, "Replace every seed with base + stage offset");
        sub->add_flag("--dry-run", dry_run, "Print the resolved manifest and exit");
        sub->add_option("--threads", threads, "Parallel child runs (ablate)")->check(CLI::PositiveNumber);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        dollar::RunManifest m = dollar::load_manifest(manifest_path);
        if (seed_override) {
            dollar::override_seeds(m, *seed_override);
        }
        const dollar::fs::path dir = dollar::resolve_out_dir(m, out, std::getenv("DOLLAR_OUT_ROOT"));
        if (dry_run) {
            nlohmann::json j = dollar::manifest_to_json(m);
            j["out_dir"] = dir.string();
            std::cout << j.dump(2) << '\n';
            return kOk;
        }
        dollar::PipelineOptions opt;
        opt.threads = threads;
        opt.log = &std::cout;
        dollar::run_pipeline(command, m, dir, opt);
        return kOk;
    } catch (const dollar::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const dollar::StageError& e) {
        std::cerr << command << ": " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << command << " failed: " << e.what() << '\n';
        return kRuntimeError;
    }
}
