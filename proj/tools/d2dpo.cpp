// d2dpo: pretrain, finetune, sample, eval and verify from the command line.

#include <cstdlib>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "d2dpo/commands.hpp"
#include "d2dpo/experiment.hpp"

namespace {

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("d2dpo");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("D2DPO_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        spdlog::set_level(spdlog::level::info);
    }
}

}  // namespace

int main(int argc, char** argv) {
    configure_logging();
    namespace cli = d2dpo::cli;

    CLI::App app{"Masking-diffusion training and D2-DPO preference fine-tuning"};
    app.set_version_flag("--version", d2dpo::experiment::artifact_version());
    app.require_subcommand(1);

    std::string config;
    std::string out;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
    std::optional<double> eta;
    std::optional<int> steps;
    std::int64_t n = 1000;
    bool quick = false;
    bool full = false;

    auto add_overrides = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Override the seed");
        sub->add_option("--eta", eta, "Sampler re-masking rate (finetune: also the loss)");
        sub->add_option("--steps", steps, "Sampler Euler steps");
    };

    auto* pretrain = app.add_subcommand("pretrain", "Train the denoiser on the structured-integer data");
    pretrain->add_option("--config", config, "Run config JSON")->required();
    pretrain->add_option("--out", out, "Output directory")->required();
    add_overrides(pretrain);

    auto* finetune = app.add_subcommand("finetune", "D2-DPO fine-tuning from a pretrained checkpoint");
    finetune->add_option("--config", config, "Run config JSON")->required();
    finetune->add_option("--checkpoint", checkpoint, "Pretrained checkpoint (also the reference)")->required();
    finetune->add_option("--out", out, "Output directory")->required();
    add_overrides(finetune);

    auto* sample = app.add_subcommand("sample", "Draw sequences from a checkpoint");
    sample->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    sample->add_option("--n", n, "Number of samples")->capture_default_str();
    sample->add_option("--out", out, "Output directory")->required();
    add_overrides(sample);

    auto* eval = app.add_subcommand("eval", "VSR and odd ratio of a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    eval->add_option("--config", config, "Run config JSON (sampler and eval sections)");
    eval->add_option("--out", out, "Output directory")->required();
    add_overrides(eval);

    auto* verify = app.add_subcommand("verify", "Run the oracle checks");
    verify->add_flag("--quick", quick, "Quick suite (default)");
    verify->add_flag("--full", full, "Full suite");
    verify->add_option("--seed", seed, "Seed for the randomized checks");
    verify->add_option("--out", out, "Directory for report.json (stdout if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cli::kExitConfig;
    }

    const cli::Overrides overrides{seed, eta, steps};
    if (*pretrain) {
        return cli::cmd_pretrain(config, out, overrides);
    }
    if (*finetune) {
        return cli::cmd_finetune(config, checkpoint, out, overrides);
    }
    if (*sample) {
        return cli::cmd_sample(checkpoint, n, out, overrides);
    }
    if (*eval) {
        std::optional<std::filesystem::path> cfg_path;
        if (!config.empty()) {
            cfg_path = config;
        }
        return cli::cmd_eval(checkpoint, cfg_path, out, overrides);
    }
    if (quick && full) {
        spdlog::error("verify: --quick and --full are exclusive");
        return cli::kExitConfig;
    }
    d2dpo::oracle::VerifyOptions opts;
    opts.full = full;
    if (seed) {
        opts.seed = *seed;
    }
    return cli::cmd_verify(opts, out);
}
