#pragma once

// Subcommands behind the d2dpo executable. Each returns a process exit code
// and only writes inside its output directory; on failure every file it
// created there is removed again.

#include <cstdint>
#include <filesystem>
#include <optional>

#include "d2dpo/oracle.hpp"

namespace d2dpo::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitTraining = 3,
    kExitCheckpoint = 4,
    kExitVerification = 5,
};

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<double> eta;  // sampler eta; finetune also applies it to the loss
    std::optional<int> steps;   // sampler steps
};

namespace fs = std::filesystem;

// checkpoint.json, records.csv, config.resolved.json, metadata.json
int cmd_pretrain(const fs::path& config, const fs::path& out_dir, const Overrides& overrides = {});
int cmd_finetune(const fs::path& config, const fs::path& checkpoint, const fs::path& out_dir,
                 const Overrides& overrides = {});

// samples.txt: one sequence per line, digits concatenated when S <= 10,
// otherwise space-separated token ids.
int cmd_sample(const fs::path& checkpoint, std::int64_t n, const fs::path& out_dir, const Overrides& overrides = {});

// eval.json with VSR and odd ratio of freshly drawn samples. config is optional
// and only its sampler/eval sections and seed are used.
int cmd_eval(const fs::path& checkpoint, const std::optional<fs::path>& config, const fs::path& out_dir,
             const Overrides& overrides = {});

// report.json in out_dir, or the report on stdout when out_dir is empty.
int cmd_verify(const oracle::VerifyOptions& opts, const fs::path& out_dir);

}  // namespace d2dpo::cli
