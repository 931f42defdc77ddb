#pragma once

// JSON run configuration. Layout:
//
//   {
//     "n_bits": 8, "seed": 1234,                       (required)
//     "model":    {"hidden": [128, 128]},
//     "pretrain": {"epochs", "batch_size", "dataset_multiplicity", "t_min", "t_max", "optimizer"},
//     "finetune": {"epochs", "batch_size", "num_pairs", "lr_schedule", "loss_eval_draws", "optimizer"},
//     "dpo":      {"beta", "eta", "t_min", "t_max", "mc_t_samples", "d_term"},
//     "sampler":  {"num_steps", "eta", "t_max"},
//     "eval":     {"samples", "every"},
//     "record_wall_time": false
//   }
//
// "optimizer" is {"lr", "beta1", "beta2", "eps"}. Omitted keys take the
// RunConfig defaults; unknown keys are errors.

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "d2dpo/experiment.hpp"

namespace d2dpo {

// Message always starts with the offending field path, e.g. "config.n_bits: ...".
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

experiment::RunConfig parse_run_config(const nlohmann::json& doc);
experiment::RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json run_config_to_json(const experiment::RunConfig& cfg);

}  // namespace d2dpo
