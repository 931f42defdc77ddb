#include "d2dpo/commands.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "d2dpo/config.hpp"
#include "d2dpo/experiment.hpp"

namespace d2dpo::cli {

namespace {

using nlohmann::json;
using experiment::RunConfig;
using experiment::TrainRecord;

// Tracks files written into the output directory so a failed command can
// remove them. The directory itself is removed only if this run created it.
class OutputDir {
public:
    explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
        if (dir_.empty()) {
            throw std::invalid_argument("--out is required");
        }
        if (!fs::exists(dir_)) {
            fs::create_directories(dir_);
            created_dir_ = true;
        } else if (!fs::is_directory(dir_)) {
            throw std::invalid_argument(dir_.string() + " exists and is not a directory");
        }
    }

    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;

    ~OutputDir() {
        if (committed_) {
            return;
        }
        std::error_code ec;
        for (const auto& p : written_) {
            fs::remove(p, ec);
        }
        if (created_dir_) {
            fs::remove(dir_, ec);
        }
    }

    void write(const std::string& name, const std::string& contents) {
        const fs::path path = dir_ / name;
        written_.push_back(path);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << contents;
        if (!out) {
            throw std::runtime_error("cannot write " + path.string());
        }
    }

    void commit() { committed_ = true; }

private:
    fs::path dir_;
    std::vector<fs::path> written_;
    bool created_dir_ = false;
    bool committed_ = false;
};

void apply(const Overrides& o, RunConfig& cfg, bool eta_to_loss) {
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.eta) {
        cfg.sampler.eta = *o.eta;
        if (eta_to_loss) {
            cfg.dpo.eta = *o.eta;
        }
    }
    if (o.steps) {
        cfg.sampler.num_steps = *o.steps;
    }
}

RunConfig resolve_config(const fs::path& path, const Overrides& o, bool eta_to_loss) {
    RunConfig cfg = load_run_config(path);
    apply(o, cfg, eta_to_loss);
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("flags: ") + e.what());
    }
    return cfg;
}

void validate_sampler(const SamplerConfig& s) {
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("flags: ") + e.what());
    }
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

json metadata(const std::string& command, const RunConfig& cfg, double wall_ms) {
    json meta;
    meta["command"] = command;
    meta["artifact_version"] = experiment::artifact_version();
    meta["seed"] = cfg.seed;
    meta["config"] = run_config_to_json(cfg);
    if (cfg.record_wall_time) {
        meta["total_wall_ms"] = std::llround(wall_ms);
    }
    return meta;
}

void log_record(const TrainRecord& r) {
    if (r.vsr) {
        spdlog::info("{} epoch {}: loss {:.6f} vsr {:.3f} odd_ratio {:.3f}", r.phase, r.epoch, r.loss, *r.vsr,
                     *r.odd_ratio);
    } else {
        spdlog::debug("{} epoch {}: loss {:.6f}", r.phase, r.epoch, r.loss);
    }
}

std::string records_text(const std::vector<TrainRecord>& records) {
    std::ostringstream csv;
    experiment::write_records_csv(csv, records);
    return csv.str();
}

std::string format_sequence(const Sequence& s, int num_tokens) {
    std::string line;
    for (std::size_t d = 0; d < s.size(); ++d) {
        if (num_tokens <= 10) {
            line += static_cast<char>('0' + s[d]);
        } else {
            if (d > 0) {
                line += ' ';
            }
            line += std::to_string(s[d]);
        }
    }
    return line;
}

// Maps the exception of a failed command to its exit class.
template <class Fn>
int guarded(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        spdlog::error("{}: {}", name, e.what());
        return kExitConfig;
    } catch (const CheckpointError& e) {
        spdlog::error("{}: checkpoint: {}", name, e.what());
        return kExitCheckpoint;
    } catch (const experiment::TrainingError& e) {
        spdlog::error("{}: training aborted: {}", name, e.what());
        return kExitTraining;
    } catch (const NonFiniteGradient& e) {
        spdlog::error("{}: training aborted: {}", name, e.what());
        return kExitTraining;
    } catch (const std::invalid_argument& e) {
        spdlog::error("{}: {}", name, e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        spdlog::error("{}: {}", name, e.what());
        return kExitTraining;
    }
}

}  // namespace

int cmd_pretrain(const fs::path& config, const fs::path& out_dir, const Overrides& overrides) {
    return guarded("pretrain", [&] {
        const RunConfig cfg = resolve_config(config, overrides, false);
        OutputDir out(out_dir);
        spdlog::info("pretrain: n_bits {} seed {} epochs {}", cfg.n_bits, cfg.seed, cfg.pretrain_epochs);
        const auto result = experiment::run_pretrain(cfg, log_record);
        out.write("checkpoint.json", checkpoint_to_string(result.params));
        out.write("records.csv", records_text(result.records));
        out.write("config.resolved.json", dump(run_config_to_json(cfg)));
        out.write("metadata.json", dump(metadata("pretrain", cfg, result.total_wall_ms)));
        out.commit();
        return static_cast<int>(kExitOk);
    });
}

int cmd_finetune(const fs::path& config, const fs::path& checkpoint, const fs::path& out_dir,
                 const Overrides& overrides) {
    return guarded("finetune", [&] {
        const RunConfig cfg = resolve_config(config, overrides, true);
        const DenoiserParams start = load_checkpoint(checkpoint);
        if (start.arch() != cfg.architecture()) {
            throw CheckpointError("architecture in " + checkpoint.string() + " does not match the config");
        }
        OutputDir out(out_dir);
        spdlog::info("finetune: n_bits {} seed {} epochs {} beta {}", cfg.n_bits, cfg.seed, cfg.finetune_epochs,
                     cfg.dpo.beta);
        const auto result = experiment::run_finetune(start, cfg, log_record);
        out.write("checkpoint.json", checkpoint_to_string(result.params));
        out.write("records.csv", records_text(result.records));
        out.write("config.resolved.json", dump(run_config_to_json(cfg)));
        json meta = metadata("finetune", cfg, result.total_wall_ms);
        meta["reference_checkpoint"] = checkpoint.string();
        out.write("metadata.json", dump(meta));
        out.commit();
        return static_cast<int>(kExitOk);
    });
}

int cmd_sample(const fs::path& checkpoint, std::int64_t n, const fs::path& out_dir, const Overrides& overrides) {
    return guarded("sample", [&] {
        if (n < 0) {
            throw ConfigError("flags.n: must be >= 0");
        }
        SamplerConfig sampler;
        sampler.rng_seed = overrides.seed.value_or(0);
        sampler.eta = overrides.eta.value_or(sampler.eta);
        sampler.num_steps = overrides.steps.value_or(sampler.num_steps);
        validate_sampler(sampler);
        const DenoiserParams params = load_checkpoint(checkpoint);
        OutputDir out(out_dir);
        const MlpDenoiser model(params);
        const auto samples = generate(model, sampler, static_cast<std::size_t>(n));
        std::string text;
        for (const auto& s : samples) {
            text += format_sequence(s, params.arch().num_tokens);
            text += '\n';
        }
        out.write("samples.txt", text);
        out.commit();
        spdlog::info("sample: wrote {} sequences", samples.size());
        return static_cast<int>(kExitOk);
    });
}

int cmd_eval(const fs::path& checkpoint, const std::optional<fs::path>& config, const fs::path& out_dir,
             const Overrides& overrides) {
    return guarded("eval", [&] {
        RunConfig cfg = config ? load_run_config(*config) : RunConfig{};
        const DenoiserParams params = load_checkpoint(checkpoint);
        if (params.arch().num_tokens != 2) {
            throw CheckpointError("eval needs a binary (S = 2) checkpoint");
        }
        cfg.n_bits = params.arch().num_dims;
        cfg.hidden = params.arch().hidden;
        apply(overrides, cfg, false);
        validate_sampler(cfg.sampler);
        OutputDir out(out_dir);
        const auto m = experiment::evaluate(params, cfg, "eval", 0);
        json report;
        report["vsr"] = m.vsr;
        report["odd_ratio"] = m.odd_ratio;
        report["num_samples"] = cfg.eval_samples;
        report["seed"] = cfg.seed;
        report["sampler"] = {{"num_steps", cfg.sampler.num_steps}, {"eta", cfg.sampler.eta},
                             {"t_max", cfg.sampler.t_max}};
        report["checkpoint"] = checkpoint.string();
        out.write("eval.json", dump(report));
        out.commit();
        spdlog::info("eval: vsr {:.3f} odd_ratio {:.3f}", m.vsr, m.odd_ratio);
        return static_cast<int>(kExitOk);
    });
}

int cmd_verify(const oracle::VerifyOptions& opts, const fs::path& out_dir) {
    return guarded("verify", [&] {
        std::optional<OutputDir> out;
        if (!out_dir.empty()) {
            out.emplace(out_dir);
        }
        const auto results = oracle::run_verification(opts);
        bool pass = true;
        for (const auto& r : results) {
            pass = pass && r.pass;
            spdlog::info("verify {}: metric {:.3e} threshold {:.3e} {}", r.check_name, r.metric, r.threshold,
                         r.pass ? "pass" : "FAIL");
        }
        const std::string report = oracle::report_to_json(results);
        if (out) {
            out->write("report.json", report);
            out->commit();
        } else {
            std::cout << report;
        }
        return static_cast<int>(pass ? kExitOk : kExitVerification);
    });
}

}  // namespace d2dpo::cli
