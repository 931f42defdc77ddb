#pragma once

// Structured-integer task: i ones followed by D - i zeros. Pre-train the
// denoiser on all D + 1 encodings, then align it toward odd integers with
// preference pairs.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2dpo/ctmc.hpp"
#include "d2dpo/denoiser.hpp"
#include "d2dpo/losses.hpp"

namespace d2dpo::experiment {

Sequence encode_integer(int value, int n_bits);
// The integer a valid encoding represents, or nullopt for any other word.
std::optional<int> decode_integer(const Sequence& seq);

// All n_bits + 1 encodings, each repeated `multiplicity` times.
std::vector<Sequence> build_dataset(int n_bits, int multiplicity = 1);

// Winner uniform over odd values in {0..n_bits}, loser uniform over even values.
std::vector<PreferencePair> build_preferences(int n_bits, std::size_t num_pairs, Rng& rng);

double metric_vsr(const std::vector<Sequence>& samples);
// Invalid samples count as not odd.
double metric_odd_ratio(const std::vector<Sequence>& samples);

enum class LrSchedule { Constant, Cosine };

// Learning rate for epoch in [1, num_epochs]; Cosine decays from base at epoch 1
// towards zero after the last epoch.
double scheduled_lr(LrSchedule schedule, double base, int epoch, int num_epochs);

struct RunConfig {
    int n_bits = 8;
    std::uint64_t seed = 1234;
    std::vector<int> hidden = {128, 128};

    int pretrain_epochs = 300;
    int pretrain_batch = 64;
    int dataset_multiplicity = 64;
    double pretrain_t_min = 1e-3;
    double pretrain_t_max = 1.0 - 1e-3;
    AdamHyper pretrain_opt{};

    int finetune_epochs = 200;
    int finetune_batch = 512;  // full batch
    int num_pairs = 512;
    AdamHyper finetune_opt{.lr = 1.5e-4};
    LrSchedule finetune_schedule = LrSchedule::Constant;
    // t-draws per pair for the recorded finetune loss, fixed across epochs.
    int loss_eval_draws = 4;
    DpoConfig dpo{};

    SamplerConfig sampler{};  // rng_seed is derived per evaluation
    int eval_samples = 1000;
    int eval_every = 5;

    // Wall time makes records.csv non-reproducible, so it is opt-in.
    bool record_wall_time = false;

    Architecture architecture() const;
    void validate() const;
};

struct TrainRecord {
    int epoch = 0;
    std::string phase;
    double loss = 0.0;
    std::optional<double> odd_ratio;
    std::optional<double> vsr;
    std::uint64_t theta_queries = 0;
    std::uint64_t ref_queries = 0;
    std::int64_t wall_ms = 0;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using RecordCallback = std::function<void(const TrainRecord&)>;

struct PhaseResult {
    DenoiserParams params;
    std::vector<TrainRecord> records;
    double total_wall_ms = 0.0;
};

struct EvalMetrics {
    double vsr = 0.0;
    double odd_ratio = 0.0;
};

// Samples eval_samples sequences with a stream reserved for (phase, epoch).
EvalMetrics evaluate(const DenoiserParams& params, const RunConfig& cfg, const std::string& phase, int epoch);

PhaseResult run_pretrain(const RunConfig& cfg, const RecordCallback& on_record = {});

// theta starts at the checkpoint; the reference is a frozen copy of it.
PhaseResult run_finetune(const DenoiserParams& checkpoint, const RunConfig& cfg, const RecordCallback& on_record = {});

inline constexpr const char* kRecordsHeader = "epoch,phase,loss,odd_ratio,vsr,theta_queries,ref_queries,wall_ms";

void write_records_csv(std::ostream& out, const std::vector<TrainRecord>& records);
std::vector<TrainRecord> read_records_csv(std::istream& in);

// Full-window trailing averages; size() - window + 1 entries, empty if too short.
std::vector<double> moving_average(const std::vector<double>& values, std::size_t window);

std::string artifact_version();

}  // namespace d2dpo::experiment
