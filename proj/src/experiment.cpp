#include "d2dpo/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

namespace d2dpo::experiment {

namespace {

const Alphabet kBinary(2);

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t phase_id(const std::string& phase) {
    if (phase == "pretrain") {
        return 1;
    }
    return phase == "finetune" ? 2 : 3;
}

void require_finite(double loss, const std::string& phase, int epoch) {
    if (!std::isfinite(loss)) {
        throw TrainingError(phase + " epoch " + std::to_string(epoch) + ": non-finite loss");
    }
}

bool eval_due(const RunConfig& cfg, int epoch, int last_epoch) {
    return epoch == 0 || epoch == last_epoch || epoch % cfg.eval_every == 0;
}

}  // namespace

Sequence encode_integer(int value, int n_bits) {
    if (n_bits < 1 || value < 0 || value > n_bits) {
        throw std::invalid_argument("encode_integer: value must lie in [0, n_bits]");
    }
    Sequence seq = Sequence::filled(static_cast<std::size_t>(n_bits), 0);
    for (int d = 0; d < value; ++d) {
        seq[static_cast<std::size_t>(d)] = 1;
    }
    return seq;
}

std::optional<int> decode_integer(const Sequence& seq) {
    std::size_t ones = 0;
    while (ones < seq.size() && seq[ones] == 1) {
        ++ones;
    }
    for (std::size_t d = ones; d < seq.size(); ++d) {
        if (seq[d] != 0) {
            return std::nullopt;
        }
    }
    return static_cast<int>(ones);
}

std::vector<Sequence> build_dataset(int n_bits, int multiplicity) {
    if (n_bits < 2) {
        throw std::invalid_argument("build_dataset: n_bits must be >= 2");
    }
    if (multiplicity < 1) {
        throw std::invalid_argument("build_dataset: multiplicity must be >= 1");
    }
    std::vector<Sequence> data;
    data.reserve(static_cast<std::size_t>((n_bits + 1) * multiplicity));
    for (int m = 0; m < multiplicity; ++m) {
        for (int i = 0; i <= n_bits; ++i) {
            data.push_back(encode_integer(i, n_bits));
        }
    }
    return data;
}

std::vector<PreferencePair> build_preferences(int n_bits, std::size_t num_pairs, Rng& rng) {
    if (n_bits < 2) {
        throw std::invalid_argument("build_preferences: n_bits must be >= 2");
    }
    std::vector<int> odds;
    std::vector<int> evens;
    for (int i = 0; i <= n_bits; ++i) {
        (i % 2 == 1 ? odds : evens).push_back(i);
    }
    std::vector<PreferencePair> pairs;
    pairs.reserve(num_pairs);
    for (std::size_t k = 0; k < num_pairs; ++k) {
        const int w = odds[rng.index(odds.size())];
        const int l = evens[rng.index(evens.size())];
        pairs.push_back({encode_integer(w, n_bits), encode_integer(l, n_bits)});
    }
    return pairs;
}

double metric_vsr(const std::vector<Sequence>& samples) {
    if (samples.empty()) {
        return 0.0;
    }
    std::size_t valid = 0;
    for (const auto& s : samples) {
        if (decode_integer(s)) {
            ++valid;
        }
    }
    return static_cast<double>(valid) / static_cast<double>(samples.size());
}

double metric_odd_ratio(const std::vector<Sequence>& samples) {
    if (samples.empty()) {
        return 0.0;
    }
    std::size_t odd = 0;
    for (const auto& s : samples) {
        const auto v = decode_integer(s);
        if (v && *v % 2 == 1) {
            ++odd;
        }
    }
    return static_cast<double>(odd) / static_cast<double>(samples.size());
}

double scheduled_lr(LrSchedule schedule, double base, int epoch, int num_epochs) {
    if (schedule == LrSchedule::Constant) {
        return base;
    }
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(num_epochs);
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

Architecture RunConfig::architecture() const {
    Architecture arch;
    arch.num_dims = n_bits;
    arch.num_tokens = 2;
    arch.hidden = hidden;
    return arch;
}

void RunConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) {
            throw std::invalid_argument(std::string("RunConfig: ") + name + " must be >= 1");
        }
    };
    if (n_bits < 2) {
        throw std::invalid_argument("RunConfig: n_bits must be >= 2");
    }
    positive(pretrain_epochs, "pretrain_epochs");
    positive(pretrain_batch, "pretrain_batch");
    positive(dataset_multiplicity, "dataset_multiplicity");
    positive(finetune_epochs, "finetune_epochs");
    positive(finetune_batch, "finetune_batch");
    positive(num_pairs, "num_pairs");
    positive(eval_samples, "eval_samples");
    positive(eval_every, "eval_every");
    positive(loss_eval_draws, "loss_eval_draws");
    if (!(pretrain_t_min >= 0.0 && pretrain_t_min < pretrain_t_max && pretrain_t_max < 1.0)) {
        throw std::invalid_argument("RunConfig: need 0 <= pretrain_t_min < pretrain_t_max < 1");
    }
    for (const auto* opt : {&pretrain_opt, &finetune_opt}) {
        if (!(opt->lr > 0.0) || !(opt->beta1 >= 0.0 && opt->beta1 < 1.0) || !(opt->beta2 >= 0.0 && opt->beta2 < 1.0) ||
            !(opt->eps > 0.0)) {
            throw std::invalid_argument("RunConfig: invalid optimizer hyperparameters");
        }
    }
    architecture().validate();
    dpo.validate();
    sampler.validate();
}

EvalMetrics evaluate(const DenoiserParams& params, const RunConfig& cfg, const std::string& phase, int epoch) {
    SamplerConfig sampler = cfg.sampler;
    sampler.rng_seed =
        derive_stream(cfg.seed, stream::eval, (phase_id(phase) << 32) | static_cast<std::uint64_t>(epoch)).next_u64();
    const MlpDenoiser model(params);
    const auto samples = generate(model, sampler, static_cast<std::size_t>(cfg.eval_samples));
    return {metric_vsr(samples), metric_odd_ratio(samples)};
}

PhaseResult run_pretrain(const RunConfig& cfg, const RecordCallback& on_record) {
    cfg.validate();
    const auto phase_start = std::chrono::steady_clock::now();
    Rng init = derive_stream(cfg.seed, stream::init);
    Rng rng = derive_stream(cfg.seed, stream::pretrain);

    PhaseResult result{DenoiserParams::glorot(cfg.architecture(), init), {}, 0.0};
    DenoiserParams& params = result.params;
    std::vector<Sequence> data = build_dataset(cfg.n_bits, cfg.dataset_multiplicity);
    AdamState adam;

    auto emit = [&](TrainRecord rec, bool with_eval) {
        if (with_eval) {
            const EvalMetrics m = evaluate(params, cfg, "pretrain", rec.epoch);
            rec.vsr = m.vsr;
            rec.odd_ratio = m.odd_ratio;
        }
        if (cfg.record_wall_time) {
            rec.wall_ms = static_cast<std::int64_t>(elapsed_ms(phase_start));
        }
        if (on_record) {
            on_record(rec);
        }
        result.records.push_back(std::move(rec));
    };

    // Epoch 0: the untrained model, loss on one pass without updates.
    {
        Rng probe = derive_stream(cfg.seed, stream::pretrain, 1);
        double total = 0.0;
        std::uint64_t queries = 0;
        for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(cfg.pretrain_batch)) {
            const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(cfg.pretrain_batch));
            std::vector<Sequence> xts;
            std::vector<double> times;
            for (std::size_t i = start; i < end; ++i) {
                const double t = probe.uniform(cfg.pretrain_t_min, cfg.pretrain_t_max);
                xts.push_back(sample_forward(kBinary, data[i], t, probe));
                times.push_back(t);
            }
            const ForwardCache cache = forward_batch(params, xts, times);
            queries += xts.size();
            for (std::size_t b = 0; b < xts.size(); ++b) {
                DenoiserOutput out;
                out.probs = token_table(cache.probs, static_cast<Eigen::Index>(b), 2, cfg.n_bits);
                total += pretrain_loss(out, kBinary, data[start + b], xts[b]).loss;
            }
        }
        TrainRecord rec;
        rec.epoch = 0;
        rec.phase = "pretrain";
        rec.loss = total / static_cast<double>(data.size());
        rec.theta_queries = queries;
        require_finite(rec.loss, rec.phase, 0);
        emit(std::move(rec), true);
    }

    for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
        rng.shuffle(std::span<Sequence>(data));
        double total = 0.0;
        std::uint64_t queries = 0;
        for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(cfg.pretrain_batch)) {
            const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(cfg.pretrain_batch));
            const std::size_t batch = end - start;
            std::vector<Sequence> xts;
            std::vector<double> times;
            xts.reserve(batch);
            times.reserve(batch);
            for (std::size_t i = start; i < end; ++i) {
                const double t = rng.uniform(cfg.pretrain_t_min, cfg.pretrain_t_max);
                xts.push_back(sample_forward(kBinary, data[i], t, rng));
                times.push_back(t);
            }
            const ForwardCache cache = forward_batch(params, xts, times);
            queries += batch;
            Eigen::MatrixXd dlogits(cache.logits.rows(), cache.logits.cols());
            const double w = 1.0 / static_cast<double>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                DenoiserOutput out;
                out.probs = token_table(cache.probs, static_cast<Eigen::Index>(b), 2, cfg.n_bits);
                const LossAndGrad lg = pretrain_loss(out, kBinary, data[start + b], xts[b]);
                total += lg.loss;
                dlogits.col(static_cast<Eigen::Index>(b)) = w * lg.dlogits.reshaped();
            }
            require_finite(total, "pretrain", epoch);
            optimizer_step(params, backward_batch(params, cache, dlogits), adam, cfg.pretrain_opt);
        }
        TrainRecord rec;
        rec.epoch = epoch;
        rec.phase = "pretrain";
        rec.loss = total / static_cast<double>(data.size());
        rec.theta_queries = queries;
        require_finite(rec.loss, rec.phase, epoch);
        emit(std::move(rec), eval_due(cfg, epoch, cfg.pretrain_epochs));
    }
    result.total_wall_ms = elapsed_ms(phase_start);
    return result;
}

PhaseResult run_finetune(const DenoiserParams& checkpoint, const RunConfig& cfg, const RecordCallback& on_record) {
    cfg.validate();
    if (checkpoint.arch() != cfg.architecture()) {
        throw std::invalid_argument("run_finetune: checkpoint architecture does not match the run config");
    }
    const auto phase_start = std::chrono::steady_clock::now();
    const RefModel ref = snapshot_ref(checkpoint);
    PhaseResult result{checkpoint, {}, 0.0};
    DenoiserParams& theta = result.params;

    Rng pair_rng = derive_stream(cfg.seed, stream::preferences);
    std::vector<PreferencePair> pairs = build_preferences(cfg.n_bits, static_cast<std::size_t>(cfg.num_pairs), pair_rng);
    Rng rng = derive_stream(cfg.seed, stream::finetune);
    AdamState adam;

    auto emit = [&](TrainRecord rec, bool with_eval) {
        if (with_eval) {
            const EvalMetrics m = evaluate(theta, cfg, "finetune", rec.epoch);
            rec.vsr = m.vsr;
            rec.odd_ratio = m.odd_ratio;
        }
        if (cfg.record_wall_time) {
            rec.wall_ms = static_cast<std::int64_t>(elapsed_ms(phase_start));
        }
        if (on_record) {
            on_record(rec);
        }
        result.records.push_back(std::move(rec));
    };

    // Every row reports the loss on the same fixed draws, so epoch-to-epoch
    // changes reflect theta only.
    const std::vector<PreferencePair> fixed_pairs = pairs;
    DpoConfig eval_dpo = cfg.dpo;
    eval_dpo.mc_t_samples = cfg.loss_eval_draws;
    auto fixed_draw_loss = [&]() {
        Rng probe = derive_stream(cfg.seed, stream::finetune, 1);
        return d2dpo_batch_loss(theta, ref, fixed_pairs, eval_dpo, probe).loss;
    };

    {
        TrainRecord rec;
        rec.epoch = 0;
        rec.phase = "finetune";
        rec.loss = fixed_draw_loss();
        require_finite(rec.loss, rec.phase, 0);
        emit(std::move(rec), true);
    }

    const auto batch_size = static_cast<std::size_t>(cfg.finetune_batch);
    for (int epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
        rng.shuffle(std::span<PreferencePair>(pairs));
        AdamHyper hyper = cfg.finetune_opt;
        hyper.lr = scheduled_lr(cfg.finetune_schedule, hyper.lr, epoch, cfg.finetune_epochs);
        TrainRecord rec;
        rec.epoch = epoch;
        rec.phase = "finetune";
        for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
            const std::size_t end = std::min(pairs.size(), start + batch_size);
            const std::span<const PreferencePair> batch(pairs.data() + start, end - start);
            DpoLossResult res = d2dpo_batch_loss(theta, ref, batch, cfg.dpo, rng);
            require_finite(res.loss, rec.phase, epoch);
            rec.theta_queries += res.theta_queries;
            rec.ref_queries += res.ref_queries;
            optimizer_step(theta, res.grads, adam, hyper);
        }
        rec.loss = fixed_draw_loss();
        require_finite(rec.loss, rec.phase, epoch);
        emit(std::move(rec), eval_due(cfg, epoch, cfg.finetune_epochs));
    }
    result.total_wall_ms = elapsed_ms(phase_start);
    return result;
}

void write_records_csv(std::ostream& out, const std::vector<TrainRecord>& records) {
    out << kRecordsHeader << '\n';
    for (const auto& r : records) {
        out << r.epoch << ',' << r.phase << ',' << format_double(r.loss) << ','
            << (r.odd_ratio ? format_double(*r.odd_ratio) : "") << ',' << (r.vsr ? format_double(*r.vsr) : "") << ','
            << r.theta_queries << ',' << r.ref_queries << ',' << r.wall_ms << '\n';
    }
}

std::vector<TrainRecord> read_records_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kRecordsHeader) {
        throw std::invalid_argument("read_records_csv: unexpected header");
    }
    std::vector<TrainRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (line.back() == ',') {
            fields.emplace_back();
        }
        if (fields.size() != 8) {
            throw std::invalid_argument("read_records_csv: expected 8 fields in '" + line + "'");
        }
        TrainRecord r;
        r.epoch = std::stoi(fields[0]);
        r.phase = fields[1];
        r.loss = std::stod(fields[2]);
        if (!fields[3].empty()) {
            r.odd_ratio = std::stod(fields[3]);
        }
        if (!fields[4].empty()) {
            r.vsr = std::stod(fields[4]);
        }
        r.theta_queries = std::stoull(fields[5]);
        r.ref_queries = std::stoull(fields[6]);
        r.wall_ms = std::stoll(fields[7]);
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
    if (window == 0) {
        throw std::invalid_argument("moving_average: window must be >= 1");
    }
    std::vector<double> out;
    if (values.size() < window) {
        return out;
    }
    for (std::size_t k = window - 1; k < values.size(); ++k) {
        double sum = 0.0;
        for (std::size_t i = k + 1 - window; i <= k; ++i) {
            sum += values[i];
        }
        out.push_back(sum / static_cast<double>(window));
    }
    return out;
}

std::string artifact_version() {
#ifdef D2DPO_VERSION
    std::string v = D2DPO_VERSION;
#else
    std::string v = "0.0.0";
#endif
#ifdef D2DPO_GIT_REV
    v += "+g";
    v += D2DPO_GIT_REV;
#endif
    return v;
}

}  // namespace d2dpo::experiment
