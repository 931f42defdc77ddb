#pragma once

// Small MLP denoiser p_{1|t}(x_1^d | x_t) with hand-written reverse mode,
// Adam, frozen reference snapshots and checkpoint files.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d2dpo/ctmc.hpp"
#include "d2dpo/rng.hpp"

namespace d2dpo {

struct Architecture {
    int num_dims = 8;    // D
    int num_tokens = 2;  // S
    std::vector<int> hidden = {128, 128};

    // One-hot over S+1 symbols per dimension, then [t, 1 - t].
    int input_width() const { return num_dims * (num_tokens + 1) + 2; }
    int output_width() const { return num_dims * num_tokens; }
    int num_layers() const { return static_cast<int>(hidden.size()) + 1; }
    int layer_in(int layer) const;
    int layer_out(int layer) const;
    std::size_t parameter_count() const;

    void validate() const;

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

// All weights live in one flat buffer: per layer a column-major out x in
// weight matrix followed by its bias.
class DenoiserParams {
public:
    DenoiserParams() = default;
    explicit DenoiserParams(Architecture arch);

    // Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.
    static DenoiserParams glorot(Architecture arch, Rng& rng);

    const Architecture& arch() const { return arch_; }
    Alphabet alphabet() const { return Alphabet(arch_.num_tokens); }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }

    Eigen::Map<Eigen::MatrixXd> weight(int layer);
    Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
    Eigen::Map<Eigen::VectorXd> bias(int layer);
    Eigen::Map<const Eigen::VectorXd> bias(int layer) const;

    // Human-readable name ("layer1.weight") of the block holding a flat index.
    std::string block_name(std::size_t flat_index) const;

    bool all_finite() const;

    friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;

private:
    std::size_t weight_offset(int layer) const;
    std::size_t bias_offset(int layer) const;

    Architecture arch_;
    std::vector<double> values_;
};

// Per-sequence logits and softmax probabilities, S x D (column per dimension).
struct DenoiserOutput {
    Eigen::MatrixXd logits;
    Eigen::MatrixXd probs;
};

struct GradAccumulator {
    std::vector<double> values;
    double scale = 1.0;

    GradAccumulator() = default;
    explicit GradAccumulator(std::size_t n) : values(n, 0.0) {}
    static GradAccumulator like(const DenoiserParams& params) { return GradAccumulator(params.size()); }

    void zero();
    void add(const GradAccumulator& other);
    // values * scale, the gradient actually applied by the optimizer.
    double effective(std::size_t i) const { return values[i] * scale; }
};

// Activations kept for the backward pass. Columns are batch entries.
struct ForwardCache {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> activations;  // post-tanh of each hidden layer
    Eigen::MatrixXd logits;                    // (D*S) x B
    Eigen::MatrixXd probs;                     // (D*S) x B
};

Eigen::MatrixXd encode_inputs(const Architecture& arch, std::span<const Sequence> xs, std::span<const double> times);

ForwardCache forward_batch(const DenoiserParams& params, std::span<const Sequence> xs, std::span<const double> times);

DenoiserOutput forward(const DenoiserParams& params, const Sequence& xt, double t);

// Gradients of a scalar loss given dL/dlogits, (D*S) x B, summed over the batch.
GradAccumulator backward_batch(const DenoiserParams& params, const ForwardCache& cache,
                               const Eigen::Ref<const Eigen::MatrixXd>& dlogits);

// Single-sequence form; dlogits is S x D.
GradAccumulator backward(const DenoiserParams& params, const Sequence& xt, double t,
                         const Eigen::Ref<const Eigen::MatrixXd>& dlogits);

// Applies the softmax Jacobian: dL/dlogits from dL/dprobs for one S x D table.
Eigen::MatrixXd softmax_backward(const Eigen::Ref<const Eigen::MatrixXd>& probs,
                                 const Eigen::Ref<const Eigen::MatrixXd>& dprobs);

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

class NonFiniteGradient : public std::runtime_error {
public:
    NonFiniteGradient(std::string block, std::size_t index);
    const std::string& block() const { return block_; }

private:
    std::string block_;
};

// In-place Adam update. Throws NonFiniteGradient before touching anything.
void optimizer_step(DenoiserParams& params, const GradAccumulator& grads, AdamState& state, const AdamHyper& hyper);

// Non-owning evaluation view over mutable training parameters.
class MlpDenoiser final : public Denoiser {
public:
    explicit MlpDenoiser(const DenoiserParams& params) : params_(&params) {}

    int num_dims() const override { return params_->arch().num_dims; }
    Alphabet alphabet() const override { return params_->alphabet(); }
    Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double> times) const override;
    using Denoiser::probabilities;

private:
    const DenoiserParams* params_;
};

// Frozen copy of the parameters at snapshot time. Copies share the snapshot.
class RefModel final : public Denoiser {
public:
    explicit RefModel(const DenoiserParams& params)
        : params_(std::make_shared<const DenoiserParams>(params)) {}

    const DenoiserParams& params() const { return *params_; }

    int num_dims() const override { return params_->arch().num_dims; }
    Alphabet alphabet() const override { return params_->alphabet(); }
    Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double> times) const override;
    using Denoiser::probabilities;

    DenoiserOutput forward(const Sequence& xt, double t) const { return d2dpo::forward(*params_, xt, t); }

private:
    std::shared_ptr<const DenoiserParams> params_;
};

inline RefModel snapshot_ref(const DenoiserParams& params) { return RefModel(params); }

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string checkpoint_to_string(const DenoiserParams& params);
DenoiserParams checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::filesystem::path& path);

}  // namespace d2dpo
