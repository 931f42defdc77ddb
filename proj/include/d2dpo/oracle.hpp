#pragma once

// Independent checks used by the tests and by `d2dpo verify`: dense forward
// equation integration, finite-difference gradients, closed-form sweeps and
// model-query counting.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2dpo/ctmc.hpp"
#include "d2dpo/losses.hpp"
#include "d2dpo/rng.hpp"

namespace d2dpo::oracle {

inline constexpr int kMaxTinyStates = 8;

// Dense time-dependent chain. Only off-diagonal rates are read; the diagonal
// is always the negative row sum.
struct TinyChain {
    int num_states = 0;
    std::function<double(int from, int to, double t)> rate;
    std::vector<double> p0;

    void validate() const;
};

// Explicit Euler on dp/dt = p^T R(t) from t = 0 to t_end.
std::vector<double> ode_marginals(const TinyChain& chain, double t_end, int steps);

// D = 1 masking reverse chain on {0..S-1, M} whose p_{1|t} is the Bayes
// posterior of data under the masking kernel. Starts at the mask.
TinyChain masking_reverse_chain(std::span<const double> data, double eta);

// p_{1|t}(x_1 | x_t) for one dimension by Bayes over the masking kernel.
std::vector<double> masking_posterior(std::span<const double> data, Token xt, double t);

// Folds mass left on the mask into real tokens with p_{1|t_max}, matching the
// sampler's forced decode.
std::vector<double> decode_terminal(std::span<const double> marginal, std::span<const double> p1t);

double total_variation(std::span<const double> p, std::span<const double> q);

// Denoiser returning the exact D = 1 Bayes posterior for a data distribution.
class PosteriorDenoiser final : public Denoiser {
public:
    explicit PosteriorDenoiser(std::vector<double> data);

    int num_dims() const override { return 1; }
    Alphabet alphabet() const override { return Alphabet(static_cast<int>(data_.size())); }
    Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double> times) const override;
    using Denoiser::probabilities;

private:
    std::vector<double> data_;
};

struct GradProbe {
    double value = 0.0;
    std::vector<double> grad;
};
using LossFn = std::function<GradProbe(std::span<const double> params)>;

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t probes = 0;
};

inline constexpr double kFdAbsFloor = 1e-8;

// Central differences on num_probes random coordinates against the analytic
// gradient; relative error uses max(|fd|, |analytic|, 1e-8) as denominator.
FdReport fd_gradcheck(const LossFn& loss, std::span<const double> params, std::size_t num_probes, double h, Rng& rng);

struct SweepReport {
    double max_abs_diff = 0.0;
    std::size_t cases = 0;
    std::size_t failures = 0;  // cases with |diff| > tolerance
};

struct SweepOptions {
    std::vector<double> etas = {0.0};
    bool theta_equals_ref = false;
    double tolerance = 1e-10;
    DTermMaskFn d_term_mask_fn;  // defaults to d_term_mask
};

// Random (D <= 4, S <= 5, t in [0.01, 0.99]) cases comparing d_term_general
// with the masking closed form.
SweepReport equivalence_sweep(std::size_t num_cases, Rng& rng, const SweepOptions& opts = {});

struct QueryCounter {
    std::uint64_t theta = 0;
    std::uint64_t ref = 0;
};

enum class ModelRole { Theta, Ref };

// Transparent wrapper that adds one to the counter per evaluated sequence.
class CountingDenoiser final : public Denoiser {
public:
    CountingDenoiser(const Denoiser& inner, QueryCounter& counter, ModelRole role)
        : inner_(&inner), counter_(&counter), role_(role) {}

    int num_dims() const override { return inner_->num_dims(); }
    Alphabet alphabet() const override { return inner_->alphabet(); }
    Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double> times) const override;
    using Denoiser::probabilities;

private:
    const Denoiser* inner_;
    QueryCounter* counter_;
    ModelRole role_;
};

inline CountingDenoiser count_queries(const Denoiser& inner, QueryCounter& counter, ModelRole role) {
    return CountingDenoiser(inner, counter, role);
}

// Random S x D softmax table, entries bounded away from zero.
Eigen::MatrixXd random_softmax_table(int num_tokens, int num_dims, Rng& rng, double logit_scale = 2.0);

// ---------------------------------------------------------------------------
// Verification suite behind `d2dpo verify`.

struct CheckResult {
    std::string check_name;
    double metric = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

struct VerifyOptions {
    bool full = false;
    std::uint64_t seed = 20240917;
    DTermMaskFn d_term_mask_fn;  // override for mutation testing
};

std::vector<CheckResult> run_verification(const VerifyOptions& opts);

std::string report_to_json(const std::vector<CheckResult>& results);

}  // namespace d2dpo::oracle
