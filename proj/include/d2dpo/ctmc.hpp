#pragma once

// Masking-state CTMC: token alphabet, forward corruption kernel, conditional
// and model rate matrices, and the reverse-time Euler sampler.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "d2dpo/rng.hpp"

namespace d2dpo {

using Token = std::int32_t;

// S real tokens {0..S-1} plus the mask symbol, which always has id S.
class Alphabet {
public:
    explicit Alphabet(int size_s);

    int size() const { return size_s_; }
    Token mask_id() const { return size_s_; }
    int augmented_size() const { return size_s_ + 1; }
    bool is_mask(Token tok) const { return tok == size_s_; }
    bool is_real(Token tok) const { return tok >= 0 && tok < size_s_; }
    bool contains(Token tok) const { return tok >= 0 && tok <= size_s_; }

    friend bool operator==(const Alphabet&, const Alphabet&) = default;

private:
    int size_s_;
};

struct Sequence {
    std::vector<Token> tokens;

    Sequence() = default;
    explicit Sequence(std::vector<Token> toks) : tokens(std::move(toks)) {}
    static Sequence filled(std::size_t length, Token tok) {
        return Sequence(std::vector<Token>(length, tok));
    }

    std::size_t size() const { return tokens.size(); }
    Token operator[](std::size_t d) const { return tokens[d]; }
    Token& operator[](std::size_t d) { return tokens[d]; }

    bool is_clean(const Alphabet& alphabet) const;
    std::size_t count_masked(const Alphabet& alphabet) const;

    friend bool operator==(const Sequence&, const Sequence&) = default;
};

// q_{t|1}(x_t | x_1) for the masking process: t on x_1, (1 - t) on the mask.
double masking_kernel_prob(const Alphabet& alphabet, Token x1_token, Token xt_token, double t);

enum class ScheduleKind { Masking };

// Per-dimension forward kernel q_{t|1} together with its time derivative.
class NoiseSchedule {
public:
    static NoiseSchedule masking(Alphabet alphabet) { return NoiseSchedule(ScheduleKind::Masking, alphabet); }

    ScheduleKind kind() const { return kind_; }
    const Alphabet& alphabet() const { return alphabet_; }

    double kernel(Token x1_token, Token xt_token, double t) const;
    double kernel_dt(Token x1_token, Token xt_token, double t) const;

    // Number of states visited by the kernel path of x1: those with nonzero
    // probability or nonzero derivative at t. For masking this is 2 on [0, 1].
    int path_support(Token x1_token, double t) const;
    bool on_path(Token x1_token, Token tok, double t) const;

private:
    NoiseSchedule(ScheduleKind kind, Alphabet alphabet) : kind_(kind), alphabet_(alphabet) {}

    ScheduleKind kind_;
    Alphabet alphabet_;
};

// R_t^q(from, to | clean).
struct RateQuery {
    Token from;
    Token to;
    Token clean;
    double t;
};

struct SamplerConfig {
    int num_steps = 200;
    double eta = 0.0;
    double t_max = 1.0 - 1e-3;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

// Each dimension keeps its clean token with probability t, otherwise masks.
Sequence sample_forward(const Alphabet& alphabet, const Sequence& x1, double t, Rng& rng);

// ReLU(dq(to) - dq(from)) / (Z_t * q(from)), with Z_t the kernel path support.
// States off the kernel path receive zero rate.
double conditional_rate_general(const NoiseSchedule& schedule, const RateQuery& q);

// Masking closed form: 1/(1-t) for M -> clean, zero otherwise.
double conditional_rate_mask(const Alphabet& alphabet, const RateQuery& q);

// Detailed-balance re-masking term added to the masking conditional rate when
// eta > 0: eta*t/(1-t) on M -> clean and eta on clean -> M. Together with
// conditional_rate_mask this gives (1+eta t)/(1-t) for unmasking, which is the
// conditional rate whose posterior expectation is unconditional_rate_mask.
double conditional_rate_remask(const Alphabet& alphabet, const RateQuery& q, double eta);

// R_t(x_t, to) for one dimension, given p_{1|t}(.|x) over the S real tokens.
double unconditional_rate_mask(const Alphabet& alphabet, std::span<const double> p1t, Token xt_token, Token to,
                               double t, double eta);

// Model probabilities laid out per sequence as an S x D table (column d is
// p_{1|t}(. | x) for dimension d). Batched results stack those tables as
// columns of length D*S.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual int num_dims() const = 0;
    virtual Alphabet alphabet() const = 0;

    // times has either one entry (shared) or one entry per sequence.
    virtual Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double> times) const = 0;

    Eigen::MatrixXd probabilities(const Sequence& x, double t) const;
};

inline Eigen::Map<const Eigen::MatrixXd> token_table(const Eigen::MatrixXd& batch, Eigen::Index col, int num_tokens,
                                                     int num_dims) {
    return {batch.col(col).data(), num_tokens, num_dims};
}

// One Euler step of the reverse CTMC, independently per dimension.
// probs is the S x D table of p_{1|t}(.|x).
Sequence euler_step(const Alphabet& alphabet, const Sequence& x, const Eigen::Ref<const Eigen::MatrixXd>& probs, double t,
                    double dt, double eta, Rng& rng);

// Stay probabilities in [-kStayFloor, 0) are treated as 0; anything lower is an error.
inline constexpr double kStayFloor = 1e-12;

// Draws num_samples sequences from the all-mask prior. Sample i uses its own
// stream derived from (cfg.rng_seed, i), so results do not depend on batching.
std::vector<Sequence> generate(const Denoiser& denoiser, const SamplerConfig& cfg, std::size_t num_samples);

}  // namespace d2dpo
