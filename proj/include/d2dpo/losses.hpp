#pragma once

// Pre-training objective and the preference (D2-DPO) objective for masking
// diffusion. Every loss returns its value together with dL/dlogits so the
// denoiser can backpropagate.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "d2dpo/ctmc.hpp"
#include "d2dpo/denoiser.hpp"
#include "d2dpo/rng.hpp"

namespace d2dpo {

enum class DTermKind { Mask, General };

struct DpoConfig {
    double beta = 1.0;
    double eta = 0.0;
    double t_min = 1e-3;
    double t_max = 1.0 - 1e-3;
    int mc_t_samples = 1;  // T
    DTermKind d_term = DTermKind::Mask;

    void validate() const;
};

struct PreferencePair {
    Sequence winner;
    Sequence loser;

    void validate(const Alphabet& alphabet) const;
};

struct LossAndGrad {
    double loss = 0.0;
    Eigen::MatrixXd dlogits;  // S x D
};

// Rate-matrix log-ratio divergence of theta against the reference for one
// noisy sequence, summed over dimensions. grad is d(value)/d(theta logits).
struct DTerm {
    double value = 0.0;
    Eigen::MatrixXd grad;  // S x D
};

// Softplus-form -log sigmoid(z), stable for large |z|.
double neg_log_sigmoid(double z);
// sigmoid(z) evaluated without overflow.
double sigmoid(double z);

// -log sigma(beta (a - b)): the Bradley-Terry / DPO pair loss.
double bt_dpo_sanity(double logratio_w, double logratio_l, double beta);

// Masked cross-entropy averaged over masked dimensions (0 if none are masked).
LossAndGrad pretrain_loss(const DenoiserOutput& out, const Alphabet& alphabet, const Sequence& x1, const Sequence& xt);
LossAndGrad pretrain_loss(const DenoiserParams& params, const Sequence& x1, double t, const Sequence& xt);

// Sum over dimensions and over j != x_t^d of
//   R^q log(R^theta / R^ref) + R^ref - R^theta,
// with R^q from the schedule's conditional rate (plus the re-masking term when
// eta > 0) and R^theta, R^ref from unconditional_rate_mask.
DTerm d_term_general(const NoiseSchedule& schedule, const DenoiserOutput& theta_out, const DenoiserOutput& ref_out,
                     const Sequence& xt, const Sequence& x1, double t, double eta);

// Closed form (1 + eta t)/(1 - t) * sum_d [x_t^d = M] log(p^theta(x_1^d) / p^ref(x_1^d)).
DTerm d_term_mask(const DenoiserOutput& theta_out, const DenoiserOutput& ref_out, const Sequence& xt, const Sequence& x1,
                  double t, double eta);

using DTermMaskFn = std::function<DTerm(const DenoiserOutput&, const DenoiserOutput&, const Sequence&, const Sequence&,
                                        double, double)>;

struct DpoDraw {
    double t;
    Sequence xt_w;
    Sequence xt_l;
};

// Draws t ~ U[t_min, t_max] once per draw (shared by both branches), then the
// two corrupted sequences.
DpoDraw sample_dpo_draw(const Alphabet& alphabet, const PreferencePair& pair, const DpoConfig& cfg, Rng& rng);

// Loss of one draw from precomputed outputs; fills the theta logit gradients
// of both branches, scaled by weight.
double dpo_draw_loss(const DpoConfig& cfg, const DpoDraw& draw, const PreferencePair& pair, const DenoiserOutput& theta_w,
                     const DenoiserOutput& ref_w, const DenoiserOutput& theta_l, const DenoiserOutput& ref_l,
                     double weight, Eigen::MatrixXd& dlogits_w, Eigen::MatrixXd& dlogits_l);

struct DpoLossResult {
    double loss = 0.0;  // mean over pairs and draws
    GradAccumulator grads;
    std::uint64_t theta_queries = 0;
    std::uint64_t ref_queries = 0;
};

// Mean D2-DPO loss over pairs x T draws. Each draw costs one theta and one
// reference evaluation per branch; the reference is treated as constant.
DpoLossResult d2dpo_batch_loss(const DenoiserParams& theta, const Denoiser& ref, std::span<const PreferencePair> pairs,
                               const DpoConfig& cfg, Rng& rng);

DpoLossResult d2dpo_loss(const DenoiserParams& theta, const Denoiser& ref, const PreferencePair& pair,
                         const DpoConfig& cfg, Rng& rng);

}  // namespace d2dpo
