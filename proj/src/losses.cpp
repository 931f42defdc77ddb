#include "d2dpo/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace d2dpo {

void DpoConfig::validate() const {
    // beta = 0 is accepted: the loss is then constant log 2.
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw std::invalid_argument("DpoConfig: beta must be finite and >= 0");
    }
    if (!(eta >= 0.0) || !std::isfinite(eta)) {
        throw std::invalid_argument("DpoConfig: eta must be finite and >= 0");
    }
    if (!(t_min >= 0.0 && t_min < t_max && t_max < 1.0)) {
        throw std::invalid_argument("DpoConfig: need 0 <= t_min < t_max < 1");
    }
    if (mc_t_samples < 1) {
        throw std::invalid_argument("DpoConfig: mc_t_samples must be >= 1");
    }
}

void PreferencePair::validate(const Alphabet& alphabet) const {
    if (winner.size() != loser.size()) {
        throw std::invalid_argument("PreferencePair: winner and loser lengths differ");
    }
    if (!winner.is_clean(alphabet) || !loser.is_clean(alphabet)) {
        throw std::invalid_argument("PreferencePair: sequences must be clean");
    }
}

double neg_log_sigmoid(double z) {
    // -log sigma(z) = softplus(-z)
    if (z >= 0.0) {
        return std::log1p(std::exp(-z));
    }
    return -z + std::log1p(std::exp(z));
}

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double bt_dpo_sanity(double logratio_w, double logratio_l, double beta) {
    return neg_log_sigmoid(beta * (logratio_w - logratio_l));
}

namespace {

void check_shapes(const DenoiserOutput& out, const Sequence& xt, const Sequence& x1, const char* where) {
    if (out.probs.cols() != static_cast<Eigen::Index>(xt.size()) || xt.size() != x1.size()) {
        std::ostringstream os;
        os << where << ": output has " << out.probs.cols() << " dimensions, sequences have " << xt.size() << " and "
           << x1.size();
        throw std::invalid_argument(os.str());
    }
}

}  // namespace

LossAndGrad pretrain_loss(const DenoiserOutput& out, const Alphabet& alphabet, const Sequence& x1, const Sequence& xt) {
    check_shapes(out, xt, x1, "pretrain_loss");
    LossAndGrad res;
    res.dlogits = Eigen::MatrixXd::Zero(out.probs.rows(), out.probs.cols());
    const std::size_t masked = xt.count_masked(alphabet);
    if (masked == 0) {
        return res;
    }
    const double norm = 1.0 / static_cast<double>(masked);
    for (std::size_t d = 0; d < xt.size(); ++d) {
        if (!alphabet.is_mask(xt[d])) {
            continue;
        }
        const auto col = static_cast<Eigen::Index>(d);
        const auto target = static_cast<Eigen::Index>(x1[d]);
        res.loss -= std::log(out.probs(target, col));
        res.dlogits.col(col) = out.probs.col(col) * norm;
        res.dlogits(target, col) -= norm;
    }
    res.loss *= norm;
    return res;
}

LossAndGrad pretrain_loss(const DenoiserParams& params, const Sequence& x1, double t, const Sequence& xt) {
    return pretrain_loss(forward(params, xt, t), params.alphabet(), x1, xt);
}

DTerm d_term_general(const NoiseSchedule& schedule, const DenoiserOutput& theta_out, const DenoiserOutput& ref_out,
                     const Sequence& xt, const Sequence& x1, double t, double eta) {
    check_shapes(theta_out, xt, x1, "d_term_general");
    const Alphabet& alphabet = schedule.alphabet();
    const int num_tokens = alphabet.size();
    DTerm res;
    res.grad = Eigen::MatrixXd::Zero(num_tokens, theta_out.probs.cols());
    Eigen::VectorXd dprobs(num_tokens);

    for (std::size_t d = 0; d < xt.size(); ++d) {
        const auto col = static_cast<Eigen::Index>(d);
        const auto p_theta_col = theta_out.probs.col(col);
        const auto p_ref_col = ref_out.probs.col(col);
        const std::span<const double> p_theta(p_theta_col.data(), static_cast<std::size_t>(num_tokens));
        const std::span<const double> p_ref(p_ref_col.data(), static_cast<std::size_t>(num_tokens));
        const Token from = xt[d];
        dprobs.setZero();

        for (Token j = 0; j < alphabet.augmented_size(); ++j) {
            if (j == from) {
                continue;
            }
            const RateQuery q{from, j, x1[d], t};
            const double r_q = conditional_rate_general(schedule, q) + conditional_rate_remask(alphabet, q, eta);
            const double r_theta = unconditional_rate_mask(alphabet, p_theta, from, j, t, eta);
            const double r_ref = unconditional_rate_mask(alphabet, p_ref, from, j, t, eta);
            if (r_q == 0.0 && r_theta == 0.0 && r_ref == 0.0) {
                continue;
            }
            double dterm_dr_theta = -1.0;
            if (r_q > 0.0) {
                if (!(r_theta > 0.0) || !(r_ref > 0.0)) {
                    std::ostringstream os;
                    os << "d_term_general: zero model rate for " << from << " -> " << j << " in dimension " << d
                       << " where the conditional rate is positive";
                    throw std::domain_error(os.str());
                }
                res.value += r_q * (std::log(r_theta) - std::log(r_ref));
                dterm_dr_theta += r_q / r_theta;
            }
            res.value += r_ref - r_theta;
            // r_theta depends on theta only through p_theta[j] when unmasking.
            if (alphabet.is_mask(from) && alphabet.is_real(j)) {
                dprobs[j] += dterm_dr_theta * (1.0 + eta * t) / (1.0 - t);
            }
        }
        if (alphabet.is_mask(from)) {
            res.grad.col(col) = softmax_backward(p_theta_col, dprobs);
        }
    }
    return res;
}

DTerm d_term_mask(const DenoiserOutput& theta_out, const DenoiserOutput& ref_out, const Sequence& xt, const Sequence& x1,
                  double t, double eta) {
    check_shapes(theta_out, xt, x1, "d_term_mask");
    if (!(t >= 0.0 && t < 1.0)) {
        throw std::domain_error("d_term_mask: t must lie in [0, 1)");
    }
    const auto num_tokens = theta_out.probs.rows();
    const Token mask = static_cast<Token>(num_tokens);
    DTerm res;
    res.grad = Eigen::MatrixXd::Zero(num_tokens, theta_out.probs.cols());

    double log_ratio_sum = 0.0;
    for (std::size_t d = 0; d < xt.size(); ++d) {
        if (xt[d] != mask) {
            continue;
        }
        const auto col = static_cast<Eigen::Index>(d);
        const auto target = static_cast<Eigen::Index>(x1[d]);
        log_ratio_sum += std::log(theta_out.probs(target, col)) - std::log(ref_out.probs(target, col));
        res.grad.col(col) = -theta_out.probs.col(col);
        res.grad(target, col) += 1.0;
    }
    const double weight = 1.0 / (1.0 - t);
    const double noise_scale = 1.0 + eta * t;
    res.value = noise_scale * (weight * log_ratio_sum);
    res.grad *= noise_scale * weight;
    return res;
}

DpoDraw sample_dpo_draw(const Alphabet& alphabet, const PreferencePair& pair, const DpoConfig& cfg, Rng& rng) {
    DpoDraw draw;
    draw.t = rng.uniform(cfg.t_min, cfg.t_max);
    draw.xt_w = sample_forward(alphabet, pair.winner, draw.t, rng);
    draw.xt_l = sample_forward(alphabet, pair.loser, draw.t, rng);
    return draw;
}

double dpo_draw_loss(const DpoConfig& cfg, const DpoDraw& draw, const PreferencePair& pair, const DenoiserOutput& theta_w,
                     const DenoiserOutput& ref_w, const DenoiserOutput& theta_l, const DenoiserOutput& ref_l,
                     double weight, Eigen::MatrixXd& dlogits_w, Eigen::MatrixXd& dlogits_l) {
    DTerm term_w;
    DTerm term_l;
    if (cfg.d_term == DTermKind::General) {
        const auto schedule = NoiseSchedule::masking(Alphabet(static_cast<int>(theta_w.probs.rows())));
        term_w = d_term_general(schedule, theta_w, ref_w, draw.xt_w, pair.winner, draw.t, cfg.eta);
        term_l = d_term_general(schedule, theta_l, ref_l, draw.xt_l, pair.loser, draw.t, cfg.eta);
    } else {
        term_w = d_term_mask(theta_w, ref_w, draw.xt_w, pair.winner, draw.t, cfg.eta);
        term_l = d_term_mask(theta_l, ref_l, draw.xt_l, pair.loser, draw.t, cfg.eta);
    }
    const double z = cfg.beta * (term_w.value - term_l.value);
    // d/dz of -log sigma(z) is -sigma(-z).
    const double dz = -sigmoid(-z) * weight * cfg.beta;
    dlogits_w = dz * term_w.grad;
    dlogits_l = -dz * term_l.grad;
    return neg_log_sigmoid(z);
}

DpoLossResult d2dpo_batch_loss(const DenoiserParams& theta, const Denoiser& ref, std::span<const PreferencePair> pairs,
                               const DpoConfig& cfg, Rng& rng) {
    cfg.validate();
    const Alphabet alphabet = theta.alphabet();
    const int num_tokens = theta.arch().num_tokens;
    const int num_dims = theta.arch().num_dims;
    DpoLossResult res;
    if (pairs.empty()) {
        res.grads = GradAccumulator::like(theta);
        return res;
    }

    const auto draws_per_pair = static_cast<std::size_t>(cfg.mc_t_samples);
    std::vector<DpoDraw> draws;
    draws.reserve(pairs.size() * draws_per_pair);
    std::vector<Sequence> columns;
    std::vector<double> times;
    columns.reserve(2 * draws.capacity());
    times.reserve(2 * draws.capacity());
    for (const auto& pair : pairs) {
        pair.validate(alphabet);
        for (std::size_t k = 0; k < draws_per_pair; ++k) {
            draws.push_back(sample_dpo_draw(alphabet, pair, cfg, rng));
            columns.push_back(draws.back().xt_w);
            columns.push_back(draws.back().xt_l);
            times.push_back(draws.back().t);
            times.push_back(draws.back().t);
        }
    }

    const ForwardCache theta_cache = forward_batch(theta, columns, times);
    res.theta_queries += columns.size();
    const Eigen::MatrixXd ref_probs = ref.probabilities(columns, times);
    res.ref_queries += columns.size();

    auto output_at = [&](const Eigen::MatrixXd& probs, std::size_t c) {
        DenoiserOutput out;
        out.probs = token_table(probs, static_cast<Eigen::Index>(c), num_tokens, num_dims);
        return out;
    };

    const double weight = 1.0 / static_cast<double>(draws.size());
    Eigen::MatrixXd dlogits(theta_cache.logits.rows(), theta_cache.logits.cols());
    Eigen::MatrixXd grad_w;
    Eigen::MatrixXd grad_l;
    double total = 0.0;
    for (std::size_t i = 0; i < draws.size(); ++i) {
        const PreferencePair& pair = pairs[i / draws_per_pair];
        const std::size_t cw = 2 * i;
        const std::size_t cl = 2 * i + 1;
        total += dpo_draw_loss(cfg, draws[i], pair, output_at(theta_cache.probs, cw), output_at(ref_probs, cw),
                               output_at(theta_cache.probs, cl), output_at(ref_probs, cl), weight, grad_w, grad_l);
        dlogits.col(static_cast<Eigen::Index>(cw)) = grad_w.reshaped();
        dlogits.col(static_cast<Eigen::Index>(cl)) = grad_l.reshaped();
    }
    res.loss = total * weight;
    res.grads = backward_batch(theta, theta_cache, dlogits);
    return res;
}

DpoLossResult d2dpo_loss(const DenoiserParams& theta, const Denoiser& ref, const PreferencePair& pair,
                         const DpoConfig& cfg, Rng& rng) {
    return d2dpo_batch_loss(theta, ref, std::span<const PreferencePair>(&pair, 1), cfg, rng);
}

}  // namespace d2dpo
