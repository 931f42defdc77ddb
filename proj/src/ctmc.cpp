#include "d2dpo/ctmc.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace d2dpo {

namespace {

void check_time(double t, const char* where) {
    if (!(t >= 0.0 && t <= 1.0)) {
        std::ostringstream os;
        os << where << ": time " << t << " outside [0, 1]";
        throw std::domain_error(os.str());
    }
}

void check_rate_time(double t, const char* where) {
    if (!(t >= 0.0 && t < 1.0)) {
        std::ostringstream os;
        os << where << ": time " << t << " outside [0, 1); rates are singular at t = 1";
        throw std::domain_error(os.str());
    }
}

}  // namespace

Alphabet::Alphabet(int size_s) : size_s_(size_s) {
    if (size_s < 2) {
        throw std::invalid_argument("Alphabet: need at least 2 real tokens");
    }
}

bool Sequence::is_clean(const Alphabet& alphabet) const {
    return std::all_of(tokens.begin(), tokens.end(), [&](Token tok) { return alphabet.is_real(tok); });
}

std::size_t Sequence::count_masked(const Alphabet& alphabet) const {
    return static_cast<std::size_t>(
        std::count_if(tokens.begin(), tokens.end(), [&](Token tok) { return alphabet.is_mask(tok); }));
}

double masking_kernel_prob(const Alphabet& alphabet, Token x1_token, Token xt_token, double t) {
    if (!alphabet.is_real(x1_token)) {
        throw std::invalid_argument("masking_kernel_prob: clean token must be a real token");
    }
    check_time(t, "masking_kernel_prob");
    if (xt_token == x1_token) {
        return t;
    }
    if (alphabet.is_mask(xt_token)) {
        return 1.0 - t;
    }
    return 0.0;
}

double NoiseSchedule::kernel(Token x1_token, Token xt_token, double t) const {
    return masking_kernel_prob(alphabet_, x1_token, xt_token, t);
}

double NoiseSchedule::kernel_dt(Token x1_token, Token xt_token, double t) const {
    if (!alphabet_.is_real(x1_token)) {
        throw std::invalid_argument("NoiseSchedule::kernel_dt: clean token must be a real token");
    }
    check_time(t, "NoiseSchedule::kernel_dt");
    if (xt_token == x1_token) {
        return 1.0;
    }
    if (alphabet_.is_mask(xt_token)) {
        return -1.0;
    }
    return 0.0;
}

bool NoiseSchedule::on_path(Token x1_token, Token tok, double t) const {
    return kernel(x1_token, tok, t) > 0.0 || kernel_dt(x1_token, tok, t) != 0.0;
}

int NoiseSchedule::path_support(Token x1_token, double t) const {
    int count = 0;
    for (Token j = 0; j < alphabet_.augmented_size(); ++j) {
        if (on_path(x1_token, j, t)) {
            ++count;
        }
    }
    return count;
}

void SamplerConfig::validate() const {
    if (num_steps < 1) {
        throw std::invalid_argument("SamplerConfig: num_steps must be >= 1");
    }
    if (!(eta >= 0.0) || !std::isfinite(eta)) {
        throw std::invalid_argument("SamplerConfig: eta must be finite and >= 0");
    }
    if (!(t_max > 0.0 && t_max < 1.0)) {
        throw std::invalid_argument("SamplerConfig: t_max must lie in (0, 1)");
    }
}

Sequence sample_forward(const Alphabet& alphabet, const Sequence& x1, double t, Rng& rng) {
    if (!x1.is_clean(alphabet)) {
        throw std::invalid_argument("sample_forward: input sequence contains masked or invalid tokens");
    }
    check_time(t, "sample_forward");
    Sequence xt = x1;
    for (auto& tok : xt.tokens) {
        // One draw per dimension regardless of t keeps stream usage fixed.
        if (!(rng.uniform() < t)) {
            tok = alphabet.mask_id();
        }
    }
    return xt;
}

double conditional_rate_general(const NoiseSchedule& schedule, const RateQuery& q) {
    const Alphabet& alphabet = schedule.alphabet();
    if (q.from == q.to) {
        throw std::invalid_argument("conditional_rate_general: diagonal entries are not queried");
    }
    if (!alphabet.contains(q.from) || !alphabet.contains(q.to)) {
        throw std::invalid_argument("conditional_rate_general: token outside the augmented alphabet");
    }
    check_rate_time(q.t, "conditional_rate_general");
    const double q_from = schedule.kernel(q.clean, q.from, q.t);
    if (!(q_from > 0.0)) {
        std::ostringstream os;
        os << "conditional_rate_general: state " << q.from << " unreachable from clean token " << q.clean
           << " at t = " << q.t;
        throw std::domain_error(os.str());
    }
    if (!schedule.on_path(q.clean, q.to, q.t)) {
        return 0.0;
    }
    const double numerator =
        std::max(0.0, schedule.kernel_dt(q.clean, q.to, q.t) - schedule.kernel_dt(q.clean, q.from, q.t));
    return numerator / (schedule.path_support(q.clean, q.t) * q_from);
}

double conditional_rate_mask(const Alphabet& alphabet, const RateQuery& q) {
    check_rate_time(q.t, "conditional_rate_mask");
    if (alphabet.is_mask(q.from) && q.to == q.clean) {
        return 1.0 / (1.0 - q.t);
    }
    return 0.0;
}

double conditional_rate_remask(const Alphabet& alphabet, const RateQuery& q, double eta) {
    check_rate_time(q.t, "conditional_rate_remask");
    if (eta == 0.0) {
        return 0.0;
    }
    if (alphabet.is_mask(q.from) && q.to == q.clean) {
        return eta * q.t / (1.0 - q.t);
    }
    if (q.from == q.clean && alphabet.is_mask(q.to)) {
        return eta;
    }
    return 0.0;
}

double unconditional_rate_mask(const Alphabet& alphabet, std::span<const double> p1t, Token xt_token, Token to,
                               double t, double eta) {
    check_rate_time(t, "unconditional_rate_mask");
    if (static_cast<int>(p1t.size()) != alphabet.size()) {
        throw std::invalid_argument("unconditional_rate_mask: probability vector must have S entries");
    }
    if (xt_token == to) {
        return 0.0;
    }
    if (alphabet.is_mask(xt_token)) {
        if (alphabet.is_mask(to)) {
            return 0.0;
        }
        return (1.0 + eta * t) / (1.0 - t) * p1t[static_cast<std::size_t>(to)];
    }
    return alphabet.is_mask(to) ? eta : 0.0;
}

Eigen::MatrixXd Denoiser::probabilities(const Sequence& x, double t) const {
    const double times[1] = {t};
    return probabilities(std::span<const Sequence>(&x, 1), times);
}

Sequence euler_step(const Alphabet& alphabet, const Sequence& x, const Eigen::Ref<const Eigen::MatrixXd>& probs, double t,
                    double dt, double eta, Rng& rng) {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("euler_step: dt must be positive");
    }
    if (t + dt > 1.0 + 1e-12) {
        throw std::invalid_argument("euler_step: t + dt exceeds 1");
    }
    const int num_tokens = alphabet.size();
    if (probs.rows() != num_tokens || probs.cols() != static_cast<Eigen::Index>(x.size())) {
        throw std::invalid_argument("euler_step: probability table must be S x D");
    }

    Sequence next = x;
    std::vector<double> weights(static_cast<std::size_t>(alphabet.augmented_size()));
    for (std::size_t d = 0; d < x.size(); ++d) {
        const Token from = x[d];
        const auto col = probs.col(static_cast<Eigen::Index>(d));
        const std::span<const double> p1t(col.data(), static_cast<std::size_t>(num_tokens));
        double out_rate = 0.0;
        for (Token j = 0; j < alphabet.augmented_size(); ++j) {
            const double r = (j == from) ? 0.0 : unconditional_rate_mask(alphabet, p1t, from, j, t, eta);
            weights[static_cast<std::size_t>(j)] = r * dt;
            out_rate += r;
        }
        double stay = 1.0 - out_rate * dt;
        if (stay < 0.0) {
            if (stay < -kStayFloor) {
                std::ostringstream os;
                os << "euler_step: stay probability " << stay << " < 0 at t = " << t << ", dt = " << dt
                   << "; step size too large";
                throw std::domain_error(os.str());
            }
            stay = 0.0;
        }
        weights[static_cast<std::size_t>(from)] = stay;
        const double u = rng.uniform();
        if (u < stay) {
            continue;
        }
        // Distribute the remaining mass over the move targets.
        double acc = stay;
        Token chosen = from;
        for (Token j = 0; j < alphabet.augmented_size(); ++j) {
            if (j == from || weights[static_cast<std::size_t>(j)] <= 0.0) {
                continue;
            }
            acc += weights[static_cast<std::size_t>(j)];
            chosen = j;
            if (u < acc) {
                break;
            }
        }
        next[d] = chosen;
    }
    return next;
}

std::vector<Sequence> generate(const Denoiser& denoiser, const SamplerConfig& cfg, std::size_t num_samples) {
    cfg.validate();
    const Alphabet alphabet = denoiser.alphabet();
    const auto num_dims = static_cast<std::size_t>(denoiser.num_dims());
    const int num_tokens = alphabet.size();

    std::vector<Sequence> xs(num_samples, Sequence::filled(num_dims, alphabet.mask_id()));
    std::vector<Rng> rngs;
    rngs.reserve(num_samples);
    for (std::size_t i = 0; i < num_samples; ++i) {
        rngs.push_back(derive_stream(cfg.rng_seed, stream::sample, i));
    }

    std::vector<std::size_t> active;
    std::vector<Sequence> batch;
    auto collect_active = [&](bool masked_only) {
        active.clear();
        batch.clear();
        for (std::size_t i = 0; i < num_samples; ++i) {
            if (!masked_only || xs[i].count_masked(alphabet) > 0) {
                active.push_back(i);
                batch.push_back(xs[i]);
            }
        }
    };

    const double dt = cfg.t_max / cfg.num_steps;
    for (int n = 0; n < cfg.num_steps; ++n) {
        const double t = n * dt;
        // Without re-masking, fully unmasked samples are absorbing.
        collect_active(cfg.eta == 0.0);
        if (active.empty()) {
            break;
        }
        const double times[1] = {t};
        const Eigen::MatrixXd probs = denoiser.probabilities(batch, times);
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t i = active[k];
            xs[i] = euler_step(alphabet, xs[i],
                               token_table(probs, static_cast<Eigen::Index>(k), num_tokens, static_cast<int>(num_dims)),
                               t, dt, cfg.eta, rngs[i]);
        }
    }

    // Forced decode of whatever is still masked at t_max.
    collect_active(true);
    if (!active.empty()) {
        const double times[1] = {cfg.t_max};
        const Eigen::MatrixXd probs = denoiser.probabilities(batch, times);
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t i = active[k];
            const auto table =
                token_table(probs, static_cast<Eigen::Index>(k), num_tokens, static_cast<int>(num_dims));
            for (std::size_t d = 0; d < num_dims; ++d) {
                if (alphabet.is_mask(xs[i][d])) {
                    const auto col = table.col(static_cast<Eigen::Index>(d));
                    xs[i][d] = static_cast<Token>(
                        rngs[i].categorical(std::span<const double>(col.data(), static_cast<std::size_t>(num_tokens))));
                }
            }
        }
    }
    return xs;
}

}  // namespace d2dpo
