#include "d2dpo/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace d2dpo::oracle {

void TinyChain::validate() const {
    if (num_states < 1 || num_states > kMaxTinyStates) {
        throw std::invalid_argument("TinyChain: state count must be in [1, 8]");
    }
    if (static_cast<int>(p0.size()) != num_states) {
        throw std::invalid_argument("TinyChain: p0 has the wrong length");
    }
    double total = 0.0;
    for (double p : p0) {
        if (p < 0.0) {
            throw std::invalid_argument("TinyChain: p0 has a negative entry");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw std::invalid_argument("TinyChain: p0 is not normalized");
    }
    if (!rate) {
        throw std::invalid_argument("TinyChain: missing rate function");
    }
}

std::vector<double> ode_marginals(const TinyChain& chain, double t_end, int steps) {
    chain.validate();
    if (steps < 1) {
        throw std::invalid_argument("ode_marginals: steps must be >= 1");
    }
    const auto n = static_cast<std::size_t>(chain.num_states);
    const double dt = t_end / steps;
    std::vector<double> p = chain.p0;
    std::vector<double> next(n);
    for (int k = 0; k < steps; ++k) {
        const double t = k * dt;
        next = p;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    continue;
                }
                const double r = chain.rate(static_cast<int>(i), static_cast<int>(j), t);
                if (r < 0.0) {
                    throw std::domain_error("ode_marginals: negative off-diagonal rate");
                }
                const double flow = p[i] * r * dt;
                next[j] += flow;
                next[i] -= flow;
            }
        }
        double total = 0.0;
        for (double& v : next) {
            if (v < -1e-9) {
                std::ostringstream os;
                os << "ode_marginals: mass " << v << " < -1e-9 at t = " << t << "; step size too large";
                throw std::domain_error(os.str());
            }
            v = std::max(v, 0.0);
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw std::domain_error("ode_marginals: mass drift exceeds 1e-9 in one step");
        }
        for (double& v : next) {
            v /= total;
        }
        p.swap(next);
    }
    return p;
}

std::vector<double> masking_posterior(std::span<const double> data, Token xt, double t) {
    const Alphabet alphabet(static_cast<int>(data.size()));
    std::vector<double> post(data.size());
    double z = 0.0;
    for (std::size_t x1 = 0; x1 < data.size(); ++x1) {
        post[x1] = data[x1] * masking_kernel_prob(alphabet, static_cast<Token>(x1), xt, t);
        z += post[x1];
    }
    if (!(z > 0.0)) {
        throw std::domain_error("masking_posterior: observation has zero probability");
    }
    for (double& v : post) {
        v /= z;
    }
    return post;
}

TinyChain masking_reverse_chain(std::span<const double> data, double eta) {
    const Alphabet alphabet(static_cast<int>(data.size()));
    TinyChain chain;
    chain.num_states = alphabet.augmented_size();
    chain.p0.assign(static_cast<std::size_t>(chain.num_states), 0.0);
    chain.p0.back() = 1.0;
    std::vector<double> data_copy(data.begin(), data.end());
    chain.rate = [alphabet, data_copy, eta](int from, int to, double t) {
        if (alphabet.is_mask(from)) {
            const auto post = masking_posterior(data_copy, from, t);
            return unconditional_rate_mask(alphabet, post, from, to, t, eta);
        }
        // The posterior of an unmasked token is a point mass; only the
        // re-masking rate remains.
        const std::vector<double> point(data_copy.size(), 0.0);
        return unconditional_rate_mask(alphabet, point, from, to, t, eta);
    };
    return chain;
}

std::vector<double> decode_terminal(std::span<const double> marginal, std::span<const double> p1t) {
    if (marginal.size() != p1t.size() + 1) {
        throw std::invalid_argument("decode_terminal: marginal must cover S real tokens plus the mask");
    }
    std::vector<double> out(p1t.size());
    const double masked = marginal.back();
    for (std::size_t j = 0; j < p1t.size(); ++j) {
        out[j] = marginal[j] + masked * p1t[j];
    }
    return out;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw std::invalid_argument("total_variation: size mismatch");
    }
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        tv += std::abs(p[i] - q[i]);
    }
    return 0.5 * tv;
}

PosteriorDenoiser::PosteriorDenoiser(std::vector<double> data) : data_(std::move(data)) {
    (void)Alphabet(static_cast<int>(data_.size()));
}

Eigen::MatrixXd PosteriorDenoiser::probabilities(std::span<const Sequence> xs, std::span<const double> times) const {
    const auto s = static_cast<Eigen::Index>(data_.size());
    Eigen::MatrixXd out(s, static_cast<Eigen::Index>(xs.size()));
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const double t = times.size() == 1 ? times[0] : times[b];
        const auto post = masking_posterior(data_, xs[b][0], t);
        for (Eigen::Index j = 0; j < s; ++j) {
            out(j, static_cast<Eigen::Index>(b)) = post[static_cast<std::size_t>(j)];
        }
    }
    return out;
}

FdReport fd_gradcheck(const LossFn& loss, std::span<const double> params, std::size_t num_probes, double h, Rng& rng) {
    const GradProbe base = loss(params);
    if (base.grad.size() != params.size()) {
        throw std::invalid_argument("fd_gradcheck: gradient size does not match parameters");
    }
    std::vector<std::size_t> order(params.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(std::min(num_probes, order.size()));

    std::vector<double> work(params.begin(), params.end());
    FdReport report;
    for (std::size_t idx : order) {
        const double orig = work[idx];
        work[idx] = orig + h;
        const double f_plus = loss(work).value;
        work[idx] = orig - h;
        const double f_minus = loss(work).value;
        work[idx] = orig;
        const double fd = (f_plus - f_minus) / (2.0 * h);
        const double an = base.grad[idx];
        const double denom = std::max({std::abs(fd), std::abs(an), kFdAbsFloor});
        double rel = std::abs(fd - an) / denom;
        if (std::isnan(rel)) {
            rel = INFINITY;
        }
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = idx;
        }
        ++report.probes;
    }
    return report;
}

Eigen::MatrixXd random_softmax_table(int num_tokens, int num_dims, Rng& rng, double logit_scale) {
    Eigen::MatrixXd table(num_tokens, num_dims);
    for (int d = 0; d < num_dims; ++d) {
        double z = 0.0;
        for (int s = 0; s < num_tokens; ++s) {
            table(s, d) = std::exp(rng.uniform(-logit_scale, logit_scale));
            z += table(s, d);
        }
        table.col(d) /= z;
    }
    return table;
}

SweepReport equivalence_sweep(std::size_t num_cases, Rng& rng, const SweepOptions& opts) {
    if (opts.etas.empty()) {
        throw std::invalid_argument("equivalence_sweep: need at least one eta");
    }
    const DTermMaskFn mask_fn = opts.d_term_mask_fn ? opts.d_term_mask_fn : DTermMaskFn(d_term_mask);
    SweepReport report;
    for (std::size_t c = 0; c < num_cases; ++c) {
        const int num_tokens = 2 + static_cast<int>(rng.index(4));
        const int num_dims = 1 + static_cast<int>(rng.index(4));
        const double t = rng.uniform(0.01, 0.99);
        const double eta = opts.etas[c % opts.etas.size()];
        const Alphabet alphabet(num_tokens);

        Sequence x1 = Sequence::filled(static_cast<std::size_t>(num_dims), 0);
        Sequence xt = x1;
        for (int d = 0; d < num_dims; ++d) {
            const auto k = static_cast<std::size_t>(d);
            x1[k] = static_cast<Token>(rng.index(static_cast<std::size_t>(num_tokens)));
            xt[k] = rng.uniform() < 0.5 ? alphabet.mask_id() : x1[k];
        }
        DenoiserOutput theta;
        theta.probs = random_softmax_table(num_tokens, num_dims, rng);
        DenoiserOutput ref;
        ref.probs = opts.theta_equals_ref ? theta.probs : random_softmax_table(num_tokens, num_dims, rng);

        const auto schedule = NoiseSchedule::masking(alphabet);
        const double general = d_term_general(schedule, theta, ref, xt, x1, t, eta).value;
        const double closed = mask_fn(theta, ref, xt, x1, t, eta).value;
        const double diff = std::abs(general - closed);
        report.max_abs_diff = std::max(report.max_abs_diff, std::isnan(diff) ? INFINITY : diff);
        if (!(diff <= opts.tolerance)) {
            ++report.failures;
        }
        ++report.cases;
    }
    return report;
}

Eigen::MatrixXd CountingDenoiser::probabilities(std::span<const Sequence> xs, std::span<const double> times) const {
    auto& slot = role_ == ModelRole::Theta ? counter_->theta : counter_->ref;
    slot += xs.size();
    return inner_->probabilities(xs, times);
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kLog2 = 0.69314718055994530942;

Architecture check_architecture() {
    Architecture arch;
    arch.num_dims = 8;
    arch.num_tokens = 2;
    arch.hidden = {128, 128};
    return arch;
}

std::vector<PreferencePair> random_pairs(const Alphabet& alphabet, int num_dims, std::size_t n, Rng& rng) {
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        PreferencePair pair;
        pair.winner = Sequence::filled(static_cast<std::size_t>(num_dims), 0);
        pair.loser = pair.winner;
        for (int d = 0; d < num_dims; ++d) {
            pair.winner[static_cast<std::size_t>(d)] = static_cast<Token>(rng.index(static_cast<std::size_t>(alphabet.size())));
            pair.loser[static_cast<std::size_t>(d)] = static_cast<Token>(rng.index(static_cast<std::size_t>(alphabet.size())));
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

DenoiserParams perturbed(const DenoiserParams& base, double scale, Rng& rng) {
    DenoiserParams out = base;
    for (double& v : out.values()) {
        v += rng.uniform(-scale, scale);
    }
    return out;
}

CheckResult check_equivalence(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 1);
    SweepOptions sweep;
    sweep.etas = {0.0, 2.0};
    sweep.d_term_mask_fn = opts.d_term_mask_fn;
    const SweepReport rep = equivalence_sweep(1000, rng, sweep);
    return {"equivalence_sweep", rep.max_abs_diff, sweep.tolerance, rep.failures == 0};
}

CheckResult check_eta_scaling(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 2);
    std::size_t mismatches = 0;
    for (int c = 0; c < 100; ++c) {
        const int num_tokens = 2 + static_cast<int>(rng.index(4));
        const int num_dims = 1 + static_cast<int>(rng.index(4));
        const double t = rng.uniform(0.01, 0.99);
        const double eta = 2.0;
        Sequence x1 = Sequence::filled(static_cast<std::size_t>(num_dims), 0);
        Sequence xt = x1;
        for (std::size_t d = 0; d < x1.size(); ++d) {
            x1[d] = static_cast<Token>(rng.index(static_cast<std::size_t>(num_tokens)));
            xt[d] = rng.uniform() < 0.5 ? num_tokens : x1[d];
        }
        DenoiserOutput theta{.logits = {}, .probs = random_softmax_table(num_tokens, num_dims, rng)};
        DenoiserOutput ref{.logits = {}, .probs = random_softmax_table(num_tokens, num_dims, rng)};
        const double noisy = d_term_mask(theta, ref, xt, x1, t, eta).value;
        const double clean = d_term_mask(theta, ref, xt, x1, t, 0.0).value;
        if (noisy != (1.0 + eta * t) * clean) {
            ++mismatches;
        }
    }
    return {"eta_scaling", static_cast<double>(mismatches), 0.0, mismatches == 0};
}

CheckResult check_reference_fixed_point(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 3);
    Rng init = derive_stream(opts.seed, stream::init);
    const DenoiserParams theta = DenoiserParams::glorot(check_architecture(), init);
    const RefModel ref = snapshot_ref(theta);
    const auto pairs = random_pairs(theta.alphabet(), theta.arch().num_dims, 16, rng);
    DpoConfig cfg;
    cfg.mc_t_samples = 4;
    double worst = 0.0;
    for (const auto& pair : pairs) {
        for (int k = 0; k < cfg.mc_t_samples; ++k) {
            const DpoDraw draw = sample_dpo_draw(theta.alphabet(), pair, cfg, rng);
            const auto tw = forward(theta, draw.xt_w, draw.t);
            const auto tl = forward(theta, draw.xt_l, draw.t);
            const auto rw = ref.forward(draw.xt_w, draw.t);
            const auto rl = ref.forward(draw.xt_l, draw.t);
            Eigen::MatrixXd gw;
            Eigen::MatrixXd gl;
            const double loss = dpo_draw_loss(cfg, draw, pair, tw, rw, tl, rl, 1.0, gw, gl);
            worst = std::max(worst, std::abs(loss - kLog2));
        }
    }
    return {"reference_fixed_point", worst, 0.0, worst == 0.0};
}

CheckResult check_fd_pretrain(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 4);
    Rng init = derive_stream(opts.seed, stream::init, 4);
    const DenoiserParams params = DenoiserParams::glorot(check_architecture(), init);
    const Alphabet alphabet = params.alphabet();

    std::vector<Sequence> x1s;
    std::vector<Sequence> xts;
    std::vector<double> times;
    for (int b = 0; b < 8; ++b) {
        Sequence x1 = Sequence::filled(static_cast<std::size_t>(params.arch().num_dims), 0);
        for (auto& tok : x1.tokens) {
            tok = static_cast<Token>(rng.index(static_cast<std::size_t>(alphabet.size())));
        }
        const double t = rng.uniform(0.05, 0.95);
        xts.push_back(sample_forward(alphabet, x1, t, rng));
        x1s.push_back(std::move(x1));
        times.push_back(t);
    }

    const LossFn fn = [&](std::span<const double> values) {
        DenoiserParams p = params;
        std::copy(values.begin(), values.end(), p.values().begin());
        const ForwardCache cache = forward_batch(p, xts, times);
        Eigen::MatrixXd dlogits(cache.logits.rows(), cache.logits.cols());
        GradProbe probe;
        const double w = 1.0 / static_cast<double>(xts.size());
        for (std::size_t b = 0; b < xts.size(); ++b) {
            DenoiserOutput out;
            out.probs = token_table(cache.probs, static_cast<Eigen::Index>(b), alphabet.size(), p.arch().num_dims);
            const LossAndGrad lg = pretrain_loss(out, alphabet, x1s[b], xts[b]);
            probe.value += w * lg.loss;
            dlogits.col(static_cast<Eigen::Index>(b)) = w * lg.dlogits.reshaped();
        }
        probe.grad = backward_batch(p, cache, dlogits).values;
        return probe;
    };
    const FdReport rep = fd_gradcheck(fn, params.values(), opts.full ? 1000 : 250, 1e-4, rng);
    return {"fd_gradcheck_pretrain", rep.max_rel_error, 1e-4, rep.max_rel_error <= 1e-4};
}

CheckResult check_fd_d2dpo(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 5);
    Rng init = derive_stream(opts.seed, stream::init, 5);
    const DenoiserParams ref_params = DenoiserParams::glorot(check_architecture(), init);
    const DenoiserParams theta = perturbed(ref_params, 0.05, rng);
    const RefModel ref = snapshot_ref(ref_params);
    const auto pairs = random_pairs(theta.alphabet(), theta.arch().num_dims, 4, rng);
    DpoConfig cfg;
    cfg.mc_t_samples = 2;
    cfg.t_max = 0.95;
    const Rng frozen = rng;

    const LossFn fn = [&](std::span<const double> values) {
        DenoiserParams p = theta;
        std::copy(values.begin(), values.end(), p.values().begin());
        Rng draw_rng = frozen;
        DpoLossResult res = d2dpo_batch_loss(p, ref, pairs, cfg, draw_rng);
        return GradProbe{res.loss, std::move(res.grads.values)};
    };
    const FdReport rep = fd_gradcheck(fn, theta.values(), opts.full ? 1000 : 250, 1e-4, rng);
    return {"fd_gradcheck_d2dpo", rep.max_rel_error, 1e-4, rep.max_rel_error <= 1e-4};
}

CheckResult check_sampler_vs_ode(const VerifyOptions& opts, double eta, const std::string& name) {
    const std::vector<double> data = {0.3, 0.7};
    SamplerConfig cfg;
    cfg.num_steps = 1000;
    cfg.eta = eta;
    cfg.t_max = eta > 0.0 ? 0.99 : 1.0 - 1e-3;
    cfg.rng_seed = splitmix64(opts.seed ^ 0x5a5a);
    const std::size_t n = opts.full ? 20000 : 5000;

    const PosteriorDenoiser model(data);
    const auto samples = generate(model, cfg, n);
    std::vector<double> empirical(data.size(), 0.0);
    for (const auto& s : samples) {
        empirical[static_cast<std::size_t>(s[0])] += 1.0 / static_cast<double>(n);
    }
    const auto marginal = ode_marginals(masking_reverse_chain(data, eta), cfg.t_max, cfg.num_steps);
    const auto expected = decode_terminal(marginal, masking_posterior(data, 2, cfg.t_max));
    const double tv = total_variation(empirical, expected);
    return {name, tv, 0.02, tv <= 0.02};
}

CheckResult check_forward_marginal(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 6);
    const Alphabet alphabet(2);
    const std::size_t n = 10000;
    const Sequence x1 = Sequence::filled(n, 1);
    double worst_sigma = 0.0;
    for (double t : {0.25, 0.5, 0.75}) {
        const Sequence xt = sample_forward(alphabet, x1, t, rng);
        const double frac = 1.0 - static_cast<double>(xt.count_masked(alphabet)) / static_cast<double>(n);
        const double sigma = std::sqrt(t * (1.0 - t) / static_cast<double>(n));
        worst_sigma = std::max(worst_sigma, std::abs(frac - t) / sigma);
    }
    return {"forward_marginal_sigma", worst_sigma, 3.0, worst_sigma <= 3.0};
}

CheckResult check_query_count(const VerifyOptions& opts) {
    Rng rng = derive_stream(opts.seed, stream::verify, 7);
    Rng init = derive_stream(opts.seed, stream::init, 7);
    const DenoiserParams theta = DenoiserParams::glorot(check_architecture(), init);
    const RefModel ref = snapshot_ref(theta);
    QueryCounter counter;
    const auto counted_ref = count_queries(ref, counter, ModelRole::Ref);
    const auto pairs = random_pairs(theta.alphabet(), theta.arch().num_dims, 5, rng);
    DpoConfig cfg;
    cfg.mc_t_samples = 3;
    const DpoLossResult res = d2dpo_batch_loss(theta, counted_ref, pairs, cfg, rng);
    const auto expected = static_cast<std::uint64_t>(2 * pairs.size() * static_cast<std::size_t>(cfg.mc_t_samples));
    const double off = std::abs(static_cast<double>(res.theta_queries) - static_cast<double>(expected)) +
                       std::abs(static_cast<double>(counter.ref) - static_cast<double>(expected));
    return {"query_count", off, 0.0, off == 0.0};
}

}  // namespace

std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
    std::vector<CheckResult> results;
    results.push_back(check_equivalence(opts));
    results.push_back(check_eta_scaling(opts));
    results.push_back(check_reference_fixed_point(opts));
    results.push_back(check_fd_pretrain(opts));
    results.push_back(check_fd_d2dpo(opts));
    results.push_back(check_sampler_vs_ode(opts, 0.0, "sampler_vs_ode"));
    if (opts.full) {
        results.push_back(check_sampler_vs_ode(opts, 2.0, "sampler_vs_ode_eta2"));
    }
    results.push_back(check_forward_marginal(opts));
    results.push_back(check_query_count(opts));
    return results;
}

std::string report_to_json(const std::vector<CheckResult>& results) {
    nlohmann::json checks = nlohmann::json::array();
    bool all = true;
    for (const auto& r : results) {
        checks.push_back({{"check_name", r.check_name}, {"metric", r.metric}, {"threshold", r.threshold}, {"pass", r.pass}});
        all = all && r.pass;
    }
    nlohmann::json doc{{"checks", checks}, {"pass", all}};
    return doc.dump(2) + "\n";
}

}  // namespace d2dpo::oracle
