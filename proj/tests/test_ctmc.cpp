#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "d2dpo/ctmc.hpp"
#include "d2dpo/oracle.hpp"

using namespace d2dpo;

namespace {

// Returns the same table for every sequence.
class FixedDenoiser final : public Denoiser {
public:
    FixedDenoiser(int num_tokens, Eigen::MatrixXd table) : num_tokens_(num_tokens), table_(std::move(table)) {}

    int num_dims() const override { return static_cast<int>(table_.cols()); }
    Alphabet alphabet() const override { return Alphabet(num_tokens_); }
    Eigen::MatrixXd probabilities(std::span<const Sequence> xs, std::span<const double>) const override {
        Eigen::MatrixXd out(table_.size(), static_cast<Eigen::Index>(xs.size()));
        for (Eigen::Index b = 0; b < out.cols(); ++b) {
            out.col(b) = table_.reshaped();
        }
        return out;
    }
    using Denoiser::probabilities;

private:
    int num_tokens_;
    Eigen::MatrixXd table_;
};

Sequence seq(std::vector<Token> toks) { return Sequence(std::move(toks)); }

}  // namespace

TEST_CASE("alphabet puts the mask after the real tokens") {
    const Alphabet a(4);
    CHECK(a.mask_id() == 4);
    CHECK(a.augmented_size() == 5);
    CHECK(a.is_mask(4));
    CHECK(a.is_real(3));
    CHECK_FALSE(a.is_real(4));
    CHECK_FALSE(a.contains(5));
    CHECK_THROWS_AS(Alphabet(1), std::invalid_argument);
}

TEST_CASE("masking kernel") {
    const Alphabet a(6);
    const Token m = a.mask_id();
    CHECK(masking_kernel_prob(a, 3, 3, 0.7) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(masking_kernel_prob(a, 3, m, 0.7) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(masking_kernel_prob(a, 3, 5, 0.7) == 0.0);

    const NoiseSchedule s = NoiseSchedule::masking(a);
    CHECK(s.kernel_dt(3, 3, 0.2) == 1.0);
    CHECK(s.kernel_dt(3, m, 0.2) == -1.0);
    CHECK(s.kernel_dt(3, 1, 0.2) == 0.0);
    CHECK(s.path_support(3, 0.5) == 2);
    CHECK(s.on_path(3, m, 0.5));
    CHECK_FALSE(s.on_path(3, 1, 0.5));
}

TEST_CASE("sample_forward endpoints and concentration") {
    const Alphabet a(2);
    Rng rng(1);
    const Sequence x1 = seq({1, 0, 1, 1, 0});
    CHECK(sample_forward(a, x1, 0.0, rng) == Sequence::filled(5, a.mask_id()));
    CHECK(sample_forward(a, x1, 1.0, rng) == x1);

    const std::size_t n = 10000;
    const Sequence big = Sequence::filled(n, 1);
    const Sequence xt = sample_forward(a, big, 0.7, rng);
    const double unmasked = 1.0 - static_cast<double>(xt.count_masked(a)) / static_cast<double>(n);
    CHECK(std::abs(unmasked - 0.7) <= 0.02);
    for (std::size_t d = 0; d < n; ++d) {
        REQUIRE((xt[d] == 1 || a.is_mask(xt[d])));
    }
    CHECK_THROWS_AS(sample_forward(a, seq({0, 2}), 0.5, rng), std::invalid_argument);
}

TEST_CASE("conditional rates") {
    const Alphabet a(4);
    const Token m = a.mask_id();
    CHECK(conditional_rate_mask(a, {m, 2, 2, 0.75}) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(conditional_rate_mask(a, {2, m, 2, 0.5}) == 0.0);
    CHECK(conditional_rate_mask(a, {m, 1, 2, 0.5}) == 0.0);

    const NoiseSchedule s = NoiseSchedule::masking(a);
    for (double t : {0.1, 0.5, 0.93}) {
        for (Token from = 0; from <= m; ++from) {
            for (Token to = 0; to <= m; ++to) {
                if (from == to || masking_kernel_prob(a, 2, from, t) == 0.0) {
                    continue;
                }
                CHECK(conditional_rate_general(s, {from, to, 2, t}) ==
                      doctest::Approx(conditional_rate_mask(a, {from, to, 2, t})).epsilon(1e-14));
            }
        }
    }
    // zero-probability source state
    CHECK_THROWS_AS(conditional_rate_general(s, {1, m, 2, 0.5}), std::domain_error);

    CHECK(conditional_rate_remask(a, {2, m, 2, 0.3}, 2.0) == 2.0);
    CHECK(conditional_rate_remask(a, {m, 2, 2, 0.5}, 2.0) == doctest::Approx(2.0));
    CHECK(conditional_rate_remask(a, {m, 2, 2, 0.5}, 0.0) == 0.0);
}

TEST_CASE("unconditional rate is the posterior expectation of the conditional rate") {
    const Alphabet a(4);
    const Token m = a.mask_id();
    const std::vector<double> uniform(4, 0.25);
    CHECK(unconditional_rate_mask(a, uniform, m, 2, 0.5, 0.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(unconditional_rate_mask(a, uniform, 1, m, 0.3, 2.0) == 2.0);
    CHECK(unconditional_rate_mask(a, uniform, 1, 2, 0.3, 2.0) == 0.0);
    CHECK(unconditional_rate_mask(a, uniform, 1, 2, 0.8, 0.0) == 0.0);

    const std::vector<double> p = {0.1, 0.2, 0.3, 0.4};
    for (double eta : {0.0, 2.0}) {
        for (double t : {0.2, 0.6}) {
            for (Token to = 0; to < 4; ++to) {
                double expected = 0.0;
                for (Token x1 = 0; x1 < 4; ++x1) {
                    expected += p[static_cast<std::size_t>(x1)] *
                                (conditional_rate_mask(a, {m, to, x1, t}) + conditional_rate_remask(a, {m, to, x1, t}, eta));
                }
                CHECK(unconditional_rate_mask(a, p, m, to, t, eta) == doctest::Approx(expected).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("euler_step") {
    const Alphabet a(4);
    const Token m = a.mask_id();
    Rng rng(9);

    SUBCASE("clean sequence with eta = 0 never moves") {
        const Sequence x = seq({0, 3, 1});
        const Eigen::MatrixXd probs = Eigen::MatrixXd::Constant(4, 3, 0.25);
        for (int i = 0; i < 50; ++i) {
            CHECK(euler_step(a, x, probs, 0.4, 0.05, 0.0, rng) == x);
        }
    }

    SUBCASE("rate times dt equal to one decodes with certainty") {
        Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(4, 1);
        probs(2, 0) = 1.0;
        for (int i = 0; i < 100; ++i) {
            CHECK(euler_step(a, seq({m}), probs, 0.9, 0.1, 0.0, rng) == seq({2}));
        }
    }

    SUBCASE("negative stay probability is an error") {
        const Eigen::MatrixXd probs = Eigen::MatrixXd::Constant(4, 1, 0.25);
        CHECK_THROWS_AS(euler_step(a, seq({m}), probs, 0.5, 0.49, 2.0, rng), std::domain_error);
    }

    SUBCASE("one step matches the exact categorical") {
        Eigen::MatrixXd probs(4, 1);
        probs << 0.1, 0.2, 0.3, 0.4;
        const double t = 0.5;
        const double dt = 0.1;
        const int n = 40000;
        std::vector<int> counts(5, 0);
        for (int i = 0; i < n; ++i) {
            counts[static_cast<std::size_t>(euler_step(a, seq({m}), probs, t, dt, 0.0, rng)[0])]++;
        }
        for (int k = 0; k < 4; ++k) {
            const double p = probs(k, 0) * dt / (1.0 - t);
            CHECK(std::abs(counts[static_cast<std::size_t>(k)] - n * p) < 4.0 * std::sqrt(n * p * (1 - p)));
        }
    }
}

TEST_CASE("sampler config validation") {
    SamplerConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.num_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.eta = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.t_max = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("generate with a one-hot denoiser reproduces the one-hot decode") {
    Eigen::MatrixXd table = Eigen::MatrixXd::Zero(3, 4);
    table(2, 0) = table(0, 1) = table(1, 2) = table(2, 3) = 1.0;
    const FixedDenoiser model(3, table);
    SamplerConfig cfg;
    cfg.num_steps = 20;
    cfg.rng_seed = 5;
    for (const auto& s : generate(model, cfg, 50)) {
        CHECK(s == seq({2, 0, 1, 2}));
    }
}

TEST_CASE("generate with a uniform denoiser hits the valid-encoding rate") {
    // 9 of the 256 binary words of length 8 have the form 1^i 0^(8-i).
    const FixedDenoiser model(2, Eigen::MatrixXd::Constant(2, 8, 0.5));
    SamplerConfig cfg;
    cfg.num_steps = 50;
    cfg.rng_seed = 77;
    const std::size_t n = 20000;
    const auto samples = generate(model, cfg, n);
    std::size_t valid = 0;
    for (const auto& s : samples) {
        REQUIRE(s.is_clean(Alphabet(2)));
        std::size_t ones = 0;
        while (ones < 8 && s[ones] == 1) {
            ++ones;
        }
        bool ok = true;
        for (std::size_t d = ones; d < 8; ++d) {
            ok = ok && s[d] == 0;
        }
        valid += ok ? 1 : 0;
    }
    const double p = 9.0 / 256.0;
    CHECK(std::abs(static_cast<double>(valid) - n * p) < 3.0 * std::sqrt(n * p * (1 - p)));
}

TEST_CASE("generate does not depend on how many samples are requested") {
    Eigen::MatrixXd table(2, 3);
    table << 0.3, 0.6, 0.5, 0.7, 0.4, 0.5;
    const FixedDenoiser model(2, table);
    SamplerConfig cfg;
    cfg.rng_seed = 123;
    cfg.num_steps = 40;
    const auto few = generate(model, cfg, 5);
    const auto many = generate(model, cfg, 64);
    for (std::size_t i = 0; i < few.size(); ++i) {
        CHECK(few[i] == many[i]);
    }
    CHECK(generate(model, cfg, 0).empty());
}

TEST_CASE("sampler terminal distribution matches the forward equation") {
    for (double eta : {0.0, 2.0}) {
        CAPTURE(eta);
        const std::vector<double> data = {0.3, 0.7};
        const oracle::PosteriorDenoiser model(data);
        SamplerConfig cfg;
        cfg.num_steps = 1000;
        cfg.eta = eta;
        cfg.t_max = 0.99;
        cfg.rng_seed = 31;
        const std::size_t n = 10000;
        std::vector<double> empirical(2, 0.0);
        for (const auto& s : generate(model, cfg, n)) {
            empirical[static_cast<std::size_t>(s[0])] += 1.0 / n;
        }
        const auto marginal = oracle::ode_marginals(oracle::masking_reverse_chain(data, eta), cfg.t_max, cfg.num_steps);
        const auto expected = oracle::decode_terminal(marginal, oracle::masking_posterior(data, 2, cfg.t_max));
        CHECK(oracle::total_variation(empirical, expected) <= 0.02);
    }
}
