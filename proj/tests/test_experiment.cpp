#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "d2dpo/experiment.hpp"

using namespace d2dpo;
using namespace d2dpo::experiment;

namespace {

RunConfig small_config() {
    RunConfig cfg;
    cfg.n_bits = 4;
    cfg.seed = 99;
    cfg.hidden = {32, 32};
    cfg.pretrain_epochs = 6;
    cfg.dataset_multiplicity = 8;
    cfg.pretrain_batch = 16;
    cfg.finetune_epochs = 4;
    cfg.num_pairs = 32;
    cfg.finetune_batch = 16;
    cfg.loss_eval_draws = 2;
    cfg.eval_samples = 100;
    cfg.eval_every = 2;
    cfg.sampler.num_steps = 20;
    return cfg;
}

}  // namespace

TEST_CASE("integer encoding") {
    CHECK(encode_integer(2, 4) == Sequence({1, 1, 0, 0}));
    CHECK(encode_integer(0, 3) == Sequence({0, 0, 0}));
    CHECK(encode_integer(3, 3) == Sequence({1, 1, 1}));
    CHECK_THROWS_AS(encode_integer(5, 4), std::invalid_argument);
    CHECK(decode_integer(Sequence({1, 0, 1, 0})) == std::nullopt);
    CHECK(decode_integer(Sequence({1, 1, 2, 0})) == std::nullopt);
    for (int i = 0; i <= 8; ++i) {
        CHECK(decode_integer(encode_integer(i, 8)) == i);
    }
}

TEST_CASE("dataset holds every encoding") {
    const auto data = build_dataset(4);
    CHECK(data.size() == 5);
    for (int i = 0; i <= 4; ++i) {
        CHECK(decode_integer(data[static_cast<std::size_t>(i)]) == i);
    }
    CHECK(build_dataset(8, 3).size() == 27);
}

TEST_CASE("preference pairs") {
    Rng rng(17);
    const std::size_t n = 10000;
    const auto pairs = build_preferences(8, n, rng);
    std::vector<int> hist(9, 0);
    for (const auto& p : pairs) {
        const auto w = decode_integer(p.winner);
        const auto l = decode_integer(p.loser);
        REQUIRE(w);
        REQUIRE(l);
        CHECK(*w % 2 == 1);
        CHECK(*l % 2 == 0);
        hist[static_cast<std::size_t>(*w)]++;
    }
    const double sd = std::sqrt(n * 0.25 * 0.75);
    for (int v : {1, 3, 5, 7}) {
        CHECK(std::abs(hist[static_cast<std::size_t>(v)] - n * 0.25) <= 3.0 * sd);
    }
}

TEST_CASE("metrics") {
    CHECK(metric_vsr({Sequence({1, 1, 0, 0})}) == 1.0);
    CHECK(metric_vsr({Sequence({1, 0, 1, 0})}) == 0.0);
    CHECK(metric_odd_ratio(std::vector<Sequence>(5, encode_integer(3, 8))) == 1.0);
    CHECK(metric_odd_ratio({Sequence({1, 0, 1, 0}), Sequence({0, 1, 0, 0})}) == 0.0);
    std::vector<Sequence> valid;
    for (int i = 0; i <= 8; ++i) {
        valid.push_back(encode_integer(i, 8));
    }
    CHECK(metric_odd_ratio(valid) == doctest::Approx(4.0 / 9.0));
    CHECK(metric_vsr({}) == 0.0);
}

TEST_CASE("VSR of uniform random bits") {
    Rng rng(23);
    const std::size_t n = 100000;
    std::vector<Sequence> samples;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Sequence s = Sequence::filled(8, 0);
        for (auto& tok : s.tokens) {
            tok = static_cast<Token>(rng.index(2));
        }
        samples.push_back(std::move(s));
    }
    const double p = 9.0 / 256.0;
    CHECK(std::abs(metric_vsr(samples) - p) <= 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("moving average") {
    const std::vector<double> v = {4, 2, 6, 8};
    const auto ma = moving_average(v, 2);
    REQUIRE(ma.size() == 3);
    CHECK(ma[0] == 3.0);
    CHECK(ma[1] == 4.0);
    CHECK(ma[2] == 7.0);
    CHECK(moving_average(v, 5).empty());
    CHECK_THROWS_AS(moving_average(v, 0), std::invalid_argument);
}

TEST_CASE("cosine schedule") {
    CHECK(scheduled_lr(LrSchedule::Constant, 1e-3, 7, 10) == 1e-3);
    CHECK(scheduled_lr(LrSchedule::Cosine, 1e-3, 1, 10) == 1e-3);
    CHECK(scheduled_lr(LrSchedule::Cosine, 1e-3, 6, 10) == doctest::Approx(5e-4));
    CHECK(scheduled_lr(LrSchedule::Cosine, 1e-3, 10, 10) > 0.0);
}

TEST_CASE("config validation") {
    RunConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.n_bits = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.eval_every = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.pretrain_t_max = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("records csv round trip") {
    std::vector<TrainRecord> recs(2);
    recs[0].epoch = 0;
    recs[0].phase = "finetune";
    recs[0].loss = std::numbers::ln2;
    recs[0].odd_ratio = 0.4;
    recs[0].vsr = 0.97;
    recs[1].epoch = 1;
    recs[1].phase = "finetune";
    recs[1].loss = 0.1234567890123456789;
    recs[1].theta_queries = 1024;
    recs[1].ref_queries = 1024;
    std::stringstream ss;
    write_records_csv(ss, recs);
    const std::string text = ss.str();
    CHECK(text.rfind(std::string(kRecordsHeader) + "\n", 0) == 0);
    const auto back = read_records_csv(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].loss == recs[0].loss);
    CHECK(back[0].vsr == recs[0].vsr);
    CHECK(back[1].loss == recs[1].loss);
    CHECK_FALSE(back[1].odd_ratio.has_value());
    CHECK(back[1].theta_queries == 1024);
}

TEST_CASE("small pretrain and finetune run") {
    const RunConfig cfg = small_config();
    std::vector<TrainRecord> seen;
    const PhaseResult pre = run_pretrain(cfg, [&](const TrainRecord& r) { seen.push_back(r); });
    REQUIRE(pre.records.size() == 7);
    CHECK(seen.size() == 7);
    CHECK(pre.records[0].vsr.has_value());
    CHECK_FALSE(pre.records[1].vsr.has_value());
    CHECK(pre.records[2].vsr.has_value());
    CHECK(pre.records[6].vsr.has_value());
    CHECK(pre.records[1].theta_queries == 40);
    CHECK(pre.records[1].ref_queries == 0);

    const PhaseResult ft = run_finetune(pre.params, cfg);
    REQUIRE(ft.records.size() == 5);
    CHECK(ft.records[0].loss == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK(ft.records[0].odd_ratio.has_value());
    for (std::size_t e = 1; e < ft.records.size(); ++e) {
        CHECK(ft.records[e].loss < std::numbers::ln2);
        CHECK(ft.records[e].theta_queries == 2 * 32);
        CHECK(ft.records[e].ref_queries == 2 * 32);
    }

    SUBCASE("same seed, same records") {
        const PhaseResult again = run_pretrain(cfg);
        std::ostringstream a;
        std::ostringstream b;
        write_records_csv(a, pre.records);
        write_records_csv(b, again.records);
        CHECK(a.str() == b.str());
        CHECK(again.params == pre.params);
    }

    SUBCASE("beta = 0 keeps the loss at log 2") {
        RunConfig flat = cfg;
        flat.dpo.beta = 0.0;
        for (const auto& r : run_finetune(pre.params, flat).records) {
            CHECK(r.loss == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
        }
    }

    SUBCASE("mismatched architecture is rejected") {
        RunConfig other = cfg;
        other.hidden = {16};
        CHECK_THROWS_AS(run_finetune(pre.params, other), std::invalid_argument);
    }
}

TEST_CASE("untrained model VSR is near the random-word baseline") {
    RunConfig cfg;
    cfg.eval_samples = 2000;
    cfg.sampler.num_steps = 50;
    Rng init = derive_stream(cfg.seed, stream::init);
    const DenoiserParams p = DenoiserParams::glorot(cfg.architecture(), init);
    const EvalMetrics m = evaluate(p, cfg, "pretrain", 0);
    // The random network is not exactly uniform, so allow a wide band around 9/256.
    CHECK(m.vsr < 0.1);
}
