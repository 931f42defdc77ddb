#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "d2dpo/config.hpp"

using namespace d2dpo;
using nlohmann::json;

namespace {

std::string error_of(const json& doc) {
    try {
        parse_run_config(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("minimal config takes the defaults") {
    const auto cfg = parse_run_config(json{{"n_bits", 8}, {"seed", 1234}});
    const experiment::RunConfig defaults;
    CHECK(cfg.pretrain_epochs == defaults.pretrain_epochs);
    CHECK(cfg.finetune_epochs == defaults.finetune_epochs);
    CHECK(cfg.dpo.beta == 1.0);
    CHECK(cfg.dpo.mc_t_samples == 1);
    CHECK(cfg.sampler.num_steps == 200);
    CHECK(cfg.eval_samples == 1000);
}

TEST_CASE("every section is read") {
    const json doc = json::parse(R"({
        "n_bits": 6, "seed": 7,
        "model": {"hidden": [64]},
        "pretrain": {"epochs": 10, "batch_size": 32, "dataset_multiplicity": 4, "t_min": 0.01, "t_max": 0.9,
                     "optimizer": {"lr": 0.002}},
        "finetune": {"epochs": 5, "batch_size": 8, "num_pairs": 40, "lr_schedule": "constant",
                     "loss_eval_draws": 3, "optimizer": {"lr": 0.0005, "beta2": 0.99}},
        "dpo": {"beta": 0.5, "eta": 1.5, "mc_t_samples": 2, "d_term": "general"},
        "sampler": {"num_steps": 100, "eta": 0.5, "t_max": 0.99},
        "eval": {"samples": 200, "every": 2},
        "record_wall_time": true
    })");
    const auto cfg = parse_run_config(doc);
    CHECK(cfg.n_bits == 6);
    CHECK(cfg.seed == 7);
    CHECK(cfg.hidden == std::vector<int>{64});
    CHECK(cfg.pretrain_batch == 32);
    CHECK(cfg.pretrain_opt.lr == 0.002);
    CHECK(cfg.pretrain_opt.beta1 == 0.9);
    CHECK(cfg.finetune_schedule == experiment::LrSchedule::Constant);
    CHECK(cfg.loss_eval_draws == 3);
    CHECK(cfg.finetune_opt.beta2 == 0.99);
    CHECK(cfg.dpo.d_term == DTermKind::General);
    CHECK(cfg.dpo.eta == 1.5);
    CHECK(cfg.sampler.t_max == 0.99);
    CHECK(cfg.eval_every == 2);
    CHECK(cfg.record_wall_time);

    SUBCASE("round trip through the resolved form") {
        const auto again = parse_run_config(run_config_to_json(cfg));
        CHECK(run_config_to_json(again) == run_config_to_json(cfg));
    }
}

TEST_CASE("errors carry the field path") {
    CHECK(error_of(json{{"seed", 1}}).rfind("config.n_bits: missing required key", 0) == 0);
    CHECK(error_of(json{{"n_bits", 8}}).rfind("config.seed:", 0) == 0);
    CHECK(error_of(json{{"n_bits", 8}, {"seed", 1}, {"colour", 3}}).rfind("config.colour: unknown key", 0) == 0);
    CHECK(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "dpo": {"betta": 1}})")).rfind("config.dpo.betta", 0) == 0);
    CHECK(error_of(json{{"n_bits", "8"}, {"seed", 1}}).rfind("config.n_bits: expected an integer", 0) == 0);
    CHECK(error_of(json{{"n_bits", 8}, {"seed", -1}}).rfind("config.seed", 0) == 0);
    CHECK(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "model": {"hidden": [64, 0]}})"))
              .rfind("config.model.hidden[1]", 0) == 0);
    CHECK(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "finetune": {"optimizer": {"lr": "fast"}}})"))
              .rfind("config.finetune.optimizer.lr", 0) == 0);
    CHECK(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "dpo": {"d_term": "other"}})")).rfind("config.dpo.d_term", 0) == 0);
    CHECK(error_of(json::array()).rfind("config: expected an object", 0) == 0);
}

TEST_CASE("semantic validation runs after parsing") {
    CHECK_FALSE(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "dpo": {"t_max": 1.0}})")).empty());
    CHECK_FALSE(error_of(json{{"n_bits", 1}, {"seed", 1}}).empty());
    CHECK_FALSE(error_of(json::parse(R"({"n_bits": 8, "seed": 1, "sampler": {"num_steps": 0}})")).empty());
}

TEST_CASE("unreadable files") {
    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}
