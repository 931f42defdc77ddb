#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "d2dpo/commands.hpp"
#include "d2dpo/experiment.hpp"

namespace fs = std::filesystem;
using namespace d2dpo;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("d2dpo_cli_" + std::to_string(std::rand()) + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run(const std::string& args) {
    const std::string cmd = std::string("D2DPO_LOG=error ") + D2DPO_CLI_PATH + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmallConfig = R"({
    "n_bits": 4, "seed": 5,
    "model": {"hidden": [16, 16]},
    "pretrain": {"epochs": 4, "batch_size": 10, "dataset_multiplicity": 4},
    "finetune": {"epochs": 3, "batch_size": 8, "num_pairs": 16, "loss_eval_draws": 2},
    "sampler": {"num_steps": 20},
    "eval": {"samples": 50, "every": 2}
})";

}  // namespace

TEST_CASE("pretrain, finetune, sample and eval through the executable") {
    TempDir tmp;
    const fs::path cfg = tmp.path / "config.json";
    write_file(cfg, kSmallConfig);

    const fs::path pre = tmp.path / "pre";
    REQUIRE(run("pretrain --config " + cfg.string() + " --out " + pre.string()) == 0);
    for (const char* f : {"checkpoint.json", "records.csv", "config.resolved.json", "metadata.json"}) {
        CHECK(fs::exists(pre / f));
    }
    const auto meta = nlohmann::json::parse(slurp(pre / "metadata.json"));
    CHECK(meta["seed"] == 5);
    CHECK(meta["config"]["n_bits"] == 4);
    CHECK(meta.contains("artifact_version"));

    SUBCASE("same config and seed give byte-identical records") {
        const fs::path again = tmp.path / "again";
        REQUIRE(run("pretrain --config " + cfg.string() + " --out " + again.string()) == 0);
        CHECK(slurp(pre / "records.csv") == slurp(again / "records.csv"));
        CHECK(slurp(pre / "checkpoint.json") == slurp(again / "checkpoint.json"));
    }

    SUBCASE("finetune") {
        const fs::path ft = tmp.path / "ft";
        REQUIRE(run("finetune --config " + cfg.string() + " --checkpoint " + (pre / "checkpoint.json").string() +
                    " --out " + ft.string()) == 0);
        CHECK(fs::exists(ft / "checkpoint.json"));
        std::ifstream in(ft / "records.csv");
        const auto recs = experiment::read_records_csv(in);
        REQUIRE(recs.size() == 4);
        CHECK(recs[0].loss == doctest::Approx(0.6931471805599453).epsilon(1e-15));
    }

    SUBCASE("finetune with beta = 0 stays at log 2") {
        const fs::path flat_cfg = tmp.path / "flat.json";
        auto doc = nlohmann::json::parse(kSmallConfig);
        doc["dpo"] = {{"beta", 0.0}};
        write_file(flat_cfg, doc.dump());
        const fs::path ft = tmp.path / "flat";
        REQUIRE(run("finetune --config " + flat_cfg.string() + " --checkpoint " +
                    (pre / "checkpoint.json").string() + " --out " + ft.string()) == 0);
        std::ifstream in(ft / "records.csv");
        for (const auto& r : experiment::read_records_csv(in)) {
            CHECK(r.loss == doctest::Approx(0.6931471805599453).epsilon(1e-15));
        }
    }

    SUBCASE("corrupted checkpoint leaves nothing behind") {
        const fs::path bad = tmp.path / "bad.json";
        std::string text = slurp(pre / "checkpoint.json");
        text[text.size() / 2] = text[text.size() / 2] == '1' ? '2' : '1';
        write_file(bad, text);
        const fs::path ft = tmp.path / "ft_bad";
        CHECK(run("finetune --config " + cfg.string() + " --checkpoint " + bad.string() + " --out " + ft.string()) ==
              4);
        CHECK_FALSE(fs::exists(ft));
    }

    SUBCASE("checkpoint version mismatch") {
        auto doc = nlohmann::json::parse(slurp(pre / "checkpoint.json"));
        doc["version"] = 99;
        const fs::path bad = tmp.path / "v99.json";
        write_file(bad, doc.dump());
        CHECK(run("sample --checkpoint " + bad.string() + " --n 3 --out " + (tmp.path / "s").string()) == 4);
        CHECK_FALSE(fs::exists(tmp.path / "s"));
    }

    SUBCASE("sample") {
        const fs::path s1 = tmp.path / "s1";
        const fs::path s2 = tmp.path / "s2";
        const std::string ck = (pre / "checkpoint.json").string();
        REQUIRE(run("sample --checkpoint " + ck + " --n 25 --seed 3 --steps 30 --out " + s1.string()) == 0);
        REQUIRE(run("sample --checkpoint " + ck + " --n 25 --seed 3 --steps 30 --out " + s2.string()) == 0);
        const std::string text = slurp(s1 / "samples.txt");
        CHECK(text == slurp(s2 / "samples.txt"));
        std::istringstream lines(text);
        std::string line;
        int count = 0;
        while (std::getline(lines, line)) {
            CHECK(line.size() == 4);
            CHECK(line.find_first_not_of("01") == std::string::npos);
            ++count;
        }
        CHECK(count == 25);

        const fs::path empty = tmp.path / "empty";
        REQUIRE(run("sample --checkpoint " + ck + " --n 0 --out " + empty.string()) == 0);
        CHECK(fs::file_size(empty / "samples.txt") == 0);
    }

    SUBCASE("eval") {
        const fs::path ev = tmp.path / "ev";
        REQUIRE(run("eval --checkpoint " + (pre / "checkpoint.json").string() + " --config " + cfg.string() +
                    " --out " + ev.string()) == 0);
        const auto report = nlohmann::json::parse(slurp(ev / "eval.json"));
        CHECK(report["num_samples"] == 50);
        CHECK(report["vsr"].get<double>() >= 0.0);
    }
}

TEST_CASE("config errors exit with 2 and name the field") {
    TempDir tmp;
    const fs::path cfg = tmp.path / "config.json";
    write_file(cfg, R"({"seed": 1})");
    const fs::path out = tmp.path / "out";
    const std::string cmd = std::string("D2DPO_LOG=error ") + D2DPO_CLI_PATH + " pretrain --config " + cfg.string() +
                            " --out " + out.string() + " 2>" + (tmp.path / "err.txt").string();
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 2);
    CHECK(slurp(tmp.path / "err.txt").find("config.n_bits") != std::string::npos);
    CHECK_FALSE(fs::exists(out));

    CHECK(run("pretrain --config " + (tmp.path / "missing.json").string() + " --out " + out.string()) == 2);
    CHECK(run("pretrain --out " + out.string()) == 2);
    CHECK(run("frobnicate") == 2);
}

TEST_CASE("verify writes a report and exits 0") {
    TempDir tmp;
    const fs::path out = tmp.path / "verify";
    REQUIRE(run("verify --quick --out " + out.string()) == 0);
    const auto report = nlohmann::json::parse(slurp(out / "report.json"));
    CHECK(report["pass"] == true);
    CHECK(report["checks"].size() >= 4);
}

TEST_CASE("verify with a tampered closed form exits 5 and names the check") {
    TempDir tmp;
    oracle::VerifyOptions opts;
    opts.d_term_mask_fn = [](const DenoiserOutput& th, const DenoiserOutput& rf, const Sequence& xt, const Sequence& x1,
                             double t, double eta) {
        DTerm d = d_term_mask(th, rf, xt, x1, t, eta);
        d.value = -d.value;
        return d;
    };
    const fs::path out = tmp.path / "v";
    CHECK(cli::cmd_verify(opts, out) == cli::kExitVerification);
    const auto report = nlohmann::json::parse(slurp(out / "report.json"));
    bool named = false;
    for (const auto& c : report["checks"]) {
        if (c["check_name"] == "equivalence_sweep") {
            named = c["pass"] == false;
        }
    }
    CHECK(named);
}
