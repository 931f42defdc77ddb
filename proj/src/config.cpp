#include "d2dpo/config.hpp"

#include <fstream>
#include <initializer_list>
#include <limits>
#include <set>

namespace d2dpo {

namespace {

using nlohmann::json;
using experiment::LrSchedule;
using experiment::RunConfig;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
}

void require_object(const json& node, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!node.is_object()) {
        fail(path, "expected an object");
    }
    const std::set<std::string> known(allowed.begin(), allowed.end());
    for (const auto& item : node.items()) {
        if (!known.contains(item.key())) {
            fail(path + "." + item.key(), "unknown key");
        }
    }
}

void read_int(const json& node, const std::string& path, const char* key, int& out) {
    if (!node.contains(key)) {
        return;
    }
    const json& v = node.at(key);
    if (!v.is_number_integer()) {
        fail(path + "." + key, "expected an integer");
    }
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        fail(path + "." + key, "integer out of range");
    }
    out = static_cast<int>(x);
}

void read_double(const json& node, const std::string& path, const char* key, double& out) {
    if (!node.contains(key)) {
        return;
    }
    const json& v = node.at(key);
    if (!v.is_number()) {
        fail(path + "." + key, "expected a number");
    }
    out = v.get<double>();
}

void read_bool(const json& node, const std::string& path, const char* key, bool& out) {
    if (!node.contains(key)) {
        return;
    }
    const json& v = node.at(key);
    if (!v.is_boolean()) {
        fail(path + "." + key, "expected true or false");
    }
    out = v.get<bool>();
}

void read_optimizer(const json& node, const std::string& path, AdamHyper& out) {
    if (!node.contains("optimizer")) {
        return;
    }
    const std::string p = path + ".optimizer";
    const json& opt = node.at("optimizer");
    require_object(opt, p, {"lr", "beta1", "beta2", "eps"});
    read_double(opt, p, "lr", out.lr);
    read_double(opt, p, "beta1", out.beta1);
    read_double(opt, p, "beta2", out.beta2);
    read_double(opt, p, "eps", out.eps);
}

const json* section(const json& doc, const char* key) {
    return doc.contains(key) ? &doc.at(key) : nullptr;
}

json optimizer_json(const AdamHyper& h) {
    return {{"lr", h.lr}, {"beta1", h.beta1}, {"beta2", h.beta2}, {"eps", h.eps}};
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    const std::string root = "config";
    require_object(doc, root,
                   {"n_bits", "seed", "model", "pretrain", "finetune", "dpo", "sampler", "eval", "record_wall_time"});
    RunConfig cfg;

    if (!doc.contains("n_bits")) {
        fail(root + ".n_bits", "missing required key");
    }
    read_int(doc, root, "n_bits", cfg.n_bits);
    if (!doc.contains("seed")) {
        fail(root + ".seed", "missing required key");
    }
    const json& seed = doc.at("seed");
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
        fail(root + ".seed", "expected a nonnegative integer");
    }
    cfg.seed = doc.at("seed").get<std::uint64_t>();
    read_bool(doc, root, "record_wall_time", cfg.record_wall_time);

    if (const json* model = section(doc, "model")) {
        const std::string p = root + ".model";
        require_object(*model, p, {"hidden"});
        if (model->contains("hidden")) {
            const json& h = model->at("hidden");
            if (!h.is_array()) {
                fail(p + ".hidden", "expected an array of integers");
            }
            cfg.hidden.clear();
            for (std::size_t i = 0; i < h.size(); ++i) {
                if (!h[i].is_number_integer() || h[i].get<std::int64_t>() < 1 || h[i].get<std::int64_t>() > 1 << 20) {
                    fail(p + ".hidden[" + std::to_string(i) + "]", "expected a positive integer");
                }
                cfg.hidden.push_back(h[i].get<int>());
            }
        }
    }

    if (const json* pre = section(doc, "pretrain")) {
        const std::string p = root + ".pretrain";
        require_object(*pre, p, {"epochs", "batch_size", "dataset_multiplicity", "t_min", "t_max", "optimizer"});
        read_int(*pre, p, "epochs", cfg.pretrain_epochs);
        read_int(*pre, p, "batch_size", cfg.pretrain_batch);
        read_int(*pre, p, "dataset_multiplicity", cfg.dataset_multiplicity);
        read_double(*pre, p, "t_min", cfg.pretrain_t_min);
        read_double(*pre, p, "t_max", cfg.pretrain_t_max);
        read_optimizer(*pre, p, cfg.pretrain_opt);
    }

    if (const json* ft = section(doc, "finetune")) {
        const std::string p = root + ".finetune";
        require_object(*ft, p,
                       {"epochs", "batch_size", "num_pairs", "lr_schedule", "loss_eval_draws", "optimizer"});
        read_int(*ft, p, "epochs", cfg.finetune_epochs);
        read_int(*ft, p, "batch_size", cfg.finetune_batch);
        read_int(*ft, p, "num_pairs", cfg.num_pairs);
        read_int(*ft, p, "loss_eval_draws", cfg.loss_eval_draws);
        if (ft->contains("lr_schedule")) {
            const json& s = ft->at("lr_schedule");
            if (s == "constant") {
                cfg.finetune_schedule = LrSchedule::Constant;
            } else if (s == "cosine") {
                cfg.finetune_schedule = LrSchedule::Cosine;
            } else {
                fail(p + ".lr_schedule", "expected \"constant\" or \"cosine\"");
            }
        }
        read_optimizer(*ft, p, cfg.finetune_opt);
    }

    if (const json* dpo = section(doc, "dpo")) {
        const std::string p = root + ".dpo";
        require_object(*dpo, p, {"beta", "eta", "t_min", "t_max", "mc_t_samples", "d_term"});
        read_double(*dpo, p, "beta", cfg.dpo.beta);
        read_double(*dpo, p, "eta", cfg.dpo.eta);
        read_double(*dpo, p, "t_min", cfg.dpo.t_min);
        read_double(*dpo, p, "t_max", cfg.dpo.t_max);
        read_int(*dpo, p, "mc_t_samples", cfg.dpo.mc_t_samples);
        if (dpo->contains("d_term")) {
            const json& k = dpo->at("d_term");
            if (k == "mask") {
                cfg.dpo.d_term = DTermKind::Mask;
            } else if (k == "general") {
                cfg.dpo.d_term = DTermKind::General;
            } else {
                fail(p + ".d_term", "expected \"mask\" or \"general\"");
            }
        }
    }

    if (const json* smp = section(doc, "sampler")) {
        const std::string p = root + ".sampler";
        require_object(*smp, p, {"num_steps", "eta", "t_max"});
        read_int(*smp, p, "num_steps", cfg.sampler.num_steps);
        read_double(*smp, p, "eta", cfg.sampler.eta);
        read_double(*smp, p, "t_max", cfg.sampler.t_max);
    }

    if (const json* ev = section(doc, "eval")) {
        const std::string p = root + ".eval";
        require_object(*ev, p, {"samples", "every"});
        read_int(*ev, p, "samples", cfg.eval_samples);
        read_int(*ev, p, "every", cfg.eval_every);
    }

    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        fail(root, e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path.string());
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    return parse_run_config(doc);
}

json run_config_to_json(const RunConfig& cfg) {
    json doc;
    doc["n_bits"] = cfg.n_bits;
    doc["seed"] = cfg.seed;
    doc["model"] = {{"hidden", cfg.hidden}};
    doc["pretrain"] = {{"epochs", cfg.pretrain_epochs},
                       {"batch_size", cfg.pretrain_batch},
                       {"dataset_multiplicity", cfg.dataset_multiplicity},
                       {"t_min", cfg.pretrain_t_min},
                       {"t_max", cfg.pretrain_t_max},
                       {"optimizer", optimizer_json(cfg.pretrain_opt)}};
    doc["finetune"] = {{"epochs", cfg.finetune_epochs},
                       {"batch_size", cfg.finetune_batch},
                       {"num_pairs", cfg.num_pairs},
                       {"lr_schedule", cfg.finetune_schedule == LrSchedule::Cosine ? "cosine" : "constant"},
                       {"loss_eval_draws", cfg.loss_eval_draws},
                       {"optimizer", optimizer_json(cfg.finetune_opt)}};
    doc["dpo"] = {{"beta", cfg.dpo.beta},
                  {"eta", cfg.dpo.eta},
                  {"t_min", cfg.dpo.t_min},
                  {"t_max", cfg.dpo.t_max},
                  {"mc_t_samples", cfg.dpo.mc_t_samples},
                  {"d_term", cfg.dpo.d_term == DTermKind::Mask ? "mask" : "general"}};
    doc["sampler"] = {{"num_steps", cfg.sampler.num_steps}, {"eta", cfg.sampler.eta}, {"t_max", cfg.sampler.t_max}};
    doc["eval"] = {{"samples", cfg.eval_samples}, {"every", cfg.eval_every}};
    doc["record_wall_time"] = cfg.record_wall_time;
    return doc;
}

}  // namespace d2dpo
