#pragma once

// Run-wide configuration and the logging shared by every command. A config
// file is one flat JSON object whose keys are dotted paths ("wm.chunk_len",
// "sft.lr"); values take the field's natural JSON form (numbers, strings,
// arrays, small objects). Unknown keys are rejected by name so a typo cannot
// silently fall back to a default.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "loopworld/common.hpp"
#include "loopworld/env.hpp"
#include "loopworld/policy.hpp"
#include "loopworld/rl.hpp"
#include "loopworld/rng.hpp"
#include "loopworld/worldmodel.hpp"

namespace loopworld {

// Dataset sizing for phase-1 curation.
struct SansConfig {
    int n_success = 50;
    int n_near = 50;
    double holdout_fraction = 0.2;

    void validate() const {
        require(n_success >= 0 && n_near >= 0 && n_success + n_near >= 1,
                "SansConfig: need at least one episode");
        require(holdout_fraction > 0.0 && holdout_fraction < 1.0,
                "SansConfig: holdout_fraction must lie in (0,1)");
    }
};

// One gradient-descent budget (shared shape for pretrain / fine-tune / BC).
struct TrainBudget {
    int steps = 2000;
    double lr = 3e-3;
    int batch_size = 8;

    void validate(const char* who) const {
        require(steps >= 0, std::string(who) + ": steps must be >= 0");
        require(lr > 0.0, std::string(who) + ": lr must be positive");
        require(batch_size >= 1, std::string(who) + ": batch_size must be >= 1");
    }
};

struct RunConfig {
    TaskSpec task = reference_task();
    WorldModelConfig wm;
    PolicyConfig policy;
    RlConfig rl;
    SansConfig sans;
    // One-time mixed-task pretraining; per-variant episode counts.
    TrainBudget pretrain{2000, 3e-3, 8};
    int pretrain_success_per_variant = 20;
    int pretrain_near_per_variant = 20;
    // Per-iteration world-model fine-tune from the pretrained checkpoint.
    TrainBudget wm_train{2000, 3e-3, 8};
    // Behavior cloning of the SFT policy. Deliberately a small budget: the
    // point of the pipeline is that RL recovers what a short SFT run leaves
    // on the table, so the default SFT is good-but-unsaturated.
    TrainBudget sft{400, 1e-3, 8};
    int deploy_episodes = 40;
    int eval_records = 20;    // alignment sample size
    int eval_episodes = 200;  // ground-truth success sample size
    std::string out_dir = "out";
    std::uint64_t master_seed = 2026;

    void validate() const {
        task.validate();
        wm.validate();
        policy.validate();
        rl.validate();
        sans.validate();
        pretrain.validate("pretrain");
        wm_train.validate("wm_train");
        sft.validate("sft");
        require(pretrain_success_per_variant >= 0 && pretrain_near_per_variant >= 0 &&
                    pretrain_success_per_variant + pretrain_near_per_variant >= 1,
                "RunConfig: pretrain needs at least one episode per variant");
        require(deploy_episodes >= 1, "RunConfig: deploy_episodes must be >= 1");
        require(eval_records >= 1, "RunConfig: eval_records must be >= 1");
        require(eval_episodes >= 1, "RunConfig: eval_episodes must be >= 1");
        require(!out_dir.empty(), "RunConfig: out_dir must not be empty");
        // The RL loop feeds policy observations from world-model rollouts, so
        // the two must agree on chunking and the policy cannot demand more
        // history than the model keeps.
        require(policy.chunk_len == wm.chunk_len,
                "RunConfig: policy.chunk_len must equal wm.chunk_len");
        require(policy.history_len <= wm.history_len,
                "RunConfig: policy.history_len must be <= wm.history_len");
        require(policy.frame_dim == wm.frame_dim,
                "RunConfig: policy.frame_dim must equal wm.frame_dim");
    }

    friend bool operator==(const RunConfig& a, const RunConfig& b) {
        return nlohmann::json(a.task) == nlohmann::json(b.task) &&
               nlohmann::json(a.wm) == nlohmann::json(b.wm) &&
               nlohmann::json(a.policy) == nlohmann::json(b.policy) &&
               nlohmann::json(a.rl) == nlohmann::json(b.rl) &&
               a.sans.n_success == b.sans.n_success && a.sans.n_near == b.sans.n_near &&
               a.sans.holdout_fraction == b.sans.holdout_fraction &&
               a.pretrain.steps == b.pretrain.steps && a.pretrain.lr == b.pretrain.lr &&
               a.pretrain.batch_size == b.pretrain.batch_size &&
               a.pretrain_success_per_variant == b.pretrain_success_per_variant &&
               a.pretrain_near_per_variant == b.pretrain_near_per_variant &&
               a.wm_train.steps == b.wm_train.steps && a.wm_train.lr == b.wm_train.lr &&
               a.wm_train.batch_size == b.wm_train.batch_size && a.sft.steps == b.sft.steps &&
               a.sft.lr == b.sft.lr && a.sft.batch_size == b.sft.batch_size &&
               a.deploy_episodes == b.deploy_episodes && a.eval_records == b.eval_records &&
               a.eval_episodes == b.eval_episodes && a.out_dir == b.out_dir &&
               a.master_seed == b.master_seed;
    }
};

namespace detail {

inline nlohmann::json budget_json(const TrainBudget& b) {
    return {{"steps", b.steps}, {"lr", b.lr}, {"batch_size", b.batch_size}};
}

inline TrainBudget budget_from_json(const nlohmann::json& j, const char* who) {
    TrainBudget b;
    j.at("steps").get_to(b.steps);
    j.at("lr").get_to(b.lr);
    j.at("batch_size").get_to(b.batch_size);
    b.validate(who);
    return b;
}

// Nested JSON per config group; prefixes are the flat-key namespaces.
inline std::vector<std::pair<std::string, nlohmann::json>> config_groups(const RunConfig& c) {
    return {
        {"task", nlohmann::json(c.task)},
        {"wm", nlohmann::json(c.wm)},
        {"policy", nlohmann::json(c.policy)},
        {"rl", nlohmann::json(c.rl)},
        {"sans",
         {{"n_success", c.sans.n_success},
          {"n_near", c.sans.n_near},
          {"holdout_fraction", c.sans.holdout_fraction}}},
        {"pretrain", budget_json(c.pretrain)},
        {"wm_train", budget_json(c.wm_train)},
        {"sft", budget_json(c.sft)},
    };
}

}  // namespace detail

// Serializes the full config as one flat-key object; every key appears, so
// the emitted file doubles as the documented default set.
inline nlohmann::json config_to_flat_json(const RunConfig& c) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [prefix, group] : detail::config_groups(c)) {
        for (auto it = group.begin(); it != group.end(); ++it) {
            out[prefix + "." + it.key()] = it.value();
        }
    }
    out["pretrain.success_per_variant"] = c.pretrain_success_per_variant;
    out["pretrain.near_per_variant"] = c.pretrain_near_per_variant;
    out["deploy.episodes"] = c.deploy_episodes;
    out["eval.records"] = c.eval_records;
    out["eval.episodes"] = c.eval_episodes;
    out["out_dir"] = c.out_dir;
    out["master_seed"] = c.master_seed;
    return out;
}

// Parses a flat-key object over defaults. Missing keys keep their defaults;
// unknown keys abort with the full offender list.
inline RunConfig config_from_flat_json(const nlohmann::json& j) {
    require(j.is_object(), "parse_config: top level must be a JSON object");

    RunConfig c;
    auto groups = detail::config_groups(c);
    // Extra flat keys that do not belong to a sub-config group.
    const nlohmann::json scalars = {
        {"pretrain.success_per_variant", nullptr}, {"pretrain.near_per_variant", nullptr},
        {"deploy.episodes", nullptr},              {"eval.records", nullptr},
        {"eval.episodes", nullptr},                {"out_dir", nullptr},
        {"master_seed", nullptr},
    };

    std::vector<std::string> unknown;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        if (scalars.contains(key)) continue;
        const auto dot = key.find('.');
        bool known = false;
        if (dot != std::string::npos) {
            const std::string prefix = key.substr(0, dot);
            const std::string field = key.substr(dot + 1);
            for (auto& [name, group] : groups) {
                if (name == prefix && group.contains(field)) {
                    group[field] = it.value();
                    known = true;
                    break;
                }
            }
        }
        if (!known) unknown.push_back(key);
    }
    if (!unknown.empty()) {
        std::string msg = "parse_config: unknown keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw ContractError(msg);
    }

    auto group_of = [&groups](const char* name) -> const nlohmann::json& {
        for (const auto& [n, g] : groups) {
            if (n == name) return g;
        }
        throw ContractError(std::string("parse_config: no group ") + name);
    };
    // from_json validates each sub-config; scope the message with the flat
    // prefix so the offending key is identifiable from the error alone.
    auto scoped = [](const char* prefix, auto&& fn) {
        try {
            fn();
        } catch (const nlohmann::json::exception& e) {
            throw ContractError(std::string("parse_config: bad value under '") + prefix +
                                ".': " + e.what());
        } catch (const ContractError& e) {
            throw ContractError(std::string("parse_config: invalid '") + prefix +
                                ".' group: " + e.what());
        }
    };
    scoped("task", [&] { c.task = group_of("task").get<TaskSpec>(); });
    scoped("wm", [&] { c.wm = group_of("wm").get<WorldModelConfig>(); });
    scoped("policy", [&] { c.policy = group_of("policy").get<PolicyConfig>(); });
    scoped("rl", [&] { c.rl = group_of("rl").get<RlConfig>(); });
    scoped("sans", [&] {
        const auto& g = group_of("sans");
        g.at("n_success").get_to(c.sans.n_success);
        g.at("n_near").get_to(c.sans.n_near);
        g.at("holdout_fraction").get_to(c.sans.holdout_fraction);
        c.sans.validate();
    });
    scoped("pretrain", [&] { c.pretrain = detail::budget_from_json(group_of("pretrain"), "pretrain"); });
    scoped("wm_train", [&] { c.wm_train = detail::budget_from_json(group_of("wm_train"), "wm_train"); });
    scoped("sft", [&] { c.sft = detail::budget_from_json(group_of("sft"), "sft"); });

    auto take = [&j](const char* key, auto& dst) {
        if (j.contains(key)) j.at(key).get_to(dst);
    };
    take("pretrain.success_per_variant", c.pretrain_success_per_variant);
    take("pretrain.near_per_variant", c.pretrain_near_per_variant);
    take("deploy.episodes", c.deploy_episodes);
    take("eval.records", c.eval_records);
    take("eval.episodes", c.eval_episodes);
    take("out_dir", c.out_dir);
    take("master_seed", c.master_seed);
    c.validate();
    return c;
}

// Output-directory default: LOOPWORLD_OUT when set, else "out". An explicit
// out_dir in the file or on the command line wins over both.
inline std::string default_out_dir() {
    const char* env = std::getenv("LOOPWORLD_OUT");
    return env != nullptr && *env != '\0' ? std::string(env) : std::string("out");
}

inline RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("parse_config: cannot open " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("parse_config: malformed JSON in " + path.string() + ": " + e.what());
    }
    if (!j.contains("out_dir")) j["out_dir"] = default_out_dir();
    return config_from_flat_json(j);
}

inline void write_config(const RunConfig& c, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_config: cannot open " + path.string());
    f << config_to_flat_json(c).dump(2) << "\n";
    if (!f.good()) throw IoError("write_config: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// structured logging: one JSON object per line on stderr

// Flip to silence progress logs (tests leave it on; output goes to stderr and
// stays out of captured stdout).
inline bool& log_enabled() {
    static bool enabled = true;
    return enabled;
}

inline void log_event(const std::string& phase, std::int64_t step, const std::string& metric,
                      double value) {
    if (!log_enabled()) return;
    nlohmann::json j{{"phase", phase}, {"step", step}, {"metric", metric}, {"value", value}};
    std::cerr << j.dump() << "\n";
}

inline void log_note(const std::string& phase, const std::string& note) {
    if (!log_enabled()) return;
    nlohmann::json j{{"phase", phase}, {"step", 0}, {"metric", "note"}, {"note", note}};
    std::cerr << j.dump() << "\n";
}

}  // namespace loopworld
