#pragma once

// Group-relative policy optimization inside the learned world model. Each
// step collects several groups of seeded rollouts (every group shares one
// start state and one world-model noise stream, so members differ only
// through their action draws), normalizes the binary returns within each
// group, and takes a single clipped-surrogate Adam step with the chunk as
// the action unit.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "loopworld/adam.hpp"
#include "loopworld/common.hpp"
#include "loopworld/policy.hpp"
#include "loopworld/rng.hpp"
#include "loopworld/tape.hpp"
#include "loopworld/worldmodel.hpp"

namespace loopworld {

struct RlConfig {
    int group_size = 8;        // G rollouts per group
    int groups_per_step = 4;   // groups collected per update
    double clip_epsilon = 0.2; // surrogate ratio clip half-width
    double lr = 1e-3;
    int total_steps = 50;
    double std_floor = 1e-6;   // advantage-normalization epsilon

    void validate() const {
        require(group_size >= 2, "RlConfig: group_size must be >= 2");
        require(groups_per_step >= 1, "RlConfig: groups_per_step must be >= 1");
        require(clip_epsilon > 0.0 && clip_epsilon < 1.0,
                "RlConfig: clip_epsilon must lie in (0,1)");
        require(lr > 0.0, "RlConfig: lr must be > 0");
        require(total_steps >= 0, "RlConfig: total_steps must be >= 0");
        require(std_floor >= 0.0, "RlConfig: std_floor must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const RlConfig& c) {
    j = nlohmann::json{{"group_size", c.group_size},
                       {"groups_per_step", c.groups_per_step},
                       {"clip_epsilon", c.clip_epsilon},
                       {"lr", c.lr},
                       {"total_steps", c.total_steps},
                       {"std_floor", c.std_floor}};
}

inline void from_json(const nlohmann::json& j, RlConfig& c) {
    c = RlConfig{};
    if (j.contains("group_size")) j.at("group_size").get_to(c.group_size);
    if (j.contains("groups_per_step")) j.at("groups_per_step").get_to(c.groups_per_step);
    if (j.contains("clip_epsilon")) j.at("clip_epsilon").get_to(c.clip_epsilon);
    if (j.contains("lr")) j.at("lr").get_to(c.lr);
    if (j.contains("total_steps")) j.at("total_steps").get_to(c.total_steps);
    if (j.contains("std_floor")) j.at("std_floor").get_to(c.std_floor);
}

// ---------------------------------------------------------------------------
// rollout groups

struct GroupMember {
    std::vector<std::vector<double>> histories;   // per chunk: policy input
    std::vector<std::vector<double>> planar;      // per chunk: T*2 pre-clamp draws
    std::vector<std::vector<double>> grips;       // per chunk: T grip bits
    std::vector<std::vector<ActionPose>> chunks;  // per chunk: what the wm consumed
    std::vector<double> old_logprobs;             // per chunk, behavior snapshot
    RolloutResult result;
    int ret = 0;  // binary return
    double advantage = 0.0;
};

struct RolloutGroup {
    std::vector<double> start_history;
    std::vector<GroupMember> members;
};

// A_i = (R_i - mean) / (std_pop + eps); a group with all-equal returns is
// degenerate and gets exact zeros.
inline std::vector<double> compute_advantages(const std::vector<int>& returns, double eps_std) {
    require(returns.size() >= 2, "compute_advantages: need at least 2 returns");
    const std::size_t g = returns.size();
    bool all_equal = true;
    for (std::size_t i = 1; i < g; ++i) {
        if (returns[i] != returns[0]) all_equal = false;
    }
    if (all_equal) return std::vector<double>(g, 0.0);
    double mean = 0.0;
    for (int r : returns) mean += r;
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (int r : returns) {
        const double d = static_cast<double>(r) - mean;
        var += d * d;
    }
    var /= static_cast<double>(g);
    const double denom = std::sqrt(var) + eps_std;
    std::vector<double> out(g);
    for (std::size_t i = 0; i < g; ++i) {
        out[i] = (static_cast<double>(returns[i]) - mean) / denom;
    }
    return out;
}

inline void normalize_group_advantages(RolloutGroup& group, double eps_std) {
    std::vector<int> returns;
    returns.reserve(group.members.size());
    for (const auto& m : group.members) returns.push_back(m.ret);
    const std::vector<double> adv = compute_advantages(returns, eps_std);
    for (std::size_t i = 0; i < adv.size(); ++i) group.members[i].advantage = adv[i];
}

// G seeded rollouts from one start. The world-model noise seed is shared
// across members (common random numbers), so two members drawing identical
// actions see identical trajectories; all member-to-member variation comes
// from the policy's sampling seeds.
inline RolloutGroup collect_group(const Policy& policy, const WorldModel& wm,
                                  std::span<const double> start_history, int group_size,
                                  std::uint64_t seed) {
    require(group_size >= 2, "collect_group: group_size must be >= 2");
    require(policy.cfg.frame_dim == wm.cfg.frame_dim &&
                policy.cfg.chunk_len == wm.cfg.chunk_len,
            "collect_group: policy/world-model shape mismatch");
    require(policy.cfg.history_len <= wm.cfg.history_len,
            "collect_group: policy needs more history than the world model keeps");

    const PolicyViews views = PolicyViews::resolve(policy);
    const SeedTree tree{seed};
    const std::uint64_t wm_seed = derive_seed(tree, "wm", 0);
    const std::size_t policy_hist = static_cast<std::size_t>(policy.cfg.history_dim());

    RolloutGroup group;
    group.start_history.assign(start_history.begin(), start_history.end());
    group.members.resize(static_cast<std::size_t>(group_size));
    for (int i = 0; i < group_size; ++i) {
        GroupMember& m = group.members[static_cast<std::size_t>(i)];
        const SeedTree mtree{derive_seed(tree, "member", i)};
        int chunk_idx = 0;
        ActionSource source = [&](const std::vector<double>& observed) {
            require(observed.size() >= policy_hist, "collect_group: observed too short");
            const std::span<const double> hist(observed.data() + observed.size() - policy_hist,
                                               policy_hist);
            m.histories.emplace_back(hist.begin(), hist.end());
            const ActionChunkDistribution dist =
                policy_forward_with_views(policy, views, hist);
            SampledActions s = sample_actions(dist, derive_seed(mtree, "act", chunk_idx));
            ++chunk_idx;
            m.planar.push_back(std::move(s.planar));
            m.grips.push_back(std::move(s.grips));
            m.old_logprobs.push_back(s.logprob);
            m.chunks.push_back(s.actions);
            return s.actions;
        };
        m.result = rollout(wm, start_history, source, wm.cfg.max_chunks, wm_seed);
        m.ret = m.result.success ? 1 : 0;
    }
    return group;
}

// ---------------------------------------------------------------------------
// clipped-surrogate update

struct GrpoDiagnostics {
    double loss = 0.0;
    double mean_ratio = 0.0;    // over included chunks
    double clip_fraction = 0.0; // ratio outside [1-eps, 1+eps]
    int chunk_count = 0;        // included (member, chunk) pairs
    int skipped_members = 0;    // dropped for non-finite ratios
    bool zero_grad_skip = false;
};

// One Adam step on loss = -mean over (member, chunk) of
// min(rho*A, clip(rho, 1-eps, 1+eps)*A), rho = exp(lp_new - lp_old).
// A step whose surrogate gradient is exactly zero everywhere (every advantage
// zero, e.g. all groups degenerate) is skipped outright so stale Adam
// momentum cannot move a policy that received no learning signal.
inline GrpoDiagnostics grpo_update(Policy& policy, const std::vector<RolloutGroup>& groups,
                                   const RlConfig& cfg, AdamState& opt) {
    cfg.validate();
    require(!groups.empty(), "grpo_update: need at least one group");

    Tape tape;
    std::vector<std::pair<Var, double>> terms;
    double ratio_sum = 0.0;
    int clipped = 0;
    GrpoDiagnostics diag;
    const PolicyViews views = PolicyViews::resolve(policy);

    for (const auto& group : groups) {
        for (const auto& m : group.members) {
            const std::size_t n_chunks = m.old_logprobs.size();
            require(m.histories.size() == n_chunks && m.planar.size() == n_chunks &&
                        m.grips.size() == n_chunks,
                    "grpo_update: member bookkeeping out of sync");
            // screen the member with a raw forward before touching the tape:
            // an orphaned inf node would turn 0-weight upstream gradients
            // into NaN during backward, and the raw log-prob equals the tape
            // value bitwise anyway
            bool finite = true;
            std::vector<double> ratios;
            for (std::size_t c = 0; c < n_chunks && finite; ++c) {
                const ActionChunkDistribution d =
                    policy_forward_with_views(policy, views, m.histories[c]);
                const double lp_new = detail::chunk_logprob(d, m.planar[c], m.grips[c]);
                const double rho_v = std::exp(lp_new - m.old_logprobs[c]);
                if (!std::isfinite(rho_v)) {
                    finite = false;
                } else {
                    ratios.push_back(rho_v);
                }
            }
            if (!finite) {
                ++diag.skipped_members;
                continue;
            }
            for (std::size_t c = 0; c < n_chunks; ++c) {
                const Var hist = tape.constant(m.histories[c]);
                const PolicyTapeOut out = policy_tape_forward(tape, policy, hist);
                const Var lp_new = chunk_logprob_tape(tape, out, m.planar[c], m.grips[c]);
                const Var rho = tape.exp_minus_const(lp_new, m.old_logprobs[c]);
                const Var unclipped = tape.scale(rho, m.advantage);
                const Var clipped_term = tape.scale(
                    tape.clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon),
                    m.advantage);
                terms.emplace_back(tape.min_first(unclipped, clipped_term), 0.0);
                ratio_sum += ratios[c];
                if (ratios[c] < 1.0 - cfg.clip_epsilon || ratios[c] > 1.0 + cfg.clip_epsilon) {
                    ++clipped;
                }
            }
        }
    }

    diag.chunk_count = static_cast<int>(terms.size());
    if (terms.empty()) return diag;

    const double w = -1.0 / static_cast<double>(terms.size());
    for (auto& [v, c] : terms) c = w;
    const Var loss = tape.weighted_sum(terms);
    diag.loss = tape.val(loss)[0];
    diag.mean_ratio = ratio_sum / static_cast<double>(terms.size());
    diag.clip_fraction = static_cast<double>(clipped) / static_cast<double>(terms.size());

    tape.backward(loss);
    const ParamSet grads = tape.extract_grads(policy.params);
    bool any_nonzero = false;
    for (std::size_t i = 0; i < grads.size() && !any_nonzero; ++i) {
        for (double g : grads.item(i).second.data) {
            if (g != 0.0) {
                any_nonzero = true;
                break;
            }
        }
    }
    if (!any_nonzero) {
        diag.zero_grad_skip = true;
        return diag;
    }
    if (opt.m.size() == 0) opt = AdamState::init(policy.params);
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    adam_step_inplace(policy.params, grads, opt, acfg);
    return diag;
}

// ---------------------------------------------------------------------------
// training loop

struct RlStepStats {
    int step = 0;
    double wm_success_rate = 0.0;
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
    double loss = 0.0;
    bool updated = false;  // false when the zero-gradient skip fired
};

// collect -> normalize -> update, total_steps times; starts are consumed
// round-robin. The curve reports the success rate observed at collection
// time of each step (i.e. under the pre-update policy).
inline std::vector<RlStepStats> rl_train(Policy& policy, const WorldModel& wm,
                                         const std::vector<std::vector<double>>& starts,
                                         const RlConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    require(!starts.empty(), "rl_train: need at least one start state");
    for (const auto& s : starts) {
        require(s.size() == static_cast<std::size_t>(wm.cfg.history_dim()),
                "rl_train: start state has the wrong history length");
    }

    const SeedTree tree{seed};
    AdamState opt;
    std::vector<RlStepStats> curve;
    curve.reserve(static_cast<std::size_t>(cfg.total_steps));
    std::size_t start_idx = 0;
    for (int step = 0; step < cfg.total_steps; ++step) {
        std::vector<RolloutGroup> groups;
        groups.reserve(static_cast<std::size_t>(cfg.groups_per_step));
        int successes = 0, members = 0;
        for (int g = 0; g < cfg.groups_per_step; ++g) {
            const auto& start = starts[start_idx % starts.size()];
            ++start_idx;
            RolloutGroup group =
                collect_group(policy, wm, start, cfg.group_size,
                              derive_seed(tree, "collect", step * cfg.groups_per_step + g));
            normalize_group_advantages(group, cfg.std_floor);
            for (const auto& m : group.members) {
                successes += m.ret;
                ++members;
            }
            groups.push_back(std::move(group));
        }
        const GrpoDiagnostics diag = grpo_update(policy, groups, cfg, opt);
        RlStepStats row;
        row.step = step;
        row.wm_success_rate = static_cast<double>(successes) / static_cast<double>(members);
        row.mean_ratio = diag.mean_ratio;
        row.clip_fraction = diag.clip_fraction;
        row.loss = diag.loss;
        row.updated = !diag.zero_grad_skip && diag.chunk_count > 0;
        curve.push_back(row);
    }
    return curve;
}

inline void write_rl_curve(const std::filesystem::path& path,
                           const std::vector<RlStepStats>& curve) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_rl_curve: cannot open " + path.string());
    f << "step,wm_success_rate,mean_ratio,clip_fraction,loss\n";
    f << std::setprecision(17);
    for (const auto& r : curve) {
        f << r.step << ',' << r.wm_success_rate << ',' << r.mean_ratio << ','
          << r.clip_fraction << ',' << r.loss << '\n';
    }
    if (!f.good()) throw IoError("write_rl_curve: write failed for " + path.string());
}

}  // namespace loopworld
