#pragma once

// Chunked stochastic policy: a trunk MLP reads h flattened frames and two
// linear heads emit per-chunk Gaussian means (sigmoid-squashed into [0,1])
// and gripper logits. Planar log-stds are learned per dimension but state
// independent. Sampling clamps planar targets into the arena; the density
// deliberately ignores the clamp (boundary mass is negligible at trained
// stds, and the RL surrogate ratio stays well-defined).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "loopworld/adam.hpp"
#include "loopworld/checkpoint.hpp"
#include "loopworld/common.hpp"
#include "loopworld/env.hpp"
#include "loopworld/mlp.hpp"
#include "loopworld/rng.hpp"
#include "loopworld/sans.hpp"
#include "loopworld/tape.hpp"
#include "loopworld/tensor.hpp"
#include "loopworld/windows.hpp"

namespace loopworld {

struct PolicyConfig {
    int history_len = 2;  // h
    int chunk_len = 8;    // T
    int frame_dim = kFramePixels;
    std::vector<std::size_t> trunk_hidden = {64};  // last entry is the feature width
    std::vector<std::size_t> mean_hidden = {};     // extra layers before the T*2 output
    std::vector<std::size_t> grip_hidden = {};     // extra layers before the T output
    double logstd_init = -1.5;
    double logstd_min = -5.0;
    double logstd_max = 1.0;

    int history_dim() const { return history_len * frame_dim; }
    int planar_dim() const { return chunk_len * 2; }
    std::size_t feature_dim() const { return trunk_hidden.back(); }

    void validate() const {
        require(history_len >= 1, "PolicyConfig: history_len must be >= 1");
        require(chunk_len >= 1, "PolicyConfig: chunk_len must be >= 1");
        require(frame_dim == kFramePixels, "PolicyConfig: frame_dim is fixed by the arena");
        require(!trunk_hidden.empty(), "PolicyConfig: trunk needs at least one layer");
        require(logstd_min < logstd_max, "PolicyConfig: logstd bounds out of order");
        require(logstd_init >= logstd_min && logstd_init <= logstd_max,
                "PolicyConfig: logstd_init outside the clamp interval");
    }
};

inline void to_json(nlohmann::json& j, const PolicyConfig& c) {
    j = nlohmann::json{{"history_len", c.history_len},
                       {"chunk_len", c.chunk_len},
                       {"frame_dim", c.frame_dim},
                       {"trunk_hidden", c.trunk_hidden},
                       {"mean_hidden", c.mean_hidden},
                       {"grip_hidden", c.grip_hidden},
                       {"logstd_init", c.logstd_init},
                       {"logstd_min", c.logstd_min},
                       {"logstd_max", c.logstd_max}};
}

inline void from_json(const nlohmann::json& j, PolicyConfig& c) {
    j.at("history_len").get_to(c.history_len);
    j.at("chunk_len").get_to(c.chunk_len);
    j.at("frame_dim").get_to(c.frame_dim);
    j.at("trunk_hidden").get_to(c.trunk_hidden);
    j.at("mean_hidden").get_to(c.mean_hidden);
    j.at("grip_hidden").get_to(c.grip_hidden);
    j.at("logstd_init").get_to(c.logstd_init);
    j.at("logstd_min").get_to(c.logstd_min);
    j.at("logstd_max").get_to(c.logstd_max);
    c.validate();
}

inline constexpr const char* kTrunkPrefix = "trunk.";
inline constexpr const char* kMeanPrefix = "mean.";
inline constexpr const char* kGripPrefix = "grip.";
inline constexpr const char* kLogstdName = "logstd";

struct Policy {
    PolicyConfig cfg;
    MlpSpec trunk_spec;
    MlpSpec mean_spec;
    MlpSpec grip_spec;
    ParamSet params;
};

namespace detail {

inline MlpSpec make_trunk_spec(const PolicyConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(static_cast<std::size_t>(c.history_dim()));
    widths.insert(widths.end(), c.trunk_hidden.begin(), c.trunk_hidden.end());
    return MlpSpec{std::move(widths), Activation::tanh, Activation::tanh};
}

inline MlpSpec make_mean_spec(const PolicyConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(c.feature_dim());
    widths.insert(widths.end(), c.mean_hidden.begin(), c.mean_hidden.end());
    widths.push_back(static_cast<std::size_t>(c.planar_dim()));
    return MlpSpec{std::move(widths), Activation::tanh, Activation::sigmoid};
}

inline MlpSpec make_grip_spec(const PolicyConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(c.feature_dim());
    widths.insert(widths.end(), c.grip_hidden.begin(), c.grip_hidden.end());
    widths.push_back(static_cast<std::size_t>(c.chunk_len));
    return MlpSpec{std::move(widths), Activation::tanh, Activation::identity};
}

}  // namespace detail

inline Policy init_policy(const PolicyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Policy p;
    p.cfg = cfg;
    p.trunk_spec = detail::make_trunk_spec(cfg);
    p.mean_spec = detail::make_mean_spec(cfg);
    p.grip_spec = detail::make_grip_spec(cfg);
    const SeedTree tree{seed};
    Rng rt(derive_seed(tree, "policy-init.trunk", 0));
    init_mlp_params(p.params, p.trunk_spec, kTrunkPrefix, rt);
    Rng rm(derive_seed(tree, "policy-init.mean", 0));
    init_mlp_params(p.params, p.mean_spec, kMeanPrefix, rm);
    Rng rg(derive_seed(tree, "policy-init.grip", 0));
    init_mlp_params(p.params, p.grip_spec, kGripPrefix, rg);
    p.params.add(kLogstdName,
                 TensorValue({static_cast<std::size_t>(cfg.planar_dim())},
                             std::vector<double>(static_cast<std::size_t>(cfg.planar_dim()),
                                                 cfg.logstd_init)));
    return p;
}

// ---------------------------------------------------------------------------
// forward

struct ActionChunkDistribution {
    std::vector<double> means;        // T*2, in (0,1)
    std::vector<double> stds;         // T*2, positive, = exp(logstds)
    std::vector<double> logstds;      // T*2, clamped into [logstd_min, logstd_max]
    std::vector<double> grip_probs;   // T, in (0,1), = sigmoid(grip_logits)
    std::vector<double> grip_logits;  // T

    // logstds/grip_logits are the density's source of truth; the log-prob
    // below mirrors the tape's nll ops term for term so that a value computed
    // here and one computed on a tape from the same parameters agree bitwise
    // (the RL importance ratio of a freshly collected chunk must be exactly 1).
    void fill_derived() {
        if (logstds.empty()) {
            logstds.resize(stds.size());
            for (std::size_t i = 0; i < stds.size(); ++i) logstds[i] = std::log(stds[i]);
        }
        if (grip_logits.empty()) {
            grip_logits.resize(grip_probs.size());
            for (std::size_t i = 0; i < grip_probs.size(); ++i) {
                grip_logits[i] = std::log(grip_probs[i]) - std::log(1.0 - grip_probs[i]);
            }
        }
    }

    void check_invariants(int chunk_len) const {
        require(means.size() == static_cast<std::size_t>(chunk_len * 2) &&
                    stds.size() == means.size() && logstds.size() == means.size() &&
                    grip_probs.size() == static_cast<std::size_t>(chunk_len) &&
                    grip_logits.size() == grip_probs.size(),
                "ActionChunkDistribution: length mismatch");
        for (double m : means) require(std::isfinite(m), "ActionChunkDistribution: bad mean");
        for (double s : stds) {
            require(std::isfinite(s) && s > 0.0, "ActionChunkDistribution: std must be > 0");
        }
        for (double p : grip_probs) {
            require(std::isfinite(p) && p > 0.0 && p < 1.0,
                    "ActionChunkDistribution: grip_prob must lie in (0,1)");
        }
    }
};

struct PolicyViews {
    MlpView trunk;
    MlpView mean;
    MlpView grip;
    const TensorValue* logstd = nullptr;

    static PolicyViews resolve(const Policy& p) {
        PolicyViews v{MlpView::resolve(p.trunk_spec, p.params, kTrunkPrefix),
                      MlpView::resolve(p.mean_spec, p.params, kMeanPrefix),
                      MlpView::resolve(p.grip_spec, p.params, kGripPrefix), nullptr};
        const TensorValue& ls = p.params.at(kLogstdName);
        if (ls.shape != std::vector<std::size_t>{static_cast<std::size_t>(p.cfg.planar_dim())}) {
            throw DimensionError("policy: bad logstd shape");
        }
        v.logstd = &ls;
        return v;
    }
};

inline ActionChunkDistribution policy_forward_with_views(const Policy& p,
                                                         const PolicyViews& views,
                                                         std::span<const double> history) {
    require(history.size() == static_cast<std::size_t>(p.cfg.history_dim()),
            "policy_forward: history must hold exactly h frames");
    ActionChunkDistribution dist;
    std::vector<double> feature, scratch;
    mlp_forward(views.trunk, history, feature, scratch);
    mlp_forward(views.mean, feature, dist.means, scratch);
    mlp_forward(views.grip, feature, dist.grip_logits, scratch);
    dist.grip_probs.resize(dist.grip_logits.size());
    for (std::size_t i = 0; i < dist.grip_logits.size(); ++i) {
        dist.grip_probs[i] = sigmoid(dist.grip_logits[i]);
    }
    dist.logstds.resize(views.logstd->data.size());
    dist.stds.resize(dist.logstds.size());
    for (std::size_t i = 0; i < dist.logstds.size(); ++i) {
        // same min/max composition as the tape clamp op
        dist.logstds[i] = std::min(p.cfg.logstd_max,
                                   std::max(p.cfg.logstd_min, views.logstd->data[i]));
        dist.stds[i] = std::exp(dist.logstds[i]);
    }
    dist.check_invariants(p.cfg.chunk_len);
    return dist;
}

inline ActionChunkDistribution policy_forward(const Policy& p, std::span<const double> history) {
    return policy_forward_with_views(p, PolicyViews::resolve(p), history);
}

// ---------------------------------------------------------------------------
// sampling and log-density

namespace detail {

// Shared closed form: Gaussian log density over the T*2 planar values plus
// Bernoulli log mass over the T grip bits, computed as the negated sum of the
// two tape nll ops with identical per-term arithmetic and accumulation order.
// Any drift between this and Tape::gaussian_nll/bernoulli_nll breaks the
// exact-ratio guarantee the RL update relies on.
inline double chunk_logprob(const ActionChunkDistribution& dist, std::span<const double> planar,
                            std::span<const double> grip_bits) {
    require(planar.size() == dist.means.size() && grip_bits.size() == dist.grip_probs.size(),
            "chunk_logprob: length mismatch");
    constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)
    double gnll = 0.0;
    for (std::size_t i = 0; i < planar.size(); ++i) {
        const double inv_sigma = std::exp(-dist.logstds[i]);
        const double z = (planar[i] - dist.means[i]) * inv_sigma;
        gnll += 0.5 * z * z + dist.logstds[i] + kHalfLog2Pi;
    }
    double bnll = 0.0;
    for (std::size_t t = 0; t < grip_bits.size(); ++t) {
        bnll += softplus(dist.grip_logits[t]) - grip_bits[t] * dist.grip_logits[t];
    }
    return -1.0 * (1.0 * gnll + 1.0 * bnll);
}

}  // namespace detail

struct SampledActions {
    std::vector<ActionPose> actions;  // T, planar targets clamped to [0,1]
    std::vector<double> planar;       // T*2 pre-clamp draws (the density's argument)
    std::vector<double> grips;        // T grip bits as doubles
    double logprob = 0.0;             // density of the pre-clamp draw
};

// Draw order per chunk slot: x normal, y normal, grip bernoulli.
inline SampledActions sample_actions(const ActionChunkDistribution& dist, std::uint64_t seed) {
    const int T = static_cast<int>(dist.grip_probs.size());
    dist.check_invariants(T);
    Rng rng(seed);
    SampledActions out;
    out.planar.resize(static_cast<std::size_t>(T) * 2);
    out.grips.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        for (int d = 0; d < 2; ++d) {
            const std::size_t i = static_cast<std::size_t>(t * 2 + d);
            out.planar[i] = dist.means[i] + dist.stds[i] * rng.normal();
        }
        out.grips[static_cast<std::size_t>(t)] =
            rng.bernoulli(dist.grip_probs[static_cast<std::size_t>(t)]) ? 1.0 : 0.0;
    }
    out.logprob = detail::chunk_logprob(dist, out.planar, out.grips);
    out.actions.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        out.actions.emplace_back(out.planar[static_cast<std::size_t>(t * 2)],
                                 out.planar[static_cast<std::size_t>(t * 2 + 1)],
                                 out.grips[static_cast<std::size_t>(t)] != 0.0 ? 1 : 0);
    }
    return out;
}

inline double logprob_of(const ActionChunkDistribution& dist,
                         std::span<const ActionPose> actions) {
    const int T = static_cast<int>(dist.grip_probs.size());
    dist.check_invariants(T);
    require(actions.size() == static_cast<std::size_t>(T),
            "logprob_of: need exactly chunk_len actions");
    std::vector<double> planar(static_cast<std::size_t>(T) * 2);
    std::vector<double> grips(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        planar[static_cast<std::size_t>(t * 2)] = actions[static_cast<std::size_t>(t)].x;
        planar[static_cast<std::size_t>(t * 2 + 1)] = actions[static_cast<std::size_t>(t)].y;
        grips[static_cast<std::size_t>(t)] = actions[static_cast<std::size_t>(t)].grip ? 1.0 : 0.0;
    }
    return detail::chunk_logprob(dist, planar, grips);
}

// ---------------------------------------------------------------------------
// tape forward (training paths share it)

struct PolicyTapeOut {
    Var means;        // T*2, sigmoid-squashed
    Var grip_logits;  // T
    Var logstd;       // T*2, clamped
};

inline PolicyTapeOut policy_tape_forward(Tape& t, const Policy& p, Var history) {
    Var feature = mlp_tape_forward(t, p.trunk_spec, p.params, kTrunkPrefix, history);
    PolicyTapeOut out;
    out.means = mlp_tape_forward(t, p.mean_spec, p.params, kMeanPrefix, feature);
    out.grip_logits = mlp_tape_forward(t, p.grip_spec, p.params, kGripPrefix, feature);
    out.logstd = t.clamp(t.param_named(p.params, kLogstdName), p.cfg.logstd_min,
                         p.cfg.logstd_max);
    return out;
}

// Differentiable chunk log-density; bitwise-equal to detail::chunk_logprob
// evaluated on the raw forward of the same parameters. Both spans must
// outlive the tape.
inline Var chunk_logprob_tape(Tape& t, const PolicyTapeOut& out, std::span<const double> planar,
                              std::span<const double> grip_bits) {
    return t.scale(t.add(t.gaussian_nll(out.means, out.logstd, planar),
                         t.bernoulli_nll(out.grip_logits, grip_bits)),
                   -1.0);
}

// ---------------------------------------------------------------------------
// behavior cloning

// Per-window planar targets and grip bits, kept alive across the tape.
struct BcWindow {
    const TrainWindow* window = nullptr;
    std::vector<double> planar;  // T*2
    std::vector<double> grips;   // T bits as doubles
};

inline BcWindow make_bc_window(const TrainWindow& w) {
    BcWindow b;
    b.window = &w;
    const std::size_t T = w.action_poses.size();
    b.planar.resize(T * 2);
    b.grips.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        b.planar[t * 2] = w.action_poses[t].x;
        b.planar[t * 2 + 1] = w.action_poses[t].y;
        b.grips[t] = static_cast<double>(w.action_poses[t].grip);
    }
    return b;
}

// Mean over the batch of the chunk NLL (Gaussian planar + Bernoulli grip).
inline Var bc_batch_loss(Tape& t, const Policy& p, std::span<const BcWindow* const> batch) {
    require(!batch.empty(), "bc_batch_loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<std::pair<Var, double>> terms;
    for (const BcWindow* b : batch) {
        Var hist = t.constant(b->window->history);
        const PolicyTapeOut out = policy_tape_forward(t, p, hist);
        terms.emplace_back(t.gaussian_nll(out.means, out.logstd, b->planar), inv_b);
        terms.emplace_back(t.bernoulli_nll(out.grip_logits, b->grips), inv_b);
    }
    return t.weighted_sum(terms);
}

// Behavior cloning over success records. Mutates the policy in place and
// returns the per-step loss curve (empty for steps == 0).
inline std::vector<double> bc_train(Policy& policy, const std::vector<TrajectoryRecord>& records,
                                    int steps, double lr, std::uint64_t seed,
                                    int batch_size = 8) {
    require(!records.empty(), "bc_train: need at least one success record");
    require(steps >= 0, "bc_train: negative step count");
    require(batch_size >= 1, "bc_train: batch_size must be >= 1");
    for (const auto& r : records) {
        require(r.outcome == Outcome::success, "bc_train: dataset must be success-only");
    }

    std::vector<TrainWindow> windows;
    for (const auto& r : records) {
        auto w = extract_windows(r, policy.cfg.history_len, policy.cfg.chunk_len);
        for (auto& x : w) windows.push_back(std::move(x));
    }
    std::vector<BcWindow> bc;
    bc.reserve(windows.size());
    for (const auto& w : windows) bc.push_back(make_bc_window(w));

    AdamState opt = AdamState::init(policy.params);
    AdamConfig adam;
    adam.lr = lr;
    Rng rng(derive_seed(SeedTree{seed}, "bc", 0));

    std::vector<double> curve;
    curve.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        std::vector<const BcWindow*> batch;
        batch.reserve(static_cast<std::size_t>(batch_size));
        for (int b = 0; b < batch_size; ++b) {
            batch.push_back(&bc[rng.next_u64() % bc.size()]);
        }
        double loss = 0.0;
        ParamSet grads =
            grad([&](Tape& t) { return bc_batch_loss(t, policy, batch); }, policy.params, &loss);
        adam_step_inplace(policy.params, grads, opt, adam);
        curve.push_back(loss);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// persistence: params.ckpt + policy.json in one directory

inline void save_policy(const Policy& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(p.params, dir / "params.ckpt");
    std::ofstream f(dir / "policy.json", std::ios::trunc);
    if (!f) throw IoError("save_policy: cannot open " + (dir / "policy.json").string());
    f << nlohmann::json(p.cfg).dump(2) << "\n";
}

inline Policy load_policy(const std::filesystem::path& dir) {
    std::ifstream f(dir / "policy.json");
    if (!f) throw IoError("load_policy: cannot open " + (dir / "policy.json").string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("policy.json unparsable: ") + e.what());
    }
    Policy p;
    try {
        p.cfg = j.get<PolicyConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("policy.json malformed: ") + e.what());
    }
    p.trunk_spec = detail::make_trunk_spec(p.cfg);
    p.mean_spec = detail::make_mean_spec(p.cfg);
    p.grip_spec = detail::make_grip_spec(p.cfg);
    p.params = load_checkpoint(dir / "params.ckpt");
    try {
        PolicyViews::resolve(p);
    } catch (const ContractError& e) {
        throw PersistenceError(PersistenceError::Kind::invariant_violation,
                               std::string("checkpoint does not match policy.json: ") + e.what());
    }
    return p;
}

}  // namespace loopworld
