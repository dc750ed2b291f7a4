#pragma once

// Action-conditioned flow-matching frame predictor with a jointly trained
// reward head. Works directly in pixel space: a "chunk" is T flattened
// 16x16x3 frames. Training regresses the rectified-flow velocity target
// x1 - x0 and, weighted by lambda0 * tau^2, the per-frame reward read off
// the one-step denoised estimate. Sampling integrates the learned velocity
// field with K Euler steps from seeded Gaussian noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
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

struct WorldModelConfig {
    int history_len = 2;  // h
    int chunk_len = 8;    // T
    int frame_dim = kFramePixels;
    int action_dim = 3;
    std::vector<std::size_t> denoiser_hidden = {128, 128};
    std::vector<std::size_t> embedder_hidden = {16};
    int action_embed_dim = 8;
    std::vector<std::size_t> reward_hidden = {32};
    int euler_steps = 10;  // K
    // Degree of the tau-polynomial diagonal skip from the noisy chunk to the
    // velocity output. A plain MLP bottleneck cannot reproduce the full-rank
    // noise component of the velocity target; the skip path can, elementwise.
    int skip_degree = 4;
    double lambda0 = 0.1;
    double reward_threshold = 0.9;
    bool enable_reward_head = true;
    int max_chunks = 5;

    int cond_dim() const { return chunk_len * action_embed_dim; }
    int chunk_dim() const { return chunk_len * frame_dim; }
    int history_dim() const { return history_len * frame_dim; }
    int denoiser_input_dim() const { return chunk_dim() + cond_dim() + history_dim(); }

    void validate() const {
        require(history_len >= 1, "WorldModelConfig: history_len must be >= 1");
        require(chunk_len >= 1, "WorldModelConfig: chunk_len must be >= 1");
        require(euler_steps >= 1, "WorldModelConfig: euler_steps must be >= 1");
        require(lambda0 >= 0.0, "WorldModelConfig: lambda0 must be >= 0");
        require(reward_threshold > 0.0 && reward_threshold < 1.0,
                "WorldModelConfig: reward_threshold must lie in (0,1)");
        require(max_chunks >= 1, "WorldModelConfig: max_chunks must be >= 1");
        require(frame_dim == kFramePixels, "WorldModelConfig: frame_dim is fixed by the arena");
        require(action_dim == 3, "WorldModelConfig: action_dim is fixed by ActionPose");
        require(action_embed_dim >= 1, "WorldModelConfig: action_embed_dim must be >= 1");
        require(skip_degree >= 0, "WorldModelConfig: skip_degree must be >= 0");
        require(cond_dim() % 2 == 0,
                "WorldModelConfig: conditioning width must be even for the sinusoidal embedding");
    }
};

inline void to_json(nlohmann::json& j, const WorldModelConfig& c) {
    j = nlohmann::json{{"history_len", c.history_len},
                       {"chunk_len", c.chunk_len},
                       {"frame_dim", c.frame_dim},
                       {"action_dim", c.action_dim},
                       {"denoiser_hidden", c.denoiser_hidden},
                       {"embedder_hidden", c.embedder_hidden},
                       {"action_embed_dim", c.action_embed_dim},
                       {"reward_hidden", c.reward_hidden},
                       {"euler_steps", c.euler_steps},
                       {"skip_degree", c.skip_degree},
                       {"lambda0", c.lambda0},
                       {"reward_threshold", c.reward_threshold},
                       {"enable_reward_head", c.enable_reward_head},
                       {"max_chunks", c.max_chunks}};
}

inline void from_json(const nlohmann::json& j, WorldModelConfig& c) {
    j.at("history_len").get_to(c.history_len);
    j.at("chunk_len").get_to(c.chunk_len);
    j.at("frame_dim").get_to(c.frame_dim);
    j.at("action_dim").get_to(c.action_dim);
    j.at("denoiser_hidden").get_to(c.denoiser_hidden);
    j.at("embedder_hidden").get_to(c.embedder_hidden);
    j.at("action_embed_dim").get_to(c.action_embed_dim);
    j.at("reward_hidden").get_to(c.reward_hidden);
    j.at("euler_steps").get_to(c.euler_steps);
    j.at("skip_degree").get_to(c.skip_degree);
    j.at("lambda0").get_to(c.lambda0);
    j.at("reward_threshold").get_to(c.reward_threshold);
    j.at("enable_reward_head").get_to(c.enable_reward_head);
    j.at("max_chunks").get_to(c.max_chunks);
    c.validate();
}

// Parameter prefixes inside the shared ParamSet.
inline constexpr const char* kDenoiserPrefix = "denoiser.";
inline constexpr const char* kEmbedderPrefix = "embed.";
inline constexpr const char* kRewardPrefix = "reward.";

inline std::string skip_param_name(int degree) {
    return "denoiser.skip" + std::to_string(degree);
}

struct WorldModel {
    WorldModelConfig cfg;
    MlpSpec denoiser_spec;
    MlpSpec embedder_spec;
    MlpSpec reward_spec;
    ParamSet params;
};

namespace detail {

inline MlpSpec make_denoiser_spec(const WorldModelConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(static_cast<std::size_t>(c.denoiser_input_dim()));
    widths.insert(widths.end(), c.denoiser_hidden.begin(), c.denoiser_hidden.end());
    widths.push_back(static_cast<std::size_t>(c.chunk_dim()));
    return MlpSpec{std::move(widths), Activation::tanh, Activation::identity};
}

inline MlpSpec make_embedder_spec(const WorldModelConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(static_cast<std::size_t>(c.action_dim));
    widths.insert(widths.end(), c.embedder_hidden.begin(), c.embedder_hidden.end());
    widths.push_back(static_cast<std::size_t>(c.action_embed_dim));
    return MlpSpec{std::move(widths), Activation::tanh, Activation::identity};
}

inline MlpSpec make_reward_spec(const WorldModelConfig& c) {
    std::vector<std::size_t> widths;
    widths.push_back(static_cast<std::size_t>(c.frame_dim));
    widths.insert(widths.end(), c.reward_hidden.begin(), c.reward_hidden.end());
    widths.push_back(1);
    return MlpSpec{std::move(widths), Activation::tanh, Activation::identity};
}

}  // namespace detail

inline WorldModel init_world_model(const WorldModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    WorldModel wm;
    wm.cfg = cfg;
    wm.denoiser_spec = detail::make_denoiser_spec(cfg);
    wm.embedder_spec = detail::make_embedder_spec(cfg);
    wm.reward_spec = detail::make_reward_spec(cfg);
    const SeedTree tree{seed};
    // insertion order fixes checkpoint layout: denoiser, skips, embedder, reward
    Rng rd(derive_seed(tree, "wm-init.denoiser", 0));
    init_mlp_params(wm.params, wm.denoiser_spec, kDenoiserPrefix, rd);
    for (int d = 0; d < cfg.skip_degree; ++d) {
        wm.params.add(skip_param_name(d),
                      TensorValue::zeros({static_cast<std::size_t>(cfg.chunk_dim())}));
    }
    Rng re(derive_seed(tree, "wm-init.embedder", 0));
    init_mlp_params(wm.params, wm.embedder_spec, kEmbedderPrefix, re);
    Rng rr(derive_seed(tree, "wm-init.reward", 0));
    init_mlp_params(wm.params, wm.reward_spec, kRewardPrefix, rr);
    return wm;
}

// ---------------------------------------------------------------------------
// conditioning

// Transformer-style sinusoidal embedding of the flow time, scaled so tau's
// [0,1] range spans 100 positions.
inline std::vector<double> flow_time_embedding(double tau, int dim) {
    std::vector<double> out(static_cast<std::size_t>(dim));
    const double pos = tau * 100.0;
    for (int i = 0; 2 * i < dim; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / dim);
        out[static_cast<std::size_t>(2 * i)] = std::sin(pos * freq);
        if (2 * i + 1 < dim) out[static_cast<std::size_t>(2 * i + 1)] = std::cos(pos * freq);
    }
    return out;
}

// Concatenated per-action embeddings; the caller adds the flow-time
// embedding on top before feeding the denoiser.
inline std::vector<double> embed_actions(const WorldModel& wm,
                                         std::span<const ActionPose> actions) {
    if (actions.size() != static_cast<std::size_t>(wm.cfg.chunk_len)) {
        throw ContractError("embed_actions: expected " + std::to_string(wm.cfg.chunk_len) +
                            " actions, got " + std::to_string(actions.size()));
    }
    const MlpView view = MlpView::resolve(wm.embedder_spec, wm.params, kEmbedderPrefix);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(wm.cfg.cond_dim()));
    std::vector<double> one, scratch;
    for (const ActionPose& a : actions) {
        mlp_forward(view, encode_action(a), one, scratch);
        out.insert(out.end(), one.begin(), one.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// training

// Flow noise for one sample; kept explicit so tests can craft batches with
// chosen tau values.
struct FlowDraw {
    double tau = 0.0;
    std::vector<double> noise;  // chunk_dim standard normals
};

inline FlowDraw draw_flow_noise(const WorldModelConfig& cfg, Rng& rng) {
    FlowDraw d;
    d.tau = rng.uniform01();
    d.noise.resize(static_cast<std::size_t>(cfg.chunk_dim()));
    for (double& x : d.noise) x = rng.normal();
    return d;
}

struct WmStepStats {
    double l_flow = 0.0;    // mean over the batch of mean squared velocity error
    double l_reward = 0.0;  // mean over the batch of sum_t (r_hat - r)^2, unweighted
};

// Workspace keeping interpolants, velocity targets, and time embeddings
// alive while the tape holds spans into them.
struct WmBatchWorkspace {
    std::vector<std::vector<double>> z;           // interpolant z_tau per sample
    std::vector<std::vector<double>> u;           // velocity target x1 - x0 per sample
    std::vector<std::vector<double>> time_embed;  // flow-time embedding per sample
    // tau^d * z per sample per skip degree, ready for the diagonal skip path
    std::vector<std::vector<std::vector<double>>> skip_in;
};

inline WmBatchWorkspace wm_prepare_batch(const WorldModelConfig& cfg,
                                         std::span<const TrainWindow* const> batch,
                                         std::span<const FlowDraw> draws) {
    require(!batch.empty(), "wm train batch: empty batch");
    require(batch.size() == draws.size(), "wm train batch: one draw per sample required");
    WmBatchWorkspace ws;
    ws.z.resize(batch.size());
    ws.u.resize(batch.size());
    ws.time_embed.resize(batch.size());
    ws.skip_in.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TrainWindow& w = *batch[i];
        const FlowDraw& d = draws[i];
        require(w.target.size() == static_cast<std::size_t>(cfg.chunk_dim()) &&
                    w.target.size() == d.noise.size(),
                "wm train batch: draw or window dimension mismatch");
        require(d.tau >= 0.0 && d.tau <= 1.0, "wm train batch: tau out of [0,1]");
        ws.z[i].resize(w.target.size());
        ws.u[i].resize(w.target.size());
        for (std::size_t k = 0; k < w.target.size(); ++k) {
            ws.z[i][k] = (1.0 - d.tau) * d.noise[k] + d.tau * w.target[k];
            ws.u[i][k] = w.target[k] - d.noise[k];
        }
        ws.time_embed[i] = flow_time_embedding(d.tau, cfg.cond_dim());
        ws.skip_in[i].resize(static_cast<std::size_t>(cfg.skip_degree));
        double tau_pow = 1.0;
        for (int deg = 0; deg < cfg.skip_degree; ++deg) {
            auto& s = ws.skip_in[i][static_cast<std::size_t>(deg)];
            s.resize(ws.z[i].size());
            for (std::size_t k = 0; k < s.size(); ++k) s[k] = tau_pow * ws.z[i][k];
            tau_pow *= d.tau;
        }
    }
    return ws;
}

// Builds the joint loss (mean flow matching error plus lambda0*tau^2 times
// the reward squared error) on the tape. With the reward head disabled the
// reward subgraph is never built, so its parameters receive exactly zero
// gradient and stay bit-identical through any number of updates.
inline Var wm_batch_loss(Tape& t, const WorldModel& wm,
                         std::span<const TrainWindow* const> batch,
                         std::span<const FlowDraw> draws, const WmBatchWorkspace& ws,
                         WmStepStats* stats) {
    const auto& cfg = wm.cfg;
    const int T = cfg.chunk_len;
    const int fd = cfg.frame_dim;
    const int ad = cfg.action_dim;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<std::pair<Var, double>> terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TrainWindow& w = *batch[i];
        const double tau = draws[i].tau;

        std::vector<Var> embeds;
        for (int a = 0; a < T; ++a) {
            Var ain = t.constant(
                std::span<const double>(w.actions)
                    .subspan(static_cast<std::size_t>(a * ad), static_cast<std::size_t>(ad)));
            embeds.push_back(
                mlp_tape_forward(t, wm.embedder_spec, wm.params, kEmbedderPrefix, ain));
        }
        Var cond = t.add(t.concat(embeds), t.constant(ws.time_embed[i]));
        Var z = t.constant(ws.z[i]);
        Var den_in = t.concat({z, cond, t.constant(w.history)});
        Var v = mlp_tape_forward(t, wm.denoiser_spec, wm.params, kDenoiserPrefix, den_in);
        for (int deg = 0; deg < cfg.skip_degree; ++deg) {
            Var s = t.param_named(wm.params, skip_param_name(deg));
            v = t.add(v, t.mul_const(s, ws.skip_in[i][static_cast<std::size_t>(deg)]));
        }

        Var l_flow = t.sum_sq_diff(v, ws.u[i], 1.0 / static_cast<double>(T * fd));
        if (stats) stats->l_flow += inv_b * t.val(l_flow)[0];
        terms.emplace_back(l_flow, inv_b);

        if (cfg.enable_reward_head) {
            Var x_hat = t.add_scaled(z, 1.0, v, 1.0 - tau);
            std::vector<std::pair<Var, double>> sq_terms;
            for (int ft = 0; ft < T; ++ft) {
                Var frame = t.slice(x_hat, static_cast<std::size_t>(ft * fd),
                                    static_cast<std::size_t>(fd));
                Var logit =
                    mlp_tape_forward(t, wm.reward_spec, wm.params, kRewardPrefix, frame);
                sq_terms.emplace_back(
                    t.sigmoid_sq_err(logit, w.rewards[static_cast<std::size_t>(ft)]), 1.0);
            }
            Var l_reward = t.weighted_sum(sq_terms);
            if (stats) stats->l_reward += inv_b * t.val(l_reward)[0];
            terms.emplace_back(l_reward, cfg.lambda0 * tau * tau * inv_b);
        }
    }
    return t.weighted_sum(terms);
}

// One joint update on a batch with explicit flow draws.
inline WmStepStats wm_apply_train_batch(WorldModel& wm, AdamState& opt,
                                        std::span<const TrainWindow* const> batch,
                                        std::span<const FlowDraw> draws,
                                        const AdamConfig& adam_cfg) {
    const WmBatchWorkspace ws = wm_prepare_batch(wm.cfg, batch, draws);
    WmStepStats stats;
    ParamSet grads = grad(
        [&](Tape& t) { return wm_batch_loss(t, wm, batch, draws, ws, &stats); }, wm.params);
    adam_step_inplace(wm.params, grads, opt, adam_cfg);
    return stats;
}

inline WmStepStats wm_train_step(WorldModel& wm, AdamState& opt,
                                 std::span<const TrainWindow* const> batch, Rng& rng,
                                 const AdamConfig& adam_cfg) {
    std::vector<FlowDraw> draws;
    draws.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) draws.push_back(draw_flow_noise(wm.cfg, rng));
    return wm_apply_train_batch(wm, opt, batch, draws, adam_cfg);
}

// ---------------------------------------------------------------------------
// sampling

// Resolved forward views for the hot sampling path.
struct WorldModelViews {
    MlpView denoiser;
    MlpView embedder;
    MlpView reward;
    std::vector<const TensorValue*> skips;

    static WorldModelViews resolve(const WorldModel& wm) {
        WorldModelViews v{MlpView::resolve(wm.denoiser_spec, wm.params, kDenoiserPrefix),
                          MlpView::resolve(wm.embedder_spec, wm.params, kEmbedderPrefix),
                          MlpView::resolve(wm.reward_spec, wm.params, kRewardPrefix),
                          {}};
        for (int d = 0; d < wm.cfg.skip_degree; ++d) {
            const TensorValue& s = wm.params.at(skip_param_name(d));
            if (s.shape != std::vector<std::size_t>{static_cast<std::size_t>(wm.cfg.chunk_dim())}) {
                throw DimensionError("world model: bad shape for " + skip_param_name(d));
            }
            v.skips.push_back(&s);
        }
        return v;
    }
};

struct SampledChunk {
    std::vector<double> frames;   // T * frame_dim, clamped to [0,1]
    std::vector<double> rewards;  // T predictions in (0,1)
};

inline double predict_reward_frame(const MlpView& reward_view, std::span<const double> frame) {
    std::vector<double> out, scratch;
    mlp_forward(reward_view, frame, out, scratch);
    return sigmoid(out[0]);
}

inline double predict_reward(const WorldModel& wm, std::span<const double> frame) {
    const MlpView view = MlpView::resolve(wm.reward_spec, wm.params, kRewardPrefix);
    return predict_reward_frame(view, frame);
}

// Euler integration of the velocity field from seeded noise at tau=0 to
// tau=1 in K uniform steps; pixels clamp to [0,1] only at the end, and the
// reward head reads the clamped frames.
inline SampledChunk sample_chunk_with_views(const WorldModel& wm, const WorldModelViews& views,
                                            std::span<const double> history,
                                            std::span<const ActionPose> actions,
                                            std::uint64_t seed) {
    const auto& cfg = wm.cfg;
    require(history.size() == static_cast<std::size_t>(cfg.history_dim()),
            "sample_chunk: history length mismatch");
    require(actions.size() == static_cast<std::size_t>(cfg.chunk_len),
            "sample_chunk: need exactly chunk_len actions");

    std::vector<double> action_embed;
    {
        std::vector<double> one, scratch;
        for (const ActionPose& a : actions) {
            mlp_forward(views.embedder, encode_action(a), one, scratch);
            action_embed.insert(action_embed.end(), one.begin(), one.end());
        }
    }

    Rng rng(seed);
    std::vector<double> z(static_cast<std::size_t>(cfg.chunk_dim()));
    for (double& x : z) x = rng.normal();

    const int K = cfg.euler_steps;
    std::vector<double> den_in(static_cast<std::size_t>(cfg.denoiser_input_dim()));
    std::vector<double> v, scratch;
    for (int k = 0; k < K; ++k) {
        const double tau = static_cast<double>(k) / K;
        const std::vector<double> te = flow_time_embedding(tau, cfg.cond_dim());
        auto it = std::copy(z.begin(), z.end(), den_in.begin());
        for (std::size_t i = 0; i < te.size(); ++i) *it++ = action_embed[i] + te[i];
        std::copy(history.begin(), history.end(), it);
        mlp_forward(views.denoiser, den_in, v, scratch);
        double tau_pow = 1.0;
        for (const TensorValue* s : views.skips) {
            for (std::size_t i = 0; i < z.size(); ++i) v[i] += s->data[i] * tau_pow * z[i];
            tau_pow *= tau;
        }
        const double dt = 1.0 / K;
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += dt * v[i];
    }
    for (double& x : z) x = std::min(1.0, std::max(0.0, x));

    SampledChunk out;
    out.frames = std::move(z);
    out.rewards.reserve(static_cast<std::size_t>(cfg.chunk_len));
    for (int t = 0; t < cfg.chunk_len; ++t) {
        out.rewards.push_back(predict_reward_frame(
            views.reward, std::span<const double>(out.frames)
                              .subspan(static_cast<std::size_t>(t) *
                                           static_cast<std::size_t>(cfg.frame_dim),
                                       static_cast<std::size_t>(cfg.frame_dim))));
    }
    return out;
}

inline SampledChunk sample_chunk(const WorldModel& wm, std::span<const double> history,
                                 std::span<const ActionPose> actions, std::uint64_t seed) {
    return sample_chunk_with_views(wm, WorldModelViews::resolve(wm), history, actions, seed);
}

// ---------------------------------------------------------------------------
// rollout

inline bool classify_success(std::span<const double> reward_trace, double threshold) {
    require(!reward_trace.empty(), "classify_success: empty reward trace");
    double best = reward_trace[0];
    for (double r : reward_trace) best = std::max(best, r);
    return best > threshold;  // strictly above
}

struct RolloutResult {
    std::vector<double> frames;        // chunks_executed * T * frame_dim
    std::vector<double> reward_trace;  // one prediction per generated frame
    bool success = false;
    int chunks_executed = 0;
};

// The action source sees every frame observed so far (initial history first,
// then generated frames) and must return the next T actions.
using ActionSource =
    std::function<std::vector<ActionPose>(const std::vector<double>& observed_frames)>;

inline RolloutResult rollout(const WorldModel& wm, std::span<const double> initial_history,
                             const ActionSource& action_source, int max_chunks,
                             std::uint64_t seed) {
    const auto& cfg = wm.cfg;
    require(initial_history.size() == static_cast<std::size_t>(cfg.history_dim()),
            "rollout: initial history must hold exactly h frames");
    require(max_chunks >= 1, "rollout: max_chunks must be >= 1");
    const WorldModelViews views = WorldModelViews::resolve(wm);
    const SeedTree tree{seed};

    std::vector<double> observed(initial_history.begin(), initial_history.end());
    RolloutResult out;
    for (int c = 0; c < max_chunks; ++c) {
        const std::vector<ActionPose> actions = action_source(observed);
        require(actions.size() == static_cast<std::size_t>(cfg.chunk_len),
                "rollout: action source must return chunk_len actions");
        const std::span<const double> history(
            observed.data() + observed.size() - static_cast<std::size_t>(cfg.history_dim()),
            static_cast<std::size_t>(cfg.history_dim()));
        SampledChunk chunk = sample_chunk_with_views(
            wm, views, history, actions, derive_seed(tree, "chunk", static_cast<std::uint64_t>(c)));
        observed.insert(observed.end(), chunk.frames.begin(), chunk.frames.end());
        out.frames.insert(out.frames.end(), chunk.frames.begin(), chunk.frames.end());
        out.reward_trace.insert(out.reward_trace.end(), chunk.rewards.begin(),
                                chunk.rewards.end());
        out.chunks_executed = c + 1;
        if (classify_success(out.reward_trace, cfg.reward_threshold)) break;  // chunk boundary
    }
    out.success = classify_success(out.reward_trace, cfg.reward_threshold);
    return out;
}

// ---------------------------------------------------------------------------
// persistence: params.ckpt + worldmodel.json in one directory

inline void save_world_model(const WorldModel& wm, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(wm.params, dir / "params.ckpt");
    std::ofstream f(dir / "worldmodel.json", std::ios::trunc);
    if (!f) throw IoError("save_world_model: cannot open " + (dir / "worldmodel.json").string());
    f << nlohmann::json(wm.cfg).dump(2) << "\n";
}

inline WorldModel load_world_model(const std::filesystem::path& dir) {
    std::ifstream f(dir / "worldmodel.json");
    if (!f) throw IoError("load_world_model: cannot open " + (dir / "worldmodel.json").string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("worldmodel.json unparsable: ") + e.what());
    }
    WorldModel wm;
    try {
        wm.cfg = j.get<WorldModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("worldmodel.json malformed: ") + e.what());
    }
    wm.denoiser_spec = detail::make_denoiser_spec(wm.cfg);
    wm.embedder_spec = detail::make_embedder_spec(wm.cfg);
    wm.reward_spec = detail::make_reward_spec(wm.cfg);
    wm.params = load_checkpoint(dir / "params.ckpt");
    try {  // shape-check the loaded tensors against the config-derived specs
        WorldModelViews::resolve(wm);
    } catch (const ContractError& e) {
        throw PersistenceError(PersistenceError::Kind::invariant_violation,
                               std::string("checkpoint does not match worldmodel.json: ") +
                                   e.what());
    }
    return wm;
}

}  // namespace loopworld
