#pragma once

// Closed-loop orchestration. One iteration runs four phases: curate the
// trajectory dataset, fit the world model from a cached mixed-task
// pretrained checkpoint, RL-train the policy inside the model starting from
// the frozen behavior-cloned base, then deploy in the ground-truth env and
// fold the labeled rollouts back into the dataset. The evaluation suite
// (video quality, outcome alignment, ground-truth success) and the report
// writer live here too.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "loopworld/adam.hpp"
#include "loopworld/config.hpp"
#include "loopworld/env.hpp"
#include "loopworld/metrics.hpp"
#include "loopworld/policy.hpp"
#include "loopworld/rl.hpp"
#include "loopworld/rng.hpp"
#include "loopworld/sans.hpp"
#include "loopworld/windows.hpp"
#include "loopworld/worldmodel.hpp"

namespace loopworld {

// ---------------------------------------------------------------------------
// dataset-level training drivers

// Fits the world model on every window of the given records. Records too
// short for a single window are skipped with a logged note. Returns the
// per-step flow-loss curve.
inline std::vector<double> wm_fit(WorldModel& wm, const std::vector<TrajectoryRecord>& records,
                                  const TrainBudget& budget, std::uint64_t seed,
                                  const std::string& log_phase) {
    budget.validate(log_phase.c_str());
    const int h = wm.cfg.history_len;
    const int T = wm.cfg.chunk_len;
    std::vector<TrainWindow> windows;
    int skipped = 0;
    for (const auto& rec : records) {
        if (static_cast<int>(rec.actions.size()) < h + T - 1) {
            ++skipped;
            continue;
        }
        auto w = extract_windows(rec, h, T);
        for (auto& x : w) windows.push_back(std::move(x));
    }
    if (skipped > 0) {
        log_note(log_phase, std::to_string(skipped) + " records shorter than one window, skipped");
    }
    require(!windows.empty(), log_phase + ": no trainable windows");

    AdamState opt = AdamState::init(wm.params);
    AdamConfig adam;
    adam.lr = budget.lr;
    Rng rng(derive_seed(SeedTree{seed}, "fit", 0));

    std::vector<double> curve;
    curve.reserve(static_cast<std::size_t>(budget.steps));
    for (int step = 0; step < budget.steps; ++step) {
        std::vector<const TrainWindow*> batch;
        batch.reserve(static_cast<std::size_t>(budget.batch_size));
        for (int b = 0; b < budget.batch_size; ++b) {
            batch.push_back(&windows[rng.next_u64() % windows.size()]);
        }
        const WmStepStats s = wm_train_step(wm, opt, batch, rng, adam);
        curve.push_back(s.l_flow);
        if ((step + 1) % 200 == 0) log_event(log_phase, step + 1, "l_flow", s.l_flow);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// policy-in-the-real-env bridge

// Stateful controller mapping env states to policy actions: keeps the last h
// rendered frames (bootstrapping by repeating the reset frame, matching the
// start window used in training), samples a fresh action chunk whenever the
// previous one is exhausted, and plays it back one action per step.
class PolicyController {
  public:
    PolicyController(const Policy& p, const TaskSpec& task, std::uint64_t seed)
        : policy_(&p), task_(task), tree_{seed} {}

    ActionPose operator()(const EnvState& state) {
        const Frame f = render(state, task_);
        if (history_.empty()) {
            for (int k = 0; k < policy_->cfg.history_len; ++k) append_frame(history_, f);
        } else {
            history_.erase(history_.begin(), history_.begin() + kFramePixels);
            append_frame(history_, f);
        }
        if (queue_pos_ >= queue_.size()) {
            const ActionChunkDistribution dist = policy_forward(*policy_, history_);
            SampledActions draw =
                sample_actions(dist, derive_seed(tree_, "chunk", chunk_index_++));
            queue_ = std::move(draw.actions);
            queue_pos_ = 0;
        }
        return queue_[queue_pos_++];
    }

  private:
    const Policy* policy_;
    TaskSpec task_;
    SeedTree tree_;
    std::vector<double> history_;
    std::vector<ActionPose> queue_;
    std::size_t queue_pos_ = 0;
    std::uint64_t chunk_index_ = 0;
};

// Success percentage of a controller family over seeded episodes; the
// factory receives a per-episode seed so stochastic controllers decorrelate.
inline double eval_controller_gt(const TaskSpec& task, int n_episodes, std::uint64_t seed,
                                 const std::function<Controller(std::uint64_t)>& make_controller) {
    require(n_episodes >= 1, "eval_controller_gt: n_episodes must be >= 1");
    const SeedTree tree{seed};
    int successes = 0;
    for (int i = 0; i < n_episodes; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        const Controller ctrl = make_controller(derive_seed(tree, "controller", idx));
        const TrajectoryRecord rec =
            run_episode(task, ctrl, derive_seed(tree, "episode", idx), Provenance::policy_rollout);
        successes += rec.outcome == Outcome::success ? 1 : 0;
    }
    return 100.0 * static_cast<double>(successes) / static_cast<double>(n_episodes);
}

// Ground-truth success rate of the policy itself (stochastic sampling).
inline double eval_policy_gt(const Policy& policy, const TaskSpec& task, int n_episodes,
                             std::uint64_t seed) {
    return eval_controller_gt(task, n_episodes, seed, [&](std::uint64_t ep_seed) {
        return Controller(PolicyController(policy, task, ep_seed));
    });
}

// Full-horizon policy episodes recorded for dataset augmentation. Successes
// and failures are both kept; labels come from the env's reward trace.
inline std::vector<TrajectoryRecord> deploy_policy(const Policy& policy, const TaskSpec& task,
                                                   int episodes, std::uint64_t seed) {
    require(episodes >= 1, "deploy_policy: episodes must be >= 1");
    const SeedTree tree{seed};
    std::vector<TrajectoryRecord> out;
    out.reserve(static_cast<std::size_t>(episodes));
    for (int i = 0; i < episodes; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        PolicyController ctrl(policy, task, derive_seed(tree, "controller", idx));
        out.push_back(run_episode(task, Controller(ctrl), derive_seed(tree, "episode", idx),
                                  Provenance::policy_rollout));
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation: video quality

struct VideoEvalResult {
    VideoQuality video;
    int windows_evaluated = 0;
    int records_skipped = 0;
};

// Teacher-forced one-chunk prediction over every window of every held-out
// record: the model sees the true history and the recorded actions and its
// generated chunk is scored against the recorded one. MSE and PSNR pool over
// all pixels; SSIM averages over frames.
inline VideoEvalResult eval_video_quality(const WorldModel& wm, const SansDataset& heldout,
                                          std::uint64_t seed) {
    const int h = wm.cfg.history_len;
    const int T = wm.cfg.chunk_len;
    const WorldModelViews views = WorldModelViews::resolve(wm);
    const SeedTree tree{seed};

    VideoEvalResult res;
    double se_sum = 0.0, ssim_sum = 0.0;
    std::size_t px_count = 0, frame_count = 0;
    std::uint64_t draw = 0;
    for (const auto& rec : heldout.records) {
        if (static_cast<int>(rec.actions.size()) < h + T - 1) {
            ++res.records_skipped;
            log_note("eval_video", "record too short to score, skipped");
            continue;
        }
        for (const TrainWindow& w : extract_windows(rec, h, T)) {
            const SampledChunk chunk = sample_chunk_with_views(
                wm, views, w.history, w.action_poses, derive_seed(tree, "chunk", draw++));
            for (std::size_t i = 0; i < chunk.frames.size(); ++i) {
                const double d = chunk.frames[i] - w.target[i];
                se_sum += d * d;
            }
            px_count += chunk.frames.size();
            for (int t = 0; t < T; ++t) {
                const std::size_t off = static_cast<std::size_t>(t) * kFramePixels;
                ssim_sum += frame_ssim(
                    std::span<const double>(chunk.frames).subspan(off, kFramePixels),
                    std::span<const double>(w.target).subspan(off, kFramePixels));
                ++frame_count;
            }
            ++res.windows_evaluated;
        }
    }
    require(res.windows_evaluated > 0, "eval_video_quality: no scorable records");
    res.video.mse = se_sum / static_cast<double>(px_count);
    res.video.psnr_db = psnr_from_mse(res.video.mse);
    res.video.ssim = ssim_sum / static_cast<double>(frame_count);
    return res;
}

// ---------------------------------------------------------------------------
// evaluation: outcome alignment

// Produces one generated chunk during a replayed episode; swapping this out
// lets tests drive the judging logic with oracle or constant generators.
// Arguments: record index, chunk index, history window, the chunk's actions,
// and the derived noise seed.
using ChunkSampler = std::function<std::vector<double>(
    std::size_t, int, std::span<const double>, std::span<const ActionPose>, std::uint64_t)>;

namespace detail {

// Replays the record's full action sequence through the sampler chunk by
// chunk without any early stopping, starting from the repeated reset frame.
// The final short chunk is padded by repeating the last action; generated
// frames are truncated back to the recorded length.
inline std::vector<double> replay_generated_frames(const TrajectoryRecord& rec,
                                                   std::size_t rec_idx, int h, int T,
                                                   std::uint64_t seed,
                                                   const ChunkSampler& sampler) {
    const int L = static_cast<int>(rec.actions.size());
    require(L >= 1, "replay: record carries no actions");
    const auto hd = static_cast<std::size_t>(h) * kFramePixels;
    const SeedTree tree{seed};

    std::vector<double> observed;
    for (int k = 0; k < h; ++k) append_frame(observed, rec.frames[0]);

    std::vector<double> generated;
    const int n_chunks = (L + T - 1) / T;
    for (int c = 0; c < n_chunks; ++c) {
        std::vector<ActionPose> actions;
        actions.reserve(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            const int ai = std::min(c * T + t, L - 1);
            actions.push_back(rec.actions[static_cast<std::size_t>(ai)]);
        }
        const std::span<const double> history(observed.data() + observed.size() - hd, hd);
        std::vector<double> frames = sampler(rec_idx, c, history, actions,
                                             derive_seed(tree, "chunk", static_cast<std::uint64_t>(c)));
        require(frames.size() == static_cast<std::size_t>(T) * kFramePixels,
                "replay: sampler returned the wrong number of frames");
        observed.insert(observed.end(), frames.begin(), frames.end());
        generated.insert(generated.end(), frames.begin(), frames.end());
    }
    generated.resize(static_cast<std::size_t>(L) * kFramePixels);
    return generated;
}

}  // namespace detail

// Fraction (as a percentage) of replayed records whose final generated frame
// decodes to the record's ground-truth outcome. An undecodable final frame
// counts as misalignment.
inline double eval_visual_alignment_with(const SansDataset& heldout, const TaskSpec& task, int h,
                                         int T, int n, std::uint64_t seed,
                                         const ChunkSampler& sampler) {
    require(n >= 1, "eval_visual_alignment: n must be >= 1");
    const auto n_eval = std::min<std::size_t>(static_cast<std::size_t>(n), heldout.records.size());
    require(n_eval >= 1, "eval_visual_alignment: empty held-out set");
    const SeedTree tree{seed};

    int aligned = 0;
    for (std::size_t i = 0; i < n_eval; ++i) {
        const TrajectoryRecord& rec = heldout.records[i];
        const std::vector<double> gen = detail::replay_generated_frames(
            rec, i, h, T, derive_seed(tree, "record", i), sampler);
        Frame last;
        std::copy(gen.end() - kFramePixels, gen.end(), last.px.begin());
        const bool truth = rec.outcome == Outcome::success;
        bool judged = false;
        bool decodable = true;
        try {
            judged = decode_outcome(last, task).success;
        } catch (const UndecodableError&) {
            decodable = false;
        }
        aligned += decodable && judged == truth ? 1 : 0;
    }
    return 100.0 * static_cast<double>(aligned) / static_cast<double>(n_eval);
}

inline double eval_visual_alignment(const WorldModel& wm, const SansDataset& heldout,
                                    const TaskSpec& task, int n, std::uint64_t seed) {
    const WorldModelViews views = WorldModelViews::resolve(wm);
    return eval_visual_alignment_with(
        heldout, task, wm.cfg.history_len, wm.cfg.chunk_len, n, seed,
        [&](std::size_t, int, std::span<const double> history,
            std::span<const ActionPose> actions, std::uint64_t s) {
            return sample_chunk_with_views(wm, views, history, actions, s).frames;
        });
}

// As visual alignment, but judged by thresholding the generated reward trace
// instead of decoding the final frame.
inline double eval_reward_alignment(const WorldModel& wm, const SansDataset& heldout, int n,
                                    std::uint64_t seed) {
    require(wm.cfg.enable_reward_head, "eval_reward_alignment: reward head is disabled");
    require(n >= 1, "eval_reward_alignment: n must be >= 1");
    const auto n_eval = std::min<std::size_t>(static_cast<std::size_t>(n), heldout.records.size());
    require(n_eval >= 1, "eval_reward_alignment: empty held-out set");
    const int h = wm.cfg.history_len;
    const int T = wm.cfg.chunk_len;
    const auto hd = static_cast<std::size_t>(h) * kFramePixels;
    const WorldModelViews views = WorldModelViews::resolve(wm);
    const SeedTree tree{seed};

    int aligned = 0;
    for (std::size_t i = 0; i < n_eval; ++i) {
        const TrajectoryRecord& rec = heldout.records[i];
        const int L = static_cast<int>(rec.actions.size());
        const SeedTree rec_tree{derive_seed(tree, "record", i)};

        std::vector<double> observed;
        for (int k = 0; k < h; ++k) append_frame(observed, rec.frames[0]);
        std::vector<double> trace;
        const int n_chunks = (L + T - 1) / T;
        for (int c = 0; c < n_chunks; ++c) {
            std::vector<ActionPose> actions;
            for (int t = 0; t < T; ++t) {
                const int ai = std::min(c * T + t, L - 1);
                actions.push_back(rec.actions[static_cast<std::size_t>(ai)]);
            }
            const std::span<const double> history(observed.data() + observed.size() - hd, hd);
            const SampledChunk chunk =
                sample_chunk_with_views(wm, views, history, actions,
                                        derive_seed(rec_tree, "chunk", static_cast<std::uint64_t>(c)));
            observed.insert(observed.end(), chunk.frames.begin(), chunk.frames.end());
            trace.insert(trace.end(), chunk.rewards.begin(), chunk.rewards.end());
        }
        trace.resize(static_cast<std::size_t>(L));
        const bool judged = classify_success(trace, wm.cfg.reward_threshold);
        const bool truth = rec.outcome == Outcome::success;
        aligned += judged == truth ? 1 : 0;
    }
    return 100.0 * static_cast<double>(aligned) / static_cast<double>(n_eval);
}

// ---------------------------------------------------------------------------
// reports and manifests

struct MetricsReport {
    VideoQuality video;
    double visual_alignment_pct = 0.0;
    // Absent when the model runs without a reward head.
    std::optional<double> reward_alignment_pct;
    double gt_success_sft_pct = 0.0;
    double gt_success_rl_pct = 0.0;
    double delta_pct = 0.0;

    void check_invariants() const {
        auto pct_ok = [](double p) { return p >= 0.0 && p <= 100.0; };
        require(pct_ok(visual_alignment_pct), "MetricsReport: visual alignment out of range");
        require(!reward_alignment_pct || pct_ok(*reward_alignment_pct),
                "MetricsReport: reward alignment out of range");
        require(pct_ok(gt_success_sft_pct) && pct_ok(gt_success_rl_pct),
                "MetricsReport: success percentage out of range");
        require(video.ssim >= -1.0 && video.ssim <= 1.0, "MetricsReport: ssim out of range");
        require(video.mse >= 0.0, "MetricsReport: negative mse");
        require(video.psnr_db <= kPsnrCapDb, "MetricsReport: psnr above cap");
    }

    friend bool operator==(const MetricsReport& a, const MetricsReport& b) {
        return a.video.mse == b.video.mse && a.video.psnr_db == b.video.psnr_db &&
               a.video.ssim == b.video.ssim &&
               a.visual_alignment_pct == b.visual_alignment_pct &&
               a.reward_alignment_pct == b.reward_alignment_pct &&
               a.gt_success_sft_pct == b.gt_success_sft_pct &&
               a.gt_success_rl_pct == b.gt_success_rl_pct && a.delta_pct == b.delta_pct;
    }
};

inline void to_json(nlohmann::json& j, const MetricsReport& m) {
    j = nlohmann::json{{"video",
                        {{"mse", m.video.mse},
                         {"psnr_db", m.video.psnr_db},
                         {"ssim", m.video.ssim}}},
                       {"visual_alignment_pct", m.visual_alignment_pct},
                       {"reward_alignment_pct",
                        m.reward_alignment_pct ? nlohmann::json(*m.reward_alignment_pct)
                                               : nlohmann::json(nullptr)},
                       {"gt_success_sft_pct", m.gt_success_sft_pct},
                       {"gt_success_rl_pct", m.gt_success_rl_pct},
                       {"delta_pct", m.delta_pct}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& m) {
    const auto& v = j.at("video");
    v.at("mse").get_to(m.video.mse);
    v.at("psnr_db").get_to(m.video.psnr_db);
    v.at("ssim").get_to(m.video.ssim);
    j.at("visual_alignment_pct").get_to(m.visual_alignment_pct);
    if (j.at("reward_alignment_pct").is_null()) {
        m.reward_alignment_pct.reset();
    } else {
        m.reward_alignment_pct = j.at("reward_alignment_pct").get<double>();
    }
    j.at("gt_success_sft_pct").get_to(m.gt_success_sft_pct);
    j.at("gt_success_rl_pct").get_to(m.gt_success_rl_pct);
    j.at("delta_pct").get_to(m.delta_pct);
}

struct IterationManifest {
    int iteration_index = 0;
    // All paths are empty until their phase completes; on a phase failure
    // the manifest records what finished plus the failing phase and message.
    std::string sans_path;
    std::string wm_path;
    std::string sft_policy_path;
    std::string rl_policy_path;
    std::string rl_curve_path;
    MetricsReport metrics;
    std::vector<std::pair<std::string, double>> phase_seconds;
    std::string failed_phase;
    std::string error_message;

    bool completed() const { return failed_phase.empty(); }
};

inline void to_json(nlohmann::json& j, const IterationManifest& m) {
    nlohmann::json phases = nlohmann::json::array();
    for (const auto& [name, secs] : m.phase_seconds) {
        phases.push_back({{"phase", name}, {"seconds", secs}});
    }
    j = nlohmann::json{{"iteration_index", m.iteration_index},
                       {"sans_path", m.sans_path},
                       {"wm_path", m.wm_path},
                       {"sft_policy_path", m.sft_policy_path},
                       {"rl_policy_path", m.rl_policy_path},
                       {"rl_curve_path", m.rl_curve_path},
                       {"metrics", m.metrics},
                       {"phase_seconds", phases},
                       {"failed_phase", m.failed_phase},
                       {"error_message", m.error_message}};
}

inline void from_json(const nlohmann::json& j, IterationManifest& m) {
    j.at("iteration_index").get_to(m.iteration_index);
    j.at("sans_path").get_to(m.sans_path);
    j.at("wm_path").get_to(m.wm_path);
    j.at("sft_policy_path").get_to(m.sft_policy_path);
    j.at("rl_policy_path").get_to(m.rl_policy_path);
    j.at("rl_curve_path").get_to(m.rl_curve_path);
    j.at("metrics").get_to(m.metrics);
    m.phase_seconds.clear();
    for (const auto& p : j.at("phase_seconds")) {
        m.phase_seconds.emplace_back(p.at("phase").get<std::string>(),
                                     p.at("seconds").get<double>());
    }
    j.at("failed_phase").get_to(m.failed_phase);
    j.at("error_message").get_to(m.error_message);
}

inline void save_manifest(const IterationManifest& m, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("save_manifest: cannot open " + path.string());
    f << nlohmann::json(m).dump(2) << "\n";
    if (!f.good()) throw IoError("save_manifest: write failed for " + path.string());
}

inline IterationManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_manifest: cannot open " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("manifest unparsable: ") + e.what());
    }
    try {
        return j.get<IterationManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("manifest malformed: ") + e.what());
    }
}

// Loads every artifact a completed manifest references and checks the
// dataset's iteration counter. The counter advances when the deployment
// rollouts are folded in, so iteration k ends holding a dataset stamped k+1.
inline void check_manifest(const IterationManifest& m) {
    require(m.completed(), "check_manifest: manifest records a failed phase: " + m.failed_phase);
    m.metrics.check_invariants();
    const SansDataset ds = load_sans(m.sans_path);
    require(ds.iteration_index == m.iteration_index + 1,
            "check_manifest: dataset iteration counter does not match the manifest");
    (void)load_world_model(m.wm_path);
    (void)load_policy(m.sft_policy_path);
    (void)load_policy(m.rl_policy_path);
    require(std::filesystem::exists(m.rl_curve_path),
            "check_manifest: missing RL curve " + m.rl_curve_path);
}

// ---------------------------------------------------------------------------
// the four-phase iteration

namespace detail {

inline std::vector<TrajectoryRecord> success_only(const std::vector<TrajectoryRecord>& records) {
    std::vector<TrajectoryRecord> out;
    for (const auto& r : records) {
        if (r.outcome == Outcome::success) out.push_back(r);
    }
    return out;
}

// Start histories for in-model RL: one per training record, the reset frame
// repeated to fill the model's history window.
inline std::vector<std::vector<double>> rl_start_histories(
    const std::vector<TrajectoryRecord>& records, int h) {
    std::vector<std::vector<double>> starts;
    starts.reserve(records.size());
    for (const auto& rec : records) {
        std::vector<double> s;
        for (int k = 0; k < h; ++k) append_frame(s, rec.frames[0]);
        starts.push_back(std::move(s));
    }
    return starts;
}

}  // namespace detail

// Mixed-task variants for the one-time pretraining corpus: the reference
// layout plus two shifted goal/start arrangements.
inline std::vector<TaskSpec> pretrain_task_variants(const TaskSpec& base) {
    TaskSpec alt1 = base;
    alt1.task_id = base.task_id + "-alt1";
    alt1.goal_center = {0.25, 0.22};
    TaskSpec alt2 = base;
    alt2.task_id = base.task_id + "-alt2";
    alt2.object_start_region = {{0.2, 0.15}, {0.8, 0.45}};
    alt2.goal_center = {0.72, 0.78};
    alt1.validate();
    alt2.validate();
    return {base, alt1, alt2};
}

// Trains the mixed-task checkpoint once and caches it under the output dir;
// later iterations (and paired ablations) load the cached copy. The cache is
// keyed by the reward-head flag because the flag changes the training loss.
inline std::filesystem::path ensure_pretrained_wm(const RunConfig& cfg, const SeedTree& tree) {
    const std::filesystem::path dir =
        std::filesystem::path(cfg.out_dir) /
        (cfg.wm.enable_reward_head ? "wm_pretrained" : "wm_pretrained_no_reward_head");
    if (std::filesystem::exists(dir / "params.ckpt")) {
        const WorldModel cached = load_world_model(dir);
        require(nlohmann::json(cached.cfg) == nlohmann::json(cfg.wm),
                "pretrained checkpoint at " + dir.string() +
                    " was built for a different model config; remove it to retrain");
        return dir;
    }
    log_note("pretrain", "building mixed-task pretraining corpus");
    std::vector<TrajectoryRecord> pool;
    const std::vector<TaskSpec> variants = pretrain_task_variants(cfg.task);
    for (std::size_t v = 0; v < variants.size(); ++v) {
        SansDataset ds = generate_sans(variants[v], cfg.pretrain_success_per_variant,
                                       cfg.pretrain_near_per_variant,
                                       derive_seed(tree, "pretrain-sans", v));
        for (auto& r : ds.records) pool.push_back(std::move(r));
    }
    WorldModel wm = init_world_model(cfg.wm, derive_seed(tree, "wm-init", 0));
    wm_fit(wm, pool, cfg.pretrain, derive_seed(tree, "pretrain-fit", 0), "pretrain");
    save_world_model(wm, dir);
    return dir;
}

// Runs one closed-loop iteration. Phase failures are recorded in the
// returned manifest rather than thrown, so partial progress stays visible.
inline IterationManifest run_iteration(const RunConfig& cfg, const IterationManifest* prev,
                                       std::uint64_t seed) {
    cfg.validate();
    require(prev == nullptr || prev->completed(),
            "run_iteration: previous iteration did not complete");
    const int k = prev == nullptr ? 0 : prev->iteration_index + 1;
    const SeedTree tree{seed};
    const std::filesystem::path iter_dir =
        std::filesystem::path(cfg.out_dir) / ("iter" + std::to_string(k));
    std::filesystem::create_directories(iter_dir);

    IterationManifest m;
    m.iteration_index = k;
    std::string phase = "curate";
    const auto clock = [] { return std::chrono::steady_clock::now(); };
    auto phase_start = clock();
    const auto finish_phase = [&](const std::string& next) {
        const double secs = std::chrono::duration<double>(clock() - phase_start).count();
        m.phase_seconds.emplace_back(phase, secs);
        phase = next;
        phase_start = clock();
    };

    try {
        // Phase 1: curate. Iteration 0 generates the expert + near-success
        // dataset; later iterations inherit the previous augmented one.
        log_note(phase, "iteration " + std::to_string(k));
        SansDataset full = k == 0 ? generate_sans(cfg.task, cfg.sans.n_success, cfg.sans.n_near,
                                                  derive_seed(tree, "sans", 0))
                                  : load_sans(prev->sans_path);
        auto [train, heldout] =
            split(full, cfg.sans.holdout_fraction, derive_seed(tree, "split", 0));
        log_event(phase, 0, "train_records", static_cast<double>(train.records.size()));
        log_event(phase, 0, "heldout_records", static_cast<double>(heldout.records.size()));
        finish_phase("worldmodel");

        // Phase 2: world model, fine-tuned from the cached mixed-task
        // checkpoint on the current dataset.
        const std::filesystem::path pre_dir = ensure_pretrained_wm(cfg, tree);
        WorldModel wm = load_world_model(pre_dir);
        wm_fit(wm, train.records, cfg.wm_train, derive_seed(tree, "wm-fit", 0), phase);
        const std::filesystem::path wm_dir = iter_dir / "wm";
        save_world_model(wm, wm_dir);
        m.wm_path = wm_dir.string();
        finish_phase("policy");

        // Phase 3: RL inside the model, starting from the frozen SFT base.
        // The base is cloned once at iteration 0 and reused afterwards.
        const std::filesystem::path base_dir = std::filesystem::path(cfg.out_dir) / "sft_base";
        Policy sft_policy;
        if (k == 0) {
            sft_policy = init_policy(cfg.policy, derive_seed(tree, "policy-init", 0));
            const std::vector<TrajectoryRecord> bc_records = detail::success_only(train.records);
            require(!bc_records.empty(), "run_iteration: no success records for cloning");
            bc_train(sft_policy, bc_records, cfg.sft.steps, cfg.sft.lr,
                     derive_seed(tree, "sft", 0), cfg.sft.batch_size);
            save_policy(sft_policy, base_dir);
        } else {
            sft_policy = load_policy(base_dir);
        }
        const std::filesystem::path sft_dir = iter_dir / "sft";
        save_policy(sft_policy, sft_dir);
        m.sft_policy_path = sft_dir.string();

        Policy rl_policy = sft_policy;
        const std::vector<std::vector<double>> starts =
            detail::rl_start_histories(train.records, cfg.wm.history_len);
        const std::vector<RlStepStats> curve =
            rl_train(rl_policy, wm, starts, cfg.rl, derive_seed(tree, "rl", 0));
        const std::filesystem::path rl_dir = iter_dir / "rl";
        save_policy(rl_policy, rl_dir);
        m.rl_policy_path = rl_dir.string();
        const std::filesystem::path curve_path = iter_dir / "rl_curve.csv";
        write_rl_curve(curve_path, curve);
        m.rl_curve_path = curve_path.string();
        finish_phase("deploy");

        // Phase 4: deploy in the ground-truth env and fold the labeled
        // rollouts back in.
        const std::vector<TrajectoryRecord> rollouts =
            deploy_policy(rl_policy, cfg.task, cfg.deploy_episodes, derive_seed(tree, "deploy", 0));
        int deploy_successes = 0;
        for (const auto& r : rollouts) deploy_successes += r.outcome == Outcome::success ? 1 : 0;
        log_event(phase, 0, "deploy_successes", static_cast<double>(deploy_successes));
        const SansDataset augmented = augment(full, rollouts);
        const std::filesystem::path sans_dir = iter_dir / "sans";
        save_sans(augmented, sans_dir);
        m.sans_path = sans_dir.string();
        finish_phase("eval");

        // Evaluation suite over the held-out split and the real env.
        m.metrics.video = eval_video_quality(wm, heldout, derive_seed(tree, "eval-video", 0)).video;
        m.metrics.visual_alignment_pct = eval_visual_alignment(
            wm, heldout, cfg.task, cfg.eval_records, derive_seed(tree, "eval-visual", 0));
        if (cfg.wm.enable_reward_head) {
            m.metrics.reward_alignment_pct = eval_reward_alignment(
                wm, heldout, cfg.eval_records, derive_seed(tree, "eval-reward", 0));
        }
        m.metrics.gt_success_sft_pct =
            eval_policy_gt(sft_policy, cfg.task, cfg.eval_episodes, derive_seed(tree, "eval-sft", 0));
        m.metrics.gt_success_rl_pct =
            eval_policy_gt(rl_policy, cfg.task, cfg.eval_episodes, derive_seed(tree, "eval-rl", 0));
        m.metrics.delta_pct = m.metrics.gt_success_rl_pct - m.metrics.gt_success_sft_pct;
        m.metrics.check_invariants();
        log_event(phase, 0, "gt_success_sft_pct", m.metrics.gt_success_sft_pct);
        log_event(phase, 0, "gt_success_rl_pct", m.metrics.gt_success_rl_pct);
        finish_phase("done");
    } catch (const std::exception& e) {
        m.failed_phase = phase;
        m.error_message = e.what();
        log_note(phase, std::string("phase failed: ") + e.what());
    }

    save_manifest(m, iter_dir / "manifest.json");
    return m;
}

// ---------------------------------------------------------------------------
// ablations

enum class AblationVariant { no_near_success, no_reward_head };

inline const char* ablation_name(AblationVariant v) {
    switch (v) {
        case AblationVariant::no_near_success: return "no_near_success";
        case AblationVariant::no_reward_head: return "no_reward_head";
    }
    throw ContractError("ablation_name: unknown variant");
}

// Repeats the curate + world-model phases under one modification and scores
// the result on the same held-out split the baseline saw (identical master
// seed gives identical curation and split draws). Policy phases are not run;
// the report's policy fields stay zero.
inline MetricsReport run_ablation(const RunConfig& base_cfg, AblationVariant variant,
                                  std::uint64_t seed) {
    RunConfig cfg = base_cfg;
    if (variant == AblationVariant::no_reward_head) cfg.wm.enable_reward_head = false;
    cfg.validate();
    const SeedTree tree{seed};

    SansDataset full =
        generate_sans(cfg.task, cfg.sans.n_success, cfg.sans.n_near, derive_seed(tree, "sans", 0));
    auto [train, heldout] = split(full, cfg.sans.holdout_fraction, derive_seed(tree, "split", 0));
    std::vector<TrajectoryRecord> train_records = train.records;
    if (variant == AblationVariant::no_near_success) {
        train_records = detail::success_only(train_records);
        require(!train_records.empty(), "run_ablation: filtering left no training records");
        log_note("ablation", "success-only filter kept " + std::to_string(train_records.size()) +
                                 " of " + std::to_string(train.records.size()) + " records");
    }

    const std::filesystem::path pre_dir = ensure_pretrained_wm(cfg, tree);
    WorldModel wm = load_world_model(pre_dir);
    wm_fit(wm, train_records, cfg.wm_train, derive_seed(tree, "wm-fit", 0), "ablation");
    const std::filesystem::path wm_dir = std::filesystem::path(cfg.out_dir) /
                                         (std::string("wm_ablation_") + ablation_name(variant));
    save_world_model(wm, wm_dir);

    MetricsReport r;
    r.video = eval_video_quality(wm, heldout, derive_seed(tree, "eval-video", 0)).video;
    r.visual_alignment_pct = eval_visual_alignment(wm, heldout, cfg.task, cfg.eval_records,
                                                   derive_seed(tree, "eval-visual", 0));
    if (cfg.wm.enable_reward_head) {
        r.reward_alignment_pct =
            eval_reward_alignment(wm, heldout, cfg.eval_records, derive_seed(tree, "eval-reward", 0));
    }
    r.check_invariants();
    return r;
}

// ---------------------------------------------------------------------------
// report emission

namespace detail {

// Maps a series onto an SVG polyline within the given plot box; y values are
// percentages, x spreads evenly.
inline std::string polyline_points(const std::vector<double>& pcts, double x0, double y0,
                                   double w, double hgt) {
    std::string pts;
    const std::size_t n = pcts.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double fx = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        const double x = x0 + fx * w;
        const double y = y0 + (1.0 - std::min(100.0, std::max(0.0, pcts[i])) / 100.0) * hgt;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i == 0 ? "" : " ", x, y);
        pts += buf;
    }
    return pts;
}

inline std::vector<double> read_rl_success_column(const std::filesystem::path& csv) {
    std::ifstream f(csv);
    if (!f) throw IoError("emit_report: cannot open " + csv.string());
    std::string line;
    std::getline(f, line);  // header
    std::vector<double> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        require(c1 != std::string::npos && c2 != std::string::npos,
                "emit_report: malformed curve row: " + line);
        out.push_back(100.0 * std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
    }
    return out;
}

}  // namespace detail

// Writes report.json, success_by_iteration.csv, a pass-through copy of the
// latest RL curve, and curves.svg (one polyline per curve: in-model success
// vs RL step on the left, ground-truth success vs iteration on the right).
inline void emit_report(const std::vector<IterationManifest>& manifests,
                        const std::filesystem::path& dir) {
    require(!manifests.empty(), "emit_report: need at least one manifest");
    std::filesystem::create_directories(dir);

    {
        nlohmann::json iterations = nlohmann::json::array();
        for (const auto& m : manifests) iterations.push_back(nlohmann::json(m));
        std::ofstream f(dir / "report.json", std::ios::trunc);
        if (!f) throw IoError("emit_report: cannot open " + (dir / "report.json").string());
        f << nlohmann::json{{"iterations", iterations}}.dump(2) << "\n";
        if (!f.good()) throw IoError("emit_report: write failed for report.json");
    }

    {
        std::ofstream f(dir / "success_by_iteration.csv", std::ios::trunc);
        if (!f) throw IoError("emit_report: cannot open success_by_iteration.csv");
        f << "iteration,policy,gt_success_pct\n" << std::setprecision(17);
        for (const auto& m : manifests) {
            f << m.iteration_index << ",sft," << m.metrics.gt_success_sft_pct << "\n";
            f << m.iteration_index << ",rl," << m.metrics.gt_success_rl_pct << "\n";
        }
        if (!f.good()) throw IoError("emit_report: write failed for success_by_iteration.csv");
    }

    std::vector<double> rl_curve_pcts;
    const IterationManifest& last = manifests.back();
    if (!last.rl_curve_path.empty()) {
        rl_curve_pcts = detail::read_rl_success_column(last.rl_curve_path);
        std::filesystem::copy_file(last.rl_curve_path, dir / "rl_curve.csv",
                                   std::filesystem::copy_options::overwrite_existing);
    } else {
        log_note("report", "no RL curve recorded; pass-through skipped");
    }

    {
        std::vector<double> by_iter;
        for (const auto& m : manifests) by_iter.push_back(m.metrics.gt_success_rl_pct);

        std::string svg;
        svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 360\">\n";
        svg += "  <rect x=\"0\" y=\"0\" width=\"640\" height=\"360\" fill=\"white\"/>\n";
        svg += "  <text x=\"80\" y=\"28\" font-size=\"13\">in-model success vs RL step</text>\n";
        svg += "  <text x=\"400\" y=\"28\" font-size=\"13\">ground-truth success vs iteration</text>\n";
        // axis frames
        svg += "  <rect x=\"60\" y=\"40\" width=\"240\" height=\"280\" fill=\"none\" stroke=\"#999\"/>\n";
        svg += "  <rect x=\"380\" y=\"40\" width=\"220\" height=\"280\" fill=\"none\" stroke=\"#999\"/>\n";
        if (!rl_curve_pcts.empty()) {
            svg += "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"" +
                   detail::polyline_points(rl_curve_pcts, 60, 40, 240, 280) + "\"/>\n";
        }
        svg += "  <polyline fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"2\" points=\"" +
               detail::polyline_points(by_iter, 380, 40, 220, 280) + "\"/>\n";
        svg += "</svg>\n";

        std::ofstream f(dir / "curves.svg", std::ios::trunc);
        if (!f) throw IoError("emit_report: cannot open curves.svg");
        f << svg;
        if (!f.good()) throw IoError("emit_report: write failed for curves.svg");
    }
}

}  // namespace loopworld
