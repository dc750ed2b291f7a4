// Command-line driver for the training loop. Single-phase subcommands share
// artifacts through a fixed layout under the output directory so they compose
// the same way `iterate` chains them internally:
//
//   curate/{full,train,heldout}   SANS dataset and its split
//   wm_pretrained[...]/           mixed-variant pretrain checkpoint (cached)
//   wm/                           fine-tuned world model
//   sft/ rl/                      policy checkpoints
//   iterN/                        per-iteration artifacts + manifest.json
//
// Exit codes: 0 ok, 2 contract violation, 3 numeric failure, 1 anything else.
#include <loopworld/config.hpp>
#include <loopworld/loop.hpp>

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace loopworld;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    bool quiet = false;
};

RunConfig load_run_config(const GlobalArgs& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig{} : parse_config(g.config_path);
    if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
    if (g.seed) cfg.master_seed = *g.seed;
    cfg.validate();
    return cfg;
}

fs::path out(const RunConfig& cfg) { return fs::path(cfg.out_dir); }

// Phase seeds follow the same derivation run_iteration uses for iteration 0,
// so a manual curate/train-wm/sft/rl chain reproduces `iterate --k 0` exactly.
SeedTree iter_tree(const RunConfig& cfg, std::uint64_t k) {
    return SeedTree{derive_seed(SeedTree{cfg.master_seed}, "iteration", k)};
}

int cmd_curate(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    SansDataset full =
        generate_sans(cfg.task, cfg.sans.n_success, cfg.sans.n_near, derive_seed(it, "sans", 0));
    auto [train, heldout] = split(full, cfg.sans.holdout_fraction, derive_seed(it, "split", 0));
    save_sans(full, out(cfg) / "curate" / "full");
    save_sans(train, out(cfg) / "curate" / "train");
    save_sans(heldout, out(cfg) / "curate" / "heldout");
    std::printf("curate: %zu records (%zu train, %zu heldout) -> %s\n", full.records.size(),
                train.records.size(), heldout.records.size(),
                (out(cfg) / "curate").string().c_str());
    return 0;
}

int cmd_pretrain_wm(const RunConfig& cfg) {
    const fs::path dir = ensure_pretrained_wm(cfg, SeedTree{cfg.master_seed});
    std::printf("pretrain-wm: checkpoint at %s\n", dir.string().c_str());
    return 0;
}

int cmd_train_wm(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    SansDataset train = load_sans(out(cfg) / "curate" / "train");
    WorldModel wm = load_world_model(ensure_pretrained_wm(cfg, SeedTree{cfg.master_seed}));
    auto curve = wm_fit(wm, train.records, cfg.wm_train, derive_seed(it, "wm-fit", 0),
                        "worldmodel");
    save_world_model(wm, out(cfg) / "wm");
    std::printf("train-wm: flow loss %.4f -> %.4f over %d steps\n",
                curve.empty() ? 0.0 : curve.front(), curve.empty() ? 0.0 : curve.back(),
                cfg.wm_train.steps);
    return 0;
}

int cmd_sft(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    SansDataset train = load_sans(out(cfg) / "curate" / "train");
    std::vector<TrajectoryRecord> succ;
    for (const auto& r : train.records)
        if (r.outcome == Outcome::success) succ.push_back(r);
    Policy policy = init_policy(cfg.policy, derive_seed(it, "policy-init", 0));
    auto curve = bc_train(policy, succ, cfg.sft.steps, cfg.sft.lr, derive_seed(it, "sft", 0),
                          cfg.sft.batch_size);
    save_policy(policy, out(cfg) / "sft");
    std::printf("sft: %zu success records, final loss %.4f\n", succ.size(),
                curve.empty() ? 0.0 : curve.back());
    return 0;
}

int cmd_rl(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    WorldModel wm = load_world_model(out(cfg) / "wm");
    Policy policy = load_policy(out(cfg) / "sft");
    SansDataset train = load_sans(out(cfg) / "curate" / "train");
    auto starts = detail::rl_start_histories(train.records, cfg.wm.history_len);
    auto curve = rl_train(policy, wm, starts, cfg.rl, derive_seed(it, "rl", 0));
    save_policy(policy, out(cfg) / "rl");
    write_rl_curve(out(cfg) / "rl_curve.csv", curve);
    std::printf("rl: %zu steps, in-model success %.1f -> %.1f\n", curve.size(),
                curve.empty() ? 0.0 : curve.front().wm_success_rate,
                curve.empty() ? 0.0 : curve.back().wm_success_rate);
    return 0;
}

int cmd_deploy(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    Policy policy = load_policy(out(cfg) / "rl");
    auto rollouts =
        deploy_policy(policy, cfg.task, cfg.deploy_episodes, derive_seed(it, "deploy", 0));
    int succ = 0;
    for (const auto& r : rollouts) succ += r.outcome == Outcome::success ? 1 : 0;
    SansDataset full = load_sans(out(cfg) / "curate" / "full");
    augment(full, rollouts);
    save_sans(full, out(cfg) / "deploy" / "sans");
    std::printf("deploy: %d/%d episodes succeeded, dataset now %zu records\n", succ,
                cfg.deploy_episodes, full.records.size());
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    const SeedTree it = iter_tree(cfg, 0);
    WorldModel wm = load_world_model(out(cfg) / "wm");
    SansDataset heldout = load_sans(out(cfg) / "curate" / "heldout");
    Policy sft = load_policy(out(cfg) / "sft");
    Policy rl = load_policy(out(cfg) / "rl");

    MetricsReport m;
    auto vr = eval_video_quality(wm, heldout, derive_seed(it, "eval-video", 0));
    m.video = vr.video;
    m.visual_alignment_pct = eval_visual_alignment(wm, heldout, cfg.task, cfg.eval_records,
                                                   derive_seed(it, "eval-visual", 0));
    if (wm.cfg.enable_reward_head)
        m.reward_alignment_pct = eval_reward_alignment(wm, heldout, cfg.eval_records,
                                                       derive_seed(it, "eval-reward", 0));
    m.gt_success_sft_pct =
        eval_policy_gt(sft, cfg.task, cfg.eval_episodes, derive_seed(it, "eval-sft", 0));
    m.gt_success_rl_pct =
        eval_policy_gt(rl, cfg.task, cfg.eval_episodes, derive_seed(it, "eval-rl", 0));
    m.delta_pct = m.gt_success_rl_pct - m.gt_success_sft_pct;
    m.check_invariants();

    std::ofstream os(out(cfg) / "metrics.json");
    os << nlohmann::json(m).dump(2) << "\n";
    std::printf("eval: psnr %.2f dB, ssim %.4f, visual %.1f%%, sft %.1f%%, rl %.1f%% (%+.1f)\n",
                m.video.psnr_db, m.video.ssim, m.visual_alignment_pct, m.gt_success_sft_pct,
                m.gt_success_rl_pct, m.delta_pct);
    return 0;
}

int cmd_iterate(const RunConfig& cfg, std::uint64_t k_last) {
    const SeedTree tree{cfg.master_seed};
    std::optional<IterationManifest> prev;
    for (std::uint64_t k = 0; k <= k_last; ++k) {
        const fs::path mpath = out(cfg) / ("iter" + std::to_string(k)) / "manifest.json";
        if (fs::exists(mpath)) {
            IterationManifest existing = load_manifest(mpath);
            if (existing.completed()) {
                std::printf("iter %llu: already complete, reusing %s\n",
                            static_cast<unsigned long long>(k), mpath.string().c_str());
                prev = std::move(existing);
                continue;
            }
        }
        IterationManifest m =
            run_iteration(cfg, prev ? &*prev : nullptr, derive_seed(tree, "iteration", k));
        if (!m.completed()) {
            std::fprintf(stderr, "iter %llu failed in phase '%s': %s\n",
                         static_cast<unsigned long long>(k), m.failed_phase.c_str(),
                         m.error_message.c_str());
            return 1;
        }
        std::printf("iter %llu: sft %.1f%%, rl %.1f%% (%+.1f), visual %.1f%%\n",
                    static_cast<unsigned long long>(k), m.metrics.gt_success_sft_pct,
                    m.metrics.gt_success_rl_pct, m.metrics.delta_pct,
                    m.metrics.visual_alignment_pct);
        prev = std::move(m);
    }
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& variant) {
    AblationVariant v;
    if (variant == "no_near_success") v = AblationVariant::no_near_success;
    else if (variant == "no_reward_head") v = AblationVariant::no_reward_head;
    else throw ContractError("ablate: unknown variant '" + variant +
                             "' (expected no_near_success or no_reward_head)");
    MetricsReport m = run_ablation(cfg, v, cfg.master_seed);
    std::ofstream os(out(cfg) / ("ablation_" + variant + ".json"));
    os << nlohmann::json(m).dump(2) << "\n";
    std::printf("ablate %s: visual %.1f%%, reward %s, psnr %.2f dB\n", variant.c_str(),
                m.visual_alignment_pct,
                m.reward_alignment_pct ? (std::to_string(*m.reward_alignment_pct) + "%").c_str()
                                       : "n/a",
                m.video.psnr_db);
    return 0;
}

int cmd_report(const RunConfig& cfg) {
    std::vector<IterationManifest> manifests;
    for (std::uint64_t k = 0;; ++k) {
        const fs::path mpath = out(cfg) / ("iter" + std::to_string(k)) / "manifest.json";
        if (!fs::exists(mpath)) break;
        IterationManifest m = load_manifest(mpath);
        if (!m.completed()) break;
        manifests.push_back(std::move(m));
    }
    require(!manifests.empty(), "report: no completed iteration manifests under " + cfg.out_dir);
    emit_report(manifests, out(cfg));
    std::printf("report: %zu iterations -> %s/{report.json,success_by_iteration.csv,"
                "rl_curve.csv,curves.svg}\n",
                manifests.size(), cfg.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"closed-loop world-model / policy trainer"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON config file (flat dotted keys)");
    app.add_option("--seed", g.seed, "override master seed");
    app.add_option("--out", g.out_dir, "override output directory");
    app.add_flag("--quiet", g.quiet, "suppress JSON log lines on stderr");
    app.fallthrough();

    auto* curate = app.add_subcommand("curate", "generate the SANS dataset and its split");
    auto* pretrain = app.add_subcommand("pretrain-wm", "mixed-variant world-model pretraining");
    auto* train_wm = app.add_subcommand("train-wm", "fine-tune the world model on the train split");
    auto* sft = app.add_subcommand("sft", "behavior-clone the policy on success records");
    auto* rl = app.add_subcommand("rl", "policy optimization inside the world model");
    auto* deploy = app.add_subcommand("deploy", "roll out the policy and augment the dataset");
    auto* iterate = app.add_subcommand("iterate", "run full iterations 0..K");
    std::uint64_t k_last = 0;
    iterate->add_option("--k", k_last, "last iteration index to run")->required();
    auto* eval = app.add_subcommand("eval", "metrics for the current artifacts");
    auto* ablate = app.add_subcommand("ablate", "rerun curation + world model under an ablation");
    std::string variant;
    ablate->add_option("--variant", variant, "no_near_success | no_reward_head")->required();
    auto* report = app.add_subcommand("report", "render metrics files from iteration manifests");

    CLI11_PARSE(app, argc, argv);
    log_enabled() = !g.quiet;

    try {
        const RunConfig cfg = load_run_config(g);
        if (curate->parsed()) return cmd_curate(cfg);
        if (pretrain->parsed()) return cmd_pretrain_wm(cfg);
        if (train_wm->parsed()) return cmd_train_wm(cfg);
        if (sft->parsed()) return cmd_sft(cfg);
        if (rl->parsed()) return cmd_rl(cfg);
        if (deploy->parsed()) return cmd_deploy(cfg);
        if (iterate->parsed()) return cmd_iterate(cfg, k_last);
        if (eval->parsed()) return cmd_eval(cfg);
        if (ablate->parsed()) return cmd_ablate(cfg, variant);
        if (report->parsed()) return cmd_report(cfg);
    } catch (const ContractError& e) {
        std::fprintf(stderr, "contract error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
