#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "loopworld/rl.hpp"
#include "test_support.hpp"

using namespace loopworld;
using testsupport::bitwise_equal;
using testsupport::temp_dir;

namespace {

WorldModelConfig small_wm_cfg() {
    WorldModelConfig c;
    c.history_len = 1;
    c.chunk_len = 2;
    c.denoiser_hidden = {32};
    c.embedder_hidden = {8};
    c.action_embed_dim = 4;
    c.reward_hidden = {8};
    c.euler_steps = 2;
    c.max_chunks = 3;
    c.reward_threshold = 0.5;
    return c;
}

PolicyConfig small_pol_cfg() {
    PolicyConfig c;
    c.history_len = 1;
    c.chunk_len = 2;
    c.trunk_hidden = {16};
    return c;
}

std::vector<double> reference_start() {
    const SansDataset ds = generate_sans(reference_task(), 1, 0, 77);
    std::vector<double> start;
    append_frame(start, ds.records[0].frames[0]);
    return start;
}

bool groups_bitwise_equal(const RolloutGroup& a, const RolloutGroup& b) {
    if (a.members.size() != b.members.size()) return false;
    for (std::size_t i = 0; i < a.members.size(); ++i) {
        const auto& x = a.members[i];
        const auto& y = b.members[i];
        if (x.planar != y.planar || x.grips != y.grips || x.old_logprobs != y.old_logprobs ||
            x.ret != y.ret || x.result.frames != y.result.frames ||
            x.result.reward_trace != y.result.reward_trace) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("rl config validation") {
    RlConfig c;
    c.validate();
    RlConfig bad = c;
    bad.group_size = 1;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = c;
    bad.clip_epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = c;
    bad.clip_epsilon = 1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    nlohmann::json j = c;
    CHECK(j.get<RlConfig>().clip_epsilon == c.clip_epsilon);
}

TEST_CASE("compute_advantages closed forms") {
    const auto a = compute_advantages({1, 0, 1, 0}, 1e-6);
    REQUIRE(a.size() == 4);
    CHECK(a[0] == Catch::Approx(1.0).margin(1e-5));
    CHECK(a[1] == Catch::Approx(-1.0).margin(1e-5));
    CHECK(a[2] == Catch::Approx(1.0).margin(1e-5));
    CHECK(a[3] == Catch::Approx(-1.0).margin(1e-5));

    for (const auto& flat : {std::vector<int>{0, 0, 0, 0}, std::vector<int>{1, 1, 1, 1}}) {
        const auto z = compute_advantages(flat, 1e-6);
        for (double v : z) CHECK(v == 0.0);
    }

    const auto b = compute_advantages({1, 0, 0, 0}, 1e-6);
    CHECK(b[0] == Catch::Approx(std::sqrt(3.0)).margin(1e-4));
    CHECK(b[1] == Catch::Approx(-1.0 / std::sqrt(3.0)).margin(1e-4));
    CHECK(b[2] == b[1]);
    CHECK(b[3] == b[1]);

    CHECK_THROWS_AS(compute_advantages({1}, 1e-6), ContractError);
}

TEST_CASE("advantages sum to zero and normalize the spread") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const int g = 2 + static_cast<int>(rng.next_u64() % 15);
        std::vector<int> returns(static_cast<std::size_t>(g));
        for (auto& r : returns) r = rng.bernoulli(0.4) ? 1 : 0;
        const auto adv = compute_advantages(returns, 1e-6);
        double sum = 0.0, sq = 0.0;
        for (double v : adv) {
            sum += v;
            sq += v * v;
        }
        CHECK(std::abs(sum) <= 1e-9);
        const bool degenerate =
            std::all_of(returns.begin(), returns.end(), [&](int r) { return r == returns[0]; });
        if (degenerate) {
            CHECK(sq == 0.0);
        } else {
            CHECK(std::sqrt(sq / g) == Catch::Approx(1.0).margin(1e-4));
        }
    }
}

TEST_CASE("collect_group is deterministic and well-formed") {
    const WorldModel wm = init_world_model(small_wm_cfg(), 5);
    const Policy policy = init_policy(small_pol_cfg(), 6);
    const std::vector<double> start = reference_start();

    const RolloutGroup g1 = collect_group(policy, wm, start, 4, 31);
    const RolloutGroup g2 = collect_group(policy, wm, start, 4, 31);
    const RolloutGroup g3 = collect_group(policy, wm, start, 4, 32);

    CHECK(groups_bitwise_equal(g1, g2));
    CHECK_FALSE(groups_bitwise_equal(g1, g3));

    REQUIRE(g1.members.size() == 4);
    for (const auto& m : g1.members) {
        REQUIRE(m.result.chunks_executed >= 1);
        const auto n = m.old_logprobs.size();
        CHECK(n == static_cast<std::size_t>(m.result.chunks_executed));
        CHECK(m.histories.size() == n);
        CHECK(m.planar.size() == n);
        CHECK(m.grips.size() == n);
        CHECK(m.chunks.size() == n);
        // stored log-probs reproduce under the behavior snapshot
        for (std::size_t c = 0; c < n; ++c) {
            const ActionChunkDistribution d = policy_forward(policy, m.histories[c]);
            CHECK(detail::chunk_logprob(d, m.planar[c], m.grips[c]) == m.old_logprobs[c]);
        }
    }
}

TEST_CASE("collect_group degenerates with a near-deterministic policy") {
    const WorldModel wm = init_world_model(small_wm_cfg(), 5);
    PolicyConfig pcfg = small_pol_cfg();
    pcfg.logstd_min = -30.0;
    pcfg.logstd_init = -30.0;
    Policy policy = init_policy(pcfg, 6);
    for (std::size_t i = 0; i < policy.params.size(); ++i) {
        auto& [name, tensor] = policy.params.item(i);
        if (name != kLogstdName) std::fill(tensor.data.begin(), tensor.data.end(), 0.0);
    }
    // saturate the grip head so every member draws grip=1
    std::fill(policy.params.at("grip.b0").data.begin(), policy.params.at("grip.b0").data.end(),
              30.0);

    const std::vector<double> start = reference_start();
    const RolloutGroup g = collect_group(policy, wm, start, 6, 99);

    const auto& first = g.members[0];
    for (const auto& m : g.members) {
        CHECK(m.ret == first.ret);
        REQUIRE(m.planar.size() == first.planar.size());
        for (std::size_t c = 0; c < m.planar.size(); ++c) {
            for (std::size_t k = 0; k < m.planar[c].size(); ++k) {
                CHECK(m.planar[c][k] == Catch::Approx(first.planar[c][k]).margin(1e-9));
            }
            CHECK(m.grips[c] == first.grips[c]);
        }
    }
}

TEST_CASE("group success fraction concentrates around the long-run rate") {
    const WorldModel wm = init_world_model(small_wm_cfg(), 1234);
    const Policy policy = init_policy(small_pol_cfg(), 6);
    const std::vector<double> start = reference_start();
    const PolicyViews views = PolicyViews::resolve(policy);

    int group_succ = 0, group_n = 0;
    for (int g = 0; g < 25; ++g) {
        const RolloutGroup grp =
            collect_group(policy, wm, start, 8, 5000 + static_cast<std::uint64_t>(g));
        for (const auto& m : grp.members) {
            group_succ += m.ret;
            ++group_n;
        }
    }
    const double group_rate = static_cast<double>(group_succ) / group_n;

    int mc_succ = 0;
    const SeedTree mc_tree{424242};
    for (int i = 0; i < 200; ++i) {
        const SeedTree etree{derive_seed(mc_tree, "ep", i)};
        int chunk_idx = 0;
        ActionSource source = [&](const std::vector<double>& observed) {
            const std::size_t hd = static_cast<std::size_t>(policy.cfg.history_dim());
            const std::span<const double> hist(observed.data() + observed.size() - hd, hd);
            const ActionChunkDistribution d = policy_forward_with_views(policy, views, hist);
            return sample_actions(d, derive_seed(etree, "act", chunk_idx++)).actions;
        };
        const RolloutResult r =
            rollout(wm, start, source, wm.cfg.max_chunks, derive_seed(etree, "wm", 0));
        if (r.success) ++mc_succ;
    }
    const double mc_rate = mc_succ / 200.0;
    INFO("group rate " << group_rate << " vs long-run " << mc_rate);
    CHECK(std::abs(group_rate - mc_rate) <= 0.15);
    // the comparison only means something when returns actually vary
    CHECK(group_rate > 0.0);
    CHECK(group_rate < 1.0);
}

TEST_CASE("grpo_update invariants") {
    const WorldModel wm = init_world_model(small_wm_cfg(), 5);
    Policy policy = init_policy(small_pol_cfg(), 6);
    const std::vector<double> start = reference_start();
    RlConfig cfg;
    cfg.group_size = 4;
    cfg.lr = 1e-3;

    RolloutGroup group = collect_group(policy, wm, start, 4, 7);

    SECTION("all-zero advantages leave the policy bit-identical") {
        for (auto& m : group.members) m.advantage = 0.0;
        const ParamSet before = policy.params;
        AdamState opt;
        const GrpoDiagnostics d = grpo_update(policy, {group}, cfg, opt);
        CHECK(d.zero_grad_skip);
        CHECK(d.loss == 0.0);
        CHECK(bitwise_equal(policy.params, before));
    }

    SECTION("fresh ratios are exactly one") {
        for (std::size_t i = 0; i < group.members.size(); ++i) {
            group.members[i].advantage = (i % 2 == 0) ? 0.5 : -0.5;
        }
        AdamState opt;
        const GrpoDiagnostics d = grpo_update(policy, {group}, cfg, opt);
        CHECK(d.mean_ratio == 1.0);
        CHECK(d.clip_fraction == 0.0);
        CHECK(d.skipped_members == 0);
        CHECK_FALSE(d.zero_grad_skip);
    }

    SECTION("a positively weighted member gets more likely") {
        group.members[0].advantage = 1.0;
        for (std::size_t i = 1; i < group.members.size(); ++i) group.members[i].advantage = 0.0;
        const auto& m = group.members[0];
        double lp_before = 0.0;
        for (double lp : m.old_logprobs) lp_before += lp;

        AdamState opt;
        RlConfig tiny = cfg;
        tiny.lr = 1e-4;
        grpo_update(policy, {group}, tiny, opt);

        double lp_after = 0.0;
        for (std::size_t c = 0; c < m.old_logprobs.size(); ++c) {
            const ActionChunkDistribution d = policy_forward(policy, m.histories[c]);
            lp_after += detail::chunk_logprob(d, m.planar[c], m.grips[c]);
        }
        CHECK(lp_after > lp_before);
    }

    SECTION("a member with a non-finite ratio is skipped") {
        for (auto& m : group.members) m.advantage = 0.3;
        const int total_chunks = [&] {
            int n = 0;
            for (const auto& m : group.members) n += static_cast<int>(m.old_logprobs.size());
            return n;
        }();
        group.members[1].old_logprobs[0] = -1e6;  // exp overflows to inf
        AdamState opt;
        const GrpoDiagnostics d = grpo_update(policy, {group}, cfg, opt);
        CHECK(d.skipped_members == 1);
        CHECK(d.chunk_count ==
              total_chunks - static_cast<int>(group.members[1].old_logprobs.size()));
    }
}

TEST_CASE("rl_train bookkeeping and determinism") {
    // this wm init gives a mid-range success rate, and the amplified action
    // embedder makes outcomes depend on the drawn actions (as they do for a
    // trained model), so groups carry mixed returns and the update path runs
    WorldModel wm = init_world_model(small_wm_cfg(), 77);
    for (const char* n : {"embed.w0", "embed.w1"}) {
        for (double& x : wm.params.at(n).data) x *= 40.0;
    }
    const std::vector<std::vector<double>> starts = {reference_start()};
    RlConfig cfg;
    cfg.group_size = 8;
    cfg.groups_per_step = 2;
    cfg.total_steps = 3;
    cfg.lr = 1e-3;

    SECTION("zero steps is a no-op") {
        Policy policy = init_policy(small_pol_cfg(), 6);
        const ParamSet before = policy.params;
        RlConfig z = cfg;
        z.total_steps = 0;
        const auto curve = rl_train(policy, wm, starts, z, 1);
        CHECK(curve.empty());
        CHECK(bitwise_equal(policy.params, before));
    }

    SECTION("curve length and seed determinism") {
        Policy p1 = init_policy(small_pol_cfg(), 6);
        Policy p2 = init_policy(small_pol_cfg(), 6);
        const auto c1 = rl_train(p1, wm, starts, cfg, 11);
        const auto c2 = rl_train(p2, wm, starts, cfg, 11);
        REQUIRE(c1.size() == 3);
        CHECK(bitwise_equal(p1.params, p2.params));
        // the run must exercise real updates or the determinism check is vacuous
        CHECK(std::any_of(c1.begin(), c1.end(), [](const RlStepStats& r) { return r.updated; }));
        for (std::size_t i = 0; i < c1.size(); ++i) {
            CHECK(c1[i].step == static_cast<int>(i));
            CHECK(c1[i].wm_success_rate == c2[i].wm_success_rate);
            CHECK(c1[i].loss == c2[i].loss);
            CHECK(c1[i].mean_ratio == c2[i].mean_ratio);
        }

        Policy p3 = init_policy(small_pol_cfg(), 6);
        const auto c3 = rl_train(p3, wm, starts, cfg, 12);
        CHECK_FALSE(bitwise_equal(p1.params, p3.params));
    }
}

TEST_CASE("rl curve file format") {
    std::vector<RlStepStats> curve(2);
    curve[0] = {0, 0.25, 1.0, 0.0, -0.125};
    curve[1] = {1, 0.5, 1.01, 0.125, -0.25};
    const auto dir = temp_dir("rlcurve");
    const auto path = dir / "rl_curve.csv";
    write_rl_curve(path, curve);

    std::ifstream f(path);
    std::string line;
    REQUIRE(std::getline(f, line));
    CHECK(line == "step,wm_success_rate,mean_ratio,clip_fraction,loss");
    int rows = 0;
    while (std::getline(f, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 2);
    std::filesystem::remove_all(dir);
}
