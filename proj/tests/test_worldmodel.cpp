#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "loopworld/worldmodel.hpp"
#include "test_support.hpp"

using namespace loopworld;
using testsupport::bitwise_equal;
using testsupport::temp_dir;

namespace {

// Small but real config used by the training tests.
WorldModelConfig small_config() {
    WorldModelConfig c;
    c.history_len = 1;
    c.chunk_len = 2;
    c.denoiser_hidden = {64};
    c.embedder_hidden = {8};
    c.action_embed_dim = 4;
    c.reward_hidden = {8};
    c.euler_steps = 4;
    return c;
}

// Tiny config for exhaustive finite-difference checking.
WorldModelConfig tiny_config() {
    WorldModelConfig c;
    c.history_len = 1;
    c.chunk_len = 1;
    c.denoiser_hidden = {4};
    c.embedder_hidden = {2};
    c.action_embed_dim = 2;
    c.reward_hidden = {2};
    c.euler_steps = 2;
    return c;
}

std::vector<TrainWindow> reference_windows(const WorldModelConfig& cfg, std::uint64_t seed) {
    const TaskSpec task = reference_task();
    const SansDataset ds = generate_sans(task, 1, 0, seed);
    return extract_windows(ds.records[0], cfg.history_len, cfg.chunk_len);
}

void zero_params_with_prefix(ParamSet& ps, const std::string& prefix) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& [name, tensor] = ps.item(i);
        if (name.rfind(prefix, 0) == 0) std::fill(tensor.data.begin(), tensor.data.end(), 0.0);
    }
}

// Loss value without running backward, for finite differencing.
double eval_batch_loss(const WorldModel& wm, std::span<const TrainWindow* const> batch,
                       std::span<const FlowDraw> draws, const WmBatchWorkspace& ws) {
    Tape t;
    Var loss = wm_batch_loss(t, wm, batch, draws, ws, nullptr);
    return t.val(loss)[0];
}

}  // namespace

TEST_CASE("worldmodel config validation and json round trip") {
    WorldModelConfig c;
    c.validate();

    nlohmann::json j = c;
    const auto back = j.get<WorldModelConfig>();
    CHECK(back.history_len == c.history_len);
    CHECK(back.chunk_len == c.chunk_len);
    CHECK(back.denoiser_hidden == c.denoiser_hidden);
    CHECK(back.euler_steps == c.euler_steps);
    CHECK(back.lambda0 == c.lambda0);
    CHECK(back.reward_threshold == c.reward_threshold);
    CHECK(back.enable_reward_head == c.enable_reward_head);
    CHECK(back.max_chunks == c.max_chunks);

    WorldModelConfig bad = c;
    bad.history_len = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = c;
    bad.reward_threshold = 1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = c;
    bad.euler_steps = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = c;
    bad.frame_dim = 64;
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("init_world_model layout and determinism") {
    const WorldModelConfig cfg = small_config();
    const WorldModel a = init_world_model(cfg, 7);
    const WorldModel b = init_world_model(cfg, 7);
    const WorldModel c = init_world_model(cfg, 8);

    CHECK(a.params.has("denoiser.w0"));
    CHECK(a.params.has("embed.w0"));
    CHECK(a.params.has("reward.w0"));
    CHECK(a.params.at("denoiser.w0").rows() == 64);
    CHECK(a.params.at("denoiser.w0").cols() ==
          static_cast<std::size_t>(cfg.denoiser_input_dim()));
    CHECK(a.params.all_finite_values());

    CHECK(bitwise_equal(a.params, b.params));
    CHECK_FALSE(bitwise_equal(a.params, c.params));
}

TEST_CASE("flow time embedding shape and distinctness") {
    const auto e0 = flow_time_embedding(0.0, 8);
    REQUIRE(e0.size() == 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e0[static_cast<std::size_t>(2 * i)] == 0.0);       // sin(0)
        CHECK(e0[static_cast<std::size_t>(2 * i + 1)] == 1.0);   // cos(0)
    }
    const auto e1 = flow_time_embedding(0.37, 8);
    CHECK(e1 != e0);
    for (double x : e1) CHECK((x >= -1.0 && x <= 1.0));
    // deterministic
    CHECK(flow_time_embedding(0.37, 8) == e1);
}

TEST_CASE("embed_actions matches a straight-line per-action oracle") {
    const WorldModelConfig cfg = small_config();
    const WorldModel wm = init_world_model(cfg, 21);
    std::vector<ActionPose> actions = {ActionPose(0.2, 0.8, 0), ActionPose(0.6, 0.3, 1)};

    const auto out = embed_actions(wm, actions);
    REQUIRE(out.size() == static_cast<std::size_t>(cfg.cond_dim()));

    // hand-rolled forward of the {3,8,4} tanh/identity embedder
    const auto& w0 = wm.params.at("embed.w0");
    const auto& b0 = wm.params.at("embed.b0");
    const auto& w1 = wm.params.at("embed.w1");
    const auto& b1 = wm.params.at("embed.b1");
    std::vector<double> expected;
    for (const auto& a : actions) {
        const std::vector<double> in = {a.x, a.y, static_cast<double>(a.grip)};
        std::vector<double> h(8), o(4);
        for (std::size_t j = 0; j < 8; ++j) {
            double acc = b0.data[j];
            for (std::size_t i = 0; i < 3; ++i) acc += w0.at(j, i) * in[i];
            h[j] = std::tanh(acc);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = b1.data[j];
            for (std::size_t i = 0; i < 8; ++i) acc += w1.at(j, i) * h[i];
            o[j] = acc;
        }
        expected.insert(expected.end(), o.begin(), o.end());
    }
    REQUIRE(out.size() == expected.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] == Catch::Approx(expected[i]).margin(1e-12));
    }
}

TEST_CASE("embed_actions position sensitivity and edge cases") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 22);

    std::vector<ActionPose> actions = {ActionPose(0.2, 0.8, 0), ActionPose(0.6, 0.3, 1)};
    std::vector<ActionPose> swapped = {actions[1], actions[0]};
    CHECK(embed_actions(wm, actions) != embed_actions(wm, swapped));

    // wrong count
    std::vector<ActionPose> one = {actions[0]};
    CHECK_THROWS_AS(embed_actions(wm, one), ContractError);

    // zeroed embedder gives an exactly zero conditioning vector
    zero_params_with_prefix(wm.params, "embed.");
    for (double x : embed_actions(wm, actions)) CHECK(x == 0.0);
}

TEST_CASE("extract_windows indexing") {
    const TaskSpec task = reference_task();
    const SansDataset ds = generate_sans(task, 1, 0, 99);
    const TrajectoryRecord& rec = ds.records[0];
    const int h = 2, T = 8;
    const int L = static_cast<int>(rec.actions.size());
    REQUIRE(L == task.horizon);

    const auto windows = extract_windows(rec, h, T);
    CHECK(windows.size() == static_cast<std::size_t>(L - h - T + 2 + 1));  // 33 for L=40

    // start window duplicates the reset frame as history
    const TrainWindow& start = windows[0];
    REQUIRE(start.history.size() == static_cast<std::size_t>(h * kFramePixels));
    for (int k = 0; k < h; ++k) {
        for (int p = 0; p < kFramePixels; ++p) {
            REQUIRE(start.history[static_cast<std::size_t>(k * kFramePixels + p)] ==
                    rec.frames[0].px[static_cast<std::size_t>(p)]);
        }
    }
    REQUIRE(start.action_poses.size() == static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        CHECK(start.action_poses[static_cast<std::size_t>(t)] ==
              rec.actions[static_cast<std::size_t>(t)]);
        CHECK(start.rewards[static_cast<std::size_t>(t)] ==
              static_cast<double>(rec.rewards[static_cast<std::size_t>(t)]));
        for (int p = 0; p < kFramePixels; ++p) {
            REQUIRE(start.target[static_cast<std::size_t>(t * kFramePixels + p)] ==
                    rec.frames[static_cast<std::size_t>(t + 1)].px[static_cast<std::size_t>(p)]);
        }
    }

    // first regular window: history f0,f1; actions a1..; targets f2..
    const TrainWindow& w0 = windows[1];
    for (int p = 0; p < kFramePixels; ++p) {
        REQUIRE(w0.history[static_cast<std::size_t>(p)] ==
                rec.frames[0].px[static_cast<std::size_t>(p)]);
        REQUIRE(w0.history[static_cast<std::size_t>(kFramePixels + p)] ==
                rec.frames[1].px[static_cast<std::size_t>(p)]);
    }
    CHECK(w0.action_poses[0] == rec.actions[1]);
    CHECK(w0.rewards[0] == static_cast<double>(rec.rewards[1]));

    // last window ends exactly at the final frame
    const TrainWindow& last = windows.back();
    const int j_last = L - h - T + 1;
    CHECK(last.action_poses[0] == rec.actions[static_cast<std::size_t>(j_last + h - 1)]);
    for (int p = 0; p < kFramePixels; ++p) {
        REQUIRE(last.target[static_cast<std::size_t>((T - 1) * kFramePixels + p)] ==
                rec.frames[static_cast<std::size_t>(L)].px[static_cast<std::size_t>(p)]);
    }

    // start window can be excluded
    CHECK(extract_windows(rec, h, T, false).size() == windows.size() - 1);

    // record shorter than one window
    TrajectoryRecord shortrec = rec;
    shortrec.frames.resize(6);
    shortrec.actions.resize(5);
    shortrec.rewards.resize(5);
    shortrec.outcome = Outcome::failure;
    CHECK_THROWS_AS(extract_windows(shortrec, 2, 8), ContractError);
}

TEST_CASE("train_step gradient matches central differences on a tiny model") {
    const WorldModelConfig cfg = tiny_config();
    WorldModel wm = init_world_model(cfg, 5);
    const auto windows = reference_windows(cfg, 5);
    const std::vector<const TrainWindow*> batch = {&windows[3], &windows[10]};

    std::vector<FlowDraw> draws(2);
    Rng rng(derive_seed(SeedTree{5}, "fd-noise", 0));
    draws[0].tau = 0.6;
    draws[1].tau = 0.0;  // also covers the zero-weight path
    for (auto& d : draws) {
        d.noise.resize(static_cast<std::size_t>(cfg.chunk_dim()));
        for (double& x : d.noise) x = rng.normal();
    }
    const WmBatchWorkspace ws = wm_prepare_batch(cfg, batch, draws);

    ParamSet grads = grad(
        [&](Tape& t) { return wm_batch_loss(t, wm, batch, draws, ws, nullptr); }, wm.params);

    // pass if relative error <= 1e-4 or absolute error <= 1e-7 (tiny
    // gradients drown in finite-difference cancellation noise)
    const double h = 1e-5;
    std::size_t bad = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < wm.params.size(); ++i) {
        auto& [name, tensor] = wm.params.item(i);
        const auto& gt = grads.at(name);
        for (std::size_t k = 0; k < tensor.data.size(); ++k) {
            const double saved = tensor.data[k];
            tensor.data[k] = saved + h;
            const double up = eval_batch_loss(wm, batch, draws, ws);
            tensor.data[k] = saved - h;
            const double dn = eval_batch_loss(wm, batch, draws, ws);
            tensor.data[k] = saved;
            const double fd = (up - dn) / (2.0 * h);
            const double g = gt.data[k];
            const double abs_err = std::abs(fd - g);
            const double rel = abs_err / std::max(std::abs(fd), std::abs(g));
            if (abs_err > 1e-7 && rel > 1e-4) {
                ++bad;
                worst = std::max(worst, rel);
            }
        }
    }
    INFO("coordinates failing both tolerances: " << bad << " worst rel " << worst);
    CHECK(bad == 0);
}

TEST_CASE("train_step overfits a single repeated sample") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 11);
    AdamState opt = AdamState::init(wm.params);
    AdamConfig adam;
    adam.lr = 1e-2;

    const auto windows = reference_windows(cfg, 11);
    const std::vector<const TrainWindow*> batch(4, &windows[4]);
    Rng rng(derive_seed(SeedTree{11}, "wm-train", 0));

    double first = 0.0, last = 0.0;
    for (int step = 1; step <= 500; ++step) {
        const WmStepStats s = wm_train_step(wm, opt, batch, rng, adam);
        if (step == 1) first = s.l_flow;
        if (step == 500) last = s.l_flow;
        REQUIRE(std::isfinite(s.l_flow));
    }
    INFO("l_flow step1=" << first << " step500=" << last);
    CHECK(first >= 10.0 * last);
    CHECK(wm.params.all_finite_values());
}

TEST_CASE("zero flow time removes the reward loss from the gradient") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 13);
    const auto windows = reference_windows(cfg, 13);
    const std::vector<const TrainWindow*> batch = {&windows[2], &windows[6]};

    std::vector<FlowDraw> draws(2);
    Rng rng(derive_seed(SeedTree{13}, "zero-tau", 0));
    for (auto& d : draws) {
        d.tau = 0.0;
        d.noise.resize(static_cast<std::size_t>(cfg.chunk_dim()));
        for (double& x : d.noise) x = rng.normal();
    }

    SECTION("tau=0 batch leaves the reward head bit-identical") {
        WorldModel trained = wm;
        AdamState opt = AdamState::init(trained.params);
        wm_apply_train_batch(trained, opt, batch, draws, AdamConfig{});
        for (std::size_t i = 0; i < wm.params.size(); ++i) {
            const auto& [name, before] = wm.params.item(i);
            const auto& after = trained.params.at(name);
            if (name.rfind("reward.", 0) == 0) {
                REQUIRE(before.data == after.data);  // exactly zero gradient
            }
        }
        // the flow loss still updates the denoiser
        CHECK_FALSE(wm.params.at("denoiser.w0").data == trained.params.at("denoiser.w0").data);
    }

    SECTION("tau>0 batch does move the reward head") {
        for (auto& d : draws) d.tau = 0.8;
        WorldModel trained = wm;
        AdamState opt = AdamState::init(trained.params);
        wm_apply_train_batch(trained, opt, batch, draws, AdamConfig{});
        CHECK_FALSE(wm.params.at("reward.w1").data == trained.params.at("reward.w1").data);
    }
}

TEST_CASE("disabled reward head stays frozen across 100 steps") {
    WorldModelConfig cfg = small_config();
    cfg.enable_reward_head = false;
    WorldModel wm = init_world_model(cfg, 17);
    const ParamSet before = wm.params;

    AdamState opt = AdamState::init(wm.params);
    const auto windows = reference_windows(cfg, 17);
    Rng rng(derive_seed(SeedTree{17}, "frozen", 0));
    for (int step = 0; step < 100; ++step) {
        const std::vector<const TrainWindow*> batch = {
            &windows[rng.next_u64() % windows.size()]};
        const WmStepStats s = wm_train_step(wm, opt, batch, rng, AdamConfig{});
        REQUIRE(s.l_reward == 0.0);
    }
    // reward tensors are bit-identical, denoiser has moved
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& [name, tensor] = before.item(i);
        if (name.rfind("reward.", 0) == 0) REQUIRE(tensor.data == wm.params.at(name).data);
    }
    CHECK_FALSE(before.at("denoiser.w0").data == wm.params.at("denoiser.w0").data);
}

TEST_CASE("joint training separates reward classes on a synthetic cue") {
    WorldModelConfig cfg = small_config();
    cfg.lambda0 = 5.0;
    WorldModel wm = init_world_model(cfg, 19);
    AdamState opt = AdamState::init(wm.params);
    AdamConfig adam;
    adam.lr = 3e-3;

    // two windows whose target frames differ only in a bright corner block
    auto make_window = [&](double level, double reward) {
        TrainWindow w;
        w.history.assign(static_cast<std::size_t>(cfg.history_dim()), 0.2);
        for (int t = 0; t < cfg.chunk_len; ++t) {
            const auto enc = encode_action(ActionPose(0.5, 0.5, 0));
            w.actions.insert(w.actions.end(), enc.begin(), enc.end());
            w.action_poses.push_back(ActionPose(0.5, 0.5, 0));
            std::vector<double> frame(static_cast<std::size_t>(cfg.frame_dim), 0.1);
            for (int p = 0; p < 64; ++p) frame[static_cast<std::size_t>(p)] = level;
            w.target.insert(w.target.end(), frame.begin(), frame.end());
            w.rewards.push_back(reward);
        }
        return w;
    };
    const TrainWindow bright = make_window(0.9, 1.0);
    const TrainWindow dark = make_window(0.1, 0.0);
    const std::vector<const TrainWindow*> batch = {&bright, &dark};

    Rng rng(derive_seed(SeedTree{19}, "cue", 0));
    for (int step = 0; step < 400; ++step) {
        std::vector<FlowDraw> draws(2);
        for (auto& d : draws) {
            d.tau = 0.95;  // reward loss nearly fully weighted
            d.noise.resize(static_cast<std::size_t>(cfg.chunk_dim()));
            for (double& x : d.noise) x = rng.normal();
        }
        wm_apply_train_batch(wm, opt, batch, draws, adam);
    }

    const std::span<const double> bright_frame(bright.target.data(),
                                               static_cast<std::size_t>(cfg.frame_dim));
    const std::span<const double> dark_frame(dark.target.data(),
                                             static_cast<std::size_t>(cfg.frame_dim));
    const double rb = predict_reward(wm, bright_frame);
    const double rd = predict_reward(wm, dark_frame);
    INFO("bright " << rb << " dark " << rd);
    CHECK(rb > rd + 0.3);
}

TEST_CASE("predict_reward closed forms") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 23);
    std::vector<double> frame(static_cast<std::size_t>(cfg.frame_dim), 0.4);

    // zeroed head gives sigmoid(0) exactly
    WorldModel zeroed = wm;
    zero_params_with_prefix(zeroed.params, "reward.");
    CHECK(predict_reward(zeroed, frame) == 0.5);

    // strictly monotone in the output bias
    const double base = predict_reward(wm, frame);
    CHECK((base > 0.0 && base < 1.0));
    WorldModel bumped = wm;
    bumped.params.at("reward.b1").data[0] += 0.5;
    CHECK(predict_reward(bumped, frame) > base);
}

TEST_CASE("classify_success boundary rules") {
    CHECK(classify_success(std::vector<double>{0.1, 0.95, 0.2}, 0.9));
    CHECK_FALSE(classify_success(std::vector<double>{0.5, 0.5, 0.5}, 0.9));
    CHECK_FALSE(classify_success(std::vector<double>{0.2, 0.9}, 0.9));  // strict
    CHECK_THROWS_AS(classify_success(std::vector<double>{}, 0.9), ContractError);
}

TEST_CASE("sample_chunk determinism and purity") {
    const WorldModelConfig cfg = small_config();
    const WorldModel wm = init_world_model(cfg, 29);
    const ParamSet snapshot = wm.params;

    std::vector<double> history(static_cast<std::size_t>(cfg.history_dim()), 0.3);
    const std::vector<ActionPose> actions(static_cast<std::size_t>(cfg.chunk_len),
                                          ActionPose(0.4, 0.6, 0));

    const SampledChunk a = sample_chunk(wm, history, actions, 1234);
    const SampledChunk b = sample_chunk(wm, history, actions, 1234);
    const SampledChunk c = sample_chunk(wm, history, actions, 1235);
    CHECK(a.frames == b.frames);
    CHECK(a.rewards == b.rewards);
    CHECK_FALSE(a.frames == c.frames);
    CHECK(bitwise_equal(wm.params, snapshot));  // pure

    REQUIRE(a.frames.size() == static_cast<std::size_t>(cfg.chunk_dim()));
    REQUIRE(a.rewards.size() == static_cast<std::size_t>(cfg.chunk_len));
    for (double x : a.frames) CHECK((x >= 0.0 && x <= 1.0));
    for (double r : a.rewards) CHECK((r > 0.0 && r < 1.0));

    // wrong history length
    std::vector<double> shorth(static_cast<std::size_t>(cfg.history_dim() - 1), 0.0);
    CHECK_THROWS_AS(sample_chunk(wm, shorth, actions, 1), ContractError);
}

TEST_CASE("sample_chunk K=1 equals one explicit Euler step") {
    WorldModelConfig cfg = small_config();
    cfg.euler_steps = 1;
    WorldModel wm = init_world_model(cfg, 31);
    // nonzero skip gain so the diagonal path is exercised too
    for (double& x : wm.params.at(skip_param_name(0)).data) x = 0.15;
    for (double& x : wm.params.at(skip_param_name(1)).data) x = -0.4;  // killed by tau=0

    std::vector<double> history(static_cast<std::size_t>(cfg.history_dim()), 0.25);
    const std::vector<ActionPose> actions = {ActionPose(0.1, 0.9, 1), ActionPose(0.7, 0.2, 0)};
    const std::uint64_t seed = 777;

    const SampledChunk got = sample_chunk(wm, history, actions, seed);

    // independent assembly: noise, conditioning at tau=0, one full step, clamp
    Rng rng(seed);
    std::vector<double> z(static_cast<std::size_t>(cfg.chunk_dim()));
    for (double& x : z) x = rng.normal();
    const auto emb = embed_actions(wm, actions);
    const auto te = flow_time_embedding(0.0, cfg.cond_dim());
    std::vector<double> den_in;
    den_in.insert(den_in.end(), z.begin(), z.end());
    for (std::size_t i = 0; i < emb.size(); ++i) den_in.push_back(emb[i] + te[i]);
    den_in.insert(den_in.end(), history.begin(), history.end());
    const auto v = mlp_forward(wm.denoiser_spec, wm.params, kDenoiserPrefix, den_in);
    REQUIRE(v.size() == z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double vi = v[i] + 0.15 * z[i];  // tau^0 skip only at tau=0
        const double expect = std::min(1.0, std::max(0.0, z[i] + vi));
        REQUIRE(got.frames[i] == expect);
    }
}

TEST_CASE("rollout runs to max_chunks without a success signal") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 37);
    zero_params_with_prefix(wm.params, "reward.");  // r_hat == 0.5 everywhere

    std::vector<double> init(static_cast<std::size_t>(cfg.history_dim()), 0.3);
    std::vector<std::size_t> observed_sizes;
    const ActionSource source = [&](const std::vector<double>& observed) {
        observed_sizes.push_back(observed.size());
        return std::vector<ActionPose>(static_cast<std::size_t>(cfg.chunk_len),
                                       ActionPose(0.5, 0.1, 0));
    };

    const RolloutResult r = rollout(wm, init, source, 3, 4242);
    CHECK(r.chunks_executed == 3);
    CHECK_FALSE(r.success);
    CHECK(r.success == classify_success(r.reward_trace, cfg.reward_threshold));
    CHECK(r.frames.size() == static_cast<std::size_t>(3 * cfg.chunk_dim()));
    CHECK(r.reward_trace.size() == static_cast<std::size_t>(3 * cfg.chunk_len));
    for (double rv : r.reward_trace) CHECK(rv == 0.5);
    for (double x : r.frames) CHECK((x >= 0.0 && x <= 1.0));

    // the action source observes a growing frame sequence
    REQUIRE(observed_sizes.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(observed_sizes[c] ==
              static_cast<std::size_t>(cfg.history_dim()) + c * static_cast<std::size_t>(cfg.chunk_dim()));
    }

    // determinism
    const RolloutResult again = rollout(wm, init, source, 3, 4242);
    CHECK(again.frames == r.frames);
    CHECK(again.reward_trace == r.reward_trace);
}

TEST_CASE("rollout stops at the first successful chunk boundary") {
    const WorldModelConfig cfg = small_config();
    WorldModel wm = init_world_model(cfg, 41);
    wm.params.at("reward.b1").data[0] = 25.0;  // saturates the head near 1

    std::vector<double> init(static_cast<std::size_t>(cfg.history_dim()), 0.3);
    const ActionSource source = [&](const std::vector<double>&) {
        return std::vector<ActionPose>(static_cast<std::size_t>(cfg.chunk_len),
                                       ActionPose(0.5, 0.1, 0));
    };
    const RolloutResult r = rollout(wm, init, source, 5, 17);
    CHECK(r.chunks_executed == 1);
    CHECK(r.success);
    CHECK(r.reward_trace.size() == static_cast<std::size_t>(cfg.chunk_len));
}

TEST_CASE("world model persistence round trip and damage handling") {
    const WorldModelConfig cfg = small_config();
    const WorldModel wm = init_world_model(cfg, 43);
    const auto dir = temp_dir("wm");

    save_world_model(wm, dir / "model");
    const WorldModel back = load_world_model(dir / "model");
    CHECK(bitwise_equal(back.params, wm.params));
    CHECK(back.cfg.chunk_len == cfg.chunk_len);
    CHECK(back.cfg.history_len == cfg.history_len);
    CHECK(back.cfg.lambda0 == cfg.lambda0);

    SECTION("sidecar that disagrees with the checkpoint") {
        nlohmann::json j = cfg;
        j["chunk_len"] = cfg.chunk_len + 1;
        std::ofstream f(dir / "model" / "worldmodel.json", std::ios::trunc);
        f << j.dump(2);
        f.close();
        try {
            load_world_model(dir / "model");
            FAIL("expected PersistenceError");
        } catch (const PersistenceError& e) {
            CHECK(e.kind == PersistenceError::Kind::invariant_violation);
        }
    }

    SECTION("unparsable sidecar") {
        std::ofstream f(dir / "model" / "worldmodel.json", std::ios::trunc);
        f << "{not json";
        f.close();
        try {
            load_world_model(dir / "model");
            FAIL("expected PersistenceError");
        } catch (const PersistenceError& e) {
            CHECK(e.kind == PersistenceError::Kind::corrupt);
        }
    }

    SECTION("missing directory") {
        CHECK_THROWS_AS(load_world_model(dir / "nope"), IoError);
    }

    std::filesystem::remove_all(dir);
}
