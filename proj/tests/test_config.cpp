#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>

#include "loopworld/config.hpp"
#include "test_support.hpp"

using namespace loopworld;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("an empty config object yields the documented defaults") {
    const RunConfig parsed = config_from_flat_json(nlohmann::json::object());
    const RunConfig defaults;
    CHECK(parsed == defaults);
    CHECK(parsed.sans.n_success == 50);
    CHECK(parsed.sans.n_near == 50);
    CHECK(parsed.wm.chunk_len == 8);
    CHECK(parsed.rl.group_size == 8);
    CHECK(parsed.master_seed == 2026);
    CHECK(parsed.out_dir == "out");
}

TEST_CASE("unknown keys are rejected by name") {
    const nlohmann::json j = {
        {"wm.chunk_len", 8}, {"wn.chunk_len", 8}, {"bogus", 1}, {"sft.velocity", 3}};
    try {
        (void)config_from_flat_json(j);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        CHECK_THAT(msg, ContainsSubstring("wn.chunk_len"));
        CHECK_THAT(msg, ContainsSubstring("bogus"));
        CHECK_THAT(msg, ContainsSubstring("sft.velocity"));
        CHECK_THAT(msg, !ContainsSubstring("wm.chunk_len"));
    }
}

TEST_CASE("invalid values identify the flat key region") {
    try {
        (void)config_from_flat_json(nlohmann::json{{"wm.chunk_len", 0}});
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        CHECK_THAT(msg, ContainsSubstring("wm."));
        CHECK_THAT(msg, ContainsSubstring("chunk_len"));
    }
    // wrong JSON type is reported under the same scheme
    try {
        (void)config_from_flat_json(nlohmann::json{{"rl.clip_epsilon", "wide"}});
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK_THAT(std::string(e.what()), ContainsSubstring("rl."));
    }
}

TEST_CASE("cross-config coupling is enforced") {
    CHECK_THROWS_AS(config_from_flat_json(nlohmann::json{{"policy.chunk_len", 4}}),
                    ContractError);
    CHECK_THROWS_AS(config_from_flat_json(nlohmann::json{{"policy.history_len", 3}}),
                    ContractError);
    // consistent override of both passes
    const RunConfig c = config_from_flat_json(
        nlohmann::json{{"policy.chunk_len", 4}, {"wm.chunk_len", 4}});
    CHECK(c.wm.chunk_len == 4);
    CHECK(c.policy.chunk_len == 4);
}

TEST_CASE("config roundtrip is loss-free") {
    RunConfig c;
    c.task.goal_radius = 0.13;
    c.wm.denoiser_hidden = {48, 24};
    c.wm.lambda0 = 0.07;
    c.policy.trunk_hidden = {40};
    c.rl.lr = 0.00123456789012345678;
    c.sans.n_success = 7;
    c.sans.holdout_fraction = 0.31;
    c.pretrain.steps = 11;
    c.pretrain_near_per_variant = 5;
    c.wm_train.lr = 2.5e-3;
    c.sft.steps = 123;
    c.deploy_episodes = 9;
    c.eval_records = 6;
    c.eval_episodes = 17;
    c.out_dir = "elsewhere";
    c.master_seed = 0xABCDEF0123456789ull;

    const RunConfig back = config_from_flat_json(config_to_flat_json(c));
    CHECK(back == c);

    const auto dir = testsupport::temp_dir("config");
    write_config(c, dir / "run.json");
    const RunConfig from_file = parse_config(dir / "run.json");
    CHECK(from_file == c);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config file errors are distinct") {
    const auto dir = testsupport::temp_dir("config_err");
    CHECK_THROWS_AS(parse_config(dir / "missing.json"), IoError);
    {
        std::ofstream f(dir / "bad.json");
        f << "{ not json";
    }
    CHECK_THROWS_AS(parse_config(dir / "bad.json"), ContractError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("LOOPWORLD_OUT fills the output-dir default only") {
    const auto dir = testsupport::temp_dir("config_env");
    {
        std::ofstream f(dir / "empty.json");
        f << "{}";
    }
    {
        std::ofstream f(dir / "explicit.json");
        f << R"({"out_dir": "chosen"})";
    }
    ::setenv("LOOPWORLD_OUT", "/tmp/loopworld_env_out", 1);
    CHECK(parse_config(dir / "empty.json").out_dir == "/tmp/loopworld_env_out");
    CHECK(parse_config(dir / "explicit.json").out_dir == "chosen");
    ::unsetenv("LOOPWORLD_OUT");
    CHECK(parse_config(dir / "empty.json").out_dir == "out");
    std::filesystem::remove_all(dir);
}

TEST_CASE("seed derivation under the default master seed stays frozen") {
    const SeedTree t{RunConfig{}.master_seed};
    CHECK(derive_seed(t, "rollout", 0) == 0x3429C27CBA97B4A9ull);
    CHECK(derive_seed(t, "rollout", 1) == 0x4F0B5B40C3B4197Eull);
    CHECK(derive_seed(t, "rl", 0) == 0x6414FFC7DC9557A4ull);
    CHECK(derive_seed(t, "sans", 0) == 0x20749EBA7D3AF8A3ull);
    CHECK(derive_seed(t, "rollout", 0) != derive_seed(t, "rollout", 1));
    CHECK(derive_seed(t, "rl", 0) != derive_seed(t, "sans", 0));
}
