#pragma once

// Success-and-near-success trajectory store. Records are full-horizon
// episodes with per-step binary rewards; the dataset persists as a JSON
// manifest plus a packed binary record file and roundtrips bit-exactly.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "loopworld/common.hpp"
#include "loopworld/env.hpp"
#include "loopworld/rng.hpp"

namespace loopworld {

enum class Outcome { success, failure };
enum class Provenance { expert, perturbed_expert, policy_rollout };

inline const char* outcome_name(Outcome o) {
    return o == Outcome::success ? "success" : "failure";
}

inline Outcome parse_outcome(std::string_view s) {
    if (s == "success") return Outcome::success;
    if (s == "failure") return Outcome::failure;
    throw PersistenceError(PersistenceError::Kind::corrupt,
                           "unknown outcome '" + std::string(s) + "'");
}

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::expert: return "expert";
        case Provenance::perturbed_expert: return "perturbed_expert";
        case Provenance::policy_rollout: return "policy_rollout";
    }
    return "expert";
}

inline Provenance parse_provenance(std::string_view s) {
    if (s == "expert") return Provenance::expert;
    if (s == "perturbed_expert") return Provenance::perturbed_expert;
    if (s == "policy_rollout") return Provenance::policy_rollout;
    throw PersistenceError(PersistenceError::Kind::corrupt,
                           "unknown provenance '" + std::string(s) + "'");
}

struct TrajectoryRecord {
    std::string task_id;
    std::vector<Frame> frames;       // length L+1, frames[0] is the reset frame
    std::vector<ActionPose> actions; // length L
    std::vector<int> rewards;        // length L, each 0 or 1
    Outcome outcome = Outcome::failure;
    Provenance provenance = Provenance::expert;
    std::uint64_t seed = 0;

    int max_reward() const {
        int m = 0;
        for (int r : rewards) m = std::max(m, r);
        return m;
    }

    void check_invariants() const {
        require(!task_id.empty(), "TrajectoryRecord: empty task_id");
        require(!actions.empty(), "TrajectoryRecord: empty trajectory");
        require(frames.size() == actions.size() + 1,
                "TrajectoryRecord: frames must be one longer than actions");
        require(rewards.size() == actions.size(),
                "TrajectoryRecord: rewards/actions length mismatch");
        for (int r : rewards) require(r == 0 || r == 1, "TrajectoryRecord: non-binary reward");
        const bool succeeded = max_reward() == 1;
        require(succeeded == (outcome == Outcome::success),
                "TrajectoryRecord: outcome label disagrees with reward trace");
        for (const Frame& f : frames) check_frame_invariants(f);
    }

    friend bool operator==(const TrajectoryRecord& a, const TrajectoryRecord& b) {
        return a.task_id == b.task_id && a.frames == b.frames && a.actions == b.actions &&
               a.rewards == b.rewards && a.outcome == b.outcome &&
               a.provenance == b.provenance && a.seed == b.seed;
    }
};

using ManifestKey = std::tuple<std::string, Outcome, Provenance>;

struct SansDataset {
    std::vector<TrajectoryRecord> records;
    int iteration_index = 0;
    bool stratification_warning = false;

    std::map<ManifestKey, int> manifest_counts() const {
        std::map<ManifestKey, int> counts;
        for (const auto& r : records) ++counts[{r.task_id, r.outcome, r.provenance}];
        return counts;
    }

    int count_outcome(Outcome o) const {
        int n = 0;
        for (const auto& r : records) n += r.outcome == o ? 1 : 0;
        return n;
    }

    void check_invariants() const {
        for (const auto& r : records) r.check_invariants();
    }

    friend bool operator==(const SansDataset& a, const SansDataset& b) {
        return a.records == b.records && a.iteration_index == b.iteration_index &&
               a.stratification_warning == b.stratification_warning;
    }
};

// ---------------------------------------------------------------------------
// episode rollout against the ground-truth environment

using Controller = std::function<ActionPose(const EnvState&)>;

// Runs a full-horizon episode and packages it with the outcome computed from
// the reward trace.
inline TrajectoryRecord run_episode(const TaskSpec& task, const Controller& ctrl,
                                    std::uint64_t reset_seed, Provenance provenance) {
    TrajectoryRecord rec;
    rec.task_id = task.task_id;
    rec.provenance = provenance;
    rec.seed = reset_seed;
    EnvState state = reset(task, reset_seed);
    rec.frames.push_back(render(state, task));
    for (int t = 0; t < task.horizon; ++t) {
        const ActionPose a = ctrl(state);
        StepResult sr = step(state, a, task);
        state = sr.state;
        rec.frames.push_back(render(state, task));
        rec.actions.push_back(a);
        rec.rewards.push_back(sr.reward);
    }
    rec.outcome = rec.max_reward() == 1 ? Outcome::success : Outcome::failure;
    return rec;
}

// Expert episodes plus perturbed near-success episodes, in sub-seed order.
// A failing expert episode is resampled with the next sub-seed; ten failures
// in a row for one slot is a generation error.
inline SansDataset generate_sans(const TaskSpec& task, int n_success, int n_near,
                                 std::uint64_t seed) {
    require(n_success >= 0 && n_near >= 0 && n_success + n_near >= 1,
            "generate_sans: need at least one episode");
    task.validate();
    const SeedTree tree{seed};
    SansDataset ds;
    for (int i = 0; i < n_success; ++i) {
        bool done = false;
        for (int attempt = 0; attempt <= 10 && !done; ++attempt) {
            const std::uint64_t ep_seed =
                derive_seed(tree, "expert", static_cast<std::uint64_t>(i) * 16 + attempt);
            TrajectoryRecord rec = run_episode(
                task,
                [&](const EnvState& s) { return expert_action(s, task, Vec2{0.0, 0.0}); },
                ep_seed, Provenance::expert);
            if (rec.outcome == Outcome::success) {
                ds.records.push_back(std::move(rec));
                done = true;
            }
        }
        if (!done) {
            throw ContractError("generate_sans: expert failed 10 consecutive resamples for " +
                                task.task_id);
        }
    }
    for (int i = 0; i < n_near; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        const NearSuccessSource source =
            near_success_action_source(task, derive_seed(tree, "near-offset", idx));
        const std::uint64_t ep_seed = derive_seed(tree, "near-reset", idx);
        ds.records.push_back(run_episode(
            task, [&](const EnvState& s) { return source.action(s, task); }, ep_seed,
            Provenance::perturbed_expert));
    }
    ds.check_invariants();
    return ds;
}

// Appends policy rollouts and advances the iteration counter.
inline SansDataset augment(const SansDataset& dataset,
                           const std::vector<TrajectoryRecord>& rollouts) {
    SansDataset out = dataset;
    for (const auto& r : rollouts) {
        require(r.provenance == Provenance::policy_rollout,
                "augment: rollouts must carry policy_rollout provenance");
        r.check_invariants();
        out.records.push_back(r);
    }
    out.iteration_index += 1;
    return out;
}

// Stratified-by-outcome holdout split; both halves keep the parent's record
// order. Falls back to a plain split (and flags it) when an outcome class is
// too thin to stratify.
inline std::pair<SansDataset, SansDataset> split(const SansDataset& dataset,
                                                 double holdout_fraction, std::uint64_t seed) {
    require(holdout_fraction > 0.0 && holdout_fraction < 1.0,
            "split: holdout_fraction must lie in (0,1)");
    require(!dataset.records.empty(), "split: empty dataset");

    std::vector<std::size_t> success_idx, failure_idx;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        (dataset.records[i].outcome == Outcome::success ? success_idx : failure_idx).push_back(i);
    }
    const bool both_present = !success_idx.empty() && !failure_idx.empty();
    const bool can_stratify =
        both_present && success_idx.size() >= 2 && failure_idx.size() >= 2;

    Rng rng(derive_seed(SeedTree{seed}, "split", 0));
    auto pick_holdout = [&rng, holdout_fraction](std::vector<std::size_t> pool) {
        for (std::size_t i = pool.size(); i > 1; --i) {
            std::swap(pool[i - 1], pool[rng.next_u64() % i]);
        }
        auto n_hold = static_cast<std::size_t>(
            std::llround(holdout_fraction * static_cast<double>(pool.size())));
        n_hold = std::min(n_hold, pool.size());
        return std::vector<std::size_t>(pool.begin(),
                                        pool.begin() + static_cast<std::ptrdiff_t>(n_hold));
    };

    std::vector<std::size_t> holdout;
    if (can_stratify) {
        for (auto& part : {success_idx, failure_idx}) {
            auto h = pick_holdout(part);
            holdout.insert(holdout.end(), h.begin(), h.end());
        }
    } else {
        std::vector<std::size_t> all(dataset.records.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        holdout = pick_holdout(std::move(all));
    }
    std::sort(holdout.begin(), holdout.end());

    SansDataset train, heldout;
    train.iteration_index = heldout.iteration_index = dataset.iteration_index;
    const bool warn = dataset.stratification_warning || (both_present && !can_stratify);
    train.stratification_warning = heldout.stratification_warning = warn;
    std::size_t h = 0;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
        if (h < holdout.size() && holdout[h] == i) {
            heldout.records.push_back(dataset.records[i]);
            ++h;
        } else {
            train.records.push_back(dataset.records[i]);
        }
    }
    return {std::move(train), std::move(heldout)};
}

// ---------------------------------------------------------------------------
// persistence: manifest.json + records.bin

inline constexpr int kSansFormatVersion = 1;

namespace detail {

inline void put_f64_bytes(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class SansReader {
public:
    explicit SansReader(std::string bytes) : bytes_(std::move(bytes)) {}

    bool at_end() const { return pos_ == bytes_.size(); }

    std::string read_line() {
        const auto nl = bytes_.find('\n', pos_);
        if (nl == std::string::npos) {
            throw PersistenceError(PersistenceError::Kind::truncated,
                                   "records.bin ends inside a record header");
        }
        std::string line = bytes_.substr(pos_, nl - pos_);
        pos_ = nl + 1;
        return line;
    }

    double read_f64(const char* what) {
        if (bytes_.size() - pos_ < 8) {
            throw PersistenceError(PersistenceError::Kind::truncated,
                                   std::string("records.bin ends mid-") + what);
        }
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]);
        }
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_sans(const SansDataset& dataset, const std::filesystem::path& dir) {
    dataset.check_invariants();
    std::filesystem::create_directories(dir);

    nlohmann::json counts = nlohmann::json::array();
    for (const auto& [key, n] : dataset.manifest_counts()) {
        counts.push_back({{"task_id", std::get<0>(key)},
                          {"outcome", outcome_name(std::get<1>(key))},
                          {"provenance", provenance_name(std::get<2>(key))},
                          {"count", n}});
    }
    nlohmann::json manifest = {{"format_version", kSansFormatVersion},
                               {"iteration_index", dataset.iteration_index},
                               {"record_count", dataset.records.size()},
                               {"stratification_warning", dataset.stratification_warning},
                               {"counts", counts}};
    {
        std::ofstream f(dir / "manifest.json", std::ios::trunc);
        if (!f) throw IoError("save_sans: cannot open " + (dir / "manifest.json").string());
        f << manifest.dump(2) << "\n";
    }

    std::string bin;
    for (const auto& rec : dataset.records) {
        nlohmann::json header = {{"task_id", rec.task_id},
                                 {"outcome", outcome_name(rec.outcome)},
                                 {"provenance", provenance_name(rec.provenance)},
                                 {"seed", rec.seed},
                                 {"frame_count", rec.frames.size()},
                                 {"action_count", rec.actions.size()},
                                 {"reward_count", rec.rewards.size()}};
        bin += header.dump();
        bin += '\n';
        for (const Frame& fr : rec.frames) {
            for (double v : fr.px) detail::put_f64_bytes(bin, v);
        }
        for (const ActionPose& a : rec.actions) {
            detail::put_f64_bytes(bin, a.x);
            detail::put_f64_bytes(bin, a.y);
            detail::put_f64_bytes(bin, static_cast<double>(a.grip));
        }
        for (int r : rec.rewards) detail::put_f64_bytes(bin, static_cast<double>(r));
    }
    std::ofstream f(dir / "records.bin", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_sans: cannot open " + (dir / "records.bin").string());
    f.write(bin.data(), static_cast<std::streamsize>(bin.size()));
    if (!f) throw IoError("save_sans: write failed");
}

inline SansDataset load_sans(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("load_sans: cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("manifest.json unparsable: ") + e.what());
    }

    SansDataset ds;
    std::size_t expected_records = 0;
    std::map<ManifestKey, int> expected_counts;
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kSansFormatVersion) {
            throw PersistenceError(PersistenceError::Kind::version_mismatch,
                                   "dataset format version " + std::to_string(version) +
                                       ", expected " + std::to_string(kSansFormatVersion));
        }
        ds.iteration_index = manifest.at("iteration_index").get<int>();
        ds.stratification_warning = manifest.at("stratification_warning").get<bool>();
        expected_records = manifest.at("record_count").get<std::size_t>();
        for (const auto& c : manifest.at("counts")) {
            expected_counts[{c.at("task_id").get<std::string>(),
                             parse_outcome(c.at("outcome").get<std::string>()),
                             parse_provenance(c.at("provenance").get<std::string>())}] =
                c.at("count").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw PersistenceError(PersistenceError::Kind::corrupt,
                               std::string("manifest.json malformed: ") + e.what());
    }

    std::ifstream rf(dir / "records.bin", std::ios::binary);
    if (!rf) throw IoError("load_sans: cannot open " + (dir / "records.bin").string());
    std::string bytes((std::istreambuf_iterator<char>(rf)), std::istreambuf_iterator<char>());
    detail::SansReader r(std::move(bytes));

    while (!r.at_end()) {
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(r.read_line());
        } catch (const nlohmann::json::exception& e) {
            throw PersistenceError(PersistenceError::Kind::corrupt,
                                   std::string("record header unparsable: ") + e.what());
        }
        TrajectoryRecord rec;
        std::size_t frame_count = 0, action_count = 0, reward_count = 0;
        try {
            rec.task_id = header.at("task_id").get<std::string>();
            rec.outcome = parse_outcome(header.at("outcome").get<std::string>());
            rec.provenance = parse_provenance(header.at("provenance").get<std::string>());
            rec.seed = header.at("seed").get<std::uint64_t>();
            frame_count = header.at("frame_count").get<std::size_t>();
            action_count = header.at("action_count").get<std::size_t>();
            reward_count = header.at("reward_count").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw PersistenceError(PersistenceError::Kind::corrupt,
                                   std::string("record header malformed: ") + e.what());
        }
        if (frame_count > 1000000 || action_count > 1000000) {
            throw PersistenceError(PersistenceError::Kind::corrupt,
                                   "record header claims an implausible length");
        }
        rec.frames.resize(frame_count);
        for (Frame& fr : rec.frames) {
            for (double& v : fr.px) v = r.read_f64("frame payload");
        }
        rec.actions.reserve(action_count);
        for (std::size_t i = 0; i < action_count; ++i) {
            const double x = r.read_f64("action");
            const double y = r.read_f64("action");
            const double grip = r.read_f64("action");
            if (grip != 0.0 && grip != 1.0) {
                throw PersistenceError(PersistenceError::Kind::invariant_violation,
                                       "action grip bit is not 0/1");
            }
            rec.actions.push_back(ActionPose(x, y, static_cast<int>(grip)));
        }
        rec.rewards.reserve(reward_count);
        for (std::size_t i = 0; i < reward_count; ++i) {
            const double rv = r.read_f64("reward");
            if (rv != 0.0 && rv != 1.0) {
                throw PersistenceError(PersistenceError::Kind::invariant_violation,
                                       "reward bit is not 0/1");
            }
            rec.rewards.push_back(static_cast<int>(rv));
        }
        try {
            rec.check_invariants();
        } catch (const ContractError& e) {
            throw PersistenceError(PersistenceError::Kind::invariant_violation, e.what());
        }
        ds.records.push_back(std::move(rec));
    }

    if (ds.records.size() != expected_records || ds.manifest_counts() != expected_counts) {
        throw PersistenceError(PersistenceError::Kind::invariant_violation,
                               "manifest counts disagree with the records present");
    }
    return ds;
}

}  // namespace loopworld
