#pragma once

// Deterministic planar pick-and-place arena. Positions live in [0,1]^2; the
// gripper chases absolute pose targets with a per-step displacement cap,
// grasps within grasp_radius, and earns reward while the object rests in the
// goal disk with the gripper open. Rendering draws 16x16x3 frames; decoding
// inverts them well enough to judge task outcome from pixels alone.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "loopworld/common.hpp"
#include "loopworld/rng.hpp"

namespace loopworld {

struct EpisodeExhaustedError : ContractError {
    using ContractError::ContractError;
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double c, Vec2 a) { return {c * a.x, c * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

inline double dist(Vec2 a, Vec2 b) { return (a - b).norm(); }

// Absolute target pose plus gripper command; coordinates clamp into [0,1].
struct ActionPose {
    double x = 0.0;
    double y = 0.0;
    int grip = 0;  // 0 open, 1 close

    ActionPose() = default;
    ActionPose(double x_, double y_, int grip_)
        : x(std::min(1.0, std::max(0.0, x_))), y(std::min(1.0, std::max(0.0, y_))), grip(grip_) {
        require(grip == 0 || grip == 1, "ActionPose: grip must be 0 or 1");
    }

    Vec2 target() const { return {x, y}; }
    friend bool operator==(const ActionPose& a, const ActionPose& b) {
        return a.x == b.x && a.y == b.y && a.grip == b.grip;
    }
};

struct Box {
    Vec2 lo;
    Vec2 hi;
    bool contains(Vec2 p) const {
        return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
    }
    Vec2 center() const { return {0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y)}; }
};

struct TaskSpec {
    std::string task_id;
    Box object_start_region;
    Vec2 goal_center;
    double goal_radius = 0.12;
    double grasp_radius = 0.06;
    double max_step_displacement = 0.08;
    int horizon = 40;

    void validate() const {
        require(!task_id.empty(), "TaskSpec: empty task_id");
        require(grasp_radius < goal_radius, "TaskSpec: grasp_radius must be < goal_radius");
        require(grasp_radius > 0.0, "TaskSpec: grasp_radius must be positive");
        require(max_step_displacement > 0.0, "TaskSpec: max_step_displacement must be positive");
        require(horizon >= 1, "TaskSpec: horizon must be >= 1");
        require(object_start_region.lo.x <= object_start_region.hi.x &&
                    object_start_region.lo.y <= object_start_region.hi.y,
                "TaskSpec: inverted start region");
    }
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
    j = nlohmann::json{{"task_id", t.task_id},
                       {"object_start_region",
                        {{"lo", {t.object_start_region.lo.x, t.object_start_region.lo.y}},
                         {"hi", {t.object_start_region.hi.x, t.object_start_region.hi.y}}}},
                       {"goal_center", {t.goal_center.x, t.goal_center.y}},
                       {"goal_radius", t.goal_radius},
                       {"grasp_radius", t.grasp_radius},
                       {"max_step_displacement", t.max_step_displacement},
                       {"horizon", t.horizon}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
    t.task_id = j.at("task_id").get<std::string>();
    const auto& region = j.at("object_start_region");
    t.object_start_region.lo = {region.at("lo").at(0).get<double>(),
                                region.at("lo").at(1).get<double>()};
    t.object_start_region.hi = {region.at("hi").at(0).get<double>(),
                                region.at("hi").at(1).get<double>()};
    t.goal_center = {j.at("goal_center").at(0).get<double>(),
                     j.at("goal_center").at(1).get<double>()};
    t.goal_radius = j.at("goal_radius").get<double>();
    t.grasp_radius = j.at("grasp_radius").get<double>();
    t.max_step_displacement = j.at("max_step_displacement").get<double>();
    t.horizon = j.at("horizon").get<int>();
    t.validate();
}

struct EnvState {
    Vec2 gripper_pos;
    bool grip_closed = false;
    Vec2 object_pos;
    bool held = false;
    Vec2 goal_center;
    int step_index = 0;

    void check_invariants() const {
        auto in_unit = [](Vec2 p) { return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1; };
        require(in_unit(gripper_pos) && in_unit(object_pos) && in_unit(goal_center),
                "EnvState: coordinates out of [0,1]^2");
        require(!held || grip_closed, "EnvState: held requires a closed grip");
        require(!held || object_pos == gripper_pos, "EnvState: held object must track gripper");
    }

    friend bool operator==(const EnvState& a, const EnvState& b) {
        return a.gripper_pos == b.gripper_pos && a.grip_closed == b.grip_closed &&
               a.object_pos == b.object_pos && a.held == b.held &&
               a.goal_center == b.goal_center && a.step_index == b.step_index;
    }
};

// ---------------------------------------------------------------------------
// frames

inline constexpr int kGrid = 16;
inline constexpr int kFramePlanes = 3;
inline constexpr int kFramePixels = kFramePlanes * kGrid * kGrid;

// Coordinate mapping: arena x in [0,1] lands at grid position 1 + 14x, so
// x=0.5 sits exactly on pixel index 8 and both arena edges land on pixel
// centers (1 and 15). Edge blobs lose at most the single off-grid tail of
// the Gaussian, which keeps the centroid roundtrip bias near the walls at
// ~0.52 pixels per axis, under one pixel even diagonally at a corner.
inline double to_grid(double coord) { return 1.0 + 14.0 * coord; }
inline double from_grid(double pix) { return (pix - 1.0) / 14.0; }

struct Frame {
    std::array<double, kFramePixels> px{};  // [plane][row y][col x]

    double& at(int plane, int ix, int iy) { return px[(plane * kGrid + iy) * kGrid + ix]; }
    double at(int plane, int ix, int iy) const { return px[(plane * kGrid + iy) * kGrid + ix]; }

    friend bool operator==(const Frame& a, const Frame& b) { return a.px == b.px; }
};

// Pixels in range plus a unique brightest pixel on the gripper and object
// planes (the goal plane is a flat disk, ties expected there).
inline void check_frame_invariants(const Frame& f) {
    for (double v : f.px) {
        require(v >= 0.0 && v <= 1.0 && std::isfinite(v), "Frame: pixel out of [0,1]");
    }
    for (int plane = 0; plane < 2; ++plane) {
        double best = -1.0;
        int best_count = 0;
        for (int iy = 0; iy < kGrid; ++iy) {
            for (int ix = 0; ix < kGrid; ++ix) {
                const double v = f.at(plane, ix, iy);
                if (v > best) {
                    best = v;
                    best_count = 1;
                } else if (v == best) {
                    ++best_count;
                }
            }
        }
        require(best_count == 1, "Frame: blob plane argmax is not unique");
    }
}

namespace detail {

// Exact half-integer blob centers would tie two pixels for the argmax; a
// one-nanopixel nudge keeps the brightest pixel unique without visibly
// moving anything.
inline double untie(double c) {
    const double frac = c - std::floor(c);
    return frac == 0.5 ? c + 1e-9 : c;
}

inline void draw_blob(Frame& f, int plane, Vec2 pos, double amplitude) {
    const double cx = untie(to_grid(pos.x));
    const double cy = untie(to_grid(pos.y));
    for (int iy = 0; iy < kGrid; ++iy) {
        for (int ix = 0; ix < kGrid; ++ix) {
            const double dx = ix - cx;
            const double dy = iy - cy;
            const double v = amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
            f.at(plane, ix, iy) = std::min(1.0, v);
        }
    }
}

}  // namespace detail

inline constexpr double kGripOpenAmplitude = 0.5;  // doubled to 1.0 when closed

inline Frame render(const EnvState& state, const TaskSpec& task) {
    Frame f;
    const double grip_amp = state.grip_closed ? 2.0 * kGripOpenAmplitude : kGripOpenAmplitude;
    detail::draw_blob(f, 0, state.gripper_pos, grip_amp);
    detail::draw_blob(f, 1, state.object_pos, 1.0);
    const double gx = to_grid(state.goal_center.x);
    const double gy = to_grid(state.goal_center.y);
    const double r_pix = task.goal_radius * 14.0;
    for (int iy = 0; iy < kGrid; ++iy) {
        for (int ix = 0; ix < kGrid; ++ix) {
            const double dx = ix - gx;
            const double dy = iy - gy;
            if (dx * dx + dy * dy <= r_pix * r_pix) f.at(2, ix, iy) = 1.0;
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// dynamics

inline EnvState reset(const TaskSpec& task, std::uint64_t seed) {
    task.validate();
    Rng rng(seed);
    EnvState s;
    s.gripper_pos = {0.5, 0.1};  // fixed home pose, gripper open
    s.grip_closed = false;
    s.object_pos = {rng.uniform(task.object_start_region.lo.x, task.object_start_region.hi.x),
                    rng.uniform(task.object_start_region.lo.y, task.object_start_region.hi.y)};
    s.held = false;
    s.goal_center = task.goal_center;
    s.step_index = 0;
    s.check_invariants();
    return s;
}

inline bool success_predicate(const EnvState& s, const TaskSpec& task) {
    return dist(s.object_pos, s.goal_center) <= task.goal_radius && !s.held && !s.grip_closed;
}

struct StepResult {
    EnvState state;
    int reward = 0;
};

inline StepResult step(const EnvState& state, const ActionPose& action, const TaskSpec& task) {
    if (state.step_index >= task.horizon) {
        throw EpisodeExhaustedError("step: episode horizon " + std::to_string(task.horizon) +
                                    " exhausted for " + task.task_id);
    }
    EnvState s = state;

    // move toward the target, capped at max_step_displacement; snap exactly
    // onto the target once within reach so approach phases terminate cleanly
    const Vec2 delta = action.target() - s.gripper_pos;
    const double d = delta.norm();
    if (d <= task.max_step_displacement) {
        s.gripper_pos = action.target();
    } else {
        s.gripper_pos = s.gripper_pos + (task.max_step_displacement / d) * delta;
    }
    if (s.held) s.object_pos = s.gripper_pos;

    // gripper command
    if (action.grip == 1) {
        s.grip_closed = true;
        if (!s.held && dist(s.gripper_pos, s.object_pos) <= task.grasp_radius) {
            s.held = true;
            s.object_pos = s.gripper_pos;
        }
    } else {
        s.grip_closed = false;
        s.held = false;  // object stays where it was released
    }

    s.step_index = state.step_index + 1;
    s.check_invariants();
    return {s, success_predicate(s, task) ? 1 : 0};
}

// ---------------------------------------------------------------------------
// frame decoding

struct DecodedOutcome {
    Vec2 object_estimate;
    bool success = false;
    bool grip_open = false;
};

// Grip-open detection: an open gripper blob peaks at no more than 0.5 and a
// closed one at no less than ~0.78 (worst-case half-pixel offset), so any
// threshold between works; 0.6 leaves margin on both sides.
inline constexpr double kGripClosedPeakThreshold = 0.6;

inline DecodedOutcome decode_outcome(const Frame& f, const TaskSpec& task) {
    double mass = 0.0, mx = 0.0, my = 0.0, grip_peak = 0.0;
    for (int iy = 0; iy < kGrid; ++iy) {
        for (int ix = 0; ix < kGrid; ++ix) {
            const double v = f.at(1, ix, iy);
            mass += v;
            mx += v * ix;
            my += v * iy;
            grip_peak = std::max(grip_peak, f.at(0, ix, iy));
        }
    }
    if (mass <= 1e-12) throw UndecodableError("decode_outcome: object plane carries no mass");
    DecodedOutcome out;
    out.object_estimate = {std::min(1.0, std::max(0.0, from_grid(mx / mass))),
                           std::min(1.0, std::max(0.0, from_grid(my / mass)))};
    out.grip_open = grip_peak < kGripClosedPeakThreshold;
    out.success =
        out.grip_open && dist(out.object_estimate, task.goal_center) <= task.goal_radius;
    return out;
}

// ---------------------------------------------------------------------------
// scripted controllers

// Phase machine reading only the current state. With a zero aim offset it
// completes the task from any reachable start; with a standing offset beyond
// grasp_radius it keeps re-attempting the grasp near the object forever.
inline ActionPose expert_action(const EnvState& state, const TaskSpec& task, Vec2 aim_offset) {
    constexpr double kArrive = 1e-9;  // step() snaps exactly onto targets
    if (state.held) {
        // transport; release once centered on the goal
        if (dist(state.gripper_pos, state.goal_center) <= kArrive) {
            return ActionPose(state.goal_center.x, state.goal_center.y, 0);
        }
        return ActionPose(state.goal_center.x, state.goal_center.y, 1);
    }
    if (success_predicate(state, task)) {
        // hold still with the grip open so the reward keeps flowing
        return ActionPose(state.gripper_pos.x, state.gripper_pos.y, 0);
    }
    const Vec2 target = state.object_pos + aim_offset;
    if (state.grip_closed) {
        // closed on empty air: reopen in place and retry
        return ActionPose(target.x, target.y, 0);
    }
    if (dist(state.gripper_pos, {std::min(1.0, std::max(0.0, target.x)),
                                 std::min(1.0, std::max(0.0, target.y))}) <= kArrive) {
        return ActionPose(target.x, target.y, 1);  // grasp attempt
    }
    return ActionPose(target.x, target.y, 0);  // approach
}

// Expert with a per-episode aim error drawn uniformly from the annulus
// [1.2, 2.5]*grasp_radius: close enough to look like an attempt, far enough
// that the grasp can never attach.
struct NearSuccessSource {
    Vec2 aim_offset;

    ActionPose action(const EnvState& state, const TaskSpec& task) const {
        return expert_action(state, task, aim_offset);
    }
};

inline NearSuccessSource near_success_action_source(const TaskSpec& task, std::uint64_t seed) {
    require(task.grasp_radius > 0.0, "near_success_action_source: grasp_radius must be > 0");
    Rng rng(seed);
    const double r_lo = 1.2 * task.grasp_radius;
    const double r_hi = 2.5 * task.grasp_radius;
    // area-uniform over the annulus
    const double u = rng.uniform01();
    const double r = std::sqrt(r_lo * r_lo + u * (r_hi * r_hi - r_lo * r_lo));
    const double theta = rng.uniform(0.0, 6.283185307179586476925286766559);
    return NearSuccessSource{{r * std::cos(theta), r * std::sin(theta)}};
}

// Canonical task used by the command-line tools and tests when no task file
// is given: object spawns in the upper band, goal disk sits lower right.
inline TaskSpec reference_task() {
    TaskSpec t;
    t.task_id = "pick-place-ref";
    t.object_start_region = {{0.2, 0.55}, {0.8, 0.85}};
    t.goal_center = {0.72, 0.22};
    t.goal_radius = 0.12;
    t.grasp_radius = 0.06;
    t.max_step_displacement = 0.08;
    t.horizon = 40;
    return t;
}

}  // namespace loopworld
