#pragma once

// Sliding supervised windows over recorded trajectories, shared by the world
// model (frame prediction) and the policy (behavior cloning). A window pairs
// h history frames with the T actions taken from the last history frame
// onward, the T frames those actions produce, and those frames' reward bits.

#include <algorithm>
#include <vector>

#include "loopworld/common.hpp"
#include "loopworld/env.hpp"
#include "loopworld/sans.hpp"

namespace loopworld {

inline std::vector<double> encode_action(const ActionPose& a) {
    return {a.x, a.y, static_cast<double>(a.grip)};
}

struct TrainWindow {
    std::vector<double> history;  // h * frame_dim
    std::vector<double> actions;  // T ActionPoses, (x, y, grip) flattened
    std::vector<double> target;   // T * frame_dim
    std::vector<double> rewards;  // T bits
    std::vector<ActionPose> action_poses;
};

inline void append_frame(std::vector<double>& out, const Frame& f) {
    out.insert(out.end(), f.px.begin(), f.px.end());
}

// Windows run j = -1, 0, 1, ... L-h-T+1; the j=-1 "start window" duplicates
// the reset frame h times as history, matching how deployment bootstraps the
// observation history from a single reset frame. With h = 1 there is no
// missing past to fill, the start window would coincide with j = 0 (and its
// action index would underrun), so it is only emitted for h >= 2.
inline std::vector<TrainWindow> extract_windows(const TrajectoryRecord& rec, int h, int T,
                                                bool include_start_window = true) {
    rec.check_invariants();
    const int L = static_cast<int>(rec.actions.size());
    require(L >= h + T - 1, "extract_windows: record shorter than one window");
    std::vector<TrainWindow> out;
    const int j_begin = include_start_window && h >= 2 ? -1 : 0;
    const int j_end = L - h - T + 1;  // inclusive
    for (int j = j_begin; j <= j_end; ++j) {
        TrainWindow w;
        for (int k = 0; k < h; ++k) {
            append_frame(w.history, rec.frames[static_cast<std::size_t>(std::max(j + k, 0))]);
        }
        for (int t = 0; t < T; ++t) {
            const auto ai = static_cast<std::size_t>(j + h - 1 + t);
            const auto& a = rec.actions[ai];
            const auto enc = encode_action(a);
            w.actions.insert(w.actions.end(), enc.begin(), enc.end());
            w.action_poses.push_back(a);
            append_frame(w.target, rec.frames[ai + 1]);
            w.rewards.push_back(static_cast<double>(rec.rewards[ai]));
        }
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace loopworld
