#pragma once

// Adam with bias correction. State mirrors the parameter layout; step_count
// is shared across all tensors. Gradients are validated finite before any
// state is touched, so a failed step leaves params and state unchanged.

#include <cmath>
#include <cstdint>
#include <utility>

#include "loopworld/common.hpp"
#include "loopworld/tensor.hpp"

namespace loopworld {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ParamSet m;
    ParamSet v;
    std::uint64_t step_count = 0;

    static AdamState init(const ParamSet& params) {
        return AdamState{params.zeros_like(), params.zeros_like(), 0};
    }
};

namespace detail {
inline void check_grads_match(const ParamSet& params, const ParamSet& grads) {
    require(params.size() == grads.size(), "adam_step: param/grad item count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [pn, pt] = params.item(i);
        const auto& [gn, gt] = grads.item(i);
        if (pn != gn || pt.shape != gt.shape) {
            throw ContractError("adam_step: grad layout mismatch at '" + pn + "'");
        }
    }
    if (!grads.all_finite_values()) throw NumericError("adam_step: non-finite gradient");
}
}  // namespace detail

// In-place update used by the training loops.
inline void adam_step_inplace(ParamSet& params, const ParamSet& grads, AdamState& state,
                              const AdamConfig& cfg) {
    detail::check_grads_match(params, grads);
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.item(i).second.data;
        const auto& g = grads.item(i).second.data;
        auto& m = state.m.item(i).second.data;
        auto& v = state.v.item(i).second.data;
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            p[k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

// Value-returning form; convenient in tests and small updates.
inline std::pair<ParamSet, AdamState> adam_step(const ParamSet& params, const ParamSet& grads,
                                                const AdamState& state, const AdamConfig& cfg) {
    ParamSet p = params;
    AdamState s = state;
    adam_step_inplace(p, grads, s, cfg);
    return {std::move(p), std::move(s)};
}

}  // namespace loopworld
