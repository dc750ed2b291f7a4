#pragma once

// Plain fully-connected stacks over f64. Parameters live in a ParamSet under
// "<prefix>w0"/"<prefix>b0", "<prefix>w1"/... so several nets can share one
// set (prefix "policy.trunk." etc). Two forward paths: a raw one for
// inference loops and a Tape one for training.

#include <cmath>
#include <string>
#include <vector>

#include "loopworld/common.hpp"
#include "loopworld/rng.hpp"
#include "loopworld/tape.hpp"
#include "loopworld/tensor.hpp"

namespace loopworld {

struct MlpSpec {
    std::vector<std::size_t> layer_widths;  // input, hidden..., output
    Activation hidden_activation = Activation::tanh;
    Activation output_activation = Activation::identity;

    std::size_t layer_count() const { return layer_widths.size() - 1; }
    std::size_t input_width() const { return layer_widths.front(); }
    std::size_t output_width() const { return layer_widths.back(); }

    void validate() const {
        require(layer_widths.size() >= 2, "MlpSpec: need at least input and output widths");
        for (std::size_t w : layer_widths) require(w >= 1, "MlpSpec: zero layer width");
    }
};

inline std::string mlp_weight_name(const std::string& prefix, std::size_t layer) {
    return prefix + "w" + std::to_string(layer);
}

inline std::string mlp_bias_name(const std::string& prefix, std::size_t layer) {
    return prefix + "b" + std::to_string(layer);
}

// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases.
// Draw order per layer: weights row-major, then bias; layers in order.
inline void init_mlp_params(ParamSet& ps, const MlpSpec& spec, const std::string& prefix,
                            Rng& rng) {
    spec.validate();
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const std::size_t fan_in = spec.layer_widths[l];
        const std::size_t fan_out = spec.layer_widths[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        TensorValue w({fan_out, fan_in}, std::vector<double>(fan_out * fan_in));
        for (double& x : w.data) x = rng.uniform(-bound, bound);
        TensorValue b({fan_out}, std::vector<double>(fan_out));
        for (double& x : b.data) x = rng.uniform(-bound, bound);
        ps.add(mlp_weight_name(prefix, l), std::move(w));
        ps.add(mlp_bias_name(prefix, l), std::move(b));
    }
}

// Resolved pointers into a ParamSet, so hot loops skip name lookups.
// Invalidated by anything that reshapes the set (not by value updates).
struct MlpView {
    const MlpSpec* spec = nullptr;
    std::string first_layer;  // for dimension-error messages
    std::vector<const TensorValue*> w;
    std::vector<const TensorValue*> b;

    static MlpView resolve(const MlpSpec& spec, const ParamSet& ps, const std::string& prefix) {
        spec.validate();
        MlpView view;
        view.spec = &spec;
        view.first_layer = mlp_weight_name(prefix, 0);
        for (std::size_t l = 0; l < spec.layer_count(); ++l) {
            const TensorValue& w = ps.at(mlp_weight_name(prefix, l));
            const TensorValue& b = ps.at(mlp_bias_name(prefix, l));
            if (w.shape != std::vector<std::size_t>{spec.layer_widths[l + 1], spec.layer_widths[l]}) {
                throw DimensionError("mlp: bad weight shape for " + mlp_weight_name(prefix, l));
            }
            if (b.shape != std::vector<std::size_t>{spec.layer_widths[l + 1]}) {
                throw DimensionError("mlp: bad bias shape for " + mlp_bias_name(prefix, l));
            }
            view.w.push_back(&w);
            view.b.push_back(&b);
        }
        return view;
    }
};

// Raw forward. `scratch` is reused between calls to avoid allocation churn.
inline void mlp_forward(const MlpView& view, std::span<const double> input,
                        std::vector<double>& out, std::vector<double>& scratch) {
    const MlpSpec& spec = *view.spec;
    if (input.size() != spec.input_width()) {
        throw DimensionError("mlp_forward: input length " + std::to_string(input.size()) +
                             " != " + std::to_string(spec.input_width()) + " at " +
                             view.first_layer);
    }
    scratch.assign(input.begin(), input.end());
    std::vector<double> next;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const std::size_t m = spec.layer_widths[l + 1];
        const std::size_t n = spec.layer_widths[l];
        const double* wd = view.w[l]->data.data();
        const double* bd = view.b[l]->data.data();
        next.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = wd + i * n;
            double acc = bd[i];
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * scratch[j];
            next[i] = acc;
        }
        const Activation act =
            l + 1 == spec.layer_count() ? spec.output_activation : spec.hidden_activation;
        if (act != Activation::identity) {
            for (double& x : next) x = apply_activation(act, x);
        }
        scratch.swap(next);
    }
    out = scratch;
}

// Convenience single-shot forward.
inline std::vector<double> mlp_forward(const MlpSpec& spec, const ParamSet& ps,
                                       const std::string& prefix, std::span<const double> input) {
    MlpView view = MlpView::resolve(spec, ps, prefix);
    std::vector<double> out, scratch;
    mlp_forward(view, input, out, scratch);
    return out;
}

// Tape forward: same arithmetic, differentiable. Parameter leaves are
// created through the tape so gradients land in extract_grads().
inline Var mlp_tape_forward(Tape& tape, const MlpSpec& spec, const ParamSet& ps,
                            const std::string& prefix, Var input) {
    spec.validate();
    Var h = input;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        Var w = tape.param_named(ps, mlp_weight_name(prefix, l));
        Var b = tape.param_named(ps, mlp_bias_name(prefix, l));
        h = tape.affine(w, b, h, mlp_weight_name(prefix, l));
        const Activation act =
            l + 1 == spec.layer_count() ? spec.output_activation : spec.hidden_activation;
        h = tape.activation(h, act);
    }
    return h;
}

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::identity: return "identity";
    }
    return "identity";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "identity") return Activation::identity;
    throw ContractError("unknown activation '" + std::string(s) + "'");
}

}  // namespace loopworld
