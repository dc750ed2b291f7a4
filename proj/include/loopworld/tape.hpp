#pragma once

// Reverse-mode autodiff over vector-valued nodes. A Tape is single-use:
// build a scalar loss out of the ops below, call backward() once, read the
// parameter gradients out. Ops are vector-granular (a whole matvec is one
// node), so tapes stay small and the arithmetic dominates.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "loopworld/common.hpp"
#include "loopworld/tensor.hpp"

namespace loopworld {

enum class Activation { tanh, relu, sigmoid, identity };

inline double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Activation::identity: return x;
    }
    return x;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double softplus(double x) {
    return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
}

struct Var {
    int id = -1;
};

class Tape {
public:
    // ---- leaves -------------------------------------------------------

    Var constant(std::span<const double> v) {
        return push_owned_(std::vector<double>(v.begin(), v.end()), nullptr);
    }

    Var constant_scalar(double v) { return push_owned_({v}, nullptr); }

    // Parameter leaf viewing the ParamSet item's storage. One node per item:
    // repeated uses accumulate into a single gradient buffer.
    Var param(const ParamSet& ps, std::size_t item_index) {
        auto it = param_nodes_.find(item_index);
        if (it != param_nodes_.end()) return it->second;
        const TensorValue& t = ps.item(item_index).second;
        Var v = push_view_(std::span<const double>(t.data), nullptr);
        param_nodes_.emplace(item_index, v);
        return v;
    }

    Var param_named(const ParamSet& ps, std::string_view name) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps.item(i).first == name) return param(ps, i);
        }
        throw ContractError("Tape::param_named: unknown parameter '" + std::string(name) + "'");
    }

    // ---- vector ops ---------------------------------------------------

    // y = W x + b with W a rank-2 leaf [out, in] and b rank-1 [out].
    Var affine(Var w, Var b, Var x, const std::string& layer_label) {
        auto wv = val(w);
        auto bv = val(b);
        auto xv = val(x);
        const std::size_t m = bv.size();
        if (m == 0 || wv.size() % m != 0) {
            throw DimensionError("affine: weight/bias mismatch at " + layer_label);
        }
        const std::size_t n = wv.size() / m;
        if (xv.size() != n) {
            throw DimensionError("affine: input length " + std::to_string(xv.size()) +
                                 " != " + std::to_string(n) + " at " + layer_label);
        }
        std::vector<double> out(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = wv.data() + i * n;
            double acc = bv[i];
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv[j];
            out[i] = acc;
        }
        return push_owned_(std::move(out), [this, w, b, x, m, n](std::span<const double> g) {
            auto wv2 = val(w);
            auto xv2 = val(x);
            double* gw = grad_ptr_(w);
            double* gb = grad_ptr_(b);
            double* gx = grad_ptr_(x);
            for (std::size_t i = 0; i < m; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                const double* row = wv2.data() + i * n;
                double* gwrow = gw + i * n;
                gb[i] += gi;
                for (std::size_t j = 0; j < n; ++j) {
                    gwrow[j] += gi * xv2[j];
                    gx[j] += gi * row[j];
                }
            }
        });
    }

    Var activation(Var x, Activation a) {
        if (a == Activation::identity) return x;
        auto xv = val(x);
        std::vector<double> out(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] = apply_activation(a, xv[i]);
        Var y{next_id_()};
        return push_owned_at_(y, std::move(out), [this, x, y, a](std::span<const double> g) {
            auto yv = val(y);
            double* gx = grad_ptr_(x);
            for (std::size_t i = 0; i < yv.size(); ++i) {
                double d = 1.0;
                switch (a) {
                    case Activation::tanh: d = 1.0 - yv[i] * yv[i]; break;
                    case Activation::relu: d = yv[i] > 0.0 ? 1.0 : 0.0; break;
                    case Activation::sigmoid: d = yv[i] * (1.0 - yv[i]); break;
                    case Activation::identity: d = 1.0; break;
                }
                gx[i] += g[i] * d;
            }
        });
    }

    Var concat(const std::vector<Var>& parts) {
        std::vector<double> out;
        for (Var p : parts) {
            auto pv = val(p);
            out.insert(out.end(), pv.begin(), pv.end());
        }
        return push_owned_(std::move(out), [this, parts](std::span<const double> g) {
            std::size_t off = 0;
            for (Var p : parts) {
                double* gp = grad_ptr_(p);
                const std::size_t n = val(p).size();
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                off += n;
            }
        });
    }

    Var slice(Var x, std::size_t offset, std::size_t len) {
        auto xv = val(x);
        require(offset + len <= xv.size(), "slice: out of range");
        std::vector<double> out(xv.begin() + offset, xv.begin() + offset + len);
        return push_owned_(std::move(out), [this, x, offset, len](std::span<const double> g) {
            double* gx = grad_ptr_(x);
            for (std::size_t i = 0; i < len; ++i) gx[offset + i] += g[i];
        });
    }

    // ca*a + cb*b, elementwise.
    Var add_scaled(Var a, double ca, Var b, double cb) {
        auto av = val(a);
        auto bv = val(b);
        require(av.size() == bv.size(), "add_scaled: length mismatch");
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = ca * av[i] + cb * bv[i];
        return push_owned_(std::move(out), [this, a, b, ca, cb](std::span<const double> g) {
            double* ga = grad_ptr_(a);
            double* gb = grad_ptr_(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += ca * g[i];
                gb[i] += cb * g[i];
            }
        });
    }

    Var add(Var a, Var b) { return add_scaled(a, 1.0, b, 1.0); }

    // Elementwise product with a constant vector. `c` must outlive the tape.
    Var mul_const(Var a, std::span<const double> c) {
        auto av = val(a);
        require(av.size() == c.size(), "mul_const: length mismatch");
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c[i];
        return push_owned_(std::move(out), [this, a, c](std::span<const double> g) {
            double* ga = grad_ptr_(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c[i] * g[i];
        });
    }

    Var scale(Var a, double c) {
        auto av = val(a);
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
        return push_owned_(std::move(out), [this, a, c](std::span<const double> g) {
            double* ga = grad_ptr_(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }

    // Hard clamp; gradient passes only strictly inside the interval.
    Var clamp(Var x, double lo, double hi) {
        auto xv = val(x);
        std::vector<double> out(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::min(hi, std::max(lo, xv[i]));
        return push_owned_(std::move(out), [this, x, lo, hi](std::span<const double> g) {
            auto xv2 = val(x);
            double* gx = grad_ptr_(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xv2[i] > lo && xv2[i] < hi) gx[i] += g[i];
            }
        });
    }

    // ---- scalar-producing ops ----------------------------------------

    // coeff * sum_i (x_i - t_i)^2
    Var sum_sq_diff(Var x, std::span<const double> target, double coeff) {
        auto xv = val(x);
        require(xv.size() == target.size(), "sum_sq_diff: length mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double d = xv[i] - target[i];
            acc += d * d;
        }
        return push_owned_({coeff * acc}, [this, x, target, coeff](std::span<const double> g) {
            auto xv2 = val(x);
            double* gx = grad_ptr_(x);
            const double s = 2.0 * coeff * g[0];
            for (std::size_t i = 0; i < xv2.size(); ++i) gx[i] += s * (xv2[i] - target[i]);
        });
    }

    // (sigmoid(logit) - r)^2 for a scalar logit node.
    Var sigmoid_sq_err(Var logit, double r) {
        require(val(logit).size() == 1, "sigmoid_sq_err: logit must be scalar");
        const double s = sigmoid(val(logit)[0]);
        const double d = s - r;
        return push_owned_({d * d}, [this, logit, s, d](std::span<const double> g) {
            grad_ptr_(logit)[0] += g[0] * 2.0 * d * s * (1.0 - s);
        });
    }

    // Sum over dims of the Gaussian negative log density with sigma=exp(logstd).
    Var gaussian_nll(Var mean, Var logstd, std::span<const double> target) {
        auto mv = val(mean);
        auto lv = val(logstd);
        require(mv.size() == target.size() && lv.size() == target.size(),
                "gaussian_nll: length mismatch");
        constexpr double half_log_2pi = 0.91893853320467274178;
        double acc = 0.0;
        for (std::size_t i = 0; i < mv.size(); ++i) {
            const double inv_sigma = std::exp(-lv[i]);
            const double z = (target[i] - mv[i]) * inv_sigma;
            acc += 0.5 * z * z + lv[i] + half_log_2pi;
        }
        return push_owned_({acc}, [this, mean, logstd, target](std::span<const double> g) {
            auto mv2 = val(mean);
            auto lv2 = val(logstd);
            double* gm = grad_ptr_(mean);
            double* gl = grad_ptr_(logstd);
            for (std::size_t i = 0; i < mv2.size(); ++i) {
                const double inv_var = std::exp(-2.0 * lv2[i]);
                const double diff = mv2[i] - target[i];
                gm[i] += g[0] * diff * inv_var;
                gl[i] += g[0] * (1.0 - diff * diff * inv_var);
            }
        });
    }

    // Sum over dims of the Bernoulli negative log mass given raw logits.
    Var bernoulli_nll(Var logits, std::span<const double> bits) {
        auto gvd = val(logits);
        require(gvd.size() == bits.size(), "bernoulli_nll: length mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < gvd.size(); ++i) acc += softplus(gvd[i]) - bits[i] * gvd[i];
        return push_owned_({acc}, [this, logits, bits](std::span<const double> g) {
            auto lv = val(logits);
            double* gl = grad_ptr_(logits);
            for (std::size_t i = 0; i < lv.size(); ++i) {
                gl[i] += g[0] * (sigmoid(lv[i]) - bits[i]);
            }
        });
    }

    // exp(s - c) for scalar s.
    Var exp_minus_const(Var s, double c) {
        require(val(s).size() == 1, "exp_minus_const: scalar required");
        const double v = std::exp(val(s)[0] - c);
        return push_owned_({v}, [this, s, v](std::span<const double> g) {
            grad_ptr_(s)[0] += g[0] * v;
        });
    }

    // min(a, b) over scalars; ties route the gradient through a.
    Var min_first(Var a, Var b) {
        require(val(a).size() == 1 && val(b).size() == 1, "min_first: scalars required");
        const bool pick_a = val(a)[0] <= val(b)[0];
        return push_owned_({pick_a ? val(a)[0] : val(b)[0]},
                           [this, a, b, pick_a](std::span<const double> g) {
                               grad_ptr_(pick_a ? a : b)[0] += g[0];
                           });
    }

    // sum_i c_i * s_i over scalar terms.
    Var weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
        double acc = 0.0;
        for (const auto& [v, c] : terms) {
            require(val(v).size() == 1, "weighted_sum: scalar terms required");
            acc += c * val(v)[0];
        }
        return push_owned_({acc}, [this, terms](std::span<const double> g) {
            for (const auto& [v, c] : terms) grad_ptr_(v)[0] += c * g[0];
        });
    }

    // ---- access and backward -----------------------------------------

    std::span<const double> val(Var v) const { return vals_[static_cast<std::size_t>(v.id)]; }

    std::span<const double> grad_of(Var v) const {
        const auto& g = grads_[static_cast<std::size_t>(v.id)];
        return {g.data(), g.size()};
    }

    void backward(Var loss) {
        require(val(loss).size() == 1, "backward: loss must be scalar");
        require(!ran_backward_, "Tape is single-use: backward already ran");
        ran_backward_ = true;
        grads_[static_cast<std::size_t>(loss.id)][0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            auto& fn = backs_[static_cast<std::size_t>(i)];
            if (fn) fn(grads_[static_cast<std::size_t>(i)]);
        }
    }

    // Parameter gradients accumulated by backward(), in ParamSet layout.
    ParamSet extract_grads(const ParamSet& ps) const {
        ParamSet out = ps.zeros_like();
        for (const auto& [item_index, var] : param_nodes_) {
            auto g = grad_of(var);
            auto& dst = out.item(item_index).second.data;
            std::copy(g.begin(), g.end(), dst.begin());
        }
        return out;
    }

private:
    using BackFn = std::function<void(std::span<const double>)>;

    int next_id_() const { return static_cast<int>(vals_.size()); }

    Var push_owned_(std::vector<double> v, BackFn back) {
        Var out{next_id_()};
        return push_owned_at_(out, std::move(v), std::move(back));
    }

    Var push_owned_at_(Var out, std::vector<double> v, BackFn back) {
        owned_.push_back(std::move(v));
        vals_.emplace_back(owned_.back().data(), owned_.back().size());
        grads_.emplace_back(vals_.back().size(), 0.0);
        backs_.push_back(std::move(back));
        return out;
    }

    Var push_view_(std::span<const double> v, BackFn back) {
        Var out{next_id_()};
        owned_.emplace_back();  // keep indices aligned
        vals_.push_back(v);
        grads_.emplace_back(v.size(), 0.0);
        backs_.push_back(std::move(back));
        return out;
    }

    double* grad_ptr_(Var v) { return grads_[static_cast<std::size_t>(v.id)].data(); }

    // owned_ uses deque semantics via reserve-free list: vector of vectors is
    // stable at the element level because we only ever push_back.
    std::vector<std::vector<double>> owned_;
    std::vector<std::span<const double>> vals_;
    std::vector<std::vector<double>> grads_;
    std::vector<BackFn> backs_;
    std::unordered_map<std::size_t, Var> param_nodes_;
    bool ran_backward_ = false;
};

// Builds a scalar loss from parameter leaves; used by grad().
using LossBuilder = std::function<Var(Tape&)>;

// Reverse-mode gradient of a scalar-valued builder with respect to every
// parameter in `params`. The builder receives the tape and must create its
// parameter leaves through it (Tape::param / param_named).
inline ParamSet grad(const LossBuilder& build, const ParamSet& params, double* loss_out = nullptr) {
    Tape tape;
    Var loss = build(tape);
    if (tape.val(loss).size() != 1) throw ContractError("grad: loss is not scalar");
    const double loss_val = tape.val(loss)[0];
    if (!std::isfinite(loss_val)) throw NumericError("grad: loss is not finite");
    if (loss_out) *loss_out = loss_val;
    tape.backward(loss);
    return tape.extract_grads(params);
}

}  // namespace loopworld
