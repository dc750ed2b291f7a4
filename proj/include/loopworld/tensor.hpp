#pragma once

// Dense row-major f64 tensors plus the named parameter collections the
// learned components train over. Deliberately minimal: matrix-vector and
// elementwise work only, no broadcasting.

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loopworld/common.hpp"

namespace loopworld {

struct TensorValue {
    std::vector<std::size_t> shape;
    std::vector<double> data;  // row-major

    TensorValue() = default;
    TensorValue(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        require(element_count(shape) == data.size(), "TensorValue: shape/data length mismatch");
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    static TensorValue zeros(std::vector<std::size_t> shape) {
        std::size_t n = element_count(shape);
        return TensorValue(std::move(shape), std::vector<double>(n, 0.0));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // rank-2 accessors
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool same_shape(const TensorValue& o) const { return shape == o.shape; }

    friend bool operator==(const TensorValue& a, const TensorValue& b) {
        return a.shape == b.shape && a.data == b.data;
    }
};

// Named parameter collection. Insertion-ordered; that order is what the
// checkpoint format and all gradient reductions follow, which keeps every
// consumer bit-deterministic.
class ParamSet {
public:
    void add(std::string name, TensorValue value) {
        require(find_index(name) < 0, "ParamSet: duplicate parameter name '" + name + "'");
        items_.emplace_back(std::move(name), std::move(value));
    }

    bool has(std::string_view name) const { return find_index(name) >= 0; }

    const TensorValue& at(std::string_view name) const {
        int i = find_index(name);
        require(i >= 0, "ParamSet: unknown parameter '" + std::string(name) + "'");
        return items_[static_cast<std::size_t>(i)].second;
    }

    TensorValue& at(std::string_view name) {
        int i = find_index(name);
        require(i >= 0, "ParamSet: unknown parameter '" + std::string(name) + "'");
        return items_[static_cast<std::size_t>(i)].second;
    }

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    const std::pair<std::string, TensorValue>& item(std::size_t i) const { return items_[i]; }
    std::pair<std::string, TensorValue>& item(std::size_t i) { return items_[i]; }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    // Zero-filled clone with identical names and shapes.
    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& [name, t] : items_) out.add(name, TensorValue::zeros(t.shape));
        return out;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    bool all_finite_values() const {
        for (const auto& [name, t] : items_) {
            if (!all_finite(t.data)) return false;
        }
        return true;
    }

    friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.items_ == b.items_; }

private:
    int find_index(std::string_view name) const {
        for (std::size_t i = 0; i < items_.size(); ++i) {
            if (items_[i].first == name) return static_cast<int>(i);
        }
        return -1;
    }

    std::vector<std::pair<std::string, TensorValue>> items_;
};

}  // namespace loopworld
