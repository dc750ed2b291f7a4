#pragma once

// Helpers shared by the test binaries.

#include <cstring>
#include <filesystem>
#include <random>
#include <string>

#include "loopworld/tensor.hpp"

namespace testsupport {

// Exact bit equality over every tensor in two ParamSets.
inline bool bitwise_equal(const loopworld::ParamSet& a, const loopworld::ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [na, ta] = a.item(i);
        const auto& [nb, tb] = b.item(i);
        if (na != nb || ta.shape != tb.shape) return false;
        if (ta.data.size() != tb.data.size()) return false;
        if (!ta.data.empty() &&
            std::memcmp(ta.data.data(), tb.data.data(), ta.data.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

// Fresh scratch directory under the system temp root.
inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::mt19937_64 gen(std::random_device{}());
    const auto dir = std::filesystem::temp_directory_path() /
                     ("loopworld_" + tag + "_" + std::to_string(gen()));
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testsupport
