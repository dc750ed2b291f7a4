#pragma once

// Error taxonomy shared by the whole library. The CLI maps these to exit
// codes: ContractError -> 2, NumericError -> 3, anything else -> 1.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

namespace loopworld {

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch in a tensor computation; message names the offending layer.
struct DimensionError : ContractError {
    using ContractError::ContractError;
};

// NaN/Inf surfaced where finiteness is part of the contract.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// On-disk artifact failed to load. `kind` distinguishes the documented
// cases: wrong format version; file shorter than its own structure claims;
// structurally unreadable bytes (bad magic, garbled record framing); and
// well-formed data whose content breaks an invariant (e.g. a manifest count
// that disagrees with the records actually present).
struct PersistenceError : IoError {
    enum class Kind { version_mismatch, truncated, corrupt, invariant_violation };
    Kind kind;
    PersistenceError(Kind k, const std::string& msg) : IoError(msg), kind(k) {}
};

inline const char* persistence_kind_name(PersistenceError::Kind k) {
    switch (k) {
        case PersistenceError::Kind::version_mismatch: return "version_mismatch";
        case PersistenceError::Kind::truncated: return "truncated";
        case PersistenceError::Kind::corrupt: return "corrupt";
        case PersistenceError::Kind::invariant_violation: return "invariant_violation";
    }
    return "corrupt";
}

// A rendered frame whose object plane carries no mass cannot be judged.
struct UndecodableError : ContractError {
    using ContractError::ContractError;
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace loopworld
