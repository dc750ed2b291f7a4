#pragma once

// Binary parameter snapshots. Layout (all integers little-endian):
//   magic   "LWND" (4 bytes)
//   version u32, currently 1
//   then per tensor, in ParamSet insertion order:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64 * rank
//     payload  f64 * product(dims), IEEE-754 bit pattern little-endian
// No tensor count field: readers consume records until EOF, so a clean EOF
// at a record boundary is the only valid end. Anything shorter is
// PersistenceError{truncated}; bad magic or garbled structure is {corrupt};
// an unknown version is {version_mismatch}.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "loopworld/common.hpp"
#include "loopworld/tensor.hpp"

namespace loopworld {

inline constexpr char kCheckpointMagic[4] = {'L', 'W', 'N', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void read_raw(char* dst, std::size_t n, const char* what) {
        if (remaining() < n) {
            throw PersistenceError(PersistenceError::Kind::truncated,
                                   std::string("checkpoint ends mid-") + what);
        }
        std::copy(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n), dst);
        pos_ += n;
    }

    std::uint32_t read_u32(const char* what) {
        unsigned char b[4];
        read_raw(reinterpret_cast<char*>(b), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::uint64_t read_u64(const char* what) {
        unsigned char b[8];
        read_raw(reinterpret_cast<char*>(b), 8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }

    double read_f64(const char* what) { return std::bit_cast<double>(read_u64(what)); }

private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    for (const auto& [name, t] : params) {
        if (name.empty()) throw ContractError("save_checkpoint: empty tensor name");
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) detail::put_u64(out, d);
        for (double x : t.data) detail::put_f64(out, x);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("save_checkpoint: write failed for " + path.string());
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader r(std::move(bytes));

    char magic[4];
    r.read_raw(magic, 4, "magic");
    if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
        throw PersistenceError(PersistenceError::Kind::corrupt, "checkpoint: bad magic");
    }
    const std::uint32_t version = r.read_u32("version");
    if (version != kCheckpointVersion) {
        throw PersistenceError(PersistenceError::Kind::version_mismatch,
                               "checkpoint: version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
    }

    ParamSet out;
    while (!r.at_end()) {
        const std::uint32_t name_len = r.read_u32("name length");
        if (name_len == 0 || name_len > (1u << 20)) {
            throw PersistenceError(PersistenceError::Kind::corrupt,
                                   "checkpoint: implausible name length");
        }
        std::string name(name_len, '\0');
        r.read_raw(name.data(), name_len, "name");
        const std::uint32_t rank = r.read_u32("rank");
        if (rank > 8) {
            throw PersistenceError(PersistenceError::Kind::corrupt, "checkpoint: implausible rank");
        }
        std::vector<std::size_t> shape(rank);
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint64_t d = r.read_u64("dimension");
            if (d == 0 || d > (1ull << 32) || count > (1ull << 32) / d) {
                throw PersistenceError(PersistenceError::Kind::corrupt,
                                       "checkpoint: implausible tensor shape");
            }
            shape[i] = static_cast<std::size_t>(d);
            count *= d;
        }
        if (r.remaining() < count * 8) {
            throw PersistenceError(PersistenceError::Kind::truncated,
                                   "checkpoint ends mid-payload for '" + name + "'");
        }
        std::vector<double> data(count);
        for (std::uint64_t i = 0; i < count; ++i) data[i] = r.read_f64("payload");
        if (out.has(name)) {
            throw PersistenceError(PersistenceError::Kind::corrupt,
                                   "checkpoint: duplicate tensor '" + name + "'");
        }
        out.add(std::move(name), TensorValue(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace loopworld
