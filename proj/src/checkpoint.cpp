#include "survmil/checkpoint.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace survmil {

namespace {

constexpr char kMagic[4] = {'A', 'M', 'C', '1'};

void put_bytes(std::ostream& os, std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) {
        const char b = static_cast<char>(v >> (8 * i));
        os.write(&b, 1);
    }
}

std::uint64_t get_bytes(std::istream& is, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
        unsigned char b;
        is.read(reinterpret_cast<char*>(&b), 1);
        if (!is) throw std::runtime_error("checkpoint: truncated header");
        v |= static_cast<std::uint64_t>(b) << (8 * i);
    }
    return v;
}

}  // namespace

void write_checkpoint_header(std::ostream& os, const CheckpointMeta& meta) {
    os.write(kMagic, 4);
    put_bytes(os, static_cast<std::uint64_t>(meta.kind), 1);
    put_bytes(os, meta.feature_dim, 4);
    put_bytes(os, meta.seed, 8);
    put_bytes(os, meta.epoch, 4);
    if (!os) throw std::runtime_error("checkpoint: header write failed");
}

CheckpointMeta read_checkpoint_header(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic, expected AMC1");
    CheckpointMeta meta;
    const auto kind = get_bytes(is, 1);
    if (kind > static_cast<std::uint64_t>(ModelKind::rsf))
        throw std::runtime_error("checkpoint: unknown model kind byte");
    meta.kind = static_cast<ModelKind>(kind);
    meta.feature_dim = static_cast<std::uint32_t>(get_bytes(is, 4));
    meta.seed = get_bytes(is, 8);
    meta.epoch = static_cast<std::uint32_t>(get_bytes(is, 4));
    return meta;
}

}  // namespace survmil
