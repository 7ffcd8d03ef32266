#pragma once

#include "survmil/amil.hpp"

#include <cstdint>
#include <iosfwd>

namespace survmil {

/// Checkpoint header preceding the model payload: magic "AMC1", u8 model
/// kind, u32 feature_dim, u64 seed, u32 epoch (little-endian). The payload is
/// the "AMW1" weight blob for network and linear models, or the forest blob
/// for rsf.
struct CheckpointMeta {
    ModelKind kind = ModelKind::amil;
    std::uint32_t feature_dim = 0;
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;
};

void write_checkpoint_header(std::ostream& os, const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_header(std::istream& is);

}  // namespace survmil
