#pragma once

// Versioned binary checkpoints:
//   bytes 0..7   magic "EHRSQCKP"
//   bytes 8..11  format version, uint32 little-endian
//   bytes 12..19 header length H, uint64 little-endian
//   H bytes      JSON header: caller fields (model kind, hyperparameters,
//                vocab hash, ...) plus "params": [{name, rows, cols}, ...]
//   rest         raw float32 little-endian blocks, in header order
//
// Floats are written bit-for-bit, so save → load → score is bitwise
// reproducible.

#include <string>
#include <utility>
#include <vector>

#include "ehrseq/tensor.hpp"

#include <json.hpp>

namespace ehrseq::num {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> params;  // header order

    const Tensor& find(const std::string& name) const;
};

// `header` must not already contain "params"; the block table is appended.
void save_checkpoint(const std::string& path, nlohmann::json header,
                     const std::vector<std::pair<std::string, Tensor>>& params);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace ehrseq::num
