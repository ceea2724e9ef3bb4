#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rot/optim.hpp"

namespace rot {

// Flat named-tensor container. Layout:
//
//   rotckpt <n>
//   <name> <d0[,d1,...]> f32 <byte_offset>     (one line per tensor)
//
//   ... little-endian f32 payloads, offsets relative to the byte after the
//   blank separator line ...
//
// Round trips are bit-exact; that is what the freeze contracts hash.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

// Loads into existing tensors by name; every destination name must be present
// in the file and shapes must match.
void load_checkpoint_into(const std::string& path, std::vector<NamedTensor>& dst);

// FNV-1a over the raw f32 payload bytes of all tensors in list order,
// including names; used for freeze-contract verification.
uint64_t content_hash(const std::vector<NamedTensor>& tensors);
uint64_t file_hash(const std::string& path);

}  // namespace rot
