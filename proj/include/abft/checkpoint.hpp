#pragma once

// Binary model checkpoints. Wire format, all integers little-endian:
//   8 bytes  magic "ABFTCKPT"
//   4 bytes  format version (currently 1)
//   8 bytes  config text length
//   N bytes  UTF-8 config text
//   per tensor, in the model's canonical parameter order:
//     2 bytes   rank
//     8 bytes   per extent
//     raw float32 payload
//   8 bytes  FNV-1a checksum over everything after the version field
// Round trips are bit-exact; any header, shape, truncation, or checksum
// problem rejects the whole file.

#include <string>
#include <vector>

#include "abft/model.hpp"

namespace abft {

inline constexpr char kCheckpointMagic[8] = {'A', 'B', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model, const std::string& config_text);

struct LoadedCheckpoint {
    Model model;
    std::string config_text;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

struct CheckpointInfo {
    uint32_t version = 0;
    std::string config_text;
    std::vector<std::vector<int>> tensor_shapes;
    int64_t total_parameters = 0;
};

CheckpointInfo inspect_checkpoint(const std::string& path);

}  // namespace abft
