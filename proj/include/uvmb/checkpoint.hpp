#pragma once

#include <string>

#include "uvmb/model.hpp"

namespace uvmb {

// Checkpoints are a pair of files sharing a prefix:
//   <prefix>.json  manifest: magic, version, model config, tensor table
//                  (name, shape, dtype, byte offset into the blob file)
//   <prefix>.bin   blob: the magic string "UVMB1" followed by little-endian
//                  32-bit floats in manifest order
inline constexpr char kCheckpointMagic[] = "UVMB1";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& prefix, const SegModel<float>& model);

// Accepts the prefix or the .json path. Throws CheckpointError on magic or
// version mismatch, missing tensors, or shape disagreements.
ModelConfig load_checkpoint_config(const std::string& prefix_or_json);
SegModel<float> load_checkpoint(const std::string& prefix_or_json);

}  // namespace uvmb
