#pragma once

// Checkpoint layout: a directory holding
//   manifest.txt  - one line per parameter: name, element offset, shape
//   weights.bin   - flat little-endian float64 blob
// Save -> load round trips are bit-exact.

#include <string>
#include <vector>

#include "msformer/optim.hpp"

namespace msformer {

void save_checkpoint(const std::string& dir, const std::vector<Parameter>& params);

// Loads into an existing parameter list; names and shapes must match the
// manifest exactly, otherwise a CheckpointError describes the first mismatch.
void load_checkpoint(const std::string& dir, std::vector<Parameter>& params);

}  // namespace msformer
