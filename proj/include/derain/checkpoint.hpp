#pragma once

#include <string>
#include <vector>

#include "derain/network.hpp"
#include "derain/tensor.hpp"

namespace derain {

// On-disk model snapshot. Entries are named f32 tensors; besides the model
// parameters the file carries meta.* entries (enough to rebuild the
// architecture) and whatever extra state the caller wants to ride along
// (optimizer moments, online-update bookkeeping).
struct CheckpointEntry {
    std::string name;
    Shape4 shape{1, 1, 1, 1};
    std::vector<float> values;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;
};

void checkpoint_write(const std::string& path, const Checkpoint& ck);
Checkpoint checkpoint_read(const std::string& path);

Checkpoint checkpoint_pack(const CollaborativeModel<float>& model,
                           const std::vector<CheckpointEntry>& extras = {});

// Copies parameter entries into an existing model, validating names and
// shapes. Non-parameter entries (other than meta.*) are appended to
// extras_out in file order when it is non-null.
void checkpoint_restore(CollaborativeModel<float>& model, const Checkpoint& ck,
                        std::vector<CheckpointEntry>* extras_out = nullptr);

ModelConfig checkpoint_config(const Checkpoint& ck);

void checkpoint_save(const std::string& path, const CollaborativeModel<float>& model,
                     const std::vector<CheckpointEntry>& extras = {});
CollaborativeModel<float> checkpoint_load(const std::string& path,
                                          std::vector<CheckpointEntry>* extras_out = nullptr);

}  // namespace derain
