#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "chanfuse/model.hpp"

namespace chanfuse {

/// Binary checkpoint "AFCK" (layout in docs/formats.md).
struct Checkpoint {
  std::string config_echo;
  struct Blob {
    std::string name;
    Tensor value;
  };
  std::vector<Blob> blobs;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Parameters and batch-norm buffers of `net`, in their fixed order.
Checkpoint make_checkpoint(ToyNet& net, std::string config_echo);
/// Copies blobs into a net built from the same configuration. Every
/// parameter and buffer must be present with a matching shape.
void restore_checkpoint(ToyNet& net, const Checkpoint& ckpt);

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace chanfuse
