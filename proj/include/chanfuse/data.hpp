#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chanfuse/tensor.hpp"

namespace chanfuse {

enum class MotionClass : std::uint8_t {
  left, right, up, down, grow, shrink, rotate_cw, rotate_ccw
};

std::string to_string(MotionClass c);
MotionClass parse_motion_class(const std::string& name);
/// Comma-separated list, e.g. "left,right".
std::vector<MotionClass> parse_motion_classes(const std::string& list);
std::string join_motion_classes(const std::vector<MotionClass>& classes);
/// The class whose clips are this class's clips played backwards.
MotionClass reversal_of(MotionClass c);

struct SynthMotionSpec {
  Index n_samples = 2000;
  Index frames = 8;
  Index height = 32;
  Index width = 32;
  std::vector<MotionClass> classes = {MotionClass::left, MotionClass::right};
  double noise_std = 0.02;
  std::uint64_t seed = 0;

  /// Throws ConfigError on invalid or degenerate settings.
  void validate() const;
  /// key=value lines.
  std::string manifest() const;
};

/// In-memory dataset: u8 pixels, sample-major [n x T x c x h x w].
struct Dataset {
  Index n = 0, frames = 0, channels = 1, height = 0, width = 0, num_classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;

  Index clip_size() const { return frames * channels * height * width; }
};

struct VideoBatch {
  Tensor clips;  ///< [n x T x c x h x w], values in [0, 1]
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  /// Frames folded into the batch axis: [(n*T) x c x h x w].
  Tensor folded() const;
};

/// Deterministic: output depends only on the spec. Sample i has class
/// classes[i % K] and draws from its own stream derive_seed(seed, i).
Dataset generate(const SynthMotionSpec& spec);

/// Gathers samples by index and dequantizes u8 -> [0, 1].
VideoBatch make_batch(const Dataset& data, std::span<const Index> indices);

inline constexpr std::uint8_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 5 + 1 + 6 * 4;

/// "AFSV1" format, see docs/formats.md.
std::vector<char> serialize_dataset(const Dataset& data);
Dataset parse_dataset(const std::vector<char>& bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);
/// Writes `path` and `path.manifest`.
void write_dataset_files(const std::filesystem::path& path, const SynthMotionSpec& spec,
                         const Dataset& data);
std::filesystem::path manifest_path(const std::filesystem::path& dataset_path);

/// Streams batches in file order. The whole file is validated on open, so a
/// truncated or corrupt file fails before any batch is produced.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path);
  const Dataset& dataset() const { return data_; }
  std::optional<VideoBatch> next(Index batch_size);
  void rewind() { cursor_ = 0; }

 private:
  Dataset data_;
  Index cursor_ = 0;
};

}  // namespace chanfuse
