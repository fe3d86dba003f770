#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "chanfuse/tensor.hpp"

namespace chanfuse {

/// Decisions of one gated block for a set of clips, laid out
/// (sample, frame, channel). `soft` holds the relaxed sample (3 per decision)
/// when it was recorded and is empty otherwise.
struct BlockTrace {
  Index block = 0;
  Index samples = 0;
  Index frames = 0;
  Index channels = 0;
  std::vector<std::uint8_t> decisions;
  std::vector<double> soft;

  std::uint8_t at(Index sample, Index frame, Index channel) const {
    return decisions[static_cast<std::size_t>((sample * frames + frame) * channels + channel)];
  }
  /// Fractions of (keep, reuse, skip).
  std::array<double, 3> fractions() const;
  void validate() const;
};

/// One record per gated block.
using PolicyTrace = std::vector<BlockTrace>;

/// Appends the samples of `more` to `into`, block by block.
void append_trace(PolicyTrace& into, const PolicyTrace& more);

/// CSV with header `block_id,sample_id,frame,channel,decision`.
void write_trace_csv(std::ostream& os, const PolicyTrace& trace, Index sample_offset = 0);
void write_trace_csv(const std::filesystem::path& path, const PolicyTrace& trace);
PolicyTrace read_trace_csv(const std::filesystem::path& path);

/// JSON summary: per block keep/reuse/skip fractions.
void write_trace_summary(const std::filesystem::path& path, const PolicyTrace& trace);

}  // namespace chanfuse
