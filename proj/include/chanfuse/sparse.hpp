#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chanfuse/model.hpp"

namespace chanfuse::sparse {

/// Operation counts of a direct-loop convolution. One multiply-accumulate per
/// weight tap, one bias add per output element.
struct ConvCount {
  Index macs = 0;
  Index bias_adds = 0;
  Index total() const { return macs + bias_adds; }
};

/// Direct loop convolution of one image [c x h x w] into [c_out x h' x w'],
/// computing only the output channels flagged in `out_mask` and reading only
/// the input channels flagged in `in_mask` (empty mask = all). Unselected
/// outputs are left untouched.
void conv_loop(const double* x, Index c, Index h, Index w, const Tensor& weight,
               const Tensor& bias, Index stride, Index padding, std::span<const std::uint8_t> out_mask,
               std::span<const std::uint8_t> in_mask, double* out, ConvCount* count);

/// Counts for the two convolutions around one gate.
struct BlockCount {
  Index channels = 0;        ///< c', width of the gated map
  Index upstream = 0;        ///< MACs + bias adds of the computed upstream channels
  Index downstream_macs = 0; ///< MACs of the downstream conv over non-skipped inputs
  /// Downstream bias adds, each weighted by the number of active input
  /// channels it serves; divide by c' for the prorated count.
  Index downstream_bias_weighted = 0;

  /// Upstream + downstream MACs + prorated downstream bias.
  double flops() const;
};

/// Evaluation-mode gated block computed on demand for one clip: an upstream
/// channel is evaluated at frame t only when it is kept at t or reused at
/// t+1, and the downstream conv reads only non-skipped channels. `x` is the
/// block input [T x c x h x w] (after any channel shift), `decisions` is
/// [T x c']. Returns the fused map and the downstream conv output (pre-BN).
struct BlockResult {
  std::vector<double> fused;       ///< T x c' x h' x w'
  std::vector<double> downstream;  ///< T x c'' x h'' x w''
  Index out_h = 0, out_w = 0;
  BlockCount count;
};
BlockResult gated_block(const ResidualBlock& block, const Tensor& x,
                        std::span<const std::uint8_t> decisions);

struct NetCount {
  std::vector<BlockCount> gated;  ///< per gated block, summed over clips
  ConvCount fixed;                ///< every conv outside gated pairs
};

/// Evaluation-mode network forward with on-demand channel computation in
/// gated blocks. `decisions` holds one (clip, frame, channel) array per gated
/// block. Returns frame logits [(n*T) x K].
Tensor forward(const ToyNet& net, const Tensor& clips,
               const std::vector<std::vector<std::uint8_t>>& decisions, NetCount* count = nullptr);

}  // namespace chanfuse::sparse
