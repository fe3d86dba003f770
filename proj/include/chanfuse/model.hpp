#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "chanfuse/gating.hpp"
#include "chanfuse/layers.hpp"
#include "chanfuse/trace.hpp"

namespace chanfuse {

/// Backbone flavour.
///  plain       per-frame CNN with consensus, no gates
///  gated       plain backbone with gates where `gated` says so
///  shift       channel-shifted backbone with gates where `gated` says so
///  shift-last  channel-shifted backbone, gates only in the last ceil(B/4) blocks
enum class Variant { plain, gated, shift, shift_last };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct BlockSpec {
  Index in_channels;
  Index out_channels;
  Index stride;
};

struct ToyNetConfig {
  Index in_channels = 1;
  Index stem_channels = 16;
  std::vector<BlockSpec> blocks = {{16, 16, 1}, {16, 32, 2}, {32, 32, 1}, {32, 64, 2}};
  std::vector<bool> gated = {true, true, true, true};
  Variant variant = Variant::gated;
  Index num_classes = 2;
  Index frames = 8;
  Index policy_hidden = 64;
  double tau = 0.67;
  double shift_fraction = 0.125;
  std::uint64_t seed = 0;

  /// Gate placement after applying the variant rules.
  std::vector<bool> effective_gates() const;
  bool uses_shift() const { return variant == Variant::shift || variant == Variant::shift_last; }
  void validate() const;
};

struct ResidualBlock {
  Conv2dLayer conv1;
  BatchNormLayer bn1;
  Conv2dLayer conv2;
  BatchNormLayer bn2;
  std::optional<Conv2dLayer> proj;
  std::optional<BatchNormLayer> proj_bn;
  std::optional<FusionGate> gate;
  bool shift = false;
};

/// conv stem -> residual blocks (conv-BN-ReLU-[gate]-conv-BN + skip, ReLU)
/// -> global pool -> linear, applied to every frame with shared weights.
struct ToyNet {
  ToyNetConfig config;
  Conv2dLayer stem;
  BatchNormLayer stem_bn;
  std::vector<ResidualBlock> blocks;
  LinearLayer fc;
};

/// Backbone weights depend only on the seed and the block layout, so a gated
/// and an ungated net built from the same config share them.
ToyNet make_toynet(const ToyNetConfig& config);

/// All trainable parameters in a fixed order.
std::vector<Parameter*> parameters(ToyNet& net);
std::vector<const Parameter*> parameters(const ToyNet& net);
/// Batch-norm running statistics, named, in a fixed order.
std::vector<std::pair<std::string, Tensor*>> buffers(ToyNet& net);

Index count_params(const ToyNet& net);

struct BaselinePolicy {
  enum class Kind { none, random, threshold, forced };
  Kind kind = Kind::none;
  std::array<double, 3> dist = {1.0, 0.0, 0.0};  ///< keep, reuse, skip (random)
  double keep_ratio = 1.0;                       ///< threshold
  std::uint8_t forced = kKeep;                   ///< forced

  void validate() const;
};

struct BaselineResult {
  std::vector<std::uint8_t> decisions;  ///< n * c'
  Tensor fused;
};

/// Decisions from a non-learned policy for maps [n x c' x h x w], then fusion.
std::vector<std::uint8_t> baseline_decisions(const BaselinePolicy& policy, const Tensor& y_t,
                                             Rng& rng);
BaselineResult apply_baseline_policy(const BaselinePolicy& policy, const Tensor& y_t,
                                     const Tensor& y_prev, Rng& rng);

struct BlockCost {
  Index block = 0;
  bool gated = false;
  double m_x = 0.0;
  double m_y = 0.0;
  double flops = 0.0;  ///< mean per clip
  double util = 1.0;   ///< flops / (T (m_x + m_y))
};

/// Hard-decision cost, averaged over the clips of a forward pass.
struct CostReport {
  std::vector<BlockCost> blocks;
  double fixed_flops = 0.0;  ///< stem and projection convs, per clip
  double total_flops = 0.0;  ///< per clip
  double mean_util = 1.0;    ///< mean util over gated blocks (1 without gates)
  Index clips = 0;
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;
  BaselinePolicy baseline;
  /// Explicit decisions per gated block, (clip, frame, channel) layout.
  const std::vector<std::vector<std::uint8_t>>* decisions = nullptr;
  /// Frozen Gumbel noise per gated block, [(n*T*c') x 3].
  const std::vector<Tensor>* noise = nullptr;
  SamplePath path = SamplePath::straight_through;
  bool record_soft = false;
};

struct ForwardResult {
  Tensor frame_logits;   ///< [(n*T) x K]
  Tensor video_logits;   ///< [n x K], frame average
  Tensor relaxed_util;   ///< scalar, mean over gates of relaxed normalized cost (0 without gates)
  Tensor relaxed_flops;  ///< scalar, sum over gates of relaxed raw cost per clip
  std::vector<Tensor> gate_utils;  ///< per gate, relaxed cost / (T (m_x + m_y))
  std::vector<Tensor> gate_flops;  ///< per gate, relaxed raw cost per clip
  PolicyTrace trace;
  CostReport cost;
  std::vector<Tensor> gate_outputs;  ///< fused maps per gated block
};

/// Forward over `clips` frames folded as [(n*T) x c x h x w].
ForwardResult forward(ToyNet& net, ParamScope& scope, const Tensor& clips,
                      const ForwardOptions& options);

/// Single clip [T x c x h x w] -> per-frame logits, trace and cost.
ForwardResult forward_clip(ToyNet& net, const Tensor& clip, Rng& rng, Mode mode);

/// Frame average [T x K] -> [K].
Tensor consensus(const Tensor& frame_logits);

/// Analytic cost of every conv layer for the configured input size.
struct LayerFlops {
  std::string name;
  Index block = -1;  ///< -1 for layers outside residual blocks
  double flops = 0.0;
};
std::vector<LayerFlops> layer_flops(const ToyNet& net, Index height, Index width);
/// T * sum of all conv costs: what every clip pays without gating.
double dense_flops(const ToyNet& net, Index height, Index width);

/// The same network without gates (shares weights).
ToyNet strip_gates(const ToyNet& net);

}  // namespace chanfuse
