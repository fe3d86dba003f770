#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "chanfuse/layers.hpp"

namespace chanfuse {

/// Per-channel fusion decision codes.
enum class Decision : std::uint8_t { keep = 0, reuse = 1, skip = 2 };

inline constexpr std::uint8_t kKeep = 0;
inline constexpr std::uint8_t kReuse = 1;
inline constexpr std::uint8_t kSkip = 2;

/// How the relaxed one-hot tensor behaves under differentiation.
enum class SamplePath {
  straight_through,  ///< forward hard one-hot, backward through the soft sample
  soft,              ///< forward and backward through the soft sample
};

/// One ternary sample per row of a [rows x 3] logit matrix.
struct GumbelSample {
  Tensor onehot;                        ///< [rows x 3], see SamplePath
  std::vector<double> soft;             ///< rows * 3, each row sums to 1
  std::vector<std::uint8_t> decisions;  ///< rows, argmax of the perturbed logits

  Index rows() const { return static_cast<Index>(decisions.size()); }
};

/// Standard Gumbel noise, shape [rows x 3].
Tensor draw_gumbel_noise(Index rows, Rng& rng);

/// Gumbel-softmax sample: decision = argmax(log softmax(q) + G), soft =
/// softmax((log softmax(q) + G) / tau).
GumbelSample gumbel_softmax(const Tensor& logits, double tau, Rng& rng,
                            SamplePath path = SamplePath::straight_through);
/// Same with caller-supplied (frozen) noise.
GumbelSample gumbel_softmax(const Tensor& logits, const Tensor& noise, double tau,
                            SamplePath path = SamplePath::straight_through);

/// Deterministic policy: argmax of the logits, ties to the lowest code.
GumbelSample argmax_policy(const Tensor& logits);
/// Constant one-hot sample for externally chosen decisions.
GumbelSample fixed_policy(std::span<const std::uint8_t> decisions);

/// Two fully-connected layers with a ReLU between: [v_prev; v_t] (2c) -> H -> 3c'.
struct PolicyNet {
  LinearLayer fc1;
  LinearLayer fc2;

  Index in_channels() const { return fc1.in_features() / 2; }
  Index hidden_units() const { return fc1.out_features(); }
  Index out_channels() const { return fc2.out_features() / 3; }
  Index param_count() const { return fc1.param_count() + fc2.param_count(); }
};

/// fc2 starts at zero so initial policies are uniform.
PolicyNet make_policy_net(const std::string& name, Index c_in, Index c_out, Index hidden, Rng& rng);

/// Pooled features [n x c] twice -> logits [(n*c') x 3].
Tensor policy_logits(const PolicyNet& net, ParamScope& scope, const Tensor& v_prev,
                     const Tensor& v_t);

/// Case analysis: channel i of row n is y_t if keep, y_prev if reuse, zero if
/// skip. `decisions` has either c' entries (shared by all rows) or n*c'.
Tensor fuse(const Tensor& y_t, const Tensor& y_prev, std::span<const std::uint8_t> decisions);
/// Differentiable form onehot[:,0] * y_t + onehot[:,1] * y_prev, with onehot
/// [(n*c') x 3].
Tensor fuse(const Tensor& y_t, const Tensor& y_prev, const Tensor& onehot);

/// Analytic convolution cost c' * h' * w' * (k*k*c + 1).
double conv_flops(Index c_out, Index h_out, Index w_out, Index k, Index c_in);

/// Cost of the two convolutions around one gate for one clip, given its
/// decisions laid out [T x c']. Channel i is charged to the upstream conv at
/// frame t when kept at t or reused at t+1; the downstream conv pays for the
/// fraction of non-skipped channels. Frame T is treated as all-skip.
double block_cost(std::span<const std::uint8_t> decisions, Index frames, Index channels,
                  double m_x, double m_y);

/// Differentiable block_cost averaged over the clips of a batch. `onehot` is
/// [(n*T*c') x 3] with rows ordered (clip, frame, channel).
Tensor block_cost_relaxed(const Tensor& onehot, Index frames, Index channels, double m_x,
                          double m_y);

struct FusionGate {
  PolicyNet policy;
  double m_x = 0.0;  ///< upstream conv cost per frame
  double m_y = 0.0;  ///< downstream conv cost per frame
  double tau = 0.67;
};

struct GateOutput {
  Tensor fused;        ///< [(n*T) x c' x h' x w']
  Tensor raw;          ///< upstream output before fusion
  GumbelSample sample; ///< rows ordered (clip, frame, channel)
};

/// Replaces the learned policy; receives the raw upstream output.
using PolicyOverride = std::function<GumbelSample(const Tensor& raw)>;

/// Runs a gate over all frames of a batch of clips folded on the leading axis.
/// Pass one pools x_t and x_{t-1} (zeros at t = 0) and picks a policy per
/// frame; pass two fuses the upstream output with its own previous frame
/// (zeros at t = 0).
GateOutput gate_forward(const FusionGate& gate, ParamScope& scope, const Tensor& x, Index frames,
                        const std::function<Tensor(const Tensor&)>& upstream, Rng& rng, Mode mode,
                        const PolicyOverride& override_policy = {},
                        SamplePath path = SamplePath::straight_through,
                        const Tensor* frozen_noise = nullptr);

}  // namespace chanfuse
