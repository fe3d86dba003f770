#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "chanfuse/rng.hpp"
#include "chanfuse/tensor.hpp"

namespace chanfuse {

enum class Mode { train, eval };

/// A named trainable array. The value is replaced, never mutated, on update.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Resolves parameters for one forward pass. With a tape every parameter is
/// watched once and its gradient can be read back after backward(); without a
/// tape the raw values are used.
class ParamScope {
 public:
  ParamScope() = default;
  explicit ParamScope(Tape& tape) : tape_(&tape) {}

  Tensor use(const Parameter& p);
  /// Gradient of a parameter used in this scope (zeros if unused).
  Tensor grad(const Parameter& p) const;
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::unordered_map<const Parameter*, Tensor> watched_;
};

/// Output size of a convolution along one spatial axis.
Index conv_out_size(Index in, Index kernel, Index stride, Index padding);

struct Conv2dLayer {
  Parameter weight;  // [c_out x k x k x c_in]
  Parameter bias;    // [c_out]
  Index stride = 1;
  Index padding = 0;

  Index out_channels() const { return weight.value.dim(0); }
  Index kernel() const { return weight.value.dim(1); }
  Index in_channels() const { return weight.value.dim(3); }
  /// c' * h' * w' * (k*k*c + 1) for an input of spatial size h x w.
  double flops(Index in_h, Index in_w) const;
  Index param_count() const { return weight.value.numel() + bias.value.numel(); }
};

/// Kaiming-uniform fan-in initialization for weight and bias.
Conv2dLayer make_conv2d(const std::string& name, Index c_in, Index c_out, Index k, Index stride,
                        Index padding, Rng& rng);

struct BatchNormLayer {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  Index channels() const { return gamma.value.numel(); }
  Index param_count() const { return gamma.value.numel() + beta.value.numel(); }
};

BatchNormLayer make_batch_norm(const std::string& name, Index channels);

struct LinearLayer {
  Parameter weight;  // [out x in]
  Parameter bias;    // [out]

  Index in_features() const { return weight.value.dim(1); }
  Index out_features() const { return weight.value.dim(0); }
  Index param_count() const { return weight.value.numel() + bias.value.numel(); }
};

LinearLayer make_linear(const std::string& name, Index in, Index out, Rng& rng);

// Functional forms. All inputs are NCHW with frames folded into N.

/// Cross-correlation plus bias. weight is [c_out x k x k x c_in].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
              Index padding);
Tensor conv2d(const Conv2dLayer& layer, ParamScope& scope, const Tensor& x);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Normalizes with the batch statistics over (n, h, w) per channel.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        BatchStats* stats = nullptr);
/// Per-channel affine with fixed statistics.
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double eps);
/// Train mode also folds the batch statistics into the running estimates.
Tensor batch_norm(BatchNormLayer& layer, ParamScope& scope, const Tensor& x, Mode mode);

/// [n x c x h x w] -> [n x c]
Tensor global_avg_pool(const Tensor& x);

/// x . w^T + b; x is [n x in], w is [out x in].
Tensor linear(const Tensor& w, const Tensor& b, const Tensor& x);
Tensor linear(const LinearLayer& layer, ParamScope& scope, const Tensor& x);

/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Simplified channel shift over frames: the first floor(fraction*c) channels
/// of frame t come from frame t-1, the next floor(fraction*c) from frame t+1,
/// zeros past the clip boundary.
Tensor temporal_shift(const Tensor& x, Index frames, double fraction);

/// x[n, c, :, :] * s[n, c]
Tensor channel_scale(const Tensor& x, const Tensor& s);

}  // namespace chanfuse
