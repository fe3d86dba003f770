#include "chanfuse/gating.hpp"

#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

std::uint8_t argmax3(const double* v) {
  std::uint8_t best = 0;
  if (v[1] > v[best]) best = 1;
  if (v[2] > v[best]) best = 2;
  return best;
}

void check_logits(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 3) {
    throw DimensionError("policy logits must be [rows x 3], got " + shape_str(logits.shape()));
  }
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite policy logit");
  }
}

Tensor onehot_of(std::span<const std::uint8_t> decisions) {
  const Index rows = static_cast<Index>(decisions.size());
  Buffer v(sz(rows * 3), 0.0);
  for (Index r = 0; r < rows; ++r) {
    if (decisions[sz(r)] > kSkip) throw ContractError("decision code outside {0,1,2}");
    v[sz(r * 3 + decisions[sz(r)])] = 1.0;
  }
  return Tensor({rows, 3}, std::move(v));
}

}  // namespace

Tensor draw_gumbel_noise(Index rows, Rng& rng) {
  Buffer g(sz(rows * 3));
  for (double& v : g) v = rng.gumbel();
  return Tensor({rows, 3}, std::move(g));
}

GumbelSample gumbel_softmax(const Tensor& logits, double tau, Rng& rng, SamplePath path) {
  check_logits(logits);
  return gumbel_softmax(logits, draw_gumbel_noise(logits.dim(0), rng), tau, path);
}

GumbelSample gumbel_softmax(const Tensor& logits, const Tensor& noise, double tau,
                            SamplePath path) {
  check_logits(logits);
  if (!(tau > 0.0)) throw ContractError("gumbel_softmax: tau must be positive");
  if (noise.shape() != logits.shape()) throw DimensionError("gumbel_softmax: noise shape mismatch");

  const Tensor perturbed = add(log_softmax_last(logits), noise.detach());
  const Tensor soft = softmax_last(scale(perturbed, 1.0 / tau));

  GumbelSample s;
  const Index rows = logits.dim(0);
  s.decisions.resize(sz(rows));
  for (Index r = 0; r < rows; ++r) s.decisions[sz(r)] = argmax3(perturbed.ptr() + r * 3);
  s.soft.assign(soft.data().begin(), soft.data().end());
  s.onehot = path == SamplePath::soft ? soft : straight_through(onehot_of(s.decisions), soft);
  return s;
}

GumbelSample argmax_policy(const Tensor& logits) {
  check_logits(logits);
  const Index rows = logits.dim(0);
  GumbelSample s;
  s.decisions.resize(sz(rows));
  for (Index r = 0; r < rows; ++r) s.decisions[sz(r)] = argmax3(logits.ptr() + r * 3);
  const Tensor probs = softmax_last(logits.detach());
  s.soft.assign(probs.data().begin(), probs.data().end());
  s.onehot = onehot_of(s.decisions);
  return s;
}

GumbelSample fixed_policy(std::span<const std::uint8_t> decisions) {
  GumbelSample s;
  s.onehot = onehot_of(decisions);
  s.decisions.assign(decisions.begin(), decisions.end());
  s.soft.assign(s.onehot.data().begin(), s.onehot.data().end());
  return s;
}

PolicyNet make_policy_net(const std::string& name, Index c_in, Index c_out, Index hidden,
                          Rng& rng) {
  if (hidden <= 0) throw ConfigError("policy hidden units must be positive");
  PolicyNet net;
  net.fc1 = make_linear(name + ".fc1", 2 * c_in, hidden, rng);
  net.fc2 = {{name + ".fc2.weight", Tensor::zeros({3 * c_out, hidden})},
             {name + ".fc2.bias", Tensor::zeros({3 * c_out})}};
  return net;
}

Tensor policy_logits(const PolicyNet& net, ParamScope& scope, const Tensor& v_prev,
                     const Tensor& v_t) {
  const Tensor h = relu(linear(net.fc1, scope, concat_cols(v_prev, v_t)));
  const Tensor q = linear(net.fc2, scope, h);
  return q.reshape({q.numel() / 3, 3});
}

Tensor fuse(const Tensor& y_t, const Tensor& y_prev, std::span<const std::uint8_t> decisions) {
  if (y_t.shape() != y_prev.shape()) {
    throw DimensionError("fuse: shape mismatch " + shape_str(y_t.shape()) + " vs " +
                         shape_str(y_prev.shape()));
  }
  if (y_t.rank() != 4) throw DimensionError("fuse: expected NCHW maps");
  const Index n = y_t.dim(0), c = y_t.dim(1), hw = y_t.dim(2) * y_t.dim(3);
  const Index nd = static_cast<Index>(decisions.size());
  if (nd != c && nd != n * c) {
    throw DimensionError("fuse: " + std::to_string(nd) + " decisions for " +
                         shape_str(y_t.shape()));
  }
  Buffer out(sz(y_t.numel()), 0.0);
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const std::uint8_t d = decisions[sz(nd == c ? ch : i * c + ch)];
      if (d > kSkip) throw ContractError("fuse: decision code outside {0,1,2}");
      if (d == kSkip) continue;
      const double* src = (d == kKeep ? y_t.ptr() : y_prev.ptr()) + (i * c + ch) * hw;
      std::copy_n(src, hw, out.data() + (i * c + ch) * hw);
    }
  return Tensor(y_t.shape(), std::move(out));
}

Tensor fuse(const Tensor& y_t, const Tensor& y_prev, const Tensor& onehot) {
  if (y_t.shape() != y_prev.shape()) {
    throw DimensionError("fuse: shape mismatch " + shape_str(y_t.shape()) + " vs " +
                         shape_str(y_prev.shape()));
  }
  const Index n = y_t.dim(0), c = y_t.dim(1);
  if (onehot.numel() != n * c * 3) {
    throw DimensionError("fuse: policy " + shape_str(onehot.shape()) + " does not cover " +
                         shape_str(y_t.shape()));
  }
  const Tensor keep = select_last(onehot, 0).reshape({n, c});
  const Tensor reuse = select_last(onehot, 1).reshape({n, c});
  return add(channel_scale(y_t, keep), channel_scale(y_prev, reuse));
}

double conv_flops(Index c_out, Index h_out, Index w_out, Index k, Index c_in) {
  return static_cast<double>(c_out * h_out * w_out * (k * k * c_in + 1));
}

double block_cost(std::span<const std::uint8_t> decisions, Index frames, Index channels,
                  double m_x, double m_y) {
  if (frames < 1 || channels < 1) throw ContractError("block_cost: T and c' must be positive");
  if (static_cast<Index>(decisions.size()) != frames * channels) {
    throw DimensionError("block_cost: expected T*c' decisions");
  }
  // Integer numerators first so the single division is the only rounding.
  Index upstream = 0;
  Index downstream = 0;
  for (Index t = 0; t < frames; ++t) {
    for (Index i = 0; i < channels; ++i) {
      const std::uint8_t p = decisions[sz(t * channels + i)];
      if (p > kSkip) throw ContractError("block_cost: decision code outside {0,1,2}");
      const std::uint8_t next = t + 1 < frames ? decisions[sz((t + 1) * channels + i)] : kSkip;
      if (next > kSkip) throw ContractError("block_cost: decision code outside {0,1,2}");
      if (p == kKeep || next == kReuse) ++upstream;
      if (p != kSkip) ++downstream;
    }
  }
  return (m_x * static_cast<double>(upstream) + m_y * static_cast<double>(downstream)) /
         static_cast<double>(channels);
}

Tensor block_cost_relaxed(const Tensor& onehot, Index frames, Index channels, double m_x,
                          double m_y) {
  if (frames < 1 || channels < 1) throw ContractError("block_cost: T and c' must be positive");
  const Index rows = onehot.numel() / 3;
  if (onehot.numel() % 3 != 0 || rows % (frames * channels) != 0) {
    throw DimensionError("block_cost_relaxed: policy " + shape_str(onehot.shape()) +
                         " is not (n*T*c') x 3");
  }
  const Index clips = rows / (frames * channels);
  const Tensor oh = onehot.reshape({rows, 3});
  const Tensor keep = select_last(oh, 0).reshape({clips * frames, channels});
  const Tensor reuse = select_last(oh, 1).reshape({clips * frames, channels});
  const Tensor skip = select_last(oh, 2);
  const Tensor reuse_next = time_shift(reuse, frames, -1);
  // Relaxed "kept now or reused next": k + r' - k r'.
  const Tensor upstream = sub(add(keep, reuse_next), mul(keep, reuse_next));
  const double denom = static_cast<double>(channels * clips);
  const Tensor m = add(scale(sum(upstream), m_x / denom), scale(sum(skip), -m_y / denom));
  return add_scalar(m, m_y * static_cast<double>(frames));
}

GateOutput gate_forward(const FusionGate& gate, ParamScope& scope, const Tensor& x, Index frames,
                        const std::function<Tensor(const Tensor&)>& upstream, Rng& rng, Mode mode,
                        const PolicyOverride& override_policy, SamplePath path,
                        const Tensor* frozen_noise) {
  if (x.rank() != 4 || x.dim(0) % frames != 0) {
    throw ContractError("gate_forward: input " + shape_str(x.shape()) +
                        " is not (n*T) x c x h x w with T=" + std::to_string(frames));
  }
  GateOutput out;
  out.raw = upstream(x);
  if (override_policy) {
    out.sample = override_policy(out.raw);
  } else {
    const Tensor v_t = global_avg_pool(x);
    const Tensor v_prev = time_shift(v_t, frames, 1);
    const Tensor logits = policy_logits(gate.policy, scope, v_prev, v_t);
    if (frozen_noise) {
      out.sample = gumbel_softmax(logits, *frozen_noise, gate.tau, path);
    } else if (mode == Mode::train) {
      out.sample = gumbel_softmax(logits, gate.tau, rng, path);
    } else {
      out.sample = argmax_policy(logits);
    }
  }
  const Tensor history = time_shift(out.raw, frames, 1);
  out.fused = fuse(out.raw, history, out.sample.onehot);
  return out;
}

}  // namespace chanfuse
