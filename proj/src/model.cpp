#include "chanfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::gated: return "gated";
    case Variant::shift: return "shift";
    case Variant::shift_last: return "shift-last";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "plain") return Variant::plain;
  if (s == "gated") return Variant::gated;
  if (s == "shift") return Variant::shift;
  if (s == "shift-last") return Variant::shift_last;
  throw ConfigError("unknown variant '" + s + "' (valid: plain, gated, shift, shift-last)");
}

std::vector<bool> ToyNetConfig::effective_gates() const {
  const std::size_t n = blocks.size();
  std::vector<bool> g(n, false);
  switch (variant) {
    case Variant::plain: break;
    case Variant::gated:
    case Variant::shift:
      for (std::size_t i = 0; i < n; ++i) g[i] = i < gated.size() && gated[i];
      break;
    case Variant::shift_last: {
      const std::size_t last = static_cast<std::size_t>(ceil_div(static_cast<Index>(n), 4));
      for (std::size_t i = n - last; i < n; ++i) g[i] = true;
      break;
    }
  }
  return g;
}

void ToyNetConfig::validate() const {
  if (in_channels < 1 || stem_channels < 1) throw ConfigError("channel counts must be positive");
  if (blocks.empty()) throw ConfigError("at least one block is required");
  Index c = stem_channels;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockSpec& b = blocks[i];
    if (b.in_channels != c) {
      throw ConfigError("block " + std::to_string(i) + " expects " + std::to_string(b.in_channels) +
                        " input channels but receives " + std::to_string(c));
    }
    if (b.out_channels < 1 || b.stride < 1) throw ConfigError("invalid block geometry");
    c = b.out_channels;
  }
  if (gated.size() != blocks.size() && variant != Variant::plain && variant != Variant::shift_last) {
    throw ConfigError("gated flags must have one entry per block");
  }
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (frames < 1) throw ConfigError("frames must be positive");
  if (policy_hidden < 1) throw ConfigError("policy_hidden must be positive");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (shift_fraction < 0.0 || shift_fraction > 0.5) throw ConfigError("shift_fraction outside [0, 0.5]");
}

ToyNet make_toynet(const ToyNetConfig& config) {
  config.validate();
  ToyNet net;
  net.config = config;
  Rng rng(derive_seed(config.seed, 0));
  net.stem = make_conv2d("stem.conv", config.in_channels, config.stem_channels, 3, 1, 1, rng);
  net.stem_bn = make_batch_norm("stem.bn", config.stem_channels);
  const auto gates = config.effective_gates();
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& spec = config.blocks[i];
    const std::string name = "blocks." + std::to_string(i);
    ResidualBlock b;
    b.conv1 = make_conv2d(name + ".conv1", spec.in_channels, spec.out_channels, 3, spec.stride, 1, rng);
    b.bn1 = make_batch_norm(name + ".bn1", spec.out_channels);
    b.conv2 = make_conv2d(name + ".conv2", spec.out_channels, spec.out_channels, 3, 1, 1, rng);
    b.bn2 = make_batch_norm(name + ".bn2", spec.out_channels);
    if (spec.stride != 1 || spec.in_channels != spec.out_channels) {
      b.proj = make_conv2d(name + ".proj", spec.in_channels, spec.out_channels, 1, spec.stride, 0, rng);
      b.proj_bn = make_batch_norm(name + ".proj_bn", spec.out_channels);
    }
    b.shift = config.uses_shift();
    if (gates[i]) {
      // Separate stream so gating never perturbs backbone initialization.
      Rng gate_rng(derive_seed(config.seed, 1000 + i));
      FusionGate gate;
      gate.policy = make_policy_net(name + ".gate", spec.in_channels, spec.out_channels,
                                    config.policy_hidden, gate_rng);
      gate.tau = config.tau;
      b.gate = std::move(gate);
    }
    net.blocks.push_back(std::move(b));
  }
  const Index c_last = config.blocks.back().out_channels;
  net.fc = make_linear("fc", c_last, config.num_classes, rng);
  return net;
}

namespace {

template <typename Net, typename P>
std::vector<P> collect(Net& net) {
  std::vector<P> out;
  auto conv = [&](auto& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  };
  auto bn = [&](auto& b) {
    out.push_back(&b.gamma);
    out.push_back(&b.beta);
  };
  conv(net.stem);
  bn(net.stem_bn);
  for (auto& b : net.blocks) {
    conv(b.conv1);
    bn(b.bn1);
    if (b.gate) {
      conv(b.gate->policy.fc1);
      conv(b.gate->policy.fc2);
    }
    conv(b.conv2);
    bn(b.bn2);
    if (b.proj) {
      conv(*b.proj);
      bn(*b.proj_bn);
    }
  }
  conv(net.fc);
  return out;
}

}  // namespace

std::vector<Parameter*> parameters(ToyNet& net) { return collect<ToyNet, Parameter*>(net); }

std::vector<const Parameter*> parameters(const ToyNet& net) {
  return collect<const ToyNet, const Parameter*>(net);
}

std::vector<std::pair<std::string, Tensor*>> buffers(ToyNet& net) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add = [&](const std::string& name, BatchNormLayer& bn) {
    out.emplace_back(name + ".running_mean", &bn.running_mean);
    out.emplace_back(name + ".running_var", &bn.running_var);
  };
  add("stem.bn", net.stem_bn);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const std::string name = "blocks." + std::to_string(i);
    add(name + ".bn1", net.blocks[i].bn1);
    add(name + ".bn2", net.blocks[i].bn2);
    if (net.blocks[i].proj_bn) add(name + ".proj_bn", *net.blocks[i].proj_bn);
  }
  return out;
}

Index count_params(const ToyNet& net) {
  Index n = 0;
  for (const Parameter* p : parameters(net)) n += p->value.numel();
  return n;
}

void BaselinePolicy::validate() const {
  switch (kind) {
    case Kind::random: {
      double s = 0.0;
      for (double p : dist) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw ContractError("random policy: negative or non-finite probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ContractError("random policy: distribution must sum to 1");
      break;
    }
    case Kind::threshold:
      if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ContractError("threshold policy: keep_ratio outside (0, 1]");
      break;
    case Kind::forced:
      if (forced > kSkip) throw ContractError("forced policy: decision code outside {0,1,2}");
      break;
    case Kind::none: break;
  }
}

std::vector<std::uint8_t> baseline_decisions(const BaselinePolicy& policy, const Tensor& y_t,
                                             Rng& rng) {
  policy.validate();
  if (y_t.rank() != 4) throw DimensionError("baseline policy: expected NCHW maps");
  const Index n = y_t.dim(0), c = y_t.dim(1), hw = y_t.dim(2) * y_t.dim(3);
  std::vector<std::uint8_t> d(sz(n * c), kKeep);
  switch (policy.kind) {
    case BaselinePolicy::Kind::none: break;
    case BaselinePolicy::Kind::forced: std::fill(d.begin(), d.end(), policy.forced); break;
    case BaselinePolicy::Kind::random:
      for (auto& v : d) {
        const double u = rng.uniform_open();
        v = u < policy.dist[0] ? kKeep : (u < policy.dist[0] + policy.dist[1] ? kReuse : kSkip);
        // Guard against rounding when the tail probability is zero.
        if (v == kSkip && policy.dist[2] == 0.0) v = policy.dist[1] > 0.0 ? kReuse : kKeep;
      }
      break;
    case BaselinePolicy::Kind::threshold: {
      const Index kept = std::clamp<Index>(
          static_cast<Index>(std::llround(policy.keep_ratio * static_cast<double>(c))), 1, c);
      Buffer norm(sz(c));
      std::vector<Index> order(sz(c));
      for (Index i = 0; i < n; ++i) {
        for (Index ch = 0; ch < c; ++ch) {
          const double* p = y_t.ptr() + (i * c + ch) * hw;
          double s = 0.0;
          for (Index j = 0; j < hw; ++j) s += std::abs(p[j]);
          norm[sz(ch)] = s;
        }
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](Index a, Index b) { return norm[sz(a)] > norm[sz(b)]; });
        for (Index r = 0; r < c; ++r) d[sz(i * c + order[sz(r)])] = r < kept ? kKeep : kSkip;
      }
      break;
    }
  }
  return d;
}

BaselineResult apply_baseline_policy(const BaselinePolicy& policy, const Tensor& y_t,
                                     const Tensor& y_prev, Rng& rng) {
  BaselineResult r;
  r.decisions = baseline_decisions(policy, y_t, rng);
  r.fused = fuse(y_t, y_prev, std::span<const std::uint8_t>(r.decisions));
  return r;
}

ForwardResult forward(ToyNet& net, ParamScope& scope, const Tensor& clips,
                      const ForwardOptions& options) {
  const ToyNetConfig& cfg = net.config;
  const Index T = cfg.frames;
  if (clips.rank() != 4 || clips.dim(0) % T != 0) {
    throw ContractError("forward: input " + shape_str(clips.shape()) +
                        " is not (n*T) x c x h x w with T=" + std::to_string(T));
  }
  if (clips.dim(1) != cfg.in_channels) {
    throw DimensionError("forward: input has " + std::to_string(clips.dim(1)) +
                         " channels, net expects " + std::to_string(cfg.in_channels));
  }
  const Index n_clips = clips.dim(0) / T;
  const Mode mode = options.mode;
  const bool needs_rng =
      (mode == Mode::train && !options.noise && !options.decisions &&
       options.baseline.kind == BaselinePolicy::Kind::none) ||
      options.baseline.kind == BaselinePolicy::Kind::random;
  Rng fallback(0);
  Rng& rng = options.rng ? *options.rng : fallback;
  if (needs_rng && !options.rng) throw ContractError("forward: sampling requires an rng");
  if (options.baseline.kind != BaselinePolicy::Kind::none) options.baseline.validate();

  ForwardResult result;
  result.cost.clips = n_clips;

  auto conv_cost = [](const Conv2dLayer& c, const Tensor& in) { return c.flops(in.dim(2), in.dim(3)); };

  result.cost.fixed_flops += conv_cost(net.stem, clips) * static_cast<double>(T);
  Tensor h = relu(batch_norm(net.stem_bn, scope, conv2d(net.stem, scope, clips), mode));

  std::vector<Tensor> utils;
  std::vector<Tensor> raw_costs;
  std::size_t gate_index = 0;
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    ResidualBlock& b = net.blocks[bi];
    const Tensor input = h;
    const Tensor a = b.shift ? temporal_shift(input, T, cfg.shift_fraction) : input;
    auto upstream = [&](const Tensor& x) {
      return relu(batch_norm(b.bn1, scope, conv2d(b.conv1, scope, x), mode));
    };

    const double m_x = conv_cost(b.conv1, a);
    const Index oh = conv_out_size(a.dim(2), b.conv1.kernel(), b.conv1.stride, b.conv1.padding);
    const Index ow = conv_out_size(a.dim(3), b.conv1.kernel(), b.conv1.stride, b.conv1.padding);
    const double m_y = b.conv2.flops(oh, ow);

    BlockCost bc;
    bc.block = static_cast<Index>(bi);
    bc.m_x = m_x;
    bc.m_y = m_y;

    Tensor mid;
    if (b.gate) {
      FusionGate& gate = *b.gate;
      gate.m_x = m_x;
      gate.m_y = m_y;
      const Index c_out = b.conv1.out_channels();

      PolicyOverride override_policy;
      if (options.decisions) {
        if (gate_index >= options.decisions->size()) throw ContractError("forward: missing decisions for a gated block");
        const auto& d = (*options.decisions)[gate_index];
        if (static_cast<Index>(d.size()) != n_clips * T * c_out) {
          throw DimensionError("forward: decision count mismatch for block " + std::to_string(bi));
        }
        override_policy = [&d](const Tensor&) { return fixed_policy(d); };
      } else if (options.baseline.kind != BaselinePolicy::Kind::none) {
        override_policy = [&](const Tensor& raw) {
          const auto d = baseline_decisions(options.baseline, raw, rng);
          return fixed_policy(d);
        };
      }
      const Tensor* noise = nullptr;
      if (options.noise && !override_policy) {
        if (gate_index >= options.noise->size()) throw ContractError("forward: missing noise for a gated block");
        noise = &(*options.noise)[gate_index];
      }

      GateOutput g = gate_forward(gate, scope, a, T, upstream, rng, mode, override_policy,
                                  options.path, noise);
      mid = g.fused;
      result.gate_outputs.push_back(g.fused);

      BlockTrace tr;
      tr.block = static_cast<Index>(bi);
      tr.samples = n_clips;
      tr.frames = T;
      tr.channels = c_out;
      tr.decisions = g.sample.decisions;
      if (options.record_soft) tr.soft = g.sample.soft;
      result.trace.push_back(std::move(tr));

      double total = 0.0;
      const Index per_clip = T * c_out;
      for (Index i = 0; i < n_clips; ++i) {
        total += block_cost(std::span<const std::uint8_t>(g.sample.decisions).subspan(sz(i * per_clip), sz(per_clip)),
                            T, c_out, m_x, m_y);
      }
      bc.gated = true;
      bc.flops = total / static_cast<double>(n_clips);
      bc.util = bc.flops / (static_cast<double>(T) * (m_x + m_y));

      const Tensor relaxed = block_cost_relaxed(g.sample.onehot, T, c_out, m_x, m_y);
      raw_costs.push_back(relaxed);
      utils.push_back(scale(relaxed, 1.0 / (static_cast<double>(T) * (m_x + m_y))));
      ++gate_index;
    } else {
      mid = upstream(a);
      bc.flops = static_cast<double>(T) * (m_x + m_y);
      bc.util = 1.0;
    }
    result.cost.blocks.push_back(bc);

    Tensor out = batch_norm(b.bn2, scope, conv2d(b.conv2, scope, mid), mode);
    Tensor skip = input;
    if (b.proj) {
      result.cost.fixed_flops += conv_cost(*b.proj, input) * static_cast<double>(T);
      skip = batch_norm(*b.proj_bn, scope, conv2d(*b.proj, scope, input), mode);
    }
    h = relu(add(out, skip));
  }

  result.frame_logits = linear(net.fc, scope, global_avg_pool(h));
  result.video_logits = frame_mean(result.frame_logits, T);

  double total = result.cost.fixed_flops;
  double util_sum = 0.0;
  Index gated = 0;
  for (const BlockCost& bc : result.cost.blocks) {
    total += bc.flops;
    if (bc.gated) {
      util_sum += bc.util;
      ++gated;
    }
  }
  result.cost.total_flops = total;
  result.cost.mean_util = gated ? util_sum / static_cast<double>(gated) : 1.0;

  result.gate_utils = utils;
  result.gate_flops = raw_costs;
  if (utils.empty()) {
    result.relaxed_util = Tensor::scalar(0.0);
    result.relaxed_flops = Tensor::scalar(0.0);
  } else {
    Tensor u = utils[0];
    Tensor r = raw_costs[0];
    for (std::size_t i = 1; i < utils.size(); ++i) {
      u = add(u, utils[i]);
      r = add(r, raw_costs[i]);
    }
    result.relaxed_util = scale(u, 1.0 / static_cast<double>(utils.size()));
    result.relaxed_flops = r;
  }
  return result;
}

ForwardResult forward_clip(ToyNet& net, const Tensor& clip, Rng& rng, Mode mode) {
  if (clip.rank() != 4 || clip.dim(0) != net.config.frames) {
    throw ContractError("forward_clip: clip " + shape_str(clip.shape()) + " does not have T=" +
                        std::to_string(net.config.frames) + " frames");
  }
  ParamScope scope;
  ForwardOptions opt;
  opt.mode = mode;
  opt.rng = &rng;
  return forward(net, scope, clip, opt);
}

Tensor consensus(const Tensor& frame_logits) {
  if (frame_logits.rank() != 2) throw DimensionError("consensus: expected [T x K] logits");
  const Index T = frame_logits.dim(0);
  return frame_mean(frame_logits, T).reshape({frame_logits.dim(1)});
}

std::vector<LayerFlops> layer_flops(const ToyNet& net, Index height, Index width) {
  std::vector<LayerFlops> out;
  out.push_back({"stem.conv", -1, net.stem.flops(height, width)});
  Index h = conv_out_size(height, net.stem.kernel(), net.stem.stride, net.stem.padding);
  Index w = conv_out_size(width, net.stem.kernel(), net.stem.stride, net.stem.padding);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const ResidualBlock& b = net.blocks[i];
    const std::string name = "blocks." + std::to_string(i);
    const Index bi = static_cast<Index>(i);
    out.push_back({name + ".conv1", bi, b.conv1.flops(h, w)});
    const Index oh = conv_out_size(h, b.conv1.kernel(), b.conv1.stride, b.conv1.padding);
    const Index ow = conv_out_size(w, b.conv1.kernel(), b.conv1.stride, b.conv1.padding);
    out.push_back({name + ".conv2", bi, b.conv2.flops(oh, ow)});
    if (b.proj) out.push_back({name + ".proj", bi, b.proj->flops(h, w)});
    h = oh;
    w = ow;
  }
  return out;
}

double dense_flops(const ToyNet& net, Index height, Index width) {
  double s = 0.0;
  for (const LayerFlops& l : layer_flops(net, height, width)) s += l.flops;
  return s * static_cast<double>(net.config.frames);
}

ToyNet strip_gates(const ToyNet& net) {
  ToyNet out = net;
  for (ResidualBlock& b : out.blocks) b.gate.reset();
  out.config.gated.assign(out.config.blocks.size(), false);
  if (out.config.variant == Variant::gated) out.config.variant = Variant::plain;
  if (out.config.variant == Variant::shift_last) out.config.variant = Variant::shift;
  return out;
}

}  // namespace chanfuse
