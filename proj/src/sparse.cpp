#include "chanfuse/sparse.hpp"

#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/layers.hpp"

namespace chanfuse::sparse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

/// Frames of one clip: [frames x c x h x w].
struct Maps {
  Index frames = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Maps() = default;
  Maps(Index f, Index c_, Index h_, Index w_)
      : frames(f), c(c_), h(h_), w(w_), v(sz(f * c_ * h_ * w_), 0.0) {}
  Index frame_size() const { return c * h * w; }
  double* frame(Index t) { return v.data() + t * frame_size(); }
  const double* frame(Index t) const { return v.data() + t * frame_size(); }
  Tensor tensor() const { return Tensor({frames, c, h, w}, v); }
  static Maps from(const Tensor& t) {
    Maps m(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    m.v.assign(t.data().begin(), t.data().end());
    return m;
  }
};

void bn_eval_channel(const BatchNormLayer& bn, Index ch, double* plane, Index hw) {
  const double inv_std = 1.0 / std::sqrt(bn.running_var.at(ch) + bn.eps);
  const double mu = bn.running_mean.at(ch);
  const double g = bn.gamma.value.at(ch);
  const double b = bn.beta.value.at(ch);
  for (Index j = 0; j < hw; ++j) plane[j] = g * (plane[j] - mu) * inv_std + b;
}

void relu_inplace(double* p, Index n) {
  for (Index j = 0; j < n; ++j) p[j] = p[j] > 0.0 ? p[j] : 0.0;
}

Maps dense_conv(const Maps& in, const Conv2dLayer& conv, ConvCount* count) {
  const Index oh = conv_out_size(in.h, conv.kernel(), conv.stride, conv.padding);
  const Index ow = conv_out_size(in.w, conv.kernel(), conv.stride, conv.padding);
  Maps out(in.frames, conv.out_channels(), oh, ow);
  for (Index t = 0; t < in.frames; ++t) {
    conv_loop(in.frame(t), in.c, in.h, in.w, conv.weight.value, conv.bias.value, conv.stride,
              conv.padding, {}, {}, out.frame(t), count);
  }
  return out;
}

void bn_eval(Maps& m, const BatchNormLayer& bn, bool apply_relu) {
  const Index hw = m.h * m.w;
  for (Index t = 0; t < m.frames; ++t)
    for (Index ch = 0; ch < m.c; ++ch) {
      double* p = m.frame(t) + ch * hw;
      bn_eval_channel(bn, ch, p, hw);
      if (apply_relu) relu_inplace(p, hw);
    }
}

}  // namespace

void conv_loop(const double* x, Index c, Index h, Index w, const Tensor& weight,
               const Tensor& bias, Index stride, Index padding, std::span<const std::uint8_t> out_mask,
               std::span<const std::uint8_t> in_mask, double* out, ConvCount* count) {
  const Index c_out = weight.dim(0), k = weight.dim(1);
  if (weight.dim(3) != c) throw DimensionError("conv_loop: channel mismatch");
  const Index oh = conv_out_size(h, k, stride, padding);
  const Index ow = conv_out_size(w, k, stride, padding);
  const double* wp = weight.ptr();
  Index active_in = 0;
  for (Index ci = 0; ci < c; ++ci) active_in += in_mask.empty() || in_mask[sz(ci)] ? 1 : 0;

  for (Index o = 0; o < c_out; ++o) {
    if (!out_mask.empty() && !out_mask[sz(o)]) continue;
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        double acc = bias.at(o);
        for (Index ky = 0; ky < k; ++ky) {
          const Index iy = oy * stride - padding + ky;
          for (Index kx = 0; kx < k; ++kx) {
            const Index ix = ox * stride - padding + kx;
            const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
            for (Index ci = 0; ci < c; ++ci) {
              if (!in_mask.empty() && !in_mask[sz(ci)]) continue;
              // Padding taps still cost a multiply-accumulate in the dense count.
              if (inside) acc += wp[((o * k + ky) * k + kx) * c + ci] * x[(ci * h + iy) * w + ix];
            }
          }
        }
        out[(o * oh + oy) * ow + ox] = acc;
      }
    if (count) {
      count->macs += oh * ow * k * k * active_in;
      count->bias_adds += oh * ow;
    }
  }
}

double BlockCount::flops() const {
  const double num = static_cast<double>(channels) *
                         static_cast<double>(upstream + downstream_macs) +
                     static_cast<double>(downstream_bias_weighted);
  return num / static_cast<double>(channels);
}

BlockResult gated_block(const ResidualBlock& block, const Tensor& x,
                        std::span<const std::uint8_t> decisions) {
  const Conv2dLayer& conv1 = block.conv1;
  const Conv2dLayer& conv2 = block.conv2;
  const Index T = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index c_mid = conv1.out_channels();
  const Index c_out = conv2.out_channels();
  if (static_cast<Index>(decisions.size()) != T * c_mid) {
    throw DimensionError("gated_block: expected T*c' decisions");
  }
  const Index oh = conv_out_size(h, conv1.kernel(), conv1.stride, conv1.padding);
  const Index ow = conv_out_size(w, conv1.kernel(), conv1.stride, conv1.padding);
  const Index hw = oh * ow;
  const Index oh2 = conv_out_size(oh, conv2.kernel(), conv2.stride, conv2.padding);
  const Index ow2 = conv_out_size(ow, conv2.kernel(), conv2.stride, conv2.padding);

  BlockResult r;
  r.out_h = oh2;
  r.out_w = ow2;
  r.count.channels = c_mid;
  std::vector<double> raw(sz(T * c_mid * hw), 0.0);
  r.fused.assign(sz(T * c_mid * hw), 0.0);
  r.downstream.assign(sz(T * c_out * oh2 * ow2), 0.0);

  auto d = [&](Index t, Index i) { return decisions[sz(t * c_mid + i)]; };
  std::vector<std::uint8_t> need(sz(c_mid)), active(sz(c_mid));
  for (Index t = 0; t < T; ++t) {
    for (Index i = 0; i < c_mid; ++i) {
      if (d(t, i) > kSkip) throw ContractError("gated_block: decision code outside {0,1,2}");
      need[sz(i)] = d(t, i) == kKeep || (t + 1 < T && d(t + 1, i) == kReuse);
    }
    ConvCount up;
    double* raw_t = raw.data() + t * c_mid * hw;
    conv_loop(x.ptr() + t * c * h * w, c, h, w, conv1.weight.value, conv1.bias.value,
              conv1.stride, conv1.padding, need, {},
              raw_t, &up);
    r.count.upstream += up.total();
    for (Index i = 0; i < c_mid; ++i) {
      if (!need[sz(i)]) continue;
      bn_eval_channel(block.bn1, i, raw_t + i * hw, hw);
      relu_inplace(raw_t + i * hw, hw);
    }

    double* fused_t = r.fused.data() + t * c_mid * hw;
    Index n_active = 0;
    for (Index i = 0; i < c_mid; ++i) {
      const std::uint8_t p = d(t, i);
      active[sz(i)] = p != kSkip;
      n_active += p != kSkip ? 1 : 0;
      if (p == kKeep) {
        std::copy_n(raw_t + i * hw, hw, fused_t + i * hw);
      } else if (p == kReuse && t > 0) {
        std::copy_n(raw.data() + ((t - 1) * c_mid + i) * hw, hw, fused_t + i * hw);
      }
    }
    ConvCount down;
    conv_loop(fused_t, c_mid, oh, ow, conv2.weight.value, conv2.bias.value, conv2.stride,
              conv2.padding, {}, active,
              r.downstream.data() + t * c_out * oh2 * ow2, &down);
    r.count.downstream_macs += down.macs;
    r.count.downstream_bias_weighted += down.bias_adds * n_active;
  }
  return r;
}

Tensor forward(const ToyNet& net, const Tensor& clips,
               const std::vector<std::vector<std::uint8_t>>& decisions, NetCount* count) {
  const ToyNetConfig& cfg = net.config;
  const Index T = cfg.frames;
  if (clips.rank() != 4 || clips.dim(0) % T != 0) {
    throw ContractError("sparse::forward: input is not (n*T) x c x h x w");
  }
  const Index n_clips = clips.dim(0) / T;
  const Index frame_size = clips.dim(1) * clips.dim(2) * clips.dim(3);
  const Index K = cfg.num_classes;
  std::vector<double> logits(sz(clips.dim(0) * K));

  NetCount local;
  NetCount& cnt = count ? *count : local;
  std::size_t n_gated = 0;
  for (const auto& b : net.blocks) n_gated += b.gate ? 1 : 0;
  if (decisions.size() != n_gated) throw ContractError("sparse::forward: one decision array per gated block required");
  cnt.gated.assign(n_gated, BlockCount{});

  for (Index i = 0; i < n_clips; ++i) {
    Maps x(T, clips.dim(1), clips.dim(2), clips.dim(3));
    std::copy_n(clips.ptr() + i * T * frame_size, T * frame_size, x.v.data());

    Maps h = dense_conv(x, net.stem, &cnt.fixed);
    bn_eval(h, net.stem_bn, true);

    std::size_t gi = 0;
    for (const ResidualBlock& b : net.blocks) {
      const Maps input = h;
      Maps a = b.shift ? Maps::from(temporal_shift(input.tensor(), T, cfg.shift_fraction)) : input;
      Maps out;
      if (b.gate) {
        const Index c_mid = b.conv1.out_channels();
        const auto& d = decisions[gi];
        if (static_cast<Index>(d.size()) != n_clips * T * c_mid) {
          throw DimensionError("sparse::forward: decision count mismatch");
        }
        BlockResult br = gated_block(b, a.tensor(),
                                     std::span<const std::uint8_t>(d).subspan(sz(i * T * c_mid), sz(T * c_mid)));
        BlockCount& bc = cnt.gated[gi];
        bc.channels = c_mid;
        bc.upstream += br.count.upstream;
        bc.downstream_macs += br.count.downstream_macs;
        bc.downstream_bias_weighted += br.count.downstream_bias_weighted;
        out = Maps(T, b.conv2.out_channels(), br.out_h, br.out_w);
        out.v = std::move(br.downstream);
        ++gi;
      } else {
        Maps mid = dense_conv(a, b.conv1, &cnt.fixed);
        bn_eval(mid, b.bn1, true);
        out = dense_conv(mid, b.conv2, &cnt.fixed);
      }
      bn_eval(out, b.bn2, false);
      Maps skip = input;
      if (b.proj) {
        skip = dense_conv(input, *b.proj, &cnt.fixed);
        bn_eval(skip, *b.proj_bn, false);
      }
      for (std::size_t j = 0; j < out.v.size(); ++j) {
        const double v = out.v[j] + skip.v[j];
        out.v[j] = v > 0.0 ? v : 0.0;
      }
      h = std::move(out);
    }

    const Index hw = h.h * h.w;
    const Tensor& W = net.fc.weight.value;
    const Tensor& B = net.fc.bias.value;
    std::vector<double> pooled(sz(h.c));
    for (Index t = 0; t < T; ++t) {
      for (Index ch = 0; ch < h.c; ++ch) {
        double s = 0.0;
        const double* p = h.frame(t) + ch * hw;
        for (Index j = 0; j < hw; ++j) s += p[j];
        pooled[sz(ch)] = s / static_cast<double>(hw);
      }
      for (Index k = 0; k < K; ++k) {
        double acc = B.at(k);
        for (Index ch = 0; ch < h.c; ++ch) acc += W.at(k * h.c + ch) * pooled[sz(ch)];
        logits[sz((i * T + t) * K + k)] = acc;
      }
    }
  }
  return Tensor({clips.dim(0), K}, std::move(logits));
}

}  // namespace chanfuse::sparse
