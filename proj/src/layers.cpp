#include "chanfuse/layers.hpp"

#include <algorithm>
#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

void require_rank(const Tensor& x, Index rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Buffer v(sz(numel_of(shape)));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

struct ConvGeometry {
  Index n, c, h, w, c_out, k, stride, pad, oh, ow;
  Index patch() const { return k * k * c; }
  Index pixels() const { return oh * ow; }
};

// cols[(ky*k + kx)*c + ci][oy*ow + ox] = x[ci][oy*s - pad + ky][ox*s - pad + kx]
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const Index P = g.pixels();
  for (Index ky = 0; ky < g.k; ++ky) {
    for (Index kx = 0; kx < g.k; ++kx) {
      for (Index ci = 0; ci < g.c; ++ci) {
        double* row = cols + ((ky * g.k + kx) * g.c + ci) * P;
        const double* plane = x + ci * g.h * g.w;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.ow, 0.0);
            continue;
          }
          const double* src = plane + iy * g.w;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const Index P = g.pixels();
  for (Index ky = 0; ky < g.k; ++ky) {
    for (Index kx = 0; kx < g.k; ++kx) {
      for (Index ci = 0; ci < g.c; ++ci) {
        const double* row = cols + ((ky * g.k + kx) * g.c + ci) * P;
        double* plane = dx + ci * g.h * g.w;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = row + oy * g.ow;
          double* dst = plane + iy * g.w;
          for (Index ox = 0; ox < g.ow; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor ParamScope::use(const Parameter& p) {
  if (!tape_) return p.value;
  auto it = watched_.find(&p);
  if (it != watched_.end()) return it->second;
  Tensor t = tape_->watch(p.value);
  watched_.emplace(&p, t);
  return t;
}

Tensor ParamScope::grad(const Parameter& p) const {
  auto it = watched_.find(&p);
  if (it == watched_.end()) return Tensor::zeros(p.value.shape());
  return tape_->grad(it->second);
}

Index conv_out_size(Index in, Index kernel, Index stride, Index padding) {
  const Index span = in + 2 * padding - kernel;
  if (span < 0) throw DimensionError("convolution kernel larger than padded input");
  return span / stride + 1;
}

double Conv2dLayer::flops(Index in_h, Index in_w) const {
  const Index k = kernel();
  const Index oh = conv_out_size(in_h, k, stride, padding);
  const Index ow = conv_out_size(in_w, k, stride, padding);
  return static_cast<double>(out_channels() * oh * ow * (k * k * in_channels() + 1));
}

Conv2dLayer make_conv2d(const std::string& name, Index c_in, Index c_out, Index k, Index stride,
                        Index padding, Rng& rng) {
  const double fan_in = static_cast<double>(k * k * c_in);
  Conv2dLayer layer;
  layer.weight = {name + ".weight", uniform_tensor({c_out, k, k, c_in}, std::sqrt(6.0 / fan_in), rng)};
  layer.bias = {name + ".bias", uniform_tensor({c_out}, 1.0 / std::sqrt(fan_in), rng)};
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

BatchNormLayer make_batch_norm(const std::string& name, Index channels) {
  BatchNormLayer bn;
  bn.gamma = {name + ".gamma", Tensor::full({channels}, 1.0)};
  bn.beta = {name + ".beta", Tensor::zeros({channels})};
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::full({channels}, 1.0);
  return bn;
}

LinearLayer make_linear(const std::string& name, Index in, Index out, Rng& rng) {
  const double fan_in = static_cast<double>(in);
  LinearLayer layer;
  layer.weight = {name + ".weight", uniform_tensor({out, in}, std::sqrt(6.0 / fan_in), rng)};
  layer.bias = {name + ".bias", uniform_tensor({out}, 1.0 / std::sqrt(fan_in), rng)};
  return layer;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
              Index padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != weight.dim(2)) throw DimensionError("conv2d: kernel must be square");
  if (x.dim(1) != weight.dim(3)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " do not match weight " + shape_str(weight.shape()));
  }
  if (bias.numel() != weight.dim(0)) throw DimensionError("conv2d: bias length mismatch");
  if (stride <= 0 || padding < 0) throw ContractError("conv2d: invalid stride/padding");

  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(1), stride,
                 padding, 0, 0};
  g.oh = conv_out_size(g.h, g.k, stride, padding);
  g.ow = conv_out_size(g.w, g.k, stride, padding);
  const Index K = g.patch(), P = g.pixels();

  Buffer out(sz(g.n * g.c_out * P));
  Buffer cols(sz(K * P));
  const auto W = weight.matrix(g.c_out, K);
  const Eigen::Map<const Eigen::VectorXd> b(bias.ptr(), g.c_out);
  for (Index i = 0; i < g.n; ++i) {
    im2col(x.ptr() + i * g.c * g.h * g.w, g, cols.data());
    MatrixMap o(out.data() + i * g.c_out * P, g.c_out, P);
    o.noalias() = W * ConstMatrixMap(cols.data(), K, P);
    o.colwise() += b;
  }

  return Tape::record(
      {g.n, g.c_out, g.oh, g.ow}, std::move(out), {x, weight, bias},
      [x, weight, g](std::span<const double> grad, const GradSink& sink) {
        const Index K = g.patch(), P = g.pixels();
        Buffer cols(sz(K * P));
        const auto W = weight.matrix(g.c_out, K);
        for (Index i = 0; i < g.n; ++i) {
          ConstMatrixMap G(grad.data() + i * g.c_out * P, g.c_out, P);
          if (sink.wants(1)) {
            im2col(x.ptr() + i * g.c * g.h * g.w, g, cols.data());
            MatrixMap(sink.input(1).data(), g.c_out, K).noalias() +=
                G * ConstMatrixMap(cols.data(), K, P).transpose();
          }
          if (sink.wants(2)) {
            Eigen::Map<Eigen::VectorXd>(sink.input(2).data(), g.c_out) += G.rowwise().sum();
          }
          if (sink.wants(0)) {
            MatrixMap(cols.data(), K, P).noalias() = W.transpose() * G;
            col2im_add(cols.data(), g, sink.input(0).data() + i * g.c * g.h * g.w);
          }
        }
      });
}

Tensor conv2d(const Conv2dLayer& layer, ParamScope& scope, const Tensor& x) {
  return conv2d(x, scope.use(layer.weight), scope.use(layer.bias), layer.stride, layer.padding);
}

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        BatchStats* stats) {
  require_rank(x, 4, "batch_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("batch_norm: parameter length does not match " + shape_str(x.shape()));
  }
  const double count = static_cast<double>(n * hw);
  Buffer mu(sz(c), 0.0), var(sz(c), 0.0), inv_std(sz(c));
  const double* px = x.ptr();
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const double* p = px + (i * c + ch) * hw;
      double s = 0.0;
      for (Index j = 0; j < hw; ++j) s += p[j];
      mu[sz(ch)] += s;
    }
  for (double& m : mu) m /= count;
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const double* p = px + (i * c + ch) * hw;
      const double m = mu[sz(ch)];
      double s = 0.0;
      for (Index j = 0; j < hw; ++j) s += (p[j] - m) * (p[j] - m);
      var[sz(ch)] += s;
    }
  for (Index ch = 0; ch < c; ++ch) {
    var[sz(ch)] /= count;
    inv_std[sz(ch)] = 1.0 / std::sqrt(var[sz(ch)] + eps);
  }
  if (stats) *stats = {{mu.begin(), mu.end()}, {var.begin(), var.end()}};

  Buffer xhat(sz(x.numel())), out(sz(x.numel()));
  const double* pg = gamma.ptr();
  const double* pb = beta.ptr();
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * hw;
      for (Index j = 0; j < hw; ++j) {
        const double v = (px[off + j] - mu[sz(ch)]) * inv_std[sz(ch)];
        xhat[sz(off + j)] = v;
        out[sz(off + j)] = pg[ch] * v + pb[ch];
      }
    }

  Tensor xhat_t(x.shape(), std::move(xhat));
  return Tape::record(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat_t, gamma, inv_std, n, c, hw, count](std::span<const double> g, const GradSink& sink) {
        const double* xh = xhat_t.ptr();
        Buffer dgamma(sz(c), 0.0), dbeta(sz(c), 0.0);
        for (Index i = 0; i < n; ++i)
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) {
              dgamma[sz(ch)] += g[sz(off + j)] * xh[off + j];
              dbeta[sz(ch)] += g[sz(off + j)];
            }
          }
        if (sink.wants(1))
          for (Index ch = 0; ch < c; ++ch) sink.input(1)[sz(ch)] += dgamma[sz(ch)];
        if (sink.wants(2))
          for (Index ch = 0; ch < c; ++ch) sink.input(2)[sz(ch)] += dbeta[sz(ch)];
        if (sink.wants(0)) {
          auto gx = sink.input(0);
          const double* pg = gamma.ptr();
          for (Index i = 0; i < n; ++i)
            for (Index ch = 0; ch < c; ++ch) {
              const Index off = (i * c + ch) * hw;
              const double k = pg[ch] * inv_std[sz(ch)] / count;
              for (Index j = 0; j < hw; ++j) {
                gx[sz(off + j)] +=
                    k * (count * g[sz(off + j)] - dbeta[sz(ch)] - xh[off + j] * dgamma[sz(ch)]);
              }
            }
        }
      });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double eps) {
  require_rank(x, 4, "batch_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || static_cast<Index>(mean.size()) != c ||
      static_cast<Index>(var.size()) != c) {
    throw DimensionError("batch_norm: parameter length does not match " + shape_str(x.shape()));
  }
  Buffer inv_std(sz(c));
  for (Index ch = 0; ch < c; ++ch) inv_std[sz(ch)] = 1.0 / std::sqrt(var[sz(ch)] + eps);
  Buffer mu(mean.begin(), mean.end());
  Buffer out(sz(x.numel()));
  const double* px = x.ptr();
  const double* pg = gamma.ptr();
  const double* pb = beta.ptr();
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * hw;
      for (Index j = 0; j < hw; ++j) {
        out[sz(off + j)] = pg[ch] * (px[off + j] - mu[sz(ch)]) * inv_std[sz(ch)] + pb[ch];
      }
    }
  return Tape::record(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, mu, inv_std, n, c, hw](std::span<const double> g, const GradSink& sink) {
        const double* px = x.ptr();
        const double* pg = gamma.ptr();
        for (Index i = 0; i < n; ++i)
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) {
              const double gj = g[sz(off + j)];
              if (sink.wants(0)) sink.input(0)[sz(off + j)] += gj * pg[ch] * inv_std[sz(ch)];
              if (sink.wants(1))
                sink.input(1)[sz(ch)] += gj * (px[off + j] - mu[sz(ch)]) * inv_std[sz(ch)];
              if (sink.wants(2)) sink.input(2)[sz(ch)] += gj;
            }
          }
      });
}

Tensor batch_norm(BatchNormLayer& layer, ParamScope& scope, const Tensor& x, Mode mode) {
  const Tensor gamma = scope.use(layer.gamma);
  const Tensor beta = scope.use(layer.beta);
  if (mode == Mode::eval) {
    return batch_norm_eval(x, gamma, beta, layer.running_mean.data(), layer.running_var.data(),
                           layer.eps);
  }
  BatchStats stats;
  Tensor y = batch_norm_train(x, gamma, beta, layer.eps, &stats);
  const double count = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
  const Index c = layer.channels();
  Buffer rm(sz(c)), rv(sz(c));
  for (Index ch = 0; ch < c; ++ch) {
    rm[sz(ch)] = (1.0 - layer.momentum) * layer.running_mean.at(ch) + layer.momentum * stats.mean[sz(ch)];
    rv[sz(ch)] = (1.0 - layer.momentum) * layer.running_var.at(ch) +
                 layer.momentum * stats.var[sz(ch)] * unbias;
  }
  layer.running_mean = Tensor({c}, std::move(rm));
  layer.running_var = Tensor({c}, std::move(rv));
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  Buffer out(sz(n * c));
  const double* p = x.ptr();
  for (Index r = 0; r < n * c; ++r) {
    double s = 0.0;
    for (Index j = 0; j < hw; ++j) s += p[r * hw + j];
    out[sz(r)] = s * inv;
  }
  return Tape::record({n, c}, std::move(out), {x},
                      [n, c, hw, inv](std::span<const double> g, const GradSink& sink) {
                        auto gx = sink.input(0);
                        for (Index r = 0; r < n * c; ++r)
                          for (Index j = 0; j < hw; ++j) gx[sz(r * hw + j)] += g[sz(r)] * inv;
                      });
}

Tensor linear(const Tensor& w, const Tensor& b, const Tensor& x) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear weight");
  const Index n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (b.numel() != out_f) throw DimensionError("linear: bias length mismatch");
  Buffer out(sz(n * out_f));
  MatrixMap o(out.data(), n, out_f);
  o.noalias() = x.matrix(n, in) * w.matrix(out_f, in).transpose();
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.ptr(), out_f);
  return Tape::record(
      {n, out_f}, std::move(out), {w, b, x},
      [w, x, n, in, out_f](std::span<const double> g, const GradSink& sink) {
        ConstMatrixMap G(g.data(), n, out_f);
        if (sink.wants(0))
          MatrixMap(sink.input(0).data(), out_f, in).noalias() += G.transpose() * x.matrix(n, in);
        if (sink.wants(1))
          Eigen::Map<Eigen::RowVectorXd>(sink.input(1).data(), out_f) += G.colwise().sum();
        if (sink.wants(2))
          MatrixMap(sink.input(2).data(), n, in).noalias() += G * w.matrix(out_f, in);
      });
}

Tensor linear(const LinearLayer& layer, ParamScope& scope, const Tensor& x) {
  return linear(scope.use(layer.weight), scope.use(layer.bias), x);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(k) + ")");
    }
  }
  Buffer prob(sz(n * k));
  double loss = 0.0;
  const double* p = logits.ptr();
  for (Index i = 0; i < n; ++i) {
    const double* row = p + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (Index j = 0; j < k; ++j) z += (prob[sz(i * k + j)] = std::exp(row[j] - mx));
    for (Index j = 0; j < k; ++j) prob[sz(i * k + j)] /= z;
    loss -= row[labels[sz(i)]] - mx - std::log(z);
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return Tape::record({1}, {loss}, {logits},
                      [prob = std::move(prob), lab = std::move(lab), n, k](
                          std::span<const double> g, const GradSink& sink) {
                        auto gl = sink.input(0);
                        const double s = g[0] / static_cast<double>(n);
                        for (Index i = 0; i < n; ++i)
                          for (Index j = 0; j < k; ++j) {
                            const double onehot = (lab[sz(i)] == j) ? 1.0 : 0.0;
                            gl[sz(i * k + j)] += s * (prob[sz(i * k + j)] - onehot);
                          }
                      });
}

Tensor temporal_shift(const Tensor& x, Index frames, double fraction) {
  require_rank(x, 4, "temporal_shift");
  if (frames <= 0 || x.dim(0) % frames != 0) {
    throw ContractError("temporal_shift: batch " + std::to_string(x.dim(0)) +
                        " not divisible by T=" + std::to_string(frames));
  }
  if (fraction < 0.0 || fraction > 0.5) throw ContractError("temporal_shift: fraction outside [0, 0.5]");
  const Index rows = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Index fold = static_cast<Index>(std::floor(fraction * static_cast<double>(c)));

  // Source frame offset for a channel: -1 reads t-1, +1 reads t+1, 0 in place.
  auto offset_of = [fold](Index ch) -> Index { return ch < fold ? -1 : (ch < 2 * fold ? 1 : 0); };

  Buffer out(sz(x.numel()), 0.0);
  const double* p = x.ptr();
  for (Index r = 0; r < rows; ++r) {
    const Index t = r % frames;
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = offset_of(ch);
      if (t + off < 0 || t + off >= frames) continue;
      std::copy_n(p + ((r + off) * c + ch) * hw, hw, out.data() + (r * c + ch) * hw);
    }
  }
  return Tape::record(x.shape(), std::move(out), {x},
                      [rows, c, hw, frames, offset_of](std::span<const double> g,
                                                       const GradSink& sink) {
                        auto gx = sink.input(0);
                        for (Index r = 0; r < rows; ++r) {
                          const Index t = r % frames;
                          for (Index ch = 0; ch < c; ++ch) {
                            const Index off = offset_of(ch);
                            if (t + off < 0 || t + off >= frames) continue;
                            const Index src = ((r + off) * c + ch) * hw;
                            const Index dst = (r * c + ch) * hw;
                            for (Index j = 0; j < hw; ++j) gx[sz(src + j)] += g[sz(dst + j)];
                          }
                        }
                      });
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require_rank(x, 4, "channel_scale");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.numel() != n * c) {
    throw DimensionError("channel_scale: scale " + shape_str(s.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Buffer out(sz(x.numel()));
  const double* px = x.ptr();
  const double* ps = s.ptr();
  for (Index r = 0; r < n * c; ++r)
    for (Index j = 0; j < hw; ++j) out[sz(r * hw + j)] = px[r * hw + j] * ps[r];
  return Tape::record(x.shape(), std::move(out), {x, s},
                      [x, s, n, c, hw](std::span<const double> g, const GradSink& sink) {
                        const double* px = x.ptr();
                        const double* ps = s.ptr();
                        for (Index r = 0; r < n * c; ++r) {
                          double acc = 0.0;
                          for (Index j = 0; j < hw; ++j) {
                            const double gj = g[sz(r * hw + j)];
                            if (sink.wants(0)) sink.input(0)[sz(r * hw + j)] += gj * ps[r];
                            acc += gj * px[r * hw + j];
                          }
                          if (sink.wants(1)) sink.input(1)[sz(r)] += acc;
                        }
                      });
}

}  // namespace chanfuse
