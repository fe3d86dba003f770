#include "chanfuse/ops.hpp"

#include <algorithm>
#include <cmath>

#include "chanfuse/errors.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

const char* kind_name(ElementwiseKind kind) {
  switch (kind) {
    case ElementwiseKind::add: return "add";
    case ElementwiseKind::sub: return "sub";
    case ElementwiseKind::mul: return "mul";
    case ElementwiseKind::relu: return "relu";
    case ElementwiseKind::exp: return "exp";
    case ElementwiseKind::log: return "log";
  }
  return "?";
}

bool is_binary(ElementwiseKind kind) {
  return kind == ElementwiseKind::add || kind == ElementwiseKind::sub ||
         kind == ElementwiseKind::mul;
}

Tensor binary(ElementwiseKind kind, const Tensor& a, const Tensor& b) {
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(kind_name(kind)) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Index n = a.numel();
  Eigen::Map<const Eigen::ArrayXd> va(a.ptr(), n);
  Buffer out(sz(n));
  Eigen::Map<Eigen::ArrayXd> vo(out.data(), n);
  if (b_scalar) {
    const double bv = b.at(0);
    switch (kind) {
      case ElementwiseKind::add: vo = va + bv; break;
      case ElementwiseKind::sub: vo = va - bv; break;
      default: vo = va * bv; break;
    }
  } else {
    Eigen::Map<const Eigen::ArrayXd> vb(b.ptr(), n);
    switch (kind) {
      case ElementwiseKind::add: vo = va + vb; break;
      case ElementwiseKind::sub: vo = va - vb; break;
      default: vo = va * vb; break;
    }
  }
  return Tape::record(a.shape(), std::move(out), {a, b},
                      [kind, a, b, b_scalar, n](std::span<const double> g, const GradSink& sink) {
                        Eigen::Map<const Eigen::ArrayXd> vg(g.data(), n);
                        const bool mul = kind == ElementwiseKind::mul;
                        if (sink.wants(0)) {
                          Eigen::Map<Eigen::ArrayXd> ga(sink.input(0).data(), n);
                          if (!mul) {
                            ga += vg;
                          } else if (b_scalar) {
                            ga += vg * b.at(0);
                          } else {
                            ga += vg * Eigen::Map<const Eigen::ArrayXd>(b.ptr(), n);
                          }
                        }
                        if (sink.wants(1)) {
                          const double sign = kind == ElementwiseKind::sub ? -1.0 : 1.0;
                          Eigen::Map<const Eigen::ArrayXd> va(a.ptr(), n);
                          if (b_scalar) {
                            sink.input(1)[0] += mul ? (vg * va).sum() : sign * vg.sum();
                          } else {
                            Eigen::Map<Eigen::ArrayXd> gb(sink.input(1).data(), n);
                            if (mul) {
                              gb += vg * va;
                            } else {
                              gb += sign * vg;
                            }
                          }
                        }
                      });
}

Tensor unary(ElementwiseKind kind, const Tensor& a) {
  const Index n = a.numel();
  Eigen::Map<const Eigen::ArrayXd> va(a.ptr(), n);
  Buffer out(sz(n));
  Eigen::Map<Eigen::ArrayXd> vo(out.data(), n);
  switch (kind) {
    case ElementwiseKind::relu: vo = va.max(0.0); break;
    case ElementwiseKind::exp: vo = va.exp(); break;
    default: vo = va.log(); break;
  }
  // exp needs its own output for the backward pass; relu and log only need the input.
  const Tensor result = kind == ElementwiseKind::exp ? Tensor(a.shape(), out) : Tensor();
  return Tape::record(a.shape(), std::move(out), {a},
                      [kind, a, result, n](std::span<const double> g, const GradSink& sink) {
                        Eigen::Map<Eigen::ArrayXd> ga(sink.input(0).data(), n);
                        Eigen::Map<const Eigen::ArrayXd> vg(g.data(), n);
                        Eigen::Map<const Eigen::ArrayXd> va(a.ptr(), n);
                        switch (kind) {
                          case ElementwiseKind::relu: ga += (va > 0.0).select(vg, 0.0); break;
                          case ElementwiseKind::exp:
                            ga += vg * Eigen::Map<const Eigen::ArrayXd>(result.ptr(), n);
                            break;
                          default: ga += vg / va; break;
                        }
                      });
}

}  // namespace

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const std::optional<Tensor>& b) {
  if (is_binary(kind)) {
    if (!b) throw ContractError(std::string(kind_name(kind)) + ": second operand required");
    return binary(kind, a, *b);
  }
  return unary(kind, a);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::mul, a, b); }
Tensor relu(const Tensor& a) { return unary(ElementwiseKind::relu, a); }
Tensor exp(const Tensor& a) { return unary(ElementwiseKind::exp, a); }
Tensor log(const Tensor& a) { return unary(ElementwiseKind::log, a); }

Tensor scale(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return Tape::record(a.shape(), std::move(out), {a},
                      [s](std::span<const double> g, const GradSink& sink) {
                        auto ga = sink.input(0);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                      });
}

Tensor add_scalar(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return Tape::record(a.shape(), std::move(out), {a},
                      [](std::span<const double> g, const GradSink& sink) {
                        auto ga = sink.input(0);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  Buffer out(sz(m * n));
  MatrixMap(out.data(), m, n).noalias() = a.matrix(m, k) * b.matrix(k, n);
  return Tape::record({m, n}, std::move(out), {a, b},
                      [a, b, m, k, n](std::span<const double> g, const GradSink& sink) {
                        ConstMatrixMap G(g.data(), m, n);
                        if (sink.wants(0)) {
                          MatrixMap(sink.input(0).data(), m, k).noalias() +=
                              G * b.matrix(k, n).transpose();
                        }
                        if (sink.wants(1)) {
                          MatrixMap(sink.input(1).data(), k, n).noalias() +=
                              a.matrix(m, k).transpose() * G;
                        }
                      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tape::record({1}, {s}, {a}, [](std::span<const double> g, const GradSink& sink) {
    for (double& v : sink.input(0)) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor select_last(const Tensor& a, Index j) {
  const Index k = a.dim(-1);
  if (j < 0 || j >= k) throw DimensionError("select_last: index out of range");
  const Index rows = a.numel() / k;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Buffer out(sz(rows));
  const double* p = a.ptr();
  for (Index r = 0; r < rows; ++r) out[sz(r)] = p[r * k + j];
  return Tape::record(std::move(shape), std::move(out), {a},
                      [rows, k, j](std::span<const double> g, const GradSink& sink) {
                        auto ga = sink.input(0);
                        for (Index r = 0; r < rows; ++r) ga[sz(r * k + j)] += g[sz(r)];
                      });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Index n = a.dim(0), p = a.dim(1), q = b.dim(1);
  Buffer out(sz(n * (p + q)));
  MatrixMap o(out.data(), n, p + q);
  o.leftCols(p) = a.matrix(n, p);
  o.rightCols(q) = b.matrix(n, q);
  return Tape::record({n, p + q}, std::move(out), {a, b},
                      [n, p, q](std::span<const double> g, const GradSink& sink) {
                        ConstMatrixMap G(g.data(), n, p + q);
                        if (sink.wants(0)) MatrixMap(sink.input(0).data(), n, p) += G.leftCols(p);
                        if (sink.wants(1)) MatrixMap(sink.input(1).data(), n, q) += G.rightCols(q);
                      });
}

Tensor softmax_last(const Tensor& a) {
  const Index k = a.dim(-1);
  const Index rows = a.numel() / k;
  Buffer out(sz(a.numel()));
  const double* p = a.ptr();
  for (Index r = 0; r < rows; ++r) {
    const double* row = p + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (Index j = 0; j < k; ++j) z += (out[sz(r * k + j)] = std::exp(row[j] - mx));
    for (Index j = 0; j < k; ++j) out[sz(r * k + j)] /= z;
  }
  Tensor y(a.shape(), out);
  return Tape::record(a.shape(), std::move(out), {a},
                      [y, rows, k](std::span<const double> g, const GradSink& sink) {
                        auto ga = sink.input(0);
                        const double* py = y.ptr();
                        for (Index r = 0; r < rows; ++r) {
                          double dot = 0.0;
                          for (Index j = 0; j < k; ++j) dot += g[sz(r * k + j)] * py[r * k + j];
                          for (Index j = 0; j < k; ++j) {
                            ga[sz(r * k + j)] += py[r * k + j] * (g[sz(r * k + j)] - dot);
                          }
                        }
                      });
}

Tensor log_softmax_last(const Tensor& a) {
  const Index k = a.dim(-1);
  const Index rows = a.numel() / k;
  Buffer out(sz(a.numel()));
  const double* p = a.ptr();
  for (Index r = 0; r < rows; ++r) {
    const double* row = p + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (Index j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (Index j = 0; j < k; ++j) out[sz(r * k + j)] = row[j] - lse;
  }
  Tensor y(a.shape(), out);
  return Tape::record(a.shape(), std::move(out), {a},
                      [y, rows, k](std::span<const double> g, const GradSink& sink) {
                        auto ga = sink.input(0);
                        const double* py = y.ptr();
                        for (Index r = 0; r < rows; ++r) {
                          double gs = 0.0;
                          for (Index j = 0; j < k; ++j) gs += g[sz(r * k + j)];
                          for (Index j = 0; j < k; ++j) {
                            ga[sz(r * k + j)] += g[sz(r * k + j)] - std::exp(py[r * k + j]) * gs;
                          }
                        }
                      });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw DimensionError("straight_through: shape mismatch " + shape_str(hard.shape()) + " vs " +
                         shape_str(soft.shape()));
  }
  Buffer out(hard.data().begin(), hard.data().end());
  return Tape::record(hard.shape(), std::move(out), {hard.detach(), soft},
                      [](std::span<const double> g, const GradSink& sink) {
                        auto gs = sink.input(1);
                        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                      });
}

Tensor time_shift(const Tensor& x, Index frames, int offset) {
  if (frames <= 0 || x.dim(0) % frames != 0) {
    throw ContractError("time_shift: leading dimension " + std::to_string(x.dim(0)) +
                        " not divisible by T=" + std::to_string(frames));
  }
  if (offset != 1 && offset != -1) throw ContractError("time_shift: offset must be +1 or -1");
  const Index rows = x.dim(0);
  const Index row_size = x.numel() / rows;
  Buffer out(sz(x.numel()), 0.0);
  const double* p = x.ptr();
  for (Index r = 0; r < rows; ++r) {
    const Index t = r % frames;
    const Index src_t = t - offset;
    if (src_t < 0 || src_t >= frames) continue;
    std::copy_n(p + (r - offset) * row_size, row_size, out.data() + r * row_size);
  }
  return Tape::record(x.shape(), std::move(out), {x},
                      [rows, row_size, frames, offset](std::span<const double> g,
                                                       const GradSink& sink) {
                        auto gx = sink.input(0);
                        for (Index r = 0; r < rows; ++r) {
                          const Index src_t = r % frames - offset;
                          if (src_t < 0 || src_t >= frames) continue;
                          const Index src = (r - offset) * row_size;
                          for (Index i = 0; i < row_size; ++i) {
                            gx[sz(src + i)] += g[sz(r * row_size + i)];
                          }
                        }
                      });
}

Tensor frame_mean(const Tensor& x, Index frames) {
  if (x.rank() != 2) throw DimensionError("frame_mean: rank-2 input required");
  if (frames <= 0 || x.dim(0) % frames != 0) {
    throw ContractError("frame_mean: leading dimension not divisible by T");
  }
  const Index n = x.dim(0) / frames, k = x.dim(1);
  Buffer out(sz(n * k), 0.0);
  const double* p = x.ptr();
  const double inv = 1.0 / static_cast<double>(frames);
  for (Index i = 0; i < n; ++i)
    for (Index t = 0; t < frames; ++t)
      for (Index j = 0; j < k; ++j) out[sz(i * k + j)] += p[(i * frames + t) * k + j] * inv;
  return Tape::record({n, k}, std::move(out), {x},
                      [n, k, frames, inv](std::span<const double> g, const GradSink& sink) {
                        auto gx = sink.input(0);
                        for (Index i = 0; i < n; ++i)
                          for (Index t = 0; t < frames; ++t)
                            for (Index j = 0; j < k; ++j)
                              gx[sz((i * frames + t) * k + j)] += g[sz(i * k + j)] * inv;
                      });
}

}  // namespace chanfuse
