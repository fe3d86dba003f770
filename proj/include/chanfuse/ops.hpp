#pragma once

#include <optional>

#include "chanfuse/tensor.hpp"

namespace chanfuse {

enum class ElementwiseKind { add, sub, mul, relu, exp, log };

/// Binary kinds need `b`; it must have a's shape or be a single element.
/// Unary kinds ignore `b`.
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const std::optional<Tensor>& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

/// [m x k] . [k x n] -> [m x n]; both operands must be rank 2.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Sum of all elements, shape [1].
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Picks index `j` of the last axis: [..., K] -> [...].
Tensor select_last(const Tensor& a, Index j);

/// Row-wise concatenation of two matrices: [n x p], [n x q] -> [n x (p+q)].
Tensor concat_cols(const Tensor& a, const Tensor& b);

/// Softmax / log-softmax over the last axis, max-subtracted.
Tensor softmax_last(const Tensor& a);
Tensor log_softmax_last(const Tensor& a);

/// Forward value of `hard` (taken as a constant), gradient routed to `soft`.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

/// Shifts whole frames along time inside clips of length T laid out on the
/// leading axis ((n*T) x ...). offset = +1 gives frame t the content of frame
/// t-1 (zeros at t = 0); offset = -1 gives frame t the content of frame t+1
/// (zeros at t = T-1).
Tensor time_shift(const Tensor& x, Index frames, int offset);

/// Mean over groups of T consecutive rows: [(n*T) x K] -> [n x K].
Tensor frame_mean(const Tensor& x, Index frames);

}  // namespace chanfuse
