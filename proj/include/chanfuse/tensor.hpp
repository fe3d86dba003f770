#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace chanfuse {

using Index = std::int64_t;
using Shape = std::vector<Index>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Tensor storage. Vectorized Eigen kernels peel a prefix up to the first
/// aligned element, so a fixed base alignment keeps results independent of
/// where the allocator happened to place a buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense row-major array of doubles. The data buffer is shared and never
/// mutated after construction, so copies are cheap and safe across threads.
/// A tensor produced on a Tape carries a node id on that tape; everything
/// else is a constant as far as differentiation is concerned.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Buffer data);
  /// Copies `data`.
  Tensor(Shape shape, std::span<const double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(data_->size()); }
  bool is_scalar() const { return numel() == 1; }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  const double* ptr() const { return data_->data(); }
  double at(Index flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }
  double item() const;

  /// Row-major matrix view; `rows * cols` must equal numel().
  ConstMatrixMap matrix(Index rows, Index cols) const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same data, no tape participation.
  Tensor detach() const;
  /// Same data and tape node, new shape with the same element count.
  Tensor reshape(Shape shape) const;

 private:
  friend class Tape;
  Tensor(Shape shape, std::shared_ptr<const Buffer> data, Tape* tape,
         std::size_t node);

  Shape shape_;
  std::shared_ptr<const Buffer> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Gradient buffers of an operation's inputs, handed to its backward closure.
/// `input(k)` is empty when the k-th input is not on the tape.
class GradSink {
 public:
  explicit GradSink(std::vector<std::span<double>> slots) : slots_(std::move(slots)) {}
  std::span<double> input(std::size_t k) const { return slots_[k]; }
  bool wants(std::size_t k) const { return !slots_[k].empty(); }

 private:
  std::vector<std::span<double>> slots_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, const GradSink& sink)>;

/// Define-by-run record of primitive operations. Confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a leaf that receives a gradient.
  Tensor watch(const Tensor& value);

  /// Reverse sweep from a scalar loss. May run once per recording.
  void backward(const Tensor& loss);

  /// d loss / d t for a tensor on this tape; zeros when no gradient reached it.
  Tensor grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const;

  /// Drops all records and gradients; tensors recorded so far become invalid.
  void reset();

  std::size_t num_ops() const { return ops_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  /// Used by primitive implementations. Returns an untracked tensor when no
  /// input is on a tape.
  static Tensor record(Shape shape, Buffer data, std::initializer_list<Tensor> inputs,
                       BackwardFn backward);

 private:
  struct Node {
    Index numel = 0;
    bool leaf = false;
    Buffer grad;
  };
  struct Op {
    std::vector<std::size_t> inputs;  // npos for constants
    std::size_t output = 0;
    BackwardFn backward;
  };
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  std::size_t add_node(Index numel, bool leaf);
  Buffer& grad_buffer(std::size_t node);

  std::vector<Node> nodes_;
  std::vector<Op> ops_;
  bool backward_done_ = false;
};

}  // namespace chanfuse
