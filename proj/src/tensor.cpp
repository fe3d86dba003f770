#include "chanfuse/tensor.hpp"

#include <sstream>

#include "chanfuse/errors.hpp"

namespace chanfuse {

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{1}, data_(std::make_shared<const Buffer>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::span<const double> data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Buffer data) : shape_(std::move(shape)) {
  if (numel_of(shape_) != static_cast<Index>(data.size())) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  data_ = std::make_shared<const Buffer>(std::move(data));
}

Tensor::Tensor(Shape shape, std::shared_ptr<const Buffer> data, Tape* tape,
               std::size_t node)
    : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const Index n = numel_of(shape);
  return Tensor(std::move(shape), Buffer(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Index Tensor::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return (*data_)[0];
}

ConstMatrixMap Tensor::matrix(Index rows, Index cols) const {
  if (rows * cols != numel()) {
    throw DimensionError("cannot view " + shape_str(shape_) + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  return ConstMatrixMap(data_->data(), rows, cols);
}

Tensor Tensor::detach() const { return Tensor(shape_, data_, nullptr, 0); }

Tensor Tensor::reshape(Shape shape) const {
  if (numel_of(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_, tape_, node_);
}

std::size_t Tape::add_node(Index numel, bool leaf) {
  nodes_.push_back(Node{numel, leaf, {}});
  return nodes_.size() - 1;
}

Buffer& Tape::grad_buffer(std::size_t node) {
  auto& n = nodes_[node];
  if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.numel), 0.0);
  return n.grad;
}

Tensor Tape::watch(const Tensor& value) {
  if (backward_done_) throw ContractError("tape already differentiated; reset() before reuse");
  const std::size_t id = add_node(value.numel(), true);
  return Tensor(value.shape_, value.data_, this, id);
}

Tensor Tape::record(Shape shape, Buffer data, std::initializer_list<Tensor> inputs,
                    BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.tape_) continue;
    if (tape && tape != in.tape_) throw ContractError("operands recorded on different tapes");
    tape = in.tape_;
  }
  Tensor out(std::move(shape), std::move(data));
  if (!tape) return out;
  if (tape->backward_done_) throw ContractError("tape already differentiated; reset() before reuse");

  Op op;
  op.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) op.inputs.push_back(in.tape_ ? in.node_ : kNone);
  op.output = tape->add_node(out.numel(), false);
  op.backward = std::move(backward);
  tape->ops_.push_back(std::move(op));
  out.tape_ = tape;
  out.node_ = tape->ops_.back().output;
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw ContractError("backward(): loss is not recorded on this tape");
  if (!loss.is_scalar()) {
    throw ContractError("backward(): loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (backward_done_) throw ContractError("backward(): already called; reset() first");
  backward_done_ = true;

  grad_buffer(loss.node_)[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& out = nodes_[it->output];
    if (out.grad.empty()) continue;  // no gradient flows through this op
    std::vector<std::span<double>> slots;
    slots.reserve(it->inputs.size());
    for (std::size_t in : it->inputs) {
      if (in == kNone) {
        slots.emplace_back();
      } else {
        auto& g = grad_buffer(in);
        slots.emplace_back(g.data(), g.size());
      }
    }
    it->backward(std::span<const double>(out.grad.data(), out.grad.size()),
                 GradSink(std::move(slots)));
    if (!out.leaf) Buffer().swap(out.grad);
  }
}

bool Tape::has_grad(const Tensor& t) const {
  return t.tape_ == this && !nodes_[t.node_].grad.empty();
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape_ != this) throw ContractError("grad(): tensor is not recorded on this tape");
  const auto& g = nodes_[t.node_].grad;
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), g);
}

void Tape::reset() {
  nodes_.clear();
  ops_.clear();
  backward_done_ = false;
}

}  // namespace chanfuse
