#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehpe::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown when an operation receives operands it cannot accept
/// (shape mismatch, bad axis, non-scalar loss, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;
struct Parameter;

/// Handle to a value recorded on a Tape. Cheap to copy; the storage
/// lives in the tape and is valid for the tape's lifetime.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Empty until backward() has routed a gradient here.
  std::span<const double> grad() const;
  bool requires_grad() const;

  std::size_t node_id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

  /// Value of a single-element tensor.
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Recorded operation. `backward` reads this node's grad and accumulates
/// into the grads of `inputs`.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::size_t> inputs;
  std::function<void(Tape&, const Node&)> backward;
};

/// Linear record of a computation. Nodes are appended in execution order,
/// so every node's inputs precede it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor constant_scalar(double v) { return constant({1}, {v}); }
  Tensor variable(Shape shape, std::vector<double> values);
  /// Leaf bound to a persistent parameter; a frozen parameter is recorded
  /// without requires_grad.
  Tensor param(Parameter& p);

  /// Records an op result. `fn` may be empty; it is dropped when no input
  /// requires a gradient.
  Tensor record(Shape shape, std::vector<double> value,
                std::vector<std::size_t> inputs,
                std::function<void(Tape&, const Node&)> fn);

  /// Reverse sweep from a scalar loss. Gradients are accumulated (+=)
  /// into every reachable node that requires_grad.
  void backward(const Tensor& loss);

  /// Adds the grads of all bound parameter leaves into Parameter::grad.
  void accumulate_param_grads();

  /// Mutable grad of node `id`, allocated as zeros on first access.
  std::span<double> grad_buffer(std::size_t id);
  const Node& node(std::size_t id) const { return nodes_[id]; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Tensor;
  Tensor handle(std::size_t id) { return Tensor(this, id); }

  std::deque<Node> nodes_;
  std::vector<std::pair<std::size_t, Parameter*>> bindings_;
};

/// Persistent learnable value, owned outside of any tape.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool frozen = false;
  /// Counted by the L1 weight regularizer (kernels and projection
  /// matrices, not biases or embeddings).
  bool is_weight = false;

  void zero_grad() { grad.assign(value.size(), 0.0); }
};

}  // namespace ehpe::ad
