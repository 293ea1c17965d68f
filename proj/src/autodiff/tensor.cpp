#include "ehpe/autodiff/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace ehpe::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }

std::size_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + to_string(s));
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return tape_->node(id_).value.size(); }

std::span<const double> Tensor::data() const { return tape_->node(id_).value; }

std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }

bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return data()[0];
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  return record(std::move(shape), std::move(values), {}, {});
}

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ShapeError("variable: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return handle(nodes_.size() - 1);
}

Tensor Tape::param(Parameter& p) {
  Tensor t = p.frozen ? constant(p.shape, p.value) : variable(p.shape, p.value);
  if (!p.frozen) bindings_.emplace_back(t.node_id(), &p);
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
                    std::function<void(Tape&, const Node&)> fn) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return handle(nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Tensor& loss) {
  if (&loss.tape() != this) throw ShapeError("backward: loss recorded on a different tape");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  const std::size_t root = loss.node_id();
  if (!nodes_[root].requires_grad) return;

  std::vector<char> reachable(root + 1, 0);
  reachable[root] = 1;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    for (std::size_t in : nodes_[i].inputs)
      if (nodes_[in].requires_grad) reachable[in] = 1;
  }

  grad_buffer(root)[0] += 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!reachable[i] || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n);
  }
}

void Tape::accumulate_param_grads() {
  for (auto& [id, p] : bindings_) {
    const Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (p->grad.size() != p->value.size()) p->zero_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  }
}

}  // namespace ehpe::ad
