#include "varp/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

#include "varp/errors.hpp"

namespace varp {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

void check_finite(std::span<const double> values, const char* what) {
  // A value is NaN or Inf exactly when its exponent bits are all set; the
  // integer OR-reduction vectorizes where std::isfinite does not.
  constexpr std::uint64_t kExp = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  if (bad) throw NumericError(fmt::format("non-finite value in {}", what));
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ContractError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  std::vector<double> data(varp::numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (varp::numel(shape) != data.size()) {
    throw ContractError(fmt::format("shape {} holds {} values, got {}", to_string(shape),
                                    varp::numel(shape), data.size()));
  }
  check_finite(data, "tensor construction");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(varp::numel(shape));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(varp::numel(shape));
  for (double& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError(fmt::format("axis {} out of range for rank {}", axis, s.size()));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const double> Tensor::data() const { return checked().data; }

std::span<double> Tensor::mutable_data() {
  auto& n = checked();
  if (n.backward) throw ContractError("cannot write into a tensor that has recorded history");
  return n.data;
}

double Tensor::item() const {
  const auto& n = checked();
  if (n.data.size() != 1) throw ContractError("item() requires a single-element tensor, shape " + to_string(n.shape));
  return n.data[0];
}

double Tensor::at(std::size_t flat_index) const {
  const auto& n = checked();
  if (flat_index >= n.data.size()) throw IndexError(fmt::format("flat index {} out of range {}", flat_index, n.data.size()));
  return n.data[flat_index];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = checked();
  if (n.backward) throw ContractError("requires_grad can only be changed on leaves");
  n.requires_grad = flag;
}

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& n = checked();
  if (n.grad.empty()) throw ContractError("tensor has no gradient");
  return n.grad;
}

std::span<double> Tensor::mutable_grad() { return checked().grad_buffer(); }

void Tensor::zero_grad() {
  auto& n = checked();
  n.grad.assign(n.data.size(), 0.0);
}

void Tensor::clear_grad() { checked().grad.clear(); }

Tensor Tensor::detach() const {
  const auto& n = checked();
  return from(n.shape, n.data, false);
}

Tensor Tensor::clone() const {
  const auto& n = checked();
  return from(n.shape, n.data, n.requires_grad);
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root.node_ptr();
  if (!tape.root_) throw ContractError("cannot record an undefined tensor");
  // Iterative post-order DFS; a node is emitted once all inputs are emitted.
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (tape.root_->requires_grad) {
    stack.emplace_back(tape.root_.get(), 0);
    seen.insert(tape.root_.get());
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor& root) {
  Tape tape = Tape::record(root);
  backward(root, tape);
}

void backward(const Tensor& root, Tape& tape) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward() requires a scalar root");
  }
  if (tape.root() != root.node()) throw ContractError("tape was recorded from a different root");
  auto* root_node = const_cast<detail::Node*>(root.node());
  if (root_node->consumed) throw ContractError("graph already consumed by a previous backward()");
  if (!root_node->requires_grad) return;

  for (detail::Node* n : tape.nodes()) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  root_node->grad_buffer()[0] += 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      check_finite(n->grad, n->op);
      n->backward(*n);
    }
  }
  for (detail::Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->inputs.clear();
      n->consumed = true;
    } else {
      check_finite(n->grad, "leaf gradient");
    }
  }
}

}  // namespace varp
