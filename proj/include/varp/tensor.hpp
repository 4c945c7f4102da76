#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace varp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One value in the computation graph. Interior nodes carry the closure that
// pushes their gradient into their inputs; leaves carry none.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major float64 array with reverse-mode gradient support.
//
// Copying a Tensor copies the handle, not the storage; use clone() for a
// deep copy. Every op output is checked for NaN/Inf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only leaves may be written in place; interior values are owned by the graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();

  // Same values, no history, requires_grad = false.
  Tensor detach() const;
  // Deep copy of values and the requires_grad flag; no history, no gradient.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the graph reachable from a root: every
// node appears after all of its inputs, and exactly once.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& nodes() const { return order_; }
  const detail::Node* root() const { return root_.get(); }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

// Accumulates d(root)/d(leaf) into every requires_grad leaf. The tape is
// consumed: interior nodes drop their history afterwards.
void backward(const Tensor& root);
void backward(const Tensor& root, Tape& tape);

void check_finite(std::span<const double> values, const char* what);

}  // namespace varp
