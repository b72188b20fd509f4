// ebt/tensor.hpp
//
// Dense 64-bit tensors with tape-free reverse-mode differentiation.
//
// Every primitive records its inputs and a backward rule on the result node
// when gradient recording is enabled and any input requires gradients. Backward
// rules are themselves written with these primitives, so running a backward
// pass with create_graph re-records it and the resulting gradients can be
// differentiated again (reverse-over-reverse). This is what lets the trainer
// take d/dtheta of an update that contains dE/dy.
//
// A graph is confined to the thread that built it. Tensors own their data via
// shared nodes and are safe to hand to another thread once construction is
// finished.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ebt::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t numel_of(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, std::size_t index);
  const std::string& op() const { return op_; }
  std::size_t index() const { return index_; }

 private:
  std::string op_;
  std::size_t index_;
};

class Tensor;
struct Node;

// Which inputs of a node the current backward pass needs gradients for.
using NeedMask = std::vector<char>;

// Computes the gradient contributions for each input of `self` given the
// incoming gradient. Entries are left undefined where `need` is 0.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad_out,
                                                     const NeedMask& need)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable access for leaves only (parameters being updated in place).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  std::string_view op() const;

  // Accumulated by ad::backward(); undefined until then.
  Tensor grad() const;
  void zero_grad();

  // Same values, no history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Node : std::enable_shared_from_this<Node> {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  std::shared_ptr<Node> grad;
};

// Gradient recording is on by default; NoGradGuard disables it on this thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool on);
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops broadcast numpy-style (right-aligned,
// dimensions equal or 1).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

// [m,k] x [k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// Swaps the last two dimensions.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reductions over the last axis, keeping it with size 1.
Tensor sum_last(const Tensor& a);
Tensor mean_last(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor sum_to(const Tensor& a, const Shape& shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

// x / sqrt(mean(x^2) + eps) along the last axis, no gain.
Tensor rms_normalize(const Tensor& x, double eps = 1e-6);
Tensor softmax_last(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// x @ w + b for x of rank 2 or 3 ([..., in]); w is [in, out], b is [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Differentiation.

struct GradOptions {
  bool create_graph = false;
  // Nonzero: visit node inputs in a seeded random order while building the
  // topological order. Results must not depend on it; exposed for testing.
  std::uint64_t traversal_seed = 0;
};

struct Gradients {
  std::vector<Tensor> values;
  // Set for wrt tensors the output does not depend on; their value is zeros.
  std::vector<bool> unreachable;

  bool any_unreachable() const;
  const Tensor& operator[](std::size_t i) const { return values.at(i); }
};

Gradients grad(const Tensor& output, std::span<const Tensor> wrt, GradOptions opts = {});
inline Gradients grad(const Tensor& output, std::initializer_list<Tensor> wrt,
                      GradOptions opts = {}) {
  std::vector<Tensor> v(wrt);
  return grad(output, std::span<const Tensor>(v), opts);
}

// Accumulates d(output)/d(leaf) into every reachable leaf's grad().
void backward(const Tensor& output);

// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
using ScalarFn = std::function<Tensor(const Tensor&)>;
double check_grad(const ScalarFn& f, const Tensor& point, double eps = 1e-5);

}  // namespace ebt::ad
