// src/tensor.cpp

#include "ebt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "ebt/rng.hpp"

namespace ebt::ad {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) shape_fail(op, "undefined tensor operand");
}

Tensor make_op(std::string_view op, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) throw NonFiniteError(std::string(op), i);
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  if (t_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

const Tensor& input(const Tensor& self, std::size_t i) { return self.node()->inputs[i]; }

// Strides of `src` seen from a broadcast target shape: 0 where src has size 1
// or is missing (right-aligned).
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < src.size(); ++k) {
    const std::size_t si = src.size() - 1 - k;
    const std::size_t oi = r - 1 - k;
    strides[oi] = src[si] == 1 ? 0 : stride;
    stride *= src[si];
  }
  return strides;
}

// Calls fn(out_index, src_index) over every element of `out`, odometer style.
template <class F>
void for_each_mapped(const Shape& out, const Shape& src, F&& fn) {
  const std::size_t total = numel_of(out);
  if (total == 0) return;
  const std::size_t r = out.size();
  const auto strides = broadcast_strides(src, out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t s = 0;
  for (std::size_t k = 0; k < total; ++k) {
    fn(k, s);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      s += strides[d];
      if (idx[d] < out[d]) break;
      s -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1)
      shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

template <class F>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, BackwardFn bw) {
  require_defined(a, op);
  require_defined(b, op);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  Shape out = sa == sb ? sa : broadcast_shape(sa, sb, op);
  std::vector<double> data(numel_of(out));
  const auto da = a.data();
  const auto db = b.data();
  if (sa == sb) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(da[i], db[i]);
  } else if (db.size() == 1) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(da[i], db[0]);
  } else if (da.size() == 1) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(da[0], db[i]);
  } else {
    std::vector<std::size_t> ia(data.size());
    for_each_mapped(out, sa, [&](std::size_t k, std::size_t s) { ia[k] = s; });
    for_each_mapped(out, sb, [&](std::size_t k, std::size_t s) { data[k] = f(da[ia[k]], db[s]); });
  }
  return make_op(op, std::move(out), std::move(data), {a, b}, std::move(bw));
}

template <class F>
Tensor unary(std::string_view op, const Tensor& a, F f, BackwardFn bw) {
  require_defined(a, op);
  const auto da = a.data();
  std::vector<double> data(da.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = f(da[i]);
  return make_op(op, a.shape(), std::move(data), {a}, std::move(bw));
}

Tensor reduce_to_shape(const Tensor& g, const Shape& s) {
  return g.shape() == s ? g : sum_to(g, s);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

NonFiniteError::NonFiniteError(std::string op, std::size_t index)
    : std::runtime_error("non-finite value produced by '" + op + "' at element " +
                         std::to_string(index)),
      op_(std::move(op)),
      index_(index) {}

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard(bool on) : previous_(t_grad_enabled) { t_grad_enabled = on; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size())
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(numel_of(shape)) + " values, got " +
                     std::to_string(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i])) throw NonFiniteError("Tensor::from", i);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> v, bool requires_grad) {
  return from({v.size()}, std::vector<double>(v), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data: tensor is not a leaf");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

std::vector<double> Tensor::to_vector() const { return node_->data; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaves can change this flag");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_->inputs.empty(); }
std::string_view Tensor::op() const { return node_->op; }
Tensor Tensor::grad() const { return node_->grad ? Tensor(node_->grad) : Tensor(); }
void Tensor::zero_grad() { node_->grad.reset(); }
Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, std::plus<>(), [](const Tensor& self, const Tensor& g, const NeedMask& need) {
    std::vector<Tensor> r(2);
    if (need[0]) r[0] = reduce_to_shape(g, input(self, 0).shape());
    if (need[1]) r[1] = reduce_to_shape(g, input(self, 1).shape());
    return r;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, std::minus<>(), [](const Tensor& self, const Tensor& g, const NeedMask& need) {
    std::vector<Tensor> r(2);
    if (need[0]) r[0] = reduce_to_shape(g, input(self, 0).shape());
    if (need[1]) r[1] = neg(reduce_to_shape(g, input(self, 1).shape()));
    return r;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, std::multiplies<>(), [](const Tensor& self, const Tensor& g, const NeedMask& need) {
    const Tensor& x = input(self, 0);
    const Tensor& y = input(self, 1);
    std::vector<Tensor> r(2);
    if (need[0]) r[0] = reduce_to_shape(mul(g, y), x.shape());
    if (need[1]) r[1] = reduce_to_shape(mul(g, x), y.shape());
    return r;
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary("div", a, b, std::divides<>(), [](const Tensor& self, const Tensor& g, const NeedMask& need) {
    const Tensor& x = input(self, 0);
    const Tensor& y = input(self, 1);
    std::vector<Tensor> r(2);
    if (need[0]) r[0] = reduce_to_shape(div(g, y), x.shape());
    if (need[1]) r[1] = reduce_to_shape(neg(div(mul(g, self), y)), y.shape());
    return r;
  });
}

Tensor neg(const Tensor& a) {
  return unary("neg", a, std::negate<>(), [](const Tensor&, const Tensor& g, const NeedMask&) {
    return std::vector<Tensor>{neg(g)};
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; },
               [c](const Tensor&, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{scale(g, c)};
               });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; },
               [](const Tensor&, const Tensor& g, const NeedMask&) { return std::vector<Tensor>{g}; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{scale(mul(g, input(self, 0)), 2.0)};
               });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary("pow", a, [p](double x) { return std::pow(x, p); },
               [p](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{mul(g, scale(pow_scalar(input(self, 0), p - 1.0), p))};
               });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{scale(div(g, self), 0.5)};
               });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{mul(g, self)};
               });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{div(g, input(self, 0))};
               });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{mul(g, add_scalar(neg(square(self)), 1.0))};
               });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](const Tensor& self, const Tensor& g, const NeedMask&) {
                 return std::vector<Tensor>{mul(g, mul(self, add_scalar(neg(self), 1.0)))};
               });
}

Tensor silu(const Tensor& a) { return mul(a, sigmoid(a)); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "expected [m,k] x [k,n], got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](const Tensor& self, const Tensor& g, const NeedMask& need) {
                   std::vector<Tensor> r(2);
                   if (need[0]) r[0] = matmul(g, transpose(input(self, 1)));
                   if (need[1]) r[1] = matmul(transpose(input(self, 0)), g);
                   return r;
                 });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    shape_fail("bmm", "expected [B,m,k] x [B,k,n], got " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  }
  return make_op("bmm", {bs, m, n}, std::move(out), {a, b},
                 [](const Tensor& self, const Tensor& g, const NeedMask& need) {
                   std::vector<Tensor> r(2);
                   if (need[0]) r[0] = bmm(g, transpose(input(self, 1)));
                   if (need[1]) r[1] = bmm(transpose(input(self, 0)), g);
                   return r;
                 });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() < 2) shape_fail("transpose", "needs rank >= 2, got " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  const std::size_t batch = a.numel() / std::max<std::size_t>(rows * cols, 1);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<double> out(a.numel());
  const auto d = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[off + j * rows + i] = d[off + i * cols + j];
  }
  return make_op("transpose", std::move(s), std::move(out), {a},
                 [](const Tensor&, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel_of(shape) != a.numel())
    shape_fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  return make_op("reshape", std::move(shape), a.to_vector(), {a},
                 [](const Tensor& self, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{reshape(g, input(self, 0).shape())};
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  if (x.rank() == 2) return add(matmul(x, w), b);
  if (x.rank() == 3) {
    const std::size_t bs = x.dim(0), t = x.dim(1), in = x.dim(2);
    Tensor y = add(matmul(reshape(x, {bs * t, in}), w), b);
    return reshape(y, {bs, t, y.dim(1)});
  }
  shape_fail("linear", "expected rank 2 or 3 input, got " + shape_str(x.shape()));
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {}, {s}, {a}, [](const Tensor& self, const Tensor& g, const NeedMask&) {
    return std::vector<Tensor>{broadcast_to(g, input(self, 0).shape())};
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  require_defined(a, "sum_last");
  if (a.rank() == 0) shape_fail("sum_last", "scalar has no last axis");
  Shape s = a.shape();
  const std::size_t w = s.back();
  s.back() = 1;
  const std::size_t rows = numel_of(s);
  std::vector<double> out(rows, 0.0);
  const auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w; ++j) acc += d[r * w + j];
    out[r] = acc;
  }
  return make_op("sum_last", std::move(s), std::move(out), {a},
                 [](const Tensor& self, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{broadcast_to(g, input(self, 0).shape())};
                 });
}

Tensor mean_last(const Tensor& a) {
  require_defined(a, "mean_last");
  if (a.rank() == 0 || a.shape().back() == 0) shape_fail("mean_last", "empty last axis");
  return scale(sum_last(a), 1.0 / static_cast<double>(a.shape().back()));
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "broadcast_to");
  if (broadcast_shape(a.shape(), shape, "broadcast_to") != shape)
    shape_fail("broadcast_to", "cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(numel_of(shape));
  const auto d = a.data();
  for_each_mapped(shape, a.shape(), [&](std::size_t k, std::size_t s) { out[k] = d[s]; });
  return make_op("broadcast_to", shape, std::move(out), {a},
                 [](const Tensor& self, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{sum_to(g, input(self, 0).shape())};
                 });
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  require_defined(a, "sum_to");
  if (broadcast_shape(shape, a.shape(), "sum_to") != a.shape())
    shape_fail("sum_to", "cannot reduce " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(numel_of(shape), 0.0);
  const auto d = a.data();
  for_each_mapped(a.shape(), shape, [&](std::size_t k, std::size_t s) { out[s] += d[k]; });
  return make_op("sum_to", shape, std::move(out), {a},
                 [](const Tensor& self, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{broadcast_to(g, input(self, 0).shape())};
                 });
}

// ---------------------------------------------------------------------------
// Concatenate / slice

namespace {

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisView {
  std::size_t outer, extent, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

// Embeds g (the gradient of a slice) into zeros of `full` shape.
Tensor pad_slice(const Tensor& g, const Shape& full, std::size_t axis, std::size_t begin) {
  const AxisView fv = axis_view(full, axis);
  const AxisView gv = axis_view(g.shape(), axis);
  std::vector<double> out(numel_of(full), 0.0);
  const auto d = g.data();
  for (std::size_t o = 0; o < gv.outer; ++o)
    for (std::size_t e = 0; e < gv.extent; ++e)
      std::copy_n(d.begin() + (o * gv.extent + e) * gv.inner, gv.inner,
                  out.begin() + (o * fv.extent + begin + e) * fv.inner);
  const std::size_t end = begin + gv.extent;
  return make_op("pad_slice", full, std::move(out), {g},
                 [axis, begin, end](const Tensor&, const Tensor& gg, const NeedMask&) {
                   return std::vector<Tensor>{slice(gg, axis, begin, end)};
                 });
}

}  // namespace

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(a, "slice");
  if (axis >= a.rank() || begin > end || end > a.dim(axis))
    shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  const AxisView v = axis_view(a.shape(), axis);
  Shape s = a.shape();
  s[axis] = end - begin;
  std::vector<double> out(numel_of(s));
  const auto d = a.data();
  const std::size_t len = end - begin;
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(d.begin() + (o * v.extent + begin) * v.inner, len * v.inner,
                out.begin() + o * len * v.inner);
  return make_op("slice", std::move(s), std::move(out), {a},
                 [axis, begin](const Tensor& self, const Tensor& g, const NeedMask&) {
                   return std::vector<Tensor>{pad_slice(g, input(self, 0).shape(), axis, begin)};
                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) shape_fail("concat", "operand " + shape_str(s) + " does not match " + shape_str(s0));
    out_shape[axis] += s[axis];
  }
  const AxisView ov = axis_view(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const AxisView pv = axis_view(p.shape(), axis);
    const auto d = p.data();
    for (std::size_t o = 0; o < pv.outer; ++o)
      std::copy_n(d.begin() + o * pv.extent * pv.inner, pv.extent * pv.inner,
                  out.begin() + (o * ov.extent + at) * ov.inner);
    at += pv.extent;
  }
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [axis, offsets](const Tensor& self, const Tensor& g, const NeedMask& need) {
                   std::vector<Tensor> r(offsets.size());
                   for (std::size_t i = 0; i < offsets.size(); ++i) {
                     if (!need[i]) continue;
                     const std::size_t len = input(self, i).dim(axis);
                     r[i] = slice(g, axis, offsets[i], offsets[i] + len);
                   }
                   return r;
                 });
}

// ---------------------------------------------------------------------------
// Composites

Tensor rms_normalize(const Tensor& x, double eps) {
  require_defined(x, "rms_normalize");
  return mul(x, pow_scalar(add_scalar(mean_last(square(x)), eps), -0.5));
}

Tensor softmax_last(const Tensor& x) {
  require_defined(x, "softmax_last");
  if (x.rank() == 0) shape_fail("softmax_last", "scalar has no last axis");
  // Row maxima as a constant shift; softmax is invariant to it.
  Shape s = x.shape();
  const std::size_t w = s.back();
  s.back() = 1;
  std::vector<double> mx(numel_of(s));
  const auto d = x.data();
  for (std::size_t r = 0; r < mx.size(); ++r)
    mx[r] = *std::max_element(d.begin() + r * w, d.begin() + (r + 1) * w);
  Tensor e = exp(sub(x, Tensor::from(std::move(s), std::move(mx))));
  return div(e, sum_last(e));
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Differentiation

bool Gradients::any_unreachable() const {
  return std::any_of(unreachable.begin(), unreachable.end(), [](bool b) { return b; });
}

namespace {

// Post-order over recorded nodes: inputs precede their consumers.
std::vector<Node*> topo_order(Node* root, std::uint64_t traversal_seed) {
  std::vector<Node*> order;
  if (!root->requires_grad) return order;
  std::unordered_set<Node*> visited{root};
  struct Frame {
    Node* node;
    std::size_t next;
    std::vector<std::size_t> perm;
  };
  Rng rng(traversal_seed);
  auto frame_for = [&](Node* n) {
    Frame f{n, 0, std::vector<std::size_t>(n->inputs.size())};
    std::iota(f.perm.begin(), f.perm.end(), std::size_t{0});
    if (traversal_seed != 0) {
      for (std::size_t i = f.perm.size(); i > 1; --i)
        std::swap(f.perm[i - 1], f.perm[static_cast<std::size_t>(rng.uniform_int(0, i - 1))]);
    }
    return f;
  };
  std::vector<Frame> stack;
  stack.push_back(frame_for(root));
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next < top.perm.size()) {
      Node* child = top.node->inputs[top.perm[top.next++]].node();
      if (child->requires_grad && visited.insert(child).second) stack.push_back(frame_for(child));
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

Gradients grad(const Tensor& output, std::span<const Tensor> wrt, GradOptions opts) {
  require_defined(output, "grad");
  if (output.numel() != 1)
    throw ShapeError("grad: output must be a scalar, got shape " + shape_str(output.shape()));

  const std::vector<Node*> order = topo_order(output.node(), opts.traversal_seed);
  std::unordered_map<Node*, std::size_t> index;
  index.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) index.emplace(order[i], i);

  std::unordered_set<Node*> targets;
  for (const auto& w : wrt) {
    require_defined(w, "grad");
    targets.insert(w.node());
  }
  // A node is needed when some target is reachable through it.
  std::vector<char> needed(order.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    Node* n = order[i];
    bool need = targets.count(n) > 0;
    for (const auto& in : n->inputs) {
      auto it = index.find(in.node());
      if (it != index.end() && needed[it->second]) need = true;
    }
    needed[i] = need;
  }

  EnableGradGuard guard(opts.create_graph);
  std::vector<Tensor> grads(order.size());
  if (!order.empty()) grads.back() = Tensor::full(output.shape(), 1.0);

  for (std::size_t i = order.size(); i-- > 0;) {
    Node* n = order[i];
    if (!needed[i] || !grads[i].defined() || n->inputs.empty()) continue;
    NeedMask mask(n->inputs.size(), 0);
    bool any = false;
    for (std::size_t j = 0; j < n->inputs.size(); ++j) {
      auto it = index.find(n->inputs[j].node());
      mask[j] = it != index.end() && needed[it->second];
      any = any || mask[j];
    }
    if (!any) continue;
    Tensor self(n->shared_from_this());
    std::vector<Tensor> contrib = n->backward(self, grads[i], mask);
    for (std::size_t j = 0; j < n->inputs.size(); ++j) {
      if (!mask[j] || !contrib[j].defined()) continue;
      const std::size_t k = index.at(n->inputs[j].node());
      if (contrib[j].shape() != n->inputs[j].shape())
        throw std::logic_error(std::string("grad: backward of '") + std::string(n->op) +
                               "' produced shape " + shape_str(contrib[j].shape()) +
                               " for input " + shape_str(n->inputs[j].shape()));
      grads[k] = grads[k].defined() ? add(grads[k], contrib[j]) : contrib[j];
    }
    // Release intermediate gradients that are no longer needed.
    if (!targets.count(n)) grads[i] = Tensor();
  }

  Gradients result;
  for (const auto& w : wrt) {
    auto it = index.find(w.node());
    if (it != index.end() && grads[it->second].defined()) {
      result.values.push_back(grads[it->second]);
      result.unreachable.push_back(false);
    } else {
      result.values.push_back(Tensor::zeros(w.shape()));
      result.unreachable.push_back(true);
    }
  }
  return result;
}

void backward(const Tensor& output) {
  require_defined(output, "backward");
  std::vector<Tensor> leaves;
  for (Node* n : topo_order(output.node(), 0))
    if (n->inputs.empty()) leaves.emplace_back(n->shared_from_this());
  Gradients g = grad(output, std::span<const Tensor>(leaves));
  NoGradGuard ng;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Node* n = leaves[i].node();
    Tensor acc = n->grad ? add(Tensor(n->grad), g.values[i]) : g.values[i].detach();
    n->grad = acc.node()->shared_from_this();
  }
}

double check_grad(const ScalarFn& f, const Tensor& point, double eps) {
  Tensor x = point.detach();
  x.set_requires_grad(true);
  Tensor y = f(x);
  if (y.numel() != 1) throw ShapeError("check_grad: function must return a scalar");
  const Tensor analytic = grad(y, {x})[0];

  // Evaluated with recording left on: f may itself differentiate internally.
  std::vector<double> base = point.to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval_at = [&](double delta) {
      std::vector<double> v = base;
      v[i] += delta;
      double r;
      try {
        r = f(Tensor::from(point.shape(), std::move(v))).item();
      } catch (const NonFiniteError&) {
        throw NonFiniteError("check_grad", i);
      }
      if (!std::isfinite(r)) throw NonFiniteError("check_grad", i);
      return r;
    };
    const double central = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ebt::ad
