#pragma once

// Reverse-mode autodiff tensor engine. Tensors are immutable value handles
// onto graph nodes; each op records its inputs and a backward rule, and
// backward() replays the recorded tape in reverse topological order, then
// frees it. 64-bit storage throughout; single-threaded within one pass.

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ean/errors.hpp"
#include "ean/rng.hpp"

namespace ean {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline thread_local int no_grad_depth = 0;
inline bool grad_enabled() { return no_grad_depth == 0; }

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool tape_freed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<double>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace detail

// Disables graph recording for the guarded scope (inference, value-only math).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return leaf(std::move(shape), 0.0, requires_grad);
  }

  static Tensor constant(Shape shape, double v, bool requires_grad = false) {
    return leaf(std::move(shape), v, requires_grad);
  }

  static Tensor scalar(double v) {
    return from_data({1}, {v});
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
      throw DimError("from_data: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, RandomStream& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor rand01(Shape shape, RandomStream& rng, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform01();
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t size(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }

  const std::vector<double>& values() const { return node_->value; }

  // Leaf-only write access (parameter updates, finite-difference probes).
  std::vector<double>& mutable_values() {
    if (!node_->is_leaf) throw ContractError("mutable_values on non-leaf tensor");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != node_->shape.size()) throw DimError("at(): rank mismatch");
    int64_t off = 0;
    auto st = detail::row_major_strides(node_->shape);
    size_t i = 0;
    for (int64_t v : idx) off += v * st[i++];
    return node_->value[static_cast<size_t>(off)];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool v) {
    if (!node_->is_leaf) throw ContractError("set_requires_grad on non-leaf tensor");
    node_->requires_grad = v;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw ContractError("grad(): no gradient accumulated");
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  void scale_grad(double s) {
    for (double& g : node_->grad) g *= s;
  }

  Tensor detach() const {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  void backward() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

 private:
  static Tensor leaf(Shape shape, double fill, bool requires_grad) {
    auto n = std::make_shared<detail::TensorNode>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline std::shared_ptr<TensorNode> make_op(const char* op, Shape shape,
                                           std::initializer_list<Tensor> inputs) {
  auto n = std::make_shared<TensorNode>();
  n->op = op;
  n->value.resize(static_cast<size_t>(shape_numel(shape)));
  n->shape = std::move(shape);
  n->is_leaf = false;
  bool req = false;
  for (const Tensor& t : inputs) req = req || t.requires_grad();
  n->requires_grad = grad_enabled() && req;
  if (n->requires_grad) {
    for (const Tensor& t : inputs) n->inputs.push_back(t.node());
  }
  return n;
}

inline void check_axis(const char* op, const Shape& s, int64_t axis) {
  if (axis < 0 || axis >= static_cast<int64_t>(s.size())) {
    throw DimError(std::string(op) + ": axis " + std::to_string(axis) +
                   " out of range for shape " + shape_str(s));
  }
}

inline void accumulate(std::vector<double>& dst, std::span<const double> src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

}  // namespace detail

inline void Tensor::backward() const {
  if (!node_) throw ContractError("backward on undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (node_->tape_freed) throw ContractError("backward called twice on the same graph");
  if (!node_->requires_grad) {
    throw ContractError("backward: loss is not attached to the tape");
  }

  // Reverse DFS post-order = topological order with consumers first.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  struct Frame {
    detail::TensorNode* n;
    size_t next;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->inputs.size()) {
      detail::TensorNode* in = f.n->inputs[f.next++].get();
      if (in->requires_grad && !seen.count(in)) {
        seen.insert(in);
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->grad_buf()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Free the tape; leaves keep their accumulated gradients.
  for (detail::TensorNode* n : order) {
    if (!n->is_leaf) {
      n->inputs.clear();
      n->backward_fn = nullptr;
      n->grad.clear();
      n->tape_freed = true;
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise binary ops (exact shape match; use expand() for broadcasting)
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  auto n = detail::make_op("add", a.shape(), {a, b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + bv[i];
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      for (int k = 0; k < 2; ++k) {
        if (s.inputs[k]->requires_grad) detail::accumulate(s.inputs[k]->grad_buf(), s.grad);
      }
    };
  }
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  auto n = detail::make_op("sub", a.shape(), {a, b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] - bv[i];
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      if (s.inputs[0]->requires_grad) detail::accumulate(s.inputs[0]->grad_buf(), s.grad);
      if (s.inputs[1]->requires_grad) {
        auto& g = s.inputs[1]->grad_buf();
        for (size_t i = 0; i < s.grad.size(); ++i) g[i] -= s.grad[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  auto n = detail::make_op("mul", a.shape(), {a, b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * bv[i];
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      const auto& av = s.inputs[0]->value;
      const auto& bv = s.inputs[1]->value;
      if (s.inputs[0]->requires_grad) {
        auto& g = s.inputs[0]->grad_buf();
        for (size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * bv[i];
      }
      if (s.inputs[1]->requires_grad) {
        auto& g = s.inputs[1]->grad_buf();
        for (size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * av[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  auto n = detail::make_op("scalar_mul", a.shape(), {a});
  const auto& av = a.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * c;
  if (n->requires_grad) {
    n->backward_fn = [c](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * c;
    };
  }
  return Tensor(n);
}

inline Tensor scalar_add(const Tensor& a, double c) {
  auto n = detail::make_op("scalar_add", a.shape(), {a});
  const auto& av = a.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + c;
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      if (s.inputs[0]->requires_grad) detail::accumulate(s.inputs[0]->grad_buf(), s.grad);
    };
  }
  return Tensor(n);
}

inline Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }

// ---------------------------------------------------------------------------
// matmul: batched matrix product with leading-batch broadcasting
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimError("matmul: need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const int64_t k2 = sb[sb.size() - 2], nn = sb[sb.size() - 1];
  if (k != k2) {
    throw DimError("matmul: inner extents differ, " + shape_str(sa) + " @ " + shape_str(sb));
  }
  const size_t ra = sa.size() - 2, rb = sb.size() - 2;
  const size_t rbatch = std::max(ra, rb);
  Shape batch(rbatch);
  for (size_t i = 0; i < rbatch; ++i) {
    const int64_t da = (i < rbatch - ra) ? 1 : sa[i - (rbatch - ra)];
    const int64_t db = (i < rbatch - rb) ? 1 : sb[i - (rbatch - rb)];
    if (da != db && da != 1 && db != 1) {
      throw DimError("matmul: batch extents differ, " + shape_str(sa) + " @ " + shape_str(sb));
    }
    batch[i] = std::max(da, db);
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(nn);

  const int64_t nbatch = shape_numel(batch);
  // Per-slice offsets; broadcast batch dims contribute stride 0.
  auto slice_offsets = [&](const Shape& s, size_t r, int64_t mat) {
    std::vector<int64_t> offs(static_cast<size_t>(nbatch), 0);
    std::vector<int64_t> strides(rbatch, 0);
    int64_t acc = mat;
    for (size_t i = r; i-- > 0;) {
      const size_t bi = i + (rbatch - r);
      strides[bi] = (s[i] == 1 && batch[bi] != 1) ? 0 : acc;
      acc *= s[i];
    }
    std::vector<int64_t> idx(rbatch, 0);
    for (int64_t bl = 0; bl < nbatch; ++bl) {
      int64_t off = 0;
      for (size_t i = 0; i < rbatch; ++i) off += idx[i] * strides[i];
      offs[static_cast<size_t>(bl)] = off;
      for (size_t i = rbatch; i-- > 0;) {
        if (++idx[i] < batch[i]) break;
        idx[i] = 0;
      }
    }
    return offs;
  };
  const auto a_offs = slice_offsets(sa, ra, m * k);
  const auto b_offs = slice_offsets(sb, rb, k * nn);

  auto n = detail::make_op("matmul", out_shape, {a, b});
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  double* cp = n->value.data();
  for (int64_t bl = 0; bl < nbatch; ++bl) {
    detail::ECMap A(ap + a_offs[static_cast<size_t>(bl)], m, k);
    detail::ECMap B(bp + b_offs[static_cast<size_t>(bl)], k, nn);
    detail::EMap C(cp + bl * m * nn, m, nn);
    C.noalias() = A * B;
  }
  if (n->requires_grad) {
    n->backward_fn = [=](detail::TensorNode& s) {
      const double* gp = s.grad.data();
      const auto& av = s.inputs[0]->value;
      const auto& bv = s.inputs[1]->value;
      if (s.inputs[0]->requires_grad) {
        auto& ga = s.inputs[0]->grad_buf();
        for (int64_t bl = 0; bl < nbatch; ++bl) {
          detail::ECMap G(gp + bl * m * nn, m, nn);
          detail::ECMap B(bv.data() + b_offs[static_cast<size_t>(bl)], k, nn);
          detail::EMap dA(ga.data() + a_offs[static_cast<size_t>(bl)], m, k);
          dA.noalias() += G * B.transpose();
        }
      }
      if (s.inputs[1]->requires_grad) {
        auto& gb = s.inputs[1]->grad_buf();
        for (int64_t bl = 0; bl < nbatch; ++bl) {
          detail::ECMap G(gp + bl * m * nn, m, nn);
          detail::ECMap A(av.data() + a_offs[static_cast<size_t>(bl)], m, k);
          detail::EMap dB(gb.data() + b_offs[static_cast<size_t>(bl)], k, nn);
          dB.noalias() += A.transpose() * G;
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw DimError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                   " changes element count");
  }
  auto n = detail::make_op("reshape", std::move(new_shape), {a});
  n->value = a.values();
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      if (s.inputs[0]->requires_grad) detail::accumulate(s.inputs[0]->grad_buf(), s.grad);
    };
  }
  return Tensor(n);
}

namespace detail {
// dst[multi-index with ax0<->ax1 swapped] = src[multi-index]
inline void transpose_copy(const Shape& in_shape, int64_t ax0, int64_t ax1,
                           const double* src, double* dst, bool add_into) {
  const size_t r = in_shape.size();
  Shape out_shape = in_shape;
  std::swap(out_shape[static_cast<size_t>(ax0)], out_shape[static_cast<size_t>(ax1)]);
  auto out_st = row_major_strides(out_shape);
  // Stride of output walked in input index order.
  std::vector<int64_t> walk(r);
  for (size_t i = 0; i < r; ++i) walk[i] = out_st[i];
  std::swap(walk[static_cast<size_t>(ax0)], walk[static_cast<size_t>(ax1)]);
  std::vector<int64_t> idx(r, 0);
  const int64_t n = shape_numel(in_shape);
  int64_t off = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    if (add_into) {
      dst[off] += src[lin];
    } else {
      dst[off] = src[lin];
    }
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      off += walk[i];
      if (idx[i] < in_shape[i]) break;
      idx[i] = 0;
      off -= walk[i] * in_shape[i];
    }
  }
}
}  // namespace detail

inline Tensor transpose(const Tensor& a, int64_t ax0, int64_t ax1) {
  detail::check_axis("transpose", a.shape(), ax0);
  detail::check_axis("transpose", a.shape(), ax1);
  Shape out_shape = a.shape();
  std::swap(out_shape[static_cast<size_t>(ax0)], out_shape[static_cast<size_t>(ax1)]);
  auto n = detail::make_op("transpose", out_shape, {a});
  detail::transpose_copy(a.shape(), ax0, ax1, a.values().data(), n->value.data(), false);
  if (n->requires_grad) {
    Shape in_shape = a.shape();
    n->backward_fn = [=](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      // Transposing the gradient back is the same index swap from out to in.
      Shape g_shape = in_shape;
      std::swap(g_shape[static_cast<size_t>(ax0)], g_shape[static_cast<size_t>(ax1)]);
      detail::transpose_copy(g_shape, ax0, ax1, s.grad.data(),
                             s.inputs[0]->grad_buf().data(), true);
    };
  }
  return Tensor(n);
}

inline Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() < 2) throw DimError("transpose_last2: rank < 2");
  return transpose(a, a.ndim() - 2, a.ndim() - 1);
}

inline Tensor expand(const Tensor& a, const Shape& target) {
  const Shape& s = a.shape();
  if (target.size() < s.size()) {
    throw DimError("expand: target rank below input rank");
  }
  const size_t pad = target.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != target[pad + i] && s[i] != 1) {
      throw DimError("expand: cannot broadcast " + shape_str(s) + " to " + shape_str(target));
    }
  }
  auto n = detail::make_op("expand", target, {a});
  const size_t r = target.size();
  std::vector<int64_t> in_st(r, 0);
  {
    auto st = detail::row_major_strides(s);
    for (size_t i = 0; i < s.size(); ++i) {
      in_st[pad + i] = (s[i] == 1 && target[pad + i] != 1) ? 0 : st[i];
    }
  }
  const auto& av = a.values();
  std::vector<int64_t> idx(r, 0);
  int64_t in_off = 0;
  for (int64_t lin = 0; lin < shape_numel(target); ++lin) {
    n->value[static_cast<size_t>(lin)] = av[static_cast<size_t>(in_off)];
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      in_off += in_st[i];
      if (idx[i] < target[i]) break;
      idx[i] = 0;
      in_off -= in_st[i] * target[i];
    }
  }
  if (n->requires_grad) {
    Shape tgt = target;
    n->backward_fn = [in_st, tgt](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      const size_t r = tgt.size();
      std::vector<int64_t> idx(r, 0);
      int64_t in_off = 0;
      for (int64_t lin = 0; lin < shape_numel(tgt); ++lin) {
        g[static_cast<size_t>(in_off)] += s.grad[static_cast<size_t>(lin)];
        for (size_t i = r; i-- > 0;) {
          ++idx[i];
          in_off += in_st[i];
          if (idx[i] < tgt[i]) break;
          idx[i] = 0;
          in_off -= in_st[i] * tgt[i];
        }
      }
    };
  }
  return Tensor(n);
}

namespace detail {
// (outer, axis extent, inner) decomposition for axis-wise loops.
struct AxisSplit {
  int64_t outer, n, inner;
};
inline AxisSplit axis_split(const Shape& s, int64_t axis) {
  AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

inline Tensor concat_axis(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ContractError("concat_axis: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::check_axis("concat_axis", s0, axis);
  int64_t total = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != parts[0].ndim()) throw DimError("concat_axis: rank mismatch");
    for (int64_t i = 0; i < t.ndim(); ++i) {
      if (i != axis && t.shape()[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)]) {
        throw DimError("concat_axis: shape mismatch " + shape_str(t.shape()) + " vs " +
                       shape_str(s0));
      }
    }
    total += t.size(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;

  auto n = std::make_shared<detail::TensorNode>();
  n->op = "concat_axis";
  n->shape = out_shape;
  n->value.resize(static_cast<size_t>(shape_numel(out_shape)));
  n->is_leaf = false;
  bool req = false;
  for (const Tensor& t : parts) req = req || t.requires_grad();
  n->requires_grad = detail::grad_enabled() && req;
  if (n->requires_grad) {
    for (const Tensor& t : parts) n->inputs.push_back(t.node());
  }

  const auto sp = detail::axis_split(out_shape, axis);
  std::vector<int64_t> sizes;
  for (const Tensor& t : parts) sizes.push_back(t.size(axis));
  int64_t at = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].values();
    const int64_t pn = sizes[p];
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * pn * sp.inner, pn * sp.inner,
                  n->value.data() + (o * sp.n + at) * sp.inner);
    }
    at += pn;
  }
  if (n->requires_grad) {
    n->backward_fn = [sp, sizes](detail::TensorNode& s) {
      int64_t at = 0;
      for (size_t p = 0; p < s.inputs.size(); ++p) {
        const int64_t pn = sizes[p];
        if (s.inputs[p]->requires_grad) {
          auto& g = s.inputs[p]->grad_buf();
          for (int64_t o = 0; o < sp.outer; ++o) {
            const double* src = s.grad.data() + (o * sp.n + at) * sp.inner;
            double* dst = g.data() + o * pn * sp.inner;
            for (int64_t i = 0; i < pn * sp.inner; ++i) dst[i] += src[i];
          }
        }
        at += pn;
      }
    };
  }
  return Tensor(n);
}

inline Tensor concat_axis(const Tensor& a, const Tensor& b, int64_t axis) {
  return concat_axis(std::vector<Tensor>{a, b}, axis);
}

inline std::vector<Tensor> split_axis(const Tensor& t, int64_t axis,
                                      const std::vector<int64_t>& sizes) {
  detail::check_axis("split_axis", t.shape(), axis);
  int64_t total = 0;
  for (int64_t s : sizes) total += s;
  if (total != t.size(axis)) {
    throw DimError("split_axis: sizes sum to " + std::to_string(total) + ", axis extent is " +
                   std::to_string(t.size(axis)));
  }
  const auto sp = detail::axis_split(t.shape(), axis);
  std::vector<Tensor> outs;
  int64_t at = 0;
  for (int64_t pn : sizes) {
    Shape os = t.shape();
    os[static_cast<size_t>(axis)] = pn;
    auto n = detail::make_op("split_axis", os, {t});
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(t.values().data() + (o * sp.n + at) * sp.inner, pn * sp.inner,
                  n->value.data() + o * pn * sp.inner);
    }
    if (n->requires_grad) {
      const int64_t start = at;
      n->backward_fn = [sp, pn, start](detail::TensorNode& s) {
        if (!s.inputs[0]->requires_grad) return;
        auto& g = s.inputs[0]->grad_buf();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const double* src = s.grad.data() + o * pn * sp.inner;
          double* dst = g.data() + (o * sp.n + start) * sp.inner;
          for (int64_t i = 0; i < pn * sp.inner; ++i) dst[i] += src[i];
        }
      };
    }
    outs.push_back(Tensor(n));
    at += pn;
  }
  return outs;
}

inline std::vector<Tensor> split_axis(const Tensor& t, int64_t axis, int64_t parts) {
  detail::check_axis("split_axis", t.shape(), axis);
  if (parts < 1 || t.size(axis) % parts != 0) {
    throw DimError("split_axis: axis extent " + std::to_string(t.size(axis)) +
                   " not divisible into " + std::to_string(parts) + " parts");
  }
  return split_axis(t, axis, std::vector<int64_t>(static_cast<size_t>(parts),
                                                  t.size(axis) / parts));
}

// Gather rows along axis 0; backward scatter-adds.
inline Tensor index_rows(const Tensor& t, const std::vector<int64_t>& idx) {
  if (t.ndim() < 1) throw DimError("index_rows: rank 0 input");
  const int64_t rows = t.size(0);
  const int64_t inner = t.numel() / rows;
  for (int64_t i : idx) {
    if (i < 0 || i >= rows) throw DimError("index_rows: index " + std::to_string(i) +
                                           " out of range for " + std::to_string(rows) + " rows");
  }
  Shape os = t.shape();
  os[0] = static_cast<int64_t>(idx.size());
  auto n = detail::make_op("index_rows", os, {t});
  for (size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.values().data() + idx[r] * inner, inner, n->value.data() + r * inner);
  }
  if (n->requires_grad) {
    n->backward_fn = [idx, inner](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (size_t r = 0; r < idx.size(); ++r) {
        const double* src = s.grad.data() + r * inner;
        double* dst = g.data() + idx[r] * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_axis(const Tensor& a, int64_t axis) {
  detail::check_axis("sum_axis", a.shape(), axis);
  const auto sp = detail::axis_split(a.shape(), axis);
  Shape os;
  for (int64_t i = 0; i < a.ndim(); ++i) {
    if (i != axis) os.push_back(a.shape()[static_cast<size_t>(i)]);
  }
  if (os.empty()) os.push_back(1);
  auto n = detail::make_op("sum_axis", os, {a});
  const auto& av = a.values();
  std::fill(n->value.begin(), n->value.end(), 0.0);
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t j = 0; j < sp.n; ++j) {
      const double* src = av.data() + (o * sp.n + j) * sp.inner;
      double* dst = n->value.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (n->requires_grad) {
    n->backward_fn = [sp](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (int64_t o = 0; o < sp.outer; ++o) {
        const double* src = s.grad.data() + o * sp.inner;
        for (int64_t j = 0; j < sp.n; ++j) {
          double* dst = g.data() + (o * sp.n + j) * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor(n);
}

inline Tensor mean_axis(const Tensor& a, int64_t axis) {
  detail::check_axis("mean_axis", a.shape(), axis);
  return scalar_mul(sum_axis(a, axis), 1.0 / static_cast<double>(a.size(axis)));
}

inline Tensor sum_all(const Tensor& a) {
  auto n = detail::make_op("sum_all", {1}, {a});
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  n->value[0] = acc;
  if (n->requires_grad) {
    n->backward_fn = [](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (double& v : g) v += s.grad[0];
    };
  }
  return Tensor(n);
}

inline Tensor mean_all(const Tensor& a) {
  return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// unary nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd dydx_from_xy) {
  auto n = make_op(name, a.shape(), {a});
  const auto& av = a.values();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = fwd(av[i]);
  if (n->requires_grad) {
    n->backward_fn = [dydx_from_xy](TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      const auto& x = s.inputs[0]->value;
      for (size_t i = 0; i < s.grad.size(); ++i) {
        g[i] += s.grad[i] * dydx_from_xy(x[i], s.value[i]);
      }
    };
  }
  return Tensor(n);
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      "gelu", a,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor sin(const Tensor& a) {
  return detail::unary_op(
      "sin", a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
  return detail::unary_op(
      "cos", a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// log(x/(1-x)) with input clamped to [eps, 1-eps]; gradient is zero where the
// clamp is active.
inline Tensor inverse_sigmoid(const Tensor& a, double eps = 1e-5) {
  auto clamp = [eps](double x) { return std::min(std::max(x, eps), 1.0 - eps); };
  return detail::unary_op(
      "inverse_sigmoid", a,
      [clamp](double x) {
        const double c = clamp(x);
        return std::log(c / (1.0 - c));
      },
      [eps, clamp](double x, double) {
        if (x <= eps || x >= 1.0 - eps) return 0.0;
        const double c = clamp(x);
        return 1.0 / (c * (1.0 - c));
      });
}

// ---------------------------------------------------------------------------
// softmax / layer norm over the last axis
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) throw DimError("softmax_lastdim: rank 0 input");
  const int64_t L = a.shape().back();
  const int64_t rows = a.numel() / L;
  auto n = detail::make_op("softmax_lastdim", a.shape(), {a});
  const auto& av = a.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * L;
    double* y = n->value.data() + r * L;
    double mx = x[0];
    for (int64_t i = 1; i < L; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < L; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const double inv = 1.0 / sum;
    for (int64_t i = 0; i < L; ++i) y[i] *= inv;
  }
  if (n->requires_grad) {
    n->backward_fn = [L, rows](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = s.value.data() + r * L;
        const double* go = s.grad.data() + r * L;
        double dot = 0.0;
        for (int64_t i = 0; i < L; ++i) dot += go[i] * y[i];
        double* gi = g.data() + r * L;
        for (int64_t i = 0; i < L; ++i) gi[i] += y[i] * (go[i] - dot);
      }
    };
  }
  return Tensor(n);
}

inline Tensor layer_norm_lastdim(const Tensor& a, double eps = 1e-5) {
  if (a.ndim() < 1) throw DimError("layer_norm_lastdim: rank 0 input");
  const int64_t L = a.shape().back();
  const int64_t rows = a.numel() / L;
  auto n = detail::make_op("layer_norm_lastdim", a.shape(), {a});
  const auto& av = a.values();
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * L;
    double mu = 0.0;
    for (int64_t i = 0; i < L; ++i) mu += x[i];
    mu /= static_cast<double>(L);
    double var = 0.0;
    for (int64_t i = 0; i < L; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(L);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = s;
    double* y = n->value.data() + r * L;
    for (int64_t i = 0; i < L; ++i) y[i] = (x[i] - mu) * s;
  }
  if (n->requires_grad) {
    n->backward_fn = [L, rows, inv_std](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = s.value.data() + r * L;
        const double* go = s.grad.data() + r * L;
        double mg = 0.0, mgy = 0.0;
        for (int64_t i = 0; i < L; ++i) {
          mg += go[i];
          mgy += go[i] * y[i];
        }
        mg /= static_cast<double>(L);
        mgy /= static_cast<double>(L);
        const double si = inv_std[static_cast<size_t>(r)];
        double* gi = g.data() + r * L;
        for (int64_t i = 0; i < L; ++i) gi[i] += si * (go[i] - mg - y[i] * mgy);
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// bilinear grid sampling
// ---------------------------------------------------------------------------

// grid: [C,H,W]; points: [P,2] in normalized [0,1]^2, (x,y) with x across W.
// Out-of-range points clamp to the border. Differentiable in both arguments.
inline Tensor bilinear_sample(const Tensor& grid, const Tensor& points) {
  if (grid.ndim() != 3) throw DimError("bilinear_sample: grid must be [C,H,W]");
  if (points.ndim() != 2 || points.shape()[1] != 2) {
    throw DimError("bilinear_sample: points must be [P,2], got " + shape_str(points.shape()));
  }
  const int64_t C = grid.size(0), H = grid.size(1), W = grid.size(2);
  const int64_t P = points.size(0);
  auto n = detail::make_op("bilinear_sample", {P, C}, {grid, points});

  struct Corner {
    int64_t x0, x1, y0, y1;
    double wx, wy;
    bool cx_clamped, cy_clamped;
  };
  std::vector<Corner> cs(static_cast<size_t>(P));
  const auto& pv = points.values();
  for (int64_t p = 0; p < P; ++p) {
    const double fx = pv[static_cast<size_t>(2 * p)] * static_cast<double>(W) - 0.5;
    const double fy = pv[static_cast<size_t>(2 * p + 1)] * static_cast<double>(H) - 0.5;
    Corner c;
    c.cx_clamped = fx <= 0.0 || fx >= static_cast<double>(W - 1);
    c.cy_clamped = fy <= 0.0 || fy >= static_cast<double>(H - 1);
    const double cx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
    const double cy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
    c.x0 = static_cast<int64_t>(std::floor(cx));
    c.y0 = static_cast<int64_t>(std::floor(cy));
    c.x1 = std::min(c.x0 + 1, W - 1);
    c.y1 = std::min(c.y0 + 1, H - 1);
    c.wx = cx - static_cast<double>(c.x0);
    c.wy = cy - static_cast<double>(c.y0);
    cs[static_cast<size_t>(p)] = c;
  }
  const auto& gv = grid.values();
  auto cell = [&](int64_t c, int64_t y, int64_t x) {
    return gv[static_cast<size_t>((c * H + y) * W + x)];
  };
  for (int64_t p = 0; p < P; ++p) {
    const Corner& c = cs[static_cast<size_t>(p)];
    for (int64_t ch = 0; ch < C; ++ch) {
      const double top = (1.0 - c.wx) * cell(ch, c.y0, c.x0) + c.wx * cell(ch, c.y0, c.x1);
      const double bot = (1.0 - c.wx) * cell(ch, c.y1, c.x0) + c.wx * cell(ch, c.y1, c.x1);
      n->value[static_cast<size_t>(p * C + ch)] = (1.0 - c.wy) * top + c.wy * bot;
    }
  }
  if (n->requires_grad) {
    n->backward_fn = [C, H, W, P, cs](detail::TensorNode& s) {
      const auto& gv = s.inputs[0]->value;
      const bool need_grid = s.inputs[0]->requires_grad;
      const bool need_pts = s.inputs[1]->requires_grad;
      auto gidx = [&](int64_t c, int64_t y, int64_t x) {
        return static_cast<size_t>((c * H + y) * W + x);
      };
      for (int64_t p = 0; p < P; ++p) {
        const Corner& c = cs[static_cast<size_t>(p)];
        double dfx = 0.0, dfy = 0.0;
        for (int64_t ch = 0; ch < C; ++ch) {
          const double go = s.grad[static_cast<size_t>(p * C + ch)];
          if (go == 0.0) continue;
          if (need_grid) {
            auto& gg = s.inputs[0]->grad_buf();
            gg[gidx(ch, c.y0, c.x0)] += go * (1.0 - c.wy) * (1.0 - c.wx);
            gg[gidx(ch, c.y0, c.x1)] += go * (1.0 - c.wy) * c.wx;
            gg[gidx(ch, c.y1, c.x0)] += go * c.wy * (1.0 - c.wx);
            gg[gidx(ch, c.y1, c.x1)] += go * c.wy * c.wx;
          }
          if (need_pts) {
            const double v00 = gv[gidx(ch, c.y0, c.x0)], v01 = gv[gidx(ch, c.y0, c.x1)];
            const double v10 = gv[gidx(ch, c.y1, c.x0)], v11 = gv[gidx(ch, c.y1, c.x1)];
            dfx += go * ((1.0 - c.wy) * (v01 - v00) + c.wy * (v11 - v10));
            dfy += go * ((1.0 - c.wx) * (v10 - v00) + c.wx * (v11 - v01));
          }
        }
        if (need_pts) {
          auto& gp = s.inputs[1]->grad_buf();
          if (!c.cx_clamped) gp[static_cast<size_t>(2 * p)] += dfx * static_cast<double>(W);
          if (!c.cy_clamped) gp[static_cast<size_t>(2 * p + 1)] += dfy * static_cast<double>(H);
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// sine positional encoding
// ---------------------------------------------------------------------------

// coords: [..., 2] -> [..., n]. Per axis n/2 features, interleaved sin/cos of
// coord * 2*pi * temperature^(-4i/n); x block first, then y block.
inline Tensor sine_pe(const Tensor& coords, int64_t n_dim, double temperature = 10000.0) {
  if (n_dim % 4 != 0) {
    throw ConfigError("sine_pe: embed dim " + std::to_string(n_dim) + " not divisible by 4");
  }
  if (coords.ndim() < 1 || coords.shape().back() != 2) {
    throw DimError("sine_pe: coords must end in extent 2, got " + shape_str(coords.shape()));
  }
  const int64_t pairs = n_dim / 4;
  const int64_t rows = coords.numel() / 2;
  Shape os = coords.shape();
  os.back() = n_dim;
  auto node = detail::make_op("sine_pe", os, {coords});
  std::vector<double> scale(static_cast<size_t>(pairs));
  for (int64_t i = 0; i < pairs; ++i) {
    scale[static_cast<size_t>(i)] =
        2.0 * std::numbers::pi *
        std::pow(temperature, -4.0 * static_cast<double>(i) / static_cast<double>(n_dim));
  }
  const auto& cv = coords.values();
  for (int64_t r = 0; r < rows; ++r) {
    double* out = node->value.data() + r * n_dim;
    for (int axis = 0; axis < 2; ++axis) {
      const double c = cv[static_cast<size_t>(2 * r + axis)];
      double* blk = out + axis * (n_dim / 2);
      for (int64_t i = 0; i < pairs; ++i) {
        const double ang = c * scale[static_cast<size_t>(i)];
        blk[2 * i] = std::sin(ang);
        blk[2 * i + 1] = std::cos(ang);
      }
    }
  }
  if (node->requires_grad) {
    node->backward_fn = [rows, pairs, n_dim, scale](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (int64_t r = 0; r < rows; ++r) {
        const double* out = s.value.data() + r * n_dim;
        const double* go = s.grad.data() + r * n_dim;
        for (int axis = 0; axis < 2; ++axis) {
          const double* blk = out + axis * (n_dim / 2);
          const double* gb = go + axis * (n_dim / 2);
          double acc = 0.0;
          for (int64_t i = 0; i < pairs; ++i) {
            // d sin = cos, d cos = -sin
            acc += scale[static_cast<size_t>(i)] *
                   (gb[2 * i] * blk[2 * i + 1] - gb[2 * i + 1] * blk[2 * i]);
          }
          g[static_cast<size_t>(2 * r + axis)] += acc;
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// dropout (training-time only; identity at p = 0)
// ---------------------------------------------------------------------------

inline Tensor dropout(const Tensor& a, double p, RandomStream& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout: p must be < 1");
  auto n = detail::make_op("dropout", a.shape(), {a});
  std::vector<double> mask(a.values().size());
  const double keep = 1.0 - p;
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform01() < p ? 0.0 : 1.0 / keep;
    n->value[i] = a.values()[i] * mask[i];
  }
  if (n->requires_grad) {
    n->backward_fn = [mask](detail::TensorNode& s) {
      if (!s.inputs[0]->requires_grad) return;
      auto& g = s.inputs[0]->grad_buf();
      for (size_t i = 0; i < s.grad.size(); ++i) g[i] += s.grad[i] * mask[i];
    };
  }
  return Tensor(n);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace ean
