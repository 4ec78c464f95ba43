#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cdbuf/errors.hpp"

namespace cdbuf {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Backward hook. Receives the node's adjoint and one adjoint buffer per
// parent; a null buffer means that parent does not need gradient.
using BackFn = std::function<void(const Node& self, const std::vector<double>& adj,
                                  const std::vector<std::vector<double>*>& parent_adj)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;  // persistent grad accumulates here after backward
  bool grad_flow = false;      // some ancestor requires grad
  std::vector<double> grad;    // lazily sized on first accumulation
  std::vector<NodePtr> parents;
  BackFn backward;
  const char* op = "leaf";
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

// Disables graph construction in scope; forward values are still computed.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Value-semantics handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {});
  }

  static Tensor full(Shape shape, double v) {
    auto n = std::make_shared<detail::Node>();
    n->data.assign(static_cast<std::size_t>(numel_of(shape)), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return full({}, v); }

  static Tensor from_data(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    const auto count = static_cast<std::size_t>(numel_of(shape));
    if (data.empty()) data.assign(count, 0.0);
    if (data.size() != count) {
      throw ShapeError("tensor: data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
  }

  // Leaf parameter: accumulates persistent gradient on backward.
  static Tensor param(Shape shape, std::vector<double> data = {}) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return numel_of(node_->shape); }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::span<const double> data() const { return node_->data; }
  // In-place data access; reserved for parameter updates and builders.
  std::span<double> mutable_data() { return node_->data; }

  double value() const {
    if (numel() != 1) {
      throw ShapeError("value(): tensor " + shape_str(shape()) + " is not scalar");
    }
    return node_->data[0];
  }

  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  detail::NodePtr node() const { return node_; }

  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline NodePtr make_node(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                         BackFn fn, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool flow = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) flow = flow || p->requires_grad || p->grad_flow;
  }
  if (flow) {
    n->grad_flow = true;
    n->parents = std::move(parents);
    n->backward = std::move(fn);
  }
  return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void check_cw(const Tensor& x, const Tensor& v, const char* op) {
  if (x.rank() != 4 || v.rank() != 1) {
    throw ShapeError(std::string(op) + ": expects [N,C,H,W] and [C], got " +
                     shape_str(x.shape()) + " and " + shape_str(v.shape()));
  }
  if (x.shape()[1] != v.shape()[0]) {
    throw ShapeError(std::string(op) + ": channel axis 1 of x (" +
                     std::to_string(x.shape()[1]) + ") does not match axis 0 of v (" +
                     std::to_string(v.shape()[0]) + ")");
  }
}

}  // namespace detail

// Ordered record of the computation reaching `root`: every node's inputs
// precede it, so the reverse sweep visits each node exactly once.
struct Tape {
  std::vector<detail::Node*> nodes;

  static Tape from(const Tensor& root) {
    Tape tape;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; parent order is fixed, so the tape is
    // deterministic.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        tape.nodes.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const detail::Node&, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        for (int p = 0; p < 2; ++p) {
          if (!padj[p]) continue;
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[p])[i] += adj[i];
        }
      },
      "add"));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const detail::Node&, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i];
        if (padj[1])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[1])[i] -= adj[i];
      },
      "sub"));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {an, bn},
      [an, bn](const detail::Node&, const std::vector<double>& adj,
               const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i] * bn->data[i];
        if (padj[1])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[1])[i] += adj[i] * an->data[i];
      },
      "mul"));
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {a.node()},
      [c](const detail::Node&, const std::vector<double>& adj,
          const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i] * c;
      },
      "scale"));
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {a.node()},
      [](const detail::Node&, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i];
      },
      "add_scalar"));
}

// x * s where s is a scalar tensor (participates in the graph).
inline Tensor mul_st(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_st: second argument must be scalar");
  const double sv = s[0];
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= sv;
  auto an = a.node();
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {an, s.node()},
      [an, sv](const detail::Node&, const std::vector<double>& adj,
               const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i] * sv;
        if (padj[1]) {
          double acc = 0.0;
          for (std::size_t i = 0; i < adj.size(); ++i) acc += adj[i] * an->data[i];
          (*padj[1])[0] += acc;
        }
      },
      "mul_st"));
}

// x + s with a scalar tensor s.
inline Tensor add_st(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("add_st: second argument must be scalar");
  const double sv = s[0];
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += sv;
  return Tensor(detail::make_node(
      a.shape(), std::move(out), {a.node(), s.node()},
      [](const detail::Node&, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (padj[0])
          for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i];
        if (padj[1]) {
          double acc = 0.0;
          for (double v : adj) acc += v;
          (*padj[1])[0] += acc;
        }
      },
      "add_st"));
}

// Per-channel broadcast: x[N,C,H,W] * v[C]. The only broadcast the library
// supports, which is all the channel-modulation math needs.
inline Tensor mul_cw(const Tensor& x, const Tensor& v) {
  detail::check_cw(x, v, "mul_cw");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  std::vector<double> out(x.numel());
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const double m = v[static_cast<std::size_t>(ic)];
      const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
      for (int i = 0; i < hw; ++i) out[base + i] = x[base + i] * m;
    }
  auto xn = x.node(), vn = v.node();
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {xn, vn},
      [xn, vn, n, c, hw](const detail::Node&, const std::vector<double>& adj,
                         const std::vector<std::vector<double>*>& padj) {
        for (int in = 0; in < n; ++in)
          for (int ic = 0; ic < c; ++ic) {
            const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
            if (padj[0]) {
              const double m = vn->data[static_cast<std::size_t>(ic)];
              for (int i = 0; i < hw; ++i) (*padj[0])[base + i] += adj[base + i] * m;
            }
            if (padj[1]) {
              double acc = 0.0;
              for (int i = 0; i < hw; ++i) acc += adj[base + i] * xn->data[base + i];
              (*padj[1])[static_cast<std::size_t>(ic)] += acc;
            }
          }
      },
      "mul_cw"));
}

inline Tensor add_cw(const Tensor& x, const Tensor& v) {
  detail::check_cw(x, v, "add_cw");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  std::vector<double> out(x.numel());
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const double m = v[static_cast<std::size_t>(ic)];
      const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
      for (int i = 0; i < hw; ++i) out[base + i] = x[base + i] + m;
    }
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {x.node(), v.node()},
      [n, c, hw](const detail::Node&, const std::vector<double>& adj,
                 const std::vector<std::vector<double>*>& padj) {
        for (int in = 0; in < n; ++in)
          for (int ic = 0; ic < c; ++ic) {
            const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
            if (padj[0])
              for (int i = 0; i < hw; ++i) (*padj[0])[base + i] += adj[base + i];
            if (padj[1]) {
              double acc = 0.0;
              for (int i = 0; i < hw; ++i) acc += adj[base + i];
              (*padj[1])[static_cast<std::size_t>(ic)] += acc;
            }
          }
      },
      "add_cw"));
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {x.node()},
      [](const detail::Node& self, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < adj.size(); ++i) {
          const double y = self.data[i];
          (*padj[0])[i] += adj[i] * y * (1.0 - y);
        }
      },
      "sigmoid"));
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto xn = x.node();
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {xn},
      [xn](const detail::Node&, const std::vector<double>& adj,
           const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < adj.size(); ++i)
          if (xn->data[i] > 0.0) (*padj[0])[i] += adj[i];
      },
      "relu"));
}

inline Tensor abs_t(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(x[i]);
  auto xn = x.node();
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {xn},
      [xn](const detail::Node&, const std::vector<double>& adj,
           const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < adj.size(); ++i) {
          const double v = xn->data[i];
          // subgradient 0 at v == 0
          (*padj[0])[i] += adj[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        }
      },
      "abs"));
}

inline Tensor sqrt_t(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(x[i]);
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {x.node()},
      [](const detail::Node& self, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < adj.size(); ++i) (*padj[0])[i] += adj[i] * 0.5 / self.data[i];
      },
      "sqrt"));
}

inline Tensor reciprocal(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / x[i];
  return Tensor(detail::make_node(
      x.shape(), std::move(out), {x.node()},
      [](const detail::Node& self, const std::vector<double>& adj,
         const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < adj.size(); ++i) {
          const double y = self.data[i];
          (*padj[0])[i] -= adj[i] * y * y;
        }
      },
      "reciprocal"));
}

// Forward value identical to x; contributes zero gradient upstream.
inline Tensor stop_gradient(const Tensor& x) {
  auto n = std::make_shared<detail::Node>();
  n->shape = x.shape();
  n->data.assign(x.data().begin(), x.data().end());
  n->op = "stop_gradient";
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor reduce_impl(const Tensor& x, std::vector<int> axes, bool mean, const char* opname) {
  const Shape& in = x.shape();
  const int r = static_cast<int>(in.size());
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<char> reduced(static_cast<std::size_t>(r), 0);
  for (int a : axes) {
    if (a < 0 || a >= r) throw ShapeError("reduce: axis out of range for " + shape_str(in));
    reduced[static_cast<std::size_t>(a)] = 1;
  }
  Shape out_shape;
  std::int64_t count = 1;
  for (int i = 0; i < r; ++i) {
    if (reduced[static_cast<std::size_t>(i)])
      count *= in[static_cast<std::size_t>(i)];
    else
      out_shape.push_back(in[static_cast<std::size_t>(i)]);
  }
  // Strides of the output index within the flattened input walk.
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i) + 1] * in[static_cast<std::size_t>(i) + 1];
  std::vector<std::int64_t> out_strides;
  {
    std::vector<std::int64_t> os(out_shape.size(), 1);
    for (int i = static_cast<int>(out_shape.size()) - 2; i >= 0; --i)
      os[static_cast<std::size_t>(i)] =
          os[static_cast<std::size_t>(i) + 1] * out_shape[static_cast<std::size_t>(i) + 1];
    out_strides = std::move(os);
  }
  const std::int64_t total = numel_of(in);
  std::vector<double> out(static_cast<std::size_t>(numel_of(out_shape)), 0.0);
  // Map each input linear index to its output linear index.
  std::vector<std::int64_t> out_of(static_cast<std::size_t>(total));
  for (std::int64_t idx = 0; idx < total; ++idx) {
    std::int64_t rem = idx, oidx = 0;
    int oax = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t coord = rem / in_strides[static_cast<std::size_t>(i)];
      rem %= in_strides[static_cast<std::size_t>(i)];
      if (!reduced[static_cast<std::size_t>(i)]) {
        oidx += coord * out_strides[static_cast<std::size_t>(oax)];
        ++oax;
      }
    }
    out_of[static_cast<std::size_t>(idx)] = oidx;
    out[static_cast<std::size_t>(oidx)] += x[static_cast<std::size_t>(idx)];
  }
  const double inv = mean ? 1.0 / static_cast<double>(count) : 1.0;
  if (mean)
    for (auto& v : out) v *= inv;
  return Tensor(make_node(
      out_shape, std::move(out), {x.node()},
      [out_of = std::move(out_of), inv](const Node&, const std::vector<double>& adj,
                                        const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        for (std::size_t i = 0; i < out_of.size(); ++i)
          (*padj[0])[i] += adj[static_cast<std::size_t>(out_of[i])] * inv;
      },
      opname));
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, std::vector<int> axes) {
  return detail::reduce_impl(x, std::move(axes), false, "reduce_sum");
}

inline Tensor reduce_mean(const Tensor& x, std::vector<int> axes) {
  return detail::reduce_impl(x, std::move(axes), true, "reduce_mean");
}

inline Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_sum(x, std::move(axes));
}

inline Tensor mean_all(const Tensor& x) {
  std::vector<int> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_mean(x, std::move(axes));
}

// Per-channel mean of [N,C,H,W] over (N,H,W) -> [C].
inline Tensor channel_mean(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("channel_mean: expects rank-4, got " + shape_str(x.shape()));
  return reduce_mean(x, {0, 2, 3});
}

namespace detail {

inline Tensor extremum(const Tensor& x, bool want_max, const char* opname) {
  if (x.numel() == 0) throw ShapeError("reduce_min/max: empty tensor");
  std::size_t arg = 0;
  double best = x[0];
  for (std::size_t i = 1; i < static_cast<std::size_t>(x.numel()); ++i) {
    const double v = x[i];
    if (want_max ? (v > best) : (v < best)) {
      best = v;
      arg = i;  // ties resolve to the first index
    }
  }
  return Tensor(make_node(
      {}, {best}, {x.node()},
      [arg](const Node&, const std::vector<double>& adj,
            const std::vector<std::vector<double>*>& padj) {
        if (padj[0]) (*padj[0])[arg] += adj[0];
      },
      opname));
}

}  // namespace detail

inline Tensor reduce_min(const Tensor& x) { return detail::extremum(x, false, "reduce_min"); }
inline Tensor reduce_max(const Tensor& x) { return detail::extremum(x, true, "reduce_max"); }

// mean(|a - b|) over all elements.
inline Tensor l1_mean_distance(const Tensor& a, const Tensor& b) {
  return mean_all(abs_t(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Convolution, linear head, cross-entropy
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range [lo, hi) such that 0 <= oy*stride - padding + k < extent.
inline void conv_valid_range(int extent, int out_extent, int stride, int padding, int k, int& lo,
                             int& hi) {
  lo = 0;
  while (lo < out_extent && lo * stride - padding + k < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride - padding + k >= extent) --hi;
}

}  // namespace detail

// Cross-correlation of [N,C,H,W] with [O,C,kh,kw], zero padding. Inner loops
// run over contiguous rows per kernel tap with the border handling hoisted
// out, in both directions.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride = 1, int padding = 0) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expects rank-4 input and weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  }
  const int n = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  const int o = weight.shape()[0], kc = weight.shape()[1], kh = weight.shape()[2],
            kw = weight.shape()[3];
  if (c != kc) {
    throw ShapeError("conv2d: input channel axis 1 (" + std::to_string(c) +
                     ") does not match weight channel axis 1 (" + std::to_string(kc) + ")");
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                     " does not fit input spatial axes 2,3 of " + shape_str(input.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(n) * o * oh * ow, 0.0);
  const double* x = input.data().data();
  const double* k = weight.data().data();
  for (int in = 0; in < n; ++in)
    for (int io = 0; io < o; ++io) {
      double* out_plane = out.data() + (static_cast<std::size_t>(in) * o + io) * oh * ow;
      for (int ic = 0; ic < c; ++ic) {
        const double* in_plane = x + (static_cast<std::size_t>(in) * c + ic) * h * w;
        const double* k_tap = k + (static_cast<std::size_t>(io) * c + ic) * kh * kw;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double kv = k_tap[ky * kw + kx];
            if (kv == 0.0) continue;
            int y0, y1, x0, x1;
            detail::conv_valid_range(h, oh, stride, padding, ky, y0, y1);
            detail::conv_valid_range(w, ow, stride, padding, kx, x0, x1);
            for (int oy = y0; oy < y1; ++oy) {
              const double* in_row = in_plane + (oy * stride - padding + ky) * w - padding + kx;
              double* out_row = out_plane + oy * ow;
              if (stride == 1) {
                for (int ox = x0; ox < x1; ++ox) out_row[ox] += kv * in_row[ox];
              } else {
                for (int ox = x0; ox < x1; ++ox) out_row[ox] += kv * in_row[ox * stride];
              }
            }
          }
      }
    }
  auto in_node = input.node(), w_node = weight.node();
  return Tensor(detail::make_node(
      {n, o, oh, ow}, std::move(out), {in_node, w_node},
      [in_node, w_node, n, c, h, w, o, kh, kw, oh, ow, stride, padding](
          const detail::Node&, const std::vector<double>& adj,
          const std::vector<std::vector<double>*>& padj) {
        const double* x = in_node->data.data();
        const double* k = w_node->data.data();
        for (int in = 0; in < n; ++in)
          for (int io = 0; io < o; ++io) {
            const double* adj_plane =
                adj.data() + (static_cast<std::size_t>(in) * o + io) * oh * ow;
            for (int ic = 0; ic < c; ++ic) {
              const std::size_t plane_off = (static_cast<std::size_t>(in) * c + ic) * h * w;
              const double* in_plane = x + plane_off;
              const std::size_t k_off = (static_cast<std::size_t>(io) * c + ic) * kh * kw;
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  int y0, y1, x0, x1;
                  detail::conv_valid_range(h, oh, stride, padding, ky, y0, y1);
                  detail::conv_valid_range(w, ow, stride, padding, kx, x0, x1);
                  const double kv = k[k_off + ky * kw + kx];
                  double kgrad = 0.0;
                  for (int oy = y0; oy < y1; ++oy) {
                    const int row_shift = (oy * stride - padding + ky) * w - padding + kx;
                    const double* adj_row = adj_plane + oy * ow;
                    if (padj[0]) {
                      double* din_row = padj[0]->data() + plane_off + row_shift;
                      if (stride == 1) {
                        for (int ox = x0; ox < x1; ++ox) din_row[ox] += kv * adj_row[ox];
                      } else {
                        for (int ox = x0; ox < x1; ++ox) din_row[ox * stride] += kv * adj_row[ox];
                      }
                    }
                    if (padj[1]) {
                      const double* in_row = in_plane + row_shift;
                      if (stride == 1) {
                        for (int ox = x0; ox < x1; ++ox) kgrad += adj_row[ox] * in_row[ox];
                      } else {
                        for (int ox = x0; ox < x1; ++ox)
                          kgrad += adj_row[ox] * in_row[ox * stride];
                      }
                    }
                  }
                  if (padj[1]) (*padj[1])[k_off + ky * kw + kx] += kgrad;
                }
            }
          }
      },
      "conv2d"));
}

// y[n,k] = sum_c x[n,c] * w[k,c] + b[k].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("linear: expects x[N,C], w[K,C], b[K]");
  }
  const int n = x.shape()[0], c = x.shape()[1], k = w.shape()[0];
  if (w.shape()[1] != c || b.shape()[0] != k) {
    throw ShapeError("linear: axis mismatch, x " + shape_str(x.shape()) + " w " +
                     shape_str(w.shape()) + " b " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  for (int in = 0; in < n; ++in)
    for (int ik = 0; ik < k; ++ik) {
      double acc = b[static_cast<std::size_t>(ik)];
      for (int ic = 0; ic < c; ++ic)
        acc += x[static_cast<std::size_t>(in) * c + ic] * w[static_cast<std::size_t>(ik) * c + ic];
      out[static_cast<std::size_t>(in) * k + ik] = acc;
    }
  auto xn = x.node(), wn = w.node();
  return Tensor(detail::make_node(
      {n, k}, std::move(out), {xn, wn, b.node()},
      [xn, wn, n, c, k](const detail::Node&, const std::vector<double>& adj,
                        const std::vector<std::vector<double>*>& padj) {
        for (int in = 0; in < n; ++in)
          for (int ik = 0; ik < k; ++ik) {
            const double g = adj[static_cast<std::size_t>(in) * k + ik];
            if (padj[0])
              for (int ic = 0; ic < c; ++ic)
                (*padj[0])[static_cast<std::size_t>(in) * c + ic] +=
                    g * wn->data[static_cast<std::size_t>(ik) * c + ic];
            if (padj[1])
              for (int ic = 0; ic < c; ++ic)
                (*padj[1])[static_cast<std::size_t>(ik) * c + ic] +=
                    g * xn->data[static_cast<std::size_t>(in) * c + ic];
            if (padj[2]) (*padj[2])[static_cast<std::size_t>(ik)] += g;
          }
      },
      "linear"));
}

// Mean softmax cross-entropy over the batch; labels are class indices.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,K]");
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(n));
  }
  std::vector<double> probs(static_cast<std::size_t>(n) * k);
  double loss = 0.0;
  for (int in = 0; in < n; ++in) {
    const std::size_t base = static_cast<std::size_t>(in) * k;
    double mx = logits[base];
    for (int ik = 1; ik < k; ++ik) mx = std::max(mx, logits[base + ik]);
    double denom = 0.0;
    for (int ik = 0; ik < k; ++ik) {
      probs[base + ik] = std::exp(logits[base + ik] - mx);
      denom += probs[base + ik];
    }
    for (int ik = 0; ik < k; ++ik) probs[base + ik] /= denom;
    loss -= std::log(probs[base + static_cast<std::size_t>(labels[static_cast<std::size_t>(in)])]);
  }
  loss /= static_cast<double>(n);
  return Tensor(detail::make_node(
      {}, {loss}, {logits.node()},
      [probs = std::move(probs), labels, n, k](const detail::Node&,
                                               const std::vector<double>& adj,
                                               const std::vector<std::vector<double>*>& padj) {
        if (!padj[0]) return;
        const double g = adj[0] / static_cast<double>(n);
        for (int in = 0; in < n; ++in) {
          const std::size_t base = static_cast<std::size_t>(in) * k;
          for (int ik = 0; ik < k; ++ik) {
            const double onehot =
                ik == labels[static_cast<std::size_t>(in)] ? 1.0 : 0.0;
            (*padj[0])[base + ik] += g * (probs[base + ik] - onehot);
          }
        }
      },
      "cross_entropy"));
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { kTrain, kEval };

struct BatchNormOut {
  Tensor y;
  Tensor batch_mean;  // [C]
  Tensor batch_var;   // [C], biased
};

// Train mode normalizes with batch statistics over (N,H,W) and updates the
// running estimates; eval mode normalizes with the running estimates. Batch
// statistics are returned in both modes for alignment use.
inline BatchNormOut batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               double eps, BnMode mode, std::vector<double>* run_mean = nullptr,
                               std::vector<double>* run_var = nullptr, double momentum = 0.1) {
  if (x.rank() != 4) throw ShapeError("batch_norm: expects [N,C,H,W], got " + shape_str(x.shape()));
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (gamma.rank() != 1 || gamma.shape()[0] != c || beta.rank() != 1 || beta.shape()[0] != c) {
    throw ShapeError("batch_norm: gamma/beta must be [C] with C=" + std::to_string(c));
  }
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be > 0");

  BatchNormOut out;
  if (mode == BnMode::kTrain) {
    if (static_cast<std::int64_t>(n) * h * w < 2) {
      throw NumericError("batch_norm: degenerate batch, N*H*W = " +
                         std::to_string(static_cast<std::int64_t>(n) * h * w) + " < 2");
    }
    Tensor mu = channel_mean(x);
    Tensor xc = add_cw(x, scale(mu, -1.0));
    Tensor var = channel_mean(mul(xc, xc));
    Tensor rstd = reciprocal(sqrt_t(add_scalar(var, eps)));
    Tensor xhat = mul_cw(xc, rstd);
    out.y = add_cw(mul_cw(xhat, gamma), beta);
    out.batch_mean = mu;
    out.batch_var = var;
    if (run_mean && run_var) {
      for (int ic = 0; ic < c; ++ic) {
        (*run_mean)[static_cast<std::size_t>(ic)] =
            (1.0 - momentum) * (*run_mean)[static_cast<std::size_t>(ic)] +
            momentum * mu[static_cast<std::size_t>(ic)];
        (*run_var)[static_cast<std::size_t>(ic)] =
            (1.0 - momentum) * (*run_var)[static_cast<std::size_t>(ic)] +
            momentum * var[static_cast<std::size_t>(ic)];
      }
    }
  } else {
    if (!run_mean || !run_var) throw ConfigError("batch_norm: eval mode needs running stats");
    std::vector<double> neg_mean(static_cast<std::size_t>(c)), rstd(static_cast<std::size_t>(c));
    for (int ic = 0; ic < c; ++ic) {
      neg_mean[static_cast<std::size_t>(ic)] = -(*run_mean)[static_cast<std::size_t>(ic)];
      rstd[static_cast<std::size_t>(ic)] =
          1.0 / std::sqrt((*run_var)[static_cast<std::size_t>(ic)] + eps);
    }
    Tensor xc = add_cw(x, Tensor::from_data({c}, std::move(neg_mean)));
    Tensor xhat = mul_cw(xc, Tensor::from_data({c}, std::move(rstd)));
    out.y = add_cw(mul_cw(xhat, gamma), beta);
    {
      NoGradGuard ng;
      out.batch_mean = channel_mean(x);
      Tensor bxc = add_cw(x, scale(out.batch_mean, -1.0));
      out.batch_var = channel_mean(mul(bxc, bxc));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass and gradient checking
// ---------------------------------------------------------------------------

// Reverse sweep over the tape from `loss`. Per call, each parameter's
// persistent grad receives exactly one copy of dloss/dparam; calls without an
// intervening zero_grad accumulate.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Tape tape = Tape::from(loss);
  std::unordered_map<detail::Node*, std::vector<double>> adj;
  adj[loss.node().get()] = {1.0};
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    detail::Node* node = *it;
    auto found = adj.find(node);
    if (found == adj.end() || !node->backward) continue;
    std::vector<std::vector<double>*> padj(node->parents.size(), nullptr);
    for (std::size_t p = 0; p < node->parents.size(); ++p) {
      detail::Node* parent = node->parents[p].get();
      if (!parent->requires_grad && !parent->grad_flow) continue;
      auto [slot, inserted] = adj.try_emplace(parent);
      if (inserted) slot->second.assign(parent->data.size(), 0.0);
      padj[p] = &slot->second;
    }
    node->backward(*node, found->second, padj);
  }
  for (detail::Node* node : tape.nodes) {
    if (!node->requires_grad) continue;
    auto found = adj.find(node);
    if (found == adj.end()) continue;
    if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
    for (std::size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += found->second[i];
  }
}

// Max over all parameter elements of the relative error between the autodiff
// gradient and a central finite difference of f. f must be deterministic.
inline double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h) {
  for (auto p : params) {
    if (!p.requires_grad()) throw ConfigError("grad_check: all params must require grad");
    p.zero_grad();
  }
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> autograd;
  autograd.reserve(params.size());
  for (const auto& p : params) {
    autograd.emplace_back(p.grad().begin(), p.grad().end());
    if (autograd.back().empty()) autograd.back().assign(static_cast<std::size_t>(p.numel()), 0.0);
  }
  double max_rel = 0.0;
  NoGradGuard ng;  // finite differences only need forward values
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f().value();
      data[i] = saved - h;
      const double fm = f().value();
      data[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::fabs(autograd[pi][i] - fd) / std::max(std::fabs(fd), 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace cdbuf
