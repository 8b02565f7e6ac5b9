#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtmt/tensor.hpp"

namespace dtmt {

enum class Op : int {
  leaf,
  matmul,
  add,
  sub,
  mul,
  sigmoid,
  tanh,
  scale,
  shift,
  softmax,
  log_softmax,
  concat,
  slice,
  sum,
  layer_norm,
  row,
  stack_rows,
  tile_rows,
  reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::sum: return "sum";
    case Op::layer_norm: return "layer_norm";
    case Op::row: return "row";
    case Op::stack_rows: return "stack_rows";
    case Op::tile_rows: return "tile_rows";
    case Op::reshape: return "reshape";
  }
  return "?";
}

namespace detail {
inline std::atomic<int>& fault_slot() {
  static std::atomic<int> slot{-1};
  return slot;
}
}  // namespace detail

/// Corrupts the backward rule of one op kind: its incoming gradient is scaled
/// by 1.5 before propagation. Process-wide; reset with clear_fault_injection().
inline void set_fault_injection(Op op) { detail::fault_slot().store(static_cast<int>(op)); }
inline void clear_fault_injection() { detail::fault_slot().store(-1); }
inline bool fault_injected(Op op) { return detail::fault_slot().load(std::memory_order_relaxed) == static_cast<int>(op); }

/// A trainable tensor that outlives any single graph.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}
  void zero_grad() { grad.fill(0.0); }
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool valid() const { return graph != nullptr; }
};

/// Define-by-run tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep. Confined to the
/// thread that records it.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  struct Node {
    Op op = Op::leaf;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    const Tensor* external = nullptr;  // parameter leaves alias the parameter value
    Parameter* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
    Tensor leaf_accum;  // accumulated grad of non-parameter leaves across backward calls
    bool has_leaf_accum = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant input; never receives a gradient.
  Var constant(Tensor t) { return push_leaf(std::move(t), false); }

  /// Input leaf that may receive a gradient, read back with grad().
  Var input(Tensor t, bool requires_grad = true) { return push_leaf(std::move(t), requires_grad); }

  /// Leaf bound to a parameter. Binding the same parameter twice returns the same node.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Node n;
    n.op = Op::leaf;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = grad_enabled_;
    auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&p, id);
    return Var{this, id};
  }

  /// Records an op output. `backward` may be empty when no input needs grad.
  Var push(Op op, std::vector<std::uint32_t> inputs, Tensor value, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op '") + op_name(op) + "'");
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = false;
    for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(n));
    return Var{this, id};
  }

  const Tensor& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient slot of a node, zero-initialised on first touch in the current sweep.
  Tensor& grad_slot(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(value(id));
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are added into
  /// Parameter::grad when `accumulate_into_params` is set; repeated calls
  /// accumulate until the caller resets them.
  void backward(Var loss, bool accumulate_into_params = true) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to a different graph");
    if (value(loss.id).size() != 1 || value(loss.id).rank() > 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
    }
    if (!nodes_[loss.id].requires_grad) return;
    grad_slot(loss.id).fill(1.0);
    for (std::int64_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.requires_grad) continue;
      if (n.backward) {
        // the closure may touch grad slots of earlier nodes only, so `n` stays valid
        if (fault_injected(n.op)) {
          Tensor corrupted = n.grad;
          corrupted *= 1.5;
          n.backward(*this, corrupted);
        } else {
          n.backward(*this, n.grad);
        }
      }
    }
    for (auto& n : nodes_) {
      if (n.op != Op::leaf || !n.requires_grad) continue;
      if (n.param) {
        if (accumulate_into_params && n.has_grad) n.param->grad += n.grad;
      } else if (n.has_grad) {
        if (!n.has_leaf_accum) {
          n.leaf_accum = n.grad;
          n.has_leaf_accum = true;
        } else {
          n.leaf_accum += n.grad;
        }
      }
    }
  }

  /// Accumulated gradient of an input leaf, or the last-sweep gradient of any other node.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.op == Op::leaf && !n.param) {
      return n.has_leaf_accum ? n.leaf_accum : Tensor::zeros_like(value(v.id));
    }
    return n.has_grad ? n.grad : Tensor::zeros_like(value(v.id));
  }

  /// Parameters bound to this graph with their gradient from the last sweep.
  template <typename F>
  void for_each_param_grad(F&& f) const {
    for (const auto& n : nodes_) {
      if (n.param && n.has_grad) f(*n.param, n.grad);
    }
  }

  /// Disables gradient recording for subsequently bound parameters (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  Var push_leaf(Tensor t, bool requires_grad) {
    if (!t.all_finite()) throw NumericError("non-finite value in graph input");
    Node n;
    n.op = Op::leaf;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(n));
    return Var{this, id};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return graph->value(id); }

/// Convenience form of Graph::backward accumulating into Parameter::grad.
inline void backward(Graph& g, Var loss) { g.backward(loss, true); }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

inline Graph& same_graph(Var a, Var b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw ContractError(std::string(op) + ": operands belong to different graphs");
  }
  return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// out(n) += x(k) . W(k x n)
inline void vec_mat_acc(const double* x, const double* w, double* out, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < k; ++i) {
    const double xi = x[i];
    const double* wr = w + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xi * wr[j];
  }
}

// out(k) += W(k x n) . g(n)
inline void mat_vec_acc(const double* w, const double* g, double* out, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < k; ++i) {
    const double* wr = w + i * n;
    // four interleaved partial sums, combined in a fixed order
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      s0 += wr[j] * g[j];
      s1 += wr[j + 1] * g[j + 1];
      s2 += wr[j + 2] * g[j + 2];
      s3 += wr[j + 3] * g[j + 3];
    }
    for (; j < n; ++j) s0 += wr[j] * g[j];
    out[i] += (s0 + s1) + (s2 + s3);
  }
}

// W(k x n) += x(k) outer g(n)
inline void outer_acc(const double* x, const double* g, double* w, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < k; ++i) {
    const double xi = x[i];
    double* wr = w + i * n;
    for (std::size_t j = 0; j < n; ++j) wr[j] += xi * g[j];
  }
}

}  // namespace detail

/// Matrix product. Accepted forms: (k)·(k×n)→(n), (m×k)·(k×n)→(m×n), (m×k)·(k)→(m).
inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  };
  if (A.rank() == 1 && B.rank() == 2) {
    const std::size_t k = A.dim(0), n = B.dim(1);
    if (B.dim(0) != k) throw mismatch();
    Tensor out(Shape{n}, 0.0);
    detail::vec_mat_acc(A.data(), B.data(), out.data(), k, n);
    return g.push(Op::matmul, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, k, n](Graph& gr, const Tensor& go) {
      if (gr.requires_grad(ai)) detail::mat_vec_acc(gr.value(bi).data(), go.data(), gr.grad_slot(ai).data(), k, n);
      if (gr.requires_grad(bi)) detail::outer_acc(gr.value(ai).data(), go.data(), gr.grad_slot(bi).data(), k, n);
    });
  }
  if (A.rank() == 2 && B.rank() == 2) {
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    if (B.dim(0) != k) throw mismatch();
    Tensor out(Shape{m, n}, 0.0);
    for (std::size_t r = 0; r < m; ++r) detail::vec_mat_acc(A.data() + r * k, B.data(), out.data() + r * n, k, n);
    return g.push(Op::matmul, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, m, k, n](Graph& gr, const Tensor& go) {
      const Tensor& Av = gr.value(ai);
      const Tensor& Bv = gr.value(bi);
      if (gr.requires_grad(ai)) {
        double* ga = gr.grad_slot(ai).data();
        for (std::size_t r = 0; r < m; ++r) detail::mat_vec_acc(Bv.data(), go.data() + r * n, ga + r * k, k, n);
      }
      if (gr.requires_grad(bi)) {
        double* gb = gr.grad_slot(bi).data();
        for (std::size_t r = 0; r < m; ++r) detail::outer_acc(Av.data() + r * k, go.data() + r * n, gb, k, n);
      }
    });
  }
  if (A.rank() == 2 && B.rank() == 1) {
    const std::size_t m = A.dim(0), k = A.dim(1);
    if (B.dim(0) != k) throw mismatch();
    Tensor out(Shape{m}, 0.0);
    detail::mat_vec_acc(A.data(), B.data(), out.data(), m, k);
    return g.push(Op::matmul, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, m, k](Graph& gr, const Tensor& go) {
      if (gr.requires_grad(ai)) detail::outer_acc(go.data(), gr.value(bi).data(), gr.grad_slot(ai).data(), m, k);
      if (gr.requires_grad(bi)) detail::vec_mat_acc(go.data(), gr.value(ai).data(), gr.grad_slot(bi).data(), m, k);
    });
  }
  throw mismatch();
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return g.push(Op::add, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ai)) gr.grad_slot(ai) += go;
    if (gr.requires_grad(bi)) gr.grad_slot(bi) += go;
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return g.push(Op::sub, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ai)) gr.grad_slot(ai) += go;
    if (gr.requires_grad(bi)) {
      Tensor& gb = gr.grad_slot(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g.push(Op::mul, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(ai)) {
      Tensor& ga = gr.grad_slot(ai);
      const Tensor& Bv = gr.value(bi);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * Bv[i];
    }
    if (gr.requires_grad(bi)) {
      Tensor& gb = gr.grad_slot(bi);
      const Tensor& Av = gr.value(ai);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * Av[i];
    }
  });
}

inline double sigmoid_scalar(double x) {
  // split form keeps exp() from overflowing for large |x|
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.span()) v = sigmoid_scalar(v);
  Graph& g = *a.graph;
  auto id = g.size();
  return g.push(Op::sigmoid, {a.id}, std::move(out), [ai = a.id, oi = static_cast<std::uint32_t>(id)](Graph& gr, const Tensor& go) {
    const Tensor& y = gr.value(oi);
    Tensor& ga = gr.grad_slot(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.span()) v = std::tanh(v);
  Graph& g = *a.graph;
  auto id = g.size();
  return g.push(Op::tanh, {a.id}, std::move(out), [ai = a.id, oi = static_cast<std::uint32_t>(id)](Graph& gr, const Tensor& go) {
    const Tensor& y = gr.value(oi);
    Tensor& ga = gr.grad_slot(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * (1.0 - y[i] * y[i]);
  });
}

/// c·a for a constant scalar c.
inline Var scale(Var a, double c) {
  Tensor out = a.value();
  out *= c;
  return a.graph->push(Op::scale, {a.id}, std::move(out), [ai = a.id, c](Graph& gr, const Tensor& go) {
    Tensor& ga = gr.grad_slot(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * go[i];
  });
}

/// a + c for a constant scalar c.
inline Var shift(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.span()) v += c;
  return a.graph->push(Op::shift, {a.id}, std::move(out), [ai = a.id](Graph& gr, const Tensor& go) { gr.grad_slot(ai) += go; });
}

/// 1 - a, elementwise.
inline Var one_minus(Var a) { return shift(scale(a, -1.0), 1.0); }

namespace detail {
inline void require_nonempty_vector(const Tensor& v, const char* op) {
  if (v.rank() != 1 || v.size() == 0) {
    throw DimensionError(std::string(op) + ": expected a non-empty vector, got shape " + shape_str(v.shape()));
  }
}
}  // namespace detail

inline Tensor softmax_values(std::span<const double> v) {
  if (v.empty()) throw DimensionError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  return Tensor::vector(std::move(out));
}

inline Var softmax(Var a) {
  detail::require_nonempty_vector(a.value(), "softmax");
  Tensor out = softmax_values(a.value().span());
  Graph& g = *a.graph;
  auto id = static_cast<std::uint32_t>(g.size());
  return g.push(Op::softmax, {a.id}, std::move(out), [ai = a.id, oi = id](Graph& gr, const Tensor& go) {
    const Tensor& y = gr.value(oi);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += go[i] * y[i];
    Tensor& ga = gr.grad_slot(ai);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (go[i] - dot);
  });
}

inline Tensor log_softmax_values(std::span<const double> v) {
  if (v.empty()) throw DimensionError("log_softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lz;
  return Tensor::vector(std::move(out));
}

inline Var log_softmax(Var a) {
  detail::require_nonempty_vector(a.value(), "log_softmax");
  Tensor out = log_softmax_values(a.value().span());
  Graph& g = *a.graph;
  auto id = static_cast<std::uint32_t>(g.size());
  return g.push(Op::log_softmax, {a.id}, std::move(out), [ai = a.id, oi = id](Graph& gr, const Tensor& go) {
    const Tensor& y = gr.value(oi);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += go[i];
    Tensor& ga = gr.grad_slot(ai);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += go[i] - std::exp(y[i]) * s;
  });
}

/// Concatenation of two rank-1 or two rank-2 tensors along `axis`.
inline Var concat(Var a, Var b, std::size_t axis = 0) {
  Graph& g = detail::same_graph(a, b, "concat");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != B.rank() || A.rank() == 0 || A.rank() > 2) {
    throw DimensionError("concat: unsupported shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  }
  if (axis >= A.rank()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for rank " + std::to_string(A.rank()));
  }
  for (std::size_t d = 0; d < A.rank(); ++d) {
    if (d != axis && A.dim(d) != B.dim(d)) {
      throw DimensionError("concat: shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()) +
                           " disagree off axis " + std::to_string(axis));
    }
  }
  // Row-major layout makes axis 0 (and rank 1) a plain append; axis 1 interleaves per row.
  const std::size_t rows = (A.rank() == 2 && axis == 1) ? A.dim(0) : 1;
  const std::size_t ca = A.size() / rows, cb = B.size() / rows;
  Shape s = A.shape();
  s[axis] += B.dim(axis);
  std::vector<double> out;
  out.reserve(A.size() + B.size());
  for (std::size_t r = 0; r < rows; ++r) {
    out.insert(out.end(), A.data() + r * ca, A.data() + (r + 1) * ca);
    out.insert(out.end(), B.data() + r * cb, B.data() + (r + 1) * cb);
  }
  return g.push(Op::concat, {a.id, b.id}, Tensor(std::move(s), std::move(out)),
                [ai = a.id, bi = b.id, rows, ca, cb](Graph& gr, const Tensor& go) {
                  const std::size_t w = ca + cb;
                  if (gr.requires_grad(ai)) {
                    double* ga = gr.grad_slot(ai).data();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += go[r * w + j];
                  }
                  if (gr.requires_grad(bi)) {
                    double* gb = gr.grad_slot(bi).data();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < cb; ++j) gb[r * cb + j] += go[r * w + ca + j];
                  }
                });
}

/// Left-to-right concatenation of vectors.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = concat(acc, parts[i], 0);
  return acc;
}

/// Sub-range [start, start+len) along the last axis of a vector or matrix.
inline Var slice(Var a, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  if (A.rank() == 0 || A.rank() > 2 || len == 0 || start + len > A.cols()) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") invalid for shape " + shape_str(A.shape()));
  }
  const std::size_t rows = A.rows(), w = A.cols();
  Shape s = A.shape();
  s.back() = len;
  std::vector<double> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = A[r * w + start + j];
  return a.graph->push(Op::slice, {a.id}, Tensor(std::move(s), std::move(out)),
                       [ai = a.id, rows, w, start, len](Graph& gr, const Tensor& go) {
                         double* ga = gr.grad_slot(ai).data();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < len; ++j) ga[r * w + start + j] += go[r * len + j];
                       });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().span()) s += v;
  return a.graph->push(Op::sum, {a.id}, Tensor::scalar(s), [ai = a.id](Graph& gr, const Tensor& go) {
    const double gv = go[0];
    for (auto& v : gr.grad_slot(ai).span()) v += gv;
  });
}

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

/// Feature-wise normalisation of a vector followed by gain and bias.
/// Variance is the biased estimator; `eps` sits inside the square root.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6) {
  Graph& g = detail::same_graph(x, gain, "layer_norm");
  detail::same_graph(x, bias, "layer_norm");
  const Tensor& X = x.value();
  if (X.rank() != 1 || X.size() < 2) {
    throw ContractError("layer_norm: needs a vector of at least 2 features, got shape " + shape_str(X.shape()));
  }
  detail::require_same_shape(X, gain.value(), "layer_norm gain");
  detail::require_same_shape(X, bias.value(), "layer_norm bias");
  const std::size_t d = X.size();
  double mean = 0.0;
  for (double v : X.span()) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : X.span()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(var + eps);
  Tensor xhat(Shape{d});
  Tensor out(Shape{d});
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (X[i] - mean) * inv;
    out[i] = G[i] * xhat[i] + B[i];
  }
  return g.push(Op::layer_norm, {x.id, gain.id, bias.id}, std::move(out),
                [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), inv, d](Graph& gr, const Tensor& go) {
                  if (gr.requires_grad(gi)) {
                    Tensor& gg = gr.grad_slot(gi);
                    for (std::size_t i = 0; i < d; ++i) gg[i] += go[i] * xhat[i];
                  }
                  if (gr.requires_grad(bi)) gr.grad_slot(bi) += go;
                  if (gr.requires_grad(xi)) {
                    const Tensor& G = gr.value(gi);
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                      const double dh = go[i] * G[i];
                      s1 += dh;
                      s2 += dh * xhat[i];
                    }
                    const double n = static_cast<double>(d);
                    Tensor& gx = gr.grad_slot(xi);
                    for (std::size_t i = 0; i < d; ++i) {
                      const double dh = go[i] * G[i];
                      gx[i] += inv * (dh - s1 / n - xhat[i] * s2 / n);
                    }
                  }
                });
}

/// Row `index` of a matrix (embedding lookup).
inline Var row(Var table, std::size_t index) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw DimensionError("row: expected a matrix, got shape " + shape_str(T.shape()));
  if (index >= T.dim(0)) {
    throw DataError("row: index " + std::to_string(index) + " out of range for " + std::to_string(T.dim(0)) + " rows");
  }
  const std::size_t w = T.dim(1);
  std::vector<double> out(T.data() + index * w, T.data() + (index + 1) * w);
  return table.graph->push(Op::row, {table.id}, Tensor::vector(std::move(out)), [ti = table.id, index, w](Graph& gr, const Tensor& go) {
    double* gt = gr.grad_slot(ti).data() + index * w;
    for (std::size_t j = 0; j < w; ++j) gt[j] += go[j];
  });
}

/// Stacks equal-length vectors as the rows of a matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  Graph& g = *rows.front().graph;
  const std::size_t w = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * w);
  std::vector<std::uint32_t> ids;
  ids.reserve(rows.size());
  for (const Var& r : rows) {
    if (r.graph != &g) throw ContractError("stack_rows: operands belong to different graphs");
    if (r.value().rank() != 1 || r.size() != w) {
      throw DimensionError("stack_rows: row shape " + shape_str(r.shape()) + " differs from (" + std::to_string(w) + ")");
    }
    out.insert(out.end(), r.value().data(), r.value().data() + w);
    ids.push_back(r.id);
  }
  const std::size_t n = rows.size();
  auto captured = ids;
  return g.push(Op::stack_rows, std::move(ids), Tensor(Shape{n, w}, std::move(out)), [captured, w](Graph& gr, const Tensor& go) {
    for (std::size_t r = 0; r < captured.size(); ++r) {
      if (!gr.requires_grad(captured[r])) continue;
      double* gv = gr.grad_slot(captured[r]).data();
      for (std::size_t j = 0; j < w; ++j) gv[j] += go[r * w + j];
    }
  });
}

/// Repeats a vector as `n` rows. The explicit counterpart of row broadcasting.
inline Var tile_rows(Var v, std::size_t n) {
  const Tensor& V = v.value();
  if (V.rank() != 1 || n == 0) throw DimensionError("tile_rows: expected a vector and n >= 1, got " + shape_str(V.shape()));
  const std::size_t w = V.size();
  std::vector<double> out;
  out.reserve(n * w);
  for (std::size_t r = 0; r < n; ++r) out.insert(out.end(), V.data(), V.data() + w);
  return v.graph->push(Op::tile_rows, {v.id}, Tensor(Shape{n, w}, std::move(out)), [vi = v.id, n, w](Graph& gr, const Tensor& go) {
    double* gv = gr.grad_slot(vi).data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < w; ++j) gv[j] += go[r * w + j];
  });
}

inline Var reshape(Var v, Shape s) {
  if (shape_numel(s) != v.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(v.shape()) + " as " + shape_str(s));
  }
  return v.graph->push(Op::reshape, {v.id}, v.value().reshaped(std::move(s)), [vi = v.id](Graph& gr, const Tensor& go) {
    Tensor& gv = gr.grad_slot(vi);
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += go[i];
  });
}

}  // namespace dtmt
