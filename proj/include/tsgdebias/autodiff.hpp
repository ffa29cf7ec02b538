#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Nodes are appended in evaluation order, so the tape itself is a topological
// order and backward() is a single reverse sweep. A graph can be swept several
// times from different roots (one per loss component); every sweep starts from
// cleared gradients.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tsgdebias/tensor.hpp"

namespace tsgdb::ad {

class Graph;

/// Handle to a node on a Graph tape.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  /// Non-differentiable input (features, masks, labels).
  Var constant(Tensor value) { return push(std::move(value), nullptr, false, -1, {}); }

  /// Differentiable leaf that aliases an external tensor (a model parameter).
  /// The tensor must outlive the graph and stay unmodified until backward finishes.
  Var leaf(const Tensor& value, int param_id) { return push({}, &value, true, param_id, {}); }

  /// Appends an op node. `inputs` decide whether the node needs a gradient.
  Var op(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), nullptr, needs, -1, needs ? std::move(fn) : BackwardFn{});
  }
  Var op(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), nullptr, needs, -1, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.own;
  }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of `id`, zero-initialised on first touch; nullptr when the
  /// node does not lead to any leaf.
  Tensor* accum(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) {
      const Tensor& v = value(id);
      n.grad = Tensor(v.rows(), v.cols(), 0.0);
    }
    return &n.grad;
  }

  /// Reverse sweep from a scalar root. Gradients do not flow past nodes listed
  /// in `stop` (their own gradient is still recorded).
  void backward(Var root, std::span<const Var> stop = {}) {
    if (value(root.id).size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (Node& n : nodes_) n.grad = Tensor{};
    std::vector<char> blocked(nodes_.size(), 0);
    for (const Var& s : stop) blocked[s.id] = 1;
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Tensor(1, 1, 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || blocked[i] || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Calls `sink(param_id, grad)` for every parameter leaf reached by the last sweep.
  template <class Sink>
  void for_each_param_grad(Sink&& sink) const {
    for (const Node& n : nodes_) {
      if (n.param_id >= 0 && !n.grad.empty()) sink(n.param_id, n.grad);
    }
  }

 private:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    int param_id = -1;
  };

  Var push(Tensor value, const Tensor* external, bool requires_grad, int param_id, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), external, Tensor{}, std::move(fn), requires_grad, param_id});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

// ---------------------------------------------------------------------------
// Kernels on plain tensors.

namespace kernel {

inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

/// C += A * B
inline void gemm_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C += A * B^T
inline void gemm_bt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) += s;
    }
  }
}

/// C += A^T * B
inline void gemm_at_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void softmax_rows_inplace(Tensor& t) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable ops.

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  Tensor out(av.rows(), bv.cols());
  kernel::gemm_acc(av, bv, out);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    if (Tensor* da = g.accum(ia)) kernel::gemm_bt_acc(dc, g.value(ib), *da);
    if (Tensor* db = g.accum(ib)) kernel::gemm_at_acc(g.value(ia), dc, *db);
  });
}

/// a * b^T
inline Var matmul_bt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(av.cols() == bv.cols(), "matmul_bt: inner dimensions differ");
  Tensor out(av.rows(), bv.rows());
  kernel::gemm_bt_acc(av, bv, out);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    if (Tensor* da = g.accum(ia)) kernel::gemm_acc(dc, g.value(ib), *da);
    if (Tensor* db = g.accum(ib)) kernel::gemm_at_acc(dc, g.value(ia), *db);
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.cols(), av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(c, r) = av(r, c);
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*da)(c, r) += d(r, c);
  });
}

inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(av.same_shape(bv), "add: shape mismatch");
  Tensor out = av;
  out += bv;
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia)) *da += d;
    if (Tensor* db = g.accum(ib)) *db += d;
  });
}

/// a (r x c) + b (1 x c) broadcast over rows.
inline Var add_row(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(bv.rows() == 1 && bv.cols() == av.cols(), "add_row: shape mismatch");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia)) *da += d;
    if (Tensor* db = g.accum(ib))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*db)[c] += d(r, c);
  });
}

/// a (r x c) + b (r x 1) broadcast over columns.
inline Var add_col(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(bv.cols() == 1 && bv.rows() == av.rows(), "add_col: shape mismatch");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[r];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia)) *da += d;
    if (Tensor* db = g.accum(ib))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*db)[r] += d(r, c);
  });
}

/// Element-wise product.
inline Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(av.same_shape(bv), "mul: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia)) {
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * bv[i];
    }
    if (Tensor* db = g.accum(ib)) {
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] += d[i] * av[i];
    }
  });
}

/// a (r x c) scaled column-wise by b (1 x c).
inline Var mul_row(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernel::check(bv.rows() == 1 && bv.cols() == av.cols(), "mul_row: shape mismatch");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= bv[c];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    if (Tensor* da = g.accum(ia))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*da)(r, c) += d(r, c) * bv[c];
    if (Tensor* db = g.accum(ib))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*db)[c] += d(r, c) * av(r, c);
  });
}

/// Element-wise product with a constant tensor (dropout masks).
inline Var mul_const(Var a, Tensor m) {
  const Tensor& av = a.value();
  kernel::check(av.same_shape(m), "mul_const: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia, m = std::move(m)](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * m[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia, s](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * s;
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    const Tensor& x = g.value(ia);
    if (Tensor* da = g.accum(ia))
      for (std::size_t i = 0; i < d.size(); ++i)
        if (x[i] > 0.0) (*da)[i] += d[i];
  });
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernel::sigmoid(out[i]);
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    const Tensor& y = g.value(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * y[i] * (1.0 - y[i]);
  });
}

/// Softmax along each row.
inline Var softmax_rows(Var a) {
  Tensor out = a.value();
  kernel::softmax_rows_inplace(out);
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor* da = g.accum(ia);
    if (!da) return;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += d(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) (*da)(r, c) += y(r, c) * (d(r, c) - dot);
    }
  });
}

/// Softmax along each column.
inline Var softmax_cols(Var a) { return transpose(softmax_rows(transpose(a))); }

/// Row-wise layer normalisation with affine gain/shift of shape (1, c).
/// A constant row normalises to zero before the affine step.
inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  kernel::check(gv.rows() == 1 && gv.cols() == xv.cols() && bv.same_shape(gv),
                "layer_norm_rows: gain/shift shape mismatch");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor xhat(rows, cols);
  std::vector<double> inv_std(rows);
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->op(std::move(out), {x, gamma, beta},
                     [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         Graph& g, std::size_t self) {
                       const Tensor& d = g.grad(self);
                       const Tensor& gv = g.value(ig);
                       const std::size_t rows = d.rows(), cols = d.cols();
                       if (Tensor* dg = g.accum(ig))
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) (*dg)[c] += d(r, c) * xhat(r, c);
                       if (Tensor* db = g.accum(ib))
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) (*db)[c] += d(r, c);
                       Tensor* dx = g.accum(ix);
                       if (!dx) return;
                       const double n = static_cast<double>(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double dxh = d(r, c) * gv[c];
                           mean_dxhat += dxh;
                           mean_dxhat_xhat += dxh * xhat(r, c);
                         }
                         mean_dxhat /= n;
                         mean_dxhat_xhat /= n;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double dxh = d(r, c) * gv[c];
                           (*dx)(r, c) += inv_std[r] * (dxh - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
                         }
                       }
                     });
}

inline Var concat_cols(std::span<const Var> parts) {
  kernel::check(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    kernel::check(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, off + c) = pv(r, c);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.cols();
  }
  return parts.front().graph->op(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets)](Graph& g, std::size_t self) {
        const Tensor& d = g.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          Tensor* dp = g.accum(ids[k]);
          if (!dp) continue;
          for (std::size_t r = 0; r < dp->rows(); ++r)
            for (std::size_t c = 0; c < dp->cols(); ++c) (*dp)(r, c) += d(r, offsets[k] + c);
        }
      });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  kernel::check(begin + count <= av.cols(), "slice_cols: out of range");
  Tensor out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia, begin](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (std::size_t c = 0; c < d.cols(); ++c) (*da)(r, begin + c) += d(r, c);
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  kernel::check(begin + count <= av.rows(), "slice_rows: out of range");
  Tensor out(count, av.cols());
  std::copy_n(av.data() + begin * av.cols(), count * av.cols(), out.data());
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia, begin](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia)) {
      double* dst = da->data() + begin * d.cols();
      for (std::size_t i = 0; i < d.size(); ++i) dst[i] += d[i];
    }
  });
}

/// Row lookup: out[k] = table[ids[k]].
inline Var gather_rows(Var table, std::vector<std::size_t> ids) {
  const Tensor& tv = table.value();
  Tensor out(ids.size(), tv.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    kernel::check(ids[k] < tv.rows(), "gather_rows: id out of range");
    std::copy_n(tv.data() + ids[k] * tv.cols(), tv.cols(), out.data() + k * tv.cols());
  }
  const std::size_t it = table.id;
  return table.graph->op(std::move(out), {table}, [it, ids = std::move(ids)](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* dt = g.accum(it))
      for (std::size_t k = 0; k < ids.size(); ++k)
        for (std::size_t c = 0; c < d.cols(); ++c) (*dt)(ids[k], c) += d(k, c);
  });
}

/// Depthwise 1-D convolution along rows with zero "same" padding.
/// x: (n, c), kernel: (k, c) with k odd, bias: (1, c).
inline Var depthwise_conv_rows(Var x, Var kern, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& kv = kern.value();
  const Tensor& bv = bias.value();
  kernel::check(kv.cols() == xv.cols() && kv.rows() % 2 == 1, "depthwise_conv_rows: bad kernel shape");
  kernel::check(bv.rows() == 1 && bv.cols() == xv.cols(), "depthwise_conv_rows: bad bias shape");
  const long n = static_cast<long>(xv.rows());
  const long half = static_cast<long>(kv.rows() / 2);
  const std::size_t ch = xv.cols();
  Tensor out(xv.rows(), ch);
  for (long i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < ch; ++c) out(i, c) = bv[c];
    for (long t = -half; t <= half; ++t) {
      const long src = i + t;
      if (src < 0 || src >= n) continue;
      for (std::size_t c = 0; c < ch; ++c) out(i, c) += kv(t + half, c) * xv(src, c);
    }
  }
  const std::size_t ix = x.id, ik = kern.id, ib = bias.id;
  return x.graph->op(std::move(out), {x, kern, bias}, [ix, ik, ib](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    const Tensor& xv = g.value(ix);
    const Tensor& kv = g.value(ik);
    const long n = static_cast<long>(xv.rows());
    const long half = static_cast<long>(kv.rows() / 2);
    const std::size_t ch = xv.cols();
    Tensor* dx = g.accum(ix);
    Tensor* dk = g.accum(ik);
    if (Tensor* db = g.accum(ib))
      for (long i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ch; ++c) (*db)[c] += d(i, c);
    for (long i = 0; i < n; ++i) {
      for (long t = -half; t <= half; ++t) {
        const long src = i + t;
        if (src < 0 || src >= n) continue;
        for (std::size_t c = 0; c < ch; ++c) {
          if (dx) (*dx)(src, c) += d(i, c) * kv(t + half, c);
          if (dk) (*dk)(t + half, c) += d(i, c) * xv(src, c);
        }
      }
    }
  });
}

/// Logit used for invalid (padded) positions.
inline constexpr double kMaskedLogit = -1e9;

/// Sets entries whose mask is false to kMaskedLogit; no gradient flows there.
inline Var mask_fill(Var a, const std::vector<bool>& valid) {
  const Tensor& av = a.value();
  kernel::check(valid.size() == av.size(), "mask_fill: mask size mismatch");
  Tensor out = av;
  bool any_masked = false;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!valid[i]) {
      out[i] = kMaskedLogit;
      any_masked = true;
    }
  }
  if (!any_masked) return a;
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {a}, [ia, valid](Graph& g, std::size_t self) {
    const Tensor& d = g.grad(self);
    if (Tensor* da = g.accum(ia))
      for (std::size_t i = 0; i < d.size(); ++i)
        if (valid[i]) (*da)[i] += d[i];
  });
}

/// Largest per-term cross-entropy: -ln(1e-30).
inline const double kMaxNll = -std::log(1e-30);

/// Span cross-entropy from logits:
///   0.5 * [min(-ln softmax(zs)[is], C) + min(-ln softmax(ze)[ie], C)],  C = -ln(1e-30).
/// zs, ze are column vectors (n, 1). A clamped term contributes no gradient.
inline Var span_nll(Var zs, Var ze, std::size_t is, std::size_t ie) {
  kernel::check(zs.cols() == 1 && ze.cols() == 1 && zs.rows() == ze.rows(), "span_nll: logits must be (n,1)");
  kernel::check(is < zs.rows() && ie < ze.rows(), "span_nll: label out of range");
  auto term = [](const Tensor& z, std::size_t label, Tensor& probs, bool& clamped) {
    probs = z;
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z.values()) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z.values()) sum += std::exp(v - mx);
    const double log_norm = mx + std::log(sum);
    for (std::size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(z[i] - log_norm);
    const double nll = log_norm - z[label];
    clamped = nll > kMaxNll;
    return clamped ? kMaxNll : nll;
  };
  Tensor ps, pe;
  bool cs = false, ce = false;
  const double loss = 0.5 * (term(zs.value(), is, ps, cs) + term(ze.value(), ie, pe, ce));
  const std::size_t izs = zs.id, ize = ze.id;
  return zs.graph->op(Tensor(1, 1, loss), {zs, ze},
                      [=, ps = std::move(ps), pe = std::move(pe)](Graph& g, std::size_t self) {
                        const double up = g.grad(self)[0];
                        if (Tensor* d = g.accum(izs); d && !cs) {
                          for (std::size_t i = 0; i < ps.size(); ++i) (*d)[i] += 0.5 * up * ps[i];
                          (*d)[is] -= 0.5 * up;
                        }
                        if (Tensor* d = g.accum(ize); d && !ce) {
                          for (std::size_t i = 0; i < pe.size(); ++i) (*d)[i] += 0.5 * up * pe[i];
                          (*d)[ie] -= 0.5 * up;
                        }
                      });
}

}  // namespace tsgdb::ad
