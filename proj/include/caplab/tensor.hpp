#pragma once

// Dense tensor with reverse-mode automatic differentiation.
//
// Tensors are immutable once produced by an op. Each op records a backward
// closure on the node it creates; backward(loss) walks the graph in reverse
// topological order and accumulates gradients into every reachable node that
// requires them. All reductions use a fixed summation order so results are
// bitwise reproducible for a given seed.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace caplab {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

// Additive mask value for disallowed attention logits. Large enough that
// exp(x - max) underflows to exactly zero in the corresponding precision.
template <class T>
struct MaskNeg;
template <>
struct MaskNeg<float> {
  static constexpr float value = -1e9f;
};
template <>
struct MaskNeg<double> {
  static constexpr double value = -1e18;
};

// When set, ops do not record backward closures (inference mode).
inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = prev; }
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> v;
  std::vector<T> g;  // allocated lazily, same size as v
  bool requires_grad = false;
  std::function<void()> backprop;  // empty for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->v.assign(shape_numel(n->shape), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: " + shape_str(shape) +
                                  " does not hold " +
                                  std::to_string(values.size()) + " values");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->v = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T x) { return from_values({1}, {x}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  size_t numel() const { return node_->v.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::vector<T>& values() { return node_->v; }
  const std::vector<T>& values() const { return node_->v; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->g;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->g;
  }
  void zero_grad() {
    if (!node_->g.empty()) std::fill(node_->g.begin(), node_->g.end(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("item: tensor " + shape_str(shape()) +
                                  " is not scalar");
    return node_->v[0];
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <class T>
inline Tensor<T> make_op_node(Shape shape,
                              std::vector<std::shared_ptr<TensorNode<T>>> parents) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->v.assign(shape_numel(n->shape), T(0));
  if (grad_mode_enabled()) {
    for (auto& p : parents)
      if (p->requires_grad) {
        n->requires_grad = true;
        break;
      }
    if (n->requires_grad) n->parents = std::move(parents);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
inline void set_backprop(Tensor<T>& out, std::function<void()> fn) {
  if (out.node()->requires_grad) out.node()->backprop = std::move(fn);
}

inline std::pair<int, int> as_matrix(const Shape& s, const char* op) {
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 1) return {1, s[0]};
  throw std::invalid_argument(std::string(op) + ": expected matrix, got " +
                              shape_str(s));
}

}  // namespace detail

// ---- elementwise ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  auto out = detail::make_op_node<T>(a.shape(), {a.node(), b.node()});
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  detail::set_backprop(out, [an = a.node(), bn = b.node(), on = out.node().get()] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->v.size(); ++i) an->g[i] += on->g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->v.size(); ++i) bn->g[i] += on->g[i];
    }
  });
  return out;
}

// rows of a get b added (bias broadcast)
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b) {
  auto [m, k] = detail::as_matrix(a.shape(), "add_rowvec");
  if (b.shape().size() != 1 || b.shape()[0] != k)
    shape_error("add_rowvec", a.shape(), b.shape());
  auto out = detail::make_op_node<T>(a.shape(), {a.node(), b.node()});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j)
      out.values()[i * k + j] = a.values()[i * k + j] + b.values()[j];
  detail::set_backprop(out, [an = a.node(), bn = b.node(), on = out.node().get(), m,
                             k] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->v.size(); ++i) an->g[i] += on->g[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) bn->g[j] += on->g[i * k + j];
    }
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = detail::make_op_node<T>(a.shape(), {a.node()});
  for (size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * c;
  detail::set_backprop(out, [an = a.node(), on = out.node().get(), c] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < on->v.size(); ++i) an->g[i] += on->g[i] * c;
  });
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto out = detail::make_op_node<T>(a.shape(), {a.node()});
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  for (size_t i = 0; i < a.numel(); ++i) {
    T x = a.values()[i];
    out.values()[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  detail::set_backprop(out, [an = a.node(), on = out.node().get()] {
    if (!an->requires_grad) return;
    an->ensure_grad();
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    for (size_t i = 0; i < on->v.size(); ++i) {
      T x = an->v[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      an->g[i] += on->g[i] * (cdf + x * pdf);
    }
  });
  return out;
}

// ---- matrix products ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto [m, k] = detail::as_matrix(a.shape(), "matmul");
  auto [k2, n] = detail::as_matrix(b.shape(), "matmul");
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  auto out = detail::make_op_node<T>({m, n}, {a.node(), b.node()});
  const T* A = a.values().data();
  const T* B = b.values().data();
  T* O = out.values().data();
#pragma omp parallel for schedule(static) if (m > 8)
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += A[i * k + p] * B[p * n + j];
      O[i * n + j] = acc;
    }
  }
  detail::set_backprop(out, [an = a.node(), bn = b.node(), on = out.node().get(), m,
                             n, k] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          T acc = 0;
          for (int j = 0; j < n; ++j)
            acc += on->g[i * n + j] * bn->v[p * n + j];
          an->g[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) {
          T acc = 0;
          for (int i = 0; i < m; ++i)
            acc += an->v[i * k + p] * on->g[i * n + j];
          bn->g[p * n + j] += acc;
        }
    }
  });
  return out;
}

// A[m,k] · B[n,k]^T -> [m,n]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  auto [m, k] = detail::as_matrix(a.shape(), "matmul_nt");
  auto [n, k2] = detail::as_matrix(b.shape(), "matmul_nt");
  if (k != k2) shape_error("matmul_nt", a.shape(), b.shape());
  auto out = detail::make_op_node<T>({m, n}, {a.node(), b.node()});
  const T* A = a.values().data();
  const T* B = b.values().data();
  T* O = out.values().data();
#pragma omp parallel for schedule(static) if (m > 8)
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      O[i * n + j] = acc;
    }
  detail::set_backprop(out, [an = a.node(), bn = b.node(), on = out.node().get(), m,
                             n, k] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          T acc = 0;
          for (int j = 0; j < n; ++j)
            acc += on->g[i * n + j] * bn->v[j * k + p];
          an->g[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) {
          T acc = 0;
          for (int i = 0; i < m; ++i)
            acc += on->g[i * n + j] * an->v[i * k + p];
          bn->g[j * k + p] += acc;
        }
    }
  });
  return out;
}

// ---- normalization / softmax ----

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  auto [m, k] = detail::as_matrix(x.shape(), "layer_norm");
  if (gamma.shape().size() != 1 || gamma.shape()[0] != k)
    shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != gamma.shape())
    shape_error("layer_norm", gamma.shape(), beta.shape());
  auto out =
      detail::make_op_node<T>(x.shape(), {x.node(), gamma.node(), beta.node()});
  std::vector<T> mu(m), rstd(m);
  for (int i = 0; i < m; ++i) {
    T s = 0;
    for (int j = 0; j < k; ++j) s += x.values()[i * k + j];
    mu[i] = s / T(k);
    T var = 0;
    for (int j = 0; j < k; ++j) {
      T d = x.values()[i * k + j] - mu[i];
      var += d * d;
    }
    var /= T(k);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < k; ++j) {
      T xn = (x.values()[i * k + j] - mu[i]) * rstd[i];
      out.values()[i * k + j] = xn * gamma.values()[j] + beta.values()[j];
    }
  }
  detail::set_backprop(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                             on = out.node().get(), mu = std::move(mu),
                             rstd = std::move(rstd), m, k] {
    for (int i = 0; i < m; ++i) {
      // normalized inputs for this row
      T sum_dy_xhat = 0, sum_dy = 0;
      for (int j = 0; j < k; ++j) {
        T xhat = (xn->v[i * k + j] - mu[i]) * rstd[i];
        T dy = on->g[i * k + j] * gn->v[j];
        sum_dy_xhat += dy * xhat;
        sum_dy += dy;
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int j = 0; j < k; ++j) {
          T xhat = (xn->v[i * k + j] - mu[i]) * rstd[i];
          T dy = on->g[i * k + j] * gn->v[j];
          xn->g[i * k + j] +=
              rstd[i] * (dy - (sum_dy + xhat * sum_dy_xhat) / T(k));
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int j = 0; j < k; ++j) {
          T xhat = (xn->v[i * k + j] - mu[i]) * rstd[i];
          gn->g[j] += on->g[i * k + j] * xhat;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int j = 0; j < k; ++j) bn->g[j] += on->g[i * k + j];
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  auto [m, k] = detail::as_matrix(x.shape(), "softmax_rows");
  auto out = detail::make_op_node<T>(x.shape(), {x.node()});
  for (int i = 0; i < m; ++i) {
    T mx = x.values()[i * k];
    for (int j = 1; j < k; ++j) mx = std::max(mx, x.values()[i * k + j]);
    T z = 0;
    for (int j = 0; j < k; ++j) {
      T e = std::exp(x.values()[i * k + j] - mx);
      out.values()[i * k + j] = e;
      z += e;
    }
    for (int j = 0; j < k; ++j) out.values()[i * k + j] /= z;
  }
  detail::set_backprop(out, [xn = x.node(), on = out.node().get(), m, k] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < m; ++i) {
      T dot = 0;
      for (int j = 0; j < k; ++j)
        dot += on->g[i * k + j] * on->v[i * k + j];
      for (int j = 0; j < k; ++j)
        xn->g[i * k + j] += on->v[i * k + j] * (on->g[i * k + j] - dot);
    }
  });
  return out;
}

// scores + (visible ? 0 : MaskNeg). Every row must keep at least one
// visible position; the mask builder guarantees this.
template <class T>
Tensor<T> add_mask(const Tensor<T>& scores, const std::vector<uint8_t>& visible) {
  auto [m, k] = detail::as_matrix(scores.shape(), "add_mask");
  if (visible.size() != static_cast<size_t>(m) * k)
    throw std::invalid_argument("add_mask: mask size " +
                                std::to_string(visible.size()) +
                                " does not match " + shape_str(scores.shape()));
  auto out = detail::make_op_node<T>(scores.shape(), {scores.node()});
  for (size_t i = 0; i < out.numel(); ++i)
    out.values()[i] = scores.values()[i] + (visible[i] ? T(0) : MaskNeg<T>::value);
  detail::set_backprop(out, [sn = scores.node(), on = out.node().get()] {
    if (!sn->requires_grad) return;
    sn->ensure_grad();
    for (size_t i = 0; i < on->v.size(); ++i) sn->g[i] += on->g[i];
  });
  return out;
}

// ---- gather / slice / concat ----

template <class T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2)
    throw std::invalid_argument("embedding_rows: table must be 2-D, got " +
                                shape_str(table.shape()));
  const int V = table.dim(0), w = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding_rows: id " + std::to_string(id) +
                              " outside table of " + std::to_string(V));
  auto out = detail::make_op_node<T>({static_cast<int>(ids.size()), w},
                                     {table.node()});
  for (size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < w; ++j)
      out.values()[i * w + j] = table.values()[ids[i] * w + j];
  detail::set_backprop(out, [tn = table.node(), on = out.node().get(), ids, w] {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < w; ++j)
        tn->g[ids[i] * w + j] += on->g[i * w + j];
  });
  return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
  auto [m, k] = detail::as_matrix(x.shape(), "slice_rows");
  if (r0 < 0 || r1 > m || r0 > r1)
    throw std::invalid_argument("slice_rows: [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") outside " +
                                shape_str(x.shape()));
  auto out = detail::make_op_node<T>({r1 - r0, k}, {x.node()});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < k; ++j)
      out.values()[(i - r0) * k + j] = x.values()[i * k + j];
  detail::set_backprop(out, [xn = x.node(), on = out.node().get(), r0, r1, k] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < k; ++j)
        xn->g[i * k + j] += on->g[(i - r0) * k + j];
  });
  return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  auto [m, k] = detail::as_matrix(x.shape(), "slice_cols");
  if (c0 < 0 || c1 > k || c0 > c1)
    throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") outside " +
                                shape_str(x.shape()));
  const int w = c1 - c0;
  auto out = detail::make_op_node<T>({m, w}, {x.node()});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out.values()[i * w + j] = x.values()[i * k + c0 + j];
  detail::set_backprop(out, [xn = x.node(), on = out.node().get(), m, k, c0, w] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        xn->g[i * k + c0 + j] += on->g[i * w + j];
  });
  return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  int k = detail::as_matrix(xs[0].shape(), "concat_rows").second;
  int m = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (auto& x : xs) {
    auto [mi, ki] = detail::as_matrix(x.shape(), "concat_rows");
    if (ki != k) shape_error("concat_rows", xs[0].shape(), x.shape());
    m += mi;
    parents.push_back(x.node());
  }
  auto out = detail::make_op_node<T>({m, k}, parents);
  size_t off = 0;
  for (auto& x : xs) {
    std::copy(x.values().begin(), x.values().end(), out.values().begin() + off);
    off += x.numel();
  }
  detail::set_backprop(out, [parents, on = out.node().get()] {
    size_t off = 0;
    for (auto& p : parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (size_t i = 0; i < p->v.size(); ++i) p->g[i] += on->g[off + i];
      }
      off += p->v.size();
    }
  });
  return out;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  int m = detail::as_matrix(xs[0].shape(), "concat_cols").first;
  int k = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::vector<int> widths;
  for (auto& x : xs) {
    auto [mi, ki] = detail::as_matrix(x.shape(), "concat_cols");
    if (mi != m) shape_error("concat_cols", xs[0].shape(), x.shape());
    k += ki;
    widths.push_back(ki);
    parents.push_back(x.node());
  }
  auto out = detail::make_op_node<T>({m, k}, parents);
  int c0 = 0;
  for (size_t t = 0; t < xs.size(); ++t) {
    const int w = widths[t];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out.values()[i * k + c0 + j] = xs[t].values()[i * w + j];
    c0 += w;
  }
  detail::set_backprop(out, [parents, widths, on = out.node().get(), m, k] {
    int c0 = 0;
    for (size_t t = 0; t < parents.size(); ++t) {
      const int w = widths[t];
      auto& p = parents[t];
      if (p->requires_grad) {
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            p->g[i * w + j] += on->g[i * k + c0 + j];
      }
      c0 += w;
    }
  });
  return out;
}

// ---- reductions / losses ----

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = detail::make_op_node<T>({1}, {x.node()});
  T s = 0;
  for (T v : x.values()) s += v;
  out.values()[0] = s;
  detail::set_backprop(out, [xn = x.node(), on = out.node().get()] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < xn->v.size(); ++i) xn->g[i] += on->g[0];
  });
  return out;
}

enum class Reduction { Sum, Mean };

// Label-smoothed cross entropy over rows of logits. Smoothed target
// distribution: (1-eps) on the label plus eps/V spread over the vocabulary.
template <class T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits,
                             const std::vector<int>& targets,
                             T label_smoothing = T(0),
                             Reduction reduction = Reduction::Mean) {
  auto [m, V] = detail::as_matrix(logits.shape(), "cross_entropy_rows");
  if (static_cast<int>(targets.size()) != m)
    throw std::invalid_argument("cross_entropy_rows: " +
                                std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  for (int t : targets)
    if (t < 0 || t >= V)
      throw std::out_of_range("cross_entropy_rows: target " +
                              std::to_string(t) + " outside vocab " +
                              std::to_string(V));
  auto out = detail::make_op_node<T>({1}, {logits.node()});
  const T eps = label_smoothing;
  std::vector<T> logz(m), mx(m);
  T total = 0;
  for (int i = 0; i < m; ++i) {
    const T* row = logits.values().data() + static_cast<size_t>(i) * V;
    T rm = row[0];
    for (int j = 1; j < V; ++j) rm = std::max(rm, row[j]);
    T z = 0;
    for (int j = 0; j < V; ++j) z += std::exp(row[j] - rm);
    mx[i] = rm;
    logz[i] = std::log(z) + rm;
    // sum over smoothed target of -log p
    T loss = (T(1) - eps) * (logz[i] - row[targets[i]]);
    if (eps > T(0)) {
      T srow = 0;
      for (int j = 0; j < V; ++j) srow += logz[i] - row[j];
      loss += eps / T(V) * srow;
    }
    total += loss;
  }
  const T norm = reduction == Reduction::Mean ? T(1) / T(m) : T(1);
  out.values()[0] = total * norm;
  detail::set_backprop(out, [ln = logits.node(), on = out.node().get(), targets,
                             logz = std::move(logz), m, V, eps, norm] {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const T go = on->g[0] * norm;
    for (int i = 0; i < m; ++i) {
      const T* row = ln->v.data() + static_cast<size_t>(i) * V;
      T* grow = ln->g.data() + static_cast<size_t>(i) * V;
      for (int j = 0; j < V; ++j) {
        T p = std::exp(row[j] - logz[i]);
        T q = eps / T(V) + (j == targets[i] ? T(1) - eps : T(0));
        grow[j] += go * (p - q);
      }
    }
  });
  return out;
}

// ---- backward driver ----

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) +
                                " is not scalar");
  // reverse topological order via iterative DFS
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  struct Frame {
    TensorNode<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  if (loss.node()->requires_grad) stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->g[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    (*it)->ensure_grad();
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---- initialization ----

// Truncated normal: resample until within 2 sigma.
template <class T>
void init_truncated_normal(Tensor<T>& t, T sigma, std::mt19937& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(sigma));
  for (auto& v : t.values()) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0 * static_cast<double>(sigma));
    v = static_cast<T>(x);
  }
}

}  // namespace caplab
