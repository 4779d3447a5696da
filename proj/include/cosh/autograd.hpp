#pragma once

// Reverse-mode differentiation over a dynamically recorded tape. Each op
// returns a Var (shared Node) holding the forward value plus a closure that
// pulls the node's gradient into its parents. backward() walks the graph in
// reverse topological order. Matrix products and the im2col cores of the
// convolutions are delegated to Eigen; everything else is plain loops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cosh/error.hpp"
#include "cosh/tensor.hpp"

namespace coshdit {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline EMap emap(Tensor& t, int r, int c) { return EMap(t.data(), r, c); }
inline ECMap emap(const Tensor& t, int r, int c) { return ECMap(t.data(), r, c); }
inline EMap emap2d(Tensor& t) { return EMap(t.data(), t.rows(), t.cols()); }
inline ECMap emap2d(const Tensor& t) { return ECMap(t.data(), t.rows(), t.cols()); }

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by backward()
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
  bool grad_ready = false;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor(value.shape());
      grad_ready = true;
    }
  }
  void zero_grad() {
    if (grad_ready) grad.fill(0.0);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Var parameter(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

// Constant copy of the value; gradients do not flow through.
inline Var detach(const Var& x) { return constant(x->value); }

inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool rg = false;
    for (const Var& p : parents)
      if (p->requires_grad) rg = true;
    if (rg) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape() != b->value.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                     " vs " + shape_str(b->value.shape()));
}

// ---------------------------------------------------------------------------
// elementwise

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      Node& par = *n.parents[p];
      if (!par.requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) par.grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        pa.grad[i] += n.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        pb.grad[i] += n.grad[i] * pa.value[i];
  });
}

inline Var mul_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return make_node(std::move(out), {a}, [s](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += s * n.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var silu(const Var& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x / (1.0 + std::exp(-x));
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = pa.value[i];
      const double sig = 1.0 / (1.0 + std::exp(-x));
      pa.grad[i] += n.grad[i] * sig * (1.0 + x * (1.0 - sig));
    }
  });
}

inline Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// shape plumbing

inline Var reshape(const Var& a, std::vector<int> new_shape) {
  Tensor out = a->value.reshaped(std::move(new_shape));
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

inline Var slice_rows(const Var& a, int r0, int r1) {
  const int rows = a->value.rows();
  const int cols = a->value.cols();
  if (r0 < 0 || r1 > rows || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") for " + std::to_string(rows) + " rows");
  Tensor out({r1 - r0, cols});
  std::copy(a->value.data() + static_cast<std::size_t>(r0) * cols,
            a->value.data() + static_cast<std::size_t>(r1) * cols, out.data());
  return make_node(std::move(out), {a}, [r0, cols](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    double* dst = pa.grad.data() + static_cast<std::size_t>(r0) * cols;
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int cols = parts[0]->value.cols();
  int rows = 0;
  for (const Var& p : parts) {
    if (p->value.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.size(), out.data() + off);
    off += p->value.size();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    std::size_t off2 = 0;
    for (Var& p : n.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->grad[i] += n.grad[off2 + i];
      off2 += p->value.size();
    }
  });
}

inline Var slice_cols(const Var& a, int c0, int c1) {
  const int rows = a->value.rows();
  const int cols = a->value.cols();
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + std::to_string(cols) + " cols");
  const int w = c1 - c0;
  Tensor out({rows, w});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) out(r, c) = a->value(r, c0 + c);
  return make_node(std::move(out), {a}, [c0, w](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    const int rows2 = n.grad.rows();
    for (int r = 0; r < rows2; ++r)
      for (int c = 0; c < w; ++c) pa.grad(r, c0 + c) += n.grad(r, c);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = parts[0]->value.rows();
  int cols = 0;
  for (const Var& p : parts) {
    if (p->value.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Tensor out({rows, cols});
  int base = 0;
  for (const Var& p : parts) {
    const int w = p->value.cols();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) out(r, base + c) = p->value(r, c);
    base += w;
  }
  return make_node(std::move(out), parts, [](Node& n) {
    int base2 = 0;
    const int rows2 = n.grad.rows();
    for (Var& p : n.parents) {
      const int w = p->value.cols();
      if (p->requires_grad)
        for (int r = 0; r < rows2; ++r)
          for (int c = 0; c < w; ++c) p->grad(r, c) += n.grad(r, base2 + c);
      base2 += w;
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var transpose2d(const Var& a) {
  const int r = a->value.rows(), c = a->value.cols();
  Tensor out({c, r});
  emap(out, c, r) = emap(a->value, r, c).transpose();
  return make_node(std::move(out), {a}, [r, c](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    emap(pa.grad, r, c) += emap(n.grad, c, r).transpose();
  });
}

inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false) {
  const int ar = a->value.rows(), ac = a->value.cols();
  const int br = b->value.rows(), bc = b->value.cols();
  const int m = ta ? ac : ar, ka = ta ? ar : ac;
  const int kb = tb ? bc : br, n_ = tb ? br : bc;
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions " + std::to_string(ka) + " vs " +
                     std::to_string(kb));
  Tensor out({m, n_});
  {
    auto A = emap(a->value, ar, ac);
    auto B = emap(b->value, br, bc);
    auto C = emap(out, m, n_);
    if (!ta && !tb)
      C.noalias() = A * B;
    else if (!ta && tb)
      C.noalias() = A * B.transpose();
    else if (ta && !tb)
      C.noalias() = A.transpose() * B;
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  return make_node(std::move(out), {a, b}, [ta, tb, ar, ac, br, bc, m, n_](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    auto A = emap(pa.value, ar, ac);
    auto B = emap(pb.value, br, bc);
    auto G = emap(n.grad, m, n_);
    if (pa.requires_grad) {
      auto dA = emap(pa.grad, ar, ac);
      if (!ta && !tb)
        dA.noalias() += G * B.transpose();
      else if (!ta && tb)
        dA.noalias() += G * B;
      else if (ta && !tb)
        dA.noalias() += B * G.transpose();
      else
        dA.noalias() += B.transpose() * G.transpose();
    }
    if (pb.requires_grad) {
      auto dB = emap(pb.grad, br, bc);
      if (!ta && !tb)
        dB.noalias() += A.transpose() * G;
      else if (!ta && tb)
        dB.noalias() += G.transpose() * A;
      else if (ta && !tb)
        dB.noalias() += A * G;
      else
        dB.noalias() += G.transpose() * A.transpose();
    }
  });
}

// x: [L x D], v: [1 x D] (or flat [D])
inline Var add_rowvec(const Var& x, const Var& v) {
  const int L = x->value.rows(), D = x->value.cols();
  if (static_cast<int>(v->value.size()) != D)
    throw ShapeError("add_rowvec: vector length " + std::to_string(v->value.size()) +
                     " vs row width " + std::to_string(D));
  Tensor out = x->value;
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < D; ++c) out(r, c) += v->value[static_cast<std::size_t>(c)];
  return make_node(std::move(out), {x, v}, [L, D](Node& n) {
    Node& px = *n.parents[0];
    Node& pv = *n.parents[1];
    if (px.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    if (pv.requires_grad)
      for (int r = 0; r < L; ++r)
        for (int c = 0; c < D; ++c)
          pv.grad[static_cast<std::size_t>(c)] += n.grad(r, c);
  });
}

inline Var mul_rowvec(const Var& x, const Var& v) {
  const int L = x->value.rows(), D = x->value.cols();
  if (static_cast<int>(v->value.size()) != D)
    throw ShapeError("mul_rowvec: vector length " + std::to_string(v->value.size()) +
                     " vs row width " + std::to_string(D));
  Tensor out = x->value;
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < D; ++c) out(r, c) *= v->value[static_cast<std::size_t>(c)];
  return make_node(std::move(out), {x, v}, [L, D](Node& n) {
    Node& px = *n.parents[0];
    Node& pv = *n.parents[1];
    if (px.requires_grad)
      for (int r = 0; r < L; ++r)
        for (int c = 0; c < D; ++c)
          px.grad(r, c) += n.grad(r, c) * pv.value[static_cast<std::size_t>(c)];
    if (pv.requires_grad)
      for (int r = 0; r < L; ++r)
        for (int c = 0; c < D; ++c)
          pv.grad[static_cast<std::size_t>(c)] += n.grad(r, c) * px.value(r, c);
  });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// reductions and normalizations

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  return make_node(Tensor::scalar(s), {a}, [](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    const double g = n.grad[0];
    for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += g;
  });
}

inline Var mean_all(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a->value.size());
  return mul_scalar(sum_all(a), inv);
}

inline Var softmax_rows(const Var& a) {
  const int L = a->value.rows(), D = a->value.cols();
  Tensor out = a->value;
  for (int r = 0; r < L; ++r) {
    double mx = out(r, 0);
    for (int c = 1; c < D; ++c) mx = std::max(mx, out(r, c));
    double s = 0.0;
    for (int c = 0; c < D; ++c) {
      const double e = std::exp(out(r, c) - mx);
      out(r, c) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int c = 0; c < D; ++c) out(r, c) *= inv;
  }
  return make_node(std::move(out), {a}, [L, D](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (int r = 0; r < L; ++r) {
      double dot = 0.0;
      for (int c = 0; c < D; ++c) dot += n.grad(r, c) * n.value(r, c);
      for (int c = 0; c < D; ++c)
        pa.grad(r, c) += n.value(r, c) * (n.grad(r, c) - dot);
    }
  });
}

// Per-row standardization without affine parameters.
inline Var layer_norm_rows(const Var& a, double eps = 1e-6) {
  const int L = a->value.rows(), D = a->value.cols();
  Tensor out({L, D});
  Tensor inv_std({L});
  for (int r = 0; r < L; ++r) {
    double mean = 0.0;
    for (int c = 0; c < D; ++c) mean += a->value(r, c);
    mean /= D;
    double var = 0.0;
    for (int c = 0; c < D; ++c) {
      const double d = a->value(r, c) - mean;
      var += d * d;
    }
    var /= D;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < D; ++c) out(r, c) = (a->value(r, c) - mean) * is;
  }
  return make_node(std::move(out), {a}, [L, D, inv_std](Node& n) {
    Node& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (int r = 0; r < L; ++r) {
      double gmean = 0.0, gdot = 0.0;
      for (int c = 0; c < D; ++c) {
        gmean += n.grad(r, c);
        gdot += n.grad(r, c) * n.value(r, c);
      }
      gmean /= D;
      gdot /= D;
      const double is = inv_std[static_cast<std::size_t>(r)];
      for (int c = 0; c < D; ++c)
        pa.grad(r, c) += is * (n.grad(r, c) - gmean - n.value(r, c) * gdot);
    }
  });
}

// Mean over unmasked rows of -log softmax(logits)[target].
inline Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets,
                              const std::vector<std::uint8_t>& mask) {
  const int L = logits->value.rows(), C = logits->value.cols();
  if (static_cast<int>(targets.size()) != L || static_cast<int>(mask.size()) != L)
    throw ShapeError("cross_entropy: target/mask length vs logit rows");
  int active = 0;
  for (int r = 0; r < L; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++active;
    if (targets[static_cast<std::size_t>(r)] < 0 || targets[static_cast<std::size_t>(r)] >= C)
      throw ShapeError("cross_entropy: target index out of range");
  }
  if (active == 0) throw DegenerateInputError("cross_entropy: all positions masked");

  // softmax probabilities, kept for the adjoint
  Tensor probs({L, C});
  double loss = 0.0;
  for (int r = 0; r < L; ++r) {
    double mx = logits->value(r, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits->value(r, c));
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      const double e = std::exp(logits->value(r, c) - mx);
      probs(r, c) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int c = 0; c < C; ++c) probs(r, c) *= inv;
    if (mask[static_cast<std::size_t>(r)])
      loss -= std::log(std::max(probs(r, targets[static_cast<std::size_t>(r)]), 1e-300));
  }
  loss /= active;
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return make_node(Tensor::scalar(loss), {logits},
                   [probs, targets, mask, active, L, C](Node& n) {
                     Node& pl = *n.parents[0];
                     if (!pl.requires_grad) return;
                     const double g = n.grad[0] / active;
                     for (int r = 0; r < L; ++r) {
                       if (!mask[static_cast<std::size_t>(r)]) continue;
                       for (int c = 0; c < C; ++c) pl.grad(r, c) += g * probs(r, c);
                       pl.grad(r, targets[static_cast<std::size_t>(r)]) -= g;
                     }
                   });
}

inline Var mse(const Var& pred, const Var& target) {
  check_same_shape(pred, target, "mse");
  return mean_all(square(sub(pred, target)));
}

// MSE with per-column weights: sum_f sum_d w_d (p - t)^2 / (F * sum_d w_d).
inline Var weighted_col_mse(const Var& pred, const Var& target, const Tensor& weights) {
  check_same_shape(pred, target, "weighted_col_mse");
  const int L = pred->value.rows(), D = pred->value.cols();
  if (static_cast<int>(weights.size()) != D)
    throw ShapeError("weighted_col_mse: weight length vs columns");
  double wsum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) wsum += weights[i];
  const double norm = 1.0 / (static_cast<double>(L) * wsum);
  double loss = 0.0;
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < D; ++c) {
      const double d = pred->value(r, c) - target->value(r, c);
      loss += weights[static_cast<std::size_t>(c)] * d * d;
    }
  loss *= norm;
  return make_node(Tensor::scalar(loss), {pred, target}, [weights, norm, L, D](Node& n) {
    Node& pp = *n.parents[0];
    Node& pt = *n.parents[1];
    const double g = n.grad[0] * norm * 2.0;
    for (int r = 0; r < L; ++r)
      for (int c = 0; c < D; ++c) {
        const double d = (pp.value(r, c) - pt.value(r, c)) * weights[static_cast<std::size_t>(c)];
        if (pp.requires_grad) pp.grad(r, c) += g * d;
        if (pt.requires_grad) pt.grad(r, c) -= g * d;
      }
  });
}

// ---------------------------------------------------------------------------
// gather / pool

inline Var embedding_rows(const Var& table, const std::vector<int>& indices) {
  const int V = table->value.rows(), D = table->value.cols();
  Tensor out({static_cast<int>(indices.size()), D});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= V) throw ShapeError("embedding: index out of range");
    std::copy(table->value.data() + static_cast<std::size_t>(idx) * D,
              table->value.data() + static_cast<std::size_t>(idx + 1) * D,
              out.data() + i * static_cast<std::size_t>(D));
  }
  return make_node(std::move(out), {table}, [indices, D](Node& n) {
    Node& pt = *n.parents[0];
    if (!pt.requires_grad) return;
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (int c = 0; c < D; ++c)
        pt.grad(indices[i], c) += n.grad(static_cast<int>(i), c);
  });
}

// Mean over non-overlapping groups of k consecutive rows.
inline Var avg_pool_rows(const Var& x, int k) {
  const int L = x->value.rows(), D = x->value.cols();
  if (k <= 0 || L % k != 0)
    throw ShapeError("avg_pool_rows: rows " + std::to_string(L) + " not divisible by " +
                     std::to_string(k));
  const int Lo = L / k;
  Tensor out({Lo, D});
  for (int r = 0; r < Lo; ++r)
    for (int j = 0; j < k; ++j)
      for (int c = 0; c < D; ++c) out(r, c) += x->value(r * k + j, c);
  const double inv = 1.0 / k;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return make_node(std::move(out), {x}, [k, Lo, D, inv](Node& n) {
    Node& px = *n.parents[0];
    if (!px.requires_grad) return;
    for (int r = 0; r < Lo; ++r)
      for (int j = 0; j < k; ++j)
        for (int c = 0; c < D; ++c) px.grad(r * k + j, c) += n.grad(r, c) * inv;
  });
}

// ---------------------------------------------------------------------------
// convolutions (im2col + GEMM)

namespace detail {

inline int conv_out_len(int in, int k, int stride, int pad) {
  const int t = in + 2 * pad - k;
  if (t < 0 || t % stride != 0)
    throw ShapeError("conv: length " + std::to_string(in) + " incompatible with kernel " +
                     std::to_string(k) + " stride " + std::to_string(stride) + " pad " +
                     std::to_string(pad));
  return t / stride + 1;
}

}  // namespace detail

// x: [Cin x L], w: [Cout x (Cin*K)], b: [Cout] -> out [Cout x Lo]
inline Var conv1d(const Var& x, const Var& w, const Var& b, int cin, int k, int stride,
                  int pad) {
  const int L = x->value.cols();
  if (x->value.rows() != cin) throw ShapeError("conv1d: channel mismatch");
  if (w->value.cols() != cin * k) throw ShapeError("conv1d: weight width mismatch");
  const int cout = w->value.rows();
  if (static_cast<int>(b->value.size()) != cout) throw ShapeError("conv1d: bias size");
  const int lo = detail::conv_out_len(L, k, stride, pad);

  Tensor cols({cin * k, lo});
  for (int c = 0; c < cin; ++c)
    for (int j = 0; j < k; ++j) {
      const int row = c * k + j;
      for (int o = 0; o < lo; ++o) {
        const int src = o * stride - pad + j;
        cols(row, o) = (src >= 0 && src < L) ? x->value(c, src) : 0.0;
      }
    }
  Tensor out({cout, lo});
  emap2d(out).noalias() = emap2d(w->value) * emap2d(cols);
  for (int oc = 0; oc < cout; ++oc)
    for (int o = 0; o < lo; ++o) out(oc, o) += b->value[static_cast<std::size_t>(oc)];

  return make_node(std::move(out), {x, w, b},
                   [cols, cin, k, stride, pad, L, lo, cout](Node& n) {
                     Node& px = *n.parents[0];
                     Node& pw = *n.parents[1];
                     Node& pb = *n.parents[2];
                     auto G = emap2d(n.grad);
                     if (pb.requires_grad)
                       for (int oc = 0; oc < cout; ++oc) {
                         double s = 0.0;
                         for (int o = 0; o < lo; ++o) s += n.grad(oc, o);
                         pb.grad[static_cast<std::size_t>(oc)] += s;
                       }
                     if (pw.requires_grad)
                       emap2d(pw.grad).noalias() += G * emap2d(cols).transpose();
                     if (px.requires_grad) {
                       Tensor dcols({cin * k, lo});
                       emap2d(dcols).noalias() = emap2d(pw.value).transpose() * G;
                       for (int c = 0; c < cin; ++c)
                         for (int j = 0; j < k; ++j) {
                           const int row = c * k + j;
                           for (int o = 0; o < lo; ++o) {
                             const int src = o * stride - pad + j;
                             if (src >= 0 && src < L) px.grad(c, src) += dcols(row, o);
                           }
                         }
                     }
                   });
}

// Transposed 1-d convolution. x: [Cin x L], w: [Cin x (Cout*K)], b: [Cout]
// -> out [Cout x ((L-1)*stride + K - 2*pad)]
inline Var conv1d_transpose(const Var& x, const Var& w, const Var& b, int cout, int k,
                            int stride, int pad) {
  const int cin = x->value.rows();
  const int L = x->value.cols();
  if (w->value.rows() != cin || w->value.cols() != cout * k)
    throw ShapeError("conv1d_transpose: weight shape mismatch");
  if (static_cast<int>(b->value.size()) != cout) throw ShapeError("conv1d_transpose: bias size");
  const int lo = (L - 1) * stride + k - 2 * pad;
  if (lo <= 0) throw ShapeError("conv1d_transpose: empty output");

  // cols[(Cout*K) x L] = W^T x, then scatter-add into the output.
  Tensor cols({cout * k, L});
  emap2d(cols).noalias() = emap2d(w->value).transpose() * emap2d(x->value);
  Tensor out({cout, lo});
  for (int oc = 0; oc < cout; ++oc)
    for (int j = 0; j < k; ++j) {
      const int row = oc * k + j;
      for (int i = 0; i < L; ++i) {
        const int dst = i * stride - pad + j;
        if (dst >= 0 && dst < lo) out(oc, dst) += cols(row, i);
      }
    }
  for (int oc = 0; oc < cout; ++oc)
    for (int o = 0; o < lo; ++o) out(oc, o) += b->value[static_cast<std::size_t>(oc)];

  return make_node(std::move(out), {x, w, b}, [cin, cout, k, stride, pad, L, lo](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    Node& pb = *n.parents[2];
    if (pb.requires_grad)
      for (int oc = 0; oc < cout; ++oc) {
        double s = 0.0;
        for (int o = 0; o < lo; ++o) s += n.grad(oc, o);
        pb.grad[static_cast<std::size_t>(oc)] += s;
      }
    // dcols = gather of output grads, then dX = W dcols, dW = X dcols^T
    Tensor dcols({cout * k, L});
    for (int oc = 0; oc < cout; ++oc)
      for (int j = 0; j < k; ++j) {
        const int row = oc * k + j;
        for (int i = 0; i < L; ++i) {
          const int dst = i * stride - pad + j;
          dcols(row, i) = (dst >= 0 && dst < lo) ? n.grad(oc, dst) : 0.0;
        }
      }
    if (px.requires_grad)
      emap2d(px.grad).noalias() += emap2d(pw.value) * emap2d(dcols);
    if (pw.requires_grad)
      emap2d(pw.grad).noalias() += emap2d(px.value) * emap2d(dcols).transpose();
  });
}

// x: [Cin x (H*W)] with spatial extents given, w: [Cout x (Cin*kh*kw)], b: [Cout]
inline Var conv2d(const Var& x, const Var& w, const Var& b, int cin, int h, int wd, int kh,
                  int kw, int stride, int pad) {
  if (x->value.rows() != cin || x->value.cols() != h * wd)
    throw ShapeError("conv2d: input shape mismatch");
  if (w->value.cols() != cin * kh * kw) throw ShapeError("conv2d: weight width mismatch");
  const int cout = w->value.rows();
  if (static_cast<int>(b->value.size()) != cout) throw ShapeError("conv2d: bias size");
  const int ho = detail::conv_out_len(h, kh, stride, pad);
  const int wo = detail::conv_out_len(wd, kw, stride, pad);
  const int no = ho * wo;

  Tensor cols({cin * kh * kw, no});
  for (int c = 0; c < cin; ++c)
    for (int jy = 0; jy < kh; ++jy)
      for (int jx = 0; jx < kw; ++jx) {
        const int row = (c * kh + jy) * kw + jx;
        for (int oy = 0; oy < ho; ++oy) {
          const int sy = oy * stride - pad + jy;
          for (int ox = 0; ox < wo; ++ox) {
            const int sx = ox * stride - pad + jx;
            cols(row, oy * wo + ox) =
                (sy >= 0 && sy < h && sx >= 0 && sx < wd) ? x->value(c, sy * wd + sx) : 0.0;
          }
        }
      }
  Tensor out({cout, no});
  emap2d(out).noalias() = emap2d(w->value) * emap2d(cols);
  for (int oc = 0; oc < cout; ++oc)
    for (int o = 0; o < no; ++o) out(oc, o) += b->value[static_cast<std::size_t>(oc)];

  return make_node(
      std::move(out), {x, w, b},
      [cols, cin, h, wd, kh, kw, stride, pad, ho, wo, no, cout](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        Node& pb = *n.parents[2];
        auto G = emap2d(n.grad);
        if (pb.requires_grad)
          for (int oc = 0; oc < cout; ++oc) {
            double s = 0.0;
            for (int o = 0; o < no; ++o) s += n.grad(oc, o);
            pb.grad[static_cast<std::size_t>(oc)] += s;
          }
        if (pw.requires_grad)
          emap2d(pw.grad).noalias() += G * emap2d(cols).transpose();
        if (px.requires_grad) {
          Tensor dcols({cin * kh * kw, no});
          emap2d(dcols).noalias() = emap2d(pw.value).transpose() * G;
          for (int c = 0; c < cin; ++c)
            for (int jy = 0; jy < kh; ++jy)
              for (int jx = 0; jx < kw; ++jx) {
                const int row = (c * kh + jy) * kw + jx;
                for (int oy = 0; oy < ho; ++oy) {
                  const int sy = oy * stride - pad + jy;
                  if (sy < 0 || sy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int sx = ox * stride - pad + jx;
                    if (sx >= 0 && sx < wd) px.grad(c, sy * wd + sx) += dcols(row, oy * wo + ox);
                  }
                }
              }
        }
      });
}

// Transposed 2-d convolution. x: [Cin x (H*W)], w: [Cin x (Cout*kh*kw)], b: [Cout]
inline Var conv2d_transpose(const Var& x, const Var& w, const Var& b, int cout, int h,
                            int wd, int kh, int kw, int stride, int pad) {
  const int cin = x->value.rows();
  if (x->value.cols() != h * wd) throw ShapeError("conv2d_transpose: input shape mismatch");
  if (w->value.rows() != cin || w->value.cols() != cout * kh * kw)
    throw ShapeError("conv2d_transpose: weight shape mismatch");
  if (static_cast<int>(b->value.size()) != cout)
    throw ShapeError("conv2d_transpose: bias size");
  const int ho = (h - 1) * stride + kh - 2 * pad;
  const int wo = (wd - 1) * stride + kw - 2 * pad;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d_transpose: empty output");
  const int ni = h * wd;

  Tensor cols({cout * kh * kw, ni});
  emap2d(cols).noalias() = emap2d(w->value).transpose() * emap2d(x->value);
  Tensor out({cout, ho * wo});
  for (int oc = 0; oc < cout; ++oc)
    for (int jy = 0; jy < kh; ++jy)
      for (int jx = 0; jx < kw; ++jx) {
        const int row = (oc * kh + jy) * kw + jx;
        for (int iy = 0; iy < h; ++iy) {
          const int dy = iy * stride - pad + jy;
          if (dy < 0 || dy >= ho) continue;
          for (int ix = 0; ix < wd; ++ix) {
            const int dx = ix * stride - pad + jx;
            if (dx >= 0 && dx < wo) out(oc, dy * wo + dx) += cols(row, iy * wd + ix);
          }
        }
      }
  for (int oc = 0; oc < cout; ++oc)
    for (int o = 0; o < ho * wo; ++o) out(oc, o) += b->value[static_cast<std::size_t>(oc)];

  return make_node(
      std::move(out), {x, w, b},
      [cin, cout, h, wd, kh, kw, stride, pad, ho, wo, ni](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        Node& pb = *n.parents[2];
        if (pb.requires_grad)
          for (int oc = 0; oc < cout; ++oc) {
            double s = 0.0;
            for (int o = 0; o < ho * wo; ++o) s += n.grad(oc, o);
            pb.grad[static_cast<std::size_t>(oc)] += s;
          }
        Tensor dcols({cout * kh * kw, ni});
        for (int oc = 0; oc < cout; ++oc)
          for (int jy = 0; jy < kh; ++jy)
            for (int jx = 0; jx < kw; ++jx) {
              const int row = (oc * kh + jy) * kw + jx;
              for (int iy = 0; iy < h; ++iy) {
                const int dy = iy * stride - pad + jy;
                for (int ix = 0; ix < wd; ++ix) {
                  const int dx = ix * stride - pad + jx;
                  dcols(row, iy * wd + ix) =
                      (dy >= 0 && dy < ho && dx >= 0 && dx < wo) ? n.grad(oc, dy * wo + dx)
                                                                 : 0.0;
                }
              }
            }
        if (px.requires_grad)
          emap2d(px.grad).noalias() += emap2d(pw.value) * emap2d(dcols);
        if (pw.requires_grad)
          emap2d(pw.grad).noalias() += emap2d(px.value) * emap2d(dcols).transpose();
      });
}

// ---------------------------------------------------------------------------
// attention

// Single-stream scaled dot-product attention over already-projected inputs.
// q: [L x D], k/v: [L' x D]; scale is 1/sqrt(D).
inline Var attention(const Var& q, const Var& k, const Var& v) {
  const int d = q->value.cols();
  if (k->value.cols() != d || v->value.rows() != k->value.rows())
    throw ShapeError("attention: operand shapes inconsistent");
  if (d <= 0) throw ShapeError("attention: zero feature dimension");
  Var scores = mul_scalar(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
  return matmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Var& root) {
  if (root->value.size() != 1) throw ShapeError("backward: root must be scalar");
  if (!root->requires_grad) return;

  // iterative post-order DFS for topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    n->ensure_grad();
    n->grad.fill(0.0);
  }
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace coshdit
