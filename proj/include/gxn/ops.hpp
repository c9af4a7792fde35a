#pragma once

#include "gxn/tensor.hpp"

#include <cmath>
#include <limits>

namespace gxn {

namespace detail {

template <typename S>
using Vec = typename BasicTensor<S>::Vector;

template <typename S>
using RowMat = typename BasicTensor<S>::Matrix;

template <typename S>
inline void accumulate(Node<S>& parent, const Vec<S>& g) {
  if (!parent.tracked) return;
  parent.ensure_grad();
  parent.grad += g;
}

template <typename S>
inline Eigen::Map<const RowMat<S>> as_matrix(const Vec<S>& v, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const RowMat<S>>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename S>
inline Eigen::Map<RowMat<S>> as_matrix(Vec<S>& v, std::size_t rows, std::size_t cols) {
  return Eigen::Map<RowMat<S>>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void log_kinks(const double* values, std::size_t n) {
  if (auto* log = thread_state().kink_log) log->insert(log->end(), values, values + n);
}

template <typename S>
inline void log_kinks(const Vec<S>& values) {
  if (thread_state().kink_log) {
    for (Eigen::Index i = 0; i < values.size(); ++i) thread_state().kink_log->push_back(static_cast<double>(values[i]));
  }
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline std::size_t rows_of(const Shape& s) { return s.empty() ? 1 : s.front(); }

enum class Broadcast { none, scalar, column, row };

// How `small` expands to `big`: whole scalar, a trailing-1 column [m,1] against
// [m,n], or a row vector matching the last dimension.
inline Broadcast classify(const Shape& big, const Shape& small) {
  if (big == small) return Broadcast::none;
  if (numel(small) == 1) return Broadcast::scalar;
  if (big.size() == 2 && small.size() == 2 && small[0] == big[0] && small[1] == 1) return Broadcast::column;
  if (!big.empty()) {
    const auto last = big.back();
    if ((small.size() == 1 && small[0] == last) || (small.size() == 2 && small[0] == 1 && small[1] == last)) {
      return Broadcast::row;
    }
  }
  throw ShapeError("cannot broadcast " + to_string(small) + " to " + to_string(big));
}

}  // namespace detail

/// Expands `a` to `shape` under the broadcast rules; gradient sums back.
template <typename S>
BasicTensor<S> broadcast_to(const BasicTensor<S>& a, const Shape& shape) {
  using V = detail::Vec<S>;
  const auto kind = detail::classify(shape, a.shape());
  if (kind == detail::Broadcast::none) return a;
  const std::size_t n = numel(shape);
  const std::size_t last = shape.empty() ? 1 : shape.back();
  V out(static_cast<Eigen::Index>(n));
  switch (kind) {
    case detail::Broadcast::scalar: out.setConstant(a[0]); break;
    case detail::Broadcast::column: {
      auto m = detail::as_matrix<S>(out, shape[0], shape[1]);
      m = a.values().replicate(1, static_cast<Eigen::Index>(shape[1]));
      break;
    }
    case detail::Broadcast::row: {
      auto m = detail::as_matrix<S>(out, n / last, last);
      m = a.values().transpose().replicate(static_cast<Eigen::Index>(n / last), 1);
      break;
    }
    case detail::Broadcast::none: break;
  }
  return BasicTensor<S>::make_result(shape, std::move(out), {a}, [kind, shape, last, n](Node<S>& self) {
    auto& src = *self.parents[0];
    V g;
    switch (kind) {
      case detail::Broadcast::scalar: g = V::Constant(1, self.grad.sum()); break;
      case detail::Broadcast::column: g = detail::as_matrix<S>(self.grad, shape[0], shape[1]).rowwise().sum(); break;
      case detail::Broadcast::row:
        g = detail::as_matrix<S>(self.grad, n / last, last).colwise().sum().transpose();
        break;
      case detail::Broadcast::none: break;
    }
    detail::accumulate(src, g);
  });
}

namespace detail {

template <typename S>
std::pair<BasicTensor<S>, BasicTensor<S>> align(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return {a, b};
  if (numel(a.shape()) >= numel(b.shape())) {
    try {
      return {a, broadcast_to(b, a.shape())};
    } catch (const ShapeError&) {
      shape_mismatch(op, a.shape(), b.shape());
    }
  }
  try {
    return {broadcast_to(a, b.shape()), b};
  } catch (const ShapeError&) {
    shape_mismatch(op, a.shape(), b.shape());
  }
}

// Equal-shape binary elementwise op. `fwd(x, y)` and the partials `dx(x, y, g)`,
// `dy(x, y, g)` act on Eigen arrays.
template <typename S, typename Fwd, typename Dx, typename Dy>
BasicTensor<S> zip(const char* name, const BasicTensor<S>& a, const BasicTensor<S>& b, Fwd fwd, Dx dx, Dy dy) {
  auto [x, y] = align(a, b, name);
  Vec<S> out = fwd(x.values().array(), y.values().array()).matrix();
  return BasicTensor<S>::make_result(x.shape(), std::move(out), {x, y}, [dx, dy](Node<S>& self) {
    auto& p = *self.parents[0];
    auto& q = *self.parents[1];
    const auto xa = p.value.array();
    const auto ya = q.value.array();
    const auto g = self.grad.array();
    if (p.tracked) accumulate<S>(p, Vec<S>(dx(xa, ya, g).matrix()));
    if (q.tracked) accumulate<S>(q, Vec<S>(dy(xa, ya, g).matrix()));
  });
}

// Unary elementwise op; `df(x, y, g)` gets input, output and upstream gradient.
template <typename S, typename Fwd, typename Df>
BasicTensor<S> map(const BasicTensor<S>& a, Fwd fwd, Df df) {
  Vec<S> out = fwd(a.values().array()).matrix();
  return BasicTensor<S>::make_result(a.shape(), out, {a}, [df](Node<S>& self) {
    auto& p = *self.parents[0];
    accumulate<S>(p, Vec<S>(df(p.value.array(), self.value.array(), self.grad.array()).matrix()));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::zip(
      "add", a, b, [](const auto& x, const auto& y) { return x + y; }, [](const auto&, const auto&, const auto& g) { return g; },
      [](const auto&, const auto&, const auto& g) { return g; });
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::zip(
      "sub", a, b, [](const auto& x, const auto& y) { return x - y; }, [](const auto&, const auto&, const auto& g) { return g; },
      [](const auto&, const auto&, const auto& g) { return -g; });
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::zip(
      "mul", a, b, [](const auto& x, const auto& y) { return x * y; },
      [](const auto&, const auto& y, const auto& g) { return g * y; },
      [](const auto& x, const auto&, const auto& g) { return g * x; });
}

/// max(0, b - a); gradient flows only where b - a > 0.
template <typename S>
BasicTensor<S> max0diff(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  auto [x, y] = detail::align(a, b, "max0diff");
  detail::log_kinks<S>(y.values() - x.values());
  return detail::zip(
      "max0diff", x, y, [](const auto& p, const auto& q) { return (q - p).max(S(0)); },
      [](const auto& p, const auto& q, const auto& g) { return -(g * ((q - p) > S(0)).template cast<S>()); },
      [](const auto& p, const auto& q, const auto& g) { return g * ((q - p) > S(0)).template cast<S>(); });
}

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a) {
  detail::log_kinks<S>(a.values());
  return detail::map(
      a, [](const auto& x) { return x.max(S(0)); },
      [](const auto& x, const auto&, const auto& g) { return g * (x > S(0)).template cast<S>(); });
}

template <typename S>
BasicTensor<S> leaky_relu(const BasicTensor<S>& a, S slope) {
  detail::log_kinks<S>(a.values());
  return detail::map(
      a, [slope](const auto& x) { return (x > S(0)).select(x, slope * x); },
      [slope](const auto& x, const auto&, const auto& g) { return (x > S(0)).select(g, slope * g); });
}

template <typename S>
BasicTensor<S> abs(const BasicTensor<S>& a) {
  detail::log_kinks<S>(a.values());
  return detail::map(
      a, [](const auto& x) { return x.abs(); },
      [](const auto& x, const auto&, const auto& g) { return g * x.sign(); });
}

template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return x.tanh(); }, [](const auto&, const auto& y, const auto& g) { return g * (S(1) - y.square()); });
}

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return S(1) / (S(1) + (-x).exp()); },
      [](const auto&, const auto& y, const auto& g) { return g * y * (S(1) - y); });
}

/// log(sigmoid(x)) without overflow for large |x|.
template <typename S>
BasicTensor<S> log_sigmoid(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return x.min(S(0)) - (-(x.abs())).exp().log1p(); },
      [](const auto& x, const auto&, const auto& g) { return g / (S(1) + x.exp()); });
}

template <typename S>
BasicTensor<S> exp(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return x.exp(); }, [](const auto&, const auto& y, const auto& g) { return g * y; });
}

template <typename S>
BasicTensor<S> log(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return x.log(); }, [](const auto& x, const auto&, const auto& g) { return g / x; });
}

template <typename S>
BasicTensor<S> square(const BasicTensor<S>& a) {
  return detail::map(
      a, [](const auto& x) { return x.square(); }, [](const auto& x, const auto&, const auto& g) { return S(2) * g * x; });
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  return detail::map(
      a, [factor](const auto& x) { return factor * x; }, [factor](const auto&, const auto&, const auto& g) { return factor * g; });
}

template <typename S>
BasicTensor<S> add_scalar(const BasicTensor<S>& a, S offset) {
  return detail::map(
      a, [offset](const auto& x) { return x + offset; }, [](const auto&, const auto&, const auto& g) { return g; });
}

/// Clamp to [lo, hi]; zero gradient outside.
template <typename S>
BasicTensor<S> clamp(const BasicTensor<S>& a, S lo, S hi) {
  return detail::map(
      a, [lo, hi](const auto& x) { return x.max(lo).min(hi); },
      [lo, hi](const auto& x, const auto&, const auto& g) { return g * ((x >= lo) && (x <= hi)).template cast<S>(); });
}

template <typename S>
BasicTensor<S> operator+(const BasicTensor<S>& a, const BasicTensor<S>& b) { return add(a, b); }
template <typename S>
BasicTensor<S> operator-(const BasicTensor<S>& a, const BasicTensor<S>& b) { return sub(a, b); }
template <typename S>
BasicTensor<S> operator*(const BasicTensor<S>& a, const BasicTensor<S>& b) { return mul(a, b); }
template <typename S>
BasicTensor<S> operator-(const BasicTensor<S>& a) { return scale(a, S(-1)); }
template <typename S>
BasicTensor<S> operator*(S factor, const BasicTensor<S>& a) { return scale(a, factor); }

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) detail::shape_mismatch("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::Vec<S> out(static_cast<Eigen::Index>(m * n));
  detail::as_matrix<S>(out, m, n).noalias() = a.matrix() * b.matrix();
  return BasicTensor<S>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = detail::as_matrix<S>(self.grad, m, n);
    if (pa.tracked) {
      pa.ensure_grad();
      detail::as_matrix<S>(pa.grad, m, k).noalias() += g * detail::as_matrix<S>(pb.value, k, n).transpose();
    }
    if (pb.tracked) {
      pb.ensure_grad();
      detail::as_matrix<S>(pb.grad, k, n).noalias() += detail::as_matrix<S>(pa.value, m, k).transpose() * g;
    }
  });
}

template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + to_string(a.shape()));
  const auto m = a.dim(0), n = a.dim(1);
  detail::Vec<S> out(static_cast<Eigen::Index>(m * n));
  detail::as_matrix<S>(out, n, m) = a.matrix().transpose();
  return BasicTensor<S>::make_result({n, m}, std::move(out), {a}, [m, n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    detail::as_matrix<S>(p.grad, m, n) += detail::as_matrix<S>(self.grad, n, m).transpose();
  });
}

/// x[B x in] * W[out x in]^T + bias[out].
template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& w, const BasicTensor<S>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) detail::shape_mismatch("linear", x.shape(), w.shape());
  const auto batch = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (bias.size() != out_dim) detail::shape_mismatch("linear bias", w.shape(), bias.shape());
  detail::Vec<S> out(static_cast<Eigen::Index>(batch * out_dim));
  auto om = detail::as_matrix<S>(out, batch, out_dim);
  om.noalias() = x.matrix() * w.matrix().transpose();
  om.rowwise() += bias.values().transpose();
  return BasicTensor<S>::make_result({batch, out_dim}, std::move(out), {x, w, bias}, [batch, in, out_dim](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto g = detail::as_matrix<S>(self.grad, batch, out_dim);
    if (px.tracked) {
      px.ensure_grad();
      detail::as_matrix<S>(px.grad, batch, in).noalias() += g * detail::as_matrix<S>(pw.value, out_dim, in);
    }
    if (pw.tracked) {
      pw.ensure_grad();
      detail::as_matrix<S>(pw.grad, out_dim, in).noalias() += g.transpose() * detail::as_matrix<S>(px.value, batch, in);
    }
    if (pb.tracked) {
      pb.ensure_grad();
      pb.grad += g.colwise().sum().transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a) {
  if (a.size() == 0) throw ShapeError("sum of an empty tensor");
  return BasicTensor<S>::make_result({1}, detail::Vec<S>::Constant(1, a.values().sum()), {a}, [](Node<S>& self) {
    auto& p = *self.parents[0];
    detail::accumulate<S>(p, detail::Vec<S>::Constant(p.value.size(), self.grad[0]));
  });
}

/// Sum of a rank-2 tensor along `axis` (0: over rows -> [cols], 1: over cols -> [rows]).
template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a, std::size_t axis) {
  if (a.rank() != 2 || axis > 1) throw ShapeError("axis sum needs rank 2 and axis 0/1, got " + to_string(a.shape()));
  const auto m = a.dim(0), n = a.dim(1);
  if ((axis == 0 ? m : n) == 0) throw ShapeError("sum over an empty axis");
  detail::Vec<S> out = axis == 0 ? detail::Vec<S>(a.matrix().colwise().sum().transpose()) : detail::Vec<S>(a.matrix().rowwise().sum());
  return BasicTensor<S>::make_result({axis == 0 ? n : m}, std::move(out), {a}, [axis, m, n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    auto gm = detail::as_matrix<S>(p.grad, m, n);
    if (axis == 0) {
      gm.rowwise() += self.grad.transpose();
    } else {
      gm.colwise() += self.grad;
    }
  });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

/// Sum of squares of all entries.
template <typename S>
BasicTensor<S> l2_norm_sq(const BasicTensor<S>& a) {
  return sum(square(a));
}

/// Row-wise sum of squares of a rank-2 tensor -> [rows].
template <typename S>
BasicTensor<S> l2_norm_sq(const BasicTensor<S>& a, std::size_t axis) {
  return sum(square(a), axis);
}

/// Rows of a rank-2 tensor (or a whole vector) scaled to unit L2 norm; `eps`
/// keeps zero rows finite.
template <typename S>
BasicTensor<S> normalize_rows(const BasicTensor<S>& a, S eps = S(1e-12)) {
  if (a.rank() == 1) return mul(a, exp(scale(log(add_scalar(l2_norm_sq(a), eps)), S(-0.5))));
  if (a.rank() != 2) throw ShapeError("normalize_rows expects rank 1 or 2, got " + to_string(a.shape()));
  const auto inv = exp(scale(log(add_scalar(l2_norm_sq(a, 1), eps)), S(-0.5)));
  return mul(a, broadcast_to(reshape(inv, {a.dim(0), 1}), a.shape()));
}

/// Argmax per row (rank 2) or over the whole vector. Not differentiable.
template <typename S>
std::vector<std::size_t> argmax_rows(const BasicTensor<S>& a) {
  if (a.size() == 0) throw ShapeError("argmax of an empty tensor");
  const auto m = a.matrix();
  std::vector<std::size_t> idx(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    m.row(r).maxCoeff(&best);  // first maximum wins
    idx[static_cast<std::size_t>(r)] = static_cast<std::size_t>(best);
  }
  return idx;
}

/// Untracked tensor of argmax indices.
template <typename S>
BasicTensor<S> max_index(const BasicTensor<S>& a) {
  const auto idx = a.rank() <= 1 ? std::vector<std::size_t>{argmax_rows(BasicTensor<S>::constant({1, a.size()}, a.values()))}
                                 : argmax_rows(a);
  detail::Vec<S> out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = static_cast<S>(idx[i]);
  return BasicTensor<S>::constant({idx.size()}, std::move(out));
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise softmax values (untracked helper for sampling).
template <typename S>
detail::RowMat<S> softmax_rows(const BasicTensor<S>& logits) {
  detail::RowMat<S> p = logits.matrix();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    p.row(r).array() -= p.row(r).maxCoeff();
    p.row(r) = p.row(r).array().exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

/// log softmax(logits[b])[targets[b]] for every row b -> [B].
template <typename S>
BasicTensor<S> pick_log_softmax(const BasicTensor<S>& logits, std::span<const std::size_t> targets) {
  const auto batch = detail::rows_of(logits.shape());
  const auto vocab = batch ? logits.size() / batch : 0;
  if (targets.size() != batch) throw ShapeError("pick_log_softmax: " + std::to_string(targets.size()) + " targets for " + std::to_string(batch) + " rows");
  for (auto t : targets) {
    if (t >= vocab) throw std::out_of_range("target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
  }
  const auto lm = detail::as_matrix<S>(logits.values(), batch, vocab);
  detail::RowMat<S> probs(batch, vocab);
  detail::Vec<S> out(static_cast<Eigen::Index>(batch));
  for (std::size_t r = 0; r < batch; ++r) {
    const auto row = lm.row(static_cast<Eigen::Index>(r));
    const S mx = row.maxCoeff();
    const auto shifted = (row.array() - mx).eval();
    const S lse = std::log(shifted.exp().sum());
    probs.row(static_cast<Eigen::Index>(r)) = (shifted - lse).exp().matrix();
    out[static_cast<Eigen::Index>(r)] = shifted[static_cast<Eigen::Index>(targets[r])] - lse;
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return BasicTensor<S>::make_result({batch}, std::move(out), {logits},
                                     [probs = std::move(probs), tgt = std::move(tgt), batch, vocab](Node<S>& self) {
                                       auto& p = *self.parents[0];
                                       if (!p.tracked) return;
                                       p.ensure_grad();
                                       auto gm = detail::as_matrix<S>(p.grad, batch, vocab);
                                       for (std::size_t r = 0; r < batch; ++r) {
                                         const S g = self.grad[static_cast<Eigen::Index>(r)];
                                         gm.row(static_cast<Eigen::Index>(r)) -= g * probs.row(static_cast<Eigen::Index>(r));
                                         gm(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(tgt[r])) += g;
                                       }
                                     });
}

/// -log softmax(logits)[target] for a single logit vector -> scalar.
template <typename S>
BasicTensor<S> softmax_xent(const BasicTensor<S>& logits, std::size_t target) {
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.dim(0) != 1)) {
    throw ShapeError("softmax_xent expects a single logit vector, got " + to_string(logits.shape()));
  }
  const std::size_t t[] = {target};
  auto row = logits.rank() == 2 ? logits : reshape(logits, {1, logits.size()});
  return scale(pick_log_softmax(row, std::span<const std::size_t>(t)), S(-1));
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) detail::shape_mismatch("reshape", a.shape(), shape);
  return BasicTensor<S>::make_result(std::move(shape), a.values(), {a},
                                     [](Node<S>& self) { detail::accumulate<S>(*self.parents[0], self.grad); });
}

/// Concatenates along the last dimension; leading dimensions must agree.
template <typename S>
BasicTensor<S> concat_last(const std::vector<BasicTensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    if (l.empty()) detail::shape_mismatch("concat_last", parts[0].shape(), p.shape());
    widths.push_back(l.back());
    total += l.back();
    l.pop_back();
    if (l != lead) detail::shape_mismatch("concat_last", parts[0].shape(), p.shape());
  }
  const std::size_t rows = numel(lead);
  detail::Vec<S> out(static_cast<Eigen::Index>(rows * total));
  auto om = detail::as_matrix<S>(out, rows, total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    om.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(widths[i])) =
        detail::as_matrix<S>(parts[i].values(), rows, widths[i]);
    offset += widths[i];
  }
  Shape shape = lead;
  shape.push_back(total);
  return BasicTensor<S>::make_result(std::move(shape), std::move(out), parts, [widths, rows, total](Node<S>& self) {
    const auto gm = detail::as_matrix<S>(self.grad, rows, total);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.tracked) {
        p.ensure_grad();
        detail::as_matrix<S>(p.grad, rows, widths[i]) +=
            gm.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(widths[i]));
      }
      offset += widths[i];
    }
  });
}

/// Columns [begin, begin + count) of the last dimension.
template <typename S>
BasicTensor<S> slice_last(const BasicTensor<S>& a, std::size_t begin, std::size_t count) {
  if (a.rank() == 0 || begin + count > a.shape().back()) throw ShapeError("slice_last out of range for " + to_string(a.shape()));
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.size() / width;
  Shape shape = a.shape();
  shape.back() = count;
  detail::Vec<S> out(static_cast<Eigen::Index>(rows * count));
  detail::as_matrix<S>(out, rows, count) =
      detail::as_matrix<S>(a.values(), rows, width).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return BasicTensor<S>::make_result(std::move(shape), std::move(out), {a}, [rows, width, begin, count](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    detail::as_matrix<S>(p.grad, rows, width).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        detail::as_matrix<S>(self.grad, rows, count);
  });
}

/// Rows `ids` of a [V x d] table -> [n x d]; gradient scatters back.
template <typename S>
BasicTensor<S> gather_rows(const BasicTensor<S>& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a rank-2 table, got " + to_string(table.shape()));
  const auto vocab = table.dim(0), width = table.dim(1);
  detail::Vec<S> out(static_cast<Eigen::Index>(ids.size() * width));
  auto om = detail::as_matrix<S>(out, ids.size(), width);
  const auto tm = table.matrix();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) throw std::out_of_range("row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    om.row(static_cast<Eigen::Index>(i)) = tm.row(static_cast<Eigen::Index>(ids[i]));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return BasicTensor<S>::make_result({ids.size(), width}, std::move(out), {table}, [idx = std::move(idx), vocab, width](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    auto gm = detail::as_matrix<S>(p.grad, vocab, width);
    const auto sg = detail::as_matrix<S>(self.grad, idx.size(), width);
    for (std::size_t i = 0; i < idx.size(); ++i) gm.row(static_cast<Eigen::Index>(idx[i])) += sg.row(static_cast<Eigen::Index>(i));
  });
}

/// Diagonal of a square matrix -> [n].
template <typename S>
BasicTensor<S> diagonal(const BasicTensor<S>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("diagonal needs a square matrix, got " + to_string(a.shape()));
  const auto n = a.dim(0);
  detail::Vec<S> out = a.matrix().diagonal();
  return BasicTensor<S>::make_result({n}, std::move(out), {a}, [n](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    detail::as_matrix<S>(p.grad, n, n).diagonal() += self.grad;
  });
}

/// Row r of the result is row r of `a` where keep[r], else row r of `b`.
template <typename S>
BasicTensor<S> where_rows(const std::vector<bool>& keep, const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || keep.size() != a.dim(0)) detail::shape_mismatch("where_rows", a.shape(), b.shape());
  const auto rows = a.dim(0), cols = a.dim(1);
  detail::Vec<S> out(static_cast<Eigen::Index>(rows * cols));
  auto om = detail::as_matrix<S>(out, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) om.row(static_cast<Eigen::Index>(r)) = (keep[r] ? a : b).matrix().row(static_cast<Eigen::Index>(r));
  return BasicTensor<S>::make_result(a.shape(), std::move(out), {a, b}, [keep, rows, cols](Node<S>& self) {
    const auto gm = detail::as_matrix<S>(self.grad, rows, cols);
    for (int side = 0; side < 2; ++side) {
      auto& p = *self.parents[static_cast<std::size_t>(side)];
      if (!p.tracked) continue;
      p.ensure_grad();
      auto pm = detail::as_matrix<S>(p.grad, rows, cols);
      for (std::size_t r = 0; r < rows; ++r) {
        if (keep[r] == (side == 0)) pm.row(static_cast<Eigen::Index>(r)) += gm.row(static_cast<Eigen::Index>(r));
      }
    }
  });
}

/// [B x c] -> [B x H x W x c], copying each row to every spatial position.
template <typename S>
BasicTensor<S> tile_spatial(const BasicTensor<S>& a, std::size_t height, std::size_t width) {
  if (a.rank() != 2) throw ShapeError("tile_spatial needs rank 2, got " + to_string(a.shape()));
  const auto batch = a.dim(0), ch = a.dim(1), cells = height * width;
  detail::Vec<S> out(static_cast<Eigen::Index>(batch * cells * ch));
  auto om = detail::as_matrix<S>(out, batch * cells, ch);
  for (std::size_t b = 0; b < batch; ++b) {
    om.middleRows(static_cast<Eigen::Index>(b * cells), static_cast<Eigen::Index>(cells)).rowwise() =
        a.matrix().row(static_cast<Eigen::Index>(b));
  }
  return BasicTensor<S>::make_result({batch, height, width, ch}, std::move(out), {a}, [batch, ch, cells](Node<S>& self) {
    auto& p = *self.parents[0];
    if (!p.tracked) return;
    p.ensure_grad();
    auto pm = detail::as_matrix<S>(p.grad, batch, ch);
    const auto gm = detail::as_matrix<S>(self.grad, batch * cells, ch);
    for (std::size_t b = 0; b < batch; ++b) {
      pm.row(static_cast<Eigen::Index>(b)) +=
          gm.middleRows(static_cast<Eigen::Index>(b * cells), static_cast<Eigen::Index>(cells)).colwise().sum();
    }
  });
}

/// Pairwise order-violation scores S[i][j] = -||max(0, images[j] - texts[i])||^2
/// for texts [m x d] and images [n x d] -> [m x n].
template <typename S>
BasicTensor<S> order_violation_matrix(const BasicTensor<S>& texts, const BasicTensor<S>& images) {
  if (texts.rank() != 2 || images.rank() != 2 || texts.dim(1) != images.dim(1)) {
    detail::shape_mismatch("order_violation_matrix", texts.shape(), images.shape());
  }
  const auto m = texts.dim(0), n = images.dim(0), d = texts.dim(1);
  const auto tm = texts.matrix();
  const auto vm = images.matrix();
  detail::Vec<S> out(static_cast<Eigen::Index>(m * n));
  auto om = detail::as_matrix<S>(out, m, n);
  const bool logging = detail::thread_state().kink_log != nullptr;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto diff = (vm.row(static_cast<Eigen::Index>(j)) - tm.row(static_cast<Eigen::Index>(i))).array().eval();
      if (logging) {
        for (Eigen::Index k = 0; k < diff.size(); ++k) detail::thread_state().kink_log->push_back(static_cast<double>(diff[k]));
      }
      om(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = -diff.max(S(0)).square().sum();
    }
  }
  return BasicTensor<S>::make_result({m, n}, std::move(out), {texts, images}, [m, n, d](Node<S>& self) {
    auto& pt = *self.parents[0];
    auto& pv = *self.parents[1];
    const auto tm = detail::as_matrix<S>(pt.value, m, d);
    const auto vm = detail::as_matrix<S>(pv.value, n, d);
    const auto gm = detail::as_matrix<S>(self.grad, m, n);
    pt.ensure_grad();
    pv.ensure_grad();
    auto gt = detail::as_matrix<S>(pt.grad, m, d);
    auto gv = detail::as_matrix<S>(pv.grad, n, d);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const S g = gm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (g == S(0)) continue;
        const auto pos = (vm.row(static_cast<Eigen::Index>(j)) - tm.row(static_cast<Eigen::Index>(i))).array().max(S(0)).eval();
        // d/dv = -2 pos, d/dt = +2 pos
        if (pt.tracked) gt.row(static_cast<Eigen::Index>(i)) += (S(2) * g * pos).matrix();
        if (pv.tracked) gv.row(static_cast<Eigen::Index>(j)) -= (S(2) * g * pos).matrix();
      }
    }
  });
}

}  // namespace gxn
