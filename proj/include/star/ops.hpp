// Differentiable operations over TensorT.
//
// Broadcasting is restricted to scalar-vs-tensor; every other combination
// must match shapes exactly. Matrix products run through Eigen maps, the
// rest are straightforward loops. Each op's backward is exercised against
// central finite differences in the test suite.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star {

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

namespace detail {

template <class S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not match");
}

inline bool is_scalar_like(long long n) { return n == 1; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (exact shape or scalar broadcast on either side)
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  const bool sa = detail::is_scalar_like(a.numel());
  const bool sb = detail::is_scalar_like(b.numel());
  if (!sa && !sb) detail::check_same_shape("add", a, b);
  const auto& big = sa ? b : a;
  std::vector<S> out(big.data());
  if (sa) {
    for (auto& v : out) v += a.data()[0];
  } else if (sb) {
    for (auto& v : out) v += b.data()[0];
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  }
  auto an = a.node();
  auto bn = b.node();
  size_t n = out.size();
  return make_op<S>("add", big.shape(), std::move(out), {a, b},
                    [an, bn, sa, sb, n](const S* g, GradientTapeT<S>& t) {
                      if (an->grad_enabled) {
                        if (sa && n > 1) {
                          S total = 0;
                          for (size_t i = 0; i < n; ++i) total += g[i];
                          t.accumulate(an, &total, 1);
                        } else {
                          t.accumulate(an, g, n);
                        }
                      }
                      if (bn->grad_enabled) {
                        if (sb && n > 1) {
                          S total = 0;
                          for (size_t i = 0; i < n; ++i) total += g[i];
                          t.accumulate(bn, &total, 1);
                        } else {
                          t.accumulate(bn, g, n);
                        }
                      }
                    });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  const bool sa = detail::is_scalar_like(a.numel());
  const bool sb = detail::is_scalar_like(b.numel());
  if (!sa && !sb) detail::check_same_shape("sub", a, b);
  const auto& big = sa ? b : a;
  size_t n = static_cast<size_t>(big.numel());
  std::vector<S> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[sa ? 0 : i] - b.data()[sb ? 0 : i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("sub", big.shape(), std::move(out), {a, b},
                    [an, bn, sa, sb, n](const S* g, GradientTapeT<S>& t) {
                      if (an->grad_enabled) {
                        if (sa && n > 1) {
                          S total = 0;
                          for (size_t i = 0; i < n; ++i) total += g[i];
                          t.accumulate(an, &total, 1);
                        } else {
                          t.accumulate(an, g, n);
                        }
                      }
                      if (bn->grad_enabled) {
                        std::vector<S> neg(sb && n > 1 ? 1 : n, S(0));
                        if (sb && n > 1) {
                          for (size_t i = 0; i < n; ++i) neg[0] -= g[i];
                        } else {
                          for (size_t i = 0; i < n; ++i) neg[i] = -g[i];
                        }
                        t.accumulate(bn, neg.data(), neg.size());
                      }
                    });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  const bool sa = detail::is_scalar_like(a.numel());
  const bool sb = detail::is_scalar_like(b.numel());
  if (!sa && !sb) detail::check_same_shape("mul", a, b);
  const auto& big = sa ? b : a;
  size_t n = static_cast<size_t>(big.numel());
  std::vector<S> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[sa ? 0 : i] * b.data()[sb ? 0 : i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("mul", big.shape(), std::move(out), {a, b},
                    [an, bn, sa, sb, n](const S* g, GradientTapeT<S>& t) {
                      if (an->grad_enabled) {
                        if (sa && n > 1) {
                          S total = 0;
                          for (size_t i = 0; i < n; ++i) total += g[i] * bn->value[i];
                          t.accumulate(an, &total, 1);
                        } else {
                          std::vector<S> ga(n);
                          for (size_t i = 0; i < n; ++i) ga[i] = g[i] * bn->value[sb ? 0 : i];
                          t.accumulate(an, ga.data(), n);
                        }
                      }
                      if (bn->grad_enabled) {
                        if (sb && n > 1) {
                          S total = 0;
                          for (size_t i = 0; i < n; ++i) total += g[i] * an->value[i];
                          t.accumulate(bn, &total, 1);
                        } else {
                          std::vector<S> gb(n);
                          for (size_t i = 0; i < n; ++i) gb[i] = g[i] * an->value[sa ? 0 : i];
                          t.accumulate(bn, gb.data(), n);
                        }
                      }
                    });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  size_t n = static_cast<size_t>(a.numel());
  std::vector<S> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return make_op<S>("scale", a.shape(), std::move(out), {a},
                    [an, c, n](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> ga(n);
                      for (size_t i = 0; i < n; ++i) ga[i] = g[i] * c;
                      t.accumulate(an, ga.data(), n);
                    });
}

template <class S>
TensorT<S> silu(const TensorT<S>& a) {
  size_t n = static_cast<size_t>(a.numel());
  std::vector<S> out(n);
  for (size_t i = 0; i < n; ++i) {
    S x = a.data()[i];
    out[i] = x / (S(1) + std::exp(-x));
  }
  auto an = a.node();
  return make_op<S>("silu", a.shape(), std::move(out), {a},
                    [an, n](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> ga(n);
                      for (size_t i = 0; i < n; ++i) {
                        S x = an->value[i];
                        S sig = S(1) / (S(1) + std::exp(-x));
                        ga[i] = g[i] * sig * (S(1) + x * (S(1) - sig));
                      }
                      t.accumulate(an, ga.data(), n);
                    });
}

// Stop-gradient: same value, no ancestry.
template <class S>
TensorT<S> detach(const TensorT<S>& a) {
  return TensorT<S>::from_data(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  auto an = a.node();
  size_t n = static_cast<size_t>(a.numel());
  return make_op<S>("reshape", std::move(shape), std::vector<S>(a.data()), {a},
                    [an, n](const S* g, GradientTapeT<S>& t) { t.accumulate(an, g, n); });
}

template <class S>
TensorT<S> slice(const TensorT<S>& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= a.rank()) throw DimensionError("slice: bad axis");
  if (start < 0 || len < 0 || start + len > s[axis])
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") outside extent " +
                         std::to_string(s[axis]));
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<S> out(static_cast<size_t>(outer * len * inner));
  const S* src = a.data().data();
  for (long long o = 0; o < outer; ++o)
    std::copy_n(src + (o * s[axis] + start) * inner, len * inner,
                out.data() + o * len * inner);
  auto an = a.node();
  int extent = s[axis];
  return make_op<S>("slice", std::move(out_shape), std::move(out), {a},
                    [an, outer, inner, extent, start, len](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(an.get());
                      for (long long o = 0; o < outer; ++o) {
                        S* dst = buf.data() + (o * extent + start) * inner;
                        const S* gsrc = g + o * len * inner;
                        for (long long i = 0; i < len * inner; ++i) dst[i] += gsrc[i];
                      }
                    });
}

template <class S>
TensorT<S> concat(int axis, const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& first = parts[0].shape();
  int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw DimensionError("concat: bad axis");
  int total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank)
      throw DimensionError("concat: rank mismatch " + shape_str(first) + " vs " +
                           shape_str(p.shape()));
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.shape()[i] != first[i])
        throw DimensionError("concat: shapes " + shape_str(first) + " and " +
                             shape_str(p.shape()) + " differ off-axis");
    total_axis += p.shape()[axis];
  }
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (int i = axis + 1; i < rank; ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  std::vector<S> out(static_cast<size_t>(outer * total_axis * inner));
  long long at = 0;
  for (const auto& p : parts) {
    long long ext = p.shape()[axis];
    for (long long o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * ext * inner, ext * inner,
                  out.data() + (o * total_axis + at) * inner);
    at += ext;
  }
  std::vector<std::shared_ptr<NodeT<S>>> nodes;
  std::vector<long long> extents;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    extents.push_back(p.shape()[axis]);
  }
  return make_op<S>("concat", std::move(out_shape), std::move(out), parts,
                    [nodes, extents, outer, inner, total_axis](const S* g, GradientTapeT<S>& t) {
                      long long at = 0;
                      for (size_t k = 0; k < nodes.size(); ++k) {
                        long long ext = extents[k];
                        if (nodes[k]->grad_enabled) {
                          auto& buf = t.buffer(nodes[k].get());
                          for (long long o = 0; o < outer; ++o) {
                            const S* gsrc = g + (o * total_axis + at) * inner;
                            S* dst = buf.data() + o * ext * inner;
                            for (long long i = 0; i < ext * inner; ++i) dst[i] += gsrc[i];
                          }
                        }
                        at += ext;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
  S total = 0;
  for (S v : a.data()) total += v;
  auto an = a.node();
  size_t n = static_cast<size_t>(a.numel());
  return make_op<S>("sum", {}, {total}, {a},
                    [an, n](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> ga(n, g[0]);
                      t.accumulate(an, ga.data(), n);
                    });
}

template <class S>
TensorT<S> mean(const TensorT<S>& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  S total = 0;
  for (S v : a.data()) total += v;
  size_t n = static_cast<size_t>(a.numel());
  S m = total / static_cast<S>(n);
  auto an = a.node();
  return make_op<S>("mean", {}, {m}, {a},
                    [an, n](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> ga(n, g[0] / static_cast<S>(n));
                      t.accumulate(an, ga.data(), n);
                    });
}

template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mse", a, b);
  size_t n = static_cast<size_t>(a.numel());
  S total = 0;
  for (size_t i = 0; i < n; ++i) {
    S d = a.data()[i] - b.data()[i];
    total += d * d;
  }
  S m = total / static_cast<S>(n);
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("mse", {}, {m}, {a, b},
                    [an, bn, n](const S* g, GradientTapeT<S>& t) {
                      S c = S(2) * g[0] / static_cast<S>(n);
                      std::vector<S> d(n);
                      for (size_t i = 0; i < n; ++i) d[i] = c * (an->value[i] - bn->value[i]);
                      if (an->grad_enabled) t.accumulate(an, d.data(), n);
                      if (bn->grad_enabled) {
                        for (auto& v : d) v = -v;
                        t.accumulate(bn, d.data(), n);
                      }
                    });
}

template <class S>
TensorT<S> l1(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("l1", a, b);
  size_t n = static_cast<size_t>(a.numel());
  S total = 0;
  for (size_t i = 0; i < n; ++i) total += std::abs(a.data()[i] - b.data()[i]);
  S m = total / static_cast<S>(n);
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("l1", {}, {m}, {a, b},
                    [an, bn, n](const S* g, GradientTapeT<S>& t) {
                      S c = g[0] / static_cast<S>(n);
                      std::vector<S> d(n);
                      for (size_t i = 0; i < n; ++i) {
                        S diff = an->value[i] - bn->value[i];
                        d[i] = diff > 0 ? c : (diff < 0 ? -c : S(0));
                      }
                      if (an->grad_enabled) t.accumulate(an, d.data(), n);
                      if (bn->grad_enabled) {
                        for (auto& v : d) v = -v;
                        t.accumulate(bn, d.data(), n);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not conform");
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<size_t>(m) * n);
  {
    ConstMatMap<S> ma(a.data().data(), m, k), mb(b.data().data(), k, n);
    MatMap<S> mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("matmul", {m, n}, std::move(out), {a, b},
                    [an, bn, m, k, n](const S* g, GradientTapeT<S>& t) {
                      ConstMatMap<S> mg(g, m, n);
                      if (an->grad_enabled) {
                        auto& buf = t.buffer(an.get());
                        MatMap<S> da(buf.data(), m, k);
                        ConstMatMap<S> mb(bn->value.data(), k, n);
                        da.noalias() += mg * mb.transpose();
                      }
                      if (bn->grad_enabled) {
                        auto& buf = t.buffer(bn.get());
                        MatMap<S> db(buf.data(), k, n);
                        ConstMatMap<S> ma(an->value.data(), m, k);
                        db.noalias() += ma.transpose() * mg;
                      }
                    });
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: need rank 2, got " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  std::vector<S> out(static_cast<size_t>(m) * n);
  ConstMatMap<S> ma(a.data().data(), m, n);
  MatMap<S>(out.data(), n, m) = ma.transpose();
  auto an = a.node();
  return make_op<S>("transpose2d", {n, m}, std::move(out), {a},
                    [an, m, n](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(an.get());
                      MatMap<S> da(buf.data(), m, n);
                      ConstMatMap<S> mg(g, n, m);
                      da.noalias() += mg.transpose();
                    });
}

// Row lookup with scatter-add backward; shared by token embeddings and
// codebook selection.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be 2-D");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside [0," +
                       std::to_string(v) + ")");
  std::vector<S> out(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d, out.data() + i * d);
  auto tn = table.node();
  auto ids_copy = ids;
  int rows = static_cast<int>(ids.size());
  return make_op<S>("gather_rows", {rows, d}, std::move(out), {table},
                    [tn, ids_copy, d](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(tn.get());
                      for (size_t i = 0; i < ids_copy.size(); ++i) {
                        S* dst = buf.data() + static_cast<size_t>(ids_copy[i]) * d;
                        const S* src = g + i * d;
                        for (int j = 0; j < d; ++j) dst[j] += src[j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Row-wise softmax where row i may only see columns j <= i + visible_offset.
// With visible_offset = rows of an already-cached prefix this implements
// causal attention for incremental decode; pass offset >= cols for a full
// (bidirectional) softmax. Masked columns are exactly zero and receive no
// gradient, and the max-subtraction only scans visible columns so outputs at
// earlier rows cannot depend on later inputs even in the last bit.
template <class S>
TensorT<S> row_softmax_masked(const TensorT<S>& scores, long long visible_offset) {
  if (scores.rank() != 2) throw DimensionError("row_softmax: need rank 2");
  int rows = scores.dim(0), cols = scores.dim(1);
  std::vector<S> out(static_cast<size_t>(rows) * cols, S(0));
  for (int i = 0; i < rows; ++i) {
    long long vis = std::min<long long>(cols, i + 1 + visible_offset);
    if (vis <= 0) throw ContractError("row_softmax: row with no visible columns");
    const S* row = scores.data().data() + static_cast<size_t>(i) * cols;
    S mx = row[0];
    for (long long j = 1; j < vis; ++j) mx = std::max(mx, row[j]);
    S denom = 0;
    S* orow = out.data() + static_cast<size_t>(i) * cols;
    for (long long j = 0; j < vis; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (long long j = 0; j < vis; ++j) orow[j] /= denom;
  }
  auto sn = scores.node();
  auto keep = out;  // probabilities reused in backward
  return make_op<S>("row_softmax", scores.shape(), std::move(out), {scores},
                    [sn, keep, rows, cols, visible_offset](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> ds(static_cast<size_t>(rows) * cols, S(0));
                      for (int i = 0; i < rows; ++i) {
                        long long vis = std::min<long long>(cols, i + 1 + visible_offset);
                        const S* y = keep.data() + static_cast<size_t>(i) * cols;
                        const S* gi = g + static_cast<size_t>(i) * cols;
                        S dot = 0;
                        for (long long j = 0; j < vis; ++j) dot += gi[j] * y[j];
                        S* di = ds.data() + static_cast<size_t>(i) * cols;
                        for (long long j = 0; j < vis; ++j) di[j] = y[j] * (gi[j] - dot);
                      }
                      t.accumulate(sn, ds.data(), ds.size());
                    });
}

template <class S>
TensorT<S> row_softmax_full(const TensorT<S>& scores) {
  return row_softmax_masked(scores, scores.dim(1));
}

// Weighted mean of -log softmax(logits)[t, target_t] over positions with
// positive weight; stabilized by max-subtraction. All weights zero is defined
// as zero loss with zero gradient.
template <class S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                                 const std::vector<S>& weights) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be 2-D");
  int t_len = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int>(targets.size()) != t_len || static_cast<int>(weights.size()) != t_len)
    throw DimensionError("cross_entropy: targets/weights length " +
                         std::to_string(targets.size()) + "/" + std::to_string(weights.size()) +
                         " vs positions " + std::to_string(t_len));
  for (int i = 0; i < t_len; ++i) {
    if (targets[i] < 0 || targets[i] >= vocab)
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," +
                       std::to_string(vocab) + ")");
    if (weights[i] < 0) throw ContractError("cross_entropy: negative weight");
  }
  S wsum = 0;
  for (S w : weights) wsum += w;
  std::vector<S> probs;  // filled only for weighted rows
  S loss = 0;
  if (wsum > 0) {
    probs.assign(static_cast<size_t>(t_len) * vocab, S(0));
    for (int i = 0; i < t_len; ++i) {
      if (weights[i] == 0) continue;
      const S* row = logits.data().data() + static_cast<size_t>(i) * vocab;
      S mx = row[0];
      for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      S denom = 0;
      S* prow = probs.data() + static_cast<size_t>(i) * vocab;
      for (int j = 0; j < vocab; ++j) {
        prow[j] = std::exp(row[j] - mx);
        denom += prow[j];
      }
      for (int j = 0; j < vocab; ++j) prow[j] /= denom;
      loss += weights[i] * -std::log(std::max(prow[targets[i]], std::numeric_limits<S>::min()));
    }
    loss /= wsum;
  }
  auto ln = logits.node();
  auto tg = targets;
  auto ws = weights;
  return make_op<S>("cross_entropy", {}, {loss}, {logits},
                    [ln, tg, ws, wsum, probs, t_len, vocab](const S* g, GradientTapeT<S>& t) {
                      if (wsum <= 0) return;
                      std::vector<S> dl(static_cast<size_t>(t_len) * vocab, S(0));
                      for (int i = 0; i < t_len; ++i) {
                        if (ws[i] == 0) continue;
                        S c = g[0] * ws[i] / wsum;
                        const S* prow = probs.data() + static_cast<size_t>(i) * vocab;
                        S* drow = dl.data() + static_cast<size_t>(i) * vocab;
                        for (int j = 0; j < vocab; ++j) drow[j] = c * prow[j];
                        drow[tg[i]] -= c;
                      }
                      t.accumulate(ln, dl.data(), dl.size());
                    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Row-wise RMS normalization with a learned gain: y = x / rms(x) * gain.
template <class S>
TensorT<S> rms_norm(const TensorT<S>& x, const TensorT<S>& gain, S eps = S(1e-5)) {
  if (x.rank() != 2 || gain.rank() != 1 || gain.dim(0) != x.dim(1))
    throw DimensionError("rms_norm: shapes " + shape_str(x.shape()) + " and " +
                         shape_str(gain.shape()) + " do not conform");
  int rows = x.dim(0), d = x.dim(1);
  std::vector<S> out(static_cast<size_t>(rows) * d);
  std::vector<S> inv_rms(rows);
  for (int i = 0; i < rows; ++i) {
    const S* row = x.data().data() + static_cast<size_t>(i) * d;
    S ss = 0;
    for (int j = 0; j < d; ++j) ss += row[j] * row[j];
    S r = S(1) / std::sqrt(ss / static_cast<S>(d) + eps);
    inv_rms[i] = r;
    S* orow = out.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = row[j] * r * gain.data()[j];
  }
  auto xn = x.node();
  auto gn = gain.node();
  return make_op<S>(
      "rms_norm", x.shape(), std::move(out), {x, gain},
      [xn, gn, inv_rms, rows, d, eps](const S* g, GradientTapeT<S>& t) {
        std::vector<S> dx(static_cast<size_t>(rows) * d, S(0));
        std::vector<S> dgain(d, S(0));
        for (int i = 0; i < rows; ++i) {
          const S* row = xn->value.data() + static_cast<size_t>(i) * d;
          const S* gi = g + static_cast<size_t>(i) * d;
          S r = inv_rms[i];
          S dot = 0;  // sum_j g_j * gain_j * x_j
          for (int j = 0; j < d; ++j) dot += gi[j] * gn->value[j] * row[j];
          S* dxi = dx.data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            dxi[j] = gi[j] * gn->value[j] * r - row[j] * dot * r * r * r / static_cast<S>(d);
            dgain[j] += gi[j] * row[j] * r;
          }
        }
        if (xn->grad_enabled) t.accumulate(xn, dx.data(), dx.size());
        if (gn->grad_enabled) t.accumulate(gn, dgain.data(), dgain.size());
      });
}

// ---------------------------------------------------------------------------
// Rotary position application
// ---------------------------------------------------------------------------

// Rotates consecutive pairs inside each head by pos * base^(-2k/head_dim).
// Norm-preserving; the backward applies the inverse rotation.
template <class S>
TensorT<S> rotary(const TensorT<S>& x, const std::vector<int>& positions, int heads, S base) {
  if (x.rank() != 2) throw DimensionError("rotary: need [T x width]");
  int t_len = x.dim(0), width = x.dim(1);
  if (static_cast<int>(positions.size()) != t_len)
    throw DimensionError("rotary: positions length mismatch");
  if (width % heads != 0) throw ConfigError("rotary: width not divisible by heads");
  int hd = width / heads;
  if (hd % 2 != 0) throw ConfigError("rotary: head width must be even, got " + std::to_string(hd));
  std::vector<S> out(x.data());
  auto rotate = [&](std::vector<S>& buf, S sign) {
    for (int i = 0; i < t_len; ++i) {
      S* row = buf.data() + static_cast<size_t>(i) * width;
      for (int h = 0; h < heads; ++h) {
        S* hseg = row + h * hd;
        for (int k = 0; k < hd / 2; ++k) {
          S theta = sign * static_cast<S>(positions[i]) *
                    std::pow(base, -S(2 * k) / static_cast<S>(hd));
          S c = std::cos(theta), s = std::sin(theta);
          S a = hseg[2 * k], b = hseg[2 * k + 1];
          hseg[2 * k] = a * c - b * s;
          hseg[2 * k + 1] = a * s + b * c;
        }
      }
    }
  };
  rotate(out, S(1));
  auto xn = x.node();
  auto pos = positions;
  return make_op<S>("rotary", x.shape(), std::move(out), {x},
                    [xn, pos, heads, base, t_len, width, hd](const S* g, GradientTapeT<S>& t) {
                      std::vector<S> dx(g, g + static_cast<size_t>(t_len) * width);
                      for (int i = 0; i < t_len; ++i) {
                        S* row = dx.data() + static_cast<size_t>(i) * width;
                        for (int h = 0; h < heads; ++h) {
                          S* hseg = row + h * hd;
                          for (int k = 0; k < hd / 2; ++k) {
                            S theta = -static_cast<S>(pos[i]) *
                                      std::pow(base, -S(2 * k) / static_cast<S>(hd));
                            S c = std::cos(theta), s = std::sin(theta);
                            S a = hseg[2 * k], b = hseg[2 * k + 1];
                            hseg[2 * k] = a * c - b * s;
                            hseg[2 * k + 1] = a * s + b * c;
                          }
                        }
                      }
                      t.accumulate(xn, dx.data(), dx.size());
                    });
}

// ---------------------------------------------------------------------------
// Convolution and resampling (images are [h x w x c], row-major)
// ---------------------------------------------------------------------------

namespace detail {

// im2col for a square odd kernel with zero padding k/2.
template <class S>
void im2col(const S* x, int h, int w, int c, int k, int stride, int oh, int ow,
            std::vector<S>& col) {
  int pad = k / 2;
  col.assign(static_cast<size_t>(oh) * ow * k * k * c, S(0));
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      S* dst = col.data() + (static_cast<size_t>(oy) * ow + ox) * k * k * c;
      for (int ky = 0; ky < k; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          std::copy_n(x + (static_cast<size_t>(iy) * w + ix) * c, c,
                      dst + (static_cast<size_t>(ky) * k + kx) * c);
        }
      }
    }
  }
}

template <class S>
void col2im(const S* col, int h, int w, int c, int k, int stride, int oh, int ow, S* dx) {
  int pad = k / 2;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const S* src = col + (static_cast<size_t>(oy) * ow + ox) * k * k * c;
      for (int ky = 0; ky < k; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          S* dst = dx + (static_cast<size_t>(iy) * w + ix) * c;
          const S* s = src + (static_cast<size_t>(ky) * k + kx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += s[ch];
        }
      }
    }
  }
}

}  // namespace detail

// kernel shape [k x k x cin x cout]; stride 1 preserves spatial extent, stride
// 2 halves it (even inputs only).
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& kernel, int stride) {
  if (x.rank() != 3) throw DimensionError("conv2d: input must be [h x w x c]");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1))
    throw DimensionError("conv2d: kernel must be square [k x k x cin x cout]");
  int k = kernel.dim(0);
  if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (kernel.dim(2) != c)
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(kernel.shape()));
  if (stride == 2 && (h % 2 != 0 || w % 2 != 0))
    throw DimensionError("conv2d: stride 2 requires even extents, got " + shape_str(x.shape()));
  int oh = h / stride, ow = w / stride, co = kernel.dim(3);
  std::vector<S> col;
  detail::im2col(x.data().data(), h, w, c, k, stride, oh, ow, col);
  std::vector<S> out(static_cast<size_t>(oh) * ow * co);
  {
    ConstMatMap<S> mc(col.data(), oh * ow, k * k * c);
    ConstMatMap<S> mk(kernel.data().data(), k * k * c, co);
    MatMap<S>(out.data(), oh * ow, co).noalias() = mc * mk;
  }
  auto xn = x.node();
  auto kn = kernel.node();
  return make_op<S>(
      "conv2d", {oh, ow, co}, std::move(out), {x, kernel},
      [xn, kn, h, w, c, k, stride, oh, ow, co](const S* g, GradientTapeT<S>& t) {
        ConstMatMap<S> mg(g, oh * ow, co);
        if (kn->grad_enabled) {
          std::vector<S> col;
          detail::im2col(xn->value.data(), h, w, c, k, stride, oh, ow, col);
          auto& buf = t.buffer(kn.get());
          MatMap<S> dk(buf.data(), k * k * c, co);
          ConstMatMap<S> mc(col.data(), oh * ow, k * k * c);
          dk.noalias() += mc.transpose() * mg;
        }
        if (xn->grad_enabled) {
          std::vector<S> dcol(static_cast<size_t>(oh) * ow * k * k * c);
          ConstMatMap<S> mk(kn->value.data(), k * k * c, co);
          MatMap<S>(dcol.data(), oh * ow, k * k * c).noalias() = mg * mk.transpose();
          auto& buf = t.buffer(xn.get());
          detail::col2im(dcol.data(), h, w, c, k, stride, oh, ow, buf.data());
        }
      });
}

template <class S>
TensorT<S> bias_channels(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(2))
    throw DimensionError("bias_channels: " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  int c = x.dim(2);
  long long pixels = static_cast<long long>(x.dim(0)) * x.dim(1);
  std::vector<S> out(x.data());
  for (long long p = 0; p < pixels; ++p)
    for (int ch = 0; ch < c; ++ch) out[p * c + ch] += bias.data()[ch];
  auto xn = x.node();
  auto bn = bias.node();
  return make_op<S>("bias_channels", x.shape(), std::move(out), {x, bias},
                    [xn, bn, pixels, c](const S* g, GradientTapeT<S>& t) {
                      if (xn->grad_enabled) t.accumulate(xn, g, static_cast<size_t>(pixels * c));
                      if (bn->grad_enabled) {
                        std::vector<S> db(c, S(0));
                        for (long long p = 0; p < pixels; ++p)
                          for (int ch = 0; ch < c; ++ch) db[ch] += g[p * c + ch];
                        t.accumulate(bn, db.data(), db.size());
                      }
                    });
}

template <class S>
TensorT<S> upsample_nearest(const TensorT<S>& x, int factor) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest: input must be [h x w x c]");
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int oh = h * factor, ow = w * factor;
  std::vector<S> out(static_cast<size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx)
      std::copy_n(x.data().data() + (static_cast<size_t>(y / factor) * w + xx / factor) * c, c,
                  out.data() + (static_cast<size_t>(y) * ow + xx) * c);
  auto xn = x.node();
  return make_op<S>("upsample_nearest", {oh, ow, c}, std::move(out), {x},
                    [xn, h, w, c, factor, oh, ow](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(xn.get());
                      for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx) {
                          S* dst = buf.data() + (static_cast<size_t>(y / factor) * w + xx / factor) * c;
                          const S* src = g + (static_cast<size_t>(y) * ow + xx) * c;
                          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                        }
                    });
}

// Bilinear resize with half-pixel centers and edge clamping; preserves
// constants and is the identity when extents already match.
template <class S>
TensorT<S> bilinear_resize(const TensorT<S>& x, int out_h, int out_w) {
  if (x.rank() != 3) throw DimensionError("bilinear_resize: input must be [h x w x c]");
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: bad target size");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  struct Axis {
    int i0, i1;
    S w1;  // weight of i1; i0 gets (1 - w1)
  };
  auto make_axis = [](int in, int out) {
    std::vector<Axis> a(out);
    for (int i = 0; i < out; ++i) {
      double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
      double lo = std::floor(src);
      int i0 = std::clamp(static_cast<int>(lo), 0, in - 1);
      int i1 = std::clamp(i0 + 1, 0, in - 1);
      double w1 = std::clamp(src - lo, 0.0, 1.0);
      if (src < 0) w1 = 0;  // clamp to first sample
      a[i] = {i0, i1, static_cast<S>(w1)};
    }
    return a;
  };
  auto ay = make_axis(h, out_h);
  auto ax = make_axis(w, out_w);
  std::vector<S> out(static_cast<size_t>(out_h) * out_w * c);
  const S* src = x.data().data();
  for (int y = 0; y < out_h; ++y)
    for (int xx = 0; xx < out_w; ++xx) {
      const auto& ry = ay[y];
      const auto& rx = ax[xx];
      S w00 = (S(1) - ry.w1) * (S(1) - rx.w1), w01 = (S(1) - ry.w1) * rx.w1;
      S w10 = ry.w1 * (S(1) - rx.w1), w11 = ry.w1 * rx.w1;
      S* dst = out.data() + (static_cast<size_t>(y) * out_w + xx) * c;
      for (int ch = 0; ch < c; ++ch)
        dst[ch] = w00 * src[(static_cast<size_t>(ry.i0) * w + rx.i0) * c + ch] +
                  w01 * src[(static_cast<size_t>(ry.i0) * w + rx.i1) * c + ch] +
                  w10 * src[(static_cast<size_t>(ry.i1) * w + rx.i0) * c + ch] +
                  w11 * src[(static_cast<size_t>(ry.i1) * w + rx.i1) * c + ch];
    }
  auto xn = x.node();
  return make_op<S>("bilinear_resize", {out_h, out_w, c}, std::move(out), {x},
                    [xn, ay, ax, w, c, out_h, out_w](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(xn.get());
                      for (int y = 0; y < out_h; ++y)
                        for (int xx = 0; xx < out_w; ++xx) {
                          const auto& ry = ay[y];
                          const auto& rx = ax[xx];
                          S w00 = (S(1) - ry.w1) * (S(1) - rx.w1), w01 = (S(1) - ry.w1) * rx.w1;
                          S w10 = ry.w1 * (S(1) - rx.w1), w11 = ry.w1 * rx.w1;
                          const S* src = g + (static_cast<size_t>(y) * out_w + xx) * c;
                          for (int ch = 0; ch < c; ++ch) {
                            buf[(static_cast<size_t>(ry.i0) * w + rx.i0) * c + ch] += w00 * src[ch];
                            buf[(static_cast<size_t>(ry.i0) * w + rx.i1) * c + ch] += w01 * src[ch];
                            buf[(static_cast<size_t>(ry.i1) * w + rx.i0) * c + ch] += w10 * src[ch];
                            buf[(static_cast<size_t>(ry.i1) * w + rx.i1) * c + ch] += w11 * src[ch];
                          }
                        }
                    });
}

// [h x w x c] -> [(h/p * w/p) x (p*p*c)] in raster order; pure permutation.
template <class S>
TensorT<S> patchify(const TensorT<S>& x, int p) {
  if (x.rank() != 3) throw DimensionError("patchify: input must be [h x w x c]");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (p < 1 || h % p != 0 || w % p != 0)
    throw DimensionError("patchify: extents " + shape_str(x.shape()) + " not divisible by patch " +
                         std::to_string(p));
  int gh = h / p, gw = w / p;
  std::vector<S> out(static_cast<size_t>(x.numel()));
  const S* src = x.data().data();
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      S* dst = out.data() + (static_cast<size_t>(gy) * gw + gx) * p * p * c;
      for (int py = 0; py < p; ++py)
        std::copy_n(src + ((static_cast<size_t>(gy) * p + py) * w + static_cast<size_t>(gx) * p) * c,
                    static_cast<size_t>(p) * c, dst + static_cast<size_t>(py) * p * c);
    }
  auto xn = x.node();
  return make_op<S>("patchify", {gh * gw, p * p * c}, std::move(out), {x},
                    [xn, gh, gw, p, c, w](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(xn.get());
                      for (int gy = 0; gy < gh; ++gy)
                        for (int gx = 0; gx < gw; ++gx) {
                          const S* src = g + (static_cast<size_t>(gy) * gw + gx) * p * p * c;
                          for (int py = 0; py < p; ++py) {
                            S* dst = buf.data() +
                                     ((static_cast<size_t>(gy) * p + py) * w +
                                      static_cast<size_t>(gx) * p) * c;
                            const S* s = src + static_cast<size_t>(py) * p * c;
                            for (int i = 0; i < p * c; ++i) dst[i] += s[i];
                          }
                        }
                    });
}

template <class S>
TensorT<S> unpatchify(const TensorT<S>& tokens, int h, int w, int c, int p) {
  if (tokens.rank() != 2) throw DimensionError("unpatchify: tokens must be 2-D");
  int gh = h / p, gw = w / p;
  if (h % p != 0 || w % p != 0 || tokens.dim(0) != gh * gw || tokens.dim(1) != p * p * c)
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) +
                         " do not tile [" + std::to_string(h) + "x" + std::to_string(w) + "x" +
                         std::to_string(c) + "] with patch " + std::to_string(p));
  std::vector<S> out(static_cast<size_t>(h) * w * c);
  const S* src = tokens.data().data();
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const S* tok = src + (static_cast<size_t>(gy) * gw + gx) * p * p * c;
      for (int py = 0; py < p; ++py)
        std::copy_n(tok + static_cast<size_t>(py) * p * c, static_cast<size_t>(p) * c,
                    out.data() +
                        ((static_cast<size_t>(gy) * p + py) * w + static_cast<size_t>(gx) * p) * c);
    }
  auto tn = tokens.node();
  return make_op<S>("unpatchify", {h, w, c}, std::move(out), {tokens},
                    [tn, gh, gw, p, c, w](const S* g, GradientTapeT<S>& t) {
                      auto& buf = t.buffer(tn.get());
                      for (int gy = 0; gy < gh; ++gy)
                        for (int gx = 0; gx < gw; ++gx) {
                          S* dst = buf.data() + (static_cast<size_t>(gy) * gw + gx) * p * p * c;
                          for (int py = 0; py < p; ++py) {
                            const S* src = g + ((static_cast<size_t>(gy) * p + py) * w +
                                                static_cast<size_t>(gx) * p) * c;
                            S* d = dst + static_cast<size_t>(py) * p * c;
                            for (int i = 0; i < p * c; ++i) d[i] += src[i];
                          }
                        }
                    });
}

}  // namespace star
