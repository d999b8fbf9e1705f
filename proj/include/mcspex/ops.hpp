// Copyright (c) 2026 The mcspex Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MCSPEX_OPS_HPP_
#define MCSPEX_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "mcspex/graph.hpp"
#include "mcspex/tensor.hpp"

namespace mcspex {

namespace detail {

template <typename T>
void check_same_graph(const Value<T>& a, const Value<T>& b) {
  if (a.graph != b.graph) throw UsageError("values from different graphs");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(Value<T> a, Value<T> b) {
  detail::check_same_graph(a, b);
  Graph<T>& g = *a.graph;
  const Tensor<T>& ta = a.tensor();
  const Tensor<T>& tb = b.tensor();
  if (!ta.same_shape(tb)) {
    throw DimensionError("add: shape mismatch " + shape_str(ta.shape()) +
                         " vs " + shape_str(tb.shape()));
  }
  Tensor<T> out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  Value<T> v = g.make("add", std::move(out), {a.id, b.id});
  g.set_backward(v, [gp = &g, oid = v.id, aid = a.id, bid = b.id]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* da = gp->grad_target(aid)) detail::axpy_into(*da, d);
    if (Tensor<T>* db = gp->grad_target(bid)) detail::axpy_into(*db, d);
  });
  return v;
}

template <typename T>
Value<T> hadamard(Value<T> a, Value<T> b) {
  detail::check_same_graph(a, b);
  Graph<T>& g = *a.graph;
  const Tensor<T>& ta = a.tensor();
  const Tensor<T>& tb = b.tensor();
  if (!ta.same_shape(tb)) {
    throw DimensionError("hadamard: shape mismatch " + shape_str(ta.shape()) +
                         " vs " + shape_str(tb.shape()));
  }
  Tensor<T> out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  Value<T> v = g.make("hadamard", std::move(out), {a.id, b.id});
  g.set_backward(v, [gp = &g, oid = v.id, aid = a.id, bid = b.id]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& va = gp->node(aid).value;
    const Tensor<T>& vb = gp->node(bid).value;
    if (Tensor<T>* da = gp->grad_target(aid)) {
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * vb[i];
    }
    if (Tensor<T>* db = gp->grad_target(bid)) {
      for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] += d[i] * va[i];
    }
  });
  return v;
}

// Gradient at exactly 0 is defined as 0.
template <typename T>
Value<T> relu(Value<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  Tensor<T> out(tx.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = tx[i] > T(0) ? tx[i] : T(0);
  Value<T> v = g.make("relu", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < d.size(); ++i)
        if (vx[i] > T(0)) (*dx)[i] += d[i];
    }
  });
  return v;
}

template <typename T>
Value<T> elu(Value<T> x, double alpha = 1.0) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  Tensor<T> out(tx.shape());
  const T a = static_cast<T>(alpha);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = tx[i] >= T(0) ? tx[i] : a * (std::exp(tx[i]) - T(1));
  }
  Value<T> v = g.make("elu", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, a]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vo = gp->node(oid).value;
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < d.size(); ++i) {
        // d/dx elu = 1 for x >= 0, alpha*exp(x) = out + alpha otherwise
        (*dx)[i] += d[i] * (vx[i] >= T(0) ? T(1) : vo[i] + a);
      }
    }
  });
  return v;
}

// Per-channel PReLU over a [C x T] map; `slope` has shape [C].
template <typename T>
Value<T> prelu(Value<T> x, Value<T> slope) {
  detail::check_same_graph(x, slope);
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  const Tensor<T>& ts = slope.tensor();
  if (tx.rank() != 2 || ts.rank() != 1 || ts.dim(0) != tx.dim(0)) {
    throw DimensionError("prelu: want x [CxT], slope [C], got " +
                         shape_str(tx.shape()) + ", " + shape_str(ts.shape()));
  }
  const std::size_t C = tx.dim(0), Tn = tx.dim(1);
  Tensor<T> out(tx.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T a = ts[c];
    for (std::size_t t = 0; t < Tn; ++t) {
      const T xv = tx[c * Tn + t];
      out[c * Tn + t] = xv > T(0) ? xv : a * xv;
    }
  }
  Value<T> v = g.make("prelu", std::move(out), {x.id, slope.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, sid = slope.id, C, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vs = gp->node(sid).value;
    Tensor<T>* dx = gp->grad_target(xid);
    Tensor<T>* ds = gp->grad_target(sid);
    for (std::size_t c = 0; c < C; ++c) {
      const T a = vs[c];
      double acc = 0;
      for (std::size_t t = 0; t < Tn; ++t) {
        const std::size_t i = c * Tn + t;
        if (vx[i] > T(0)) {
          if (dx) (*dx)[i] += d[i];
        } else {
          if (dx) (*dx)[i] += d[i] * a;
          acc += static_cast<double>(d[i]) * static_cast<double>(vx[i]);
        }
      }
      if (ds) (*ds)[c] += static_cast<T>(acc);
    }
  });
  return v;
}

// ---------------------------------------------------------------------------
// Linear / pooling
// ---------------------------------------------------------------------------

template <typename T>
Value<T> linear(Value<T> x, Value<T> weight, Value<T> bias) {
  detail::check_same_graph(x, weight);
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  const Tensor<T>& tw = weight.tensor();
  const Tensor<T>& tb = bias.tensor();
  if (tx.rank() != 1 || tw.rank() != 2 || tw.dim(1) != tx.dim(0) ||
      tb.rank() != 1 || tb.dim(0) != tw.dim(0)) {
    throw DimensionError("linear: shapes " + shape_str(tx.shape()) + ", " +
                         shape_str(tw.shape()) + ", " + shape_str(tb.shape()));
  }
  const std::size_t Fo = tw.dim(0), Fi = tw.dim(1);
  Tensor<T> out({Fo});
  for (std::size_t o = 0; o < Fo; ++o) {
    double acc = tb[o];
    const T* row = tw.data() + o * Fi;
    for (std::size_t i = 0; i < Fi; ++i)
      acc += static_cast<double>(row[i]) * static_cast<double>(tx[i]);
    out[o] = static_cast<T>(acc);
  }
  Value<T> v = g.make("linear", std::move(out), {x.id, weight.id, bias.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, wid = weight.id,
                     bid = bias.id, Fo, Fi]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vw = gp->node(wid).value;
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < Fi; ++i) {
        double acc = 0;
        for (std::size_t o = 0; o < Fo; ++o)
          acc += static_cast<double>(vw[o * Fi + i]) * d[o];
        (*dx)[i] += static_cast<T>(acc);
      }
    }
    if (Tensor<T>* dw = gp->grad_target(wid)) {
      for (std::size_t o = 0; o < Fo; ++o)
        for (std::size_t i = 0; i < Fi; ++i)
          (*dw)[o * Fi + i] += d[o] * vx[i];
    }
    if (Tensor<T>* db = gp->grad_target(bid)) {
      for (std::size_t o = 0; o < Fo; ++o) (*db)[o] += d[o];
    }
  });
  return v;
}

template <typename T>
Value<T> mean_pool_time(Value<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() != 2) {
    throw DimensionError("mean_pool_time: want [CxT], got " +
                         shape_str(tx.shape()));
  }
  const std::size_t C = tx.dim(0), Tn = tx.dim(1);
  Tensor<T> out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t t = 0; t < Tn; ++t) acc += tx[c * Tn + t];
    out[c] = static_cast<T>(acc / static_cast<double>(Tn));
  }
  Value<T> v = g.make("mean_pool_time", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, C, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      const T inv = T(1) / static_cast<T>(Tn);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < Tn; ++t) (*dx)[c * Tn + t] += d[c] * inv;
    }
  });
  return v;
}

template <typename T>
Value<T> sum_all(Value<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  double acc = 0;
  for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i];
  Value<T> v = g.make("sum_all", Tensor<T>::scalar(static_cast<T>(acc)),
                      {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id]() {
    const T d = gp->grad_of(oid)[0];
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += d;
    }
  });
  return v;
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

namespace detail {

// Shared layer-norm statistics over groups of F elements with stride
// `stride` between consecutive elements of a group. Group g starts at
// base[g]. Variance is the biased estimate (divide by F).
template <typename T>
struct LnStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

template <typename T>
LnStats<T> ln_stats(const T* x, const std::vector<std::size_t>& base,
                    std::size_t F, std::size_t stride, double eps) {
  LnStats<T> st;
  st.mean.resize(base.size());
  st.inv_std.resize(base.size());
  for (std::size_t g = 0; g < base.size(); ++g) {
    const T* p = x + base[g];
    double mu = 0;
    for (std::size_t i = 0; i < F; ++i) mu += p[i * stride];
    mu /= static_cast<double>(F);
    double var = 0;
    for (std::size_t i = 0; i < F; ++i) {
      const double d = static_cast<double>(p[i * stride]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(F);
    st.mean[g] = mu;
    st.inv_std[g] = 1.0 / std::sqrt(var + eps);
  }
  return st;
}

// Bases of the normalization groups for a [B x F x T] view where the
// normalized axis is the middle one (stride T between elements).
inline std::vector<std::size_t> mid_axis_bases(std::size_t B, std::size_t F,
                                               std::size_t Tn) {
  std::vector<std::size_t> base(B * Tn);
  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tn; ++t) base[k++] = b * F * Tn + t;
  return base;
}

template <typename T>
Value<T> layer_norm_impl(const char* opname, Value<T> x, Value<T> gain,
                         Value<T> bias, double eps,
                         std::vector<std::size_t> base, std::size_t F,
                         std::size_t stride) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  const Tensor<T>& tg = gain.tensor();
  const Tensor<T>& tb = bias.tensor();
  if (tg.rank() != 1 || tg.dim(0) != F || !tb.same_shape(tg)) {
    throw DimensionError(cat(opname, ": affine shape ", shape_str(tg.shape()),
                             " does not match feature extent ", F));
  }
  if (eps <= 0) throw UsageError(cat(opname, ": eps must be positive"));
  auto st = ln_stats<T>(tx.data(), base, F, stride, eps);
  Tensor<T> out(tx.shape());
  for (std::size_t gi = 0; gi < base.size(); ++gi) {
    const T* p = tx.data() + base[gi];
    T* q = out.data() + base[gi];
    const double mu = st.mean[gi], is = st.inv_std[gi];
    for (std::size_t i = 0; i < F; ++i) {
      const double y = (static_cast<double>(p[i * stride]) - mu) * is;
      q[i * stride] = static_cast<T>(static_cast<double>(tg[i]) * y +
                                     static_cast<double>(tb[i]));
    }
  }
  Value<T> v = g.make(opname, std::move(out), {x.id, gain.id, bias.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, gid = gain.id,
                     bid = bias.id, st = std::move(st), base = std::move(base),
                     F, stride]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vg = gp->node(gid).value;
    Tensor<T>* dx = gp->grad_target(xid);
    Tensor<T>* dg = gp->grad_target(gid);
    Tensor<T>* db = gp->grad_target(bid);
    const double invF = 1.0 / static_cast<double>(F);
    for (std::size_t gi = 0; gi < base.size(); ++gi) {
      const std::size_t off = base[gi];
      const double mu = st.mean[gi], is = st.inv_std[gi];
      double sum_gd = 0, sum_gdy = 0;
      for (std::size_t i = 0; i < F; ++i) {
        const double y = (static_cast<double>(vx[off + i * stride]) - mu) * is;
        const double gd =
            static_cast<double>(vg[i]) * static_cast<double>(d[off + i * stride]);
        sum_gd += gd;
        sum_gdy += gd * y;
        if (dg) (*dg)[i] += static_cast<T>(d[off + i * stride] * y);
        if (db) (*db)[i] += d[off + i * stride];
      }
      if (dx) {
        const double m_gd = sum_gd * invF, m_gdy = sum_gdy * invF;
        for (std::size_t i = 0; i < F; ++i) {
          const double y =
              (static_cast<double>(vx[off + i * stride]) - mu) * is;
          const double gd = static_cast<double>(vg[i]) *
                            static_cast<double>(d[off + i * stride]);
          (*dx)[off + i * stride] +=
              static_cast<T>((gd - m_gd - y * m_gdy) * is);
        }
      }
    }
  });
  return v;
}

}  // namespace detail

// Layer normalization over the last axis of x; gain/bias have extent F of
// the last axis.
template <typename T>
Value<T> layer_norm(Value<T> x, Value<T> gain, Value<T> bias,
                    double eps = 1e-8) {
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() < 1) throw DimensionError("layer_norm: empty tensor");
  const std::size_t F = tx.dim(tx.rank() - 1);
  const std::size_t groups = tx.size() / F;
  std::vector<std::size_t> base(groups);
  for (std::size_t g = 0; g < groups; ++g) base[g] = g * F;
  return detail::layer_norm_impl("layer_norm", x, gain, bias, eps,
                                 std::move(base), F, 1);
}

// Per-frame layer normalization over the channel axis: [C x T] normalizes
// each time column over C; [S x C x T] normalizes over C per (s, t).
template <typename T>
Value<T> layer_norm_channels(Value<T> x, Value<T> gain, Value<T> bias,
                             double eps = 1e-8) {
  const Tensor<T>& tx = x.tensor();
  std::size_t B, F, Tn;
  if (tx.rank() == 2) {
    B = 1;
    F = tx.dim(0);
    Tn = tx.dim(1);
  } else if (tx.rank() == 3) {
    B = tx.dim(0);
    F = tx.dim(1);
    Tn = tx.dim(2);
  } else {
    throw DimensionError("layer_norm_channels: want rank 2 or 3, got " +
                         shape_str(tx.shape()));
  }
  return detail::layer_norm_impl("layer_norm_channels", x, gain, bias, eps,
                                 detail::mid_axis_bases(B, F, Tn), F, Tn);
}

// Global layer norm: statistics over both C and T jointly, per-channel
// affine.
template <typename T>
Value<T> global_layer_norm(Value<T> x, Value<T> gain, Value<T> bias,
                           double eps = 1e-8) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  const Tensor<T>& tg = gain.tensor();
  if (tx.rank() != 2) {
    throw DimensionError("global_layer_norm: want [CxT], got " +
                         shape_str(tx.shape()));
  }
  const std::size_t C = tx.dim(0), Tn = tx.dim(1), n = C * Tn;
  if (tg.rank() != 1 || tg.dim(0) != C) {
    throw DimensionError("global_layer_norm: affine shape mismatch");
  }
  double mu = 0;
  for (std::size_t i = 0; i < n; ++i) mu += tx[i];
  mu /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(tx[i]) - mu;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double is = 1.0 / std::sqrt(var + eps);
  const Tensor<T>& tb = bias.tensor();
  Tensor<T> out(tx.shape());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < Tn; ++t) {
      const double y = (static_cast<double>(tx[c * Tn + t]) - mu) * is;
      out[c * Tn + t] = static_cast<T>(static_cast<double>(tg[c]) * y +
                                       static_cast<double>(tb[c]));
    }
  }
  Value<T> v =
      g.make("global_layer_norm", std::move(out), {x.id, gain.id, bias.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, gid = gain.id,
                     bid = bias.id, mu, is, C, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vg = gp->node(gid).value;
    Tensor<T>* dx = gp->grad_target(xid);
    Tensor<T>* dg = gp->grad_target(gid);
    Tensor<T>* db = gp->grad_target(bid);
    const std::size_t n = C * Tn;
    double sum_gd = 0, sum_gdy = 0;
    for (std::size_t c = 0; c < C; ++c) {
      double row_d = 0, row_dy = 0;
      for (std::size_t t = 0; t < Tn; ++t) {
        const std::size_t i = c * Tn + t;
        const double y = (static_cast<double>(vx[i]) - mu) * is;
        const double gd = static_cast<double>(vg[c]) * d[i];
        sum_gd += gd;
        sum_gdy += gd * y;
        row_d += d[i];
        row_dy += d[i] * y;
      }
      if (dg) (*dg)[c] += static_cast<T>(row_dy);
      if (db) (*db)[c] += static_cast<T>(row_d);
    }
    if (dx) {
      const double m_gd = sum_gd / n, m_gdy = sum_gdy / n;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < Tn; ++t) {
          const std::size_t i = c * Tn + t;
          const double y = (static_cast<double>(vx[i]) - mu) * is;
          const double gd = static_cast<double>(vg[c]) * d[i];
          (*dx)[i] += static_cast<T>((gd - m_gd - y * m_gdy) * is);
        }
      }
    }
  });
  return v;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> reshape(Value<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  if (shape_numel(shape) != tx.size()) {
    throw DimensionError("reshape: element count mismatch " +
                         shape_str(tx.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), tx.vec());
  Value<T> v = g.make("reshape", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < d.size(); ++i) (*dx)[i] += d[i];
    }
  });
  return v;
}

// Concatenates [Ci x T] maps along the channel axis.
template <typename T>
Value<T> concat_rows(const std::vector<Value<T>>& xs) {
  if (xs.empty()) throw UsageError("concat_rows: no inputs");
  Graph<T>& g = *xs.front().graph;
  const std::size_t Tn = xs.front().tensor().dim(1);
  std::size_t Ctot = 0;
  std::vector<int> parents;
  for (const auto& x : xs) {
    detail::check_same_graph(xs.front(), x);
    const Tensor<T>& t = x.tensor();
    if (t.rank() != 2 || t.dim(1) != Tn) {
      throw DimensionError("concat_rows: incompatible shape " +
                           shape_str(t.shape()));
    }
    Ctot += t.dim(0);
    parents.push_back(x.id);
  }
  Tensor<T> out({Ctot, Tn});
  std::size_t row = 0;
  for (const auto& x : xs) {
    const Tensor<T>& t = x.tensor();
    std::copy(t.data(), t.data() + t.size(), out.data() + row * Tn);
    row += t.dim(0);
  }
  Value<T> v = g.make("concat_rows", std::move(out), parents);
  g.set_backward(v, [gp = &g, oid = v.id, parents, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    std::size_t row = 0;
    for (int pid : parents) {
      const std::size_t rows = gp->node(pid).value.dim(0);
      if (Tensor<T>* dx = gp->grad_target(pid)) {
        const T* src = d.data() + row * Tn;
        for (std::size_t i = 0; i < rows * Tn; ++i) (*dx)[i] += src[i];
      }
      row += rows;
    }
  });
  return v;
}

// Repeats a vector [D] into a [D x T] map.
template <typename T>
Value<T> broadcast_rows(Value<T> e, std::size_t Tn) {
  Graph<T>& g = *e.graph;
  const Tensor<T>& te = e.tensor();
  if (te.rank() != 1) {
    throw DimensionError("broadcast_rows: want vector, got " +
                         shape_str(te.shape()));
  }
  const std::size_t D = te.dim(0);
  Tensor<T> out({D, Tn});
  for (std::size_t dch = 0; dch < D; ++dch)
    for (std::size_t t = 0; t < Tn; ++t) out[dch * Tn + t] = te[dch];
  Value<T> v = g.make("broadcast_rows", std::move(out), {e.id});
  g.set_backward(v, [gp = &g, oid = v.id, eid = e.id, D, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* de = gp->grad_target(eid)) {
      for (std::size_t dch = 0; dch < D; ++dch) {
        double acc = 0;
        for (std::size_t t = 0; t < Tn; ++t) acc += d[dch * Tn + t];
        (*de)[dch] += static_cast<T>(acc);
      }
    }
  });
  return v;
}

// Extracts slice i along the outer axis: [S x ...] -> [...].
template <typename T>
Value<T> slice_outer(Value<T> x, std::size_t index) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() < 2 || index >= tx.dim(0)) {
    throw DimensionError("slice_outer: bad index");
  }
  Shape sub(tx.shape().begin() + 1, tx.shape().end());
  const std::size_t block = shape_numel(sub);
  std::vector<T> data(tx.data() + index * block,
                      tx.data() + (index + 1) * block);
  Tensor<T> out(std::move(sub), std::move(data));
  Value<T> v = g.make("slice_outer", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, index, block]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      T* dst = dx->data() + index * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += d[i];
    }
  });
  return v;
}

// out[c, t] = scale[c] * x[c, t] + shift[c]
template <typename T>
Value<T> modulate_channels(Value<T> x, Value<T> scale, Value<T> shift) {
  detail::check_same_graph(x, scale);
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  const Tensor<T>& ts = scale.tensor();
  const Tensor<T>& th = shift.tensor();
  if (tx.rank() != 2 || ts.rank() != 1 || ts.dim(0) != tx.dim(0) ||
      !th.same_shape(ts)) {
    throw DimensionError("modulate_channels: shapes " + shape_str(tx.shape()) +
                         ", " + shape_str(ts.shape()) + ", " +
                         shape_str(th.shape()));
  }
  const std::size_t C = tx.dim(0), Tn = tx.dim(1);
  Tensor<T> out(tx.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < Tn; ++t)
      out[c * Tn + t] = ts[c] * tx[c * Tn + t] + th[c];
  Value<T> v =
      g.make("modulate_channels", std::move(out), {x.id, scale.id, shift.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, sid = scale.id,
                     hid = shift.id, C, Tn]() {
    const Tensor<T>& d = gp->grad_of(oid);
    const Tensor<T>& vx = gp->node(xid).value;
    const Tensor<T>& vs = gp->node(sid).value;
    Tensor<T>* dx = gp->grad_target(xid);
    Tensor<T>* ds = gp->grad_target(sid);
    Tensor<T>* dh = gp->grad_target(hid);
    for (std::size_t c = 0; c < C; ++c) {
      double acc_s = 0, acc_h = 0;
      for (std::size_t t = 0; t < Tn; ++t) {
        const std::size_t i = c * Tn + t;
        if (dx) (*dx)[i] += d[i] * vs[c];
        acc_s += static_cast<double>(d[i]) * static_cast<double>(vx[i]);
        acc_h += d[i];
      }
      if (ds) (*ds)[c] += static_cast<T>(acc_s);
      if (dh) (*dh)[c] += static_cast<T>(acc_h);
    }
  });
  return v;
}

// Trims or right-zero-pads a [T] or [1 x T] signal to exactly `len`
// samples, returned as a flat [len] vector.
template <typename T>
Value<T> fit_length(Value<T> x, std::size_t len) {
  if (len == 0) throw UsageError("fit_length: target length must be positive");
  Graph<T>& g = *x.graph;
  const Tensor<T>& tx = x.tensor();
  if (tx.rank() > 2 || (tx.rank() == 2 && tx.dim(0) != 1)) {
    throw DimensionError("fit_length: want [T] or [1xT], got " +
                         shape_str(tx.shape()));
  }
  const std::size_t n = tx.size();
  Tensor<T> out({len});
  const std::size_t keep = std::min(n, len);
  std::copy(tx.data(), tx.data() + keep, out.data());
  Value<T> v = g.make("fit_length", std::move(out), {x.id});
  g.set_backward(v, [gp = &g, oid = v.id, xid = x.id, keep]() {
    const Tensor<T>& d = gp->grad_of(oid);
    if (Tensor<T>* dx = gp->grad_target(xid)) {
      for (std::size_t i = 0; i < keep; ++i) (*dx)[i] += d[i];
    }
  });
  return v;
}

// Forward identity that blocks gradient flow.
template <typename T>
Value<T> detach(Value<T> x) {
  return x.graph->constant(x.tensor());
}

// out = sum_i coeffs[i] * scalars[i]
template <typename T>
Value<T> combine(const std::vector<Value<T>>& scalars,
                 const std::vector<double>& coeffs) {
  if (scalars.empty() || scalars.size() != coeffs.size()) {
    throw UsageError("combine: inputs and coefficients must pair up");
  }
  Graph<T>& g = *scalars.front().graph;
  double acc = 0;
  std::vector<int> parents;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    detail::check_same_graph(scalars.front(), scalars[i]);
    if (scalars[i].tensor().size() != 1) {
      throw UsageError("combine: non-scalar input");
    }
    acc += coeffs[i] * static_cast<double>(scalars[i].tensor()[0]);
    parents.push_back(scalars[i].id);
  }
  Value<T> v =
      g.make("combine", Tensor<T>::scalar(static_cast<T>(acc)), parents);
  g.set_backward(v, [gp = &g, oid = v.id, parents, coeffs]() {
    const T d = gp->grad_of(oid)[0];
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (Tensor<T>* dx = gp->grad_target(parents[i])) {
        (*dx)[0] += static_cast<T>(coeffs[i]) * d;
      }
    }
  });
  return v;
}

}  // namespace mcspex

#endif  // MCSPEX_OPS_HPP_
