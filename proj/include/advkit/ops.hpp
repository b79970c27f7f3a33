#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "advkit/autograd.hpp"
#include "advkit/parallel.hpp"
#include "advkit/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Forward/backward rules for every operation the models need. Parallel loops
// split only independent output elements; each element is reduced serially in
// a fixed order, so results do not depend on the worker count.
namespace advkit::ops {

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) shape_error(op, what);
}

// numpy-style broadcast of two shapes, right-aligned.
inline std::vector<size_t> broadcast_shape(const char* op,
                                           const std::vector<size_t>& a,
                                           const std::vector<size_t>& b) {
  const size_t r = std::max(a.size(), b.size());
  std::vector<size_t> out(r);
  for (size_t i = 0; i < r; ++i) {
    const size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_error(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast dimensions, padded to rank r.
inline std::vector<size_t> broadcast_strides(const std::vector<size_t>& shape,
                                             size_t r) {
  std::vector<size_t> strides(r, 0);
  size_t s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    strides[i + (r - shape.size())] = shape[i] == 1 ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// True when `small` equals the trailing dims of `big`, i.e. the operand tiles.
inline bool is_suffix(const std::vector<size_t>& small,
                      const std::vector<size_t>& big) {
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[big.size() - small.size() + i]) return false;
  return true;
}

// Decomposition of a broadcast operand whose strides have at most one
// nonzero entry (scalars, channel biases): big operand seen as
// outer x extent x inner with the small operand indexed by the middle axis.
struct AxisBroadcast {
  bool ok = false;
  size_t outer = 1, extent = 1, inner = 1;
};

inline AxisBroadcast single_axis_broadcast(const std::vector<size_t>& big,
                                           const std::vector<size_t>& small) {
  AxisBroadcast ab;
  const size_t r = big.size();
  if (small.size() > r) return ab;
  const auto ss = broadcast_strides(small, r);
  int axis = -1;
  for (size_t d = 0; d < r; ++d) {
    if (ss[d] == 0) continue;
    if (axis >= 0) return ab;  // more than one live axis
    if (ss[d] != 1) return ab;
    axis = static_cast<int>(d);
  }
  for (size_t d = 0; d < r; ++d) {
    if (static_cast<int>(d) < axis) ab.outer *= big[d];
    else if (static_cast<int>(d) == axis) ab.extent = big[d];
    else ab.inner *= big[d];
  }
  if (axis >= 0 && small[small.size() - (r - axis)] != big[axis]) return ab;
  ab.ok = true;
  return ab;
}

template <class T, class F>
Tensor<T> broadcast_binary(const char* op, const Tensor<T>& a,
                           const Tensor<T>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const size_t n = out.size();
#pragma omp parallel for schedule(static) num_threads(advkit::workers()) if (n > (size_t)1 << 15)
    for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  if (is_suffix(b.shape(), a.shape()) && b.size() > 0) {
    Tensor<T> out(a.shape());
    const size_t m = b.size();
    for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i % m]);
    return out;
  }
  if (is_suffix(a.shape(), b.shape()) && a.size() > 0) {
    Tensor<T> out(b.shape());
    const size_t m = a.size();
    for (size_t i = 0; i < b.size(); ++i) out[i] = f(a[i % m], b[i]);
    return out;
  }
  if (b.size() <= a.size()) {
    const AxisBroadcast ab = single_axis_broadcast(a.shape(), b.shape());
    if (ab.ok && numel(broadcast_shape(op, a.shape(), b.shape())) == a.size()) {
      Tensor<T> out(a.shape());
      const T* pa = a.data();
      T* po = out.data();
      for (size_t o = 0; o < ab.outer; ++o)
        for (size_t c = 0; c < ab.extent; ++c) {
          const T bv = b[c];
          const size_t base = (o * ab.extent + c) * ab.inner;
          for (size_t i = 0; i < ab.inner; ++i)
            po[base + i] = f(pa[base + i], bv);
        }
      return out;
    }
  } else {
    const AxisBroadcast ab = single_axis_broadcast(b.shape(), a.shape());
    if (ab.ok && numel(broadcast_shape(op, a.shape(), b.shape())) == b.size()) {
      Tensor<T> out(b.shape());
      const T* pb = b.data();
      T* po = out.data();
      for (size_t o = 0; o < ab.outer; ++o)
        for (size_t c = 0; c < ab.extent; ++c) {
          const T av = a[c];
          const size_t base = (o * ab.extent + c) * ab.inner;
          for (size_t i = 0; i < ab.inner; ++i)
            po[base + i] = f(av, pb[base + i]);
        }
      return out;
    }
  }
  const std::vector<size_t> oshape = broadcast_shape(op, a.shape(), b.shape());
  const size_t r = oshape.size();
  const auto sa = broadcast_strides(a.shape(), r);
  const auto sb = broadcast_strides(b.shape(), r);
  Tensor<T> out(oshape);
  std::vector<size_t> idx(r, 0);
  for (size_t i = 0; i < out.size(); ++i) {
    size_t oa = 0, ob = 0;
    for (size_t d = 0; d < r; ++d) {
      oa += idx[d] * sa[d];
      ob += idx[d] * sb[d];
    }
    out[i] = f(a[oa], b[ob]);
    for (size_t d = r; d-- > 0;) {
      if (++idx[d] < oshape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

// Sum g over broadcast axes so the result has `target` shape.
template <class T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const std::vector<size_t>& target) {
  if (g.shape() == target) return g;
  Tensor<T> out(target);
  if (is_suffix(target, g.shape()) && out.size() > 0) {
    const size_t m = out.size();
    for (size_t i = 0; i < g.size(); ++i) out[i % m] += g[i];
    return out;
  }
  {
    const AxisBroadcast ab = single_axis_broadcast(g.shape(), target);
    if (ab.ok && ab.extent == out.size()) {
      const T* pg = g.data();
      for (size_t o = 0; o < ab.outer; ++o)
        for (size_t c = 0; c < ab.extent; ++c) {
          const size_t base = (o * ab.extent + c) * ab.inner;
          T acc = 0;
          for (size_t i = 0; i < ab.inner; ++i) acc += pg[base + i];
          out[c] += acc;
        }
      return out;
    }
  }
  const size_t r = g.rank();
  const auto st = broadcast_strides(target, r);
  std::vector<size_t> idx(r, 0);
  const auto& gs = g.shape();
  for (size_t i = 0; i < g.size(); ++i) {
    size_t ot = 0;
    for (size_t d = 0; d < r; ++d) ot += idx[d] * st[d];
    out[ot] += g[i];
    for (size_t d = r; d-- > 0;) {
      if (++idx[d] < gs[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

template <class T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>&va = tape.value(a), &vb = tape.value(b);
  Tensor<T> out = detail::broadcast_binary("add", va, vb,
                                           [](T x, T y) { return x + y; });
  auto ashape = va.shape();
  auto bshape = vb.shape();
  return tape.record("add", std::move(out), {a, b},
                     [a, b, ashape, bshape](Tape<T>& t, const Tensor<T>& g,
                                            const Tensor<T>&) {
                       t.accumulate(a, detail::reduce_to_shape(g, ashape));
                       t.accumulate(b, detail::reduce_to_shape(g, bshape));
                     });
}

template <class T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>&va = tape.value(a), &vb = tape.value(b);
  Tensor<T> out = detail::broadcast_binary("mul", va, vb,
                                           [](T x, T y) { return x * y; });
  auto ashape = va.shape();
  auto bshape = vb.shape();
  return tape.record(
      "mul", std::move(out), {a, b},
      [a, b, ashape, bshape](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        Tensor<T> ga = detail::broadcast_binary("mul", g, t.value(b),
                                                [](T x, T y) { return x * y; });
        Tensor<T> gb = detail::broadcast_binary("mul", g, t.value(a),
                                                [](T x, T y) { return x * y; });
        t.accumulate(a, detail::reduce_to_shape(ga, ashape));
        t.accumulate(b, detail::reduce_to_shape(gb, bshape));
      });
}

template <class T>
Var<T> scale(Tape<T>& tape, Var<T> a, T c) {
  const Tensor<T>& va = tape.value(a);
  Tensor<T> out(va.shape());
  for (size_t i = 0; i < va.size(); ++i) out[i] = c * va[i];
  return tape.record("scale", std::move(out), {a},
                     [a, c](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       Tensor<T> ga(g.shape());
                       for (size_t i = 0; i < g.size(); ++i) ga[i] = c * g[i];
                       t.accumulate(a, ga);
                     });
}

template <class T>
Var<T> sub(Tape<T>& tape, Var<T> a, Var<T> b) {
  return add(tape, a, scale(tape, b, T(-1)));
}

template <class T>
Var<T> relu(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  Tensor<T> out(va.shape());
  for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
  return tape.record("relu", std::move(out), {a},
                     [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       const Tensor<T>& x = t.value(a);
                       Tensor<T> ga(g.shape());
                       // subgradient at 0 is 0
                       for (size_t i = 0; i < g.size(); ++i)
                         ga[i] = x[i] > T(0) ? g[i] : T(0);
                       t.accumulate(a, ga);
                     });
}

template <class T>
Var<T> exp(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  Tensor<T> out(va.shape());
  for (size_t i = 0; i < va.size(); ++i) out[i] = std::exp(va[i]);
  return tape.record("exp", std::move(out), {a},
                     [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
                       Tensor<T> ga(g.shape());
                       for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i];
                       t.accumulate(a, ga);
                     });
}

template <class T>
Var<T> clamp_max(Tape<T>& tape, Var<T> a, T hi) {
  const Tensor<T>& va = tape.value(a);
  Tensor<T> out(va.shape());
  for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] < hi ? va[i] : hi;
  return tape.record("clamp_max", std::move(out), {a},
                     [a, hi](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       const Tensor<T>& x = t.value(a);
                       Tensor<T> ga(g.shape());
                       for (size_t i = 0; i < g.size(); ++i)
                         ga[i] = x[i] <= hi ? g[i] : T(0);
                       t.accumulate(a, ga);
                     });
}

// ---- shape ----------------------------------------------------------------

template <class T>
Var<T> reshape(Tape<T>& tape, Var<T> a, std::vector<size_t> shape) {
  const Tensor<T>& va = tape.value(a);
  detail::require(numel(shape) == va.size(), "reshape",
                  "cannot view " + shape_str(va.shape()) + " as " + shape_str(shape));
  Tensor<T> out(shape, std::vector<T>(va.data(), va.data() + va.size()));
  auto old_shape = va.shape();
  return tape.record("reshape", std::move(out), {a},
                     [a, old_shape](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       Tensor<T> ga(old_shape,
                                    std::vector<T>(g.data(), g.data() + g.size()));
                       t.accumulate(a, ga);
                     });
}

// Collapse all non-batch dims: (N, ...) -> (N, prod(...)).
template <class T>
Var<T> batch_flatten(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  detail::require(va.rank() >= 1, "batch_flatten", "needs a batch dimension");
  return reshape(tape, a, {va.dim(0), va.size() / va.dim(0)});
}

// ---- reductions -----------------------------------------------------------

template <class T>
Var<T> sum_all(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  T acc = 0;
  for (size_t i = 0; i < va.size(); ++i) acc += va[i];
  auto shape = va.shape();
  return tape.record("sum", Tensor<T>::scalar(acc), {a},
                     [a, shape](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       t.accumulate(a, Tensor<T>::full(shape, g[0]));
                     });
}

template <class T>
Var<T> mean_all(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  detail::require(va.size() > 0, "mean", "empty tensor");
  T acc = 0;
  for (size_t i = 0; i < va.size(); ++i) acc += va[i];
  const T inv = T(1) / static_cast<T>(va.size());
  auto shape = va.shape();
  return tape.record("mean", Tensor<T>::scalar(acc * inv), {a},
                     [a, shape, inv](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       t.accumulate(a, Tensor<T>::full(shape, g[0] * inv));
                     });
}

// (N,C,H,W) -> (N,C), mean over the spatial dims.
template <class T>
Var<T> global_avg_pool(Tape<T>& tape, Var<T> a) {
  const Tensor<T>& va = tape.value(a);
  detail::require(va.rank() == 4, "global_avg_pool",
                  "expects (N,C,H,W), got " + shape_str(va.shape()));
  const size_t n = va.dim(0), c = va.dim(1), hw = va.dim(2) * va.dim(3);
  Tensor<T> out({n, c});
  const T inv = T(1) / static_cast<T>(hw);
  for (size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    const T* p = va.data() + i * hw;
    for (size_t j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc * inv;
  }
  auto shape = va.shape();
  return tape.record("global_avg_pool", std::move(out), {a},
                     [a, shape, hw, inv](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                       Tensor<T> ga(shape);
                       for (size_t i = 0; i < g.size(); ++i) {
                         T* p = ga.data() + i * hw;
                         const T v = g[i] * inv;
                         for (size_t j = 0; j < hw; ++j) p[j] = v;
                       }
                       t.accumulate(a, ga);
                     });
}

// ---- matmul ---------------------------------------------------------------

template <class T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>&va = tape.value(a), &vb = tape.value(b);
  detail::require(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0),
                  "matmul",
                  "shapes " + shape_str(va.shape()) + " x " + shape_str(vb.shape()));
  const size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor<T> out({m, n});
  {
    const T* A = va.data();
    const T* B = vb.data();
    T* C = out.data();
#pragma omp parallel for schedule(static) num_threads(advkit::workers())
    for (int64_t i = 0; i < static_cast<int64_t>(m); ++i) {
      T* crow = C + i * n;
      for (size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        const T* brow = B + p * n;
        for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return tape.record(
      "matmul", std::move(out), {a, b},
      [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        const T* A = t.value(a).data();
        const T* B = t.value(b).data();
        const T* G = g.data();
        Tensor<T> ga({m, k});
        Tensor<T> gb({k, n});
        T* GA = ga.data();
        T* GB = gb.data();
#pragma omp parallel for schedule(static) num_threads(advkit::workers())
        for (int64_t i = 0; i < static_cast<int64_t>(m); ++i)
          for (size_t j = 0; j < n; ++j) {
            const T gv = G[i * n + j];
            const T* brow = B + j;
            for (size_t p = 0; p < k; ++p) GA[i * k + p] += gv * brow[p * n];
          }
#pragma omp parallel for schedule(static) num_threads(advkit::workers())
        for (int64_t p = 0; p < static_cast<int64_t>(k); ++p) {
          T* gbrow = GB + p * n;
          for (size_t i = 0; i < m; ++i) {
            const T av = A[i * k + p];
            const T* grow = G + i * n;
            for (size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
      });
}

// ---- conv2d ---------------------------------------------------------------

// x: (N,Ci,H,W), w: (Co,Ci,KH,KW), zero padding. Per output element the
// reduction runs over (ci,kh,kw) in ascending order, matching the naive
// convolution sum term for term.
template <class T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> w, size_t stride, size_t pad) {
  const Tensor<T>&vx = tape.value(x), &vw = tape.value(w);
  detail::require(vx.rank() == 4 && vw.rank() == 4, "conv2d",
                  "expects x (N,C,H,W) and w (Co,Ci,KH,KW), got " +
                      shape_str(vx.shape()) + " and " + shape_str(vw.shape()));
  detail::require(vx.dim(1) == vw.dim(1), "conv2d",
                  "channel mismatch: x " + shape_str(vx.shape()) + " vs w " +
                      shape_str(vw.shape()));
  detail::require(stride >= 1, "conv2d", "stride must be >= 1");
  const size_t N = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const size_t Co = vw.dim(0), KH = vw.dim(2), KW = vw.dim(3);
  detail::require(H + 2 * pad >= KH && W + 2 * pad >= KW, "conv2d",
                  "kernel " + shape_str(vw.shape()) + " larger than padded input " +
                      shape_str(vx.shape()));
  const size_t Ho = (H + 2 * pad - KH) / stride + 1;
  const size_t Wo = (W + 2 * pad - KW) / stride + 1;

  Tensor<T> out({N, Co, Ho, Wo});
  {
    const T* X = vx.data();
    const T* Wt = vw.data();
    T* O = out.data();
    const int64_t s = stride, p = pad;
#pragma omp parallel for collapse(2) schedule(static) num_threads(advkit::workers())
    for (int64_t n = 0; n < static_cast<int64_t>(N); ++n)
      for (int64_t co = 0; co < static_cast<int64_t>(Co); ++co)
        for (int64_t ho = 0; ho < static_cast<int64_t>(Ho); ++ho) {
          T* orow = O + ((n * Co + co) * Ho + ho) * Wo;
          for (int64_t ci = 0; ci < static_cast<int64_t>(Ci); ++ci)
            for (int64_t kh = 0; kh < static_cast<int64_t>(KH); ++kh) {
              const int64_t ih = ho * s + kh - p;
              if (ih < 0 || ih >= static_cast<int64_t>(H)) continue;
              const T* xrow = X + ((n * Ci + ci) * H + ih) * W;
              for (int64_t kw = 0; kw < static_cast<int64_t>(KW); ++kw) {
                const T wv = Wt[((co * Ci + ci) * KH + kh) * KW + kw];
                const int64_t off = kw - p;
                int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                int64_t hi = static_cast<int64_t>(W) - 1 - off >= 0
                                 ? (static_cast<int64_t>(W) - 1 - off) / s + 1
                                 : 0;
                hi = std::min<int64_t>(hi, Wo);
                if (s == 1) {
                  const T* xs = xrow + off;
                  for (int64_t wo = lo; wo < hi; ++wo) orow[wo] += wv * xs[wo];
                } else {
                  for (int64_t wo = lo; wo < hi; ++wo)
                    orow[wo] += wv * xrow[wo * s + off];
                }
              }
            }
        }
  }

  return tape.record(
      "conv2d", std::move(out), {x, w},
      [x, w, N, Ci, H, W, Co, KH, KW, Ho, Wo, stride, pad](Tape<T>& t, const Tensor<T>& g,
                                                           const Tensor<T>&) {
        const T* X = t.value(x).data();
        const T* Wt = t.value(w).data();
        const T* G = g.data();
        const int64_t s = stride, p = pad;
        if (t.requires_grad(x)) {
          Tensor<T> gx({N, Ci, H, W});
          T* GX = gx.data();
#pragma omp parallel for collapse(2) schedule(static) num_threads(advkit::workers())
          for (int64_t n = 0; n < static_cast<int64_t>(N); ++n)
            for (int64_t ci = 0; ci < static_cast<int64_t>(Ci); ++ci)
              for (int64_t co = 0; co < static_cast<int64_t>(Co); ++co)
                for (int64_t kh = 0; kh < static_cast<int64_t>(KH); ++kh)
                  for (int64_t kw = 0; kw < static_cast<int64_t>(KW); ++kw) {
                    const T wv = Wt[((co * Ci + ci) * KH + kh) * KW + kw];
                    const int64_t off = kw - p;
                    int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                    int64_t hi = static_cast<int64_t>(W) - 1 - off >= 0
                                     ? (static_cast<int64_t>(W) - 1 - off) / s + 1
                                     : 0;
                    hi = std::min<int64_t>(hi, Wo);
                    for (int64_t ho = 0; ho < static_cast<int64_t>(Ho); ++ho) {
                      const int64_t ih = ho * s + kh - p;
                      if (ih < 0 || ih >= static_cast<int64_t>(H)) continue;
                      const T* grow = G + ((n * Co + co) * Ho + ho) * Wo;
                      T* gxrow = GX + ((n * Ci + ci) * H + ih) * W;
                      if (s == 1) {
                        T* gxs = gxrow + off;
                        for (int64_t wo = lo; wo < hi; ++wo) gxs[wo] += wv * grow[wo];
                      } else {
                        for (int64_t wo = lo; wo < hi; ++wo)
                          gxrow[wo * s + off] += wv * grow[wo];
                      }
                    }
                  }
          t.accumulate(x, gx);
        }
        if (t.requires_grad(w)) {
          Tensor<T> gw({Co, Ci, KH, KW});
          T* GW = gw.data();
#pragma omp parallel for collapse(2) schedule(static) num_threads(advkit::workers())
          for (int64_t co = 0; co < static_cast<int64_t>(Co); ++co)
            for (int64_t ci = 0; ci < static_cast<int64_t>(Ci); ++ci)
              for (int64_t kh = 0; kh < static_cast<int64_t>(KH); ++kh)
                for (int64_t kw = 0; kw < static_cast<int64_t>(KW); ++kw) {
                  const int64_t off = kw - p;
                  int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                  int64_t hi = static_cast<int64_t>(W) - 1 - off >= 0
                                   ? (static_cast<int64_t>(W) - 1 - off) / s + 1
                                   : 0;
                  hi = std::min<int64_t>(hi, Wo);
                  T acc = 0;
                  for (int64_t n = 0; n < static_cast<int64_t>(N); ++n)
                    for (int64_t ho = 0; ho < static_cast<int64_t>(Ho); ++ho) {
                      const int64_t ih = ho * s + kh - p;
                      if (ih < 0 || ih >= static_cast<int64_t>(H)) continue;
                      const T* grow = G + ((n * Co + co) * Ho + ho) * Wo;
                      const T* xrow = X + ((n * Ci + ci) * H + ih) * W;
                      if (s == 1) {
                        const T* xs = xrow + off;
                        for (int64_t wo = lo; wo < hi; ++wo) acc += grow[wo] * xs[wo];
                      } else {
                        for (int64_t wo = lo; wo < hi; ++wo)
                          acc += grow[wo] * xrow[wo * s + off];
                      }
                    }
                  GW[((co * Ci + ci) * KH + kh) * KW + kw] = acc;
                }
          t.accumulate(w, gw);
        }
      });
}

// ---- max pooling ----------------------------------------------------------

template <class T>
Var<T> max_pool2d(Tape<T>& tape, Var<T> x, size_t k, size_t stride) {
  const Tensor<T>& vx = tape.value(x);
  detail::require(vx.rank() == 4, "max_pool2d",
                  "expects (N,C,H,W), got " + shape_str(vx.shape()));
  detail::require(k >= 1 && stride >= 1, "max_pool2d", "window and stride must be >= 1");
  const size_t N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  detail::require(H >= k && W >= k, "max_pool2d",
                  "window " + std::to_string(k) + " larger than input " +
                      shape_str(vx.shape()));
  const size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<uint32_t>>(out.size());
  {
    const T* X = vx.data();
    T* O = out.data();
    uint32_t* AM = argmax->data();
#pragma omp parallel for schedule(static) num_threads(advkit::workers())
    for (int64_t nc = 0; nc < static_cast<int64_t>(N * C); ++nc) {
      const T* plane = X + nc * H * W;
      for (size_t ho = 0; ho < Ho; ++ho)
        for (size_t wo = 0; wo < Wo; ++wo) {
          T best = -std::numeric_limits<T>::infinity();
          uint32_t bi = 0;
          for (size_t dh = 0; dh < k; ++dh)
            for (size_t dw = 0; dw < k; ++dw) {
              const size_t idx = (ho * stride + dh) * W + (wo * stride + dw);
              if (plane[idx] > best) {  // first max wins ties
                best = plane[idx];
                bi = static_cast<uint32_t>(idx);
              }
            }
          O[(nc * Ho + ho) * Wo + wo] = best;
          AM[(nc * Ho + ho) * Wo + wo] = bi;
        }
    }
  }
  auto xshape = vx.shape();
  return tape.record("max_pool2d", std::move(out), {x},
                     [x, xshape, argmax, N, C, H, W, Ho, Wo](Tape<T>& t, const Tensor<T>& g,
                                                             const Tensor<T>&) {
                       Tensor<T> gx(xshape);
                       T* GX = gx.data();
                       const T* G = g.data();
                       const uint32_t* AM = argmax->data();
#pragma omp parallel for schedule(static) num_threads(advkit::workers())
                       for (int64_t nc = 0; nc < static_cast<int64_t>(N * C); ++nc) {
                         T* plane = GX + nc * H * W;
                         for (size_t i = 0; i < Ho * Wo; ++i)
                           plane[AM[nc * Ho * Wo + i]] += G[nc * Ho * Wo + i];
                       }
                       t.accumulate(x, gx);
                     });
}

// ---- loss head --------------------------------------------------------------

enum class Reduction { mean, sum };

template <class T>
void check_one_hot(const Tensor<T>& y) {
  detail::require(y.rank() == 2, "cross_entropy",
                  "labels must be one-hot (B,K), got " + shape_str(y.shape()));
  for (size_t b = 0; b < y.dim(0); ++b) {
    int ones = 0;
    for (size_t j = 0; j < y.dim(1); ++j) {
      const T v = y[b * y.dim(1) + j];
      if (v == T(1))
        ++ones;
      else if (v != T(0))
        detail::shape_error("cross_entropy", "labels are not one-hot at row " +
                                                 std::to_string(b));
    }
    if (ones != 1)
      detail::shape_error("cross_entropy",
                          "labels are not one-hot at row " + std::to_string(b));
  }
}

// Softmax cross-entropy against exact one-hot labels, stabilized by
// max-subtraction. The softmax probabilities are saved for the backward pass.
template <class T>
Var<T> softmax_cross_entropy(Tape<T>& tape, Var<T> logits, const Tensor<T>& y,
                             Reduction red = Reduction::mean) {
  const Tensor<T>& z = tape.value(logits);
  detail::require(z.rank() == 2, "cross_entropy",
                  "logits must be (B,K), got " + shape_str(z.shape()));
  check_one_hot(y);
  detail::require(z.shape() == y.shape(), "cross_entropy",
                  "logits " + shape_str(z.shape()) + " vs labels " +
                      shape_str(y.shape()));
  const size_t B = z.dim(0), K = z.dim(1);
  auto probs = std::make_shared<Tensor<T>>(z.shape());
  T total = 0;
  for (size_t b = 0; b < B; ++b) {
    const T* row = z.data() + b * K;
    T m = row[0];
    for (size_t j = 1; j < K; ++j) m = std::max(m, row[j]);
    double denom = 0;  // accumulate the partition sum in double
    for (size_t j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j] - m));
    const double log_denom = std::log(denom);
    T* prow = probs->data() + b * K;
    T li = 0;
    for (size_t j = 0; j < K; ++j) {
      const double lp = static_cast<double>(row[j] - m) - log_denom;
      prow[j] = static_cast<T>(std::exp(lp));
      if (y[b * K + j] == T(1)) li = static_cast<T>(-lp);
    }
    total += li;
  }
  if (red == Reduction::mean) total /= static_cast<T>(B);
  Tensor<T> yc = y;
  return tape.record("cross_entropy", Tensor<T>::scalar(total), {logits},
                     [logits, probs, yc, B, K, red](Tape<T>& t, const Tensor<T>& g,
                                                    const Tensor<T>&) {
                       const T s =
                           g[0] * (red == Reduction::mean ? T(1) / static_cast<T>(B)
                                                          : T(1));
                       Tensor<T> gz({B, K});
                       for (size_t i = 0; i < B * K; ++i)
                         gz[i] = s * ((*probs)[i] - yc[i]);
                       t.accumulate(logits, gz);
                     });
}

// Softmax probabilities without the loss, forward only (used for reports).
template <class T>
Tensor<T> softmax(const Tensor<T>& z) {
  detail::require(z.rank() == 2, "softmax", "expects (B,K), got " + shape_str(z.shape()));
  const size_t B = z.dim(0), K = z.dim(1);
  Tensor<T> out(z.shape());
  for (size_t b = 0; b < B; ++b) {
    const T* row = z.data() + b * K;
    T* orow = out.data() + b * K;
    T m = row[0];
    for (size_t j = 1; j < K; ++j) m = std::max(m, row[j]);
    double denom = 0;
    for (size_t j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j] - m));
    for (size_t j = 0; j < K; ++j)
      orow[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - m)) / denom);
  }
  return out;
}

}  // namespace advkit::ops
