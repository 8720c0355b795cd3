#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "crn/tensor.hpp"

namespace crn {

enum class Activation { Exp, Relu, Elu };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Exp: return "exp";
    case Activation::Relu: return "relu";
    case Activation::Elu: return "elu";
  }
  return "?";
}

namespace detail {

template <class T>
inline T act_value(Activation a, T x) {
  switch (a) {
    case Activation::Exp: return std::exp(x);
    case Activation::Relu: return x > T(0) ? x : T(0);
    case Activation::Elu: return x > T(0) ? x : std::exp(x) - T(1);
  }
  return T(0);
}

// Local derivative recovered from the activated value y = act(x).
// exp: y; relu: 1 for y>0 else 0; elu (alpha=1): 1 for y>0 else y+1.
template <class T>
inline T act_grad_from_value(Activation a, T y) {
  switch (a) {
    case Activation::Exp: return y;
    case Activation::Relu: return y > T(0) ? T(1) : T(0);
    case Activation::Elu: return y > T(0) ? T(1) : y + T(1);
  }
  return T(0);
}

// Right-aligned broadcast plan for binary elementwise ops (size-1 axes
// stretch). Dims are padded on the left to rank 3; stride 0 marks a
// broadcast axis.
struct BinPlan {
  std::int64_t dim[3] = {1, 1, 1};
  std::int64_t sa[3] = {0, 0, 0};
  std::int64_t sb[3] = {0, 0, 0};
  std::vector<int> out_shape;
  std::int64_t out_numel = 1;
};

inline BinPlan binary_plan(const std::vector<int>& a, const std::vector<int>& b,
                           const char* opname) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  BinPlan pl;
  std::int64_t da[3] = {1, 1, 1}, db[3] = {1, 1, 1};
  for (int i = 0; i < ra; ++i) da[3 - ra + i] = a[static_cast<std::size_t>(i)];
  for (int i = 0; i < rb; ++i) db[3 - rb + i] = b[static_cast<std::size_t>(i)];
  for (int i = 0; i < 3; ++i) {
    if (da[i] == db[i]) {
      pl.dim[i] = da[i];
    } else if (da[i] == 1) {
      pl.dim[i] = db[i];
    } else if (db[i] == 1) {
      pl.dim[i] = da[i];
    } else {
      throw std::invalid_argument(std::string(opname) + ": shapes " +
                                  shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcastable");
    }
    pl.out_numel *= pl.dim[i];
  }
  std::int64_t stride = 1;
  for (int i = 2; i >= 0; --i) {
    pl.sa[i] = (da[i] == 1) ? 0 : stride;
    stride *= da[i];
  }
  stride = 1;
  for (int i = 2; i >= 0; --i) {
    pl.sb[i] = (db[i] == 1) ? 0 : stride;
    stride *= db[i];
  }
  pl.out_shape.assign(static_cast<std::size_t>(r), 1);
  for (int i = 0; i < r; ++i) {
    pl.out_shape[static_cast<std::size_t>(i)] =
        static_cast<int>(pl.dim[3 - r + i]);
  }
  return pl;
}

template <class Fn>
inline void plan_foreach(const BinPlan& pl, Fn&& fn) {
  std::int64_t flat = 0;
  for (std::int64_t i0 = 0; i0 < pl.dim[0]; ++i0) {
    for (std::int64_t i1 = 0; i1 < pl.dim[1]; ++i1) {
      const std::int64_t a01 = i0 * pl.sa[0] + i1 * pl.sa[1];
      const std::int64_t b01 = i0 * pl.sb[0] + i1 * pl.sb[1];
      for (std::int64_t i2 = 0; i2 < pl.dim[2]; ++i2, ++flat) {
        fn(flat, a01 + i2 * pl.sa[2], b01 + i2 * pl.sb[2]);
      }
    }
  }
}

// Raw GEMM kernels; `acc` switches between overwrite and accumulate.
template <class T>
inline void gemm_nn(const T* A, const T* B, T* C, int M, int K, int N,
                    bool acc) {
  if (!acc) std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  for (int m = 0; m < M; ++m) {
    T* c = C + static_cast<std::size_t>(m) * N;
    const T* a = A + static_cast<std::size_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C[m,n] (+)= sum_k A[m,k] * B[n,k]
template <class T>
inline void gemm_nt(const T* A, const T* B, T* C, int M, int K, int N,
                    bool acc) {
  for (int m = 0; m < M; ++m) {
    const T* a = A + static_cast<std::size_t>(m) * K;
    T* c = C + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const T* b = B + static_cast<std::size_t>(n) * K;
      T s = 0;
      for (int k = 0; k < K; ++k) s += a[k] * b[k];
      c[n] = acc ? c[n] + s : s;
    }
  }
}

// C[m,n] (+)= sum_k A[k,m] * B[k,n]
template <class T>
inline void gemm_tn(const T* A, const T* B, T* C, int M, int K, int N,
                    bool acc) {
  if (!acc) std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
  for (int k = 0; k < K; ++k) {
    const T* a = A + static_cast<std::size_t>(k) * M;
    const T* b = B + static_cast<std::size_t>(k) * N;
    for (int m = 0; m < M; ++m) {
      const T av = a[m];
      T* c = C + static_cast<std::size_t>(m) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// log(exp(m + log s) + exp(v)) folded into the (m, s) accumulator pair,
// with s kept O(1) by rescaling against the running max.
template <class T>
inline void logaddexp_into(T& m, T& s, T v) {
  if (s == T(0)) {
    m = v;
    s = T(1);
    return;
  }
  if (v <= m) {
    s += std::exp(v - m);
  } else {
    s = s * std::exp(m - v) + T(1);
    m = v;
  }
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t red = 1;
  std::int64_t inner = 1;
};

inline AxisSplit axis_split(const std::vector<int>& shape, int axis,
                            const char* opname) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument(std::string(opname) + ": axis " +
                                std::to_string(axis) + " out of range for " +
                                shape_str(shape));
  }
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= shape[static_cast<std::size_t>(i)];
  sp.red = shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) {
    sp.inner *= shape[static_cast<std::size_t>(i)];
  }
  return sp;
}

inline std::vector<int> drop_axis(const std::vector<int>& shape, int axis) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out.push_back(shape[static_cast<std::size_t>(i)]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

enum class BinKind { Add, Sub, Mul };

template <class T>
TensorT<T> binary_op(BinKind kind, const TensorT<T>& a, const TensorT<T>& b,
                     const char* name) {
  const BinPlan pl = binary_plan(a.shape, b.shape, name);
  TensorT<T> out = TensorT<T>::zeros(pl.out_shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  switch (kind) {
    case BinKind::Add:
      plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        po[o] = pa[ia] + pb[ib];
      });
      break;
    case BinKind::Sub:
      plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        po[o] = pa[ia] - pb[ib];
      });
      break;
    case BinKind::Mul:
      plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        po[o] = pa[ia] * pb[ib];
      });
      break;
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int ida = tp->node_of(a);
  const int idb = tp->node_of(b);
  if (ida < 0 && idb < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> av = a, bv = b;
  tp->set_backward(oid, [tp, kind, pl, av, bv, ida, idb, oid]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    const T* ra = av.ptr();
    const T* rb = bv.ptr();
    std::vector<T>* ga = ida >= 0 ? &tp->accum(ida, av.numel()) : nullptr;
    std::vector<T>* gb = idb >= 0 ? &tp->accum(idb, bv.numel()) : nullptr;
    switch (kind) {
      case BinKind::Add:
        plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          if (ga) (*ga)[static_cast<std::size_t>(ia)] += pg[o];
          if (gb) (*gb)[static_cast<std::size_t>(ib)] += pg[o];
        });
        break;
      case BinKind::Sub:
        plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          if (ga) (*ga)[static_cast<std::size_t>(ia)] += pg[o];
          if (gb) (*gb)[static_cast<std::size_t>(ib)] -= pg[o];
        });
        break;
      case BinKind::Mul:
        plan_foreach(pl, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          if (ga) (*ga)[static_cast<std::size_t>(ia)] += pg[o] * rb[ib];
          if (gb) (*gb)[static_cast<std::size_t>(ib)] += pg[o] * ra[ia];
        });
        break;
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// Shared plumbing for unary elementwise ops whose local derivative is a
// function of input and output values.
template <class T, class FwdFn, class GradFn>
TensorT<T> unary_op(const TensorT<T>& x, FwdFn fwd, GradFn grad_of_xy) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  const T* px = x.ptr();
  T* po = out.ptr();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x, ov = out;
  tp->set_backward(oid, [tp, xv, ov, idx, oid, grad_of_xy]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* px = xv.ptr();
    const T* py = ov.ptr();
    const T* pg = g->data();
    const std::int64_t n = xv.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      gx[static_cast<std::size_t>(i)] += pg[i] * grad_of_xy(px[i], py[i]);
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(detail::BinKind::Add, a, b, "add");
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(detail::BinKind::Sub, a, b, "sub");
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op(detail::BinKind::Mul, a, b, "mul");
}

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// Natural log. Non-positive inputs throw in debug builds; release builds
// propagate the IEEE result (NaN / -inf).
template <class T>
TensorT<T> log(const TensorT<T>& x) {
#ifndef NDEBUG
  const T* px = x.ptr();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (!(px[i] > T(0))) {
      throw std::domain_error("log: non-positive input " +
                              std::to_string(static_cast<double>(px[i])) +
                              " at flat index " + std::to_string(i));
    }
  }
#endif
  return detail::unary_op(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// ELU with alpha = 1.
template <class T>
TensorT<T> elu(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : std::exp(v) - T(1); },
      [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
}

template <class T>
TensorT<T> apply_activation(Activation a, const TensorT<T>& x) {
  switch (a) {
    case Activation::Exp: return exp(x);
    case Activation::Relu: return relu(x);
    case Activation::Elu: return elu(x);
  }
  throw std::invalid_argument("apply_activation: unknown activation");
}

template <class T>
TensorT<T> max_scalar(const TensorT<T>& x, T c) {
  return detail::unary_op(
      x, [c](T v) { return v > c ? v : c; },
      [c](T v, T) { return v > c ? T(1) : T(0); });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c) {
  return detail::unary_op(
      x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
TensorT<T> div_scalar(const TensorT<T>& x, T c) {
  if (c == T(0)) throw std::invalid_argument("div_scalar: divide by zero");
  return mul_scalar(x, T(1) / c);
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
  return detail::unary_op(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {
enum class ReduceKind { Sum, Mean, Max };
}

template <class T>
TensorT<T> reduce(detail::ReduceKind kind, const TensorT<T>& x, int axis) {
  const auto sp = detail::axis_split(x.shape, axis, "reduce");
  TensorT<T> out = TensorT<T>::zeros(detail::drop_axis(x.shape, axis));
  const T* px = x.ptr();
  T* po = out.ptr();
  auto arg = std::make_shared<std::vector<std::int32_t>>();
  if (kind == detail::ReduceKind::Max) arg->assign(sp.outer * sp.inner, 0);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.red * sp.inner + i;
      if (kind == detail::ReduceKind::Max) {
        T best = px[base];
        std::int32_t bi = 0;
        for (std::int64_t r = 1; r < sp.red; ++r) {
          const T v = px[base + r * sp.inner];
          if (v > best) {
            best = v;
            bi = static_cast<std::int32_t>(r);
          }
        }
        po[o * sp.inner + i] = best;
        (*arg)[static_cast<std::size_t>(o * sp.inner + i)] = bi;
      } else {
        T s = 0;
        for (std::int64_t r = 0; r < sp.red; ++r) s += px[base + r * sp.inner];
        po[o * sp.inner + i] =
            (kind == detail::ReduceKind::Mean) ? s / static_cast<T>(sp.red) : s;
      }
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x;
  tp->set_backward(oid, [tp, xv, idx, oid, sp, kind, arg]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* pg = g->data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.red * sp.inner + i;
        const T gv = pg[o * sp.inner + i];
        switch (kind) {
          case detail::ReduceKind::Sum:
            for (std::int64_t r = 0; r < sp.red; ++r) {
              gx[static_cast<std::size_t>(base + r * sp.inner)] += gv;
            }
            break;
          case detail::ReduceKind::Mean:
            for (std::int64_t r = 0; r < sp.red; ++r) {
              gx[static_cast<std::size_t>(base + r * sp.inner)] +=
                  gv / static_cast<T>(sp.red);
            }
            break;
          case detail::ReduceKind::Max:
            gx[static_cast<std::size_t>(
                base + (*arg)[static_cast<std::size_t>(o * sp.inner + i)] *
                           sp.inner)] += gv;
            break;
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& x, int axis) {
  return reduce(detail::ReduceKind::Sum, x, axis);
}
template <class T>
TensorT<T> mean(const TensorT<T>& x, int axis) {
  return reduce(detail::ReduceKind::Mean, x, axis);
}
template <class T>
TensorT<T> max(const TensorT<T>& x, int axis) {
  return reduce(detail::ReduceKind::Max, x, axis);
}

// ---------------------------------------------------------------------------
// Log-space reductions
// ---------------------------------------------------------------------------

// out[j] = log sum_{i<=j} exp(x[i]) along `axis`, running-max rescaled so
// inputs with magnitude up to ~1e4 stay finite. Backward is the
// softmax-weighted scatter, evaluated in log space with a sign split so it
// stays finite wherever the forward pass does.
template <class T>
TensorT<T> logcumsumexp(const TensorT<T>& x, int axis) {
  const auto sp = detail::axis_split(x.shape, axis, "logcumsumexp");
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.red * sp.inner + i;
      T m = px[base];
      T s = T(1);
      po[base] = px[base];
      for (std::int64_t r = 1; r < sp.red; ++r) {
        detail::logaddexp_into(m, s, px[base + r * sp.inner]);
        po[base + r * sp.inner] = m + std::log(s);
      }
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x, ov = out;
  tp->set_backward(oid, [tp, xv, ov, idx, oid, sp]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* px = xv.ptr();
    const T* py = ov.ptr();
    const T* pg = g->data();
    // dL/dx_i = exp(x_i) * sum_{j>=i} g_j exp(-y_j); the reverse-cumulative
    // sums are tracked in log space, split by the sign of g_j.
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.red * sp.inner + i;
        T mp = T(0), sp_pos = T(0);
        T mn = T(0), sn = T(0);
        for (std::int64_t r = sp.red - 1; r >= 0; --r) {
          const std::int64_t k = base + r * sp.inner;
          const T gj = pg[k];
          if (gj > T(0)) {
            detail::logaddexp_into(mp, sp_pos, std::log(gj) - py[k]);
          } else if (gj < T(0)) {
            detail::logaddexp_into(mn, sn, std::log(-gj) - py[k]);
          }
          T acc = T(0);
          if (sp_pos > T(0)) acc += std::exp(px[k] + mp) * sp_pos;
          if (sn > T(0)) acc -= std::exp(px[k] + mn) * sn;
          gx[static_cast<std::size_t>(k)] += acc;
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// out = log sum_i exp(x[i]) along `axis` (axis removed), max-shifted.
template <class T>
TensorT<T> logsumexp(const TensorT<T>& x, int axis) {
  const auto sp = detail::axis_split(x.shape, axis, "logsumexp");
  TensorT<T> out = TensorT<T>::zeros(detail::drop_axis(x.shape, axis));
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.red * sp.inner + i;
      T m = px[base];
      for (std::int64_t r = 1; r < sp.red; ++r) {
        m = std::max(m, px[base + r * sp.inner]);
      }
      T s = 0;
      for (std::int64_t r = 0; r < sp.red; ++r) {
        s += std::exp(px[base + r * sp.inner] - m);
      }
      po[o * sp.inner + i] = m + std::log(s);
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x, ov = out;
  tp->set_backward(oid, [tp, xv, ov, idx, oid, sp]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* px = xv.ptr();
    const T* py = ov.ptr();
    const T* pg = g->data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.red * sp.inner + i;
        const T gv = pg[o * sp.inner + i];
        const T y = py[o * sp.inner + i];
        if (gv == T(0)) continue;
        for (std::int64_t r = 0; r < sp.red; ++r) {
          const std::int64_t k = base + r * sp.inner;
          gx[static_cast<std::size_t>(k)] += gv * std::exp(px[k] - y);
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// Largest exponent the stable paths allow before rescaling: exp(cap) must
// survive squaring (layer-norm variance) without overflow.
template <class T>
constexpr T stable_exp_cap() {
  return std::is_same_v<T, float> ? T(40) : T(300);
}

// exp(z - shift) per trailing-dimension row with shift = max(0, rowmax - cap)
// treated as a constant. Rows whose entries already fit are untouched
// (bit-identical to plain exp); oversized rows are rescaled by a positive
// per-row factor. Only sound when a scale-invariant consumer (layer
// normalization over the same rows) follows; there the factor cancels
// exactly, in the gradient as well as the value.
template <class T>
TensorT<T> exp_row_shifted(const TensorT<T>& z, T cap = stable_exp_cap<T>()) {
  const int d = z.shape.back();
  const std::int64_t rows = z.numel() / d;
  TensorT<T> out = TensorT<T>::zeros(z.shape);
  const T* pz = z.ptr();
  T* po = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* zr = pz + r * d;
    T* orow = po + r * d;
    T m = zr[0];
    for (int c = 1; c < d; ++c) m = std::max(m, zr[c]);
    const T shift = m > cap ? m - cap : T(0);
    for (int c = 0; c < d; ++c) orow[c] = std::exp(zr[c] - shift);
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(z);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> zv = z, ov = out;
  tp->set_backward(oid, [tp, zv, ov, idx, oid]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gz = tp->accum(idx, zv.numel());
    const T* py = ov.ptr();
    const T* pg = g->data();
    const std::int64_t n = zv.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      gz[static_cast<std::size_t>(i)] += pg[i] * py[i];
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

struct MatPlan {
  int bt = 1;        // output batch count
  int m = 0, k = 0, n = 0;
  std::int64_t a_bstride = 0;  // 0 when a is shared across the batch
  std::int64_t b_bstride = 0;
  std::vector<int> out_shape;
};

inline MatPlan mat_plan(const std::vector<int>& a, const std::vector<int>& b,
                        bool b_transposed, const char* opname) {
  if (a.size() < 2 || b.size() < 2) {
    throw std::invalid_argument(std::string(opname) +
                                ": operands must have rank >= 2, got " +
                                shape_str(a) + " and " + shape_str(b));
  }
  MatPlan pl;
  const int a_rows = a[a.size() - 2], a_cols = a[a.size() - 1];
  const int b_rows = b[b.size() - 2], b_cols = b[b.size() - 1];
  pl.m = a_rows;
  pl.k = a_cols;
  const int bk = b_transposed ? b_cols : b_rows;
  pl.n = b_transposed ? b_rows : b_cols;
  if (bk != pl.k) {
    throw std::invalid_argument(std::string(opname) +
                                ": inner dimensions disagree: " + shape_str(a) +
                                " vs " + shape_str(b));
  }
  const int ab = a.size() == 3 ? a[0] : 1;
  const int bb = b.size() == 3 ? b[0] : 1;
  if (ab != bb && ab != 1 && bb != 1) {
    throw std::invalid_argument(std::string(opname) +
                                ": batch dimensions disagree: " + shape_str(a) +
                                " vs " + shape_str(b));
  }
  pl.bt = std::max(ab, bb);
  pl.a_bstride = (ab == 1) ? 0 : static_cast<std::int64_t>(pl.m) * pl.k;
  pl.b_bstride = (bb == 1) ? 0
                           : static_cast<std::int64_t>(b_rows) * b_cols;
  if (a.size() == 3 || b.size() == 3) {
    pl.out_shape = {pl.bt, pl.m, pl.n};
  } else {
    pl.out_shape = {pl.m, pl.n};
  }
  return pl;
}

template <class T>
TensorT<T> matmul_impl(const TensorT<T>& a, const TensorT<T>& b,
                       bool b_transposed, const char* opname) {
  const MatPlan pl = mat_plan(a.shape, b.shape, b_transposed, opname);
  TensorT<T> out = TensorT<T>::zeros(pl.out_shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  const std::int64_t ostride = static_cast<std::int64_t>(pl.m) * pl.n;
  for (int bt = 0; bt < pl.bt; ++bt) {
    const T* A = pa + bt * pl.a_bstride;
    const T* B = pb + bt * pl.b_bstride;
    T* C = po + bt * ostride;
    if (b_transposed) {
      gemm_nt(A, B, C, pl.m, pl.k, pl.n, false);
    } else {
      gemm_nn(A, B, C, pl.m, pl.k, pl.n, false);
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int ida = tp->node_of(a);
  const int idb = tp->node_of(b);
  if (ida < 0 && idb < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> av = a, bv = b;
  tp->set_backward(oid, [tp, av, bv, ida, idb, oid, pl, b_transposed]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    const T* pa = av.ptr();
    const T* pb = bv.ptr();
    std::vector<T>* ga = ida >= 0 ? &tp->accum(ida, av.numel()) : nullptr;
    std::vector<T>* gb = idb >= 0 ? &tp->accum(idb, bv.numel()) : nullptr;
    const std::int64_t ostride = static_cast<std::int64_t>(pl.m) * pl.n;
    for (int bt = 0; bt < pl.bt; ++bt) {
      const T* G = pg + bt * ostride;
      const T* A = pa + bt * pl.a_bstride;
      const T* B = pb + bt * pl.b_bstride;
      if (!b_transposed) {
        // C = A @ B : gA += G @ B^T ; gB += A^T @ G
        if (ga) {
          gemm_nt(G, B, ga->data() + bt * pl.a_bstride, pl.m, pl.n, pl.k, true);
        }
        if (gb) {
          gemm_tn(A, G, gb->data() + bt * pl.b_bstride, pl.k, pl.m, pl.n, true);
        }
      } else {
        // C = A @ B^T : gA += G @ B ; gB += G^T @ A
        if (ga) {
          gemm_nn(G, B, ga->data() + bt * pl.a_bstride, pl.m, pl.n, pl.k, true);
        }
        if (gb) {
          gemm_tn(G, A, gb->data() + bt * pl.b_bstride, pl.n, pl.m, pl.k, true);
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

}  // namespace detail

// Standard matrix product. Rank <= 3 with broadcast on the leading batch
// dimension (a batched operand against a shared rank-2 operand is fine).
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::matmul_impl(a, b, false, "matmul");
}

// a @ b^T over the trailing two dimensions. This is the natural layout for
// row-major weight matrices stored as [out_dim, in_dim].
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::matmul_impl(a, b, true, "matmul_nt");
}

// ---------------------------------------------------------------------------
// Layer normalization over the trailing dimension
// ---------------------------------------------------------------------------

// (x - mean) / sqrt(var + eps) * gain + bias, statistics per trailing row,
// biased variance.
template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gain,
                     const TensorT<T>& bias, T eps) {
  const int d = x.shape.back();
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layernorm: gain/bias size must match trailing "
                                "dimension " + std::to_string(d));
  }
  const std::int64_t rows = x.numel() / d;
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.ptr();
  const T* pgain = gain.ptr();
  const T* pbias = bias.ptr();
  T* po = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T* orow = po + r * d;
    T* hr = xhat->data() + r * d;
    T mu = 0;
    for (int c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int c = 0; c < d; ++c) {
      const T t = xr[c] - mu;
      var += t * t;
    }
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (int c = 0; c < d; ++c) {
      const T h = (xr[c] - mu) * rs;
      hr[c] = h;
      orow[c] = h * pgain[c] + pbias[c];
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  const int idg = tp->node_of(gain);
  const int idb = tp->node_of(bias);
  if (idx < 0 && idg < 0 && idb < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x, gv = gain;
  tp->set_backward(oid, [tp, xv, gv, idx, idg, idb, oid, xhat, rstd, d, rows]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    const T* pgain = gv.ptr();
    std::vector<T>* gx = idx >= 0 ? &tp->accum(idx, xv.numel()) : nullptr;
    std::vector<T>* gg = idg >= 0 ? &tp->accum(idg, d) : nullptr;
    std::vector<T>* gb = idb >= 0 ? &tp->accum(idb, d) : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* grow = pg + r * d;
      const T* hr = xhat->data() + r * d;
      const T rs = (*rstd)[static_cast<std::size_t>(r)];
      if (gg) {
        for (int c = 0; c < d; ++c) (*gg)[static_cast<std::size_t>(c)] += grow[c] * hr[c];
      }
      if (gb) {
        for (int c = 0; c < d; ++c) (*gb)[static_cast<std::size_t>(c)] += grow[c];
      }
      if (gx) {
        T m1 = 0, m2 = 0;
        for (int c = 0; c < d; ++c) {
          const T gh = grow[c] * pgain[c];
          m1 += gh;
          m2 += gh * hr[c];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        T* gxr = gx->data() + r * d;
        for (int c = 0; c < d; ++c) {
          const T gh = grow[c] * pgain[c];
          gxr[c] += rs * (gh - m1 - hr[c] * m2);
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// ---------------------------------------------------------------------------
// Attention softmax, cross entropy, embeddings
// ---------------------------------------------------------------------------

// Row-wise softmax over scores[.., i, j] restricted to j <= i; masked
// entries are exactly zero. Max-shifted for stability.
template <class T>
TensorT<T> causal_softmax(const TensorT<T>& scores) {
  const int r = scores.rank();
  if (r < 2 || scores.shape[r - 1] != scores.shape[r - 2]) {
    throw std::invalid_argument("causal_softmax: expected square trailing "
                                "dims, got " + shape_str(scores.shape));
  }
  const int n = scores.shape[r - 1];
  const std::int64_t mats = scores.numel() / (static_cast<std::int64_t>(n) * n);
  TensorT<T> out = TensorT<T>::zeros(scores.shape);
  const T* ps = scores.ptr();
  T* po = out.ptr();
  for (std::int64_t b = 0; b < mats; ++b) {
    for (int i = 0; i < n; ++i) {
      const T* row = ps + (b * n + i) * n;
      T* orow = po + (b * n + i) * n;
      T m = row[0];
      for (int j = 1; j <= i; ++j) m = std::max(m, row[j]);
      T s = 0;
      for (int j = 0; j <= i; ++j) {
        orow[j] = std::exp(row[j] - m);
        s += orow[j];
      }
      for (int j = 0; j <= i; ++j) orow[j] /= s;
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(scores);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> sv = scores, ov = out;
  tp->set_backward(oid, [tp, sv, ov, idx, oid, n, mats]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gs = tp->accum(idx, sv.numel());
    const T* pp = ov.ptr();
    const T* pg = g->data();
    for (std::int64_t b = 0; b < mats; ++b) {
      for (int i = 0; i < n; ++i) {
        const T* prow = pp + (b * n + i) * n;
        const T* grow = pg + (b * n + i) * n;
        T* gsr = gs.data() + (b * n + i) * n;
        T dot = 0;
        for (int j = 0; j <= i; ++j) dot += grow[j] * prow[j];
        for (int j = 0; j <= i; ++j) gsr[j] += prow[j] * (grow[j] - dot);
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// Mean negative log-softmax over masked positions. logits is [.., V] with
// one row per position; targets/mask are flat, one entry per row.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits,
                         const std::vector<std::int32_t>& targets,
                         const std::vector<std::uint8_t>& mask) {
  const int V = logits.shape.back();
  const std::int64_t rows = logits.numel() / V;
  if (static_cast<std::int64_t>(targets.size()) != rows ||
      static_cast<std::int64_t>(mask.size()) != rows) {
    throw std::invalid_argument("cross_entropy: targets/mask must have one "
                                "entry per logit row");
  }
  std::int64_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) {
    throw std::invalid_argument("cross_entropy: empty mask");
  }
  auto lse = std::make_shared<std::vector<T>>(rows, T(0));
  const T* px = logits.ptr();
  T loss = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const std::int32_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= V) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) +
                              " out of range [0," + std::to_string(V) + ")");
    }
    const T* row = px + r * V;
    T m = row[0];
    for (int v = 1; v < V; ++v) m = std::max(m, row[v]);
    T s = 0;
    for (int v = 0; v < V; ++v) s += std::exp(row[v] - m);
    const T l = m + std::log(s);
    (*lse)[static_cast<std::size_t>(r)] = l;
    loss += l - row[t];
  }
  TensorT<T> out = TensorT<T>::scalar(loss / static_cast<T>(count));
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(logits);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = logits;
  tp->set_backward(oid, [tp, xv, idx, oid, lse, targets, mask, V, rows, count]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* px = xv.ptr();
    const T coef = (*g)[0] / static_cast<T>(count);
    for (std::int64_t r = 0; r < rows; ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      const T* row = px + r * V;
      T* grow = gx.data() + r * V;
      const T l = (*lse)[static_cast<std::size_t>(r)];
      const std::int32_t t = targets[static_cast<std::size_t>(r)];
      for (int v = 0; v < V; ++v) {
        T p = std::exp(row[v] - l);
        if (v == t) p -= T(1);
        grow[v] += coef * p;
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// token_table[id] + pos_table[position] for each of `batch` rows of `seq`
// ids. Output is [batch, seq, d].
template <class T>
TensorT<T> embed_tokens(const TensorT<T>& token_table,
                        const TensorT<T>& pos_table,
                        const std::vector<std::int32_t>& ids, int batch,
                        int seq) {
  const int vocab = token_table.shape[0];
  const int d = token_table.shape[1];
  if (pos_table.shape[1] != d) {
    throw std::invalid_argument("embed: token/position width mismatch");
  }
  if (seq > pos_table.shape[0]) {
    throw std::out_of_range("embed: sequence length " + std::to_string(seq) +
                            " exceeds max context " +
                            std::to_string(pos_table.shape[0]));
  }
  if (static_cast<std::int64_t>(ids.size()) !=
      static_cast<std::int64_t>(batch) * seq) {
    throw std::invalid_argument("embed: ids length does not match batch*seq");
  }
  TensorT<T> out = TensorT<T>::zeros({batch, seq, d});
  const T* ptok = token_table.ptr();
  const T* ppos = pos_table.ptr();
  T* po = out.ptr();
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < seq; ++t) {
      const std::int32_t id = ids[static_cast<std::size_t>(b) * seq + t];
      if (id < 0 || id >= vocab) {
        throw std::out_of_range("embed: token id " + std::to_string(id) +
                                " out of range [0," + std::to_string(vocab) +
                                ")");
      }
      const T* trow = ptok + static_cast<std::int64_t>(id) * d;
      const T* prow = ppos + static_cast<std::int64_t>(t) * d;
      T* orow = po + (static_cast<std::int64_t>(b) * seq + t) * d;
      for (int c = 0; c < d; ++c) orow[c] = trow[c] + prow[c];
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idt = tp->node_of(token_table);
  const int idp = tp->node_of(pos_table);
  if (idt < 0 && idp < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> tv = token_table, pv = pos_table;
  tp->set_backward(oid, [tp, tv, pv, idt, idp, oid, ids, batch, seq, d]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    std::vector<T>* gt = idt >= 0 ? &tp->accum(idt, tv.numel()) : nullptr;
    std::vector<T>* gp = idp >= 0 ? &tp->accum(idp, pv.numel()) : nullptr;
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < seq; ++t) {
        const std::int32_t id = ids[static_cast<std::size_t>(b) * seq + t];
        const T* grow = pg + (static_cast<std::int64_t>(b) * seq + t) * d;
        if (gt) {
          T* dst = gt->data() + static_cast<std::int64_t>(id) * d;
          for (int c = 0; c < d; ++c) dst[c] += grow[c];
        }
        if (gp) {
          T* dst = gp->data() + static_cast<std::int64_t>(t) * d;
          for (int c = 0; c < d; ++c) dst[c] += grow[c];
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// Metadata-only reshape: same buffer, same tape node (gradients are flat).
template <class T>
TensorT<T> reshape(TensorT<T> t, std::vector<int> shp) {
  TensorT<T>::validate_shape(shp);
  if (TensorT<T>::numel_of(shp) != t.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(t.shape) +
                                " as " + shape_str(shp));
  }
  t.shape = std::move(shp);
  return t;
}

// Multiply each trailing-row block at sequence position j by scales[j].
// x is [.., n, h] with scales.size() == n; the scale vector is a constant.
template <class T>
TensorT<T> row_scale(const TensorT<T>& x, const std::vector<T>& scales) {
  const int r = x.rank();
  if (r < 2) {
    throw std::invalid_argument("row_scale: rank >= 2 required");
  }
  const int n = x.shape[r - 2];
  const int h = x.shape[r - 1];
  if (static_cast<int>(scales.size()) != n) {
    throw std::invalid_argument("row_scale: scales length " +
                                std::to_string(scales.size()) +
                                " does not match dimension " +
                                std::to_string(n));
  }
  const std::int64_t outer = x.numel() / (static_cast<std::int64_t>(n) * h);
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (int j = 0; j < n; ++j) {
      const T s = scales[static_cast<std::size_t>(j)];
      const T* xr = px + (o * n + j) * h;
      T* orow = po + (o * n + j) * h;
      for (int c = 0; c < h; ++c) orow[c] = xr[c] * s;
    }
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idx = tp->node_of(x);
  if (idx < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> xv = x;
  tp->set_backward(oid, [tp, xv, idx, oid, scales, n, h, outer]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    std::vector<T>& gx = tp->accum(idx, xv.numel());
    const T* pg = g->data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (int j = 0; j < n; ++j) {
        const T s = scales[static_cast<std::size_t>(j)];
        const T* grow = pg + (o * n + j) * h;
        T* gxr = gx.data() + (o * n + j) * h;
        for (int c = 0; c < h; ++c) gxr[c] += grow[c] * s;
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

}  // namespace crn
