#pragma once

// Causal Relation Network cells.
//
// The cell computes y_j = reduce_{i<=j} f([x_i; x_j]) where f is a
// single-hidden-layer MLP. Splitting the input weight matrix into
// (W_left | W_right) lets p_i = W_left x_i and q_j = W_right x_j + b_in be
// precomputed, so the pairwise work reduces to sum_{i<=j} act(p_i + q_j).
// With act = exp this factorizes as exp(q_j) * sum_{i<=j} exp(p_i), giving
// O(n) training and O(1)-state decoding; the sum is carried in log space
// via logcumsumexp so large pre-activations stay finite.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "crn/layers.hpp"
#include "crn/ops.hpp"
#include "crn/tensor.hpp"

namespace crn {

enum class PreActNorm { None, Exact, Approximate };
enum class RNPath { Quadratic, Linear };

inline const char* to_string(PreActNorm p) {
  switch (p) {
    case PreActNorm::None: return "none";
    case PreActNorm::Exact: return "exact";
    case PreActNorm::Approximate: return "approximate";
  }
  return "?";
}

inline const char* to_string(RNPath p) {
  return p == RNPath::Quadratic ? "quadratic" : "linear";
}

// Defaults select the proposed configuration: exponential activation with
// exact pre-activation normalization and post-reduction normalization.
struct CausalRNConfig {
  int d_e = 0;
  int d_h = 0;
  Activation activation = Activation::Exp;
  PreActNorm pre_act_norm = PreActNorm::Exact;
  bool post_reduction_norm = true;
  bool prefix_average = true;  // apply 1/j when post_reduction_norm is off
  RNPath path = RNPath::Quadratic;
};

// The linear path exists only for the exponential activation, and exact
// pre-activation normalization couples p_i and q_j inside the norm, which
// destroys the factorization. Reject such configs up front.
inline void validate(const CausalRNConfig& cfg) {
  if (cfg.d_e <= 0 || cfg.d_h <= 0) {
    throw ConfigError("causal_rn: d_e and d_h must be positive");
  }
  if (cfg.path == RNPath::Linear) {
    if (cfg.activation != Activation::Exp) {
      throw ConfigError("causal_rn: the linear path requires the exp "
                        "activation (got " +
                        std::string(to_string(cfg.activation)) + ")");
    }
    if (cfg.pre_act_norm == PreActNorm::Exact) {
      throw ConfigError("causal_rn: exact pre-activation normalization is not "
                        "decomposable; the linear path supports only none or "
                        "approximate");
    }
  }
}

template <class T>
struct CausalRNParamsT {
  TensorT<T> W_left;   // [d_h, d_e]
  TensorT<T> W_right;  // [d_h, d_e]
  TensorT<T> b_in;     // [d_h]
  TensorT<T> W_out;    // [d_e, d_h]
  TensorT<T> b_out;    // [d_e]
  LayerNormParamsT<T> ln_pre;   // over d_h, used when pre_act_norm != None
  LayerNormParamsT<T> ln_post;  // over d_h, used when post_reduction_norm

  static CausalRNParamsT make(const CausalRNConfig& cfg) {
    validate(cfg);
    CausalRNParamsT p;
    p.W_left = TensorT<T>::zeros({cfg.d_h, cfg.d_e});
    p.W_right = TensorT<T>::zeros({cfg.d_h, cfg.d_e});
    p.b_in = TensorT<T>::zeros({cfg.d_h});
    p.W_out = TensorT<T>::zeros({cfg.d_e, cfg.d_h});
    p.b_out = TensorT<T>::zeros({cfg.d_e});
    p.ln_pre = LayerNormParamsT<T>::make(cfg.d_h);
    p.ln_post = LayerNormParamsT<T>::make(cfg.d_h);
    return p;
  }
};

// One block: pre-norm residual around the cell.
template <class T>
struct RNBlockParamsT {
  CausalRNParamsT<T> rn;
  LayerNormParamsT<T> ln_block;  // over d_e

  static RNBlockParamsT make(const CausalRNConfig& cfg) {
    RNBlockParamsT b;
    b.rn = CausalRNParamsT<T>::make(cfg);
    b.ln_block = LayerNormParamsT<T>::make(cfg.d_e);
    return b;
  }
};

// ---------------------------------------------------------------------------
// Pairwise reduction kernels
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t tri(std::int64_t j) { return j * (j + 1) / 2; }

struct PairDims {
  std::int64_t batch = 1;
  int n = 0;
  int h = 0;
  std::int64_t pairs_per_batch = 0;  // cache rows per batch element
};

template <class T>
inline PairDims pair_dims(const TensorT<T>& P, const TensorT<T>& Q,
                          bool causal, const char* name) {
  if (P.shape != Q.shape) {
    throw std::invalid_argument(std::string(name) + ": P and Q shapes differ: " +
                                shape_str(P.shape) + " vs " +
                                shape_str(Q.shape));
  }
  if (P.rank() < 2) {
    throw std::invalid_argument(std::string(name) + ": rank >= 2 required");
  }
  PairDims d;
  d.n = P.shape[P.rank() - 2];
  d.h = P.shape[P.rank() - 1];
  d.batch = P.numel() / (static_cast<std::int64_t>(d.n) * d.h);
  d.pairs_per_batch = causal ? tri(d.n) : static_cast<std::int64_t>(d.n) * d.n;
  return d;
}

}  // namespace detail

// H[., j, :] = sum_{i in R(j)} act(P[., i, :] + Q[., j, :]) where R(j) is
// {0..j} (causal) or {0..n-1} (bidirectional). Activated pair values are
// cached for the backward pass.
template <class T>
TensorT<T> pair_sum(const TensorT<T>& P, const TensorT<T>& Q, Activation act,
                    bool causal) {
  const auto dm = detail::pair_dims(P, Q, causal, "pair_sum");
  TensorT<T> out = TensorT<T>::zeros(P.shape);
  auto cache = std::make_shared<std::vector<T>>(dm.batch * dm.pairs_per_batch *
                                                dm.h);
  const T* pp = P.ptr();
  const T* pq = Q.ptr();
  T* po = out.ptr();
  const int n = dm.n, h = dm.h;
  auto run = [&](auto actf) {
    for (std::int64_t b = 0; b < dm.batch; ++b) {
      const T* Pb = pp + b * n * h;
      const T* Qb = pq + b * n * h;
      T* Ob = po + b * n * h;
      T* Cb = cache->data() + b * dm.pairs_per_batch * h;
      for (int j = 0; j < n; ++j) {
        const T* qj = Qb + static_cast<std::int64_t>(j) * h;
        T* hj = Ob + static_cast<std::int64_t>(j) * h;
        const int lim = causal ? j : n - 1;
        T* crow = Cb + (causal ? detail::tri(j) : static_cast<std::int64_t>(j) * n) * h;
        for (int i = 0; i <= lim; ++i) {
          const T* pi = Pb + static_cast<std::int64_t>(i) * h;
          T* a = crow + static_cast<std::int64_t>(i) * h;
          for (int c = 0; c < h; ++c) {
            const T y = actf(pi[c] + qj[c]);
            a[c] = y;
            hj[c] += y;
          }
        }
      }
    }
  };
  switch (act) {
    case Activation::Exp:
      run([](T v) { return std::exp(v); });
      break;
    case Activation::Relu:
      run([](T v) { return v > T(0) ? v : T(0); });
      break;
    case Activation::Elu:
      run([](T v) { return v > T(0) ? v : std::exp(v) - T(1); });
      break;
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idp = tp->node_of(P);
  const int idq = tp->node_of(Q);
  if (idp < 0 && idq < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> Pv = P, Qv = Q;
  tp->set_backward(oid, [tp, Pv, Qv, idp, idq, oid, dm, act, causal, cache]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    std::vector<T>* gp = idp >= 0 ? &tp->accum(idp, Pv.numel()) : nullptr;
    std::vector<T>* gq = idq >= 0 ? &tp->accum(idq, Qv.numel()) : nullptr;
    const int n = dm.n, h = dm.h;
    for (std::int64_t b = 0; b < dm.batch; ++b) {
      const T* Gb = pg + b * n * h;
      const T* Cb = cache->data() + b * dm.pairs_per_batch * h;
      T* gpb = gp ? gp->data() + b * n * h : nullptr;
      T* gqb = gq ? gq->data() + b * n * h : nullptr;
      for (int j = 0; j < n; ++j) {
        const T* gj = Gb + static_cast<std::int64_t>(j) * h;
        const int lim = causal ? j : n - 1;
        const T* crow =
            Cb + (causal ? detail::tri(j) : static_cast<std::int64_t>(j) * n) * h;
        T* gqj = gqb ? gqb + static_cast<std::int64_t>(j) * h : nullptr;
        for (int i = 0; i <= lim; ++i) {
          const T* a = crow + static_cast<std::int64_t>(i) * h;
          T* gpi = gpb ? gpb + static_cast<std::int64_t>(i) * h : nullptr;
          for (int c = 0; c < h; ++c) {
            const T d = detail::act_grad_from_value(act, a[c]) * gj[c];
            if (gpi) gpi[c] += d;
            if (gqj) gqj[c] += d;
          }
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// Exact pre-activation normalization: H[., j, :] = sum_{i in R(j)}
// act(LN(P_i + Q_j)). The norm couples both operands, so every pair is
// materialized; caches hold the normalized vectors and activated values.
template <class T>
TensorT<T> pair_sum_normed(const TensorT<T>& P, const TensorT<T>& Q,
                           const TensorT<T>& gain, const TensorT<T>& bias,
                           T eps, Activation act, bool causal) {
  const auto dm = detail::pair_dims(P, Q, causal, "pair_sum_normed");
  const int n = dm.n, h = dm.h;
  if (gain.numel() != h || bias.numel() != h) {
    throw std::invalid_argument("pair_sum_normed: gain/bias must have size " +
                                std::to_string(h));
  }
  TensorT<T> out = TensorT<T>::zeros(P.shape);
  const std::int64_t cache_elems = dm.batch * dm.pairs_per_batch * h;
  auto acache = std::make_shared<std::vector<T>>(cache_elems);
  auto xhat = std::make_shared<std::vector<T>>(cache_elems);
  auto rstd = std::make_shared<std::vector<T>>(dm.batch * dm.pairs_per_batch);
  const T* pp = P.ptr();
  const T* pq = Q.ptr();
  const T* pgain = gain.ptr();
  const T* pbias = bias.ptr();
  T* po = out.ptr();
  auto run = [&](auto actf) {
    std::vector<T> v(static_cast<std::size_t>(h));
    for (std::int64_t b = 0; b < dm.batch; ++b) {
      const T* Pb = pp + b * n * h;
      const T* Qb = pq + b * n * h;
      T* Ob = po + b * n * h;
      const std::int64_t cbase = b * dm.pairs_per_batch;
      for (int j = 0; j < n; ++j) {
        const T* qj = Qb + static_cast<std::int64_t>(j) * h;
        T* hj = Ob + static_cast<std::int64_t>(j) * h;
        const int lim = causal ? j : n - 1;
        const std::int64_t rowbase =
            cbase + (causal ? detail::tri(j) : static_cast<std::int64_t>(j) * n);
        for (int i = 0; i <= lim; ++i) {
          const T* pi = Pb + static_cast<std::int64_t>(i) * h;
          T mu = 0;
          for (int c = 0; c < h; ++c) {
            v[static_cast<std::size_t>(c)] = pi[c] + qj[c];
            mu += v[static_cast<std::size_t>(c)];
          }
          mu /= static_cast<T>(h);
          T var = 0;
          for (int c = 0; c < h; ++c) {
            const T t = v[static_cast<std::size_t>(c)] - mu;
            var += t * t;
          }
          var /= static_cast<T>(h);
          const T rs = T(1) / std::sqrt(var + eps);
          const std::int64_t row = rowbase + i;
          (*rstd)[static_cast<std::size_t>(row)] = rs;
          T* hx = xhat->data() + row * h;
          T* ha = acache->data() + row * h;
          for (int c = 0; c < h; ++c) {
            const T xh = (v[static_cast<std::size_t>(c)] - mu) * rs;
            hx[c] = xh;
            const T y = actf(xh * pgain[c] + pbias[c]);
            ha[c] = y;
            hj[c] += y;
          }
        }
      }
    }
  };
  switch (act) {
    case Activation::Exp:
      run([](T v) { return std::exp(v); });
      break;
    case Activation::Relu:
      run([](T v) { return v > T(0) ? v : T(0); });
      break;
    case Activation::Elu:
      run([](T v) { return v > T(0) ? v : std::exp(v) - T(1); });
      break;
  }
  Tape<T>* tp = active_tape<T>();
  if (!tp) return out;
  const int idp = tp->node_of(P);
  const int idq = tp->node_of(Q);
  const int idg = tp->node_of(gain);
  const int idb = tp->node_of(bias);
  if (idp < 0 && idq < 0 && idg < 0 && idb < 0) return out;
  const int oid = tp->add_node(nullptr);
  TensorT<T> Pv = P, Qv = Q, gv = gain;
  tp->set_backward(oid, [tp, Pv, Qv, gv, idp, idq, idg, idb, oid, dm, act,
                         causal, acache, xhat, rstd]() {
    const std::vector<T>* g = tp->grad_buf(oid);
    if (!g) return;
    const T* pg = g->data();
    const T* pgain = gv.ptr();
    const int n = dm.n, h = dm.h;
    std::vector<T>* gp = idp >= 0 ? &tp->accum(idp, Pv.numel()) : nullptr;
    std::vector<T>* gq = idq >= 0 ? &tp->accum(idq, Qv.numel()) : nullptr;
    std::vector<T>* gg = idg >= 0 ? &tp->accum(idg, h) : nullptr;
    std::vector<T>* gb = idb >= 0 ? &tp->accum(idb, h) : nullptr;
    std::vector<T> gy(static_cast<std::size_t>(h));
    for (std::int64_t b = 0; b < dm.batch; ++b) {
      const T* Gb = pg + b * n * h;
      const std::int64_t cbase = b * dm.pairs_per_batch;
      T* gpb = gp ? gp->data() + b * n * h : nullptr;
      T* gqb = gq ? gq->data() + b * n * h : nullptr;
      for (int j = 0; j < n; ++j) {
        const T* gj = Gb + static_cast<std::int64_t>(j) * h;
        const int lim = causal ? j : n - 1;
        const std::int64_t rowbase =
            cbase + (causal ? detail::tri(j) : static_cast<std::int64_t>(j) * n);
        T* gqj = gqb ? gqb + static_cast<std::int64_t>(j) * h : nullptr;
        for (int i = 0; i <= lim; ++i) {
          const std::int64_t row = rowbase + i;
          const T* ha = acache->data() + row * h;
          const T* hx = xhat->data() + row * h;
          const T rs = (*rstd)[static_cast<std::size_t>(row)];
          T m1 = 0, m2 = 0;
          for (int c = 0; c < h; ++c) {
            const T gyc = detail::act_grad_from_value(act, ha[c]) * gj[c];
            gy[static_cast<std::size_t>(c)] = gyc;
            const T gxh = gyc * pgain[c];
            m1 += gxh;
            m2 += gxh * hx[c];
          }
          if (gg) {
            for (int c = 0; c < h; ++c) {
              (*gg)[static_cast<std::size_t>(c)] +=
                  gy[static_cast<std::size_t>(c)] * hx[c];
            }
          }
          if (gb) {
            for (int c = 0; c < h; ++c) {
              (*gb)[static_cast<std::size_t>(c)] += gy[static_cast<std::size_t>(c)];
            }
          }
          m1 /= static_cast<T>(h);
          m2 /= static_cast<T>(h);
          T* gpi = gpb ? gpb + static_cast<std::int64_t>(i) * h : nullptr;
          for (int c = 0; c < h; ++c) {
            const T gxh = gy[static_cast<std::size_t>(c)] * pgain[c];
            const T gvc = rs * (gxh - m1 - hx[c] * m2);
            if (gpi) gpi[c] += gvc;
            if (gqj) gqj[c] += gvc;
          }
        }
      }
    }
  });
  out.tape_id = oid;
  out.tape_owner = tp;
  return out;
}

// ---------------------------------------------------------------------------
// Linearized reduction (exp activation only)
// ---------------------------------------------------------------------------

// H[., j, :] = exp(Q_j) * sum_{i<=j} exp(P_i), evaluated in log space as
// exp(Q + logcumsumexp(P)). With row_shift the per-position channel max is
// subtracted before exponentiating; the result is then collinear with the
// true value, which a following post-reduction norm maps to the exact
// answer even when pre-activations are in the hundreds.
template <class T>
TensorT<T> linearized_reduce(const TensorT<T>& P, const TensorT<T>& Q,
                             bool row_shift = false) {
  detail::pair_dims(P, Q, true, "linearized_reduce");  // shape checks
  auto z = add(Q, logcumsumexp(P, P.rank() - 2));
  return row_shift ? exp_row_shifted(z) : exp(z);
}

// ---------------------------------------------------------------------------
// Reduction tail (vector form, shared by decode and the oracles)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline std::vector<T> matvec_nt(const TensorT<T>& W, const std::vector<T>& x) {
  const int r = W.shape[0], c = W.shape[1];
  std::vector<T> out(static_cast<std::size_t>(r), T(0));
  const T* pw = W.ptr();
  for (int i = 0; i < r; ++i) {
    const T* row = pw + static_cast<std::int64_t>(i) * c;
    T s = 0;
    for (int j = 0; j < c; ++j) s += row[j] * x[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

template <class T>
inline std::vector<T> ln_vec(const LayerNormParamsT<T>& p,
                             const std::vector<T>& x) {
  const int d = static_cast<int>(x.size());
  T mu = 0;
  for (T v : x) mu += v;
  mu /= static_cast<T>(d);
  T var = 0;
  for (T v : x) var += (v - mu) * (v - mu);
  var /= static_cast<T>(d);
  const T rs = T(1) / std::sqrt(var + p.eps);
  std::vector<T> out(x.size());
  for (int c = 0; c < d; ++c) {
    out[static_cast<std::size_t>(c)] =
        (x[static_cast<std::size_t>(c)] - mu) * rs * p.gain(c) + p.bias(c);
  }
  return out;
}

template <class T>
inline T logaddexp(T a, T b) {
  const T ninf = -std::numeric_limits<T>::infinity();
  if (a == ninf) return b;
  if (b == ninf) return a;
  const T m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

// Maps a raw summed hidden vector h_j at 1-based position j to the cell
// output. Under post-reduction norm the 1/j average is dropped: layer
// normalization is invariant to positive scaling of its input.
template <class T>
std::vector<T> reduction_tail(const std::vector<T>& h_j, int j,
                              const CausalRNParamsT<T>& params,
                              const CausalRNConfig& cfg) {
  std::vector<T> hv;
  if (cfg.post_reduction_norm) {
    hv = detail::ln_vec(params.ln_post, h_j);
  } else if (cfg.prefix_average) {
    hv = h_j;
    const T inv = T(1) / static_cast<T>(j);
    for (auto& v : hv) v *= inv;
  } else {
    hv = h_j;
  }
  auto y = detail::matvec_nt(params.W_out, hv);
  for (int c = 0; c < static_cast<int>(y.size()); ++c) {
    y[static_cast<std::size_t>(c)] += params.b_out(c);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Cell forwards
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
inline std::vector<T> prefix_scales(int n, bool causal) {
  std::vector<T> s(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    s[static_cast<std::size_t>(j)] =
        causal ? T(1) / static_cast<T>(j + 1) : T(1) / static_cast<T>(n);
  }
  return s;
}

// Shared tail for the batched forwards.
template <class T>
TensorT<T> reduction_tail_batched(const TensorT<T>& H,
                                  const CausalRNParamsT<T>& params,
                                  const CausalRNConfig& cfg, bool causal) {
  if (cfg.post_reduction_norm) {
    auto hn = layernorm(params.ln_post, H);
    return add(matmul_nt(hn, params.W_out), params.b_out);
  }
  const int n = H.shape[H.rank() - 2];
  TensorT<T> scaled = H;
  if (cfg.prefix_average) {
    scaled = row_scale(H, prefix_scales<T>(n, causal));
  }
  return add(matmul_nt(scaled, params.W_out), params.b_out);
}

template <class T>
TensorT<T> rn_forward_impl(const CausalRNParamsT<T>& params,
                           const CausalRNConfig& cfg, const TensorT<T>& X,
                           bool causal) {
  validate(cfg);
  if (X.shape.back() != cfg.d_e) {
    throw std::invalid_argument("causal_rn: trailing dimension of " +
                                shape_str(X.shape) + " must equal d_e = " +
                                std::to_string(cfg.d_e));
  }
  auto P = matmul_nt(X, params.W_left);
  auto Q = add(matmul_nt(X, params.W_right), params.b_in);
  TensorT<T> H;
  if (cfg.path == RNPath::Linear) {
    auto Pn = cfg.pre_act_norm == PreActNorm::Approximate
                  ? layernorm(params.ln_pre, P)
                  : P;
    auto Qn = cfg.pre_act_norm == PreActNorm::Approximate
                  ? layernorm(params.ln_pre, Q)
                  : Q;
    if (causal) {
      H = linearized_reduce(Pn, Qn, cfg.post_reduction_norm);
    } else {
      auto S = logsumexp(Pn, Pn.rank() - 2);
      if (Pn.rank() == 3) {
        S = reshape(S, {Pn.shape[0], 1, Pn.shape[2]});
      }
      auto z = add(Qn, S);
      H = cfg.post_reduction_norm ? exp_row_shifted(z) : exp(z);
    }
  } else {
    switch (cfg.pre_act_norm) {
      case PreActNorm::Exact:
        H = pair_sum_normed(P, Q, params.ln_pre.gain, params.ln_pre.bias,
                            params.ln_pre.eps, cfg.activation, causal);
        break;
      case PreActNorm::Approximate:
        H = pair_sum(layernorm(params.ln_pre, P), layernorm(params.ln_pre, Q),
                     cfg.activation, causal);
        break;
      case PreActNorm::None:
        H = pair_sum(P, Q, cfg.activation, causal);
        break;
    }
  }
  return reduction_tail_batched(H, params, cfg, causal);
}

// Reference oracle: materialize every pair [x_i; x_j] and run the literal
// MLP with W_in = (W_left | W_right). O(n^2) time and memory, no tape.
template <class T>
TensorT<T> rn_bruteforce_impl(const CausalRNParamsT<T>& params,
                              const CausalRNConfig& cfg, const TensorT<T>& X,
                              bool causal) {
  validate(cfg);
  const int d_e = cfg.d_e, d_h = cfg.d_h;
  const int n = X.shape[X.rank() - 2];
  const std::int64_t batch = X.numel() / (static_cast<std::int64_t>(n) * d_e);
  TensorT<T> out = TensorT<T>::zeros(X.shape);
  const T* px = X.ptr();
  T* po = out.ptr();
  std::vector<T> u(static_cast<std::size_t>(2 * d_e));
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* Xb = px + b * n * d_e;
    T* Ob = po + b * n * d_e;
    for (int j = 0; j < n; ++j) {
      std::vector<T> acc(static_cast<std::size_t>(d_h), T(0));
      const int lo = causal ? 0 : 0;
      const int hi = causal ? j : n - 1;
      for (int i = lo; i <= hi; ++i) {
        for (int c = 0; c < d_e; ++c) {
          u[static_cast<std::size_t>(c)] = Xb[static_cast<std::int64_t>(i) * d_e + c];
          u[static_cast<std::size_t>(d_e + c)] =
              Xb[static_cast<std::int64_t>(j) * d_e + c];
        }
        // z = (W_left | W_right) u + b_in over the concatenated pair
        std::vector<T> z(static_cast<std::size_t>(d_h));
        for (int r = 0; r < d_h; ++r) {
          T s = params.b_in(r);
          for (int c = 0; c < d_e; ++c) {
            s += params.W_left(r, c) * u[static_cast<std::size_t>(c)];
            s += params.W_right(r, c) * u[static_cast<std::size_t>(d_e + c)];
          }
          z[static_cast<std::size_t>(r)] = s;
        }
        std::vector<T> a;
        switch (cfg.pre_act_norm) {
          case PreActNorm::None:
            a = z;
            break;
          case PreActNorm::Exact:
            a = ln_vec(params.ln_pre, z);
            break;
          case PreActNorm::Approximate: {
            // normalize each operand separately: mu(p_i) + mu(q_j)
            std::vector<T> p(static_cast<std::size_t>(d_h)),
                q(static_cast<std::size_t>(d_h));
            for (int r = 0; r < d_h; ++r) {
              T sp = 0, sq = params.b_in(r);
              for (int c = 0; c < d_e; ++c) {
                sp += params.W_left(r, c) * u[static_cast<std::size_t>(c)];
                sq += params.W_right(r, c) * u[static_cast<std::size_t>(d_e + c)];
              }
              p[static_cast<std::size_t>(r)] = sp;
              q[static_cast<std::size_t>(r)] = sq;
            }
            auto pn = ln_vec(params.ln_pre, p);
            auto qn = ln_vec(params.ln_pre, q);
            a.resize(static_cast<std::size_t>(d_h));
            for (int r = 0; r < d_h; ++r) {
              a[static_cast<std::size_t>(r)] = pn[static_cast<std::size_t>(r)] +
                                               qn[static_cast<std::size_t>(r)];
            }
            break;
          }
        }
        for (int r = 0; r < d_h; ++r) {
          acc[static_cast<std::size_t>(r)] +=
              act_value(cfg.activation, a[static_cast<std::size_t>(r)]);
        }
      }
      auto y = reduction_tail(acc, causal ? j + 1 : n, params, cfg);
      for (int c = 0; c < d_e; ++c) {
        Ob[static_cast<std::int64_t>(j) * d_e + c] = y[static_cast<std::size_t>(c)];
      }
    }
  }
  return out;
}

}  // namespace detail

// Fast path, Eq-rearranged: p/q precomputation plus either the pairwise
// kernels (quadratic) or the log-space factorized reduction (linear).
template <class T>
TensorT<T> causal_rn_forward(const CausalRNParamsT<T>& params,
                             const CausalRNConfig& cfg, const TensorT<T>& X) {
  return detail::rn_forward_impl(params, cfg, X, true);
}

// Reference oracle for tests and small n; O(n^2) pair materialization.
template <class T>
TensorT<T> causal_rn_bruteforce(const CausalRNParamsT<T>& params,
                                const CausalRNConfig& cfg,
                                const TensorT<T>& X) {
  return detail::rn_bruteforce_impl(params, cfg, X, true);
}

// Bidirectional variant: every position aggregates over the whole sequence
// (1/n average under the same normalization rules).
template <class T>
TensorT<T> birn_forward(const CausalRNParamsT<T>& params,
                        const CausalRNConfig& cfg, const TensorT<T>& X) {
  return detail::rn_forward_impl(params, cfg, X, false);
}

template <class T>
TensorT<T> birn_bruteforce(const CausalRNParamsT<T>& params,
                           const CausalRNConfig& cfg, const TensorT<T>& X) {
  return detail::rn_bruteforce_impl(params, cfg, X, false);
}

// Pre-norm residual block: X + cell(LN(X)).
template <class T>
TensorT<T> rn_block_forward(const RNBlockParamsT<T>& block,
                            const CausalRNConfig& cfg, const TensorT<T>& X) {
  return add(X, causal_rn_forward(block.rn, cfg, layernorm(block.ln_block, X)));
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

// Per-cell decode memory. The linear path keeps a fixed d_h-sized running
// sum of exp(p_i), stored in log space (-inf sentinel when empty). The
// quadratic path keeps the growing pool of cached left-operand vectors.
template <class T>
struct DecodeStateT {
  int position = 0;
  std::vector<T> running_sum_log;  // linear path, size d_h
  std::vector<T> pool;             // quadratic path, position * d_h values

  std::size_t state_bytes() const {
    return (running_sum_log.size() + pool.size()) * sizeof(T);
  }
};

template <class T>
DecodeStateT<T> decode_init(const CausalRNParamsT<T>&,
                            const CausalRNConfig& cfg) {
  validate(cfg);
  DecodeStateT<T> st;
  if (cfg.path == RNPath::Linear) {
    st.running_sum_log.assign(static_cast<std::size_t>(cfg.d_h),
                              -std::numeric_limits<T>::infinity());
  }
  return st;
}

// Consume one input vector and emit the cell output at the new position.
// Linear path: O(d_h * d_e) per step independent of position. Quadratic
// path: appends to the pool and rescans it, O(position * d_h).
template <class T>
std::vector<T> decode_step(DecodeStateT<T>& state,
                           const CausalRNParamsT<T>& params,
                           const CausalRNConfig& cfg,
                           const std::vector<T>& x_new) {
  if (static_cast<int>(x_new.size()) != cfg.d_e) {
    throw std::invalid_argument("decode_step: input size " +
                                std::to_string(x_new.size()) +
                                " does not match d_e = " +
                                std::to_string(cfg.d_e));
  }
  auto p = detail::matvec_nt(params.W_left, x_new);
  auto q = detail::matvec_nt(params.W_right, x_new);
  for (int c = 0; c < cfg.d_h; ++c) q[static_cast<std::size_t>(c)] += params.b_in(c);

  const int h = cfg.d_h;
  std::vector<T> acc(static_cast<std::size_t>(h), T(0));
  if (cfg.path == RNPath::Linear) {
    if (cfg.pre_act_norm == PreActNorm::Approximate) {
      p = detail::ln_vec(params.ln_pre, p);
      q = detail::ln_vec(params.ln_pre, q);
    }
    for (int c = 0; c < h; ++c) {
      auto& rs = state.running_sum_log[static_cast<std::size_t>(c)];
      rs = detail::logaddexp(rs, p[static_cast<std::size_t>(c)]);
    }
    state.position += 1;
    std::vector<T> z(static_cast<std::size_t>(h));
    for (int c = 0; c < h; ++c) {
      z[static_cast<std::size_t>(c)] =
          q[static_cast<std::size_t>(c)] +
          state.running_sum_log[static_cast<std::size_t>(c)];
    }
    if (cfg.post_reduction_norm) {
      // mirror the parallel path's per-position rescaling
      T m = z[0];
      for (int c = 1; c < h; ++c) m = std::max(m, z[static_cast<std::size_t>(c)]);
      const T cap = stable_exp_cap<T>();
      const T shift = m > cap ? m - cap : T(0);
      for (int c = 0; c < h; ++c) {
        acc[static_cast<std::size_t>(c)] =
            std::exp(z[static_cast<std::size_t>(c)] - shift);
      }
    } else {
      for (int c = 0; c < h; ++c) {
        acc[static_cast<std::size_t>(c)] =
            std::exp(z[static_cast<std::size_t>(c)]);
      }
    }
  } else {
    // cache the minimal left-operand: normalized for approximate, raw p_i
    // for exact (the norm needs p_i + q_j) and none
    std::vector<T> cached = p;
    if (cfg.pre_act_norm == PreActNorm::Approximate) {
      cached = detail::ln_vec(params.ln_pre, p);
      q = detail::ln_vec(params.ln_pre, q);
    }
    state.pool.insert(state.pool.end(), cached.begin(), cached.end());
    state.position += 1;
    std::vector<T> v(static_cast<std::size_t>(h));
    for (int i = 0; i < state.position; ++i) {
      const T* pi = state.pool.data() + static_cast<std::int64_t>(i) * h;
      for (int c = 0; c < h; ++c) {
        v[static_cast<std::size_t>(c)] = pi[c] + q[static_cast<std::size_t>(c)];
      }
      if (cfg.pre_act_norm == PreActNorm::Exact) {
        v = detail::ln_vec(params.ln_pre, v);
      }
      for (int c = 0; c < h; ++c) {
        acc[static_cast<std::size_t>(c)] +=
            detail::act_value(cfg.activation, v[static_cast<std::size_t>(c)]);
      }
    }
  }
  return reduction_tail(acc, state.position, params, cfg);
}

}  // namespace crn
