#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "crn/ops.hpp"
#include "crn/tensor.hpp"

namespace crn {

template <class T>
struct LayerNormParamsT {
  TensorT<T> gain;
  TensorT<T> bias;
  T eps = static_cast<T>(1e-5);

  static LayerNormParamsT make(int d) {
    LayerNormParamsT p;
    p.gain = TensorT<T>::full({d}, T(1));
    p.bias = TensorT<T>::zeros({d});
    return p;
  }
};

// Single-hidden-layer MLP: W_out psi(W_in x + b_in) + b_out.
template <class T>
struct MlpParamsT {
  TensorT<T> W_in;   // [d_h, d_in]
  TensorT<T> b_in;   // [d_h]
  TensorT<T> W_out;  // [d_out, d_h]
  TensorT<T> b_out;  // [d_out]
  Activation activation = Activation::Relu;

  static MlpParamsT make(int d_in, int d_h, int d_out, Activation act) {
    MlpParamsT p;
    p.W_in = TensorT<T>::zeros({d_h, d_in});
    p.b_in = TensorT<T>::zeros({d_h});
    p.W_out = TensorT<T>::zeros({d_out, d_h});
    p.b_out = TensorT<T>::zeros({d_out});
    p.activation = act;
    return p;
  }
};

template <class T>
struct EmbeddingParamsT {
  TensorT<T> token_table;  // [vocab, d_e]
  TensorT<T> pos_table;    // [max_context, d_e]

  static EmbeddingParamsT make(int vocab, int max_context, int d_e) {
    EmbeddingParamsT p;
    p.token_table = TensorT<T>::zeros({vocab, d_e});
    p.pos_table = TensorT<T>::zeros({max_context, d_e});
    return p;
  }
};

// Single-head attention projections, all [d_e, d_e].
template <class T>
struct AttentionParamsT {
  TensorT<T> W_q, W_k, W_v, W_o;

  static AttentionParamsT make(int d_e) {
    AttentionParamsT p;
    p.W_q = TensorT<T>::zeros({d_e, d_e});
    p.W_k = TensorT<T>::zeros({d_e, d_e});
    p.W_v = TensorT<T>::zeros({d_e, d_e});
    p.W_o = TensorT<T>::zeros({d_e, d_e});
    return p;
  }
};

template <class T>
TensorT<T> layernorm(const LayerNormParamsT<T>& p, const TensorT<T>& x) {
  return layernorm(x, p.gain, p.bias, p.eps);
}

// Applied position-wise: the trailing dimension of x must equal d_in.
template <class T>
TensorT<T> mlp_forward(const MlpParamsT<T>& p, const TensorT<T>& x) {
  auto h = add(matmul_nt(x, p.W_in), p.b_in);
  return add(matmul_nt(apply_activation(p.activation, h), p.W_out), p.b_out);
}

// token_table[id] + pos_table[position], one sequence: returns [seq, d_e].
template <class T>
TensorT<T> embed(const EmbeddingParamsT<T>& p,
                 const std::vector<std::int32_t>& ids) {
  auto out3 = embed_tokens(p.token_table, p.pos_table, ids, 1,
                           static_cast<int>(ids.size()));
  // squeeze the leading batch dim; buffer is shared, shape is local
  out3.shape = {static_cast<int>(ids.size()), p.token_table.shape[1]};
  return out3;
}

// Batched variant used by the models: ids laid out row-major [batch, seq].
template <class T>
TensorT<T> embed_batch(const EmbeddingParamsT<T>& p,
                       const std::vector<std::int32_t>& ids, int batch,
                       int seq) {
  return embed_tokens(p.token_table, p.pos_table, ids, batch, seq);
}

// Single-head scaled dot-product attention with a strict causal mask
// (position j attends to i <= j), scale 1/sqrt(d_e), output through W_o.
// x is [seq, d_e] or [batch, seq, d_e].
template <class T>
TensorT<T> causal_attention(const AttentionParamsT<T>& p, const TensorT<T>& x) {
  const int d_e = x.shape.back();
  auto q = matmul_nt(x, p.W_q);
  auto k = matmul_nt(x, p.W_k);
  auto v = matmul_nt(x, p.W_v);
  auto scores =
      mul_scalar(matmul_nt(q, k), T(1) / std::sqrt(static_cast<T>(d_e)));
  auto attn = causal_softmax(scores);
  return matmul_nt(matmul(attn, v), p.W_o);
}

}  // namespace crn
