#pragma once

// Full sequence models: token/position embeddings, a stack of blocks
// (relation-network cells or single-head attention + MLP), a final layer
// norm, and a bias-free output head. Includes the incremental decoding
// session for both architectures.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "crn/causal_rn.hpp"
#include "crn/copy_task.hpp"
#include "crn/layers.hpp"
#include "crn/ops.hpp"
#include "crn/tensor.hpp"

namespace crn {

enum class ModelKind { CausalRN, Transformer };

inline const char* to_string(ModelKind k) {
  return k == ModelKind::CausalRN ? "causalrn" : "transformer";
}

struct ModelConfig {
  ModelKind kind = ModelKind::CausalRN;
  int vocab = 29;
  int max_context = 514;
  int d_e = 64;
  int d_h = 64;  // cell hidden size; transformer MLP uses 4*d_e regardless
  int blocks = 4;
  CausalRNConfig rn;            // variant switches for the cell
  bool transformer_prenorm = true;

  void validate_() const {
    if (vocab <= 0 || max_context <= 0 || d_e <= 0 || d_h <= 0 || blocks <= 0) {
      throw ConfigError("model: all sizes must be positive");
    }
    if (kind == ModelKind::CausalRN) {
      CausalRNConfig c = rn;
      c.d_e = d_e;
      c.d_h = d_h;
      validate(c);
    }
  }

  CausalRNConfig cell_config() const {
    CausalRNConfig c = rn;
    c.d_e = d_e;
    c.d_h = d_h;
    return c;
  }
};

// How a parameter should be initialized.
enum class ParamKind { Weight, OutputWeight, Bias, Gain, Embedding };

template <class T>
struct TransformerBlockT {
  AttentionParamsT<T> attn;
  MlpParamsT<T> mlp;
  LayerNormParamsT<T> ln1, ln2;
};

template <class T>
struct ModelT {
  ModelConfig cfg;
  EmbeddingParamsT<T> emb;
  std::vector<RNBlockParamsT<T>> rn_blocks;
  std::vector<TransformerBlockT<T>> tf_blocks;
  LayerNormParamsT<T> ln_final;
  TensorT<T> W_head;  // [vocab, d_e]

  static ModelT create(const ModelConfig& mc) {
    mc.validate_();
    ModelT m;
    m.cfg = mc;
    m.emb = EmbeddingParamsT<T>::make(mc.vocab, mc.max_context, mc.d_e);
    if (mc.kind == ModelKind::CausalRN) {
      const CausalRNConfig cc = mc.cell_config();
      for (int i = 0; i < mc.blocks; ++i) {
        m.rn_blocks.push_back(RNBlockParamsT<T>::make(cc));
      }
    } else {
      for (int i = 0; i < mc.blocks; ++i) {
        TransformerBlockT<T> b;
        b.attn = AttentionParamsT<T>::make(mc.d_e);
        b.mlp = MlpParamsT<T>::make(mc.d_e, 4 * mc.d_e, mc.d_e,
                                    Activation::Relu);
        b.ln1 = LayerNormParamsT<T>::make(mc.d_e);
        b.ln2 = LayerNormParamsT<T>::make(mc.d_e);
        m.tf_blocks.push_back(std::move(b));
      }
    }
    m.ln_final = LayerNormParamsT<T>::make(mc.d_e);
    m.W_head = TensorT<T>::zeros({mc.vocab, mc.d_e});
    m.set_requires_grad(true);
    return m;
  }

  int residual_connections() const {
    return cfg.kind == ModelKind::CausalRN ? cfg.blocks : 2 * cfg.blocks;
  }

  // Deterministic traversal of every trainable tensor used under this
  // config. Names are unique; unused norm parameters (e.g. ln_pre when
  // pre_act_norm = none) are skipped.
  template <class Fn>
  void visit(Fn&& fn) {
    fn("emb.token_table", emb.token_table, ParamKind::Embedding);
    fn("emb.pos_table", emb.pos_table, ParamKind::Embedding);
    const CausalRNConfig cc = cfg.cell_config();
    for (int i = 0; i < static_cast<int>(rn_blocks.size()); ++i) {
      const std::string pre = "block" + std::to_string(i) + ".";
      auto& b = rn_blocks[static_cast<std::size_t>(i)];
      fn(pre + "rn.W_left", b.rn.W_left, ParamKind::Weight);
      fn(pre + "rn.W_right", b.rn.W_right, ParamKind::Weight);
      fn(pre + "rn.b_in", b.rn.b_in, ParamKind::Bias);
      fn(pre + "rn.W_out", b.rn.W_out, ParamKind::OutputWeight);
      fn(pre + "rn.b_out", b.rn.b_out, ParamKind::Bias);
      if (cc.pre_act_norm != PreActNorm::None) {
        fn(pre + "rn.ln_pre.gain", b.rn.ln_pre.gain, ParamKind::Gain);
        fn(pre + "rn.ln_pre.bias", b.rn.ln_pre.bias, ParamKind::Bias);
      }
      if (cc.post_reduction_norm) {
        fn(pre + "rn.ln_post.gain", b.rn.ln_post.gain, ParamKind::Gain);
        fn(pre + "rn.ln_post.bias", b.rn.ln_post.bias, ParamKind::Bias);
      }
      fn(pre + "ln_block.gain", b.ln_block.gain, ParamKind::Gain);
      fn(pre + "ln_block.bias", b.ln_block.bias, ParamKind::Bias);
    }
    for (int i = 0; i < static_cast<int>(tf_blocks.size()); ++i) {
      const std::string pre = "block" + std::to_string(i) + ".";
      auto& b = tf_blocks[static_cast<std::size_t>(i)];
      fn(pre + "attn.W_q", b.attn.W_q, ParamKind::Weight);
      fn(pre + "attn.W_k", b.attn.W_k, ParamKind::Weight);
      fn(pre + "attn.W_v", b.attn.W_v, ParamKind::Weight);
      fn(pre + "attn.W_o", b.attn.W_o, ParamKind::OutputWeight);
      fn(pre + "mlp.W_in", b.mlp.W_in, ParamKind::Weight);
      fn(pre + "mlp.b_in", b.mlp.b_in, ParamKind::Bias);
      fn(pre + "mlp.W_out", b.mlp.W_out, ParamKind::OutputWeight);
      fn(pre + "mlp.b_out", b.mlp.b_out, ParamKind::Bias);
      fn(pre + "ln1.gain", b.ln1.gain, ParamKind::Gain);
      fn(pre + "ln1.bias", b.ln1.bias, ParamKind::Bias);
      fn(pre + "ln2.gain", b.ln2.gain, ParamKind::Gain);
      fn(pre + "ln2.bias", b.ln2.bias, ParamKind::Bias);
    }
    fn("ln_final.gain", ln_final.gain, ParamKind::Gain);
    fn("ln_final.bias", ln_final.bias, ParamKind::Bias);
    fn("head.W", W_head, ParamKind::Weight);
  }

  void set_requires_grad(bool v) {
    visit([v](const std::string&, TensorT<T>& t, ParamKind) {
      t.requires_grad = v;
    });
  }

  std::vector<Parameter<T>> parameters() {
    std::vector<Parameter<T>> out;
    visit([&](const std::string& name, TensorT<T>& t, ParamKind) {
      out.push_back({name, t});
    });
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    visit([&](const std::string&, TensorT<T>& t, ParamKind) { n += t.numel(); });
    return n;
  }

  // Token ids (row-major [batch, seq]) -> logits [batch, seq, vocab].
  TensorT<T> forward(const std::vector<std::int32_t>& tokens, int batch,
                     int seq) const {
    auto x = embed_tokens(emb.token_table, emb.pos_table, tokens, batch, seq);
    if (cfg.kind == ModelKind::CausalRN) {
      const CausalRNConfig cc = cfg.cell_config();
      for (const auto& b : rn_blocks) {
        x = rn_block_forward(b, cc, x);
      }
    } else {
      for (const auto& b : tf_blocks) {
        if (cfg.transformer_prenorm) {
          x = add(x, causal_attention(b.attn, layernorm(b.ln1, x)));
          x = add(x, mlp_forward(b.mlp, layernorm(b.ln2, x)));
        } else {
          x = layernorm(b.ln1, add(x, causal_attention(b.attn, x)));
          x = layernorm(b.ln2, add(x, mlp_forward(b.mlp, x)));
        }
      }
    }
    x = layernorm(ln_final, x);
    return matmul_nt(x, W_head);
  }
};

// ---------------------------------------------------------------------------
// Incremental decoding session
// ---------------------------------------------------------------------------

namespace detail {

// K/V pools for one attention block; the attention analogue of the
// quadratic cell's memory pool.
template <class T>
struct AttnDecodeState {
  std::vector<T> keys;    // position * d_e
  std::vector<T> values;  // position * d_e
};

}  // namespace detail

// Feeds one token at a time and returns the logits for the next position.
// RN cells carry DecodeStateT (fixed vector on the linear path, growing
// pool on the quadratic path); attention blocks carry K/V pools.
template <class T>
class DecodeSessionT {
 public:
  explicit DecodeSessionT(const ModelT<T>& model) : model_(&model) {
    const auto& cfg = model.cfg;
    if (cfg.kind == ModelKind::CausalRN) {
      const CausalRNConfig cc = cfg.cell_config();
      for (const auto& b : model.rn_blocks) {
        rn_states_.push_back(decode_init(b.rn, cc));
      }
    } else {
      attn_states_.resize(model.tf_blocks.size());
    }
  }

  int position() const { return position_; }

  std::size_t state_bytes() const {
    std::size_t n = 0;
    for (const auto& s : rn_states_) n += s.state_bytes();
    for (const auto& s : attn_states_) {
      n += (s.keys.size() + s.values.size()) * sizeof(T);
    }
    return n;
  }

  // Returns logits over the vocabulary for the position just consumed.
  std::vector<T> step(std::int32_t token) {
    const auto& m = *model_;
    const int d = m.cfg.d_e;
    if (position_ >= m.cfg.max_context) {
      throw std::out_of_range("decode: position exceeds max context");
    }
    if (token < 0 || token >= m.cfg.vocab) {
      throw std::out_of_range("decode: token id out of range");
    }
    std::vector<T> x(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) {
      x[static_cast<std::size_t>(c)] =
          m.emb.token_table(token, c) + m.emb.pos_table(position_, c);
    }
    if (m.cfg.kind == ModelKind::CausalRN) {
      const CausalRNConfig cc = m.cfg.cell_config();
      for (std::size_t i = 0; i < m.rn_blocks.size(); ++i) {
        const auto& b = m.rn_blocks[i];
        auto u = detail::ln_vec(b.ln_block, x);
        auto r = decode_step(rn_states_[i], b.rn, cc, u);
        for (int c = 0; c < d; ++c) {
          x[static_cast<std::size_t>(c)] += r[static_cast<std::size_t>(c)];
        }
      }
    } else {
      for (std::size_t i = 0; i < m.tf_blocks.size(); ++i) {
        attention_step(m.tf_blocks[i], attn_states_[i], x,
                       m.cfg.transformer_prenorm);
      }
    }
    position_ += 1;
    auto xf = detail::ln_vec(m.ln_final, x);
    return detail::matvec_nt(m.W_head, xf);
  }

 private:
  void attention_step(const TransformerBlockT<T>& b,
                      detail::AttnDecodeState<T>& st, std::vector<T>& x,
                      bool prenorm) {
    const int d = model_->cfg.d_e;
    auto attn_part = [&](const std::vector<T>& h) {
      auto q = detail::matvec_nt(b.attn.W_q, h);
      auto k = detail::matvec_nt(b.attn.W_k, h);
      auto v = detail::matvec_nt(b.attn.W_v, h);
      st.keys.insert(st.keys.end(), k.begin(), k.end());
      st.values.insert(st.values.end(), v.begin(), v.end());
      const int count = static_cast<int>(st.keys.size()) / d;
      std::vector<T> scores(static_cast<std::size_t>(count));
      const T scale = T(1) / std::sqrt(static_cast<T>(d));
      T mx = -std::numeric_limits<T>::infinity();
      for (int i = 0; i < count; ++i) {
        T s = 0;
        const T* ki = st.keys.data() + static_cast<std::int64_t>(i) * d;
        for (int c = 0; c < d; ++c) s += q[static_cast<std::size_t>(c)] * ki[c];
        s *= scale;
        scores[static_cast<std::size_t>(i)] = s;
        mx = std::max(mx, s);
      }
      T denom = 0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      std::vector<T> ctx(static_cast<std::size_t>(d), T(0));
      for (int i = 0; i < count; ++i) {
        const T w = scores[static_cast<std::size_t>(i)] / denom;
        const T* vi = st.values.data() + static_cast<std::int64_t>(i) * d;
        for (int c = 0; c < d; ++c) ctx[static_cast<std::size_t>(c)] += w * vi[c];
      }
      return detail::matvec_nt(b.attn.W_o, ctx);
    };
    auto mlp_part = [&](const std::vector<T>& h) {
      auto z = detail::matvec_nt(b.mlp.W_in, h);
      for (int c = 0; c < static_cast<int>(z.size()); ++c) {
        z[static_cast<std::size_t>(c)] =
            detail::act_value(b.mlp.activation,
                              z[static_cast<std::size_t>(c)] + b.mlp.b_in(c));
      }
      auto o = detail::matvec_nt(b.mlp.W_out, z);
      for (int c = 0; c < static_cast<int>(o.size()); ++c) {
        o[static_cast<std::size_t>(c)] += b.mlp.b_out(c);
      }
      return o;
    };
    if (prenorm) {
      auto a = attn_part(detail::ln_vec(b.ln1, x));
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(c)];
      auto o = mlp_part(detail::ln_vec(b.ln2, x));
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += o[static_cast<std::size_t>(c)];
    } else {
      auto a = attn_part(x);
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(c)];
      x = detail::ln_vec(b.ln1, x);
      auto o = mlp_part(x);
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += o[static_cast<std::size_t>(c)];
      x = detail::ln_vec(b.ln2, x);
    }
  }

  const ModelT<T>* model_;
  std::vector<DecodeStateT<T>> rn_states_;
  std::vector<detail::AttnDecodeState<T>> attn_states_;
  int position_ = 0;
};

// Greedy autoregressive copy evaluation: prompt with BOS s SEP, decode L+1
// tokens, count exact matches of s + EOS. Exercises the true incremental
// path (decode sessions, not the parallel forward).
template <class T>
double autoregressive_copy_eval(const ModelT<T>& model, int L, int trials,
                                Pcg32& rng) {
  int ok = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<std::int32_t> s(static_cast<std::size_t>(L));
    for (auto& id : s) {
      id = static_cast<std::int32_t>(rng.next_below(Vocab::letters));
    }
    DecodeSessionT<T> sess(model);
    std::vector<T> logits;
    sess.step(Vocab::BOS);
    for (int i = 0; i < L; ++i) sess.step(s[static_cast<std::size_t>(i)]);
    logits = sess.step(Vocab::SEP);
    bool good = true;
    for (int i = 0; i <= L; ++i) {
      int best = 0;
      for (int v = 1; v < static_cast<int>(logits.size()); ++v) {
        if (logits[static_cast<std::size_t>(v)] >
            logits[static_cast<std::size_t>(best)]) {
          best = v;
        }
      }
      const std::int32_t want =
          (i < L) ? s[static_cast<std::size_t>(i)] : Vocab::EOS;
      if (best != want) {
        good = false;
        break;
      }
      if (i < L) logits = sess.step(best);
    }
    if (good) ++ok;
  }
  return trials > 0 ? static_cast<double>(ok) / trials : 0.0;
}

}  // namespace crn
