#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crn/model.hpp"
#include "crn/random.hpp"
#include "crn/tensor.hpp"

namespace crn {

// Biases zero, weights N(0, 0.02); output-layer weights further divided by
// sqrt(number of residual connections); embeddings N(0, 1); norm gains 1.
// RNG consumption follows the model's visit order, so a (config, seed) pair
// fully determines the initialization.
template <class T>
void init_model(ModelT<T>& model, std::uint64_t seed) {
  Pcg32 rng(seed, 0x9e3779b9);
  const double res_div = std::sqrt(static_cast<double>(model.residual_connections()));
  model.visit([&](const std::string&, TensorT<T>& t, ParamKind kind) {
    switch (kind) {
      case ParamKind::Bias:
        for (std::int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = T(0);
        break;
      case ParamKind::Gain:
        for (std::int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = T(1);
        break;
      case ParamKind::Weight:
        for (std::int64_t i = 0; i < t.numel(); ++i) {
          t.ptr()[i] = static_cast<T>(rng.normal(0.0, 0.02));
        }
        break;
      case ParamKind::OutputWeight:
        for (std::int64_t i = 0; i < t.numel(); ++i) {
          t.ptr()[i] = static_cast<T>(rng.normal(0.0, 0.02) / res_div);
        }
        break;
      case ParamKind::Embedding:
        for (std::int64_t i = 0; i < t.numel(); ++i) {
          t.ptr()[i] = static_cast<T>(rng.normal(0.0, 1.0));
        }
        break;
    }
  });
}

// lr_base * min(1, (iter+1)/warmup_iters); constant after warmup.
inline double lr_at(std::int64_t iter, double lr_base,
                    std::int64_t warmup_iters) {
  if (warmup_iters <= 0) return lr_base;
  const double ramp = static_cast<double>(iter + 1) /
                      static_cast<double>(warmup_iters);
  return lr_base * (ramp < 1.0 ? ramp : 1.0);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
};

template <class T>
struct AdamStateT {
  std::int64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One bias-corrected Adam update from the tape's gradients. Parameters the
// loss never touched see a zero gradient. Non-finite gradients abort with
// the offending parameter named.
template <class T>
void adam_step(ModelT<T>& model, Tape<T>& tape, AdamStateT<T>& st,
               const AdamConfig& ac, double lr) {
  struct Entry {
    std::string name;
    TensorT<T>* t;
    const std::vector<T>* g;
  };
  std::vector<Entry> entries;
  model.visit([&](const std::string& name, TensorT<T>& t, ParamKind) {
    entries.push_back({name, &t, tape.grad_of(t)});
  });
  if (st.m.empty()) {
    for (const auto& e : entries) {
      st.m.emplace_back(e.t->numel(), T(0));
      st.v.emplace_back(e.t->numel(), T(0));
    }
  }
  for (const auto& e : entries) {
    if (!e.g) continue;
    for (const T g : *e.g) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("adam_step: non-finite gradient in parameter '" +
                           e.name + "'");
      }
    }
  }
  double scale = 1.0;
  if (ac.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& e : entries) {
      if (!e.g) continue;
      for (const T g : *e.g) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > ac.grad_clip) scale = ac.grad_clip / norm;
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    T* w = e.t->ptr();
    const std::int64_t n = e.t->numel();
    for (std::int64_t k = 0; k < n; ++k) {
      const double g =
          e.g ? static_cast<double>((*e.g)[static_cast<std::size_t>(k)]) * scale
              : 0.0;
      const double mk = ac.beta1 * static_cast<double>(m[static_cast<std::size_t>(k)]) +
                        (1.0 - ac.beta1) * g;
      const double vk = ac.beta2 * static_cast<double>(v[static_cast<std::size_t>(k)]) +
                        (1.0 - ac.beta2) * g * g;
      m[static_cast<std::size_t>(k)] = static_cast<T>(mk);
      v[static_cast<std::size_t>(k)] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      w[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + ac.eps));
    }
  }
}

}  // namespace crn
