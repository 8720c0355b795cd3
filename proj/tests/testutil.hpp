#pragma once

// Shared helpers for the test suites: tolerance checks, random tensor
// construction, and a central finite-difference gradient checker.

#include <cmath>
#include <functional>
#include <vector>

#include "crn/ops.hpp"
#include "crn/random.hpp"
#include "crn/tensor.hpp"

namespace testutil {

template <class T>
inline bool close(T a, T b, double rtol, double atol) {
  const double d = std::abs(static_cast<double>(a) - static_cast<double>(b));
  return d <= atol + rtol * std::abs(static_cast<double>(b));
}

template <class T>
inline double max_abs_diff(const crn::TensorT<T>& a, const crn::TensorT<T>& b) {
  double worst = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.ptr()[i]) -
                                     static_cast<double>(b.ptr()[i])));
  }
  return worst;
}

// max_i |a_i - b_i| / (atol + rtol*|b_i|) <= 1 style check.
template <class T>
inline bool allclose(const crn::TensorT<T>& a, const crn::TensorT<T>& b,
                     double rtol, double atol = 1e-6) {
  if (a.shape != b.shape) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (!close(a.ptr()[i], b.ptr()[i], rtol, atol)) return false;
  }
  return true;
}

template <class T>
inline crn::TensorT<T> random_tensor(std::vector<int> shape, crn::Pcg32& rng,
                                     double scale = 1.0) {
  auto t = crn::TensorT<T>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t.ptr()[i] = static_cast<T>(rng.normal(0.0, scale));
  }
  return t;
}

// Central finite differences on a double-precision scalar function of the
// given leaf tensors. Returns max of |analytic - numeric| / max(|numeric|, floor).
inline double grad_check(
    std::vector<crn::TensorT<double>*> leaves,
    const std::function<crn::TensorT<double>()>& forward, double h = 1e-4,
    double floor_ = 1.0) {
  for (auto* l : leaves) l->requires_grad = true;
  crn::Tape<double> tape;
  std::vector<std::vector<double>> analytic;
  {
    crn::TapeScope<double> scope(tape);
    auto loss = forward();
    tape.backward(loss);
    for (auto* l : leaves) {
      const auto* g = tape.grad_of(*l);
      analytic.push_back(g ? *g : std::vector<double>(l->numel(), 0.0));
    }
  }
  double worst = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto* leaf = leaves[li];
    for (std::int64_t i = 0; i < leaf->numel(); ++i) {
      const double orig = leaf->ptr()[i];
      leaf->ptr()[i] = orig + h;
      const double fp = forward().ptr()[0];
      leaf->ptr()[i] = orig - h;
      const double fm = forward().ptr()[0];
      leaf->ptr()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[li][static_cast<std::size_t>(i)];
      const double denom = std::max(std::abs(numeric), floor_);
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace testutil
