#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "crn/layers.hpp"
#include "crn/random.hpp"
#include "testutil.hpp"

using crn::TensorT;
using Tf = TensorT<float>;
using Td = TensorT<double>;

TEST_CASE("mlp: zero weights yield b_out") {
  auto p = crn::MlpParamsT<float>::make(3, 5, 2, crn::Activation::Relu);
  p.b_out = Tf({2}, {0.5f, -1.5f});
  crn::Pcg32 rng(1);
  auto x = testutil::random_tensor<float>({4, 3}, rng);
  auto y = crn::mlp_forward(p, x);
  for (int i = 0; i < 4; ++i) {
    CHECK(y(i, 0) == 0.5f);
    CHECK(y(i, 1) == -1.5f);
  }
}

TEST_CASE("mlp: identity weights with relu") {
  auto p = crn::MlpParamsT<float>::make(2, 2, 2, crn::Activation::Relu);
  p.W_in = Tf({2, 2}, {1, 0, 0, 1});
  p.W_out = Tf({2, 2}, {1, 0, 0, 1});
  auto y = crn::mlp_forward(p, Tf({1, 2}, {-1.0f, 2.0f}));
  CHECK(y(0, 0) == 0.0f);
  CHECK(y(0, 1) == 2.0f);
}

TEST_CASE("mlp: random case vs explicit loop oracle") {
  crn::Pcg32 rng(2);
  auto p = crn::MlpParamsT<double>::make(2, 4, 2, crn::Activation::Elu);
  for (auto* t : {&p.W_in, &p.b_in, &p.W_out, &p.b_out}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->ptr()[i] = rng.normal(0, 1);
    }
  }
  auto x = testutil::random_tensor<double>({3, 2}, rng);
  auto y = crn::mlp_forward(p, x);
  for (int r = 0; r < 3; ++r) {
    for (int o = 0; o < 2; ++o) {
      double acc = p.b_out(o);
      for (int h = 0; h < 4; ++h) {
        double z = p.b_in(h);
        for (int c = 0; c < 2; ++c) z += p.W_in(h, c) * x(r, c);
        const double a = z > 0 ? z : std::exp(z) - 1.0;
        acc += p.W_out(o, h) * a;
      }
      CHECK(y(r, o) == doctest::Approx(acc).epsilon(1e-9));
    }
  }
}

TEST_CASE("mlp with tiny exp weights approximates its first-order Taylor map") {
  // W_out exp(s*(W x + b)) + b_out ~= W_out (1 + s*(W x + b)) for small s.
  crn::Pcg32 rng(3);
  const double s = 1e-4;
  auto p = crn::MlpParamsT<double>::make(3, 4, 2, crn::Activation::Exp);
  for (auto* t : {&p.W_in, &p.b_in}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->ptr()[i] = rng.normal(0, 1) * s;
    }
  }
  for (auto* t : {&p.W_out, &p.b_out}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->ptr()[i] = rng.normal(0, 1);
    }
  }
  auto x = testutil::random_tensor<double>({5, 3}, rng);
  auto y = crn::mlp_forward(p, x);
  for (int r = 0; r < 5; ++r) {
    for (int o = 0; o < 2; ++o) {
      double acc = p.b_out(o);
      for (int h = 0; h < 4; ++h) {
        double z = p.b_in(h);
        for (int c = 0; c < 3; ++c) z += p.W_in(h, c) * x(r, c);
        acc += p.W_out(o, h) * (1.0 + z);  // first-order Taylor of exp
      }
      CHECK(std::abs(y(r, o) - acc) < 1e-6);
    }
  }
}

TEST_CASE("layernorm: constant input collapses to bias") {
  auto p = crn::LayerNormParamsT<float>::make(4);
  p.bias = Tf({4}, {0.25f, 0.5f, 0.75f, 1.0f});
  auto x = Tf::full({2, 4}, 3.7f);
  auto y = crn::layernorm(p, x);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 4; ++c) {
      CHECK(y(r, c) == doctest::Approx(p.bias(c)).epsilon(1e-5));
    }
  }
}

TEST_CASE("layernorm: positive-scale invariance") {
  // Exact in the eps -> 0 limit; at the default eps the row variance must
  // dominate eps/alpha^2 for the identity to hold to 1e-5.
  crn::Pcg32 rng(5);
  auto p = crn::LayerNormParamsT<double>::make(16);
  auto x = testutil::random_tensor<double>({3, 16}, rng, 3.0);
  auto y1 = crn::layernorm(p, x);
  auto y2 = crn::layernorm(p, crn::mul_scalar(x, 7.3));
  CHECK(testutil::allclose(y1, y2, 1e-5, 1e-5));

  // property over a wide range of alpha > 0, eps negligible
  auto ptiny = crn::LayerNormParamsT<double>::make(16);
  ptiny.eps = 1e-12;
  auto z1 = crn::layernorm(ptiny, x);
  for (double alpha : {0.01, 0.5, 2.0, 113.0}) {
    auto za = crn::layernorm(ptiny, crn::mul_scalar(x, alpha));
    CHECK(testutil::allclose(z1, za, 1e-5, 1e-5));
  }
}

TEST_CASE("layernorm: [1,-1] is its own normalization as eps -> 0") {
  auto p = crn::LayerNormParamsT<double>::make(2);
  p.eps = 1e-12;
  auto y = crn::layernorm(p, Td({1, 2}, {1.0, -1.0}));
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layernorm: output statistics") {
  crn::Pcg32 rng(7);
  auto p = crn::LayerNormParamsT<double>::make(16);
  auto x = testutil::random_tensor<double>({8, 16}, rng, 3.0);
  auto y = crn::layernorm(p, x);
  for (int r = 0; r < 8; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 16; ++c) mu += y(r, c);
    mu /= 16;
    for (int c = 0; c < 16; ++c) var += (y(r, c) - mu) * (y(r, c) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layernorm gradient vs finite differences") {
  crn::Pcg32 rng(11);
  auto x = testutil::random_tensor<double>({3, 5}, rng);
  auto gain = testutil::random_tensor<double>({5}, rng);
  auto bias = testutil::random_tensor<double>({5}, rng);
  const double err = testutil::grad_check({&x, &gain, &bias}, [&]() {
    auto y = crn::layernorm(x, gain, bias, 1e-5);
    return crn::sum(crn::sum(crn::mul(y, y), 1), 0);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("embed: zero tables and one-hot selection") {
  auto p = crn::EmbeddingParamsT<float>::make(4, 8, 3);
  auto z = crn::embed(p, {0, 1, 2});
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.ptr()[i] == 0.0f);

  // one-hot token rows, zero positional: row selection
  for (int v = 0; v < 4; ++v) p.token_table(v, v % 3) = 1.0f;
  auto y = crn::embed(p, {2, 0});
  CHECK(y(0, 2) == 1.0f);
  CHECK(y(1, 0) == 1.0f);
  CHECK(y(0, 0) == 0.0f);
}

TEST_CASE("embed: random tables match lookup-and-add oracle exactly") {
  crn::Pcg32 rng(13);
  auto p = crn::EmbeddingParamsT<double>::make(5, 6, 4);
  for (auto* t : {&p.token_table, &p.pos_table}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->ptr()[i] = rng.normal(0, 1);
  }
  std::vector<std::int32_t> ids = {3, 1, 4};
  auto y = crn::embed(p, ids);
  for (int t = 0; t < 3; ++t) {
    for (int c = 0; c < 4; ++c) {
      CHECK(y(t, c) == p.token_table(ids[static_cast<std::size_t>(t)], c) +
                           p.pos_table(t, c));
    }
  }
}

TEST_CASE("embed: out-of-range id and position raise index errors") {
  auto p = crn::EmbeddingParamsT<float>::make(4, 2, 3);
  CHECK_THROWS_AS(crn::embed(p, {5}), std::out_of_range);
  CHECK_THROWS_AS(crn::embed(p, {0, 1, 2}), std::out_of_range);  // seq > max
}

TEST_CASE("attention: seq=1 reduces to W_o W_v x") {
  crn::Pcg32 rng(17);
  auto p = crn::AttentionParamsT<double>::make(4);
  for (auto* t : {&p.W_q, &p.W_k, &p.W_v, &p.W_o}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->ptr()[i] = rng.normal(0, 1);
  }
  auto x = testutil::random_tensor<double>({1, 4}, rng);
  auto y = crn::causal_attention(p, x);
  for (int o = 0; o < 4; ++o) {
    double vv = 0;
    for (int c = 0; c < 4; ++c) {
      double wv = 0;
      for (int k = 0; k < 4; ++k) wv += p.W_o(o, k) * p.W_v(k, c);
      vv += wv * x(0, c);
    }
    CHECK(y(0, o) == doctest::Approx(vv).epsilon(1e-9));
  }
}

TEST_CASE("attention: zero W_q gives uniform prefix averaging") {
  crn::Pcg32 rng(19);
  auto p = crn::AttentionParamsT<double>::make(3);
  for (auto* t : {&p.W_k, &p.W_v, &p.W_o}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->ptr()[i] = rng.normal(0, 1);
  }
  auto x = testutil::random_tensor<double>({5, 3}, rng);
  auto y = crn::causal_attention(p, x);
  for (int j = 0; j < 5; ++j) {
    std::vector<double> meanx(3, 0.0);
    for (int i = 0; i <= j; ++i) {
      for (int c = 0; c < 3; ++c) meanx[static_cast<std::size_t>(c)] += x(i, c);
    }
    for (auto& v : meanx) v /= (j + 1);
    for (int o = 0; o < 3; ++o) {
      double want = 0;
      for (int c = 0; c < 3; ++c) {
        double wv = 0;
        for (int k = 0; k < 3; ++k) wv += p.W_o(o, k) * p.W_v(k, c);
        want += wv * meanx[static_cast<std::size_t>(c)];
      }
      CHECK(y(j, o) == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

TEST_CASE("attention: causality is exact") {
  crn::Pcg32 rng(23);
  auto p = crn::AttentionParamsT<float>::make(4);
  for (auto* t : {&p.W_q, &p.W_k, &p.W_v, &p.W_o}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->ptr()[i] = static_cast<float>(rng.normal(0, 0.5));
    }
  }
  auto x = testutil::random_tensor<float>({6, 4}, rng);
  auto y0 = crn::causal_attention(p, x);
  const int k = 4;  // perturb position 4; outputs 0..3 must be bit-identical
  auto x2 = Tf::zeros({6, 4});
  std::copy(x.ptr(), x.ptr() + x.numel(), x2.ptr());
  for (int c = 0; c < 4; ++c) x2(k, c) += 10.0f;
  auto y1 = crn::causal_attention(p, x2);
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < 4; ++c) CHECK(y0(j, c) == y1(j, c));
  }
}

TEST_CASE("attention gradient vs finite differences") {
  crn::Pcg32 rng(29);
  auto p = crn::AttentionParamsT<double>::make(3);
  for (auto* t : {&p.W_q, &p.W_k, &p.W_v, &p.W_o}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->ptr()[i] = rng.normal(0, 0.6);
  }
  auto x = testutil::random_tensor<double>({4, 3}, rng);
  const double err =
      testutil::grad_check({&x, &p.W_q, &p.W_k, &p.W_v, &p.W_o}, [&]() {
        auto y = crn::causal_attention(p, x);
        return crn::sum(crn::sum(crn::mul(y, y), 1), 0);
      });
  CHECK(err < 1e-4);
}
