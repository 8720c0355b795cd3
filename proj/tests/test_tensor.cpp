#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <thread>

#include "crn/ops.hpp"
#include "crn/random.hpp"
#include "crn/tensor.hpp"
#include "testutil.hpp"

using crn::TensorT;
using Tf = TensorT<float>;
using Td = TensorT<double>;

namespace {

// Independent triple-loop oracle for matrix products.
template <class T>
TensorT<T> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b) {
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  auto out = TensorT<T>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      out(i, j) = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tf I({2, 2}, {1, 0, 0, 1});
  Tf v({2, 1}, {5, 7});
  auto r = crn::matmul(I, v);
  CHECK(r(0, 0) == 5.0f);
  CHECK(r(1, 0) == 7.0f);

  Tf a({1, 2}, {1, 2});
  Tf b({2, 1}, {3, 4});
  auto c = crn::matmul(a, b);
  CHECK(c.numel() == 1);
  CHECK(c(0, 0) == doctest::Approx(11.0f));
}

TEST_CASE("matmul random vs triple-loop oracle") {
  crn::Pcg32 rng(7);
  auto a = testutil::random_tensor<double>({4, 3}, rng);
  auto b = testutil::random_tensor<double>({3, 2}, rng);
  auto got = crn::matmul(a, b);
  auto want = matmul_oracle(a, b);
  CHECK(testutil::allclose(got, want, 1e-6, 1e-12));
}

TEST_CASE("matmul batch broadcast against per-slice oracle") {
  crn::Pcg32 rng(11);
  auto a = testutil::random_tensor<double>({3, 4, 5}, rng);
  auto b = testutil::random_tensor<double>({5, 2}, rng);
  auto got = crn::matmul(a, b);
  REQUIRE(got.shape == std::vector<int>({3, 4, 2}));
  for (int s = 0; s < 3; ++s) {
    auto as = Td::zeros({4, 5});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) as(i, j) = a(s, i, j);
    auto want = matmul_oracle(as, b);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(got(s, i, j) == doctest::Approx(want(i, j)).epsilon(1e-9));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tf a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tf b({2, 2}, {1, 2, 3, 4});
  try {
    crn::matmul(a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("elementwise frozen values") {
  Tf x({2}, {0.0f, 1.0f});
  auto e = crn::exp(x);
  CHECK(e(0) == doctest::Approx(1.0f));
  CHECK(e(1) == doctest::Approx(2.7182818f));

  Tf r({2}, {-2.0f, 3.0f});
  auto rr = crn::relu(r);
  CHECK(rr(0) == 0.0f);
  CHECK(rr(1) == 3.0f);

  // elu(x) = exp(x) - 1 for x < 0: elu(-1) = e^-1 - 1.
  Tf u({2}, {-1.0f, 1.0f});
  auto uu = crn::elu(u);
  CHECK(uu(0) == doctest::Approx(-0.63212056f).epsilon(1e-6));
  CHECK(uu(1) == doctest::Approx(1.0f));
}

TEST_CASE("elementwise broadcast and scalar forms") {
  Tf a({2, 2}, {1, 2, 3, 4});
  Tf row({2}, {10, 20});
  auto s = crn::add(a, row);
  CHECK(s(0, 0) == 11.0f);
  CHECK(s(1, 1) == 24.0f);

  auto m = crn::mul(a, Tf::scalar(2.0f));
  CHECK(m(1, 0) == 6.0f);

  auto d = crn::div_scalar(a, 2.0f);
  CHECK(d(0, 1) == 1.0f);

  auto mx = crn::max_scalar(Tf({3}, {-1, 0.5f, 2}), 0.0f);
  CHECK(mx(0) == 0.0f);
  CHECK(mx(1) == 0.5f);

  CHECK_THROWS_AS(crn::add(Tf({3}, {1, 2, 3}), Tf({2}, {1, 2})),
                  std::invalid_argument);
}

TEST_CASE("reductions") {
  Tf m({2, 2}, {1, 2, 3, 4});
  auto s0 = crn::sum(m, 0);
  CHECK(s0(0) == 4.0f);
  CHECK(s0(1) == 6.0f);

  auto mn = crn::mean(Tf({3}, {2, 4, 6}), 0);
  CHECK(mn.numel() == 1);
  CHECK(mn(0) == 4.0f);

  auto mx = crn::max(Tf({2, 2}, {5, 1, 2, 8}), 1);
  CHECK(mx(0) == 5.0f);
  CHECK(mx(1) == 8.0f);

  CHECK_THROWS_AS(crn::sum(m, 2), std::invalid_argument);
}

TEST_CASE("logcumsumexp values and stability") {
  // Single element: identity.
  Td one({1}, {3.25});
  CHECK(crn::logcumsumexp(one, 0)(0) == doctest::Approx(3.25));

  // [0,0] -> [0, log 2].
  Td z({2}, {0.0, 0.0});
  auto lz = crn::logcumsumexp(z, 0);
  CHECK(lz(0) == doctest::Approx(0.0));
  CHECK(lz(1) == doctest::Approx(0.69314718055994531));

  // Huge inputs stay finite: [1000,1000] -> [1000, 1000+log2].
  Td big({2}, {1000.0, 1000.0});
  auto lb = crn::logcumsumexp(big, 0);
  CHECK(std::isfinite(lb(1)));
  CHECK(lb(0) == doctest::Approx(1000.0));
  CHECK(lb(1) == doctest::Approx(1000.0 + 0.69314718055994531));

  // Extreme magnitudes +-1e4 remain finite.
  Td ext({4}, {-1e4, 1e4, -1e4, 9.9e3});
  auto le = crn::logcumsumexp(ext, 0);
  for (int i = 0; i < 4; ++i) CHECK(std::isfinite(le(i)));

  // Against the naive log(cumsum(exp(x))) for moderate inputs.
  crn::Pcg32 rng(3);
  auto x = testutil::random_tensor<double>({32}, rng, 5.0);
  auto got = crn::logcumsumexp(x, 0);
  double acc = 0;
  for (int i = 0; i < 32; ++i) {
    acc += std::exp(x(i));
    CHECK(got(i) == doctest::Approx(std::log(acc)).epsilon(1e-10));
  }
}

TEST_CASE("logcumsumexp along middle axis matches per-lane scan") {
  crn::Pcg32 rng(5);
  auto x = testutil::random_tensor<double>({2, 4, 3}, rng, 2.0);
  auto got = crn::logcumsumexp(x, 1);
  for (int b = 0; b < 2; ++b) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int j = 0; j < 4; ++j) {
        acc += std::exp(x(b, j, c));
        CHECK(got(b, j, c) == doctest::Approx(std::log(acc)).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("logsumexp matches naive") {
  crn::Pcg32 rng(9);
  auto x = testutil::random_tensor<double>({3, 5}, rng, 3.0);
  auto got = crn::logsumexp(x, 1);
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += std::exp(x(i, j));
    CHECK(got(i) == doctest::Approx(std::log(s)).epsilon(1e-10));
  }
}

TEST_CASE("cross entropy hand cases") {
  // Forcing probability ~1 on the target gives ~0 loss.
  Tf sure({1, 1, 3}, {100.0f, 0.0f, 0.0f});
  auto l0 = crn::cross_entropy(sure, {0}, {1});
  CHECK(l0(0) == doctest::Approx(0.0f).epsilon(1e-6));

  // Uniform logits over V classes -> log V.
  const int V = 5;
  auto uni = Tf::zeros({1, 2, V});
  auto l1 = crn::cross_entropy(uni, {2, 4}, {1, 1});
  CHECK(l1(0) == doctest::Approx(std::log(5.0f)));

  CHECK_THROWS_AS(crn::cross_entropy(uni, {2, 4}, {0, 0}),
                  std::invalid_argument);
}

TEST_CASE("cross entropy random vs direct softmax oracle") {
  crn::Pcg32 rng(17);
  auto logits = testutil::random_tensor<double>({2, 3, 5}, rng, 2.0);
  std::vector<std::int32_t> targets(6);
  std::vector<std::uint8_t> mask(6, 1);
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.next_below(5));
  mask[1] = 0;
  mask[4] = 0;
  auto got = crn::cross_entropy(logits, targets, mask);
  double want = 0;
  int count = 0;
  for (int r = 0; r < 6; ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    double s = 0;
    for (int v = 0; v < 5; ++v) s += std::exp(logits.ptr()[r * 5 + v]);
    const double p =
        std::exp(logits.ptr()[r * 5 + targets[static_cast<std::size_t>(r)]]) / s;
    want += -std::log(p);
    ++count;
  }
  want /= count;
  CHECK(got(0) == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("backward hand cases") {
  // loss = sum(w*w), w=[1,2] -> grad [2,4]
  Td w({2}, {1.0, 2.0});
  w.requires_grad = true;
  crn::Tape<double> tape;
  {
    crn::TapeScope<double> scope(tape);
    auto loss = crn::sum(crn::mul(w, w), 0);
    tape.backward(loss);
  }
  const auto* g = tape.grad_of(w);
  REQUIRE(g != nullptr);
  CHECK((*g)[0] == doctest::Approx(2.0));
  CHECK((*g)[1] == doctest::Approx(4.0));

  // loss = exp(w), w=0 -> grad 1
  Td w2({1}, {0.0});
  w2.requires_grad = true;
  crn::Tape<double> tape2;
  {
    crn::TapeScope<double> scope(tape2);
    auto loss = crn::exp(w2);
    tape2.backward(loss);
  }
  CHECK((*tape2.grad_of(w2))[0] == doctest::Approx(1.0));
}

TEST_CASE("backward error paths") {
  Td w({2}, {1.0, 2.0});
  w.requires_grad = true;
  crn::Tape<double> tape;
  crn::TensorT<double> loss;
  {
    crn::TapeScope<double> scope(tape);
    loss = crn::sum(crn::mul(w, w), 0);
    auto nonscalar = crn::mul(w, w);
    CHECK_THROWS_AS(tape.backward(nonscalar), std::invalid_argument);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
  }
}

TEST_CASE("per-op gradients vs central finite differences") {
  crn::Pcg32 rng(23);
  auto sum_all = [](crn::TensorT<double> t) {
    while (t.numel() > 1 || t.rank() > 1) {
      t = crn::sum(t, t.rank() - 1);
      if (t.rank() == 1 && t.numel() == 1) break;
    }
    return t;
  };
  auto check = [&](const char* name,
                   std::function<crn::TensorT<double>(const Td&)> f,
                   double scale = 1.0, double shift = 0.0) {
    auto x = testutil::random_tensor<double>({3, 4}, rng, scale);
    if (shift != 0.0) {
      for (std::int64_t i = 0; i < x.numel(); ++i) x.ptr()[i] += shift;
    }
    const double err =
        testutil::grad_check({&x}, [&]() { return sum_all(f(x)); });
    INFO(name);
    CHECK(err < 1e-4);
  };

  check("exp", [](const Td& x) { return crn::exp(x); });
  check("log", [](const Td& x) { return crn::log(x); }, 0.3, 2.0);
  check("elu", [](const Td& x) { return crn::elu(x); });
  check("mul", [](const Td& x) { return crn::mul(x, x); });
  check("add", [](const Td& x) { return crn::add(x, x); });
  check("sub scalar bcast",
        [](const Td& x) { return crn::sub(x, Td::scalar(0.7)); });
  check("mean", [](const Td& x) {
    auto m = crn::mean(x, 1);
    return crn::mul(m, m);
  });
  check("logcumsumexp", [](const Td& x) { return crn::logcumsumexp(x, 0); });
  check("logcumsumexp axis1",
        [](const Td& x) { return crn::logcumsumexp(x, 1); }, 2.0);
  check("logsumexp", [](const Td& x) { return crn::logsumexp(x, 1); }, 2.0);
  check("exp_row_shifted composed with layernorm", [](const Td& x) {
    auto g = Td::full({4}, 1.0);
    auto b = Td::zeros({4});
    return crn::layernorm(crn::exp_row_shifted(x), g, b, 1e-5);
  });
}

TEST_CASE("matmul gradients vs finite differences") {
  crn::Pcg32 rng(29);
  auto a = testutil::random_tensor<double>({3, 4}, rng);
  auto b = testutil::random_tensor<double>({4, 2}, rng);
  const double err = testutil::grad_check({&a, &b}, [&]() {
    auto c = crn::matmul(a, b);
    return crn::sum(crn::sum(crn::mul(c, c), 1), 0);
  });
  CHECK(err < 1e-4);

  auto bt = testutil::random_tensor<double>({2, 4}, rng);
  const double err2 = testutil::grad_check({&a, &bt}, [&]() {
    auto c = crn::matmul_nt(a, bt);
    return crn::sum(crn::sum(crn::mul(c, c), 1), 0);
  });
  CHECK(err2 < 1e-4);

  auto a3 = testutil::random_tensor<double>({2, 3, 4}, rng);
  const double err3 = testutil::grad_check({&a3, &b}, [&]() {
    auto c = crn::matmul(a3, b);
    auto s = crn::sum(crn::sum(crn::mul(c, c), 2), 1);
    return crn::sum(s, 0);
  });
  CHECK(err3 < 1e-4);
}

TEST_CASE("cross entropy gradient vs finite differences") {
  crn::Pcg32 rng(31);
  auto logits = testutil::random_tensor<double>({2, 3, 5}, rng, 2.0);
  std::vector<std::int32_t> targets = {1, 0, 4, 2, 3, 0};
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};
  const double err = testutil::grad_check(
      {&logits}, [&]() { return crn::cross_entropy(logits, targets, mask); });
  CHECK(err < 1e-4);
}

TEST_CASE("logcumsumexp backward stays finite on extreme inputs") {
  Td x({3}, {1000.0, 999.0, 1001.0});
  x.requires_grad = true;
  crn::Tape<double> tape;
  {
    crn::TapeScope<double> scope(tape);
    auto y = crn::logcumsumexp(x, 0);
    auto loss = crn::sum(y, 0);
    tape.backward(loss);
  }
  const auto* g = tape.grad_of(x);
  REQUIRE(g != nullptr);
  for (double v : *g) CHECK(std::isfinite(v));
}

TEST_CASE("deep composition gradient") {
  crn::Pcg32 rng(37);
  auto x = testutil::random_tensor<double>({4}, rng, 0.3);
  const double err = testutil::grad_check(
      {&x},
      [&]() {
        auto y = x;
        for (int i = 0; i < 12; ++i) {
          y = crn::add(crn::mul_scalar(crn::elu(y), 0.9), x);
        }
        return crn::sum(crn::mul(y, y), 0);
      },
      1e-4);
  CHECK(err < 1e-3);
}

TEST_CASE("determinism: identical seeds produce bit-identical forwards") {
  auto run = [](std::uint64_t seed) {
    crn::Pcg32 rng(seed);
    auto x = testutil::random_tensor<float>({4, 8}, rng);
    auto w = testutil::random_tensor<float>({8, 8}, rng);
    auto y = crn::matmul(crn::exp(crn::mul_scalar(x, 0.1f)), w);
    auto l = crn::logcumsumexp(y, 0);
    std::vector<float> out(l.ptr(), l.ptr() + l.numel());
    return out;
  };
  auto a = run(99), b = run(99);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("log of non-positive input: throws in debug, NaN in release") {
  Tf x({2}, {-1.0f, 2.0f});
#ifdef NDEBUG
  auto y = crn::log(x);
  CHECK(std::isnan(y(0)));
  CHECK(y(1) == doctest::Approx(std::log(2.0f)));
#else
  CHECK_THROWS_AS(crn::log(x), std::domain_error);
#endif
}

TEST_CASE("distinct tapes on distinct threads produce the serial result") {
  auto work = [](std::uint64_t seed) {
    crn::Pcg32 rng(seed);
    auto w = testutil::random_tensor<double>({6, 6}, rng);
    w.requires_grad = true;
    auto x = testutil::random_tensor<double>({4, 6}, rng);
    crn::Tape<double> tape;
    std::vector<double> grad;
    {
      crn::TapeScope<double> scope(tape);
      auto y = crn::elu(crn::matmul(x, w));
      auto loss = crn::sum(crn::sum(crn::mul(y, y), 1), 0);
      tape.backward(loss);
    }
    return *tape.grad_of(w);
  };
  const auto serial1 = work(101);
  const auto serial2 = work(202);
  std::vector<double> t1_out, t2_out;
  std::thread t1([&] { t1_out = work(101); });
  std::thread t2([&] { t2_out = work(202); });
  t1.join();
  t2.join();
  CHECK(t1_out == serial1);
  CHECK(t2_out == serial2);
}

TEST_CASE("tensor shape validation") {
  CHECK_THROWS_AS(Tf::zeros({}), std::invalid_argument);
  CHECK_THROWS_AS(Tf::zeros({1, 2, 3, 4}), std::invalid_argument);
  CHECK_THROWS_AS(Tf({2}, {1.0f}), std::invalid_argument);
}
