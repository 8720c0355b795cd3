#pragma once

#include <cmath>
#include <cstdint>

namespace crn {

// PCG32 (XSH-RR). Fixed algorithm so streams are identical on every platform
// and the full generator state fits in two 64-bit words for checkpointing.
class Pcg32 {
 public:
  struct State {
    std::uint64_t state = 0;
    std::uint64_t inc = 0;
  };

  Pcg32() { seed(0x853c49e6748fea9bULL); }
  explicit Pcg32(std::uint64_t s, std::uint64_t stream = 1) { seed(s, stream); }

  void seed(std::uint64_t s, std::uint64_t stream = 1) {
    st_.state = 0;
    st_.inc = (stream << 1u) | 1u;
    next_u32();
    st_.state += s;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = st_.state;
    st_.state = old * 6364136223846793005ULL + st_.inc;
    const auto xs = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xs >> rot) | (xs << ((32u - rot) & 31u));
  }

  // Uniform integer in [0, bound).
  std::uint32_t next_below(std::uint32_t bound) {
    return static_cast<std::uint32_t>(
        (static_cast<std::uint64_t>(next_u32()) * bound) >> 32u);
  }

  // 53-bit uniform double in [0, 1).
  double next_double() {
    const std::uint64_t a = next_u32() >> 5u;  // 27 bits
    const std::uint64_t b = next_u32() >> 6u;  // 26 bits
    return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) /
           9007199254740992.0;
  }

  // Box-Muller without the cached spare: the State struct above is then the
  // whole story a checkpoint has to capture.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u = 1.0 - next_double();
    const double v = next_double();
    const double r = std::sqrt(-2.0 * std::log(u));
    return mean + stddev * r * std::cos(6.2831853071795864769 * v);
  }

  State state() const { return st_; }
  void set_state(const State& s) { st_ = s; }

 private:
  State st_;
};

}  // namespace crn
