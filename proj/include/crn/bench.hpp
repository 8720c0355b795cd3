#pragma once

// Complexity benchmarks (forward wall time vs sequence length, decode step
// wall time vs position, decode state size) and the convergence sweep
// (iterations to target accuracy per string length and model variant).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "crn/causal_rn.hpp"
#include "crn/random.hpp"
#include "crn/train.hpp"

namespace crn {

struct BenchRow {
  std::string variant;
  int n = 0;
  double wall_ms_forward = 0;
  double wall_ms_step = 0;
  std::size_t peak_state_bytes = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
};

struct BenchSpec {
  std::vector<int> lengths = {256, 512, 1024};
  std::vector<std::string> variants = {"linear", "quadratic"};
  int reps = 5;  // median over this many repetitions
  int d_e = 64;
  std::uint64_t seed = 1;
};

// Cell-level variant table for the scaling benchmark.
inline CausalRNConfig bench_variant_config(const std::string& name, int d_e) {
  CausalRNConfig cfg;
  cfg.d_e = d_e;
  cfg.d_h = d_e;
  cfg.activation = Activation::Exp;
  cfg.post_reduction_norm = true;
  if (name == "linear") {
    cfg.path = RNPath::Linear;
    cfg.pre_act_norm = PreActNorm::None;
  } else if (name == "linear-approx") {
    cfg.path = RNPath::Linear;
    cfg.pre_act_norm = PreActNorm::Approximate;
  } else if (name == "quadratic") {
    cfg.path = RNPath::Quadratic;
    cfg.pre_act_norm = PreActNorm::Exact;
  } else if (name == "quadratic-none") {
    cfg.path = RNPath::Quadratic;
    cfg.pre_act_norm = PreActNorm::None;
  } else {
    throw ConfigError("bench: unknown variant '" + name +
                      "' (linear, linear-approx, quadratic, quadratic-none)");
  }
  return cfg;
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Times the cell forward at each length and decode_step at that position;
// reports medians over spec.reps repetitions plus the decode state size.
inline BenchReport run_bench_scaling(const BenchSpec& spec) {
  using Clock = std::chrono::steady_clock;
  BenchReport report;
  Pcg32 rng(spec.seed);
  for (const auto& variant : spec.variants) {
    const CausalRNConfig cfg = bench_variant_config(variant, spec.d_e);
    auto params = CausalRNParamsT<float>::make(cfg);
    for (auto* t : {&params.W_left, &params.W_right, &params.W_out}) {
      for (std::int64_t i = 0; i < t->numel(); ++i) {
        t->ptr()[i] = static_cast<float>(rng.normal(0, 0.02));
      }
    }
    for (int n : spec.lengths) {
      auto x = TensorT<float>::zeros({n, spec.d_e});
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        x.ptr()[i] = static_cast<float>(rng.normal(0, 1));
      }
      std::vector<double> fwd_ms;
      for (int r = 0; r < spec.reps; ++r) {
        const auto t0 = Clock::now();
        auto y = causal_rn_forward(params, cfg, x);
        fwd_ms.push_back(
            std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
        if (y.numel() == 0) throw std::logic_error("unreachable");
      }
      // drive a decode session to position n, then time steps there
      auto st = decode_init(params, cfg);
      std::vector<float> xv(static_cast<std::size_t>(spec.d_e), 0.1f);
      for (int i = 0; i < n; ++i) decode_step(st, params, cfg, xv);
      const std::size_t state_bytes = st.state_bytes();
      std::vector<double> step_ms;
      for (int r = 0; r < std::max(spec.reps, 5); ++r) {
        auto probe = st;  // keep the position fixed across repetitions
        const auto t0 = Clock::now();
        decode_step(probe, params, cfg, xv);
        step_ms.push_back(
            std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
      }
      report.rows.push_back({variant, n, detail::median(fwd_ms),
                             detail::median(step_ms), state_bytes});
    }
  }
  return report;
}

inline void write_bench_csv(std::ostream& os, const BenchReport& r) {
  os << "variant,n,wall_ms_forward,wall_ms_step,peak_state_bytes\n";
  for (const auto& row : r.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%d,%.4f,%.6f,%zu", row.variant.c_str(),
                  row.n, row.wall_ms_forward, row.wall_ms_step,
                  row.peak_state_bytes);
    os << buf << "\n";
  }
}

// ---------------------------------------------------------------------------
// Convergence sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  int L = 0;
  std::string variant;
  std::int64_t iters_to_target = -1;  // -1: did not converge within max_iters
};

struct SweepReport {
  std::vector<SweepRow> rows;
};

// Model-level variant table for the sweep and the ablations.
inline TrainConfig sweep_variant_config(const TrainConfig& base,
                                        const std::string& name) {
  TrainConfig c = base;
  c.model.kind = ModelKind::CausalRN;
  c.model.rn.activation = Activation::Exp;
  c.model.rn.post_reduction_norm = true;
  c.model.rn.path = RNPath::Quadratic;
  if (name == "exact") {
    c.model.rn.pre_act_norm = PreActNorm::Exact;
  } else if (name == "approximate") {
    c.model.rn.pre_act_norm = PreActNorm::Approximate;
  } else if (name == "none") {
    c.model.rn.pre_act_norm = PreActNorm::None;
  } else if (name == "linear") {
    c.model.rn.path = RNPath::Linear;
    c.model.rn.pre_act_norm = PreActNorm::Approximate;
  } else if (name == "linear-none") {
    c.model.rn.path = RNPath::Linear;
    c.model.rn.pre_act_norm = PreActNorm::None;
  } else if (name == "relu") {
    c.model.rn.pre_act_norm = PreActNorm::Exact;
    c.model.rn.activation = Activation::Relu;
  } else if (name == "elu") {
    c.model.rn.pre_act_norm = PreActNorm::Exact;
    c.model.rn.activation = Activation::Elu;
  } else if (name == "transformer") {
    c.model.kind = ModelKind::Transformer;
  } else {
    throw ConfigError("sweep: unknown variant '" + name +
                      "' (exact, approximate, none, linear, linear-none, "
                      "relu, elu, transformer)");
  }
  return c;
}

// run_one, when provided, receives each per-cell TrainConfig and a label
// and performs the run (the CLI uses it to tee metrics per run).
inline SweepReport run_convergence_sweep(
    const TrainConfig& base, const std::vector<int>& lengths,
    const std::vector<std::string>& variants,
    const std::function<TrainResult(const TrainConfig&, const std::string&)>&
        run_one = {}) {
  SweepReport report;
  for (int L : lengths) {
    for (const auto& v : variants) {
      TrainConfig cfg = sweep_variant_config(base, v);
      cfg.L = L;
      const std::string label = "L" + std::to_string(L) + "_" + v;
      TrainResult res = run_one ? run_one(cfg, label) : train_loop(cfg);
      report.rows.push_back({L, v, res.iters_to_target});
    }
  }
  return report;
}

inline void write_sweep_csv(std::ostream& os, const SweepReport& r) {
  os << "L,variant,iters_to_target,converged\n";
  for (const auto& row : r.rows) {
    os << row.L << ',' << row.variant << ',';
    if (row.iters_to_target >= 0) {
      os << row.iters_to_target << ",true\n";
    } else {
      os << "-1,false\n";
    }
  }
}

}  // namespace crn
