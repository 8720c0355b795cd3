// Command-line driver: training runs, evaluation, incremental decoding,
// ablation grids, complexity benchmarks, and convergence sweeps.
//
// Exit codes: 0 success, 2 invalid configuration or usage, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crn/bench.hpp"
#include "crn/config.hpp"
#include "crn/model.hpp"
#include "crn/train.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string preset;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool need_out = true) {
  cmd->add_option("--preset", o.preset, "Built-in preset name");
  cmd->add_option("--config", o.config_path, "Dotted-key config file");
  cmd->add_option("--override", o.overrides,
                  "key=value override, wins over file and preset")
      ->take_all();
  auto* out = cmd->add_option("--out", o.out_dir, "Output directory");
  if (need_out) out->required();
}

crn::TrainConfig resolve_from(const CommonOpts& o,
                              const std::vector<std::string>& extra_prefixes = {}) {
  crn::ConfigMap merged;
  if (!o.preset.empty()) merged = crn::preset_config(o.preset);
  if (!o.config_path.empty()) {
    std::ifstream is(o.config_path);
    if (!is) throw crn::ConfigError("cannot open config file '" + o.config_path + "'");
    for (const auto& [k, v] : crn::parse_config_text(is)) merged[k] = v;
  }
  for (const auto& kv : o.overrides) crn::apply_override(merged, kv);
  auto cfg = crn::resolve_train_config(merged, extra_prefixes);
  if (const char* env = std::getenv("RN_SEED")) {
    cfg.seed = crn::detail::parse_u64("RN_SEED", env);
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
}

// One training run into dir: config.txt, metrics.csv, model.ckpt.
crn::TrainResult run_into(const crn::TrainConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string echo = crn::echo_text(cfg);
  write_text(dir / "config.txt", echo);
  std::ofstream csv(dir / "metrics.csv");
  auto res = crn::train_loop(cfg, echo, &csv, dir.string());
  return res;
}

std::pair<crn::TrainConfig, crn::ModelT<float>> load_model(
    const std::string& ckpt_path) {
  auto ck = crn::load_checkpoint(ckpt_path);
  std::istringstream is(ck.config_text);
  auto cfg = crn::resolve_train_config(crn::parse_config_text(is));
  auto model = crn::ModelT<float>::create(cfg.resolved_model());
  crn::AdamStateT<float> scratch;
  crn::Pcg32 r1, r2;
  crn::detail::restore(ck, model, scratch, r1, r2);
  return {cfg, std::move(model)};
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(static_cast<int>(crn::detail::parse_int(what, item)));
  }
  if (out.empty()) throw crn::ConfigError(std::string(what) + ": empty list");
  return out;
}

std::vector<std::string> parse_str_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_train(const CommonOpts& o) {
  auto cfg = resolve_from(o);
  auto res = run_into(cfg, o.out_dir);
  std::cout << "train: iters=" << res.rows.back().iter
            << " loss=" << res.final_loss << " acc=" << res.final_acc
            << (res.iters_to_target >= 0
                    ? " reached target at iter " + std::to_string(res.iters_to_target)
                    : " (target not reached)")
            << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, int samples, std::uint64_t seed,
             bool autoregressive, const std::string& dump_path) {
  auto [cfg, model] = load_model(ckpt);
  crn::Pcg32 rng(seed, 7);
  auto batch = crn::generate_batch(rng, cfg.L, samples, cfg.mask_mode);
  auto logits = model.forward(batch.tokens, batch.batch, batch.seq);
  const double loss =
      static_cast<double>(crn::cross_entropy(logits, batch.targets, batch.mask)(0));
  const double acc = crn::parallel_accuracy(logits, batch);
  std::cout << "eval: L=" << cfg.L << " samples=" << samples
            << " loss=" << loss << " parallel_acc=" << acc << "\n";
  if (!dump_path.empty()) {
    std::ofstream os(dump_path);
    if (!os) throw std::runtime_error("cannot write '" + dump_path + "'");
    crn::write_samples(os, batch);
  }
  if (autoregressive) {
    crn::Pcg32 arng(seed, 8);
    const double exact = crn::autoregressive_copy_eval(model, cfg.L, samples, arng);
    std::cout << "eval: autoregressive_exact_match=" << exact << "\n";
  }
  return 0;
}

int cmd_decode(const std::string& ckpt, int count, std::uint64_t seed,
               bool print) {
  auto [cfg, model] = load_model(ckpt);
  crn::Pcg32 rng(seed, 9);
  int ok = 0;
  for (int t = 0; t < count; ++t) {
    std::vector<std::int32_t> s(static_cast<std::size_t>(cfg.L));
    for (auto& id : s) {
      id = static_cast<std::int32_t>(rng.next_below(crn::Vocab::letters));
    }
    crn::DecodeSessionT<float> sess(model);
    sess.step(crn::Vocab::BOS);
    for (auto id : s) sess.step(id);
    auto logits = sess.step(crn::Vocab::SEP);
    std::string decoded;
    bool good = true;
    for (int i = 0; i <= cfg.L; ++i) {
      int best = 0;
      for (int v = 1; v < static_cast<int>(logits.size()); ++v) {
        if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(best)]) {
          best = v;
        }
      }
      if (i == cfg.L) {
        good = good && best == crn::Vocab::EOS;
        break;
      }
      decoded.push_back(crn::Vocab::to_char(best));
      good = good && best == s[static_cast<std::size_t>(i)];
      logits = sess.step(best);
    }
    ok += good ? 1 : 0;
    if (print) {
      std::string ref;
      for (auto id : s) ref.push_back(crn::Vocab::to_char(id));
      std::cout << (good ? "  ok " : "FAIL ") << ref << " -> " << decoded << "\n";
    }
  }
  std::cout << "decode: exact_match=" << (count ? static_cast<double>(ok) / count : 0)
            << " (" << ok << "/" << count << ")\n";
  return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& axis) {
  const auto eq = axis.find('=');
  if (eq == std::string::npos) {
    throw crn::ConfigError("--axis must be key=v1,v2,... got '" + axis + "'");
  }
  const std::string key = axis.substr(0, eq);
  const auto values = parse_str_list(axis.substr(eq + 1));
  if (values.empty()) throw crn::ConfigError("--axis: no values given");
  fs::create_directories(o.out_dir);
  for (const auto& v : values) {
    CommonOpts per = o;
    per.overrides.push_back(key + "=" + v);
    auto cfg = resolve_from(per);
    // file-system friendly leaf name
    std::string leaf = key + "_" + v;
    for (auto& ch : leaf) {
      if (ch == '.' || ch == '/') ch = '-';
    }
    auto res = run_into(cfg, fs::path(o.out_dir) / leaf);
    std::cout << "ablate " << key << "=" << v << ": "
              << (res.iters_to_target >= 0
                      ? "reached target at iter " + std::to_string(res.iters_to_target)
                      : "target not reached")
              << " final_acc=" << res.final_acc << "\n";
  }
  return 0;
}

int cmd_bench(const std::string& lengths, const std::string& variants, int reps,
              int d_e, const std::string& out_dir) {
  crn::BenchSpec spec;
  spec.lengths = parse_int_list(lengths, "--lengths");
  spec.variants = parse_str_list(variants);
  spec.reps = reps;
  spec.d_e = d_e;
  auto report = crn::run_bench_scaling(spec);
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "bench.csv");
    crn::write_bench_csv(os, report);
  }
  std::ostringstream echo;
  echo << "bench.lengths = " << lengths << "\nbench.variants = " << variants
       << "\nbench.reps = " << reps << "\nbench.d_e = " << d_e << "\n";
  write_text(fs::path(out_dir) / "config.txt", echo.str());
  crn::write_bench_csv(std::cout, report);
  return 0;
}

int cmd_sweep(const CommonOpts& o, const std::string& lengths,
              const std::string& variants) {
  auto base = resolve_from(o, {"sweep."});
  const auto Ls = parse_int_list(lengths, "--lengths");
  const auto vs = parse_str_list(variants);
  if (vs.empty()) throw crn::ConfigError("--variants: empty list");
  fs::create_directories(o.out_dir);
  auto report = crn::run_convergence_sweep(
      base, Ls, vs, [&](const crn::TrainConfig& cfg, const std::string& label) {
        auto res = run_into(cfg, fs::path(o.out_dir) / label);
        std::cout << "sweep " << label << ": "
                  << (res.iters_to_target >= 0
                          ? std::to_string(res.iters_to_target) + " iters"
                          : "did not converge")
                  << "\n";
        return res;
      });
  std::ofstream os(fs::path(o.out_dir) / "summary.csv");
  crn::write_sweep_csv(os, report);
  crn::write_sweep_csv(std::cout, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal Relation Network workbench"};
  app.require_subcommand(1);

  CommonOpts train_o, ablate_o, sweep_o;
  std::string axis;
  std::string ckpt;
  int samples = 320;
  std::uint64_t eval_seed = 1;
  bool autoregressive = false;
  std::string dump_path;
  int decode_count = 32;
  bool decode_print = false;
  std::string bench_lengths = "256,512,1024";
  std::string bench_variants = "linear,quadratic";
  int bench_reps = 5;
  int bench_de = 64;
  std::string bench_out;
  std::string sweep_lengths = "4,8,16";
  std::string sweep_variants = "exact,linear";

  auto* train = app.add_subcommand("train", "Train a model on the copying task");
  add_common(train, train_o);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on fresh samples");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--samples", samples, "Evaluation sample count");
  eval->add_option("--seed", eval_seed, "Evaluation seed");
  eval->add_flag("--autoregressive", autoregressive,
                 "Also run greedy autoregressive exact-match");
  eval->add_option("--dump-samples", dump_path,
                   "Write the evaluation batch in the sample dump format");

  auto* decode = app.add_subcommand("decode", "Greedy incremental decoding demo");
  decode->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  decode->add_option("--count", decode_count, "Number of prompts");
  decode->add_option("--seed", eval_seed, "Prompt seed");
  decode->add_flag("--print", decode_print, "Print each decoded string");

  auto* ablate = app.add_subcommand("ablate", "Train once per value of one axis");
  add_common(ablate, ablate_o);
  ablate->add_option("--axis", axis, "key=v1,v2,... grid over one config key")
      ->required();

  auto* bench = app.add_subcommand("bench", "Forward/decode complexity scaling");
  bench->add_option("--lengths", bench_lengths, "Comma-separated sequence lengths");
  bench->add_option("--variants", bench_variants,
                    "Comma-separated: linear, linear-approx, quadratic, quadratic-none");
  bench->add_option("--reps", bench_reps, "Repetitions per measurement (median)");
  bench->add_option("--d-e", bench_de, "Embedding/hidden size");
  bench->add_option("--out", bench_out, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Convergence sweep over lengths x variants");
  add_common(sweep, sweep_o);
  sweep->add_option("--lengths", sweep_lengths, "Comma-separated string lengths");
  sweep->add_option("--variants", sweep_variants,
                    "Comma-separated: exact, approximate, none, linear, "
                    "linear-none, relu, elu, transformer");

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(train_o);
    if (eval->parsed()) {
      return cmd_eval(ckpt, samples, eval_seed, autoregressive, dump_path);
    }
    if (decode->parsed()) {
      return cmd_decode(ckpt, decode_count, eval_seed, decode_print);
    }
    if (ablate->parsed()) return cmd_ablate(ablate_o, axis);
    if (bench->parsed()) {
      return cmd_bench(bench_lengths, bench_variants, bench_reps, bench_de,
                       bench_out);
    }
    if (sweep->parsed()) return cmd_sweep(sweep_o, sweep_lengths, sweep_variants);
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const crn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const crn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
