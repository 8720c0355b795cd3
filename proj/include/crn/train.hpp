#pragma once

// Training harness: online copy-task batches, masked cross entropy, Adam
// with linear warmup, per-iteration metrics, early stop on a confirmed
// target accuracy, and bit-exact checkpoint/resume.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "crn/checkpoint.hpp"
#include "crn/copy_task.hpp"
#include "crn/model.hpp"
#include "crn/optim.hpp"

namespace crn {

struct TrainConfig {
  ModelConfig model;
  int L = 16;
  MaskMode mask_mode = MaskMode::CopyOnly;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;
  std::int64_t warmup_iters = 50;
  std::int64_t max_iters = 3000;
  int batch_size = 32;
  std::uint64_t seed = 1234;
  int eval_samples = 32;      // per-iteration accuracy draw
  int confirm_samples = 320;  // early-stop confirmation draw, 0 disables
  double target_accuracy = 0.99;
  bool eval_on_train = false;  // measure accuracy on the training batch
  std::int64_t checkpoint_every = 0;

  void validate_() const {
    if (L < 1) throw ConfigError("train: task.length must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
      throw ConfigError("train: beta1 and beta2 must lie in (0, 1)");
    }
    if (warmup_iters > max_iters) {
      throw ConfigError("train: warmup_iters must not exceed max_iters");
    }
    if (max_iters < 0 || warmup_iters < 0) {
      throw ConfigError("train: iteration counts must be non-negative");
    }
    if (eval_samples < 1 && !eval_on_train) {
      throw ConfigError("train: eval_samples must be >= 1");
    }
    if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) {
      throw ConfigError("train: target_accuracy must lie in (0, 1]");
    }
    resolved_model().validate_();
  }

  // The context window is pinned to the task: 2L + 2.
  ModelConfig resolved_model() const {
    ModelConfig mc = model;
    mc.vocab = Vocab::size;
    mc.max_context = copy_seq_len(L);
    mc.rn.d_e = mc.d_e;
    mc.rn.d_h = mc.d_h;
    return mc;
  }
};

struct IterRow {
  std::int64_t iter = 0;
  double loss = 0;
  double acc = 0;
  double lr = 0;
  double wall_ms = 0;
};

inline const char* metrics_csv_header() { return "iter,loss,acc,lr,wall_ms"; }

inline std::string format_metrics_row(const IterRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.3f",
                static_cast<long long>(r.iter), r.loss, r.acc, r.lr, r.wall_ms);
  return buf;
}

struct TrainResult {
  std::vector<IterRow> rows;
  std::int64_t iters_to_target = -1;  // -1: target not reached
  double final_loss = 0;
  double final_acc = 0;
  std::string checkpoint_file;
  ModelT<float> model;
};

namespace detail {

inline Checkpoint snapshot(ModelT<float>& model, const AdamStateT<float>& st,
                           const Pcg32& train_rng, const Pcg32& eval_rng,
                           std::int64_t iteration,
                           const std::string& config_text) {
  Checkpoint ck;
  ck.config_text = config_text;
  ck.iteration = iteration;
  ck.train_rng = train_rng.state();
  ck.eval_rng = eval_rng.state();
  ck.adam_t = st.t;
  std::size_t idx = 0;
  model.visit([&](const std::string& name, TensorT<float>& t, ParamKind) {
    ParamBlob pb;
    pb.name = name;
    pb.dims = t.shape;
    pb.data.assign(t.ptr(), t.ptr() + t.numel());
    ck.params.push_back(std::move(pb));
    if (!st.m.empty()) {
      ck.adam_m.push_back({name, t.shape, {st.m[idx].begin(), st.m[idx].end()}});
      ck.adam_v.push_back({name, t.shape, {st.v[idx].begin(), st.v[idx].end()}});
    }
    ++idx;
  });
  return ck;
}

inline void restore(const Checkpoint& ck, ModelT<float>& model,
                    AdamStateT<float>& st, Pcg32& train_rng, Pcg32& eval_rng) {
  std::size_t idx = 0;
  model.visit([&](const std::string& name, TensorT<float>& t, ParamKind) {
    if (idx >= ck.params.size() || ck.params[idx].name != name ||
        ck.params[idx].dims != t.shape) {
      throw std::runtime_error("checkpoint: parameter mismatch at '" + name +
                               "' (checkpoint does not fit this config)");
    }
    std::copy(ck.params[idx].data.begin(), ck.params[idx].data.end(), t.ptr());
    if (!ck.adam_m.empty()) {
      st.m.emplace_back(ck.adam_m[idx].data.begin(), ck.adam_m[idx].data.end());
      st.v.emplace_back(ck.adam_v[idx].data.begin(), ck.adam_v[idx].data.end());
    }
    ++idx;
  });
  if (idx != ck.params.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch");
  }
  st.t = ck.adam_t;
  train_rng.set_state(ck.train_rng);
  eval_rng.set_state(ck.eval_rng);
}

}  // namespace detail

// Runs the training loop. `config_text` is embedded in checkpoints;
// `out_dir` receives model.ckpt (empty string keeps everything in memory);
// `metrics` (optional) receives one CSV row per iteration plus the initial
// evaluation row. `resume` continues from a checkpoint bit-exactly.
inline TrainResult train_loop(const TrainConfig& cfg,
                              const std::string& config_text = "",
                              std::ostream* metrics = nullptr,
                              const std::string& out_dir = "",
                              const Checkpoint* resume = nullptr) {
  cfg.validate_();
  const ModelConfig mc = cfg.resolved_model();
  TrainResult res{.model = ModelT<float>::create(mc)};
  auto& model = res.model;
  AdamStateT<float> adam;
  AdamConfig ac{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip};
  Pcg32 train_rng(cfg.seed, 1);
  Pcg32 eval_rng(cfg.seed, 2);
  std::int64_t start_iter = 0;
  if (resume) {
    detail::restore(*resume, model, adam, train_rng, eval_rng);
    start_iter = resume->iteration;
  } else {
    init_model(model, cfg.seed);
  }

  std::string ckpt_path;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    ckpt_path = (std::filesystem::path(out_dir) / "model.ckpt").string();
  }
  const auto save = [&](std::int64_t iter) {
    if (ckpt_path.empty()) return;
    save_checkpoint(ckpt_path,
                    detail::snapshot(model, adam, train_rng, eval_rng, iter,
                                     config_text));
    res.checkpoint_file = ckpt_path;
  };

  if (metrics) *metrics << metrics_csv_header() << "\n";
  const auto emit = [&](const IterRow& row) {
    res.rows.push_back(row);
    if (metrics) {
      *metrics << format_metrics_row(row) << "\n";
      metrics->flush();
    }
  };

  const auto eval_metrics = [&](double* loss_out) {
    auto eb = generate_batch(eval_rng, cfg.L, cfg.eval_samples, cfg.mask_mode);
    auto logits = model.forward(eb.tokens, eb.batch, eb.seq);
    if (loss_out) {
      *loss_out = static_cast<double>(
          cross_entropy(logits, eb.targets, eb.mask)(0));
    }
    return parallel_accuracy(logits, eb);
  };

  using Clock = std::chrono::steady_clock;
  if (!resume) {
    const auto t0 = Clock::now();
    double loss0 = 0;
    const double acc0 = eval_metrics(&loss0);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit({0, loss0, acc0, 0.0, ms});
    res.final_loss = loss0;
    res.final_acc = acc0;
  }

  for (std::int64_t iter = start_iter + 1; iter <= cfg.max_iters; ++iter) {
    const auto t0 = Clock::now();
    auto batch = generate_batch(train_rng, cfg.L, cfg.batch_size, cfg.mask_mode);
    double loss_val = 0;
    double train_acc = 0;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      auto logits = model.forward(batch.tokens, batch.batch, batch.seq);
      auto loss = cross_entropy(logits, batch.targets, batch.mask);
      loss_val = static_cast<double>(loss(0));
      if (!std::isfinite(loss_val)) {
        // earlier periodic checkpoints stay on disk
        throw NumericError("train: non-finite loss at iteration " +
                           std::to_string(iter));
      }
      if (cfg.eval_on_train) train_acc = parallel_accuracy(logits, batch);
      tape.backward(loss);
      adam_step(model, tape, adam, ac, lr_at(iter - 1, cfg.lr, cfg.warmup_iters));
    }
    const double acc = cfg.eval_on_train ? train_acc : eval_metrics(nullptr);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit({iter, loss_val, acc, lr_at(iter - 1, cfg.lr, cfg.warmup_iters), ms});
    res.final_loss = loss_val;
    res.final_acc = acc;

    bool stop = false;
    if (acc >= cfg.target_accuracy) {
      double confirmed = acc;
      if (cfg.confirm_samples > 0) {
        auto cb = generate_batch(eval_rng, cfg.L, cfg.confirm_samples,
                                 cfg.mask_mode);
        auto clogits = model.forward(cb.tokens, cb.batch, cb.seq);
        confirmed = parallel_accuracy(clogits, cb);
      }
      if (confirmed >= cfg.target_accuracy) {
        res.iters_to_target = iter;
        res.final_acc = confirmed;
        stop = true;
      }
    }
    if (stop || iter == cfg.max_iters ||
        (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0)) {
      save(iter);
    }
    if (stop) break;
  }
  if (cfg.max_iters == start_iter) save(start_iter);
  return res;
}

}  // namespace crn
