#pragma once

// Flat dotted-key configuration: "key = value" lines with '#' comments.
// Precedence: built-in preset < config file < --override flags. Unknown
// keys are rejected with the offending key named; every run echoes the
// fully-resolved map so it can be replayed bit-for-bit.

#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crn/train.hpp"

namespace crn {

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline ConfigMap parse_config_text(std::istream& is) {
  ConfigMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not 'key = value': '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key at line " + std::to_string(lineno));
    }
    out[key] = val;
  }
  return out;
}

inline void apply_override(ConfigMap& m, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must be key=value, got '" + kv + "'");
  }
  m[detail::trim(kv.substr(0, eq))] = detail::trim(kv.substr(eq + 1));
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
  return {"smoke",          "desk-causalrn",      "desk-causalrn-linear",
          "desk-causalrn-relu", "desk-causalrn-elu", "desk-causalrn-nopre",
          "desk-transformer", "paper-causalrn",     "paper-transformer"};
}

inline ConfigMap preset_config(const std::string& name) {
  // desk-causalrn is the TrainConfig default; the others are deltas
  if (name == "desk-causalrn") return {};
  if (name == "smoke") {
    return {{"model.d_e", "16"},        {"model.d_h", "16"},
            {"model.blocks", "2"},      {"task.length", "2"},
            {"train.batch_size", "4"},  {"train.max_iters", "3"},
            {"train.warmup_iters", "2"}, {"train.eval_samples", "4"},
            {"train.confirm_samples", "0"}};
  }
  if (name == "desk-causalrn-linear") {
    return {{"model.path", "linear"}, {"model.pre_act_norm", "approximate"}};
  }
  if (name == "desk-causalrn-relu") return {{"model.activation", "relu"}};
  if (name == "desk-causalrn-elu") return {{"model.activation", "elu"}};
  if (name == "desk-causalrn-nopre") return {{"model.pre_act_norm", "none"}};
  if (name == "desk-transformer") {
    return {{"model.kind", "transformer"}, {"model.d_h", "256"},
            {"train.lr", "0.0005"}};
  }
  if (name == "paper-causalrn") {
    return {{"model.d_e", "192"},     {"model.d_h", "192"},
            {"model.blocks", "12"},   {"task.length", "128"},
            {"train.batch_size", "320"}, {"train.max_iters", "2000"},
            {"train.lr", "0.0005"},   {"train.warmup_iters", "50"},
            {"train.eval_samples", "320"}};
  }
  if (name == "paper-transformer") {
    return {{"model.kind", "transformer"}, {"model.d_e", "192"},
            {"model.d_h", "768"},       {"model.blocks", "12"},
            {"task.length", "128"},     {"train.batch_size", "320"},
            {"train.max_iters", "2000"}, {"train.lr", "0.0005"},
            {"train.warmup_iters", "50"}, {"train.eval_samples", "320"}};
  }
  std::string names;
  for (const auto& n : preset_names()) names += " " + n;
  throw ConfigError("unknown preset '" + name + "'; available:" + names);
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

namespace detail {

struct KeyReader {
  const ConfigMap& m;
  std::set<std::string> consumed;

  const std::string* find(const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) return nullptr;
    consumed.insert(k);
    return &it->second;
  }

  template <class T, class Fn>
  void get(const std::string& k, T& dst, Fn parse) {
    if (const std::string* v = find(k)) dst = parse(k, *v);
  }
};

inline double parse_double(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects a number, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long i = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects an unsigned integer, got '" +
                      v + "'");
  }
}

inline bool parse_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + k + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

// Builds a TrainConfig from a merged map. Keys outside the known set are
// errors unless they begin with one of `extra_ok_prefixes` (the bench and
// sweep commands own their own keys).
inline TrainConfig resolve_train_config(
    const ConfigMap& m,
    const std::vector<std::string>& extra_ok_prefixes = {}) {
  TrainConfig c;
  detail::KeyReader r{m, {}};

  if (const auto* v = r.find("model.kind")) {
    if (*v == "causalrn") {
      c.model.kind = ModelKind::CausalRN;
    } else if (*v == "transformer") {
      c.model.kind = ModelKind::Transformer;
    } else {
      throw ConfigError("config: model.kind must be causalrn or transformer, "
                        "got '" + *v + "'");
    }
  }
  r.get("model.d_e", c.model.d_e,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  r.get("model.d_h", c.model.d_h,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  r.get("model.blocks", c.model.blocks,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  if (const auto* v = r.find("model.activation")) {
    if (*v == "exp") {
      c.model.rn.activation = Activation::Exp;
    } else if (*v == "relu") {
      c.model.rn.activation = Activation::Relu;
    } else if (*v == "elu") {
      c.model.rn.activation = Activation::Elu;
    } else {
      throw ConfigError("config: model.activation must be exp/relu/elu, got '" +
                        *v + "'");
    }
  }
  if (const auto* v = r.find("model.pre_act_norm")) {
    if (*v == "none") {
      c.model.rn.pre_act_norm = PreActNorm::None;
    } else if (*v == "exact") {
      c.model.rn.pre_act_norm = PreActNorm::Exact;
    } else if (*v == "approximate") {
      c.model.rn.pre_act_norm = PreActNorm::Approximate;
    } else {
      throw ConfigError("config: model.pre_act_norm must be "
                        "none/exact/approximate, got '" + *v + "'");
    }
  }
  r.get("model.post_reduction_norm", c.model.rn.post_reduction_norm,
        detail::parse_bool);
  r.get("model.prefix_average", c.model.rn.prefix_average, detail::parse_bool);
  if (const auto* v = r.find("model.path")) {
    if (*v == "quadratic") {
      c.model.rn.path = RNPath::Quadratic;
    } else if (*v == "linear") {
      c.model.rn.path = RNPath::Linear;
    } else {
      throw ConfigError("config: model.path must be quadratic or linear, got '" +
                        *v + "'");
    }
  }
  r.get("model.prenorm", c.model.transformer_prenorm, detail::parse_bool);

  r.get("task.length", c.L,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  if (const auto* v = r.find("task.mask_mode")) {
    if (*v == "copy_only") {
      c.mask_mode = MaskMode::CopyOnly;
    } else if (*v == "all_positions") {
      c.mask_mode = MaskMode::AllPositions;
    } else {
      throw ConfigError("config: task.mask_mode must be copy_only or "
                        "all_positions, got '" + *v + "'");
    }
  }

  r.get("train.lr", c.lr, detail::parse_double);
  r.get("train.beta1", c.beta1, detail::parse_double);
  r.get("train.beta2", c.beta2, detail::parse_double);
  r.get("train.adam_eps", c.adam_eps, detail::parse_double);
  r.get("train.grad_clip", c.grad_clip, detail::parse_double);
  r.get("train.warmup_iters", c.warmup_iters, detail::parse_int);
  r.get("train.max_iters", c.max_iters, detail::parse_int);
  r.get("train.checkpoint_every", c.checkpoint_every, detail::parse_int);
  r.get("train.batch_size", c.batch_size,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  r.get("train.seed", c.seed, detail::parse_u64);
  r.get("train.eval_samples", c.eval_samples,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  r.get("train.confirm_samples", c.confirm_samples,
        [](auto& k, auto& v) { return static_cast<int>(detail::parse_int(k, v)); });
  r.get("train.target_accuracy", c.target_accuracy, detail::parse_double);
  r.get("train.eval_on_train", c.eval_on_train, detail::parse_bool);

  for (const auto& [k, v] : m) {
    if (r.consumed.count(k)) continue;
    bool ok = false;
    for (const auto& p : extra_ok_prefixes) {
      if (k.rfind(p, 0) == 0) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("config: unknown key '" + k + "'");
  }
  c.validate_();
  return c;
}

namespace detail {

inline std::string fmt_double(double d) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

}  // namespace detail

// Canonical fully-resolved map; resolve(to_config_map(c)) == c.
inline ConfigMap to_config_map(const TrainConfig& c) {
  ConfigMap m;
  m["model.kind"] = to_string(c.model.kind);
  m["model.d_e"] = std::to_string(c.model.d_e);
  m["model.d_h"] = std::to_string(c.model.d_h);
  m["model.blocks"] = std::to_string(c.model.blocks);
  m["model.activation"] = to_string(c.model.rn.activation);
  m["model.pre_act_norm"] = to_string(c.model.rn.pre_act_norm);
  m["model.post_reduction_norm"] = c.model.rn.post_reduction_norm ? "true" : "false";
  m["model.prefix_average"] = c.model.rn.prefix_average ? "true" : "false";
  m["model.path"] = to_string(c.model.rn.path);
  m["model.prenorm"] = c.model.transformer_prenorm ? "true" : "false";
  m["task.length"] = std::to_string(c.L);
  m["task.mask_mode"] = to_string(c.mask_mode);
  m["train.lr"] = detail::fmt_double(c.lr);
  m["train.beta1"] = detail::fmt_double(c.beta1);
  m["train.beta2"] = detail::fmt_double(c.beta2);
  m["train.adam_eps"] = detail::fmt_double(c.adam_eps);
  m["train.grad_clip"] = detail::fmt_double(c.grad_clip);
  m["train.warmup_iters"] = std::to_string(c.warmup_iters);
  m["train.max_iters"] = std::to_string(c.max_iters);
  m["train.checkpoint_every"] = std::to_string(c.checkpoint_every);
  m["train.batch_size"] = std::to_string(c.batch_size);
  m["train.seed"] = std::to_string(c.seed);
  m["train.eval_samples"] = std::to_string(c.eval_samples);
  m["train.confirm_samples"] = std::to_string(c.confirm_samples);
  m["train.target_accuracy"] = detail::fmt_double(c.target_accuracy);
  m["train.eval_on_train"] = c.eval_on_train ? "true" : "false";
  return m;
}

inline std::string config_text(const ConfigMap& m) {
  std::ostringstream os;
  for (const auto& [k, v] : m) os << k << " = " << v << "\n";
  return os.str();
}

inline std::string echo_text(const TrainConfig& c) {
  return config_text(to_config_map(c));
}

}  // namespace crn
