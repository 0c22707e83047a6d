// Run configuration: a sectioned key = value text format with dotted-key
// overrides. Every key is known up front; anything else is rejected.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "skipvae/metrics.hpp"
#include "skipvae/models.hpp"
#include "skipvae/training.hpp"

namespace skipvae {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx
  std::string dir;                   // directory holding the four standard MNIST files
  std::string train_images, train_labels, test_images, test_labels;
  std::string binarization = "threshold";  // threshold | stochastic
  std::size_t train_size = 0;              // 0 keeps every training example
  std::size_t eval_size = 0;               // 0 keeps every held-out example
  std::string eval_split = "test";         // test | validation (last 10,000 training examples)
  std::size_t synthetic_n = 1000;
  std::size_t synthetic_dim = 0;            // 0 follows model.data_dim
  std::size_t synthetic_eval_n = 200;

  bool operator==(const DataConfig&) const = default;
};

struct OracleConfig {
  std::size_t sweep_size = 100;
  std::string skip_draw = "gaussian";  // gaussian | aligned
  std::size_t mi_models = 10;
  std::size_t mi_points = 2000;
  std::size_t mi_samples = 4;
  double tolerance = 0.05;

  bool operator==(const OracleConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  OracleConfig oracle;
  ProbeConfig probe;
};

namespace detail {

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

inline std::string unquote(std::string s) {
  s = trim(std::move(s));
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto s = trim(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto s = trim(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto s = trim(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty() || !std::isfinite(out)) {
    throw ConfigError("key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  auto s = trim(v);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  auto s = trim(v);
  if (!s.empty() && s.front() == '[') s.erase(0, 1);
  if (!s.empty() && s.back() == ']') s.pop_back();
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_size(key, item));
  }
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out + "]";
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

inline std::string one_of(const std::string& key, const std::string& v, std::initializer_list<const char*> allowed) {
  auto s = unquote(v);
  for (const char* a : allowed)
    if (s == a) return s;
  std::string msg = "key '" + key + "': '" + s + "' is not one of";
  for (const char* a : allowed) msg += std::string(" ") + a;
  throw ConfigError(msg);
}

struct KeyEntry {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SKIPVAE_KEY(name, field, parse, show)                                                           \
  KeyEntry {                                                                                            \
    name, [](RunConfig& c, const std::string& v) { c.field = parse(name, v); },                         \
        [](const RunConfig& c) { return show(c.field); }                                                 \
  }

inline std::string size_text(std::size_t v) { return std::to_string(v); }
inline std::string u64_text(std::uint64_t v) { return std::to_string(v); }
inline std::string string_in(const std::string&, const std::string& v) { return unquote(v); }

inline const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = {
      SKIPVAE_KEY("run.seed", seed, parse_u64, u64_text),
      SKIPVAE_KEY("model.latent_dim", model.latent_dim, parse_size, size_text),
      SKIPVAE_KEY("model.data_dim", model.data_dim, parse_size, size_text),
      SKIPVAE_KEY("model.encoder_widths", model.encoder_widths, parse_sizes, join_sizes),
      SKIPVAE_KEY("model.decoder_widths", model.decoder_widths, parse_sizes, join_sizes),
      SKIPVAE_KEY("model.skip_enabled", model.skip_enabled, parse_bool, bool_text),
      KeyEntry{"model.activation",
               [](RunConfig& c, const std::string& v) {
                 c.model.activation = parse_activation(one_of("model.activation", v, {"relu", "tanh", "linear"}));
               },
               [](const RunConfig& c) { return quoted(to_string(c.model.activation)); }},
      SKIPVAE_KEY("train.learning_rate", train.learning_rate, parse_double, format_double),
      SKIPVAE_KEY("train.batch_size", train.batch_size, parse_size, size_text),
      SKIPVAE_KEY("train.epochs", train.epochs, parse_size, size_text),
      SKIPVAE_KEY("train.kl_anneal_epochs", train.kl_anneal_epochs, parse_size, size_text),
      SKIPVAE_KEY("train.elbo_samples", train.elbo_samples, parse_size, size_text),
      SKIPVAE_KEY("train.refine_steps", train.refine_steps, parse_size, size_text),
      SKIPVAE_KEY("train.refine_step_size", train.refine_step_size, parse_double, format_double),
      KeyEntry{"data.source",
               [](RunConfig& c, const std::string& v) { c.data.source = one_of("data.source", v, {"synthetic", "idx"}); },
               [](const RunConfig& c) { return quoted(c.data.source); }},
      SKIPVAE_KEY("data.dir", data.dir, string_in, quoted),
      SKIPVAE_KEY("data.train_images", data.train_images, string_in, quoted),
      SKIPVAE_KEY("data.train_labels", data.train_labels, string_in, quoted),
      SKIPVAE_KEY("data.test_images", data.test_images, string_in, quoted),
      SKIPVAE_KEY("data.test_labels", data.test_labels, string_in, quoted),
      KeyEntry{"data.binarization",
               [](RunConfig& c, const std::string& v) {
                 c.data.binarization = one_of("data.binarization", v, {"threshold", "stochastic"});
               },
               [](const RunConfig& c) { return quoted(c.data.binarization); }},
      SKIPVAE_KEY("data.train_size", data.train_size, parse_size, size_text),
      SKIPVAE_KEY("data.eval_size", data.eval_size, parse_size, size_text),
      KeyEntry{"data.eval_split",
               [](RunConfig& c, const std::string& v) {
                 c.data.eval_split = one_of("data.eval_split", v, {"test", "validation"});
               },
               [](const RunConfig& c) { return quoted(c.data.eval_split); }},
      SKIPVAE_KEY("data.synthetic_n", data.synthetic_n, parse_size, size_text),
      SKIPVAE_KEY("data.synthetic_dim", data.synthetic_dim, parse_size, size_text),
      SKIPVAE_KEY("data.synthetic_eval_n", data.synthetic_eval_n, parse_size, size_text),
      SKIPVAE_KEY("eval.kl", eval.kl, parse_bool, bool_text),
      SKIPVAE_KEY("eval.mi", eval.mi, parse_bool, bool_text),
      SKIPVAE_KEY("eval.au", eval.au, parse_bool, bool_text),
      SKIPVAE_KEY("eval.importance", eval.importance, parse_bool, bool_text),
      SKIPVAE_KEY("eval.mi_points", eval.mi_points, parse_size, size_text),
      SKIPVAE_KEY("eval.mi_samples", eval.mi_samples, parse_size, size_text),
      SKIPVAE_KEY("eval.is_samples", eval.is_samples, parse_size, size_text),
      SKIPVAE_KEY("eval.elbo_samples", eval.elbo_samples, parse_size, size_text),
      SKIPVAE_KEY("eval.au_threshold", eval.au_threshold, parse_double, format_double),
      SKIPVAE_KEY("oracle.sweep_size", oracle.sweep_size, parse_size, size_text),
      KeyEntry{"oracle.skip_draw",
               [](RunConfig& c, const std::string& v) {
                 c.oracle.skip_draw = one_of("oracle.skip_draw", v, {"gaussian", "aligned"});
               },
               [](const RunConfig& c) { return quoted(c.oracle.skip_draw); }},
      SKIPVAE_KEY("oracle.mi_models", oracle.mi_models, parse_size, size_text),
      SKIPVAE_KEY("oracle.mi_points", oracle.mi_points, parse_size, size_text),
      SKIPVAE_KEY("oracle.mi_samples", oracle.mi_samples, parse_size, size_text),
      SKIPVAE_KEY("oracle.tolerance", oracle.tolerance, parse_double, format_double),
      SKIPVAE_KEY("probe.iterations", probe.iterations, parse_size, size_text),
      SKIPVAE_KEY("probe.learning_rate", probe.learning_rate, parse_double, format_double),
  };
  return table;
}

#undef SKIPVAE_KEY

}  // namespace detail

inline void set_key(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.key == key; });
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->set(config, value);
}

inline std::string get_key(const RunConfig& config, const std::string& key) {
  const auto& table = detail::key_table();
  auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.key == key; });
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->get(config);
}

/// `key=value` with a dotted key.
inline void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_key(config, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void validate(const RunConfig& c) {
  try {
    c.model.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.eval.mi_points < 2) throw ConfigError("eval.mi_points must be at least 2");
  if (c.eval.mi_samples == 0 || c.eval.is_samples == 0 || c.eval.elbo_samples == 0) {
    throw ConfigError("eval sample counts must be positive");
  }
  if (!(c.eval.au_threshold >= 0.0)) throw ConfigError("eval.au_threshold must be non-negative");
  if (!(c.oracle.tolerance >= 0.0)) throw ConfigError("oracle.tolerance must be non-negative");
  if (c.oracle.mi_points < 2 || c.oracle.mi_samples == 0) throw ConfigError("oracle.mi_points must be >= 2, mi_samples >= 1");
  if (!(c.probe.learning_rate > 0.0)) throw ConfigError("probe.learning_rate must be positive");
}

/// Parses sectioned `key = value` text into `config`, on top of its current values.
inline void parse_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = detail::trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set_key(config, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  parse_config_text(c, ss.str(), path);
  return c;
}

/// Canonical text of every key, grouped by section; parses back to `config`.
inline std::string config_to_text(const RunConfig& config) {
  std::string out, section;
  for (const auto& e : detail::key_table()) {
    const auto dot = e.key.find('.');
    const std::string sec = e.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += e.key.substr(dot + 1) + " = " + e.get(config) + "\n";
  }
  return out;
}

}  // namespace skipvae
