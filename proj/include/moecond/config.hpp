#pragma once

// Flat `key = value` run configuration with dotted keys. '#' starts a
// comment. Unknown keys are rejected; later assignments override earlier
// ones, which is how command-line flags override file values.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <type_traits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moecond/model.hpp"
#include "moecond/synth.hpp"
#include "moecond/trainer.hpp"

namespace moecond {

struct ExperimentConfig {
  ModelConfig model;

  // task
  std::size_t task_m = 5;
  double tail_mass = 0.2;
  Vector pi;  // explicit weights; empty means long-tail from tail_mass
  std::uint64_t task_seed = 1234;
  double input_noise = 0.5;

  // base model: trained on the uniform mixture over the same domains
  std::size_t pretrain_steps = 1000;
  double pretrain_alpha = 0.3;

  // fine-tuning stage
  TrainConfig train;

  std::size_t eval_tokens = 1024;  // analysis / ablation token set

  ExperimentConfig() { train.eval_tokens = 256; }

  Vector task_weights() const { return pi.empty() ? long_tail_weights(task_m, tail_mass) : pi; }

  DomainMixture task() const {
    DomainMixture mix = make_mixture(task_weights(), model.d_model, model.d_out, task_seed);
    mix.input_noise = input_noise;
    return mix;
  }

  DomainMixture pretrain_task() const { return reweight(task(), Vector(task_m, 1.0 / double(task_m))); }

  std::uint64_t seed() const { return train.seed; }

  void validate() const {
    model.validate();
    if (!pi.empty() && pi.size() != task_m) throw ConfigError("task.pi must have task.m entries");
    task().validate();
    if (pretrain_alpha < 0.0) throw ConfigError("pretrain.alpha must be >= 0");
    if (eval_tokens < 1) throw ConfigError("eval.tokens must be >= 1");
    train.validate(model);
  }

  bool operator==(const ExperimentConfig& o) const { return to_map() == o.to_map(); }

  std::map<std::string, std::string> to_map() const;
  void set(const std::string& key, const std::string& value);
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!value.empty() && value[0] == '-') throw ConfigError(key + ": expected a non-negative integer");
  }
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + value + "'");
}

inline Vector parse_list(const std::string& key, const std::string& value) {
  Vector out;
  std::string item;
  std::istringstream is(value);
  while (std::getline(is, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  return out;
}

}  // namespace detail

inline std::map<std::string, std::string> ExperimentConfig::to_map() const {
  using detail::format_double;
  std::map<std::string, std::string> m;
  m["model.layers"] = std::to_string(model.layers);
  m["model.n"] = std::to_string(model.n);
  m["model.k"] = std::to_string(model.k);
  m["model.n_shared"] = std::to_string(model.n_shared);
  m["model.d_model"] = std::to_string(model.d_model);
  m["model.d_hidden"] = std::to_string(model.d_hidden);
  m["task.d_out"] = std::to_string(model.d_out);
  m["task.m"] = std::to_string(task_m);
  m["task.tail_mass"] = format_double(tail_mass);
  std::string pis;
  for (std::size_t i = 0; i < pi.size(); ++i) pis += (i ? "," : "") + format_double(pi[i]);
  m["task.pi"] = pis;
  m["task.seed"] = std::to_string(task_seed);
  m["task.input_noise"] = format_double(input_noise);
  m["pretrain.steps"] = std::to_string(pretrain_steps);
  m["pretrain.alpha"] = format_double(pretrain_alpha);
  m["train.steps"] = std::to_string(train.steps);
  m["train.batch"] = std::to_string(train.batch);
  m["train.lr"] = format_double(train.lr);
  m["train.optimizer"] = std::string(to_string(train.optimizer));
  m["train.seed"] = std::to_string(train.seed);
  m["train.record_every"] = std::to_string(train.record_every);
  m["train.warmup_frac"] = format_double(train.warmup_frac);
  m["train.eval_tokens"] = std::to_string(train.eval_tokens);
  m["routing.regime"] = std::string(to_string(train.regime));
  m["routing.gamma"] = format_double(train.gamma);
  m["routing.alpha"] = format_double(train.alpha);
  m["routing.r"] = std::to_string(train.r);
  m["routing.condenser_strategy"] = std::string(to_string(train.strategy));
  m["routing.sparsify"] = train.sparsify ? "true" : "false";
  m["routing.bias_controller"] = train.bias_controller ? "true" : "false";
  m["routing.refresh_every"] = std::to_string(train.refresh_every);
  m["eval.tokens"] = std::to_string(eval_tokens);
  return m;
}

inline void ExperimentConfig::set(const std::string& key, const std::string& raw) {
  using detail::parse_number;
  const std::string value = detail::trim(raw);
  const auto size = [&] { return parse_number<std::size_t>(key, value); };
  const auto real = [&] { return parse_number<double>(key, value); };
  if (key == "model.layers") model.layers = size();
  else if (key == "model.n") model.n = size();
  else if (key == "model.k") model.k = size();
  else if (key == "model.n_shared") model.n_shared = size();
  else if (key == "model.d_model") model.d_model = size();
  else if (key == "model.d_hidden") model.d_hidden = size();
  else if (key == "task.d_out") model.d_out = size();
  else if (key == "task.m") task_m = size();
  else if (key == "task.tail_mass") tail_mass = real();
  else if (key == "task.pi") {
    pi = value.empty() ? Vector{} : detail::parse_list(key, value);
    if (!pi.empty()) task_m = pi.size();
  }
  else if (key == "task.seed") task_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "task.input_noise") input_noise = real();
  else if (key == "pretrain.steps") pretrain_steps = size();
  else if (key == "pretrain.alpha") pretrain_alpha = real();
  else if (key == "train.steps") train.steps = size();
  else if (key == "train.batch") train.batch = size();
  else if (key == "train.lr") train.lr = real();
  else if (key == "train.optimizer") train.optimizer = parse_optimizer(value);
  else if (key == "train.seed") train.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "train.record_every") train.record_every = size();
  else if (key == "train.warmup_frac") train.warmup_frac = real();
  else if (key == "train.eval_tokens") train.eval_tokens = size();
  else if (key == "routing.regime") train.regime = parse_regime(value);
  else if (key == "routing.gamma") train.gamma = real();
  else if (key == "routing.alpha") train.alpha = real();
  else if (key == "routing.r") train.r = size();
  else if (key == "routing.condenser_strategy") train.strategy = parse_condenser_strategy(value);
  else if (key == "routing.sparsify") train.sparsify = detail::parse_bool(key, value);
  else if (key == "routing.bias_controller") train.bias_controller = detail::parse_bool(key, value);
  else if (key == "routing.refresh_every") train.refresh_every = size();
  else if (key == "eval.tokens") eval_tokens = size();
  else throw UnknownKeyError("unknown config key: " + key);
}

inline void apply_overrides(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) cfg.set(k, v);
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return parse_config(in, std::move(cfg));
}

inline std::string format_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.to_map()) out += k + " = " + v + "\n";
  return out;
}

}  // namespace moecond
