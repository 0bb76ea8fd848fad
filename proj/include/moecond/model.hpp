#pragma once

// A small residual stack of MoE layers with a linear read-out head:
//
//   x_{l+1} = x_l + MoE_l(x_l),   prediction = x_L · head
//
// plus the textual checkpoint format (key -> matrix map with a config header).

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "moecond/moe_layer.hpp"
#include "moecond/seed.hpp"
#include "moecond/tape.hpp"

namespace moecond {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t n = 8;
  std::size_t k = 4;
  std::size_t n_shared = 1;
  std::size_t d_model = 16;
  std::size_t d_hidden = 16;
  std::size_t d_out = 8;

  MoEConfig layer_config() const {
    MoEConfig c;
    c.n = n;
    c.k = k;
    c.r = 0;
    c.n_shared = n_shared;
    c.d_model = d_model;
    c.d_hidden = d_hidden;
    return c;
  }

  void validate() const {
    if (layers == 0) throw ConfigError("model: need at least one layer");
    if (d_out == 0) throw ConfigError("model: d_out must be positive");
    layer_config().validate();
  }

  bool operator==(const ModelConfig&) const = default;
};

struct MoEModel {
  ModelConfig config;
  std::vector<MoELayer> layers;
  Matrix head;  // d_model x d_out

  void set_condensers(std::size_t layer, std::vector<std::size_t> condensers) {
    MoEConfig& c = layers.at(layer).config;
    c.condensers = std::move(condensers);
    c.r = c.condensers.size();
    c.validate();
  }

  void clear_condensers() {
    for (std::size_t l = 0; l < layers.size(); ++l) set_condensers(l, {});
  }

  std::size_t condenser_count() const {
    std::size_t r = 0;
    for (const auto& l : layers) r = std::max(r, l.config.r);
    return r;
  }
};

namespace detail {

inline Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

inline ExpertParams init_expert(const ModelConfig& c, std::mt19937_64& rng) {
  return ExpertParams{gaussian(c.d_model, c.d_hidden, 1.0 / std::sqrt(double(c.d_model)), rng),
                      gaussian(c.d_hidden, c.d_model, 0.5 / std::sqrt(double(c.d_hidden)), rng)};
}

}  // namespace detail

inline MoEModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  MoEModel model;
  model.config = config;
  for (std::size_t l = 0; l < config.layers; ++l) {
    MoELayer layer;
    layer.config = config.layer_config();
    layer.router.gate =
        detail::gaussian(config.d_model, config.n, 1.0 / std::sqrt(double(config.d_model)), rng);
    layer.router.bias.assign(config.n, 0.0);
    for (std::size_t i = 0; i < config.n; ++i) layer.experts.push_back(detail::init_expert(config, rng));
    for (std::size_t i = 0; i < config.n_shared; ++i) {
      layer.shared.push_back(detail::init_expert(config, rng));
    }
    model.layers.push_back(std::move(layer));
  }
  model.head =
      detail::gaussian(config.d_model, config.d_out, 1.0 / std::sqrt(double(config.d_model)), rng);
  return model;
}

// ---------------------------------------------------------------------------
// Parameter enumeration. The order here fixes optimizer state layout,
// checkpoint key order and tape leaf order.

inline std::string expert_key(std::size_t layer, std::size_t expert, const char* part) {
  return "layer" + std::to_string(layer) + ".expert" + std::to_string(expert) + "." + part;
}

inline std::string shared_key(std::size_t layer, std::size_t k, const char* part) {
  return "layer" + std::to_string(layer) + ".shared" + std::to_string(k) + "." + part;
}

inline std::string router_key(std::size_t layer, const char* part) {
  return "layer" + std::to_string(layer) + ".router." + part;
}

template <typename Model, typename Fn>
void for_each_parameter(Model& model, Fn&& fn) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    fn(router_key(l, "gate"), layer.router.gate);
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
      fn(expert_key(l, i, "up"), layer.experts[i].up);
      fn(expert_key(l, i, "down"), layer.experts[i].down);
    }
    for (std::size_t i = 0; i < layer.shared.size(); ++i) {
      fn(shared_key(l, i, "up"), layer.shared[i].up);
      fn(shared_key(l, i, "down"), layer.shared[i].down);
    }
  }
  fn(std::string("head"), model.head);
}

inline std::size_t parameter_count(const MoEModel& model) {
  std::size_t count = 0;
  for_each_parameter(model, [&](const std::string&, const Matrix&) { ++count; });
  return count;
}

struct ModelVars {
  std::vector<LayerVars> layers;
  Var head;
  std::vector<Var> flat;  // for_each_parameter order
};

// Groups leaves given in for_each_parameter order into per-layer views.
inline ModelVars vars_from_flat(const MoEModel& model, std::span<const Var> flat) {
  if (flat.size() != parameter_count(model)) throw DimensionError("model vars: parameter count mismatch");
  ModelVars vars;
  vars.flat.assign(flat.begin(), flat.end());
  std::size_t cursor = 0;
  for (const MoELayer& layer : model.layers) {
    LayerVars lv;
    lv.gate = vars.flat[cursor++];
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
      Var up = vars.flat[cursor++];
      Var down = vars.flat[cursor++];
      lv.experts.push_back({up, down});
    }
    for (std::size_t i = 0; i < layer.shared.size(); ++i) {
      Var up = vars.flat[cursor++];
      Var down = vars.flat[cursor++];
      lv.shared.push_back({up, down});
    }
    vars.layers.push_back(std::move(lv));
  }
  vars.head = vars.flat[cursor++];
  return vars;
}

inline ModelVars bind_parameters(Tape& tape, const MoEModel& model, bool requires_grad = true) {
  std::vector<Var> flat;
  for_each_parameter(model, [&](const std::string&, const Matrix& m) { flat.push_back(tape.leaf(m, requires_grad)); });
  return vars_from_flat(model, flat);
}

inline std::vector<Matrix> parameter_values(const MoEModel& model) {
  std::vector<Matrix> out;
  for_each_parameter(model, [&](const std::string&, const Matrix& m) { out.push_back(m); });
  return out;
}

struct ModelForward {
  Var prediction;
  std::vector<LayerForward> layers;
};

inline ModelForward record_forward(Tape& tape, const MoEModel& model, const ModelVars& vars,
                                   const Matrix& inputs, BackwardRegime regime) {
  if (inputs.cols() != model.config.d_model) {
    throw DimensionError("model forward: input width " + std::to_string(inputs.cols()) +
                         " != d_model " + std::to_string(model.config.d_model));
  }
  ModelForward fwd;
  Var x = tape.constant(inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerForward lf = record_layer(tape, model.layers[l], vars.layers[l], x, regime);
    x = add(x, lf.output);
    fwd.layers.push_back(std::move(lf));
  }
  fwd.prediction = matmul(x, vars.head);
  return fwd;
}

// Forward-only evaluation with plain values.
struct Evaluation {
  Matrix prediction;
  std::vector<Matrix> layer_inputs;
  std::vector<Matrix> layer_outputs;
  std::vector<std::vector<RouterDecision>> decisions;  // per layer, per token
};

inline Evaluation evaluate(const MoEModel& model, const Matrix& inputs) {
  Tape tape;
  const ModelVars vars = bind_parameters(tape, model, false);
  Evaluation ev;
  Var x = tape.constant(inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    ev.layer_inputs.push_back(x.value());
    LayerForward lf = record_layer(tape, model.layers[l], vars.layers[l], x, BackwardRegime::Masked);
    ev.layer_outputs.push_back(lf.output.value());
    ev.decisions.push_back(std::move(lf.decisions));
    x = add(x, lf.output);
  }
  ev.prediction = matmul(x, vars.head).value();
  return ev;
}

inline double mean_squared_error(const Matrix& pred, const Matrix& target) {
  require_same_shape(pred, target, "mean_squared_error");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    total += d * d;
  }
  return total / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   moecond-checkpoint 1
//   config <name> <value>          (one per ModelConfig field)
//   <key> <rows> <cols> v0 v1 ...  (one per matrix, %.17g)
//
// Keys: layer{L}.router.gate, layer{L}.router.bias, layer{L}.router.condensers,
// layer{L}.expert{i}.up/.down, layer{L}.shared{k}.up/.down, head.

inline void write_matrix_line(std::ostream& os, const std::string& key, const Matrix& m) {
  os << key << ' ' << m.rows() << ' ' << m.cols();
  for (double v : m.data()) os << ' ' << v;
  os << '\n';
}

inline void save_checkpoint(const MoEModel& model, std::ostream& os) {
  os << std::setprecision(17);
  os << "moecond-checkpoint 1\n";
  const ModelConfig& c = model.config;
  os << "config layers " << c.layers << "\nconfig n " << c.n << "\nconfig k " << c.k
     << "\nconfig n_shared " << c.n_shared << "\nconfig d_model " << c.d_model
     << "\nconfig d_hidden " << c.d_hidden << "\nconfig d_out " << c.d_out << '\n';
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& layer = model.layers[l];
    os << "config layer" << l << ".k " << layer.config.k << '\n';
    write_matrix_line(os, router_key(l, "bias"), Matrix::row_vector(layer.router.bias));
    std::vector<double> j(layer.config.condensers.begin(), layer.config.condensers.end());
    write_matrix_line(os, router_key(l, "condensers"), Matrix(1, j.size(), j));
  }
  for_each_parameter(model,
                     [&](const std::string& key, const Matrix& m) { write_matrix_line(os, key, m); });
}

inline void save_checkpoint(const MoEModel& model, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw EvaluationError("cannot write checkpoint: " + path);
  save_checkpoint(model, os);
}

inline MoEModel load_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "moecond-checkpoint" || version != 1) {
    throw ConfigError("not a moecond checkpoint");
  }
  ModelConfig c;
  std::map<std::string, std::size_t> layer_k;
  std::map<std::string, Matrix> matrices;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config") {
      std::string name;
      std::size_t value = 0;
      ls >> name >> value;
      if (name == "layers") c.layers = value;
      else if (name == "n") c.n = value;
      else if (name == "k") c.k = value;
      else if (name == "n_shared") c.n_shared = value;
      else if (name == "d_model") c.d_model = value;
      else if (name == "d_hidden") c.d_hidden = value;
      else if (name == "d_out") c.d_out = value;
      else layer_k[name] = value;
      continue;
    }
    std::size_t rows = 0, cols = 0;
    if (!(ls >> rows >> cols)) throw ConfigError("checkpoint: malformed entry " + key);
    std::vector<double> data(rows * cols);
    for (double& v : data) {
      std::string tok;
      if (!(ls >> tok)) throw ConfigError("checkpoint: truncated entry " + key);
      v = std::stod(tok);
    }
    matrices.emplace(key, Matrix(rows, cols, std::move(data)));
  }

  MoEModel model = init_model(c, 0);
  auto take = [&](const std::string& key) -> Matrix {
    auto it = matrices.find(key);
    if (it == matrices.end()) throw ConfigError("checkpoint: missing key " + key);
    return it->second;
  };
  for_each_parameter(model, [&](const std::string& key, Matrix& m) {
    Matrix loaded = take(key);
    if (!loaded.same_shape(m)) throw DimensionError("checkpoint: bad shape for " + key);
    m = std::move(loaded);
  });
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    MoELayer& layer = model.layers[l];
    const Matrix bias = take(router_key(l, "bias"));
    layer.router.bias.assign(bias.data().begin(), bias.data().end());
    auto kit = layer_k.find("layer" + std::to_string(l) + ".k");
    if (kit != layer_k.end()) layer.config.k = kit->second;
    const Matrix jm = take(router_key(l, "condensers"));
    std::vector<std::size_t> j;
    for (double v : jm.data()) j.push_back(std::size_t(v));
    model.set_condensers(l, std::move(j));
    layer.validate();
  }
  return model;
}

inline MoEModel load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  return load_checkpoint(is);
}

}  // namespace moecond
