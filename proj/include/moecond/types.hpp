#pragma once

// Domain types shared by the MoE layer, the routing policies and the trainer.

#include <algorithm>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "moecond/tensor.hpp"

namespace moecond {

// Expert FFN: down · silu(up · x), with x a row vector.
struct ExpertParams {
  Matrix up;    // d_model x d_hidden
  Matrix down;  // d_hidden x d_model
};

struct RouterParams {
  Matrix gate;  // d_model x n, produces the unbiased logits
  Vector bias;  // n, selection only
};

struct MoEConfig {
  std::size_t n = 8;
  std::size_t k = 2;
  std::size_t r = 0;
  std::size_t n_shared = 1;
  std::size_t d_model = 16;
  std::size_t d_hidden = 16;
  std::vector<std::size_t> condensers;  // J, ascending, |J| == r

  void validate() const {
    if (n == 0) throw ConfigError("MoEConfig: n must be positive");
    if (k < 1 || k > n) throw ConfigError("MoEConfig: k must satisfy 1 <= k <= n");
    if (r > k) throw ConfigError("MoEConfig: r must not exceed k");
    if (condensers.size() != r) throw ConfigError("MoEConfig: |J| must equal r");
    for (std::size_t i = 0; i < condensers.size(); ++i) {
      if (condensers[i] >= n) throw ConfigError("MoEConfig: condenser index out of range");
      if (i > 0 && condensers[i] <= condensers[i - 1]) {
        throw ConfigError("MoEConfig: condenser set must be strictly ascending");
      }
    }
    if (d_model == 0 || d_hidden == 0) throw ConfigError("MoEConfig: widths must be positive");
  }

  bool is_condenser(std::size_t i) const {
    return std::binary_search(condensers.begin(), condensers.end(), i);
  }
};

struct RouterDecision {
  Vector logits;                      // s
  Vector biased;                      // s + b
  Vector weights;                     // softmax(s) over all n
  std::vector<std::size_t> selected;  // S, ascending
  std::vector<bool> condenser;        // parallel to `selected`

  bool is_selected(std::size_t i) const {
    return std::binary_search(selected.begin(), selected.end(), i);
  }

  bool has_condensers() const {
    return std::find(condenser.begin(), condenser.end(), true) != condenser.end();
  }
};

enum class BackwardRegime { Masked, StraightThrough, Condenser };

inline std::string_view to_string(BackwardRegime r) {
  switch (r) {
    case BackwardRegime::Masked: return "masked";
    case BackwardRegime::StraightThrough: return "ste";
    case BackwardRegime::Condenser: return "condenser";
  }
  return "masked";
}

inline BackwardRegime parse_regime(std::string_view s) {
  if (s == "masked" || s == "sft" || s == "esft") return BackwardRegime::Masked;
  if (s == "ste" || s == "densemixer") return BackwardRegime::StraightThrough;
  if (s == "condenser") return BackwardRegime::Condenser;
  throw ConfigError("unknown backward regime: " + std::string(s));
}

}  // namespace moecond
