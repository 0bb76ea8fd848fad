#pragma once

// RunRecord <-> newline-delimited JSON. Key order is fixed (ordered_json) so
// identical runs produce identical bytes.

#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "moecond/trainer.hpp"

namespace moecond {

using Json = nlohmann::ordered_json;

namespace detail {

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline std::optional<double> optional_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline Json to_json(const RunRecord& r) {
  Json j;
  j["step"] = r.step;
  j["status"] = r.status;
  if (std::isfinite(r.loss)) j["loss"] = r.loss;
  else j["loss"] = nullptr;
  j["eval_loss"] = r.eval_loss;
  j["domain_loss"] = r.domain_loss;
  j["grad_norms"] = r.grad_norms;
  j["activation_counts"] = r.activation_counts;
  j["bias"] = r.bias;
  j["condensers"] = r.condensers;
  Json cond = Json::array(), routed = Json::array();
  for (const auto& v : r.condenser_grad_mean) cond.push_back(detail::optional_json(v));
  for (const auto& v : r.routed_grad_mean) routed.push_back(detail::optional_json(v));
  j["condenser_grad_mean"] = cond;
  j["routed_grad_mean"] = routed;
  j["condenser_grad_mean_model"] = detail::optional_json(r.condenser_grad_mean_model);
  j["routed_grad_mean_model"] = detail::optional_json(r.routed_grad_mean_model);
  return j;
}

inline RunRecord record_from_json(const Json& j) {
  RunRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.status = j.at("status").get<std::string>();
  r.loss = j.at("loss").is_null() ? std::nan("") : j.at("loss").get<double>();
  r.eval_loss = j.at("eval_loss").get<double>();
  r.domain_loss = j.at("domain_loss").get<Vector>();
  r.grad_norms = j.at("grad_norms").get<std::vector<Vector>>();
  r.activation_counts = j.at("activation_counts").get<std::vector<Vector>>();
  r.bias = j.at("bias").get<std::vector<Vector>>();
  r.condensers = j.at("condensers").get<std::vector<std::vector<std::size_t>>>();
  for (const Json& v : j.at("condenser_grad_mean")) r.condenser_grad_mean.push_back(detail::optional_from(v));
  for (const Json& v : j.at("routed_grad_mean")) r.routed_grad_mean.push_back(detail::optional_from(v));
  r.condenser_grad_mean_model = detail::optional_from(j.at("condenser_grad_mean_model"));
  r.routed_grad_mean_model = detail::optional_from(j.at("routed_grad_mean_model"));
  return r;
}

inline void write_record(std::ostream& os, const RunRecord& r) { os << to_json(r).dump() << '\n'; }

inline std::vector<RunRecord> read_records(std::istream& is) {
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(Json::parse(line)));
  }
  return out;
}

// Fraction of post-warm-up record points where the model-wide condenser mean
// gradient norm exceeds the routed mean; nullopt when no point qualifies.
inline std::optional<double> condenser_dominance(const std::vector<RunRecord>& records,
                                                 std::size_t warmup_steps) {
  std::size_t points = 0, wins = 0;
  for (const RunRecord& r : records) {
    if (r.step < warmup_steps || !r.condenser_grad_mean_model || !r.routed_grad_mean_model) continue;
    ++points;
    if (*r.condenser_grad_mean_model > *r.routed_grad_mean_model) ++wins;
  }
  if (points == 0) return std::nullopt;
  return static_cast<double>(wins) / static_cast<double>(points);
}

}  // namespace moecond
