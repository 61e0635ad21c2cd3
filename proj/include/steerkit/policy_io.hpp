#pragma once

#include <string>

#include <json.hpp>

#include "steerkit/policy.hpp"
#include "steerkit/sim_io.hpp"

namespace steerkit {

// The document records the denoising schedule alongside the mixture so a
// policy file fully determines its sampler. Defaults to the pinned schedule.
inline nlohmann::json save_policy(const GaussianMixturePolicy& policy,
                                  const NoiseSchedule& sched = build_noise_schedule(32)) {
  nlohmann::json j;
  j["T"] = policy.T;
  j["D"] = policy.D;
  j["K"] = sched.K;
  j["betas"] = sched.beta;
  j["condition_key"] = policy.condition_key;
  j["components"] = nlohmann::json::array();
  for (const auto& c : policy.components) {
    nlohmann::json cj;
    cj["weight"] = c.weight;
    cj["mean"] = c.mean;
    cj["diag_cov"] = c.diag_cov;
    j["components"].push_back(std::move(cj));
  }
  return j;
}

inline GaussianMixturePolicy load_policy(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  GaussianMixturePolicy p;
  p.T = static_cast<int>(num_at(field(j, "T", "$"), "T"));
  p.D = static_cast<int>(num_at(field(j, "D", "$"), "D"));
  if (j.contains("condition_key")) p.condition_key = str_at(j["condition_key"], "condition_key");
  const auto& comps = field(j, "components", "$");
  if (!comps.is_array()) throw DocumentError("schema violation at components: expected array");
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const std::string path = "components[" + std::to_string(i) + "]";
    const auto& cj = comps[i];
    if (!cj.is_object()) throw DocumentError("schema violation at " + path + ": expected object");
    MixtureComponent c;
    c.weight = num_at(field(cj, "weight", path), path + ".weight");
    for (const auto& key : {"mean", "diag_cov"}) {
      const auto& arr = field(cj, key, path);
      if (!arr.is_array())
        throw DocumentError("schema violation at " + path + "." + key + ": expected array");
      auto& dst = std::string(key) == "mean" ? c.mean : c.diag_cov;
      for (std::size_t k = 0; k < arr.size(); ++k)
        dst.push_back(num_at(arr[k], path + "." + key + "[" + std::to_string(k) + "]"));
    }
    p.components.push_back(std::move(c));
  }
  if (j.contains("K") || j.contains("betas")) {
    const auto& betas = field(j, "betas", "$");
    if (!betas.is_array()) throw DocumentError("schema violation at betas: expected array");
    const int K = static_cast<int>(num_at(field(j, "K", "$"), "K"));
    if (K != static_cast<int>(betas.size()))
      throw DocumentError("schema violation at K: does not match betas length");
    for (std::size_t k = 0; k < betas.size(); ++k) {
      const double b = num_at(betas[k], "betas[" + std::to_string(k) + "]");
      if (!(b > 0.0) || !(b < 1.0))
        throw DocumentError("schema violation at betas[" + std::to_string(k) +
                            "]: must lie in (0, 1)");
    }
  }
  try {
    validate_policy(p);
  } catch (const std::exception& e) {
    throw DocumentError(std::string("schema violation at $: ") + e.what());
  }
  return p;
}

// Rebuilds the sampler schedule a policy document declares; falls back to
// the pinned default when the document predates the schedule fields.
inline NoiseSchedule schedule_from_policy_document(const nlohmann::json& j) {
  using namespace sim_io_detail;
  if (!j.is_object()) throw DocumentError("schema violation at $: expected object");
  if (!j.contains("betas")) return build_noise_schedule(32);
  const auto& betas = field(j, "betas", "$");
  if (!betas.is_array()) throw DocumentError("schema violation at betas: expected array");
  std::vector<double> b;
  for (std::size_t k = 0; k < betas.size(); ++k)
    b.push_back(num_at(betas[k], "betas[" + std::to_string(k) + "]"));
  try {
    return build_noise_schedule_from_betas(b);
  } catch (const std::exception& e) {
    throw DocumentError(std::string("schema violation at betas: ") + e.what());
  }
}

}  // namespace steerkit
