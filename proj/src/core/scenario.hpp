#ifndef PFEDGM_SCENARIO_HPP
#define PFEDGM_SCENARIO_HPP

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "core/datagen.hpp"

namespace pfedgm {

// Synthetic heterogeneity preset. Composes the two heterogeneity sources:
// per-client Gaussian re-sampling weights (feature shift, centers drawn from
// N(mu_k, tau^2 I) unless given explicitly) and Dirichlet label skew over the
// per-class sample budget.
struct ScenarioConfig {
  std::string name = "default-synthetic";
  int classes = 5;
  int input_dim = 16;
  int clients = 20;
  int samples_per_client = 60;
  double dirichlet_alpha = 0.3;
  double tau = 3.0;                // std of client re-sampling centers around mu_k
  double omega = 1.0;              // re-sampling weight covariance, Omega = omega I
  double class_separation = 0.7;   // mixture means ~ N(0, sep^2 I)
  double feature_var = 1.0;        // S_k = feature_var I
  int min_client_samples = 10;
  uint64_t seed = 1234;

  std::optional<MixtureSpec> mixture;  // explicit override
  // [client][class] explicit re-sampling weights (override of the tau draw).
  std::optional<std::vector<std::vector<ResampleWeight>>> client_weights;

  void validate() const;
};

ScenarioConfig scenario_from_json(const nlohmann::json& j);
nlohmann::json scenario_to_json(const ScenarioConfig& s);

ScenarioConfig default_scenario(uint64_t seed);

// Materializes the mixture and per-client weights (drawing any that were left
// implicit), allocates per-class counts by Dirichlet skew, and generates every
// client dataset from a stream derived from the scenario seed.
std::vector<ClientDataset> build_synthetic_clients(const ScenarioConfig& s);

// The mixture actually used by build_synthetic_clients (explicit or drawn).
MixtureSpec resolve_mixture(const ScenarioConfig& s);

}  // namespace pfedgm

#endif
