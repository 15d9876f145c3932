#ifndef PFEDGM_EXPERIMENT_HPP
#define PFEDGM_EXPERIMENT_HPP

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "core/fedsim.hpp"
#include "core/personalize.hpp"
#include "core/scenario.hpp"

namespace pfedgm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IdxSource {
  std::string images;
  std::string labels;
  double dirichlet_alpha = 0.5;
  int clients = 20;
};

struct ExperimentConfig {
  Method method = Method::pfedgm;
  uint64_t seed = 0;
  std::string out_dir = "out";
  std::optional<ScenarioConfig> scenario;
  std::optional<IdxSource> idx;
  TrainConfig train;
  PersonalizeConfig personalize;
  bool dump_representations = false;
  bool quiet = false;  // suppress the per-round console stream

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Fully resolved (every effective hyperparameter, defaults included).
  nlohmann::json to_json() const;

  std::string run_id() const;
};

struct ResultSummary {
  std::vector<double> client_accuracies;
  double mean = 0.0;
  double stddev = 0.0;  // population (N divisor)
  double data_ms = 0.0;
  double phase1_ms = 0.0;
  double phase2_ms = 0.0;
  std::string run_dir;
};

// Arithmetic mean and population standard deviation.
std::pair<double, double> summarize(const std::vector<double>& per_client_acc);

// Shortest exact decimal for CSV/JSON round trips.
std::string format_double(double v);

std::vector<ClientDataset> build_clients(const ExperimentConfig& cfg, int* classes_out);

ResultSummary run_experiment(const ExperimentConfig& cfg);

nlohmann::json default_experiment_json(uint64_t seed);

// Fast oracle suite used by the `selftest` subcommand; returns failure count.
int run_selftest(bool verbose);

}  // namespace pfedgm

#endif
