#ifndef PFEDGM_FEDSIM_HPP
#define PFEDGM_FEDSIM_HPP

#include <optional>
#include <string>
#include <vector>

#include "core/datagen.hpp"
#include "core/model.hpp"
#include "core/objectives.hpp"

namespace pfedgm {

enum class Method { pfedgm, fedavg, fedavgft, local };

std::string method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

struct ServerState {
  GeneratorParams gen;
  Navigator nav;
  CovarianceBank bank;
  int round = 0;
};

struct ClientUpdate {
  int client_id = 0;
  GeneratorParams gen;
  Navigator nav;
  CovarianceBank bank;
  int n_train = 0;
  LossBreakdown mean_loss;
  int missing_prototype_hits = 0;  // samples whose class had no prototype
};

struct TrainConfig {
  int rounds = 60;
  int local_epochs = 5;
  int batch_size = 50;
  double lr = 0.01;
  double momentum = 0.5;
  double weight_decay = 5e-4;
  double lambda = 1.0;
  double participation = 0.3;
  Method method = Method::pfedgm;
  uint64_t seed = 0;

  int classes = 0;      // resolved from the data source
  int hidden_dim = 32;
  int rep_dim = 8;
  int finetune_epochs = 5;  // fedavgft per-client fine-tuning
  double prototype_ema = 0.1;
  bool eval_global_each_round = false;
  int threads = 1;

  // Test hook: overrides client sampling in every round when set.
  std::optional<std::vector<int>> forced_participants;
};

struct RoundMetrics {
  int round = 0;
  double mean_train_loss = 0.0;
  double shared = 0.0;
  double personal = 0.0;
  std::optional<double> global_test_acc;
  double wall_ms = 0.0;
};

struct Phase1Result {
  ServerState state;
  std::vector<RoundMetrics> rounds;
  std::vector<std::string> warnings;
};

// Uniform sample without replacement of size max(1, round(q M)), sorted.
std::vector<int> select_clients(int total_clients, double participation, RngStream& rng);

// One client's local pass of Algorithm 1 Phase 1 (or the FedAvg/Local variant
// when cfg.method says so: shared loss only, bank untouched). Returns nothing
// for a client with an empty train split.
std::optional<ClientUpdate> local_train(const ClientDataset& client, const ServerState& globals,
                                        const TrainConfig& cfg, RngStream& rng);

// n_i-weighted average over updates, iterated in ascending client id so the
// floating-point reduction order is fixed. Bank diagonals re-projected.
ServerState aggregate(const std::vector<ClientUpdate>& updates);

ServerState init_server_state(const TrainConfig& cfg, int input_dim);

Phase1Result run_phase1(const TrainConfig& cfg, const std::vector<ClientDataset>& clients);
Phase1Result run_fedavg(const TrainConfig& cfg, const std::vector<ClientDataset>& clients);

struct LocalResult {
  std::vector<ServerState> states;  // one per client
  std::vector<RoundMetrics> rounds;
};

LocalResult run_local(const TrainConfig& cfg, const std::vector<ClientDataset>& clients);

// FedAvgFT: per-client fine-tuning of the full model from a trained global
// state, cfg.finetune_epochs epochs of the shared objective.
std::vector<ServerState> finetune_clients(const ServerState& global, const TrainConfig& cfg,
                                          const std::vector<ClientDataset>& clients);

// Accuracy of the Gaussian classifier (nav, bank) over the given index set.
double evaluate_accuracy(const GeneratorParams& gen, const Navigator& nav,
                         const CovarianceBank& bank, const ClientDataset& data,
                         const std::vector<int>& indices);

}  // namespace pfedgm

#endif
