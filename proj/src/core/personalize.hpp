#ifndef PFEDGM_PERSONALIZE_HPP
#define PFEDGM_PERSONALIZE_HPP

#include <optional>
#include <string>
#include <vector>

#include "core/datagen.hpp"
#include "core/lbfgs.hpp"
#include "core/model.hpp"
#include "core/objectives.hpp"

namespace pfedgm {

// Phase-2 personalization parameters: per-class mean and bias offsets plus
// the diagonal gains blending the global prior with local evidence.
struct FusionHead {
  std::vector<Vec> mean_offsets;  // [class][d], init 0
  Vec bias_offsets;               // [class], init 0
  Vec gain_global;                // A_g diagonal, init 1, floored at eps_pd
  Vec gain_local;                 // A_c diagonal, init 1, may reach 0
  double lambda = 1.0;
  int dim = 0;

  int classes() const { return static_cast<int>(bias_offsets.size()); }
};

// Per-class posterior Gaussian implied by completing the square over the
// fused logits.
struct FusedGaussian {
  DiagMat cov;    // S-hat
  Vec mean;       // mu-hat
  double bias = 0.0;
  bool fused = false;  // false: class masked locally, global-only fallback
};

// Frozen-generator view of one client: cached train representations, local
// prototypes, and the global navigator/bank.
struct PersonalContext {
  GeneratorParams gen;
  Navigator nav;
  CovarianceBank bank;
  Prototypes protos;
  std::vector<Vec> reps;
  std::vector<int> labels;
  int client_id = 0;

  int classes() const { return nav.classes(); }
  int dim() const { return nav.dim(); }
};

struct PersonalizeConfig {
  int epochs = 5;
  int batch_size = 50;
  double lr = 0.05;
  double momentum = 0.5;
  double weight_decay = 5e-4;
  double lambda = 1.0;
  int lbfgs_max_iterations = 10;
  int lbfgs_cycles = 5;
  double lbfgs_step = 0.05;
  int lbfgs_memory = 10;
  uint64_t seed = 0;
  int threads = 1;
};

PersonalContext build_context(const ClientDataset& client, const GeneratorParams& gen,
                              const Navigator& nav, const CovarianceBank& bank);

FusionHead init_fusion_head(int classes, int dim, double lambda);

// logit_i = xi_i + zeta_i + beta_i (zeta omitted for locally-unseen classes).
Vec fusion_logits(const Vec& z, const PersonalContext& ctx, const FusionHead& head);

struct FusionGrads {
  double loss = 0.0;
  std::vector<Vec> d_mean;
  Vec d_bias;
  Vec d_gain_global;
  Vec d_gain_local;
};

FusionGrads fusion_loss_and_grads(const std::vector<Vec>& z_batch, const std::vector<int>& y_batch,
                                  const PersonalContext& ctx, const FusionHead& head);

// Full-train-data fusion loss at the current head.
double fusion_loss(const PersonalContext& ctx, const FusionHead& head);

FusionHead fit_personalized_head(const PersonalContext& ctx, const PersonalizeConfig& cfg,
                                 RngStream& rng);

struct LbfgsReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  int iterations = 0;
  bool line_search_failed = false;
};

// Granular adaptation: L-BFGS over the bias offsets only, full local train
// representations, other head parameters frozen. Never increases the loss.
LbfgsReport lbfgs_refine_bias(const PersonalContext& ctx, FusionHead& head,
                              const PersonalizeConfig& cfg);

std::vector<FusedGaussian> fused_params(const PersonalContext& ctx, const FusionHead& head);

// Argmax of the fused posterior; ties break toward the smallest class id.
std::pair<int, Vec> predict(const Vec& z, const PersonalContext& ctx, const FusionHead& head);

// Conjugate single-class fusion: Gaussian prior x n common-precision
// observations. Combined observation precision is exactly n * obs_prec.
struct GaussianFusionResult {
  Vec mean;
  DiagMat precision;
  DiagMat combined_obs_precision;
};

GaussianFusionResult fuse_gaussian_observations(const Vec& prior_mean, const DiagMat& prior_prec,
                                                const std::vector<Vec>& observations,
                                                const DiagMat& obs_prec);

struct ClientPhase2Row {
  int client_id = 0;
  int n_train = 0;
  int n_test = 0;
  double acc_global = 0.0;
  double acc_personalized = 0.0;
  double train_loss_before_lbfgs = 0.0;
  double train_loss_after_lbfgs = 0.0;
};

struct Phase2Result {
  std::vector<FusionHead> heads;
  std::vector<ClientPhase2Row> rows;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::vector<std::string> warnings;
};

Phase2Result run_phase2(const std::vector<ClientDataset>& clients, const GeneratorParams& gen,
                        const Navigator& nav, const CovarianceBank& bank,
                        const PersonalizeConfig& cfg);

}  // namespace pfedgm

#endif
