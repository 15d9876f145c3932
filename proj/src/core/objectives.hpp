#ifndef PFEDGM_OBJECTIVES_HPP
#define PFEDGM_OBJECTIVES_HPP

#include <vector>

#include "core/model.hpp"
#include "core/numeric.hpp"

namespace pfedgm {

// Per-client, per-class representation means E[z | y=k, c]. Classes the
// client has never seen stay masked.
struct Prototypes {
  std::vector<Vec> means;
  std::vector<bool> present;
  int missing_label_hits = 0;  // samples whose class had no prototype

  int classes() const { return static_cast<int>(means.size()); }
};

struct LossBreakdown {
  double shared = 0.0;    // H
  double personal = 0.0;  // R
  double lambda = 1.0;
  double total = 0.0;     // H + lambda R
};

// logit_i = -1/2 (z - mu_i)^T A_i (z - mu_i) + b_i
Vec gaussian_logits(const Vec& z, const Navigator& nav, const CovarianceBank& bank);

// Softmax via log-sum-exp; sums to 1.
Vec class_posterior(const Vec& logits);

struct SharedLossResult {
  double loss = 0.0;
  std::vector<Vec> dz;   // per sample, gradient of the batch-mean loss
  std::vector<Vec> dmu;  // per class
  Vec db;                // per class
};

// Shared objective H: negative log posterior with identity covariances,
// batch-mean reduction. Gradients flow to z, the navigator means, and biases.
SharedLossResult shared_loss_and_grads(const std::vector<Vec>& z_batch,
                                       const std::vector<int>& y_batch, const Navigator& nav);

struct CovarianceLossResult {
  double loss = 0.0;
  std::vector<Vec> d_precision;  // per class, gradient over the A_i diagonal
};

// Covariance loss H^(nu): same negative log posterior with the full bank.
// Gradients flow only into the A_i diagonals; z and the navigator are
// treated as constants.
CovarianceLossResult covariance_loss_and_grad(const std::vector<Vec>& z_batch,
                                              const std::vector<int>& y_batch,
                                              const Navigator& nav_frozen,
                                              const CovarianceBank& bank);

struct PersonalLossResult {
  double loss = 0.0;
  std::vector<Vec> dz;
  int missing = 0;
};

// Personalized variance objective R_c = 1/(n d) sum_i ||z_i - upsilon_{y_i}||^2
// with the prototypes held constant. Samples of absent classes contribute zero.
PersonalLossResult personal_loss_and_grad(const std::vector<Vec>& z_batch,
                                          const std::vector<int>& y_batch,
                                          const Prototypes& protos);

Prototypes compute_prototypes_exact(const std::vector<Vec>& x_train,
                                    const std::vector<int>& y_train, int classes,
                                    const GeneratorParams& gen);

// EMA adjustment toward the batch class means; unseen classes become present
// at the batch mean.
void update_prototypes(Prototypes& protos, const std::vector<Vec>& z_batch,
                       const std::vector<int>& y_batch, double ema_rate);

}  // namespace pfedgm

#endif
