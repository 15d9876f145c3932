#ifndef PFEDGM_MODEL_HPP
#define PFEDGM_MODEL_HPP

#include <string>
#include <vector>

#include "json.hpp"

#include "core/numeric.hpp"

namespace pfedgm {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Layer {
  int in = 0;
  int out = 0;
  Vec w;  // row-major [out][in]
  Vec b;  // [out]
  bool relu = false;
};

// The generator phi: a small fully connected net mapping raw inputs to
// d-dimensional representations. Hidden layers use ReLU, the last is linear.
struct GeneratorParams {
  std::vector<Layer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().out; }
};

// Navigator psi: per-class navigational means and scalar biases. The biases
// absorb log(pi_k / |S_k|^(1/2)).
struct Navigator {
  std::vector<Vec> means;  // [class][d]
  Vec biases;              // [class]

  int classes() const { return static_cast<int>(means.size()); }
  int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  int parameter_count() const { return classes() * (dim() + 1); }
};

// Covariance bank nu: per-class diagonal inverse covariances A_k.
struct CovarianceBank {
  std::vector<DiagMat> precisions;  // [class]

  int classes() const { return static_cast<int>(precisions.size()); }
};

struct ForwardTape {
  std::vector<std::vector<Vec>> inputs;  // inputs[l][sample]: input to layer l
  std::vector<std::vector<Vec>> pre;     // pre[l][sample]: pre-activation of layer l
};

struct GeneratorGrads {
  std::vector<Vec> dw;  // same shapes as the layers' w
  std::vector<Vec> db;

  static GeneratorGrads zeros_like(const GeneratorParams& gen);
};

std::pair<std::vector<Vec>, ForwardTape> forward(const GeneratorParams& gen,
                                                 const std::vector<Vec>& x_batch);

// Exact reverse-mode gradients of sum over the batch, given upstream dL/dz per
// sample. Optionally also returns dL/dx.
GeneratorGrads backward(const GeneratorParams& gen, const ForwardTape& tape,
                        const std::vector<Vec>& dl_dz, std::vector<Vec>* dl_dx = nullptr);

// dims = {D, h1, ..., d}. Hidden layers He-initialized, linear output layer
// scaled by 1/fan_in, biases zero.
GeneratorParams init_generator(const std::vector<int>& dims, RngStream& rng);
Navigator init_navigator(int classes, int dim, RngStream& rng);
CovarianceBank init_covariance_bank(int classes, int dim);

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.5;
  double weight_decay = 5e-4;
};

// Classical momentum: v <- m v + (g + wd p); p <- p - lr v.
void sgd_update(Vec& param, const Vec& grad, Vec& velocity, double lr, double momentum,
                double weight_decay);

// Velocity buffers for the full (generator, navigator, bank) group.
struct ModelSgdState {
  std::vector<Vec> gen_w;
  std::vector<Vec> gen_b;
  std::vector<Vec> nav_means;
  Vec nav_biases;
  std::vector<Vec> bank;

  static ModelSgdState zeros_like(const GeneratorParams& gen, const Navigator& nav,
                                  const CovarianceBank& bank);
};

// One step over all three parameter groups. Weight decay applies to the
// generator and navigator means only; bank diagonals are projected back to
// the positivity floor afterwards. Null grads skip that group.
void sgd_step(GeneratorParams& gen, Navigator& nav, CovarianceBank& bank,
              const GeneratorGrads* gen_grads, const std::vector<Vec>* nav_mean_grads,
              const Vec* nav_bias_grads, const std::vector<Vec>* bank_grads,
              const SgdConfig& cfg, ModelSgdState& state);

// Checkpoint round trip. Doubles serialize via shortest round-trip formatting,
// so write -> read -> write is byte-stable.
nlohmann::json checkpoint_to_json(const GeneratorParams& gen, const Navigator& nav,
                                  const CovarianceBank& bank,
                                  const nlohmann::json& seed_lineage);
void checkpoint_from_json(const nlohmann::json& j, GeneratorParams& gen, Navigator& nav,
                          CovarianceBank& bank);
void write_checkpoint(const std::string& path, const GeneratorParams& gen, const Navigator& nav,
                      const CovarianceBank& bank, const nlohmann::json& seed_lineage);
void read_checkpoint(const std::string& path, GeneratorParams& gen, Navigator& nav,
                     CovarianceBank& bank);

}  // namespace pfedgm

#endif
