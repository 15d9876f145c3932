#ifndef PFEDGM_DATAGEN_HPP
#define PFEDGM_DATAGEN_HPP

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "core/numeric.hpp"

namespace pfedgm {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gaussian mixture over the raw input space: one component per class.
struct MixtureSpec {
  int classes = 0;
  std::vector<Vec> means;      // [class][input_dim]
  std::vector<DiagMat> covs;   // [class]
  Vec weights;                 // sums to 1

  int input_dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  void validate() const;
};

// Gaussian re-sampling weight: selection probability of a realized point is
// proportional to N(point; center, cov).
struct ResampleWeight {
  Vec center;
  DiagMat cov;
};

struct ClientDataset {
  int client_id = 0;
  std::vector<Vec> features;
  std::vector<int> labels;
  std::vector<int> train_idx;
  std::vector<int> test_idx;

  int size() const { return static_cast<int>(features.size()); }
  int train_size() const { return static_cast<int>(train_idx.size()); }
  int test_size() const { return static_cast<int>(test_idx.size()); }
};

struct PartitionConfig {
  double alpha = 0.5;
  int clients = 1;
  uint64_t seed = 0;
};

// Closed-form limit of Gaussian re-sampling:
//   S* = (S^-1 + Omega^-1)^-1,  mu* = S* (S^-1 mu + Omega^-1 nu_rs).
std::pair<Vec, DiagMat> analytic_resample_params(const Vec& mu, const DiagMat& s,
                                                 const Vec& nu_rs, const DiagMat& omega);

// Draws n_out points with replacement, selection probability proportional to
// N(point; w.center, w.cov) normalized over the input set. Weights are formed
// in log space and shifted by their max before exponentiation.
std::vector<Vec> weighted_resample(const std::vector<Vec>& points, const ResampleWeight& w,
                                   int n_out, RngStream& rng);

// 80/20 split of n indices after shuffling: |train| = round(0.8 n).
std::pair<std::vector<int>, std::vector<int>> split_train_test(int n, RngStream& rng);

ClientDataset generate_client_dataset(const MixtureSpec& spec,
                                      const std::map<int, ResampleWeight>& per_class_weights,
                                      const std::map<int, int>& class_counts, int client_id,
                                      RngStream& rng);

// Per class, a Dirichlet(alpha, ..., alpha) draw allocates that class's
// indices across clients. Every index lands exactly once; the whole partition
// is re-drawn (bounded retries) if any client would end up empty.
std::vector<std::vector<int>> dirichlet_partition(const std::vector<int>& labels,
                                                  const PartitionConfig& cfg, RngStream& rng);

struct RawDataset {
  std::vector<Vec> features;  // flattened, scaled to [0,1]
  std::vector<int> labels;
  int rows = 0;
  int cols = 0;
};

// IDX ingestion (big-endian, magic 0x00000803 / 0x00000801).
RawDataset load_idx(const std::string& images_path, const std::string& labels_path);

double gamma_draw(RngStream& rng, double alpha);
Vec dirichlet_draw(RngStream& rng, double alpha, int n);

// Largest-remainder rounding of proportions to integer counts summing to total.
std::vector<int> proportional_counts(const Vec& proportions, int total);

}  // namespace pfedgm

#endif
