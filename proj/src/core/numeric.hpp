#ifndef PFEDGM_NUMERIC_HPP
#define PFEDGM_NUMERIC_HPP

#include <cstdint>
#include <functional>
#include <vector>

namespace pfedgm {

using Vec = std::vector<double>;

// Floor for diagonal covariance/precision entries. Applied by projection
// wherever such a diagonal is created or updated.
inline constexpr double kEpsPd = 1e-6;

// Diagonal positive matrix, stored as its diagonal.
struct DiagMat {
  Vec diag;

  DiagMat() = default;
  explicit DiagMat(Vec d) : diag(std::move(d)) {}

  static DiagMat identity(int n) { return DiagMat(Vec(static_cast<size_t>(n), 1.0)); }
  static DiagMat constant(int n, double v) { return DiagMat(Vec(static_cast<size_t>(n), v)); }

  int size() const { return static_cast<int>(diag.size()); }
  double& operator[](int i) { return diag[static_cast<size_t>(i)]; }
  double operator[](int i) const { return diag[static_cast<size_t>(i)]; }

  DiagMat inverse() const;
  void project_floor(double floor = kEpsPd);
};

// Deterministic counter-based stream (splitmix64 core). Identical seeds give
// identical sequences on every platform; child streams are derived by mixing
// (seed, tag, a, b) so parallel tasks never touch shared state.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {}

  static RngStream derive(uint64_t seed, uint64_t tag, uint64_t a = 0, uint64_t b = 0);

  uint64_t next_u64();
  double next_double();       // uniform in [0, 1)
  double next_double_open();  // uniform in (0, 1)
  double next_gaussian();     // standard normal, Marsaglia polar
  uint64_t uniform_int(uint64_t n);  // uniform in [0, n), n >= 1

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n);

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

Vec sample_gaussian(const Vec& mean, const DiagMat& cov, RngStream& rng);

// log sum exp via max shift; exact for a single element.
double log_sum_exp(const Vec& values);

// Central finite differences: entry j = (f(x+h e_j) - f(x-h e_j)) / (2h).
Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h);

// Small dense helpers.
double dot(const Vec& a, const Vec& b);
double squared_distance(const Vec& a, const Vec& b);
Vec vec_sub(const Vec& a, const Vec& b);
void vec_add_scaled(Vec& dst, const Vec& src, double scale);

}  // namespace pfedgm

#endif
