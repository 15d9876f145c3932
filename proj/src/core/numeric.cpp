#include "core/numeric.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

namespace pfedgm {

namespace {

// splitmix64 finalizer; the avalanche used both for stepping and deriving.
uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

}  // namespace

DiagMat DiagMat::inverse() const {
  DiagMat out;
  out.diag.resize(diag.size());
  for (size_t i = 0; i < diag.size(); ++i) out.diag[i] = 1.0 / diag[i];
  return out;
}

void DiagMat::project_floor(double floor) {
  for (double& v : diag) v = std::max(v, floor);
}

RngStream RngStream::derive(uint64_t seed, uint64_t tag, uint64_t a, uint64_t b) {
  uint64_t s = mix64(seed + kGamma);
  s = mix64(s ^ (tag + kGamma));
  s = mix64(s ^ (a + kGamma));
  s = mix64(s ^ (b + kGamma));
  return RngStream(s);
}

uint64_t RngStream::next_u64() {
  state_ += kGamma;
  return mix64(state_);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_double_open() {
  double u;
  do {
    u = next_double();
  } while (u == 0.0);
  return u;
}

double RngStream::next_gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * next_double() - 1.0;
    v = 2.0 * next_double() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

uint64_t RngStream::uniform_int(uint64_t n) {
  assert(n >= 1);
  const uint64_t limit = std::numeric_limits<uint64_t>::max() -
                         std::numeric_limits<uint64_t>::max() % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

std::vector<int> RngStream::permutation(int n) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(uniform_int(static_cast<uint64_t>(i) + 1));
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
  }
  return p;
}

Vec sample_gaussian(const Vec& mean, const DiagMat& cov, RngStream& rng) {
  Vec out(mean.size());
  for (size_t i = 0; i < mean.size(); ++i) {
    out[i] = mean[i] + std::sqrt(cov.diag[i]) * rng.next_gaussian();
  }
  return out;
}

double log_sum_exp(const Vec& values) {
  assert(!values.empty());
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - m);
  return m + std::log(acc);
}

Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  assert(h > 0.0);
  Vec grad(x.size());
  Vec probe = x;
  for (size_t j = 0; j < x.size(); ++j) {
    const double orig = probe[j];
    probe[j] = orig + h;
    const double fp = f(probe);
    probe[j] = orig - h;
    const double fm = f(probe);
    probe[j] = orig;
    grad[j] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double dot(const Vec& a, const Vec& b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_distance(const Vec& a, const Vec& b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

Vec vec_sub(const Vec& a, const Vec& b) {
  assert(a.size() == b.size());
  Vec out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

void vec_add_scaled(Vec& dst, const Vec& src, double scale) {
  assert(dst.size() == src.size());
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace pfedgm
