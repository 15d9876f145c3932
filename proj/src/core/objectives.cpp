#include "core/objectives.hpp"

#include <cassert>
#include <cmath>

namespace pfedgm {

Vec gaussian_logits(const Vec& z, const Navigator& nav, const CovarianceBank& bank) {
  const int K = nav.classes();
  Vec logits(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    const Vec& mu = nav.means[static_cast<size_t>(k)];
    const DiagMat& a = bank.precisions[static_cast<size_t>(k)];
    double quad = 0.0;
    for (size_t j = 0; j < z.size(); ++j) {
      const double diff = z[j] - mu[j];
      quad += a.diag[j] * diff * diff;
    }
    logits[static_cast<size_t>(k)] = -0.5 * quad + nav.biases[static_cast<size_t>(k)];
  }
  return logits;
}

Vec class_posterior(const Vec& logits) {
  const double lse = log_sum_exp(logits);
  Vec p(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

namespace {

// Shared machinery for H evaluated at an arbitrary bank: loss plus the
// softmax residuals (P_i - 1{i=y}) per sample.
double posterior_loss(const std::vector<Vec>& z_batch, const std::vector<int>& y_batch,
                      const Navigator& nav, const CovarianceBank& bank,
                      std::vector<Vec>* residuals) {
  const size_t n = z_batch.size();
  double loss = 0.0;
  if (residuals != nullptr) residuals->resize(n);
  for (size_t s = 0; s < n; ++s) {
    const Vec logits = gaussian_logits(z_batch[s], nav, bank);
    const double lse = log_sum_exp(logits);
    const int y = y_batch[s];
    loss += lse - logits[static_cast<size_t>(y)];
    if (residuals != nullptr) {
      Vec r(logits.size());
      for (size_t i = 0; i < logits.size(); ++i) r[i] = std::exp(logits[i] - lse);
      r[static_cast<size_t>(y)] -= 1.0;
      (*residuals)[s] = std::move(r);
    }
  }
  return loss / static_cast<double>(n);
}

}  // namespace

SharedLossResult shared_loss_and_grads(const std::vector<Vec>& z_batch,
                                       const std::vector<int>& y_batch, const Navigator& nav) {
  assert(z_batch.size() == y_batch.size() && !z_batch.empty());
  const size_t n = z_batch.size();
  const int K = nav.classes();
  const size_t d = z_batch[0].size();
  const CovarianceBank identity_bank = init_covariance_bank(K, static_cast<int>(d));

  SharedLossResult out;
  std::vector<Vec> residuals;
  out.loss = posterior_loss(z_batch, y_batch, nav, identity_bank, &residuals);

  const double inv_n = 1.0 / static_cast<double>(n);
  out.dz.assign(n, Vec(d, 0.0));
  out.dmu.assign(static_cast<size_t>(K), Vec(d, 0.0));
  out.db.assign(static_cast<size_t>(K), 0.0);

  for (size_t s = 0; s < n; ++s) {
    const Vec& z = z_batch[s];
    const Vec& r = residuals[s];  // P_i - 1{i=y}
    for (int i = 0; i < K; ++i) {
      const double ri = r[static_cast<size_t>(i)];
      const Vec& mu = nav.means[static_cast<size_t>(i)];
      // dH/dz = sum_i (P_i - 1{i=y}) (mu_i - z) = -mu_y + sum_i P_i mu_i
      // dH/dmu_i = (1{i=y} - P_i) (mu_i - z)
      for (size_t j = 0; j < d; ++j) {
        out.dz[s][j] += inv_n * ri * (mu[j] - z[j]);
        out.dmu[static_cast<size_t>(i)][j] += inv_n * (-ri) * (mu[j] - z[j]);
      }
      out.db[static_cast<size_t>(i)] += inv_n * ri;
    }
  }
  return out;
}

CovarianceLossResult covariance_loss_and_grad(const std::vector<Vec>& z_batch,
                                              const std::vector<int>& y_batch,
                                              const Navigator& nav_frozen,
                                              const CovarianceBank& bank) {
  assert(z_batch.size() == y_batch.size() && !z_batch.empty());
  const size_t n = z_batch.size();
  const int K = nav_frozen.classes();
  const size_t d = z_batch[0].size();

  CovarianceLossResult out;
  std::vector<Vec> residuals;
  out.loss = posterior_loss(z_batch, y_batch, nav_frozen, bank, &residuals);

  const double inv_n = 1.0 / static_cast<double>(n);
  out.d_precision.assign(static_cast<size_t>(K), Vec(d, 0.0));
  for (size_t s = 0; s < n; ++s) {
    const Vec& z = z_batch[s];
    for (int i = 0; i < K; ++i) {
      const double ri = residuals[s][static_cast<size_t>(i)];  // P_i - 1{i=y}
      const Vec& mu = nav_frozen.means[static_cast<size_t>(i)];
      for (size_t j = 0; j < d; ++j) {
        const double diff = z[j] - mu[j];
        // d logit_i / dA_ij = -1/2 diff^2, so dH/dA_ij = -1/2 (P_i - 1{i=y}) diff^2.
        out.d_precision[static_cast<size_t>(i)][j] += inv_n * (-0.5) * ri * diff * diff;
      }
    }
  }
  return out;
}

PersonalLossResult personal_loss_and_grad(const std::vector<Vec>& z_batch,
                                          const std::vector<int>& y_batch,
                                          const Prototypes& protos) {
  assert(z_batch.size() == y_batch.size() && !z_batch.empty());
  const size_t n = z_batch.size();
  const size_t d = z_batch[0].size();
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(d));

  PersonalLossResult out;
  out.dz.assign(n, Vec(d, 0.0));
  for (size_t s = 0; s < n; ++s) {
    const int y = y_batch[s];
    if (y < 0 || y >= protos.classes() || !protos.present[static_cast<size_t>(y)]) {
      ++out.missing;
      continue;
    }
    const Vec& up = protos.means[static_cast<size_t>(y)];
    const Vec& z = z_batch[s];
    for (size_t j = 0; j < d; ++j) {
      const double diff = z[j] - up[j];
      out.loss += scale * diff * diff;
      out.dz[s][j] = 2.0 * scale * diff;
    }
  }
  return out;
}

Prototypes compute_prototypes_exact(const std::vector<Vec>& x_train,
                                    const std::vector<int>& y_train, int classes,
                                    const GeneratorParams& gen) {
  Prototypes protos;
  protos.means.assign(static_cast<size_t>(classes), Vec(static_cast<size_t>(gen.output_dim()), 0.0));
  protos.present.assign(static_cast<size_t>(classes), false);

  auto [z_batch, tape] = forward(gen, x_train);
  (void)tape;
  std::vector<int> counts(static_cast<size_t>(classes), 0);
  for (size_t s = 0; s < z_batch.size(); ++s) {
    const int y = y_train[s];
    counts[static_cast<size_t>(y)] += 1;
    vec_add_scaled(protos.means[static_cast<size_t>(y)], z_batch[s], 1.0);
  }
  for (int k = 0; k < classes; ++k) {
    if (counts[static_cast<size_t>(k)] > 0) {
      protos.present[static_cast<size_t>(k)] = true;
      for (double& v : protos.means[static_cast<size_t>(k)]) {
        v /= counts[static_cast<size_t>(k)];
      }
    }
  }
  return protos;
}

void update_prototypes(Prototypes& protos, const std::vector<Vec>& z_batch,
                       const std::vector<int>& y_batch, double ema_rate) {
  assert(ema_rate > 0.0 && ema_rate <= 1.0);
  const int K = protos.classes();
  std::vector<Vec> sums(static_cast<size_t>(K));
  std::vector<int> counts(static_cast<size_t>(K), 0);
  for (size_t s = 0; s < z_batch.size(); ++s) {
    const int y = y_batch[s];
    if (y < 0 || y >= K) continue;
    if (counts[static_cast<size_t>(y)] == 0) {
      sums[static_cast<size_t>(y)] = Vec(z_batch[s].size(), 0.0);
    }
    vec_add_scaled(sums[static_cast<size_t>(y)], z_batch[s], 1.0);
    counts[static_cast<size_t>(y)] += 1;
  }
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<size_t>(k)] == 0) continue;
    Vec mean = sums[static_cast<size_t>(k)];
    for (double& v : mean) v /= counts[static_cast<size_t>(k)];
    if (!protos.present[static_cast<size_t>(k)]) {
      protos.means[static_cast<size_t>(k)] = std::move(mean);
      protos.present[static_cast<size_t>(k)] = true;
    } else {
      Vec& up = protos.means[static_cast<size_t>(k)];
      for (size_t j = 0; j < up.size(); ++j) {
        up[j] = (1.0 - ema_rate) * up[j] + ema_rate * mean[j];
      }
    }
  }
}

}  // namespace pfedgm
