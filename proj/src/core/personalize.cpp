#include "core/personalize.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <iostream>
#include <thread>

#include "core/fedsim.hpp"
#include "core/seeds.hpp"

namespace pfedgm {

PersonalContext build_context(const ClientDataset& client, const GeneratorParams& gen,
                              const Navigator& nav, const CovarianceBank& bank) {
  if (client.train_size() == 0) {
    throw ModelError("build_context: client " + std::to_string(client.client_id) +
                     " has no train data");
  }
  PersonalContext ctx;
  ctx.gen = gen;
  ctx.nav = nav;
  ctx.bank = bank;
  ctx.client_id = client.client_id;

  std::vector<Vec> x;
  x.reserve(client.train_idx.size());
  ctx.labels.reserve(client.train_idx.size());
  for (int i : client.train_idx) {
    x.push_back(client.features[static_cast<size_t>(i)]);
    ctx.labels.push_back(client.labels[static_cast<size_t>(i)]);
  }
  auto [z, tape] = forward(gen, x);
  (void)tape;
  ctx.reps = std::move(z);

  // Prototypes from the same cached representations.
  const int K = nav.classes();
  ctx.protos.means.assign(static_cast<size_t>(K), Vec(static_cast<size_t>(nav.dim()), 0.0));
  ctx.protos.present.assign(static_cast<size_t>(K), false);
  std::vector<int> counts(static_cast<size_t>(K), 0);
  for (size_t s = 0; s < ctx.reps.size(); ++s) {
    const int y = ctx.labels[s];
    vec_add_scaled(ctx.protos.means[static_cast<size_t>(y)], ctx.reps[s], 1.0);
    counts[static_cast<size_t>(y)] += 1;
  }
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<size_t>(k)] > 0) {
      ctx.protos.present[static_cast<size_t>(k)] = true;
      for (double& v : ctx.protos.means[static_cast<size_t>(k)]) v /= counts[static_cast<size_t>(k)];
    }
  }
  return ctx;
}

FusionHead init_fusion_head(int classes, int dim, double lambda) {
  FusionHead head;
  head.mean_offsets.assign(static_cast<size_t>(classes), Vec(static_cast<size_t>(dim), 0.0));
  head.bias_offsets.assign(static_cast<size_t>(classes), 0.0);
  head.gain_global.assign(static_cast<size_t>(dim), 1.0);
  head.gain_local.assign(static_cast<size_t>(dim), 1.0);
  head.lambda = lambda;
  head.dim = dim;
  return head;
}

Vec fusion_logits(const Vec& z, const PersonalContext& ctx, const FusionHead& head) {
  const int K = ctx.classes();
  const size_t d = z.size();
  const double local_scale = head.lambda / head.dim;
  Vec logits(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    const Vec& mu_star = ctx.nav.means[static_cast<size_t>(i)];
    const Vec& mu_off = head.mean_offsets[static_cast<size_t>(i)];
    const DiagMat& a_star = ctx.bank.precisions[static_cast<size_t>(i)];
    double xi = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double diff = z[j] - mu_star[j] - mu_off[j];
      xi += head.gain_global[j] * a_star.diag[j] * diff * diff;
    }
    xi *= -0.5;
    double zeta = 0.0;
    if (ctx.protos.present[static_cast<size_t>(i)]) {
      const Vec& up = ctx.protos.means[static_cast<size_t>(i)];
      for (size_t j = 0; j < d; ++j) {
        const double diff = z[j] - up[j];
        zeta += head.gain_local[j] * diff * diff;
      }
      zeta *= -local_scale;
    }
    const double beta = ctx.nav.biases[static_cast<size_t>(i)] + head.bias_offsets[static_cast<size_t>(i)];
    logits[static_cast<size_t>(i)] = xi + zeta + beta;
  }
  return logits;
}

FusionGrads fusion_loss_and_grads(const std::vector<Vec>& z_batch, const std::vector<int>& y_batch,
                                  const PersonalContext& ctx, const FusionHead& head) {
  assert(z_batch.size() == y_batch.size() && !z_batch.empty());
  const size_t n = z_batch.size();
  const int K = ctx.classes();
  const size_t d = z_batch[0].size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double local_scale = head.lambda / head.dim;

  FusionGrads out;
  out.d_mean.assign(static_cast<size_t>(K), Vec(d, 0.0));
  out.d_bias.assign(static_cast<size_t>(K), 0.0);
  out.d_gain_global.assign(d, 0.0);
  out.d_gain_local.assign(d, 0.0);

  for (size_t s = 0; s < n; ++s) {
    const Vec& z = z_batch[s];
    const Vec logits = fusion_logits(z, ctx, head);
    const double lse = log_sum_exp(logits);
    const int y = y_batch[s];
    out.loss += inv_n * (lse - logits[static_cast<size_t>(y)]);

    for (int i = 0; i < K; ++i) {
      double r = std::exp(logits[static_cast<size_t>(i)] - lse);  // P_i
      if (i == y) r -= 1.0;
      r *= inv_n;

      const Vec& mu_star = ctx.nav.means[static_cast<size_t>(i)];
      const Vec& mu_off = head.mean_offsets[static_cast<size_t>(i)];
      const DiagMat& a_star = ctx.bank.precisions[static_cast<size_t>(i)];
      out.d_bias[static_cast<size_t>(i)] += r;
      for (size_t j = 0; j < d; ++j) {
        const double diff = z[j] - mu_star[j] - mu_off[j];
        // d xi / d mu_off = A_g A* (z - mu* - mu);  d xi / d A_g = -1/2 A* diff^2
        out.d_mean[static_cast<size_t>(i)][j] += r * head.gain_global[j] * a_star.diag[j] * diff;
        out.d_gain_global[j] += r * (-0.5) * a_star.diag[j] * diff * diff;
      }
      if (ctx.protos.present[static_cast<size_t>(i)]) {
        const Vec& up = ctx.protos.means[static_cast<size_t>(i)];
        for (size_t j = 0; j < d; ++j) {
          const double diff = z[j] - up[j];
          out.d_gain_local[j] += r * (-local_scale) * diff * diff;
        }
      }
    }
  }
  return out;
}

double fusion_loss(const PersonalContext& ctx, const FusionHead& head) {
  double loss = 0.0;
  for (size_t s = 0; s < ctx.reps.size(); ++s) {
    const Vec logits = fusion_logits(ctx.reps[s], ctx, head);
    loss += log_sum_exp(logits) - logits[static_cast<size_t>(ctx.labels[s])];
  }
  return loss / static_cast<double>(ctx.reps.size());
}

FusionHead fit_personalized_head(const PersonalContext& ctx, const PersonalizeConfig& cfg,
                                 RngStream& rng) {
  const int K = ctx.classes();
  const int d = ctx.dim();
  FusionHead head = init_fusion_head(K, d, cfg.lambda);
  const int n = static_cast<int>(ctx.reps.size());
  if (cfg.epochs == 0 || n == 0) return head;

  // Velocity buffers per parameter block.
  std::vector<Vec> v_mean(static_cast<size_t>(K), Vec(static_cast<size_t>(d), 0.0));
  Vec v_bias(static_cast<size_t>(K), 0.0);
  Vec v_gg(static_cast<size_t>(d), 0.0);
  Vec v_gl(static_cast<size_t>(d), 0.0);

  const double start_loss = fusion_loss(ctx, head);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = rng.permutation(n);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      std::vector<Vec> zb;
      std::vector<int> yb;
      zb.reserve(static_cast<size_t>(end - start));
      for (int i = start; i < end; ++i) {
        zb.push_back(ctx.reps[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        yb.push_back(ctx.labels[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      }
      const FusionGrads g = fusion_loss_and_grads(zb, yb, ctx, head);
      for (int k = 0; k < K; ++k) {
        sgd_update(head.mean_offsets[static_cast<size_t>(k)], g.d_mean[static_cast<size_t>(k)],
                   v_mean[static_cast<size_t>(k)], cfg.lr, cfg.momentum, cfg.weight_decay);
      }
      sgd_update(head.bias_offsets, g.d_bias, v_bias, cfg.lr, cfg.momentum, 0.0);
      sgd_update(head.gain_global, g.d_gain_global, v_gg, cfg.lr, cfg.momentum, 0.0);
      sgd_update(head.gain_local, g.d_gain_local, v_gl, cfg.lr, cfg.momentum, 0.0);
      for (double& v : head.gain_global) v = std::max(v, kEpsPd);
      for (double& v : head.gain_local) v = std::max(v, 0.0);
    }
  }
  const double end_loss = fusion_loss(ctx, head);
  if (end_loss > start_loss) {
    std::cerr << "warning: client " << ctx.client_id
              << ": personalized fit ended above its starting loss (" << start_loss << " -> "
              << end_loss << ")\n";
  }
  return head;
}

LbfgsReport lbfgs_refine_bias(const PersonalContext& ctx, FusionHead& head,
                              const PersonalizeConfig& cfg) {
  const int K = ctx.classes();
  const size_t n = ctx.reps.size();

  // Bias offsets only; the quadratic parts of every logit are constant here,
  // so precompute them once.
  std::vector<Vec> base(n);
  {
    FusionHead zero_bias = head;
    std::fill(zero_bias.bias_offsets.begin(), zero_bias.bias_offsets.end(), 0.0);
    for (size_t s = 0; s < n; ++s) base[s] = fusion_logits(ctx.reps[s], ctx, zero_bias);
  }

  const auto objective = [&](const Vec& b, Vec& grad) {
    grad.assign(static_cast<size_t>(K), 0.0);
    double loss = 0.0;
    Vec logits(static_cast<size_t>(K));
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t s = 0; s < n; ++s) {
      for (int i = 0; i < K; ++i) logits[static_cast<size_t>(i)] = base[s][static_cast<size_t>(i)] + b[static_cast<size_t>(i)];
      const double lse = log_sum_exp(logits);
      const int y = ctx.labels[s];
      loss += inv_n * (lse - logits[static_cast<size_t>(y)]);
      for (int i = 0; i < K; ++i) {
        double r = std::exp(logits[static_cast<size_t>(i)] - lse);
        if (i == y) r -= 1.0;
        grad[static_cast<size_t>(i)] += inv_n * r;
      }
    }
    return loss;
  };

  LbfgsConfig lc;
  lc.memory = cfg.lbfgs_memory;
  lc.max_iterations = cfg.lbfgs_max_iterations;
  lc.initial_step = cfg.lbfgs_step;

  LbfgsReport report;
  Vec b = head.bias_offsets;
  Vec g0;
  report.loss_before = objective(b, g0);
  double current = report.loss_before;
  for (int cycle = 0; cycle < cfg.lbfgs_cycles; ++cycle) {
    LbfgsResult r = lbfgs_minimize(objective, b, lc);
    b = std::move(r.x);
    current = r.f;
    report.iterations += r.iterations;
    if (r.line_search_failed) {
      report.line_search_failed = true;
      Vec g_check;
      objective(b, g_check);
      double gmax = 0.0;
      for (double v : g_check) gmax = std::max(gmax, std::abs(v));
      if (gmax > 1e-6) {
        std::cerr << "warning: client " << ctx.client_id
                  << ": bias refinement line search stalled at |g|=" << gmax
                  << ", keeping last accepted iterate\n";
      }
      break;
    }
    if (r.converged) break;
  }
  head.bias_offsets = std::move(b);
  report.loss_after = current;
  return report;
}

std::vector<FusedGaussian> fused_params(const PersonalContext& ctx, const FusionHead& head) {
  const int K = ctx.classes();
  const size_t d = static_cast<size_t>(ctx.dim());
  const double local_scale = 2.0 * head.lambda / head.dim;

  std::vector<FusedGaussian> out(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    FusedGaussian& f = out[static_cast<size_t>(i)];
    const Vec& mu_star = ctx.nav.means[static_cast<size_t>(i)];
    const Vec& mu_off = head.mean_offsets[static_cast<size_t>(i)];
    const DiagMat& a_star = ctx.bank.precisions[static_cast<size_t>(i)];
    const double beta = ctx.nav.biases[static_cast<size_t>(i)] + head.bias_offsets[static_cast<size_t>(i)];
    const bool present = ctx.protos.present[static_cast<size_t>(i)];

    f.fused = present;
    f.cov.diag.resize(d);
    f.mean.resize(d);
    double quad_mu_hat = 0.0;    // mu-hat^T P-hat mu-hat
    double quad_global = 0.0;    // m^T A_g A* m
    double quad_local = 0.0;     // upsilon^T A_c upsilon
    for (size_t j = 0; j < d; ++j) {
      const double prior_prec = head.gain_global[j] * a_star.diag[j];
      const double m = mu_star[j] + mu_off[j];
      double prec = prior_prec;
      double weighted = prior_prec * m;
      if (present) {
        const double local_prec = local_scale * head.gain_local[j];
        const double up = ctx.protos.means[static_cast<size_t>(i)][j];
        prec += local_prec;
        weighted += local_prec * up;
        quad_local += head.gain_local[j] * up * up;
      }
      f.cov.diag[j] = 1.0 / prec;
      f.mean[j] = weighted / prec;
      quad_mu_hat += prec * f.mean[j] * f.mean[j];
      quad_global += prior_prec * m * m;
    }
    // Completing the square over xi + zeta + beta leaves this z-independent
    // remainder as the fused bias.
    f.bias = beta + 0.5 * quad_mu_hat - 0.5 * quad_global -
             (head.lambda / head.dim) * quad_local;
  }
  return out;
}

std::pair<int, Vec> predict(const Vec& z, const PersonalContext& ctx, const FusionHead& head) {
  const Vec logits = fusion_logits(z, ctx, head);
  const Vec posterior = class_posterior(logits);
  const int cls =
      static_cast<int>(std::max_element(posterior.begin(), posterior.end()) - posterior.begin());
  return {cls, posterior};
}

GaussianFusionResult fuse_gaussian_observations(const Vec& prior_mean, const DiagMat& prior_prec,
                                                const std::vector<Vec>& observations,
                                                const DiagMat& obs_prec) {
  const size_t d = prior_mean.size();
  const double n = static_cast<double>(observations.size());
  GaussianFusionResult out;
  out.mean.resize(d);
  out.precision.diag.resize(d);
  out.combined_obs_precision.diag.resize(d);
  for (size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (const Vec& z : observations) sum += z[j];
    out.combined_obs_precision.diag[j] = n * obs_prec.diag[j];
    out.precision.diag[j] = prior_prec.diag[j] + out.combined_obs_precision.diag[j];
    out.mean[j] = (prior_prec.diag[j] * prior_mean[j] + obs_prec.diag[j] * sum) /
                  out.precision.diag[j];
  }
  return out;
}

Phase2Result run_phase2(const std::vector<ClientDataset>& clients, const GeneratorParams& gen,
                        const Navigator& nav, const CovarianceBank& bank,
                        const PersonalizeConfig& cfg) {
  Phase2Result res;
  res.heads.resize(clients.size());
  res.rows.resize(clients.size());
  std::vector<std::string> errors(clients.size());

  auto work = [&](size_t i) {
    const ClientDataset& client = clients[i];
    try {
      PersonalContext ctx = build_context(client, gen, nav, bank);
      RngStream rng = RngStream::derive(cfg.seed, tags::kPhase2Fit,
                                        static_cast<uint64_t>(client.client_id));
      FusionHead head = fit_personalized_head(ctx, cfg, rng);
      const LbfgsReport report = lbfgs_refine_bias(ctx, head, cfg);

      ClientPhase2Row row;
      row.client_id = client.client_id;
      row.n_train = client.train_size();
      row.n_test = client.test_size();
      row.acc_global = evaluate_accuracy(gen, nav, bank, client, client.test_idx);
      row.train_loss_before_lbfgs = report.loss_before;
      row.train_loss_after_lbfgs = report.loss_after;
      if (client.test_size() > 0) {
        std::vector<Vec> x_test;
        x_test.reserve(client.test_idx.size());
        for (int idx : client.test_idx) x_test.push_back(client.features[static_cast<size_t>(idx)]);
        auto [z_test, tape] = forward(gen, x_test);
        (void)tape;
        int correct = 0;
        for (size_t s = 0; s < z_test.size(); ++s) {
          if (predict(z_test[s], ctx, head).first ==
              client.labels[static_cast<size_t>(client.test_idx[s])]) {
            ++correct;
          }
        }
        row.acc_personalized = static_cast<double>(correct) / client.test_size();
      }
      res.heads[i] = std::move(head);
      res.rows[i] = row;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };

  const int threads = std::min<int>(cfg.threads, static_cast<int>(clients.size()));
  if (threads <= 1) {
    for (size_t i = 0; i < clients.size(); ++i) work(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          const size_t i = next.fetch_add(1);
          if (i >= clients.size()) return;
          work(i);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  for (size_t i = 0; i < clients.size(); ++i) {
    if (!errors[i].empty()) {
      res.warnings.push_back("phase2 client " + std::to_string(clients[i].client_id) + ": " +
                             errors[i]);
    }
  }

  // Mean/std over clients with test data; others reported, not aggregated.
  double sum = 0.0;
  int counted = 0;
  for (const auto& row : res.rows) {
    if (row.n_test == 0) {
      res.warnings.push_back("phase2 client " + std::to_string(row.client_id) +
                             ": empty test split, excluded from aggregates");
      continue;
    }
    sum += row.acc_personalized;
    ++counted;
  }
  if (counted > 0) {
    res.mean_acc = sum / counted;
    double var = 0.0;
    for (const auto& row : res.rows) {
      if (row.n_test == 0) continue;
      const double dlt = row.acc_personalized - res.mean_acc;
      var += dlt * dlt;
    }
    res.std_acc = std::sqrt(var / counted);
  }
  return res;
}

}  // namespace pfedgm
