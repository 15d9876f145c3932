#include <cmath>
#include <cstdio>
#include <functional>

#include "core/experiment.hpp"
#include "core/lbfgs.hpp"
#include "core/objectives.hpp"
#include "core/personalize.hpp"

namespace pfedgm {

namespace {

struct Check {
  const char* name;
  std::function<bool()> run;
};

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

double max_rel_err(const Vec& got, const Vec& want) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max({std::abs(got[i]), std::abs(want[i]), 1e-8});
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace

int run_selftest(bool verbose) {
  const Check checks[] = {
      {"log_sum_exp shift stability",
       [] {
         const double v = log_sum_exp({1000.0, 1000.0});
         return close(v, 1000.0 + std::log(2.0), 1e-9) && close(log_sum_exp({0.0}), 0.0, 0.0);
       }},
      {"gaussian sampler moments",
       [] {
         RngStream rng(7);
         const Vec mean{1.0, 2.0};
         const DiagMat cov{Vec{4.0, 9.0}};
         Vec sum(2, 0.0), sum_sq(2, 0.0);
         const int n = 40000;
         for (int i = 0; i < n; ++i) {
           const Vec z = sample_gaussian(mean, cov, rng);
           for (int j = 0; j < 2; ++j) {
             sum[static_cast<size_t>(j)] += z[static_cast<size_t>(j)];
             sum_sq[static_cast<size_t>(j)] += z[static_cast<size_t>(j)] * z[static_cast<size_t>(j)];
           }
         }
         for (int j = 0; j < 2; ++j) {
           const double m = sum[static_cast<size_t>(j)] / n;
           const double var = sum_sq[static_cast<size_t>(j)] / n - m * m;
           if (!close(m, mean[static_cast<size_t>(j)], 0.1)) return false;
           if (!close(var, cov.diag[static_cast<size_t>(j)], 0.4)) return false;
         }
         return true;
       }},
      {"re-sampling closed form vs bootstrap",
       [] {
         RngStream rng(11);
         const Vec mu{0.5, -1.0};
         const DiagMat s{Vec{1.0, 2.0}};
         const Vec nu{1.5, 0.0};
         const DiagMat omega{Vec{2.0, 1.0}};
         auto [mu_star, s_star] = analytic_resample_params(mu, s, nu, omega);
         std::vector<Vec> pool;
         for (int i = 0; i < 40000; ++i) pool.push_back(sample_gaussian(mu, s, rng));
         const auto drawn = weighted_resample(pool, ResampleWeight{nu, omega}, 20000, rng);
         Vec m(2, 0.0), v(2, 0.0);
         for (const auto& z : drawn) {
           for (int j = 0; j < 2; ++j) m[static_cast<size_t>(j)] += z[static_cast<size_t>(j)];
         }
         for (double& x : m) x /= static_cast<double>(drawn.size());
         for (const auto& z : drawn) {
           for (int j = 0; j < 2; ++j) {
             const double dlt = z[static_cast<size_t>(j)] - m[static_cast<size_t>(j)];
             v[static_cast<size_t>(j)] += dlt * dlt;
           }
         }
         for (double& x : v) x /= static_cast<double>(drawn.size());
         for (int j = 0; j < 2; ++j) {
           if (!close(m[static_cast<size_t>(j)], mu_star[static_cast<size_t>(j)], 0.05)) return false;
           if (!close(v[static_cast<size_t>(j)], s_star.diag[static_cast<size_t>(j)], 0.08)) return false;
         }
         return true;
       }},
      {"shared loss gradients vs finite differences",
       [] {
         RngStream rng(3);
         const int K = 3, d = 4, n = 6;
         Navigator nav = init_navigator(K, d, rng);
         std::vector<Vec> z(n);
         std::vector<int> y(n);
         for (int s = 0; s < n; ++s) {
           z[static_cast<size_t>(s)].resize(d);
           for (double& x : z[static_cast<size_t>(s)]) x = rng.next_gaussian();
           y[static_cast<size_t>(s)] = static_cast<int>(rng.uniform_int(K));
         }
         const SharedLossResult res = shared_loss_and_grads(z, y, nav);
         for (int s = 0; s < n; ++s) {
           auto f = [&](const Vec& zs) {
             auto zz = z;
             zz[static_cast<size_t>(s)] = zs;
             return shared_loss_and_grads(zz, y, nav).loss;
           };
           const Vec fd = finite_diff_grad(f, z[static_cast<size_t>(s)], 1e-5);
           if (max_rel_err(res.dz[static_cast<size_t>(s)], fd) > 1e-4) return false;
         }
         return true;
       }},
      {"generator backprop vs finite differences",
       [] {
         RngStream rng(5);
         GeneratorParams gen = init_generator({3, 5, 2}, rng);
         std::vector<Vec> x(4, Vec(3));
         for (auto& v : x) {
           for (double& e : v) e = rng.next_gaussian();
         }
         auto [z, tape] = forward(gen, x);
         std::vector<Vec> dz(z.size(), Vec(2, 1.0));  // loss = sum of outputs
         const GeneratorGrads grads = backward(gen, tape, dz);
         auto loss_at = [&](const Vec& w0) {
           GeneratorParams g = gen;
           g.layers[0].w = w0;
           auto [zz, t] = forward(g, x);
           (void)t;
           double acc = 0.0;
           for (const auto& zs : zz) {
             for (double v : zs) acc += v;
           }
           return acc;
         };
         const Vec fd = finite_diff_grad(loss_at, gen.layers[0].w, 1e-5);
         return max_rel_err(grads.dw[0], fd) < 1e-4;
       }},
      {"identity-bank reduction identities",
       [] {
         RngStream rng(9);
         const int K = 4, d = 5, n = 8;
         Navigator nav = init_navigator(K, d, rng);
         CovarianceBank bank = init_covariance_bank(K, d);
         std::vector<Vec> z(n);
         std::vector<int> y(n);
         for (int s = 0; s < n; ++s) {
           z[static_cast<size_t>(s)].resize(d);
           for (double& x : z[static_cast<size_t>(s)]) x = rng.next_gaussian();
           y[static_cast<size_t>(s)] = static_cast<int>(rng.uniform_int(K));
         }
         const double h = shared_loss_and_grads(z, y, nav).loss;
         const double hhat = covariance_loss_and_grad(z, y, nav, bank).loss;
         if (!close(h, hhat, 1e-12)) return false;

         ClientDataset fake;
         fake.client_id = 0;
         GeneratorParams ident;
         Layer l;
         l.in = d;
         l.out = d;
         l.relu = false;
         l.w.assign(static_cast<size_t>(d) * d, 0.0);
         for (int j = 0; j < d; ++j) l.w[static_cast<size_t>(j) * d + j] = 1.0;
         l.b.assign(static_cast<size_t>(d), 0.0);
         ident.layers.push_back(l);
         for (int s = 0; s < n; ++s) {
           fake.features.push_back(z[static_cast<size_t>(s)]);
           fake.labels.push_back(y[static_cast<size_t>(s)]);
           fake.train_idx.push_back(s);
         }
         const PersonalContext ctx = build_context(fake, ident, nav, bank);
         FusionHead head = init_fusion_head(K, d, 0.0);
         for (int s = 0; s < n; ++s) {
           const Vec a = fusion_logits(z[static_cast<size_t>(s)], ctx, head);
           const Vec b = gaussian_logits(z[static_cast<size_t>(s)], nav, bank);
           for (int k = 0; k < K; ++k) {
             if (!close(a[static_cast<size_t>(k)], b[static_cast<size_t>(k)], 1e-12)) return false;
           }
         }
         return true;
       }},
      {"lbfgs quadratic minimizer",
       [] {
         RngStream rng(13);
         const int n = 6;
         Vec diag(n), target(n), x0(n, 0.0);
         for (int i = 0; i < n; ++i) {
           diag[static_cast<size_t>(i)] = 0.5 + rng.next_double() * 3.0;
           target[static_cast<size_t>(i)] = rng.next_gaussian();
         }
         auto fg = [&](const Vec& x, Vec& g) {
           g.resize(x.size());
           double f = 0.0;
           for (size_t i = 0; i < x.size(); ++i) {
             const double dlt = x[i] - target[i];
             f += 0.5 * diag[i] * dlt * dlt;
             g[i] = diag[i] * dlt;
           }
           return f;
         };
         LbfgsConfig cfg;
         cfg.initial_step = 1.0;
         const LbfgsResult res = lbfgs_minimize(fg, x0, cfg);
         for (int i = 0; i < n; ++i) {
           if (!close(res.x[static_cast<size_t>(i)], target[static_cast<size_t>(i)], 1e-8)) {
             return false;
           }
         }
         return true;
       }},
      {"deterministic local training",
       [] {
         ScenarioConfig s = default_scenario(99);
         s.clients = 2;
         s.samples_per_client = 40;
         const auto clients = build_synthetic_clients(s);
         TrainConfig cfg;
         cfg.rounds = 1;
         cfg.local_epochs = 1;
         cfg.classes = s.classes;
         cfg.seed = 99;
         const ServerState st = init_server_state(cfg, s.input_dim);
         RngStream r1 = RngStream::derive(1, 2, 3);
         RngStream r2 = RngStream::derive(1, 2, 3);
         const auto u1 = local_train(clients[0], st, cfg, r1);
         const auto u2 = local_train(clients[0], st, cfg, r2);
         return u1 && u2 && u1->gen.layers[0].w == u2->gen.layers[0].w &&
                u1->nav.biases == u2->nav.biases;
       }},
  };

  int failures = 0;
  for (const auto& c : checks) {
    bool ok = false;
    try {
      ok = c.run();
    } catch (const std::exception& e) {
      if (verbose) std::printf("        exception: %s\n", e.what());
      ok = false;
    }
    std::printf("[%s] %s\n", ok ? "ok" : "FAIL", c.name);
    if (!ok) ++failures;
  }
  std::printf("%s: %d check(s) failed\n", failures == 0 ? "selftest passed" : "selftest FAILED",
              failures);
  return failures;
}

}  // namespace pfedgm
