#include "core/fedsim.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iostream>
#include <thread>

#include "core/seeds.hpp"

namespace pfedgm {

std::string method_name(Method m) {
  switch (m) {
    case Method::pfedgm: return "pfedgm";
    case Method::fedavg: return "fedavg";
    case Method::fedavgft: return "fedavgft";
    case Method::local: return "local";
  }
  return "unknown";
}

std::optional<Method> method_from_name(const std::string& name) {
  if (name == "pfedgm") return Method::pfedgm;
  if (name == "fedavg") return Method::fedavg;
  if (name == "fedavgft") return Method::fedavgft;
  if (name == "local") return Method::local;
  return std::nullopt;
}

std::vector<int> select_clients(int total_clients, double participation, RngStream& rng) {
  const int want = std::max(1, static_cast<int>(std::lround(participation * total_clients)));
  std::vector<int> ids(static_cast<size_t>(total_clients));
  for (int i = 0; i < total_clients; ++i) ids[static_cast<size_t>(i)] = i;
  // Partial Fisher-Yates: the first `want` entries are the sample.
  for (int i = 0; i < want; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(total_clients - i)));
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
  }
  ids.resize(static_cast<size_t>(want));
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

std::vector<Vec> gather(const std::vector<Vec>& all, const std::vector<int>& idx) {
  std::vector<Vec> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(all[static_cast<size_t>(i)]);
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& all, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(all[static_cast<size_t>(i)]);
  return out;
}

}  // namespace

std::optional<ClientUpdate> local_train(const ClientDataset& client, const ServerState& globals,
                                        const TrainConfig& cfg, RngStream& rng) {
  const int n_train = client.train_size();
  if (n_train == 0) {
    std::cerr << "warning: client " << client.client_id << " has no train data, skipped\n";
    return std::nullopt;
  }
  const bool pfedgm_objective = cfg.method == Method::pfedgm;

  ClientUpdate upd;
  upd.client_id = client.client_id;
  upd.gen = globals.gen;
  upd.nav = globals.nav;
  upd.bank = globals.bank;
  upd.n_train = n_train;

  const std::vector<Vec> x_train = gather(client.features, client.train_idx);
  const std::vector<int> y_train = gather_labels(client.labels, client.train_idx);

  // Exact prototypes once per round, then EMA-adjusted per batch.
  Prototypes protos;
  if (pfedgm_objective) {
    protos = compute_prototypes_exact(x_train, y_train, cfg.classes, upd.gen);
  }

  ModelSgdState opt = ModelSgdState::zeros_like(upd.gen, upd.nav, upd.bank);
  const SgdConfig sgd{cfg.lr, cfg.momentum, cfg.weight_decay};

  double sum_h = 0.0, sum_r = 0.0;
  int batches = 0;
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const std::vector<int> order = rng.permutation(n_train);
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int end = std::min(n_train, start + cfg.batch_size);
      std::vector<Vec> xb;
      std::vector<int> yb;
      xb.reserve(static_cast<size_t>(end - start));
      for (int i = start; i < end; ++i) {
        xb.push_back(x_train[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        yb.push_back(y_train[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      }

      auto [zb, tape] = forward(upd.gen, xb);
      SharedLossResult sh = shared_loss_and_grads(zb, yb, upd.nav);

      std::vector<Vec> dz = sh.dz;
      double r_loss = 0.0;
      if (pfedgm_objective) {
        PersonalLossResult pr = personal_loss_and_grad(zb, yb, protos);
        r_loss = pr.loss;
        upd.missing_prototype_hits += pr.missing;
        for (size_t s = 0; s < dz.size(); ++s) {
          vec_add_scaled(dz[s], pr.dz[s], cfg.lambda);
        }
      }
      GeneratorGrads gen_grads = backward(upd.gen, tape, dz);

      if (pfedgm_objective) {
        CovarianceLossResult cov = covariance_loss_and_grad(zb, yb, upd.nav, upd.bank);
        sgd_step(upd.gen, upd.nav, upd.bank, &gen_grads, &sh.dmu, &sh.db, &cov.d_precision, sgd,
                 opt);
        update_prototypes(protos, zb, yb, cfg.prototype_ema);
      } else {
        sgd_step(upd.gen, upd.nav, upd.bank, &gen_grads, &sh.dmu, &sh.db, nullptr, sgd, opt);
      }

      sum_h += sh.loss;
      sum_r += r_loss;
      ++batches;
    }
  }
  upd.mean_loss.shared = batches > 0 ? sum_h / batches : 0.0;
  upd.mean_loss.personal = batches > 0 ? sum_r / batches : 0.0;
  upd.mean_loss.lambda = pfedgm_objective ? cfg.lambda : 0.0;
  upd.mean_loss.total = upd.mean_loss.shared + upd.mean_loss.lambda * upd.mean_loss.personal;
  return upd;
}

ServerState aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw ModelError("aggregate: no client updates");
  std::vector<const ClientUpdate*> sorted;
  sorted.reserve(updates.size());
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });

  double total_n = 0.0;
  for (const auto* u : sorted) total_n += u->n_train;

  ServerState out;
  out.gen = sorted.front()->gen;
  out.nav = sorted.front()->nav;
  out.bank = sorted.front()->bank;
  auto scale_into = [](Vec& dst, const Vec& src, double w, bool first) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = first ? w * src[i] : dst[i] + w * src[i];
  };
  bool first = true;
  for (const auto* u : sorted) {
    const double w = u->n_train / total_n;
    for (size_t l = 0; l < out.gen.layers.size(); ++l) {
      scale_into(out.gen.layers[l].w, u->gen.layers[l].w, w, first);
      scale_into(out.gen.layers[l].b, u->gen.layers[l].b, w, first);
    }
    for (size_t k = 0; k < out.nav.means.size(); ++k) {
      scale_into(out.nav.means[k], u->nav.means[k], w, first);
    }
    scale_into(out.nav.biases, u->nav.biases, w, first);
    for (size_t k = 0; k < out.bank.precisions.size(); ++k) {
      scale_into(out.bank.precisions[k].diag, u->bank.precisions[k].diag, w, first);
    }
    first = false;
  }
  for (auto& a : out.bank.precisions) a.project_floor();
  return out;
}

ServerState init_server_state(const TrainConfig& cfg, int input_dim) {
  RngStream rng = RngStream::derive(cfg.seed, tags::kServerInit);
  ServerState st;
  st.gen = init_generator({input_dim, cfg.hidden_dim, cfg.rep_dim}, rng);
  st.nav = init_navigator(cfg.classes, cfg.rep_dim, rng);
  st.bank = init_covariance_bank(cfg.classes, cfg.rep_dim);
  return st;
}

double evaluate_accuracy(const GeneratorParams& gen, const Navigator& nav,
                         const CovarianceBank& bank, const ClientDataset& data,
                         const std::vector<int>& indices) {
  if (indices.empty()) return 0.0;
  const std::vector<Vec> x = gather(data.features, indices);
  auto [z, tape] = forward(gen, x);
  (void)tape;
  int correct = 0;
  for (size_t s = 0; s < z.size(); ++s) {
    const Vec logits = gaussian_logits(z[s], nav, bank);
    const int pred =
        static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == data.labels[static_cast<size_t>(indices[s])]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

namespace {

// Runs local_train over the given participants, optionally on worker threads.
// Slots are indexed by participant order, so the reduction downstream is
// independent of scheduling.
void train_participants(const std::vector<int>& participants,
                        const std::vector<ClientDataset>& clients, const ServerState& state,
                        const TrainConfig& cfg, int round,
                        std::vector<std::optional<ClientUpdate>>& slots,
                        std::vector<std::string>& warnings) {
  slots.assign(participants.size(), std::nullopt);
  std::vector<std::string> errors(participants.size());
  auto work = [&](size_t idx) {
    const int cid = participants[idx];
    RngStream rng = RngStream::derive(cfg.seed, tags::kClientTrain, static_cast<uint64_t>(cid),
                                      static_cast<uint64_t>(round));
    try {
      slots[idx] = local_train(clients[static_cast<size_t>(cid)], state, cfg, rng);
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  };

  const int threads = std::min<int>(cfg.threads, static_cast<int>(participants.size()));
  if (threads <= 1) {
    for (size_t i = 0; i < participants.size(); ++i) work(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          const size_t i = next.fetch_add(1);
          if (i >= participants.size()) return;
          work(i);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (size_t i = 0; i < participants.size(); ++i) {
    if (!errors[i].empty()) {
      warnings.push_back("round " + std::to_string(round) + " client " +
                         std::to_string(participants[i]) + ": " + errors[i]);
    }
  }
}

Phase1Result run_rounds(const TrainConfig& cfg, const std::vector<ClientDataset>& clients) {
  if (clients.empty()) throw ModelError("run_phase1: no clients");
  const int input_dim = static_cast<int>(clients[0].features.at(0).size());

  Phase1Result res;
  res.state = init_server_state(cfg, input_dim);

  for (int round = 0; round < cfg.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> participants;
    if (cfg.forced_participants) {
      participants = *cfg.forced_participants;
    } else {
      RngStream sel = RngStream::derive(cfg.seed, tags::kSelect, static_cast<uint64_t>(round));
      participants = select_clients(static_cast<int>(clients.size()), cfg.participation, sel);
    }

    std::vector<std::optional<ClientUpdate>> slots;
    train_participants(participants, clients, res.state, cfg, round, slots, res.warnings);

    std::vector<ClientUpdate> updates;
    for (auto& s : slots) {
      if (s) updates.push_back(std::move(*s));
    }
    if (updates.empty()) {
      throw ModelError("round " + std::to_string(round) + ": no successful client updates");
    }
    int missing_hits = 0;
    for (const auto& u : updates) missing_hits += u.missing_prototype_hits;
    if (missing_hits > 0) {
      res.warnings.push_back("round " + std::to_string(round) + ": " +
                             std::to_string(missing_hits) +
                             " samples hit absent prototypes (contributed zero)");
    }
    res.state = aggregate(updates);
    res.state.round = round + 1;

    RoundMetrics m;
    m.round = round;
    for (const auto& u : updates) {
      m.mean_train_loss += u.mean_loss.total;
      m.shared += u.mean_loss.shared;
      m.personal += u.mean_loss.personal;
    }
    m.mean_train_loss /= static_cast<double>(updates.size());
    m.shared /= static_cast<double>(updates.size());
    m.personal /= static_cast<double>(updates.size());
    if (cfg.eval_global_each_round) {
      double acc = 0.0;
      int counted = 0;
      for (const auto& c : clients) {
        if (c.test_size() == 0) continue;
        acc += evaluate_accuracy(res.state.gen, res.state.nav, res.state.bank, c, c.test_idx);
        ++counted;
      }
      m.global_test_acc = counted > 0 ? acc / counted : 0.0;
    }
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    res.rounds.push_back(std::move(m));
  }
  return res;
}

}  // namespace

Phase1Result run_phase1(const TrainConfig& cfg, const std::vector<ClientDataset>& clients) {
  if (cfg.method != Method::pfedgm) throw ModelError("run_phase1: method must be pfedgm");
  return run_rounds(cfg, clients);
}

Phase1Result run_fedavg(const TrainConfig& cfg, const std::vector<ClientDataset>& clients) {
  TrainConfig c = cfg;
  c.method = Method::fedavg;
  return run_rounds(c, clients);
}

LocalResult run_local(const TrainConfig& cfg, const std::vector<ClientDataset>& clients) {
  if (clients.empty()) throw ModelError("run_local: no clients");
  TrainConfig c = cfg;
  c.method = Method::local;
  const int input_dim = static_cast<int>(clients[0].features.at(0).size());

  LocalResult res;
  const ServerState init = init_server_state(c, input_dim);
  res.states.assign(clients.size(), init);

  for (int round = 0; round < c.rounds; ++round) {
    RoundMetrics m;
    m.round = round;
    const auto t0 = std::chrono::steady_clock::now();
    int counted = 0;
    for (size_t i = 0; i < clients.size(); ++i) {
      RngStream rng = RngStream::derive(c.seed, tags::kLocalTrain, static_cast<uint64_t>(i),
                                        static_cast<uint64_t>(round));
      auto upd = local_train(clients[i], res.states[i], c, rng);
      if (!upd) continue;
      res.states[i].gen = std::move(upd->gen);
      res.states[i].nav = std::move(upd->nav);
      res.states[i].bank = std::move(upd->bank);
      res.states[i].round = round + 1;
      m.mean_train_loss += upd->mean_loss.total;
      m.shared += upd->mean_loss.shared;
      ++counted;
    }
    if (counted > 0) {
      m.mean_train_loss /= counted;
      m.shared /= counted;
    }
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    res.rounds.push_back(std::move(m));
  }
  return res;
}

std::vector<ServerState> finetune_clients(const ServerState& global, const TrainConfig& cfg,
                                          const std::vector<ClientDataset>& clients) {
  TrainConfig c = cfg;
  c.method = Method::fedavg;  // shared objective, full model
  c.local_epochs = cfg.finetune_epochs;

  std::vector<ServerState> out(clients.size(), global);
  for (size_t i = 0; i < clients.size(); ++i) {
    if (c.local_epochs == 0) continue;
    RngStream rng = RngStream::derive(c.seed, tags::kFineTune, static_cast<uint64_t>(i));
    auto upd = local_train(clients[i], global, c, rng);
    if (!upd) continue;
    out[i].gen = std::move(upd->gen);
    out[i].nav = std::move(upd->nav);
    out[i].bank = std::move(upd->bank);
  }
  return out;
}

}  // namespace pfedgm
