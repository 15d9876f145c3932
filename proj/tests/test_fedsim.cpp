#include <cmath>
#include <set>

#include "doctest.h"

#include "core/fedsim.hpp"
#include "core/scenario.hpp"
#include "core/seeds.hpp"

using namespace pfedgm;

namespace {

// Two linearly separable classes in the plane.
std::vector<ClientDataset> separable_clients(int n_clients, int per_client, uint64_t seed) {
  MixtureSpec spec;
  spec.classes = 2;
  spec.means = {Vec{3.0, 0.0}, Vec{-3.0, 0.0}};
  spec.covs = {DiagMat::constant(2, 0.2), DiagMat::constant(2, 0.2)};
  spec.weights = Vec{0.5, 0.5};
  std::vector<ClientDataset> out;
  for (int i = 0; i < n_clients; ++i) {
    RngStream rng = RngStream::derive(seed, 500, static_cast<uint64_t>(i));
    std::map<int, int> counts{{0, per_client / 2}, {1, per_client - per_client / 2}};
    out.push_back(generate_client_dataset(spec, {}, counts, i, rng));
  }
  return out;
}

bool states_equal(const ServerState& a, const ServerState& b) {
  for (size_t l = 0; l < a.gen.layers.size(); ++l) {
    if (a.gen.layers[l].w != b.gen.layers[l].w) return false;
    if (a.gen.layers[l].b != b.gen.layers[l].b) return false;
  }
  if (a.nav.means != b.nav.means || a.nav.biases != b.nav.biases) return false;
  for (size_t k = 0; k < a.bank.precisions.size(); ++k) {
    if (a.bank.precisions[k].diag != b.bank.precisions[k].diag) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("select_clients: full participation returns everyone") {
  RngStream rng(1);
  const auto ids = select_clients(7, 1.0, rng);
  CHECK(ids == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("select_clients: exact sample size and distinctness") {
  RngStream rng(2);
  const auto ids = select_clients(100, 0.3, rng);
  CHECK(ids.size() == 30);
  CHECK(std::set<int>(ids.begin(), ids.end()).size() == 30);
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < 100);
  }
}

TEST_CASE("select_clients: at least one client even for tiny q") {
  RngStream rng(3);
  CHECK(select_clients(10, 0.01, rng).size() == 1);
}

TEST_CASE("select_clients: per-client selection frequency approaches q") {
  std::vector<int> hits(100, 0);
  const int rounds = 10000;
  for (int r = 0; r < rounds; ++r) {
    RngStream rng = RngStream::derive(42, 1000, static_cast<uint64_t>(r));
    for (int id : select_clients(100, 0.3, rng)) hits[static_cast<size_t>(id)] += 1;
  }
  for (int id = 0; id < 100; ++id) {
    const double rate = hits[static_cast<size_t>(id)] / static_cast<double>(rounds);
    CHECK(std::abs(rate - 0.3) < 0.02);
  }
}

TEST_CASE("local_train: zero learning rate returns the globals bitwise") {
  const auto clients = separable_clients(1, 40, 7);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.lr = 0.0;
  cfg.local_epochs = 3;
  cfg.seed = 7;
  const ServerState globals = init_server_state(cfg, 2);
  RngStream rng(5);
  const auto upd = local_train(clients[0], globals, cfg, rng);
  REQUIRE(upd.has_value());
  CHECK(states_equal(globals, ServerState{upd->gen, upd->nav, upd->bank, 0}));
  CHECK(upd->n_train == clients[0].train_size());
}

TEST_CASE("local_train: identical streams give bitwise-identical updates") {
  const auto clients = separable_clients(1, 60, 8);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.seed = 8;
  cfg.local_epochs = 2;
  const ServerState globals = init_server_state(cfg, 2);
  RngStream r1 = RngStream::derive(8, 9, 10);
  RngStream r2 = RngStream::derive(8, 9, 10);
  const auto u1 = local_train(clients[0], globals, cfg, r1);
  const auto u2 = local_train(clients[0], globals, cfg, r2);
  REQUIRE(u1.has_value());
  REQUIRE(u2.has_value());
  CHECK(states_equal(ServerState{u1->gen, u1->nav, u1->bank, 0},
                     ServerState{u2->gen, u2->nav, u2->bank, 0}));
  CHECK(u1->mean_loss.total == u2->mean_loss.total);
}

TEST_CASE("local_train: separable toy reaches high train accuracy") {
  const auto clients = separable_clients(1, 100, 9);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.method = Method::fedavg;  // shared objective only
  cfg.local_epochs = 40;
  cfg.lr = 0.05;
  cfg.seed = 9;

  // Single linear layer generator.
  ServerState globals;
  RngStream rng = RngStream::derive(9, 1);
  globals.gen = init_generator({2, 2}, rng);
  globals.nav = init_navigator(2, 2, rng);
  globals.bank = init_covariance_bank(2, 2);

  RngStream trng = RngStream::derive(9, 2);
  const auto upd = local_train(clients[0], globals, cfg, trng);
  REQUIRE(upd.has_value());
  const double acc =
      evaluate_accuracy(upd->gen, upd->nav, upd->bank, clients[0], clients[0].train_idx);
  CHECK(acc >= 0.95);
}

TEST_CASE("local_train: empty train split is skipped with a warning") {
  ClientDataset empty;
  empty.client_id = 4;
  empty.features = {Vec{1.0, 2.0}};
  empty.labels = {0};
  empty.test_idx = {0};
  TrainConfig cfg;
  cfg.classes = 2;
  const ServerState globals = init_server_state(cfg, 2);
  RngStream rng(1);
  CHECK(!local_train(empty, globals, cfg, rng).has_value());
}

TEST_CASE("local_train: loss accounting total = H + lambda R") {
  const auto clients = separable_clients(1, 50, 10);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.lambda = 0.7;
  cfg.seed = 10;
  const ServerState globals = init_server_state(cfg, 2);
  RngStream rng(11);
  const auto upd = local_train(clients[0], globals, cfg, rng);
  REQUIRE(upd.has_value());
  CHECK(std::abs(upd->mean_loss.total -
                 (upd->mean_loss.shared + cfg.lambda * upd->mean_loss.personal)) <= 1e-12);
  CHECK(upd->mean_loss.personal > 0.0);
}

TEST_CASE("aggregate: identity on a singleton and on identical updates") {
  const auto clients = separable_clients(2, 30, 12);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.seed = 12;
  const ServerState globals = init_server_state(cfg, 2);
  RngStream rng(13);
  auto upd = local_train(clients[0], globals, cfg, rng);
  REQUIRE(upd.has_value());

  const ServerState single = aggregate({*upd});
  CHECK(states_equal(single, ServerState{upd->gen, upd->nav, upd->bank, 0}));

  ClientUpdate twin = *upd;
  twin.client_id = 1;
  const ServerState both = aggregate({*upd, twin});
  for (size_t l = 0; l < both.gen.layers.size(); ++l) {
    for (size_t i = 0; i < both.gen.layers[l].w.size(); ++i) {
      CHECK(both.gen.layers[l].w[i] == doctest::Approx(upd->gen.layers[l].w[i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("aggregate: hand-computed weighted average") {
  ClientUpdate a, b;
  a.client_id = 0;
  a.n_train = 1;
  b.client_id = 1;
  b.n_train = 3;
  for (ClientUpdate* u : {&a, &b}) {
    Layer l;
    l.in = 1;
    l.out = 1;
    l.w = Vec{u == &a ? 0.0 : 4.0};
    l.b = Vec{0.0};
    u->gen.layers.push_back(l);
    u->nav.means = {Vec{u == &a ? 0.0 : 4.0}};
    u->nav.biases = Vec{0.0};
    u->bank.precisions = {DiagMat::identity(1)};
  }
  const ServerState out = aggregate({a, b});
  CHECK(out.gen.layers[0].w[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(out.nav.means[0][0] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("aggregate: permutation invariance is bitwise") {
  const auto clients = separable_clients(3, 40, 14);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.seed = 14;
  const ServerState globals = init_server_state(cfg, 2);
  std::vector<ClientUpdate> updates;
  for (int i = 0; i < 3; ++i) {
    RngStream rng = RngStream::derive(14, 2, static_cast<uint64_t>(i));
    auto u = local_train(clients[static_cast<size_t>(i)], globals, cfg, rng);
    REQUIRE(u.has_value());
    updates.push_back(std::move(*u));
  }
  const ServerState s1 = aggregate({updates[0], updates[1], updates[2]});
  const ServerState s2 = aggregate({updates[2], updates[0], updates[1]});
  CHECK(states_equal(s1, s2));
}

TEST_CASE("run_phase1: zero rounds returns the initial parameters") {
  const auto clients = separable_clients(2, 30, 15);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 0;
  cfg.seed = 15;
  const Phase1Result res = run_phase1(cfg, clients);
  CHECK(states_equal(res.state, init_server_state(cfg, 2)));
  CHECK(res.rounds.empty());
}

TEST_CASE("run_phase1: reproducible metric trace and state") {
  const auto clients = separable_clients(3, 40, 16);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 2;
  cfg.participation = 1.0;
  cfg.local_epochs = 1;
  cfg.seed = 16;
  const Phase1Result a = run_phase1(cfg, clients);
  const Phase1Result b = run_phase1(cfg, clients);
  CHECK(states_equal(a.state, b.state));
  REQUIRE(a.rounds.size() == b.rounds.size());
  for (size_t r = 0; r < a.rounds.size(); ++r) {
    CHECK(a.rounds[r].mean_train_loss == b.rounds[r].mean_train_loss);
    CHECK(a.rounds[r].shared == b.rounds[r].shared);
    CHECK(a.rounds[r].personal == b.rounds[r].personal);
  }
}

TEST_CASE("run_phase1: parallel execution matches sequential bitwise") {
  const auto clients = separable_clients(4, 40, 17);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 3;
  cfg.participation = 1.0;
  cfg.local_epochs = 1;
  cfg.seed = 17;
  cfg.threads = 1;
  const Phase1Result seq = run_phase1(cfg, clients);
  cfg.threads = 4;
  const Phase1Result par = run_phase1(cfg, clients);
  CHECK(states_equal(seq.state, par.state));
  for (size_t r = 0; r < seq.rounds.size(); ++r) {
    CHECK(seq.rounds[r].mean_train_loss == par.rounds[r].mean_train_loss);
  }
}

TEST_CASE("run_phase1: training loss decreases on a synthetic scenario") {
  ScenarioConfig s = default_scenario(18);
  s.classes = 3;
  s.clients = 4;
  s.samples_per_client = 60;
  const auto clients = build_synthetic_clients(s);
  TrainConfig cfg;
  cfg.classes = 3;
  cfg.rounds = 50;
  cfg.participation = 1.0;
  cfg.local_epochs = 2;
  cfg.hidden_dim = 16;
  cfg.rep_dim = 4;
  cfg.seed = 18;
  const Phase1Result res = run_phase1(cfg, clients);
  REQUIRE(res.rounds.size() == 50);
  CHECK(res.rounds.back().mean_train_loss < res.rounds.front().mean_train_loss);
}

TEST_CASE("run_phase1: method guard") {
  const auto clients = separable_clients(2, 30, 19);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.method = Method::fedavg;
  CHECK_THROWS_AS(run_phase1(cfg, clients), ModelError);
}

TEST_CASE("round isolation: unregistered clients leave no trace") {
  // Same forced participants, different rosters: identical server state.
  const auto all = separable_clients(4, 40, 20);
  const std::vector<ClientDataset> small(all.begin(), all.begin() + 2);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.seed = 20;
  cfg.forced_participants = std::vector<int>{0, 1};
  const Phase1Result with_extra = run_phase1(cfg, all);
  const Phase1Result without = run_phase1(cfg, small);
  CHECK(states_equal(with_extra.state, without.state));
}

TEST_CASE("run_fedavg: bank stays at the identity") {
  const auto clients = separable_clients(3, 40, 21);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 2;
  cfg.participation = 1.0;
  cfg.local_epochs = 1;
  cfg.seed = 21;
  const Phase1Result res = run_fedavg(cfg, clients);
  for (const auto& a : res.state.bank.precisions) {
    for (double v : a.diag) CHECK(v == 1.0);
  }
}

TEST_CASE("finetune_clients: zero epochs reproduces the global model") {
  const auto clients = separable_clients(2, 30, 22);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 1;
  cfg.participation = 1.0;
  cfg.seed = 22;
  const Phase1Result global = run_fedavg(cfg, clients);
  TrainConfig ft = cfg;
  ft.finetune_epochs = 0;
  const auto states = finetune_clients(global.state, ft, clients);
  for (const auto& st : states) CHECK(states_equal(st, global.state));
}

TEST_CASE("run_local: single client equals centralized training") {
  const auto clients = separable_clients(1, 80, 23);
  TrainConfig cfg;
  cfg.classes = 2;
  cfg.rounds = 4;
  cfg.local_epochs = 2;
  cfg.seed = 23;
  const LocalResult res = run_local(cfg, clients);
  REQUIRE(res.states.size() == 1);
  // Centralized equivalent: sequential local_train rounds on the same stream
  // tags, no aggregation in between.
  TrainConfig c = cfg;
  c.method = Method::local;
  ServerState st = init_server_state(c, 2);
  for (int r = 0; r < 4; ++r) {
    RngStream rng = RngStream::derive(c.seed, tags::kLocalTrain, 0, static_cast<uint64_t>(r));
    auto u = local_train(clients[0], st, c, rng);
    REQUIRE(u.has_value());
    st.gen = u->gen;
    st.nav = u->nav;
    st.bank = u->bank;
  }
  CHECK(states_equal(res.states[0], st));
}

TEST_CASE("collaboration beats isolated training when local data is scarce") {
  // Moderate feature shift, mild label skew, 30 samples per client: pooling
  // pays off, so mean Local accuracy lands below FedAvgFT.
  ScenarioConfig s = default_scenario(11);
  s.tau = 0.5;
  s.dirichlet_alpha = 0.5;
  s.samples_per_client = 30;
  s.min_client_samples = 8;
  const auto clients = build_synthetic_clients(s);

  TrainConfig cfg;
  cfg.classes = s.classes;
  cfg.rounds = 40;
  cfg.local_epochs = 5;
  cfg.participation = 0.3;
  cfg.seed = 11;

  const LocalResult local = run_local(cfg, clients);
  const Phase1Result global = run_fedavg(cfg, clients);
  const auto ft = finetune_clients(global.state, cfg, clients);

  double acc_local = 0.0, acc_ft = 0.0;
  int counted = 0;
  for (size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].test_size() == 0) continue;
    acc_local += evaluate_accuracy(local.states[i].gen, local.states[i].nav,
                                   local.states[i].bank, clients[i], clients[i].test_idx);
    acc_ft += evaluate_accuracy(ft[i].gen, ft[i].nav, ft[i].bank, clients[i],
                                clients[i].test_idx);
    ++counted;
  }
  CHECK(acc_local / counted < acc_ft / counted);
}

TEST_CASE("evaluate_accuracy: perfect on separated prototypes") {
  ClientDataset d;
  d.client_id = 0;
  d.features = {Vec{5.0, 0.0}, Vec{-5.0, 0.0}};
  d.labels = {0, 1};
  d.test_idx = {0, 1};
  GeneratorParams gen;
  Layer l;
  l.in = 2;
  l.out = 2;
  l.w = Vec{1, 0, 0, 1};
  l.b = Vec{0, 0};
  l.relu = false;
  gen.layers.push_back(l);
  Navigator nav;
  nav.means = {Vec{5.0, 0.0}, Vec{-5.0, 0.0}};
  nav.biases = Vec{0.0, 0.0};
  const CovarianceBank bank = init_covariance_bank(2, 2);
  CHECK(evaluate_accuracy(gen, nav, bank, d, d.test_idx) == 1.0);
}
