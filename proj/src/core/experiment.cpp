#include "core/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "core/seeds.hpp"

namespace pfedgm {

using nlohmann::json;

void ExperimentConfig::validate() const {
  if (scenario.has_value() == idx.has_value()) {
    throw ConfigError("config: exactly one data source required (scenario or idx)");
  }
  if (scenario) {
    try {
      scenario->validate();
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }
  if (idx) {
    if (idx->images.empty()) throw ConfigError("idx.images: path required");
    if (idx->labels.empty()) throw ConfigError("idx.labels: path required");
    if (idx->dirichlet_alpha <= 0.0) throw ConfigError("idx.dirichlet_alpha: must be > 0");
    if (idx->clients < 1) throw ConfigError("idx.clients: must be >= 1");
  }
  if (train.rounds < 0) throw ConfigError("train.rounds: must be >= 0");
  if (train.local_epochs < 0) throw ConfigError("train.local_epochs: must be >= 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (train.participation <= 0.0 || train.participation > 1.0) {
    throw ConfigError("train.participation: must lie in (0, 1]");
  }
  if (train.hidden_dim < 1) throw ConfigError("train.hidden_dim: must be >= 1");
  if (train.rep_dim < 1) throw ConfigError("train.rep_dim: must be >= 1");
  if (train.prototype_ema <= 0.0 || train.prototype_ema > 1.0) {
    throw ConfigError("train.prototype_ema: must lie in (0, 1]");
  }
  if (personalize.epochs < 0) throw ConfigError("personalize.epochs: must be >= 0");
  if (personalize.batch_size < 1) throw ConfigError("personalize.batch_size: must be >= 1");
  if (personalize.lbfgs_max_iterations < 1) {
    throw ConfigError("personalize.lbfgs_max_iterations: must be >= 1");
  }
  if (personalize.lbfgs_cycles < 0) throw ConfigError("personalize.lbfgs_cycles: must be >= 0");
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  if (j.contains("method")) {
    const auto m = method_from_name(j.at("method").get<std::string>());
    if (!m) {
      throw ConfigError("method: must be one of pfedgm, fedavg, fedavgft, local");
    }
    cfg.method = *m;
  }
  read_field(j, "seed", cfg.seed);
  read_field(j, "out_dir", cfg.out_dir);
  read_field(j, "dump_representations", cfg.dump_representations);
  read_field(j, "quiet", cfg.quiet);

  if (j.contains("scenario")) {
    try {
      ScenarioConfig s = scenario_from_json(j.at("scenario"));
      // Data follows the master seed unless the scenario pins its own.
      if (!j.at("scenario").contains("seed")) s.seed = cfg.seed;
      cfg.scenario = std::move(s);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("idx")) {
    const json& ij = j.at("idx");
    IdxSource src;
    if (!ij.contains("images")) throw ConfigError("idx.images: path required");
    if (!ij.contains("labels")) throw ConfigError("idx.labels: path required");
    src.images = ij.at("images").get<std::string>();
    src.labels = ij.at("labels").get<std::string>();
    read_field(ij, "dirichlet_alpha", src.dirichlet_alpha);
    read_field(ij, "clients", src.clients);
    cfg.idx = std::move(src);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    read_field(t, "rounds", cfg.train.rounds);
    read_field(t, "local_epochs", cfg.train.local_epochs);
    read_field(t, "batch_size", cfg.train.batch_size);
    read_field(t, "lr", cfg.train.lr);
    read_field(t, "momentum", cfg.train.momentum);
    read_field(t, "weight_decay", cfg.train.weight_decay);
    read_field(t, "lambda", cfg.train.lambda);
    read_field(t, "participation", cfg.train.participation);
    read_field(t, "hidden_dim", cfg.train.hidden_dim);
    read_field(t, "rep_dim", cfg.train.rep_dim);
    read_field(t, "finetune_epochs", cfg.train.finetune_epochs);
    read_field(t, "prototype_ema", cfg.train.prototype_ema);
    read_field(t, "eval_global_each_round", cfg.train.eval_global_each_round);
  }
  if (j.contains("personalize")) {
    const json& p = j.at("personalize");
    read_field(p, "epochs", cfg.personalize.epochs);
    read_field(p, "batch_size", cfg.personalize.batch_size);
    read_field(p, "lr", cfg.personalize.lr);
    read_field(p, "momentum", cfg.personalize.momentum);
    read_field(p, "weight_decay", cfg.personalize.weight_decay);
    read_field(p, "lbfgs_max_iterations", cfg.personalize.lbfgs_max_iterations);
    read_field(p, "lbfgs_cycles", cfg.personalize.lbfgs_cycles);
    read_field(p, "lbfgs_step", cfg.personalize.lbfgs_step);
    read_field(p, "lbfgs_memory", cfg.personalize.lbfgs_memory);
  }
  cfg.train.seed = cfg.seed;
  cfg.personalize.seed = cfg.seed;
  cfg.personalize.lambda = cfg.train.lambda;
  cfg.validate();
  return cfg;
}

json ExperimentConfig::to_json() const {
  json j;
  j["method"] = method_name(method);
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["dump_representations"] = dump_representations;
  j["quiet"] = quiet;
  if (scenario) j["scenario"] = scenario_to_json(*scenario);
  if (idx) {
    j["idx"] = json{{"images", idx->images},
                    {"labels", idx->labels},
                    {"dirichlet_alpha", idx->dirichlet_alpha},
                    {"clients", idx->clients}};
  }
  j["train"] = json{{"rounds", train.rounds},
                    {"local_epochs", train.local_epochs},
                    {"batch_size", train.batch_size},
                    {"lr", train.lr},
                    {"momentum", train.momentum},
                    {"weight_decay", train.weight_decay},
                    {"lambda", train.lambda},
                    {"participation", train.participation},
                    {"hidden_dim", train.hidden_dim},
                    {"rep_dim", train.rep_dim},
                    {"finetune_epochs", train.finetune_epochs},
                    {"prototype_ema", train.prototype_ema},
                    {"eval_global_each_round", train.eval_global_each_round}};
  j["personalize"] = json{{"epochs", personalize.epochs},
                          {"batch_size", personalize.batch_size},
                          {"lr", personalize.lr},
                          {"momentum", personalize.momentum},
                          {"weight_decay", personalize.weight_decay},
                          {"lbfgs_max_iterations", personalize.lbfgs_max_iterations},
                          {"lbfgs_cycles", personalize.lbfgs_cycles},
                          {"lbfgs_step", personalize.lbfgs_step},
                          {"lbfgs_memory", personalize.lbfgs_memory}};
  j["seed_lineage"] = json{
      {"master", seed},
      {"scheme", "splitmix64 derive(seed, tag, a, b)"},
      {"tags",
       json{{"mixture", tags::kMixture},
            {"client_weights", tags::kClientWeights},
            {"class_counts", tags::kClassCounts},
            {"client_data", tags::kClientData},
            {"idx_partition", tags::kIdxPartition},
            {"idx_split", tags::kIdxSplit},
            {"server_init", tags::kServerInit},
            {"select", tags::kSelect},
            {"client_train", tags::kClientTrain},
            {"local_train", tags::kLocalTrain},
            {"fine_tune", tags::kFineTune},
            {"phase2_fit", tags::kPhase2Fit}}}};
  return j;
}

std::string ExperimentConfig::run_id() const {
  return method_name(method) + "-seed" + std::to_string(seed);
}

std::pair<double, double> summarize(const std::vector<double>& per_client_acc) {
  if (per_client_acc.empty()) throw ConfigError("summarize: empty accuracy list");
  double mean = 0.0;
  for (double a : per_client_acc) mean += a;
  mean /= static_cast<double>(per_client_acc.size());
  double var = 0.0;
  for (double a : per_client_acc) var += (a - mean) * (a - mean);
  var /= static_cast<double>(per_client_acc.size());
  return {mean, std::sqrt(var)};
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<ClientDataset> build_clients(const ExperimentConfig& cfg, int* classes_out) {
  std::vector<ClientDataset> clients;
  int classes = 0;
  if (cfg.scenario) {
    clients = build_synthetic_clients(*cfg.scenario);
    classes = cfg.scenario->classes;
  } else {
    const RawDataset raw = load_idx(cfg.idx->images, cfg.idx->labels);
    classes = raw.labels.empty() ? 0 : 1 + *std::max_element(raw.labels.begin(), raw.labels.end());
    PartitionConfig part{cfg.idx->dirichlet_alpha, cfg.idx->clients, cfg.seed};
    RngStream prng = RngStream::derive(cfg.seed, tags::kIdxPartition);
    const auto assignment = dirichlet_partition(raw.labels, part, prng);
    for (int i = 0; i < cfg.idx->clients; ++i) {
      ClientDataset c;
      c.client_id = i;
      for (int idx : assignment[static_cast<size_t>(i)]) {
        c.features.push_back(raw.features[static_cast<size_t>(idx)]);
        c.labels.push_back(raw.labels[static_cast<size_t>(idx)]);
      }
      RngStream srng = RngStream::derive(cfg.seed, tags::kIdxSplit, static_cast<uint64_t>(i));
      std::tie(c.train_idx, c.test_idx) = split_train_test(c.size(), srng);
      clients.push_back(std::move(c));
    }
  }
  if (classes_out != nullptr) *classes_out = classes;
  return clients;
}

namespace {

int env_thread_count() {
  const char* env = std::getenv("PFEDGM_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

void write_rounds_csv(const std::string& path, const std::string& method,
                      const std::vector<RoundMetrics>& rounds) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << "round,method,mean_train_loss,H,R,global_test_acc\n";
  for (const auto& m : rounds) {
    out << m.round << ',' << method << ',' << format_double(m.mean_train_loss) << ','
        << format_double(m.shared) << ',' << format_double(m.personal) << ',';
    if (m.global_test_acc) out << format_double(*m.global_test_acc);
    out << '\n';
  }
}

void stream_rounds(const std::string& method, const std::vector<RoundMetrics>& rounds) {
  std::cout << "round,method,mean_train_loss,H,R,global_test_acc,wall_ms\n";
  for (const auto& m : rounds) {
    std::cout << m.round << ',' << method << ',' << format_double(m.mean_train_loss) << ','
              << format_double(m.shared) << ',' << format_double(m.personal) << ',';
    if (m.global_test_acc) std::cout << format_double(*m.global_test_acc);
    std::cout << ',' << format_double(m.wall_ms) << '\n';
  }
}

void write_clients_csv(const std::string& path, const std::vector<ClientPhase2Row>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << "client_id,n_train,n_test,acc_global,acc_personalized,train_loss_before_lbfgs,"
         "train_loss_after_lbfgs\n";
  for (const auto& r : rows) {
    out << r.client_id << ',' << r.n_train << ',' << r.n_test << ','
        << format_double(r.acc_global) << ',' << format_double(r.acc_personalized) << ','
        << format_double(r.train_loss_before_lbfgs) << ','
        << format_double(r.train_loss_after_lbfgs) << '\n';
  }
}

void dump_reps_csv(const std::string& path, const std::vector<ClientDataset>& clients,
                   const std::vector<const GeneratorParams*>& gens) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  const int d = gens.empty() ? 0 : gens[0]->output_dim();
  out << "client_id,label";
  for (int j = 0; j < d; ++j) out << ",z" << j;
  out << '\n';
  for (size_t i = 0; i < clients.size(); ++i) {
    const ClientDataset& c = clients[i];
    std::vector<Vec> x;
    x.reserve(c.train_idx.size());
    for (int idx : c.train_idx) x.push_back(c.features[static_cast<size_t>(idx)]);
    if (x.empty()) continue;
    auto [z, tape] = forward(*gens[i], x);
    (void)tape;
    for (size_t s = 0; s < z.size(); ++s) {
      out << c.client_id << ',' << c.labels[static_cast<size_t>(c.train_idx[s])];
      for (double v : z[s]) out << ',' << format_double(v);
      out << '\n';
    }
  }
}

double elapsed_ms(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ResultSummary run_experiment(const ExperimentConfig& input_cfg) {
  ExperimentConfig cfg = input_cfg;
  cfg.validate();
  const int threads = env_thread_count();
  cfg.train.threads = threads;
  cfg.personalize.threads = threads;

  ResultSummary summary;

  const auto t_data = std::chrono::steady_clock::now();
  int classes = 0;
  std::vector<ClientDataset> clients = build_clients(cfg, &classes);
  cfg.train.classes = classes;
  cfg.train.method = cfg.method;
  summary.data_ms = elapsed_ms(t_data);

  const std::filesystem::path run_dir = std::filesystem::path(cfg.out_dir) / cfg.run_id();
  std::filesystem::create_directories(run_dir);
  summary.run_dir = run_dir.string();

  {
    std::ofstream manifest(run_dir / "manifest.json");
    if (!manifest) throw ConfigError("cannot write manifest to " + run_dir.string());
    manifest << cfg.to_json().dump(2) << '\n';
  }

  const std::string method = method_name(cfg.method);
  std::vector<RoundMetrics> round_metrics;
  std::vector<ClientPhase2Row> client_rows;
  std::vector<const GeneratorParams*> eval_gens(clients.size(), nullptr);
  std::optional<ServerState> global_state;
  std::vector<ServerState> per_client_states;

  const auto t_phase1 = std::chrono::steady_clock::now();
  if (cfg.method == Method::pfedgm) {
    Phase1Result p1 = run_phase1(cfg.train, clients);
    round_metrics = std::move(p1.rounds);
    global_state = std::move(p1.state);
    for (const auto& w : p1.warnings) std::cerr << "warning: " << w << '\n';
  } else if (cfg.method == Method::fedavg || cfg.method == Method::fedavgft) {
    Phase1Result p1 = run_fedavg(cfg.train, clients);
    round_metrics = std::move(p1.rounds);
    global_state = std::move(p1.state);
    for (const auto& w : p1.warnings) std::cerr << "warning: " << w << '\n';
  } else {
    LocalResult lr = run_local(cfg.train, clients);
    round_metrics = std::move(lr.rounds);
    per_client_states = std::move(lr.states);
  }
  summary.phase1_ms = elapsed_ms(t_phase1);

  const auto t_phase2 = std::chrono::steady_clock::now();
  if (cfg.method == Method::pfedgm) {
    Phase2Result p2 = run_phase2(clients, global_state->gen, global_state->nav,
                                 global_state->bank, cfg.personalize);
    for (const auto& w : p2.warnings) std::cerr << "warning: " << w << '\n';
    client_rows = std::move(p2.rows);
    for (size_t i = 0; i < clients.size(); ++i) eval_gens[i] = &global_state->gen;
  } else if (cfg.method == Method::fedavgft) {
    per_client_states = finetune_clients(*global_state, cfg.train, clients);
    for (size_t i = 0; i < clients.size(); ++i) {
      const ClientDataset& c = clients[i];
      ClientPhase2Row row;
      row.client_id = c.client_id;
      row.n_train = c.train_size();
      row.n_test = c.test_size();
      row.acc_global = evaluate_accuracy(global_state->gen, global_state->nav,
                                         global_state->bank, c, c.test_idx);
      row.acc_personalized = evaluate_accuracy(per_client_states[i].gen, per_client_states[i].nav,
                                               per_client_states[i].bank, c, c.test_idx);
      row.train_loss_before_lbfgs = std::numeric_limits<double>::quiet_NaN();
      row.train_loss_after_lbfgs = std::numeric_limits<double>::quiet_NaN();
      client_rows.push_back(row);
      eval_gens[i] = &per_client_states[i].gen;
    }
  } else if (cfg.method == Method::fedavg) {
    for (size_t i = 0; i < clients.size(); ++i) {
      const ClientDataset& c = clients[i];
      ClientPhase2Row row;
      row.client_id = c.client_id;
      row.n_train = c.train_size();
      row.n_test = c.test_size();
      row.acc_global = evaluate_accuracy(global_state->gen, global_state->nav,
                                         global_state->bank, c, c.test_idx);
      row.acc_personalized = row.acc_global;
      row.train_loss_before_lbfgs = std::numeric_limits<double>::quiet_NaN();
      row.train_loss_after_lbfgs = std::numeric_limits<double>::quiet_NaN();
      client_rows.push_back(row);
      eval_gens[i] = &global_state->gen;
    }
  } else {
    for (size_t i = 0; i < clients.size(); ++i) {
      const ClientDataset& c = clients[i];
      ClientPhase2Row row;
      row.client_id = c.client_id;
      row.n_train = c.train_size();
      row.n_test = c.test_size();
      row.acc_global = std::numeric_limits<double>::quiet_NaN();  // no global model
      row.acc_personalized = evaluate_accuracy(per_client_states[i].gen, per_client_states[i].nav,
                                               per_client_states[i].bank, c, c.test_idx);
      row.train_loss_before_lbfgs = std::numeric_limits<double>::quiet_NaN();
      row.train_loss_after_lbfgs = std::numeric_limits<double>::quiet_NaN();
      client_rows.push_back(row);
      eval_gens[i] = &per_client_states[i].gen;
    }
  }
  summary.phase2_ms = elapsed_ms(t_phase2);

  for (const auto& row : client_rows) {
    if (row.n_test == 0) continue;
    summary.client_accuracies.push_back(row.acc_personalized);
  }
  if (summary.client_accuracies.empty()) {
    throw ConfigError("run: every client has an empty test split");
  }
  std::tie(summary.mean, summary.stddev) = summarize(summary.client_accuracies);

  write_rounds_csv((run_dir / "rounds.csv").string(), method, round_metrics);
  write_clients_csv((run_dir / "clients.csv").string(), client_rows);
  if (global_state) {
    write_checkpoint((run_dir / "checkpoint.json").string(), global_state->gen, global_state->nav,
                     global_state->bank, cfg.to_json()["seed_lineage"]);
  }
  if (cfg.dump_representations) {
    dump_reps_csv((run_dir / "reps.csv").string(), clients, eval_gens);
  }

  if (!cfg.quiet) {
    stream_rounds(method, round_metrics);
    std::cout << "method=" << method << " clients=" << clients.size()
            << " mean_acc=" << format_double(summary.mean)
            << " std_acc=" << format_double(summary.stddev)
            << " data_ms=" << format_double(summary.data_ms)
              << " phase1_ms=" << format_double(summary.phase1_ms)
              << " phase2_ms=" << format_double(summary.phase2_ms) << "\n";
  }
  return summary;
}

nlohmann::json default_experiment_json(uint64_t seed) {
  ExperimentConfig cfg;
  cfg.method = Method::pfedgm;
  cfg.seed = seed;
  cfg.scenario = default_scenario(seed);
  json j = cfg.to_json();
  j.erase("seed_lineage");
  // Leave the scenario seed implicit so --seed moves the data too.
  j["scenario"].erase("seed");
  return j;
}

}  // namespace pfedgm
