#include "core/scenario.hpp"

#include <algorithm>
#include <cmath>

#include "core/seeds.hpp"

namespace pfedgm {

using nlohmann::json;

void ScenarioConfig::validate() const {
  if (classes < 2) throw DataError("scenario.classes: must be >= 2");
  if (input_dim < 1) throw DataError("scenario.input_dim: must be >= 1");
  if (clients < 1) throw DataError("scenario.clients: must be >= 1");
  if (samples_per_client < 1) throw DataError("scenario.samples_per_client: must be >= 1");
  if (dirichlet_alpha <= 0.0) throw DataError("scenario.dirichlet_alpha: must be > 0");
  if (tau < 0.0) throw DataError("scenario.tau: must be >= 0");
  if (omega <= 0.0) throw DataError("scenario.omega: must be > 0");
  if (feature_var <= 0.0) throw DataError("scenario.feature_var: must be > 0");
  if (mixture) mixture->validate();
  if (client_weights) {
    if (static_cast<int>(client_weights->size()) != clients) {
      throw DataError("scenario.client_weights: need one entry per client");
    }
    for (const auto& per_class : *client_weights) {
      if (static_cast<int>(per_class.size()) != classes) {
        throw DataError("scenario.client_weights: need one weight per class");
      }
    }
  }
}

namespace {

Vec json_to_vec(const json& j, const std::string& path) {
  if (!j.is_array()) throw DataError(path + ": expected array of numbers");
  Vec out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw DataError(path + ": expected array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

ScenarioConfig scenario_from_json(const json& j) {
  ScenarioConfig s;
  if (j.contains("name")) s.name = j.at("name").get<std::string>();
  if (j.contains("classes")) s.classes = j.at("classes").get<int>();
  if (j.contains("input_dim")) s.input_dim = j.at("input_dim").get<int>();
  if (j.contains("clients")) s.clients = j.at("clients").get<int>();
  if (j.contains("samples_per_client"))
    s.samples_per_client = j.at("samples_per_client").get<int>();
  if (j.contains("dirichlet_alpha")) s.dirichlet_alpha = j.at("dirichlet_alpha").get<double>();
  if (j.contains("tau")) s.tau = j.at("tau").get<double>();
  if (j.contains("omega")) s.omega = j.at("omega").get<double>();
  if (j.contains("class_separation")) s.class_separation = j.at("class_separation").get<double>();
  if (j.contains("feature_var")) s.feature_var = j.at("feature_var").get<double>();
  if (j.contains("min_client_samples"))
    s.min_client_samples = j.at("min_client_samples").get<int>();
  if (j.contains("seed")) s.seed = j.at("seed").get<uint64_t>();

  if (j.contains("mixture")) {
    const json& m = j.at("mixture");
    MixtureSpec spec;
    spec.weights = json_to_vec(m.at("weights"), "scenario.mixture.weights");
    spec.classes = static_cast<int>(spec.weights.size());
    for (const auto& mean : m.at("means")) {
      spec.means.push_back(json_to_vec(mean, "scenario.mixture.means"));
    }
    for (const auto& cov : m.at("covs")) {
      spec.covs.emplace_back(json_to_vec(cov, "scenario.mixture.covs"));
    }
    s.mixture = std::move(spec);
  }
  if (j.contains("client_weights")) {
    std::vector<std::vector<ResampleWeight>> all;
    for (const auto& per_client : j.at("client_weights")) {
      std::vector<ResampleWeight> row;
      for (const auto& w : per_client) {
        ResampleWeight rw;
        rw.center = json_to_vec(w.at("center"), "scenario.client_weights.center");
        rw.cov = DiagMat(json_to_vec(w.at("cov"), "scenario.client_weights.cov"));
        row.push_back(std::move(rw));
      }
      all.push_back(std::move(row));
    }
    s.client_weights = std::move(all);
  }
  s.validate();
  return s;
}

json scenario_to_json(const ScenarioConfig& s) {
  json j{{"name", s.name},
         {"classes", s.classes},
         {"input_dim", s.input_dim},
         {"clients", s.clients},
         {"samples_per_client", s.samples_per_client},
         {"dirichlet_alpha", s.dirichlet_alpha},
         {"tau", s.tau},
         {"omega", s.omega},
         {"class_separation", s.class_separation},
         {"feature_var", s.feature_var},
         {"min_client_samples", s.min_client_samples},
         {"seed", s.seed}};
  if (s.mixture) {
    json m;
    m["weights"] = s.mixture->weights;
    for (const auto& mean : s.mixture->means) m["means"].push_back(mean);
    for (const auto& cov : s.mixture->covs) m["covs"].push_back(cov.diag);
    j["mixture"] = std::move(m);
  }
  if (s.client_weights) {
    json all = json::array();
    for (const auto& per_client : *s.client_weights) {
      json row = json::array();
      for (const auto& w : per_client) {
        row.push_back(json{{"center", w.center}, {"cov", w.cov.diag}});
      }
      all.push_back(std::move(row));
    }
    j["client_weights"] = std::move(all);
  }
  return j;
}

ScenarioConfig default_scenario(uint64_t seed) {
  ScenarioConfig s;
  s.seed = seed;
  return s;
}

MixtureSpec resolve_mixture(const ScenarioConfig& s) {
  if (s.mixture) return *s.mixture;
  MixtureSpec spec;
  spec.classes = s.classes;
  RngStream rng = RngStream::derive(s.seed, tags::kMixture);
  for (int k = 0; k < s.classes; ++k) {
    Vec mean(static_cast<size_t>(s.input_dim));
    for (double& v : mean) v = s.class_separation * rng.next_gaussian();
    spec.means.push_back(std::move(mean));
    spec.covs.push_back(DiagMat::constant(s.input_dim, s.feature_var));
  }
  spec.weights = Vec(static_cast<size_t>(s.classes), 1.0 / s.classes);
  return spec;
}

std::vector<ClientDataset> build_synthetic_clients(const ScenarioConfig& s) {
  s.validate();
  const MixtureSpec spec = resolve_mixture(s);

  // Per-client, per-class re-sampling weights.
  std::vector<std::vector<ResampleWeight>> weights;
  if (s.client_weights) {
    weights = *s.client_weights;
  } else {
    RngStream rng = RngStream::derive(s.seed, tags::kClientWeights);
    weights.resize(static_cast<size_t>(s.clients));
    for (int i = 0; i < s.clients; ++i) {
      for (int k = 0; k < s.classes; ++k) {
        ResampleWeight w;
        w.center = spec.means[static_cast<size_t>(k)];
        for (double& v : w.center) v += s.tau * rng.next_gaussian();
        w.cov = DiagMat::constant(s.input_dim, s.omega);
        weights[static_cast<size_t>(i)].push_back(std::move(w));
      }
    }
  }

  // Per-class totals from the mixture weights, skewed across clients by
  // Dirichlet draws. Whole allocation is re-drawn if a client lands under the
  // configured floor.
  const int total = s.clients * s.samples_per_client;
  const std::vector<int> class_totals = proportional_counts(spec.weights, total);
  RngStream alloc_rng = RngStream::derive(s.seed, tags::kClassCounts);
  std::vector<std::vector<int>> counts;  // [client][class]
  constexpr int kMaxRetries = 100;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= kMaxRetries) {
      throw DataError("scenario: could not allocate min_client_samples to every client");
    }
    counts.assign(static_cast<size_t>(s.clients), std::vector<int>(static_cast<size_t>(s.classes), 0));
    for (int k = 0; k < s.classes; ++k) {
      const Vec props = dirichlet_draw(alloc_rng, s.dirichlet_alpha, s.clients);
      const std::vector<int> per_client =
          proportional_counts(props, class_totals[static_cast<size_t>(k)]);
      for (int i = 0; i < s.clients; ++i) {
        counts[static_cast<size_t>(i)][static_cast<size_t>(k)] = per_client[static_cast<size_t>(i)];
      }
    }
    bool ok = true;
    for (int i = 0; i < s.clients; ++i) {
      const auto& row = counts[static_cast<size_t>(i)];
      if (std::accumulate(row.begin(), row.end(), 0) < s.min_client_samples) {
        ok = false;
        break;
      }
    }
    if (ok) break;
  }

  std::vector<ClientDataset> clients;
  clients.reserve(static_cast<size_t>(s.clients));
  for (int i = 0; i < s.clients; ++i) {
    std::map<int, ResampleWeight> per_class_weights;
    std::map<int, int> class_counts;
    for (int k = 0; k < s.classes; ++k) {
      const int c = counts[static_cast<size_t>(i)][static_cast<size_t>(k)];
      if (c <= 0) continue;
      class_counts[k] = c;
      per_class_weights[k] = weights[static_cast<size_t>(i)][static_cast<size_t>(k)];
    }
    RngStream rng = RngStream::derive(s.seed, tags::kClientData, static_cast<uint64_t>(i));
    clients.push_back(generate_client_dataset(spec, per_class_weights, class_counts, i, rng));
  }
  return clients;
}

}  // namespace pfedgm
