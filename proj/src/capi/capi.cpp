#include "pfedgm.h"

#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

#include "core/experiment.hpp"

namespace {

thread_local std::string g_last_error = "";

pfedgm_status fail(pfedgm_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

}  // namespace

struct pfedgm_experiment {
  nlohmann::json config;
};

struct pfedgm_result {
  pfedgm::ResultSummary summary;
};

extern "C" {

const char* pfedgm_version(void) { return "1.0.0"; }

const char* pfedgm_last_error(void) { return g_last_error.c_str(); }

pfedgm_status pfedgm_experiment_from_file(const char* path, pfedgm_experiment** out) {
  if (path == nullptr || out == nullptr) {
    return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  }
  *out = nullptr;
  std::ifstream in(path);
  if (!in) return fail(PFEDGM_ERR_IO, std::string("cannot open ") + path);
  nlohmann::json j;
  try {
    in >> j;
    pfedgm::ExperimentConfig::from_json(j);  // validate eagerly
  } catch (const pfedgm::ConfigError& e) {
    return fail(PFEDGM_ERR_CONFIG, e.what());
  } catch (const std::exception& e) {
    return fail(PFEDGM_ERR_CONFIG, std::string("config parse error: ") + e.what());
  }
  *out = new pfedgm_experiment{std::move(j)};
  return PFEDGM_OK;
}

pfedgm_status pfedgm_experiment_from_json(const char* json_text, pfedgm_experiment** out) {
  if (json_text == nullptr || out == nullptr) {
    return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  }
  *out = nullptr;
  try {
    nlohmann::json j = nlohmann::json::parse(json_text);
    pfedgm::ExperimentConfig::from_json(j);
    *out = new pfedgm_experiment{std::move(j)};
  } catch (const pfedgm::ConfigError& e) {
    return fail(PFEDGM_ERR_CONFIG, e.what());
  } catch (const std::exception& e) {
    return fail(PFEDGM_ERR_CONFIG, std::string("config parse error: ") + e.what());
  }
  return PFEDGM_OK;
}

pfedgm_status pfedgm_experiment_set_method(pfedgm_experiment* exp, const char* method) {
  if (exp == nullptr || method == nullptr) {
    return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  }
  if (!pfedgm::method_from_name(method)) {
    return fail(PFEDGM_ERR_CONFIG,
                std::string("method: must be one of pfedgm, fedavg, fedavgft, local (got ") +
                    method + ")");
  }
  exp->config["method"] = method;
  return PFEDGM_OK;
}

pfedgm_status pfedgm_experiment_set_seed(pfedgm_experiment* exp, uint64_t seed) {
  if (exp == nullptr) return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  exp->config["seed"] = seed;
  return PFEDGM_OK;
}

pfedgm_status pfedgm_experiment_set_output_dir(pfedgm_experiment* exp, const char* dir) {
  if (exp == nullptr || dir == nullptr) return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  exp->config["out_dir"] = dir;
  return PFEDGM_OK;
}

void pfedgm_experiment_free(pfedgm_experiment* exp) { delete exp; }

pfedgm_status pfedgm_experiment_run(pfedgm_experiment* exp, pfedgm_result** out) {
  if (exp == nullptr || out == nullptr) return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  *out = nullptr;
  try {
    const auto cfg = pfedgm::ExperimentConfig::from_json(exp->config);
    auto summary = pfedgm::run_experiment(cfg);
    *out = new pfedgm_result{std::move(summary)};
  } catch (const pfedgm::ConfigError& e) {
    return fail(PFEDGM_ERR_CONFIG, e.what());
  } catch (const pfedgm::DataError& e) {
    return fail(PFEDGM_ERR_RUNTIME, e.what());
  } catch (const std::exception& e) {
    return fail(PFEDGM_ERR_RUNTIME, e.what());
  }
  return PFEDGM_OK;
}

int pfedgm_result_client_count(const pfedgm_result* res) {
  return res == nullptr ? 0 : static_cast<int>(res->summary.client_accuracies.size());
}

double pfedgm_result_mean_accuracy(const pfedgm_result* res) {
  return res == nullptr ? std::nan("") : res->summary.mean;
}

double pfedgm_result_std_accuracy(const pfedgm_result* res) {
  return res == nullptr ? std::nan("") : res->summary.stddev;
}

double pfedgm_result_client_accuracy(const pfedgm_result* res, int idx) {
  if (res == nullptr || idx < 0 ||
      idx >= static_cast<int>(res->summary.client_accuracies.size())) {
    return std::nan("");
  }
  return res->summary.client_accuracies[static_cast<size_t>(idx)];
}

const char* pfedgm_result_output_dir(const pfedgm_result* res) {
  return res == nullptr ? "" : res->summary.run_dir.c_str();
}

void pfedgm_result_free(pfedgm_result* res) { delete res; }

pfedgm_status pfedgm_write_default_config(const char* path, uint64_t seed) {
  if (path == nullptr) return fail(PFEDGM_ERR_INVALID_ARG, "null argument");
  std::ofstream out(path);
  if (!out) return fail(PFEDGM_ERR_IO, std::string("cannot open ") + path + " for writing");
  out << pfedgm::default_experiment_json(seed).dump(2) << '\n';
  return out ? PFEDGM_OK : fail(PFEDGM_ERR_IO, std::string("write failed for ") + path);
}

int pfedgm_selftest(int verbose) { return pfedgm::run_selftest(verbose != 0); }

}  // extern "C"
