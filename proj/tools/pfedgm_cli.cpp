// Experiment driver over the pfedgm C API.
#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"

#include "pfedgm.h"

namespace {

int cmd_run(const std::string& config_path, const std::string& method, bool has_seed,
            uint64_t seed, const std::string& out_dir) {
  pfedgm_experiment* exp = nullptr;
  if (pfedgm_experiment_from_file(config_path.c_str(), &exp) != PFEDGM_OK) {
    std::fprintf(stderr, "error: %s\n", pfedgm_last_error());
    return 1;
  }
  if (!method.empty() && pfedgm_experiment_set_method(exp, method.c_str()) != PFEDGM_OK) {
    std::fprintf(stderr, "error: %s\n", pfedgm_last_error());
    pfedgm_experiment_free(exp);
    return 1;
  }
  if (has_seed) pfedgm_experiment_set_seed(exp, seed);
  if (!out_dir.empty()) pfedgm_experiment_set_output_dir(exp, out_dir.c_str());

  pfedgm_result* res = nullptr;
  const pfedgm_status st = pfedgm_experiment_run(exp, &res);
  pfedgm_experiment_free(exp);
  if (st != PFEDGM_OK) {
    std::fprintf(stderr, "error: %s\n", pfedgm_last_error());
    return 1;
  }
  std::printf("mean accuracy %.4f (std %.4f) over %d clients\n", pfedgm_result_mean_accuracy(res),
              pfedgm_result_std_accuracy(res), pfedgm_result_client_count(res));
  std::printf("artifacts: %s\n", pfedgm_result_output_dir(res));
  pfedgm_result_free(res);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfedgm: personalized federated learning simulation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string method;
  uint64_t seed = 0;
  bool has_seed = false;
  std::string out_dir;
  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--method", method, "override: pfedgm | fedavg | fedavgft | local");
  run->add_option("--seed", seed, "override the master seed")->each([&](const std::string&) {
    has_seed = true;
  });
  run->add_option("--out", out_dir, "override the output directory");

  std::string gen_path = "scenario.json";
  uint64_t gen_seed = 1234;
  auto* gen = app.add_subcommand("gen-scenario", "write the default synthetic scenario config");
  gen->add_option("--out", gen_path, "output path");
  gen->add_option("--seed", gen_seed, "scenario seed");

  bool verbose = false;
  auto* selftest = app.add_subcommand("selftest", "run the built-in oracle checks");
  selftest->add_flag("--verbose", verbose, "print details for failures");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(config_path, method, has_seed, seed, out_dir);
  if (gen->parsed()) {
    if (pfedgm_write_default_config(gen_path.c_str(), gen_seed) != PFEDGM_OK) {
      std::fprintf(stderr, "error: %s\n", pfedgm_last_error());
      return 1;
    }
    std::printf("wrote %s\n", gen_path.c_str());
    return 0;
  }
  if (selftest->parsed()) return pfedgm_selftest(verbose ? 1 : 0) == 0 ? 0 : 1;
  return 1;
}
