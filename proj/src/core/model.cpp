#include "core/model.hpp"

#include <cmath>
#include <fstream>

namespace pfedgm {

GeneratorGrads GeneratorGrads::zeros_like(const GeneratorParams& gen) {
  GeneratorGrads g;
  for (const Layer& layer : gen.layers) {
    g.dw.emplace_back(layer.w.size(), 0.0);
    g.db.emplace_back(layer.b.size(), 0.0);
  }
  return g;
}

std::pair<std::vector<Vec>, ForwardTape> forward(const GeneratorParams& gen,
                                                 const std::vector<Vec>& x_batch) {
  const size_t L = gen.layers.size();
  ForwardTape tape;
  tape.inputs.resize(L);
  tape.pre.resize(L);

  std::vector<Vec> current = x_batch;
  for (size_t l = 0; l < L; ++l) {
    const Layer& layer = gen.layers[l];
    tape.inputs[l] = current;
    std::vector<Vec> next(current.size());
    for (size_t s = 0; s < current.size(); ++s) {
      const Vec& in = current[s];
      if (static_cast<int>(in.size()) != layer.in) {
        throw ModelError("forward: input dimension mismatch at layer " + std::to_string(l));
      }
      Vec pre(static_cast<size_t>(layer.out));
      for (int o = 0; o < layer.out; ++o) {
        const double* wrow = layer.w.data() + static_cast<size_t>(o) * layer.in;
        double acc = layer.b[static_cast<size_t>(o)];
        for (int i = 0; i < layer.in; ++i) acc += wrow[i] * in[static_cast<size_t>(i)];
        pre[static_cast<size_t>(o)] = acc;
      }
      tape.pre[l].push_back(pre);
      if (layer.relu) {
        for (double& v : pre) v = v > 0.0 ? v : 0.0;
      }
      next[s] = std::move(pre);
    }
    current = std::move(next);
  }
  return {std::move(current), std::move(tape)};
}

GeneratorGrads backward(const GeneratorParams& gen, const ForwardTape& tape,
                        const std::vector<Vec>& dl_dz, std::vector<Vec>* dl_dx) {
  const size_t L = gen.layers.size();
  if (tape.pre.size() != L || tape.pre.empty() || tape.pre[0].size() != dl_dz.size()) {
    throw ModelError("backward: tape does not match batch");
  }
  GeneratorGrads grads = GeneratorGrads::zeros_like(gen);

  std::vector<Vec> delta = dl_dz;  // dL/d(activation of layer l)
  for (size_t li = L; li-- > 0;) {
    const Layer& layer = gen.layers[li];
    std::vector<Vec> prev_delta(delta.size(), Vec(static_cast<size_t>(layer.in), 0.0));
    for (size_t s = 0; s < delta.size(); ++s) {
      Vec dpre = delta[s];
      if (layer.relu) {
        // Subgradient at the kink taken as 0.
        const Vec& pre = tape.pre[li][s];
        for (int o = 0; o < layer.out; ++o) {
          if (pre[static_cast<size_t>(o)] <= 0.0) dpre[static_cast<size_t>(o)] = 0.0;
        }
      }
      const Vec& in = tape.inputs[li][s];
      double* dw = grads.dw[li].data();
      for (int o = 0; o < layer.out; ++o) {
        const double g = dpre[static_cast<size_t>(o)];
        grads.db[li][static_cast<size_t>(o)] += g;
        double* dwrow = dw + static_cast<size_t>(o) * layer.in;
        const double* wrow = layer.w.data() + static_cast<size_t>(o) * layer.in;
        for (int i = 0; i < layer.in; ++i) {
          dwrow[i] += g * in[static_cast<size_t>(i)];
          prev_delta[s][static_cast<size_t>(i)] += g * wrow[i];
        }
      }
    }
    delta = std::move(prev_delta);
  }
  if (dl_dx != nullptr) *dl_dx = std::move(delta);
  return grads;
}

GeneratorParams init_generator(const std::vector<int>& dims, RngStream& rng) {
  if (dims.size() < 2) throw ModelError("init_generator: need at least input and output dims");
  GeneratorParams gen;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    Layer layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.relu = (l + 2 < dims.size());  // last layer linear
    const double var = layer.relu ? 2.0 / layer.in : 1.0 / layer.in;
    const double std = std::sqrt(var);
    layer.w.resize(static_cast<size_t>(layer.in) * layer.out);
    for (double& v : layer.w) v = std * rng.next_gaussian();
    layer.b.assign(static_cast<size_t>(layer.out), 0.0);
    gen.layers.push_back(std::move(layer));
  }
  return gen;
}

Navigator init_navigator(int classes, int dim, RngStream& rng) {
  Navigator nav;
  // Scale 1/sqrt(d) keeps ||mu_k|| and hence the initial logits around 1.
  const double std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int k = 0; k < classes; ++k) {
    Vec mean(static_cast<size_t>(dim));
    for (double& v : mean) v = std * rng.next_gaussian();
    nav.means.push_back(std::move(mean));
  }
  nav.biases.assign(static_cast<size_t>(classes), 0.0);
  return nav;
}

CovarianceBank init_covariance_bank(int classes, int dim) {
  CovarianceBank bank;
  for (int k = 0; k < classes; ++k) bank.precisions.push_back(DiagMat::identity(dim));
  return bank;
}

void sgd_update(Vec& param, const Vec& grad, Vec& velocity, double lr, double momentum,
                double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ModelError("sgd_update: shape mismatch");
  }
  for (size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
    param[i] -= lr * velocity[i];
  }
}

ModelSgdState ModelSgdState::zeros_like(const GeneratorParams& gen, const Navigator& nav,
                                        const CovarianceBank& bank) {
  ModelSgdState st;
  for (const Layer& l : gen.layers) {
    st.gen_w.emplace_back(l.w.size(), 0.0);
    st.gen_b.emplace_back(l.b.size(), 0.0);
  }
  for (const Vec& m : nav.means) st.nav_means.emplace_back(m.size(), 0.0);
  st.nav_biases.assign(nav.biases.size(), 0.0);
  for (const DiagMat& a : bank.precisions) st.bank.emplace_back(a.diag.size(), 0.0);
  return st;
}

void sgd_step(GeneratorParams& gen, Navigator& nav, CovarianceBank& bank,
              const GeneratorGrads* gen_grads, const std::vector<Vec>* nav_mean_grads,
              const Vec* nav_bias_grads, const std::vector<Vec>* bank_grads,
              const SgdConfig& cfg, ModelSgdState& state) {
  if (gen_grads != nullptr) {
    for (size_t l = 0; l < gen.layers.size(); ++l) {
      sgd_update(gen.layers[l].w, gen_grads->dw[l], state.gen_w[l], cfg.lr, cfg.momentum,
                 cfg.weight_decay);
      sgd_update(gen.layers[l].b, gen_grads->db[l], state.gen_b[l], cfg.lr, cfg.momentum,
                 cfg.weight_decay);
    }
  }
  if (nav_mean_grads != nullptr) {
    for (size_t k = 0; k < nav.means.size(); ++k) {
      sgd_update(nav.means[k], (*nav_mean_grads)[k], state.nav_means[k], cfg.lr, cfg.momentum,
                 cfg.weight_decay);
    }
  }
  if (nav_bias_grads != nullptr) {
    // Biases encode class priors; no decay toward uniform.
    sgd_update(nav.biases, *nav_bias_grads, state.nav_biases, cfg.lr, cfg.momentum, 0.0);
  }
  if (bank_grads != nullptr) {
    for (size_t k = 0; k < bank.precisions.size(); ++k) {
      sgd_update(bank.precisions[k].diag, (*bank_grads)[k], state.bank[k], cfg.lr, cfg.momentum,
                 0.0);
      bank.precisions[k].project_floor();
    }
  }
}

nlohmann::json checkpoint_to_json(const GeneratorParams& gen, const Navigator& nav,
                                  const CovarianceBank& bank,
                                  const nlohmann::json& seed_lineage) {
  nlohmann::json j;
  j["input_dim"] = gen.input_dim();
  j["rep_dim"] = gen.output_dim();
  j["classes"] = nav.classes();
  for (const Layer& l : gen.layers) {
    j["layers"].push_back(nlohmann::json{
        {"in", l.in}, {"out", l.out}, {"relu", l.relu}, {"w", l.w}, {"b", l.b}});
  }
  nlohmann::json navj;
  for (const Vec& m : nav.means) navj["means"].push_back(m);
  navj["biases"] = nav.biases;
  j["navigator"] = std::move(navj);
  for (const DiagMat& a : bank.precisions) j["bank"].push_back(a.diag);
  j["seed_lineage"] = seed_lineage;
  return j;
}

void checkpoint_from_json(const nlohmann::json& j, GeneratorParams& gen, Navigator& nav,
                          CovarianceBank& bank) {
  gen = GeneratorParams{};
  for (const auto& lj : j.at("layers")) {
    Layer l;
    l.in = lj.at("in").get<int>();
    l.out = lj.at("out").get<int>();
    l.relu = lj.at("relu").get<bool>();
    l.w = lj.at("w").get<Vec>();
    l.b = lj.at("b").get<Vec>();
    if (static_cast<int>(l.w.size()) != l.in * l.out ||
        static_cast<int>(l.b.size()) != l.out) {
      throw ModelError("checkpoint: layer shape mismatch");
    }
    gen.layers.push_back(std::move(l));
  }
  nav = Navigator{};
  for (const auto& mj : j.at("navigator").at("means")) nav.means.push_back(mj.get<Vec>());
  nav.biases = j.at("navigator").at("biases").get<Vec>();
  bank = CovarianceBank{};
  for (const auto& aj : j.at("bank")) bank.precisions.emplace_back(aj.get<Vec>());
}

void write_checkpoint(const std::string& path, const GeneratorParams& gen, const Navigator& nav,
                      const CovarianceBank& bank, const nlohmann::json& seed_lineage) {
  std::ofstream out(path);
  if (!out) throw ModelError("checkpoint: cannot open " + path + " for writing");
  out << checkpoint_to_json(gen, nav, bank, seed_lineage).dump(2) << '\n';
}

void read_checkpoint(const std::string& path, GeneratorParams& gen, Navigator& nav,
                     CovarianceBank& bank) {
  std::ifstream in(path);
  if (!in) throw ModelError("checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  checkpoint_from_json(j, gen, nav, bank);
}

}  // namespace pfedgm
