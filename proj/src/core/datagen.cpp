#include "core/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace pfedgm {

void MixtureSpec::validate() const {
  if (classes < 2) throw DataError("mixture spec: need at least 2 classes");
  if (static_cast<int>(means.size()) != classes || static_cast<int>(covs.size()) != classes ||
      static_cast<int>(weights.size()) != classes) {
    throw DataError("mixture spec: per-class arrays must have length K");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (w <= 0.0 || w > 1.0) throw DataError("mixture spec: weights must lie in (0,1]");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DataError("mixture spec: weights must sum to 1");
}

std::pair<Vec, DiagMat> analytic_resample_params(const Vec& mu, const DiagMat& s,
                                                 const Vec& nu_rs, const DiagMat& omega) {
  const size_t d = mu.size();
  Vec mu_star(d);
  DiagMat s_star;
  s_star.diag.resize(d);
  for (size_t j = 0; j < d; ++j) {
    const double prec = 1.0 / s.diag[j] + 1.0 / omega.diag[j];
    s_star.diag[j] = 1.0 / prec;
    mu_star[j] = s_star.diag[j] * (mu[j] / s.diag[j] + nu_rs[j] / omega.diag[j]);
  }
  return {std::move(mu_star), std::move(s_star)};
}

std::vector<Vec> weighted_resample(const std::vector<Vec>& points, const ResampleWeight& w,
                                   int n_out, RngStream& rng) {
  if (points.empty()) throw DataError("weighted_resample: empty input set");
  const size_t n = points.size();

  // Unnormalized log densities; additive constants cancel after normalization.
  Vec logw(n);
  double max_logw = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    double q = 0.0;
    for (size_t j = 0; j < w.center.size(); ++j) {
      const double diff = points[i][j] - w.center[j];
      q += diff * diff / w.cov.diag[j];
    }
    logw[i] = -0.5 * q;
    max_logw = std::max(max_logw, logw[i]);
  }
  if (!std::isfinite(max_logw)) {
    throw DataError("weighted_resample: degenerate weights (all points in the far tail)");
  }

  Vec cumulative(n);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    acc += std::exp(logw[i] - max_logw);
    cumulative[i] = acc;
  }

  std::vector<Vec> out;
  out.reserve(static_cast<size_t>(n_out));
  for (int k = 0; k < n_out; ++k) {
    const double u = rng.next_double() * acc;
    const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), u);
    size_t idx = static_cast<size_t>(it - cumulative.begin());
    if (idx >= n) idx = n - 1;
    out.push_back(points[idx]);
  }
  return out;
}

std::pair<std::vector<int>, std::vector<int>> split_train_test(int n, RngStream& rng) {
  std::vector<int> order = rng.permutation(n);
  const int n_train = static_cast<int>(std::lround(0.8 * n));
  std::vector<int> train(order.begin(), order.begin() + n_train);
  std::vector<int> test(order.begin() + n_train, order.end());
  return {std::move(train), std::move(test)};
}

ClientDataset generate_client_dataset(const MixtureSpec& spec,
                                      const std::map<int, ResampleWeight>& per_class_weights,
                                      const std::map<int, int>& class_counts, int client_id,
                                      RngStream& rng) {
  spec.validate();
  int total = 0;
  for (const auto& [cls, count] : class_counts) {
    if (cls < 0 || cls >= spec.classes) throw DataError("class count for unknown class");
    total += count;
  }
  if (total <= 0) throw DataError("generate_client_dataset: zero total sample count");

  ClientDataset out;
  out.client_id = client_id;
  out.features.reserve(static_cast<size_t>(total));
  out.labels.reserve(static_cast<size_t>(total));

  for (const auto& [cls, count] : class_counts) {
    if (count <= 0) continue;
    // Finite-N bootstrap pool, large enough to stand in for the N->inf limit.
    const int pool_size = std::max(20 * count, 10000);
    std::vector<Vec> pool;
    pool.reserve(static_cast<size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i) {
      pool.push_back(sample_gaussian(spec.means[static_cast<size_t>(cls)],
                                     spec.covs[static_cast<size_t>(cls)], rng));
    }
    const auto wit = per_class_weights.find(cls);
    std::vector<Vec> drawn;
    if (wit == per_class_weights.end()) {
      // No re-sampling weight for this class: plain draws from the component.
      drawn.assign(pool.begin(), pool.begin() + count);
    } else {
      drawn = weighted_resample(pool, wit->second, count, rng);
    }
    for (auto& z : drawn) {
      out.features.push_back(std::move(z));
      out.labels.push_back(cls);
    }
  }

  // Shuffle features/labels jointly, then split.
  const std::vector<int> order = rng.permutation(out.size());
  std::vector<Vec> shuffled_x(out.features.size());
  std::vector<int> shuffled_y(out.labels.size());
  for (size_t i = 0; i < order.size(); ++i) {
    shuffled_x[i] = std::move(out.features[static_cast<size_t>(order[i])]);
    shuffled_y[i] = out.labels[static_cast<size_t>(order[i])];
  }
  out.features = std::move(shuffled_x);
  out.labels = std::move(shuffled_y);
  std::tie(out.train_idx, out.test_idx) = split_train_test(out.size(), rng);
  return out;
}

double gamma_draw(RngStream& rng, double alpha) {
  if (alpha < 1.0) {
    // Boost to shape alpha+1, then scale by U^{1/alpha}.
    return gamma_draw(rng, alpha + 1.0) * std::pow(rng.next_double_open(), 1.0 / alpha);
  }
  // Marsaglia-Tsang squeeze.
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / (3.0 * std::sqrt(d));
  for (;;) {
    double x, v;
    do {
      x = rng.next_gaussian();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.next_double_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

Vec dirichlet_draw(RngStream& rng, double alpha, int n) {
  Vec out(static_cast<size_t>(n));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = gamma_draw(rng, alpha);
    sum += out[static_cast<size_t>(i)];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<int> proportional_counts(const Vec& proportions, int total) {
  const size_t n = proportions.size();
  std::vector<int> counts(n);
  std::vector<std::pair<double, size_t>> remainders(n);
  int assigned = 0;
  for (size_t i = 0; i < n; ++i) {
    const double exact = proportions[i] * total;
    counts[i] = static_cast<int>(std::floor(exact));
    remainders[i] = {exact - std::floor(exact), i};
    assigned += counts[i];
  }
  // Hand out the remainder by largest fractional part; ties resolve to the
  // lower index so the result is deterministic.
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int r = 0; r < total - assigned; ++r) {
    counts[remainders[static_cast<size_t>(r)].second] += 1;
  }
  return counts;
}

std::vector<std::vector<int>> dirichlet_partition(const std::vector<int>& labels,
                                                  const PartitionConfig& cfg, RngStream& rng) {
  if (labels.empty()) throw DataError("dirichlet_partition: empty label list");
  if (cfg.alpha <= 0.0) throw DataError("dirichlet_partition: alpha must be positive");
  if (cfg.clients < 1) throw DataError("dirichlet_partition: need at least one client");

  const int num_classes = 1 + *std::max_element(labels.begin(), labels.end());
  std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
  }

  constexpr int kMaxRetries = 100;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    std::vector<std::vector<int>> assignment(static_cast<size_t>(cfg.clients));
    for (int k = 0; k < num_classes; ++k) {
      auto& members = by_class[static_cast<size_t>(k)];
      if (members.empty()) continue;
      const std::vector<int> order = rng.permutation(static_cast<int>(members.size()));
      const Vec props = dirichlet_draw(rng, cfg.alpha, cfg.clients);
      const std::vector<int> counts = proportional_counts(props, static_cast<int>(members.size()));
      int cursor = 0;
      for (int m = 0; m < cfg.clients; ++m) {
        for (int c = 0; c < counts[static_cast<size_t>(m)]; ++c) {
          assignment[static_cast<size_t>(m)].push_back(
              members[static_cast<size_t>(order[static_cast<size_t>(cursor++)])]);
        }
      }
    }
    const bool any_empty = std::any_of(assignment.begin(), assignment.end(),
                                       [](const auto& v) { return v.empty(); });
    if (!any_empty) return assignment;
  }
  throw DataError("dirichlet_partition: retry cap exceeded, partition infeasible");
}

namespace {

uint32_t read_be32(std::istream& in, const std::string& path, long offset) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) {
    throw DataError("idx: truncated file " + path + " at offset " + std::to_string(offset));
  }
  return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
         (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

}  // namespace

RawDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("idx: cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("idx: cannot open " + labels_path);

  const uint32_t img_magic = read_be32(img, images_path, 0);
  if (img_magic != 0x00000803u) {
    throw DataError("idx: bad image magic at offset 0 in " + images_path);
  }
  const uint32_t n_images = read_be32(img, images_path, 4);
  const uint32_t rows = read_be32(img, images_path, 8);
  const uint32_t cols = read_be32(img, images_path, 12);

  const uint32_t lab_magic = read_be32(lab, labels_path, 0);
  if (lab_magic != 0x00000801u) {
    throw DataError("idx: bad label magic at offset 0 in " + labels_path);
  }
  const uint32_t n_labels = read_be32(lab, labels_path, 4);
  if (n_images != n_labels) {
    throw DataError("idx: image/label count mismatch at offset 4 (" + std::to_string(n_images) +
                    " images vs " + std::to_string(n_labels) + " labels)");
  }

  RawDataset out;
  out.rows = static_cast<int>(rows);
  out.cols = static_cast<int>(cols);
  const size_t dim = static_cast<size_t>(rows) * cols;
  out.features.reserve(n_images);
  out.labels.reserve(n_images);

  std::vector<unsigned char> pixel(dim);
  for (uint32_t i = 0; i < n_images; ++i) {
    img.read(reinterpret_cast<char*>(pixel.data()), static_cast<std::streamsize>(dim));
    if (!img) {
      throw DataError("idx: truncated pixel data at offset " +
                      std::to_string(16 + static_cast<long>(i) * static_cast<long>(dim)) + " in " +
                      images_path);
    }
    Vec x(dim);
    for (size_t j = 0; j < dim; ++j) x[j] = pixel[j] / 255.0;
    out.features.push_back(std::move(x));

    char y;
    lab.read(&y, 1);
    if (!lab) {
      throw DataError("idx: truncated label data at offset " + std::to_string(8 + i) + " in " +
                      labels_path);
    }
    out.labels.push_back(static_cast<unsigned char>(y));
  }
  return out;
}

}  // namespace pfedgm
