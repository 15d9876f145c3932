#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "doctest.h"

#include "core/datagen.hpp"
#include "core/scenario.hpp"

using namespace pfedgm;

namespace {

// Empirical mean and per-coordinate variance.
std::pair<Vec, Vec> sample_moments(const std::vector<Vec>& pts) {
  const size_t d = pts[0].size();
  Vec mean(d, 0.0), var(d, 0.0);
  for (const auto& p : pts) {
    for (size_t j = 0; j < d; ++j) mean[j] += p[j];
  }
  for (double& m : mean) m /= static_cast<double>(pts.size());
  for (const auto& p : pts) {
    for (size_t j = 0; j < d; ++j) {
      const double dlt = p[j] - mean[j];
      var[j] += dlt * dlt;
    }
  }
  for (double& v : var) v /= static_cast<double>(pts.size());
  return {mean, var};
}

}  // namespace

TEST_CASE("analytic_resample_params: symmetric product of identical gaussians") {
  const Vec mu(3, 0.0);
  const DiagMat s = DiagMat::identity(3);
  auto [mu_star, s_star] = analytic_resample_params(mu, s, mu, s);
  for (int j = 0; j < 3; ++j) {
    CHECK(s_star[j] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(mu_star[static_cast<size_t>(j)] == 0.0);
  }
}

TEST_CASE("analytic_resample_params: 1-D equal-precision average") {
  auto [mu_star, s_star] = analytic_resample_params(Vec{2.0}, DiagMat{Vec{1.0}}, Vec{0.0},
                                                    DiagMat{Vec{1.0}});
  CHECK(mu_star[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s_star[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("analytic_resample_params: precision additivity property") {
  RngStream rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + static_cast<int>(rng.uniform_int(8));
    Vec mu(static_cast<size_t>(d)), nu(static_cast<size_t>(d));
    DiagMat s, omega;
    s.diag.resize(static_cast<size_t>(d));
    omega.diag.resize(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) {
      mu[static_cast<size_t>(j)] = rng.next_gaussian();
      nu[static_cast<size_t>(j)] = rng.next_gaussian();
      s.diag[static_cast<size_t>(j)] = 0.1 + 3.0 * rng.next_double();
      omega.diag[static_cast<size_t>(j)] = 0.1 + 3.0 * rng.next_double();
    }
    auto [mu_star, s_star] = analytic_resample_params(mu, s, nu, omega);
    for (int j = 0; j < d; ++j) {
      const double lhs = 1.0 / s_star[j];
      const double rhs = 1.0 / s[j] + 1.0 / omega[j];
      CHECK(std::abs(lhs - rhs) <= 1e-12 * std::abs(rhs));
    }
  }
}

TEST_CASE("weighted_resample: flat weights select uniformly") {
  RngStream rng(7);
  const int n_points = 20;
  std::vector<Vec> points;
  for (int i = 0; i < n_points; ++i) points.push_back(Vec{static_cast<double>(i)});
  ResampleWeight w;
  w.center = Vec{0.0};
  w.cov = DiagMat{Vec{1e12}};  // flat limit
  const int draws = 100000;
  const auto out = weighted_resample(points, w, draws, rng);
  std::vector<int> freq(n_points, 0);
  for (const auto& p : out) freq[static_cast<size_t>(p[0])] += 1;
  const double p = 1.0 / n_points;
  const double sigma = std::sqrt(draws * p * (1.0 - p));
  for (int i = 0; i < n_points; ++i) {
    CHECK(std::abs(freq[static_cast<size_t>(i)] - draws * p) <= 3.0 * sigma);
  }
}

TEST_CASE("weighted_resample: single point input") {
  RngStream rng(1);
  const std::vector<Vec> points{Vec{3.0, 4.0}};
  ResampleWeight w{Vec{0.0, 0.0}, DiagMat::identity(2)};
  const auto out = weighted_resample(points, w, 50, rng);
  for (const auto& p : out) CHECK(p == points[0]);
}

TEST_CASE("weighted_resample: degenerate weights error") {
  RngStream rng(1);
  // Quadratic forms overflow to infinity for every point.
  const std::vector<Vec> points{Vec{1e200}, Vec{-1e200}};
  ResampleWeight w{Vec{0.0}, DiagMat{Vec{1e-6}}};
  CHECK_THROWS_AS(weighted_resample(points, w, 10, rng), DataError);
  CHECK_THROWS_AS(weighted_resample({}, w, 10, rng), DataError);
}

TEST_CASE("weighted_resample: bootstrap matches the closed form") {
  RngStream rng(12345);
  const Vec mu{0.7, -0.3};
  const DiagMat s{Vec{1.5, 0.8}};
  const Vec nu{-0.5, 0.9};
  const DiagMat omega{Vec{0.9, 2.0}};
  auto [mu_star, s_star] = analytic_resample_params(mu, s, nu, omega);

  std::vector<Vec> pool;
  pool.reserve(200000);
  for (int i = 0; i < 200000; ++i) pool.push_back(sample_gaussian(mu, s, rng));
  const auto drawn = weighted_resample(pool, ResampleWeight{nu, omega}, 100000, rng);
  auto [m, v] = sample_moments(drawn);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(m[static_cast<size_t>(j)] - mu_star[static_cast<size_t>(j)]) < 0.02);
    CHECK(std::abs(v[static_cast<size_t>(j)] - s_star[j]) < 0.02);
  }
}

namespace {

MixtureSpec two_class_spec() {
  MixtureSpec spec;
  spec.classes = 2;
  spec.means = {Vec{0.0, 0.0}, Vec{5.0, 5.0}};
  spec.covs = {DiagMat::identity(2), DiagMat::identity(2)};
  spec.weights = Vec{0.5, 0.5};
  return spec;
}

}  // namespace

TEST_CASE("generate_client_dataset: identical seeds give identical datasets") {
  const MixtureSpec spec = two_class_spec();
  std::map<int, ResampleWeight> w{{0, {Vec{0.0, 0.0}, DiagMat::identity(2)}},
                                  {1, {Vec{5.0, 5.0}, DiagMat::identity(2)}}};
  std::map<int, int> counts{{0, 30}, {1, 20}};
  RngStream a = RngStream::derive(9, 1);
  RngStream b = RngStream::derive(9, 1);
  const ClientDataset d1 = generate_client_dataset(spec, w, counts, 0, a);
  const ClientDataset d2 = generate_client_dataset(spec, w, counts, 0, b);
  REQUIRE(d1.size() == d2.size());
  CHECK(d1.features == d2.features);
  CHECK(d1.labels == d2.labels);
  CHECK(d1.train_idx == d2.train_idx);
}

TEST_CASE("generate_client_dataset: zero count for a class leaves it absent") {
  const MixtureSpec spec = two_class_spec();
  std::map<int, ResampleWeight> w{{0, {Vec{0.0, 0.0}, DiagMat::identity(2)}}};
  std::map<int, int> counts{{0, 25}, {1, 0}};
  RngStream rng(4);
  const ClientDataset d = generate_client_dataset(spec, w, counts, 3, rng);
  CHECK(d.size() == 25);
  for (int y : d.labels) CHECK(y == 0);
  CHECK(d.client_id == 3);
}

TEST_CASE("generate_client_dataset: split sizes and disjointness") {
  const MixtureSpec spec = two_class_spec();
  std::map<int, ResampleWeight> w;
  for (int total : {10, 47, 103}) {
    std::map<int, int> counts{{0, total / 2}, {1, total - total / 2}};
    RngStream rng(static_cast<uint64_t>(total));
    const ClientDataset d = generate_client_dataset(spec, w, counts, 0, rng);
    CHECK(d.train_size() == static_cast<int>(std::lround(0.8 * total)));
    CHECK(d.train_size() + d.test_size() == total);
    std::set<int> seen(d.train_idx.begin(), d.train_idx.end());
    for (int i : d.test_idx) CHECK(seen.insert(i).second);
    CHECK(static_cast<int>(seen.size()) == total);
  }
}

TEST_CASE("generate_client_dataset: zero total count errors") {
  const MixtureSpec spec = two_class_spec();
  RngStream rng(4);
  CHECK_THROWS_AS(generate_client_dataset(spec, {}, {{0, 0}}, 0, rng), DataError);
}

TEST_CASE("generate_client_dataset: displaced re-sampling centers move class means") {
  // nu_rs displaced by +/- delta: the class-0 means should differ by about the
  // displacement between the corresponding analytic mu* values.
  MixtureSpec spec = two_class_spec();
  spec.means = {Vec{0.0, 0.0}, Vec{40.0, 40.0}};
  const double delta = 1.0;
  const DiagMat omega = DiagMat::identity(2);
  std::map<int, ResampleWeight> w_plus{{0, {Vec{delta, 0.0}, omega}}};
  std::map<int, ResampleWeight> w_minus{{0, {Vec{-delta, 0.0}, omega}}};
  std::map<int, int> counts{{0, 5000}, {1, 10}};

  RngStream ra = RngStream::derive(77, 1);
  RngStream rb = RngStream::derive(77, 2);
  const ClientDataset da = generate_client_dataset(spec, w_plus, counts, 0, ra);
  const ClientDataset db = generate_client_dataset(spec, w_minus, counts, 1, rb);

  auto class0_mean = [](const ClientDataset& d) {
    Vec m(2, 0.0);
    int n = 0;
    for (int i = 0; i < d.size(); ++i) {
      if (d.labels[static_cast<size_t>(i)] != 0) continue;
      for (int j = 0; j < 2; ++j) {
        m[static_cast<size_t>(j)] += d.features[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
      ++n;
    }
    for (double& v : m) v /= n;
    return m;
  };
  const Vec ma = class0_mean(da);
  const Vec mb = class0_mean(db);

  auto [mu_plus, s1] = analytic_resample_params(spec.means[0], spec.covs[0], Vec{delta, 0.0}, omega);
  auto [mu_minus, s2] =
      analytic_resample_params(spec.means[0], spec.covs[0], Vec{-delta, 0.0}, omega);
  CHECK(std::abs((ma[0] - mb[0]) - (mu_plus[0] - mu_minus[0])) < 0.05);
  CHECK(std::abs((ma[1] - mb[1]) - (mu_plus[1] - mu_minus[1])) < 0.05);
}

TEST_CASE("dirichlet_partition: concentration limit is balanced") {
  std::vector<int> labels;
  for (int k = 0; k < 4; ++k) {
    for (int i = 0; i < 1000; ++i) labels.push_back(k);
  }
  RngStream rng(5);
  const auto parts = dirichlet_partition(labels, {1e6, 5, 0}, rng);
  REQUIRE(parts.size() == 5);
  for (const auto& part : parts) {
    std::vector<int> hist(4, 0);
    for (int idx : part) hist[static_cast<size_t>(labels[static_cast<size_t>(idx)])] += 1;
    for (int k = 0; k < 4; ++k) {
      CHECK(std::abs(hist[static_cast<size_t>(k)] - 200.0) / 200.0 < 0.10);
    }
  }
}

TEST_CASE("dirichlet_partition: single client receives everything") {
  std::vector<int> labels{0, 1, 2, 0, 1, 2, 1};
  RngStream rng(5);
  const auto parts = dirichlet_partition(labels, {0.5, 1, 0}, rng);
  REQUIRE(parts.size() == 1);
  CHECK(parts[0].size() == labels.size());
}

TEST_CASE("dirichlet_partition: conserves indices, disjoint and exhaustive") {
  std::vector<int> labels;
  RngStream lrng(8);
  for (int i = 0; i < 2000; ++i) labels.push_back(static_cast<int>(lrng.uniform_int(6)));
  RngStream rng(8);
  const auto parts = dirichlet_partition(labels, {0.3, 10, 0}, rng);
  std::set<int> seen;
  size_t total = 0;
  for (const auto& part : parts) {
    CHECK(!part.empty());
    total += part.size();
    for (int idx : part) CHECK(seen.insert(idx).second);
  }
  CHECK(total == labels.size());
}

TEST_CASE("dirichlet_partition: infeasible when clients outnumber samples") {
  std::vector<int> labels{0, 1};  // 2 samples cannot cover 5 clients
  RngStream rng(3);
  CHECK_THROWS_WITH_AS(dirichlet_partition(labels, {0.5, 5, 0}, rng),
                       doctest::Contains("infeasible"), DataError);
}

TEST_CASE("dirichlet_partition: lower alpha concentrates classes per client") {
  // Mean distinct-class count per client, averaged over 10 seeds, is strictly
  // smaller at alpha=0.1 than at alpha=0.5.
  std::vector<int> labels;
  for (int k = 0; k < 10; ++k) {
    for (int i = 0; i < 500; ++i) labels.push_back(k);
  }
  auto mean_distinct = [&](double alpha) {
    double acc = 0.0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
      RngStream rng = RngStream::derive(seed, 99);
      const auto parts = dirichlet_partition(labels, {alpha, 100, seed}, rng);
      double distinct = 0.0;
      for (const auto& part : parts) {
        std::set<int> classes;
        for (int idx : part) classes.insert(labels[static_cast<size_t>(idx)]);
        distinct += static_cast<double>(classes.size());
      }
      acc += distinct / static_cast<double>(parts.size());
    }
    return acc / 10.0;
  };
  CHECK(mean_distinct(0.1) < mean_distinct(0.5));
}

namespace {

void write_be32(std::ofstream& out, uint32_t v) {
  const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_idx_fixture(const std::string& img_path, const std::string& lab_path, int n_images,
                       int n_labels) {
  std::ofstream img(img_path, std::ios::binary);
  write_be32(img, 0x00000803u);
  write_be32(img, static_cast<uint32_t>(n_images));
  write_be32(img, 2);
  write_be32(img, 2);
  for (int i = 0; i < n_images; ++i) {
    const unsigned char px[4] = {0, 51, 102, static_cast<unsigned char>(255 - i)};
    img.write(reinterpret_cast<const char*>(px), 4);
  }
  std::ofstream lab(lab_path, std::ios::binary);
  write_be32(lab, 0x00000801u);
  write_be32(lab, static_cast<uint32_t>(n_labels));
  for (int i = 0; i < n_labels; ++i) {
    const char y = static_cast<char>(i % 3);
    lab.write(&y, 1);
  }
}

}  // namespace

TEST_CASE("load_idx: hand-written fixture round trips exactly") {
  write_idx_fixture("/tmp/pfedgm_img_ok", "/tmp/pfedgm_lab_ok", 2, 2);
  const RawDataset d = load_idx("/tmp/pfedgm_img_ok", "/tmp/pfedgm_lab_ok");
  REQUIRE(d.features.size() == 2);
  CHECK(d.rows == 2);
  CHECK(d.cols == 2);
  CHECK(d.features[0] == Vec{0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0});
  CHECK(d.features[1] == Vec{0.0, 51.0 / 255.0, 102.0 / 255.0, 254.0 / 255.0});
  CHECK(d.labels == std::vector<int>{0, 1});
}

TEST_CASE("load_idx: count mismatch reported with offset") {
  write_idx_fixture("/tmp/pfedgm_img_mm", "/tmp/pfedgm_lab_mm", 2, 3);
  CHECK_THROWS_WITH_AS(load_idx("/tmp/pfedgm_img_mm", "/tmp/pfedgm_lab_mm"),
                       doctest::Contains("offset 4"), DataError);
}

TEST_CASE("load_idx: bad magic and truncation") {
  {
    std::ofstream img("/tmp/pfedgm_img_bad", std::ios::binary);
    write_be32(img, 0x00000805u);
    write_be32(img, 1);
    write_be32(img, 2);
    write_be32(img, 2);
  }
  write_idx_fixture("/tmp/pfedgm_img_t", "/tmp/pfedgm_lab_t", 2, 2);
  CHECK_THROWS_AS(load_idx("/tmp/pfedgm_img_bad", "/tmp/pfedgm_lab_t"), DataError);
  {
    // Header claims 5 images but only 2 are present.
    std::ofstream img("/tmp/pfedgm_img_tr", std::ios::binary);
    write_be32(img, 0x00000803u);
    write_be32(img, 5);
    write_be32(img, 2);
    write_be32(img, 2);
    const char px[8] = {0};
    img.write(px, 8);
    std::ofstream lab("/tmp/pfedgm_lab_tr", std::ios::binary);
    write_be32(lab, 0x00000801u);
    write_be32(lab, 5);
    const char ys[5] = {0, 1, 2, 0, 1};
    lab.write(ys, 5);
  }
  CHECK_THROWS_WITH_AS(load_idx("/tmp/pfedgm_img_tr", "/tmp/pfedgm_lab_tr"),
                       doctest::Contains("truncated"), DataError);
  CHECK_THROWS_AS(load_idx("/tmp/pfedgm_missing", "/tmp/pfedgm_lab_t"), DataError);
}

TEST_CASE("load_idx: real MNIST train set when present") {
  // Runs only when a local MNIST copy exists; validates the standard layout.
  const char* img = "data/train-images-idx3-ubyte";
  const char* lab = "data/train-labels-idx1-ubyte";
  if (!std::ifstream(img).good() || !std::ifstream(lab).good()) return;
  const RawDataset d = load_idx(img, lab);
  CHECK(d.features.size() == 60000);
  CHECK(d.rows * d.cols == 784);
  for (int i = 0; i < 1000; ++i) {
    for (double v : d.features[static_cast<size_t>(i)]) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(d.labels[static_cast<size_t>(i)] >= 0);
    CHECK(d.labels[static_cast<size_t>(i)] <= 9);
  }
}

TEST_CASE("scenario: json round trip preserves fields") {
  ScenarioConfig s = default_scenario(77);
  s.tau = 2.5;
  s.clients = 7;
  const auto j = scenario_to_json(s);
  const ScenarioConfig back = scenario_from_json(j);
  CHECK(back.tau == s.tau);
  CHECK(back.clients == s.clients);
  CHECK(back.seed == s.seed);
  CHECK(back.classes == s.classes);
  CHECK(scenario_to_json(back) == j);
}

TEST_CASE("scenario: invalid fields name their path") {
  nlohmann::json j{{"classes", 1}};
  CHECK_THROWS_WITH_AS(scenario_from_json(j), doctest::Contains("scenario.classes"), DataError);
}

TEST_CASE("scenario: synthetic clients are deterministic and well formed") {
  ScenarioConfig s = default_scenario(2026);
  s.clients = 6;
  s.samples_per_client = 40;
  const auto a = build_synthetic_clients(s);
  const auto b = build_synthetic_clients(s);
  REQUIRE(a.size() == 6);
  int total = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].features == b[i].features);
    CHECK(a[i].labels == b[i].labels);
    CHECK(a[i].size() >= s.min_client_samples);
    CHECK(a[i].train_size() == static_cast<int>(std::lround(0.8 * a[i].size())));
    total += a[i].size();
    for (int y : a[i].labels) {
      CHECK(y >= 0);
      CHECK(y < s.classes);
    }
  }
  CHECK(total == s.clients * s.samples_per_client);
}

TEST_CASE("scenario: explicit mixture and client weights are honored") {
  ScenarioConfig s = default_scenario(5);
  s.clients = 2;
  s.classes = 2;
  s.input_dim = 2;
  s.samples_per_client = 30;
  s.min_client_samples = 1;
  MixtureSpec spec;
  spec.classes = 2;
  spec.means = {Vec{0.0, 0.0}, Vec{6.0, 6.0}};
  spec.covs = {DiagMat::identity(2), DiagMat::identity(2)};
  spec.weights = Vec{0.5, 0.5};
  s.mixture = spec;
  std::vector<std::vector<ResampleWeight>> w(2);
  for (int i = 0; i < 2; ++i) {
    w[static_cast<size_t>(i)] = {{Vec{0.0, 0.0}, DiagMat::identity(2)},
                                 {Vec{6.0, 6.0}, DiagMat::identity(2)}};
  }
  s.client_weights = w;
  const auto clients = build_synthetic_clients(s);
  CHECK(clients.size() == 2);
  const MixtureSpec resolved = resolve_mixture(s);
  CHECK(resolved.means[1] == Vec{6.0, 6.0});
}
