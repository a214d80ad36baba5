#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "otbkg/estimators.hpp"
#include "support/latent_toy.hpp"

using namespace otbkg;

namespace {

Matrix<double> random_cost(std::mt19937_64& rng, std::size_t n, std::size_t m) {
  std::uniform_real_distribution<double> u(0, 10);
  Matrix<double> c(n, m);
  for (auto& v : c.values()) v = u(rng);
  return c;
}

std::vector<Event> events(std::mt19937_64& rng, std::size_t n) {
  std::vector<Event> out;
  for (const auto& e : oracle::latent_sample(rng, 0.0, n)) out.push_back(e.event);
  return out;
}

}  // namespace

TEST(Estimators, FvtOddsArithmetic) {
  const std::vector<double> psi{0.5, 0.75, 0.5, 0.2};
  const auto e = estimate_fvt_from_psi(psi);
  EXPECT_EQ(e.method, "fvt");
  EXPECT_DOUBLE_EQ(e.weights[0], 1.0);
  EXPECT_DOUBLE_EQ(e.weights[1], 3.0);
  EXPECT_DOUBLE_EQ(e.weights[3], 0.25);
  EXPECT_EQ(e.atoms, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Estimators, OtFvtUniformWhenPsiIsHalf) {
  std::mt19937_64 rng(1);
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{7, 11}, {20, 13}, {9, 9}}) {
    const auto c = uniform_coupling(random_cost(rng, n, m));
    const SampleCounts counts{n, m, 5, 0};
    const std::vector<double> odds(n, odds_from_psi(0.5));
    const auto e = estimate_ot_fvt_from_odds(c, odds, counts);
    for (double v : e.weights) EXPECT_NEAR(v, (double(n) / 5.0) / double(m), 1e-9);
    const auto p = normalize(e, 1.0);
    for (double v : p.weights) EXPECT_NEAR(v, 1.0 / double(m), 1e-9);
  }
}

TEST(Estimators, OtFvtPermutationClosedForm) {
  std::mt19937_64 rng(2);
  const std::size_t n = 25, m_c = 7;
  const auto c = uniform_coupling(random_cost(rng, n, n));
  ASSERT_EQ(c.entries.size(), n);  // a permutation
  std::vector<std::size_t> tau(n);
  for (const auto& e : c.entries) tau[e.j] = e.i;
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::vector<double> odds(n);
  for (auto& o : odds) o = odds_from_psi(u(rng));
  const auto e = estimate_ot_fvt_from_odds(c, odds, {n, n, m_c, 0});
  for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(e.weights[j] * double(m_c), odds[tau[j]], 1e-9);
  for (double v : e.weights) EXPECT_GE(v, 0.0);
}

TEST(Estimators, OtKnnNormalizesToOne) {
  std::mt19937_64 rng(3);
  const std::size_t n_c = 30, n_s = 40, m_c = 12;
  const auto cr3 = events(rng, n_c), sr3 = events(rng, n_s), cr4 = events(rng, m_c);
  MetricParams p;
  p.r = 2.75;
  const auto coupling = fit_coupling(cr3, sr3, p);
  const auto e = estimate_ot_knn(coupling, cr4, cr3, 10, p, {n_c, n_s, m_c, 0}, 2);
  EXPECT_NEAR(e.sum(), 1.0, 1e-9);
  for (double v : e.weights) EXPECT_GE(v, 0.0);
}

TEST(Estimators, OtKnnAllNeighboursUniform) {
  std::mt19937_64 rng(4);
  const std::size_t n_c = 15, n_s = 22, m_c = 6;
  const auto c = uniform_coupling(random_cost(rng, n_c, n_s));
  std::vector<KnnWeights> nb(m_c);
  for (auto& k : nb) {
    for (std::size_t i = 0; i < n_c; ++i) {
      k.indices.push_back(i);
      k.distances.push_back(1.0);
      k.weights.push_back(1.0 / double(n_c));
    }
  }
  const auto e = estimate_ot_knn_from_neighbours(c, nb, {n_c, n_s, m_c, 0});
  for (double v : e.weights) EXPECT_NEAR(v, 1.0 / double(n_s), 1e-9);
}

TEST(Estimators, OtKnnPermutationIdentity) {
  // k = 1 with the CR 4b sample equal to the CR 3b sample: each 4b event is
  // its own neighbour, so the estimate is the permuted empirical SR measure
  std::mt19937_64 rng(5);
  const std::size_t n = 12;
  const auto cr3 = events(rng, n), sr3 = events(rng, n);
  MetricParams p;
  const auto coupling = fit_coupling(cr3, sr3, p);
  ASSERT_EQ(coupling.entries.size(), n);
  const auto e = estimate_ot_knn(coupling, cr3, cr3, 1, p, {n, n, n, 0});
  for (double v : e.weights) EXPECT_NEAR(v, 1.0 / double(n), 1e-12);
}

TEST(Estimators, DimensionMismatch) {
  std::mt19937_64 rng(6);
  const auto c = uniform_coupling(random_cost(rng, 4, 5));
  EXPECT_THROW(estimate_ot_fvt_from_odds(c, std::vector<double>(4, 1.0), {5, 5, 2, 0}), DataError);
  EXPECT_THROW(estimate_ot_fvt_from_odds(c, std::vector<double>(3, 1.0), {4, 5, 2, 0}), DataError);
  EXPECT_THROW(estimate_ot_fvt_from_odds(c, std::vector<double>(4, 1.0), {4, 5, 0, 0}), DataError);
  EXPECT_THROW(estimate_ot_knn_from_neighbours(c, std::vector<KnnWeights>(1), {4, 5, 2, 0}), DataError);
}

TEST(Estimators, AbcdMass) {
  EXPECT_NEAR(abcd_mass({159427, 201568, 22053, 0}), 22053.0 * 201568.0 / 159427.0, 1e-9);
  EXPECT_NEAR(abcd_mass({159427, 201568, 22053, 0}), 27882.2226, 1e-4);
  EXPECT_EQ(abcd_mass({10, 20, 0, 0}), 0.0);
  EXPECT_EQ(abcd_mass({17, 17, 5, 0}), 5.0);
  EXPECT_THROW(abcd_mass({0, 1, 1, 0}), DataError);
  // sigma: sqrt(m_s + a^2 (1/m_c + 1/n_s + 1/n_c)) with a = 50
  EXPECT_NEAR(abcd_sigma({100, 100, 50, 40}), std::sqrt(40 + 2500 * (0.02 + 0.01 + 0.01)), 1e-12);
}

TEST(Estimators, Normalize) {
  WeightedEstimate e = estimate_fvt_from_psi(std::vector<double>{0.5, 0.75, 0.6});
  const auto p = normalize(e, 1.0);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  const auto q = normalize(p, 1.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(p.weights[j], q.weights[j], 1e-15);
  const auto r = normalize(e, 27882.76);
  EXPECT_NEAR(r.sum(), 27882.76, 1e-9 * 27882.76);
  EXPECT_EQ(r.total_mass, 27882.76);
  WeightedEstimate zero = estimate_raw3b(3);
  for (auto& w : zero.weights) w = 0.0;
  EXPECT_THROW(normalize(zero, 1.0), NumericalError);
}

TEST(Estimators, FvtRecoversConstantRatio) {
  // same kinematics, twice as many 4b events: odds should be about 2
  std::mt19937_64 rng(7);
  const auto three = events(rng, 2000), four = events(rng, 4000), sr = events(rng, 1000);
  NetConfig cfg;
  cfg.epochs = 10;
  const auto m = train(build_model(cfg, 3), three, four);
  const auto e = estimate_fvt(m, sr);
  const double mean = e.sum() / double(sr.size());
  EXPECT_GE(mean, 1.7);
  EXPECT_LE(mean, 2.3);
}

TEST(Estimators, FileRoundTrip) {
  auto e = normalize(estimate_fvt_from_psi(std::vector<double>{0.5, 0.75, 0.6, 0.3}), 123.5);
  const SampleCounts counts{10, 4, 3, 2};
  std::stringstream ss;
  write_estimate(ss, e, counts, "abc123");
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("# method=fvt\n", 0), 0u);
  EXPECT_NE(text.find("\natom_index,weight\n0,"), std::string::npos);
  const auto back = read_estimate(ss);
  EXPECT_EQ(back.estimate.method, "fvt");
  EXPECT_EQ(back.estimate.weights, e.weights);
  EXPECT_EQ(back.estimate.atoms, e.atoms);
  EXPECT_EQ(back.counts.n_c, 10u);
  EXPECT_EQ(back.counts.m_s, 2u);
  EXPECT_EQ(back.config_hash, "abc123");

  std::istringstream bad1("atom_index,weight\n0,1\n0,2\n");
  EXPECT_THROW(read_estimate(bad1), DataError);
  std::istringstream bad2("atom_index,weight\n0,-1\n");
  EXPECT_THROW(read_estimate(bad2), DataError);
  std::istringstream bad3("# mass=5\natom_index,weight\n0,1\n");
  EXPECT_THROW(read_estimate(bad3), DataError);
  std::istringstream bad4("index,weight\n");
  EXPECT_THROW(read_estimate(bad4), DataError);
}
