#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "otbkg/emd.hpp"
#include "support/dense_lp.hpp"

using namespace otbkg;

namespace {

Event random_event(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pt(20, 200), eta(-2.5, 2.5), phi(0, kTwoPi);
  std::array<Jet, 4> j{};
  for (auto& x : j) x = {pt(rng), eta(rng), phi(rng), 0.0};
  return make_event(j);
}

double lp_oracle(const Event& g, const Event& h, double r) {
  double pg[4], eg[4], fg[4], ph[4], eh[4], fh[4];
  for (int i = 0; i < 4; ++i) {
    pg[i] = g.jets[i].pt, eg[i] = g.jets[i].eta, fg[i] = g.jets[i].phi;
    ph[i] = h.jets[i].pt, eh[i] = h.jets[i].eta, fh[i] = h.jets[i].phi;
  }
  return oracle::jet_emd_lp(pg, eg, fg, ph, eh, fh, r);
}

}  // namespace

TEST(EmdTilde, SelfDistanceIsZero) {
  std::mt19937_64 rng(1);
  const auto g = random_event(rng);
  EXPECT_NEAR(emd_tilde(g, g, {}).cost, 0.0, 1e-12);
}

TEST(EmdTilde, SingleJetShift) {
  std::mt19937_64 rng(2);
  auto g = random_event(rng);
  // keep the other jets far away in eta so the single move is optimal
  g.jets = {Jet{60, -2.0, 1.0, 0}, Jet{50, 2.0, 1.0, 0}, Jet{40, -2.0, 4.0, 0}, Jet{30, 2.0, 4.0, 0}};
  auto h = g;
  h.jets[1].phi += 0.1;
  MetricParams p;
  EXPECT_NEAR(emd_tilde(g, h, p).cost, 50 * 0.1 / p.r, 1e-9);
  EXPECT_NEAR(lp_oracle(g, h, p.r), 50 * 0.1 / p.r, 1e-9);
}

TEST(EmdTilde, PtImbalanceOnly) {
  std::mt19937_64 rng(3);
  const auto g = random_event(rng);
  auto h = g;
  h.jets[2].pt += 10;
  EXPECT_NEAR(emd_tilde(g, h, {}).cost, 10.0, 1e-9);
  EXPECT_NEAR(emd_tilde(h, g, {}).cost, 10.0, 1e-9);
}

TEST(EmdTilde, MatchesGenericLp) {
  std::mt19937_64 rng(4);
  for (double r : {0.4, 2.75}) {
    MetricParams p;
    p.r = r;
    for (int k = 0; k < 200; ++k) {
      const auto g = random_event(rng), h = random_event(rng);
      const double want = lp_oracle(g, h, r);
      EXPECT_NEAR(emd_tilde(g, h, p).cost, want, 1e-8 * (1 + want));
    }
  }
}

TEST(EmdTilde, SymmetricAndFeasible) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 300; ++k) {
    const auto g = random_event(rng), h = random_event(rng);
    const auto a = emd_tilde(g, h, {}), b = emd_tilde(h, g, {});
    EXPECT_NEAR(a.cost, b.cost, 1e-9 * (1 + a.cost));
    for (int i = 0; i < 4; ++i) {
      EXPECT_LE(a.flow.row_sum(i), g.jets[i].pt + 1e-9);
      EXPECT_LE(a.flow.col_sum(i), h.jets[i].pt + 1e-9);
      for (int j = 0; j < 4; ++j) EXPECT_GE(a.flow.flows[i][j], -1e-12);
    }
    EXPECT_NEAR(a.flow.total(), std::min(g.scalar_pt(), h.scalar_pt()), 1e-9);
  }
}

TEST(EmdTilde, TriangleDiagnostic) {
  // not guaranteed; count violations and just report them
  std::mt19937_64 rng(6);
  int violations = 0;
  for (int k = 0; k < 1000; ++k) {
    const auto a = random_event(rng), b = random_event(rng), c = random_event(rng);
    const double ab = emd_tilde(a, b, {}).cost, bc = emd_tilde(b, c, {}).cost,
                 ac = emd_tilde(a, c, {}).cost;
    if (ac > ab + bc + 1e-9) ++violations;
  }
  RecordProperty("triangle_violations", violations);
  std::printf("triangle inequality violations: %d / 1000\n", violations);
}

TEST(Emd, ZeroOnOrbit) {
  std::mt19937_64 rng(7);
  MetricParams p;
  const auto g = random_event(rng);
  EXPECT_NEAR(emd(g, apply_symmetry(g, {kTwoPi * 5 / p.grid_size, 1, 1}), p), 0.0, 1e-9);
  EXPECT_NEAR(emd(g, apply_symmetry(g, {0.0, -1, 1}), p), 0.0, 1e-9);
  std::uniform_real_distribution<double> d(0, kTwoPi);
  std::uniform_int_distribution<int> s(0, 1);
  for (int k = 0; k < 200; ++k) {
    const auto e = random_event(rng);
    const SymmetryTransform t{d(rng), s(rng) ? 1 : -1, s(rng) ? 1 : -1};
    EXPECT_LE(emd(apply_symmetry(e, t), e, p), 1e-6);
  }
}

TEST(Emd, GridToleranceWithoutRefinement) {
  std::mt19937_64 rng(8);
  MetricParams p;
  p.refine_iters = 0;
  std::uniform_real_distribution<double> d(0, kTwoPi);
  for (int k = 0; k < 100; ++k) {
    const auto e = random_event(rng);
    const double tol = e.scalar_pt() * (kPi / p.grid_size) / p.r;
    EXPECT_LE(emd(apply_symmetry(e, {d(rng), 1, -1}), e, p), tol);
  }
}

TEST(Emd, BoundedByTildeAndSymmetric) {
  std::mt19937_64 rng(9);
  MetricParams p;
  for (int k = 0; k < 200; ++k) {
    const auto g = random_event(rng), h = random_event(rng);
    const double v = emd(g, h, p);
    EXPECT_LE(v, emd_tilde(g, h, p).cost + 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(v, emd(h, g, p), 1e-9 * (1 + v));
  }
}

TEST(DistanceMatrix, ShapeDiagonalAndTranspose) {
  std::mt19937_64 rng(10);
  std::vector<Event> a, b;
  for (int k = 0; k < 6; ++k) a.push_back(random_event(rng));
  for (int k = 0; k < 4; ++k) b.push_back(random_event(rng));
  MetricParams p;
  const auto aa = distance_matrix(a, a, p, 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(aa(i, i), 0.0, 1e-9);
  const auto ab = distance_matrix(a, b, p, 3);
  const auto ba = distance_matrix(b, a, p, 1);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) EXPECT_NEAR(ab(i, j), ba(j, i), 1e-9 * (1 + ab(i, j)));
  const auto one = distance_matrix(std::span(a).first(1), std::span(b).first(1), p);
  EXPECT_EQ(one(0, 0), emd(a[0], b[0], p));
  // schedule independence
  const auto serial = distance_matrix(a, b, p, 1);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) EXPECT_EQ(serial(i, j), ab(i, j));
}

TEST(DistanceMatrix, BinaryRoundTrip) {
  std::mt19937_64 rng(11);
  std::vector<Event> a, b;
  for (int k = 0; k < 3; ++k) a.push_back(random_event(rng));
  for (int k = 0; k < 5; ++k) b.push_back(random_event(rng));
  MetricParams p;
  p.r = 2.75;
  const auto d = distance_matrix(a, b, p);
  const auto path = (std::filesystem::temp_directory_path() / "otbkg_dm_test.bin").string();
  write_distance_matrix(path, d, p);
  const auto s = read_distance_matrix(path);
  EXPECT_EQ(s.r, 2.75);
  EXPECT_EQ(s.grid_size, p.grid_size);
  ASSERT_EQ(s.values.rows(), 3u);
  ASSERT_EQ(s.values.cols(), 5u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(s.values(i, j), d(i, j));
  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage";
  }
  EXPECT_THROW(read_distance_matrix(path), DataError);
  std::filesystem::remove(path);
}
