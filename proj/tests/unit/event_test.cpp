#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "otbkg/event.hpp"
#include "otbkg/event_io.hpp"

using namespace otbkg;

namespace {

// Two massless jets with given pt, eta, phi whose pair mass is `m`:
// back-to-back in phi at eta=0 gives m = 2*pt.
Event balanced_event(double m1, double m2) {
  std::array<Jet, 4> j{};
  j[0] = {m1 / 2, 0.0, 0.3, 0.0};
  j[1] = {m1 / 2, 0.0, 0.3 + kPi, 0.0};
  j[2] = {m2 / 2, 0.5, 1.1, 0.0};
  j[3] = {m2 / 2, 0.5, 1.1 + kPi, 0.0};
  return make_event(j);
}

Event random_event(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pt(20, 200), eta(-2.5, 2.5), phi(0, kTwoPi);
  std::array<Jet, 4> j{};
  for (auto& x : j) x = {pt(rng), eta(rng), phi(rng), 0.0};
  return make_event(j);
}

}  // namespace

TEST(Pseudorapidity, KnownValues) {
  EXPECT_NEAR(pseudorapidity(kPi / 2), 0.0, 1e-15);
  EXPECT_NEAR(pseudorapidity(2 * std::atan(std::exp(-1.0))), 1.0, 1e-12);
  EXPECT_GT(pseudorapidity(1e-8), 15.0);
  EXPECT_GT(pseudorapidity(0.3), pseudorapidity(0.4));
  EXPECT_THROW(pseudorapidity(0.0), std::domain_error);
  EXPECT_THROW(pseudorapidity(kPi), std::domain_error);
}

TEST(InvariantMass, Examples) {
  const Jet a{50, 0, 0, 0}, b{50, 0, kPi, 0};
  std::array<Jet, 1> one{a};
  EXPECT_NEAR(invariant_mass(one), 0.0, 1e-9);
  std::array<Jet, 2> two{a, b};
  EXPECT_NEAR(invariant_mass(two), 100.0, 1e-9);
}

TEST(InvariantMass, FiniteEverywhere) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 1000; ++k) {
    const auto ev = random_event(rng);
    const double m = invariant_mass(ev);
    EXPECT_TRUE(std::isfinite(m));
    EXPECT_GE(m, 0.0);
  }
}

TEST(PairDijets, PicksEqualMasses) {
  const auto ev = balanced_event(125, 125);
  const auto p = pair_dijets(ev);
  EXPECT_EQ(p.pair1, (std::array<int, 2>{0, 1}));
  const auto m = dijet_masses(ev, p);
  EXPECT_NEAR(m.m1, 125, 1e-9);
  EXPECT_NEAR(m.m2, 125, 1e-9);
}

TEST(PairDijets, SymmetricTieGoesToFirstPairing) {
  // four identical jets: every partition has |dm| = 0
  std::array<Jet, 4> j{};
  for (auto& x : j) x = {40, 0.5, 1.0, 0.0};
  const auto p = pair_dijets(make_event(j));
  EXPECT_EQ(p.pair1, (std::array<int, 2>{0, 1}));
  EXPECT_EQ(p.pair2, (std::array<int, 2>{2, 3}));
}

TEST(PairDijets, OrderFree) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 50; ++k) {
    const auto ev = random_event(rng);
    const auto base = pair_dijets(ev);
    auto set_of = [](const Event& e, std::array<int, 2> p) {
      std::array<double, 2> pts{e.jets[p[0]].pt, e.jets[p[1]].pt};
      std::sort(pts.begin(), pts.end());
      return pts;
    };
    auto sys = std::array{set_of(ev, base.pair1), set_of(ev, base.pair2)};
    std::sort(sys.begin(), sys.end());
    std::array<int, 4> perm{0, 1, 2, 3};
    do {
      Event q = ev;
      for (int i = 0; i < 4; ++i) q.jets[i] = ev.jets[perm[i]];
      const auto p = pair_dijets(q);
      auto s2 = std::array{set_of(q, p.pair1), set_of(q, p.pair2)};
      std::sort(s2.begin(), s2.end());
      EXPECT_EQ(sys, s2);
      EXPECT_NEAR(invariant_mass(q), invariant_mass(ev), 1e-9 * invariant_mass(ev));
      EXPECT_NEAR(m_hh(q), m_hh(ev), 1e-9 * m_hh(ev));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST(Regions, Examples) {
  const RegionParams p;
  EXPECT_EQ(classify_region(balanced_event(125, 125), p), Region::kSignal);
  EXPECT_NEAR(sr_distance(145, 145, p), std::sqrt(2.0) * (1 - 125.0 / 145), 1e-12);
  EXPECT_NEAR(sr_distance(145, 145, p), 0.195, 1e-3);
  EXPECT_NEAR(cr_distance(145, 145, p), 22.98, 1e-2);
  EXPECT_EQ(classify_region(balanced_event(145, 145), p), Region::kControl);
  EXPECT_NEAR(sr_distance(165, 165, p), 0.343, 1e-3);
  EXPECT_NEAR(cr_distance(165, 165, p), 51.3, 1e-1);
  EXPECT_EQ(classify_region(balanced_event(165, 165), p), Region::kOutside);
  EXPECT_THROW(classify_masses(0.0, 125, p), NumericalError);
}

TEST(Regions, InvariantUnderSymmetry) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0, kTwoPi);
  std::uniform_int_distribution<int> s(0, 1);
  // wide regions so all three labels occur
  RegionParams p;
  p.kappa_s = 0.5;
  p.kappa_c = 80;
  for (int k = 0; k < 1000; ++k) {
    const auto ev = random_event(rng);
    const SymmetryTransform t{d(rng), s(rng) ? 1 : -1, s(rng) ? 1 : -1};
    EXPECT_EQ(classify_region(ev, p), classify_region(apply_symmetry(ev, t), p));
  }
}

TEST(Regions, DisjointForAnyParams) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> m(20, 300), k(0.01, 3.0), kc(1, 200);
  for (int n = 0; n < 2000; ++n) {
    RegionParams p;
    p.kappa_s = k(rng);
    p.kappa_c = kc(rng);
    const double a = m(rng), b = m(rng);
    const Region r = classify_masses(a, b, p);
    if (sr_distance(a, b, p) <= p.kappa_s) EXPECT_EQ(r, Region::kSignal);
    else if (cr_distance(a, b, p) <= p.kappa_c) EXPECT_EQ(r, Region::kControl);
    else EXPECT_EQ(r, Region::kOutside);
  }
}

TEST(MHH, Examples) {
  const auto ev = balanced_event(125, 125);
  EXPECT_NEAR(m_hh(ev), invariant_mass(ev), 1e-9);
  std::mt19937_64 rng(1);
  const auto r = random_event(rng);
  EXPECT_NEAR(m_hh(r, 250.0), 2 * m_hh(r, 125.0), 1e-9 * m_hh(r));
}

TEST(Symmetry, Examples) {
  std::mt19937_64 rng(2);
  const auto ev = random_event(rng);
  const auto same = apply_symmetry(ev, {0.0, 1, 1});
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(same.jets[i].phi, ev.jets[i].phi);
    EXPECT_DOUBLE_EQ(same.jets[i].eta, ev.jets[i].eta);
  }
  const auto rot = apply_symmetry(ev, {kPi, 1, 1});
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(rot.jets[i].phi, wrap_phi(ev.jets[i].phi + kPi), 1e-12);
    EXPECT_GE(rot.jets[i].phi, 0.0);
    EXPECT_LT(rot.jets[i].phi, kTwoPi);
  }
  const auto twice = apply_symmetry(apply_symmetry(ev, {0.0, -1, 1}), {0.0, -1, 1});
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(twice.jets[i].eta, ev.jets[i].eta);
}

TEST(DeltaR, CloseAndOther) {
  const auto ev = balanced_event(125, 125);
  const auto d = delta_r_close_other(ev);
  EXPECT_LE(d.close, d.other);
  EXPECT_GT(d.close, 0.0);
}

TEST(EventCsv, RoundTripExact) {
  std::mt19937_64 rng(4);
  std::vector<Event> evs;
  for (int k = 0; k < 20; ++k) {
    auto e = random_event(rng);
    e.weight = 0.1 + k;
    e.channel = k % 2 ? Channel::k4b : Channel::k3b;
    e.truth = k % 3 == 0 ? Truth::kSignal : Truth::kBackground;
    evs.push_back(e);
  }
  std::stringstream ss;
  write_events(ss, evs);
  const auto back = read_events(ss);
  ASSERT_EQ(back.size(), evs.size());
  for (std::size_t k = 0; k < evs.size(); ++k) {
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(back[k].jets[i].pt, evs[k].jets[i].pt);
      EXPECT_EQ(back[k].jets[i].phi, evs[k].jets[i].phi);
    }
    EXPECT_EQ(back[k].weight, evs[k].weight);
    EXPECT_EQ(back[k].channel, evs[k].channel);
    EXPECT_EQ(back[k].truth, evs[k].truth);
  }
}

TEST(EventCsv, Errors) {
  std::stringstream bad_header("pt1,eta1\n");
  EXPECT_THROW(read_events(bad_header), DataError);
  std::stringstream bad_field(std::string(kEventCsvHeader) +
                              "\n1,0,0,0,1,0,0,0,1,0,0,0,1,0,0,0,1,5b,na\n");
  try {
    read_events(bad_field, "f.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("f.csv:2"), std::string::npos);
  }
  std::stringstream empty("");
  EXPECT_TRUE(read_events(empty).empty());
}

TEST(EventCsv, PhiIsCanonicalized) {
  std::stringstream s(std::string(kEventCsvHeader) +
                      "\n10,0,-1,0,10,0,7,0,10,0,0,0,10,0,0,0,1,3b,na\n");
  const auto evs = read_events(s);
  EXPECT_NEAR(evs[0].jets[0].phi, kTwoPi - 1, 1e-12);
  EXPECT_NEAR(evs[0].jets[1].phi, 7 - kTwoPi, 1e-12);
}
