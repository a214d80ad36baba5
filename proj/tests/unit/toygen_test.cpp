#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "otbkg/estimators.hpp"
#include "otbkg/event_io.hpp"
#include "otbkg/toygen.hpp"

using namespace otbkg;

namespace {

GenConfig small_config(std::uint64_t seed) {
  GenConfig cfg;
  cfg.n_3b = 2000;
  cfg.n_4b = 500;
  cfg.n_truth = 500;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(Toygen, SmearingZeroTermsIsIdentity) {
  CounterRng rng(1, 0, 0);
  const SmearParams none{0, 0, 0};
  for (double e : {1.5, 10.0, 100.0, 1234.5}) EXPECT_EQ(smear_energy(e, none, rng), e);
  EXPECT_THROW(smear_energy(0.0, none, rng), DataError);
}

TEST(Toygen, SmearingMoments) {
  const SmearParams p;
  EXPECT_NEAR(energy_resolution(100, p), 100 * std::sqrt(0.98 * 0.98 / 100 + 0.054 * 0.054), 1e-12);
  EXPECT_NEAR(energy_resolution(100, p), 11.1893, 1e-4);  // the quoted 11.25 is an arithmetic slip
  CounterRng rng(2, 0, 0);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = smear_energy(100.0, p, rng);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(mean, 100.0, 0.5);
  EXPECT_NEAR(sd, energy_resolution(100, p), 0.02 * energy_resolution(100, p));
  // truncation at 1 GeV
  for (int i = 0; i < 1000; ++i) EXPECT_GE(smear_energy(1.2, p, rng), 1.0);
}

TEST(Toygen, ScaleFactors) {
  EXPECT_NEAR(scale_factor(Flavor::kBottom, 0.1), (2.5 * 0.1 * std::exp(-0.7) + 0.6) / 0.75, 1e-15);
  EXPECT_NEAR(scale_factor(Flavor::kBottom, 0.1), 0.9655, 1e-4);
  EXPECT_NEAR(scale_factor(Flavor::kLight, 0.1), 1.3, 1e-12);
  EXPECT_NEAR(scale_factor(Flavor::kCharm, 1e-12), 0.2 / 0.15, 1e-9);
  EXPECT_EQ(parse_flavor("c"), Flavor::kCharm);
  EXPECT_THROW(parse_flavor("top"), DataError);
}

TEST(Toygen, Reproducible) {
  const auto cfg = small_config(7);
  const auto a = generate(cfg, 1), b = generate(cfg, 3);
  std::ostringstream sa, sb;
  write_events(sa, a.sample3b);
  write_events(sa, a.sample4b);
  write_events(sa, a.truth4b);
  write_events(sb, b.sample3b);
  write_events(sb, b.sample4b);
  write_events(sb, b.truth4b);
  EXPECT_EQ(sa.str(), sb.str());
  const auto c = generate(small_config(8), 1);
  EXPECT_NE(a.sample3b[0].jets[0].pt, c.sample3b[0].jets[0].pt);
}

TEST(Toygen, AcceptanceAndLabels) {
  auto cfg = small_config(3);
  cfg.signal_fraction = 0.2;
  const auto s = generate(cfg);
  ASSERT_EQ(s.sample3b.size(), cfg.n_3b);
  ASSERT_EQ(s.sample4b.size(), cfg.n_4b);
  ASSERT_EQ(s.truth4b.size(), cfg.n_truth);
  std::size_t sig = 0;
  for (const auto* v : {&s.sample3b, &s.sample4b, &s.truth4b})
    for (const auto& e : *v) {
      for (const auto& j : e.jets) {
        EXPECT_LE(std::fabs(j.eta), 2.5);
        EXPECT_GE(j.pt, 1.0);
        EXPECT_EQ(j.mass, 0.0);
      }
      EXPECT_GT(e.weight, 0.0);
      if (e.truth == Truth::kSignal) ++sig;
    }
  for (const auto& e : s.sample3b) EXPECT_EQ(e.channel, Channel::k3b);
  for (const auto& e : s.truth4b) EXPECT_EQ(e.truth, Truth::kBackground);
  EXPECT_NEAR(double(sig) / cfg.n_4b, 0.2, 3 * std::sqrt(0.2 * 0.8 / cfg.n_4b));

  cfg.signal_fraction = 0.0;
  for (const auto& e : generate(cfg).sample4b) EXPECT_NE(e.truth, Truth::kSignal);
}

TEST(Toygen, SignalPartonsSitAtHiggsMass) {
  const GenConfig cfg;
  for (std::uint64_t i = 0; i < 200; ++i) {
    CounterRng rng(5, 9, i);
    const auto raw = signal_event(cfg, rng, false);
    std::array<Jet, 4> jets{};
    for (int j = 0; j < 4; ++j) jets[j] = detail::jet_from(raw.p[j]);
    const Event ev = make_event(jets);
    const auto m = dijet_masses(ev, kPairings[0]);  // generation order is the truth pairing
    EXPECT_NEAR(m.m1, 125.0, 1e-9);
    EXPECT_NEAR(m.m2, 125.0, 1e-9);
    EXPECT_NEAR(m_hh(ev, kPairings[0]), invariant_mass(ev), 1e-9 * invariant_mass(ev));
  }
}

TEST(Toygen, FlavorComposition) {
  // categories drawn per event follow the normalized fractions
  const FlavorFractions f{0.10, 0.09, 0.80};
  const auto p = f.normalized();
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
  std::array<int, 3> count{};
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    CounterRng rng(4, 1, static_cast<std::uint64_t>(i));
    ++count[detail::draw_category(f, rng)];
  }
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(double(count[k]) / n, p[k], 3 * std::sqrt(p[k] * (1 - p[k]) / n));
  EXPECT_THROW((FlavorFractions{0, 0, 0}.normalized()), DataError);
}

TEST(Toygen, BoostKeepsPairMasses) {
  const GenConfig cfg;
  CounterRng rng(6, 1, 1);
  auto raw = background_event(cfg, 0, rng);
  const auto before = raw;
  detail::channel_boost(raw, 0.4, rng);
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) {
      const double m0 = mass_of(before.p[a] + before.p[b]), m1 = mass_of(raw.p[a] + raw.p[b]);
      EXPECT_NEAR(m0, m1, 1e-9 * (1 + m0));
    }
}

TEST(Toygen, FactorizedModeAbcd) {
  // region fractions do not depend on the channel, so abcd_mass is unbiased
  RegionParams rp;
  int inside = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    GenConfig cfg;
    cfg.factorized_mode = true;
    cfg.n_3b = 6000;
    cfg.n_4b = 1500;
    cfg.n_truth = 0;
    cfg.seed = 100 + seed;
    const auto s = generate(cfg);
    SampleCounts c;
    for (const auto& e : s.sample3b) {
      const auto r = classify_region(e, rp);
      if (r == Region::kSignal) ++c.n_s;
      else if (r == Region::kControl) ++c.n_c;
    }
    for (const auto& e : s.sample4b) {
      const auto r = classify_region(e, rp);
      if (r == Region::kSignal) ++c.m_s;
      else if (r == Region::kControl) ++c.m_c;
    }
    if (std::fabs(abcd_mass(c) - double(c.m_s)) <= 3 * abcd_sigma(c)) ++inside;
  }
  EXPECT_GE(inside, 18);
}

TEST(Toygen, InvalidConfig) {
  GenConfig cfg;
  cfg.signal_fraction = 1.0;
  EXPECT_THROW(generate(cfg), DataError);
  cfg = GenConfig{};
  cfg.frac_3b = {0, 0, 0};
  EXPECT_THROW(generate(cfg), DataError);
  cfg = GenConfig{};
  cfg.frac_4b = {-0.1, 0.5, 0.6};
  EXPECT_THROW(generate(cfg), DataError);
}
