#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "otbkg/inference.hpp"
#include "support/latent_toy.hpp"

using namespace otbkg;

namespace {

Histogram single(double v) {
  Histogram h = empty_histogram({0.0, 1.0});
  h.content[0] = v;
  h.sumw2[0] = v;
  return h;
}

Histogram from(const std::vector<double>& v) {
  Histogram h = empty_histogram(uniform_edges(v.size(), 0.0, 1.0));
  h.content = v;
  h.sumw2 = v;
  return h;
}

}  // namespace

TEST(Histogram, Binning) {
  const auto e = uniform_edges(4, 0.0, 1.0);
  const auto empty = bin_values(std::vector<double>{}, std::vector<double>{}, e);
  EXPECT_EQ(empty.total(), 0.0);

  const auto one = bin_values(std::vector<double>{0.6}, std::vector<double>{1.0}, e);
  EXPECT_EQ(one.content, (std::vector<double>{0, 0, 1, 0}));

  const auto two = bin_values(std::vector<double>{0.1, 0.2}, std::vector<double>{2.0, 3.0}, e);
  EXPECT_EQ(two.content[0], 5.0);
  EXPECT_EQ(two.sumw2[0], 13.0);

  // left-closed bins, last bin closed on both sides
  const auto edges = bin_values(std::vector<double>{0.0, 0.25, 1.0, -0.1, 1.1}, std::vector<double>{1, 1, 1, 2, 3}, e);
  EXPECT_EQ(edges.content, (std::vector<double>{1, 1, 0, 1}));
  EXPECT_EQ(edges.underflow, 2.0);
  EXPECT_EQ(edges.overflow, 3.0);
  EXPECT_THROW(bin_values(std::vector<double>{NAN}, std::vector<double>{1}, e), DataError);
  EXPECT_THROW(empty_histogram({0.0, 0.0}), DataError);
}

TEST(Histogram, ConservesWeight) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> x(0.5, 0.4);
  std::uniform_int_distribution<int> w(0, 7);
  std::vector<double> xs, ws;
  double total = 0.0;
  for (int i = 0; i < 10000; ++i) {
    xs.push_back(x(rng));
    ws.push_back(0.25 * w(rng));  // dyadic weights sum exactly
    total += ws.back();
  }
  const auto h = bin_values(xs, ws, uniform_edges(10, 0.0, 1.0));
  EXPECT_EQ(h.total() + h.underflow + h.overflow, total);
}

TEST(Histogram, BinEventsUsesScoreFunction) {
  std::vector<Event> evs;
  for (double pt : {50.0, 150.0, 250.0}) {
    std::array<Jet, 4> j{};
    for (auto& jet : j) jet = Jet{pt, 0.1, 0.2, 0.0};
    evs.push_back(make_event(j));
  }
  const std::vector<double> w(3, 1.0);
  const auto h = bin_events(evs, w, [](const Event& e) { return e.jets[0].pt; }, {0, 100, 200, 300}, "pt");
  EXPECT_EQ(h.content, (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(h.label, "pt");
}

TEST(Likelihood, ClosedForms) {
  const auto b = single(10), s0 = single(0), d = single(10);
  const double expected = 10 * std::log(10.0) - 10 - std::lgamma(11.0);
  EXPECT_NEAR(binned_loglik(0.0, b, s0, d), expected, 1e-12);
  EXPECT_NEAR(binned_loglik(3.0, b, s0, d), expected, 1e-12);
  // real-valued data: each bin is maximized at nu = D
  const auto s = single(2);
  const auto dd = single(14);
  EXPECT_GT(binned_loglik(2.0, b, s, dd), binned_loglik(1.9, b, s, dd));
  EXPECT_GT(binned_loglik(2.0, b, s, dd), binned_loglik(2.1, b, s, dd));
  EXPECT_THROW(binned_loglik(0.0, single(0), single(0), single(1)), DataError);
}

TEST(Likelihood, ConcaveInMu) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.5, 50);
  std::poisson_distribution<int> pois(20);
  for (int inst = 0; inst < 50; ++inst) {
    std::vector<double> bv(6), sv(6), dv(6);
    for (int j = 0; j < 6; ++j) {
      bv[j] = u(rng);
      sv[j] = 0.2 * u(rng);
      dv[j] = pois(rng);
    }
    const auto b = from(bv), s = from(sv), d = from(dv);
    const double h = 0.05;
    for (double mu = h; mu < 5; mu += 0.25) {
      const double second = binned_loglik(mu + h, b, s, d) - 2 * binned_loglik(mu, b, s, d) + binned_loglik(mu - h, b, s, d);
      EXPECT_LT(second, 1e-9);
    }
  }
}

TEST(FitMu, SingleBinClosedForm) {
  EXPECT_NEAR(fit_mu(single(10), single(5), single(20)).mu_hat, 2.0, 1e-8);
  const auto f = fit_mu(single(10), single(5), single(8));
  EXPECT_EQ(f.mu_hat, 0.0);
  EXPECT_EQ(f.q0, 0.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 100);
  for (int t = 0; t < 200; ++t) {
    const double B = u(rng), S = u(rng), D = std::floor(u(rng));
    const auto fit = fit_mu(single(B), single(S), single(D));
    EXPECT_NEAR(fit.mu_hat, std::max(0.0, (D - B) / S), 1e-8);
    EXPECT_GE(fit.q0, 0.0);
    EXPECT_DOUBLE_EQ(fit.z, std::sqrt(fit.q0));
    EXPECT_NEAR(fit.q0, 2 * (fit.logl_hat - fit.logl0), 1e-9);
  }
  EXPECT_THROW(fit_mu(single(10), single(0), single(3)), DataError);
}

TEST(FitMu, ZeroBackgroundBin) {
  const auto f = fit_mu(from({0.0, 5.0}), from({1.0, 1.0}), from({3.0, 5.0}));
  EXPECT_GT(f.mu_hat, 0.0);
  EXPECT_TRUE(std::isfinite(f.logl_hat));
  EXPECT_TRUE(std::isinf(f.q0));
}

TEST(FitMu, NullToysPileUpAtZero) {
  std::mt19937_64 rng(4);
  const std::vector<double> bv{40, 30, 20, 12, 6, 3}, sv{0.5, 1, 2, 4, 6, 8};
  const auto b = from(bv), s = from(sv);
  int zero = 0;
  const int toys = 500;
  for (int t = 0; t < toys; ++t) {
    std::vector<double> dv(bv.size());
    for (std::size_t j = 0; j < bv.size(); ++j) dv[j] = std::poisson_distribution<int>(bv[j])(rng);
    if (fit_mu(b, s, from(dv)).q0 == 0.0) ++zero;
  }
  EXPECT_NEAR(double(zero) / toys, 0.5, 0.08);
}

TEST(RatioPlot, Rows) {
  const auto same = ratio_plot_data(from({3, 4}), from({3, 4}));
  for (const auto& r : same) EXPECT_EQ(r.ratio, 1.0);
  const auto rows = ratio_plot_data(from({90, 1}), from({100, 0}));
  EXPECT_DOUBLE_EQ(rows[0].ratio, 0.9);
  EXPECT_DOUBLE_EQ(rows[0].band, 0.1);
  EXPECT_DOUBLE_EQ(rows[0].bar, std::sqrt(90.0) / 100);
  EXPECT_TRUE(rows[1].empty_truth);
  EXPECT_TRUE(std::isnan(rows[1].ratio));
  EXPECT_THROW(ratio_plot_data(from({1, 2}), from({1, 2, 3})), DataError);
}

TEST(Closure, SameDistributionIsChance) {
  std::mt19937_64 rng(5);
  std::vector<Event> truth, atoms;
  for (const auto& e : oracle::latent_sample(rng, 0.0, 6000)) truth.push_back(e.event);
  for (const auto& e : oracle::latent_sample(rng, 0.0, 3000)) atoms.push_back(e.event);
  NetConfig cfg;
  cfg.epochs = 10;
  ClosureOptions opt;
  opt.bootstrap_replications = 200;
  const auto r = closure_auc(estimate_raw3b(atoms.size()), atoms, truth, cfg, 9, opt);
  EXPECT_GE(r.auc.point, 0.47);
  EXPECT_LE(r.auc.point, 0.53);
  EXPECT_LE(r.auc.lo, r.auc.point);
  EXPECT_GE(r.auc.hi, r.auc.point);
}

TEST(Closure, ShiftedSampleIsDetected) {
  std::mt19937_64 rng(6);
  std::vector<Event> truth, atoms;
  for (const auto& e : oracle::latent_sample(rng, 0.6, 4000)) truth.push_back(e.event);
  for (const auto& e : oracle::latent_sample(rng, 0.0, 4000)) atoms.push_back(e.event);
  NetConfig cfg;
  cfg.epochs = 10;
  ClosureOptions opt;
  opt.bootstrap_replications = 100;
  const auto r = closure_auc(estimate_raw3b(atoms.size()), atoms, truth, cfg, 10, opt);
  EXPECT_GT(r.auc.point, 0.6);

  // reweighting the atoms by the true ratio closes the gap
  std::vector<double> w;
  for (const auto& e : atoms) {
    const double x = std::log(e.jets[0].pt / 50.0) / 0.3;  // leading jet carries the latent
    w.push_back(oracle::latent_ratio(x, 0.0, 0.6));
  }
  WeightedEstimate est = estimate_raw3b(atoms.size());
  est.weights = w;
  const auto closed = closure_auc(est, atoms, truth, cfg, 10, opt);
  EXPECT_LT(closed.auc.point, 0.54);
}
