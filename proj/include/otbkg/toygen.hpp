#pragma once

// Parametric stand-in for a physics Monte Carlo. Each background event is two
// "dijet systems" with masses drawn around the Higgs region, each decayed
// isotropically into two massless jets and boosted into the lab. Jet energies
// are smeared with sigma/E = sqrt(S^2/E + N^2/E^2 + C^2) and events carry the
// product of b-tag scale factors of their tagged jets as weight.
//
// The 3b and 4b channels differ through their flavor mix (flavor sets the
// system pt scale) and a transverse boost of the whole 4b event. A Lorentz
// boost keeps every jet-pair invariant mass, so it never moves an event
// between regions. In factorized mode the boost is the only channel
// difference, which makes the region fractions channel independent and the
// ABCD normalization unbiased.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/event.hpp"
#include "otbkg/parallel.hpp"
#include "otbkg/rng.hpp"

namespace otbkg {

enum class Flavor : std::uint8_t { kBottom, kCharm, kLight };

/// Event categories by quark content: 4b, 2b2c, 2b2l.
struct FlavorFractions {
  double bbbb = 0.0, bbcc = 0.0, bbll = 0.0;

  std::array<double, 3> normalized() const {
    const double s = bbbb + bbcc + bbll;
    if (!(s > 0.0)) throw DataError("flavor fractions must have a positive sum");
    return {bbbb / s, bbcc / s, bbll / s};
  }
};

struct SmearParams {
  double s = 0.98;   // stochastic term, sqrt(GeV)
  double n = 0.0;    // noise term, GeV
  double c = 0.054;  // constant term
};

struct GenConfig {
  std::size_t n_3b = 18000;
  std::size_t n_4b = 2500;
  std::size_t n_truth = 25000;  // signal-free held-out 4b sample (10x)
  double signal_fraction = 0.0;
  // As quoted; they sum to 1.01 and 0.99 and are normalized on use.
  FlavorFractions frac_4b{0.90, 0.07, 0.04};
  FlavorFractions frac_3b{0.10, 0.09, 0.80};
  SmearParams smear;
  bool factorized_mode = false;
  std::uint64_t seed = 1;

  // background shape
  double mass_center = 128.75;  // GeV, centre of the dijet-mass cloud
  double mass_width = 22.0;     // GeV
  double system_pt_shape = 3.0;  // Gamma shape of each dijet system pt
  double system_pt_scale = 45.0;  // GeV
  double rapidity_width = 0.8;
  double pt_min = 20.0;  // GeV, pre-smearing jet threshold

  // channel shift
  double flavor_pt_shift = 0.25;   // relative system-pt scale change per flavor step
  double flavor_mass_shift = 0.08;  // relative mass-width change per flavor step (off in factorized mode)
  double boost_4b = 0.25;           // max transverse velocity given to 4b events

  // signal
  double signal_pt_scale = 60.0;  // GeV, Gamma scale with the same shape

  void validate() const {
    if (!(signal_fraction >= 0.0 && signal_fraction < 1.0)) throw DataError("signal_fraction must be in [0, 1)");
    frac_3b.normalized();
    frac_4b.normalized();
    for (double f : {frac_3b.bbbb, frac_3b.bbcc, frac_3b.bbll, frac_4b.bbbb, frac_4b.bbcc, frac_4b.bbll})
      if (f < 0.0) throw DataError("flavor fractions must be nonnegative");
    if (smear.s < 0.0 || smear.n < 0.0 || smear.c < 0.0) throw DataError("smearing terms must be nonnegative");
    if (!(mass_width > 0.0 && system_pt_shape > 0.0 && system_pt_scale > 0.0 && rapidity_width > 0.0 &&
          signal_pt_scale > 0.0))
      throw DataError("generator shape parameters must be positive");
    if (!(pt_min >= 1.0)) throw DataError("pt_min must be at least 1 GeV");
    if (!(boost_4b >= 0.0 && boost_4b < 0.9)) throw DataError("boost_4b must be in [0, 0.9)");
    if (std::fabs(flavor_pt_shift) >= 0.9 || std::fabs(flavor_mass_shift) >= 0.9)
      throw DataError("flavor shifts must be smaller than 0.9 in magnitude");
  }
};

/// sigma(E) for the calorimeter resolution model.
inline double energy_resolution(double e, const SmearParams& p) {
  return e * std::sqrt(p.s * p.s / e + p.n * p.n / (e * e) + p.c * p.c);
}

/// Normal(e, sigma(e)^2) truncated below at floor (default 1 GeV).
template <typename Rng>
double smear_energy(double e, const SmearParams& p, Rng& rng, double floor = 1.0) {
  if (!(e > 0.0)) throw DataError("smear_energy: energy must be positive");
  const double sigma = energy_resolution(e, p);
  if (sigma == 0.0) return e;
  std::normal_distribution<double> g(e, sigma);
  for (int k = 0; k < 1000; ++k) {
    const double x = g(rng);
    if (x >= floor) return x;
  }
  return floor;
}

/// b-tagging scale factor, pt in TeV.
inline double scale_factor(Flavor f, double pt_tev) {
  switch (f) {
    case Flavor::kBottom: return (2.5 * pt_tev * std::exp(-7.0 * pt_tev) + 0.6) / 0.75;
    case Flavor::kCharm: return (pt_tev * std::exp(-10.0 * pt_tev) + 0.2) / 0.15;
    case Flavor::kLight: return (0.03 * pt_tev + 0.01) / 0.01;
  }
  throw DataError("scale_factor: unknown flavor");
}

inline Flavor parse_flavor(const std::string& s) {
  if (s == "b") return Flavor::kBottom;
  if (s == "c") return Flavor::kCharm;
  if (s == "light" || s == "l") return Flavor::kLight;
  throw DataError("unknown flavor '" + s + "' (expected b, c or light)");
}

struct GeneratedSample {
  std::vector<Event> sample3b, sample4b, truth4b;
};

namespace detail {

inline FourVector massless(double pt, double eta, double phi) {
  return {pt * std::cosh(eta), pt * std::cos(phi), pt * std::sin(phi), pt * std::sinh(eta)};
}

inline FourVector boost(const FourVector& p, double bx, double by, double bz) {
  const double b2 = bx * bx + by * by + bz * bz;
  if (b2 == 0.0) return p;
  const double g = 1.0 / std::sqrt(1.0 - b2);
  const double bp = bx * p.px + by * p.py + bz * p.pz;
  const double k = (g - 1.0) * bp / b2 + g * p.e;
  return {g * (p.e + bp), p.px + k * bx, p.py + k * by, p.pz + k * bz};
}

inline Jet jet_from(const FourVector& p) {
  const double pt = std::hypot(p.px, p.py);
  return Jet{pt, std::asinh(p.pz / pt), wrap_phi(std::atan2(p.py, p.px)), 0.0};
}

// Two massless daughters of a system with mass m, transverse momentum pt,
// rapidity y and azimuth phi; isotropic in the rest frame.
template <typename Rng>
std::array<FourVector, 2> decay(double m, double pt, double y, double phi, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), a(0.0, kTwoPi);
  const double ct = u(rng), st = std::sqrt(std::max(0.0, 1.0 - ct * ct)), ph = a(rng);
  const double h = 0.5 * m;
  const FourVector d1{h, h * st * std::cos(ph), h * st * std::sin(ph), h * ct};
  const FourVector d2{h, -d1.px, -d1.py, -d1.pz};
  const double mt = std::hypot(m, pt);
  const double e = mt * std::cosh(y), pz = mt * std::sinh(y);
  const double px = pt * std::cos(phi), py = pt * std::sin(phi);
  return {boost(d1, px / e, py / e, pz / e), boost(d2, px / e, py / e, pz / e)};
}

struct RawEvent {
  std::array<FourVector, 4> p;
  std::array<Flavor, 4> flavor;
};

template <typename Rng>
std::array<Flavor, 4> jet_flavors(int category, Rng& rng) {
  if (category == 0) return {Flavor::kBottom, Flavor::kBottom, Flavor::kBottom, Flavor::kBottom};
  const Flavor other = category == 1 ? Flavor::kCharm : Flavor::kLight;
  // which dijet system carries the non-b pair
  if (std::bernoulli_distribution(0.5)(rng)) return {other, other, Flavor::kBottom, Flavor::kBottom};
  return {Flavor::kBottom, Flavor::kBottom, other, other};
}

template <typename Rng>
bool accepted(const std::array<FourVector, 4>& p, double pt_min, Rng&) {
  for (const auto& v : p) {
    const double pt = std::hypot(v.px, v.py);
    if (!(pt >= pt_min)) return false;
    if (std::fabs(std::asinh(v.pz / pt)) > 2.5) return false;
  }
  return true;
}

}  // namespace detail

/// Background event before the channel boost. `flavor_step` is -1, 0, +1
/// for 4b-like, charm, light content (0 for every category in factorized
/// mode). Returns smeared jets.
template <typename Rng>
detail::RawEvent background_event(const GenConfig& cfg, int category, Rng& rng) {
  const int step = cfg.factorized_mode ? 0 : category;  // 0, 1, 2
  const double pt_scale = cfg.system_pt_scale * (1.0 - cfg.flavor_pt_shift * 0.5 * step);
  const double width = cfg.mass_width * (1.0 + (cfg.factorized_mode ? 0.0 : cfg.flavor_mass_shift * 0.5 * step));
  std::normal_distribution<double> mass(cfg.mass_center, width), rap(0.0, cfg.rapidity_width), dphi(0.0, 0.6);
  std::gamma_distribution<double> spt(cfg.system_pt_shape, pt_scale);
  std::uniform_real_distribution<double> az(0.0, kTwoPi);
  detail::RawEvent ev;
  ev.flavor = detail::jet_flavors(category, rng);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100000) throw NumericalError("toygen: acceptance too low for the configured shapes");
    const double m1 = mass(rng), m2 = mass(rng);
    if (m1 < 30.0 || m2 < 30.0) continue;
    const double phi1 = az(rng);
    const auto a = detail::decay(m1, spt(rng), rap(rng), phi1, rng);
    const auto b = detail::decay(m2, spt(rng), rap(rng), phi1 + kPi + dphi(rng), rng);
    ev.p = {a[0], a[1], b[0], b[1]};
    if (detail::accepted(ev.p, cfg.pt_min, rng)) break;
  }
  for (auto& v : ev.p) {
    // massless jets: smearing the energy scales the whole four-vector
    const double pt = std::hypot(v.px, v.py);
    const double floor = std::cosh(std::asinh(v.pz / pt));  // E >= cosh(eta) GeV keeps pt >= 1 GeV
    const double e = smear_energy(v.e, cfg.smear, rng, std::max(1.0, floor));
    v = (e / v.e) * v;
  }
  return ev;
}

/// Signal: two parents of mass exactly 125 GeV decayed to b pairs. With
/// smear = false the jets are the raw decay products.
template <typename Rng>
detail::RawEvent signal_event(const GenConfig& cfg, Rng& rng, bool smear = true) {
  std::normal_distribution<double> rap(0.0, cfg.rapidity_width), dphi(0.0, 0.3);
  std::gamma_distribution<double> spt(cfg.system_pt_shape, cfg.signal_pt_scale);
  std::uniform_real_distribution<double> az(0.0, kTwoPi);
  detail::RawEvent ev;
  ev.flavor = {Flavor::kBottom, Flavor::kBottom, Flavor::kBottom, Flavor::kBottom};
  for (int attempt = 0;; ++attempt) {
    if (attempt > 100000) throw NumericalError("toygen: signal acceptance too low");
    const double phi1 = az(rng);
    const auto a = detail::decay(125.0, spt(rng), rap(rng), phi1, rng);
    const auto b = detail::decay(125.0, spt(rng), rap(rng), phi1 + kPi + dphi(rng), rng);
    ev.p = {a[0], a[1], b[0], b[1]};
    if (detail::accepted(ev.p, cfg.pt_min, rng)) break;
  }
  if (smear)
    for (auto& v : ev.p) {
      const double pt = std::hypot(v.px, v.py);
      const double floor = std::cosh(std::asinh(v.pz / pt));
      v = (smear_energy(v.e, cfg.smear, rng, std::max(1.0, floor)) / v.e) * v;
    }
  return ev;
}

namespace detail {

// Transverse boost of the whole event, redrawn until every jet stays in the
// acceptance (|eta| <= 2.5, pt >= 1 GeV); falls back to no boost.
template <typename Rng>
void channel_boost(RawEvent& ev, double max_beta, Rng& rng) {
  if (max_beta <= 0.0) return;
  std::uniform_real_distribution<double> u(0.0, 1.0), az(0.0, kTwoPi);
  for (int k = 0; k < 50; ++k) {
    const double beta = max_beta * u(rng), dir = az(rng);
    std::array<FourVector, 4> q;
    for (int j = 0; j < 4; ++j) q[j] = boost(ev.p[j], beta * std::cos(dir), beta * std::sin(dir), 0.0);
    if (accepted(q, 1.0, rng)) {
      ev.p = q;
      return;
    }
  }
}

template <typename Rng>
Event finish(const RawEvent& raw, Channel ch, Truth truth, Rng& rng) {
  std::array<Jet, 4> jets{};
  for (int j = 0; j < 4; ++j) jets[j] = jet_from(raw.p[j]);
  // tagged jets: all four in 4b; in 3b one jet is untagged, a non-b one if any
  int untagged = -1;
  if (ch == Channel::k3b) {
    std::vector<int> nonb;
    for (int j = 0; j < 4; ++j)
      if (raw.flavor[j] != Flavor::kBottom) nonb.push_back(j);
    if (nonb.empty()) untagged = std::uniform_int_distribution<int>(0, 3)(rng);
    else untagged = nonb[std::uniform_int_distribution<std::size_t>(0, nonb.size() - 1)(rng)];
  }
  double w = 1.0;
  for (int j = 0; j < 4; ++j)
    if (j != untagged) w *= scale_factor(raw.flavor[j], jets[j].pt / 1000.0);
  // shuffle jet order so nothing downstream can read flavor from position
  std::shuffle(jets.begin(), jets.end(), rng);
  return make_event(jets, w, ch, truth);
}

template <typename Rng>
int draw_category(const FlavorFractions& f, Rng& rng) {
  const auto p = f.normalized();
  std::discrete_distribution<int> d({p[0], p[1], p[2]});
  return d(rng);
}

inline constexpr std::uint64_t kStream3b = 1, kStream4b = 2, kStreamTruth = 3;

}  // namespace detail

/// One event of a stream; depends only on (seed, stream, index).
inline Event generate_event(const GenConfig& cfg, std::uint64_t stream, std::uint64_t index) {
  CounterRng rng(cfg.seed, stream, index);
  if (stream == detail::kStream3b) {
    auto raw = background_event(cfg, detail::draw_category(cfg.frac_3b, rng), rng);
    return detail::finish(raw, Channel::k3b, Truth::kBackground, rng);
  }
  if (stream == detail::kStream4b && cfg.signal_fraction > 0.0 &&
      std::bernoulli_distribution(cfg.signal_fraction)(rng)) {
    auto raw = signal_event(cfg, rng);
    return detail::finish(raw, Channel::k4b, Truth::kSignal, rng);
  }
  auto raw = background_event(cfg, detail::draw_category(cfg.frac_4b, rng), rng);
  detail::channel_boost(raw, cfg.boost_4b, rng);
  return detail::finish(raw, Channel::k4b, Truth::kBackground, rng);
}

inline std::vector<Event> generate_stream(const GenConfig& cfg, std::uint64_t stream, std::size_t n,
                                          unsigned threads = 0) {
  std::vector<Event> out(n);
  parallel_for(n, [&](std::size_t i) { out[i] = generate_event(cfg, stream, i); }, threads);
  return out;
}

inline GeneratedSample generate(const GenConfig& cfg, unsigned threads = 0) {
  cfg.validate();
  GeneratedSample s;
  s.sample3b = generate_stream(cfg, detail::kStream3b, cfg.n_3b, threads);
  s.sample4b = generate_stream(cfg, detail::kStream4b, cfg.n_4b, threads);
  GenConfig truth_cfg = cfg;
  truth_cfg.signal_fraction = 0.0;  // truth sample is background only
  s.truth4b = generate_stream(truth_cfg, detail::kStreamTruth, cfg.n_truth, threads);
  return s;
}

/// Signal-only template sample (for likelihood templates and SvB training).
inline std::vector<Event> generate_signal(const GenConfig& cfg, std::size_t n, std::uint64_t stream = 4,
                                          unsigned threads = 0) {
  cfg.validate();
  std::vector<Event> out(n);
  parallel_for(
      n,
      [&](std::size_t i) {
        CounterRng rng(cfg.seed, stream, i);
        auto raw = signal_event(cfg, rng);
        out[i] = detail::finish(raw, Channel::k4b, Truth::kSignal, rng);
      },
      threads);
  return out;
}

}  // namespace otbkg
