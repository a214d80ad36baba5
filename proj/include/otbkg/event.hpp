#pragma once

// Event model and event-level kinematics: jets as (pt, eta, phi, m), the
// symmetry group acting on events, dijet pairing, Control/Signal Region
// geometry and the observables built on top of them.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include "otbkg/error.hpp"

namespace otbkg {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Representative of phi in [0, 2pi).
inline double wrap_phi(double phi) {
  double r = std::fmod(phi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  // fmod of a tiny negative value can round up to exactly 2pi
  if (r >= kTwoPi) r = 0.0;
  return r;
}

/// Wrapped angular difference in [0, pi].
inline double delta_phi(double a, double b) {
  double d = std::fabs(std::fmod(a - b, kTwoPi));
  return d > kPi ? kTwoPi - d : d;
}

struct Jet {
  double pt = 0.0;    // GeV
  double eta = 0.0;
  double phi = 0.0;   // radians, [0, 2pi) once canonicalized
  double mass = 0.0;  // GeV
};

enum class Channel : std::uint8_t { k3b, k4b };
enum class Truth : std::uint8_t { kNone, kBackground, kSignal };

struct Event {
  std::array<Jet, 4> jets{};
  double weight = 1.0;
  Channel channel = Channel::k3b;
  Truth truth = Truth::kNone;

  double scalar_pt() const {
    double s = 0.0;
    for (const auto& j : jets) s += j.pt;
    return s;
  }
};

/// Throws DataError unless every jet has finite pt > 0, mass >= 0 and the
/// weight is finite and nonnegative.
inline void validate(const Event& ev) {
  for (const auto& j : ev.jets) {
    if (!(std::isfinite(j.pt) && std::isfinite(j.eta) && std::isfinite(j.phi) &&
          std::isfinite(j.mass)))
      throw DataError("event has a non-finite jet coordinate");
    if (!(j.pt > 0.0)) throw DataError("jet pt must be positive");
    if (j.mass < 0.0) throw DataError("jet mass must be nonnegative");
  }
  if (!std::isfinite(ev.weight) || ev.weight < 0.0)
    throw DataError("event weight must be finite and nonnegative");
}

/// Validates and canonicalizes phi of every jet.
inline Event make_event(const std::array<Jet, 4>& jets, double weight = 1.0,
                        Channel channel = Channel::k3b, Truth truth = Truth::kNone) {
  Event ev{jets, weight, channel, truth};
  for (auto& j : ev.jets) j.phi = wrap_phi(j.phi);
  validate(ev);
  return ev;
}

/// eta = -ln(tan(theta / 2)) for theta in (0, pi).
inline double pseudorapidity(double theta) {
  if (!(theta > 0.0 && theta < kPi))
    throw std::domain_error("pseudorapidity: polar angle must lie in (0, pi)");
  return -std::log(std::tan(0.5 * theta));
}

struct FourVector {
  double e = 0.0, px = 0.0, py = 0.0, pz = 0.0;

  FourVector& operator+=(const FourVector& o) {
    e += o.e;
    px += o.px;
    py += o.py;
    pz += o.pz;
    return *this;
  }
  friend FourVector operator+(FourVector a, const FourVector& b) { return a += b; }
  friend FourVector operator*(double s, FourVector v) {
    v.e *= s;
    v.px *= s;
    v.py *= s;
    v.pz *= s;
    return v;
  }
  double mass2() const { return e * e - (px * px + py * py + pz * pz); }
};

// Number of times a negative m^2 radicand was clamped to zero. Purely
// diagnostic; rounding near m = 0 is expected to trigger it occasionally.
inline std::atomic<std::uint64_t>& negative_mass2_clamps() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Massless convention: E = pt cosh(eta); the jet mass field is not used.
inline FourVector four_vector(const Jet& j) {
  return {j.pt * std::cosh(j.eta), j.pt * std::cos(j.phi), j.pt * std::sin(j.phi),
          j.pt * std::sinh(j.eta)};
}

inline double mass_of(const FourVector& p) {
  const double m2 = p.mass2();
  if (m2 < 0.0) {
    negative_mass2_clamps().fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  return std::sqrt(m2);
}

inline double invariant_mass(std::span<const Jet> jets) {
  if (jets.empty()) throw DataError("invariant_mass: empty jet list");
  FourVector sum;
  for (const auto& j : jets) sum += four_vector(j);
  return mass_of(sum);
}

inline double invariant_mass(const Event& ev) { return invariant_mass(std::span<const Jet>(ev.jets)); }

struct DijetPairing {
  std::array<int, 2> pair1{0, 1};
  std::array<int, 2> pair2{2, 3};
  friend bool operator==(const DijetPairing&, const DijetPairing&) = default;
};

// The three unordered partitions of {0,1,2,3} into pairs, in lexicographic
// order of the pair containing jet 0.
inline constexpr std::array<DijetPairing, 3> kPairings{{
    {{0, 1}, {2, 3}},
    {{0, 2}, {1, 3}},
    {{0, 3}, {1, 2}},
}};

inline FourVector dijet_vector(const Event& ev, const std::array<int, 2>& p) {
  return four_vector(ev.jets[p[0]]) + four_vector(ev.jets[p[1]]);
}

struct DijetMasses {
  double m1 = 0.0, m2 = 0.0;
};

inline DijetMasses dijet_masses(const Event& ev, const DijetPairing& p) {
  return {mass_of(dijet_vector(ev, p.pair1)), mass_of(dijet_vector(ev, p.pair2))};
}

/// Partition minimizing |m(g1) - m(g2)|; exact ties (to 1e-12 relative) go to
/// the lexicographically smallest pair1.
inline DijetPairing pair_dijets(const Event& ev) {
  std::size_t best = 0;
  double best_diff = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < kPairings.size(); ++k) {
    const auto m = dijet_masses(ev, kPairings[k]);
    const double d = std::fabs(m.m1 - m.m2);
    if (d < best_diff - 1e-12 * (1.0 + std::max(m.m1, m.m2))) {
      best_diff = d;
      best = k;
    }
  }
  return kPairings[best];
}

struct RegionParams {
  double m_h = 125.0;     // GeV
  double sigma_c = 1.03;  // Control Region center, in units of m_h
  double kappa_s = 0.16;  // Signal Region radius (relative-mass units)
  double kappa_c = 30.0;  // Control Region radius, GeV

  void validate() const {
    if (!(m_h > 0 && sigma_c > 0 && kappa_s > 0 && kappa_c > 0))
      throw DataError("region parameters must all be strictly positive");
  }
};

enum class Region : std::uint8_t { kSignal, kControl, kOutside };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::kSignal: return "SR";
    case Region::kControl: return "CR";
    default: return "outside";
  }
}

inline double sr_distance(double m1, double m2, const RegionParams& p) {
  const double a = 1.0 - p.m_h / m1;
  const double b = 1.0 - p.m_h / m2;
  return std::sqrt(a * a + b * b);
}

inline double cr_distance(double m1, double m2, const RegionParams& p) {
  const double c = p.sigma_c * p.m_h;
  return std::hypot(m1 - c, m2 - c);
}

inline Region classify_masses(double m1, double m2, const RegionParams& p) {
  if (!(m1 > 0.0 && m2 > 0.0))
    throw NumericalError("classify_region: zero dijet mass");
  if (sr_distance(m1, m2, p) <= p.kappa_s) return Region::kSignal;
  if (cr_distance(m1, m2, p) <= p.kappa_c) return Region::kControl;
  return Region::kOutside;
}

inline Region classify_region(const Event& ev, const RegionParams& p) {
  const auto m = dijet_masses(ev, pair_dijets(ev));
  return classify_masses(m.m1, m.m2, p);
}

/// Four-jet mass after each dijet four-vector is rescaled to mass m_h.
inline double m_hh(const Event& ev, const DijetPairing& pairing, double m_h = 125.0) {
  const FourVector g1 = dijet_vector(ev, pairing.pair1);
  const FourVector g2 = dijet_vector(ev, pairing.pair2);
  const double m1 = mass_of(g1), m2 = mass_of(g2);
  if (!(m1 > 0.0 && m2 > 0.0)) throw NumericalError("m_hh: zero dijet mass");
  return mass_of((m_h / m1) * g1 + (m_h / m2) * g2);
}

inline double m_hh(const Event& ev, double m_h = 125.0) { return m_hh(ev, pair_dijets(ev), m_h); }

struct SymmetryTransform {
  double delta = 0.0;  // rotation in phi
  int iota1 = 1;       // eta reflection sign
  int iota2 = 1;       // phi reflection sign
};

inline Jet apply_symmetry(Jet j, const SymmetryTransform& t) {
  j.eta = t.iota1 * j.eta;
  j.phi = wrap_phi(t.delta + t.iota2 * j.phi);
  return j;
}

inline Event apply_symmetry(Event ev, const SymmetryTransform& t) {
  for (auto& j : ev.jets) j = apply_symmetry(j, t);
  return ev;
}

inline double delta_r(const Jet& a, const Jet& b) {
  return std::hypot(a.eta - b.eta, delta_phi(a.phi, b.phi));
}

struct JetPairDistances {
  double close = 0.0;  // smallest angular distance among the 6 jet pairs
  double other = 0.0;  // distance within the two remaining jets
};

inline JetPairDistances delta_r_close_other(const Event& ev) {
  JetPairDistances out{std::numeric_limits<double>::infinity(), 0.0};
  for (const auto& p : kPairings) {
    const double d1 = delta_r(ev.jets[p.pair1[0]], ev.jets[p.pair1[1]]);
    const double d2 = delta_r(ev.jets[p.pair2[0]], ev.jets[p.pair2[1]]);
    if (d1 < out.close) out = {d1, d2};
    if (d2 < out.close) out = {d2, d1};
  }
  return out;
}

}  // namespace otbkg
