#pragma once

// Four-vs-three style probabilistic classifier on 4-jet events.
//
// Jets (sorted by pt) -> 6 dijet pixels, one per jet pair, each followed by a
// residual layer -> 3 quadjet pixels built from the sum and absolute
// difference of their two dijets (order-free within a quadjet), residual
// layer -> softmax-score weighted sum into one event pixel. The event pixel
// is averaged over the four eta/phi reflection images of the event, which
// makes the output reflection invariant; a 2-way softmax gives psi.
//
// Parameter count with width C and F = 5 jet features:
//   4C^2 + C(2F + 11) + 2   with engineered features
//   4C^2 + C(2F + 7) + 2    without
// (dijet layer C(2F+1) [+2C], dijet residual C^2+C, quadjet layer 2C^2+C
// [+2C], quadjet residual C^2+C, quadjet score C, output 2C+2).

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/event.hpp"
#include "otbkg/parallel.hpp"
#include "otbkg/text.hpp"

namespace otbkg {

inline constexpr int kJetFeatures = 5;

struct NetConfig {
  int channel_width = 8;
  bool use_engineered_features = true;
  bool rotation_augmentation = true;
  double learning_rate = 3e-3;
  int batch_size = 128;
  int epochs = 30;
  std::uint64_t seed = 1;
  double prob_clamp_eps = 1e-4;
  double validation_fraction = 0.2;
  int patience = 6;  // epochs without validation improvement before stopping
  double beta1 = 0.9, beta2 = 0.999;

  void validate() const {
    if (channel_width < 1) throw DataError("net: channel_width must be >= 1");
    if (!(prob_clamp_eps > 0.0 && prob_clamp_eps < 0.5)) throw DataError("net: prob_clamp_eps must be in (0, 0.5)");
    if (!(learning_rate > 0.0)) throw DataError("net: learning_rate must be positive");
    if (batch_size < 1) throw DataError("net: batch_size must be >= 1");
    if (epochs < 1) throw DataError("net: epochs must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw DataError("net: validation_fraction must be in [0, 1)");
    if (patience < 1) throw DataError("net: patience must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw DataError("net: Adam betas must be in [0, 1)");
  }
};

struct EpochLog {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct RatioModel {
  NetConfig config;
  std::vector<double> parameters;
  std::vector<EpochLog> training_log;
  int best_epoch = -1;
};

inline std::size_t parameter_count(const NetConfig& cfg) {
  const std::size_t c = static_cast<std::size_t>(cfg.channel_width);
  const std::size_t f = kJetFeatures;
  return 4 * c * c + c * (2 * f + (cfg.use_engineered_features ? 11 : 7)) + 2;
}

namespace detail {

// Offsets of each block in the flat parameter vector.
struct NetLayout {
  int c = 0;
  bool eng = true;
  std::size_t A, B, E, b1, R1, r1, U, V, Q, b2, R2, r2, ws, Wo, bo, total;

  explicit NetLayout(const NetConfig& cfg) : c(cfg.channel_width), eng(cfg.use_engineered_features) {
    const std::size_t C = static_cast<std::size_t>(c), F = kJetFeatures;
    std::size_t o = 0;
    auto take = [&](std::size_t n) {
      const std::size_t at = o;
      o += n;
      return at;
    };
    A = take(C * F);
    B = take(C * F);
    E = take(eng ? C * 2 : 0);
    b1 = take(C);
    R1 = take(C * C);
    r1 = take(C);
    U = take(C * C);
    V = take(C * C);
    Q = take(eng ? C * 2 : 0);
    b2 = take(C);
    R2 = take(C * C);
    r2 = take(C);
    ws = take(C);
    Wo = take(2 * C);
    bo = take(2);
    total = o;
  }
};

inline constexpr std::array<std::array<int, 2>, 6> kDijetPairs{{{0, 1}, {2, 3}, {0, 2}, {1, 3}, {0, 3}, {1, 2}}};
inline constexpr std::array<std::array<int, 2>, 4> kImageSigns{{{1, 1}, {-1, 1}, {1, -1}, {-1, -1}}};

// Network inputs for one event (before reflection images).
struct EventInputs {
  std::array<std::array<double, kJetFeatures>, 4> jets{};  // pt-sorted
  std::array<std::array<double, 2>, 6> dijet{};
  std::array<std::array<double, 2>, 3> quadjet{};
};

inline EventInputs make_inputs(const Event& ev, double rotation = 0.0) {
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return ev.jets[a].pt > ev.jets[b].pt; });
  Event sorted = ev;
  for (int k = 0; k < 4; ++k) {
    sorted.jets[k] = ev.jets[order[k]];
    sorted.jets[k].phi += rotation;
  }
  EventInputs in;
  for (int k = 0; k < 4; ++k) {
    const Jet& j = sorted.jets[k];
    in.jets[k] = {std::log(j.pt / 50.0), j.eta, std::cos(j.phi), std::sin(j.phi), j.mass / 50.0};
  }
  for (int p = 0; p < 6; ++p) {
    const auto [a, b] = kDijetPairs[p];
    const std::array<Jet, 2> two{sorted.jets[a], sorted.jets[b]};
    in.dijet[p] = {invariant_mass(two) / 100.0, delta_r(sorted.jets[a], sorted.jets[b])};
  }
  const RegionParams rp;
  for (int q = 0; q < 3; ++q) {
    const auto& pairing = kPairings[q];
    const auto m = dijet_masses(sorted, pairing);
    if (m.m1 > 0.0 && m.m2 > 0.0)
      in.quadjet[q] = {m_hh(sorted, pairing, rp.m_h) / 500.0, sr_distance(m.m1, m.m2, rp)};
    else
      in.quadjet[q] = {0.0, 0.0};
  }
  return in;
}

// Activations of one reflection image, kept for the backward pass.
struct ImageCache {
  std::vector<double> x;     // 4 x F
  std::vector<double> z1;    // 6 x C
  std::vector<double> h1;    // 6 x C
  std::vector<double> z1r;   // 6 x C
  std::vector<double> d;     // 6 x C
  std::vector<double> s, t;  // 3 x C (sum, |diff|)
  std::vector<double> z2, h2, z2r, q;  // 3 x C
  std::array<double, 3> alpha{};
  std::vector<double> ev;  // C
};

class NetEvaluator {
 public:
  explicit NetEvaluator(const NetConfig& cfg) : L_(cfg), C_(cfg.channel_width) {
    const std::size_t C = static_cast<std::size_t>(C_);
    for (auto& im : img_) {
      im.x.resize(4 * kJetFeatures);
      for (auto* v : {&im.z1, &im.h1, &im.z1r, &im.d}) v->resize(6 * C);
      for (auto* v : {&im.s, &im.t, &im.z2, &im.h2, &im.z2r, &im.q}) v->resize(3 * C);
      im.ev.resize(C);
    }
    ev_avg_.resize(C);
    scratch_.resize(6 * C);
    scratch2_.resize(6 * C);
  }

  const NetLayout& layout() const { return L_; }

  /// Logit difference z with psi = sigmoid(z).
  double forward(const std::vector<double>& w, const EventInputs& in) {
    const std::size_t C = static_cast<std::size_t>(C_), F = kJetFeatures;
    for (int r = 0; r < 4; ++r) {
      ImageCache& im = img_[r];
      const double se = kImageSigns[r][0], sp = kImageSigns[r][1];
      for (int k = 0; k < 4; ++k) {
        const auto& f = in.jets[k];
        double* x = &im.x[k * F];
        x[0] = f[0];
        x[1] = se * f[1];
        x[2] = f[2];
        x[3] = sp * f[3];
        x[4] = f[4];
      }
      for (int p = 0; p < 6; ++p) {
        const double* xa = &im.x[kDijetPairs[p][0] * F];
        const double* xb = &im.x[kDijetPairs[p][1] * F];
        for (std::size_t c = 0; c < C; ++c) {
          double z = w[L_.b1 + c];
          const double* a = &w[L_.A + c * F];
          const double* b = &w[L_.B + c * F];
          for (std::size_t f = 0; f < F; ++f) z += a[f] * xa[f] + b[f] * xb[f];
          if (L_.eng) z += w[L_.E + 2 * c] * in.dijet[p][0] + w[L_.E + 2 * c + 1] * in.dijet[p][1];
          im.z1[p * C + c] = z;
          im.h1[p * C + c] = z > 0.0 ? z : 0.0;
        }
        for (std::size_t c = 0; c < C; ++c) {
          double z = w[L_.r1 + c];
          const double* row = &w[L_.R1 + c * C];
          for (std::size_t k = 0; k < C; ++k) z += row[k] * im.h1[p * C + k];
          im.z1r[p * C + c] = z;
          im.d[p * C + c] = im.h1[p * C + c] + (z > 0.0 ? z : 0.0);
        }
      }
      std::array<double, 3> score{};
      for (int q = 0; q < 3; ++q) {
        const double* da = &im.d[(2 * q) * C];
        const double* db = &im.d[(2 * q + 1) * C];
        for (std::size_t c = 0; c < C; ++c) {
          im.s[q * C + c] = da[c] + db[c];
          im.t[q * C + c] = std::fabs(da[c] - db[c]);
        }
        for (std::size_t c = 0; c < C; ++c) {
          double z = w[L_.b2 + c];
          const double* u = &w[L_.U + c * C];
          const double* v = &w[L_.V + c * C];
          for (std::size_t k = 0; k < C; ++k) z += u[k] * im.s[q * C + k] + v[k] * im.t[q * C + k];
          if (L_.eng) z += w[L_.Q + 2 * c] * in.quadjet[q][0] + w[L_.Q + 2 * c + 1] * in.quadjet[q][1];
          im.z2[q * C + c] = z;
          im.h2[q * C + c] = z > 0.0 ? z : 0.0;
        }
        double sc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          double z = w[L_.r2 + c];
          const double* row = &w[L_.R2 + c * C];
          for (std::size_t k = 0; k < C; ++k) z += row[k] * im.h2[q * C + k];
          im.z2r[q * C + c] = z;
          im.q[q * C + c] = im.h2[q * C + c] + (z > 0.0 ? z : 0.0);
          sc += w[L_.ws + c] * im.q[q * C + c];
        }
        score[q] = sc;
      }
      const double mx = std::max({score[0], score[1], score[2]});
      double norm = 0.0;
      for (int q = 0; q < 3; ++q) norm += (im.alpha[q] = std::exp(score[q] - mx));
      for (int q = 0; q < 3; ++q) im.alpha[q] /= norm;
      for (std::size_t c = 0; c < C; ++c)
        im.ev[c] = im.alpha[0] * im.q[c] + im.alpha[1] * im.q[C + c] + im.alpha[2] * im.q[2 * C + c];
    }
    // Pairing (id + eta) and (phi + both) keeps the sum bitwise symmetric
    // under either reflection.
    double z = w[L_.bo + 1] - w[L_.bo];
    for (std::size_t c = 0; c < C; ++c) {
      ev_avg_[c] = 0.25 * ((img_[0].ev[c] + img_[1].ev[c]) + (img_[2].ev[c] + img_[3].ev[c]));
      z += (w[L_.Wo + C + c] - w[L_.Wo + c]) * ev_avg_[c];
    }
    return z;
  }

  /// Accumulates g * dz/dw into grad; requires the preceding forward().
  void backward(const std::vector<double>& w, const EventInputs& in, double g, std::vector<double>& grad) {
    const std::size_t C = static_cast<std::size_t>(C_), F = kJetFeatures;
    grad[L_.bo + 1] += g;
    grad[L_.bo] -= g;
    std::vector<double>& dev = scratch_;  // first C entries
    for (std::size_t c = 0; c < C; ++c) {
      grad[L_.Wo + C + c] += g * ev_avg_[c];
      grad[L_.Wo + c] -= g * ev_avg_[c];
      dev[c] = 0.25 * g * (w[L_.Wo + C + c] - w[L_.Wo + c]);
    }
    for (int r = 0; r < 4; ++r) {
      ImageCache& im = img_[r];
      // dq for the 3 quadjets
      std::array<double, 3> dalpha{};
      for (int q = 0; q < 3; ++q) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += dev[c] * im.q[q * C + c];
        dalpha[q] = s;
      }
      const double mean = im.alpha[0] * dalpha[0] + im.alpha[1] * dalpha[1] + im.alpha[2] * dalpha[2];
      std::vector<double>& dd = scratch2_;  // 6 x C gradient wrt dijet pixels
      std::fill(dd.begin(), dd.end(), 0.0);
      for (int q = 0; q < 3; ++q) {
        const double dscore = im.alpha[q] * (dalpha[q] - mean);
        std::array<double, 64> dq_small{};
        std::vector<double> dq_big;
        double* dq = dq_small.data();
        if (C > dq_small.size()) {
          dq_big.assign(C, 0.0);
          dq = dq_big.data();
        }
        for (std::size_t c = 0; c < C; ++c) {
          grad[L_.ws + c] += dscore * im.q[q * C + c];
          dq[c] = im.alpha[q] * dev[c] + dscore * w[L_.ws + c];
        }
        // q = h2 + relu(z2r)
        std::array<double, 64> dh_small{};
        std::vector<double> dh_big;
        double* dh2 = dh_small.data();
        if (C > dh_small.size()) {
          dh_big.assign(C, 0.0);
          dh2 = dh_big.data();
        }
        for (std::size_t c = 0; c < C; ++c) dh2[c] = dq[c];
        for (std::size_t c = 0; c < C; ++c) {
          if (im.z2r[q * C + c] <= 0.0) continue;
          const double dz = dq[c];
          grad[L_.r2 + c] += dz;
          for (std::size_t k = 0; k < C; ++k) {
            grad[L_.R2 + c * C + k] += dz * im.h2[q * C + k];
            dh2[k] += dz * w[L_.R2 + c * C + k];
          }
        }
        // h2 = relu(z2)
        const double* da = &im.d[(2 * q) * C];
        const double* db = &im.d[(2 * q + 1) * C];
        double* gda = &dd[(2 * q) * C];
        double* gdb = &dd[(2 * q + 1) * C];
        for (std::size_t c = 0; c < C; ++c) {
          if (im.z2[q * C + c] <= 0.0) continue;
          const double dz = dh2[c];
          grad[L_.b2 + c] += dz;
          if (L_.eng) {
            grad[L_.Q + 2 * c] += dz * in.quadjet[q][0];
            grad[L_.Q + 2 * c + 1] += dz * in.quadjet[q][1];
          }
          for (std::size_t k = 0; k < C; ++k) {
            grad[L_.U + c * C + k] += dz * im.s[q * C + k];
            grad[L_.V + c * C + k] += dz * im.t[q * C + k];
            const double ds = dz * w[L_.U + c * C + k];
            const double dt = dz * w[L_.V + c * C + k];
            const double diff = da[k] - db[k];
            const double sg = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            gda[k] += ds + sg * dt;
            gdb[k] += ds - sg * dt;
          }
        }
      }
      for (int p = 0; p < 6; ++p) {
        const double* ddp = &dd[p * C];
        std::array<double, 64> dh_small{};
        std::vector<double> dh_big;
        double* dh1 = dh_small.data();
        if (C > dh_small.size()) {
          dh_big.assign(C, 0.0);
          dh1 = dh_big.data();
        }
        for (std::size_t c = 0; c < C; ++c) dh1[c] = ddp[c];
        for (std::size_t c = 0; c < C; ++c) {
          if (im.z1r[p * C + c] <= 0.0) continue;
          const double dz = ddp[c];
          grad[L_.r1 + c] += dz;
          for (std::size_t k = 0; k < C; ++k) {
            grad[L_.R1 + c * C + k] += dz * im.h1[p * C + k];
            dh1[k] += dz * w[L_.R1 + c * C + k];
          }
        }
        const double* xa = &im.x[kDijetPairs[p][0] * F];
        const double* xb = &im.x[kDijetPairs[p][1] * F];
        for (std::size_t c = 0; c < C; ++c) {
          if (im.z1[p * C + c] <= 0.0) continue;
          const double dz = dh1[c];
          grad[L_.b1 + c] += dz;
          for (std::size_t f = 0; f < F; ++f) {
            grad[L_.A + c * F + f] += dz * xa[f];
            grad[L_.B + c * F + f] += dz * xb[f];
          }
          if (L_.eng) {
            grad[L_.E + 2 * c] += dz * in.dijet[p][0];
            grad[L_.E + 2 * c + 1] += dz * in.dijet[p][1];
          }
        }
      }
    }
  }

 private:
  NetLayout L_;
  int C_;
  std::array<ImageCache, 4> img_;
  std::vector<double> ev_avg_, scratch_, scratch2_;
};

// log(1 + e^x) without overflow
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Cross-entropy of label y at logit difference z.
inline double cross_entropy(double z, int y) { return y == 1 ? softplus(-z) : softplus(z); }

}  // namespace detail

/// Fresh model with parameters drawn uniformly from +-1/sqrt(fan_in).
inline RatioModel build_model(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  RatioModel m;
  m.config = config;
  m.config.seed = seed;
  const detail::NetLayout L(config);
  m.parameters.assign(L.total, 0.0);
  std::mt19937_64 rng(seed);
  const std::size_t C = static_cast<std::size_t>(config.channel_width);
  auto fill = [&](std::size_t at, std::size_t n, double fan_in) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (std::size_t k = 0; k < n; ++k) m.parameters[at + k] = u(rng);
  };
  const double dijet_in = 2.0 * kJetFeatures + (L.eng ? 2 : 0);
  const double quad_in = 2.0 * C + (L.eng ? 2 : 0);
  fill(L.A, C * kJetFeatures, dijet_in);
  fill(L.B, C * kJetFeatures, dijet_in);
  if (L.eng) fill(L.E, 2 * C, dijet_in);
  fill(L.b1, C, dijet_in);
  fill(L.R1, C * C, static_cast<double>(C));
  fill(L.r1, C, static_cast<double>(C));
  fill(L.U, C * C, quad_in);
  fill(L.V, C * C, quad_in);
  if (L.eng) fill(L.Q, 2 * C, quad_in);
  fill(L.b2, C, quad_in);
  fill(L.R2, C * C, static_cast<double>(C));
  fill(L.r2, C, static_cast<double>(C));
  fill(L.ws, C, static_cast<double>(C));
  fill(L.Wo, 2 * C, static_cast<double>(C));
  fill(L.bo, 2, static_cast<double>(C));
  if (m.parameters.size() != parameter_count(config)) throw NumericalError("ratio net: layout mismatch");
  return m;
}

/// Unclamped logit difference log(psi / (1 - psi)).
inline double predict_logit(const RatioModel& model, const Event& ev) {
  detail::NetEvaluator net(model.config);
  return net.forward(model.parameters, detail::make_inputs(ev));
}

/// psi(g) = P(class 1 | g), clamped to [eps, 1 - eps].
inline double predict(const RatioModel& model, const Event& ev) {
  const double eps = model.config.prob_clamp_eps;
  return std::clamp(detail::sigmoid(predict_logit(model, ev)), eps, 1.0 - eps);
}

inline std::vector<double> predict_all(const RatioModel& model, std::span<const Event> events,
                                       unsigned threads = 0) {
  std::vector<double> out(events.size());
  const std::size_t block = 256;
  const std::size_t nblocks = (events.size() + block - 1) / block;
  const double eps = model.config.prob_clamp_eps;
  parallel_for(
      nblocks,
      [&](std::size_t b) {
        detail::NetEvaluator net(model.config);
        const std::size_t end = std::min(events.size(), (b + 1) * block);
        for (std::size_t i = b * block; i < end; ++i)
          out[i] = std::clamp(detail::sigmoid(net.forward(model.parameters, detail::make_inputs(events[i]))), eps,
                              1.0 - eps);
      },
      threads);
  return out;
}

/// psi / (1 - psi) with clamped psi.
inline double odds_from_psi(double psi) { return psi / (1.0 - psi); }
inline double odds_ratio(const RatioModel& model, const Event& ev) { return odds_from_psi(predict(model, ev)); }

/// Weighted mean cross-entropy and its gradient (no augmentation).
inline double loss_and_gradient(const RatioModel& model, std::span<const Event> events, std::span<const int> labels,
                                std::span<const double> weights, std::vector<double>& grad) {
  require(events.size() == labels.size() && events.size() == weights.size(), "loss: length mismatch");
  detail::NetEvaluator net(model.config);
  grad.assign(model.parameters.size(), 0.0);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  require(wsum > 0.0, "loss: total weight must be positive");
  double loss = 0.0;
  for (std::size_t n = 0; n < events.size(); ++n) {
    const auto in = detail::make_inputs(events[n]);
    const double z = net.forward(model.parameters, in);
    loss += weights[n] * detail::cross_entropy(z, labels[n]);
    const double g = weights[n] * (detail::sigmoid(z) - labels[n]) / wsum;
    net.backward(model.parameters, in, g, grad);
  }
  return loss / wsum;
}

/// Trains class0 (label 0) vs class1 (label 1) with weighted cross-entropy
/// and Adam. A fraction of the events (seeded shuffle) is held out; the
/// parameters with the lowest held-out loss are kept.
inline RatioModel train(RatioModel model, std::span<const Event> class0, std::span<const Event> class1,
                        std::span<const double> weights0 = {}, std::span<const double> weights1 = {}) {
  const NetConfig& cfg = model.config;
  cfg.validate();
  require(!class0.empty() && !class1.empty(), "train: both classes must be nonempty");
  require(weights0.empty() || weights0.size() == class0.size(), "train: class-0 weight length mismatch");
  require(weights1.empty() || weights1.size() == class1.size(), "train: class-1 weight length mismatch");

  struct Item {
    detail::EventInputs in;  // unrotated inputs (validation)
    const Event* ev;
    int label;
    double weight;
  };
  std::vector<Item> items;
  items.reserve(class0.size() + class1.size());
  for (std::size_t i = 0; i < class0.size(); ++i)
    items.push_back({detail::make_inputs(class0[i]), &class0[i], 0, weights0.empty() ? 1.0 : weights0[i]});
  for (std::size_t i = 0; i < class1.size(); ++i)
    items.push_back({detail::make_inputs(class1[i]), &class1[i], 1, weights1.empty() ? 1.0 : weights1[i]});
  for (const auto& it : items)
    if (!(it.weight >= 0.0) || !std::isfinite(it.weight)) throw DataError("train: weights must be finite and >= 0");

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(items.size())));
  std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  std::vector<std::size_t> tr(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  if (tr.empty()) throw DataError("train: no training events left after the validation split");

  detail::NetEvaluator net(cfg);
  auto& w = model.parameters;
  std::vector<double> grad(w.size()), m1(w.size(), 0.0), m2(w.size(), 0.0);
  std::vector<double> best = w;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::uniform_real_distribution<double> rot(0.0, kTwoPi);
  std::int64_t step = 0;

  auto eval_loss = [&](const std::vector<std::size_t>& idx) {
    double loss = 0.0, wsum = 0.0;
    for (auto i : idx) {
      const double z = net.forward(w, items[i].in);
      loss += items[i].weight * detail::cross_entropy(z, items[i].label);
      wsum += items[i].weight;
    }
    return wsum > 0.0 ? loss / wsum : 0.0;
  };

  model.training_log.clear();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(tr.begin(), tr.end(), rng);
    double epoch_loss = 0.0, epoch_w = 0.0;
    for (std::size_t start = 0; start < tr.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(tr.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double delta = cfg.rotation_augmentation ? rot(rng) : 0.0;
      double bw = 0.0;
      for (std::size_t k = start; k < end; ++k) bw += items[tr[k]].weight;
      if (!(bw > 0.0)) continue;
      std::fill(grad.begin(), grad.end(), 0.0);
      double bl = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const Item& it = items[tr[k]];
        const auto in = delta != 0.0 ? detail::make_inputs(*it.ev, delta) : it.in;
        const double z = net.forward(w, in);
        bl += it.weight * detail::cross_entropy(z, it.label);
        net.backward(w, in, it.weight * (detail::sigmoid(z) - it.label) / bw, grad);
      }
      if (!std::isfinite(bl))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                             std::to_string(start));
      epoch_loss += bl;
      epoch_w += bw;
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < w.size(); ++p) {
        m1[p] = cfg.beta1 * m1[p] + (1.0 - cfg.beta1) * grad[p];
        m2[p] = cfg.beta2 * m2[p] + (1.0 - cfg.beta2) * grad[p] * grad[p];
        w[p] -= cfg.learning_rate * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + 1e-8);
      }
    }
    EpochLog log;
    log.train_loss = epoch_w > 0.0 ? epoch_loss / epoch_w : 0.0;
    log.val_loss = val.empty() ? log.train_loss : eval_loss(val);
    if (!std::isfinite(log.val_loss) || !std::isfinite(log.train_loss))
      throw NumericalError("train: non-finite loss after epoch " + std::to_string(epoch));
    model.training_log.push_back(log);
    if (log.val_loss < best_val) {
      best_val = log.val_loss;
      best = w;
      model.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  w = best;
  return model;
}

// Model file: "otbkg-ratio-model <version>", key=value config lines, the
// per-epoch log, then "parameters <n>" and one 16-digit hex IEEE-754 bit
// pattern per line.
inline constexpr int kModelVersion = 1;

inline void write_model(std::ostream& out, const RatioModel& m) {
  const auto& c = m.config;
  out << "otbkg-ratio-model " << kModelVersion << '\n';
  out << "channel_width=" << c.channel_width << '\n';
  out << "use_engineered_features=" << (c.use_engineered_features ? 1 : 0) << '\n';
  out << "rotation_augmentation=" << (c.rotation_augmentation ? 1 : 0) << '\n';
  out << "learning_rate=" << format_double(c.learning_rate) << '\n';
  out << "batch_size=" << c.batch_size << '\n';
  out << "epochs=" << c.epochs << '\n';
  out << "seed=" << c.seed << '\n';
  out << "prob_clamp_eps=" << format_double(c.prob_clamp_eps) << '\n';
  out << "validation_fraction=" << format_double(c.validation_fraction) << '\n';
  out << "patience=" << c.patience << '\n';
  out << "beta1=" << format_double(c.beta1) << '\n';
  out << "beta2=" << format_double(c.beta2) << '\n';
  out << "best_epoch=" << m.best_epoch << '\n';
  for (const auto& e : m.training_log)
    out << "epoch_loss=" << format_double(e.train_loss) << ',' << format_double(e.val_loss) << '\n';
  out << "parameters " << m.parameters.size() << '\n';
  char buf[20];
  for (double v : m.parameters) {
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
    out << buf << '\n';
  }
}

inline void write_model(const std::string& path, const RatioModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file " + path);
  write_model(out, m);
}

inline RatioModel read_model(std::istream& in, const std::string& name = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(name + ": empty model file");
  {
    std::istringstream ss(line);
    std::string magic;
    int version = 0;
    if (!(ss >> magic >> version) || magic != "otbkg-ratio-model") throw DataError(name + ": not a model file");
    if (version != kModelVersion)
      throw DataError(name + ": model file version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kModelVersion) + ")");
  }
  RatioModel m;
  auto& c = m.config;
  std::size_t lineno = 1;
  std::size_t count = 0;
  bool have_params = false;
  auto as_int = [&](const std::string& v, const std::string& where) {
    const double d = parse_double(v, where);
    if (d != std::floor(d)) throw DataError(where + ": expected an integer");
    return static_cast<long long>(d);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = name + ":" + std::to_string(lineno);
    if (line.rfind("parameters ", 0) == 0) {
      count = parse_index(line.substr(11), where);
      have_params = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(where + ": expected key=value");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "channel_width") c.channel_width = static_cast<int>(as_int(val, where));
    else if (key == "use_engineered_features") c.use_engineered_features = as_int(val, where) != 0;
    else if (key == "rotation_augmentation") c.rotation_augmentation = as_int(val, where) != 0;
    else if (key == "learning_rate") c.learning_rate = parse_double(val, where);
    else if (key == "batch_size") c.batch_size = static_cast<int>(as_int(val, where));
    else if (key == "epochs") c.epochs = static_cast<int>(as_int(val, where));
    else if (key == "seed") c.seed = parse_index(val, where);
    else if (key == "prob_clamp_eps") c.prob_clamp_eps = parse_double(val, where);
    else if (key == "validation_fraction") c.validation_fraction = parse_double(val, where);
    else if (key == "patience") c.patience = static_cast<int>(as_int(val, where));
    else if (key == "beta1") c.beta1 = parse_double(val, where);
    else if (key == "beta2") c.beta2 = parse_double(val, where);
    else if (key == "best_epoch") m.best_epoch = static_cast<int>(as_int(val, where));
    else if (key == "epoch_loss") {
      const auto comma = val.find(',');
      if (comma == std::string::npos) throw DataError(where + ": epoch_loss needs two values");
      m.training_log.push_back({parse_double(val.substr(0, comma), where), parse_double(val.substr(comma + 1), where)});
    } else {
      throw DataError(where + ": unknown key '" + key + "'");
    }
  }
  if (!have_params) throw DataError(name + ": missing parameter block");
  c.validate();
  if (count != parameter_count(c))
    throw DataError(name + ": parameter count " + std::to_string(count) + " does not match the configured architecture (" +
                    std::to_string(parameter_count(c)) + ")");
  m.parameters.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    if (!std::getline(in, line)) throw DataError(name + ": truncated parameter block");
    ++lineno;
    std::uint64_t bits = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), bits, 16);
    if (ec != std::errc{} || ptr != line.data() + line.size() || line.size() != 16)
      throw DataError(name + ":" + std::to_string(lineno) + ": bad hex parameter");
    m.parameters.push_back(std::bit_cast<double>(bits));
  }
  return m;
}

inline RatioModel read_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path);
  return read_model(in, path);
}

}  // namespace otbkg
