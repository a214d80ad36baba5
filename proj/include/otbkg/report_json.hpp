#pragma once

// JSON forms of histograms and fit reports. Non-finite numbers are written
// as null.

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "otbkg/error.hpp"
#include "otbkg/inference.hpp"

namespace otbkg {

inline nlohmann::ordered_json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

inline nlohmann::ordered_json to_json(const Histogram& h) {
  nlohmann::ordered_json j;
  j["edges"] = h.edges;
  j["content"] = h.content;
  j["sumw2"] = h.sumw2;
  j["underflow"] = h.underflow;
  j["overflow"] = h.overflow;
  j["label"] = h.label;
  return j;
}

inline Histogram histogram_from_json(const nlohmann::ordered_json& j) {
  Histogram h;
  try {
    h.edges = j.at("edges").get<std::vector<double>>();
    h.content = j.at("content").get<std::vector<double>>();
    h.sumw2 = j.at("sumw2").get<std::vector<double>>();
    h.underflow = j.at("underflow").get<double>();
    h.overflow = j.at("overflow").get<double>();
    h.label = j.value("label", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("histogram JSON: ") + e.what());
  }
  h.validate();
  return h;
}

/// Fit report: {mu_hat, q0, z, logl0, logl_hat, bins}, bins holding the
/// per-bin background, signal and data contents with the shared edges.
inline nlohmann::ordered_json to_json(const SignalFit& f, const Histogram& background, const Histogram& signal,
                                      const Histogram& data) {
  nlohmann::ordered_json j;
  j["mu_hat"] = f.mu_hat;
  j["q0"] = finite_or_null(f.q0);
  j["z"] = finite_or_null(f.z);
  j["logl0"] = finite_or_null(f.logl0);
  j["logl_hat"] = f.logl_hat;
  nlohmann::ordered_json bins;
  bins["edges"] = data.edges;
  bins["background"] = background.content;
  bins["background_sumw2"] = background.sumw2;
  bins["signal"] = signal.content;
  bins["data"] = data.content;
  j["bins"] = bins;
  j["sigma_mu"] = finite_or_null(f.sigma_mu);
  return j;
}

inline nlohmann::ordered_json to_json(const std::vector<RatioRow>& rows) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["ratio"] = finite_or_null(r.ratio);
    row["bar"] = finite_or_null(r.bar);
    row["band"] = finite_or_null(r.band);
    row["empty_truth"] = r.empty_truth;
    j.push_back(row);
  }
  return j;
}

}  // namespace otbkg
