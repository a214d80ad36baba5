#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "otbkg/error.hpp"
#include "otbkg/event.hpp"
#include "otbkg/text.hpp"

namespace otbkg {

inline constexpr std::string_view kEventCsvHeader =
    "pt1,eta1,phi1,m1,pt2,eta2,phi2,m2,pt3,eta3,phi3,m3,pt4,eta4,phi4,m4,weight,channel,truth";

inline const char* to_string(Channel c) { return c == Channel::k4b ? "4b" : "3b"; }

inline const char* to_string(Truth t) {
  switch (t) {
    case Truth::kBackground: return "bkg";
    case Truth::kSignal: return "sig";
    default: return "na";
  }
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline std::vector<Event> read_events(std::istream& in, const std::string& name = "<stream>") {
  std::vector<Event> events;
  std::string line;
  if (!std::getline(in, line)) return events;  // empty file: no events
  if (detail::trim_cr(line) != kEventCsvHeader)
    throw DataError(name + ":1: unexpected header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto f = detail::split_csv(sv);
    if (f.size() != 19) throw DataError(where + ": expected 19 fields");
    std::array<Jet, 4> jets;
    for (int k = 0; k < 4; ++k) {
      jets[k].pt = parse_double(f[4 * k + 0], where);
      jets[k].eta = parse_double(f[4 * k + 1], where);
      jets[k].phi = parse_double(f[4 * k + 2], where);
      jets[k].mass = parse_double(f[4 * k + 3], where);
    }
    const double weight = parse_double(f[16], where);
    Channel channel;
    if (f[17] == "3b") channel = Channel::k3b;
    else if (f[17] == "4b") channel = Channel::k4b;
    else throw DataError(where + ": channel must be 3b or 4b");
    Truth truth;
    if (f[18] == "bkg") truth = Truth::kBackground;
    else if (f[18] == "sig") truth = Truth::kSignal;
    else if (f[18] == "na") truth = Truth::kNone;
    else throw DataError(where + ": truth must be bkg, sig or na");
    try {
      events.push_back(make_event(jets, weight, channel, truth));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return events;
}

inline std::vector<Event> read_events(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open event file " + path);
  return read_events(in, path);
}

inline void write_events(std::ostream& out, std::span<const Event> events) {
  out << kEventCsvHeader << '\n';
  for (const auto& ev : events) {
    for (const auto& j : ev.jets) {
      out << format_double(j.pt) << ',' << format_double(j.eta) << ','
          << format_double(j.phi) << ',' << format_double(j.mass) << ',';
    }
    out << format_double(ev.weight) << ',' << to_string(ev.channel) << ','
        << to_string(ev.truth) << '\n';
  }
}

inline void write_events(const std::string& path, std::span<const Event> events) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write event file " + path);
  write_events(out, events);
}

}  // namespace otbkg
