// otbkg: command-line pipeline
//   gen -> split -> dist -> couple -> train-fvt / train-svb -> estimate
//   -> validate -> test
// Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "otbkg/emd.hpp"
#include "otbkg/estimators.hpp"
#include "otbkg/event_io.hpp"
#include "otbkg/inference.hpp"
#include "otbkg/ratio_net.hpp"
#include "otbkg/report_json.hpp"
#include "otbkg/rng.hpp"
#include "otbkg/toygen.hpp"
#include "otbkg/transport.hpp"
#include "provenance.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace otbkg;
using namespace otbkg::cli;

namespace {

// Usage problems found after parsing (missing prerequisites and the like).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------- options

struct RegionOpts {
  RegionParams p;
  void add(CLI::App* c) {
    c->add_option("--mh", p.m_h, "Higgs mass in GeV")->capture_default_str();
    c->add_option("--sigma-c", p.sigma_c, "control region centre in units of m_H")->capture_default_str();
    c->add_option("--kappa-s", p.kappa_s, "signal region radius (relative mass units)")->capture_default_str();
    c->add_option("--kappa-c", p.kappa_c, "control region radius in GeV")->capture_default_str();
  }
  json to_json() const { return {{"m_h", p.m_h}, {"sigma_c", p.sigma_c}, {"kappa_s", p.kappa_s}, {"kappa_c", p.kappa_c}}; }
};

struct MetricOpts {
  MetricParams p;
  explicit MetricOpts(double r) { p.r = r; }
  void add(CLI::App* c, const std::string& rflag) {
    c->add_option(rflag, p.r, "EMD angular scale R")->capture_default_str();
    c->add_option("--grid", p.grid_size, "rotations tried per reflection")->capture_default_str();
    c->add_option("--refine", p.refine_iters, "line-search steps per refinement round (0: grid only)")->capture_default_str();
  }
  json to_json() const { return {{"r", p.r}, {"grid", p.grid_size}, {"refine", p.refine_iters}}; }
};

struct NetOpts {
  NetConfig c;
  bool no_eng = false, no_rot = false;
  void add(CLI::App* a) {
    a->add_option("--width", c.channel_width, "channels per pixel")->capture_default_str();
    a->add_option("--epochs", c.epochs)->capture_default_str();
    a->add_option("--batch", c.batch_size)->capture_default_str();
    a->add_option("--lr", c.learning_rate)->capture_default_str();
    a->add_option("--patience", c.patience)->capture_default_str();
    a->add_option("--val-fraction", c.validation_fraction)->capture_default_str();
    a->add_option("--clamp-eps", c.prob_clamp_eps)->capture_default_str();
    a->add_option("--net-seed", c.seed, "initialization and shuffling seed")->capture_default_str();
    a->add_flag("--no-engineered", no_eng, "drop dijet/quadjet engineered features");
    a->add_flag("--no-rotation", no_rot, "disable per-batch phi rotation");
  }
  NetConfig get() const {
    NetConfig out = c;
    out.use_engineered_features = !no_eng;
    out.rotation_augmentation = !no_rot;
    return out;
  }
  json to_json() const {
    const auto g = get();
    return {{"width", g.channel_width}, {"epochs", g.epochs}, {"batch", g.batch_size},
            {"lr", g.learning_rate},   {"patience", g.patience}, {"val_fraction", g.validation_fraction},
            {"clamp_eps", g.prob_clamp_eps}, {"seed", g.seed}, {"engineered", g.use_engineered_features},
            {"rotation", g.rotation_augmentation}};
  }
};

SampleCounts read_counts(const std::string& path) {
  const json j = read_json(path);
  SampleCounts c;
  try {
    c.n_c = j.at("n_c").get<std::size_t>();
    c.n_s = j.at("n_s").get<std::size_t>();
    c.m_c = j.at("m_c").get<std::size_t>();
    c.m_s = j.value("m_s", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return c;
}

std::vector<double> event_weights(std::span<const Event> evs, bool use) {
  std::vector<double> w(evs.size(), 1.0);
  if (use)
    for (std::size_t i = 0; i < evs.size(); ++i) w[i] = evs[i].weight;
  return w;
}

// ---------------------------------------------------------------- gen

struct GenCmd {
  std::string out;
  GenConfig cfg;
  std::size_t n_signal = 5000;
  unsigned threads = 0;

  void add(CLI::App* c) {
    c->add_option("--out", out, "output directory")->required();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    c->add_option("--n3b", cfg.n_3b)->capture_default_str();
    c->add_option("--n4b", cfg.n_4b)->capture_default_str();
    c->add_option("--ntruth", cfg.n_truth, "held-out signal-free 4b events")->capture_default_str();
    c->add_option("--nsignal", n_signal, "signal template events")->capture_default_str();
    c->add_option("--signal-fraction", cfg.signal_fraction)->capture_default_str();
    c->add_flag("--factorized", cfg.factorized_mode, "channel shift independent of the dijet masses");
    c->add_option("--boost-4b", cfg.boost_4b)->capture_default_str();
    c->add_option("--flavor-pt-shift", cfg.flavor_pt_shift)->capture_default_str();
    c->add_option("--flavor-mass-shift", cfg.flavor_mass_shift)->capture_default_str();
    c->add_option("--threads", threads)->capture_default_str();
  }

  int run() const {
    cfg.validate();
    ensure_dir(out);
    const auto s = generate(cfg, threads);
    const auto sig = generate_signal(cfg, n_signal, 4, threads);
    const json conf = {{"seed", cfg.seed},
                       {"n3b", cfg.n_3b},
                       {"n4b", cfg.n_4b},
                       {"ntruth", cfg.n_truth},
                       {"nsignal", n_signal},
                       {"signal_fraction", cfg.signal_fraction},
                       {"factorized", cfg.factorized_mode},
                       {"boost_4b", cfg.boost_4b},
                       {"flavor_pt_shift", cfg.flavor_pt_shift},
                       {"flavor_mass_shift", cfg.flavor_mass_shift},
                       {"smear", {cfg.smear.s, cfg.smear.n, cfg.smear.c}},
                       {"frac_4b", {cfg.frac_4b.bbbb, cfg.frac_4b.bbcc, cfg.frac_4b.bbll}},
                       {"frac_3b", {cfg.frac_3b.bbbb, cfg.frac_3b.bbcc, cfg.frac_3b.bbll}}};
    const std::vector<std::pair<std::string, const std::vector<Event>*>> files{
        {"3b.csv", &s.sample3b}, {"4b.csv", &s.sample4b}, {"truth4b.csv", &s.truth4b}, {"signal.csv", &sig}};
    for (const auto& [name, evs] : files) {
      const auto path = join(out, name);
      write_events(path, *evs);
      write_meta(path, "gen", conf, {});
    }
    std::printf("wrote %zu 3b, %zu 4b, %zu truth 4b, %zu signal events to %s\n", s.sample3b.size(),
                s.sample4b.size(), s.truth4b.size(), sig.size(), out.c_str());
    return 0;
  }
};

// ---------------------------------------------------------------- split

struct SplitCmd {
  std::vector<std::string> inputs;
  std::string out;
  RegionOpts region;

  void add(CLI::App* c) {
    c->add_option("--in", inputs, "event CSV files (any channel mix)")->required();
    c->add_option("--out", out, "output directory")->required();
    region.add(c);
  }

  int run() const {
    region.p.validate();
    ensure_dir(out);
    std::map<std::string, std::vector<Event>> parts{{"3b_CR", {}}, {"3b_SR", {}}, {"4b_CR", {}}, {"4b_SR", {}}};
    std::size_t total = 0, outside3 = 0, outside4 = 0;
    for (const auto& in : inputs) {
      for (const auto& e : read_events(in)) {
        ++total;
        const Region r = classify_region(e, region.p);
        const bool four = e.channel == Channel::k4b;
        if (r == Region::kOutside) {
          ++(four ? outside4 : outside3);
          continue;
        }
        parts[std::string(four ? "4b_" : "3b_") + (r == Region::kSignal ? "SR" : "CR")].push_back(e);
      }
    }
    const json conf = {{"region", region.to_json()}};
    for (const auto& [name, evs] : parts) {
      const auto path = join(out, name + ".csv");
      write_events(path, evs);
      write_meta(path, "split", conf, inputs);
    }
    json counts = {{"n_c", parts["3b_CR"].size()},
                   {"n_s", parts["3b_SR"].size()},
                   {"m_c", parts["4b_CR"].size()},
                   {"m_s", parts["4b_SR"].size()},
                   {"outside_3b", outside3},
                   {"outside_4b", outside4},
                   {"input_events", total},
                   {"config_hash", config_hash(conf)}};
    const auto cpath = join(out, "counts.json");
    write_json(cpath, counts);
    write_meta(cpath, "split", conf, inputs);
    std::printf("3b: CR %zu SR %zu outside %zu | 4b: CR %zu SR %zu outside %zu\n", parts["3b_CR"].size(),
                parts["3b_SR"].size(), outside3, parts["4b_CR"].size(), parts["4b_SR"].size(), outside4);
    return 0;
  }
};

// ---------------------------------------------------------------- dist

struct DistCmd {
  std::string a, b, out;
  MetricOpts metric{0.4};
  unsigned threads = 0;

  void add(CLI::App* c) {
    c->add_option("--a", a, "row events (CR 3b)")->required();
    c->add_option("--b", b, "column events (SR 3b)")->required();
    c->add_option("--out", out, "binary distance matrix")->required();
    metric.add(c, "--r");
    c->add_option("--threads", threads)->capture_default_str();
  }

  int run() const {
    const auto ea = read_events(a), eb = read_events(b);
    const auto d = distance_matrix(ea, eb, metric.p, threads);
    write_distance_matrix(out, d, metric.p);
    write_meta(out, "dist", {{"metric", metric.to_json()}}, {a, b});
    std::printf("%zu x %zu distances written to %s\n", d.rows(), d.cols(), out.c_str());
    return 0;
  }
};

// ---------------------------------------------------------------- couple

struct CoupleCmd {
  std::string dist, out;

  void add(CLI::App* c) {
    c->add_option("--dist", dist, "distance matrix from `dist`")->required();
    c->add_option("--out", out, "coupling text file")->required();
  }

  int run() const {
    const auto d = read_distance_matrix(dist);
    const auto cp = uniform_coupling(d.values);
    write_coupling(out, cp);
    write_meta(out, "couple", {{"marginals", "uniform"}}, {dist});
    std::printf("coupling %zu x %zu, %zu entries, objective %.10g\n", cp.n_rows, cp.n_cols, cp.entries.size(),
                cp.objective);
    return 0;
  }
};

// ---------------------------------------------------------------- training

void print_log(const RatioModel& m) {
  for (std::size_t e = 0; e < m.training_log.size(); ++e)
    std::printf("epoch %2zu  train %.5f  val %.5f%s\n", e, m.training_log[e].train_loss, m.training_log[e].val_loss,
                static_cast<int>(e) == m.best_epoch ? "  *" : "");
}

struct TrainFvtCmd {
  std::string class0, class1, out;
  NetOpts net;

  void add(CLI::App* c) {
    c->add_option("--class0", class0, "3b control region events")->required();
    c->add_option("--class1", class1, "4b control region events")->required();
    c->add_option("--out", out, "model file")->required();
    net.add(c);
  }

  int run() const {
    const auto e0 = read_events(class0), e1 = read_events(class1);
    if (e0.empty() || e1.empty()) throw DataError("train-fvt: both classes need events");
    const auto cfg = net.get();
    const auto m = train(build_model(cfg, cfg.seed), e0, e1);
    print_log(m);
    write_model(out, m);
    write_meta(out, "train-fvt", {{"net", net.to_json()}}, {class0, class1});
    return 0;
  }
};

struct TrainSvbCmd {
  std::string background, signal, out;
  NetOpts net;

  void add(CLI::App* c) {
    c->add_option("--background", background, "background events (label 0)")->required();
    c->add_option("--signal", signal, "signal events (label 1)")->required();
    c->add_option("--out", out, "model file")->required();
    net.add(c);
  }

  int run() const {
    const auto b = read_events(background), s = read_events(signal);
    if (b.empty() || s.empty()) throw DataError("train-svb: both classes need events");
    // equal total weight per class
    const double n = static_cast<double>(b.size() + s.size());
    const std::vector<double> wb(b.size(), 0.5 * n / static_cast<double>(b.size()));
    const std::vector<double> ws(s.size(), 0.5 * n / static_cast<double>(s.size()));
    const auto cfg = net.get();
    const auto m = train(build_model(cfg, cfg.seed), b, s, wb, ws);
    print_log(m);
    write_model(out, m);
    write_meta(out, "train-svb", {{"net", net.to_json()}, {"balanced", true}}, {background, signal});
    return 0;
  }
};

// ---------------------------------------------------------------- estimate

struct EstimateCmd {
  std::string method, counts_path, sr3b, cr3b, cr4b, model, coupling, out;
  std::string scatter_with, scatter_out;
  std::size_t k = 10;
  MetricOpts metric{2.75};
  bool probability = false;
  unsigned threads = 0;

  void add(CLI::App* c) {
    c->add_option("--method", method, "fvt, ot-fvt or ot-knn")->required()->check(CLI::IsMember({"fvt", "ot-fvt", "ot-knn"}));
    c->add_option("--counts", counts_path, "counts.json from `split`")->required();
    c->add_option("--sr3b", sr3b, "3b signal region events (the atoms)")->required();
    c->add_option("--cr3b", cr3b, "3b control region events (ot-fvt, ot-knn)");
    c->add_option("--cr4b", cr4b, "4b control region events (ot-knn)");
    c->add_option("--model", model, "FvT model (fvt, ot-fvt)");
    c->add_option("--coupling", coupling, "coupling from `couple` (ot-fvt, ot-knn)");
    c->add_option("--k", k, "neighbours for ot-knn")->capture_default_str();
    metric.add(c, "--r-knn");
    c->add_flag("--probability", probability, "normalize to 1 instead of the ABCD mass");
    c->add_option("--scatter-with", scatter_with, "second estimate file for a weight-vs-weight table");
    c->add_option("--scatter-out", scatter_out, "CSV for the weight-vs-weight table");
    c->add_option("--out", out, "estimate CSV")->required();
    c->add_option("--threads", threads)->capture_default_str();
  }

  void need(const std::string& v, const char* flag, const char* what) const {
    if (v.empty())
      throw UsageError("estimate --method " + method + " needs " + flag + " (" + what + ")");
  }

  int run() const {
    const SampleCounts counts = read_counts(counts_path);
    const auto atoms = read_events(sr3b);
    if (atoms.size() != counts.n_s)
      throw DataError(sr3b + " has " + std::to_string(atoms.size()) + " events but counts say n_s = " +
                      std::to_string(counts.n_s));
    std::vector<std::string> inputs{counts_path, sr3b};
    WeightedEstimate est;
    if (method == "fvt") {
      need(model, "--model", "FvT model from `train-fvt`");
      est = estimate_fvt(read_model(model), atoms, threads);
      inputs.push_back(model);
    } else {
      need(coupling, "--coupling", "coupling from `couple`");
      need(cr3b, "--cr3b", "3b control region events");
      const auto cp = read_coupling(coupling);
      const auto c3 = read_events(cr3b);
      inputs.insert(inputs.end(), {coupling, cr3b});
      if (method == "ot-fvt") {
        need(model, "--model", "FvT model from `train-fvt`");
        est = estimate_ot_fvt(cp, read_model(model), c3, counts, threads);
        inputs.push_back(model);
      } else {
        need(cr4b, "--cr4b", "4b control region events");
        const auto c4 = read_events(cr4b);
        est = estimate_ot_knn(cp, c4, c3, k, metric.p, counts, threads);
        inputs.push_back(cr4b);
      }
    }
    const double mass = probability ? 1.0 : abcd_mass(counts);
    est = normalize(est, mass);
    json conf = {{"method", method}, {"normalization", probability ? "probability" : "abcd"}};
    if (method == "ot-knn") {
      conf["k"] = k;
      conf["metric"] = metric.to_json();
    }
    const auto hash = config_hash(conf);
    write_estimate(out, est, counts, hash);
    write_meta(out, "estimate", conf, inputs);
    std::printf("%s: %zu atoms, mass %.6g (abcd %.6g)\n", method.c_str(), est.atoms.size(), mass, abcd_mass(counts));

    if (!scatter_with.empty() || !scatter_out.empty()) {
      if (scatter_with.empty() || scatter_out.empty())
        throw UsageError("--scatter-with and --scatter-out go together");
      const auto other = read_estimate(scatter_with);
      std::map<std::size_t, double> ow;
      for (std::size_t t = 0; t < other.estimate.atoms.size(); ++t) ow[other.estimate.atoms[t]] = other.estimate.weights[t];
      std::ofstream sc(scatter_out, std::ios::binary);
      if (!sc) throw DataError("cannot write " + scatter_out);
      sc << "atom_index," << est.method << ',' << other.estimate.method << '\n';
      for (std::size_t t = 0; t < est.atoms.size(); ++t) {
        auto it = ow.find(est.atoms[t]);
        sc << est.atoms[t] << ',' << format_double(est.weights[t]) << ','
           << format_double(it == ow.end() ? 0.0 : it->second) << '\n';
      }
      sc.close();
      write_meta(scatter_out, "estimate", conf, {out, scatter_with});
    }
    return 0;
  }
};

// ---------------------------------------------------------------- validate

struct Variable {
  std::string name;
  std::vector<double> edges;
  std::function<double(const Event&)> fn;
};

std::vector<Variable> validation_variables(const RatioModel* svb) {
  std::vector<Variable> v;
  if (svb) v.push_back({"svb", uniform_edges(10, 0.0, 1.0), [svb](const Event& e) { return predict(*svb, e); }});
  v.push_back({"m_hh", uniform_edges(20, 200.0, 1200.0), [](const Event& e) { return m_hh(e); }});
  v.push_back({"dr_close", uniform_edges(20, 0.0, 4.0), [](const Event& e) { return delta_r_close_other(e).close; }});
  v.push_back({"dr_other", uniform_edges(20, 0.0, 5.0), [](const Event& e) { return delta_r_close_other(e).other; }});
  return v;
}

struct ValidateCmd {
  std::string sr3b, truth, svb_path, out, hist_dir;
  std::vector<std::string> estimates;
  NetOpts net;
  int bootstrap = 1000;
  std::uint64_t seed = 1;
  bool use_event_weights = false;
  unsigned threads = 0;

  void add(CLI::App* c) {
    c->add_option("--sr3b", sr3b, "3b signal region events (estimate atoms)")->required();
    c->add_option("--truth", truth, "held-out 4b signal region events")->required();
    c->add_option("--estimate", estimates, "estimate CSV files");
    c->add_option("--svb", svb_path, "SvB model for the classifier-score histogram");
    c->add_option("--out", out, "report JSON")->required();
    c->add_option("--hist-dir", hist_dir, "directory for per-variable histogram JSON");
    c->add_option("--bootstrap", bootstrap, "bootstrap replications")->capture_default_str();
    c->add_option("--seed", seed, "closure classifier seed")->capture_default_str();
    c->add_flag("--event-weights", use_event_weights, "multiply by per-event weights when histogramming");
    c->add_option("--threads", threads)->capture_default_str();
    net.add(c);
  }

  int run() const {
    const auto atoms = read_events(sr3b);
    const auto truth_ev = read_events(truth);
    if (truth_ev.empty()) throw DataError(truth + ": truth sample is empty");
    std::vector<std::string> inputs{sr3b, truth};
    std::vector<WeightedEstimate> ests{estimate_raw3b(atoms.size())};
    for (const auto& p : estimates) {
      ests.push_back(read_estimate(p).estimate);
      inputs.push_back(p);
    }
    std::unique_ptr<RatioModel> svb;
    if (!svb_path.empty()) {
      svb = std::make_unique<RatioModel>(read_model(svb_path));
      inputs.push_back(svb_path);
    }
    ClosureOptions opt;
    opt.bootstrap_replications = bootstrap;
    opt.threads = threads;
    const auto cfg = net.get();

    json methods = json::array();
    for (const auto& e : ests) {
      const auto r = closure_auc(e, atoms, truth_ev, cfg, seed, opt);
      methods.push_back({{"method", e.method},
                         {"auc", r.auc.point},
                         {"lo", r.auc.lo},
                         {"hi", r.auc.hi},
                         {"replications", r.auc.replications},
                         {"skipped", r.auc.skipped}});
      std::printf("%-8s AUC %.4f  [%.4f, %.4f]\n", e.method.c_str(), r.auc.point, r.auc.lo, r.auc.hi);
    }
    std::stable_sort(methods.begin(), methods.end(),
                     [](const json& a, const json& b) { return a["auc"].get<double>() < b["auc"].get<double>(); });

    // histograms: every estimate scaled to the truth total (shape comparison)
    const auto truth_w = event_weights(truth_ev, use_event_weights);
    const double truth_total = std::accumulate(truth_w.begin(), truth_w.end(), 0.0);
    json hists = json::object();
    for (const auto& var : validation_variables(svb.get())) {
      json entry;
      const auto th = bin_events(truth_ev, truth_w, var.fn, var.edges, "truth");
      entry["truth"] = to_json(th);
      json per = json::object();
      for (const auto& e : ests) {
        std::vector<Event> ev;
        std::vector<double> w;
        for (std::size_t t = 0; t < e.atoms.size(); ++t) {
          if (e.atoms[t] >= atoms.size()) throw DataError("estimate " + e.method + ": atom index out of range");
          ev.push_back(atoms[e.atoms[t]]);
          w.push_back(e.weights[t] * (use_event_weights ? atoms[e.atoms[t]].weight : 1.0));
        }
        const double s = std::accumulate(w.begin(), w.end(), 0.0);
        if (s > 0.0)
          for (auto& x : w) x *= truth_total / s;
        const auto h = bin_events(ev, w, var.fn, var.edges, e.method);
        per[e.method] = {{"histogram", to_json(h)}, {"ratio", to_json(ratio_plot_data(h, th))}};
      }
      entry["estimates"] = per;
      hists[var.name] = entry;
      if (!hist_dir.empty()) {
        ensure_dir(hist_dir);
        const auto p = join(hist_dir, var.name + ".json");
        write_json(p, entry);
      }
    }
    const json conf = {{"net", net.to_json()}, {"bootstrap", bootstrap}, {"seed", seed}, {"event_weights", use_event_weights}};
    json report = {{"methods", methods}, {"histograms", hists}, {"config_hash", config_hash(conf)}};
    write_json(out, report);
    write_meta(out, "validate", conf, inputs);
    if (!hist_dir.empty())
      for (const auto& var : validation_variables(svb.get())) write_meta(join(hist_dir, var.name + ".json"), "validate", conf, inputs);
    return 0;
  }
};

// ---------------------------------------------------------------- test

struct TestCmd {
  std::string estimate, sr3b, signal, data, svb_path, out;
  double signal_yield = 0.0;
  std::size_t bins = 10;
  bool use_event_weights = false;
  int toys = 0;
  std::uint64_t toy_seed = 1;

  void add(CLI::App* c) {
    c->add_option("--estimate", estimate, "background estimate CSV")->required();
    c->add_option("--sr3b", sr3b, "3b signal region events (estimate atoms)")->required();
    c->add_option("--signal", signal, "signal template events in the signal region")->required();
    c->add_option("--signal-yield", signal_yield, "expected signal events at mu = 1")->required();
    c->add_option("--data", data, "4b signal region events")->required();
    c->add_option("--svb", svb_path, "SvB model used as the binning score")->required();
    c->add_option("--bins", bins, "uniform bins on [0, 1]")->capture_default_str();
    c->add_flag("--event-weights", use_event_weights, "weight events by their per-event weight");
    c->add_option("--toys", toys, "background-only pseudo-experiments for an empirical p-value")->capture_default_str();
    c->add_option("--toy-seed", toy_seed)->capture_default_str();
    c->add_option("--out", out, "fit report JSON")->required();
  }

  int run() const {
    if (!(signal_yield > 0.0)) throw DataError("test: --signal-yield must be positive (an empty signal template cannot be fit)");
    if (bins < 1) throw UsageError("--bins must be at least 1");
    const auto est = read_estimate(estimate).estimate;
    const auto atoms = read_events(sr3b);
    const auto sig = read_events(signal);
    const auto dat = read_events(data);
    const auto svb = read_model(svb_path);
    const auto edges = uniform_edges(bins, 0.0, 1.0);

    std::vector<Event> bev;
    std::vector<double> bw;
    for (std::size_t t = 0; t < est.atoms.size(); ++t) {
      if (est.atoms[t] >= atoms.size()) throw DataError("estimate atom index out of range for " + sr3b);
      bev.push_back(atoms[est.atoms[t]]);
      bw.push_back(est.weights[t] * (use_event_weights ? atoms[est.atoms[t]].weight : 1.0));
    }
    const auto score = [&](std::span<const Event> evs) { return predict_all(svb, evs); };
    const Histogram B = bin_values(score(bev), bw, edges, "background");
    auto sw = event_weights(sig, use_event_weights);
    Histogram S = bin_values(score(sig), sw, edges, "signal");
    const double st = S.total();
    if (!(st > 0.0)) throw DataError("test: signal template has no events inside the binning");
    for (std::size_t j = 0; j < S.bins(); ++j) {
      S.content[j] *= signal_yield / st;
      S.sumw2[j] *= (signal_yield / st) * (signal_yield / st);
    }
    const Histogram D = bin_values(score(dat), event_weights(dat, use_event_weights), edges, "data");
    const auto fit = fit_mu(B, S, D);
    json report = to_json(fit, B, S, D);
    if (toys > 0) {
      std::mt19937_64 rng(toy_seed);
      int above = 0;
      for (int t = 0; t < toys; ++t) {
        Histogram d = D;
        for (std::size_t j = 0; j < d.bins(); ++j) {
          d.content[j] = static_cast<double>(std::poisson_distribution<long long>(B.content[j])(rng));
          d.sumw2[j] = d.content[j];
        }
        if (fit_mu(B, S, d).q0 >= fit.q0) ++above;
      }
      report["toys"] = toys;
      report["toy_p_value"] = static_cast<double>(above) / toys;
    }
    const json conf = {{"bins", bins}, {"signal_yield", signal_yield}, {"event_weights", use_event_weights},
                       {"toys", toys}, {"toy_seed", toy_seed}};
    report["config_hash"] = config_hash(conf);
    write_json(out, report);
    write_meta(out, "test", conf, {estimate, sr3b, signal, data, svb_path});
    std::printf("mu_hat %.6g  q0 %.6g  z %.4g\n", fit.mu_hat, fit.q0, fit.z);
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"otbkg: data-driven background modeling for 4-jet events"};
  app.require_subcommand(1);
  GenCmd gen;
  SplitCmd split;
  DistCmd dist;
  CoupleCmd couple;
  TrainFvtCmd tfvt;
  TrainSvbCmd tsvb;
  EstimateCmd estimate;
  ValidateCmd validate;
  TestCmd test;
  auto* c_gen = app.add_subcommand("gen", "generate toy 3b, 4b, truth 4b and signal samples");
  auto* c_split = app.add_subcommand("split", "partition events into 3b/4b x CR/SR and record counts");
  auto* c_dist = app.add_subcommand("dist", "EMD distance matrix between two event files");
  auto* c_couple = app.add_subcommand("couple", "exact uniform-marginal optimal coupling");
  auto* c_tfvt = app.add_subcommand("train-fvt", "train the 4b-vs-3b classifier");
  auto* c_tsvb = app.add_subcommand("train-svb", "train the signal-vs-background classifier");
  auto* c_est = app.add_subcommand("estimate", "background estimate in the signal region");
  auto* c_val = app.add_subcommand("validate", "closure AUCs and validation histograms");
  auto* c_test = app.add_subcommand("test", "binned likelihood fit of the signal strength");
  gen.add(c_gen);
  split.add(c_split);
  dist.add(c_dist);
  couple.add(c_couple);
  tfvt.add(c_tfvt);
  tsvb.add(c_tsvb);
  estimate.add(c_est);
  validate.add(c_val);
  test.add(c_test);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (c_gen->parsed()) return gen.run();
    if (c_split->parsed()) return split.run();
    if (c_dist->parsed()) return dist.run();
    if (c_couple->parsed()) return couple.run();
    if (c_tfvt->parsed()) return tfvt.run();
    if (c_tsvb->parsed()) return tsvb.run();
    if (c_est->parsed()) return estimate.run();
    if (c_val->parsed()) return validate.run();
    if (c_test->parsed()) return test.run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::domain_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
