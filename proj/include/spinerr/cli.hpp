#pragma once

// Command-line front end: simulate, model, fit, plotdata.
//
// run() takes the argument list without the program name and writes to the
// given streams, so the whole surface is testable in-process.
// Exit codes: 0 success, 2 usage or input error, 3 fit failure.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spinerr/estimate.hpp"
#include "spinerr/io.hpp"
#include "spinerr/models.hpp"
#include "spinerr/sequences.hpp"

namespace spinerr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFitFailure = 3;

/// Usage or input problem; `field` names the offending flag, key or file.
class UsageError : public std::runtime_error {
 public:
  UsageError(const std::string& field, const std::string& message) : std::runtime_error(field + ": " + message) {}
};

namespace detail {

inline AngleUnit parse_units(const std::string& text) {
  if (text == "deg") return AngleUnit::Degrees;
  if (text == "rad") return AngleUnit::Radians;
  throw UsageError("--units", "expected deg or rad, got '" + text + "'");
}

inline double angle_in(double value, AngleUnit unit) { return unit == AngleUnit::Degrees ? deg_to_rad(value) : value; }
inline double angle_out(double value, AngleUnit unit) { return unit == AngleUnit::Degrees ? rad_to_deg(value) : value; }
inline const char* unit_suffix(AngleUnit unit) { return unit == AngleUnit::Degrees ? "deg" : "rad"; }

/// Parses --fix entries "name=value". Angle parameters take --units unless
/// the name carries its own _deg/_rad suffix; t2 is in microseconds.
inline std::map<std::string, double> parse_fixed(const std::vector<std::string>& entries,
                                                 const std::vector<std::string>& allowed, AngleUnit unit) {
  std::map<std::string, double> out;
  for (const auto& entry : entries) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--fix", "expected name=value, got '" + entry + "'");
    std::string name = entry.substr(0, eq);
    const auto value = parse_double(entry.substr(eq + 1));
    if (!value || std::isnan(*value)) throw UsageError("--fix " + name, "cannot parse value '" + entry.substr(eq + 1) + "'");
    double v = *value;
    std::optional<AngleUnit> explicit_unit;
    auto strip = [&](const std::string& suffix) {
      if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        name.resize(name.size() - suffix.size());
        return true;
      }
      return false;
    };
    if (strip("_deg")) {
      explicit_unit = AngleUnit::Degrees;
    } else if (strip("_rad")) {
      explicit_unit = AngleUnit::Radians;
    } else {
      strip("_us");
    }
    if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw UsageError("--fix " + name, "unknown parameter for this model (expected one of " + list + ")");
    }
    if (parameter_unit(name) == "angle") {
      v = angle_in(v, explicit_unit.value_or(unit));
    } else if (explicit_unit) {
      throw UsageError("--fix " + name, "is not an angle; drop the unit suffix");
    }
    if (!std::isfinite(v) && !(name == "t2" && v > 0)) throw UsageError("--fix " + name, "value must be finite");
    out[name] = v;
  }
  return out;
}

inline void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("--output", "cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw UsageError("--output", "write to '" + path + "' failed");
}

inline std::string fmt(double v, int precision = 6) {
  if (!std::isfinite(v)) return format_double(v);
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// --- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string manifest;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::string output;
};

inline int simulate(const SimulateArgs& args, std::ostream& out, std::ostream& err) {
  ExperimentManifest m;
  try {
    m = load_manifest(args.manifest);
  } catch (const ManifestError& e) {
    throw UsageError(args.manifest, e.what());
  }
  if (args.seed) m.ensemble.seed = *args.seed;
  if (!args.output.empty()) m.output = args.output;
  if (m.output.empty()) throw UsageError("output", "no output path (set \"output\" in the manifest or pass --output)");
  const std::uint64_t noise_seed = m.noise.seed.value_or(m.ensemble.seed + 1);

  const auto& seq = m.sequence;
  const auto& ens = m.ensemble;
  if (ens.sigma > 0.0 && ens.n_packets < 1000) {
    err << "warning: ensemble.n_packets = " << ens.n_packets
        << " is small for sigma > 0; Monte-Carlo error will dominate\n";
  }
  if (seq.kind == SequenceKind::Cp && seq.n_cycles > kCpValidatedMaxEcho) {
    err << "warning: sequence.n_cycles = " << seq.n_cycles << " exceeds the range (" << kCpValidatedMaxEcho
        << ") over which the CP closed form is validated\n";
  }

  std::size_t rows = 0;
  if (seq.is_echo_sequence()) {
    EchoTrain train = run_echo_sequence(seq, ens, args.threads);
    add_channel_noise(train, m.noise.std, noise_seed);
    rows = train.entries.size();
    NoiseSpec noise = m.noise;
    noise.seed = noise_seed;
    write_echo_train(m.output, train, &noise);
  } else {
    TimeSeries series = seq.kind == SequenceKind::Rabi
                            ? run_rabi(seq.b1_scale_sigma, seq.omega, seq.t_max, seq.dt, ens, seq.readout,
                                       seq.detector_skew, args.threads)
                            : run_fid(seq.detuning, seq.detector_skew, ens, seq.t_max, seq.dt, args.threads);
    add_channel_noise(series, m.noise.std, noise_seed);
    rows = series.samples.size();
    NoiseSpec noise = m.noise;
    noise.seed = noise_seed;
    write_time_series(m.output, series, &noise);
  }
  out << "wrote " << rows << " rows to " << m.output << " (sidecar " << sidecar_path(m.output).string() << ")\n";
  return kExitOk;
}

// --- model -----------------------------------------------------------------

struct ModelArgs {
  std::string kind;
  AngleUnit unit = AngleUnit::Radians;
  std::size_t n = 20;
  double delta0 = 0.0;
  double sigma = 0.0;
  double delta = 0.0;
  double tau = 1.0;
  double t2 = kInfinity;
  double detuning = 0.0;
  double skew = 0.0;
  double t2_star = kInfinity;
  double phase0 = 0.0;
  double omega = 1.0;
  double b1_sigma = 0.0;
  double t_max = 10.0;
  double dt = 0.1;
  double b1 = 0.0;
  double duration = 0.0;
  double limit = 0.5;
  std::size_t steps = 50;
  std::string output;
};

inline int model(const ModelArgs& a, std::ostream& out) {
  std::ostringstream table;
  const char* u = unit_suffix(a.unit);
  auto require = [](bool ok, const char* field, const char* what) {
    if (!ok) throw UsageError(field, what);
  };
  require(a.t2 > 0.0, "--t2", "must be > 0");
  require(a.tau > 0.0, "--tau", "must be > 0");
  const double delta0 = angle_in(a.delta0, a.unit);
  const double sigma = angle_in(a.sigma, a.unit);
  require(sigma >= 0.0, "--sigma", "must be >= 0");

  if (a.kind == "cp") {
    require(a.n >= 1 && a.n <= kCpMaxEcho, "--n", "must be in [1, 64]");
    table << "n,time_us,exact,approx,gap,decay\n";
    double max_gap = 0.0;
    bool outside = false;
    for (std::size_t n = 1; n <= a.n; ++n) {
      const auto exact = cp_echo_amplitude_checked(n, delta0, sigma);
      outside = outside || exact.outside_validated_domain;
      const double approx = cp_echo_amplitude_approx(n, sigma);
      const double gap = std::fabs(exact.value - approx);
      max_gap = std::max(max_gap, gap);
      table << n << "," << format_double(2.0 * static_cast<double>(n) * a.tau) << "," << format_double(exact.value)
            << "," << format_double(approx) << "," << format_double(gap) << ","
            << format_double(cp_decay_model(n, a.tau, delta0, sigma, a.t2)) << "\n";
    }
    table << "# max_gap=" << format_double(max_gap) << "\n";
    if (outside) table << "# warning: outside the validated domain (n <= 32, n*sigma <= 2)\n";
  } else if (a.kind == "cp-region") {
    // Exact vs small-error form over n*sigma <= limit, delta0 = 0.
    require(a.limit > 0.0, "--limit", "must be > 0");
    require(a.steps >= 1, "--steps", "must be >= 1");
    require(a.n >= 1 && a.n <= kCpMaxEcho, "--n", "must be in [1, 64]");
    table << "n,sigma_" << u << ",exact,approx,gap\n";
    double max_gap = 0.0;
    for (std::size_t n = 1; n <= a.n; ++n) {
      for (std::size_t s = 0; s <= a.steps; ++s) {
        const double sg = a.limit / static_cast<double>(n) * static_cast<double>(s) / static_cast<double>(a.steps);
        const double exact = cp_echo_amplitude(n, 0.0, sg);
        const double approx = cp_echo_amplitude_approx(n, sg);
        max_gap = std::max(max_gap, std::fabs(exact - approx));
        table << n << "," << format_double(angle_out(sg, a.unit)) << "," << format_double(exact) << ","
              << format_double(approx) << "," << format_double(std::fabs(exact - approx)) << "\n";
      }
    }
    table << "# max_gap=" << format_double(max_gap) << "\n";
  } else if (a.kind == "cpmg") {
    table << "n,time_us,amplitude\n";
    for (std::size_t n = 1; n <= a.n; ++n) {
      table << n << "," << format_double(2.0 * static_cast<double>(n) * a.tau) << ","
            << format_double(cpmg_decay_model(n, a.tau, a.t2)) << "\n";
    }
  } else if (a.kind == "spam") {
    const double delta = angle_in(a.delta, a.unit);
    table << "m,time_us,in_phase,quadrature,phase_" << u << "\n";
    for (std::size_t m = 1; m <= a.n; ++m) {
      const auto c = spam_echo_model(m, a.tau, delta, a.t2);
      table << m << "," << format_double(4.0 * static_cast<double>(m) * a.tau) << "," << format_double(c.in_phase)
            << "," << format_double(c.quadrature) << ","
            << format_double(angle_out(2.0 * static_cast<double>(m) * delta, a.unit)) << "\n";
    }
  } else if (a.kind == "fid") {
    require(a.dt > 0.0, "--dt", "must be > 0");
    require(a.t_max >= a.dt, "--t-max", "must be >= dt");
    require(a.t2_star > 0.0, "--t2-star", "must be > 0");
    const double skew = angle_in(a.skew, a.unit);
    const double phase0 = angle_in(a.phase0, a.unit);
    table << "t_us,in_phase,quadrature\n";
    for (std::size_t s = 0, ns = sample_count(a.t_max, a.dt); s < ns; ++s) {
      const double t = static_cast<double>(s) * a.dt;
      const auto c = fid_quadrature_model(t, a.detuning, skew, a.t2_star, phase0);
      table << format_double(t) << "," << format_double(c.in_phase) << "," << format_double(c.quadrature) << "\n";
    }
  } else if (a.kind == "rabi") {
    require(a.dt > 0.0, "--dt", "must be > 0");
    require(a.t_max >= a.dt, "--t-max", "must be >= dt");
    require(a.b1_sigma >= 0.0, "--b1-sigma", "must be >= 0");
    table << "t_us,envelope,signal\n";
    for (std::size_t s = 0, ns = sample_count(a.t_max, a.dt); s < ns; ++s) {
      const double t = static_cast<double>(s) * a.dt;
      const double x = a.b1_sigma * a.omega * t;
      table << format_double(t) << "," << format_double(std::exp(-0.5 * x * x)) << ","
            << format_double(rabi_envelope_model(t, a.omega, a.b1_sigma)) << "\n";
    }
  } else if (a.kind == "calibrate") {
    require(a.b1 > 0.0, "--b1", "must be > 0 (tesla)");
    require(a.duration > 0.0, "--duration", "must be > 0 (seconds)");
    const double flip = pulse_flip_angle(a.b1, a.duration);
    table << "b1_T,duration_s,flip_" << u << "\n";
    table << format_double(a.b1) << "," << format_double(a.duration) << "," << format_double(angle_out(flip, a.unit))
          << "\n";
  } else {
    throw UsageError("model", "unknown kind '" + a.kind + "' (expected cp, cp-region, cpmg, spam, fid, rabi, calibrate)");
  }
  write_output(a.output, table.str(), out);
  return kExitOk;
}

// --- fit -------------------------------------------------------------------

struct FitArgs {
  std::string data;
  std::string model;
  std::vector<std::string> fix;
  AngleUnit unit = AngleUnit::Radians;
  std::string output;
  bool all_echoes = false;
  bool magnitude = false;
};

inline std::string summary(const std::string& model, const FitResult& r, AngleUnit unit) {
  std::ostringstream s;
  s << "model " << model << ": " << to_string(r.status) << " after " << r.n_iterations << " iterations, residual norm "
    << fmt(r.residual_norm) << "\n";
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    const std::string pu = parameter_unit(r.names[i]);
    double v = r.params[i];
    double sg = r.sigmas[i];
    std::string label;
    if (pu == "angle") {
      v = angle_out(v, unit);
      sg = angle_out(sg, unit);
      label = unit_suffix(unit);
    } else if (pu == "us") {
      label = "us";
    } else if (pu == "rad_per_us") {
      label = "rad/us";
    } else if (pu == "per_us") {
      label = "1/us";
    }
    s << "  " << r.names[i] << " = " << fmt(v);
    if (r.free[i]) {
      s << " +/- " << fmt(sg, 3);
    } else {
      s << " (fixed)";
    }
    if (!label.empty()) s << " " << label;
    s << "\n";
  }
  for (const auto& [k, v] : r.derived) s << "  [" << k << "] " << fmt(v) << "\n";
  for (const auto& n : r.notes) s << "  note: " << n << "\n";
  return s.str();
}

inline int fit_command(const FitArgs& a, std::ostream& out, std::ostream& err) {
  if (!std::filesystem::exists(a.data)) throw UsageError(a.data, "no such file");
  FitResult result;
  try {
    if (a.model == "cpmg" || a.model == "cp" || a.model == "spam") {
      const EchoTrain train = read_echo_train(a.data);
      if (train.entries.empty()) throw UsageError(a.data, "file holds no echoes");
      EchoFitOptions opts;
      if (a.magnitude) opts.signal = EchoSignal::Magnitude;
      if (a.model == "cpmg") {
        opts.fixed = parse_fixed(a.fix, {"amplitude", "t2"}, a.unit);
        result = fit_cpmg_t2(train, opts);
      } else if (a.model == "cp") {
        opts.fixed = parse_fixed(a.fix, {"delta0", "sigma", "amplitude", "t2"}, a.unit);
        double t2 = kInfinity;
        if (auto it = opts.fixed.find("t2"); it != opts.fixed.end()) {
          t2 = it->second;
        } else {
          err << "warning: no --fix t2=<us> given; fitting CP with T2 = inf\n";
        }
        result = fit_cp_errors(train, t2, opts);
      } else {
        SpamFitOptions sopts;
        sopts.fixed = parse_fixed(a.fix, {"delta", "amplitude", "t2"}, a.unit);
        sopts.use_all_echoes = a.all_echoes;
        double t2 = kInfinity;
        if (auto it = sopts.fixed.find("t2"); it != sopts.fixed.end()) {
          t2 = it->second;
        } else {
          err << "warning: no --fix t2=<us> given; fitting SPAM with T2 = inf\n";
        }
        result = fit_spam_phase(train, t2, sopts);
      }
    } else if (a.model == "skew") {
      const TimeSeries series = read_time_series(a.data);
      if (series.samples.empty()) throw UsageError(a.data, "file holds no samples");
      FitOptions opts;
      opts.fixed = parse_fixed(a.fix, {"amplitude", "detuning", "phase0", "skew", "rate"}, a.unit);
      result = fit_detector_skew(series, opts);
    } else {
      throw UsageError("--model", "unknown model '" + a.model + "' (expected cpmg, cp, spam, skew)");
    }
  } catch (const DataFileError& e) {
    throw UsageError("data", e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError("data", e.what());
  }

  Json j = to_json(result, a.unit);
  j["model"] = a.model;
  j["data"] = a.data;
  const std::string text = j.dump(2) + "\n";
  const std::string human = summary(a.model, result, a.unit);
  if (a.output.empty() || a.output == "-") {
    out << text;
    err << human;
  } else {
    write_output(a.output, text, out);
    out << human;
  }
  if (!result.ok()) {
    err << "error: fit did not converge (" << to_string(result.status) << ")\n";
    return kExitFitFailure;
  }
  return kExitOk;
}

// --- plotdata --------------------------------------------------------------

struct PlotArgs {
  std::string data;
  std::string style = "csv";
  std::size_t max_points = 2000;
  std::string output;
};

struct PlotSeries {
  std::string x_label;
  std::vector<double> x, in_phase, quadrature;
};

inline PlotSeries load_plot_series(const std::string& path) {
  PlotSeries p;
  if (detect_data_kind(path) == DataKind::EchoTrain) {
    const auto train = read_echo_train(path);
    p.x_label = "echo_time_us";
    for (const auto& e : train.entries) {
      p.x.push_back(e.time);
      p.in_phase.push_back(e.in_phase);
      p.quadrature.push_back(e.quadrature);
    }
  } else {
    const auto series = read_time_series(path);
    p.x_label = "t_us";
    for (const auto& s : series.samples) {
      p.x.push_back(s.t);
      p.in_phase.push_back(s.in_phase);
      p.quadrature.push_back(s.quadrature);
    }
  }
  return p;
}

/// Keeps every k-th point (and the last) so at most max_points remain.
inline std::vector<std::size_t> decimate(std::size_t n, std::size_t max_points) {
  std::vector<std::size_t> idx;
  if (n == 0) return idx;
  const std::size_t stride = std::max<std::size_t>(1, (n + max_points - 1) / max_points);
  for (std::size_t i = 0; i < n; i += stride) idx.push_back(i);
  if (idx.back() != n - 1) {
    if (idx.size() >= max_points) idx.back() = n - 1;
    else idx.push_back(n - 1);
  }
  return idx;
}

inline std::string plot_csv(const PlotSeries& p, const std::vector<std::size_t>& idx) {
  std::string s = p.x_label + ",in_phase,quadrature\n";
  for (auto i : idx) s += format_double(p.x[i]) + "," + format_double(p.in_phase[i]) + "," + format_double(p.quadrature[i]) + "\n";
  return s;
}

inline std::string plot_svg(const PlotSeries& p, const std::vector<std::size_t>& idx) {
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 20, B = 40;
  double x0 = p.x[idx.front()], x1 = p.x[idx.back()];
  double y0 = 0.0, y1 = 0.0;
  for (auto i : idx) {
    y0 = std::min({y0, p.in_phase[i], p.quadrature[i]});
    y1 = std::max({y1, p.in_phase[i], p.quadrature[i]});
  }
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream s;
  s << std::setprecision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << " " << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << sy(0.0) << "\" x2=\"" << W - R << "\" y2=\"" << sy(0.0)
    << "\" stroke=\"#888\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"#888\"/>\n";
  auto polyline = [&](const std::vector<double>& y, const char* colour, const char* name) {
    s << "<polyline id=\"" << name << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (auto i : idx) s << sx(p.x[i]) << "," << sy(y[i]) << " ";
    s << "\"/>\n";
  };
  polyline(p.in_phase, "#1f77b4", "in_phase");
  polyline(p.quadrature, "#d62728", "quadrature");
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">" << p.x_label
    << " (" << fmt(x0) << " to " << fmt(x1) << ")</text>\n";
  s << "<text x=\"" << L + 8 << "\" y=\"" << T + 12 << "\" font-size=\"12\" fill=\"#1f77b4\">in_phase</text>\n";
  s << "<text x=\"" << L + 8 << "\" y=\"" << T + 28 << "\" font-size=\"12\" fill=\"#d62728\">quadrature</text>\n";
  s << "</svg>\n";
  return s.str();
}

inline int plotdata(const PlotArgs& a, std::ostream& out) {
  if (!std::filesystem::exists(a.data)) throw UsageError(a.data, "no such file");
  if (a.max_points < 2) throw UsageError("--max-points", "must be >= 2");
  PlotSeries p;
  try {
    p = load_plot_series(a.data);
  } catch (const DataFileError& e) {
    throw UsageError("data", e.what());
  }
  if (p.x.empty()) throw UsageError(a.data, "file holds no rows to plot");
  const auto idx = decimate(p.x.size(), a.max_points);
  if (a.style == "csv") {
    write_output(a.output, plot_csv(p, idx), out);
  } else if (a.style == "svg") {
    write_output(a.output, plot_svg(p, idx), out);
  } else {
    throw UsageError("--style", "expected csv or svg, got '" + a.style + "'");
  }
  return kExitOk;
}

}  // namespace detail

/// Runs one CLI invocation. `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pulse-error spin-echo simulator and fitter", "spinerr"};
  app.require_subcommand(1);

  detail::SimulateArgs sim;
  std::uint64_t seed = 0;
  auto* simulate = app.add_subcommand("simulate", "Run a manifest and write CSV + JSON sidecar");
  simulate->add_option("manifest", sim.manifest, "Experiment manifest (JSON)")->required();
  auto* seed_opt = simulate->add_option("--seed", seed, "Override ensemble.seed");
  simulate->add_option("--threads", sim.threads,
                       std::string("Worker threads (default $") + kThreadsEnvVar + " or all cores)");
  simulate->add_option("--output", sim.output, "Override the manifest output path");

  detail::ModelArgs mod;
  std::string model_units = "rad";
  auto* model = app.add_subcommand("model", "Tabulate a closed-form model on standard output");
  model->add_option("kind", mod.kind, "cp, cp-region, cpmg, spam, fid, rabi, calibrate")->required();
  model->add_option("--units", model_units, "Angle unit for inputs and outputs: deg or rad");
  model->add_option("--n", mod.n, "Echoes or cycles to tabulate");
  model->add_option("--delta0", mod.delta0, "Mean flip error per pi pulse");
  model->add_option("--sigma", mod.sigma, "Flip error spread per pi pulse");
  model->add_option("--delta", mod.delta, "SPAM rotation-axis error");
  model->add_option("--tau", mod.tau, "Half echo spacing (us)");
  model->add_option("--t2", mod.t2, "T2 (us)");
  model->add_option("--detuning", mod.detuning, "FID detuning (rad/us)");
  model->add_option("--skew", mod.skew, "Detector skew");
  model->add_option("--phase0", mod.phase0, "FID initial phase");
  model->add_option("--t2-star", mod.t2_star, "FID envelope time (us)");
  model->add_option("--omega", mod.omega, "Rabi frequency (rad/us)");
  model->add_option("--b1-sigma", mod.b1_sigma, "Relative B1 spread");
  model->add_option("--t-max", mod.t_max, "Last time sample (us)");
  model->add_option("--dt", mod.dt, "Sample spacing (us)");
  model->add_option("--b1", mod.b1, "Calibration field (T)");
  model->add_option("--duration", mod.duration, "Calibration pulse length (s)");
  model->add_option("--limit", mod.limit, "cp-region: largest n*sigma");
  model->add_option("--steps", mod.steps, "cp-region: sigma steps per n");
  model->add_option("--output", mod.output, "Write the table here instead of standard output");

  detail::FitArgs fa;
  std::string fit_units = "rad";
  auto* fit = app.add_subcommand("fit", "Fit a data file; JSON result plus a summary");
  fit->add_option("data", fa.data, "CSV data file")->required();
  fit->add_option("--model", fa.model, "cpmg, cp, spam or skew")->required();
  fit->add_option("--fix", fa.fix, "Pin a parameter: name=value (t2 in us, angles in --units)");
  fit->add_option("--units", fit_units, "Angle unit for --fix and output: deg or rad");
  fit->add_option("--output", fa.output, "Write JSON here; the summary then goes to standard output");
  fit->add_flag("--all-echoes", fa.all_echoes, "spam: also fit mid-cycle echoes");
  fit->add_flag("--magnitude", fa.magnitude, "cp/cpmg: fit echo magnitudes instead of phased echoes");

  detail::PlotArgs pa;
  auto* plot = app.add_subcommand("plotdata", "Emit plot-ready CSV or a minimal SVG");
  plot->add_option("data", pa.data, "CSV data file")->required();
  plot->add_option("--style", pa.style, "csv or svg");
  plot->add_option("--max-points", pa.max_points, "Decimate to at most this many points");
  plot->add_option("--output", pa.output, "Write here instead of standard output");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    auto* active = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "run '" << active->get_name() << " --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (*simulate) {
      if (*seed_opt) sim.seed = seed;
      return detail::simulate(sim, out, err);
    }
    if (*model) {
      mod.unit = detail::parse_units(model_units);
      return detail::model(mod, out);
    }
    if (*fit) {
      fa.unit = detail::parse_units(fit_units);
      return detail::fit_command(fa, out, err);
    }
    if (*plot) return detail::plotdata(pa, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ManifestError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataFileError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return *fit ? kExitFitFailure : kExitUsage;
  }
  return kExitUsage;
}

}  // namespace spinerr::cli
