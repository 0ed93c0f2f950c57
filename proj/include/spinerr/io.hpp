#pragma once

// Experiment manifests and data files.
//
// Data files are CSV with a JSON sidecar of the same basename (.json). The
// sidecar carries the format tag, version, column names, row count and the
// normalized manifest that produced the data. Numbers are written with 17
// significant digits so a write/read round trip is value-identical.
//
// Units: times in microseconds, angles in radians internally. Manifest keys
// carry explicit unit suffixes (_us, _rad, _deg, _rad_per_us).

#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "spinerr/estimate.hpp"
#include "spinerr/sequences.hpp"
#include "spinerr/spin.hpp"

namespace spinerr {

using Json = nlohmann::json;

inline constexpr int kFileFormatVersion = 1;
inline constexpr const char* kEchoTrainFormat = "spinerr.echo_train";
inline constexpr const char* kTimeSeriesFormat = "spinerr.time_series";

/// Input error carrying the offending field path or file location.
class ManifestError : public std::runtime_error {
 public:
  ManifestError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class DataFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NoiseSpec {
  double std = 0.0;
  std::optional<std::uint64_t> seed;  ///< defaults to ensemble seed + 1
};

struct ExperimentManifest {
  SequenceSpec sequence;
  EnsembleConfig ensemble;
  NoiseSpec noise;
  std::string output;  ///< CSV path; sidecar alongside
};

// ---------------------------------------------------------------------------
// Number formatting

[[nodiscard]] inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, ptr);
}

[[nodiscard]] inline std::optional<double> parse_double(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
  if (text == "inf" || text == "+inf") return kInfinity;
  if (text == "-inf") return -kInfinity;
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) return std::nullopt;
  return v;
}

// ---------------------------------------------------------------------------
// Manifest parsing

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ManifestError(path_, "expected a JSON object");
  }

  [[nodiscard]] std::string field(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  [[nodiscard]] bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  [[nodiscard]] double number(const std::string& key) {
    seen_.insert(key);
    const Json& v = obj_.at(key);
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      if (auto d = parse_double(v.get<std::string>())) return *d;
    }
    if (v.is_null()) return kInfinity;
    throw ManifestError(field(key), "expected a number");
  }

  [[nodiscard]] std::optional<double> optional_number(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return number(key);
  }

  [[nodiscard]] std::uint64_t unsigned_integer(const std::string& key) {
    seen_.insert(key);
    const Json& v = obj_.at(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    throw ManifestError(field(key), "expected a non-negative integer");
  }

  [[nodiscard]] std::string string(const std::string& key) {
    seen_.insert(key);
    const Json& v = obj_.at(key);
    if (!v.is_string()) throw ManifestError(field(key), "expected a string");
    return v.get<std::string>();
  }

  [[nodiscard]] bool boolean(const std::string& key) {
    seen_.insert(key);
    const Json& v = obj_.at(key);
    if (!v.is_boolean()) throw ManifestError(field(key), "expected true or false");
    return v.get<bool>();
  }

  /// Angle given as <base>_rad or <base>_deg, returned in radians.
  [[nodiscard]] std::optional<double> angle(const std::string& base) {
    const bool rad = has(base + "_rad");
    const bool deg = has(base + "_deg");
    if (rad && deg) throw ManifestError(field(base + "_rad"), "give either _rad or _deg, not both");
    if (rad) return finite(base + "_rad", number(base + "_rad"));
    if (deg) return deg_to_rad(finite(base + "_deg", number(base + "_deg")));
    if (obj_.contains(base)) throw ManifestError(field(base), "angle needs a unit suffix (_rad or _deg)");
    return std::nullopt;
  }

  double finite(const std::string& key, double v) const {
    if (!std::isfinite(v)) throw ManifestError(field(key), "must be finite");
    return v;
  }

  [[nodiscard]] const Json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  void reject_unknown() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) throw ManifestError(field(key), "unknown field");
    }
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Enum>
Enum parse_enum(const std::string& text, const std::vector<std::pair<std::string, Enum>>& options,
                const std::string& field) {
  std::string upper;
  for (char c : text) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  for (const auto& [name, value] : options) {
    if (name == upper) return value;
  }
  std::string expected;
  for (const auto& [name, value] : options) expected += (expected.empty() ? "" : ", ") + name;
  throw ManifestError(field, "unknown value '" + text + "' (expected one of " + expected + ")");
}

inline const std::vector<std::pair<std::string, SequenceKind>>& sequence_kinds() {
  static const std::vector<std::pair<std::string, SequenceKind>> v = {
      {"RABI", SequenceKind::Rabi}, {"FID", SequenceKind::Fid},   {"CP", SequenceKind::Cp},
      {"CPMG", SequenceKind::Cpmg}, {"SPAM", SequenceKind::Spam}, {"CUSTOM", SequenceKind::Custom}};
  return v;
}

inline PulseSpec parse_pulse(ObjectReader& r) {
  PulseSpec p;
  p.nominal_flip = r.angle("flip").value_or(kPi);
  p.axis_phase = r.angle("axis_phase").value_or(0.0);
  p.axis_phase_error = r.angle("axis_phase_error").value_or(0.0);
  if (r.has("flip_error_mode")) {
    p.flip_error_mode = parse_enum<FlipErrorMode>(
        r.string("flip_error_mode"),
        {{"NONE", FlipErrorMode::None}, {"FIXED_OFFSET", FlipErrorMode::FixedOffset}, {"B1_SCALE", FlipErrorMode::B1Scale}},
        r.field("flip_error_mode"));
  }
  p.flip_offset = r.angle("flip_offset").value_or(0.0);
  if (p.nominal_flip < 0.0) throw ManifestError(r.field("flip"), "must be >= 0");
  return p;
}

inline SequenceSpec parse_sequence(const Json& j) {
  ObjectReader r(j, "sequence");
  SequenceSpec s;
  if (!r.has("kind")) throw ManifestError(r.field("kind"), "missing");
  s.kind = parse_enum(r.string("kind"), sequence_kinds(), r.field("kind"));
  if (r.has("tau_us")) s.tau = r.number("tau_us");
  if (r.has("n_cycles")) s.n_cycles = static_cast<std::size_t>(r.unsigned_integer("n_cycles"));
  s.y_phase_error = r.angle("phase_error").value_or(0.0);
  s.detector_skew = r.angle("detector_skew").value_or(0.0);
  if (r.has("detuning_rad_per_us")) s.detuning = r.number("detuning_rad_per_us");
  if (r.has("omega_rad_per_us")) s.omega = r.number("omega_rad_per_us");
  if (r.has("b1_scale_sigma")) s.b1_scale_sigma = r.number("b1_scale_sigma");
  if (r.has("readout")) {
    s.readout = parse_enum<RabiReadout>(
        r.string("readout"), {{"LONGITUDINAL", RabiReadout::Longitudinal}, {"TRANSVERSE", RabiReadout::Transverse}},
        r.field("readout"));
  }
  if (r.has("t_max_us")) s.t_max = r.number("t_max_us");
  if (r.has("dt_us")) s.dt = r.number("dt_us");
  if (r.has("custom")) {
    const Json& steps = r.raw("custom");
    if (!steps.is_array()) throw ManifestError(r.field("custom"), "expected an array");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      ObjectReader sr(steps[i], r.field("custom") + "[" + std::to_string(i) + "]");
      CustomStep step;
      if (!sr.has("delay_before_us")) throw ManifestError(sr.field("delay_before_us"), "missing");
      if (!sr.has("delay_after_us")) throw ManifestError(sr.field("delay_after_us"), "missing");
      step.delay_before = sr.number("delay_before_us");
      step.delay_after = sr.number("delay_after_us");
      if (!(step.delay_before > 0.0)) throw ManifestError(sr.field("delay_before_us"), "must be > 0");
      if (!(step.delay_after > 0.0)) throw ManifestError(sr.field("delay_after_us"), "must be > 0");
      step.pulse = parse_pulse(sr);
      if (sr.has("acquire")) step.acquire = sr.boolean("acquire");
      sr.reject_unknown();
      s.custom.push_back(step);
    }
  }
  r.reject_unknown();

  // Field-level checks with precise paths, before the aggregate validation.
  if (s.is_echo_sequence()) {
    if (!(s.tau > 0.0) || !std::isfinite(s.tau)) throw ManifestError("sequence.tau_us", "must be > 0");
    if (s.n_cycles < 1) throw ManifestError("sequence.n_cycles", "must be >= 1");
    if (s.kind == SequenceKind::Custom && s.custom.empty()) throw ManifestError("sequence.custom", "must list at least one step");
  } else {
    if (!(s.dt > 0.0)) throw ManifestError("sequence.dt_us", "must be > 0");
    if (!(s.t_max >= s.dt)) throw ManifestError("sequence.t_max_us", "must be >= dt_us");
    if (s.kind == SequenceKind::Rabi && !(s.omega > 0.0)) throw ManifestError("sequence.omega_rad_per_us", "must be > 0");
    if (s.kind == SequenceKind::Rabi && !(s.b1_scale_sigma >= 0.0)) throw ManifestError("sequence.b1_scale_sigma", "must be >= 0");
  }
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ManifestError("sequence", e.what());
  }
  return s;
}

inline EnsembleConfig parse_ensemble(const Json& j) {
  ObjectReader r(j, "ensemble");
  EnsembleConfig c;
  if (r.has("n_packets")) c.n_packets = static_cast<std::size_t>(r.unsigned_integer("n_packets"));
  c.delta0 = r.angle("delta0").value_or(0.0);
  c.sigma = r.angle("sigma").value_or(0.0);
  if (r.has("error_mode")) {
    c.error_mode = parse_enum<EnsembleErrorMode>(
        r.string("error_mode"),
        {{"PI_PULSES_ONLY", EnsembleErrorMode::PiPulsesOnly}, {"B1_SCALE_ALL_PULSES", EnsembleErrorMode::B1ScaleAllPulses}},
        r.field("error_mode"));
  }
  if (r.has("t2_us")) c.t2 = r.number("t2_us");
  if (r.has("t1_us")) c.t1 = r.number("t1_us");
  if (r.has("dephasing")) {
    c.dephasing = parse_enum<Dephasing>(r.string("dephasing"),
                                        {{"UNIFORM_PER_TAU", Dephasing::UniformPerTau}, {"NONE", Dephasing::None}},
                                        r.field("dephasing"));
  }
  if (r.has("seed")) c.seed = r.unsigned_integer("seed");
  r.reject_unknown();
  if (c.n_packets == 0) throw ManifestError("ensemble.n_packets", "must be >= 1");
  if (c.sigma < 0.0) throw ManifestError("ensemble.sigma", "must be >= 0");
  if (!(c.t2 > 0.0)) throw ManifestError("ensemble.t2_us", "must be > 0");
  if (!(c.t1 > 0.0)) throw ManifestError("ensemble.t1_us", "must be > 0");
  return c;
}

inline Json time_json(double v) { return std::isinf(v) ? Json("inf") : Json(v); }

}  // namespace detail

/// Parses and validates a manifest. Throws ManifestError naming the field.
[[nodiscard]] inline ExperimentManifest parse_manifest(const Json& j) {
  detail::ObjectReader r(j, "");
  ExperimentManifest m;
  if (!r.has("sequence")) throw ManifestError("sequence", "missing");
  m.sequence = detail::parse_sequence(r.raw("sequence"));
  m.ensemble = r.has("ensemble") ? detail::parse_ensemble(r.raw("ensemble")) : EnsembleConfig{};
  if (r.has("noise")) {
    detail::ObjectReader nr(r.raw("noise"), "noise");
    if (nr.has("std")) m.noise.std = nr.number("std");
    if (nr.has("seed")) m.noise.seed = nr.unsigned_integer("seed");
    nr.reject_unknown();
    if (!(m.noise.std >= 0.0) || !std::isfinite(m.noise.std)) throw ManifestError("noise.std", "must be finite and >= 0");
  }
  if (r.has("output")) m.output = r.string("output");
  r.reject_unknown();
  return m;
}

[[nodiscard]] inline ExperimentManifest parse_manifest_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ManifestError("manifest", std::string("JSON syntax error: ") + e.what());
  }
  return parse_manifest(j);
}

[[nodiscard]] inline ExperimentManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError(path.string(), "cannot open manifest");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest_text(buf.str());
}

/// Normalized manifest: radians and microseconds, every field explicit.
[[nodiscard]] inline Json to_json(const SequenceSpec& s) {
  Json j;
  j["kind"] = to_string(s.kind);
  j["detector_skew_rad"] = s.detector_skew;
  if (s.is_echo_sequence()) {
    j["tau_us"] = s.tau;
    j["n_cycles"] = s.n_cycles;
    j["phase_error_rad"] = s.y_phase_error;
    if (s.kind == SequenceKind::Custom) {
      Json steps = Json::array();
      for (const auto& step : s.custom) {
        steps.push_back({{"delay_before_us", step.delay_before},
                         {"delay_after_us", step.delay_after},
                         {"flip_rad", step.pulse.nominal_flip},
                         {"axis_phase_rad", step.pulse.axis_phase},
                         {"axis_phase_error_rad", step.pulse.axis_phase_error},
                         {"flip_error_mode", to_string(step.pulse.flip_error_mode)},
                         {"flip_offset_rad", step.pulse.flip_offset},
                         {"acquire", step.acquire}});
      }
      j["custom"] = steps;
    }
  } else {
    j["t_max_us"] = s.t_max;
    j["dt_us"] = s.dt;
    if (s.kind == SequenceKind::Fid) j["detuning_rad_per_us"] = s.detuning;
    if (s.kind == SequenceKind::Rabi) {
      j["omega_rad_per_us"] = s.omega;
      j["b1_scale_sigma"] = s.b1_scale_sigma;
      j["readout"] = s.readout == RabiReadout::Longitudinal ? "LONGITUDINAL" : "TRANSVERSE";
    }
  }
  return j;
}

[[nodiscard]] inline Json to_json(const EnsembleConfig& c) {
  return {{"n_packets", c.n_packets},
          {"delta0_rad", c.delta0},
          {"sigma_rad", c.sigma},
          {"error_mode", to_string(c.error_mode)},
          {"t2_us", detail::time_json(c.t2)},
          {"t1_us", detail::time_json(c.t1)},
          {"dephasing", to_string(c.dephasing)},
          {"seed", c.seed}};
}

[[nodiscard]] inline Json to_json(const ExperimentManifest& m) {
  Json j{{"sequence", to_json(m.sequence)}, {"ensemble", to_json(m.ensemble)}};
  Json noise{{"std", m.noise.std}};
  if (m.noise.seed) noise["seed"] = *m.noise.seed;
  j["noise"] = noise;
  if (!m.output.empty()) j["output"] = m.output;
  return j;
}

// ---------------------------------------------------------------------------
// Noise

/// Adds independent N(0, std) noise to both channels of every echo.
inline void add_channel_noise(EchoTrain& train, double std, std::uint64_t seed) {
  if (!(std >= 0.0)) throw std::invalid_argument("noise std must be >= 0");
  if (std == 0.0) return;
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> noise(0.0, std);
  for (auto& e : train.entries) {
    e.in_phase += noise(engine);
    e.quadrature += noise(engine);
  }
}

inline void add_channel_noise(TimeSeries& series, double std, std::uint64_t seed) {
  if (!(std >= 0.0)) throw std::invalid_argument("noise std must be >= 0");
  if (std == 0.0) return;
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> noise(0.0, std);
  for (auto& s : series.samples) {
    s.in_phase += noise(engine);
    s.quadrature += noise(engine);
  }
}

// ---------------------------------------------------------------------------
// Data files

[[nodiscard]] inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".json");
  return p;
}

namespace detail {

inline Json metadata_json(const std::optional<SequenceSpec>& seq, const std::optional<EnsembleConfig>& ens,
                          const NoiseSpec* noise) {
  Json manifest = Json::object();
  if (seq) manifest["sequence"] = to_json(*seq);
  if (ens) manifest["ensemble"] = to_json(*ens);
  if (noise) {
    Json n{{"std", noise->std}};
    if (noise->seed) n["seed"] = *noise->seed;
    manifest["noise"] = n;
  }
  return manifest;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataFileError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw DataFileError("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFileError("cannot open '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct CsvTable {
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> line_numbers;
};

inline CsvTable read_csv(const std::filesystem::path& path, const std::vector<std::string>& columns) {
  const std::string text = read_text(path);
  CsvTable table;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    const bool last_unterminated = end == std::string::npos;
    if (last_unterminated) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split(line, ',');
    const std::string where = path.string() + ":" + std::to_string(line_no);
    // Every line the writer emits ends in a newline; a bare tail is a cut file.
    if (last_unterminated) throw DataFileError(where + ": last line is not terminated (file truncated?)");
    if (!header_seen) {
      header_seen = true;
      if (fields.size() != columns.size()) throw DataFileError(where + ": header has wrong column count");
      for (std::size_t i = 0; i < columns.size(); ++i) {
        std::string_view f = fields[i];
        while (!f.empty() && f.front() == ' ') f.remove_prefix(1);
        while (!f.empty() && f.back() == ' ') f.remove_suffix(1);
        if (f != columns[i]) {
          throw DataFileError(where + ": expected column '" + columns[i] + "', found '" + std::string(f) + "'");
        }
      }
      continue;
    }
    if (fields.size() != columns.size()) {
      throw DataFileError(where + ": expected " + std::to_string(columns.size()) + " fields, found " +
                          std::to_string(fields.size()));
    }
    std::vector<double> row;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      auto v = parse_double(fields[i]);
      if (!v) {
        throw DataFileError(where + ": column '" + columns[i] + "': cannot parse '" + std::string(fields[i]) + "'");
      }
      row.push_back(*v);
    }
    table.rows.push_back(std::move(row));
    table.line_numbers.push_back(line_no);
  }
  if (!header_seen) throw DataFileError(path.string() + ": empty file (no header)");
  return table;
}

struct Sidecar {
  std::optional<SequenceSpec> sequence;
  std::optional<EnsembleConfig> ensemble;
  std::optional<std::size_t> rows;
};

inline Sidecar read_sidecar(const std::filesystem::path& csv, const char* format) {
  Sidecar sc;
  const auto path = sidecar_path(csv);
  if (!std::filesystem::exists(path)) return sc;
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw DataFileError(path.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != std::string(format)) {
    throw DataFileError(path.string() + ": format is not '" + std::string(format) + "'");
  }
  if (j.value("version", 0) != kFileFormatVersion) {
    throw DataFileError(path.string() + ": unsupported version");
  }
  if (j.contains("rows")) sc.rows = j["rows"].get<std::size_t>();
  if (j.contains("manifest")) {
    const Json& m = j["manifest"];
    try {
      if (m.contains("sequence")) sc.sequence = parse_sequence(m["sequence"]);
      if (m.contains("ensemble")) sc.ensemble = parse_ensemble(m["ensemble"]);
    } catch (const ManifestError& e) {
      throw DataFileError(path.string() + ": manifest." + e.what());
    }
  }
  return sc;
}

}  // namespace detail

inline const std::vector<std::string>& echo_train_columns() {
  static const std::vector<std::string> c = {"n", "echo_time_us", "in_phase", "quadrature"};
  return c;
}

inline const std::vector<std::string>& time_series_columns() {
  static const std::vector<std::string> c = {"t_us", "in_phase", "quadrature"};
  return c;
}

[[nodiscard]] inline std::string echo_train_csv(const EchoTrain& train) {
  std::string out = "n,echo_time_us,in_phase,quadrature\n";
  for (const auto& e : train.entries) {
    out += std::to_string(e.index) + "," + format_double(e.time) + "," + format_double(e.in_phase) + "," +
           format_double(e.quadrature) + "\n";
  }
  return out;
}

[[nodiscard]] inline std::string time_series_csv(const TimeSeries& series) {
  std::string out = "t_us,in_phase,quadrature\n";
  for (const auto& s : series.samples) {
    out += format_double(s.t) + "," + format_double(s.in_phase) + "," + format_double(s.quadrature) + "\n";
  }
  return out;
}

inline void write_echo_train(const std::filesystem::path& csv, const EchoTrain& train, const NoiseSpec* noise = nullptr) {
  Json side{{"format", kEchoTrainFormat},
            {"version", kFileFormatVersion},
            {"columns", echo_train_columns()},
            {"rows", train.entries.size()},
            {"manifest", detail::metadata_json(train.sequence, train.ensemble, noise)}};
  detail::write_text(csv, echo_train_csv(train));
  detail::write_text(sidecar_path(csv), side.dump(2) + "\n");
}

inline void write_time_series(const std::filesystem::path& csv, const TimeSeries& series,
                              const NoiseSpec* noise = nullptr) {
  Json side{{"format", kTimeSeriesFormat},
            {"version", kFileFormatVersion},
            {"columns", time_series_columns()},
            {"rows", series.samples.size()},
            {"manifest", detail::metadata_json(series.sequence, series.ensemble, noise)}};
  detail::write_text(csv, time_series_csv(series));
  detail::write_text(sidecar_path(csv), side.dump(2) + "\n");
}

/// Reads an echo-train CSV and, when present, its sidecar. Throws
/// DataFileError with file:line context on malformed or truncated input.
[[nodiscard]] inline EchoTrain read_echo_train(const std::filesystem::path& csv) {
  const auto side = detail::read_sidecar(csv, kEchoTrainFormat);
  const auto table = detail::read_csv(csv, echo_train_columns());
  EchoTrain train;
  train.sequence = side.sequence;
  train.ensemble = side.ensemble;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::string where = csv.string() + ":" + std::to_string(table.line_numbers[i]);
    if (!(row[0] >= 1.0) || row[0] != std::floor(row[0])) throw DataFileError(where + ": n must be a positive integer");
    EchoEntry e;
    e.index = static_cast<std::size_t>(row[0]);
    e.time = row[1];
    e.in_phase = row[2];
    e.quadrature = row[3];
    if (!train.entries.empty() && !(e.time > train.entries.back().time)) {
      throw DataFileError(where + ": echo_time_us must be strictly increasing");
    }
    train.entries.push_back(e);
  }
  if (side.rows && *side.rows != train.entries.size()) {
    throw DataFileError(csv.string() + ": truncated or padded: sidecar declares " + std::to_string(*side.rows) +
                        " rows, file has " + std::to_string(train.entries.size()));
  }
  return train;
}

[[nodiscard]] inline TimeSeries read_time_series(const std::filesystem::path& csv) {
  const auto side = detail::read_sidecar(csv, kTimeSeriesFormat);
  const auto table = detail::read_csv(csv, time_series_columns());
  TimeSeries series;
  series.sequence = side.sequence;
  series.ensemble = side.ensemble;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    if (!series.samples.empty() && !(row[0] > series.samples.back().t)) {
      throw DataFileError(csv.string() + ":" + std::to_string(table.line_numbers[i]) + ": t_us must be strictly increasing");
    }
    series.samples.push_back({row[0], row[1], row[2]});
  }
  if (side.rows && *side.rows != series.samples.size()) {
    throw DataFileError(csv.string() + ": truncated or padded: sidecar declares " + std::to_string(*side.rows) +
                        " rows, file has " + std::to_string(series.samples.size()));
  }
  return series;
}

/// Which kind of data file a path holds, judged by its header line.
enum class DataKind { EchoTrain, TimeSeries };

[[nodiscard]] inline DataKind detect_data_kind(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw DataFileError("cannot open '" + csv.string() + "'");
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (line.rfind("n,", 0) == 0) return DataKind::EchoTrain;
    if (line.rfind("t_us,", 0) == 0) return DataKind::TimeSeries;
    throw DataFileError(csv.string() + ": unrecognized header '" + line + "'");
  }
  throw DataFileError(csv.string() + ": empty file (no header)");
}

// ---------------------------------------------------------------------------
// Fit results

enum class AngleUnit { Radians, Degrees };

/// Physical unit of each fit parameter name, for unit-suffixed output.
[[nodiscard]] inline std::string parameter_unit(const std::string& name) {
  if (name == "delta" || name == "delta0" || name == "sigma" || name == "skew" || name == "phase0") return "angle";
  if (name == "t2") return "us";
  if (name == "detuning") return "rad_per_us";
  if (name == "rate") return "per_us";
  return "";
}

[[nodiscard]] inline Json to_json(const FitResult& r, AngleUnit unit = AngleUnit::Radians) {
  auto number = [](double v) { return std::isfinite(v) ? Json(v) : Json(format_double(v)); };
  Json params = Json::object();
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    const std::string u = parameter_unit(r.names[i]);
    double value = r.params[i];
    double sigma = r.sigmas[i];
    std::string key = r.names[i];
    if (u == "angle") {
      if (unit == AngleUnit::Degrees) {
        value = rad_to_deg(value);
        sigma = rad_to_deg(sigma);
        key += "_deg";
      } else {
        key += "_rad";
      }
    } else if (!u.empty()) {
      key += "_" + u;
    }
    params[key] = {{"value", number(value)}, {"sigma", number(sigma)}, {"free", static_cast<bool>(r.free[i])}};
  }
  Json derived = Json::object();
  for (const auto& [k, v] : r.derived) derived[k] = number(v);
  return {{"status", to_string(r.status)}, {"params", params},           {"derived", derived},
          {"residual_norm", r.residual_norm}, {"n_iterations", r.n_iterations}, {"notes", r.notes}};
}

}  // namespace spinerr
