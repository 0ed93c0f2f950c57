#pragma once

// Pulse-sequence definitions (Rabi, FID, CP, CPMG, SPAM, custom) and the
// ensemble engine that runs them and records echo amplitudes or traces.
//
// Detection: the in-phase channel reads m_y, the quadrature channel reads
// the projection onto an axis at (pi/2 + skew) from +y towards +x, i.e.
// m_x cos(skew) - m_y sin(skew). Time t = 0 is the end of the excitation pulse.

#include <cmath>
#include <complex>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spinerr/compensated_sum.hpp"
#include "spinerr/parallel.hpp"
#include "spinerr/spin.hpp"

namespace spinerr {

enum class SequenceKind { Rabi, Fid, Cp, Cpmg, Spam, Custom };

enum class RabiReadout {
  Longitudinal,  ///< <m_z>, inversion-style readout
  Transverse,    ///< detected <m_y>, <m_x>
};

/// One refocusing element: delay, pulse, delay, optional acquisition.
struct CustomStep {
  double delay_before = 1.0;  ///< us
  PulseSpec pulse;
  double delay_after = 1.0;  ///< us
  bool acquire = true;

  friend bool operator==(const CustomStep&, const CustomStep&) = default;
};

struct SequenceSpec {
  SequenceKind kind = SequenceKind::Cp;
  double tau = 1.0;  ///< us; also the unit of per-packet dephasing
  std::size_t n_cycles = 1;
  /// Axis error of the nominal-y refocusing pulses (CPMG, SPAM): their
  /// phase is pi/2 + y_phase_error relative to the x pulses.
  double y_phase_error = 0.0;
  std::vector<CustomStep> custom;  ///< one cycle, CUSTOM only
  double detector_skew = 0.0;      ///< rad

  // FID
  double detuning = 0.0;  ///< rad/us
  // Rabi
  double omega = 1.0;           ///< rad/us
  double b1_scale_sigma = 0.0;  ///< relative std of the drive amplitude
  RabiReadout readout = RabiReadout::Longitudinal;
  // Rabi and FID sampling
  double t_max = 10.0;  ///< us
  double dt = 0.1;      ///< us

  [[nodiscard]] bool is_echo_sequence() const {
    return kind == SequenceKind::Cp || kind == SequenceKind::Cpmg || kind == SequenceKind::Spam ||
           kind == SequenceKind::Custom;
  }

  void validate() const {
    if (!std::isfinite(detector_skew)) throw std::invalid_argument("sequence.detector_skew must be finite");
    if (is_echo_sequence()) {
      if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("sequence.tau must be > 0");
      if (n_cycles < 1) throw std::invalid_argument("sequence.n_cycles must be >= 1");
      if (!std::isfinite(y_phase_error)) throw std::invalid_argument("sequence.y_phase_error must be finite");
      if (kind == SequenceKind::Custom) {
        if (custom.empty()) throw std::invalid_argument("sequence.custom must list at least one step");
        bool any_acquire = false;
        for (std::size_t i = 0; i < custom.size(); ++i) {
          const auto& step = custom[i];
          if (!(step.delay_before > 0.0) || !(step.delay_after > 0.0) ||
              !std::isfinite(step.delay_before) || !std::isfinite(step.delay_after)) {
            throw std::invalid_argument("sequence.custom[" + std::to_string(i) + "]: delays must be > 0");
          }
          step.pulse.validate();
          any_acquire = any_acquire || step.acquire;
        }
        if (!any_acquire) throw std::invalid_argument("sequence.custom: no step acquires an echo");
      }
    } else {
      if (!(dt > 0.0)) throw std::invalid_argument("sequence.dt must be > 0");
      if (!(t_max >= dt)) throw std::invalid_argument("sequence.t_max must be >= dt");
      if (kind == SequenceKind::Rabi) {
        if (!(omega > 0.0)) throw std::invalid_argument("sequence.omega must be > 0");
        if (!(b1_scale_sigma >= 0.0)) throw std::invalid_argument("sequence.b1_scale_sigma must be >= 0");
      }
      if (!std::isfinite(detuning)) throw std::invalid_argument("sequence.detuning must be finite");
    }
  }

  friend bool operator==(const SequenceSpec&, const SequenceSpec&) = default;
};

struct EchoEntry {
  std::size_t index = 0;  ///< 1-based echo number
  double time = 0.0;      ///< us after the excitation pulse
  double in_phase = 0.0;
  double quadrature = 0.0;
  double in_phase_se = 0.0;  ///< Monte-Carlo standard error; 0 when unknown
  double quadrature_se = 0.0;

  friend bool operator==(const EchoEntry&, const EchoEntry&) = default;
};

struct EchoTrain {
  std::vector<EchoEntry> entries;
  std::optional<SequenceSpec> sequence;
  std::optional<EnsembleConfig> ensemble;
};

struct TimeSample {
  double t = 0.0;
  double in_phase = 0.0;
  double quadrature = 0.0;

  friend bool operator==(const TimeSample&, const TimeSample&) = default;
};

struct TimeSeries {
  std::vector<TimeSample> samples;
  std::optional<SequenceSpec> sequence;
  std::optional<EnsembleConfig> ensemble;
};

struct Detector {
  double skew = 0.0;

  [[nodiscard]] double in_phase(const BlochVector& v) const { return v.my; }
  [[nodiscard]] double quadrature(const BlochVector& v) const {
    return v.mx * std::cos(skew) - v.my * std::sin(skew);
  }
};

/// Expanded echo program: excitation then `n_cycles` repetitions of `cycle`.
struct EchoProgram {
  PulseSpec excitation;
  std::vector<CustomStep> cycle;
  std::size_t n_cycles = 1;

  [[nodiscard]] std::size_t echoes_per_cycle() const {
    std::size_t n = 0;
    for (const auto& s : cycle) n += s.acquire ? 1 : 0;
    return n;
  }
};

[[nodiscard]] inline PulseSpec hard_pulse(double flip, double axis_phase, double axis_error = 0.0) {
  PulseSpec p;
  p.nominal_flip = flip;
  p.axis_phase = axis_phase;
  p.axis_phase_error = axis_error;
  return p;
}

/// CP:   pi/2_x - (tau - pi_x - tau)_n
/// CPMG: pi/2_x - (tau - pi_y - tau)_n
/// SPAM: pi/2_x - (tau - pi_y - tau - tau - pi_x - tau)_n
[[nodiscard]] inline EchoProgram expand(const SequenceSpec& seq) {
  seq.validate();
  if (!seq.is_echo_sequence()) throw std::invalid_argument("expand: not an echo sequence");
  EchoProgram prog;
  prog.excitation = hard_pulse(kPi / 2.0, 0.0);
  prog.n_cycles = seq.n_cycles;
  const double t = seq.tau;
  switch (seq.kind) {
    case SequenceKind::Cp:
      prog.cycle = {{t, hard_pulse(kPi, 0.0), t, true}};
      break;
    case SequenceKind::Cpmg:
      prog.cycle = {{t, hard_pulse(kPi, kPi / 2.0, seq.y_phase_error), t, true}};
      break;
    case SequenceKind::Spam:
      prog.cycle = {{t, hard_pulse(kPi, kPi / 2.0, seq.y_phase_error), t, true},
                    {t, hard_pulse(kPi, 0.0), t, true}};
      break;
    case SequenceKind::Custom:
      prog.cycle = seq.custom;
      break;
    default:
      break;
  }
  return prog;
}

namespace detail {

struct PreparedStep {
  double phase_ratio_before;  // delay_before / tau
  double phase_ratio_after;
  double e2_before, e1_before, e2_after, e1_after;
  bool acquire;
};

struct EchoAccumulator {
  CompensatedSum ip, q, ip2, q2;
  EchoAccumulator& operator+=(const EchoAccumulator& o) {
    ip += o.ip;
    q += o.q;
    ip2 += o.ip2;
    q2 += o.q2;
    return *this;
  }
};

inline double standard_error(double sum, double sum_sq, std::size_t n) {
  if (n < 2) return 0.0;
  const double nn = static_cast<double>(n);
  const double mean = sum / nn;
  const double var = std::max(0.0, (sum_sq - nn * mean * mean) / (nn - 1.0));
  return std::sqrt(var / nn);
}

inline void relax(BlochVector& v, double e2, double e1) {
  v.mx *= e2;
  v.my *= e2;
  v.mz = 1.0 - (1.0 - v.mz) * e1;
}

}  // namespace detail

/// Runs an echo program over pre-sampled packets. Exposed separately from
/// run_echo_sequence so callers can reuse one ensemble for several sequences.
[[nodiscard]] inline EchoTrain run_echo_program(const EchoProgram& prog, double tau, const Detector& detector,
                                                const std::vector<SpinPacket>& packets,
                                                const EnsembleConfig& cfg, unsigned threads = 0) {
  if (packets.empty()) throw std::invalid_argument("run_echo_sequence: empty ensemble");
  const std::size_t n_steps = prog.cycle.size();
  const std::size_t per_cycle = prog.echoes_per_cycle();
  const std::size_t n_echoes = per_cycle * prog.n_cycles;

  std::vector<detail::PreparedStep> steps;
  steps.reserve(n_steps);
  for (const auto& s : prog.cycle) {
    steps.push_back({s.delay_before / tau, s.delay_after / tau, std::exp(-s.delay_before / cfg.t2),
                     std::exp(-s.delay_before / cfg.t1), std::exp(-s.delay_after / cfg.t2),
                     std::exp(-s.delay_after / cfg.t1), s.acquire});
  }

  const std::size_t n_blocks = block_count(packets.size());
  std::vector<std::vector<detail::EchoAccumulator>> partial(n_blocks);

  for_each_block(packets.size(), threads, [&](std::size_t block, std::size_t begin, std::size_t end) {
    auto& acc = partial[block];
    acc.assign(n_echoes, {});
    struct PacketStep {
      double cb, sb, ca, sa;    // dephasing before/after
      double flip, axis;        // pulse for this packet
    };
    std::vector<PacketStep> ps(n_steps);
    for (std::size_t i = begin; i < end; ++i) {
      const SpinPacket& packet = packets[i];
      for (std::size_t k = 0; k < n_steps; ++k) {
        const double pb = packet.dephase_per_tau * steps[k].phase_ratio_before;
        const double pa = packet.dephase_per_tau * steps[k].phase_ratio_after;
        ps[k] = {std::cos(pb), std::sin(pb), std::cos(pa), std::sin(pa),
                 applied_flip(prog.cycle[k].pulse, packet, cfg.error_mode), prog.cycle[k].pulse.effective_axis()};
      }
      BlochVector v = rotate(packet.state, applied_flip(prog.excitation, packet, cfg.error_mode),
                             prog.excitation.effective_axis());
      std::size_t echo = 0;
      for (std::size_t c = 0; c < prog.n_cycles; ++c) {
        for (std::size_t k = 0; k < n_steps; ++k) {
          const auto& st = steps[k];
          const auto& p = ps[k];
          v = rotate_z(v, p.cb, p.sb);
          detail::relax(v, st.e2_before, st.e1_before);
          v = rotate(v, p.flip, p.axis);
          v = rotate_z(v, p.ca, p.sa);
          detail::relax(v, st.e2_after, st.e1_after);
          if (st.acquire) {
            const double ip = detector.in_phase(v);
            const double q = detector.quadrature(v);
            auto& a = acc[echo++];
            a.ip += ip;
            a.q += q;
            a.ip2 += ip * ip;
            a.q2 += q * q;
          }
        }
      }
    }
  });

  std::vector<detail::EchoAccumulator> total(n_echoes);
  for (const auto& block : partial) {
    for (std::size_t e = 0; e < n_echoes; ++e) total[e] += block[e];
  }

  EchoTrain train;
  train.entries.reserve(n_echoes);
  const double n = static_cast<double>(packets.size());
  double time = 0.0;
  std::size_t echo = 0;
  for (std::size_t c = 0; c < prog.n_cycles; ++c) {
    for (const auto& s : prog.cycle) {
      time += s.delay_before + s.delay_after;
      if (!s.acquire) continue;
      const auto& a = total[echo];
      EchoEntry e;
      e.index = ++echo;
      e.time = time;
      e.in_phase = a.ip.value() / n;
      e.quadrature = a.q.value() / n;
      e.in_phase_se = detail::standard_error(a.ip.value(), a.ip2.value(), packets.size());
      e.quadrature_se = detail::standard_error(a.q.value(), a.q2.value(), packets.size());
      train.entries.push_back(e);
    }
  }
  return train;
}

/// Samples the ensemble described by cfg and runs seq over it.
[[nodiscard]] inline EchoTrain run_echo_sequence(const SequenceSpec& seq, const EnsembleConfig& cfg,
                                                 unsigned threads = 0) {
  cfg.validate();
  if (!seq.is_echo_sequence()) throw std::invalid_argument("run_echo_sequence: sequence kind is not an echo sequence");
  const EchoProgram prog = expand(seq);
  const auto packets = sample_ensemble(cfg);
  EchoTrain train = run_echo_program(prog, seq.tau, Detector{seq.detector_skew}, packets, cfg, threads);
  train.sequence = seq;
  train.ensemble = cfg;
  return train;
}

/// Ideal echo direction for each echo, as a unit complex number
/// (in_phase + i*quadrature) for an error-free packet with no dephasing,
/// relaxation or detector skew. Directions that vanish are reported as 1.
[[nodiscard]] inline std::vector<std::complex<double>> reference_echo_directions(const SequenceSpec& seq) {
  EchoProgram prog = expand(seq);
  prog.excitation.flip_error_mode = FlipErrorMode::None;
  prog.excitation.axis_phase_error = 0.0;
  for (auto& s : prog.cycle) {
    s.pulse.flip_error_mode = FlipErrorMode::None;
    s.pulse.axis_phase_error = 0.0;
  }
  BlochVector v = rotate(BlochVector{}, prog.excitation.nominal_flip, prog.excitation.effective_axis());
  std::vector<std::complex<double>> out;
  out.reserve(prog.n_cycles * prog.echoes_per_cycle());
  for (std::size_t c = 0; c < prog.n_cycles; ++c) {
    for (const auto& s : prog.cycle) {
      v = rotate(v, s.pulse.nominal_flip, s.pulse.effective_axis());
      if (!s.acquire) continue;
      std::complex<double> z(v.my, v.mx);
      const double mag = std::abs(z);
      out.push_back(mag > 1e-9 ? z / mag : std::complex<double>(1.0, 0.0));
    }
  }
  return out;
}

/// Echoes rotated into the frame of their ideal direction, so an error-free
/// train reads +1 on the in-phase channel for every echo. Trains without
/// sequence metadata are assumed to be phased already.
[[nodiscard]] inline std::vector<std::complex<double>> phased_echoes(const EchoTrain& train) {
  std::vector<std::complex<double>> out;
  out.reserve(train.entries.size());
  std::vector<std::complex<double>> refs;
  if (train.sequence && train.sequence->is_echo_sequence()) refs = reference_echo_directions(*train.sequence);
  for (const auto& e : train.entries) {
    std::complex<double> z(e.in_phase, e.quadrature);
    if (e.index >= 1 && e.index <= refs.size()) z *= std::conj(refs[e.index - 1]);
    out.push_back(z);
  }
  return out;
}

[[nodiscard]] inline std::size_t sample_count(double t_max, double dt) {
  return static_cast<std::size_t>(std::floor(t_max / dt + 1e-9)) + 1;
}

/// Continuous nutation about +x at lambda*omega with lambda ~ N(1, b1_scale_sigma)
/// drawn from cfg's stream (n_packets, seed). Relaxation during the drive is
/// neglected. Longitudinal readout records <m_z> on the in-phase column.
[[nodiscard]] inline TimeSeries run_rabi(double b1_scale_sigma, double omega, double t_max, double dt,
                                         const EnsembleConfig& cfg,
                                         RabiReadout readout = RabiReadout::Longitudinal,
                                         double detector_skew = 0.0, unsigned threads = 0) {
  if (!(omega > 0.0)) throw std::invalid_argument("run_rabi: omega must be > 0");
  if (!(dt > 0.0)) throw std::invalid_argument("run_rabi: dt must be > 0");
  if (!(t_max >= dt)) throw std::invalid_argument("run_rabi: t_max must be >= dt");
  if (!(b1_scale_sigma >= 0.0)) throw std::invalid_argument("run_rabi: b1_scale_sigma must be >= 0");
  EnsembleConfig drive = cfg;
  drive.delta0 = 0.0;
  drive.sigma = kPi * b1_scale_sigma;
  drive.error_mode = EnsembleErrorMode::B1ScaleAllPulses;
  drive.dephasing = Dephasing::None;
  const auto packets = sample_ensemble(drive);

  const std::size_t n_samples = sample_count(t_max, dt);
  const Detector detector{detector_skew};
  std::vector<std::vector<CompensatedSum>> partial(block_count(packets.size()));
  for_each_block(packets.size(), threads, [&](std::size_t block, std::size_t begin, std::size_t end) {
    auto& acc = partial[block];
    acc.assign(2 * n_samples, {});
    for (std::size_t i = begin; i < end; ++i) {
      const double rate = packets[i].b1_scale * omega;
      for (std::size_t s = 0; s < n_samples; ++s) {
        const double angle = rate * (static_cast<double>(s) * dt);
        const BlochVector v{0.0, -std::sin(angle), std::cos(angle)};
        if (readout == RabiReadout::Longitudinal) {
          acc[2 * s] += v.mz;
        } else {
          acc[2 * s] += detector.in_phase(v);
          acc[2 * s + 1] += detector.quadrature(v);
        }
      }
    }
  });

  TimeSeries series;
  series.samples.resize(n_samples);
  const double n = static_cast<double>(packets.size());
  for (std::size_t s = 0; s < n_samples; ++s) {
    CompensatedSum ip, q;
    for (const auto& block : partial) {
      ip += block[2 * s];
      q += block[2 * s + 1];
    }
    series.samples[s] = {static_cast<double>(s) * dt, ip.value() / n, q.value() / n};
  }
  SequenceSpec seq;
  seq.kind = SequenceKind::Rabi;
  seq.omega = omega;
  seq.b1_scale_sigma = b1_scale_sigma;
  seq.t_max = t_max;
  seq.dt = dt;
  seq.readout = readout;
  seq.detector_skew = detector_skew;
  series.sequence = seq;
  series.ensemble = cfg;
  return series;
}

/// pi/2_x excitation then free precession at `detuning` (rad/us) with
/// transverse decay from cfg.t2. Per-tau dephasing does not apply to a FID.
[[nodiscard]] inline TimeSeries run_fid(double detuning, double detector_skew, const EnsembleConfig& cfg,
                                        double t_max, double dt, unsigned threads = 0) {
  cfg.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("run_fid: dt must be > 0");
  if (!(t_max >= dt)) throw std::invalid_argument("run_fid: t_max must be >= dt");
  if (!std::isfinite(detuning)) throw std::invalid_argument("run_fid: detuning must be finite");
  const auto packets = sample_ensemble(cfg);
  const PulseSpec excitation = hard_pulse(kPi / 2.0, 0.0);
  const Detector detector{detector_skew};
  const std::size_t n_samples = sample_count(t_max, dt);

  std::vector<std::vector<CompensatedSum>> partial(block_count(packets.size()));
  for_each_block(packets.size(), threads, [&](std::size_t block, std::size_t begin, std::size_t end) {
    auto& acc = partial[block];
    acc.assign(2 * n_samples, {});
    for (std::size_t i = begin; i < end; ++i) {
      const BlochVector start =
          rotate(packets[i].state, applied_flip(excitation, packets[i], cfg.error_mode), excitation.effective_axis());
      for (std::size_t s = 0; s < n_samples; ++s) {
        const double t = static_cast<double>(s) * dt;
        const BlochVector v = free_evolve(start, detuning * t, t, cfg.t2, cfg.t1);
        acc[2 * s] += detector.in_phase(v);
        acc[2 * s + 1] += detector.quadrature(v);
      }
    }
  });

  TimeSeries series;
  series.samples.resize(n_samples);
  const double n = static_cast<double>(packets.size());
  for (std::size_t s = 0; s < n_samples; ++s) {
    CompensatedSum ip, q;
    for (const auto& block : partial) {
      ip += block[2 * s];
      q += block[2 * s + 1];
    }
    series.samples[s] = {static_cast<double>(s) * dt, ip.value() / n, q.value() / n};
  }
  SequenceSpec seq;
  seq.kind = SequenceKind::Fid;
  seq.detuning = detuning;
  seq.detector_skew = detector_skew;
  seq.t_max = t_max;
  seq.dt = dt;
  series.sequence = seq;
  series.ensemble = cfg;
  return series;
}

/// Number of full oscillation periods whose positive peak on the in-phase
/// channel is at least `fraction` of the initial value.
[[nodiscard]] inline std::size_t count_oscillations(const TimeSeries& series, double fraction) {
  const auto& s = series.samples;
  if (s.size() < 3) return 0;
  const double reference = std::fabs(s.front().in_phase);
  std::size_t count = 0;
  for (std::size_t i = 1; i + 1 < s.size(); ++i) {
    const double y = s[i].in_phase;
    if (y > s[i - 1].in_phase && y >= s[i + 1].in_phase && y >= fraction * reference) ++count;
  }
  return count;
}

[[nodiscard]] inline std::string to_string(SequenceKind k) {
  switch (k) {
    case SequenceKind::Rabi: return "RABI";
    case SequenceKind::Fid: return "FID";
    case SequenceKind::Cp: return "CP";
    case SequenceKind::Cpmg: return "CPMG";
    case SequenceKind::Spam: return "SPAM";
    case SequenceKind::Custom: return "CUSTOM";
  }
  return "CP";
}

}  // namespace spinerr
