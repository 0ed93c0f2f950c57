#pragma once

// Bloch-vector kinematics in the rotating frame: hard-pulse rotations about
// transverse axes, free evolution with relaxation, and seeded sampling of
// spin-packet ensembles with flip-angle and dephasing spreads.
//
// Conventions: rotations are right-handed and active, so pi/2 about +x takes
// +z to -y. Angles are radians, times are microseconds.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spinerr {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

[[nodiscard]] constexpr double deg_to_rad(double deg) { return deg * kPi / 180.0; }
[[nodiscard]] constexpr double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

/// Magnetization of one spin packet, dimensionless, equilibrium along +z.
struct BlochVector {
  double mx = 0.0;
  double my = 0.0;
  double mz = 1.0;

  [[nodiscard]] double norm() const { return std::sqrt(mx * mx + my * my + mz * mz); }
  [[nodiscard]] double transverse() const { return std::hypot(mx, my); }

  friend bool operator==(const BlochVector&, const BlochVector&) = default;
};

enum class FlipErrorMode {
  None,         ///< flip is exactly nominal_flip for every packet
  FixedOffset,  ///< flip is nominal_flip + flip_offset for every packet
  B1Scale,      ///< flip follows the ensemble's per-packet B1 model
};

/// One hard pulse. The rotation axis lies in the transverse plane at angle
/// axis_phase + axis_phase_error from +x.
struct PulseSpec {
  double nominal_flip = kPi;
  double axis_phase = 0.0;
  double axis_phase_error = 0.0;
  FlipErrorMode flip_error_mode = FlipErrorMode::B1Scale;
  double flip_offset = 0.0;

  [[nodiscard]] double effective_axis() const { return axis_phase + axis_phase_error; }

  void validate() const {
    if (!std::isfinite(nominal_flip) || nominal_flip < 0.0) {
      throw std::invalid_argument("pulse.nominal_flip must be finite and >= 0");
    }
    if (!std::isfinite(axis_phase) || !std::isfinite(axis_phase_error) ||
        !std::isfinite(flip_offset)) {
      throw std::invalid_argument("pulse angles must be finite");
    }
  }

  friend bool operator==(const PulseSpec&, const PulseSpec&) = default;
};

enum class EnsembleErrorMode {
  PiPulsesOnly,      ///< per-packet error applies to nominal pi pulses only
  B1ScaleAllPulses,  ///< every flip angle is scaled by the packet's B1 factor
};

enum class Dephasing {
  UniformPerTau,  ///< fixed per-packet phase per tau, uniform on [0, 2pi)
  None,
};

struct EnsembleConfig {
  std::size_t n_packets = 1;
  double delta0 = 0.0;  ///< mean flip error per pi pulse (rad)
  double sigma = 0.0;   ///< std of flip error per pi pulse (rad)
  EnsembleErrorMode error_mode = EnsembleErrorMode::PiPulsesOnly;
  double t2 = kInfinity;  ///< us
  double t1 = kInfinity;  ///< us
  Dephasing dephasing = Dephasing::UniformPerTau;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_packets == 0) throw std::invalid_argument("ensemble.n_packets must be >= 1");
    if (!std::isfinite(delta0)) throw std::invalid_argument("ensemble.delta0 must be finite");
    if (!std::isfinite(sigma) || sigma < 0.0) {
      throw std::invalid_argument("ensemble.sigma must be finite and >= 0");
    }
    if (!(t2 > 0.0)) throw std::invalid_argument("ensemble.t2 must be > 0");
    if (!(t1 > 0.0)) throw std::invalid_argument("ensemble.t1 must be > 0");
  }

  friend bool operator==(const EnsembleConfig&, const EnsembleConfig&) = default;
};

struct SpinPacket {
  BlochVector state;
  double b1_scale = 1.0;         ///< lambda, multiplies flip angles
  double dephase_per_tau = 0.0;  ///< rad accumulated per tau of free evolution

  friend bool operator==(const SpinPacket&, const SpinPacket&) = default;
};

/// Right-handed active rotation of v by `flip` about (cos axis_phase, sin axis_phase, 0).
[[nodiscard]] inline BlochVector rotate(const BlochVector& v, double flip, double axis_phase) {
  if (!std::isfinite(flip) || !std::isfinite(axis_phase)) {
    throw std::invalid_argument("rotate: flip and axis_phase must be finite");
  }
  const double nx = std::cos(axis_phase);
  const double ny = std::sin(axis_phase);
  const double c = std::cos(flip);
  const double s = std::sin(flip);
  // Rodrigues with n_z = 0.
  const double dot = nx * v.mx + ny * v.my;
  const double k = dot * (1.0 - c);
  return {
      v.mx * c + (ny * v.mz) * s + nx * k,
      v.my * c + (-nx * v.mz) * s + ny * k,
      v.mz * c + (nx * v.my - ny * v.mx) * s,
  };
}

/// Rotation about +z, the free-precession direction.
[[nodiscard]] inline BlochVector rotate_z(const BlochVector& v, double cos_phase, double sin_phase) {
  return {v.mx * cos_phase - v.my * sin_phase, v.mx * sin_phase + v.my * cos_phase, v.mz};
}

/// Precesses v about z by `phase`, then applies transverse decay over
/// `duration` with time constant t2 and longitudinal recovery toward +1 with t1.
[[nodiscard]] inline BlochVector free_evolve(const BlochVector& v, double phase, double duration,
                                             double t2, double t1 = kInfinity) {
  if (!(t2 > 0.0) || !(t1 > 0.0)) {
    throw std::invalid_argument("free_evolve: relaxation times must be > 0");
  }
  if (!(duration >= 0.0) || !std::isfinite(phase)) {
    throw std::invalid_argument("free_evolve: duration must be >= 0 and phase finite");
  }
  BlochVector out = rotate_z(v, std::cos(phase), std::sin(phase));
  const double e2 = std::exp(-duration / t2);
  const double e1 = std::exp(-duration / t1);
  out.mx *= e2;
  out.my *= e2;
  out.mz = 1.0 - (1.0 - out.mz) * e1;
  return out;
}

/// True when `flip` is a nominal pi pulse.
[[nodiscard]] inline bool is_pi_pulse(double nominal_flip) {
  return std::fabs(nominal_flip - kPi) <= 1e-12;
}

/// Flip angle this packet actually experiences for `pulse`.
[[nodiscard]] inline double applied_flip(const PulseSpec& pulse, const SpinPacket& packet,
                                         EnsembleErrorMode mode) {
  switch (pulse.flip_error_mode) {
    case FlipErrorMode::None:
      return pulse.nominal_flip;
    case FlipErrorMode::FixedOffset:
      return pulse.nominal_flip + pulse.flip_offset;
    case FlipErrorMode::B1Scale:
      if (mode == EnsembleErrorMode::B1ScaleAllPulses || is_pi_pulse(pulse.nominal_flip)) {
        return pulse.nominal_flip * packet.b1_scale;
      }
      return pulse.nominal_flip;
  }
  return pulse.nominal_flip;
}

/// Draws cfg.n_packets packets, all at +z.
///
/// The per-packet pi-pulse error is eps ~ N(delta0, sigma), stored as
/// b1_scale = 1 + eps/pi so that a nominal pi pulse becomes pi + eps. Both the
/// normal and the uniform variate are drawn for every packet regardless of
/// configuration, so changing sigma or the dephasing mode under a fixed seed
/// reuses the same underlying random numbers. Draws with b1_scale <= 0
/// (eps < -pi) are rejected and redrawn.
///
/// Sampling is sequential from a single std::mt19937_64 stream; the result
/// depends only on (cfg, seed).
[[nodiscard]] inline std::vector<SpinPacket> sample_ensemble(const EnsembleConfig& cfg) {
  cfg.validate();
  std::mt19937_64 engine(cfg.seed);
  std::normal_distribution<double> standard_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<SpinPacket> packets(cfg.n_packets);
  for (auto& packet : packets) {
    double scale = 0.0;
    do {
      const double eps = cfg.delta0 + cfg.sigma * standard_normal(engine);
      scale = 1.0 + eps / kPi;
    } while (!(scale > 0.0));
    double phase = kTwoPi * unit(engine);
    if (phase >= kTwoPi) phase = 0.0;
    packet.b1_scale = scale;
    packet.dephase_per_tau = cfg.dephasing == Dephasing::UniformPerTau ? phase : 0.0;
  }
  return packets;
}

[[nodiscard]] inline std::string to_string(EnsembleErrorMode mode) {
  return mode == EnsembleErrorMode::PiPulsesOnly ? "PI_PULSES_ONLY" : "B1_SCALE_ALL_PULSES";
}

[[nodiscard]] inline std::string to_string(Dephasing d) {
  return d == Dephasing::UniformPerTau ? "UNIFORM_PER_TAU" : "NONE";
}

[[nodiscard]] inline std::string to_string(FlipErrorMode m) {
  switch (m) {
    case FlipErrorMode::None: return "NONE";
    case FlipErrorMode::FixedOffset: return "FIXED_OFFSET";
    case FlipErrorMode::B1Scale: return "B1_SCALE";
  }
  return "B1_SCALE";
}

}  // namespace spinerr
