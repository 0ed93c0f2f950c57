#pragma once

// Closed-form echo models: the Carr-Purcell decay under a Gaussian
// flip-angle error distribution (exact rational coefficients), its
// small-error Gaussian approximation, CPMG and SPAM decay, the FID
// quadrature model, the Rabi envelope and pulse calibration.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "spinerr/compensated_sum.hpp"
#include "spinerr/spin.hpp"

namespace spinerr {

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;

/// Largest echo number accepted by the CP model.
inline constexpr std::size_t kCpMaxEcho = 64;
/// Domain over which the CP model has been validated against simulation.
inline constexpr std::size_t kCpValidatedMaxEcho = 32;
inline constexpr double kCpValidatedMaxNSigma = 2.0;

struct ChannelPair {
  double in_phase = 0.0;
  double quadrature = 0.0;
};

/// Exact binomial C(n, k); zero when k > n.
[[nodiscard]] inline BigInt binomial(unsigned n, unsigned k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  BigInt r = 1;
  for (unsigned i = 1; i <= k; ++i) {
    r *= n - k + i;
    r /= i;
  }
  return r;
}

/// Generalized binomial C(1/2, m) = (1/2)(-1/2)...(3/2 - m) / m!, by the
/// recurrence C(1/2, m) = C(1/2, m-1) * (3/2 - m) / m.
[[nodiscard]] inline Rational half_binomial(unsigned m) {
  Rational r = 1;
  for (unsigned j = 1; j <= m; ++j) {
    r *= Rational(3 - 2 * static_cast<int>(j), 2);
    r /= j;
  }
  return r;
}

/// Coefficient tables for echo n of the CP decay.
///   a_m = C(2m,m) C(n+m-1,2m-1) C(1/2,m) n (2m-1) / (2m)
///   b_k = (-1)^k C(2m,m-k) C(n+m-1,2m-1) C(1/2,m) n (2m-1) / m
/// with 1 <= k <= m <= n.
struct CpCoefficients {
  unsigned n = 0;
  std::vector<Rational> a;               ///< a[m-1]
  std::vector<std::vector<Rational>> b;  ///< b[m-1][k-1]
  /// column[k-1] = sum over m >= k of b[m-1][k-1]; the amplitude is
  /// 1 - sum_k column_k (exp(-sigma^2 k^2/2) cos(k delta0) - 1).
  std::vector<Rational> column;
  std::vector<double> column_value;  ///< column rounded to double
};

[[nodiscard]] inline CpCoefficients cp_coefficients(std::size_t n_echo) {
  if (n_echo < 1 || n_echo > kCpMaxEcho) {
    throw std::invalid_argument("cp_coefficients: n must be in [1, " + std::to_string(kCpMaxEcho) + "]");
  }
  const auto n = static_cast<unsigned>(n_echo);
  CpCoefficients c;
  c.n = n;
  c.a.reserve(n);
  c.b.reserve(n);
  c.column.assign(n, Rational(0));
  for (unsigned m = 1; m <= n; ++m) {
    const Rational common = Rational(binomial(n + m - 1, 2 * m - 1)) * half_binomial(m) * Rational(n * (2 * m - 1));
    c.a.push_back(Rational(binomial(2 * m, m)) * common / Rational(2 * m));
    std::vector<Rational> row;
    row.reserve(m);
    for (unsigned k = 1; k <= m; ++k) {
      Rational v = Rational(binomial(2 * m, m - k)) * common / Rational(m);
      if (k % 2 == 1) v = -v;
      c.column[k - 1] += v;
      row.push_back(std::move(v));
    }
    c.b.push_back(std::move(row));
  }
  c.column_value.reserve(n);
  for (const auto& v : c.column) c.column_value.push_back(v.convert_to<double>());
  return c;
}

/// Shared, lazily built coefficient tables. Safe for concurrent readers.
[[nodiscard]] inline const CpCoefficients& cached_cp_coefficients(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<const CpCoefficients>> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) {
    it = cache.emplace(n, std::make_unique<const CpCoefficients>(cp_coefficients(n))).first;
  }
  return *it->second;
}

struct CpAmplitude {
  double value = 1.0;
  bool outside_validated_domain = false;
};

/// exp(-sigma^2 k^2 / 2) cos(k delta0) - 1 without cancellation near zero.
[[nodiscard]] inline double gaussian_cosine_minus_one(unsigned k, double delta0, double sigma) {
  const double kk = static_cast<double>(k);
  const double half = std::sin(0.5 * kk * delta0);
  return std::expm1(-0.5 * sigma * sigma * kk * kk) * std::cos(kk * delta0) - 2.0 * half * half;
}

/// CP echo magnitude after the n-th refocusing pulse for flip errors
/// eps ~ N(delta0, sigma) and uniformly distributed transverse phase.
[[nodiscard]] inline CpAmplitude cp_echo_amplitude_checked(std::size_t n, double delta0, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma) || !std::isfinite(delta0)) {
    throw std::invalid_argument("cp_echo_amplitude: sigma must be finite and >= 0, delta0 finite");
  }
  const CpCoefficients& c = cached_cp_coefficients(n);
  CompensatedSum sum(1.0);
  for (unsigned k = 1; k <= c.n; ++k) {
    sum -= c.column_value[k - 1] * gaussian_cosine_minus_one(k, delta0, sigma);
  }
  return {sum.value(), n > kCpValidatedMaxEcho || static_cast<double>(n) * sigma > kCpValidatedMaxNSigma};
}

[[nodiscard]] inline double cp_echo_amplitude(std::size_t n, double delta0, double sigma) {
  return cp_echo_amplitude_checked(n, delta0, sigma).value;
}

/// Small-error form exp(-sigma^2 n^2 / 4), valid for n*sigma < 1 and delta0 = 0.
[[nodiscard]] inline double cp_echo_amplitude_approx(std::size_t n, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("cp_echo_amplitude_approx: sigma must be >= 0");
  const double ns = static_cast<double>(n) * sigma;
  return std::exp(-0.25 * ns * ns);
}

/// Echo n of a CP train at t = 2 n tau, with transverse relaxation.
[[nodiscard]] inline double cp_decay_model(std::size_t n, double tau, double delta0, double sigma, double t2) {
  if (!(t2 > 0.0)) throw std::invalid_argument("cp_decay_model: t2 must be > 0");
  return cp_echo_amplitude(n, delta0, sigma) * std::exp(-2.0 * static_cast<double>(n) * tau / t2);
}

[[nodiscard]] inline double cpmg_decay_model(std::size_t n, double tau, double t2) {
  if (!(t2 > 0.0)) throw std::invalid_argument("cpmg_decay_model: t2 must be > 0");
  return std::exp(-2.0 * static_cast<double>(n) * tau / t2);
}

/// Phased echo after m SPAM cycles (t = 4 m tau).
[[nodiscard]] inline ChannelPair spam_echo_model(std::size_t m_cycles, double tau, double delta, double t2) {
  if (!(t2 > 0.0)) throw std::invalid_argument("spam_echo_model: t2 must be > 0");
  const double m = static_cast<double>(m_cycles);
  const double envelope = std::exp(-4.0 * m * tau / t2);
  return {std::cos(2.0 * m * delta) * envelope, std::sin(2.0 * m * delta) * envelope};
}

/// Quadrature-detected FID; the quadrature channel sits at pi/2 + skew from
/// the in-phase channel. t2_star may be infinite.
[[nodiscard]] inline ChannelPair fid_quadrature_model(double t, double detuning, double skew, double t2_star,
                                                      double phase0) {
  if (!(t2_star > 0.0)) throw std::invalid_argument("fid_quadrature_model: t2_star must be > 0");
  const double envelope = std::exp(-t / t2_star);
  const double psi = detuning * t + phase0;
  return {std::cos(psi) * envelope, std::cos(psi - (kPi / 2.0 + skew)) * envelope};
}

/// Gaussian average of cos(lambda omega t) over lambda ~ N(1, sigma_scale).
[[nodiscard]] inline double rabi_envelope_model(double t, double omega, double sigma_scale) {
  const double x = sigma_scale * omega * t;
  return std::exp(-0.5 * x * x) * std::cos(omega * t);
}

struct CalibrationConstants {
  double g = 2.003;
  double mu_b = 9.2740100783e-24;  ///< J/T
  double hbar = 1.054571817e-34;   ///< J s
};

/// Rotation angle g mu_B B1 t / hbar for a pulse of field b1 (T) and duration (s).
[[nodiscard]] inline double pulse_flip_angle(double b1, double duration, const CalibrationConstants& c = {}) {
  if (!(b1 >= 0.0) || !(duration >= 0.0)) {
    throw std::invalid_argument("pulse_flip_angle: b1 and duration must be >= 0");
  }
  return c.g * c.mu_b * b1 * duration / c.hbar;
}

}  // namespace spinerr
