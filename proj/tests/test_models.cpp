#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "spinerr/models.hpp"

using namespace spinerr;

namespace {

BigInt factorial(unsigned n) {
  BigInt r = 1;
  for (unsigned i = 2; i <= n; ++i) r *= i;
  return r;
}

Rational choose(unsigned n, unsigned k) {
  if (k > n) return 0;
  return Rational(factorial(n), factorial(k) * factorial(n - k));
}

// C(1/2, m) = (-1)^(m+1) (2m)! / (4^m (m!)^2 (2m - 1)).
Rational choose_half(unsigned m) {
  if (m == 0) return 1;
  Rational r(factorial(2 * m), BigInt(1) << (2 * m));
  r /= Rational(factorial(m) * factorial(m) * (2 * m - 1));
  return m % 2 == 1 ? r : Rational(-r);
}

// Gauss-Hermite nodes/weights for E[f(X)], X ~ N(0,1) (Golub-Welsch).
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(int n) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  Eigen::VectorXd w = es.eigenvectors().row(0).array().square();
  return {es.eigenvalues(), w};
}

// Quadrature oracle for the phased CP echo n: average over a uniform
// dephasing phase (periodic trapezoid) and a Gaussian flip error.
double cp_quadrature(unsigned n, double delta0, double sigma) {
  auto echo_for = [n](double eps) {
    const int n_phi = 512;
    double sum = 0.0;
    const Eigen::Matrix3d pulse = Eigen::AngleAxisd(kPi + eps, Eigen::Vector3d::UnitX()).toRotationMatrix();
    for (int j = 0; j < n_phi; ++j) {
      const double phi = kTwoPi * j / n_phi;
      const Eigen::Matrix3d z = Eigen::AngleAxisd(phi, Eigen::Vector3d::UnitZ()).toRotationMatrix();
      Eigen::Vector3d m(0.0, -1.0, 0.0);
      for (unsigned k = 0; k < n; ++k) m = z * pulse * z * m;
      sum += m.y();
    }
    const double sign = n % 2 == 1 ? 1.0 : -1.0;
    return sign * sum / n_phi;
  };
  if (sigma == 0.0) return echo_for(delta0);
  const auto [x, w] = gauss_hermite(80);
  double total = 0.0;
  for (int i = 0; i < x.size(); ++i) total += w[i] * echo_for(delta0 + sigma * x[i]);
  return total;
}

}  // namespace

TEST(Binomial, MatchesFactorialOracle) {
  for (unsigned n = 0; n <= 40; ++n) {
    for (unsigned k = 0; k <= n + 2; ++k) EXPECT_EQ(Rational(binomial(n, k)), choose(n, k)) << n << "," << k;
  }
}

TEST(HalfBinomial, MatchesClosedForm) {
  EXPECT_EQ(half_binomial(0), Rational(1));
  EXPECT_EQ(half_binomial(1), Rational(1, 2));
  EXPECT_EQ(half_binomial(2), Rational(-1, 8));
  EXPECT_EQ(half_binomial(3), Rational(1, 16));
  for (unsigned m = 0; m <= 64; ++m) EXPECT_EQ(half_binomial(m), choose_half(m)) << m;
}

TEST(CpCoefficients, MatchFactorialOracle) {
  for (unsigned n = 1; n <= 24; ++n) {
    const auto c = cp_coefficients(n);
    for (unsigned m = 1; m <= n; ++m) {
      const Rational common = choose(n + m - 1, 2 * m - 1) * choose_half(m) * Rational(n * (2 * m - 1));
      EXPECT_EQ(c.a[m - 1], choose(2 * m, m) * common / Rational(2 * m));
      for (unsigned k = 1; k <= m; ++k) {
        Rational b = choose(2 * m, m - k) * common / Rational(m);
        if (k % 2 == 1) b = -b;
        EXPECT_EQ(c.b[m - 1][k - 1], b);
      }
    }
  }
}

TEST(CpCoefficients, SmallCases) {
  const auto c1 = cp_coefficients(1);
  EXPECT_EQ(c1.a[0], Rational(1, 2));
  EXPECT_EQ(c1.b[0][0], Rational(-1, 2));
  const auto c2 = cp_coefficients(2);
  EXPECT_EQ(c2.a[0], Rational(2));
  EXPECT_EQ(c2.a[1], Rational(-9, 8));
  EXPECT_EQ(c2.b[0][0], Rational(-2));
  EXPECT_EQ(c2.b[1][0], Rational(3, 2));
  EXPECT_EQ(c2.b[1][1], Rational(-3, 8));
}

TEST(CpCoefficients, BlockIdentity) {
  for (unsigned n = 1; n <= 32; ++n) {
    const auto c = cp_coefficients(n);
    for (unsigned m = 1; m <= n; ++m) {
      Rational s = c.a[m - 1];
      for (const auto& b : c.b[m - 1]) s += b;
      ASSERT_EQ(s, Rational(0)) << "n=" << n << " m=" << m;
    }
  }
}

TEST(CpCoefficients, ColumnsAreColumnSums) {
  const auto c = cp_coefficients(9);
  for (unsigned k = 1; k <= 9; ++k) {
    Rational s = 0;
    for (unsigned m = k; m <= 9; ++m) s += c.b[m - 1][k - 1];
    EXPECT_EQ(c.column[k - 1], s);
  }
}

TEST(CpCoefficients, DomainChecked) {
  EXPECT_THROW((void)cp_coefficients(0), std::invalid_argument);
  EXPECT_THROW((void)cp_coefficients(kCpMaxEcho + 1), std::invalid_argument);
  EXPECT_NO_THROW((void)cp_coefficients(kCpMaxEcho));
}

TEST(CpAmplitude, NoErrorsIsOne) {
  for (std::size_t n = 1; n <= kCpMaxEcho; ++n) EXPECT_NEAR(cp_echo_amplitude(n, 0.0, 0.0), 1.0, 1e-13) << n;
}

TEST(CpAmplitude, FirstEchoClosedForm) {
  for (double d : {0.0, 0.1, 0.7}) {
    for (double s : {0.0, 0.2, 0.5}) {
      EXPECT_NEAR(cp_echo_amplitude(1, d, s), 0.5 * (1.0 + std::exp(-0.5 * s * s) * std::cos(d)), 1e-15);
    }
  }
}

TEST(CpAmplitude, MatchesQuadratureOracle) {
  for (unsigned n : {1u, 2u, 3u, 5u, 8u, 12u}) {
    for (double d : {0.0, 0.1, 0.3}) {
      for (double s : {0.0, 0.1, 0.2, 0.314}) {
        EXPECT_NEAR(cp_echo_amplitude(n, d, s), cp_quadrature(n, d, s), 1e-10) << n << " " << d << " " << s;
      }
    }
  }
}

TEST(CpAmplitude, StableAtLargeN) {
  // Columns are bounded, so evaluation stays inside [-1, 1] without blow-up.
  for (std::size_t n = 30; n <= kCpMaxEcho; ++n) {
    const double a = cp_echo_amplitude(n, 0.2, 0.3);
    EXPECT_TRUE(std::isfinite(a));
    EXPECT_LE(std::fabs(a), 1.0 + 1e-9);
  }
  EXPECT_NEAR(cp_echo_amplitude(24, 0.1, 0.05), cp_quadrature(24, 0.1, 0.05), 1e-9);
}

TEST(CpAmplitude, ValidatedDomainFlag) {
  EXPECT_FALSE(cp_echo_amplitude_checked(10, 0.0, 0.1).outside_validated_domain);
  EXPECT_TRUE(cp_echo_amplitude_checked(10, 0.0, 0.3).outside_validated_domain);
  EXPECT_TRUE(cp_echo_amplitude_checked(40, 0.0, 0.01).outside_validated_domain);
  EXPECT_THROW((void)cp_echo_amplitude(3, 0.0, -0.1), std::invalid_argument);
}

TEST(CpAmplitude, SmallErrorFormWithinRegion) {
  double worst = 0.0;
  for (std::size_t n = 1; n <= 32; ++n) {
    for (int i = 0; i <= 100; ++i) {
      const double s = 0.5 / static_cast<double>(n) * i / 100.0;
      worst = std::max(worst, std::fabs(cp_echo_amplitude(n, 0.0, s) - cp_echo_amplitude_approx(n, s)));
    }
  }
  EXPECT_LE(worst, 0.01);
}

TEST(DecayModels, RelaxationEnvelopes) {
  EXPECT_NEAR(cpmg_decay_model(5, 2.0, 190.0), std::exp(-20.0 / 190.0), 1e-15);
  EXPECT_NEAR(cp_decay_model(3, 2.0, 0.0, 0.0, 100.0), std::exp(-12.0 / 100.0), 1e-14);
  EXPECT_THROW((void)cpmg_decay_model(1, 1.0, 0.0), std::invalid_argument);
}

TEST(SpamModel, PhaseIsTwoMDelta) {
  const double d = deg_to_rad(10.3);
  for (std::size_t m = 1; m <= 12; ++m) {
    const auto c = spam_echo_model(m, 2.0, d, kInfinity);
    EXPECT_NEAR(std::atan2(c.quadrature, c.in_phase), std::remainder(2.0 * m * d, kTwoPi), 1e-12);
    EXPECT_NEAR(std::hypot(c.in_phase, c.quadrature), 1.0, 1e-14);
  }
  const auto c = spam_echo_model(3, 2.0, 0.0, 190.0);
  EXPECT_NEAR(c.in_phase, std::exp(-24.0 / 190.0), 1e-15);
}

TEST(FidModel, ChannelsAreOrthogonalWithoutSkew) {
  for (double t : {0.0, 0.3, 1.7}) {
    const auto c = fid_quadrature_model(t, 2.0, 0.0, kInfinity, 0.1);
    EXPECT_NEAR(c.in_phase, std::cos(2.0 * t + 0.1), 1e-15);
    EXPECT_NEAR(c.quadrature, std::sin(2.0 * t + 0.1), 1e-15);
  }
}

TEST(RabiModel, EnvelopeAtOrigin) {
  EXPECT_DOUBLE_EQ(rabi_envelope_model(0.0, 3.0, 0.1), 1.0);
  const double t = 10.0;
  EXPECT_NEAR(rabi_envelope_model(t, 1.0, 0.1), std::exp(-0.5) * std::cos(t), 1e-15);
}

TEST(Calibration, PiPulseIn32ns) {
  // pi in 32 ns needs about 0.558 mT.
  const double b1 = kPi * 1.054571817e-34 / (2.003 * 9.2740100783e-24 * 32e-9);
  EXPECT_NEAR(b1, 5.58e-4, 1e-6);
  EXPECT_NEAR(pulse_flip_angle(b1, 32e-9), kPi, 1e-12);
  EXPECT_NEAR(pulse_flip_angle(5.58e-5, 32e-9), 0.31415, 1e-3);
  EXPECT_THROW((void)pulse_flip_angle(-1.0, 1.0), std::invalid_argument);
}
