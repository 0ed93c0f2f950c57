#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <atomic>
#include <cstdlib>
#include <numeric>
#include <vector>

#include "spinerr/compensated_sum.hpp"
#include "spinerr/parallel.hpp"
#include "spinerr/spin.hpp"

using namespace spinerr;

namespace {

// Oracle: rotation matrix from Eigen's angle-axis form.
BlochVector eigen_rotate(const BlochVector& v, double flip, double axis) {
  const Eigen::Vector3d n(std::cos(axis), std::sin(axis), 0.0);
  const Eigen::Vector3d r = Eigen::AngleAxisd(flip, n) * Eigen::Vector3d(v.mx, v.my, v.mz);
  return {r.x(), r.y(), r.z()};
}

void expect_near(const BlochVector& a, const BlochVector& b, double tol = 1e-14) {
  EXPECT_NEAR(a.mx, b.mx, tol);
  EXPECT_NEAR(a.my, b.my, tol);
  EXPECT_NEAR(a.mz, b.mz, tol);
}

}  // namespace

TEST(Rotate, HalfPiAboutXTakesZToMinusY) {
  expect_near(rotate(BlochVector{}, kPi / 2.0, 0.0), {0.0, -1.0, 0.0});
}

TEST(Rotate, HalfPiAboutYTakesZToPlusX) {
  expect_near(rotate(BlochVector{}, kPi / 2.0, kPi / 2.0), {1.0, 0.0, 0.0});
}

TEST(Rotate, PiAboutXInvertsY) {
  expect_near(rotate(BlochVector{0.0, -1.0, 0.0}, kPi, 0.0), {0.0, 1.0, 0.0});
}

TEST(Rotate, MatchesAngleAxisOracle) {
  const std::vector<BlochVector> starts = {{0, 0, 1}, {0.3, -0.4, 0.2}, {-0.7, 0.1, -0.5}};
  for (const auto& v : starts) {
    for (double flip : {0.0, 0.1, kPi / 2.0, kPi, 2.5, -1.3}) {
      for (double axis : {0.0, 0.2, kPi / 2.0, 3.0, -0.8}) {
        expect_near(rotate(v, flip, axis), eigen_rotate(v, flip, axis), 1e-13);
      }
    }
  }
}

TEST(Rotate, PreservesNorm) {
  BlochVector v{0.2, 0.5, -0.3};
  const double n0 = v.norm();
  for (int i = 0; i < 1000; ++i) v = rotate(v, 0.37 * i, 0.11 * i);
  EXPECT_NEAR(v.norm(), n0, 1e-12);
}

TEST(Rotate, RejectsNonFinite) {
  EXPECT_THROW((void)rotate(BlochVector{}, std::nan(""), 0.0), std::invalid_argument);
  EXPECT_THROW((void)rotate(BlochVector{}, 1.0, kInfinity), std::invalid_argument);
}

TEST(FreeEvolve, PrecessesAboutZ) {
  const BlochVector v = free_evolve({1.0, 0.0, 0.0}, kPi / 2.0, 0.0, kInfinity);
  expect_near(v, {0.0, 1.0, 0.0});
}

TEST(FreeEvolve, RelaxesTransverseAndLongitudinal) {
  const BlochVector v = free_evolve({1.0, 0.0, 0.0}, 0.0, 50.0, 100.0, 200.0);
  EXPECT_NEAR(v.mx, std::exp(-0.5), 1e-15);
  EXPECT_NEAR(v.mz, 1.0 - std::exp(-0.25), 1e-15);
}

TEST(FreeEvolve, InfiniteTimesAreIdentityOnMagnitude) {
  const BlochVector v = free_evolve({0.6, 0.8, 0.0}, 1.234, 1e6, kInfinity);
  EXPECT_NEAR(v.transverse(), 1.0, 1e-14);
}

TEST(FreeEvolve, RejectsBadArguments) {
  EXPECT_THROW((void)free_evolve({}, 0.0, 1.0, 0.0), std::invalid_argument);
  EXPECT_THROW((void)free_evolve({}, 0.0, -1.0, 1.0), std::invalid_argument);
}

TEST(AppliedFlip, Modes) {
  SpinPacket p;
  p.b1_scale = 1.1;
  PulseSpec pi = {kPi, 0.0, 0.0, FlipErrorMode::B1Scale, 0.0};
  PulseSpec half = {kPi / 2.0, 0.0, 0.0, FlipErrorMode::B1Scale, 0.0};
  EXPECT_DOUBLE_EQ(applied_flip(pi, p, EnsembleErrorMode::PiPulsesOnly), kPi * 1.1);
  EXPECT_DOUBLE_EQ(applied_flip(half, p, EnsembleErrorMode::PiPulsesOnly), kPi / 2.0);
  EXPECT_DOUBLE_EQ(applied_flip(half, p, EnsembleErrorMode::B1ScaleAllPulses), kPi / 2.0 * 1.1);
  PulseSpec offset = {kPi, 0.0, 0.0, FlipErrorMode::FixedOffset, 0.05};
  EXPECT_DOUBLE_EQ(applied_flip(offset, p, EnsembleErrorMode::B1ScaleAllPulses), kPi + 0.05);
  PulseSpec none = {kPi, 0.0, 0.0, FlipErrorMode::None, 0.05};
  EXPECT_DOUBLE_EQ(applied_flip(none, p, EnsembleErrorMode::B1ScaleAllPulses), kPi);
}

TEST(EnsembleConfig, ValidationNamesField) {
  EnsembleConfig c;
  c.sigma = -0.1;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("ensemble.sigma"), std::string::npos);
  }
  c = {};
  c.n_packets = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.t2 = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SampleEnsemble, DeterministicPerSeed) {
  EnsembleConfig c;
  c.n_packets = 1000;
  c.sigma = 0.2;
  c.seed = 42;
  EXPECT_EQ(sample_ensemble(c), sample_ensemble(c));
  EnsembleConfig d = c;
  d.seed = 43;
  EXPECT_NE(sample_ensemble(c), sample_ensemble(d));
}

TEST(SampleEnsemble, MomentsMatchConfiguration) {
  EnsembleConfig c;
  c.n_packets = 200000;
  c.delta0 = 0.1;
  c.sigma = 0.2;
  c.seed = 7;
  const auto packets = sample_ensemble(c);
  double sum = 0.0, sum_sq = 0.0, phase_sum = 0.0;
  for (const auto& p : packets) {
    const double eps = (p.b1_scale - 1.0) * kPi;
    sum += eps;
    sum_sq += eps * eps;
    phase_sum += p.dephase_per_tau;
    ASSERT_GE(p.dephase_per_tau, 0.0);
    ASSERT_LT(p.dephase_per_tau, kTwoPi);
  }
  const double n = static_cast<double>(packets.size());
  const double mean = sum / n;
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  EXPECT_NEAR(mean, 0.1, 5.0 * 0.2 / std::sqrt(n));
  EXPECT_NEAR(sd, 0.2, 0.002);
  EXPECT_NEAR(phase_sum / n, kPi, 0.02);
}

TEST(SampleEnsemble, CommonRandomNumbersAcrossSigma) {
  // Same seed, different sigma: the standard normals are shared.
  EnsembleConfig a;
  a.n_packets = 100;
  a.sigma = 0.1;
  EnsembleConfig b = a;
  b.sigma = 0.2;
  const auto pa = sample_ensemble(a), pb = sample_ensemble(b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_NEAR((pb[i].b1_scale - 1.0), 2.0 * (pa[i].b1_scale - 1.0), 1e-14);
    EXPECT_EQ(pa[i].dephase_per_tau, pb[i].dephase_per_tau);
  }
}

TEST(SampleEnsemble, NoDephasingOption) {
  EnsembleConfig c;
  c.n_packets = 10;
  c.dephasing = Dephasing::None;
  for (const auto& p : sample_ensemble(c)) EXPECT_EQ(p.dephase_per_tau, 0.0);
}

TEST(CompensatedSum, RecoversCancelledTerms) {
  CompensatedSum s;
  s += 1.0;
  s += 1e100;
  s += 1.0;
  s += -1e100;
  EXPECT_EQ(s.value(), 2.0);
}

TEST(CompensatedSum, BeatsNaiveOnManySmallTerms) {
  CompensatedSum s;
  double naive = 0.0;
  for (int i = 0; i < 1000000; ++i) {
    s += 0.1;
    naive += 0.1;
  }
  EXPECT_NEAR(s.value(), 100000.0, 1e-9);
  EXPECT_GT(std::fabs(naive - 100000.0), std::fabs(s.value() - 100000.0));
}

TEST(Parallel, ResolveThreadsPrecedence) {
  EXPECT_EQ(resolve_threads(3), 3u);
  ::setenv(kThreadsEnvVar, "5", 1);
  EXPECT_EQ(resolve_threads(0), 5u);
  EXPECT_EQ(resolve_threads(2), 2u);
  ::setenv(kThreadsEnvVar, "junk", 1);
  EXPECT_GE(resolve_threads(0), 1u);
  ::unsetenv(kThreadsEnvVar);
}

TEST(Parallel, EveryItemVisitedOnce) {
  const std::size_t n = 3 * kBlockSize + 17;
  for (unsigned threads : {1u, 2u, 7u}) {
    std::vector<std::atomic<int>> hits(n);
    for_each_block(n, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) ++hits[i];
    });
    for (const auto& h : hits) ASSERT_EQ(h.load(), 1);
  }
}

TEST(Parallel, PropagatesExceptions) {
  EXPECT_THROW(for_each_block(5 * kBlockSize, 3,
                              [](std::size_t b, std::size_t, std::size_t) {
                                if (b == 2) throw std::runtime_error("boom");
                              }),
               std::runtime_error);
}
