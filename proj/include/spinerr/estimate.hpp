#pragma once

// Nonlinear least-squares fitting of echo trains and time series to the
// closed-form models. The optimizer is a damped Gauss-Newton
// (Levenberg-Marquardt) iteration with Marquardt diagonal scaling and a
// forward-difference Jacobian; uncertainties are linearized at the optimum.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "spinerr/models.hpp"
#include "spinerr/sequences.hpp"

namespace spinerr {

enum class FitStatus { Converged, MaxIter, Singular };

[[nodiscard]] inline std::string to_string(FitStatus s) {
  switch (s) {
    case FitStatus::Converged: return "CONVERGED";
    case FitStatus::MaxIter: return "MAX_ITER";
    case FitStatus::Singular: return "SINGULAR";
  }
  return "CONVERGED";
}

struct Bounds {
  double lower = -kInfinity;
  double upper = kInfinity;
  [[nodiscard]] bool contains(double v) const { return v >= lower && v <= upper; }
  [[nodiscard]] double clamp(double v) const { return std::clamp(v, lower, upper); }
};

struct FitOptions {
  std::size_t max_iter = 200;
  double xtol = 1e-8;  ///< relative parameter change
  double gtol = 1e-10;  ///< infinity norm of J^T r
  /// Smallest acceptable ratio of singular values of the column-normalized
  /// Jacobian at the optimum; below it the fit is reported SINGULAR.
  double rank_tol = 1e-8;
  std::map<std::string, double> fixed;    ///< pinned parameters by name
  std::map<std::string, double> initial;  ///< initial-guess overrides by name
};

using ResidualFunction = std::function<void(std::span<const double> params, std::span<double> residuals)>;

struct FitProblem {
  std::vector<std::string> names;
  std::vector<double> initial_guess;
  std::vector<Bounds> bounds;  ///< empty, or one per parameter
  std::map<std::string, double> fixed;
  std::size_t n_data = 0;
  ResidualFunction residuals;

  [[nodiscard]] std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw std::invalid_argument("unknown fit parameter '" + std::string(name) + "'");
  }

  void validate() const {
    if (names.empty() || names.size() != initial_guess.size()) {
      throw std::invalid_argument("fit: names and initial_guess must be non-empty and the same length");
    }
    if (!bounds.empty() && bounds.size() != names.size()) {
      throw std::invalid_argument("fit: bounds must be empty or one per parameter");
    }
    if (!residuals) throw std::invalid_argument("fit: no residual function");
    if (n_data == 0) throw std::invalid_argument("fit: no data");
    for (const auto& [name, value] : fixed) {
      (void)index_of(name);
      if (!std::isfinite(value) && value != kInfinity) {
        throw std::invalid_argument("fit: fixed value for '" + name + "' is not a number");
      }
    }
    std::size_t n_free = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (fixed.contains(names[i])) continue;
      ++n_free;
      if (!std::isfinite(initial_guess[i])) {
        throw std::invalid_argument("fit: initial guess for '" + names[i] + "' is not finite");
      }
      if (!bounds.empty() && !bounds[i].contains(initial_guess[i])) {
        throw std::invalid_argument("fit: initial guess for '" + names[i] + "' is outside its bounds");
      }
    }
    if (n_free == 0) throw std::invalid_argument("fit: no free parameters");
    if (n_data < n_free) throw std::invalid_argument("fit: fewer data points than free parameters");
  }
};

struct FitResult {
  std::vector<std::string> names;
  std::vector<double> params;
  std::vector<double> sigmas;  ///< 1-sigma; 0 for pinned, +inf when unidentifiable
  std::vector<bool> free;
  double residual_norm = 0.0;
  std::size_t n_iterations = 0;
  FitStatus status = FitStatus::Converged;
  std::map<std::string, double> derived;
  std::vector<std::string> notes;

  [[nodiscard]] std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw std::out_of_range("FitResult has no parameter '" + std::string(name) + "'");
  }
  [[nodiscard]] double value(std::string_view name) const { return params[index_of(name)]; }
  [[nodiscard]] double sigma(std::string_view name) const { return sigmas[index_of(name)]; }
  [[nodiscard]] bool ok() const { return status == FitStatus::Converged; }
};

namespace detail {

struct Evaluator {
  const FitProblem& problem;
  std::vector<std::size_t> free_index;
  std::vector<double> full;

  explicit Evaluator(const FitProblem& p) : problem(p), full(p.initial_guess) {
    for (std::size_t i = 0; i < p.names.size(); ++i) {
      if (auto it = p.fixed.find(p.names[i]); it != p.fixed.end()) {
        full[i] = it->second;
      } else {
        free_index.push_back(i);
      }
    }
  }

  [[nodiscard]] Bounds bound(std::size_t j) const {
    return problem.bounds.empty() ? Bounds{} : problem.bounds[free_index[j]];
  }

  Eigen::VectorXd residuals(const Eigen::VectorXd& x) {
    for (std::size_t j = 0; j < free_index.size(); ++j) full[free_index[j]] = x[static_cast<Eigen::Index>(j)];
    Eigen::VectorXd r(static_cast<Eigen::Index>(problem.n_data));
    problem.residuals(full, std::span<double>(r.data(), static_cast<std::size_t>(r.size())));
    return r;
  }

  Eigen::MatrixXd forward_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& r) {
    Eigen::MatrixXd jac(r.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      double h = std::max(1e-6, 1e-6 * std::fabs(x[j]));
      if (x[j] + h > bound(static_cast<std::size_t>(j)).upper) h = -h;
      Eigen::VectorXd xh = x;
      xh[j] += h;
      jac.col(j) = (residuals(xh) - r) / h;
    }
    return jac;
  }

  /// Central differences, used only for the covariance and rank test.
  Eigen::MatrixXd central_jacobian(const Eigen::VectorXd& x) {
    Eigen::MatrixXd jac(static_cast<Eigen::Index>(problem.n_data), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double h = std::max(1e-6, 1e-6 * std::fabs(x[j]));
      // One-sided at an active bound so the model is never evaluated outside it.
      const Bounds b = bound(static_cast<std::size_t>(j));
      Eigen::VectorXd xp = x, xm = x;
      xp[j] = std::min(x[j] + h, b.upper);
      xm[j] = std::max(x[j] - h, b.lower);
      jac.col(j) = (residuals(xp) - residuals(xm)) / (xp[j] - xm[j]);
    }
    return jac;
  }
};

}  // namespace detail

/// Minimizes the sum of squared residuals over the free parameters.
[[nodiscard]] inline FitResult fit(const FitProblem& problem, const FitOptions& opts = {}) {
  problem.validate();
  detail::Evaluator eval(problem);
  const auto p = static_cast<Eigen::Index>(eval.free_index.size());
  const auto m = static_cast<Eigen::Index>(problem.n_data);

  Eigen::VectorXd x(p);
  for (Eigen::Index j = 0; j < p; ++j) x[j] = eval.full[eval.free_index[static_cast<std::size_t>(j)]];
  Eigen::VectorXd r = eval.residuals(x);
  if (!r.allFinite()) throw std::invalid_argument("fit: residuals at the initial guess are not finite");
  double cost = r.squaredNorm();

  FitStatus status = FitStatus::MaxIter;
  std::size_t iterations = 0;
  double damping = 1e-3;

  for (std::size_t iter = 0; iter < opts.max_iter; ++iter) {
    const Eigen::MatrixXd jac = eval.forward_jacobian(x, r);
    const Eigen::VectorXd grad = jac.transpose() * r;
    if (grad.lpNorm<Eigen::Infinity>() < opts.gtol) {
      status = FitStatus::Converged;
      break;
    }
    ++iterations;
    const Eigen::MatrixXd normal = jac.transpose() * jac;
    Eigen::VectorXd scale = normal.diagonal();
    const double max_diag = scale.maxCoeff();
    for (Eigen::Index j = 0; j < p; ++j) scale[j] = std::max(scale[j], 1e-12 * std::max(max_diag, 1e-300));

    bool accepted = false;
    Eigen::VectorXd step;
    while (damping < 1e16) {
      Eigen::MatrixXd damped = normal;
      damped.diagonal() += damping * scale;
      step = damped.ldlt().solve(-grad);
      Eigen::VectorXd trial = x + step;
      for (Eigen::Index j = 0; j < p; ++j) trial[j] = eval.bound(static_cast<std::size_t>(j)).clamp(trial[j]);
      step = trial - x;
      const Eigen::VectorXd r_trial = eval.residuals(trial);
      const double trial_cost = r_trial.allFinite() ? r_trial.squaredNorm() : kInfinity;
      if (trial_cost < cost) {
        x = trial;
        r = r_trial;
        cost = trial_cost;
        damping = std::max(damping / 3.0, 1e-12);
        accepted = true;
        break;
      }
      damping *= 4.0;
    }
    if (!accepted) {
      // No descent direction left at machine precision: a local minimum.
      status = FitStatus::Converged;
      break;
    }
    if (step.norm() <= opts.xtol * (x.norm() + opts.xtol)) {
      status = FitStatus::Converged;
      break;
    }
  }

  FitResult result;
  result.names = problem.names;
  result.params = eval.full;
  for (Eigen::Index j = 0; j < p; ++j) result.params[eval.free_index[static_cast<std::size_t>(j)]] = x[j];
  result.sigmas.assign(problem.names.size(), 0.0);
  result.free.assign(problem.names.size(), false);
  for (auto i : eval.free_index) result.free[i] = true;
  result.residual_norm = std::sqrt(cost);
  result.n_iterations = iterations;
  result.status = status;

  // Linearized covariance: s^2 (J^T J)^-1 with s^2 = RSS / (m - p).
  Eigen::MatrixXd jac = eval.central_jacobian(x);
  Eigen::VectorXd norms = jac.colwise().norm();
  bool singular = (norms.array() <= 0.0).any() || !jac.allFinite();
  Eigen::VectorXd inv_diag = Eigen::VectorXd::Constant(p, kInfinity);
  if (!singular) {
    const Eigen::MatrixXd scaled = jac * norms.cwiseInverse().asDiagonal();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(scaled, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    singular = sv[p - 1] < opts.rank_tol * sv[0];
    if (!singular) {
      const Eigen::MatrixXd v_over_s = svd.matrixV() * sv.cwiseInverse().asDiagonal();
      const Eigen::MatrixXd cov_scaled = v_over_s * v_over_s.transpose();
      for (Eigen::Index j = 0; j < p; ++j) inv_diag[j] = cov_scaled(j, j) / (norms[j] * norms[j]);
    }
  }
  const double dof = static_cast<double>(m - p);
  const double s2 = dof > 0 ? cost / dof : 0.0;
  for (Eigen::Index j = 0; j < p; ++j) {
    const auto i = eval.free_index[static_cast<std::size_t>(j)];
    result.sigmas[i] = singular ? kInfinity : std::sqrt(s2 * inv_diag[j]);
  }
  if (singular) result.status = FitStatus::Singular;
  return result;
}

// ---------------------------------------------------------------------------
// Domain fits

enum class EchoSignal {
  Phased,     ///< real part of the echo rotated onto its ideal direction (signed)
  Magnitude,  ///< |in_phase + i quadrature|
};

struct EchoFitOptions : FitOptions {
  EchoSignal signal = EchoSignal::Phased;
};

namespace detail {

inline void require_entries(const EchoTrain& train, std::size_t min_count, const char* what) {
  if (train.entries.size() < min_count) {
    throw std::invalid_argument(std::string(what) + ": echo train has too few entries");
  }
}

inline std::vector<double> echo_signal(const EchoTrain& train, EchoSignal signal) {
  const auto z = phased_echoes(train);
  std::vector<double> y(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) y[i] = signal == EchoSignal::Phased ? z[i].real() : std::abs(z[i]);
  return y;
}

inline double guess_or(const FitOptions& opts, const std::string& name, double fallback) {
  auto it = opts.initial.find(name);
  return it == opts.initial.end() ? fallback : it->second;
}

/// Least-squares line y = a + b x.
inline std::pair<double, double> linear_regression(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  const double b = sxx > 0.0 ? sxy / sxx : 0.0;
  return {my - b * mx, b};
}

inline FitOptions base_options(const FitOptions& opts) {
  FitOptions o = opts;
  o.fixed.clear();
  o.initial.clear();
  return o;
}

}  // namespace detail

/// Exponential fit amplitude * exp(-t / T2) to a CPMG train. The decay is
/// parametrized internally by its rate so that a non-decaying train is a
/// regular point (T2 reported as +inf) rather than a divergence.
[[nodiscard]] inline FitResult fit_cpmg_t2(const EchoTrain& train, const EchoFitOptions& opts = {}) {
  detail::require_entries(train, 2, "fit_cpmg_t2");
  const auto y = detail::echo_signal(train, opts.signal);
  std::vector<double> t;
  for (const auto& e : train.entries) t.push_back(e.time);

  // Log-linear regression of the positive echoes for the start.
  std::vector<double> lt, ly;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] > 0.0) {
      lt.push_back(t[i]);
      ly.push_back(std::log(y[i]));
    }
  }
  double amp0 = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double rate0 = 0.0;
  if (lt.size() >= 2) {
    auto [a, b] = detail::linear_regression(lt, ly);
    amp0 = std::exp(a);
    rate0 = std::max(0.0, -b);
  }

  FitProblem problem;
  problem.names = {"amplitude", "rate"};
  double t2_guess = detail::guess_or(opts, "t2", rate0 > 0.0 ? 1.0 / rate0 : kInfinity);
  problem.initial_guess = {detail::guess_or(opts, "amplitude", amp0), t2_guess > 0.0 ? 1.0 / t2_guess : 0.0};
  problem.bounds = {Bounds{}, Bounds{0.0, kInfinity}};
  for (const auto& [name, value] : opts.fixed) {
    if (name == "t2") {
      if (!(value > 0.0)) throw std::invalid_argument("fit_cpmg_t2: fixed t2 must be > 0");
      problem.fixed["rate"] = 1.0 / value;
    } else if (name == "amplitude") {
      problem.fixed["amplitude"] = value;
    } else {
      throw std::invalid_argument("fit_cpmg_t2: unknown fixed parameter '" + name + "'");
    }
  }
  problem.n_data = y.size();
  problem.residuals = [&](std::span<const double> p, std::span<double> r) {
    for (std::size_t i = 0; i < y.size(); ++i) r[i] = p[0] * std::exp(-p[1] * t[i]) - y[i];
  };

  FitResult raw = fit(problem, detail::base_options(opts));
  FitResult out = raw;
  out.names = {"amplitude", "t2"};
  const double rate = raw.params[1];
  const double rate_sigma = raw.sigmas[1];
  out.params[1] = rate > 0.0 ? 1.0 / rate : kInfinity;
  out.sigmas[1] = rate > 0.0 ? rate_sigma / (rate * rate) : kInfinity;
  out.derived["rate_per_us"] = rate;
  out.derived["rate_per_us_sigma"] = rate_sigma;
  if (!(rate > 0.0)) out.notes.push_back("no decay resolved: T2 is unbounded");
  return out;
}

/// Fits amplitude * A_CP(n; delta0, sigma) * exp(-t / T2) with T2 pinned.
///
/// delta0 enters only through cos(k delta0), so its sign is not
/// identifiable and it is bounded to [0, pi/2]. Near delta0 = 0 the model
/// depends on delta0 and sigma through delta0^2 + sigma^2 at leading order,
/// so the two are strongly correlated there.
[[nodiscard]] inline FitResult fit_cp_errors(const EchoTrain& train, double t2, const EchoFitOptions& opts = {}) {
  if (!(t2 > 0.0)) throw std::invalid_argument("fit_cp_errors: t2 must be > 0");
  detail::require_entries(train, 3, "fit_cp_errors");
  const auto y = detail::echo_signal(train, opts.signal);
  std::vector<double> t;
  std::vector<std::size_t> n;
  for (const auto& e : train.entries) {
    if (e.index < 1 || e.index > kCpMaxEcho) throw std::invalid_argument("fit_cp_errors: echo index out of range");
    t.push_back(e.time);
    n.push_back(e.index);
  }

  // sigma from the small-error form at the echo where the decay beyond T2
  // first drops below 1/e (or the last echo).
  const double first_norm = y[0] * std::exp(t[0] / t2);
  double sigma0 = 0.05;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double ratio = std::clamp(y[i] * std::exp(t[i] / t2) / first_norm, 1e-6, 1.0 - 1e-12);
    if (ratio < std::exp(-1.0) || i + 1 == y.size()) {
      sigma0 = 2.0 * std::sqrt(-std::log(ratio)) / static_cast<double>(n[i]);
      break;
    }
  }
  sigma0 = std::clamp(sigma0, 1e-3, 1.0);

  // delta0 enters only through cos(k delta0), so the fit runs on u = delta0^2:
  // the model is regular at u = 0 and the covariance keeps the u-sigma
  // correlation even when delta0 is unresolved.
  const double bound = kPi / 2.0;
  auto build = [&](double d0, double s0, double a0, const std::map<std::string, double>& fixed) {
    FitProblem problem;
    problem.names = {"delta0_sq", "sigma", "amplitude"};
    const double dc = std::clamp(d0, 0.0, bound);
    problem.initial_guess = {dc * dc, std::clamp(s0, 0.0, bound), a0};
    problem.bounds = {Bounds{0.0, bound * bound}, Bounds{0.0, bound}, Bounds{}};
    for (const auto& [name, value] : fixed) {
      if (name == "delta0") {
        problem.fixed["delta0_sq"] = value * value;
      } else {
        problem.fixed[name] = value;
      }
    }
    problem.n_data = y.size();
    problem.residuals = [&](std::span<const double> p, std::span<double> r) {
      const double d = std::sqrt(std::max(p[0], 0.0));
      for (std::size_t i = 0; i < y.size(); ++i) {
        r[i] = p[2] * cp_echo_amplitude(n[i], d, p[1]) * std::exp(-t[i] / t2) - y[i];
      }
    };
    return problem;
  };

  std::map<std::string, double> fixed;
  for (const auto& [name, value] : opts.fixed) {
    if (name == "t2") continue;
    if (name != "delta0" && name != "sigma" && name != "amplitude") {
      throw std::invalid_argument("fit_cp_errors: unknown fixed parameter '" + name + "'");
    }
    fixed[name] = (name == "delta0") ? std::fabs(value) : value;
  }
  const double s_start = detail::guess_or(opts, "sigma", sigma0);
  const double a_start = detail::guess_or(
      opts, "amplitude", first_norm / cp_echo_amplitude(n[0], 0.0, s_start));
  const FitOptions base = detail::base_options(opts);

  FitResult chosen;
  if (fixed.contains("delta0")) {
    chosen = fit(build(fixed["delta0"], s_start, a_start, fixed), base);
  } else {
    // The split of the total spread between delta0 and sigma is poorly
    // determined, so try several starts and keep the lowest residual.
    auto reduced_fixed = fixed;
    reduced_fixed["delta0"] = 0.0;
    const FitResult reduced = fit(build(0.0, s_start, a_start, reduced_fixed), base);
    const double s_red = fixed.contains("sigma") ? fixed["sigma"] : reduced.value("sigma");
    const double a_red = fixed.contains("amplitude") ? fixed["amplitude"] : reduced.value("amplitude");
    std::vector<std::pair<double, double>> starts;
    if (opts.initial.contains("delta0") || opts.initial.contains("sigma")) {
      starts.emplace_back(detail::guess_or(opts, "delta0", 0.5 * s_red), s_start);
    }
    for (double frac : {0.0, 0.2, 0.4, 0.6, 0.8}) {
      starts.emplace_back(frac * s_red, fixed.contains("sigma") ? s_red : s_red * std::sqrt(1.0 - frac * frac));
    }
    std::size_t iterations = reduced.n_iterations;
    bool have = false;
    for (const auto& [d0, s0] : starts) {
      FitResult trial = fit(build(std::fabs(d0), s0, a_red, fixed), base);
      iterations += trial.n_iterations;
      const bool better = !have || (trial.ok() && !chosen.ok()) ||
                          (trial.ok() == chosen.ok() && trial.residual_norm < chosen.residual_norm);
      if (better) {
        chosen = std::move(trial);
        have = true;
      }
    }
    chosen.n_iterations = iterations;
  }

  // Back to delta0; its sigma follows from u = delta0^2, and at u = 0 the
  // linear bound sqrt(sigma_u) is reported instead.
  const double u = chosen.params[0];
  const double u_sigma = chosen.sigmas[0];
  chosen.names[0] = "delta0";
  chosen.params[0] = std::sqrt(std::max(u, 0.0));
  if (chosen.free[0]) {
    chosen.sigmas[0] = u > 0.0 ? u_sigma / (2.0 * chosen.params[0]) : std::sqrt(u_sigma);
    if (u <= 0.0) chosen.notes.push_back("delta0 not resolved from sigma; reported at its lower bound 0");
  }
  const double s = chosen.value("sigma");
  const double d = chosen.value("delta0");
  chosen.derived["t2"] = t2;
  chosen.derived["sigma_deg_per_180"] = rad_to_deg(s);
  chosen.derived["sigma_deg_per_180_sigma"] = rad_to_deg(chosen.sigma("sigma"));
  chosen.derived["delta0_deg"] = rad_to_deg(d);
  chosen.derived["delta0_deg_sigma"] = rad_to_deg(chosen.sigma("delta0"));
  chosen.derived["sigma_fraction_of_pi"] = s / kPi;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (cp_echo_amplitude_checked(n[i], d, s).outside_validated_domain) {
      chosen.notes.push_back("CP model evaluated outside its validated domain (n <= 32, n*sigma <= 2)");
      break;
    }
  }
  return chosen;
}

struct SpamFitOptions : FitOptions {
  bool use_all_echoes = false;  ///< default: cycle-end echoes only
};

/// Joint fit of both phased channels to amplitude * exp(-t/T2) *
/// (cos 2m delta, sin 2m delta), m the completed cycle count. The mid-cycle
/// echo of cycle m carries phase -2m delta and is used only when requested.
/// Fitting starts on the first cycles and extends to the full train so the
/// phase cannot alias onto a neighbouring branch.
[[nodiscard]] inline FitResult fit_spam_phase(const EchoTrain& train, double t2, const SpamFitOptions& opts = {}) {
  if (!(t2 > 0.0)) throw std::invalid_argument("fit_spam_phase: t2 must be > 0");
  const auto z_all = phased_echoes(train);
  struct Point {
    double t;
    double m;
    double sign;  // +1 cycle-end, -1 mid-cycle
    std::complex<double> z;
  };
  std::vector<Point> pts;
  for (std::size_t i = 0; i < train.entries.size(); ++i) {
    const auto& e = train.entries[i];
    const bool cycle_end = e.index % 2 == 0;
    if (!cycle_end && !opts.use_all_echoes) continue;
    const double m = cycle_end ? static_cast<double>(e.index / 2) : static_cast<double>((e.index + 1) / 2);
    pts.push_back({e.time, m, cycle_end ? 1.0 : -1.0, z_all[i]});
  }
  if (pts.empty()) throw std::invalid_argument("fit_spam_phase: no usable SPAM echoes");

  double delta0 = 0.0;
  bool found = false;
  for (const auto& p : pts) {
    const double mag = std::abs(p.z);
    if (mag > 0.0 && std::fabs(p.z.imag()) > 0.1 * mag) {
      delta0 = p.sign * std::arg(p.z) / (2.0 * p.m);
      found = true;
      break;
    }
  }
  if (!found) delta0 = pts.back().sign * std::arg(pts.back().z) / (2.0 * pts.back().m);
  double amp0 = 0.0;
  for (const auto& p : pts) amp0 += std::abs(p.z) * std::exp(p.t / t2);
  amp0 /= static_cast<double>(pts.size());

  std::map<std::string, double> fixed;
  for (const auto& [name, value] : opts.fixed) {
    if (name == "t2") continue;
    if (name != "delta" && name != "amplitude") {
      throw std::invalid_argument("fit_spam_phase: unknown fixed parameter '" + name + "'");
    }
    fixed[name] = value;
  }

  std::vector<double> guess = {detail::guess_or(opts, "delta", delta0), detail::guess_or(opts, "amplitude", amp0)};
  const FitOptions base = detail::base_options(opts);
  FitResult result;
  std::size_t iterations = 0;
  std::size_t used = std::min<std::size_t>(pts.size(), 2);
  while (true) {
    if (used < 2 && pts.size() >= 2) used = 2;
    FitProblem problem;
    problem.names = {"delta", "amplitude"};
    problem.initial_guess = guess;
    problem.fixed = fixed;
    problem.n_data = 2 * used;
    problem.residuals = [&, used](std::span<const double> p, std::span<double> r) {
      for (std::size_t i = 0; i < used; ++i) {
        const auto& pt = pts[i];
        const double env = p[1] * std::exp(-pt.t / t2);
        const double phase = pt.sign * 2.0 * pt.m * p[0];
        r[2 * i] = env * std::cos(phase) - pt.z.real();
        r[2 * i + 1] = env * std::sin(phase) - pt.z.imag();
      }
    };
    result = fit(problem, base);
    iterations += result.n_iterations;
    if (used == pts.size()) break;
    guess = result.params;
    used = std::min(pts.size(), 2 * used);
  }
  result.n_iterations = iterations;
  result.derived["t2"] = t2;
  result.derived["delta_deg"] = rad_to_deg(result.value("delta"));
  result.derived["delta_deg_sigma"] = rad_to_deg(result.sigma("delta"));
  return result;
}

/// Fits both FID channels to fid_quadrature_model with free amplitude,
/// detuning, phase0, skew and envelope decay rate (1/T2*). The reported
/// inter-channel angle is 90 deg + skew. The detuning is in the detection
/// frame (phase measured from +y towards +x).
[[nodiscard]] inline FitResult fit_detector_skew(const TimeSeries& series, const FitOptions& opts = {}) {
  const auto& s = series.samples;
  if (s.size() < 3) throw std::invalid_argument("fit_detector_skew: time series has too few samples");

  // Start: treat the channels as an ideal complex signal A exp(i psi).
  std::vector<double> t, phase, logmag;
  double previous = 0.0, offset = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::complex<double> z(s[i].in_phase, s[i].quadrature);
    double a = std::arg(z);
    if (i > 0) {
      while (a + offset - previous > kPi) offset -= kTwoPi;
      while (a + offset - previous < -kPi) offset += kTwoPi;
    }
    previous = a + offset;
    t.push_back(s[i].t);
    phase.push_back(previous);
    logmag.push_back(std::log(std::max(std::abs(z), 1e-300)));
  }
  const auto [phase0, detuning0] = detail::linear_regression(t, phase);
  const auto [loga, slope] = detail::linear_regression(t, logmag);

  FitProblem problem;
  problem.names = {"amplitude", "detuning", "phase0", "skew", "rate"};
  problem.initial_guess = {detail::guess_or(opts, "amplitude", std::exp(loga)),
                           detail::guess_or(opts, "detuning", detuning0), detail::guess_or(opts, "phase0", phase0),
                           detail::guess_or(opts, "skew", 0.0),
                           detail::guess_or(opts, "rate", std::max(0.0, -slope))};
  problem.bounds = {Bounds{}, Bounds{}, Bounds{}, Bounds{-kPi / 2.0, kPi / 2.0}, Bounds{0.0, kInfinity}};
  for (const auto& [name, value] : opts.fixed) problem.fixed[name] = value;
  problem.n_data = 2 * s.size();
  problem.residuals = [&](std::span<const double> p, std::span<double> r) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double env = p[0] * std::exp(-p[4] * s[i].t);
      const double psi = p[1] * s[i].t + p[2];
      r[2 * i] = env * std::cos(psi) - s[i].in_phase;
      r[2 * i + 1] = env * std::cos(psi - (kPi / 2.0 + p[3])) - s[i].quadrature;
    }
  };
  FitResult result = fit(problem, detail::base_options(opts));
  result.derived["inter_channel_angle_deg"] = 90.0 + rad_to_deg(result.value("skew"));
  result.derived["inter_channel_angle_deg_sigma"] = rad_to_deg(result.sigma("skew"));
  const double rate = result.value("rate");
  result.derived["t2_star"] = rate > 0.0 ? 1.0 / rate : kInfinity;
  return result;
}

}  // namespace spinerr
