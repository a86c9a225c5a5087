/*
 * Copyright 2026 The stable_ndde Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef STABLE_NDDE_DDE_CORE_HPP
#define STABLE_NDDE_DDE_CORE_HPP

// Constant-delay DDE integration by the method of steps.
//
//   x'(t) = f(x(t), x(t - tau), ..., x(t - K tau)),   x = psi on [-K tau, 0]
//
// Fixed-step classical RK4 with a cubic Hermite continuous extension. The step
// is snapped so that tau / h is an integer, which puts every propagated
// derivative discontinuity (multiples of tau) on the mesh. All arithmetic is
// generic over the state type so the same stepping code runs on plain Eigen
// vectors and on tape-recorded ad::Var vectors.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct DelayGrid {
  double tau = 1.0;
  int K = 0;

  double lookback() const { return K * tau; }

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("DelayGrid: tau must be positive");
    if (K < 0) throw ConfigError("DelayGrid: K must be nonnegative");
  }
};

/// Continuous initial history psi on [-r, 0].
class HistoryFunction {
public:
  enum class Kind { gp_mean, dense_solution_restriction, analytic };

  HistoryFunction() = default;
  HistoryFunction(double lookback, Index dim, std::function<Vector(double)> eval, Kind kind = Kind::analytic)
      : lookback_(lookback), dim_(dim), eval_(std::move(eval)), kind_(kind) {
    if (lookback < 0.0) throw ConfigError("HistoryFunction: negative lookback");
  }

  /// Constant history psi(s) = value.
  static HistoryFunction constant(double lookback, const Vector& value) {
    return HistoryFunction(lookback, value.size(), [value](double) { return value; });
  }

  Vector operator()(double s) const {
    const double slack = 1e-9 * std::max(1.0, lookback_);
    if (s > slack || s < -lookback_ - slack) {
      std::ostringstream msg;
      msg << "HistoryFunction: evaluation at " << s << " outside [" << -lookback_ << ", 0]";
      throw ContractViolation(msg.str());
    }
    return eval_(std::min(0.0, std::max(-lookback_, s)));
  }

  double lookback() const { return lookback_; }
  Index dim() const { return dim_; }
  Kind kind() const { return kind_; }

  /// sup-norm over an equispaced grid of `samples` points on [-r, 0].
  double sup_norm(int samples = 1001) const {
    double best = 0.0;
    for (int i = 0; i < samples; ++i) {
      const double s = samples == 1 ? 0.0 : -lookback_ + lookback_ * i / (samples - 1);
      best = std::max(best, eval_(s).norm());
    }
    return best;
  }

private:
  double lookback_ = 0.0;
  Index dim_ = 0;
  std::function<Vector(double)> eval_;
  Kind kind_ = Kind::analytic;
};

/// Right-hand side f over the delayed-state vector (x(t), x(t - tau), ..., x(t - K tau)).
struct VectorFieldSpec {
  enum class Kind { ndde_mlp, analytic_closed_loop, analytic_open };

  Kind kind = Kind::analytic_open;
  Index dim = 0;
  std::function<Vector(const Vector&)> eval;
  std::optional<double> lipschitz;
};

/// Taped counterpart of VectorFieldSpec::eval.
using TapedField = std::function<ad::Var(ad::Var)>;

struct SolverOptions {
  double step = 1e-2;
  /// Abort when |x(t)|_2 exceeds this value.
  double divergence_bound = 1e6;
  /// Minimum number of steps per delay when K >= 1 (keeps lookups in completed intervals).
  int min_steps_per_delay = 2;
};

namespace detail {

inline const Vector& value_of(const Vector& v) { return v; }
inline Vector value_of(const ad::Var& v) { return v.value(); }

struct PlainBackend {
  using Vec = Vector;
  Vec lift(const Vector& v) const { return v; }
  Vec concat(const std::vector<Vec>& parts) const {
    Index total = 0;
    for (const auto& p : parts) total += p.size();
    Vec out(total);
    Index k = 0;
    for (const auto& p : parts) {
      out.segment(k, p.size()) = p;
      k += p.size();
    }
    return out;
  }
};

struct TapeBackend {
  using Vec = ad::Var;
  ad::Tape* tape;
  Vec lift(const Vector& v) const { return tape->constant(ad::Matrix(v)); }
  Vec concat(const std::vector<Vec>& parts) const {
    if (parts.size() == 1) return parts.front();
    return ad::concat(parts);
  }
};

} // namespace detail

/// Piecewise cubic Hermite extension of an RK4 trajectory on [0, t_end].
template <class Vec>
class DenseSolution {
public:
  DenseSolution() = default;
  DenseSolution(double step, Index dim) : step_(step), dim_(dim) {}

  double step() const { return step_; }
  Index dim() const { return dim_; }
  double end_time() const { return times_.empty() ? 0.0 : times_.back(); }
  std::size_t mesh_size() const { return times_.size(); }
  const std::vector<double>& times() const { return times_; }
  const Vec& state(std::size_t m) const { return states_[m]; }
  const Vec& slope(std::size_t m) const { return slopes_[m]; }

  /// State at t in [0, end_time()]; mesh points return the stepped value itself.
  Vec at(double t) const {
    const auto [m, theta] = locate(t);
    if (theta == 0.0) return states_[m];
    const double w = times_[m + 1] - times_[m];
    const double t2 = theta * theta;
    const double t3 = t2 * theta;
    const double h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    const double h10 = t3 - 2.0 * t2 + theta;
    const double h01 = -2.0 * t3 + 3.0 * t2;
    const double h11 = t3 - t2;
    Vec out = h00 * states_[m] + h01 * states_[m + 1];
    out = out + (w * h10) * slopes_[m];
    out = out + (w * h11) * slopes_[m + 1];
    return out;
  }

  Vector value_at(double t) const { return detail::value_of(at(t)); }

  // Builders used by the integrator.
  void push(double t, Vec x) {
    times_.push_back(t);
    states_.push_back(std::move(x));
  }
  void push_slope(Vec f) { slopes_.push_back(std::move(f)); }
  void truncate(std::size_t n) {
    times_.resize(n);
    states_.resize(n);
    slopes_.resize(std::min(slopes_.size(), n));
  }

private:
  std::pair<std::size_t, double> locate(double t) const {
    const double tol = 1e-9 * step_;
    if (times_.empty() || t < -tol || t > end_time() + tol) {
      std::ostringstream msg;
      msg << "DenseSolution: evaluation at " << t << " outside [0, " << end_time() << "]";
      throw ContractViolation(msg.str());
    }
    const std::size_t last = times_.size() - 1;
    const double u = t / step_;
    const double r = std::round(u);
    std::size_t m;
    if (std::abs(u - r) < 1e-9) {
      m = static_cast<std::size_t>(std::max(0.0, r));
      if (m <= last && std::abs(times_[m] - t) <= tol) return {m, 0.0};
      if (m > last) m = last;
    } else {
      m = static_cast<std::size_t>(std::floor(u));
    }
    if (m >= last) {
      m = last > 0 ? last - 1 : 0;
      if (std::abs(t - times_[last]) <= tol) return {last, 0.0};
    }
    const double w = times_[m + 1] - times_[m];
    double theta = (t - times_[m]) / w;
    if (theta <= 0.0) return {m, 0.0};
    if (theta >= 1.0) return {m + 1, 0.0};
    return {m, theta};
  }

  double step_ = 0.0;
  Index dim_ = 0;
  std::vector<double> times_;
  std::vector<Vec> states_;
  std::vector<Vec> slopes_;
};

template <class Vec>
struct IntegrationResult {
  DenseSolution<Vec> solution;
  /// Set when the trajectory diverged; the solution then holds the finite prefix.
  std::optional<double> blowup_time;
};

/// Step actually used for a requested step h on the given grid.
inline double snapped_step(const DelayGrid& grid, double h, const SolverOptions& opt = {}) {
  if (!(h > 0.0)) throw ConfigError("integrate: step must be positive");
  if (grid.K == 0) return h;
  if (h > grid.tau * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "integrate: step " << h << " exceeds the delay " << grid.tau;
    throw ConfigError(msg.str());
  }
  long per_delay = static_cast<long>(std::ceil(grid.tau / h - 1e-9));
  per_delay = std::max<long>(per_delay, std::max(1, opt.min_steps_per_delay));
  return grid.tau / static_cast<double>(per_delay);
}

namespace detail {

template <class Backend, class Field>
IntegrationResult<typename Backend::Vec> integrate_impl(const Backend& be, Field&& field, const DelayGrid& grid,
                                                        const HistoryFunction& psi, double t_final,
                                                        const SolverOptions& opt) {
  using Vec = typename Backend::Vec;
  grid.validate();
  if (!(t_final > 0.0)) throw ConfigError("integrate: t_final must be positive");
  if (psi.lookback() + 1e-12 < grid.lookback()) {
    throw ContractViolation("integrate: history does not cover the delay lookback");
  }
  const double h = snapped_step(grid, opt.step, opt);
  const Index n = psi.dim();

  IntegrationResult<Vec> result{DenseSolution<Vec>(h, n), std::nullopt};
  DenseSolution<Vec>& sol = result.solution;

  // Delayed lookups strictly behind the current step: history for s <= 0,
  // dense output otherwise.
  auto lookup = [&](double s) -> Vec {
    if (s <= 1e-12 * h) {
      if (s > -1e-12 * h) return sol.state(0);
      return be.lift(psi(s));
    }
    return sol.at(s);
  };
  auto eval = [&](double t, const Vec& x) -> Vec {
    if (grid.K == 0) return field(x);
    std::vector<Vec> parts;
    parts.reserve(static_cast<std::size_t>(grid.K) + 1);
    parts.push_back(x);
    for (int j = 1; j <= grid.K; ++j) parts.push_back(lookup(t - j * grid.tau));
    return field(be.concat(parts));
  };
  auto finite_and_bounded = [&](const Vec& x) {
    const Vector v = value_of(x);
    return v.allFinite() && v.norm() <= opt.divergence_bound;
  };

  const long steps = static_cast<long>(std::ceil(t_final / h - 1e-9));
  sol.push(0.0, be.lift(psi(0.0)));
  for (long m = 0; m < steps; ++m) {
    const double t = static_cast<double>(m) * h;
    const double t_next = m + 1 == steps ? t_final : static_cast<double>(m + 1) * h;
    const double w = t_next - t;
    const Vec& x = sol.state(static_cast<std::size_t>(m));
    sol.push_slope(eval(t, x));
    const Vec& k1r = sol.slope(static_cast<std::size_t>(m));
    Vec k2 = eval(t + 0.5 * w, x + (0.5 * w) * k1r);
    Vec k3 = eval(t + 0.5 * w, x + (0.5 * w) * k2);
    Vec k4 = eval(t + w, x + w * k3);
    Vec incr = k1r + k4;
    incr = incr + 2.0 * (k2 + k3);
    Vec x_next = x + (w / 6.0) * incr;
    if (!finite_and_bounded(x_next)) {
      result.blowup_time = t_next;
      return result;
    }
    sol.push(t_next, std::move(x_next));
  }
  const std::size_t last = sol.mesh_size() - 1;
  sol.push_slope(eval(sol.times()[last], sol.state(last)));
  return result;
}

} // namespace detail

/// Integrates and reports divergence through IntegrationResult::blowup_time.
inline IntegrationResult<Vector> integrate_until_divergence(const VectorFieldSpec& f, const DelayGrid& grid,
                                                            const HistoryFunction& psi, double t_final,
                                                            const SolverOptions& opt) {
  if (f.dim != psi.dim()) throw ContractViolation("integrate: field and history dimensions differ");
  return detail::integrate_impl(detail::PlainBackend{}, f.eval, grid, psi, t_final, opt);
}

/// Dense solution on [0, t_final]; throws DivergenceError on blow-up.
inline DenseSolution<Vector> integrate(const VectorFieldSpec& f, const DelayGrid& grid, const HistoryFunction& psi,
                                       double t_final, const SolverOptions& opt) {
  auto r = integrate_until_divergence(f, grid, psi, t_final, opt);
  if (r.blowup_time) {
    std::ostringstream msg;
    msg << "integrate: trajectory diverged at t = " << *r.blowup_time;
    throw DivergenceError(msg.str(), *r.blowup_time);
  }
  return std::move(r.solution);
}

inline DenseSolution<Vector> integrate(const VectorFieldSpec& f, const DelayGrid& grid, const HistoryFunction& psi,
                                       double t_final, double step) {
  SolverOptions opt;
  opt.step = step;
  return integrate(f, grid, psi, t_final, opt);
}

/// Tape-recorded integration: every stage, combination and dense-output
/// lookup is a tape node, history values enter as constants.
inline DenseSolution<ad::Var> integrate_differentiable(ad::Tape& tape, const TapedField& f, const DelayGrid& grid,
                                                       const HistoryFunction& psi, double t_final,
                                                       const SolverOptions& opt) {
  auto r = detail::integrate_impl(detail::TapeBackend{&tape}, f, grid, psi, t_final, opt);
  if (r.blowup_time) {
    std::ostringstream msg;
    msg << "integrate: trajectory diverged at t = " << *r.blowup_time;
    throw DivergenceError(msg.str(), *r.blowup_time);
  }
  return std::move(r.solution);
}

/// (x(t), x(t - tau), ..., x(t - K tau)) from the dense solution and the history.
template <class Vec>
Vector delayed_state(const DenseSolution<Vec>& sol, const HistoryFunction& psi, const DelayGrid& grid, double t) {
  const double tol = 1e-12 * std::max(1.0, std::abs(t));
  if (t - grid.lookback() < -psi.lookback() - tol) {
    throw ContractViolation("delayed_state: lookback reaches before the history domain");
  }
  Vector out(psi.dim() * (grid.K + 1));
  for (int j = 0; j <= grid.K; ++j) {
    const double s = t - j * grid.tau;
    out.segment(j * psi.dim(), psi.dim()) = s <= tol ? psi(std::min(s, 0.0)) : sol.value_at(s);
  }
  return out;
}

/// History x_t restricted to [-r, 0], i.e. s -> x(t + s), drawn from psi and the solution.
inline HistoryFunction restrict_history(std::shared_ptr<const DenseSolution<Vector>> sol, const HistoryFunction& psi,
                                        double t, double lookback) {
  if (t - lookback < -psi.lookback() - 1e-12) throw ContractViolation("restrict_history: window exceeds data");
  if (t > sol->end_time() + 1e-12) throw ContractViolation("restrict_history: window ends after the solution");
  HistoryFunction base = psi;
  return HistoryFunction(
      lookback, psi.dim(),
      [s_ptr = std::move(sol), base, t](double s) -> Vector {
        const double abs_t = t + s;
        return abs_t <= 0.0 ? base(abs_t) : s_ptr->value_at(abs_t);
      },
      HistoryFunction::Kind::dense_solution_restriction);
}

/// Values at the given times of a plain dense solution (rows = times).
inline Eigen::MatrixXd sample_solution(const DenseSolution<Vector>& sol, const std::vector<double>& times) {
  Eigen::MatrixXd out(static_cast<Index>(times.size()), sol.dim());
  for (std::size_t i = 0; i < times.size(); ++i) out.row(static_cast<Index>(i)) = sol.value_at(times[i]).transpose();
  return out;
}

} // namespace stable_ndde

#endif // STABLE_NDDE_DDE_CORE_HPP
