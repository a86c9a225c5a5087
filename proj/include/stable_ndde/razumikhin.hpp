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

#ifndef STABLE_NDDE_RAZUMIKHIN_HPP
#define STABLE_NDDE_RAZUMIKHIN_HPP

// Lyapunov-Razumikhin loss on a discrete lookback grid, sample collection
// along trajectories and empirical decay certificates.
//
//   l(x) = relu(dV/dt + alpha V(x(t))) * [q V(x(t)) >= max_j V(x(t - j tau_V))]
//
// with dV/dt = grad V(x(t))^T f(x(t), x(t - tau), ..., x(t - K tau)).

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dde_core.hpp"
#include "errors.hpp"
#include "nets.hpp"
#include "parallel.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

struct RazumikhinConfig {
  double tau_V = 0.1;
  int K_V = 20;
  double alpha = 0.01;
  double q = 1.01;
  double epsilon = 0.01; // radius excluded around the origin in the margin bound

  double r_V() const { return K_V * tau_V; }

  void validate() const {
    if (!(tau_V > 0.0)) throw ConfigError("RazumikhinConfig: tau_V must be positive");
    if (K_V < 1) throw ConfigError("RazumikhinConfig: K_V must be at least 1");
    if (!(alpha > 0.0)) throw ConfigError("RazumikhinConfig: alpha must be positive");
    if (!(q > 1.0)) throw ConfigError("RazumikhinConfig: q must exceed 1");
    if (!(epsilon > 0.0)) throw ConfigError("RazumikhinConfig: epsilon must be positive");
  }

  /// Integer l with tau = l tau_V; also checks r_V >= K tau.
  int ratio(const DelayGrid& grid) const {
    validate();
    if (grid.K == 0) return 1;
    const double l = grid.tau / tau_V;
    const long rounded = std::lround(l);
    if (rounded < 1 || std::abs(l - static_cast<double>(rounded)) > 1e-9 * std::max(1.0, l)) {
      throw ConfigError("RazumikhinConfig: tau = " + std::to_string(grid.tau) + " is not an integer multiple of tau_V = " +
                        std::to_string(tau_V));
    }
    if (rounded * grid.K > K_V) {
      throw ConfigError("RazumikhinConfig: r_V = K_V tau_V must cover the model lookback K tau");
    }
    return static_cast<int>(rounded);
  }

  /// min(alpha, log q / r_V) / 2.
  double gamma() const { return std::min(alpha, std::log(q) / r_V()) / 2.0; }
};

/// (x(t), x(t - tau_V), ..., x(t - K_V tau_V)) stacked into one vector.
struct RazumikhinSample {
  Vector x;
  std::size_t trajectory = 0;
  double time = 0.0;

  Vector block(Index i, Index n) const { return x.segment(i * n, n); }
};

namespace detail {

inline void check_sample(const RazumikhinSample& s, const RazumikhinConfig& cfg, Index n) {
  if (s.x.size() != n * (cfg.K_V + 1)) {
    throw ContractViolation("lrf_loss: sample has length " + std::to_string(s.x.size()) + ", expected " +
                            std::to_string(n * (cfg.K_V + 1)));
  }
}

/// Model input (x(t), x(t - tau), ..., x(t - K tau)) read from the tau_V grid.
inline Vector model_input(const RazumikhinSample& s, const DelayGrid& grid, int l, Index n) {
  Vector v(n * (grid.K + 1));
  for (int j = 0; j <= grid.K; ++j) v.segment(j * n, n) = s.block(j * l, n);
  return v;
}

} // namespace detail

/// Theta(q V(x(t)) - max_j V(x(t - j tau_V))) with Theta(0) = 1.
inline bool razumikhin_gate(const LrfNetwork& net, const RazumikhinConfig& cfg, const RazumikhinSample& s, Index n) {
  detail::check_sample(s, cfg, n);
  const double vt = lrf_forward(net, s.block(0, n));
  double past = -std::numeric_limits<double>::infinity();
  for (int i = 1; i <= cfg.K_V; ++i) past = std::max(past, lrf_forward(net, s.block(i, n)));
  return cfg.q * vt >= past;
}

/// Loss of one sample on the tape. `f` maps the model delayed-state vector to
/// R^n and may depend on tape leaves (NDDE or policy parameters); the sample
/// itself enters as a constant. The gate is evaluated on plain values, so no
/// gradient flows through it.
inline ad::Var lrf_loss(ad::Tape& tape, const IcnnOnTape& icnn, const LrfNetwork& net, const TapedField& f,
                        const DelayGrid& grid, const RazumikhinConfig& cfg, const RazumikhinSample& s, Index n) {
  const int l = cfg.ratio(grid);
  detail::check_sample(s, cfg, n);
  if (!razumikhin_gate(net, cfg, s, n)) return tape.constant(0.0);
  ad::Var xt = tape.constant(ad::Matrix(s.block(0, n)));
  ad::Var fx = f(tape.constant(ad::Matrix(detail::model_input(s, grid, l, n))));
  if (fx.rows() != n || fx.cols() != 1) throw ContractViolation("lrf_loss: vector field output has the wrong shape");
  auto [v, vdot] = lrf_value_and_derivative(icnn, net, xt, fx);
  return ad::relu(vdot + cfg.alpha * v);
}

/// Mean loss over a batch of samples on one tape.
inline ad::Var lrf_batch_loss(ad::Tape& tape, const IcnnOnTape& icnn, const LrfNetwork& net, const TapedField& f,
                              const DelayGrid& grid, const RazumikhinConfig& cfg,
                              const std::vector<RazumikhinSample>& samples, Index n) {
  ad::Var total = tape.constant(0.0);
  if (samples.empty()) return total;
  for (const auto& s : samples) total = total + lrf_loss(tape, icnn, net, f, grid, cfg, s, n);
  return (1.0 / static_cast<double>(samples.size())) * total;
}

/// Plain loss value of one sample for a plain vector field.
inline double lrf_residual(const LrfNetwork& net, const VectorFieldSpec& f, const DelayGrid& grid,
                           const RazumikhinConfig& cfg, const RazumikhinSample& s) {
  const Index n = f.dim;
  ad::Tape tape;
  IcnnOnTape icnn(tape, net.icnn);
  const TapedField plain = [&f, &tape](ad::Var v) { return tape.constant(ad::Matrix(f.eval(Vector(v.value())))); };
  return lrf_loss(tape, icnn, net, plain, grid, cfg, s, n).scalar();
}

namespace detail {

/// Stacked lookback vector at time t from the history and a dense solution.
inline Vector razumikhin_state(const DenseSolution<Vector>& sol, const HistoryFunction& psi,
                               const RazumikhinConfig& cfg, double t) {
  const Index n = psi.dim();
  Vector x(n * (cfg.K_V + 1));
  for (int i = 0; i <= cfg.K_V; ++i) {
    const double s = t - i * cfg.tau_V;
    x.segment(i * n, n) = s <= 0.0 ? psi(std::max(s, -psi.lookback())) : sol.value_at(s);
  }
  return x;
}

/// Earliest time whose LRF lookback stays inside the history domain.
inline double first_sample_time(const RazumikhinConfig& cfg, const HistoryFunction& psi) {
  return std::max(0.0, cfg.r_V() - psi.lookback());
}

} // namespace detail

/// Integrates each history over [0, horizon] and draws `per_trajectory`
/// sample times uniformly from [max(0, r_V - r), horizon]. Diverging
/// trajectories contribute samples from their finite prefix only.
inline std::vector<RazumikhinSample> collect_samples(const VectorFieldSpec& f, const DelayGrid& grid,
                                                     const RazumikhinConfig& cfg,
                                                     const std::vector<HistoryFunction>& histories, double horizon,
                                                     int per_trajectory, std::mt19937_64& rng,
                                                     const SolverOptions& opt = {}) {
  cfg.ratio(grid);
  std::vector<std::uint64_t> seeds(histories.size());
  for (auto& s : seeds) s = rng();
  std::vector<std::vector<RazumikhinSample>> parts(histories.size());
  parallel_for(histories.size(), [&](std::size_t k) {
    const auto& psi = histories[k];
    const double t_min = detail::first_sample_time(cfg, psi);
    if (horizon < t_min) throw ConfigError("collect_samples: horizon shorter than r_V - r");
    auto res = integrate_until_divergence(f, grid, psi, std::max(horizon, 1e-12), opt);
    const double t_max = res.blowup_time ? res.solution.end_time() : horizon;
    if (t_max < t_min) return;
    std::mt19937_64 local(seeds[k]);
    std::uniform_real_distribution<double> u(t_min, t_max);
    for (int i = 0; i < per_trajectory; ++i) {
      const double t = t_max > t_min ? u(local) : t_min;
      parts[k].push_back({detail::razumikhin_state(res.solution, psi, cfg, t), k, t});
    }
  });
  std::vector<RazumikhinSample> out;
  for (auto& p : parts) out.insert(out.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  return out;
}

struct DecayCertificateReport {
  double gamma = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double M = 0.0;
  double alpha = 0.0;
  double q = 0.0;
  double r_V = 0.0;
  double max_residual = 0.0;
  std::vector<double> residuals;            // per trajectory
  std::vector<int> envelope_violations;     // per trajectory
  std::vector<bool> diverged;               // per trajectory
  std::vector<double> final_norm_ratio;     // |x(T)| / |x_{t0}|_{r_V}

  int total_violations() const {
    int s = 0;
    for (int v : envelope_violations) s += v;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const DecayCertificateReport& r) {
  j = {{"gamma", r.gamma},
       {"c1", r.c1},
       {"c2", r.c2},
       {"M", r.M},
       {"alpha", r.alpha},
       {"q", r.q},
       {"r_V", r.r_V},
       {"max_residual", r.max_residual},
       {"residuals", r.residuals},
       {"envelope_violations", r.envelope_violations},
       {"total_violations", r.total_violations()},
       {"diverged", r.diverged},
       {"final_norm_ratio", r.final_norm_ratio}};
}

struct VerifyOptions {
  double check_step = 0.01; // spacing of residual and envelope checks
  double slack = 0.05;      // relative slack on the envelope
  SolverOptions solver;
};

/// Residual of the loss on a fine grid along each trajectory and the
/// envelope |x(s)| <= M exp(-gamma (s - t0)) |x_{t0}|_{r_V} for s >= t0,
/// t0 = max(0, r_V - r). c1 is the LRF floor coefficient and c2 the largest
/// V(x) / |x|^2 seen along the checked trajectories.
inline DecayCertificateReport verify_decay(const VectorFieldSpec& f, const DelayGrid& grid, const RazumikhinConfig& cfg,
                                           const LrfNetwork& net, const std::vector<HistoryFunction>& histories,
                                           double horizon, const VerifyOptions& vo = {}) {
  cfg.ratio(grid);
  DecayCertificateReport rep;
  rep.gamma = cfg.gamma();
  rep.alpha = cfg.alpha;
  rep.q = cfg.q;
  rep.r_V = cfg.r_V();
  rep.c1 = net.c;
  const std::size_t L = histories.size();
  rep.residuals.assign(L, 0.0);
  rep.envelope_violations.assign(L, 0);
  rep.diverged.assign(L, false);
  rep.final_norm_ratio.assign(L, 0.0);

  struct Run {
    std::vector<double> times;
    std::vector<Vector> states;
    double c2 = 0.0;
    double t0 = 0.0;
    double sup0 = 0.0; // |x_{t0}|_{r_V}
  };
  std::vector<Run> runs(L);
  std::vector<char> diverged(L, 0);
  parallel_for(L, [&](std::size_t k) {
    const auto& psi = histories[k];
    Run& run = runs[k];
    run.t0 = detail::first_sample_time(cfg, psi);
    auto res = integrate_until_divergence(f, grid, psi, horizon, vo.solver);
    diverged[k] = res.blowup_time.has_value();
    const double t_end = res.blowup_time ? res.solution.end_time() : horizon;
    const int steps = static_cast<int>(std::floor((t_end - run.t0) / vo.check_step + 1e-9));
    double worst = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double t = run.t0 + i * vo.check_step;
      RazumikhinSample s{detail::razumikhin_state(res.solution, psi, cfg, t), k, t};
      worst = std::max(worst, lrf_residual(net, f, grid, cfg, s));
      const Vector x = s.block(0, psi.dim());
      run.times.push_back(t);
      run.states.push_back(x);
      const double nx = x.squaredNorm();
      if (nx > 1e-24) run.c2 = std::max(run.c2, lrf_forward(net, x) / nx);
    }
    rep.residuals[k] = worst;
    // |x_{t0}|_{r_V}: sup over the lookback window.
    double sup0 = 0.0;
    const int back = static_cast<int>(std::ceil(cfg.r_V() / vo.check_step));
    for (int i = 0; i <= back; ++i) {
      const double s = std::max(run.t0 - cfg.r_V(), run.t0 - i * vo.check_step);
      sup0 = std::max(sup0, s <= 0.0 ? psi(std::max(s, -psi.lookback())).norm() : res.solution.value_at(s).norm());
    }
    run.sup0 = sup0;
    rep.final_norm_ratio[k] = sup0 > 0.0 && !run.states.empty() ? run.states.back().norm() / sup0 : 0.0;
  });
  for (std::size_t k = 0; k < L; ++k) {
    rep.diverged[k] = diverged[k] != 0;
    rep.c2 = std::max(rep.c2, runs[k].c2);
    rep.max_residual = std::max(rep.max_residual, rep.residuals[k]);
  }
  rep.c2 = std::max(rep.c2, rep.c1);
  rep.M = rep.c2 / rep.c1;
  for (std::size_t k = 0; k < L; ++k) {
    const Run& run = runs[k];
    int violations = rep.diverged[k] ? 1 : 0;
    for (std::size_t i = 0; i < run.times.size(); ++i) {
      const double bound = (1.0 + vo.slack) * rep.M * std::exp(-rep.gamma * (run.times[i] - run.t0)) * run.sup0;
      if (run.states[i].norm() > bound) ++violations;
    }
    rep.envelope_violations[k] = violations;
  }
  return rep;
}

/// Effective Razumikhin margin of the continuous condition implied by the
/// discretised one: q_tilde = q / (1 - M_c L_f^2 w tau_V^2 / (8 c1)) with
/// M_c = 4 c2 - c1 and w = max(1, C / epsilon), C bounding the history norm.
struct DiscretizationMargin {
  double q_tilde = 0.0;
  bool valid = false; // false when 8 c1 <= M_c L_f^2 w tau_V^2 (shrink tau_V)
  double w = 1.0;
  double M_c = 0.0;
};

inline DiscretizationMargin check_discretization_margin(const RazumikhinConfig& cfg, double lipschitz, double c1,
                                                        double c2, double history_bound) {
  cfg.validate();
  if (!(c1 > 0.0) || c2 < c1) throw ConfigError("check_discretization_margin: need 0 < c1 <= c2");
  DiscretizationMargin m;
  m.M_c = 4.0 * c2 - c1;
  m.w = std::max(1.0, history_bound / cfg.epsilon);
  const double x = m.M_c * lipschitz * lipschitz * m.w * cfg.tau_V * cfg.tau_V / (8.0 * c1);
  m.valid = x < 1.0;
  m.q_tilde = m.valid ? cfg.q / (1.0 - x) : std::numeric_limits<double>::infinity();
  return m;
}

inline void to_json(nlohmann::json& j, const RazumikhinConfig& c) {
  j = {{"tau_V", c.tau_V}, {"K_V", c.K_V}, {"alpha", c.alpha}, {"q", c.q}, {"epsilon", c.epsilon}};
}

inline void from_json(const nlohmann::json& j, RazumikhinConfig& c) {
  c.tau_V = j.value("tau_V", c.tau_V);
  c.K_V = j.value("K_V", c.K_V);
  c.alpha = j.value("alpha", c.alpha);
  c.q = j.value("q", c.q);
  c.epsilon = j.value("epsilon", c.epsilon);
}

} // namespace stable_ndde

#endif // STABLE_NDDE_RAZUMIKHIN_HPP
