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

#ifndef STABLE_NDDE_SYSTEMS_HPP
#define STABLE_NDDE_SYSTEMS_HPP

// Benchmark dynamics, data generation, LQR design and delayed closed loops.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "dataset.hpp"
#include "dde_core.hpp"
#include "errors.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

enum class SystemId { oscillator, damped_oscillator, double_pendulum, inverted_pendulum, cartpole, lotka_volterra };

inline const char* system_name(SystemId id) {
  switch (id) {
  case SystemId::oscillator: return "oscillator";
  case SystemId::damped_oscillator: return "damped-oscillator";
  case SystemId::double_pendulum: return "double-pendulum";
  case SystemId::inverted_pendulum: return "inverted-pendulum";
  case SystemId::cartpole: return "cartpole";
  case SystemId::lotka_volterra: return "lotka-volterra";
  }
  return "unknown";
}

inline SystemId parse_system(const std::string& name) {
  for (SystemId id : {SystemId::oscillator, SystemId::damped_oscillator, SystemId::double_pendulum,
                      SystemId::inverted_pendulum, SystemId::cartpole, SystemId::lotka_volterra}) {
    if (name == system_name(id)) return id;
  }
  throw ConfigError("unknown system '" + name + "'");
}

struct SystemParams {
  double gravity = 9.81;
  double mass = 1.0;     // pendulum bob / rod mass
  double length = 1.0;   // pendulum / rod length
  double damping = 0.05; // gamma of the damped oscillator
  double friction = 0.1; // rod friction b_i of the double pendulum
  double lv_alpha = 5.0 / 3.0, lv_beta = 4.0 / 3.0, lv_gamma = 1.0, lv_delta = 1.0;
  double cart_mass = 1.0, pole_mass = 0.1, pole_half_length = 0.5;
};

/// Ground-truth ODE z' = g(z, u) with observation y = z[observed].
struct BenchmarkSystem {
  SystemId id = SystemId::oscillator;
  SystemParams params;
  Index latent_dim = 2;
  Index input_dim = 0;
  std::vector<Index> observed{0};

  Index observed_dim() const { return static_cast<Index>(observed.size()); }

  /// Control-affine split g(z, u) = a(z) + b(z) u; b has input_dim columns.
  std::pair<Vector, Matrix> affine_parts(const Vector& z) const {
    if (z.size() != latent_dim) throw ContractViolation(std::string(system_name(id)) + ": state dimension mismatch");
    const auto& p = params;
    Vector a(latent_dim);
    Matrix b = Matrix::Zero(latent_dim, input_dim);
    switch (id) {
    case SystemId::oscillator: a << z(1), -z(0); break;
    case SystemId::damped_oscillator: a << z(1), -z(0) - 2.0 * p.damping * z(1); break;
    case SystemId::inverted_pendulum:
      a << z(1), p.gravity / p.length * std::sin(z(0));
      b(1, 0) = 1.0 / (p.mass * p.length * p.length);
      break;
    case SystemId::lotka_volterra:
      a << p.lv_alpha * z(0) - p.lv_beta * z(0) * z(1), -p.lv_gamma * z(1) + p.lv_delta * z(0) * z(1);
      break;
    case SystemId::double_pendulum: a = double_pendulum_rhs(z); break;
    case SystemId::cartpole: {
      // State (phi, phi', xi, xi'), phi measured from upright; force F on the cart.
      const double mc = p.cart_mass, mp = p.pole_mass, l = p.pole_half_length, total = mc + mp;
      const double s = std::sin(z(0)), c = std::cos(z(0));
      const double denom = l * (4.0 / 3.0 - mp * c * c / total);
      // phi'' = (g s - c (F + mp l phi'^2 s) / total) / denom
      const double phi_dd0 = (p.gravity * s - c * mp * l * z(1) * z(1) * s / total) / denom;
      const double phi_dd_F = -c / total / denom;
      // xi'' = (F + mp l (phi'^2 s - phi'' c)) / total
      const double xi_dd0 = mp * l * (z(1) * z(1) * s - phi_dd0 * c) / total;
      const double xi_dd_F = (1.0 - mp * l * phi_dd_F * c) / total;
      a << z(1), phi_dd0, z(3), xi_dd0;
      b(1, 0) = phi_dd_F;
      b(3, 0) = xi_dd_F;
      break;
    }
    }
    return {a, b};
  }

  Vector rhs(const Vector& z, const Vector& u = Vector()) const {
    auto [a, b] = affine_parts(z);
    if (input_dim == 0 || u.size() == 0) return a;
    if (u.size() != input_dim) throw ContractViolation(std::string(system_name(id)) + ": input dimension mismatch");
    return a + b * u;
  }

  Vector observe(const Vector& z) const {
    Vector y(observed_dim());
    for (Index i = 0; i < observed_dim(); ++i) y(i) = z(observed[static_cast<std::size_t>(i)]);
    return y;
  }

private:
  // Two uniform rods (mass m, length l, inertia m l^2 / 12 about their
  // centres) with viscous joint friction b. State (phi1, phi2, phi1', phi2').
  Vector double_pendulum_rhs(const Vector& z) const {
    const auto& p = params;
    const double m = p.mass, l = p.length, g = p.gravity, I = m * l * l / 12.0;
    const double delta = z(0) - z(1), w1 = z(2), w2 = z(3);
    Eigen::Matrix2d M;
    M(0, 0) = m * l * l / 4.0 + m * l * l + I;
    M(1, 1) = m * l * l / 4.0 + I;
    M(0, 1) = M(1, 0) = m * l * l / 2.0 * std::cos(delta);
    Eigen::Vector2d F;
    F(0) = -m * l * l / 2.0 * std::sin(delta) * w2 * w2 - 1.5 * m * g * l * std::sin(z(0)) - p.friction * w1;
    F(1) = m * l * l / 2.0 * std::sin(delta) * w1 * w1 - 0.5 * m * g * l * std::sin(z(1)) - p.friction * w2;
    const double det = M.determinant();
    if (!(std::abs(det) > 1e-12)) throw NumericalError("double pendulum: singular mass matrix");
    const Eigen::Vector2d acc = M.inverse() * F;
    Vector out(4);
    out << w1, w2, acc(0), acc(1);
    return out;
  }
};

inline BenchmarkSystem make_system(SystemId id, const SystemParams& params = {}) {
  BenchmarkSystem s;
  s.id = id;
  s.params = params;
  switch (id) {
  case SystemId::oscillator:
  case SystemId::damped_oscillator:
    s.latent_dim = 2;
    s.observed = {0};
    break;
  case SystemId::lotka_volterra:
    s.latent_dim = 2;
    s.observed = {0};
    break;
  case SystemId::double_pendulum:
    s.latent_dim = 4;
    s.observed = {0, 1};
    break;
  case SystemId::inverted_pendulum:
    s.latent_dim = 2;
    s.input_dim = 1;
    s.observed = {0, 1};
    break;
  case SystemId::cartpole:
    s.latent_dim = 4;
    s.input_dim = 1;
    s.observed = {0, 1, 2, 3};
    break;
  }
  return s;
}

/// Total mechanical energy T + V of the double pendulum.
inline double double_pendulum_energy(const BenchmarkSystem& sys, const Vector& z) {
  const auto& p = sys.params;
  const double m = p.mass, l = p.length, g = p.gravity, I = m * l * l / 12.0;
  const double w1 = z(2), w2 = z(3);
  const double v1sq = l * l / 4.0 * w1 * w1;
  const double v2sq = l * l * w1 * w1 + l * l / 4.0 * w2 * w2 + l * l * std::cos(z(0) - z(1)) * w1 * w2;
  const double T = 0.5 * (m * v1sq + m * v2sq + I * w1 * w1 + I * w2 * w2);
  const double y1 = -l / 2.0 * std::cos(z(0));
  const double y2 = -l * std::cos(z(0)) - l / 2.0 * std::cos(z(1));
  return T + m * g * (y1 + y2);
}

/// delta x - gamma ln x + beta y - alpha ln y, constant along Lotka-Volterra orbits.
inline double lotka_volterra_invariant(const BenchmarkSystem& sys, const Vector& z) {
  const auto& p = sys.params;
  return p.lv_delta * z(0) - p.lv_gamma * std::log(z(0)) + p.lv_beta * z(1) - p.lv_alpha * std::log(z(1));
}

/// Open-loop ODE as a K = 0 vector field (u = 0).
inline VectorFieldSpec open_loop_field(const BenchmarkSystem& sys) {
  return {VectorFieldSpec::Kind::analytic_open, sys.latent_dim, [sys](const Vector& z) { return sys.rhs(z); }};
}

/// Ground-truth solve from z0 over [0, horizon] with a fine RK4 step.
inline DenseSolution<Vector> ground_truth(const BenchmarkSystem& sys, const Vector& z0, double horizon,
                                          double step = 1e-3) {
  return integrate(open_loop_field(sys), DelayGrid{1.0, 0}, HistoryFunction::constant(0.0, z0), horizon, step);
}

/// Ground truth run backwards in time from z0: returns z(-s) for s in [0, span].
inline DenseSolution<Vector> ground_truth_backward(const BenchmarkSystem& sys, const Vector& z0, double span,
                                                   double step = 1e-3) {
  const VectorFieldSpec reversed{VectorFieldSpec::Kind::analytic_open, sys.latent_dim,
                                 [sys](const Vector& z) { return Vector(-sys.rhs(z)); }};
  return integrate(reversed, DelayGrid{1.0, 0}, HistoryFunction::constant(0.0, z0), span, step);
}

struct DatasetSpec {
  std::vector<Vector> initial_conditions; // latent states at t = 0
  double horizon = 30.0;
  int observations = 150;                 // N prediction samples on [0, horizon]
  double noise_std = 0.0;
  double history_length = 3.0;            // history samples cover [-history_length, 0)
  double solver_step = 1e-3;
  std::string split = "train";
};

/// Noisy partial observations y_i = h(z(t_i)) + eps_i on an equispaced grid;
/// history samples use the same spacing and come from the backward solve.
inline TrajectoryDataset generate_dataset(const BenchmarkSystem& sys, const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.observations < 2) throw ConfigError("generate_dataset: need at least 2 observations");
  if (spec.noise_std < 0.0) throw ConfigError("generate_dataset: negative noise level");
  if (!(spec.horizon > 0.0)) throw ConfigError("generate_dataset: horizon must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  TrajectoryDataset ds;
  ds.noise_std = spec.noise_std;
  ds.horizon = spec.horizon;
  ds.dim = sys.observed_dim();
  const double dt = spec.horizon / (spec.observations - 1);
  const int n_hist = spec.history_length > 0.0 ? static_cast<int>(std::ceil(spec.history_length / dt - 1e-9)) : 0;
  for (const Vector& z0 : spec.initial_conditions) {
    if (z0.size() != sys.latent_dim) throw ConfigError("generate_dataset: initial condition has wrong dimension");
    Trajectory tr;
    tr.split = spec.split;
    const auto fwd = ground_truth(sys, z0, spec.horizon, spec.solver_step);
    tr.prediction.values.resize(spec.observations, ds.dim);
    for (int i = 0; i < spec.observations; ++i) {
      const double t = i == spec.observations - 1 ? spec.horizon : i * dt;
      tr.prediction.times.push_back(t);
      tr.prediction.values.row(i) = sys.observe(fwd.value_at(t)).transpose();
    }
    if (n_hist > 0) {
      const auto bwd = ground_truth_backward(sys, z0, n_hist * dt, spec.solver_step);
      tr.history.values.resize(n_hist, ds.dim);
      for (int j = n_hist; j >= 1; --j) {
        const int row = n_hist - j;
        tr.history.times.push_back(-j * dt);
        tr.history.values.row(row) = sys.observe(bwd.value_at(j * dt)).transpose();
      }
    } else {
      tr.history.values.resize(0, ds.dim);
    }
    if (spec.noise_std > 0.0) {
      for (Index i = 0; i < tr.history.values.size(); ++i) tr.history.values.data()[i] += spec.noise_std * noise(rng);
      for (Index i = 0; i < tr.prediction.values.size(); ++i) tr.prediction.values.data()[i] += spec.noise_std * noise(rng);
    }
    ds.trajectories.push_back(std::move(tr));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// LQR

struct LqrProblem {
  Matrix A, B, Q, R;
};

namespace detail {

/// Solves A^T X + X A + C = 0 through the Kronecker form (small systems only).
inline Matrix solve_lyapunov(const Matrix& A, const Matrix& C) {
  const Index n = A.rows();
  const Matrix I = Matrix::Identity(n, n);
  Matrix L = Matrix::Zero(n * n, n * n);
  // vec(A^T X) = (I kron A^T) vec X, vec(X A) = (A^T kron I) vec X
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      L.block(i * n, j * n, n, n) += I(i, j) * A.transpose();
      L.block(i * n, j * n, n, n) += A(j, i) * I;
    }
  }
  const Vector c = -Eigen::Map<const Vector>(C.data(), n * n);
  const Vector x = L.fullPivLu().solve(c);
  Matrix X = Eigen::Map<const Matrix>(x.data(), n, n);
  return 0.5 * (X + X.transpose());
}

inline double max_real_eigenvalue(const Matrix& A) {
  return Eigen::EigenSolver<Matrix>(A, false).eigenvalues().real().maxCoeff();
}

} // namespace detail

/// Gain K (p x m) of the stabilizing Riccati solution, u = -K x, by
/// Newton-Kleinman iteration seeded with Bass' stabilizing gain.
inline Matrix solve_lqr(const LqrProblem& p) {
  const Index m = p.A.rows();
  if (p.A.cols() != m || p.B.rows() != m || p.Q.rows() != m || p.R.rows() != p.B.cols()) {
    throw ConfigError("solve_lqr: inconsistent dimensions");
  }
  if (Eigen::LLT<Matrix>(p.R).info() != Eigen::Success) throw ConfigError("solve_lqr: R must be positive definite");
  const Matrix Rinv = p.R.inverse();
  // Bass: with -(A + beta I) Hurwitz, (A + beta I) Z + Z (A + beta I)^T = 2 B B^T.
  const double beta = p.A.norm() + 1.0;
  const Matrix Ab = p.A + beta * Matrix::Identity(m, m);
  const Matrix Z = detail::solve_lyapunov(Ab.transpose(), -2.0 * p.B * p.B.transpose());
  Matrix K = p.B.transpose() * Z.inverse();
  if (detail::max_real_eigenvalue(p.A - p.B * K) >= 0.0) throw NumericalError("solve_lqr: could not find a stabilizing seed");
  Matrix P = Matrix::Zero(m, m);
  for (int it = 0; it < 200; ++it) {
    const Matrix Acl = p.A - p.B * K;
    const Matrix Pn = detail::solve_lyapunov(Acl, p.Q + K.transpose() * p.R * K);
    K = Rinv * p.B.transpose() * Pn;
    const double change = (Pn - P).norm();
    P = Pn;
    if (change <= 1e-13 * std::max(1.0, P.norm())) {
      if (detail::max_real_eigenvalue(p.A - p.B * K) >= 0.0) throw NumericalError("solve_lqr: closed loop not Hurwitz");
      return K;
    }
  }
  throw NumericalError("solve_lqr: Newton-Kleinman did not converge in 200 iterations");
}

/// Jacobians (A, B) of g at (z, u) = (0, 0) by central differences.
inline std::pair<Matrix, Matrix> linearize(const BenchmarkSystem& sys, double h = 1e-6) {
  const Index m = sys.latent_dim, p = sys.input_dim;
  Matrix A(m, m), B(m, p);
  const Vector z0 = Vector::Zero(m), u0 = Vector::Zero(p);
  for (Index j = 0; j < m; ++j) {
    Vector e = Vector::Zero(m);
    e(j) = h;
    A.col(j) = (sys.rhs(z0 + e, u0) - sys.rhs(z0 - e, u0)) / (2.0 * h);
  }
  for (Index j = 0; j < p; ++j) {
    Vector e = Vector::Zero(p);
    e(j) = h;
    B.col(j) = (sys.rhs(z0, u0 + e) - sys.rhs(z0, u0 - e)) / (2.0 * h);
  }
  return {A, B};
}

// ---------------------------------------------------------------------------
// Delayed state feedback u(t) = k^T x(t - tau_u)

struct FeedbackPolicy {
  Vector gains;
  double delay = 0.0;
};

/// Policy initialised from the LQR design u = -K x of the linearisation.
inline FeedbackPolicy lqr_policy(const BenchmarkSystem& sys, double delay, double q_weight = 1.0, double r_weight = 1.0) {
  if (sys.input_dim != 1) throw ConfigError("lqr_policy: system has no scalar input");
  auto [A, B] = linearize(sys);
  const Matrix K = solve_lqr({A, B, q_weight * Matrix::Identity(sys.latent_dim, sys.latent_dim),
                              r_weight * Matrix::Identity(1, 1)});
  return {-K.row(0).transpose(), delay};
}

/// Delay grid of the closed loop: one delay tau_u (K = 0 without delay).
inline DelayGrid closed_loop_grid(const FeedbackPolicy& policy) {
  return policy.delay > 0.0 ? DelayGrid{policy.delay, 1} : DelayGrid{1.0, 0};
}

/// x'(t) = g(x(t), k^T x(t - tau_u)) over the delayed state (x(t), x(t - tau_u)).
inline VectorFieldSpec closed_loop_field(const BenchmarkSystem& sys, const FeedbackPolicy& policy) {
  if (policy.gains.size() != sys.latent_dim) throw ContractViolation("closed_loop_field: gain dimension mismatch");
  const Index m = sys.latent_dim;
  const bool delayed = policy.delay > 0.0;
  return {VectorFieldSpec::Kind::analytic_closed_loop, m, [sys, policy, m, delayed](const Vector& v) {
            const Vector x = v.head(m);
            const Vector xd = delayed ? Vector(v.segment(m, m)) : x;
            return sys.rhs(x, Vector::Constant(1, policy.gains.dot(xd)));
          }};
}

/// Closed-loop field on a tape with the gains as a leaf (m x 1); the state
/// argument is the delayed-state vector (x(t), x(t - tau_u)).
inline ad::Var closed_loop_taped(const BenchmarkSystem& sys, ad::Var gains, const Vector& delayed_state) {
  ad::Tape& tape = *gains.tape();
  const Index m = sys.latent_dim;
  const Vector x = delayed_state.head(m);
  const Vector xd = delayed_state.size() >= 2 * m ? Vector(delayed_state.segment(m, m)) : x;
  auto [a, b] = sys.affine_parts(x);
  ad::Var u = ad::dot(gains, tape.constant(Matrix(xd)));
  return tape.constant(Matrix(a)) + ad::matmul(tape.constant(Matrix(b.col(0))), u);
}

/// Initial history from the open-loop flow: x(-r) drawn uniformly on the
/// sphere of the given radius, integrated forward with u = 0 up to t = 0.
struct ControlHistory {
  HistoryFunction history;
  Vector start; // x(-r)
};

inline ControlHistory control_history_sampler(const BenchmarkSystem& sys, double radius, double lookback,
                                              std::mt19937_64& rng, double step = 1e-3) {
  if (!(radius > 0.0)) throw ConfigError("control_history_sampler: radius must be positive");
  std::normal_distribution<double> g(0.0, 1.0);
  Vector dir(sys.latent_dim);
  do {
    for (Index i = 0; i < dir.size(); ++i) dir(i) = g(rng);
  } while (dir.norm() == 0.0);
  const Vector start = radius * dir / dir.norm();
  if (lookback <= 0.0) return {HistoryFunction::constant(0.0, start), start};
  const double h = std::min(step, lookback / 4.0);
  auto sol = std::make_shared<const DenseSolution<Vector>>(ground_truth(sys, start, lookback, h));
  HistoryFunction psi(
      lookback, sys.latent_dim, [sol, lookback](double s) { return sol->value_at(s + lookback); },
      HistoryFunction::Kind::analytic);
  return {std::move(psi), start};
}

inline ControlHistory control_history_sampler(const BenchmarkSystem& sys, double radius, double lookback,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return control_history_sampler(sys, radius, lookback, rng);
}

/// Sampled Lipschitz estimate of a vector field: max |f(a) - f(b)| / |a - b|
/// over random nearby pairs in a ball.
inline double estimate_lipschitz(const VectorFieldSpec& f, Index input_dim, double radius, std::uint64_t seed,
                                 int samples = 2000) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-radius, radius);
  std::normal_distribution<double> g(0.0, 1e-3 * radius);
  double best = 0.0;
  for (int i = 0; i < samples; ++i) {
    const Vector a = Vector::NullaryExpr(input_dim, [&] { return u(rng); });
    const Vector b = a + Vector::NullaryExpr(input_dim, [&] { return g(rng); });
    const double d = (a - b).norm();
    if (d > 0.0) best = std::max(best, (f.eval(a) - f.eval(b)).norm() / d);
  }
  return best;
}

// JSON for system configs: {"id": ..., "params": {...}}.
inline void to_json(nlohmann::json& j, const SystemParams& p) {
  j = {{"gravity", p.gravity},       {"mass", p.mass},
       {"length", p.length},         {"damping", p.damping},
       {"friction", p.friction},     {"lv_alpha", p.lv_alpha},
       {"lv_beta", p.lv_beta},       {"lv_gamma", p.lv_gamma},
       {"lv_delta", p.lv_delta},     {"cart_mass", p.cart_mass},
       {"pole_mass", p.pole_mass},   {"pole_half_length", p.pole_half_length}};
}

inline void from_json(const nlohmann::json& j, SystemParams& p) {
  auto get = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  get("gravity", p.gravity);
  get("mass", p.mass);
  get("length", p.length);
  get("damping", p.damping);
  get("friction", p.friction);
  get("lv_alpha", p.lv_alpha);
  get("lv_beta", p.lv_beta);
  get("lv_gamma", p.lv_gamma);
  get("lv_delta", p.lv_delta);
  get("cart_mass", p.cart_mass);
  get("pole_mass", p.pole_mass);
  get("pole_half_length", p.pole_half_length);
}

} // namespace stable_ndde

#endif // STABLE_NDDE_SYSTEMS_HPP
