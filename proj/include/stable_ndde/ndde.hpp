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

#ifndef STABLE_NDDE_NDDE_HPP
#define STABLE_NDDE_NDDE_HPP

// Neural DDE model x'(t) = f_theta(x(t), x(t - tau), ..., x(t - K tau)),
// least-squares fitting objective, mini-batch windows and the augmented
// neural ODE baseline.

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "dataset.hpp"
#include "dde_core.hpp"
#include "errors.hpp"
#include "gp_history.hpp"
#include "nets.hpp"
#include "parallel.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

struct NddeModel {
  DelayGrid grid;
  MlpParams params;
  Index dim = 1;

  void validate() const {
    grid.validate();
    if (params.input_dim() != dim * (grid.K + 1) || params.output_dim() != dim) {
      throw ConfigError("NddeModel: MLP must map R^" + std::to_string(dim * (grid.K + 1)) + " to R^" +
                        std::to_string(dim));
    }
  }

  VectorFieldSpec field() const {
    auto p = std::make_shared<const MlpParams>(params);
    return {VectorFieldSpec::Kind::ndde_mlp, dim, [p](const Vector& v) { return mlp_forward(*p, v); }};
  }
};

inline NddeModel make_ndde(Index dim, const DelayGrid& grid, std::mt19937_64& rng,
                           const std::vector<Index>& hidden = default_mlp_hidden(), double output_scale = 1.0) {
  NddeModel m{grid, make_mlp(dim * (grid.K + 1), hidden, dim, rng, output_scale), dim};
  m.validate();
  return m;
}

/// x_hat(t) from the model vector field; t = 0 returns psi(0).
inline Vector predict(const NddeModel& model, const HistoryFunction& psi, double t, const SolverOptions& opt = {}) {
  if (t < 0.0) throw ContractViolation("predict: t must be nonnegative");
  if (t == 0.0) return psi(0.0);
  return integrate(model.field(), model.grid, psi, t, opt).value_at(t);
}

/// Predictions at the given nonnegative times (rows = times).
inline Matrix predict_at(const NddeModel& model, const HistoryFunction& psi, const std::vector<double>& times,
                         const SolverOptions& opt = {}) {
  Matrix out(static_cast<Index>(times.size()), model.dim);
  if (times.empty()) return out;
  const double t_last = *std::max_element(times.begin(), times.end());
  if (t_last <= 0.0) {
    for (Index i = 0; i < out.rows(); ++i) out.row(i) = psi(0.0).transpose();
    return out;
  }
  const auto sol = integrate(model.field(), model.grid, psi, t_last, opt);
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < 0.0) throw ContractViolation("predict_at: times must be nonnegative");
    out.row(static_cast<Index>(i)) = sol.value_at(times[i]).transpose();
  }
  return out;
}

namespace detail {

inline void check_targets(const Observations& obs, Index dim, const char* who) {
  if (obs.values.rows() != obs.size() || (obs.size() > 0 && obs.dim() != dim)) {
    throw ContractViolation(std::string(who) + ": observation shape mismatch");
  }
  for (double t : obs.times) {
    if (t < 0.0) throw ContractViolation(std::string(who) + ": observation times must be nonnegative");
  }
}

/// sum_i |y_i - sol(t_i)|^2 on the tape.
template <class Project>
ad::Var squared_error_on_tape(ad::Tape& tape, const DenseSolution<ad::Var>* sol, const Vector& x0,
                              const Observations& obs, Project&& project) {
  ad::Var total = tape.constant(0.0);
  for (Index i = 0; i < obs.size(); ++i) {
    const double t = obs.times[static_cast<std::size_t>(i)];
    ad::Var y = tape.constant(ad::Matrix(obs.values.row(i).transpose()));
    ad::Var x = sol != nullptr && t > 0.0 ? project(sol->at(t)) : tape.constant(ad::Matrix(x0));
    total = total + ad::sqnorm(x - y);
  }
  return total;
}

} // namespace detail

/// J = sum_i |y_i - x_hat(t_i)|^2 recorded on `tape`, differentiable in the
/// MLP leaves of `p`.
inline ad::Var ndde_loss(ad::Tape& tape, const NddeModel& model, const MlpOnTape& p, const HistoryFunction& psi,
                         const Observations& obs, const SolverOptions& opt = {}) {
  detail::check_targets(obs, model.dim, "ndde_loss");
  const Vector x0 = psi(0.0);
  const double t_last = obs.times.empty() ? 0.0 : *std::max_element(obs.times.begin(), obs.times.end());
  if (t_last <= 0.0) return detail::squared_error_on_tape(tape, nullptr, x0, obs, [](ad::Var v) { return v; });
  const TapedField f = [&p](ad::Var v) { return mlp_forward(p, v); };
  const auto sol = integrate_differentiable(tape, f, model.grid, psi, t_last, opt);
  return detail::squared_error_on_tape(tape, &sol, x0, obs, [](ad::Var v) { return v; });
}

struct LossGradient {
  double loss = 0.0;
  Vector grad;
};

/// Loss value and flat gradient w.r.t. MlpParams::flatten().
inline LossGradient ndde_loss_and_gradient(const NddeModel& model, const HistoryFunction& psi, const Observations& obs,
                                           const SolverOptions& opt = {}) {
  ad::Tape tape;
  MlpOnTape p(tape, model.params);
  ad::Var J = ndde_loss(tape, model, p, psi, obs, opt);
  return {J.scalar(), p.gradient(tape.backward(J))};
}

// ---------------------------------------------------------------------------
// Interpolants and mini-batch windows

/// Continuous reconstructions of one observed trajectory. `initial` serves
/// windows starting at t = 0 (fitted on data up to t = 0 only); `along`
/// serves later windows. Both are defined on [earliest, latest].
struct TrajectorySource {
  std::function<Vector(double)> initial;
  std::function<Vector(double)> along;
  double earliest = 0.0;
  double latest = 0.0;
};

/// Fitted GPs behind one TrajectorySource.
struct GpSourceFit {
  GpInterpolant initial;
  GpInterpolant along;
};

/// One GP on the history block plus the t = 0 sample, and one on the whole
/// trajectory, hyperparameters fitted per dimension. With `initial_only` the
/// whole-trajectory fit is skipped and `along` repeats the history fit, which
/// suits evaluation from t = 0 on long test trajectories.
inline std::vector<GpSourceFit> fit_gp_source_models(const TrajectoryDataset& ds, const GpHyperparameters& init = {},
                                                     const GpHyperBounds& bounds = {}, bool initial_only = false) {
  ds.validate();
  std::vector<GpSourceFit> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t k) {
    const auto& tr = ds.trajectories[k];
    Observations head = tr.history;
    if (!tr.prediction.times.empty() && tr.prediction.times.front() == 0.0) {
      head.times.push_back(0.0);
      Matrix v(head.size(), ds.dim);
      if (tr.history.size() > 0) v.topRows(tr.history.size()) = tr.history.values;
      v.bottomRows(1) = tr.prediction.values.topRows(1);
      head.values = v;
    }
    if (initial_only) {
      if (head.size() < 2) throw ConfigError("fit_gp_source_models: history needs at least two samples");
      out[k].initial = fit_history_gp(head, init, bounds);
      out[k].along = out[k].initial;
      return;
    }
    out[k].along = fit_history_gp(tr.all(), init, bounds);
    out[k].initial = head.size() >= 2 ? fit_history_gp(head, init, bounds) : out[k].along;
  });
  return out;
}

/// Sources backed by previously fitted GPs.
inline std::vector<TrajectorySource> gp_sources(const TrajectoryDataset& ds, const std::vector<GpSourceFit>& fits) {
  if (fits.size() != ds.size()) throw ContractViolation("gp_sources: one fit per trajectory required");
  std::vector<TrajectorySource> out;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const Observations whole = ds.trajectories[k].all();
    auto initial = std::make_shared<const GpInterpolant>(fits[k].initial);
    auto along = std::make_shared<const GpInterpolant>(fits[k].along);
    out.push_back({[initial](double t) { return (*initial)(t); }, [along](double t) { return (*along)(t); },
                   whole.times.front(), whole.times.back()});
  }
  return out;
}

inline std::vector<TrajectorySource> fit_gp_sources(const TrajectoryDataset& ds, const GpHyperparameters& init = {},
                                                    const GpHyperBounds& bounds = {}) {
  return gp_sources(ds, fit_gp_source_models(ds, init, bounds));
}

/// Window of `batch_time` consecutive prediction samples; times are shifted so
/// the window starts at 0 and `history` is the reconstruction on [-r, 0].
struct Window {
  std::size_t trajectory = 0;
  std::size_t start = 0;
  double t_start = 0.0;
  HistoryFunction history;
  Observations obs;
};

/// nullopt when the window history would reach before the available data.
inline std::optional<Window> make_window(const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                                         std::size_t traj, std::size_t start, std::size_t batch_time, double lookback) {
  const auto& tr = ds.trajectories.at(traj);
  const auto& src = sources.at(traj);
  const std::size_t n = static_cast<std::size_t>(tr.prediction.size());
  if (batch_time == 0 || start + batch_time > n) return std::nullopt;
  const double t0 = tr.prediction.times[start];
  if (t0 - lookback < src.earliest - 1e-12 * std::max(1.0, std::abs(t0))) return std::nullopt;
  Window w;
  w.trajectory = traj;
  w.start = start;
  w.t_start = t0;
  auto fn = t0 == 0.0 ? src.initial : src.along;
  w.history = HistoryFunction(
      lookback, ds.dim, [fn, t0](double s) { return fn(t0 + s); },
      t0 == 0.0 ? HistoryFunction::Kind::gp_mean : HistoryFunction::Kind::dense_solution_restriction);
  w.obs.values = tr.prediction.values.middleRows(static_cast<Index>(start), static_cast<Index>(batch_time));
  for (std::size_t i = start; i < start + batch_time; ++i) w.obs.times.push_back(tr.prediction.times[i] - t0);
  return w;
}

/// Valid (trajectory, start) pairs for the given window length and lookback.
inline std::vector<std::pair<std::size_t, std::size_t>> valid_window_starts(const TrajectoryDataset& ds,
                                                                            const std::vector<TrajectorySource>& sources,
                                                                            std::size_t batch_time, double lookback) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& tr = ds.trajectories[k];
    const std::size_t n = static_cast<std::size_t>(tr.prediction.size());
    for (std::size_t s = 0; s + batch_time <= n; ++s) {
      const double t0 = tr.prediction.times[s];
      if (t0 - lookback >= sources[k].earliest - 1e-12 * std::max(1.0, std::abs(t0))) out.emplace_back(k, s);
    }
  }
  return out;
}

/// Uniform draws (with replacement) over all valid window starts; invalid
/// starts are rejected up front, which is equivalent to rejection sampling.
inline std::vector<Window> batch_windows(const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                                         std::size_t batch_time, std::size_t batch_size, double lookback,
                                         std::mt19937_64& rng) {
  if (sources.size() != ds.size()) throw ContractViolation("batch_windows: one source per trajectory required");
  for (const auto& tr : ds.trajectories) {
    if (batch_time > static_cast<std::size_t>(tr.prediction.size())) {
      throw ConfigError("batch_windows: batch_time exceeds the number of observations");
    }
  }
  const auto starts = valid_window_starts(ds, sources, batch_time, lookback);
  if (starts.empty()) throw ConfigError("batch_windows: no window has a history inside the data");
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  std::vector<Window> out;
  out.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto [k, s] = starts[pick(rng)];
    out.push_back(*make_window(ds, sources, k, s, batch_time, lookback));
  }
  return out;
}

/// Full-trajectory windows, one per trajectory.
inline std::vector<Window> full_windows(const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                                        double lookback) {
  std::vector<Window> out;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    auto w = make_window(ds, sources, k, 0, static_cast<std::size_t>(ds.trajectories[k].prediction.size()), lookback);
    if (!w) throw ConfigError("full_windows: history lookback exceeds the recorded history");
    out.push_back(std::move(*w));
  }
  return out;
}

/// Mean squared prediction error over the prediction blocks, J / (N n) pooled
/// over trajectories. Windows start at 0 with the `initial` reconstruction.
inline double ndde_mse(const NddeModel& model, const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                       const SolverOptions& opt = {}) {
  const auto windows = full_windows(ds, sources, model.grid.lookback());
  std::vector<double> sse(windows.size());
  std::vector<double> count(windows.size());
  parallel_for(windows.size(), [&](std::size_t k) {
    const Matrix pred = predict_at(model, windows[k].history, windows[k].obs.times, opt);
    sse[k] = (pred - windows[k].obs.values).squaredNorm();
    count[k] = static_cast<double>(pred.size());
  });
  double s = 0.0, c = 0.0;
  for (std::size_t k = 0; k < sse.size(); ++k) {
    s += sse[k];
    c += count[k];
  }
  return s / c;
}

// ---------------------------------------------------------------------------
// Augmented neural ODE baseline

enum class AugmentedIc { true_ic, learned, zero };

struct AnodeBaseline {
  MlpParams field; // R^{n+a} -> R^{n+a}
  Index obs_dim = 1;
  Index aug_dim = 1;
  AugmentedIc mode = AugmentedIc::learned;
  std::vector<Vector> aug_ic; // per trajectory, length aug_dim

  Index state_dim() const { return obs_dim + aug_dim; }

  void validate() const {
    if (field.input_dim() != state_dim() || field.output_dim() != state_dim()) {
      throw ConfigError("AnodeBaseline: MLP must map R^(n+a) to itself");
    }
    for (const auto& v : aug_ic) {
      if (v.size() != aug_dim) throw ConfigError("AnodeBaseline: augmented IC has the wrong length");
    }
  }

  /// Observation projection onto the first n coordinates.
  Vector project(const Vector& z) const { return z.head(obs_dim); }
};

inline AnodeBaseline make_anode(Index obs_dim, Index aug_dim, std::size_t trajectories, AugmentedIc mode,
                                std::mt19937_64& rng, const std::vector<Index>& hidden = default_mlp_hidden()) {
  AnodeBaseline b{make_mlp(obs_dim + aug_dim, hidden, obs_dim + aug_dim, rng), obs_dim, aug_dim, mode,
                  std::vector<Vector>(trajectories, Vector::Zero(aug_dim))};
  b.validate();
  return b;
}

/// Least squares on the projected ODE solution from z(0) = (x0, aug). The
/// solve runs in w = z - (0, aug) so that `aug` can be a tape leaf.
inline ad::Var anode_loss(ad::Tape& tape, const AnodeBaseline& b, const MlpOnTape& p, ad::Var aug, const Vector& x0,
                          const Observations& obs, const SolverOptions& opt = {}) {
  detail::check_targets(obs, b.obs_dim, "anode_loss");
  if (x0.size() != b.obs_dim || (b.aug_dim > 0 && aug.rows() != b.aug_dim)) {
    throw ContractViolation("anode_loss: initial condition shape mismatch");
  }
  const double t_last = obs.times.empty() ? 0.0 : *std::max_element(obs.times.begin(), obs.times.end());
  const Index n = b.obs_dim;
  auto project = [n](ad::Var v) { return ad::slice(v, 0, n); };
  if (t_last <= 0.0) return detail::squared_error_on_tape(tape, nullptr, x0, obs, project);
  Vector w0 = Vector::Zero(b.state_dim());
  w0.head(n) = x0;
  ad::Var shift;
  if (b.aug_dim > 0) {
    const std::array<ad::Var, 2> parts{tape.constant(ad::Matrix::Zero(n, 1)), aug};
    shift = ad::concat(parts);
  }
  const TapedField f = [&p, shift](ad::Var w) { return mlp_forward(p, shift.valid() ? w + shift : w); };
  const auto sol =
      integrate_differentiable(tape, f, DelayGrid{1.0, 0}, HistoryFunction::constant(0.0, w0), t_last, opt);
  return detail::squared_error_on_tape(tape, &sol, x0, obs, project);
}

struct AnodeGradient {
  double loss = 0.0;
  Vector grad_params;
  Vector grad_aug;
};

/// Loss and gradients for trajectory `traj`; grad_aug is zero unless the mode is learned.
inline AnodeGradient anode_loss_and_gradient(const AnodeBaseline& b, std::size_t traj, const Vector& x0,
                                             const Observations& obs, const SolverOptions& opt = {}) {
  ad::Tape tape;
  MlpOnTape p(tape, b.field);
  const Vector a0 = b.aug_dim > 0 ? b.aug_ic.at(traj) : Vector();
  ad::Var aug = b.aug_dim == 0 ? ad::Var{}
                : b.mode == AugmentedIc::learned ? tape.leaf(ad::Matrix(a0))
                                                  : tape.constant(ad::Matrix(a0));
  ad::Var J = anode_loss(tape, b, p, aug, x0, obs, opt);
  const auto g = tape.backward(J);
  AnodeGradient out{J.scalar(), p.gradient(g), Vector::Zero(b.aug_dim)};
  if (b.aug_dim > 0 && b.mode == AugmentedIc::learned) out.grad_aug = g[aug];
  return out;
}

/// Projected predictions at nonnegative times from z(0) = (x0, aug).
inline Matrix anode_predict(const AnodeBaseline& b, const Vector& x0, const Vector& aug, const std::vector<double>& times,
                            const SolverOptions& opt = {}) {
  Matrix out(static_cast<Index>(times.size()), b.obs_dim);
  if (times.empty()) return out;
  Vector z0(b.state_dim());
  z0.head(b.obs_dim) = x0;
  if (b.aug_dim > 0) z0.tail(b.aug_dim) = aug;
  const double t_last = *std::max_element(times.begin(), times.end());
  if (t_last <= 0.0) {
    for (Index i = 0; i < out.rows(); ++i) out.row(i) = x0.transpose();
    return out;
  }
  auto params = std::make_shared<const MlpParams>(b.field);
  const VectorFieldSpec f{VectorFieldSpec::Kind::ndde_mlp, b.state_dim(),
                          [params](const Vector& z) { return mlp_forward(*params, z); }};
  const auto sol = integrate(f, DelayGrid{1.0, 0}, HistoryFunction::constant(0.0, z0), t_last, opt);
  for (std::size_t i = 0; i < times.size(); ++i) out.row(static_cast<Index>(i)) = b.project(sol.value_at(times[i])).transpose();
  return out;
}

/// Train MSE of the baseline over the prediction blocks.
inline double anode_mse(const AnodeBaseline& b, const TrajectoryDataset& ds, const SolverOptions& opt = {}) {
  double s = 0.0, c = 0.0;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& tr = ds.trajectories[k];
    const Vector x0 = tr.prediction.values.row(0).transpose();
    const Vector aug = b.aug_dim > 0 ? b.aug_ic.at(k) : Vector();
    const Matrix pred = anode_predict(b, x0, aug, tr.prediction.times, opt);
    s += (pred - tr.prediction.values).squaredNorm();
    c += static_cast<double>(pred.size());
  }
  return s / c;
}

} // namespace stable_ndde

#endif // STABLE_NDDE_NDDE_HPP
