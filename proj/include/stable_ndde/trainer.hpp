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

#ifndef STABLE_NDDE_TRAINER_HPP
#define STABLE_NDDE_TRAINER_HPP

// Optimisation loops: NDDE fitting, joint NDDE + LRF stabilisation, delayed
// feedback policy training and the augmented neural ODE baseline.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "dde_core.hpp"
#include "errors.hpp"
#include "gp_history.hpp"
#include "ndde.hpp"
#include "nets.hpp"
#include "parallel.hpp"
#include "razumikhin.hpp"
#include "systems.hpp"

namespace stable_ndde {

// ---------------------------------------------------------------------------
// Learning-rate schedules and optimisers

enum class ScheduleKind { constant, exponential, cyclic };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::exponential;
  double start = 5e-3;
  double end = 1e-5;
  int period = 50;

  void validate() const {
    if (kind == ScheduleKind::constant) {
      if (!(start >= 0.0)) throw ConfigError("LrSchedule: constant rate must be nonnegative");
      return;
    }
    if (!(end > 0.0) || !(start >= end)) throw ConfigError("LrSchedule: need start >= end > 0");
    if (kind == ScheduleKind::cyclic && period < 1) throw ConfigError("LrSchedule: period must be at least 1");
  }
};

/// start (end/start)^(i/(I-1)); the cyclic schedule restarts every `period` steps.
inline double lr_at(const LrSchedule& s, int iteration, int iterations) {
  if (iteration < 0) throw ContractViolation("lr_at: negative iteration");
  s.validate();
  if (s.kind == ScheduleKind::constant) return s.start;
  int i = iteration, span = iterations;
  if (s.kind == ScheduleKind::cyclic) {
    i = iteration % s.period;
    span = s.period;
  }
  if (span <= 1) return s.start;
  return s.start * std::pow(s.end / s.start, static_cast<double>(i) / static_cast<double>(span - 1));
}

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimiser over one flat parameter vector.
class Optimizer {
public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& cfg, Index n) : cfg_(cfg), m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

  void step(Vector& params, const Vector& grad, double lr) {
    if (grad.size() != params.size() || params.size() != m_.size()) {
      throw ContractViolation("Optimizer: parameter/gradient size mismatch");
    }
    if (cfg_.kind == OptimizerKind::sgd) {
      params -= lr * grad;
      return;
    }
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }

private:
  OptimizerConfig cfg_;
  Vector m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration and run records

struct IterationRecord {
  int iteration = 0;
  double train_loss = 0.0;
  double lrf_loss = 0.0;
  double lr = 0.0;
  int diverged_batches = 0;
  bool diverged = false;
};

struct TrainConfig {
  int iterations = 80;
  LrSchedule lr;
  OptimizerConfig optimizer;
  std::size_t batch_time = 0;  // observations per window; 0 = whole trajectories
  std::size_t batch_size = 1;  // windows per iteration (ignored for whole trajectories)
  std::uint64_t seed = 0;
  double w_ndde = 1.0;
  double w_lrf = 1.0;
  SolverOptions solver;
  // LRF sampling
  int lrf_batch = 256;              // Razumikhin samples per iteration
  int histories_per_iteration = 4;  // fresh initial histories per iteration
  double stab_horizon = 3.0;        // T_stab
  // Bookkeeping
  std::string checkpoint_dir;       // empty: no checkpoints
  int checkpoint_every = 0;         // 0: only the final checkpoint
  double max_diverged_fraction = 0.5;
  std::function<void(const IterationRecord&)> on_iteration; // progress hook, not serialized

  void validate() const {
    if (iterations < 0) throw ConfigError("TrainConfig: iterations must be nonnegative");
    lr.validate();
    if (w_ndde < 0.0 || w_lrf < 0.0) throw ConfigError("TrainConfig: loss weights must be nonnegative");
    if (lrf_batch < 1 || histories_per_iteration < 1) throw ConfigError("TrainConfig: LRF batch sizes must be positive");
    if (!(stab_horizon > 0.0)) throw ConfigError("TrainConfig: stab_horizon must be positive");
  }
};

struct RunRecord {
  std::vector<IterationRecord> iterations;
  double wall_time = 0.0;
  double train_mse = std::numeric_limits<double>::quiet_NaN();
  double test_mse = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> checkpoints;
  bool aborted = false;
  std::string abort_reason;
};

inline nlohmann::json to_json_value(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const IterationRecord& r) {
  j = {{"iteration", r.iteration},         {"train_loss", to_json_value(r.train_loss)},
       {"lrf_loss", to_json_value(r.lrf_loss)}, {"lr", r.lr},
       {"diverged_batches", r.diverged_batches}, {"diverged", r.diverged}};
}

inline void from_json(const nlohmann::json& j, IterationRecord& r) {
  auto num = [&](const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  r.iteration = j.at("iteration").get<int>();
  r.train_loss = num("train_loss");
  r.lrf_loss = num("lrf_loss");
  r.lr = j.at("lr").get<double>();
  r.diverged_batches = j.value("diverged_batches", 0);
  r.diverged = j.value("diverged", false);
}

/// One JSON object per iteration, then a summary line with "summary": true.
inline void write_run_record(const RunRecord& rec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& it : rec.iterations) out << nlohmann::json(it).dump() << '\n';
  nlohmann::json summary{{"summary", true},
                         {"wall_time", rec.wall_time},
                         {"train_mse", to_json_value(rec.train_mse)},
                         {"test_mse", to_json_value(rec.test_mse)},
                         {"checkpoints", rec.checkpoints},
                         {"aborted", rec.aborted},
                         {"abort_reason", rec.abort_reason}};
  out << summary.dump() << '\n';
}

inline RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  RunRecord rec;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.value("summary", false)) {
      rec.wall_time = j.value("wall_time", 0.0);
      rec.train_mse = j.at("train_mse").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("train_mse").get<double>();
      rec.test_mse = j.at("test_mse").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("test_mse").get<double>();
      rec.checkpoints = j.value("checkpoints", std::vector<std::string>{});
      rec.aborted = j.value("aborted", false);
      rec.abort_reason = j.value("abort_reason", std::string());
    } else {
      rec.iterations.push_back(j.get<IterationRecord>());
    }
  }
  return rec;
}

namespace detail {

class WallClock {
public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Distinct, reproducible RNG streams derived from one seed.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

template <class Save>
void maybe_checkpoint(const TrainConfig& cfg, int iteration, bool final, RunRecord& rec, Save&& save) {
  if (cfg.checkpoint_dir.empty()) return;
  const bool periodic = cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0;
  if (!periodic && !final) return;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  const std::string name = final ? "final" : "iter_" + std::to_string(iteration + 1);
  for (const auto& path : save(std::filesystem::path(cfg.checkpoint_dir), name)) rec.checkpoints.push_back(path);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

} // namespace detail

// ---------------------------------------------------------------------------
// NDDE fitting

struct BatchGradient {
  double loss = 0.0; // mean over converged windows of J_w / (N_w n)
  Vector grad;
  int diverged = 0;
  int total = 0;
};

/// Mean per-observation squared error over windows and its gradient; each
/// window runs on its own tape, reduced in window order.
inline BatchGradient ndde_batch_gradient(const NddeModel& model, const std::vector<Window>& windows,
                                         const SolverOptions& opt) {
  std::vector<LossGradient> parts(windows.size());
  std::vector<char> failed(windows.size(), 0);
  parallel_for(windows.size(), [&](std::size_t k) {
    try {
      parts[k] = ndde_loss_and_gradient(model, windows[k].history, windows[k].obs, opt);
      const double scale = 1.0 / static_cast<double>(std::max<Index>(1, windows[k].obs.values.size()));
      parts[k].loss *= scale;
      parts[k].grad *= scale;
      if (!std::isfinite(parts[k].loss) || !parts[k].grad.allFinite()) failed[k] = 1;
    } catch (const DivergenceError&) {
      failed[k] = 1;
    }
  });
  BatchGradient out{0.0, Vector::Zero(model.params.parameter_count()), 0, static_cast<int>(windows.size())};
  int used = 0;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    if (failed[k]) {
      ++out.diverged;
      continue;
    }
    out.loss += parts[k].loss;
    out.grad += parts[k].grad;
    ++used;
  }
  if (used > 0) {
    out.loss /= used;
    out.grad /= used;
  } else {
    out.loss = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

namespace detail {

inline std::vector<Window> draw_windows(const NddeModel& model, const TrajectoryDataset& ds,
                                        const std::vector<TrajectorySource>& sources, const TrainConfig& cfg,
                                        std::mt19937_64& rng) {
  if (cfg.batch_time == 0) return full_windows(ds, sources, model.grid.lookback());
  return batch_windows(ds, sources, cfg.batch_time, cfg.batch_size, model.grid.lookback(), rng);
}

} // namespace detail

struct NddeRun {
  NddeModel model;
  RunRecord record;
};

/// Plain NDDE fitting on mini-batch windows.
inline NddeRun train_ndde(NddeModel model, const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                          const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (ds.size() == 0) throw ConfigError("train_ndde: empty dataset");
  detail::WallClock clock;
  auto data_rng = detail::stream(cfg.seed, 1);
  Optimizer opt(cfg.optimizer, model.params.parameter_count());
  RunRecord rec;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = lr_at(cfg.lr, it, cfg.iterations);
    const auto windows = detail::draw_windows(model, ds, sources, cfg, data_rng);
    const BatchGradient bg = ndde_batch_gradient(model, windows, cfg.solver);
    IterationRecord ir{it, bg.loss, 0.0, lr, bg.diverged, bg.diverged > 0};
    rec.iterations.push_back(ir);
    if (cfg.on_iteration) cfg.on_iteration(ir);
    if (bg.diverged > cfg.max_diverged_fraction * bg.total) {
      rec.aborted = true;
      rec.abort_reason = "iteration " + std::to_string(it) + ": " + std::to_string(bg.diverged) + " of " +
                         std::to_string(bg.total) + " windows diverged";
      break;
    }
    Vector theta = model.params.flatten();
    opt.step(theta, cfg.w_ndde * bg.grad, lr);
    model.params.unflatten(theta);
    detail::maybe_checkpoint(cfg, it, false, rec, [&](const std::filesystem::path& dir, const std::string& name) {
      const auto p = dir / ("ndde_" + name + ".json");
      detail::write_json(p, model.params);
      return std::vector<std::string>{p.string()};
    });
  }
  detail::maybe_checkpoint(cfg, cfg.iterations, true, rec, [&](const std::filesystem::path& dir, const std::string& name) {
    const auto p = dir / ("ndde_" + name + ".json");
    detail::write_json(p, model.params);
    return std::vector<std::string>{p.string()};
  });
  rec.wall_time = clock.seconds();
  return {std::move(model), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Joint NDDE + LRF training

struct LrfGradient {
  double loss = 0.0;
  Vector grad_field; // w.r.t. the vector-field parameters
  Vector grad_lrf;   // w.r.t. IcnnParams::flatten()
};

/// Mean LRF loss over samples for an NDDE field and its gradients.
inline LrfGradient ndde_lrf_gradient(const NddeModel& model, const LrfNetwork& lrf, const RazumikhinConfig& raz,
                                     const std::vector<RazumikhinSample>& samples) {
  ad::Tape tape;
  MlpOnTape mp(tape, model.params);
  IcnnOnTape ip(tape, lrf.icnn);
  const TapedField f = [&mp](ad::Var v) { return mlp_forward(mp, v); };
  ad::Var L = lrf_batch_loss(tape, ip, lrf, f, model.grid, raz, samples, model.dim);
  const auto g = tape.backward(L);
  return {L.scalar(), mp.gradient(g), ip.gradient(g)};
}

/// Gradient of w_ndde * mean_w J_w / (N_w n) + w_lrf * mean LRF loss, all on
/// one tape. Used to check that the trainer's separately reduced gradients add up.
inline LrfGradient combined_gradient_single_tape(const NddeModel& model, const LrfNetwork& lrf,
                                                 const RazumikhinConfig& raz, const std::vector<Window>& windows,
                                                 const std::vector<RazumikhinSample>& samples, double w_ndde,
                                                 double w_lrf, const SolverOptions& opt) {
  ad::Tape tape;
  MlpOnTape mp(tape, model.params);
  IcnnOnTape ip(tape, lrf.icnn);
  ad::Var J = tape.constant(0.0);
  for (const auto& w : windows) {
    J = J + (1.0 / static_cast<double>(w.obs.values.size())) * ndde_loss(tape, model, mp, w.history, w.obs, opt);
  }
  J = (1.0 / static_cast<double>(std::max<std::size_t>(1, windows.size()))) * J;
  const TapedField f = [&mp](ad::Var v) { return mlp_forward(mp, v); };
  ad::Var L = lrf_batch_loss(tape, ip, lrf, f, model.grid, raz, samples, model.dim);
  ad::Var total = w_ndde * J + w_lrf * L;
  const auto g = tape.backward(total);
  return {total.scalar(), mp.gradient(g), ip.gradient(g)};
}

/// Fresh synthetic histories for the LRF term.
inline std::vector<HistoryFunction> sample_histories(const RkhsHistorySampler& sampler, int count, std::mt19937_64& rng) {
  std::vector<HistoryFunction> out;
  for (int i = 0; i < count; ++i) out.push_back(sample_history(sampler, rng));
  return out;
}

struct StableNddeRun {
  NddeModel model;
  LrfNetwork lrf;
  RunRecord record;
};

inline StableNddeRun train_stable_ndde(NddeModel model, LrfNetwork lrf, const TrajectoryDataset& ds,
                                       const std::vector<TrajectorySource>& sources, RkhsHistorySampler sampler,
                                       const TrainConfig& cfg, const RazumikhinConfig& raz) {
  cfg.validate();
  model.validate();
  raz.ratio(model.grid);
  if (ds.size() == 0) throw ConfigError("train_stable_ndde: empty dataset");
  if (lrf.icnn.input_dim() != model.dim) throw ConfigError("train_stable_ndde: LRF input dimension mismatch");
  sampler.dim = model.dim;
  sampler.lookback = std::max(sampler.lookback, model.grid.lookback());
  sampler.validate();
  detail::WallClock clock;
  auto data_rng = detail::stream(cfg.seed, 1);
  auto hist_rng = detail::stream(cfg.seed, 2);
  Optimizer opt_theta(cfg.optimizer, model.params.parameter_count());
  Optimizer opt_phi(cfg.optimizer, lrf.icnn.parameter_count());
  lrf.icnn = project_nonnegative(lrf.icnn);
  const int per_traj = std::max(1, cfg.lrf_batch / cfg.histories_per_iteration);
  RunRecord rec;
  auto save = [&](const std::filesystem::path& dir, const std::string& name) {
    const auto pm = dir / ("ndde_" + name + ".json");
    const auto pl = dir / ("lrf_" + name + ".json");
    detail::write_json(pm, model.params);
    detail::write_json(pl, lrf);
    return std::vector<std::string>{pm.string(), pl.string()};
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = lr_at(cfg.lr, it, cfg.iterations);
    const auto windows = detail::draw_windows(model, ds, sources, cfg, data_rng);
    const BatchGradient bg = ndde_batch_gradient(model, windows, cfg.solver);
    IterationRecord ir{it, bg.loss, 0.0, lr, bg.diverged, bg.diverged > 0};
    if (bg.diverged > cfg.max_diverged_fraction * bg.total) {
      rec.iterations.push_back(ir);
      if (cfg.on_iteration) cfg.on_iteration(ir);
      rec.aborted = true;
      rec.abort_reason = "iteration " + std::to_string(it) + ": " + std::to_string(bg.diverged) + " of " +
                         std::to_string(bg.total) + " windows diverged";
      break;
    }
    Vector g_theta = cfg.w_ndde * bg.grad;
    Vector g_phi = Vector::Zero(lrf.icnn.parameter_count());
    if (cfg.w_lrf > 0.0) {
      const auto hs = sample_histories(sampler, cfg.histories_per_iteration, hist_rng);
      const auto samples = collect_samples(model.field(), model.grid, raz, hs, cfg.stab_horizon, per_traj, hist_rng,
                                           cfg.solver);
      const LrfGradient lg = ndde_lrf_gradient(model, lrf, raz, samples);
      ir.lrf_loss = lg.loss;
      if (std::isfinite(lg.loss) && lg.grad_field.allFinite() && lg.grad_lrf.allFinite()) {
        g_theta += cfg.w_lrf * lg.grad_field;
        g_phi = cfg.w_lrf * lg.grad_lrf;
      } else {
        ir.diverged = true;
      }
    }
    rec.iterations.push_back(ir);
    if (cfg.on_iteration) cfg.on_iteration(ir);
    Vector theta = model.params.flatten();
    opt_theta.step(theta, g_theta, lr);
    model.params.unflatten(theta);
    if (cfg.w_lrf > 0.0) {
      Vector phi = lrf.icnn.flatten();
      opt_phi.step(phi, g_phi, lr);
      lrf.icnn.unflatten(phi);
      lrf.icnn = project_nonnegative(lrf.icnn);
    }
    detail::maybe_checkpoint(cfg, it, false, rec, save);
  }
  detail::maybe_checkpoint(cfg, cfg.iterations, true, rec, save);
  rec.wall_time = clock.seconds();
  return {std::move(model), std::move(lrf), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Delayed feedback

struct FeedbackConfig {
  double radius = 1.5707963267948966; // initial conditions on this sphere
  double history_length = 0.0;         // 0: the policy delay
};

/// Mean LRF loss for the closed loop with the gains as tape leaves.
inline LrfGradient feedback_lrf_gradient(const BenchmarkSystem& sys, const FeedbackPolicy& policy,
                                         const LrfNetwork& lrf, const RazumikhinConfig& raz,
                                         const std::vector<RazumikhinSample>& samples) {
  ad::Tape tape;
  ad::Var gains = tape.leaf(ad::Matrix(policy.gains));
  IcnnOnTape ip(tape, lrf.icnn);
  const TapedField f = [&sys, gains](ad::Var v) { return closed_loop_taped(sys, gains, Vector(v.value())); };
  ad::Var L = lrf_batch_loss(tape, ip, lrf, f, closed_loop_grid(policy), raz, samples, sys.latent_dim);
  const auto g = tape.backward(L);
  const Matrix gk = g[gains];
  return {L.scalar(), Eigen::Map<const Vector>(gk.data(), gk.size()), ip.gradient(g)};
}

inline std::vector<HistoryFunction> sample_control_histories(const BenchmarkSystem& sys, const FeedbackConfig& fb,
                                                             double lookback, int count, std::mt19937_64& rng) {
  std::vector<HistoryFunction> out;
  for (int i = 0; i < count; ++i) out.push_back(control_history_sampler(sys, fb.radius, lookback, rng).history);
  return out;
}

struct FeedbackRun {
  FeedbackPolicy policy;
  LrfNetwork lrf;
  RunRecord record;
};

/// Minimises the LRF loss over (gains, phi) with fresh control histories each iteration.
inline FeedbackRun train_feedback(const BenchmarkSystem& sys, FeedbackPolicy policy, LrfNetwork lrf,
                                  const FeedbackConfig& fb, const TrainConfig& cfg, const RazumikhinConfig& raz) {
  cfg.validate();
  if (policy.gains.size() != sys.latent_dim) throw ConfigError("train_feedback: gain dimension mismatch");
  if (lrf.icnn.input_dim() != sys.latent_dim) throw ConfigError("train_feedback: LRF input dimension mismatch");
  raz.ratio(closed_loop_grid(policy));
  const double lookback = fb.history_length > 0.0 ? fb.history_length : policy.delay;
  detail::WallClock clock;
  auto hist_rng = detail::stream(cfg.seed, 3);
  Optimizer opt_k(cfg.optimizer, policy.gains.size());
  Optimizer opt_phi(cfg.optimizer, lrf.icnn.parameter_count());
  lrf.icnn = project_nonnegative(lrf.icnn);
  const int per_traj = std::max(1, cfg.lrf_batch / cfg.histories_per_iteration);
  RunRecord rec;
  auto save = [&](const std::filesystem::path& dir, const std::string& name) {
    const auto pp = dir / ("policy_" + name + ".json");
    const auto pl = dir / ("lrf_" + name + ".json");
    detail::write_json(pp, nlohmann::json{{"gains", std::vector<double>(policy.gains.data(), policy.gains.data() + policy.gains.size())},
                                          {"delay", policy.delay}});
    detail::write_json(pl, lrf);
    return std::vector<std::string>{pp.string(), pl.string()};
  };
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = lr_at(cfg.lr, it, cfg.iterations);
    const auto hs = sample_control_histories(sys, fb, lookback, cfg.histories_per_iteration, hist_rng);
    const auto samples = collect_samples(closed_loop_field(sys, policy), closed_loop_grid(policy), raz, hs,
                                         cfg.stab_horizon, per_traj, hist_rng, cfg.solver);
    const LrfGradient lg = feedback_lrf_gradient(sys, policy, lrf, raz, samples);
    IterationRecord ir{it, lg.loss, lg.loss, lr, 0, false};
    if (!std::isfinite(lg.loss) || !lg.grad_field.allFinite() || !lg.grad_lrf.allFinite()) {
      ir.diverged = true;
      rec.iterations.push_back(ir);
      if (cfg.on_iteration) cfg.on_iteration(ir);
      continue;
    }
    rec.iterations.push_back(ir);
    if (cfg.on_iteration) cfg.on_iteration(ir);
    opt_k.step(policy.gains, cfg.w_lrf * lg.grad_field, lr);
    Vector phi = lrf.icnn.flatten();
    opt_phi.step(phi, cfg.w_lrf * lg.grad_lrf, lr);
    lrf.icnn.unflatten(phi);
    lrf.icnn = project_nonnegative(lrf.icnn);
    detail::maybe_checkpoint(cfg, it, false, rec, save);
  }
  detail::maybe_checkpoint(cfg, cfg.iterations, true, rec, save);
  rec.wall_time = clock.seconds();
  return {std::move(policy), std::move(lrf), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Augmented neural ODE baseline (whole trajectories)

struct AnodeRun {
  AnodeBaseline baseline;
  RunRecord record;
};

inline AnodeRun train_anode(AnodeBaseline b, const TrajectoryDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  b.validate();
  if (b.aug_ic.size() != ds.size()) throw ConfigError("train_anode: one augmented IC per trajectory required");
  detail::WallClock clock;
  Optimizer opt_theta(cfg.optimizer, b.field.parameter_count());
  std::vector<Optimizer> opt_aug(ds.size(), Optimizer(cfg.optimizer, b.aug_dim));
  RunRecord rec;
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lr = lr_at(cfg.lr, it, cfg.iterations);
    std::vector<AnodeGradient> parts(ds.size());
    std::vector<char> failed(ds.size(), 0);
    parallel_for(ds.size(), [&](std::size_t k) {
      const auto& tr = ds.trajectories[k];
      try {
        parts[k] = anode_loss_and_gradient(b, k, tr.prediction.values.row(0).transpose(), tr.prediction, cfg.solver);
        const double scale = 1.0 / static_cast<double>(tr.prediction.values.size());
        parts[k].loss *= scale;
        parts[k].grad_params *= scale;
        parts[k].grad_aug *= scale;
        if (!std::isfinite(parts[k].loss) || !parts[k].grad_params.allFinite()) failed[k] = 1;
      } catch (const DivergenceError&) {
        failed[k] = 1;
      }
    });
    IterationRecord ir{it, 0.0, 0.0, lr, 0, false};
    Vector g = Vector::Zero(b.field.parameter_count());
    int used = 0;
    for (std::size_t k = 0; k < ds.size(); ++k) {
      if (failed[k]) {
        ++ir.diverged_batches;
        continue;
      }
      ir.train_loss += parts[k].loss;
      g += parts[k].grad_params;
      ++used;
    }
    ir.diverged = ir.diverged_batches > 0;
    ir.train_loss = used > 0 ? ir.train_loss / used : std::numeric_limits<double>::quiet_NaN();
    rec.iterations.push_back(ir);
    if (cfg.on_iteration) cfg.on_iteration(ir);
    if (ir.diverged_batches > cfg.max_diverged_fraction * static_cast<double>(ds.size())) {
      rec.aborted = true;
      rec.abort_reason = "iteration " + std::to_string(it) + ": trajectories diverged";
      break;
    }
    Vector theta = b.field.flatten();
    opt_theta.step(theta, g / std::max(1, used), lr);
    b.field.unflatten(theta);
    if (b.mode == AugmentedIc::learned) {
      for (std::size_t k = 0; k < ds.size(); ++k) {
        if (!failed[k]) opt_aug[k].step(b.aug_ic[k], parts[k].grad_aug / std::max(1, used), lr);
      }
    }
  }
  rec.wall_time = clock.seconds();
  return {std::move(b), std::move(rec)};
}

// ---------------------------------------------------------------------------
// JSON for configs

inline void from_json(const nlohmann::json& j, LrSchedule& s) {
  const std::string kind = j.value("kind", std::string("exponential"));
  if (kind == "exponential") s.kind = ScheduleKind::exponential;
  else if (kind == "cyclic") s.kind = ScheduleKind::cyclic;
  else if (kind == "constant") s.kind = ScheduleKind::constant;
  else throw ConfigError("unknown lr schedule '" + kind + "'");
  s.start = j.value("start", s.start);
  s.end = j.value("end", s.end);
  s.period = j.value("period", s.period);
}

inline void to_json(nlohmann::json& j, const LrSchedule& s) {
  const char* kind = s.kind == ScheduleKind::exponential ? "exponential" : s.kind == ScheduleKind::cyclic ? "cyclic" : "constant";
  j = {{"kind", kind}, {"start", s.start}, {"end", s.end}, {"period", s.period}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.iterations = j.value("iterations", c.iterations);
  if (j.contains("lr")) c.lr = j.at("lr").get<LrSchedule>();
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    const std::string kind = o.value("kind", std::string("adam"));
    if (kind == "adam") c.optimizer.kind = OptimizerKind::adam;
    else if (kind == "sgd") c.optimizer.kind = OptimizerKind::sgd;
    else throw ConfigError("unknown optimizer '" + kind + "'");
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
  }
  c.batch_time = j.value("batch_time", c.batch_time);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.w_ndde = j.value("w_ndde", c.w_ndde);
  c.w_lrf = j.value("w_lrf", c.w_lrf);
  c.solver.step = j.value("solver_step", c.solver.step);
  c.solver.divergence_bound = j.value("divergence_bound", c.solver.divergence_bound);
  c.lrf_batch = j.value("lrf_batch", c.lrf_batch);
  c.histories_per_iteration = j.value("histories_per_iteration", c.histories_per_iteration);
  c.stab_horizon = j.value("stab_horizon", c.stab_horizon);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.max_diverged_fraction = j.value("max_diverged_fraction", c.max_diverged_fraction);
}

} // namespace stable_ndde

#endif // STABLE_NDDE_TRAINER_HPP
