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

#ifndef STABLE_NDDE_CLI_HPP
#define STABLE_NDDE_CLI_HPP

// Command-line pipeline. Every command reads one experiment config and works
// inside an output directory:
//
//   <out>/dataset/, <out>/test_dataset/   manifest.json + traj_XXX.csv
//   <out>/gp/{train,test}.json            fitted history interpolants
//   <out>/model/                          checkpoints (*_final.json)
//   <out>/run.jsonl, <out>/metrics.json   training record and metrics
//   <out>/predictions/*.csv               evaluate output
//   <out>/certificate.json                certify output
//   <out>/plots/loss_curve.csv            export-plots output
//
// Exit codes: 0 success, 1 user error, 2 numerical failure.

#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "io.hpp"
#include "trainer.hpp"

namespace stable_ndde::cli {

enum class Experiment { ndde, stable_ndde, feedback };

struct ModelSpec {
  double tau = 0.3;
  int K = 10;
  std::vector<Index> hidden = default_mlp_hidden();
  double output_scale = 1.0;
};

struct LrfSpec {
  double c = 1e-3;
  double d = 0.1;
  std::vector<Index> hidden = default_icnn_hidden();
};

struct FeedbackSpec {
  double delay = 0.03;
  double q_weight = 1.0;
  double r_weight = 1.0;
  FeedbackConfig sampling;
};

/// Fresh-history checks shared by evaluate and certify.
struct CheckSpec {
  int histories = 20;
  double horizon = 3.0;
  double check_step = 0.01;
  double slack = 0.05;
  double output_step = 0.05;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::ndde;
  SystemId system = SystemId::oscillator;
  SystemParams system_params;
  std::uint64_t seed = 0;
  std::optional<DatasetSpec> data;
  std::optional<DatasetSpec> test_data;
  GpHyperparameters gp;
  ModelSpec model;
  TrainConfig train;
  RazumikhinConfig razumikhin;
  LrfSpec lrf;
  RkhsHistorySampler history_sampler;
  FeedbackSpec feedback;
  CheckSpec check;
};

namespace detail {

inline Experiment parse_experiment(const std::string& s) {
  if (s == "ndde") return Experiment::ndde;
  if (s == "stable-ndde") return Experiment::stable_ndde;
  if (s == "feedback") return Experiment::feedback;
  throw ConfigError("unknown experiment '" + s + "' (expected ndde, stable-ndde or feedback)");
}

inline DatasetSpec parse_dataset(const nlohmann::json& j, const std::string& split) {
  DatasetSpec d;
  for (const auto& ic : j.at("initial_conditions")) {
    const auto v = ic.get<std::vector<double>>();
    d.initial_conditions.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
  }
  d.horizon = j.value("horizon", d.horizon);
  d.observations = j.value("observations", d.observations);
  d.noise_std = j.value("noise_std", d.noise_std);
  d.history_length = j.value("history_length", d.history_length);
  d.solver_step = j.value("solver_step", d.solver_step);
  d.split = split;
  return d;
}

} // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    c.experiment = detail::parse_experiment(j.value("experiment", std::string("ndde")));
    c.system = parse_system(j.value("system", std::string("oscillator")));
    if (j.contains("system_params")) c.system_params = j.at("system_params").get<SystemParams>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) c.data = detail::parse_dataset(j.at("data"), "train");
    if (j.contains("test_data")) c.test_data = detail::parse_dataset(j.at("test_data"), "test");
    if (j.contains("gp")) {
      const auto& g = j.at("gp");
      c.gp.length_scale = g.value("length_scale", c.gp.length_scale);
      c.gp.variance = g.value("variance", c.gp.variance);
      c.gp.noise_var = g.value("noise_var", c.gp.noise_var);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.tau = m.value("tau", c.model.tau);
      c.model.K = m.value("K", c.model.K);
      c.model.hidden = m.value("hidden", c.model.hidden);
      c.model.output_scale = m.value("output_scale", c.model.output_scale);
    }
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("razumikhin")) c.razumikhin = j.at("razumikhin").get<RazumikhinConfig>();
    if (j.contains("lrf")) {
      const auto& l = j.at("lrf");
      c.lrf.c = l.value("c", c.lrf.c);
      c.lrf.d = l.value("d", c.lrf.d);
      c.lrf.hidden = l.value("hidden", c.lrf.hidden);
    }
    if (j.contains("history_sampler")) {
      const auto& h = j.at("history_sampler");
      c.history_sampler.coeff_bound = h.value("coeff_bound", c.history_sampler.coeff_bound);
      c.history_sampler.inv_length_bound = h.value("inv_length_bound", c.history_sampler.inv_length_bound);
      c.history_sampler.kernel_std_bound = h.value("kernel_std_bound", c.history_sampler.kernel_std_bound);
      c.history_sampler.centers = h.value("centers", c.history_sampler.centers);
    }
    if (j.contains("feedback")) {
      const auto& f = j.at("feedback");
      c.feedback.delay = f.value("delay", c.feedback.delay);
      c.feedback.q_weight = f.value("q_weight", c.feedback.q_weight);
      c.feedback.r_weight = f.value("r_weight", c.feedback.r_weight);
      c.feedback.sampling.radius = f.value("radius", c.feedback.sampling.radius);
      c.feedback.sampling.history_length = f.value("history_length", c.feedback.sampling.history_length);
    }
    if (j.contains("check")) {
      const auto& k = j.at("check");
      c.check.histories = k.value("histories", c.check.histories);
      c.check.horizon = k.value("horizon", c.check.horizon);
      c.check.check_step = k.value("check_step", c.check.check_step);
      c.check.slack = k.value("slack", c.check.slack);
      c.check.output_step = k.value("output_step", c.check.output_step);
    }
    if (c.check.histories < 1 || !(c.check.horizon > 0.0) || !(c.check.check_step > 0.0) || !(c.check.output_step > 0.0)) {
      throw ConfigError("check: histories, horizon, check_step and output_step must be positive");
    }
    c.train.validate();
    c.razumikhin.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pipeline steps

class Pipeline {
public:
  Pipeline(ExperimentConfig cfg, std::filesystem::path out, std::ostream& log)
      : cfg_(std::move(cfg)), out_(std::move(out)), log_(log) {
    std::filesystem::create_directories(out_);
  }

  int generate_data() {
    const auto ds = make_dataset(false);
    save_dataset(ds, out_ / "dataset");
    log_ << "wrote " << ds.size() << " training trajectories to " << (out_ / "dataset").string() << '\n';
    if (cfg_.test_data) {
      const auto ts = make_dataset(true);
      save_dataset(ts, out_ / "test_dataset");
      log_ << "wrote " << ts.size() << " test trajectories to " << (out_ / "test_dataset").string() << '\n';
    }
    return 0;
  }

  int fit_gp() {
    const auto ds = dataset(false);
    const auto fits = fit_gp_source_models(ds, cfg_.gp);
    save_gp(fits, "train");
    write_gp_curves(ds, fits, "train");
    if (cfg_.test_data) {
      const auto ts = dataset(true);
      const auto tf = fit_gp_source_models(ts, cfg_.gp, {}, true);
      save_gp(tf, "test");
      write_gp_curves(ts, tf, "test");
    }
    log_ << "wrote GP interpolants to " << (out_ / "gp").string() << '\n';
    return 0;
  }

  int train_ndde_cmd() {
    require(Experiment::ndde, Experiment::stable_ndde, "train-ndde");
    const auto ds = dataset(false);
    const auto sources = gp_sources(ds, gp_fits(ds, "train"));
    NddeModel model = initial_model(ds.dim);
    TrainConfig tc = train_config();
    auto run = train_ndde(std::move(model), ds, sources, tc);
    return finish_ndde(run.model, run.record, ds, sources);
  }

  int train_stable_ndde_cmd() {
    require(Experiment::stable_ndde, Experiment::stable_ndde, "train-stable-ndde");
    const auto ds = dataset(false);
    const auto sources = gp_sources(ds, gp_fits(ds, "train"));
    NddeModel model = initial_model(ds.dim);
    auto rng = stable_ndde::detail::stream(cfg_.seed, 21);
    LrfNetwork lrf = make_lrf(ds.dim, rng, cfg_.lrf.c, cfg_.lrf.d, cfg_.lrf.hidden);
    RkhsHistorySampler sampler = cfg_.history_sampler;
    sampler.dim = ds.dim;
    sampler.lookback = model.grid.lookback();
    auto run = train_stable_ndde(std::move(model), std::move(lrf), ds, sources, sampler, train_config(), cfg_.razumikhin);
    return finish_ndde(run.model, run.record, ds, sources);
  }

  int train_feedback_cmd() {
    require(Experiment::feedback, Experiment::feedback, "train-feedback");
    const auto sys = system();
    const FeedbackPolicy initial = lqr_policy(sys, cfg_.feedback.delay, cfg_.feedback.q_weight, cfg_.feedback.r_weight);
    auto rng = stable_ndde::detail::stream(cfg_.seed, 21);
    LrfNetwork lrf = make_lrf(sys.latent_dim, rng, cfg_.lrf.c, cfg_.lrf.d, cfg_.lrf.hidden);
    auto run = train_feedback(sys, initial, std::move(lrf), cfg_.feedback.sampling, train_config(), cfg_.razumikhin);
    write_run_record(run.record, out_ / "run.jsonl");
    nlohmann::json metrics = existing_metrics();
    metrics["initial_gains"] = to_std(initial.gains);
    metrics["final_gains"] = to_std(run.policy.gains);
    metrics["final_lrf_loss"] = run.record.iterations.empty() ? 0.0 : run.record.iterations.back().lrf_loss;
    metrics["wall_time"] = run.record.wall_time;
    write_json_file(out_ / "metrics.json", metrics);
    log_ << "gains " << metrics["initial_gains"].dump() << " -> " << metrics["final_gains"].dump() << '\n';
    return 0;
  }

  int evaluate() {
    nlohmann::json metrics = existing_metrics();
    std::filesystem::create_directories(out_ / "predictions");
    if (cfg_.experiment == Experiment::feedback) {
      const auto sys = system();
      const FeedbackPolicy policy = load_policy();
      const auto hs = control_histories(sys, policy, 31);
      std::vector<double> ratios(hs.size());
      for (std::size_t k = 0; k < hs.size(); ++k) {
        const auto res = integrate_until_divergence(closed_loop_field(sys, policy), closed_loop_grid(policy), hs[k],
                                                    cfg_.check.horizon, cfg_.train.solver);
        write_dense(res.solution, out_ / "predictions" / ("closed_loop_" + three_digits(k) + ".csv"));
        ratios[k] = res.blowup_time ? std::numeric_limits<double>::infinity()
                                    : res.solution.value_at(cfg_.check.horizon).norm() / hs[k](0.0).norm();
      }
      double worst = 0.0, mean = 0.0;
      for (double r : ratios) {
        worst = std::max(worst, r);
        mean += r / static_cast<double>(ratios.size());
      }
      metrics["closed_loop_final_ratio"] = json_numbers(ratios);
      metrics["closed_loop_max_final_ratio"] = to_json_value(worst);
      metrics["closed_loop_mean_final_ratio"] = to_json_value(mean);
      log_ << "|x(T)|/|x(0)| over " << ratios.size() << " histories: max " << worst << ", mean " << mean << '\n';
    } else {
      const auto ds = dataset(false);
      const auto model = load_model(ds.dim);
      const auto sources = gp_sources(ds, gp_fits(ds, "train"));
      metrics["train_mse"] = to_json_value(predict_and_score(model, ds, sources, "train", nullptr));
      if (cfg_.test_data) {
        const auto ts = dataset(true);
        const auto tsrc = gp_sources(ts, gp_fits(ts, "test"));
        double max_abs = 0.0;
        metrics["test_mse"] = to_json_value(predict_and_score(model, ts, tsrc, "test", &max_abs));
        metrics["test_max_abs_prediction"] = to_json_value(max_abs);
      }
      log_ << "train_mse " << metrics["train_mse"].dump();
      if (metrics.contains("test_mse")) log_ << ", test_mse " << metrics["test_mse"].dump();
      log_ << '\n';
    }
    write_json_file(out_ / "metrics.json", metrics);
    return 0;
  }

  int certify() {
    DecayCertificateReport rep;
    VerifyOptions vo;
    vo.check_step = cfg_.check.check_step;
    vo.slack = cfg_.check.slack;
    vo.solver = cfg_.train.solver;
    const LrfNetwork lrf = read_json_file(out_ / "model" / "lrf_final.json").get<LrfNetwork>();
    if (cfg_.experiment == Experiment::feedback) {
      const auto sys = system();
      const FeedbackPolicy policy = load_policy();
      const auto hs = control_histories(sys, policy, 41);
      rep = verify_decay(closed_loop_field(sys, policy), closed_loop_grid(policy), cfg_.razumikhin, lrf, hs,
                         cfg_.check.horizon, vo);
    } else if (cfg_.experiment == Experiment::stable_ndde) {
      const auto ds = dataset(false);
      const auto model = load_model(ds.dim);
      RkhsHistorySampler sampler = cfg_.history_sampler;
      sampler.dim = ds.dim;
      sampler.lookback = model.grid.lookback();
      auto rng = stable_ndde::detail::stream(cfg_.seed, 41);
      rep = verify_decay(model.field(), model.grid, cfg_.razumikhin, lrf, sample_histories(sampler, cfg_.check.histories, rng),
                         cfg_.check.horizon, vo);
    } else {
      throw ConfigError("certify needs an LRF: use experiment stable-ndde or feedback");
    }
    write_json_file(out_ / "certificate.json", rep);
    log_ << "max LRF residual " << rep.max_residual << ", gamma " << rep.gamma << ", M " << rep.M
         << ", envelope violations " << rep.total_violations() << '\n';
    return 0;
  }

  int export_plots() {
    const RunRecord rec = read_run_record(out_ / "run.jsonl");
    std::filesystem::create_directories(out_ / "plots");
    const auto path = out_ / "plots" / "loss_curve.csv";
    std::ofstream csv(path);
    if (!csv) throw ConfigError("cannot write " + path.string());
    csv << "iteration,train_loss,lrf_loss,lr\n";
    for (const auto& it : rec.iterations) {
      csv << it.iteration << ',' << format_double(it.train_loss) << ',' << format_double(it.lrf_loss) << ','
          << format_double(it.lr) << '\n';
    }
    log_ << "wrote " << rec.iterations.size() << " rows to " << path.string() << '\n';
    return 0;
  }

private:
  ExperimentConfig cfg_;
  std::filesystem::path out_;
  std::ostream& log_;

  static std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

  static nlohmann::json json_numbers(const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(to_json_value(x));
    return a;
  }

  static std::string three_digits(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu", k);
    return buf;
  }

  BenchmarkSystem system() const { return make_system(cfg_.system, cfg_.system_params); }

  void require(Experiment a, Experiment b, const char* cmd) const {
    if (cfg_.experiment != a && cfg_.experiment != b) throw ConfigError(std::string(cmd) + ": config experiment does not match");
  }

  TrajectoryDataset make_dataset(bool test) const {
    const auto& spec = test ? cfg_.test_data : cfg_.data;
    if (!spec) throw ConfigError(test ? "config has no test_data section" : "config has no data section");
    return generate_dataset(system(), *spec, test ? cfg_.seed ^ 0x5bd1e995ULL : cfg_.seed);
  }

  /// Loads <out>/dataset (or test_dataset), generating it first when absent.
  TrajectoryDataset dataset(bool test) const {
    const auto dir = out_ / (test ? "test_dataset" : "dataset");
    if (std::filesystem::exists(dir / "manifest.json")) return load_dataset(dir);
    auto ds = make_dataset(test);
    save_dataset(ds, dir);
    return ds;
  }

  void save_gp(const std::vector<GpSourceFit>& fits, const std::string& name) const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& f : fits) j.push_back({{"initial", f.initial}, {"along", f.along}});
    write_json_file(out_ / "gp" / (name + ".json"), j);
  }

  /// GP means on a 400-point grid; test fits only cover the history block.
  void write_gp_curves(const TrajectoryDataset& ds, const std::vector<GpSourceFit>& fits, const std::string& name) const {
    for (std::size_t k = 0; k < ds.size(); ++k) {
      const Observations all = ds.trajectories[k].all();
      const double end = name == "test" ? 0.0 : all.times.back();
      const int n = 400;
      std::vector<double> ts(n);
      Matrix v(n, ds.dim);
      for (int i = 0; i < n; ++i) {
        ts[static_cast<std::size_t>(i)] = all.times.front() + (end - all.times.front()) * i / (n - 1);
        v.row(i) = fits[k].along(ts[static_cast<std::size_t>(i)]).transpose();
      }
      write_series_csv(out_ / "gp" / (name + "_" + trajectory_file_name(k)), ts, v, "mean");
    }
  }

  std::vector<GpSourceFit> gp_fits(const TrajectoryDataset& ds, const std::string& name) const {
    const auto path = out_ / "gp" / (name + ".json");
    if (std::filesystem::exists(path)) {
      std::vector<GpSourceFit> fits;
      for (const auto& f : read_json_file(path)) fits.push_back({f.at("initial").get<GpInterpolant>(), f.at("along").get<GpInterpolant>()});
      if (fits.size() != ds.size()) throw ConfigError(path.string() + ": trajectory count does not match the dataset");
      return fits;
    }
    auto fits = fit_gp_source_models(ds, cfg_.gp, {}, name == "test");
    save_gp(fits, name);
    return fits;
  }

  DelayGrid grid() const { return DelayGrid{cfg_.model.tau, cfg_.model.K}; }

  NddeModel initial_model(Index dim) const {
    auto rng = stable_ndde::detail::stream(cfg_.seed, 20);
    return make_ndde(dim, grid(), rng, cfg_.model.hidden, cfg_.model.output_scale);
  }

  NddeModel load_model(Index dim) const {
    NddeModel m{grid(), read_json_file(out_ / "model" / "ndde_final.json").get<MlpParams>(), dim};
    m.validate();
    return m;
  }

  FeedbackPolicy load_policy() const {
    const auto j = read_json_file(out_ / "model" / "policy_final.json");
    const auto g = j.at("gains").get<std::vector<double>>();
    return {Eigen::Map<const Vector>(g.data(), static_cast<Index>(g.size())), j.at("delay").get<double>()};
  }

  TrainConfig train_config() const {
    TrainConfig tc = cfg_.train;
    tc.seed = cfg_.seed;
    tc.checkpoint_dir = (out_ / "model").string();
    tc.on_iteration = [this, n = tc.iterations](const IterationRecord& r) {
      if (r.iteration % 10 == 0 || r.iteration + 1 == n) {
        log_ << "iter " << r.iteration << " loss " << r.train_loss << " lrf " << r.lrf_loss << " lr " << r.lr
             << (r.diverged ? " (diverged batches)" : "") << '\n';
      }
    };
    return tc;
  }

  nlohmann::json existing_metrics() const {
    const auto path = out_ / "metrics.json";
    return std::filesystem::exists(path) ? read_json_file(path) : nlohmann::json::object();
  }

  std::vector<HistoryFunction> control_histories(const BenchmarkSystem& sys, const FeedbackPolicy& policy,
                                                 std::uint64_t salt) const {
    auto rng = stable_ndde::detail::stream(cfg_.seed, salt);
    const double lookback = cfg_.feedback.sampling.history_length > 0.0 ? cfg_.feedback.sampling.history_length : policy.delay;
    return sample_control_histories(sys, cfg_.feedback.sampling, lookback, cfg_.check.histories, rng);
  }

  void write_dense(const DenseSolution<Vector>& sol, const std::filesystem::path& path) const {
    const int n = static_cast<int>(std::floor(sol.end_time() / cfg_.check.output_step + 1e-9)) + 1;
    std::vector<double> ts(static_cast<std::size_t>(n));
    Matrix v(n, sol.dim());
    for (int i = 0; i < n; ++i) {
      ts[static_cast<std::size_t>(i)] = std::min(i * cfg_.check.output_step, sol.end_time());
      v.row(i) = sol.value_at(ts[static_cast<std::size_t>(i)]).transpose();
    }
    write_series_csv(path, ts, v, "x");
  }

  /// Writes per-trajectory predictions at the observation times; NaN MSE when any trajectory diverges.
  double predict_and_score(const NddeModel& model, const TrajectoryDataset& ds, const std::vector<TrajectorySource>& sources,
                           const std::string& name, double* max_abs) const {
    const auto windows = full_windows(ds, sources, model.grid.lookback());
    double sse = 0.0, count = 0.0, amp = 0.0;
    bool diverged = false;
    for (std::size_t k = 0; k < windows.size(); ++k) {
      const auto& w = windows[k];
      const auto res = integrate_until_divergence(model.field(), model.grid, w.history, w.obs.times.back(), cfg_.train.solver);
      std::vector<double> ts;
      Matrix pred(0, ds.dim);
      for (std::size_t i = 0; i < w.obs.times.size(); ++i) {
        const double t = w.obs.times[i];
        if (res.blowup_time && t > res.solution.end_time()) break;
        ts.push_back(t);
        pred.conservativeResize(pred.rows() + 1, Eigen::NoChange);
        pred.row(pred.rows() - 1) = res.solution.value_at(t).transpose();
      }
      if (pred.rows() > 0) amp = std::max(amp, pred.cwiseAbs().maxCoeff());
      write_series_csv(out_ / "predictions" / (name + "_" + trajectory_file_name(k)), ts, pred, "x");
      if (res.blowup_time) {
        diverged = true;
        continue;
      }
      sse += (pred - w.obs.values).squaredNorm();
      count += static_cast<double>(pred.size());
    }
    if (max_abs) *max_abs = diverged ? std::numeric_limits<double>::infinity() : amp;
    return diverged ? std::numeric_limits<double>::quiet_NaN() : sse / count;
  }

  int finish_ndde(const NddeModel& model, const RunRecord& record, const TrajectoryDataset& ds,
                  const std::vector<TrajectorySource>& sources) {
    RunRecord rec = record;
    try {
      rec.train_mse = ndde_mse(model, ds, sources, cfg_.train.solver);
    } catch (const DivergenceError&) {
      rec.train_mse = std::numeric_limits<double>::quiet_NaN();
    }
    if (cfg_.test_data) {
      const auto ts = dataset(true);
      try {
        rec.test_mse = ndde_mse(model, ts, gp_sources(ts, gp_fits(ts, "test")), cfg_.train.solver);
      } catch (const DivergenceError&) {
        rec.test_mse = std::numeric_limits<double>::quiet_NaN();
      }
    }
    write_run_record(rec, out_ / "run.jsonl");
    nlohmann::json metrics = existing_metrics();
    metrics["train_mse"] = to_json_value(rec.train_mse);
    metrics["test_mse"] = to_json_value(rec.test_mse);
    metrics["wall_time"] = rec.wall_time;
    metrics["aborted"] = rec.aborted;
    write_json_file(out_ / "metrics.json", metrics);
    if (rec.aborted) {
      log_ << "training aborted: " << rec.abort_reason << '\n';
      return 2;
    }
    log_ << "train_mse " << metrics["train_mse"].dump() << " test_mse " << metrics["test_mse"].dump() << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Entry point

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> system;
};

inline const std::vector<std::pair<std::string, std::string>>& commands() {
  static const std::vector<std::pair<std::string, std::string>> c{
      {"generate-data", "Simulate the configured system and write the dataset"},
      {"fit-gp", "Fit GP history interpolants to the dataset"},
      {"train-ndde", "Fit a neural DDE to the dataset"},
      {"train-stable-ndde", "Fit a neural DDE jointly with a Lyapunov-Razumikhin function"},
      {"train-feedback", "Train delayed linear feedback gains with a Lyapunov-Razumikhin function"},
      {"evaluate", "Predict from trained checkpoints and write metrics"},
      {"certify", "Check the decay certificate on fresh histories"},
      {"export-plots", "Write loss curves as CSV"}};
  return c;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Neural delay differential equations with learned stability certificates", "stable_ndde"};
  app.require_subcommand(1, 1);
  Options opt;
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands()) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", opt.seed, "Seed override");
    sub->add_option("--system", opt.system, "System id override");
    subs.push_back(sub);
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  try {
    nlohmann::json j = read_json_file(opt.config);
    if (opt.system) j["system"] = *opt.system;
    if (opt.seed) j["seed"] = *opt.seed;
    Pipeline p(parse_config(j), opt.out, out);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "generate-data") return p.generate_data();
    if (cmd == "fit-gp") return p.fit_gp();
    if (cmd == "train-ndde") return p.train_ndde_cmd();
    if (cmd == "train-stable-ndde") return p.train_stable_ndde_cmd();
    if (cmd == "train-feedback") return p.train_feedback_cmd();
    if (cmd == "evaluate") return p.evaluate();
    if (cmd == "certify") return p.certify();
    if (cmd == "export-plots") return p.export_plots();
    err << "unknown command " << cmd << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const ContractViolation& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

} // namespace stable_ndde::cli

#endif // STABLE_NDDE_CLI_HPP
