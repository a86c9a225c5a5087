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

#ifndef STABLE_NDDE_GP_HISTORY_HPP
#define STABLE_NDDE_GP_HISTORY_HPP

// Initial histories from Gaussian-process posterior means and from a
// norm-bounded subset of the RBF kernel's RKHS.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dde_core.hpp"
#include "errors.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

using Matrix = Eigen::MatrixXd;

/// sigma_k^2 exp(-|t - t'|^2 / (2 l^2))
struct RbfKernel {
  double length_scale = 1.0;
  double variance = 1.0;

  void validate() const {
    if (!(length_scale > 0.0)) throw ConfigError("RbfKernel: length scale must be positive");
    if (!(variance > 0.0)) throw ConfigError("RbfKernel: variance must be positive");
  }

  double operator()(double t, double s) const {
    const double r = (t - s) / length_scale;
    return variance * std::exp(-0.5 * r * r);
  }
};

inline double kernel_eval(const RbfKernel& k, double t, double s) { return k(t, s); }

/// Noisy samples (t_i, y_i); row i of `values` is y_i.
struct Observations {
  std::vector<double> times;
  Matrix values;

  Index size() const { return static_cast<Index>(times.size()); }
  Index dim() const { return values.cols(); }
};

struct GpHyperparameters {
  double length_scale = 1.0;
  double variance = 1.0;
  double noise_var = 1e-2;

  RbfKernel kernel() const { return {length_scale, variance}; }
};

inline Matrix gram_matrix(const RbfKernel& k, const std::vector<double>& times) {
  const Index n = static_cast<Index>(times.size());
  Matrix K(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) K(i, j) = K(j, i) = k(times[i], times[j]);
  }
  return K;
}

/// Posterior mean psi_i(t) = k_tT (K_TT + sigma_i^2 I)^{-1} Y_i, independently per dimension.
class GpInterpolant {
public:
  GpInterpolant() = default;
  GpInterpolant(std::vector<double> times, std::vector<GpHyperparameters> hypers, Matrix coefficients)
      : times_(std::move(times)), hypers_(std::move(hypers)), coefficients_(std::move(coefficients)) {}

  Index dim() const { return coefficients_.cols(); }
  const std::vector<double>& times() const { return times_; }
  const std::vector<GpHyperparameters>& hyperparameters() const { return hypers_; }
  /// Column i holds a_i = (K_TT + sigma_i^2 I)^{-1} Y_i.
  const Matrix& coefficients() const { return coefficients_; }

  Vector operator()(double t) const {
    Vector out(dim());
    for (Index i = 0; i < dim(); ++i) {
      const RbfKernel k = hypers_[static_cast<std::size_t>(i)].kernel();
      double acc = 0.0;
      for (std::size_t j = 0; j < times_.size(); ++j) acc += coefficients_(static_cast<Index>(j), i) * k(t, times_[j]);
      out(i) = acc;
    }
    return out;
  }

  /// Posterior mean as a history on [-lookback, 0] after shifting time by `t_offset`,
  /// i.e. s -> psi(t_offset + s).
  HistoryFunction as_history(double lookback, double t_offset = 0.0) const {
    auto self = std::make_shared<const GpInterpolant>(*this);
    return HistoryFunction(
        lookback, dim(), [self, t_offset](double s) { return (*self)(t_offset + s); },
        HistoryFunction::Kind::gp_mean);
  }

private:
  std::vector<double> times_;
  std::vector<GpHyperparameters> hypers_;
  Matrix coefficients_;
};

namespace detail {

inline void check_observations(const Observations& obs, Index min_count, const char* who) {
  if (obs.size() < min_count) {
    throw ContractViolation(std::string(who) + ": needs at least " + std::to_string(min_count) + " observations");
  }
  if (obs.values.rows() != obs.size()) throw ContractViolation(std::string(who) + ": times/values row mismatch");
}

inline Eigen::LLT<Matrix> factorize(const RbfKernel& k, double noise_var, const std::vector<double>& times) {
  Matrix Ky = gram_matrix(k, times);
  Ky.diagonal().array() += noise_var;
  Eigen::LLT<Matrix> llt(Ky);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "GP: K_TT + sigma^2 I is not positive definite (noise_var = " << noise_var << ")";
    for (std::size_t i = 0; i < times.size(); ++i) {
      for (std::size_t j = i + 1; j < times.size(); ++j) {
        if (times[i] == times[j]) msg << "; duplicate time " << times[i] << " at rows " << i << " and " << j;
      }
    }
    throw NumericalError(msg.str());
  }
  return llt;
}

} // namespace detail

/// Same hyperparameters for every dimension.
inline GpInterpolant fit_posterior_mean(const Observations& obs, const RbfKernel& kernel, double noise_var) {
  detail::check_observations(obs, 1, "fit_posterior_mean");
  kernel.validate();
  if (!(noise_var > 0.0)) throw ContractViolation("fit_posterior_mean: noise variance must be positive");
  auto llt = detail::factorize(kernel, noise_var, obs.times);
  Matrix coeffs = llt.solve(obs.values);
  std::vector<GpHyperparameters> hypers(static_cast<std::size_t>(obs.dim()),
                                        GpHyperparameters{kernel.length_scale, kernel.variance, noise_var});
  return GpInterpolant(obs.times, std::move(hypers), std::move(coeffs));
}

/// Per-dimension hyperparameters.
inline GpInterpolant fit_posterior_mean(const Observations& obs, const std::vector<GpHyperparameters>& hypers) {
  detail::check_observations(obs, 1, "fit_posterior_mean");
  if (static_cast<Index>(hypers.size()) != obs.dim()) throw ContractViolation("fit_posterior_mean: one hyper set per dim");
  Matrix coeffs(obs.size(), obs.dim());
  for (Index i = 0; i < obs.dim(); ++i) {
    const auto& h = hypers[static_cast<std::size_t>(i)];
    h.kernel().validate();
    if (!(h.noise_var > 0.0)) throw ContractViolation("fit_posterior_mean: noise variance must be positive");
    coeffs.col(i) = detail::factorize(h.kernel(), h.noise_var, obs.times).solve(obs.values.col(i));
  }
  return GpInterpolant(obs.times, hypers, std::move(coeffs));
}

/// -1/2 y^T K_y^{-1} y - 1/2 log det K_y - N/2 log 2 pi for one output dimension.
/// Returns -inf when K_y is not numerically positive definite.
inline double log_marginal_likelihood(const std::vector<double>& times, const Vector& y, const GpHyperparameters& h) {
  if (!(h.length_scale > 0.0) || !(h.variance > 0.0) || !(h.noise_var > 0.0)) {
    return -std::numeric_limits<double>::infinity();
  }
  Matrix Ky = gram_matrix(h.kernel(), times);
  Ky.diagonal().array() += h.noise_var;
  Eigen::LLT<Matrix> llt(Ky);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  const Vector alpha = llt.solve(y);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double n = static_cast<double>(y.size());
  const double v = -0.5 * y.dot(alpha) - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
  return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
}

/// Box constraints for the hyperparameter search, in natural units.
struct GpHyperBounds {
  double length_scale_min = 1e-2, length_scale_max = 1e2;
  double variance_min = 1e-6, variance_max = 1e4;
  double noise_var_min = 1e-8, noise_var_max = 1e2;
};

/// Exhaustive search over a tensor grid; ties keep the first candidate in
/// (length, variance, noise) lexicographic order.
inline GpHyperparameters grid_search_hyperparameters(const std::vector<double>& times, const Vector& y,
                                                     const std::vector<double>& lengths,
                                                     const std::vector<double>& variances,
                                                     const std::vector<double>& noises) {
  double best = -std::numeric_limits<double>::infinity();
  GpHyperparameters arg{};
  bool found = false;
  for (double l : lengths) {
    for (double v : variances) {
      for (double s : noises) {
        const GpHyperparameters h{l, v, s};
        const double ll = log_marginal_likelihood(times, y, h);
        if (std::isfinite(ll) && (!found || ll > best)) {
          best = ll;
          arg = h;
          found = true;
        }
      }
    }
  }
  if (!found) throw OptimizationError("grid_search_hyperparameters: every candidate had non-finite likelihood");
  return arg;
}

/// Multi-start gradient ascent in log-parameters (central-difference
/// gradients, backtracking steps) with a log-grid fallback. The result never
/// has lower likelihood than `init`.
inline GpHyperparameters fit_hyperparameters(const std::vector<double>& times, const Vector& y,
                                             const GpHyperparameters& init, const GpHyperBounds& bounds = {}) {
  if (times.size() < 2) throw ContractViolation("fit_hyperparameters: needs at least 2 observations");
  if (static_cast<Index>(times.size()) != y.size()) throw ContractViolation("fit_hyperparameters: size mismatch");

  const std::array<double, 3> lo{std::log(bounds.length_scale_min), std::log(bounds.variance_min),
                                 std::log(bounds.noise_var_min)};
  const std::array<double, 3> hi{std::log(bounds.length_scale_max), std::log(bounds.variance_max),
                                 std::log(bounds.noise_var_max)};
  using P = std::array<double, 3>;
  auto clamp = [&](P p) {
    for (int i = 0; i < 3; ++i) p[i] = std::clamp(p[i], lo[i], hi[i]);
    return p;
  };
  auto to_h = [](const P& p) { return GpHyperparameters{std::exp(p[0]), std::exp(p[1]), std::exp(p[2])}; };
  auto objective = [&](const P& p) { return log_marginal_likelihood(times, y, to_h(p)); };

  auto ascend = [&](P p) {
    double f = objective(p);
    if (!std::isfinite(f)) return std::pair<P, double>{p, f};
    double step = 0.5;
    for (int iter = 0; iter < 200 && step > 1e-8; ++iter) {
      P grad{};
      const double fd = 1e-5;
      for (int i = 0; i < 3; ++i) {
        P a = p, b = p;
        a[i] += fd;
        b[i] -= fd;
        const double fa = objective(a), fb = objective(b);
        grad[i] = (std::isfinite(fa) && std::isfinite(fb)) ? (fa - fb) / (2.0 * fd) : 0.0;
      }
      const double gnorm = std::sqrt(grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]);
      if (gnorm < 1e-8) break;
      bool improved = false;
      while (step > 1e-8) {
        P cand;
        for (int i = 0; i < 3; ++i) cand[i] = p[i] + step * grad[i] / gnorm;
        cand = clamp(cand);
        const double fc = objective(cand);
        if (std::isfinite(fc) && fc > f) {
          p = cand;
          f = fc;
          step *= 1.5;
          improved = true;
          break;
        }
        step *= 0.5;
      }
      if (!improved) break;
    }
    return std::pair<P, double>{p, f};
  };

  const P start = clamp({std::log(init.length_scale), std::log(init.variance), std::log(init.noise_var)});
  double best_f = objective(start);
  P best = start;

  double y_var = 0.0;
  if (y.size() > 0) y_var = std::max((y.array() - y.mean()).square().mean(), y.squaredNorm() / y.size());
  const double span = std::max(1e-6, *std::max_element(times.begin(), times.end()) -
                                          *std::min_element(times.begin(), times.end()));
  std::vector<P> starts{start};
  for (double lf : {0.1, 0.3, 1.0}) {
    starts.push_back(clamp({std::log(lf * span), std::log(std::max(y_var, 1e-6)), std::log(1e-2 * std::max(y_var, 1e-6))}));
  }
  for (const P& s : starts) {
    auto [p, f] = ascend(s);
    if (std::isfinite(f) && (!std::isfinite(best_f) || f > best_f)) {
      best_f = f;
      best = p;
    }
  }
  if (!std::isfinite(best_f)) {
    std::vector<double> ls, vs, ns;
    for (int i = 0; i <= 8; ++i) {
      const double a = i / 8.0;
      ls.push_back(std::exp(lo[0] + a * (hi[0] - lo[0])));
      vs.push_back(std::exp(lo[1] + a * (hi[1] - lo[1])));
      ns.push_back(std::exp(lo[2] + a * (hi[2] - lo[2])));
    }
    return grid_search_hyperparameters(times, y, ls, vs, ns);
  }
  return to_h(best);
}

/// Fits hyperparameters independently per output dimension, then the posterior mean.
inline GpInterpolant fit_history_gp(const Observations& obs, const GpHyperparameters& init,
                                    const GpHyperBounds& bounds = {}) {
  detail::check_observations(obs, 2, "fit_history_gp");
  std::vector<GpHyperparameters> hypers;
  for (Index i = 0; i < obs.dim(); ++i) hypers.push_back(fit_hyperparameters(obs.times, obs.values.col(i), init, bounds));
  return fit_posterior_mean(obs, hypers);
}

/// Posterior mean at a taped time value; differentiable in t. Output is dim x 1.
inline ad::Var gp_mean_on_tape(const GpInterpolant& gp, ad::Var t) {
  ad::Tape& tape = *t.tape();
  const Index n = static_cast<Index>(gp.times().size());
  ad::Var ones = tape.constant(ad::Matrix::Ones(n, 1));
  ad::Var centers = tape.constant(ad::Matrix(Eigen::Map<const Vector>(gp.times().data(), n)));
  ad::Var diff = ad::matmul(ones, t) - centers;
  ad::Var sq = ad::mul(diff, diff);
  std::vector<ad::Var> parts;
  for (Index i = 0; i < gp.dim(); ++i) {
    const auto& h = gp.hyperparameters()[static_cast<std::size_t>(i)];
    ad::Var k = h.variance * ad::exp((-0.5 / (h.length_scale * h.length_scale)) * sq);
    parts.push_back(ad::dot(k, tape.constant(ad::Matrix(gp.coefficients().col(i)))));
  }
  return parts.size() == 1 ? parts.front() : ad::concat(parts);
}

// ---------------------------------------------------------------------------
// Synthetic initial histories psi(t) = sum_i c_i k_{l, sigma_k}(t, t_i) with
// |c|_2 <= A, 1/l in [0, B], sigma_k in [0, C].

struct RkhsHistorySampler {
  double coeff_bound = 1.0;        // A
  double inv_length_bound = 1.0;   // B
  double kernel_std_bound = 1.0;   // C
  int centers = 10;                // N_hist
  double lookback = 1.0;           // r
  Index dim = 1;

  void validate() const {
    if (!(coeff_bound > 0.0) || !(inv_length_bound > 0.0) || !(kernel_std_bound > 0.0)) {
      throw ConfigError("RkhsHistorySampler: A, B, C must be positive");
    }
    if (centers < 1) throw ConfigError("RkhsHistorySampler: need at least one center");
    if (lookback < 0.0) throw ConfigError("RkhsHistorySampler: negative lookback");
    if (dim < 1) throw ConfigError("RkhsHistorySampler: dim must be positive");
  }

  std::vector<double> center_times() const {
    std::vector<double> t(static_cast<std::size_t>(centers));
    for (int i = 0; i < centers; ++i) t[static_cast<std::size_t>(i)] = centers == 1 ? 0.0 : -lookback + lookback * i / (centers - 1);
    return t;
  }

  /// Lipschitz bound A C^2 B sqrt(N_hist / e) of every sampled component.
  double lipschitz_bound() const {
    return coeff_bound * kernel_std_bound * kernel_std_bound * inv_length_bound *
           std::sqrt(static_cast<double>(centers) / std::numbers::e);
  }
};

/// One sampled RKHS element per output dimension.
struct RkhsSample {
  std::vector<double> centers;
  Matrix coefficients; // centers x dim
  Vector inv_length;   // per dim
  Vector kernel_std;   // per dim

  Vector operator()(double t) const {
    Vector out(coefficients.cols());
    for (Index i = 0; i < coefficients.cols(); ++i) {
      const double b = inv_length(i), s2 = kernel_std(i) * kernel_std(i);
      double acc = 0.0;
      for (std::size_t j = 0; j < centers.size(); ++j) {
        const double r = (t - centers[j]) * b;
        acc += coefficients(static_cast<Index>(j), i) * s2 * std::exp(-0.5 * r * r);
      }
      out(i) = acc;
    }
    return out;
  }
};

/// Coefficients uniform in the A-ball (Gaussian direction times radius A U^{1/N}).
inline RkhsSample sample_rkhs(const RkhsHistorySampler& s, std::mt19937_64& rng) {
  s.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  RkhsSample out;
  out.centers = s.center_times();
  out.coefficients.resize(s.centers, s.dim);
  out.inv_length.resize(s.dim);
  out.kernel_std.resize(s.dim);
  for (Index i = 0; i < s.dim; ++i) {
    Vector dir(s.centers);
    double norm = 0.0;
    do {
      for (Index j = 0; j < dir.size(); ++j) dir(j) = normal(rng);
      norm = dir.norm();
    } while (norm == 0.0);
    const double radius = s.coeff_bound * std::pow(unif(rng), 1.0 / s.centers);
    out.coefficients.col(i) = dir * (radius / norm);
    out.inv_length(i) = s.inv_length_bound * unif(rng);
    out.kernel_std(i) = s.kernel_std_bound * unif(rng);
  }
  return out;
}

inline HistoryFunction sample_history(const RkhsHistorySampler& s, std::mt19937_64& rng) {
  auto sample = std::make_shared<const RkhsSample>(sample_rkhs(s, rng));
  return HistoryFunction(s.lookback, s.dim, [sample](double t) { return (*sample)(t); });
}

inline HistoryFunction sample_history(const RkhsHistorySampler& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_history(s, rng);
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const GpInterpolant& gp) {
  j = {{"format_version", 1}, {"kind", "gp_interpolant"}, {"times", gp.times()}};
  j["hyperparameters"] = nlohmann::json::array();
  for (const auto& h : gp.hyperparameters()) {
    j["hyperparameters"].push_back({{"length_scale", h.length_scale}, {"variance", h.variance}, {"noise_var", h.noise_var}});
  }
  j["coefficients"] = nlohmann::json::array();
  for (Index i = 0; i < gp.dim(); ++i) {
    std::vector<double> col(gp.coefficients().col(i).data(), gp.coefficients().col(i).data() + gp.coefficients().rows());
    j["coefficients"].push_back(col);
  }
}

inline void from_json(const nlohmann::json& j, GpInterpolant& gp) {
  if (j.at("kind").get<std::string>() != "gp_interpolant") throw ConfigError("expected a gp_interpolant document");
  auto times = j.at("times").get<std::vector<double>>();
  std::vector<GpHyperparameters> hypers;
  for (const auto& h : j.at("hyperparameters")) {
    hypers.push_back({h.at("length_scale").get<double>(), h.at("variance").get<double>(), h.at("noise_var").get<double>()});
  }
  const auto& cols = j.at("coefficients");
  Matrix coeffs(static_cast<Index>(times.size()), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) {
    auto c = cols[i].get<std::vector<double>>();
    if (c.size() != times.size()) throw ConfigError("gp_interpolant: coefficient length mismatch");
    coeffs.col(static_cast<Index>(i)) = Eigen::Map<const Vector>(c.data(), static_cast<Index>(c.size()));
  }
  if (hypers.size() != cols.size()) throw ConfigError("gp_interpolant: one hyperparameter set per dimension");
  gp = GpInterpolant(std::move(times), std::move(hypers), std::move(coeffs));
}

} // namespace stable_ndde

#endif // STABLE_NDDE_GP_HISTORY_HPP
