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

#ifndef STABLE_NDDE_NETS_HPP
#define STABLE_NDDE_NETS_HPP

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "errors.hpp"
#include "tensor_ad.hpp"

namespace stable_ndde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr int kCheckpointFormatVersion = 1;

/// Smoothed ReLU with blend width d (C^2, slope in [0, 1]).
inline double smoothed_relu(double x, double d) {
  if (!(d > 0.0)) throw ConfigError("smoothed_relu: width d must be positive, got " + std::to_string(d));
  return ad::smoothed_relu_value(x, d);
}

inline double swish(double x) { return x * ad::sigmoid_value(x); }

// ---------------------------------------------------------------------------
// Vector-field network f_theta: fully connected, Swish hidden activations,
// linear output layer.

struct DenseLayer {
  Matrix weight; // out x in
  Vector bias;   // out
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  Vector flatten() const {
    Vector out(parameter_count());
    Index k = 0;
    for (const auto& l : layers) {
      out.segment(k, l.weight.size()) = Eigen::Map<const Vector>(l.weight.data(), l.weight.size());
      k += l.weight.size();
      out.segment(k, l.bias.size()) = l.bias;
      k += l.bias.size();
    }
    return out;
  }

  void unflatten(const Vector& flat) {
    if (flat.size() != parameter_count()) throw ContractViolation("MlpParams::unflatten: size mismatch");
    Index k = 0;
    for (auto& l : layers) {
      Eigen::Map<Vector>(l.weight.data(), l.weight.size()) = flat.segment(k, l.weight.size());
      k += l.weight.size();
      l.bias = flat.segment(k, l.bias.size());
      k += l.bias.size();
    }
  }
};

inline const std::vector<Index>& default_mlp_hidden() {
  static const std::vector<Index> sizes{32, 64, 128, 64, 32};
  return sizes;
}

/// Weights ~ N(0, 1/fan_in), zero biases. `output_scale` multiplies the last
/// layer's weights (0 gives a network that outputs exactly zero).
inline MlpParams make_mlp(Index input_dim, const std::vector<Index>& hidden, Index output_dim, std::mt19937_64& rng,
                          double output_scale = 1.0) {
  if (input_dim <= 0 || output_dim <= 0) throw ConfigError("make_mlp: dimensions must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  MlpParams p;
  Index fan_in = input_dim;
  std::vector<Index> sizes = hidden;
  sizes.push_back(output_dim);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    DenseLayer l;
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in)) * (i + 1 == sizes.size() ? output_scale : 1.0);
    l.weight = Matrix::NullaryExpr(sizes[i], fan_in, [&]() { return s * normal(rng); });
    l.bias = Vector::Zero(sizes[i]);
    p.layers.push_back(std::move(l));
    fan_in = sizes[i];
  }
  return p;
}

inline Vector mlp_forward(const MlpParams& p, const Vector& v) {
  if (v.size() != p.input_dim()) {
    throw ContractViolation("mlp_forward: input has length " + std::to_string(v.size()) + ", network expects " +
                            std::to_string(p.input_dim()));
  }
  Vector h = v;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    Vector pre = p.layers[i].weight * h + p.layers[i].bias;
    if (i + 1 < p.layers.size()) {
      h = pre.unaryExpr([](double x) { return swish(x); });
    } else {
      h = std::move(pre);
    }
  }
  return h;
}

/// MLP parameters registered as leaves of one tape.
struct MlpOnTape {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
  Index input_dim = 0;

  MlpOnTape(ad::Tape& tape, const MlpParams& p) : input_dim(p.input_dim()) {
    for (const auto& l : p.layers) {
      weights.push_back(tape.leaf(l.weight));
      biases.push_back(tape.leaf(Matrix(l.bias)));
    }
  }

  /// Flat gradient in MlpParams::flatten() order.
  Vector gradient(const ad::Gradients& g) const {
    Index total = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) total += weights[i].size() + biases[i].size();
    Vector out(total);
    Index k = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const Matrix gw = g[weights[i]];
      out.segment(k, gw.size()) = Eigen::Map<const Vector>(gw.data(), gw.size());
      k += gw.size();
      const Matrix gb = g[biases[i]];
      out.segment(k, gb.size()) = Eigen::Map<const Vector>(gb.data(), gb.size());
      k += gb.size();
    }
    return out;
  }
};

inline ad::Var mlp_forward(const MlpOnTape& p, ad::Var v) {
  if (v.rows() != p.input_dim || v.cols() != 1) {
    throw ContractViolation("mlp_forward: input has length " + std::to_string(v.rows()) + ", network expects " +
                            std::to_string(p.input_dim));
  }
  ad::Var h = v;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    ad::Var pre = ad::matvec(p.weights[i], h) + p.biases[i];
    h = i + 1 < p.weights.size() ? ad::swish(pre) : pre;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Input-convex network g_phi and the Lyapunov-Razumikhin candidate
//   V(x) = sigma_d(g(x) - g(0)) + c |x|^2.
//
// Layer 0:   z1 = sigma_d(Wx0 x + b0)
// Layer k:   z_{k+1} = sigma_d(Wz_k z_k + Wx_k x + b_k)
// Output:    g = wz z_L + wx x + b       (linear, wz >= 0)
// All Wz are kept elementwise nonnegative, so g is convex in x.

struct IcnnLayer {
  Matrix wx; // out x n
  Matrix wz; // out x previous width; empty for the first layer
  Vector b;
};

struct IcnnParams {
  std::vector<IcnnLayer> layers; // hidden layers followed by the scalar output layer

  Index input_dim() const { return layers.empty() ? 0 : layers.front().wx.cols(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.wx.size() + l.wz.size() + l.b.size();
    return n;
  }

  Vector flatten() const {
    Vector out(parameter_count());
    Index k = 0;
    auto put = [&](const Matrix& m) {
      out.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      k += m.size();
    };
    for (const auto& l : layers) {
      put(l.wx);
      put(l.wz);
      put(l.b);
    }
    return out;
  }

  void unflatten(const Vector& flat) {
    if (flat.size() != parameter_count()) throw ContractViolation("IcnnParams::unflatten: size mismatch");
    Index k = 0;
    auto get = [&](auto& m) {
      Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(k, m.size());
      k += m.size();
    };
    for (auto& l : layers) {
      get(l.wx);
      get(l.wz);
      get(l.b);
    }
  }

  double min_wz() const {
    double m = 0.0;
    for (const auto& l : layers) {
      if (l.wz.size() > 0) m = std::min(m, l.wz.minCoeff());
    }
    return m;
  }
};

struct LrfNetwork {
  IcnnParams icnn;
  double c = 1e-3;
  double d = 0.1;
};

inline const std::vector<Index>& default_icnn_hidden() {
  static const std::vector<Index> sizes{64, 64};
  return sizes;
}

inline IcnnParams make_icnn(Index input_dim, const std::vector<Index>& hidden, std::mt19937_64& rng) {
  if (input_dim <= 0 || hidden.empty()) throw ConfigError("make_icnn: need positive input dim and >= 1 hidden layer");
  std::normal_distribution<double> normal(0.0, 1.0);
  IcnnParams p;
  const double sx = 1.0 / std::sqrt(static_cast<double>(input_dim));
  Index prev = 0;
  std::vector<Index> sizes = hidden;
  sizes.push_back(1);
  for (Index width : sizes) {
    IcnnLayer l;
    l.wx = Matrix::NullaryExpr(width, input_dim, [&]() { return sx * normal(rng); });
    if (prev > 0) {
      const double sz = 1.0 / std::sqrt(static_cast<double>(prev));
      l.wz = Matrix::NullaryExpr(width, prev, [&]() { return sz * std::abs(normal(rng)); });
    }
    l.b = Vector::Zero(width);
    p.layers.push_back(std::move(l));
    prev = width;
  }
  return p;
}

inline LrfNetwork make_lrf(Index input_dim, std::mt19937_64& rng, double c = 1e-3, double d = 0.1,
                           const std::vector<Index>& hidden = default_icnn_hidden()) {
  if (!(c > 0.0)) throw ConfigError("make_lrf: c must be positive");
  if (!(d > 0.0)) throw ConfigError("make_lrf: d must be positive");
  return LrfNetwork{make_icnn(input_dim, hidden, rng), c, d};
}

/// Clamps every hidden-to-hidden weight to max(w, 0); W_x and biases untouched.
inline IcnnParams project_nonnegative(IcnnParams p) {
  for (auto& l : p.layers) {
    if (l.wz.size() > 0) l.wz = l.wz.cwiseMax(0.0);
  }
  return p;
}

inline double icnn_forward(const IcnnParams& p, double d, const Vector& x) {
  if (x.size() != p.input_dim()) throw ContractViolation("icnn_forward: input dimension mismatch");
  Vector z;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const IcnnLayer& l = p.layers[i];
    Vector pre = l.wx * x + l.b;
    if (i > 0) pre.noalias() += l.wz * z;
    if (i + 1 < p.layers.size()) {
      z = pre.unaryExpr([d](double s) { return ad::smoothed_relu_value(s, d); });
    } else {
      return pre(0);
    }
  }
  return 0.0;
}

inline double lrf_forward(const LrfNetwork& net, const Vector& x) {
  const double g0 = icnn_forward(net.icnn, net.d, Vector::Zero(x.size()));
  const double gx = icnn_forward(net.icnn, net.d, x);
  return ad::smoothed_relu_value(gx - g0, net.d) + net.c * x.squaredNorm();
}

/// ICNN parameters registered as leaves of one tape.
struct IcnnOnTape {
  std::vector<ad::Var> wx, wz, b;
  Index input_dim = 0;

  IcnnOnTape(ad::Tape& tape, const IcnnParams& p) : input_dim(p.input_dim()) {
    for (const auto& l : p.layers) {
      wx.push_back(tape.leaf(l.wx));
      wz.push_back(l.wz.size() > 0 ? tape.leaf(l.wz) : ad::Var{});
      b.push_back(tape.leaf(Matrix(l.b)));
    }
  }

  /// Flat gradient in IcnnParams::flatten() order.
  Vector gradient(const ad::Gradients& g) const {
    std::vector<Matrix> parts;
    Index total = 0;
    for (std::size_t i = 0; i < wx.size(); ++i) {
      parts.push_back(g[wx[i]]);
      parts.push_back(wz[i].valid() ? g[wz[i]] : Matrix());
      parts.push_back(g[b[i]]);
    }
    for (const auto& m : parts) total += m.size();
    Vector out(total);
    Index k = 0;
    for (const auto& m : parts) {
      out.segment(k, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      k += m.size();
    }
    return out;
  }
};

namespace detail {

// d/ds of the smoothed ReLU, composed from tape primitives:
// u = clamp(s, 0, d) = d - relu(d - relu(s)); slope = u^2 (3/d^2 - 2u/d^3).
inline ad::Var smoothed_relu_slope(ad::Var s, double d) {
  ad::Var u = ad::shift(-ad::relu(ad::shift(-ad::relu(s), d)), d);
  ad::Var poly = ad::shift((-2.0 / (d * d * d)) * u, 3.0 / (d * d));
  return ad::mul(ad::mul(u, u), poly);
}

} // namespace detail

/// g(x) on the tape; optionally also the directional derivative Dg(x)[dir].
inline std::pair<ad::Var, ad::Var> icnn_forward_tangent(const IcnnOnTape& p, double d, ad::Var x, ad::Var dir,
                                                        bool with_tangent) {
  if (x.rows() != p.input_dim) throw ContractViolation("icnn_forward: input dimension mismatch");
  ad::Var z, dz;
  for (std::size_t i = 0; i < p.wx.size(); ++i) {
    ad::Var pre = ad::matvec(p.wx[i], x) + p.b[i];
    ad::Var dpre;
    if (with_tangent) dpre = ad::matvec(p.wx[i], dir);
    if (i > 0) {
      pre = pre + ad::matvec(p.wz[i], z);
      if (with_tangent) dpre = dpre + ad::matvec(p.wz[i], dz);
    }
    if (i + 1 < p.wx.size()) {
      z = ad::smoothed_relu(pre, d);
      if (with_tangent) dz = ad::mul(detail::smoothed_relu_slope(pre, d), dpre);
    } else {
      return {pre, dpre};
    }
  }
  return {};
}

inline ad::Var lrf_forward(const IcnnOnTape& p, const LrfNetwork& net, ad::Var x) {
  ad::Tape& tape = *x.tape();
  ad::Var zero = tape.constant(Matrix::Zero(x.rows(), 1));
  ad::Var g0 = icnn_forward_tangent(p, net.d, zero, {}, false).first;
  ad::Var gx = icnn_forward_tangent(p, net.d, x, {}, false).first;
  return ad::smoothed_relu(gx - g0, net.d) + net.c * ad::sqnorm(x);
}

/// V(x) and its derivative along `dir`, i.e. grad V(x)^T dir, both on the tape.
inline std::pair<ad::Var, ad::Var> lrf_value_and_derivative(const IcnnOnTape& p, const LrfNetwork& net, ad::Var x,
                                                            ad::Var dir) {
  if (dir.rows() != x.rows()) throw ContractViolation("lrf derivative: direction dimension mismatch");
  ad::Tape& tape = *x.tape();
  ad::Var zero = tape.constant(Matrix::Zero(x.rows(), 1));
  ad::Var g0 = icnn_forward_tangent(p, net.d, zero, {}, false).first;
  auto [gx, dg] = icnn_forward_tangent(p, net.d, x, dir, true);
  ad::Var s = gx - g0;
  ad::Var value = ad::smoothed_relu(s, net.d) + net.c * ad::sqnorm(x);
  ad::Var rate = ad::mul(detail::smoothed_relu_slope(s, net.d), dg) + (2.0 * net.c) * ad::dot(x, dir);
  return {value, rate};
}

// ---------------------------------------------------------------------------
// JSON checkpoints. Weight arrays are row-major.

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols) throw ConfigError("checkpoint: array size does not match shape");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

inline void check_version(const nlohmann::json& j, const char* kind) {
  if (j.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw ConfigError(std::string("checkpoint: unsupported format_version for ") + kind);
  }
  if (j.at("kind").get<std::string>() != kind) throw ConfigError(std::string("checkpoint: expected kind ") + kind);
}

} // namespace detail

inline void to_json(nlohmann::json& j, const MlpParams& p) {
  j = {{"format_version", kCheckpointFormatVersion}, {"kind", "mlp"}, {"activation", "swish"}};
  j["layers"] = nlohmann::json::array();
  for (const auto& l : p.layers) {
    j["layers"].push_back({{"weight", detail::matrix_to_json(l.weight)}, {"bias", detail::matrix_to_json(l.bias)}});
  }
}

inline void from_json(const nlohmann::json& j, MlpParams& p) {
  detail::check_version(j, "mlp");
  p.layers.clear();
  Index prev = -1;
  for (const auto& jl : j.at("layers")) {
    DenseLayer l{detail::matrix_from_json(jl.at("weight")), detail::matrix_from_json(jl.at("bias"))};
    if (l.bias.size() != l.weight.rows() || (prev >= 0 && l.weight.cols() != prev)) {
      throw ConfigError("checkpoint: mlp layer shapes do not chain");
    }
    prev = l.weight.rows();
    p.layers.push_back(std::move(l));
  }
}

inline void to_json(nlohmann::json& j, const LrfNetwork& net) {
  j = {{"format_version", kCheckpointFormatVersion}, {"kind", "lrf"}, {"c", net.c}, {"d", net.d}};
  j["layers"] = nlohmann::json::array();
  for (const auto& l : net.icnn.layers) {
    nlohmann::json jl{{"wx", detail::matrix_to_json(l.wx)}, {"b", detail::matrix_to_json(l.b)}};
    if (l.wz.size() > 0) jl["wz"] = detail::matrix_to_json(l.wz);
    j["layers"].push_back(jl);
  }
}

inline void from_json(const nlohmann::json& j, LrfNetwork& net) {
  detail::check_version(j, "lrf");
  net.c = j.at("c").get<double>();
  net.d = j.at("d").get<double>();
  if (!(net.c > 0.0) || !(net.d > 0.0)) throw ConfigError("checkpoint: c and d must be positive");
  net.icnn.layers.clear();
  for (const auto& jl : j.at("layers")) {
    IcnnLayer l;
    l.wx = detail::matrix_from_json(jl.at("wx"));
    l.b = detail::matrix_from_json(jl.at("b"));
    if (jl.contains("wz")) l.wz = detail::matrix_from_json(jl.at("wz"));
    net.icnn.layers.push_back(std::move(l));
  }
}

} // namespace stable_ndde

#endif // STABLE_NDDE_NETS_HPP
