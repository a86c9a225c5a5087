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

#ifndef STABLE_NDDE_IO_HPP
#define STABLE_NDDE_IO_HPP

// File formats. Time series are CSV with a header row "t,x1,...,xn" and
// round-trip (%.17g) number formatting; datasets are one CSV per trajectory
// plus manifest.json.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "errors.hpp"

namespace stable_ndde {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Rows (t_i, values.row(i)); `prefix` names the value columns prefix1..prefixn.
inline void write_series_csv(const std::filesystem::path& path, const std::vector<double>& times, const Matrix& values,
                             const std::string& prefix = "x") {
  if (values.rows() != static_cast<Index>(times.size())) throw ContractViolation("write_series_csv: row count mismatch");
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << 't';
  for (Index j = 0; j < values.cols(); ++j) out << ',' << prefix << (j + 1);
  out << '\n';
  for (std::size_t i = 0; i < times.size(); ++i) {
    out << format_double(times[i]);
    for (Index j = 0; j < values.cols(); ++j) out << ',' << format_double(values(static_cast<Index>(i), j));
    out << '\n';
  }
}

/// Reads a series written by write_series_csv (any header, first column time).
inline Observations read_series_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty file");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ": cannot parse '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw ConfigError(path.string() + ": ragged rows");
    if (row.size() < 1) throw ConfigError(path.string() + ": missing time column");
    rows.push_back(std::move(row));
  }
  Observations obs;
  const Index cols = rows.empty() ? 0 : static_cast<Index>(rows.front().size()) - 1;
  obs.values.resize(static_cast<Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    obs.times.push_back(rows[i][0]);
    for (Index j = 0; j < cols; ++j) obs.values(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j + 1)];
  }
  return obs;
}

inline std::string trajectory_file_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%03zu.csv", k);
  return buf;
}

/// manifest.json: {noise_std, horizon, dim, trajectories: [{file, split, history_rows, prediction_rows}]}.
/// Each trajectory CSV holds the history rows (t < 0) followed by the prediction rows.
inline void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"noise_std", ds.noise_std}, {"horizon", ds.horizon}, {"dim", ds.dim},
                          {"trajectories", nlohmann::json::array()}};
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& tr = ds.trajectories[k];
    std::vector<double> times = tr.history.times;
    times.insert(times.end(), tr.prediction.times.begin(), tr.prediction.times.end());
    Matrix values(tr.history.size() + tr.prediction.size(), ds.dim);
    if (tr.history.size() > 0) values.topRows(tr.history.size()) = tr.history.values;
    values.bottomRows(tr.prediction.size()) = tr.prediction.values;
    const std::string file = trajectory_file_name(k);
    write_series_csv(dir / file, times, values, "y");
    manifest["trajectories"].push_back(
        {{"file", file}, {"split", tr.split}, {"history_rows", tr.history.size()}, {"prediction_rows", tr.prediction.size()}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
}

inline TrajectoryDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no dataset manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(dir.string() + "/manifest.json: " + e.what());
  }
  TrajectoryDataset ds;
  ds.noise_std = manifest.at("noise_std").get<double>();
  ds.horizon = manifest.at("horizon").get<double>();
  ds.dim = manifest.at("dim").get<Index>();
  for (const auto& jt : manifest.at("trajectories")) {
    const Observations all = read_series_csv(dir / jt.at("file").get<std::string>());
    const Index nh = jt.at("history_rows").get<Index>();
    const Index np = jt.at("prediction_rows").get<Index>();
    if (all.size() != nh + np || all.dim() != ds.dim) throw ConfigError(dir.string() + ": trajectory file does not match manifest");
    Trajectory tr;
    tr.split = jt.value("split", std::string("train"));
    tr.history.times.assign(all.times.begin(), all.times.begin() + nh);
    tr.history.values = all.values.topRows(nh);
    tr.prediction.times.assign(all.times.begin() + nh, all.times.end());
    tr.prediction.values = all.values.bottomRows(np);
    ds.trajectories.push_back(std::move(tr));
  }
  ds.validate();
  return ds;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

} // namespace stable_ndde

#endif // STABLE_NDDE_IO_HPP
