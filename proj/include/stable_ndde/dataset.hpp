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

#ifndef STABLE_NDDE_DATASET_HPP
#define STABLE_NDDE_DATASET_HPP

#include <string>
#include <vector>

#include "errors.hpp"
#include "gp_history.hpp"

namespace stable_ndde {

/// One observed trajectory: samples along the initial history (times <= 0)
/// and prediction targets (times >= 0).
struct Trajectory {
  Observations history;
  Observations prediction;
  std::string split = "train";

  /// History block followed by the prediction block, dropping a duplicated t = 0.
  Observations all() const {
    Observations out;
    out.times = history.times;
    std::size_t skip = 0;
    if (!history.times.empty() && !prediction.times.empty() && prediction.times.front() <= history.times.back()) skip = 1;
    out.times.insert(out.times.end(), prediction.times.begin() + static_cast<long>(skip), prediction.times.end());
    const Index hp = history.size(), pp = prediction.size() - static_cast<Index>(skip);
    const Index dim = std::max(history.dim(), prediction.dim());
    out.values.resize(hp + pp, dim);
    if (hp > 0) out.values.topRows(hp) = history.values;
    if (pp > 0) out.values.bottomRows(pp) = prediction.values.bottomRows(pp);
    return out;
  }
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  double noise_std = 0.0;
  double horizon = 0.0;
  Index dim = 0;

  std::size_t size() const { return trajectories.size(); }

  void validate() const {
    if (trajectories.empty()) throw ContractViolation("TrajectoryDataset: no trajectories");
    for (std::size_t k = 0; k < trajectories.size(); ++k) {
      const auto& tr = trajectories[k];
      auto check_block = [&](const Observations& o, bool history) {
        if (o.values.rows() != o.size()) throw ContractViolation("TrajectoryDataset: times/values row mismatch");
        if (o.size() > 0 && o.dim() != dim) throw ContractViolation("TrajectoryDataset: dimension mismatch");
        for (std::size_t i = 0; i < o.times.size(); ++i) {
          if (history ? o.times[i] > 0.0 : o.times[i] < 0.0) {
            throw ContractViolation("TrajectoryDataset: trajectory " + std::to_string(k) +
                                    (history ? " has a history time after 0" : " has a prediction time before 0"));
          }
          if (i > 0 && !(o.times[i] > o.times[i - 1])) {
            throw ContractViolation("TrajectoryDataset: times not strictly increasing in trajectory " + std::to_string(k));
          }
        }
      };
      check_block(tr.history, true);
      check_block(tr.prediction, false);
    }
  }
};

} // namespace stable_ndde

#endif // STABLE_NDDE_DATASET_HPP
