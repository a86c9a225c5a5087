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

#ifndef STABLE_NDDE_ERRORS_HPP
#define STABLE_NDDE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace stable_ndde {

/// Violated precondition of an API call (shape mismatch, out-of-domain lookup).
class ContractViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Invalid user-supplied configuration (non-positive width, misaligned grids).
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical failure: factorization breakdown, non-convergent iteration.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Hyperparameter or parameter search that produced no finite candidate.
class OptimizationError : public NumericalError {
public:
  using NumericalError::NumericalError;
};

/// A trajectory left the finite region during integration.
class DivergenceError : public NumericalError {
public:
  DivergenceError(const std::string& what, double time)
      : NumericalError(what), time_(time) {}

  /// Time of the first step whose state was non-finite or exceeded the guard.
  double time() const noexcept { return time_; }

private:
  double time_;
};

} // namespace stable_ndde

#endif // STABLE_NDDE_ERRORS_HPP
