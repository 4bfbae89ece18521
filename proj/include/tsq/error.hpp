// Copyright 2026 The tsq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tsq {

/// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kParameter,   // invalid argument or configuration value
  kShape,       // matrix dimensions do not line up
  kNumerical,   // factorization failure or non-finite values
  kInfeasible,  // no schedule satisfies the bit budget
  kIo,          // file could not be read, written or parsed
  kInternal,    // broken invariant
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what)
      : Error(ErrorKind::kParameter, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorKind::kShape, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorKind::kNumerical, what) {}
};

/// Raised when a Cholesky factorization meets a non-positive pivot.
class SingularHessianError : public NumericalError {
 public:
  explicit SingularHessianError(std::size_t pivot)
      : NumericalError("singular Hessian: non-positive pivot at index " +
                       std::to_string(pivot)),
        pivot_(pivot) {}

  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

class InfeasibleBudgetError : public Error {
 public:
  InfeasibleBudgetError(const std::string& what, double closest_average)
      : Error(ErrorKind::kInfeasible, what), closest_average_(closest_average) {}

  /// Smallest average bit-width that was actually reachable.
  double closest_average() const noexcept { return closest_average_; }

 private:
  double closest_average_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

class InternalError : public Error {
 public:
  explicit InternalError(const std::string& what)
      : Error(ErrorKind::kInternal, what) {}
};

}  // namespace tsq
