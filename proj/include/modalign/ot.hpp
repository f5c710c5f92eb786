// Copyright 2026 The modalign Authors
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

// Optimal transport between two representation sets with uniform marginals.
//
// A representation set is a matrix whose rows are positions and whose
// columns are feature dimensions. The transport problem is
//
//   W = min_Z sum_ij Z_ij C_ij,  C_ij = ||hs_i - ht_j||^2,
//   rows of Z sum to 1/n, columns of Z sum to 1/m, Z >= 0.
//
// Solvers always run in double precision. The cost and gradient helpers are
// templated on the caller's scalar type.

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace modalign::ot {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RepresentationSet = Matrix<Scalar>;

class OtError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method {
  kSinkhorn,
  kExact,
  // Exact when n*m <= kExactLimit, Sinkhorn otherwise.
  kAuto,
};

inline constexpr std::size_t kExactLimit = 64;

struct SolverConfig {
  Method method = Method::kSinkhorn;
  // Regularization is epsilon_scale * mean(C) unless `epsilon` is set.
  double epsilon_scale = 0.01;
  std::optional<double> epsilon;
  int max_iters = 500;
  double tol = 1e-6;
};

struct OtSolution {
  Eigen::MatrixXd plan;
  double distance = 0.0;
  int iterations = 0;
  double marginal_violation = 0.0;
  // False when Sinkhorn ran out of iterations before meeting `tol`; the plan
  // is still repaired to feasibility.
  bool converged = true;
};

// Largest absolute deviation of any row sum from 1/n or column sum from 1/m.
double marginal_violation(const Eigen::MatrixXd& plan);

// Globally optimal plan for n*m <= kExactLimit. Throws OtError above that.
OtSolution solve_exact_small(const Eigen::MatrixXd& cost);

// Log-domain Sinkhorn with epsilon annealing followed by a rounding step that
// makes the plan exactly feasible.
OtSolution sinkhorn(const Eigen::MatrixXd& cost, double epsilon, int max_iters,
                    double tol);

// Dispatches on cfg.method and resolves the default epsilon.
OtSolution solve(const Eigen::MatrixXd& cost, const SolverConfig& cfg);

namespace detail {

template <typename DerivedS, typename DerivedT>
void check_pair(const Eigen::MatrixBase<DerivedS>& hs,
                const Eigen::MatrixBase<DerivedT>& ht) {
  if (hs.rows() == 0 || ht.rows() == 0) {
    throw OtError("representation set is empty");
  }
  if (hs.cols() != ht.cols()) {
    throw OtError("dimension mismatch: " + std::to_string(hs.cols()) +
                  " vs " + std::to_string(ht.cols()));
  }
  if (!hs.allFinite() || !ht.allFinite()) {
    throw OtError("representation set has non-finite entries");
  }
}

}  // namespace detail

template <typename DerivedS, typename DerivedT>
Matrix<typename DerivedS::Scalar> squared_euclidean_cost(
    const Eigen::MatrixBase<DerivedS>& hs,
    const Eigen::MatrixBase<DerivedT>& ht) {
  detail::check_pair(hs, ht);
  using Scalar = typename DerivedS::Scalar;
  Matrix<Scalar> cost(hs.rows(), ht.rows());
  for (Eigen::Index j = 0; j < ht.rows(); ++j) {
    for (Eigen::Index i = 0; i < hs.rows(); ++i) {
      cost(i, j) = (hs.row(i) - ht.row(j).template cast<Scalar>()).squaredNorm();
    }
  }
  return cost;
}

template <typename DerivedS, typename DerivedT>
OtSolution transport(const Eigen::MatrixBase<DerivedS>& hs,
                     const Eigen::MatrixBase<DerivedT>& ht,
                     const SolverConfig& cfg) {
  const Eigen::MatrixXd cost =
      squared_euclidean_cost(hs.template cast<double>(),
                             ht.template cast<double>());
  return solve(cost, cfg);
}

template <typename DerivedS, typename DerivedT>
double wasserstein_distance(const Eigen::MatrixBase<DerivedS>& hs,
                            const Eigen::MatrixBase<DerivedT>& ht,
                            const SolverConfig& cfg = {}) {
  return transport(hs, ht, cfg).distance;
}

// d/dhs_i of sum_ij Z_ij ||hs_i - ht_j||^2 with the plan held fixed:
//   2 * (rowsum_i(Z) * hs_i - sum_j Z_ij ht_j).
// ht receives no gradient.
template <typename DerivedS, typename DerivedT>
Matrix<typename DerivedS::Scalar> transport_gradient(
    const Eigen::MatrixBase<DerivedS>& hs,
    const Eigen::MatrixBase<DerivedT>& ht, const Eigen::MatrixXd& plan) {
  using Scalar = typename DerivedS::Scalar;
  if (plan.rows() != hs.rows() || plan.cols() != ht.rows()) {
    throw OtError("plan shape does not match representation sets");
  }
  if (hs.cols() != ht.cols()) {
    throw OtError("dimension mismatch in transport_gradient");
  }
  const Matrix<Scalar> z = plan.cast<Scalar>();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_mass = z.rowwise().sum();
  return Scalar(2) * (row_mass.asDiagonal() * hs.derived() -
                      z * ht.template cast<Scalar>());
}

}  // namespace modalign::ot
