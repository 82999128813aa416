#pragma once

// Small dense semidefinite programs over Hermitian matrices:
//
//   maximize   Re Tr(C rho)
//   subject to Re Tr(A_i rho) = b_i,  rho >= 0
//
// with dual
//
//   minimize   b^T y
//   subject to Z = sum_i y_i A_i - C >= 0.
//
// Solved by a primal-dual interior-point method (HKM direction, Mehrotra
// predictor-corrector) on the real symmetric embedding. Linearly dependent
// equalities are removed before the solve and checked for consistency.

#include <cstddef>
#include <string>
#include <vector>

#include "qkdbound/errors.hpp"
#include "qkdbound/linalg.hpp"

namespace qkdbound::sdp {

struct SdpProblem {
  HermitianOperator objective;
  std::vector<EqualityConstraint> constraints;

  Eigen::Index dim() const { return objective.dim(); }
  // Throws InvalidArgument unless every operator has the objective's size,
  // the list is nonempty and Tr(rho) = 1 is among the constraints.
  void validate() const;
};

enum class SolveStatus { Optimal, Infeasible, MaxIterations, NumericalFailure };

const char* to_string(SolveStatus status);

struct SolverOptions {
  double gap_tolerance = 1e-8;
  double feas_tolerance = 1e-8;
  int max_iterations = 200;
  // Consistency threshold for equalities eliminated as linearly dependent.
  double redundancy_tolerance = 1e-10;
};

struct SdpSolution {
  SolveStatus status = SolveStatus::NumericalFailure;
  // NaN unless status == Optimal.
  double primal_value = 0.0;
  double dual_value = 0.0;
  double gap = 0.0;
  HermitianOperator rho;
  // One multiplier per problem constraint; eliminated constraints carry 0.
  RealVector multipliers;
  double max_equality_residual = 0.0;
  double min_rho_eigenvalue = 0.0;
  double min_dual_slack_eigenvalue = 0.0;
  int iterations = 0;
  std::vector<std::size_t> eliminated;
  std::string message;

  // dual_value, corrected for any negative eigenvalue of the recomputed dual
  // slack. Valid because every feasible rho has unit trace.
  double certified_upper_bound() const;
};

// H = X + iY  ->  [[X, -Y], [Y, X]]
RealMatrix embed_real(const HermitianOperator& h);
// Inverse of embed_real on its range; general symmetric input is projected
// onto the range first by averaging the two copies of X and Y.
HermitianOperator extract_hermitian(const RealMatrix& w);

SdpSolution solve_max(const SdpProblem& problem, const SolverOptions& options = {});

struct CertificationReport {
  double max_equality_residual = 0.0;
  double min_rho_eigenvalue = 0.0;
  double min_dual_slack_eigenvalue = 0.0;
  double recomputed_dual_value = 0.0;
  double recomputed_primal_value = 0.0;
  double gap = 0.0;
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
};

class CertificationError : public Error {
 public:
  explicit CertificationError(CertificationReport report);
  const CertificationReport& report() const { return report_; }

 private:
  CertificationReport report_;
};

class SolverError : public Error {
 public:
  SolverError(SolveStatus status, const std::string& what);
  SolveStatus status() const { return status_; }

 private:
  SolveStatus status_;
};

// Recomputes every check from the problem data alone. Throws
// CertificationError naming the failed checks.
CertificationReport certify(const SdpSolution& solution, const SdpProblem& problem,
                            const SolverOptions& options = {});

}  // namespace qkdbound::sdp
