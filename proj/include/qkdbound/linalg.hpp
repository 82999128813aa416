#pragma once

#include <complex>
#include <string>

#include <Eigen/Dense>

namespace qkdbound {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;
using RealMatrix = Eigen::MatrixXd;
using RealVector = Eigen::VectorXd;

inline constexpr double kHermiticityTolerance = 1e-12;

// Largest entrywise deviation |M - M^dagger|.
double hermiticity_defect(const ComplexMatrix& m);

// Dense complex square matrix that is Hermitian within kHermiticityTolerance.
// The stored matrix is exactly Hermitian: construction averages M and
// M^dagger after the check.
class HermitianOperator {
 public:
  HermitianOperator() = default;
  explicit HermitianOperator(const ComplexMatrix& m);

  static HermitianOperator identity(Eigen::Index dim);
  static HermitianOperator projector(const ComplexVector& v);

  Eigen::Index dim() const { return m_.rows(); }
  const ComplexMatrix& matrix() const { return m_; }

  // Re Tr(H * rho).
  double expectation(const ComplexMatrix& rho) const;
  RealVector eigenvalues() const;
  double trace() const { return m_.trace().real(); }

  HermitianOperator operator*(double s) const;
  HermitianOperator operator+(const HermitianOperator& o) const;
  HermitianOperator operator-(const HermitianOperator& o) const;

 private:
  ComplexMatrix m_;
};

ComplexMatrix kron(const ComplexMatrix& a, const ComplexMatrix& b);

// Re Tr(a * b) for square matrices of equal size.
double trace_product(const ComplexMatrix& a, const ComplexMatrix& b);

// One equality constraint Tr(op * rho) = value.
struct EqualityConstraint {
  HermitianOperator op;
  double value = 0.0;
  std::string label;
};

}  // namespace qkdbound
