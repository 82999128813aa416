#include "qkdbound/linalg.hpp"

#include <sstream>

#include <unsupported/Eigen/KroneckerProduct>

#include "qkdbound/errors.hpp"

namespace qkdbound {

double hermiticity_defect(const ComplexMatrix& m) {
  if (m.rows() != m.cols()) {
    return std::numeric_limits<double>::infinity();
  }
  return (m - m.adjoint()).cwiseAbs().maxCoeff();
}

HermitianOperator::HermitianOperator(const ComplexMatrix& m) {
  if (m.rows() == 0 || m.rows() != m.cols()) {
    throw InvalidArgument("hermitian operator must be a non-empty square matrix");
  }
  const double defect = hermiticity_defect(m);
  if (!(defect <= kHermiticityTolerance)) {
    std::ostringstream os;
    os << "matrix is not Hermitian (max |H - H^dagger| = " << defect << ")";
    throw InvalidArgument(os.str());
  }
  m_ = 0.5 * (m + m.adjoint());
}

HermitianOperator HermitianOperator::identity(Eigen::Index dim) {
  return HermitianOperator(ComplexMatrix::Identity(dim, dim));
}

HermitianOperator HermitianOperator::projector(const ComplexVector& v) {
  return HermitianOperator(v * v.adjoint());
}

double HermitianOperator::expectation(const ComplexMatrix& rho) const {
  return trace_product(m_, rho);
}

RealVector HermitianOperator::eigenvalues() const {
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(m_, Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

HermitianOperator HermitianOperator::operator*(double s) const {
  return HermitianOperator(m_ * s);
}

HermitianOperator HermitianOperator::operator+(const HermitianOperator& o) const {
  return HermitianOperator(m_ + o.m_);
}

HermitianOperator HermitianOperator::operator-(const HermitianOperator& o) const {
  return HermitianOperator(m_ - o.m_);
}

ComplexMatrix kron(const ComplexMatrix& a, const ComplexMatrix& b) {
  return Eigen::kroneckerProduct(a, b).eval();
}

double trace_product(const ComplexMatrix& a, const ComplexMatrix& b) {
  // Tr(ab) = sum_ij a_ij b_ji
  return a.cwiseProduct(b.transpose()).sum().real();
}

}  // namespace qkdbound
