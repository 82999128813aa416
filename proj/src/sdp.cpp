#include "qkdbound/sdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace qkdbound::sdp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kStepFraction = 0.98;
constexpr double kSigmaMin = 0.01;
constexpr double kRankThreshold = 1e-10;
constexpr double kDivergence = 1e10;
constexpr double kInf = std::numeric_limits<double>::infinity();
// Iterations without improving the best iterate before it is accepted.
constexpr int kStallIterations = 10;
constexpr double kShortStep = 0.2;
// Primal drift of a search direction, relative to feas_tolerance, that
// triggers projection back onto A(dX) = rp.
constexpr double kDriftFraction = 0.01;

// Isometric real coordinates of a Hermitian matrix: diagonal entries, then
// sqrt(2) Re and sqrt(2) Im of the strict upper triangle.
RealVector hermitian_coordinates(const ComplexMatrix& h) {
  const Eigen::Index n = h.rows();
  RealVector v(n * n);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) v(k++) = h(i, i).real();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      v(k++) = std::sqrt(2.0) * h(i, j).real();
      v(k++) = std::sqrt(2.0) * h(i, j).imag();
    }
  }
  return v;
}

double min_eigenvalue(const ComplexMatrix& h) {
  Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(h, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

void symmetrize(RealMatrix& m) { m = (0.5 * (m + m.transpose())).eval(); }

// Largest alpha with x + alpha * dx still positive semidefinite (infinity if
// dx keeps x in the cone for every alpha >= 0). Returns 0 if x is not PD.
double max_step(const RealMatrix& x, const RealMatrix& dx) {
  Eigen::LLT<RealMatrix> llt(x);
  if (llt.info() != Eigen::Success) return 0.0;
  RealMatrix s = llt.matrixL().solve(dx);
  s = llt.matrixL().solve(s.transpose().eval());
  symmetrize(s);
  Eigen::SelfAdjointEigenSolver<RealMatrix> es(s, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues()(0);
  return lmin >= 0.0 ? std::numeric_limits<double>::infinity() : -1.0 / lmin;
}

// Constraint operators of the real problem, each stored as sum_a lam_a v_a v_a^T.
struct FactoredConstraints {
  RealMatrix vectors;             // N x R
  RealVector weights;             // R
  std::vector<Eigen::Index> offset;  // m + 1 entries
  Eigen::Index count() const { return static_cast<Eigen::Index>(offset.size()) - 1; }
};

FactoredConstraints factor_constraints(const std::vector<const HermitianOperator*>& ops) {
  const Eigen::Index n = ops.front()->dim();
  std::vector<RealVector> cols;
  std::vector<double> w;
  FactoredConstraints f;
  f.offset.push_back(0);
  for (const HermitianOperator* op : ops) {
    Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(op->matrix());
    const RealVector& lam = es.eigenvalues();
    const double scale = std::max(lam.cwiseAbs().maxCoeff(), 1e-300);
    for (Eigen::Index k = 0; k < n; ++k) {
      if (std::abs(lam(k)) <= 1e-13 * scale) continue;
      const ComplexVector v = es.eigenvectors().col(k);
      // Each complex eigenpair gives two real eigenvectors of the embedding;
      // the factor 1/2 makes <embed(A)/2, embed(rho)> = Tr(A rho).
      RealVector u1(2 * n), u2(2 * n);
      u1 << v.real(), v.imag();
      u2 << -v.imag(), v.real();
      cols.push_back(std::move(u1));
      cols.push_back(std::move(u2));
      w.push_back(0.5 * lam(k));
      w.push_back(0.5 * lam(k));
    }
    f.offset.push_back(static_cast<Eigen::Index>(cols.size()));
  }
  f.vectors.resize(2 * n, static_cast<Eigen::Index>(cols.size()));
  f.weights.resize(static_cast<Eigen::Index>(w.size()));
  for (std::size_t a = 0; a < cols.size(); ++a) {
    f.vectors.col(static_cast<Eigen::Index>(a)) = cols[a];
    f.weights(static_cast<Eigen::Index>(a)) = w[a];
  }
  return f;
}

class RealOperators {
 public:
  explicit RealOperators(FactoredConstraints f) : f_(std::move(f)) {}

  Eigen::Index m() const { return f_.count(); }

  // A(W)_i = <A_i, W>
  RealVector apply(const RealMatrix& w) const {
    const RealVector diag = f_.vectors.cwiseProduct(w * f_.vectors).colwise().sum().transpose();
    RealVector out(m());
    for (Eigen::Index i = 0; i < m(); ++i) {
      const Eigen::Index a = f_.offset[i];
      const Eigen::Index r = f_.offset[i + 1] - a;
      out(i) = f_.weights.segment(a, r).dot(diag.segment(a, r));
    }
    return out;
  }

  // A^T(y) = sum_i y_i A_i
  RealMatrix adjoint(const RealVector& y) const {
    RealVector scaled = f_.weights;
    for (Eigen::Index i = 0; i < m(); ++i) {
      const Eigen::Index a = f_.offset[i];
      scaled.segment(a, f_.offset[i + 1] - a) *= y(i);
    }
    RealMatrix out = f_.vectors * scaled.asDiagonal() * f_.vectors.transpose();
    symmetrize(out);
    return out;
  }

  // Schur complement M_ij = Tr(A_i X A_j Z^{-1}).
  RealMatrix schur(const RealMatrix& x, const RealMatrix& zinv) const {
    const RealMatrix p = f_.vectors.transpose() * (x * f_.vectors);
    const RealMatrix q = f_.vectors.transpose() * (zinv * f_.vectors);
    const RealMatrix h = (f_.weights * f_.weights.transpose()).cwiseProduct(p).cwiseProduct(q);
    RealMatrix out(m(), m());
    for (Eigen::Index i = 0; i < m(); ++i) {
      const Eigen::Index ai = f_.offset[i], ri = f_.offset[i + 1] - ai;
      for (Eigen::Index j = i; j < m(); ++j) {
        const Eigen::Index aj = f_.offset[j], rj = f_.offset[j + 1] - aj;
        out(i, j) = out(j, i) = h.block(ai, aj, ri, rj).sum();
      }
    }
    return out;
  }

 private:
  FactoredConstraints f_;
};

struct Reduction {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> eliminated;
  bool consistent = true;
  std::string message;
};

Reduction eliminate_redundant(const SdpProblem& problem, double tolerance) {
  const auto& cons = problem.constraints;
  const Eigen::Index m = static_cast<Eigen::Index>(cons.size());
  const Eigen::Index n = problem.dim();
  RealMatrix v(n * n, m);
  RealVector b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    v.col(i) = hermitian_coordinates(cons[static_cast<std::size_t>(i)].op.matrix());
    b(i) = cons[static_cast<std::size_t>(i)].value;
  }
  Eigen::ColPivHouseholderQR<RealMatrix> qr(v);
  qr.setThreshold(kRankThreshold);
  const Eigen::Index rank = qr.rank();

  Reduction red;
  std::vector<bool> keep(static_cast<std::size_t>(m), false);
  for (Eigen::Index k = 0; k < rank; ++k) {
    keep[static_cast<std::size_t>(qr.colsPermutation().indices()(k))] = true;
  }
  for (std::size_t i = 0; i < keep.size(); ++i) {
    (keep[i] ? red.kept : red.eliminated).push_back(i);
  }
  if (red.eliminated.empty()) return red;

  RealMatrix vk(n * n, static_cast<Eigen::Index>(red.kept.size()));
  RealVector bk(static_cast<Eigen::Index>(red.kept.size()));
  for (std::size_t k = 0; k < red.kept.size(); ++k) {
    vk.col(static_cast<Eigen::Index>(k)) = v.col(static_cast<Eigen::Index>(red.kept[k]));
    bk(static_cast<Eigen::Index>(k)) = b(static_cast<Eigen::Index>(red.kept[k]));
  }
  Eigen::ColPivHouseholderQR<RealMatrix> kept_qr(vk);
  for (std::size_t j : red.eliminated) {
    const RealVector target = v.col(static_cast<Eigen::Index>(j));
    const RealVector coeff = kept_qr.solve(target);
    const double fit = (vk * coeff - target).norm();
    const double implied = coeff.dot(bk);
    const double mismatch = std::abs(implied - b(static_cast<Eigen::Index>(j)));
    if (fit > 1e-8 * (1.0 + target.norm()) ||
        mismatch > tolerance * (1.0 + coeff.lpNorm<1>())) {
      std::ostringstream os;
      os << "constraint '" << cons[j].label << "' is implied by the others with value "
         << implied << " but requires " << b(static_cast<Eigen::Index>(j));
      red.consistent = false;
      red.message = os.str();
      return red;
    }
  }
  return red;
}

SdpSolution failed(SolveStatus status, std::string message, int iterations,
                   std::vector<std::size_t> eliminated) {
  SdpSolution s;
  s.status = status;
  s.primal_value = s.dual_value = s.gap = kNaN;
  s.max_equality_residual = s.min_rho_eigenvalue = s.min_dual_slack_eigenvalue = kNaN;
  s.iterations = iterations;
  s.eliminated = std::move(eliminated);
  s.message = std::move(message);
  return s;
}

bool solve_spd(const RealMatrix& m, const RealVector& rhs, RealVector& out) {
  // Near a rank-deficient optimum M loses definiteness in floating point; a
  // small diagonal shift still gives a usable direction.
  const double diag = std::max(m.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  for (double shift : {0.0, 1e-14, 1e-12, 1e-10}) {
    RealMatrix shifted = m;
    shifted.diagonal().array() += shift * diag;
    Eigen::LLT<RealMatrix> llt(shifted);
    if (llt.info() != Eigen::Success) continue;
    out = llt.solve(rhs);
    if (out.allFinite()) return true;
  }
  return false;
}

}  // namespace

const char* to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::MaxIterations: return "max_iterations";
    case SolveStatus::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

void SdpProblem::validate() const {
  const Eigen::Index n = dim();
  if (n == 0) throw InvalidArgument("SDP objective is empty");
  if (constraints.empty()) throw InvalidArgument("SDP has no constraints");
  bool has_trace = false;
  const ComplexMatrix id = ComplexMatrix::Identity(n, n);
  for (const auto& c : constraints) {
    if (c.op.dim() != n) {
      throw InvalidArgument("constraint '" + c.label + "' has the wrong dimension");
    }
    if (!std::isfinite(c.value)) {
      throw InvalidArgument("constraint '" + c.label + "' has a non-finite value");
    }
    if (c.value == 1.0 && (c.op.matrix() - id).cwiseAbs().maxCoeff() == 0.0) has_trace = true;
  }
  if (!has_trace) throw InvalidArgument("SDP must include the unit-trace constraint");
}

double SdpSolution::certified_upper_bound() const {
  return dual_value + std::max(0.0, -min_dual_slack_eigenvalue);
}

RealMatrix embed_real(const HermitianOperator& h) {
  const Eigen::Index n = h.dim();
  const RealMatrix x = h.matrix().real();
  const RealMatrix y = h.matrix().imag();
  RealMatrix out(2 * n, 2 * n);
  out << x, -y, y, x;
  return out;
}

HermitianOperator extract_hermitian(const RealMatrix& w) {
  if (w.rows() != w.cols() || w.rows() % 2 != 0) {
    throw InvalidArgument("real embedding must be square with even size");
  }
  const Eigen::Index n = w.rows() / 2;
  const RealMatrix x = 0.5 * (w.topLeftCorner(n, n) + w.bottomRightCorner(n, n));
  const RealMatrix y = 0.5 * (w.bottomLeftCorner(n, n) - w.topRightCorner(n, n));
  ComplexMatrix h(n, n);
  h.real() = 0.5 * (x + x.transpose());
  h.imag() = 0.5 * (y - y.transpose());
  return HermitianOperator(h);
}

SdpSolution solve_max(const SdpProblem& problem, const SolverOptions& options) {
  problem.validate();
  if (!(options.gap_tolerance > 0.0) || !(options.feas_tolerance > 0.0) ||
      options.max_iterations <= 0) {
    throw InvalidArgument("solver tolerances and iteration limit must be positive");
  }

  Reduction red = eliminate_redundant(problem, options.redundancy_tolerance);
  if (!red.consistent) {
    return failed(SolveStatus::Infeasible, red.message, 0, red.eliminated);
  }

  std::vector<const HermitianOperator*> ops;
  RealVector b(static_cast<Eigen::Index>(red.kept.size()));
  for (std::size_t k = 0; k < red.kept.size(); ++k) {
    ops.push_back(&problem.constraints[red.kept[k]].op);
    b(static_cast<Eigen::Index>(k)) = problem.constraints[red.kept[k]].value;
  }
  const RealOperators a(factor_constraints(ops));
  const Eigen::Index n = problem.dim();
  const Eigen::Index big_n = 2 * n;
  const RealMatrix cmin = -0.5 * embed_real(problem.objective);  // minimise <cmin, X>

  RealMatrix x = RealMatrix::Identity(big_n, big_n) / static_cast<double>(n);
  RealMatrix z = RealMatrix::Identity(big_n, big_n) * std::max(1.0, cmin.norm());
  RealVector y = RealVector::Zero(a.m());
  const double scale = 1.0 + b.lpNorm<Eigen::Infinity>() + cmin.cwiseAbs().maxCoeff();

  // Gram matrix of the kept constraints, well conditioned after the
  // redundancy elimination. Used to keep A(dX) = rp exact when the Schur
  // system is not.
  const RealMatrix id = RealMatrix::Identity(big_n, big_n);
  const Eigen::LLT<RealMatrix> gram(a.schur(id, id));

  // Best iterate by the unhalved stopping criteria, returned when the method
  // stalls close to the boundary of the cone.
  RealMatrix best_x = x;
  RealVector best_y = y;
  double best_score = kInf;
  int best_it = 0;

  bool short_step = false;
  int it = 0;
  for (;; ++it) {
    const RealVector rp = b - a.apply(x);
    RealMatrix rd = cmin - z - a.adjoint(y);
    symmetrize(rd);
    const double primal = -(cmin.cwiseProduct(x)).sum();
    const double dual = -b.dot(y);
    const double gap = dual - primal;
    const double pinf = rp.lpNorm<Eigen::Infinity>();
    const double dinf = rd.cwiseAbs().maxCoeff();

    if (pinf <= 0.5 * options.feas_tolerance && dinf <= 0.5 * options.feas_tolerance &&
        std::abs(gap) <= 0.5 * options.gap_tolerance) {
      break;
    }
    const double score = std::max({pinf / options.feas_tolerance, dinf / options.feas_tolerance,
                                   std::abs(gap) / options.gap_tolerance});
    if (score < best_score) {
      best_score = score;
      best_x = x;
      best_y = y;
      best_it = it;
    }
    const bool usable = best_score <= 1.0;
    if (usable && it - best_it >= kStallIterations) {
      x = best_x;
      y = best_y;
      break;
    }
    if (y.lpNorm<Eigen::Infinity>() > kDivergence * scale && pinf > options.feas_tolerance) {
      return failed(SolveStatus::Infeasible,
                    "dual iterates diverge: no positive semidefinite point satisfies the "
                    "equalities",
                    it, red.eliminated);
    }
    if (x.trace() > kDivergence * scale) {
      return failed(SolveStatus::NumericalFailure, "primal iterates diverge", it,
                    red.eliminated);
    }
    if (it >= options.max_iterations && usable) {
      x = best_x;
      y = best_y;
      break;
    }
    if (it >= options.max_iterations) {
      std::ostringstream os;
      os << "iteration limit reached (primal infeasibility " << pinf << ", dual infeasibility "
         << dinf << ", gap " << gap << ")";
      return failed(SolveStatus::MaxIterations, os.str(), it, red.eliminated);
    }

    Eigen::LLT<RealMatrix> zllt(z);
    if (zllt.info() != Eigen::Success && usable) {
      x = best_x;
      y = best_y;
      break;
    }
    if (zllt.info() != Eigen::Success) {
      return failed(SolveStatus::NumericalFailure, "dual slack lost definiteness", it,
                    red.eliminated);
    }
    RealMatrix zinv = zllt.solve(RealMatrix::Identity(big_n, big_n));
    symmetrize(zinv);
    const RealMatrix m = a.schur(x, zinv);
    const double mu = x.cwiseProduct(z).sum() / static_cast<double>(big_n);
    const RealVector rd_term = a.apply(x * rd * zinv);

    // Shared solve for both predictor and corrector: only the
    // complementarity target g changes.
    RealMatrix dx, dz;
    RealVector dy;
    auto direction = [&](const RealMatrix& g) {
      const RealVector rhs = rp - a.apply(g) + rd_term;
      if (!solve_spd(m, rhs, dy)) return false;
      dz = rd - a.adjoint(dy);
      dx = g - x * dz * zinv;
      symmetrize(dx);
      const RealVector drift = rp - a.apply(dx);
      if (drift.lpNorm<Eigen::Infinity>() > kDriftFraction * options.feas_tolerance) {
        dx += a.adjoint(gram.solve(drift));
      }
      return dx.allFinite() && dz.allFinite();
    };

    if (!direction(-x)) {
      return failed(SolveStatus::NumericalFailure, "Schur complement is singular", it,
                    red.eliminated);
    }
    const double ap_aff = std::min(1.0, max_step(x, dx));
    const double ad_aff = std::min(1.0, max_step(z, dz));
    const double mu_aff =
        (x + ap_aff * dx).cwiseProduct(z + ad_aff * dz).sum() / static_cast<double>(big_n);
    const double sigma = std::clamp(std::pow(mu_aff / mu, 3.0), kSigmaMin, 1.0);

    // After a short step the second-order term tends to push the iterate
    // further off the central path; use a plain centred direction instead.
    const RealMatrix second_order =
        short_step ? RealMatrix::Zero(big_n, big_n) : RealMatrix(dx * dz * zinv);
    if (!direction(sigma * mu * zinv - x - second_order)) {
      return failed(SolveStatus::NumericalFailure, "Schur complement is singular", it,
                    red.eliminated);
    }
    const double ap = std::min(1.0, kStepFraction * max_step(x, dx));
    const double ad = std::min(1.0, kStepFraction * max_step(z, dz));
    if (ap <= 1e-12 && ad <= 1e-12 && usable) {
      x = best_x;
      y = best_y;
      break;
    }
    if (ap <= 1e-12 && ad <= 1e-12) {
      return failed(SolveStatus::NumericalFailure, "step length collapsed", it,
                    red.eliminated);
    }
    short_step = std::min(ap, ad) < kShortStep;
    x += ap * dx;
    y += ad * dy;
    z += ad * dz;
    symmetrize(x);
    symmetrize(z);
  }

  SdpSolution sol;
  sol.status = SolveStatus::Optimal;
  sol.iterations = it;
  sol.eliminated = red.eliminated;
  sol.rho = extract_hermitian(x);
  sol.multipliers = RealVector::Zero(static_cast<Eigen::Index>(problem.constraints.size()));
  for (std::size_t k = 0; k < red.kept.size(); ++k) {
    sol.multipliers(static_cast<Eigen::Index>(red.kept[k])) = -y(static_cast<Eigen::Index>(k));
  }

  // Report everything in the complex formulation over the full constraint list.
  const ComplexMatrix& rho = sol.rho.matrix();
  ComplexMatrix slack = -problem.objective.matrix();
  double dual = 0.0;
  double residual = 0.0;
  for (std::size_t i = 0; i < problem.constraints.size(); ++i) {
    const auto& c = problem.constraints[i];
    const double yi = sol.multipliers(static_cast<Eigen::Index>(i));
    slack += yi * c.op.matrix();
    dual += yi * c.value;
    residual = std::max(residual, std::abs(c.op.expectation(rho) - c.value));
  }
  sol.primal_value = problem.objective.expectation(rho);
  sol.dual_value = dual;
  sol.gap = dual - sol.primal_value;
  sol.max_equality_residual = residual;
  sol.min_rho_eigenvalue = min_eigenvalue(rho);
  sol.min_dual_slack_eigenvalue = min_eigenvalue(0.5 * (slack + slack.adjoint()));
  sol.message = "converged";
  return sol;
}

CertificationError::CertificationError(CertificationReport report)
    : Error([&] {
        std::string msg = "certification failed:";
        for (const auto& f : report.failures) msg += " [" + f + "]";
        return msg;
      }()),
      report_(std::move(report)) {}

SolverError::SolverError(SolveStatus status, const std::string& what)
    : Error(std::string("SDP solve ") + to_string(status) + ": " + what), status_(status) {}

CertificationReport certify(const SdpSolution& solution, const SdpProblem& problem,
                            const SolverOptions& options) {
  CertificationReport r;
  if (solution.status != SolveStatus::Optimal) {
    r.failures.push_back(std::string("status is ") + to_string(solution.status));
    throw CertificationError(std::move(r));
  }
  const auto m = static_cast<Eigen::Index>(problem.constraints.size());
  if (solution.multipliers.size() != m || solution.rho.dim() != problem.dim()) {
    r.failures.push_back("solution does not match the problem shape");
    throw CertificationError(std::move(r));
  }
  const ComplexMatrix& rho = solution.rho.matrix();
  ComplexMatrix slack = -problem.objective.matrix();
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& c = problem.constraints[static_cast<std::size_t>(i)];
    r.max_equality_residual =
        std::max(r.max_equality_residual, std::abs(c.op.expectation(rho) - c.value));
    slack += solution.multipliers(i) * c.op.matrix();
    r.recomputed_dual_value += solution.multipliers(i) * c.value;
  }
  r.recomputed_primal_value = problem.objective.expectation(rho);
  r.min_rho_eigenvalue = min_eigenvalue(rho);
  r.min_dual_slack_eigenvalue = min_eigenvalue(0.5 * (slack + slack.adjoint()));
  r.gap = r.recomputed_dual_value - r.recomputed_primal_value;

  const double ftol = options.feas_tolerance;
  const double gtol = options.gap_tolerance;
  auto fail = [&](const std::string& what, double value) {
    std::ostringstream os;
    os << what << " (" << value << ")";
    r.failures.push_back(os.str());
  };
  if (!(r.max_equality_residual <= ftol)) fail("equality residual", r.max_equality_residual);
  if (!(r.min_rho_eigenvalue >= -ftol)) fail("primal PSD", r.min_rho_eigenvalue);
  if (!(r.min_dual_slack_eigenvalue >= -ftol)) {
    fail("dual feasibility: slack not PSD", r.min_dual_slack_eigenvalue);
  }
  if (!(std::abs(r.recomputed_dual_value - solution.dual_value) <= gtol)) {
    fail("reported dual value mismatch", r.recomputed_dual_value - solution.dual_value);
  }
  if (!(std::abs(r.recomputed_primal_value - solution.primal_value) <= gtol)) {
    fail("reported primal value mismatch", r.recomputed_primal_value - solution.primal_value);
  }
  if (!(r.gap <= gtol)) fail("duality gap", r.gap);
  if (!(r.gap >= -gtol)) fail("weak duality violated", r.gap);
  if (!r.ok()) throw CertificationError(std::move(r));
  return r;
}

}  // namespace qkdbound::sdp
