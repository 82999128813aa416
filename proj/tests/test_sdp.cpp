#include <cmath>

#include "doctest.h"
#include "generators.hpp"
#include "qkdbound/operators.hpp"
#include "qkdbound/sdp.hpp"
#include "reference_admm.hpp"

using namespace qkdbound;
using namespace qkdbound::sdp;

namespace {

HermitianOperator diag2(double a, double b) {
  ComplexMatrix m = ComplexMatrix::Zero(2, 2);
  m(0, 0) = a;
  m(1, 1) = b;
  return HermitianOperator(m);
}

SdpProblem toy() { return {diag2(1, 0), {{HermitianOperator::identity(2), 1.0, "trace"}}}; }

SdpProblem protocol_problem(int d, const Subset& s, double q) {
  const ConstraintSet cs = build_constraints({d, s, q, std::nullopt, {}});
  return {cs.objective, cs.constraints};
}

// Feasible and bounded by construction: b comes from a full-rank density
// matrix and the trace constraint is present.
SdpProblem random_problem(gen::Rng& rng, Eigen::Index n, int extra) {
  const ComplexMatrix rho0 = rng.density(n);
  SdpProblem p{HermitianOperator(rng.hermitian(n)), {{HermitianOperator::identity(n), 1.0, "trace"}}};
  for (int i = 0; i < extra; ++i) {
    HermitianOperator a(rng.hermitian(n));
    p.constraints.push_back({a, a.expectation(rho0), "random"});
  }
  return p;
}

}  // namespace

TEST_CASE("real embedding") {
  CHECK((embed_real(HermitianOperator::identity(3)) - RealMatrix::Identity(6, 6)).norm() == 0.0);

  ComplexMatrix h(2, 2);
  h << 1, Complex(0, 1), Complex(0, -1), 1;
  const RealMatrix e = embed_real(HermitianOperator(h));
  CHECK((e - e.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<RealMatrix> es(e);
  const RealVector ev = es.eigenvalues();
  CHECK(ev(0) == doctest::Approx(0).scale(1));
  CHECK(ev(1) == doctest::Approx(0).scale(1));
  CHECK(ev(2) == doctest::Approx(2));
  CHECK(ev(3) == doctest::Approx(2));

  gen::Rng rng(7);
  for (int t = 0; t < 5; ++t) {
    const HermitianOperator r(rng.hermitian(5));
    const RealMatrix w = embed_real(r);
    CHECK(w.trace() == doctest::Approx(2 * r.trace()));
    CHECK((extract_hermitian(w).matrix() - r.matrix()).cwiseAbs().maxCoeff() < 1e-15);
    // Each eigenvalue of H appears twice.
    const RealVector hv = r.eigenvalues();
    Eigen::SelfAdjointEigenSolver<RealMatrix> ws(w, Eigen::EigenvaluesOnly);
    for (Eigen::Index k = 0; k < hv.size(); ++k) {
      CHECK(ws.eigenvalues()(2 * k) == doctest::Approx(hv(k)));
      CHECK(ws.eigenvalues()(2 * k + 1) == doctest::Approx(hv(k)));
    }
  }
  CHECK_THROWS_AS(extract_hermitian(RealMatrix::Identity(3, 3)), InvalidArgument);
}

TEST_CASE("toy problem") {
  const SdpProblem p = toy();
  const SdpSolution s = solve_max(p);
  REQUIRE(s.status == SolveStatus::Optimal);
  CHECK(s.primal_value == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(s.dual_value == doctest::Approx(1.0).epsilon(1e-8));
  CHECK((s.rho.matrix() - diag2(1, 0).matrix()).cwiseAbs().maxCoeff() < 1e-7);
  const CertificationReport r = certify(s, p);
  CHECK(r.max_equality_residual <= 1e-9);
  CHECK(r.min_rho_eigenvalue >= -1e-9);
  CHECK(r.ok());
}

TEST_CASE("protocol problem at q = 0.05, full subset") {
  const SdpProblem p = protocol_problem(4, full_subset(4), 0.05);
  const SdpSolution s = solve_max(p);
  REQUIRE(s.status == SolveStatus::Optimal);
  CHECK(std::abs(s.dual_value - 0.05) <= 5e-4);
  CHECK(s.gap <= 1e-8);
  CHECK(s.max_equality_residual <= 1e-8);
  CHECK(s.min_rho_eigenvalue >= -1e-8);
  CHECK(!s.eliminated.empty());  // the F blocks repeat the trace constraint
  for (std::size_t k : s.eliminated) CHECK(s.multipliers(static_cast<Eigen::Index>(k)) == 0.0);
  CHECK_NOTHROW(certify(s, p));
}

TEST_CASE("infeasible problems") {
  SUBCASE("contradictory equalities") {
    SdpProblem p = toy();
    p.constraints.push_back({HermitianOperator::identity(2), 0.5, "half trace"});
    const SdpSolution s = solve_max(p);
    CHECK(s.status == SolveStatus::Infeasible);
    CHECK(std::isnan(s.dual_value));
    CHECK(std::isnan(s.primal_value));
    CHECK_THROWS_AS(certify(s, p), CertificationError);
  }
  SUBCASE("consistent equalities but no PSD solution") {
    SdpProblem p = toy();
    p.constraints.push_back({diag2(1, 0), 2.0, "too large"});
    const SdpSolution s = solve_max(p);
    CHECK(s.status != SolveStatus::Optimal);
    CHECK(std::isnan(s.dual_value));
  }
  SUBCASE("redundant but consistent duplicate") {
    SdpProblem p = toy();
    p.constraints.push_back({HermitianOperator::identity(2) * 2.0, 2.0, "double trace"});
    const SdpSolution s = solve_max(p);
    REQUIRE(s.status == SolveStatus::Optimal);
    CHECK(s.eliminated.size() == 1);
    CHECK(s.dual_value == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("iteration limit is reported without a value") {
  SolverOptions o;
  o.max_iterations = 2;
  const SdpSolution s = solve_max(protocol_problem(4, {0}, 0.05), o);
  CHECK(s.status == SolveStatus::MaxIterations);
  CHECK(std::isnan(s.dual_value));
  CHECK(std::string(to_string(s.status)) == "max_iterations");
}

TEST_CASE("problem validation") {
  SdpProblem no_trace{diag2(1, 0), {{diag2(1, 0), 0.5, "half"}}};
  CHECK_THROWS_AS(solve_max(no_trace), InvalidArgument);
  SdpProblem empty{diag2(1, 0), {}};
  CHECK_THROWS_AS(solve_max(empty), InvalidArgument);
  SdpProblem mismatch = toy();
  mismatch.constraints.push_back({HermitianOperator::identity(3), 1.0, "wrong size"});
  CHECK_THROWS_AS(solve_max(mismatch), InvalidArgument);
  SolverOptions bad;
  bad.gap_tolerance = 0.0;
  CHECK_THROWS_AS(solve_max(toy(), bad), InvalidArgument);
}

TEST_CASE("certification catches injected faults") {
  const SdpProblem p = protocol_problem(2, full_subset(2), 0.05);
  const SdpSolution s = solve_max(p);
  REQUIRE(s.status == SolveStatus::Optimal);
  REQUIRE_NOTHROW(certify(s, p));

  SUBCASE("perturbed density matrix") {
    SdpSolution bad = s;
    ComplexMatrix m = bad.rho.matrix();
    m(0, 1) += 1e-3;
    m(1, 0) += 1e-3;
    bad.rho = HermitianOperator(m);
    try {
      certify(bad, p);
      FAIL("expected certification failure");
    } catch (const CertificationError& e) {
      CHECK(e.report().max_equality_residual > 1e-4);
      bool flagged = false;
      for (const auto& f : e.report().failures) flagged = flagged || f.find("equality residual") == 0;
      CHECK(flagged);
    }
  }
  SUBCASE("perturbed multipliers") {
    SdpSolution bad = s;
    bad.multipliers(0) -= 1e-3;  // shifts the slack by -1e-3 I
    try {
      certify(bad, p);
      FAIL("expected certification failure");
    } catch (const CertificationError& e) {
      CHECK(e.report().min_dual_slack_eigenvalue < -1e-4);
      bool flagged = false;
      for (const auto& f : e.report().failures) flagged = flagged || f.find("dual feasibility") == 0;
      CHECK(flagged);
    }
  }
  SUBCASE("non-optimal status") {
    SdpSolution bad = s;
    bad.status = SolveStatus::NumericalFailure;
    CHECK_THROWS_AS(certify(bad, p), CertificationError);
  }
}

TEST_CASE("property: weak duality and certification on random problems") {
  gen::Rng rng(0xd0a1);
  for (int t = 0; t < 25; ++t) {
    const auto n = static_cast<Eigen::Index>(rng.integer(2, 8));
    const SdpProblem p = random_problem(rng, n, rng.integer(0, static_cast<int>(n * n) / 2));
    const SdpSolution s = solve_max(p);
    REQUIRE_MESSAGE(s.status == SolveStatus::Optimal, s.message);
    CHECK(s.dual_value >= s.primal_value - 1e-8);
    CHECK(s.certified_upper_bound() >= s.dual_value);
    CHECK_NOTHROW(certify(s, p));
  }
}

TEST_CASE("property: scale covariance") {
  gen::Rng rng(0x5ca1e);
  for (int t = 0; t < 8; ++t) {
    const auto n = static_cast<Eigen::Index>(rng.integer(2, 6));
    SdpProblem p = random_problem(rng, n, 3);
    const double c = rng.uniform(0.1, 10.0);
    SdpProblem scaled = p;
    scaled.objective = p.objective * c;
    const SdpSolution a = solve_max(p);
    const SdpSolution b = solve_max(scaled);
    REQUIRE(a.status == SolveStatus::Optimal);
    REQUIRE(b.status == SolveStatus::Optimal);
    CHECK(std::abs(b.primal_value - c * a.primal_value) <= 1e-7 * (1 + c));
    CHECK(std::abs(b.dual_value - c * a.dual_value) <= 1e-7 * (1 + c));
  }
}

TEST_CASE("agreement with the reference ADMM solver") {
  gen::Rng rng(0xad33);
  for (int t = 0; t < 10; ++t) {
    const auto n = static_cast<Eigen::Index>(rng.integer(2, 8));
    const SdpProblem p = random_problem(rng, n, rng.integer(1, static_cast<int>(n)));
    std::vector<ComplexMatrix> a;
    RealVector b(static_cast<Eigen::Index>(p.constraints.size()));
    for (std::size_t i = 0; i < p.constraints.size(); ++i) {
      a.push_back(p.constraints[i].op.matrix());
      b(static_cast<Eigen::Index>(i)) = p.constraints[i].value;
    }
    const reference::AdmmResult ref = reference::admm_max(p.objective.matrix(), a, b);
    REQUIRE_MESSAGE(ref.converged, "reference did not converge, n=" << n);
    const SdpSolution s = solve_max(p);
    REQUIRE(s.status == SolveStatus::Optimal);
    CHECK_MESSAGE(std::abs(s.primal_value - ref.value) <= 1e-6, "n=" << n);
  }
}

TEST_CASE("determinism") {
  const SdpProblem p = protocol_problem(3, {0}, 0.04);
  const SdpSolution a = solve_max(p);
  const SdpSolution b = solve_max(p);
  CHECK(a.status == b.status);
  CHECK(a.dual_value == b.dual_value);
  CHECK(a.primal_value == b.primal_value);
  CHECK(a.iterations == b.iterations);
  CHECK((a.multipliers - b.multipliers).norm() == 0.0);
}
