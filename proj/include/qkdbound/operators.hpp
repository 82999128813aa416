#pragma once

// Basis states, error operators and the constraint system for two-basis
// d-dimensional QKD where Alice sends every T-basis state but only a subset
// of the F (Fourier) basis states.
//
// Conventions:
//   |f_n> = d^{-1/2} sum_m exp(+2 pi i n m / d) |t_m>
//   Bob measures in {T, F*}; F* holds the complex conjugates of |f_n>, so the
//   maximally entangled state gives perfectly correlated outcomes in both
//   bases.
//   Bipartite index ordering is |a>_A (x) |b>_B -> a * d + b.

#include <optional>
#include <vector>

#include "qkdbound/linalg.hpp"

namespace qkdbound {

void require_dimension(int d);

ComplexMatrix fourier_matrix(int d);
ComplexVector time_state(int d, int n);
ComplexVector phase_state(int d, int n);
ComplexVector bob_phase_state(int d, int n);

// (1/sqrt d) sum_k |k>|k>
ComplexVector maximally_entangled_state(int d);

HermitianOperator error_operator_t(int d);
HermitianOperator error_operator_f(int d);

// U_nm = sum_k exp(2 pi i k n / d) |k><k+m|, stored at index n * d + m.
std::vector<ComplexMatrix> weyl_operators(int d);

enum class Basis { T, F, FConj };

HermitianOperator basis_projector(int d, Basis basis, int n);

using Subset = std::vector<int>;

Subset full_subset(int d);
// Sorted, de-duplicated copy; throws on empty input or indices outside [0, d).
Subset normalize_subset(int d, Subset subset);
// True when the subset has at least d - 1 states, the case where the
// unmonitored phase statistics are fully reconstructable.
bool covers_symmetric_case(int d, const Subset& subset);

struct ConstraintOptions {
  // Fine-grained T-T joint statistics instead of only Tr(E_T rho) = e_T.
  bool include_tt_block = false;
  // Alice's reduced state fixed to I/d.
  bool include_alice_marginal = false;
};

struct ProtocolConfig {
  int d = 2;
  Subset monitoring_subset;
  double qber_t = 0.0;
  std::optional<double> qber_f;  // defaults to qber_t
  ConstraintOptions options;

  double effective_qber_f() const { return qber_f.value_or(qber_t); }
  void validate() const;
};

struct ConstraintSet {
  Eigen::Index dim = 0;
  HermitianOperator objective;
  std::vector<EqualityConstraint> constraints;
};

// Constraint order: trace, E_T, T->F block (all i, j), F->T block (i in S),
// F->F block (i in S), then the optional blocks.
ConstraintSet build_constraints(const ProtocolConfig& config);

// Joint outcome probabilities p^{a,b}_{n,m} of the maximally entangled state,
// rows indexed by Alice's outcome, columns by Bob's. Bob's phase outcomes
// use the F* basis.
struct JointStatistics {
  RealMatrix tt;
  RealMatrix tf;
  RealMatrix ft;
  RealMatrix ff;
};

JointStatistics ideal_statistics(int d);

}  // namespace qkdbound
