#include "qkdbound/operators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "qkdbound/errors.hpp"

namespace qkdbound {

namespace {

Complex root_of_unity(int d, long long power) {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(power % d) / d;
  return {std::cos(angle), std::sin(angle)};
}

void require_index(int d, int n) {
  if (n < 0 || n >= d) {
    std::ostringstream os;
    os << "state index " << n << " out of range for d = " << d;
    throw InvalidArgument(os.str());
  }
}

std::string pair_label(const char* block, int i, int j) {
  std::ostringstream os;
  os << block << "[" << i << "," << j << "]";
  return os.str();
}

}  // namespace

void require_dimension(int d) {
  if (d < 2) {
    std::ostringstream os;
    os << "invalid dimension d = " << d << " (need d >= 2)";
    throw InvalidArgument(os.str());
  }
}

ComplexMatrix fourier_matrix(int d) {
  require_dimension(d);
  const double norm = 1.0 / std::sqrt(static_cast<double>(d));
  ComplexMatrix h(d, d);
  for (int m = 0; m < d; ++m) {
    for (int n = 0; n < d; ++n) {
      h(m, n) = norm * root_of_unity(d, static_cast<long long>(n) * m);
    }
  }
  return h;
}

ComplexVector time_state(int d, int n) {
  require_dimension(d);
  require_index(d, n);
  return ComplexVector::Unit(d, n);
}

ComplexVector phase_state(int d, int n) {
  require_dimension(d);
  require_index(d, n);
  return fourier_matrix(d).col(n);
}

ComplexVector bob_phase_state(int d, int n) {
  return phase_state(d, n).conjugate();
}

ComplexVector maximally_entangled_state(int d) {
  require_dimension(d);
  ComplexVector phi = ComplexVector::Zero(d * d);
  for (int k = 0; k < d; ++k) {
    phi(k * d + k) = 1.0 / std::sqrt(static_cast<double>(d));
  }
  return phi;
}

HermitianOperator error_operator_t(int d) {
  require_dimension(d);
  ComplexMatrix e = ComplexMatrix::Identity(d * d, d * d);
  for (int l = 0; l < d; ++l) {
    e(l * d + l, l * d + l) = 0.0;
  }
  return HermitianOperator(e);
}

HermitianOperator error_operator_f(int d) {
  // Conjugation of E_T with the negative-exponent transform H = F^dagger:
  // E_F = (H^dagger (x) H) E_T (H (x) H^dagger).
  const ComplexMatrix h = fourier_matrix(d).adjoint();
  const ComplexMatrix left = kron(h.adjoint(), h);
  const ComplexMatrix right = kron(h, h.adjoint());
  return HermitianOperator(left * error_operator_t(d).matrix() * right);
}

std::vector<ComplexMatrix> weyl_operators(int d) {
  require_dimension(d);
  std::vector<ComplexMatrix> ops;
  ops.reserve(static_cast<std::size_t>(d) * d);
  for (int n = 0; n < d; ++n) {
    for (int m = 0; m < d; ++m) {
      ComplexMatrix u = ComplexMatrix::Zero(d, d);
      for (int k = 0; k < d; ++k) {
        u(k, (k + m) % d) = root_of_unity(d, static_cast<long long>(k) * n);
      }
      ops.push_back(std::move(u));
    }
  }
  return ops;
}

HermitianOperator basis_projector(int d, Basis basis, int n) {
  switch (basis) {
    case Basis::T:
      return HermitianOperator::projector(time_state(d, n));
    case Basis::F:
      return HermitianOperator::projector(phase_state(d, n));
    case Basis::FConj:
      return HermitianOperator::projector(bob_phase_state(d, n));
  }
  throw InvalidArgument("unknown basis");
}

Subset full_subset(int d) {
  require_dimension(d);
  Subset s(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) s[static_cast<std::size_t>(i)] = i;
  return s;
}

Subset normalize_subset(int d, Subset subset) {
  require_dimension(d);
  if (subset.empty()) {
    throw InvalidArgument("monitoring subset must not be empty");
  }
  for (int i : subset) require_index(d, i);
  std::sort(subset.begin(), subset.end());
  subset.erase(std::unique(subset.begin(), subset.end()), subset.end());
  return subset;
}

bool covers_symmetric_case(int d, const Subset& subset) {
  return static_cast<int>(subset.size()) >= d - 1;
}

void ProtocolConfig::validate() const {
  require_dimension(d);
  const Subset s = normalize_subset(d, monitoring_subset);
  if (s.size() != monitoring_subset.size()) {
    throw InvalidArgument("monitoring subset contains duplicate indices");
  }
  const double max_rate = static_cast<double>(d - 1) / d;
  auto check_rate = [&](double q, const char* name) {
    if (!(q >= 0.0 && q <= max_rate + 1e-15)) {
      std::ostringstream os;
      os << name << " = " << q << " outside [0, " << max_rate << "]";
      throw InvalidArgument(os.str());
    }
  };
  check_rate(qber_t, "qber_t");
  check_rate(effective_qber_f(), "qber_f");
}

ConstraintSet build_constraints(const ProtocolConfig& config) {
  config.validate();
  const int d = config.d;
  const Subset subset = normalize_subset(d, config.monitoring_subset);
  const double e_t = config.qber_t;
  const double e_f = config.effective_qber_f();
  const double cross = 1.0 / (static_cast<double>(d) * d);

  std::vector<HermitianOperator> pt, pf, pfc;
  for (int n = 0; n < d; ++n) {
    pt.push_back(basis_projector(d, Basis::T, n));
    pf.push_back(basis_projector(d, Basis::F, n));
    pfc.push_back(basis_projector(d, Basis::FConj, n));
  }
  auto joint = [](const HermitianOperator& a, const HermitianOperator& b) {
    return HermitianOperator(kron(a.matrix(), b.matrix()));
  };

  ConstraintSet set;
  set.dim = static_cast<Eigen::Index>(d) * d;
  set.objective = error_operator_f(d);
  auto& out = set.constraints;
  out.push_back({HermitianOperator::identity(set.dim), 1.0, "trace"});
  out.push_back({error_operator_t(d), e_t, "E_T"});

  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      out.push_back({joint(pt[i], pfc[j]), cross, pair_label("TF", i, j)});
    }
  }
  for (int i : subset) {
    for (int j = 0; j < d; ++j) {
      out.push_back({joint(pf[i], pt[j]), cross, pair_label("FT", i, j)});
    }
  }
  for (int i : subset) {
    for (int j = 0; j < d; ++j) {
      const double p = (i == j) ? (1.0 - e_f) / d : e_f / (static_cast<double>(d) * (d - 1));
      out.push_back({joint(pf[i], pfc[j]), p, pair_label("FF", i, j)});
    }
  }

  if (config.options.include_tt_block) {
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        const double p = (i == j) ? (1.0 - e_t) / d : e_t / (static_cast<double>(d) * (d - 1));
        out.push_back({joint(pt[i], pt[j]), p, pair_label("TT", i, j)});
      }
    }
  }

  if (config.options.include_alice_marginal) {
    // Hermitian basis of d x d matrices; Tr((B (x) I) rho) = Tr(B) / d.
    const ComplexMatrix id = ComplexMatrix::Identity(d, d);
    for (int k = 0; k < d; ++k) {
      for (int l = k; l < d; ++l) {
        if (k == l) {
          ComplexMatrix b = ComplexMatrix::Zero(d, d);
          b(k, k) = 1.0;
          out.push_back({HermitianOperator(kron(b, id)), 1.0 / d, pair_label("rhoA", k, l)});
          continue;
        }
        ComplexMatrix re = ComplexMatrix::Zero(d, d);
        re(k, l) = 1.0;
        re(l, k) = 1.0;
        ComplexMatrix im = ComplexMatrix::Zero(d, d);
        im(k, l) = Complex(0.0, 1.0);
        im(l, k) = Complex(0.0, -1.0);
        out.push_back({HermitianOperator(kron(re, id)), 0.0, pair_label("rhoA.re", k, l)});
        out.push_back({HermitianOperator(kron(im, id)), 0.0, pair_label("rhoA.im", k, l)});
      }
    }
  }
  return set;
}

JointStatistics ideal_statistics(int d) {
  require_dimension(d);
  const ComplexVector phi = maximally_entangled_state(d);
  const ComplexMatrix rho = phi * phi.adjoint();
  auto table = [&](Basis a, Basis b) {
    RealMatrix p(d, d);
    for (int n = 0; n < d; ++n) {
      for (int m = 0; m < d; ++m) {
        const ComplexMatrix op =
            kron(basis_projector(d, a, n).matrix(), basis_projector(d, b, m).matrix());
        p(n, m) = trace_product(op, rho);
      }
    }
    return p;
  };
  return {table(Basis::T, Basis::T), table(Basis::T, Basis::FConj), table(Basis::F, Basis::T),
          table(Basis::F, Basis::FConj)};
}

}  // namespace qkdbound
