#pragma once

// Secret key fractions from error rates and phase-error bounds, error
// tolerances, and the three-intensity decoy-state estimators.

#include <array>
#include <functional>
#include <string>

#include "qkdbound/operators.hpp"
#include "qkdbound/phase_bound.hpp"

namespace qkdbound {

// h(x) = -x log2(x / (d-1)) - (1-x) log2(1-x), with x clamped to (d-1)/d.
// Throws InvalidArgument for x outside [0, 1].
double entropy_d(double x, int d);

struct KeyFraction {
  double value = 0.0;  // max(raw, 0)
  double raw = 0.0;
  bool floored = false;
};

// K = log2 d - h(e_F^U) - h(e_T)
KeyFraction key_fraction_single_photon(int d, double e_t, double e_f_upper);

// q -> e_F^U(q)
using BoundFunction = std::function<double(double)>;

struct ToleranceResult {
  double tolerance = 0.0;  // root rounded to 3 decimals
  double root = 0.0;       // unrounded bisection point
  double residual = 0.0;   // raw K at root
  int iterations = 0;
};

inline constexpr int kToleranceMaxIterations = 40;
inline constexpr double kToleranceResidual = 1e-4;

// Bisection of q -> raw K(d, q, bound(q)) on [0, (d-1)/d].
ToleranceResult error_tolerance(int d, const BoundFunction& bound);
// Bound evaluated by a fresh SDP solve at every bisection point.
ToleranceResult error_tolerance(int d, const Subset& subset, const BoundOptions& options = {});
// Bound read from a tabulated curve (ceiling lookup); the bracket is capped
// at the top of the grid.
ToleranceResult error_tolerance(const BoundCurve& curve);

// Root of f - g on [lo, hi] by bisection; f - g must change sign on the
// bracket. Throws InvalidArgument otherwise.
double crossover(const std::function<double(double)>& f, const std::function<double(double)>& g,
                 double lo, double hi, double tolerance = 1e-6);

// ---------------------------------------------------------------- decoy

enum class Intensity { Mu = 0, Nu = 1, Omega = 2 };

const char* to_string(Intensity k);

struct DecoySettings {
  double mu = 0.0;
  double nu = 0.0;
  double omega = 0.0;
  double p_mu = 0.8;
  double p_nu = 0.1;
  double p_omega = 0.1;

  double intensity(Intensity k) const;
  double probability(Intensity k) const;
  // 0 <= omega < nu, nu + omega < mu, probabilities positive summing to 1.
  void validate() const;
};

// Gains and error rates per transmitted pulse, indexed by Intensity.
struct BasisStatistics {
  std::array<double, 3> gain{};
  std::array<double, 3> error{};
};

struct MeasuredStatistics {
  BasisStatistics t;
  BasisStatistics f;

  const BasisStatistics& basis(Basis b) const;
  // Every value in [0, 1].
  void validate() const;
};

struct Estimate {
  double value = 0.0;
  double raw = 0.0;
  bool clamped = false;
};

// max{(nu R_w e^w - w R_nu e^nu) / (nu - w), 0}
Estimate zero_photon_yield(const DecoySettings& s, const MeasuredStatistics& m, Basis basis);
// Clamped to [0, 1]. Throws InvalidArgument when mu nu - mu w - nu^2 + w^2 <= 0.
Estimate single_photon_yield(const DecoySettings& s, const MeasuredStatistics& m, Basis basis);
// sum_k p_k k e^{-k} Y_1
double single_photon_gain(const DecoySettings& s, double y1);
// min{(e_nu R_nu e^nu - e_w R_w e^w) / ((nu - w) Y_1), 1/2}, floored at 0.
// Throws UndefinedQuantity when y1 <= 0. The basis selects the statistics;
// the F basis is the one entering the phase-error bound.
Estimate single_photon_error(const DecoySettings& s, const MeasuredStatistics& m, Basis basis,
                             double y1);
Estimate single_photon_error_F(const DecoySettings& s, const MeasuredStatistics& m, double y_f1);

// Abscissa for the curve lookup when the subset does not cover the
// symmetric case.
enum class LookupMode {
  Conservative,  // max(e_T1, e_F1)
  Strict,        // e_F1
};
// T-basis error rate used for the error-correction leak.
enum class LeakSource {
  Aggregate,  // sum_k p_k e_Tk R_Tk / R_T
  Signal,     // e_T at the signal intensity mu
};

const char* to_string(LookupMode m);
const char* to_string(LeakSource s);

struct DecoyOptions {
  LookupMode lookup = LookupMode::Conservative;
  LeakSource leak = LeakSource::Aggregate;
  double ec_efficiency = 1.0;  // f >= 1 multiplying h(e_T)
};

struct KeyRateBreakdown {
  double y_t0 = 0.0;
  double y_t1 = 0.0;
  double y_f0 = 0.0;
  double y_f1 = 0.0;
  double r_t1 = 0.0;
  double e_t1 = 0.0;
  double e_f1 = 0.0;
  double lookup_abscissa = 0.0;
  double e_f_upper = 0.0;
  bool used_curve = false;
  double r_t = 0.0;
  double e_t = 0.0;  // leak error rate (aggregate or signal)
  double delta_leak = 0.0;
  double k_raw = 0.0;
  double k = 0.0;
  double rate_bits = 0.0;

  bool y_t0_clamped = false;
  bool y_t1_clamped = false;
  bool y_f0_clamped = false;
  bool y_f1_clamped = false;
  bool e_t1_clamped = false;
  bool e_f1_clamped = false;
  bool k_floored = false;
};

// K = R_T1 [log2 d - h(e_F^U)] - R_T f h(e_T), floored at 0; rate = r K.
// With |subset| >= d - 1 the bound is e_F1 itself and curve may be null;
// otherwise the curve must match (d, subset). Throws UndefinedQuantity when
// Y_F1 = 0 and OutOfRange when the lookup abscissa is above the curve.
KeyRateBreakdown key_fraction_decoy(int d, const Subset& subset, const DecoySettings& settings,
                                    const MeasuredStatistics& stats, const BoundCurve* curve,
                                    double symbol_rate, const DecoyOptions& options = {});

}  // namespace qkdbound
