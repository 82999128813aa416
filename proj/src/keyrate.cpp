#include "qkdbound/keyrate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qkdbound/errors.hpp"

namespace qkdbound {

namespace {

std::size_t idx(Intensity k) { return static_cast<std::size_t>(k); }

void require_probability(double v, const std::string& what) {
  if (!(v >= 0.0 && v <= 1.0)) {
    std::ostringstream os;
    os << what << " = " << v << " outside [0, 1]";
    throw InvalidArgument(os.str());
  }
}

double key_raw(int d, double e_t, double e_f_upper) {
  return std::log2(static_cast<double>(d)) - entropy_d(e_f_upper, d) - entropy_d(e_t, d);
}

}  // namespace

double entropy_d(double x, int d) {
  require_dimension(d);
  require_probability(x, "entropy argument");
  x = std::min(x, static_cast<double>(d - 1) / d);
  double h = 0.0;
  if (x > 0.0) h -= x * std::log2(x / (d - 1));
  if (x < 1.0) h -= (1.0 - x) * std::log2(1.0 - x);
  return h;
}

KeyFraction key_fraction_single_photon(int d, double e_t, double e_f_upper) {
  KeyFraction k;
  k.raw = key_raw(d, e_t, e_f_upper);
  k.floored = k.raw < 0.0;
  k.value = std::max(k.raw, 0.0);
  return k;
}

ToleranceResult error_tolerance(int d, const BoundFunction& bound) {
  require_dimension(d);
  const double top = static_cast<double>(d - 1) / d;
  auto k_at = [&](double q) { return key_raw(d, q, std::min(bound(q), 1.0)); };
  double lo = 0.0, hi = top;
  if (k_at(lo) <= 0.0) return {0.0, 0.0, k_at(lo), 0};

  ToleranceResult r;
  double mid = 0.5 * (lo + hi);
  double k = 0.0;
  for (r.iterations = 1; r.iterations <= kToleranceMaxIterations; ++r.iterations) {
    mid = 0.5 * (lo + hi);
    k = k_at(mid);
    if (std::abs(k) < kToleranceResidual) break;
    (k > 0.0 ? lo : hi) = mid;
  }
  r.iterations = std::min(r.iterations, kToleranceMaxIterations);
  r.root = mid;
  r.residual = k;
  r.tolerance = std::round(mid * 1000.0) / 1000.0;
  return r;
}

ToleranceResult error_tolerance(int d, const Subset& subset, const BoundOptions& options) {
  return error_tolerance(d, [&](double q) { return phase_error_bound(d, subset, q, options).value; });
}

ToleranceResult error_tolerance(const BoundCurve& curve) {
  const double top = curve.grid.back();
  if (key_raw(curve.d, top, lookup_bound(curve, top)) > 0.0) {
    std::ostringstream os;
    os << "key fraction still positive at the end of the curve (q = " << top << ")";
    throw OutOfRange(os.str());
  }
  return error_tolerance(curve.d, [&](double q) {
    // Above the grid the key is already known to be nonpositive.
    return q > top ? static_cast<double>(curve.d - 1) / curve.d : lookup_bound(curve, q);
  });
}

double crossover(const std::function<double(double)>& f, const std::function<double(double)>& g,
                 double lo, double hi, double tolerance) {
  if (!(lo < hi)) throw InvalidArgument("crossover bracket must satisfy lo < hi");
  double flo = f(lo) - g(lo);
  const double fhi = f(hi) - g(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0)) {
    std::ostringstream os;
    os << "no sign change of the difference on [" << lo << ", " << hi << "]";
    throw InvalidArgument(os.str());
  }
  while (hi - lo > tolerance) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid) - g(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

const char* to_string(Intensity k) {
  switch (k) {
    case Intensity::Mu: return "mu";
    case Intensity::Nu: return "nu";
    case Intensity::Omega: return "omega";
  }
  return "?";
}

const char* to_string(LookupMode m) { return m == LookupMode::Strict ? "strict" : "conservative"; }
const char* to_string(LeakSource s) { return s == LeakSource::Signal ? "signal" : "aggregate"; }

double DecoySettings::intensity(Intensity k) const {
  switch (k) {
    case Intensity::Mu: return mu;
    case Intensity::Nu: return nu;
    case Intensity::Omega: return omega;
  }
  return 0.0;
}

double DecoySettings::probability(Intensity k) const {
  switch (k) {
    case Intensity::Mu: return p_mu;
    case Intensity::Nu: return p_nu;
    case Intensity::Omega: return p_omega;
  }
  return 0.0;
}

void DecoySettings::validate() const {
  std::ostringstream os;
  if (!(std::isfinite(mu) && std::isfinite(nu) && std::isfinite(omega))) {
    os << "intensities must be finite";
  } else if (!(omega >= 0.0)) {
    os << "omega = " << omega << " must be nonnegative";
  } else if (!(omega < nu)) {
    os << "need omega < nu (omega = " << omega << ", nu = " << nu << ")";
  } else if (!(nu + omega < mu)) {
    os << "need nu + omega < mu (mu = " << mu << ", nu = " << nu << ", omega = " << omega << ")";
  } else if (!(p_mu > 0.0 && p_nu > 0.0 && p_omega > 0.0)) {
    os << "intensity probabilities must be positive";
  } else if (std::abs(p_mu + p_nu + p_omega - 1.0) > 1e-9) {
    os << "intensity probabilities sum to " << p_mu + p_nu + p_omega << ", not 1";
  } else {
    return;
  }
  throw InvalidArgument(os.str());
}

const BasisStatistics& MeasuredStatistics::basis(Basis b) const {
  switch (b) {
    case Basis::T: return t;
    case Basis::F: return f;
    case Basis::FConj: break;
  }
  throw InvalidArgument("measured statistics exist for the T and F bases only");
}

void MeasuredStatistics::validate() const {
  for (Basis b : {Basis::T, Basis::F}) {
    const char* name = b == Basis::T ? "T" : "F";
    for (Intensity k : {Intensity::Mu, Intensity::Nu, Intensity::Omega}) {
      require_probability(basis(b).gain[idx(k)], std::string("gain ") + name + "," + to_string(k));
      require_probability(basis(b).error[idx(k)],
                          std::string("error rate ") + name + "," + to_string(k));
    }
  }
}

Estimate zero_photon_yield(const DecoySettings& s, const MeasuredStatistics& m, Basis basis) {
  s.validate();
  const BasisStatistics& b = m.basis(basis);
  const double r_nu = b.gain[idx(Intensity::Nu)];
  const double r_w = b.gain[idx(Intensity::Omega)];
  Estimate e;
  e.raw = (s.nu * r_w * std::exp(s.omega) - s.omega * r_nu * std::exp(s.nu)) / (s.nu - s.omega);
  e.value = std::clamp(e.raw, 0.0, 1.0);
  e.clamped = e.value != e.raw;
  return e;
}

Estimate single_photon_yield(const DecoySettings& s, const MeasuredStatistics& m, Basis basis) {
  s.validate();
  const double mu = s.mu, nu = s.nu, w = s.omega;
  const double denom = mu * nu - mu * w - nu * nu + w * w;
  if (!(denom > 0.0)) {
    std::ostringstream os;
    os << "degenerate decoy intensities: mu nu - mu w - nu^2 + w^2 = " << denom;
    throw InvalidArgument(os.str());
  }
  const BasisStatistics& b = m.basis(basis);
  const double y0 = zero_photon_yield(s, m, basis).value;
  const double r_mu = b.gain[idx(Intensity::Mu)];
  const double r_nu = b.gain[idx(Intensity::Nu)];
  const double r_w = b.gain[idx(Intensity::Omega)];
  Estimate e;
  e.raw = mu / denom *
          (r_nu * std::exp(nu) - r_w * std::exp(w) -
           (nu * nu - w * w) / (mu * mu) * (r_mu * std::exp(mu) - y0));
  e.value = std::clamp(e.raw, 0.0, 1.0);
  e.clamped = e.value != e.raw;
  return e;
}

double single_photon_gain(const DecoySettings& s, double y1) {
  require_probability(y1, "single-photon yield");
  double w = 0.0;
  for (Intensity k : {Intensity::Mu, Intensity::Nu, Intensity::Omega}) {
    const double x = s.intensity(k);
    w += s.probability(k) * x * std::exp(-x);
  }
  return w * y1;
}

Estimate single_photon_error(const DecoySettings& s, const MeasuredStatistics& m, Basis basis,
                             double y1) {
  s.validate();
  if (!(y1 > 0.0)) {
    throw UndefinedQuantity("single-photon error rate undefined: single-photon yield is zero");
  }
  const BasisStatistics& b = m.basis(basis);
  const std::size_t nu = idx(Intensity::Nu), w = idx(Intensity::Omega);
  Estimate e;
  e.raw = (b.error[nu] * b.gain[nu] * std::exp(s.nu) - b.error[w] * b.gain[w] * std::exp(s.omega)) /
          ((s.nu - s.omega) * y1);
  e.value = std::clamp(e.raw, 0.0, 0.5);
  e.clamped = e.value != e.raw;
  return e;
}

Estimate single_photon_error_F(const DecoySettings& s, const MeasuredStatistics& m, double y_f1) {
  return single_photon_error(s, m, Basis::F, y_f1);
}

KeyRateBreakdown key_fraction_decoy(int d, const Subset& subset, const DecoySettings& settings,
                                    const MeasuredStatistics& stats, const BoundCurve* curve,
                                    double symbol_rate, const DecoyOptions& options) {
  require_dimension(d);
  const Subset s = normalize_subset(d, subset);
  settings.validate();
  stats.validate();
  if (!(symbol_rate >= 0.0) || !std::isfinite(symbol_rate)) {
    throw InvalidArgument("symbol rate must be finite and nonnegative");
  }
  if (!(options.ec_efficiency >= 1.0)) {
    throw InvalidArgument("error-correction efficiency must be >= 1");
  }
  const bool symmetric = covers_symmetric_case(d, s);
  if (!symmetric) {
    if (curve == nullptr) throw InvalidArgument("a bound curve is required for this subset");
    if (curve->d != d || curve->subset != s) {
      throw InvalidArgument("bound curve was built for a different dimension or subset");
    }
  }

  KeyRateBreakdown b;
  const Estimate yt0 = zero_photon_yield(settings, stats, Basis::T);
  const Estimate yf0 = zero_photon_yield(settings, stats, Basis::F);
  const Estimate yt1 = single_photon_yield(settings, stats, Basis::T);
  const Estimate yf1 = single_photon_yield(settings, stats, Basis::F);
  b.y_t0 = yt0.value;
  b.y_t0_clamped = yt0.clamped;
  b.y_f0 = yf0.value;
  b.y_f0_clamped = yf0.clamped;
  b.y_t1 = yt1.value;
  b.y_t1_clamped = yt1.clamped;
  b.y_f1 = yf1.value;
  b.y_f1_clamped = yf1.clamped;
  b.r_t1 = single_photon_gain(settings, b.y_t1);

  const Estimate ef1 = single_photon_error_F(settings, stats, b.y_f1);
  b.e_f1 = ef1.value;
  b.e_f1_clamped = ef1.clamped;
  if (b.y_t1 > 0.0) {
    const Estimate et1 = single_photon_error(settings, stats, Basis::T, b.y_t1);
    b.e_t1 = et1.value;
    b.e_t1_clamped = et1.clamped;
  }

  if (symmetric) {
    b.lookup_abscissa = b.e_f1;
    b.e_f_upper = b.e_f1;
  } else {
    b.lookup_abscissa =
        options.lookup == LookupMode::Strict ? b.e_f1 : std::max(b.e_t1, b.e_f1);
    b.e_f_upper = lookup_bound(*curve, b.lookup_abscissa);
    b.used_curve = true;
  }

  double err_weighted = 0.0;
  for (Intensity k : {Intensity::Mu, Intensity::Nu, Intensity::Omega}) {
    const double p = settings.probability(k);
    b.r_t += p * stats.t.gain[idx(k)];
    err_weighted += p * stats.t.gain[idx(k)] * stats.t.error[idx(k)];
  }
  if (options.leak == LeakSource::Signal) {
    b.e_t = stats.t.error[idx(Intensity::Mu)];
  } else {
    b.e_t = b.r_t > 0.0 ? err_weighted / b.r_t : 0.0;
  }
  b.delta_leak = options.ec_efficiency * entropy_d(b.e_t, d);

  b.k_raw = b.r_t1 * (std::log2(static_cast<double>(d)) - entropy_d(b.e_f_upper, d)) -
            b.r_t * b.delta_leak;
  b.k = std::max(b.k_raw, 0.0);
  b.k_floored = b.k_raw < 0.0;
  b.rate_bits = symbol_rate * b.k;
  return b;
}

}  // namespace qkdbound
