#include "qkdbound/channel.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

#include "qkdbound/errors.hpp"

namespace qkdbound {

namespace {

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    std::ostringstream os;
    os << name << " = " << v << " outside [0, 1]";
    throw InvalidArgument(os.str());
  }
}

double click_probability(double eta, double k) { return -std::expm1(-eta * k); }

bool feasible(const SimulationParams& sim, double mu, double nu, double omega) {
  const double eps = 1e-12;
  return mu <= sim.intensity_hi + eps && nu >= sim.intensity_lo - eps &&
         nu - omega >= sim.min_separation - eps && mu - nu - omega >= sim.min_separation - eps;
}

DecoySettings make_settings(const SimulationParams& sim, double mu, double nu, double omega) {
  return {mu, nu, omega, sim.p_mu, sim.p_nu, sim.p_omega};
}

}  // namespace

ChannelParams ChannelParams::from_loss_db(double loss_db, double eta_det, double p_dark, double e_d) {
  if (!(loss_db >= 0.0) || !std::isfinite(loss_db)) {
    throw InvalidArgument("channel loss must be finite and nonnegative");
  }
  ChannelParams p{std::pow(10.0, -loss_db / 10.0), eta_det, p_dark, e_d};
  p.validate();
  return p;
}

void ChannelParams::validate() const {
  require_unit(eta_ch, "eta_ch");
  require_unit(eta_det, "eta_det");
  require_unit(p_dark, "dark-count probability");
  require_unit(e_d, "intrinsic error rate");
}

double gain(const ChannelParams& p, double k, int d) {
  require_dimension(d);
  if (!(k >= 0.0)) throw InvalidArgument("mean photon number must be nonnegative");
  return std::min(1.0, click_probability(p.eta_total(), k) + p.p_dark / d);
}

double error_prob(const ChannelParams& p, double k, int d) {
  require_dimension(d);
  if (!(k >= 0.0)) throw InvalidArgument("mean photon number must be nonnegative");
  return p.e_d * click_probability(p.eta_total(), k) + (d - 1) * p.p_dark / d;
}

double error_rate(const ChannelParams& p, double k, int d) {
  const double r = gain(p, k, d);
  return r > 0.0 ? std::min(1.0, error_prob(p, k, d) / r) : 0.0;
}

double detector_efficiency(const DetectorModel& model) {
  return std::visit([](const auto& m) { return m.eta_det; }, model);
}

void validate(const DetectorModel& model) {
  require_unit(detector_efficiency(model), "eta_det");
  if (const auto* s = std::get_if<SaturatingDetector>(&model)) {
    if (!(s->a > 0.0 && s->b > 0.0) || !std::isfinite(s->a) || !std::isfinite(s->b)) {
      throw InvalidArgument("saturation parameters a and b must be positive");
    }
  }
}

double apply_saturation(const DetectorModel& model, double expected_rate) {
  if (!(expected_rate >= 0.0)) throw InvalidArgument("expected count rate must be nonnegative");
  if (const auto* s = std::get_if<SaturatingDetector>(&model)) {
    return s->a * std::tanh(expected_rate / s->b);
  }
  return expected_rate;
}

const char* to_string(SaturationLoad load) {
  return load == SaturationLoad::Arrivals ? "arrivals" : "sifted";
}

SimulationParams SimulationParams::defaults(int d) {
  require_dimension(d);
  SimulationParams s;
  s.d = d;
  s.subset = full_subset(d);
  s.symbol_rate = 2500e6 / d;
  s.e_d_t = s.e_d_f = 0.005 * d;
  return s;
}

void SimulationParams::validate() const {
  require_dimension(d);
  normalize_subset(d, subset);
  if (!(symbol_rate > 0.0) || !std::isfinite(symbol_rate)) {
    throw InvalidArgument("symbol rate must be positive");
  }
  require_unit(p_t, "P_T");
  require_unit(p_f, "P_F");
  if (std::abs(p_t + p_f - 1.0) > 1e-9) throw InvalidArgument("P_T + P_F must equal 1");
  if (!(p_mu > 0.0 && p_nu > 0.0 && p_omega > 0.0) ||
      std::abs(p_mu + p_nu + p_omega - 1.0) > 1e-9) {
    throw InvalidArgument("intensity probabilities must be positive and sum to 1");
  }
  if (!(intensity_lo > 0.0 && intensity_lo < intensity_hi && intensity_hi <= 1.0)) {
    throw InvalidArgument("intensity bounds must satisfy 0 < lo < hi <= 1");
  }
  if (!(min_separation > 0.0)) throw InvalidArgument("intensity separation must be positive");
  if (intensity_lo + 2.0 * min_separation + intensity_lo > intensity_hi) {
    throw InvalidArgument("intensity bounds leave no feasible (mu, nu, omega)");
  }
  require_unit(p_dark, "dark-count probability");
  require_unit(e_d_t, "intrinsic T error rate");
  require_unit(e_d_f, "intrinsic F error rate");
  if (!(decoy.ec_efficiency >= 1.0)) throw InvalidArgument("error-correction efficiency must be >= 1");
}

std::pair<double, double> effective_efficiencies(const SimulationParams& sim,
                                                 const DetectorModel& model, double eta_ch,
                                                 const DecoySettings& settings) {
  const double eta_det = detector_efficiency(model);
  if (std::holds_alternative<IdealDetector>(model)) return {eta_det, eta_det};
  const auto& sat = std::get<SaturatingDetector>(model);

  double clicks = 0.0;  // expected detections per symbol
  for (Intensity k : {Intensity::Mu, Intensity::Nu, Intensity::Omega}) {
    clicks += settings.probability(k) * click_probability(eta_det * eta_ch, settings.intensity(k));
  }
  const double sifted = sim.load == SaturationLoad::Sifted ? sim.p_t * sim.p_t + sim.p_f * sim.p_f : 1.0;
  auto scaled = [&](double fraction) {
    const double expected = sim.symbol_rate * fraction * sifted * clicks;
    // Low-flux limit of a tanh(x / b) / x.
    const double ratio = expected > 0.0 ? apply_saturation(model, expected) / expected : sat.a / sat.b;
    return eta_det * ratio;
  };
  return {scaled(sim.p_t), scaled(sim.p_f / sim.d)};
}

MeasuredStatistics simulated_statistics(const SimulationParams& sim, const DetectorModel& model,
                                        double loss_db, const DecoySettings& settings,
                                        double* eta_eff_t, double* eta_eff_f) {
  const double eta_ch = ChannelParams::from_loss_db(loss_db, detector_efficiency(model), sim.p_dark, 0.0).eta_ch;
  const auto [et, ef] = effective_efficiencies(sim, model, eta_ch, settings);
  if (eta_eff_t) *eta_eff_t = et;
  if (eta_eff_f) *eta_eff_f = ef;
  const ChannelParams ct{eta_ch, std::min(et, 1.0), sim.p_dark, sim.e_d_t};
  const ChannelParams cf{eta_ch, std::min(ef, 1.0), sim.p_dark, sim.e_d_f};
  MeasuredStatistics m;
  for (Intensity k : {Intensity::Mu, Intensity::Nu, Intensity::Omega}) {
    const auto i = static_cast<std::size_t>(k);
    const double x = settings.intensity(k);
    m.t.gain[i] = gain(ct, x, sim.d);
    m.t.error[i] = error_rate(ct, x, sim.d);
    m.f.gain[i] = gain(cf, x, sim.d);
    m.f.error[i] = error_rate(cf, x, sim.d);
  }
  return m;
}

SimulationPoint simulate_point(const SimulationParams& sim, const DetectorModel& model,
                               double loss_db, const DecoySettings& settings,
                               const BoundCurve* curve) {
  SimulationPoint p;
  p.loss_db = loss_db;
  p.settings = settings;
  p.stats = simulated_statistics(sim, model, loss_db, settings, &p.eta_eff_t, &p.eta_eff_f);
  try {
    p.breakdown = key_fraction_decoy(sim.d, sim.subset, settings, p.stats, curve, sim.symbol_rate,
                                     sim.decoy);
  } catch (const UndefinedQuantity& e) {
    p.zero_key_reason = e.what();
  } catch (const OutOfRange& e) {
    p.zero_key_reason = e.what();
  }
  if (!p.zero_key_reason.empty()) {
    p.breakdown = KeyRateBreakdown{};
    p.breakdown.k_floored = true;
  }
  return p;
}

SimulationPoint optimize_intensities(const SimulationParams& sim, const DetectorModel& model,
                                     double loss_db, const BoundCurve* curve) {
  sim.validate();
  validate(model);
  const double omega = sim.intensity_lo;
  int evaluations = 0;
  auto rate = [&](double mu, double nu) {
    ++evaluations;
    return simulate_point(sim, model, loss_db, make_settings(sim, mu, nu, omega), curve);
  };

  constexpr double kMuStep = 0.02, kNuStep = 0.01;
  const double nu_min = std::max(sim.intensity_lo, omega + sim.min_separation);
  std::optional<SimulationPoint> best;
  for (int i = 0;; ++i) {
    const double mu = std::round((nu_min + omega + sim.min_separation + i * kMuStep) * 1e9) / 1e9;
    if (mu > sim.intensity_hi + 1e-12) break;
    for (int j = 0;; ++j) {
      const double nu = std::round((nu_min + j * kNuStep) * 1e9) / 1e9;
      if (!feasible(sim, mu, nu, omega)) break;
      SimulationPoint p = rate(mu, nu);
      if (!best || p.breakdown.rate_bits > best->breakdown.rate_bits) best = std::move(p);
    }
  }
  if (!best) throw InvalidArgument("no feasible decoy intensities within the bounds");

  // Compass search from the best grid point.
  double mu = best->settings.mu, nu = best->settings.nu;
  for (double step = kNuStep; step >= 1e-4;) {
    bool moved = false;
    for (auto [dm, dn] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}}) {
      const double m2 = mu + dm * step, n2 = nu + dn * step;
      if (!feasible(sim, m2, n2, omega)) continue;
      SimulationPoint p = rate(m2, n2);
      if (p.breakdown.rate_bits > best->breakdown.rate_bits) {
        best = std::move(p);
        mu = m2;
        nu = n2;
        moved = true;
        break;
      }
    }
    if (!moved) step *= 0.5;
  }
  best->evaluations = evaluations;
  return *best;
}

std::vector<double> default_loss_grid() { return make_grid(0.0, 40.0, 0.5); }

std::vector<SimulationPoint> simulate_rate_curve(const SimulationParams& sim,
                                                 const DetectorModel& model,
                                                 const std::vector<double>& loss_grid,
                                                 const BoundCurve* curve,
                                                 const std::optional<DecoySettings>& fixed,
                                                 unsigned threads) {
  sim.validate();
  validate(model);
  if (fixed) fixed->validate();
  const std::size_t n = loss_grid.size();
  std::vector<SimulationPoint> out(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fixed ? simulate_point(sim, model, loss_grid[i], *fixed, curve)
                       : optimize_intensities(sim, model, loss_grid[i], curve);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) {
      std::ostringstream os;
      os << "simulation failed at " << loss_grid[i] << " dB: " << errors[i];
      throw Error(os.str());
    }
  }
  return out;
}

}  // namespace qkdbound
