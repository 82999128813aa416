#pragma once

// Lossy channel with dark counts and misalignment, detector saturation, decoy
// intensity optimisation and key-rate-versus-loss sweeps.

#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "qkdbound/keyrate.hpp"

namespace qkdbound {

struct ChannelParams {
  double eta_ch = 1.0;
  double eta_det = 0.75;
  double p_dark = 1e-7;  // per symbol
  double e_d = 0.0;      // intrinsic error rate

  static ChannelParams from_loss_db(double loss_db, double eta_det, double p_dark, double e_d);
  double eta_total() const { return eta_ch * eta_det; }
  void validate() const;
};

// R_k = 1 - exp(-eta k) + P_d / d, capped at 1.
double gain(const ChannelParams& p, double k, int d);
// E_k = e_d (1 - exp(-eta k)) + (d - 1) P_d / d. The error rate is E_k / R_k.
double error_prob(const ChannelParams& p, double k, int d);
double error_rate(const ChannelParams& p, double k, int d);

struct IdealDetector {
  double eta_det = 0.75;
};

// Count rate a tanh(r_x / b) for an expected rate r_x (Hz).
struct SaturatingDetector {
  double a = 6.5e6;
  double b = 8.63e6;
  double eta_det = 0.75;
};

using DetectorModel = std::variant<IdealDetector, SaturatingDetector>;

double detector_efficiency(const DetectorModel& model);
void validate(const DetectorModel& model);
double apply_saturation(const DetectorModel& model, double expected_rate);

// Share of the symbol rate that reaches each saturating detector.
enum class SaturationLoad {
  // The T detector sees P_T of the sifted events, each F detector P_F / d,
  // with sifted events a fraction P_T^2 + P_F^2 of all clicks.
  Sifted,
  // The T detector sees P_T of all clicks, each F detector P_F / d.
  Arrivals,
};

const char* to_string(SaturationLoad load);

struct SimulationParams {
  int d = 4;
  Subset subset;
  double symbol_rate = 625e6;  // Hz
  double p_t = 0.9;
  double p_f = 0.1;
  double p_mu = 0.8;
  double p_nu = 0.1;
  double p_omega = 0.1;
  double intensity_lo = 0.05;
  double intensity_hi = 0.97;
  // Minimum of nu - omega and mu - nu - omega during optimisation.
  double min_separation = 0.01;
  double p_dark = 1e-7;
  double e_d_t = 0.02;
  double e_d_f = 0.02;
  SaturationLoad load = SaturationLoad::Sifted;
  DecoyOptions decoy;

  // r = 2500/d MHz, e_d = 0.005 d, full subset.
  static SimulationParams defaults(int d);
  void validate() const;
};

struct SimulationPoint {
  double loss_db = 0.0;
  DecoySettings settings;
  MeasuredStatistics stats;
  double eta_eff_t = 0.0;  // detector efficiency after saturation, T basis
  double eta_eff_f = 0.0;
  KeyRateBreakdown breakdown;
  // Nonempty when the decoy chain could not produce a key (zero-yield or
  // lookup above the curve); the breakdown then holds K = 0.
  std::string zero_key_reason;
  int evaluations = 1;
};

// Efficiency each basis sees after saturation at these intensities.
std::pair<double, double> effective_efficiencies(const SimulationParams& sim,
                                                 const DetectorModel& model, double eta_ch,
                                                 const DecoySettings& settings);

MeasuredStatistics simulated_statistics(const SimulationParams& sim, const DetectorModel& model,
                                        double loss_db, const DecoySettings& settings,
                                        double* eta_eff_t = nullptr, double* eta_eff_f = nullptr);

SimulationPoint simulate_point(const SimulationParams& sim, const DetectorModel& model,
                               double loss_db, const DecoySettings& settings,
                               const BoundCurve* curve);

// Coarse grid over (mu, nu) with omega at the lower bound, then compass
// search. Returns the best feasible point, which may have K = 0.
SimulationPoint optimize_intensities(const SimulationParams& sim, const DetectorModel& model,
                                     double loss_db, const BoundCurve* curve);

// 0, 0.5, ..., 40
std::vector<double> default_loss_grid();

// Intensities optimised per point unless fixed is given.
std::vector<SimulationPoint> simulate_rate_curve(const SimulationParams& sim,
                                                 const DetectorModel& model,
                                                 const std::vector<double>& loss_grid,
                                                 const BoundCurve* curve,
                                                 const std::optional<DecoySettings>& fixed = {},
                                                 unsigned threads = 0);

}  // namespace qkdbound
