#pragma once

// Upper bounds on the phase error rate e_F^U(d, S, q) from the SDP, tabulated
// curves, and ceiling lookup into a curve.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "qkdbound/operators.hpp"
#include "qkdbound/sdp.hpp"

namespace qkdbound {

struct BoundOptions {
  sdp::SolverOptions solver;
  ConstraintOptions constraints;
};

struct BoundResult {
  double value = 0.0;      // certified bound clamped to [0, (d-1)/d]
  double raw_dual = 0.0;   // dual objective before the slack correction and clamp
  double certified = 0.0;  // dual objective plus any negative-slack correction
  double primal = 0.0;
  double gap = 0.0;
  int iterations = 0;
  bool clamped = false;
};

// Solves with e_T = e_F = q. Throws sdp::SolverError if the solver does not
// reach Optimal and sdp::CertificationError if the returned pair fails the
// independent checks.
BoundResult phase_error_bound(int d, const Subset& subset, double q,
                              const BoundOptions& options = {});
BoundResult phase_error_bound(const ProtocolConfig& config, const BoundOptions& options = {});

struct BoundCurve {
  int d = 0;
  Subset subset;
  std::vector<double> grid;
  std::vector<double> bounds;      // after the monotone post-pass
  std::vector<double> raw_bounds;  // clamped solver bounds before the post-pass
  std::vector<double> gaps;
  std::vector<int> iterations;
  sdp::SolverOptions solver;
  ConstraintOptions constraints;
  std::string created;        // UTC, ISO 8601
  int clamped_points = 0;
  double max_monotone_adjustment = 0.0;
};

// Raw decreases larger than this abort curve construction.
inline constexpr double kMonotoneViolationLimit = 1e-5;
inline constexpr double kLookupSlack = 1e-12;

// 0, 0.001, ..., 0.200
std::vector<double> default_grid();
std::vector<double> make_grid(double lo, double hi, double step);

// threads = 0 picks std::thread::hardware_concurrency().
BoundCurve bound_curve(int d, const Subset& subset, const std::vector<double>& grid,
                       const BoundOptions& options = {}, unsigned threads = 0);

// Tabulated bound at the smallest grid point >= q. Throws OutOfRange above
// the grid.
double lookup_bound(const BoundCurve& curve, double q);

nlohmann::json curve_to_json(const BoundCurve& curve);
// Throws ParseError on malformed documents or checksum mismatch.
BoundCurve curve_from_json(const nlohmann::json& doc);
void save_curve(const BoundCurve& curve, const std::filesystem::path& path);
BoundCurve load_curve(const std::filesystem::path& path);

// FNV-1a, 64 bit.
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace qkdbound
