#pragma once

// Command-line front end. Everything except main() lives here so tests can
// drive the dispatcher in-process.

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "qkdbound/channel.hpp"
#include "qkdbound/keyrate.hpp"
#include "qkdbound/phase_bound.hpp"

namespace qkdbound::cli {

enum class Command { Bound, Curve, Tolerance, Decoy, Simulate };

const char* to_string(Command c);

struct RunConfig {
  Command command = Command::Bound;

  int d = 4;
  std::string subset = "full";
  std::string subsets = "full";  // tolerance: list of subset specs
  std::vector<int> dims;         // tolerance: dimensions, defaults to {d}
  std::optional<double> qber;
  std::optional<double> qber_f;

  double grid_min = 0.0;
  double grid_max = 0.2;
  double grid_step = 0.001;
  double gap_tolerance = 1e-8;
  double feas_tolerance = 1e-8;
  int max_iterations = 200;
  bool tt_block = false;
  bool alice_marginal = false;
  unsigned threads = 0;

  std::string cache_dir;  // empty: environment or default location
  bool no_cache = false;
  std::string curve_file;
  std::string save_curve;

  std::string input;
  std::optional<double> mu;
  std::optional<double> nu;
  std::optional<double> omega;
  double p_mu = 0.8;
  double p_nu = 0.1;
  double p_omega = 0.1;
  std::optional<double> symbol_rate;  // Hz, default 2500/d MHz
  std::string lookup = "conservative";
  std::string leak = "aggregate";
  double ec_efficiency = 1.0;

  std::string detector = "ideal";
  double eta_det = 0.75;
  double sat_a = 6.5e6;
  double sat_b = 8.63e6;
  std::string saturation_load = "sifted";
  double p_dark = 1e-7;
  std::optional<double> e_d;  // both bases, default 0.005 d
  std::optional<double> e_d_t;
  std::optional<double> e_d_f;
  double p_t = 0.9;
  double intensity_lo = 0.05;
  double intensity_hi = 0.97;
  double min_separation = 0.01;
  double loss_min = 0.0;
  double loss_max = 40.0;
  double loss_step = 0.5;
  bool fixed_intensities = false;

  std::string format = "auto";  // auto | csv | json
  std::string output;           // empty: stdout

  // Throws InvalidArgument on any value a module would reject.
  void validate() const;
  // Every field in a fixed order, rendered as text.
  std::vector<std::pair<std::string, std::string>> entries() const;

  BoundOptions bound_options() const;
  std::vector<double> grid() const;
  SimulationParams simulation_params() const;
  DetectorModel detector_model() const;
  DecoyOptions decoy_options() const;
};

// "full", a count k >= 1 (states 0..k-1), "0" for state 0 alone, or an
// explicit list "0,2" / "[0,2]".
Subset parse_subset(const std::string& spec, int d);
// Splits "full,3,[0,2],1" at commas outside brackets.
std::vector<std::string> split_subset_list(const std::string& list);

struct MeasuredInput {
  MeasuredStatistics stats;
  // Mean photon numbers read from the file, indexed by Intensity.
  std::array<double, 3> mean_photon_number{};
};

// CSV with header columns basis, intensity_label, mean_photon_number, gain,
// error_rate and optional state_index. Per-state rows are combined: gains by
// mean, error rates by gain-weighted mean; states outside the subset are
// skipped. Throws ParseError naming the row/column, InvalidArgument for
// missing basis or intensity coverage.
MeasuredInput ingest_measured(const std::filesystem::path& path, int d, const Subset& subset);
MeasuredInput ingest_measured(std::istream& in, int d, const Subset& subset,
                              const std::string& source = "<input>");

using Cell = std::variant<double, long long, bool, std::string>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

enum class OutputFormat { Csv, Json };

// CSV: "# key=value" lines, header, rows with 9 significant digits.
// JSON: {"config": {...}, "columns": [...], "rows": [{...}]}.
void write_output(const Table& table, OutputFormat format,
                  const std::vector<std::pair<std::string, std::string>>& config,
                  std::ostream& out);
void write_output(const Table& table, OutputFormat format,
                  const std::vector<std::pair<std::string, std::string>>& config,
                  const std::filesystem::path& path);

std::string format_number(double v);

// Directory for cached curves: flag, then QKDBOUND_CACHE_DIR, then
// ~/.cache/qkdbound. Empty if none is available.
std::filesystem::path cache_directory(const RunConfig& cfg);

// Exit status: 0 success, 1 computation error, 2 usage error. Errors are
// written to err as {"error":{"kind":...,"message":...}}.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qkdbound::cli
