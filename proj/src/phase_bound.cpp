#include "qkdbound/phase_bound.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "qkdbound/errors.hpp"

namespace qkdbound {

namespace {

constexpr const char* kFormat = "qkdbound-curve";
constexpr int kFormatVersion = 1;

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

BoundResult phase_error_bound(const ProtocolConfig& config, const BoundOptions& options) {
  ProtocolConfig cfg = config;
  cfg.options = options.constraints;
  const ConstraintSet cs = build_constraints(cfg);
  const sdp::SdpProblem problem{cs.objective, cs.constraints};
  const sdp::SdpSolution sol = sdp::solve_max(problem, options.solver);
  if (sol.status != sdp::SolveStatus::Optimal) {
    std::ostringstream os;
    os << "d = " << cfg.d << ", q = " << cfg.qber_t << ": " << sol.message;
    throw sdp::SolverError(sol.status, os.str());
  }
  sdp::certify(sol, problem, options.solver);

  BoundResult r;
  r.raw_dual = sol.dual_value;
  r.certified = sol.certified_upper_bound();
  r.primal = sol.primal_value;
  r.gap = sol.gap;
  r.iterations = sol.iterations;
  const double hi = static_cast<double>(cfg.d - 1) / cfg.d;
  r.value = std::clamp(r.certified, 0.0, hi);
  r.clamped = r.value != r.certified;
  return r;
}

BoundResult phase_error_bound(int d, const Subset& subset, double q, const BoundOptions& options) {
  ProtocolConfig cfg;
  cfg.d = d;
  cfg.monitoring_subset = subset;
  cfg.qber_t = q;
  return phase_error_bound(cfg, options);
}

std::vector<double> make_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw InvalidArgument("grid needs lo <= hi and a positive step");
  }
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(n) + 1);
  // Index-based to avoid accumulated drift; rounded to 12 digits so that
  // 0.001 * 51 prints and compares as 0.051.
  for (long i = 0; i <= n; ++i) {
    g.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
  }
  return g;
}

std::vector<double> default_grid() { return make_grid(0.0, 0.2, 0.001); }

BoundCurve bound_curve(int d, const Subset& subset, const std::vector<double>& grid,
                       const BoundOptions& options, unsigned threads) {
  require_dimension(d);
  const Subset s = normalize_subset(d, subset);
  if (grid.empty()) throw InvalidArgument("bound curve grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw InvalidArgument("bound curve grid must be strictly ascending");
  }
  const double hi = static_cast<double>(d - 1) / d;
  if (grid.front() < 0.0 || grid.back() > hi) {
    throw InvalidArgument("bound curve grid must lie in [0, (d-1)/d]");
  }

  const std::size_t n = grid.size();
  std::vector<BoundResult> results(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i] = phase_error_bound(d, s, grid[i], options);
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
      os << "bound curve failed at q = " << grid[i] << ": " << errors[i];
      throw Error(os.str());
    }
  }

  BoundCurve c;
  c.d = d;
  c.subset = s;
  c.grid = grid;
  c.solver = options.solver;
  c.constraints = options.constraints;
  c.created = utc_timestamp();
  double running = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const BoundResult& r = results[i];
    c.raw_bounds.push_back(r.value);
    c.gaps.push_back(r.gap);
    c.iterations.push_back(r.iterations);
    if (r.clamped) ++c.clamped_points;
    if (running - r.value > kMonotoneViolationLimit) {
      std::ostringstream os;
      os << "bound decreases by " << running - r.value << " at q = " << grid[i];
      throw Error(os.str());
    }
    c.max_monotone_adjustment = std::max(c.max_monotone_adjustment, running - r.value);
    running = std::max(running, r.value);
    c.bounds.push_back(running);
  }
  return c;
}

double lookup_bound(const BoundCurve& curve, double q) {
  if (curve.grid.empty()) throw InvalidArgument("bound curve is empty");
  if (!std::isfinite(q)) throw InvalidArgument("lookup abscissa is not finite");
  auto it = std::lower_bound(curve.grid.begin(), curve.grid.end(), q - kLookupSlack);
  if (it == curve.grid.end()) {
    std::ostringstream os;
    os << "q = " << q << " is above the tabulated range (max " << curve.grid.back() << ")";
    throw OutOfRange(os.str());
  }
  return curve.bounds[static_cast<std::size_t>(it - curve.grid.begin())];
}

nlohmann::json curve_to_json(const BoundCurve& c) {
  nlohmann::json payload = {
      {"d", c.d},
      {"subset", c.subset},
      {"grid", c.grid},
      {"bounds", c.bounds},
      {"raw_bounds", c.raw_bounds},
      {"gaps", c.gaps},
      {"iterations", c.iterations},
      {"solver",
       {{"gap_tolerance", c.solver.gap_tolerance},
        {"feas_tolerance", c.solver.feas_tolerance},
        {"max_iterations", c.solver.max_iterations},
        {"redundancy_tolerance", c.solver.redundancy_tolerance}}},
      {"constraints",
       {{"include_tt_block", c.constraints.include_tt_block},
        {"include_alice_marginal", c.constraints.include_alice_marginal}}},
      {"created", c.created},
      {"clamped_points", c.clamped_points},
      {"max_monotone_adjustment", c.max_monotone_adjustment},
  };
  return {{"format", kFormat},
          {"version", kFormatVersion},
          {"payload", payload},
          {"checksum", hex64(fnv1a64(payload.dump()))}};
}

BoundCurve curve_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != kFormat) throw ParseError("not a bound curve document");
    if (doc.at("version").get<int>() != kFormatVersion) {
      throw ParseError("unsupported curve format version");
    }
    const auto& p = doc.at("payload");
    const std::string expected = doc.at("checksum").get<std::string>();
    if (hex64(fnv1a64(p.dump())) != expected) throw ParseError("curve checksum mismatch");

    BoundCurve c;
    c.d = p.at("d").get<int>();
    c.subset = p.at("subset").get<Subset>();
    c.grid = p.at("grid").get<std::vector<double>>();
    c.bounds = p.at("bounds").get<std::vector<double>>();
    c.raw_bounds = p.at("raw_bounds").get<std::vector<double>>();
    c.gaps = p.at("gaps").get<std::vector<double>>();
    c.iterations = p.at("iterations").get<std::vector<int>>();
    const auto& s = p.at("solver");
    c.solver.gap_tolerance = s.at("gap_tolerance").get<double>();
    c.solver.feas_tolerance = s.at("feas_tolerance").get<double>();
    c.solver.max_iterations = s.at("max_iterations").get<int>();
    c.solver.redundancy_tolerance = s.at("redundancy_tolerance").get<double>();
    const auto& k = p.at("constraints");
    c.constraints.include_tt_block = k.at("include_tt_block").get<bool>();
    c.constraints.include_alice_marginal = k.at("include_alice_marginal").get<bool>();
    c.created = p.at("created").get<std::string>();
    c.clamped_points = p.at("clamped_points").get<int>();
    c.max_monotone_adjustment = p.at("max_monotone_adjustment").get<double>();

    const std::size_t n = c.grid.size();
    if (n == 0 || c.bounds.size() != n || c.raw_bounds.size() != n || c.gaps.size() != n ||
        c.iterations.size() != n) {
      throw ParseError("curve arrays are empty or of unequal length");
    }
    if (!std::is_sorted(c.grid.begin(), c.grid.end())) throw ParseError("curve grid not ascending");
    c.subset = normalize_subset(c.d, c.subset);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed curve document: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("invalid curve document: ") + e.what());
  }
}

void save_curve(const BoundCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write curve file " + path.string());
  out << curve_to_json(curve).dump(2) << '\n';
  if (!out) throw Error("failed writing curve file " + path.string());
}

BoundCurve load_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open curve file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("curve file " + path.string() + " is not valid JSON: " + e.what());
  }
  return curve_from_json(doc);
}

}  // namespace qkdbound
