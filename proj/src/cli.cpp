#include "qkdbound/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qkdbound/errors.hpp"

namespace qkdbound::cli {

namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

int parse_int(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size()) throw InvalidArgument(what + ": '" + s + "' is not an integer");
  return v;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size() || !std::isfinite(v)) {
    throw ParseError(what + ": '" + s + "' is not a finite number");
  }
  return v;
}

std::string opt_text(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string("default");
}

std::string subset_text(const Subset& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i]);
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void require_choice(const std::string& value, std::initializer_list<const char*> allowed,
                    const char* name) {
  for (const char* a : allowed) {
    if (value == a) return;
  }
  throw InvalidArgument(std::string(name) + ": unsupported value '" + value + "'");
}

nlohmann::ordered_json cell_json(const Cell& c) {
  return std::visit([](const auto& v) { return nlohmann::ordered_json(v); }, c);
}

std::string cell_csv(const Cell& c) {
  struct V {
    std::string operator()(double v) const { return format_number(v); }
    std::string operator()(long long v) const { return std::to_string(v); }
    std::string operator()(bool v) const { return v ? "true" : "false"; }
    std::string operator()(const std::string& v) const {
      if (v.find_first_of(",\"\n") == std::string::npos) return v;
      std::string q = "\"";
      for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      return q + "\"";
    }
  };
  return std::visit(V{}, c);
}

// ------------------------------------------------------------- commands

struct Context {
  const RunConfig& cfg;
  std::ostream& err;
};

BoundCurve obtain_curve(const Context& ctx, int d, const Subset& subset) {
  const RunConfig& cfg = ctx.cfg;
  if (!cfg.curve_file.empty()) {
    BoundCurve c = load_curve(cfg.curve_file);
    if (c.d != d || c.subset != subset) {
      throw InvalidArgument("curve file " + cfg.curve_file + " was built for d = " +
                            std::to_string(c.d) + ", subset {" + subset_text(c.subset) + "}");
    }
    return c;
  }

  const BoundOptions options = cfg.bound_options();
  const std::vector<double> grid = cfg.grid();
  std::filesystem::path file;
  if (!cfg.no_cache) {
    const std::filesystem::path dir = cache_directory(cfg);
    if (!dir.empty()) {
      const json key = {{"d", d},
                        {"subset", subset},
                        {"grid", grid},
                        {"gap", options.solver.gap_tolerance},
                        {"feas", options.solver.feas_tolerance},
                        {"iter", options.solver.max_iterations},
                        {"tt", options.constraints.include_tt_block},
                        {"marginal", options.constraints.include_alice_marginal}};
      std::string name = "curve_d" + std::to_string(d) + "_";
      for (std::size_t i = 0; i < subset.size(); ++i) name += (i ? "-" : "") + std::to_string(subset[i]);
      file = dir / (name + "_" + hex64(fnv1a64(key.dump())) + ".json");
      std::error_code ec;
      if (std::filesystem::exists(file, ec)) {
        try {
          BoundCurve c = load_curve(file);
          if (c.d == d && c.subset == subset && c.grid == grid) return c;
        } catch (const ParseError& e) {
          ctx.err << "warning: ignoring cached curve " << file.string() << ": " << e.what() << '\n';
        }
      }
    }
  }

  BoundCurve c = bound_curve(d, subset, grid, options, cfg.threads);
  if (!file.empty()) {
    try {
      std::filesystem::create_directories(file.parent_path());
      save_curve(c, file);
    } catch (const std::exception& e) {
      ctx.err << "warning: could not cache curve: " << e.what() << '\n';
    }
  }
  return c;
}

Table run_bound(const Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  ProtocolConfig pc;
  pc.d = cfg.d;
  pc.monitoring_subset = parse_subset(cfg.subset, cfg.d);
  pc.qber_t = *cfg.qber;
  pc.qber_f = cfg.qber_f;
  const BoundResult r = phase_error_bound(pc, cfg.bound_options());
  Table t;
  t.columns = {"d",      "subset",          "qber_t",      "qber_f",      "e_f_upper", "certified_dual",
               "raw_dual", "primal",        "duality_gap", "iterations", "clamped"};
  t.rows.push_back({static_cast<long long>(cfg.d), subset_text(pc.monitoring_subset), pc.qber_t,
                    pc.effective_qber_f(), r.value, r.certified, r.raw_dual, r.primal, r.gap,
                    static_cast<long long>(r.iterations), r.clamped});
  return t;
}

Table run_curve(const Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Subset subset = parse_subset(cfg.subset, cfg.d);
  const BoundCurve c = obtain_curve(ctx, cfg.d, subset);
  if (!cfg.save_curve.empty()) save_curve(c, cfg.save_curve);
  Table t;
  t.columns = {"qber", "e_f_upper", "duality_gap"};
  for (std::size_t i = 0; i < c.grid.size(); ++i) t.rows.push_back({c.grid[i], c.bounds[i], c.gaps[i]});
  return t;
}

Table run_tolerance(const Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const std::vector<int> dims = cfg.dims.empty() ? std::vector<int>{cfg.d} : cfg.dims;
  Table t;
  t.columns = {"d", "subset", "states", "tolerance", "root", "residual", "iterations"};
  for (int d : dims) {
    for (const std::string& spec : split_subset_list(cfg.subsets)) {
      const Subset s = parse_subset(spec, d);
      const ToleranceResult r = error_tolerance(d, s, cfg.bound_options());
      t.rows.push_back({static_cast<long long>(d), spec, subset_text(s), r.tolerance, r.root,
                        r.residual, static_cast<long long>(r.iterations)});
    }
  }
  return t;
}

Table run_decoy(const Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Subset subset = parse_subset(cfg.subset, cfg.d);
  const MeasuredInput in = ingest_measured(cfg.input, cfg.d, subset);
  DecoySettings s;
  s.mu = cfg.mu.value_or(in.mean_photon_number[0]);
  s.nu = cfg.nu.value_or(in.mean_photon_number[1]);
  s.omega = cfg.omega.value_or(in.mean_photon_number[2]);
  s.p_mu = cfg.p_mu;
  s.p_nu = cfg.p_nu;
  s.p_omega = cfg.p_omega;
  std::optional<BoundCurve> curve;
  if (!covers_symmetric_case(cfg.d, subset)) curve = obtain_curve(ctx, cfg.d, subset);
  const double rate = cfg.symbol_rate.value_or(2500e6 / cfg.d);
  const KeyRateBreakdown b = key_fraction_decoy(cfg.d, subset, s, in.stats,
                                                curve ? &*curve : nullptr, rate, cfg.decoy_options());
  Table t;
  t.columns = {"mu",           "nu",           "omega",        "y_t0",         "y_t1",
               "y_f0",         "y_f1",         "r_t1",         "e_t1",         "e_f1",
               "lookup_abscissa", "e_f_upper", "used_curve",   "r_t",          "e_t",
               "delta_leak",   "k_raw",        "k",            "rate_bits_per_s", "y_t0_clamped",
               "y_t1_clamped", "y_f0_clamped", "y_f1_clamped", "e_t1_clamped", "e_f1_clamped",
               "k_floored"};
  t.rows.push_back({s.mu,         s.nu,         s.omega,      b.y_t0,       b.y_t1,
                    b.y_f0,       b.y_f1,       b.r_t1,       b.e_t1,       b.e_f1,
                    b.lookup_abscissa, b.e_f_upper, b.used_curve, b.r_t,    b.e_t,
                    b.delta_leak, b.k_raw,      b.k,          b.rate_bits,  b.y_t0_clamped,
                    b.y_t1_clamped, b.y_f0_clamped, b.y_f1_clamped, b.e_t1_clamped, b.e_f1_clamped,
                    b.k_floored});
  return t;
}

Table run_simulate(const Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const SimulationParams sim = cfg.simulation_params();
  std::optional<BoundCurve> curve;
  if (!covers_symmetric_case(sim.d, sim.subset)) curve = obtain_curve(ctx, sim.d, sim.subset);
  std::optional<DecoySettings> fixed;
  if (cfg.fixed_intensities) {
    fixed = DecoySettings{*cfg.mu, *cfg.nu, *cfg.omega, cfg.p_mu, cfg.p_nu, cfg.p_omega};
  }
  const auto points = simulate_rate_curve(sim, cfg.detector_model(),
                                          make_grid(cfg.loss_min, cfg.loss_max, cfg.loss_step),
                                          curve ? &*curve : nullptr, fixed, cfg.threads);
  Table t;
  t.columns = {"loss_db", "mu", "nu", "omega", "y1", "r_t1", "e_f1", "e_f_upper", "k", "rate_bits_per_s"};
  for (const auto& p : points) {
    const auto& b = p.breakdown;
    t.rows.push_back({p.loss_db, p.settings.mu, p.settings.nu, p.settings.omega, b.y_t1, b.r_t1,
                      b.e_f1, b.e_f_upper, b.k, b.rate_bits});
  }
  return t;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const sdp::CertificationError*>(&e)) return "certification_error";
  if (dynamic_cast<const sdp::SolverError*>(&e)) return "solver_error";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const OutOfRange*>(&e)) return "out_of_range";
  if (dynamic_cast<const UndefinedQuantity*>(&e)) return "undefined_quantity";
  if (dynamic_cast<const ParseError*>(&e)) return "parse_error";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal_error";
}

void report(std::ostream& err, const std::string& kind, const std::string& message) {
  err << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

const char* to_string(Command c) {
  switch (c) {
    case Command::Bound: return "bound";
    case Command::Curve: return "curve";
    case Command::Tolerance: return "tolerance";
    case Command::Decoy: return "decoy";
    case Command::Simulate: return "simulate";
  }
  return "?";
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// ------------------------------------------------------------ RunConfig

void RunConfig::validate() const {
  require_dimension(d);
  if (d > 10) throw InvalidArgument("d = " + std::to_string(d) + " is too large for dense SDPs (max 10)");
  parse_subset(subset, d);
  for (int dd : dims) {
    require_dimension(dd);
    if (dd > 10) throw InvalidArgument("dimension too large (max 10)");
  }
  if (command == Command::Tolerance) {
    for (int dd : dims.empty() ? std::vector<int>{d} : dims) {
      for (const auto& spec : split_subset_list(subsets)) parse_subset(spec, dd);
    }
  }
  const double top = static_cast<double>(d - 1) / d;
  if (command == Command::Bound) {
    if (!qber) throw InvalidArgument("bound requires --qber");
    if (!(*qber >= 0.0 && *qber <= top)) throw InvalidArgument("--qber outside [0, (d-1)/d]");
    if (qber_f && !(*qber_f >= 0.0 && *qber_f <= top)) {
      throw InvalidArgument("--qber-f outside [0, (d-1)/d]");
    }
  }
  if (!(grid_step > 0.0) || !(grid_min >= 0.0) || !(grid_max >= grid_min) || grid_max > top) {
    throw InvalidArgument("curve grid must satisfy 0 <= min <= max <= (d-1)/d with step > 0");
  }
  if (!(gap_tolerance > 0.0) || !(feas_tolerance > 0.0) || max_iterations <= 0) {
    throw InvalidArgument("solver tolerances and iteration limit must be positive");
  }
  require_choice(format, {"auto", "csv", "json"}, "--format");
  require_choice(lookup, {"conservative", "strict"}, "--lookup");
  require_choice(leak, {"aggregate", "signal"}, "--leak");
  require_choice(detector, {"ideal", "saturating"}, "--detector");
  require_choice(saturation_load, {"sifted", "arrivals"}, "--saturation-load");
  if (!(ec_efficiency >= 1.0)) throw InvalidArgument("--ec-efficiency must be >= 1");
  if (symbol_rate && !(*symbol_rate > 0.0)) throw InvalidArgument("--symbol-rate must be positive");
  if (command == Command::Decoy) {
    if (input.empty()) throw InvalidArgument("decoy requires --input");
    DecoySettings s{mu.value_or(0.5), nu.value_or(0.1), omega.value_or(0.0), p_mu, p_nu, p_omega};
    if (mu && nu && omega) s.validate();
    if (!(p_mu > 0.0 && p_nu > 0.0 && p_omega > 0.0) || std::abs(p_mu + p_nu + p_omega - 1.0) > 1e-9) {
      throw InvalidArgument("intensity probabilities must be positive and sum to 1");
    }
  }
  if (command == Command::Simulate) {
    simulation_params().validate();
    qkdbound::validate(detector_model());
    if (!(loss_step > 0.0) || !(loss_min >= 0.0) || !(loss_max >= loss_min)) {
      throw InvalidArgument("loss grid must satisfy 0 <= min <= max with step > 0");
    }
    if (fixed_intensities) {
      if (!mu || !nu || !omega) throw InvalidArgument("--fixed-intensities requires --mu, --nu and --omega");
      DecoySettings{*mu, *nu, *omega, p_mu, p_nu, p_omega}.validate();
    }
  }
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::string dims_text;
  for (std::size_t i = 0; i < dims.size(); ++i) dims_text += (i ? "," : "") + std::to_string(dims[i]);
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"command", to_string(command)},
      {"d", std::to_string(d)},
      {"subset", subset},
      {"subsets", subsets},
      {"dims", dims_text.empty() ? "default" : dims_text},
      {"qber", opt_text(qber)},
      {"qber_f", opt_text(qber_f)},
      {"grid_min", format_number(grid_min)},
      {"grid_max", format_number(grid_max)},
      {"grid_step", format_number(grid_step)},
      {"gap_tol", format_number(gap_tolerance)},
      {"feas_tol", format_number(feas_tolerance)},
      {"max_iter", std::to_string(max_iterations)},
      {"tt_block", b(tt_block)},
      {"alice_marginal", b(alice_marginal)},
      {"curve_file", curve_file.empty() ? "none" : curve_file},
      {"input", input.empty() ? "none" : input},
      {"mu", opt_text(mu)},
      {"nu", opt_text(nu)},
      {"omega", opt_text(omega)},
      {"p_mu", format_number(p_mu)},
      {"p_nu", format_number(p_nu)},
      {"p_omega", format_number(p_omega)},
      {"symbol_rate", format_number(symbol_rate.value_or(2500e6 / d))},
      {"lookup", lookup},
      {"leak", leak},
      {"ec_efficiency", format_number(ec_efficiency)},
      {"detector", detector},
      {"eta_det", format_number(eta_det)},
      {"sat_a", format_number(sat_a)},
      {"sat_b", format_number(sat_b)},
      {"saturation_load", saturation_load},
      {"p_dark", format_number(p_dark)},
      {"e_d_t", format_number(e_d_t.value_or(e_d.value_or(0.005 * d)))},
      {"e_d_f", format_number(e_d_f.value_or(e_d.value_or(0.005 * d)))},
      {"p_t", format_number(p_t)},
      {"intensity_lo", format_number(intensity_lo)},
      {"intensity_hi", format_number(intensity_hi)},
      {"min_separation", format_number(min_separation)},
      {"loss_min", format_number(loss_min)},
      {"loss_max", format_number(loss_max)},
      {"loss_step", format_number(loss_step)},
      {"fixed_intensities", b(fixed_intensities)},
  };
}

BoundOptions RunConfig::bound_options() const {
  BoundOptions o;
  o.solver.gap_tolerance = gap_tolerance;
  o.solver.feas_tolerance = feas_tolerance;
  o.solver.max_iterations = max_iterations;
  o.constraints.include_tt_block = tt_block;
  o.constraints.include_alice_marginal = alice_marginal;
  return o;
}

std::vector<double> RunConfig::grid() const { return make_grid(grid_min, grid_max, grid_step); }

DecoyOptions RunConfig::decoy_options() const {
  DecoyOptions o;
  o.lookup = lookup == "strict" ? LookupMode::Strict : LookupMode::Conservative;
  o.leak = leak == "signal" ? LeakSource::Signal : LeakSource::Aggregate;
  o.ec_efficiency = ec_efficiency;
  return o;
}

SimulationParams RunConfig::simulation_params() const {
  SimulationParams s = SimulationParams::defaults(d);
  s.subset = parse_subset(subset, d);
  if (symbol_rate) s.symbol_rate = *symbol_rate;
  s.p_t = p_t;
  s.p_f = 1.0 - p_t;
  s.p_mu = p_mu;
  s.p_nu = p_nu;
  s.p_omega = p_omega;
  s.intensity_lo = intensity_lo;
  s.intensity_hi = intensity_hi;
  s.min_separation = min_separation;
  s.p_dark = p_dark;
  s.e_d_t = e_d_t.value_or(e_d.value_or(s.e_d_t));
  s.e_d_f = e_d_f.value_or(e_d.value_or(s.e_d_f));
  s.load = saturation_load == "arrivals" ? SaturationLoad::Arrivals : SaturationLoad::Sifted;
  s.decoy = decoy_options();
  return s;
}

DetectorModel RunConfig::detector_model() const {
  if (detector == "saturating") return SaturatingDetector{sat_a, sat_b, eta_det};
  return IdealDetector{eta_det};
}

// -------------------------------------------------------------- subsets

Subset parse_subset(const std::string& spec_in, int d) {
  require_dimension(d);
  std::string spec = trim(spec_in);
  if (spec == "full") return full_subset(d);
  bool bracketed = false;
  if (!spec.empty() && spec.front() == '[') {
    if (spec.back() != ']') throw InvalidArgument("unbalanced brackets in subset '" + spec_in + "'");
    spec = spec.substr(1, spec.size() - 2);
    bracketed = true;
  }
  if (spec.empty()) throw InvalidArgument("empty subset specification");
  if (!bracketed && spec.find(',') == std::string::npos) {
    const int k = parse_int(spec, "subset");
    if (k == 0) return {0};
    if (k < 0 || k > d) {
      throw InvalidArgument("subset count " + spec + " outside [1, " + std::to_string(d) + "]");
    }
    Subset s(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(i)] = i;
    return s;
  }
  Subset s;
  for (const std::string& part : split(spec, ',')) s.push_back(parse_int(part, "subset index"));
  const Subset n = normalize_subset(d, s);
  if (n.size() != s.size()) throw InvalidArgument("subset '" + spec_in + "' repeats an index");
  return n;
}

std::vector<std::string> split_subset_list(const std::string& list) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  for (char c : list) {
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (depth < 0) throw InvalidArgument("unbalanced brackets in '" + list + "'");
    if (c == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (depth != 0) throw InvalidArgument("unbalanced brackets in '" + list + "'");
  out.push_back(trim(cur));
  for (const auto& s : out) {
    if (s.empty()) throw InvalidArgument("empty entry in subset list '" + list + "'");
  }
  return out;
}

// ------------------------------------------------------ measured input

MeasuredInput ingest_measured(const std::filesystem::path& path, int d, const Subset& subset) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open measured statistics file " + path.string());
  return ingest_measured(in, d, subset, path.string());
}

MeasuredInput ingest_measured(std::istream& in, int d, const Subset& subset_in,
                              const std::string& source) {
  const Subset subset = normalize_subset(d, subset_in);
  const std::set<int> monitored(subset.begin(), subset.end());

  std::string line;
  int line_no = 0;
  std::vector<std::string> header;
  std::map<std::string, std::size_t> col;
  static const std::set<std::string> known = {"basis", "intensity_label", "mean_photon_number",
                                              "gain", "error_rate", "state_index"};

  struct Row {
    double mean = 0.0;
    double gain = 0.0;
    double error = 0.0;
    std::optional<int> state;
    int line = 0;
  };
  // (basis, intensity) -> rows
  std::map<std::pair<int, int>, std::vector<Row>> groups;

  auto where = [&](int ln, const std::string& column) {
    std::ostringstream os;
    os << source << ": row " << ln;
    if (!column.empty()) os << ", column " << column;
    return os.str();
  };

  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::vector<std::string> fields = split(t, ',');
    if (header.empty()) {
      header = fields;
      for (std::size_t i = 0; i < header.size(); ++i) {
        if (!known.count(header[i])) throw ParseError(where(line_no, header[i]) + ": unknown column");
        if (col.count(header[i])) throw ParseError(where(line_no, header[i]) + ": duplicate column");
        col[header[i]] = i;
      }
      for (const char* req : {"basis", "intensity_label", "mean_photon_number", "gain", "error_rate"}) {
        if (!col.count(req)) throw ParseError(source + ": missing required column " + req);
      }
      continue;
    }
    if (fields.size() != header.size()) {
      throw ParseError(where(line_no, "") + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(fields.size()));
    }
    auto field = [&](const char* name) { return fields[col.at(name)]; };
    auto number = [&](const char* name) {
      try {
        return parse_double(field(name), name);
      } catch (const ParseError& e) {
        throw ParseError(where(line_no, name) + ": " + e.what());
      }
    };
    auto unit = [&](const char* name) {
      const double v = number(name);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ParseError(where(line_no, name) + ": value " + field(name) + " outside [0, 1]");
      }
      return v;
    };

    const std::string basis = field("basis");
    int b = -1;
    if (basis == "T") b = 0;
    else if (basis == "F") b = 1;
    else throw ParseError(where(line_no, "basis") + ": expected T or F, found '" + basis + "'");
    const std::string label = field("intensity_label");
    int k = -1;
    if (label == "mu") k = 0;
    else if (label == "nu") k = 1;
    else if (label == "omega") k = 2;
    else throw ParseError(where(line_no, "intensity_label") + ": expected mu, nu or omega, found '" + label + "'");

    Row r;
    r.line = line_no;
    r.mean = number("mean_photon_number");
    if (r.mean < 0.0) throw ParseError(where(line_no, "mean_photon_number") + ": negative value");
    r.gain = unit("gain");
    r.error = unit("error_rate");
    if (col.count("state_index") && !field("state_index").empty()) {
      try {
        r.state = parse_int(field("state_index"), "state_index");
      } catch (const InvalidArgument& e) {
        throw ParseError(where(line_no, "state_index") + ": " + e.what());
      }
      if (*r.state < 0 || *r.state >= d) {
        throw ParseError(where(line_no, "state_index") + ": index outside [0, d)");
      }
      if (b == 1 && !monitored.count(*r.state)) continue;  // not a transmitted state
    }
    groups[{b, k}].push_back(r);
  }
  if (header.empty()) throw ParseError(source + ": no header row");

  MeasuredInput out;
  for (int b = 0; b < 2; ++b) {
    const char* bname = b == 0 ? "T" : "F";
    bool any = false;
    for (int k = 0; k < 3; ++k) any = any || groups.count({b, k});
    if (!any) throw InvalidArgument(std::string("missing ") + bname + "-basis statistics");
    BasisStatistics& bs = b == 0 ? out.stats.t : out.stats.f;
    for (int k = 0; k < 3; ++k) {
      const char* kname = to_string(static_cast<Intensity>(k));
      auto it = groups.find({b, k});
      if (it == groups.end()) {
        throw InvalidArgument(std::string("missing ") + bname + "-basis statistics for " + kname);
      }
      const auto& rows = it->second;
      const bool per_state = rows.front().state.has_value();
      std::set<int> seen;
      double gain_sum = 0.0, err_sum = 0.0;
      for (const Row& r : rows) {
        if (r.state.has_value() != per_state || (!per_state && rows.size() > 1)) {
          throw ParseError(where(r.line, "") + ": duplicate " + bname + "/" + kname + " statistics");
        }
        if (per_state && !seen.insert(*r.state).second) {
          throw ParseError(where(r.line, "state_index") + ": state repeated");
        }
        if (std::abs(r.mean - rows.front().mean) > 1e-12 * std::max(1.0, r.mean)) {
          throw ParseError(where(r.line, "mean_photon_number") + ": differs from row " +
                           std::to_string(rows.front().line));
        }
        gain_sum += r.gain;
        err_sum += r.gain * r.error;
      }
      const auto idx = static_cast<std::size_t>(k);
      bs.gain[idx] = gain_sum / static_cast<double>(rows.size());
      bs.error[idx] = gain_sum > 0.0 ? err_sum / gain_sum : 0.0;
      const double mean = rows.front().mean;
      if (b == 0) {
        out.mean_photon_number[idx] = mean;
      } else if (std::abs(out.mean_photon_number[idx] - mean) > 1e-12 * std::max(1.0, mean)) {
        throw ParseError(where(rows.front().line, "mean_photon_number") + ": " + kname +
                         " differs between the T and F bases");
      }
    }
  }
  out.stats.validate();
  return out;
}

// --------------------------------------------------------------- output

void write_output(const Table& table, OutputFormat format,
                  const std::vector<std::pair<std::string, std::string>>& config,
                  std::ostream& out) {
  if (table.columns.empty() || table.rows.empty()) throw InvalidArgument("nothing to write");
  if (format == OutputFormat::Csv) {
    for (const auto& [k, v] : config) out << "# " << k << '=' << v << '\n';
    for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
    out << '\n';
    for (const auto& row : table.rows) {
      for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << cell_csv(row[i]);
      out << '\n';
    }
  } else {
    // Insertion order keeps the column order of the CSV form.
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    doc["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config) doc["config"][k] = v;
    doc["columns"] = table.columns;
    doc["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : table.rows) {
      nlohmann::ordered_json r = nlohmann::ordered_json::object();
      for (std::size_t i = 0; i < row.size(); ++i) r[table.columns[i]] = cell_json(row[i]);
      doc["rows"].push_back(std::move(r));
    }
    out << doc.dump(2) << '\n';
  }
  if (!out) throw Error("failed writing output");
}

void write_output(const Table& table, OutputFormat format,
                  const std::vector<std::pair<std::string, std::string>>& config,
                  const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write output file " + path.string());
  write_output(table, format, config, out);
}

std::filesystem::path cache_directory(const RunConfig& cfg) {
  if (!cfg.cache_dir.empty()) return cfg.cache_dir;
  if (const char* env = std::getenv("QKDBOUND_CACHE_DIR"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) {
    return std::filesystem::path(home) / ".cache" / "qkdbound";
  }
  return {};
}

// ------------------------------------------------------------------ run

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"Phase-error bounds and key rates for d-dimensional QKD with reduced monitoring"};
  app.set_config("--config", "", "Flat key=value file; command-line flags take precedence");
  app.require_subcommand(1);

  app.add_option("--d", cfg.d, "Dimension");
  app.add_option("--subset", cfg.subset, "Monitoring states: full, a count, 0, or a list such as 0,2");
  app.add_option("--subsets", cfg.subsets, "Subset specs for tolerance, e.g. full,3,[0,2],1");
  app.add_option("--dims", cfg.dims, "Dimensions for tolerance")->delimiter(',');
  app.add_option("--qber", cfg.qber, "Error rate e_T");
  app.add_option("--qber-f", cfg.qber_f, "Phase-basis error rate e_F (defaults to --qber)");
  app.add_option("--grid-min", cfg.grid_min);
  app.add_option("--grid-max", cfg.grid_max);
  app.add_option("--grid-step", cfg.grid_step);
  app.add_option("--gap-tol", cfg.gap_tolerance, "SDP duality-gap tolerance");
  app.add_option("--feas-tol", cfg.feas_tolerance, "SDP feasibility tolerance");
  app.add_option("--max-iter", cfg.max_iterations, "SDP iteration limit");
  app.add_flag("--tt-block", cfg.tt_block, "Add fine-grained T-T constraints");
  app.add_flag("--alice-marginal", cfg.alice_marginal, "Fix Alice's reduced state to I/d");
  app.add_option("--threads", cfg.threads, "Worker threads (0 = hardware)");
  app.add_option("--cache-dir", cfg.cache_dir, "Curve cache directory (else QKDBOUND_CACHE_DIR)");
  app.add_flag("--no-cache", cfg.no_cache, "Neither read nor write cached curves");
  app.add_option("--curve-file", cfg.curve_file, "Use this curve instead of the cache");
  app.add_option("--save-curve", cfg.save_curve, "Also write the curve document here");
  app.add_option("--input", cfg.input, "Measured statistics CSV");
  app.add_option("--mu", cfg.mu);
  app.add_option("--nu", cfg.nu);
  app.add_option("--omega", cfg.omega);
  app.add_option("--p-mu", cfg.p_mu);
  app.add_option("--p-nu", cfg.p_nu);
  app.add_option("--p-omega", cfg.p_omega);
  app.add_option("--symbol-rate", cfg.symbol_rate, "Hz, default 2500/d MHz");
  app.add_option("--lookup", cfg.lookup, "conservative | strict");
  app.add_option("--leak", cfg.leak, "aggregate | signal");
  app.add_option("--ec-efficiency", cfg.ec_efficiency);
  app.add_option("--detector", cfg.detector, "ideal | saturating");
  app.add_option("--eta-det", cfg.eta_det);
  app.add_option("--sat-a", cfg.sat_a, "Saturation count rate a (Hz)");
  app.add_option("--sat-b", cfg.sat_b, "Saturation scale b (Hz)");
  app.add_option("--saturation-load", cfg.saturation_load, "sifted | arrivals");
  app.add_option("--p-dark", cfg.p_dark);
  app.add_option("--e-d", cfg.e_d, "Intrinsic error rate, both bases (default 0.005 d)");
  app.add_option("--e-d-t", cfg.e_d_t);
  app.add_option("--e-d-f", cfg.e_d_f);
  app.add_option("--p-t", cfg.p_t, "T-basis probability");
  app.add_option("--intensity-lo", cfg.intensity_lo);
  app.add_option("--intensity-hi", cfg.intensity_hi);
  app.add_option("--min-separation", cfg.min_separation);
  app.add_option("--loss-min", cfg.loss_min);
  app.add_option("--loss-max", cfg.loss_max);
  app.add_option("--loss-step", cfg.loss_step);
  app.add_flag("--fixed-intensities", cfg.fixed_intensities, "Use --mu/--nu/--omega at every loss");
  app.add_option("--format", cfg.format, "auto | csv | json");
  app.add_option("--output,-o", cfg.output, "Output file (default stdout)");

  const std::pair<Command, const char*> commands[] = {
      {Command::Bound, "Phase-error bound at one error rate"},
      {Command::Curve, "Tabulate the bound over a grid and cache it"},
      {Command::Tolerance, "Error tolerance per dimension and subset"},
      {Command::Decoy, "Key rate from measured decoy statistics"},
      {Command::Simulate, "Key rate versus channel loss"},
  };
  for (const auto& [c, help] : commands) {
    app.add_subcommand(to_string(c), help)->fallthrough()->callback([&cfg, c = c] { cfg.command = c; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report(err, "usage", e.what());
    return 2;
  }
  for (const auto& [c, help] : commands) {
    if (app.got_subcommand(to_string(c))) cfg.command = c;
  }

  try {
    cfg.validate();
  } catch (const Error& e) {
    report(err, "usage", e.what());
    return 2;
  }

  try {
    const Context ctx{cfg, err};
    Table table;
    switch (cfg.command) {
      case Command::Bound: table = run_bound(ctx); break;
      case Command::Curve: table = run_curve(ctx); break;
      case Command::Tolerance: table = run_tolerance(ctx); break;
      case Command::Decoy: table = run_decoy(ctx); break;
      case Command::Simulate: table = run_simulate(ctx); break;
    }
    OutputFormat fmt = cfg.format == "json" ? OutputFormat::Json : OutputFormat::Csv;
    if (cfg.format == "auto" && cfg.command == Command::Bound) fmt = OutputFormat::Json;
    if (cfg.output.empty()) {
      write_output(table, fmt, cfg.entries(), out);
    } else {
      write_output(table, fmt, cfg.entries(), std::filesystem::path(cfg.output));
    }
  } catch (const std::exception& e) {
    report(err, error_kind(e), e.what());
    return 1;
  }
  return 0;
}

}  // namespace qkdbound::cli
