#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "qkdbound/cli.hpp"
#include "qkdbound/errors.hpp"

using namespace qkdbound;
using namespace qkdbound::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "qkdbound");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("QKDBOUND_TEST_TMP");
  fs::path dir = env && *env ? fs::path(env) : fs::temp_directory_path() / "qkdbound_cli_test";
  dir /= name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// First non-comment line of a CSV document.
std::string csv_header(const std::string& doc) {
  std::istringstream in(doc);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') return line;
  }
  return {};
}

std::vector<std::string> csv_rows(const std::string& doc) {
  std::istringstream in(doc);
  std::string line;
  std::vector<std::string> rows;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    rows.push_back(line);
  }
  return rows;
}

const char* kWellFormed =
    "basis,intensity_label,mean_photon_number,gain,error_rate\n"
    "T,mu,0.66,0.0631,0.021\n"
    "T,nu,0.16,0.0158,0.023\n"
    "T,omega,0.05,0.0050,0.030\n"
    "F,mu,0.66,0.0630,0.031\n"
    "F,nu,0.16,0.0157,0.034\n"
    "F,omega,0.05,0.0049,0.041\n";

}  // namespace

TEST_CASE("subset grammar") {
  CHECK(parse_subset("full", 4) == Subset{0, 1, 2, 3});
  CHECK(parse_subset("3", 4) == Subset{0, 1, 2});
  CHECK(parse_subset("2", 4) == Subset{0, 1});
  CHECK(parse_subset("1", 4) == Subset{0});
  CHECK(parse_subset("0", 4) == Subset{0});
  CHECK(parse_subset("0,2", 4) == Subset{0, 2});
  CHECK(parse_subset("[2, 0]", 4) == Subset{0, 2});
  CHECK(parse_subset("[3]", 4) == Subset{3});
  CHECK(parse_subset(" full ", 3) == Subset{0, 1, 2});
  CHECK_THROWS_AS(parse_subset("5", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("0,4", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("0,0", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("[0,1", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("two", 4), InvalidArgument);
  CHECK_THROWS_AS(parse_subset("full", 1), InvalidArgument);

  CHECK(split_subset_list("full,3,[0,2],1") == std::vector<std::string>{"full", "3", "[0,2]", "1"});
  CHECK(split_subset_list("full") == std::vector<std::string>{"full"});
  CHECK_THROWS_AS(split_subset_list("full,,1"), InvalidArgument);
  CHECK_THROWS_AS(split_subset_list("[0,1"), InvalidArgument);
  CHECK_THROWS_AS(split_subset_list("0]"), InvalidArgument);
}

TEST_CASE("measured statistics ingestion") {
  SUBCASE("well-formed file") {
    std::istringstream in(kWellFormed);
    const MeasuredInput m = ingest_measured(in, 4, full_subset(4));
    CHECK(m.mean_photon_number == std::array<double, 3>{0.66, 0.16, 0.05});
    CHECK(m.stats.t.gain[0] == 0.0631);
    CHECK(m.stats.t.error[2] == doctest::Approx(0.030).epsilon(1e-15));
    CHECK(m.stats.f.gain[1] == 0.0157);
    CHECK(m.stats.f.error[0] == 0.031);
  }
  SUBCASE("comments, blank lines and column order") {
    std::istringstream in(
        "# bench run\n\n"
        "gain,error_rate,basis,mean_photon_number,intensity_label\n"
        "0.06,0.02,T,0.5,mu\n0.01,0.02,T,0.1,nu\n0.002,0.1,T,0.01,omega\n"
        "0.06,0.03,F,0.5,mu\n0.01,0.03,F,0.1,nu\n0.002,0.1,F,0.01,omega\n");
    const MeasuredInput m = ingest_measured(in, 2, full_subset(2));
    CHECK(m.stats.f.error[0] == 0.03);
    CHECK(m.mean_photon_number[2] == 0.01);
  }
  SUBCASE("gain out of range names the row") {
    std::string doc = kWellFormed;
    doc.replace(doc.find("0.0158"), 6, "1.2");
    std::istringstream in(doc);
    try {
      ingest_measured(in, 4, full_subset(4), "bench.csv");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("bench.csv") != std::string::npos);
      CHECK(msg.find("row 3") != std::string::npos);
      CHECK(msg.find("gain") != std::string::npos);
    }
  }
  SUBCASE("only T-basis rows") {
    std::istringstream in(
        "basis,intensity_label,mean_photon_number,gain,error_rate\n"
        "T,mu,0.66,0.0631,0.021\nT,nu,0.16,0.0158,0.023\nT,omega,0.05,0.0050,0.030\n");
    try {
      ingest_measured(in, 4, full_subset(4));
      FAIL("expected a validation error");
    } catch (const InvalidArgument& e) {
      CHECK(std::string(e.what()).find("missing F-basis statistics") != std::string::npos);
    }
  }
  SUBCASE("missing intensity") {
    std::string doc = kWellFormed;
    doc.erase(doc.find("F,omega"));
    std::istringstream in(doc);
    CHECK_THROWS_AS(ingest_measured(in, 4, full_subset(4)), InvalidArgument);
  }
  SUBCASE("schema violations") {
    for (const char* bad : {
             "basis,intensity_label,mean_photon_number,gain\nT,mu,0.5,0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate,colour\nT,mu,0.5,0.1,0.1,red\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nX,mu,0.5,0.1,0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nT,lambda,0.5,0.1,0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nT,mu,abc,0.1,0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nT,mu,0.5,0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nT,mu,0.5,0.1,-0.1\n",
             "basis,intensity_label,mean_photon_number,gain,error_rate\nT,mu,0.5,0.1,0.1\nT,mu,0.5,0.1,0.1\n",
             "",
         }) {
      std::istringstream in(bad);
      CHECK_THROWS_AS(ingest_measured(in, 4, full_subset(4)), ParseError);
    }
  }
  SUBCASE("per-state rows are combined over the subset") {
    // F-basis rows for states 0..3; only {0, 2} are sent.
    const double fg[4] = {0.050, 0.070, 0.060, 0.090};
    const double fe[4] = {0.020, 0.300, 0.040, 0.400};
    std::ostringstream doc;
    doc << "basis,intensity_label,mean_photon_number,gain,error_rate,state_index\n";
    for (const char* k : {"mu", "nu", "omega"}) {
      const double mean = std::string(k) == "mu" ? 0.6 : std::string(k) == "nu" ? 0.15 : 0.03;
      doc << "T," << k << ',' << mean << ",0.05,0.02,\n";
      for (int s = 0; s < 4; ++s) doc << "F," << k << ',' << mean << ',' << fg[s] << ',' << fe[s] << ',' << s << '\n';
    }
    std::istringstream in(doc.str());
    const MeasuredInput m = ingest_measured(in, 4, Subset{0, 2});
    const double gain = (fg[0] + fg[2]) / 2;
    const double err = (fg[0] * fe[0] + fg[2] * fe[2]) / (fg[0] + fg[2]);
    for (int k = 0; k < 3; ++k) {
      CHECK(m.stats.f.gain[static_cast<std::size_t>(k)] == doctest::Approx(gain).epsilon(1e-15));
      CHECK(m.stats.f.error[static_cast<std::size_t>(k)] == doctest::Approx(err).epsilon(1e-15));
      CHECK(m.stats.t.gain[static_cast<std::size_t>(k)] == 0.05);
    }
  }
  SUBCASE("file path") {
    const fs::path dir = scratch("ingest");
    std::ofstream(dir / "stats.csv") << kWellFormed;
    CHECK(ingest_measured(dir / "stats.csv", 4, full_subset(4)).stats.t.gain[0] == 0.0631);
    CHECK_THROWS_AS(ingest_measured(dir / "absent.csv", 4, full_subset(4)), ParseError);
  }
}

TEST_CASE("output writer") {
  Table t;
  t.columns = {"a", "b", "c", "d"};
  t.rows.push_back({1.0 / 3.0, 7LL, true, std::string("x,y")});
  t.rows.push_back({1e-12, -2LL, false, std::string("plain")});
  const std::vector<std::pair<std::string, std::string>> cfg = {{"d", "4"}, {"subset", "full"}};

  std::ostringstream csv;
  write_output(t, OutputFormat::Csv, cfg, csv);
  CHECK(csv.str() ==
        "# d=4\n# subset=full\na,b,c,d\n0.333333333,7,true,\"x,y\"\n1e-12,-2,false,plain\n");

  std::ostringstream js;
  write_output(t, OutputFormat::Json, cfg, js);
  const auto doc = nlohmann::json::parse(js.str());
  CHECK(doc["config"]["subset"] == "full");
  CHECK(doc["columns"].size() == 4);
  CHECK(doc["rows"][0]["a"].get<double>() == 1.0 / 3.0);
  CHECK(doc["rows"][0]["b"] == 7);
  CHECK(doc["rows"][1]["c"] == false);
  CHECK(doc["rows"][0]["d"] == "x,y");

  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(123456789.123) == "123456789");
  CHECK(format_number(std::nan("")) == "nan");

  CHECK_THROWS_AS(write_output(Table{}, OutputFormat::Csv, cfg, csv), InvalidArgument);
  const fs::path dir = scratch("writer");
  CHECK_THROWS_AS(write_output(t, OutputFormat::Csv, cfg, dir / "missing" / "out.csv"), Error);
}

TEST_CASE("bound command") {
  const Outcome o = invoke({"bound", "--d", "4", "--subset", "0", "--qber", "0.05"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const auto doc = nlohmann::json::parse(o.out);
  REQUIRE(doc["rows"].size() == 1);
  const auto& r = doc["rows"][0];
  CHECK(std::abs(r["e_f_upper"].get<double>() - 0.239) < 2e-3);
  CHECK(r["duality_gap"].get<double>() <= 1e-6);
  CHECK(r["iterations"].get<int>() > 0);
  CHECK(r["subset"] == "0");
  CHECK(doc["config"]["command"] == "bound");
  CHECK(doc["config"]["qber"] == "0.05");

  const Outcome csv = invoke({"bound", "--d", "2", "--qber", "0.03", "--format", "csv"});
  REQUIRE(csv.code == 0);
  CHECK(csv_header(csv.out).rfind("d,subset,qber_t,qber_f,e_f_upper", 0) == 0);
}

TEST_CASE("every output embeds the full configuration") {
  RunConfig defaults;
  const Outcome o = invoke({"bound", "--d", "3", "--qber", "0.02"});
  REQUIRE(o.code == 0);
  const auto doc = nlohmann::json::parse(o.out);
  const auto entries = defaults.entries();
  CHECK(doc["config"].size() == entries.size());
  for (const auto& [k, v] : entries) CHECK_MESSAGE(doc["config"].contains(k), k);
  CHECK(doc["config"]["d"] == "3");
}

TEST_CASE("usage and computation errors") {
  SUBCASE("unknown flag") {
    const Outcome o = invoke({"bound", "--bogus", "1"});
    CHECK(o.code == 2);
    CHECK(nlohmann::json::parse(o.err)["error"]["kind"] == "usage");
  }
  SUBCASE("no subcommand") { CHECK(invoke({}).code == 2); }
  SUBCASE("invalid values") {
    for (const std::vector<std::string>& args : std::vector<std::vector<std::string>>{
             {"bound", "--d", "1", "--qber", "0.1"},
             {"bound", "--d", "4"},
             {"bound", "--d", "4", "--qber", "0.8"},
             {"bound", "--d", "4", "--qber", "0.1", "--subset", "9"},
             {"bound", "--d", "4", "--qber", "0.1", "--format", "xml"},
             {"curve", "--d", "2", "--grid-max", "0.6"},
             {"decoy", "--d", "4"},
             {"simulate", "--p-t", "1.5"},
             {"simulate", "--fixed-intensities", "--mu", "0.5"},
             {"tolerance", "--subsets", "full,,1"},
         }) {
      const Outcome o = invoke(args);
      CHECK_MESSAGE(o.code == 2, args[0] << ' ' << args[1]);
      const auto err = nlohmann::json::parse(o.err);
      CHECK(err["error"]["kind"] == "usage");
      CHECK(!err["error"]["message"].get<std::string>().empty());
      CHECK(o.out.empty());
    }
  }
  SUBCASE("computation error exits 1 with the module message") {
    const fs::path dir = scratch("errors");
    std::ofstream(dir / "t_only.csv") << "basis,intensity_label,mean_photon_number,gain,error_rate\n"
                                         "T,mu,0.66,0.0631,0.021\nT,nu,0.16,0.0158,0.023\n"
                                         "T,omega,0.05,0.0050,0.030\n";
    const Outcome o = invoke({"decoy", "--d", "4", "--input", (dir / "t_only.csv").string()});
    CHECK(o.code == 1);
    const auto err = nlohmann::json::parse(o.err);
    CHECK(err["error"]["kind"] == "invalid_argument");
    CHECK(err["error"]["message"].get<std::string>().find("missing F-basis statistics") != std::string::npos);

    const Outcome solver = invoke({"bound", "--d", "4", "--subset", "0", "--qber", "0.05", "--max-iter", "2"});
    CHECK(solver.code == 1);
    CHECK(nlohmann::json::parse(solver.err)["error"]["kind"] == "solver_error");
  }
  SUBCASE("help") {
    const Outcome o = invoke({"--help"});
    CHECK(o.code == 0);
    CHECK(o.out.find("simulate") != std::string::npos);
  }
}

TEST_CASE("curve command: header, cache and determinism") {
  const fs::path dir = scratch("curve");
  const std::vector<std::string> base = {"curve",      "--d",        "3",          "--subset",
                                         "1",          "--grid-max", "0.04",       "--grid-step",
                                         "0.01",       "--cache-dir", (dir / "cache").string()};
  auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };

  const Outcome first = invoke(with({"--output", (dir / "a.csv").string()}));
  REQUIRE_MESSAGE(first.code == 0, first.err);
  const std::string a = slurp(dir / "a.csv");
  CHECK(csv_header(a) == "qber,e_f_upper,duality_gap");
  const auto rows = csv_rows(a);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].rfind("0,", 0) == 0);
  CHECK(rows[2].rfind("0.02,0.0773", 0) == 0);
  CHECK(a.find("# command=curve\n") != std::string::npos);
  CHECK(a.find("# subset=1\n") != std::string::npos);

  std::size_t cached = 0;
  for (const auto& e : fs::directory_iterator(dir / "cache")) cached += e.path().extension() == ".json";
  CHECK(cached == 1);

  // Second run reads the cache, third recomputes; all three are byte-identical.
  const Outcome second = invoke(with({"--output", (dir / "b.csv").string()}));
  REQUIRE(second.code == 0);
  const Outcome third = invoke(with({"--no-cache", "--output", (dir / "c.csv").string(),
                                     "--save-curve", (dir / "curve.json").string()}));
  REQUIRE(third.code == 0);
  CHECK(slurp(dir / "b.csv") == a);
  CHECK(slurp(dir / "c.csv").substr(slurp(dir / "c.csv").find("qber,")) == a.substr(a.find("qber,")));

  // Saved curve reproduces the table exactly.
  const BoundCurve c = load_curve(dir / "curve.json");
  CHECK(c.d == 3);
  CHECK(c.subset == Subset{0});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].rfind(format_number(c.grid[i]) + "," + format_number(c.bounds[i]) + ",", 0) == 0);
  }

  // A corrupted cache entry is ignored with a warning.
  for (const auto& e : fs::directory_iterator(dir / "cache")) std::ofstream(e.path()) << "{ broken";
  const Outcome fourth = invoke(with({}));
  REQUIRE(fourth.code == 0);
  CHECK(fourth.err.find("warning") != std::string::npos);
  CHECK(fourth.out.substr(fourth.out.find("qber,")) == a.substr(a.find("qber,")));

  const Outcome json = invoke(with({"--format", "json"}));
  REQUIRE(json.code == 0);
  const auto doc = nlohmann::json::parse(json.out);
  CHECK(doc["columns"] == nlohmann::json::array({"qber", "e_f_upper", "duality_gap"}));
  CHECK(doc["rows"].size() == 5);
}

TEST_CASE("cache directory resolution") {
  RunConfig cfg;
  const char* saved = std::getenv("QKDBOUND_CACHE_DIR");
  const std::string restore = saved ? saved : "";

  ::setenv("QKDBOUND_CACHE_DIR", "/tmp/from-env", 1);
  CHECK(cache_directory(cfg) == fs::path("/tmp/from-env"));
  cfg.cache_dir = "/tmp/from-flag";
  CHECK(cache_directory(cfg) == fs::path("/tmp/from-flag"));
  cfg.cache_dir.clear();
  ::unsetenv("QKDBOUND_CACHE_DIR");
  if (const char* home = std::getenv("HOME"); home && *home) {
    CHECK(cache_directory(cfg) == fs::path(home) / ".cache" / "qkdbound");
  }

  // The environment variable routes the curve command's cache.
  const fs::path dir = scratch("env_cache");
  ::setenv("QKDBOUND_CACHE_DIR", dir.c_str(), 1);
  const Outcome o = invoke({"curve", "--d", "2", "--subset", "1", "--grid-max", "0.02", "--grid-step", "0.01"});
  CHECK(o.code == 0);
  CHECK(!fs::is_empty(dir));
  if (restore.empty()) {
    ::unsetenv("QKDBOUND_CACHE_DIR");
  } else {
    ::setenv("QKDBOUND_CACHE_DIR", restore.c_str(), 1);
  }
}

TEST_CASE("configuration file precedence") {
  const fs::path dir = scratch("config");
  std::ofstream(dir / "run.ini") << "d=3\nqber=0.04\nsubset=2\n";

  const Outcome from_file = invoke({"bound", "--config", (dir / "run.ini").string()});
  REQUIRE_MESSAGE(from_file.code == 0, from_file.err);
  auto doc = nlohmann::json::parse(from_file.out);
  CHECK(doc["config"]["d"] == "3");
  CHECK(doc["config"]["qber"] == "0.04");
  CHECK(doc["config"]["subset"] == "2");
  CHECK(doc["config"]["gap_tol"] == "1e-08");  // default untouched

  const Outcome flag_wins = invoke({"bound", "--config", (dir / "run.ini").string(), "--qber", "0.06"});
  REQUIRE(flag_wins.code == 0);
  doc = nlohmann::json::parse(flag_wins.out);
  CHECK(doc["config"]["qber"] == "0.06");
  CHECK(doc["config"]["d"] == "3");
  CHECK(doc["rows"][0]["qber_t"].get<double>() == 0.06);
}

TEST_CASE("tolerance command") {
  const Outcome o = invoke({"tolerance", "--dims", "2,3", "--subsets", "full,[0]"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(csv_header(o.out) == "d,subset,states,tolerance,root,residual,iterations");
  const auto rows = csv_rows(o.out);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].rfind("2,full,0 1,0.11,0.110", 0) == 0);
  CHECK(rows[1].rfind("2,[0],0,0.11,0.110", 0) == 0);
  CHECK(rows[3].rfind("3,[0],0,0.07", 0) == 0);
}

TEST_CASE("decoy command") {
  const fs::path dir = scratch("decoy");
  std::ofstream(dir / "stats.csv") << kWellFormed;
  const Outcome o = invoke({"decoy", "--d", "4", "--input", (dir / "stats.csv").string(), "--format", "json"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const auto doc = nlohmann::json::parse(o.out);
  const auto& r = doc["rows"][0];
  CHECK(r["mu"].get<double>() == 0.66);
  CHECK(r["used_curve"] == false);
  CHECK(r["y_t1"].get<double>() > 0.0);
  CHECK(r["e_f_upper"].get<double>() == r["e_f1"].get<double>());
  CHECK(doc["config"]["input"] == (dir / "stats.csv").string());

  const Outcome override_mu = invoke({"decoy", "--d", "4", "--input", (dir / "stats.csv").string(),
                                      "--mu", "0.7", "--format", "json"});
  REQUIRE(override_mu.code == 0);
  CHECK(nlohmann::json::parse(override_mu.out)["rows"][0]["mu"].get<double>() == 0.7);
}

TEST_CASE("simulate command") {
  const fs::path dir = scratch("simulate");
  const std::vector<std::string> args = {"simulate",    "--d",        "2",        "--loss-max", "10",
                                         "--loss-step", "5",          "--fixed-intensities",
                                         "--mu",        "0.6",        "--nu",     "0.15",
                                         "--omega",     "0.05",       "--cache-dir", (dir / "cache").string()};
  const Outcome o = invoke(args);
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(csv_header(o.out) == "loss_db,mu,nu,omega,y1,r_t1,e_f1,e_f_upper,k,rate_bits_per_s");
  const auto rows = csv_rows(o.out);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].rfind("0,0.6,0.15,0.05,", 0) == 0);
  CHECK(rows[2].rfind("10,", 0) == 0);
  CHECK(o.out.find("# fixed_intensities=true\n") != std::string::npos);
  CHECK(invoke(args).out == o.out);
}
