#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "crl/commands.hpp"
#include "crl/report.hpp"
#include "generators.hpp"

using namespace crl;
using crl::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run crl_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::string& dir, const std::string& name) {
  return read_text_file((fs::path(dir) / name).string());
}

double json_number(const std::string& dir, const std::string& file, const std::string& key) {
  return nlohmann::json::parse(slurp(dir, file)).at(key).get<double>();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("cli: version and usage errors") {
  const auto v = crl_run({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(kToolVersion) != std::string::npos);
  CHECK(crl_run({"frobnicate"}).code == 2);
  CHECK(crl_run({"eval"}).code == 2);
}

TEST_CASE("cli: configuration errors exit with 2 and leave error.json") {
  const auto dir = scratch_dir("cli_cfg");
  const auto r = crl_run({"--mode", "crl-layer", "--layers", "2", "-o", dir, "norms"});
  CHECK(r.code == 2);
  CHECK(r.err.find("\"config\"") != std::string::npos);
  const auto bad = crl_run({"--set", "ppo.bogus=1", "-o", dir, "norms"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("ppo.bogus") != std::string::npos);
}

TEST_CASE("cli: train, evaluate, baselines and analyses") {
  const auto root = scratch_dir("cli_flow");
  const std::string train_a = root + "/train_a";
  const std::string train_b = root + "/train_b";
  REQUIRE(crl_run({"--steps", "20", "-o", train_a, "train"}).code == 0);
  REQUIRE(crl_run({"--steps", "20", "-o", train_b, "train"}).code == 0);

  SUBCASE("reruns with one seed are byte-identical apart from the manifest") {
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(train_a)) names.insert(e.path().filename().string());
    CHECK(names.count("metrics.csv") == 1);
    CHECK(names.count("traces.jsonl") == 1);
    CHECK(names.count("final.crla") == 1);
    CHECK(names.count("manifest.json") == 1);
    for (const auto& name : names) {
      if (name == "manifest.json") continue;
      CHECK_MESSAGE(slurp(train_a, name) == slurp(train_b, name), name);
    }
    const auto man = nlohmann::json::parse(slurp(train_a, "manifest.json"));
    CHECK(man.at("sealed").get<bool>());
    CHECK(man.at("command").get<std::string>() == "train");
  }

  SUBCASE("evaluation at zero coefficient equals the unsteered baseline") {
    const std::string ev = root + "/eval0";
    const std::string none = root + "/none";
    REQUIRE(crl_run({"--coefficient", "0", "-o", ev, "eval", "--checkpoint", train_a + "/final.crla"}).code == 0);
    REQUIRE(crl_run({"-o", none, "baseline", "none"}).code == 0);
    CHECK(json_number(ev, "eval.json", "accuracy") == json_number(none, "eval.json", "accuracy"));
    for (const auto& row : csv_rows(slurp(ev, "samples.csv"))) CHECK(row[2] == row[3]);
  }

  SUBCASE("analyses read earlier run directories") {
    const std::string inv = root + "/invalid";
    REQUIRE(crl_run({"-o", inv, "analyze", "invalid", "--run", train_a}).code == 0);
    CHECK(fs::exists(inv + "/invalid.csv"));
    const std::string critic = root + "/critic";
    REQUIRE(crl_run({"-o", critic, "analyze", "critic", "--run", train_a}).code == 0);
    CHECK(fs::exists(critic + "/critic_summary.csv"));
    const std::string br = root + "/branches";
    REQUIRE(crl_run({"-o", br, "analyze", "branches", "--run", train_a, "--run", train_b}).code == 0);
    CHECK(slurp(br, "branches.jsonl").empty());
    CHECK(crl_run({"-o", root + "/x", "analyze", "features", "--run", root + "/missing"}).code != 0);
  }
}

TEST_CASE("cli: the most impactful trained feature is an oracle feature") {
  const auto root = scratch_dir("cli_oracle");
  REQUIRE(crl_run({"-o", root + "/train", "train"}).code == 0);
  REQUIRE(crl_run({"-o", root + "/feat", "analyze", "features", "--run", root + "/train"}).code == 0);
  REQUIRE(crl_run({"-o", root + "/oracle", "oracle"}).code == 0);

  std::set<std::string> oracle;
  for (const auto& row : csv_rows(slurp(root + "/oracle", "oracle.csv"))) {
    if (row.size() < 5) continue;
    std::istringstream fs_(row[4]);
    std::string f;
    while (fs_ >> f) oracle.insert(f);
  }
  const auto feats = csv_rows(slurp(root + "/feat", "features.csv"));
  REQUIRE_FALSE(feats.empty());
  CHECK(std::stod(feats[0][5]) > 0.0);
  CHECK(oracle.count(feats[0][0]) == 1);
}

TEST_CASE("cli: sweep grid shape and zero column") {
  const auto root = scratch_dir("cli_sweep");
  REQUIRE(crl_run({"--set", "sweep.max_steps=5", "--set", "sweep.coefficients=0,8", "-o", root + "/sweep",
                   "sweep"}).code == 0);
  REQUIRE(crl_run({"-o", root + "/none", "baseline", "none"}).code == 0);
  const auto rows = csv_rows(slurp(root + "/sweep", "sweep.csv"));
  REQUIRE(rows.size() == 4);
  const double none = json_number(root + "/none", "eval.json", "accuracy");
  for (const auto& row : rows) {
    if (std::stod(row[1]) == 0.0) CHECK(std::stod(row[2]) == doctest::Approx(none).epsilon(1e-12));
  }
}

TEST_CASE("cli: a minimal config file with only task and seed") {
  const auto root = scratch_dir("cli_minimal");
  {
    std::ofstream os(root + "/run.ini");
    os << "[run]\nseed = 42\n[task]\nhorizon = 1\n";
  }
  REQUIRE(crl_run({"-c", root + "/run.ini", "-o", root + "/norms", "norms"}).code == 0);
  const std::string written = slurp(root + "/norms", "config.ini");
  CHECK(written.find("max_steps = 500") != std::string::npos);
}
