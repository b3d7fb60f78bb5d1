// End-to-end checks of the command line front end.  The binary under test is
// passed as argv[1]; every case drives it through std::system with stdout and
// stderr redirected into scratch files.
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_swlp;   // path to the CLI binary under test
fs::path g_scratch;   // per-run scratch root

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << text;
}

/// Runs `swlp <args>` with optional `env VAR=...` prefix and captures both
/// streams.  Arguments are caller-controlled paths without shell metacharacters.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const fs::path out_file = g_scratch / ("stdout." + std::to_string(counter));
  const fs::path err_file = g_scratch / ("stderr." + std::to_string(counter));
  ++counter;
  const std::string cmd = env_prefix + g_swlp + " " + args + " >" + out_file.string() +
                          " 2>" + err_file.string();
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = g_scratch / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json parse_stderr(const RunResult& r) {
  REQUIRE_FALSE(r.err.empty());
  return json::parse(r.err);
}

/// Summary with the reproducibility-exempt wall times zeroed out.
json normalized_summary(const fs::path& dir) {
  json j = json::parse(slurp(dir / "summary.json"));
  for (auto& rec : j.at("suites")) rec["wall_time"] = 0.0;
  return j;
}

const char* kScalarConfig = R"({
  "schema": "swlp-config-v1",
  "instance": "scalar",
  "grid": {"horizon": 0.5, "steps": 64},
  "paths": 48,
  "seed": 7
})";

const char* kHeatConfig = R"({
  "schema": "swlp-config-v1",
  "instance": "heat",
  "grid": {"horizon": 0.25, "steps": 32},
  "cells": 8,
  "paths": 16,
  "seed": 11
})";

}  // namespace

TEST_CASE("verify exits zero on a clean deterministic run") {
  const fs::path dir = fresh_dir("verify-ok");
  spit(dir / "config.json",
       R"({"schema":"swlp-config-v1","instance":"scalar","grid":{"horizon":0.5,"steps":64},
           "paths":1,"seed":3,"suites":["concatenation"]})");
  const auto r = run_cli("verify --config " + (dir / "config.json").string() + " --out " +
                         dir.string());
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("[pass]") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);

  const json summary = json::parse(slurp(dir / "summary.json"));
  CHECK(summary.at("schema") == "swlp-report-v1");
  CHECK(summary.at("command") == "verify");
  CHECK(summary.at("pass") == true);
  CHECK(summary.at("environment").at("seed") == 3);
  REQUIRE(summary.at("suites").size() == 1);
  const json& rec = summary.at("suites").at(0);
  CHECK(rec.at("name") == "concatenation");
  // Deterministic identity check: no Monte Carlo error to report.
  CHECK(rec.at("sem").is_null());
  CHECK(rec.at("tolerance").get<double>() == 1e-10);
  CHECK(fs::exists(dir / "concatenation.csv"));
}

TEST_CASE("simulate is byte-reproducible for a fixed seed") {
  const fs::path d1 = fresh_dir("sim-a");
  const fs::path d2 = fresh_dir("sim-b");
  spit(d1 / "config.json", kScalarConfig);

  const std::string base = "simulate --config " + (d1 / "config.json").string();
  const auto r1 = run_cli(base + " --out " + d1.string());
  const auto r2 = run_cli(base + " --out " + d2.string());
  CHECK(r1.exit_code == 0);
  CHECK(r2.exit_code == 0);

  CHECK(slurp(d1 / "trajectory.csv") == slurp(d2 / "trajectory.csv"));
  CHECK(slurp(d1 / "samples.csv") == slurp(d2 / "samples.csv"));
  CHECK(normalized_summary(d1) == normalized_summary(d2));
  CHECK_FALSE(slurp(d1 / "trajectory.csv").empty());

  // The CSV carries the documented header.
  const std::string traj = slurp(d1 / "trajectory.csv");
  CHECK(traj.rfind("path,node,time,component,value\n", 0) == 0);
}

TEST_CASE("the seed flag overrides the document and re-keys the run") {
  const fs::path d1 = fresh_dir("seed-doc");
  const fs::path d2 = fresh_dir("seed-flag");
  spit(d1 / "config.json", kScalarConfig);

  const std::string base = "simulate --config " + (d1 / "config.json").string();
  const auto r1 = run_cli(base + " --out " + d1.string());
  const auto r2 = run_cli(base + " --seed 99 --out " + d2.string());
  CHECK(r1.exit_code == 0);
  CHECK(r2.exit_code == 0);

  const json s1 = json::parse(slurp(d1 / "summary.json"));
  const json s2 = json::parse(slurp(d2 / "summary.json"));
  CHECK(s1.at("environment").at("seed") == 7);
  CHECK(s2.at("environment").at("seed") == 99);
  // The hash covers the effective configuration, seed included.
  CHECK(s1.at("environment").at("config_hash") != s2.at("environment").at("config_hash"));
  CHECK(slurp(d1 / "trajectory.csv") != slurp(d2 / "trajectory.csv"));
}

TEST_CASE("outputs are independent of the worker thread count") {
  const fs::path d1 = fresh_dir("threads-1");
  const fs::path d4 = fresh_dir("threads-4");
  spit(d1 / "config.json", kHeatConfig);

  const std::string base = "simulate --config " + (d1 / "config.json").string();
  const auto r1 = run_cli(base + " --out " + d1.string(), "env SWLP_THREADS=1 ");
  const auto r4 = run_cli(base + " --out " + d4.string(), "env SWLP_THREADS=4 ");
  CHECK(r1.exit_code == 0);
  CHECK(r4.exit_code == 0);

  CHECK(slurp(d1 / "trajectory.csv") == slurp(d4 / "trajectory.csv"));
  CHECK(slurp(d1 / "samples.csv") == slurp(d4 / "samples.csv"));
  CHECK(normalized_summary(d1) == normalized_summary(d4));
}

TEST_CASE("configuration problems exit two with a machine readable reason") {
  const fs::path dir = fresh_dir("rejects");

  SUBCASE("unreadable config file") {
    const auto r = run_cli("simulate --config " + (dir / "missing.json").string());
    CHECK(r.exit_code == 2);
    CHECK(parse_stderr(r).at("error") == "io");
  }
  SUBCASE("unknown document key") {
    spit(dir / "config.json", R"({"schema":"swlp-config-v1","mystery":1})");
    const auto r = run_cli("verify --config " + (dir / "config.json").string());
    CHECK(r.exit_code == 2);
    CHECK(parse_stderr(r).at("error") == "bad-config");
  }
  SUBCASE("suite that does not apply to the instance") {
    spit(dir / "config.json",
         R"({"schema":"swlp-config-v1","instance":"scalar","paths":4,
             "grid":{"horizon":0.25,"steps":16},"suites":["energy"]})");
    const auto r = run_cli("verify --config " + (dir / "config.json").string() + " --out " +
                           dir.string());
    CHECK(r.exit_code == 2);
    const json err = parse_stderr(r);
    CHECK(err.at("error") == "bad-config");
    CHECK(err.at("detail").get<std::string>().find("energy") != std::string::npos);
  }
  SUBCASE("missing required flag") {
    const auto r = run_cli("simulate");
    CHECK(r.exit_code == 2);
    CHECK(parse_stderr(r).at("error") == "bad-config");
  }
}

TEST_CASE("runtime aborts exit one with the failing stage's code") {
  const fs::path dir = fresh_dir("abort");
  spit(dir / "config.json", kScalarConfig);
  // A directory squatting on the trajectory file makes the run phase abort.
  fs::create_directories(dir / "out" / "trajectory.csv");
  const auto r = run_cli("simulate --config " + (dir / "config.json").string() + " --out " +
                         (dir / "out").string());
  CHECK(r.exit_code == 1);
  CHECK(parse_stderr(r).at("error") == "io");
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <swlp-binary> [doctest options]\n", argv[0]);
    return 64;
  }
  g_swlp = argv[1];
  g_scratch = fs::temp_directory_path() / "swlp-cli-tests";
  fs::create_directories(g_scratch);

  doctest::Context ctx;
  ctx.applyCommandLine(argc - 1, argv + 1);
  return ctx.run();
}
