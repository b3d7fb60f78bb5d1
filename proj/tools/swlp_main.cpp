// Command line front end: four subcommands over one configuration format.
//
// Exit codes: 0 all checks passed, 1 a tolerance check failed or the run
// aborted, 2 the configuration was rejected.  Rejections and aborts print a
// one-line JSON object {"error": <code>, "detail": <message>} on stderr.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "swlp/error.hpp"
#include "swlp/io.hpp"
#include "swlp/runner.hpp"

namespace {

void print_error(const std::string& code, const std::string& detail) {
  nlohmann::json err{{"error", code}, {"detail", detail}};
  std::cerr << err.dump() << "\n";
}

void print_report(const swlp::RunReport& rep) {
  int passed = 0;
  for (const auto& r : rep.records) {
    std::printf("[%s] %-24s value=%-12.6g tol=%-12.6g (%.2fs)\n", r.pass ? "pass" : "FAIL",
                r.name.c_str(), r.value, r.tolerance, r.wall_time);
    if (r.pass) ++passed;
  }
  std::printf("%s: %d/%zu checks passed (seed %llu, %s)\n", rep.command.c_str(), passed,
              rep.records.size(), static_cast<unsigned long long>(rep.seed),
              rep.config_hash.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sampled checks for stochastic boundary control/observation systems"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;

  const char* names[] = {"simulate", "admissibility", "verify", "wellposed"};
  const char* blurbs[] = {
      "solve the configured instance and check its closed-form statistics",
      "evaluate control/observation admissibility curves",
      "run the structural identity suites",
      "estimate well-posedness gains and their refinement stability",
  };
  for (int i = 0; i < 4; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], blurbs[i]);
    sub->add_option("--config", config_path, "configuration JSON file")->required();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_option("--out", out_dir, "override the configured output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("bad-config", e.what());
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();

  // Configuration phase: any failure here (unreadable file, malformed or
  // inconsistent document) is a configuration error.
  swlp::ExperimentConfig cfg;
  try {
    cfg = swlp::load_config_file(config_path);
    if (sub->count("--seed") > 0) {
      cfg.seed = seed;
      cfg.canonical["seed"] = seed;
    }
    if (sub->count("--out") > 0) cfg.output_dir = out_dir;
  } catch (const swlp::Error& e) {
    print_error(e.code(), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("bad-config", e.what());
    return 2;
  }

  try {
    const swlp::RunReport rep = swlp::run_command(sub->get_name(), cfg);
    print_report(rep);
    return rep.pass() ? 0 : 1;
  } catch (const swlp::Error& e) {
    print_error(e.code(), e.what());
    return e.code() == "bad-config" ? 2 : 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
}
