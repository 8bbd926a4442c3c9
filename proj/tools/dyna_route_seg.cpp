// SPDX-License-Identifier: Apache-2.0
// dyna-route-seg: command-line front end for the routing pipeline.
#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "dynaroute/config.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace dynaroute;
  CLI::App app{"Slice-wise dynamic routing for volumetric segmentation"};
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<int> force;
  bool oracle = false;
  bool quiet = false;
  bool print_config = false;
  app.add_option("command", command, "generate | train-bank | gen-labels | train-decision | infer | evaluate | ablate")
      ->check(CLI::IsMember({"generate", "train-bank", "gen-labels", "train-decision", "infer", "evaluate", "ablate"}));
  app.add_option("--config", config_path, "JSON config; omitted fields keep their defaults");
  app.add_option("--force-decision", force, "route every slice to option K (0 = skip)");
  app.add_flag("--oracle-routing", oracle, "route by ground truth and the choice metric");
  app.add_option("--out", out_dir, "output directory, overrides out_dir in the config");
  app.add_flag("-q,--quiet", quiet, "no progress lines on stderr");
  app.add_flag("--print-config", print_config, "print the resolved config and its hash, then exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  ExperimentConfig cfg;
  try {
    cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    validate_config(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (print_config) {
    auto j = config_to_json(cfg);
    j["config_hash"] = config_hash(cfg);
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  if (command.empty()) {
    std::cerr << "a command is required\n" << app.help();
    return kExitConfig;
  }
  if (!quiet) set_log_stream(&std::cerr);
  RoutingOptions opts;
  opts.force_decision = force;
  opts.oracle_routing = oracle;
  const auto res = run_command_safely(command, cfg, opts);
  if (res.summary.contains("error")) std::cerr << "error: " << res.summary["error"].get<std::string>() << "\n";
  std::cout << res.summary.dump(2) << "\n";
  return res.exit_code;
}
