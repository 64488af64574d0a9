#pragma once

#include "fhrl/experiments.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fhrl::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kAllDiverged = 3 };

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

/// "key=value" with value read as JSON, falling back to a plain string.
inline nlohmann::json parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + text + "'");
  const std::string value = text.substr(eq + 1);
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  return nlohmann::json{{text.substr(0, eq), parsed}};
}

}  // namespace detail

/// Entry point shared by the fhrl binary and in-process callers; `args` excludes the program name.
inline int main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Fixed-horizon temporal difference experiments", "fhrl"};
  app.set_version_flag("--version", std::string(kVersion));
  std::string experiment;
  std::string config_path;
  std::vector<std::string> assignments;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  std::optional<int> threads;
  std::optional<std::string> out_dir;
  bool print_config = false;
  bool quiet = false;
  app.add_option("experiment", experiment, "Experiment to run")->required()->check(CLI::IsMember(experiment_ids()));
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed, "Base seed (run i uses seed + i)");
  app.add_option("--runs", runs, "Number of independent runs");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");
  app.add_option("--set", assignments, "Override a config field, e.g. --set alpha=0.25")->take_all();
  app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");
  app.add_flag("--quiet", quiet, "Suppress the summary");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  try {
    ExperimentConfig cfg = default_config(experiment);
    if (!config_path.empty()) cfg = apply_json(cfg, detail::read_json_file(config_path));
    for (const auto& a : assignments) cfg = apply_json(cfg, detail::parse_assignment(a));
    if (seed) cfg.seed = *seed;
    if (runs) cfg.runs = *runs;
    if (threads) cfg.threads = *threads;
    if (out_dir) cfg.out = *out_dir;
    validate(cfg);
    if (print_config) {
      out << to_json(cfg).dump(2) << '\n';
      return kOk;
    }

    const auto records = run(cfg);
    const auto metrics = aggregate(records);
    write_outputs(cfg, records, metrics, cfg.out);
    if (!quiet) {
      out << experiment << ": " << cfg.runs << " runs -> " << cfg.out << '\n';
      for (const auto& m : metrics) {
        int diverged = 0;
        for (const auto& sc : m.counts) diverged += sc.diverged;
        out << "  " << m.metric << ".csv  " << m.series.size() << " series";
        if (diverged > 0) out << ", " << diverged << " diverged run-series excluded";
        out << '\n';
      }
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const AllDivergedError& e) {
    err << "error: " << e.what() << '\n';
    return kAllDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace fhrl::cli
