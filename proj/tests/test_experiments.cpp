#include "fhrl/cli.hpp"
#include "fhrl/experiments.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace fhrl;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fhrl_test_" + name);
  fs::remove_all(dir);
  return dir;
}

RunRecord record_with(std::vector<double> y, bool diverged = false) {
  RunRecord r;
  const auto i = r.add("metric", "");
  for (std::size_t k = 0; k < y.size(); ++k) r.at(i).push(static_cast<double>(k), y[k]);
  r.at(i).diverged = diverged;
  return r;
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  return cli::main(args, out, err);
}

}  // namespace

TEST(Csv, EmptySeriesWritesHeaderOnly) {
  std::ostringstream os;
  emit_csv(os, {});
  EXPECT_EQ(os.str(), "x,mean,se\n");
}

TEST(Csv, RoundTripsFullPrecision) {
  const std::vector<Series> in{
      {"a", {0.1, 1e-300, 3.0}, {1.0 / 3.0, -2.5e17, std::numeric_limits<double>::denorm_min()}, {0.0, 1e-17, 7.0}},
      {"b", {1.0}, {std::nextafter(1.0, 2.0)}, {0.125}}};
  std::ostringstream os;
  emit_csv(os, in);
  std::istringstream is(os.str());
  EXPECT_EQ(parse_csv(is), in);
  std::ostringstream again;
  emit_csv(again, in);
  EXPECT_EQ(os.str(), again.str());
  EXPECT_EQ(os.str().find('\r'), std::string::npos);
  EXPECT_EQ(os.str().substr(0, 17), "x,mean,se,series\n");
}

TEST(Csv, MismatchedColumnsRejected) {
  std::ostringstream os;
  EXPECT_THROW(emit_csv(os, {Series{"", {1.0, 2.0}, {1.0}, {0.0}}}), std::invalid_argument);
  EXPECT_THROW(emit_csv("/nonexistent_dir_fhrl/x.csv", {}), std::runtime_error);
}

TEST(Config, DefaultsCarryTheExperimentSettings) {
  const auto baird = default_config("baird");
  EXPECT_EQ(baird.gamma, 0.99);
  EXPECT_EQ(baird.H, 100);
  EXPECT_EQ(baird.alpha, 0.2 / 7.0);
  EXPECT_EQ(baird.steps, 10000);
  EXPECT_EQ(baird.runs, 100);
  const auto walk = default_config("walk");
  EXPECT_EQ(walk.H, 100);
  EXPECT_EQ(walk.alpha, 0.5);
  EXPECT_EQ(walk.steps, 2000);
  EXPECT_EQ(walk.runs, 500);
  const auto cg = default_config("checkered");
  EXPECT_EQ(cg.H, 32);
  EXPECT_EQ(cg.ns, (std::vector<int>{1, 2, 4, 8, 16, 32}));
  EXPECT_EQ(cg.lambdas, (std::vector<double>{0.0, 0.5, 0.75, 0.875, 0.9375, 1.0}));
  for (double a : cg.alphas) EXPECT_EQ(std::exp2(std::round(std::log2(a))), a);
  const auto deep = default_config("deep");
  EXPECT_EQ(deep.eps_anneal_frames, 50000);
  EXPECT_EQ(deep.eps_start, 1.0);
  EXPECT_EQ(deep.eps_end, 0.1);
  EXPECT_EQ(deep.buffer, 100000);
  EXPECT_EQ(deep.batch, 32);
  EXPECT_EQ(deep.target_freeze_k, 0);
  for (const auto& id : experiment_ids()) EXPECT_NO_THROW(validate(default_config(id))) << id;
  EXPECT_THROW(default_config("lunar"), ConfigError);
}

TEST(Config, UnknownAndForeignKeysRejected) {
  EXPECT_THROW(parse_config("baird", {{"alpah", 0.1}}), ConfigError);
  EXPECT_THROW(parse_config("baird", {{"lambdas", {0.5}}}), ConfigError);
  EXPECT_THROW(parse_config("baird", {{"experiment", "walk"}}), ConfigError);
  EXPECT_THROW(parse_config("baird", nlohmann::json::array()), ConfigError);
  EXPECT_NO_THROW(parse_config("baird", {{"experiment", "baird"}, {"alpha", 0.01}}));
}

TEST(Config, TypesAndRangesChecked) {
  EXPECT_THROW(parse_config("walk", {{"H", 2.5}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"H", "100"}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"H", 0}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"gamma", 0.0}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"gamma", 1.5}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"runs", 1}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"runs", 1LL << 40}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"seed", -1}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"n_states", 18}}), ConfigError);
  EXPECT_THROW(parse_config("walk", {{"algorithms", {"fhq"}}}), ConfigError);
  EXPECT_THROW(parse_config("checkered", {{"ns", {64}}}), ConfigError);
  EXPECT_THROW(parse_config("checkered", {{"lambdas", {1.5}}}), ConfigError);
  EXPECT_THROW(parse_config("maze", {{"epsilon", -0.1}}), ConfigError);
  EXPECT_THROW(parse_config("maze", {{"final_window", 500}}), ConfigError);
  EXPECT_THROW(parse_config("baird", {{"scheme", "geometric"}}), ConfigError);
  EXPECT_THROW(parse_config("deep", {{"env", "lunar"}}), ConfigError);
  EXPECT_THROW(parse_config("deep", {{"record_every", 10}}), ConfigError);
  EXPECT_EQ(parse_config("walk", {{"seed", 18446744073709551615ULL}}).seed, 18446744073709551615ULL);
}

TEST(Config, ResolvedJsonRoundTrips) {
  for (const auto& id : experiment_ids()) {
    const ExperimentConfig c = default_config(id);
    const nlohmann::json j = to_json(c);
    EXPECT_EQ(to_json(parse_config(id, j)), j) << id;
    EXPECT_EQ(j.at("experiment"), id);
  }
  EXPECT_FALSE(to_json(default_config("baird")).contains("lambdas"));
}

TEST(Aggregate, IdenticalRecordsHaveZeroError) {
  const auto agg = aggregate({record_with({1.0, 2.0, 3.0}), record_with({1.0, 2.0, 3.0}), record_with({1.0, 2.0, 3.0})});
  ASSERT_EQ(agg.size(), 1u);
  ASSERT_EQ(agg[0].series.size(), 1u);
  EXPECT_EQ(agg[0].series[0].mean, (std::vector<double>{1.0, 2.0, 3.0}));
  EXPECT_EQ(agg[0].series[0].se, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Aggregate, TwoPointHandArithmetic) {
  const auto agg = aggregate({record_with({0.0}), record_with({2.0})});
  EXPECT_DOUBLE_EQ(agg[0].series[0].mean[0], 1.0);
  EXPECT_DOUBLE_EQ(agg[0].series[0].se[0], 1.0);
}

TEST(Aggregate, DivergedRunsExcludedAndCounted) {
  const auto agg = aggregate({record_with({0.0, 4.0}), record_with({1e9}, true), record_with({2.0, 6.0})});
  EXPECT_EQ(agg[0].counts[0].included, 2);
  EXPECT_EQ(agg[0].counts[0].diverged, 1);
  EXPECT_EQ(agg[0].series[0].mean, (std::vector<double>{1.0, 5.0}));
}

TEST(Aggregate, ErrorCases) {
  EXPECT_THROW(aggregate({record_with({1.0}, true), record_with({2.0}, true)}), AllDivergedError);
  EXPECT_THROW(aggregate({record_with({1.0})}), std::invalid_argument);
  EXPECT_THROW(aggregate({record_with({1.0}), record_with({1.0, 2.0})}), std::logic_error);
}

TEST(Runs, SeedsDeriveFromBasePlusIndex) {
  ExperimentConfig c = parse_config("agreement", {{"runs", 3}, {"seed", 40}, {"H", 8}});
  const auto recs = run(c);
  ASSERT_EQ(recs.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(recs[i].index, i);
    EXPECT_EQ(recs[i].seed, 40u + i);
  }
  EXPECT_NE(recs[0].series[0].data.y, recs[1].series[0].data.y);
  const auto again = run_one(c, 1);
  EXPECT_EQ(again.series[0].data.y, recs[1].series[0].data.y);
}

TEST(Runs, WorkerCountDoesNotChangeResults) {
  ExperimentConfig c = parse_config("walk", {{"runs", 6}, {"steps", 300}, {"H", 20}});
  c.threads = 1;
  const auto serial = aggregate(run(c));
  c.threads = 4;
  const auto parallel = aggregate(run(c));
  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t m = 0; m < serial.size(); ++m) EXPECT_EQ(serial[m].series, parallel[m].series);
}

TEST(Runs, BairdFhtdStaysBoundedWhileTdDiverges) {
  const ExperimentConfig c = parse_config("baird", {{"runs", 2}, {"steps", 3000}, {"record_every", 100}});
  const RunRecord r = run_baird(c, 0);
  for (const auto& s : r.series) {
    if (s.id == "fhtd") {
      EXPECT_FALSE(s.data.diverged);
      EXPECT_EQ(s.data.x.size(), 30u);
    } else {
      EXPECT_TRUE(s.data.diverged) << s.metric;
      EXPECT_LT(s.data.x.size(), 30u);
    }
  }
  EXPECT_TRUE(r.summary.contains("td_divergence_step"));
}

TEST(Runs, SeriesLengthsMatchBudgets) {
  const auto walk = run_walk(parse_config("walk", {{"runs", 2}, {"steps", 250}, {"record_every", 10}}), 0);
  for (const auto& s : walk.series) EXPECT_EQ(s.data.x.size(), 25u);

  const auto maze = run_maze(parse_config("maze", {{"runs", 2},
                                                   {"episodes", 7},
                                                   {"final_window", 3},
                                                   {"horizons", {4}},
                                                   {"gammas", {0.9}},
                                                   {"alphas", {0.5, 0.7}}}),
                             0);
  int curves = 0;
  for (const auto& s : maze.series) {
    if (s.metric == "episode_length") {
      ++curves;
      EXPECT_EQ(s.data.x.size(), 7u);
    } else {
      EXPECT_EQ(s.data.x, (std::vector<double>{0.5, 0.7})) << s.metric;
    }
  }
  EXPECT_EQ(curves, 4);

  const auto cg = run_checkered(
      parse_config("checkered", {{"runs", 2}, {"episodes", 4}, {"ns", {1, 8}}, {"lambdas", {0.5}}, {"alphas", {0.25}}}),
      0);
  ASSERT_EQ(cg.series.size(), 3u);
  for (const auto& s : cg.series) EXPECT_EQ(s.data.y.size(), 4u);
}

TEST(Runs, CheckeredLearnersShareTrajectories) {
  // n = 1 n-step FHTD and lambda = 0 FHTD(lambda) are the same algorithm, so identical streams give identical curves.
  const auto cg = run_checkered(
      parse_config("checkered", {{"runs", 2}, {"episodes", 6}, {"H", 8}, {"ns", {1}}, {"lambdas", {0.0}}, {"alphas", {0.25}}}),
      3);
  ASSERT_EQ(cg.series.size(), 2u);
  EXPECT_EQ(cg.series[0].data.y, cg.series[1].data.y);
}

TEST(Runs, ConvergenceSeriesShape) {
  const auto r = run_convergence(parse_config("convergence", {{"runs", 2}, {"steps", 50}}), 0);
  int sync = 0;
  for (const auto& s : r.series) {
    EXPECT_FALSE(s.data.diverged) << s.metric << " " << s.id;
    if (s.metric == "sync_delta") {
      ++sync;
      EXPECT_EQ(s.data.x.size(), 50u);
    }
    if (s.metric == "projection_gap") {
      ASSERT_EQ(s.data.y.size(), 5u);
      for (double g : s.data.y) EXPECT_LT(g, 1e-8);
    }
  }
  EXPECT_EQ(sync, 5);
}

TEST(Runs, DeepCheckpointsEveryRecordInterval) {
  const auto r = run_deep(parse_config("deep", {{"runs", 2},
                                                {"frames", 2500},
                                                {"eps_anneal_frames", 1000},
                                                {"H", 3},
                                                {"hidden", 8},
                                                {"record_every", 1000}}),
                          0);
  ASSERT_EQ(r.series.size(), 2u);
  EXPECT_EQ(r.series[0].data.x, (std::vector<double>{1000, 2000, 2500}));
  EXPECT_TRUE(r.artifacts.count("training_run0.csv"));
  EXPECT_TRUE(r.artifacts.count("value_vs_return_run0.csv"));
  EXPECT_TRUE(r.summary.contains("final_window_return"));
}

TEST(Cli, WritesCsvsAndManifestDeterministically) {
  const fs::path a = scratch("cli_a"), b = scratch("cli_b");
  const std::vector<std::string> base{"walk", "--runs", "3", "--seed", "9", "--set", "steps=120", "--set", "H=10"};
  auto with_out = [&](const fs::path& p) {
    auto args = base;
    args.insert(args.end(), {"--out", p.string(), "--quiet"});
    return args;
  };
  ASSERT_EQ(run_cli(with_out(a)), 0);
  ASSERT_EQ(run_cli(with_out(b)), 0);
  EXPECT_EQ(slurp(a / "rmse.csv"), slurp(b / "rmse.csv"));
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest.at("version"), kVersion);
  EXPECT_EQ(manifest.at("config").at("steps"), 120);
  EXPECT_EQ(manifest.at("config").at("seed"), 9);
  EXPECT_EQ(manifest.at("config").at("runs"), 3);
  std::istringstream csv(slurp(a / "rmse.csv"));
  const auto series = parse_csv(csv);
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[0].size(), 120u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  const fs::path dir = scratch("cli_cfg");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "cfg.json") << R"({"experiment": "agreement", "H": 6, "runs": 4, "seed": 1})";
  }
  const fs::path out = dir / "out";
  ASSERT_EQ(run_cli({"agreement", "--config", (dir / "cfg.json").string(), "--runs", "2", "--out", out.string(), "--quiet"}), 0);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("H"), 6);
  EXPECT_EQ(manifest.at("config").at("runs"), 2);
  EXPECT_EQ(manifest.at("config").at("seed"), 1);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const fs::path out = scratch("cli_codes");
  EXPECT_EQ(run_cli({"lunar"}), 2);
  EXPECT_EQ(run_cli({"walk", "--set", "alpah=1"}), 2);
  EXPECT_EQ(run_cli({"walk", "--set", "gamma=2"}), 2);
  EXPECT_EQ(run_cli({"walk", "--config", "/nonexistent/cfg.json"}), 2);
  EXPECT_EQ(run_cli({"walk", "--runs", "many"}), 2);
  EXPECT_EQ(run_cli({"baird", "--runs", "2", "--set", "algorithms=[\"td\"]", "--set", "steps=3000", "--out", out.string()}), 3);
  EXPECT_EQ(run_cli({"--version"}), 0);
  fs::remove_all(out);
}

TEST(Cli, BinaryRunsAsSubprocess) {
  const fs::path out = scratch("cli_bin");
  const std::string exe = FHRL_CLI_PATH;
  const std::string ok = exe + " agreement --runs 2 --set H=4 --quiet --out " + out.string();
  EXPECT_EQ(std::system(ok.c_str()), 0);
  EXPECT_TRUE(fs::exists(out / "agreement.csv"));
  const std::string bad = exe + " walk --set bogus=1 > /dev/null 2>&1";
  const int status = std::system(bad.c_str());
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  fs::remove_all(out);
}
