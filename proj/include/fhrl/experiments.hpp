#pragma once

#include "fhrl/convergence.hpp"
#include "fhrl/core.hpp"
#include "fhrl/csv.hpp"
#include "fhrl/deep.hpp"
#include "fhrl/dp.hpp"
#include "fhrl/environments.hpp"
#include "fhrl/learners.hpp"
#include "fhrl/mdp.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fhrl {

inline constexpr const char* kVersion = "fhrl 0.1.0";

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AllDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& experiment_ids() {
  static const std::vector<std::string> ids{"baird", "maze", "walk", "checkered", "agreement", "deep", "convergence"};
  return ids;
}

/// Every tunable of every experiment; only the keys relevant to `experiment` are accepted from JSON.
struct ExperimentConfig {
  std::string experiment;
  std::vector<std::string> algorithms;
  int runs = 2;
  std::uint64_t seed = 0;
  std::string out;
  int threads = 0;  ///< 0: one worker per hardware thread

  double alpha = 0.1;
  std::vector<double> alphas;
  double gamma = 1.0;
  std::vector<double> gammas;
  int H = 1;
  std::vector<int> horizons;
  std::vector<int> ns;
  std::vector<double> lambdas;
  double epsilon = 0.1;
  std::string scheme = "standard";
  double k = 1.0;
  std::string behavior = "canonical";
  long steps = 1;
  int episodes = 1;
  int final_window = 1;
  long max_episode_steps = 100000;
  double divergence_threshold = 1e3;
  long record_every = 1;
  int n_states = 19;
  int n_actions = 2;
  int features = 3;
  int grid_side = 8;
  double c = 0.1;
  double gd_step_fraction = 0.5;

  std::string env = "checkered";
  int hidden = 64;
  double lr = 2.5e-4;
  long frames = 60000;
  double eps_start = 1.0;
  double eps_end = 0.1;
  long eps_anneal_frames = 50000;
  long buffer = 100000;
  int batch = 32;
  long target_freeze_k = 0;
  double monitor_c = 1e-3;
  int return_window = 100;
  int eval_episodes = 1;
  double eval_epsilon = 0.05;

  bool uses(const std::string& algorithm) const {
    return std::find(algorithms.begin(), algorithms.end(), algorithm) != algorithms.end();
  }
};

namespace detail {

template <class Cfg, class F>
void visit_fields(Cfg& c, F&& f) {
  f("experiment", c.experiment);
  f("algorithms", c.algorithms);
  f("runs", c.runs);
  f("seed", c.seed);
  f("out", c.out);
  f("threads", c.threads);
  f("alpha", c.alpha);
  f("alphas", c.alphas);
  f("gamma", c.gamma);
  f("gammas", c.gammas);
  f("H", c.H);
  f("horizons", c.horizons);
  f("ns", c.ns);
  f("lambdas", c.lambdas);
  f("epsilon", c.epsilon);
  f("scheme", c.scheme);
  f("k", c.k);
  f("behavior", c.behavior);
  f("steps", c.steps);
  f("episodes", c.episodes);
  f("final_window", c.final_window);
  f("max_episode_steps", c.max_episode_steps);
  f("divergence_threshold", c.divergence_threshold);
  f("record_every", c.record_every);
  f("n_states", c.n_states);
  f("n_actions", c.n_actions);
  f("features", c.features);
  f("grid_side", c.grid_side);
  f("c", c.c);
  f("gd_step_fraction", c.gd_step_fraction);
  f("env", c.env);
  f("hidden", c.hidden);
  f("lr", c.lr);
  f("frames", c.frames);
  f("eps_start", c.eps_start);
  f("eps_end", c.eps_end);
  f("eps_anneal_frames", c.eps_anneal_frames);
  f("buffer", c.buffer);
  f("batch", c.batch);
  f("target_freeze_k", c.target_freeze_k);
  f("monitor_c", c.monitor_c);
  f("return_window", c.return_window);
  f("eval_episodes", c.eval_episodes);
  f("eval_epsilon", c.eval_epsilon);
}

inline const std::set<std::string>& relevant_keys(const std::string& id) {
  static const std::map<std::string, std::set<std::string>> table{
      {"baird",
       {"algorithms", "alpha", "gamma", "H", "scheme", "k", "behavior", "steps", "record_every",
        "divergence_threshold"}},
      {"walk", {"algorithms", "alpha", "gamma", "H", "steps", "record_every", "n_states", "divergence_threshold"}},
      {"maze",
       {"algorithms", "alphas", "gamma", "horizons", "gammas", "epsilon", "episodes", "final_window",
        "max_episode_steps"}},
      {"checkered", {"algorithms", "alphas", "gamma", "H", "ns", "lambdas", "episodes"}},
      {"agreement", {"gamma", "H", "grid_side"}},
      {"deep",
       {"env", "H", "hidden", "lr", "gamma", "frames", "eps_start", "eps_end", "eps_anneal_frames", "buffer",
        "batch", "target_freeze_k", "monitor_c", "max_episode_steps", "record_every", "return_window",
        "eval_episodes", "eval_epsilon"}},
      {"convergence",
       {"alpha", "gamma", "H", "steps", "n_states", "n_actions", "features", "c", "gd_step_fraction"}},
  };
  static const std::set<std::string> common{"experiment", "runs", "seed", "out", "threads"};
  static std::map<std::string, std::set<std::string>> merged = [] {
    std::map<std::string, std::set<std::string>> m;
    for (const auto& [k, v] : table) {
      m[k] = v;
      m[k].insert(common.begin(), common.end());
    }
    return m;
  }();
  const auto it = merged.find(id);
  if (it == merged.end()) throw ConfigError("unknown experiment '" + id + "'");
  return it->second;
}

inline void assign(const std::string& key, std::string& dst, const nlohmann::json& v) {
  if (!v.is_string()) throw ConfigError("'" + key + "' must be a string");
  dst = v.get<std::string>();
}

inline void assign(const std::string& key, double& dst, const nlohmann::json& v) {
  if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
  dst = v.get<double>();
}

template <class T>
  requires std::is_integral_v<T>
void assign(const std::string& key, T& dst, const nlohmann::json& v) {
  if (!v.is_number_integer()) throw ConfigError("'" + key + "' must be an integer");
  using Limits = std::numeric_limits<T>;
  if (v.is_number_unsigned()) {
    const auto u = v.get<unsigned long long>();
    if (u > static_cast<unsigned long long>(Limits::max())) throw ConfigError("'" + key + "' is out of range");
    dst = static_cast<T>(u);
    return;
  }
  const auto x = v.get<long long>();
  if (x < static_cast<long long>(Limits::min()) ||
      (x > 0 && static_cast<unsigned long long>(x) > static_cast<unsigned long long>(Limits::max()))) {
    throw ConfigError("'" + key + "' is out of range");
  }
  dst = static_cast<T>(x);
}

template <class T>
void assign(const std::string& key, std::vector<T>& dst, const nlohmann::json& v) {
  if (!v.is_array()) throw ConfigError("'" + key + "' must be an array");
  std::vector<T> out;
  for (const auto& item : v) {
    T x{};
    assign(key + "[]", x, item);
    out.push_back(x);
  }
  dst = std::move(out);
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace detail

/// Defaults for one experiment (run counts scaled to desk size; the original counts are reachable via `runs`).
inline ExperimentConfig default_config(const std::string& id) {
  detail::relevant_keys(id);
  ExperimentConfig c;
  c.experiment = id;
  c.out = "results/" + id;
  if (id == "baird") {
    c.algorithms = {"fhtd", "td"};
    c.runs = 100;
    c.gamma = 0.99;
    c.H = 100;
    c.alpha = 0.2 / 7.0;
    c.steps = 10000;
    c.record_every = 10;
  } else if (id == "walk") {
    c.algorithms = {"fhtd", "td"};
    c.runs = 500;
    c.gamma = 1.0;
    c.H = 100;
    c.alpha = 0.5;
    c.steps = 2000;
    c.record_every = 1;
    c.n_states = 19;
  } else if (id == "maze") {
    c.algorithms = {"fhq", "q"};
    c.runs = 100;
    c.gamma = 1.0;
    c.alphas = {0.1, 0.3, 0.5, 0.7, 0.9};
    c.horizons = {8, 16, 32, 48};
    c.gammas = {0.875, 0.938, 0.969, 0.979};
    c.epsilon = 0.1;
    c.episodes = 100;
    c.final_window = 20;
    c.max_episode_steps = 100000;
  } else if (id == "checkered") {
    c.algorithms = {"nstep", "lambda"};
    c.runs = 100;
    c.gamma = 1.0;
    c.H = 32;
    c.ns = {1, 2, 4, 8, 16, 32};
    c.lambdas = {0.0, 0.5, 0.75, 0.875, 0.9375, 1.0};
    c.alphas = {0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125};
    c.episodes = 200;
  } else if (id == "agreement") {
    c.runs = 200;
    c.gamma = 1.0;
    c.H = 64;
    c.grid_side = 8;
  } else if (id == "deep") {
    c.runs = 10;
    c.env = "checkered";
    c.H = 32;
    c.gamma = 0.99;
    c.max_episode_steps = 500;
    c.record_every = 1000;
  } else if (id == "convergence") {
    c.runs = 20;
    c.alpha = 0.5;
    c.gamma = 0.9;
    c.H = 5;
    c.steps = 200;
    c.n_states = 6;
    c.n_actions = 2;
    c.features = 3;
    c.c = 0.1;
    c.gd_step_fraction = 0.5;
  }
  return c;
}

/// Checks every relevant hyperparameter against its documented range.
inline void validate(const ExperimentConfig& c) {
  using detail::require;
  const auto& keys = detail::relevant_keys(c.experiment);
  auto rel = [&](const char* k) { return keys.count(k) > 0; };
  auto in_unit = [](double x) { return x > 0.0 && x <= 1.0; };
  require(c.runs >= 2, "runs must be >= 2 (standard errors need two records)");
  require(c.threads >= 0, "threads must be >= 0");
  require(!c.out.empty(), "out must be a non-empty path");
  if (rel("alpha")) require(c.alpha > 0.0 && std::isfinite(c.alpha), "alpha must be positive");
  if (rel("alphas")) {
    require(!c.alphas.empty(), "alphas must be non-empty");
    for (double a : c.alphas) require(a > 0.0 && a <= 1.0, "each alpha must lie in (0, 1]");
  }
  if (rel("gamma")) require(in_unit(c.gamma), "gamma must lie in (0, 1]");
  if (rel("gammas"))
    for (double g : c.gammas) require(in_unit(g), "each gamma must lie in (0, 1]");
  if (rel("H")) require(c.H >= 1, "H must be >= 1");
  if (rel("horizons"))
    for (int h : c.horizons) require(h >= 1, "each horizon must be >= 1");
  if (rel("ns"))
    for (int n : c.ns) require(n >= 1 && n <= c.H, "each n must lie in [1, H]");
  if (rel("lambdas"))
    for (double l : c.lambdas) require(l >= 0.0 && l <= 1.0, "each lambda must lie in [0, 1]");
  if (rel("epsilon")) require(c.epsilon >= 0.0 && c.epsilon <= 1.0, "epsilon must lie in [0, 1]");
  if (rel("scheme")) {
    require(c.scheme == "standard" || c.scheme == "average_reward" || c.scheme == "alt_exponential" ||
                c.scheme == "hyperbolic",
            "scheme must be standard, average_reward, alt_exponential or hyperbolic");
    require(c.k > 0.0, "k must be positive");
  }
  if (rel("behavior")) require(c.behavior == "canonical" || c.behavior == "uniform", "behavior must be canonical or uniform");
  if (rel("steps")) require(c.steps >= 1, "steps must be >= 1");
  if (rel("episodes")) require(c.episodes >= 1, "episodes must be >= 1");
  if (rel("final_window")) require(c.final_window >= 1 && c.final_window <= c.episodes, "final_window must lie in [1, episodes]");
  if (rel("max_episode_steps")) require(c.max_episode_steps >= 1, "max_episode_steps must be >= 1");
  if (rel("divergence_threshold")) require(c.divergence_threshold > 0.0, "divergence_threshold must be positive");
  if (rel("record_every")) require(c.record_every >= 1, "record_every must be >= 1");
  if (c.experiment == "walk") require(c.n_states >= 3 && c.n_states % 2 == 1, "n_states must be odd and >= 3");
  if (c.experiment == "convergence") {
    require(c.n_states >= 2 && c.n_actions >= 1, "need n_states >= 2 and n_actions >= 1");
    require(c.features >= 1 && c.features <= c.n_states, "features must lie in [1, n_states]");
    require(c.alpha < 1.0, "alpha must lie in (0, 1)");
    require(c.c > 0.0 && c.c < 1.0, "c must lie in (0, 1)");
    require(c.gd_step_fraction > 0.0 && c.gd_step_fraction < 1.0, "gd_step_fraction must lie in (0, 1)");
  }
  if (rel("grid_side")) require(c.grid_side >= 2, "grid_side must be >= 2");

  static const std::map<std::string, std::set<std::string>> allowed{
      {"baird", {"fhtd", "td"}}, {"walk", {"fhtd", "td"}}, {"maze", {"fhq", "q"}}, {"checkered", {"nstep", "lambda"}}};
  if (const auto it = allowed.find(c.experiment); it != allowed.end()) {
    require(!c.algorithms.empty(), "algorithms must be non-empty");
    for (const auto& a : c.algorithms)
      require(it->second.count(a) > 0, "algorithm '" + a + "' is not available for " + c.experiment);
  }
  if (c.experiment == "maze") {
    if (c.uses("fhq")) require(!c.horizons.empty(), "horizons must be non-empty for fhq");
    if (c.uses("q")) require(!c.gammas.empty(), "gammas must be non-empty for q");
  }
  if (c.experiment == "checkered") {
    if (c.uses("nstep")) require(!c.ns.empty(), "ns must be non-empty for nstep");
    if (c.uses("lambda")) require(!c.lambdas.empty(), "lambdas must be non-empty for lambda");
  }
  if (c.experiment == "deep") {
    require(c.env == "checkered" || c.env == "maze", "env must be checkered or maze");
    require(c.hidden >= 1 && c.batch >= 1 && c.buffer >= c.batch, "need hidden >= 1, batch >= 1, buffer >= batch");
    require(c.lr > 0.0, "lr must be positive");
    require(c.frames >= 1 && c.eps_anneal_frames >= 1, "frames and eps_anneal_frames must be >= 1");
    require(c.eps_start >= 0.0 && c.eps_start <= 1.0 && c.eps_end >= 0.0 && c.eps_end <= 1.0,
            "eps_start and eps_end must lie in [0, 1]");
    require(c.target_freeze_k >= 0, "target_freeze_k must be >= 0");
    require(c.monitor_c > 0.0, "monitor_c must be positive");
    require(c.record_every >= c.max_episode_steps, "record_every must be >= max_episode_steps");
    require(c.return_window >= 1 && c.eval_episodes >= 0, "need return_window >= 1 and eval_episodes >= 0");
    require(c.eval_epsilon >= 0.0 && c.eval_epsilon <= 1.0, "eval_epsilon must lie in [0, 1]");
  }
}

/// Applies the keys of `j` on top of `base`; unknown or irrelevant keys are rejected.
inline ExperimentConfig apply_json(ExperimentConfig base, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  if (j.contains("experiment")) {
    if (!j["experiment"].is_string() || j["experiment"].get<std::string>() != base.experiment) {
      throw ConfigError("configuration is for experiment " + j["experiment"].dump() + ", not '" + base.experiment + "'");
    }
  }
  const auto& keys = detail::relevant_keys(base.experiment);
  for (const auto& [key, value] : j.items()) {
    if (!keys.count(key)) throw ConfigError("unknown key '" + key + "' for experiment '" + base.experiment + "'");
    detail::visit_fields(base, [&](const char* name, auto& field) {
      if (key == name) detail::assign(key, field, value);
    });
  }
  return base;
}

inline ExperimentConfig parse_config(const std::string& id, const nlohmann::json& j) {
  ExperimentConfig c = apply_json(default_config(id), j);
  validate(c);
  return c;
}

/// Resolved configuration restricted to the keys that matter for the experiment.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  const auto& keys = detail::relevant_keys(c.experiment);
  detail::visit_fields(c, [&](const char* name, const auto& field) {
    if (keys.count(name)) j[name] = field;
  });
  return j;
}

// ---------------------------------------------------------------------------
// Run records

struct SeriesData {
  std::vector<double> x;
  std::vector<double> y;
  bool diverged = false;  ///< truncated at the divergence point

  void push(double xi, double yi) {
    x.push_back(xi);
    y.push_back(yi);
  }
};

struct NamedSeries {
  std::string metric;
  std::string id;
  SeriesData data;
};

struct RunRecord {
  int index = 0;
  std::uint64_t seed = 0;
  std::vector<NamedSeries> series;                 ///< insertion order is the output order
  std::map<std::string, std::string> artifacts;    ///< extra files (file name -> content)
  nlohmann::json summary = nlohmann::json::object();

  /// Index of a new series; use `at` to reach it (the vector may reallocate).
  std::size_t add(const std::string& metric, const std::string& id) {
    series.push_back(NamedSeries{metric, id, {}});
    return series.size() - 1;
  }
  SeriesData& at(std::size_t i) { return series[i].data; }

  bool diverged() const {
    return std::any_of(series.begin(), series.end(), [](const NamedSeries& s) { return s.data.diverged; });
  }
};

namespace detail {

inline std::string fmt(double x) { return format_double(x); }

inline double rmse(const Vector& estimate, const Vector& truth, const std::vector<int>& states) {
  double total = 0.0;
  for (int s : states) total += (estimate(s) - truth(s)) * (estimate(s) - truth(s));
  return std::sqrt(total / static_cast<double>(states.size()));
}

inline TargetScheme make_scheme(const ExperimentConfig& c) {
  if (c.scheme == "average_reward") return TargetScheme::average_reward();
  if (c.scheme == "alt_exponential") return TargetScheme::alt_exponential(c.gamma, c.H);
  if (c.scheme == "hyperbolic") return TargetScheme::hyperbolic(c.k, c.H);
  return TargetScheme::standard(c.gamma);
}

inline RunRecord new_record(const ExperimentConfig& c, int index) {
  RunRecord rec;
  rec.index = index;
  rec.seed = c.seed + static_cast<std::uint64_t>(index);
  return rec;
}

inline Vector state_values(const FeatureMap& phi, const Vector& w) { return phi.matrix() * w; }

inline int q_epsilon_greedy(const Vector& w, const FeatureMap& phi, int s, double eps, Rng& rng) {
  if (uniform01(rng) < eps) return uniform_index(rng, phi.n_actions());
  Eigen::RowVectorXd q(phi.n_actions());
  for (int a = 0; a < phi.n_actions(); ++a) q(a) = phi.dot(w, phi.index(s, a));
  return argmax_lowest(q);
}

}  // namespace detail

/// Baird's counterexample: off-policy FHTD with importance ratios against off-policy TD(0) on one stream.
inline RunRecord run_baird(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  Rng rng = make_rng(rec.seed);
  const auto prob = build_baird(c.behavior == "uniform" ? BairdBehavior::Uniform : BairdBehavior::Canonical);
  const auto& phi = prob.features;
  const TargetScheme scheme = detail::make_scheme(c);
  HorizonWeights w = HorizonWeights::uniform_init(c.H, baird_initial_weights());
  Vector w_td = baird_initial_weights();

  const bool fhtd = c.uses("fhtd");
  const bool td = c.uses("td");
  std::size_t fv = 0, fn = 0, tv = 0, tn = 0;
  if (fhtd) {
    fv = rec.add("max_abs_value", "fhtd");
    fn = rec.add("weight_norm", "fhtd");
  }
  if (td) {
    tv = rec.add("max_abs_value", "td");
    tn = rec.add("weight_norm", "td");
  }
  bool fhtd_alive = fhtd, td_alive = td;
  int s = sample_start(prob.mdp, rng);
  for (long t = 1; t <= c.steps; ++t) {
    const int a = prob.behavior.sample(s, rng);
    const Transition tr = sample_step(prob.mdp, s, a, rng);
    const double rho = importance_ratio(prob.target, prob.behavior, s, a);
    const bool record = t % c.record_every == 0 || t == c.steps;
    if (fhtd_alive) {
      try {
        one_step_fhtd_step(w, phi, tr, c.alpha, scheme, rho);
        if (record) {
          const Vector row = w.row(c.H).transpose();
          rec.at(fv).push(t, detail::state_values(phi, row).cwiseAbs().maxCoeff());
          rec.at(fn).push(t, row.norm());
        }
      } catch (const DivergenceError&) {
        rec.at(fv).diverged = rec.at(fn).diverged = true;
        rec.summary["fhtd_divergence_step"] = t;
        fhtd_alive = false;
      }
    }
    if (td_alive) {
      const BaselineResult res = baseline_step(BaselineKind::Td0, w_td, phi, tr, c.alpha, c.gamma, rho);
      if (res.diverged || !(w_td.norm() <= c.divergence_threshold)) {
        rec.at(tv).diverged = rec.at(tn).diverged = true;
        rec.summary["td_divergence_step"] = t;
        td_alive = false;
      } else if (record) {
        rec.at(tv).push(t, detail::state_values(phi, w_td).cwiseAbs().maxCoeff());
        rec.at(tn).push(t, w_td.norm());
      }
    }
    s = tr.s_next;
  }
  return rec;
}

/// Random walk prediction: RMSE of FHTD's final horizon and of TD(0) against their DP values, same stream.
inline RunRecord run_walk(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  Rng rng = make_rng(rec.seed);
  const TabularMdp mdp = build_random_walk(c.n_states);
  const FeatureMap phi = FeatureMap::tabular_states(mdp.n_states());
  const Policy pi = Policy::uniform(mdp.n_states(), mdp.n_actions());
  const Vector truth_fh = fh_values(mdp, pi, c.gamma, c.H).v.row(c.H).transpose();
  const Vector truth_td = infinite_values(mdp, pi, c.gamma);
  const auto live = detail::non_terminal_states(mdp);
  const TargetScheme scheme = TargetScheme::standard(c.gamma);

  HorizonWeights w(c.H, phi.dim());
  Vector w_td = Vector::Zero(phi.dim());
  const bool fhtd = c.uses("fhtd");
  const bool td = c.uses("td");
  const std::size_t fs = fhtd ? rec.add("rmse", "fhtd") : 0;
  const std::size_t ts = td ? rec.add("rmse", "td") : 0;
  bool fhtd_alive = fhtd, td_alive = td;
  int s = sample_start(mdp, rng);
  for (long t = 1; t <= c.steps; ++t) {
    const Transition tr = sample_step(mdp, s, pi.sample(s, rng), rng);
    const bool record = t % c.record_every == 0 || t == c.steps;
    if (fhtd_alive) {
      try {
        one_step_fhtd_step(w, phi, tr, c.alpha, scheme);
        if (record) rec.at(fs).push(t, detail::rmse(w.row(c.H).transpose(), truth_fh, live));
      } catch (const DivergenceError&) {
        rec.at(fs).diverged = true;
        fhtd_alive = false;
      }
    }
    if (td_alive) {
      const BaselineResult res = baseline_step(BaselineKind::Td0, w_td, phi, tr, c.alpha, c.gamma);
      if (res.diverged || !(w_td.norm() <= c.divergence_threshold)) {
        rec.at(ts).diverged = true;
        td_alive = false;
      } else if (record) {
        rec.at(ts).push(t, detail::rmse(w_td, truth_td, live));
      }
    }
    s = tr.done ? sample_start(mdp, rng) : tr.s_next;
  }
  return rec;
}

/// Slippery maze control: episode lengths of epsilon-greedy FHQ (per H) and Q-learning (per gamma).
inline RunRecord run_maze(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  const TabularMdp mdp = build_slippery_maze();
  const FeatureMap phi = FeatureMap::tabular_actions(mdp.n_states(), mdp.n_actions());
  int stream = 0;

  // Runs one learner for the episode budget; returns false on divergence.
  auto episodes = [&](const std::string& label, auto&& act, auto&& learn) {
    const std::size_t curve = rec.add("episode_length", label);
    Rng rng = make_rng(rec.seed, static_cast<std::uint64_t>(++stream));
    try {
      for (int e = 1; e <= c.episodes; ++e) {
        int s = sample_start(mdp, rng);
        long length = 0;
        while (!mdp.terminal(s) && length < c.max_episode_steps) {
          const Transition tr = sample_step(mdp, s, act(s, rng), rng);
          learn(tr);
          s = tr.s_next;
          ++length;
        }
        rec.at(curve).push(e, static_cast<double>(length));
      }
    } catch (const DivergenceError&) {
      rec.at(curve).diverged = true;
    }
    return rec.at(curve);
  };
  auto summarize = [&](double alpha, const SeriesData& curve, std::size_t mean_idx, std::size_t final_idx) {
    if (curve.diverged) {
      rec.at(mean_idx).diverged = rec.at(final_idx).diverged = true;
      return;
    }
    double total = 0.0, last = 0.0;
    for (std::size_t i = 0; i < curve.y.size(); ++i) {
      total += curve.y[i];
      if (static_cast<int>(i) >= c.episodes - c.final_window) last += curve.y[i];
    }
    rec.at(mean_idx).push(alpha, total / c.episodes);
    rec.at(final_idx).push(alpha, last / c.final_window);
  };

  if (c.uses("fhq")) {
    for (int H : c.horizons) {
      const std::string base = "fhq H=" + std::to_string(H);
      const std::size_t mean_idx = rec.add("mean_length", base);
      const std::size_t final_idx = rec.add("final_length", base);
      for (double alpha : c.alphas) {
        HorizonWeights w(H, phi.dim());
        const SeriesData curve = episodes(
            base + " alpha=" + detail::fmt(alpha),
            [&](int s, Rng& r) { return epsilon_greedy(w, phi, s, H, c.epsilon, r); },
            [&](const Transition& tr) { fhq_step(w, phi, tr, alpha, c.gamma); });
        summarize(alpha, curve, mean_idx, final_idx);
      }
    }
  }
  if (c.uses("q")) {
    for (double g : c.gammas) {
      const std::string base = "q gamma=" + detail::fmt(g);
      const std::size_t mean_idx = rec.add("mean_length", base);
      const std::size_t final_idx = rec.add("final_length", base);
      for (double alpha : c.alphas) {
        Vector w = Vector::Zero(phi.dim());
        const SeriesData curve = episodes(
            base + " alpha=" + detail::fmt(alpha),
            [&](int s, Rng& r) { return detail::q_epsilon_greedy(w, phi, s, c.epsilon, r); },
            [&](const Transition& tr) {
              if (baseline_step(BaselineKind::QLearning, w, phi, tr, alpha, g).diverged) throw DivergenceError(0);
            });
        summarize(alpha, curve, mean_idx, final_idx);
      }
    }
  }
  return rec;
}

/// Checkered grid prediction under the random policy: RMSE of V^H after each episode for n-step FHTD and FHTD(lambda).
inline RunRecord run_checkered(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  const TabularMdp mdp = build_checkered_grid();
  const FeatureMap phi = FeatureMap::tabular_states(mdp.n_states());
  const Policy pi = Policy::uniform(mdp.n_states(), mdp.n_actions());
  const Vector truth = fh_values(mdp, pi, c.gamma, c.H).v.row(c.H).transpose();
  const auto live = detail::non_terminal_states(mdp);

  // Every learner sees the same trajectories: the behavior policy does not depend on the weights.
  auto sweep = [&](const std::string& label, auto&& make_learner) {
    const std::size_t curve = rec.add("rmse", label);
    Rng rng = make_rng(rec.seed);
    auto learner = make_learner();
    try {
      for (int e = 1; e <= c.episodes; ++e) {
        int s = sample_start(mdp, rng);
        while (!mdp.terminal(s)) {
          const Transition tr = sample_step(mdp, s, pi.sample(s, rng), rng);
          learner.step(tr);
          s = tr.s_next;
        }
        rec.at(curve).push(e, detail::rmse(learner.values(), truth, live));
      }
    } catch (const DivergenceError&) {
      rec.at(curve).diverged = true;
    }
  };

  if (c.uses("nstep")) {
    for (int n : c.ns) {
      for (double alpha : c.alphas) {
        sweep("nstep n=" + std::to_string(n) + " alpha=" + detail::fmt(alpha), [&] {
          struct Learner {
            NStepSchedule sched;
            HorizonWeights w;
            RingBuffers ring;
            const FeatureMap* phi;
            double alpha, gamma;
            void step(const Transition& tr) { n_step_fhtd_step(w, ring, *phi, tr, alpha, gamma, sched); }
            Vector values() const { return phi->matrix() * w.row(sched.blocks()).transpose(); }
          };
          const NStepSchedule sched(c.H, n);
          return Learner{sched, HorizonWeights(sched.blocks(), phi.dim()), RingBuffers(n), &phi, alpha, c.gamma};
        });
      }
    }
  }
  if (c.uses("lambda")) {
    for (double lambda : c.lambdas) {
      for (double alpha : c.alphas) {
        sweep("lambda lambda=" + detail::fmt(lambda) + " alpha=" + detail::fmt(alpha), [&] {
          struct Learner {
            HorizonWeights w;
            RingBuffers ring;
            const FeatureMap* phi;
            double alpha, gamma, lambda;
            void step(const Transition& tr) { fhtd_lambda_step(w, ring, *phi, tr, alpha, gamma, lambda); }
            Vector values() const { return phi->matrix() * w.row(w.horizons()).transpose(); }
          };
          return Learner{HorizonWeights(c.H, phi.dim()), RingBuffers(c.H), &phi, alpha, c.gamma, lambda};
        });
      }
    }
  }
  return rec;
}

/// Agreement of each horizon's optimal action with the final horizon's on one random grid per run.
inline RunRecord run_agreement(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  Rng rng = make_rng(rec.seed);
  const TabularMdp grid = build_random_grid(rng, c.grid_side);
  const auto agree = horizon_agreement(grid, c.gamma, c.H);
  const std::size_t s = rec.add("agreement", "");
  for (int h = 1; h <= c.H; ++h) rec.at(s).push(h, agree[h]);
  return rec;
}

inline TabularMdp deep_environment(const ExperimentConfig& c) {
  return c.env == "maze" ? build_slippery_maze() : build_checkered_grid();
}

inline DfhqConfig dfhq_config(const ExperimentConfig& c) {
  DfhqConfig d;
  d.H = c.H;
  d.hidden1 = d.hidden2 = c.hidden;
  d.lr = c.lr;
  d.gamma = c.gamma;
  d.buffer_capacity = static_cast<std::size_t>(c.buffer);
  d.batch = static_cast<std::size_t>(c.batch);
  d.eps_start = c.eps_start;
  d.eps_end = c.eps_end;
  d.eps_anneal_frames = c.eps_anneal_frames;
  d.total_frames = c.frames;
  d.max_episode_steps = static_cast<int>(c.max_episode_steps);
  d.target_freeze_k = c.target_freeze_k;
  d.monitor_c = c.monitor_c;
  return d;
}

/// Discounted return of the uniform-random policy from the start distribution.
inline double random_policy_return(const TabularMdp& mdp, double gamma) {
  const Vector v = infinite_values(mdp, Policy::uniform(mdp.n_states(), mdp.n_actions()), gamma);
  return mdp.start_dist().dot(v);
}

/// DFHQ training curves: mean discounted return and loss over the last `return_window` episodes at each checkpoint.
inline RunRecord run_deep(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  Rng rng = make_rng(rec.seed);
  const TabularMdp env = deep_environment(c);
  const FeatureMap enc = FeatureMap::tabular_states(env.n_states());
  const DfhqResult res = dfhq_train(env, enc, dfhq_config(c), rng);

  const std::size_t ret = rec.add("return", "");
  const std::size_t loss = rec.add("loss", "");
  std::size_t done = 0;
  for (long f = c.record_every;; f += c.record_every) {
    const long frame = std::min(f, res.frames);
    while (done < res.episodes.size() && res.episodes[done].frame <= frame) ++done;
    const std::size_t first = done > static_cast<std::size_t>(c.return_window) ? done - c.return_window : 0;
    double r = 0.0, l = 0.0;
    for (std::size_t i = first; i < done; ++i) {
      r += res.episodes[i].ret;
      l += res.episodes[i].mean_loss;
    }
    const double count = static_cast<double>(done - first);
    rec.at(ret).push(static_cast<double>(frame), r / count);
    rec.at(loss).push(static_cast<double>(frame), l / count);
    if (frame >= res.frames) break;
  }
  if (res.diverged) rec.at(ret).diverged = rec.at(loss).diverged = true;

  rec.summary["episodes"] = res.episodes.size();
  rec.summary["final_window_return"] = res.mean_recent_return(static_cast<std::size_t>(c.return_window));
  if (res.progress) rec.summary["progress"] = to_json(*res.progress);
  if (index == 0) {
    std::ostringstream training, values;
    write_training_csv(training, res);
    rec.artifacts["training_run0.csv"] = training.str();
    if (!res.diverged && c.eval_episodes > 0) {
      Rng eval = make_rng(rec.seed, 1);
      write_value_return_csv(values, log_value_vs_return(res.net, env, enc, c.eval_episodes, c.gamma, eval,
                                                         c.eval_epsilon, static_cast<int>(c.max_episode_steps)));
      rec.artifacts["value_vs_return_run0.csv"] = values.str();
    }
  }
  return rec;
}

/// Convergence lab on one random MDP per run: synchronous recursion, surrogate descent, spectra and ODE residual.
inline RunRecord run_convergence(const ExperimentConfig& c, int index) {
  RunRecord rec = detail::new_record(c, index);
  Rng rng = make_rng(rec.seed);
  const TabularMdp mdp = build_random_mdp(rng, c.n_states, c.n_actions);
  const Policy pi = random_policy(rng, c.n_states, c.n_actions);
  std::normal_distribution<double> normal;
  auto random_features = [&](int rows, FeatureMap::Kind kind) {
    Matrix f(rows, c.features);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = normal(rng);
    return FeatureMap(f, kind, kind == FeatureMap::Kind::StateAction ? c.n_actions : 1);
  };
  const FeatureMap phi = random_features(c.n_states, FeatureMap::Kind::State);
  const FeatureMap phi_sa = random_features(c.n_states * c.n_actions, FeatureMap::Kind::StateAction);
  const Matrix p = policy_transition_matrix(mdp, pi);
  const StateWeighting d = behavior_state_distribution(mdp, pi);

  const std::size_t spectrum = rec.add("spectrum", "fhtd_min_eigenvalue");
  const std::size_t td_spectrum = rec.add("spectrum", "td_min_real_part");
  const IterationReport rep = iteration_matrices(phi, d, p, c.gamma);
  rec.at(spectrum).push(0, rep.fhtd_eigenvalues.minCoeff());
  rec.at(td_spectrum).push(0, rep.td_min_real_part);

  const std::size_t residual = rec.add("spectrum", "ode_residual");
  try {
    const StateWeighting d_sa = behavior_state_action_distribution(mdp, pi);
    const Equilibrium eq = ode_equilibrium(mdp, d_sa, phi_sa, c.gamma, c.H);
    rec.at(residual).push(0, ode_residual(eq.w, mdp, d_sa, phi_sa, c.gamma));
  } catch (const SingularGramError&) {
    rec.at(residual).diverged = true;
  }

  const std::vector<Vector> rewards(static_cast<std::size_t>(c.H), policy_reward_vector(mdp, pi));
  const SyncTrace sync = sync_fhtd_iterate(rewards, c.alpha, static_cast<int>(c.steps));
  for (int n = 1; n <= c.H; ++n) {
    const std::size_t s = rec.add("sync_delta", "n=" + std::to_string(n));
    for (Eigen::Index t = 0; t < sync.delta_norms.rows(); ++t) rec.at(s).push(static_cast<double>(t + 1), sync.delta_norms(t, n - 1));
  }

  const std::size_t gap = rec.add("projection_gap", "");
  try {
    const StabilityConstants k = stability_constants(phi, d, p, c.c);
    GdOptions opt;
    opt.record_every = 1L << 40;
    const GdResult gd = surrogate_gd_run(mdp, pi, d, phi, c.gamma, c.gd_step_fraction * k.alpha_max, c.H, c.c, opt);
    for (int n = 1; n <= c.H; ++n) rec.at(gap).push(n, gd.projection_gap[static_cast<std::size_t>(n - 1)]);
    rec.summary["gd_steps"] = gd.steps;
    rec.summary["gd_converged"] = gd.converged;
    rec.summary["constants"] = to_json(k);
  } catch (const SingularGramError&) {
    rec.at(gap).diverged = true;
  } catch (const DivergenceError&) {
    rec.at(gap).diverged = true;
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Execution and aggregation

/// Runs `fn(index)` for every run index on a worker pool; records come back in index order.
template <class Fn>
std::vector<RunRecord> run_pool(int runs, int threads, Fn&& fn) {
  std::vector<RunRecord> out(static_cast<std::size_t>(runs));
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (int i = next++; i < runs; i = next++) {
      try {
        out[static_cast<std::size_t>(i)] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  int workers = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::max(1, std::min(workers, runs));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

inline RunRecord run_one(const ExperimentConfig& c, int index) {
  if (c.experiment == "baird") return run_baird(c, index);
  if (c.experiment == "walk") return run_walk(c, index);
  if (c.experiment == "maze") return run_maze(c, index);
  if (c.experiment == "checkered") return run_checkered(c, index);
  if (c.experiment == "agreement") return run_agreement(c, index);
  if (c.experiment == "deep") return run_deep(c, index);
  if (c.experiment == "convergence") return run_convergence(c, index);
  throw ConfigError("unknown experiment '" + c.experiment + "'");
}

inline std::vector<RunRecord> run(const ExperimentConfig& c) {
  validate(c);
  return run_pool(c.runs, c.threads, [&](int i) { return run_one(c, i); });
}

struct SeriesCount {
  std::string id;
  int included = 0;
  int diverged = 0;
};

struct MetricAggregate {
  std::string metric;
  std::vector<Series> series;        ///< series with at least one non-diverged run
  std::vector<SeriesCount> counts;   ///< every series, including fully diverged ones
};

/**
 * Pointwise mean and standard error (sample stdev / sqrt(runs)) per
 * (metric, series), excluding diverged records. A series whose records all
 * diverged is dropped and only counted; if that happens to every series the
 * run set has nothing to report.
 */
inline std::vector<MetricAggregate> aggregate(const std::vector<RunRecord>& records) {
  if (records.size() < 2) throw std::invalid_argument("aggregation needs at least two records");
  std::vector<MetricAggregate> out;
  auto metric_slot = [&](const std::string& m) -> MetricAggregate& {
    for (auto& a : out)
      if (a.metric == m) return a;
    out.push_back(MetricAggregate{m, {}, {}});
    return out.back();
  };

  bool any_included = false;
  for (const auto& first : records.front().series) {
    MetricAggregate& agg = metric_slot(first.metric);
    std::vector<const SeriesData*> kept;
    SeriesCount count{first.id, 0, 0};
    for (const auto& rec : records) {
      const auto it = std::find_if(rec.series.begin(), rec.series.end(), [&](const NamedSeries& s) {
        return s.metric == first.metric && s.id == first.id;
      });
      if (it == rec.series.end()) throw std::logic_error("run " + std::to_string(rec.index) + " lacks series " + first.metric + "/" + first.id);
      if (it->data.diverged) {
        ++count.diverged;
      } else {
        kept.push_back(&it->data);
        ++count.included;
      }
    }
    agg.counts.push_back(count);
    if (kept.empty()) continue;
    any_included = true;
    const auto& x = kept.front()->x;
    for (const auto* k : kept)
      if (k->x != x || k->y.size() != x.size()) throw std::logic_error("series " + first.metric + "/" + first.id + " differs in shape across runs");
    Series s{first.id, x, std::vector<double>(x.size()), std::vector<double>(x.size())};
    const double n = static_cast<double>(kept.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      double mean = 0.0;
      for (const auto* k : kept) mean += k->y[i];
      mean /= n;
      double var = 0.0;
      for (const auto* k : kept) var += (k->y[i] - mean) * (k->y[i] - mean);
      s.mean[i] = mean;
      s.se[i] = kept.size() > 1 ? std::sqrt(var / (n - 1.0)) / std::sqrt(n) : std::nan("");
    }
    agg.series.push_back(std::move(s));
  }
  if (!any_included) throw AllDivergedError("all " + std::to_string(records.size()) + " runs diverged");
  return out;
}

inline nlohmann::json experiment_summary(const ExperimentConfig& c, const std::vector<RunRecord>& records) {
  nlohmann::json j = nlohmann::json::object();
  if (c.experiment == "deep") {
    const double baseline = random_policy_return(deep_environment(c), c.gamma);
    j["random_policy_return"] = baseline;
    int beat = 0;
    for (const auto& r : records) beat += r.summary.value("final_window_return", -1e300) > baseline;
    j["runs_beating_random_policy"] = beat;
  }
  nlohmann::json per_run = nlohmann::json::array();
  bool any = false;
  for (const auto& r : records) {
    per_run.push_back(r.summary);
    any = any || !r.summary.empty();
  }
  if (any) j["per_run"] = per_run;
  return j;
}

/// Writes one CSV per metric, the run-0 artifacts and manifest.json into `dir`.
inline nlohmann::json write_outputs(const ExperimentConfig& c, const std::vector<RunRecord>& records,
                                    const std::vector<MetricAggregate>& metrics, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());

  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["experiment"] = c.experiment;
  manifest["config"] = to_json(c);
  manifest["seeds"] = {{"base", c.seed}, {"first", c.seed}, {"last", c.seed + static_cast<std::uint64_t>(c.runs - 1)}};
  nlohmann::json files = nlohmann::json::object();
  for (const auto& m : metrics) {
    const std::string name = m.metric + ".csv";
    emit_csv((fs::path(dir) / name).string(), m.series);
    nlohmann::json counts = nlohmann::json::array();
    for (const auto& sc : m.counts) counts.push_back({{"series", sc.id}, {"included", sc.included}, {"diverged", sc.diverged}});
    files[name] = counts;
  }
  manifest["metrics"] = files;
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& rec : records) {
    for (const auto& [name, content] : rec.artifacts) {
      std::ofstream os(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
      os << content;
      if (!os) throw std::runtime_error("write to '" + name + "' failed");
      artifacts.push_back(name);
    }
  }
  manifest["artifacts"] = artifacts;
  manifest["summary"] = experiment_summary(c, records);
  std::ofstream os(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  os << manifest.dump(2) << '\n';
  if (!os) throw std::runtime_error("write to manifest.json failed");
  return manifest;
}

}  // namespace fhrl
