// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "fhrl/cli.hpp"
#include "fhrl/convergence.hpp"
#include "fhrl/deep.hpp"
#include "fhrl/dp.hpp"
#include "fhrl/environments.hpp"
#include "fhrl/experiments.hpp"
#include "fhrl/learners.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace fhrl;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Expected h-step return by enumerating every action/successor path.
double enumerate_return(const TabularMdp& mdp, const Policy& pi, double gamma, int s, int h) {
  if (h == 0 || mdp.terminal(s)) return 0.0;
  double total = 0.0;
  for (int a = 0; a < mdp.n_actions(); ++a) {
    if (pi(s, a) == 0.0) continue;
    for (int y = 0; y < mdp.n_states(); ++y) {
      const double p = mdp.prob(s, a, y);
      if (p == 0.0) continue;
      total += pi(s, a) * p * (mdp.reward(s, a, y) + gamma * enumerate_return(mdp, pi, gamma, y, h - 1));
    }
  }
  return total;
}

/// v = (I - gamma P_pi)^{-1} r_pi for an MDP without terminals, or over live states otherwise.
Vector solve_values(const TabularMdp& mdp, const Policy& pi, double gamma) {
  const int n = mdp.n_states();
  Matrix a = Matrix::Identity(n, n);
  Vector b = Vector::Zero(n);
  for (int s = 0; s < n; ++s) {
    if (mdp.terminal(s)) continue;
    for (int act = 0; act < mdp.n_actions(); ++act) {
      for (int y = 0; y < n; ++y) {
        const double w = pi(s, act) * mdp.prob(s, act, y);
        b(s) += w * mdp.reward(s, act, y);
        if (!mdp.terminal(y)) a(s, y) -= gamma * w;
      }
    }
  }
  return a.partialPivLu().solve(b);
}

/// Expected FHQ update Phi^T D (g_h - Phi w_h) per horizon, written out directly.
double ode_drift_oracle(const HorizonWeights& w, const TabularMdp& mdp, const Vector& d, const FeatureMap& phi,
                        double gamma) {
  const int n = mdp.n_states(), na = mdp.n_actions();
  const Matrix& f = phi.matrix();
  double worst = 0.0;
  for (int h = 1; h <= w.horizons(); ++h) {
    Vector drift = Vector::Zero(w.dim());
    for (int s = 0; s < n; ++s) {
      for (int a = 0; a < na; ++a) {
        const int i = s * na + a;
        double g = 0.0;
        for (int y = 0; y < n; ++y) {
          double best = 0.0;
          if (h > 1 && !mdp.terminal(y)) {
            best = -std::numeric_limits<double>::infinity();
            for (int b = 0; b < na; ++b) best = std::max(best, f.row(y * na + b).dot(w.row(h - 1)));
          }
          g += mdp.prob(s, a, y) * (mdp.reward(s, a, y) + gamma * best);
        }
        drift += d(i) * (g - f.row(i).dot(w.row(h))) * f.row(i).transpose();
      }
    }
    worst = std::max(worst, drift.cwiseAbs().maxCoeff());
  }
  return worst;
}

Matrix random_matrix(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Vector random_vector(int n, Rng& rng) { return random_matrix(n, 1, rng).col(0); }

// ---------------------------------------------------------------------------
// Criteria

Verdict baird_stability() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = parse_config("baird", nlohmann::json::object());
  const auto records = run(c);
  int bounded = 0, td_diverged = 0;
  double worst = 0.0;
  for (const auto& r : records) {
    for (const auto& s : r.series) {
      if (s.metric != "max_abs_value") continue;
      if (s.id == "fhtd" && !s.data.diverged && s.data.x.back() == c.steps) {
        worst = std::max(worst, s.data.y.back());
        bounded += s.data.y.back() < 0.1;
      }
      if (s.id == "td") td_diverged += s.data.diverged;
    }
  }
  const double secs = seconds_since(t0);
  const int runs = static_cast<int>(records.size());
  return {bounded == runs && td_diverged == runs && secs < 60.0,
          "FHTD max|V^100| < 0.1 in " + std::to_string(bounded) + "/" + std::to_string(runs) + " runs (worst " +
              num(worst) + "), TD diverged in " + std::to_string(td_diverged) + "/" + std::to_string(runs) + ", " +
              num(secs) + " s"};
}

Verdict prefix_equality() {
  const TabularMdp mdp = build_random_walk(19);
  const FeatureMap phi = FeatureMap::tabular_states(mdp.n_states());
  const Policy pi = Policy::uniform(mdp.n_states(), mdp.n_actions());
  const double alpha = 0.5, gamma = 1.0;
  const int H = 100;
  double worst = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(1000 + seed);
    const Vector init = random_vector(mdp.n_states(), rng);
    HorizonWeights w = HorizonWeights::uniform_init(H, init);
    Vector v = init;
    int s = sample_start(mdp, rng);
    for (int t = 1; t < H; ++t) {
      const Transition tr = sample_step(mdp, s, pi.sample(s, rng), rng);
      one_step_fhtd_step(w, phi, tr, alpha, TargetScheme::standard(gamma));
      v(tr.s) += alpha * (tr.r + (tr.done ? 0.0 : gamma * v(tr.s_next)) - v(tr.s));
      worst = std::max(worst, (w.row(H).transpose() - v).cwiseAbs().maxCoeff());
      s = tr.done ? sample_start(mdp, rng) : tr.s_next;
    }
  }
  return {worst <= 1e-12, "max |w^100 - w_TD| over 20 seeds x 99 steps = " + num(worst)};
}

Verdict dp_brute_force() {
  Rng rng = make_rng(2000);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const int n = 2 + uniform_index(rng, 4);
    const int na = 1 + uniform_index(rng, 2);
    const int H = 1 + uniform_index(rng, 6);
    const double gamma = 0.5 + 0.5 * uniform01(rng);
    const TabularMdp mdp = build_random_mdp(rng, n, na, 0.3);
    const Policy pi = random_policy(rng, n, na);
    const HorizonValues dp = fh_values(mdp, pi, gamma, H);
    const HorizonValues brute = brute_force_fh_values(mdp, pi, gamma, H);
    for (int h = 0; h <= H; ++h)
      for (int s = 0; s < n; ++s) {
        worst = std::max(worst, std::abs(dp.v(h, s) - enumerate_return(mdp, pi, gamma, s, h)));
        worst = std::max(worst, std::abs(dp.v(h, s) - brute.v(h, s)));
      }
  }
  return {worst <= 1e-10, "max |fh_values - enumeration| over 20 MDPs = " + num(worst)};
}

Verdict truncation_bound() {
  Rng rng = make_rng(3000);
  int violations = 0, checks = 0;
  double tightest = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 50; ++k) {
    const TabularMdp mdp = build_random_mdp(rng, 2 + uniform_index(rng, 7), 1 + uniform_index(rng, 3));
    const Policy pi = random_policy(rng, mdp.n_states(), mdp.n_actions());
    const double r_max = mdp.max_abs_reward();
    for (double gamma : {0.5, 0.9, 0.99}) {
      const HorizonValues fh = fh_values(mdp, pi, gamma, 64);
      const Vector v = solve_values(mdp, pi, gamma);
      // Rounding slack at the scale of the values themselves.
      const double slack = 64.0 * std::numeric_limits<double>::epsilon() * r_max / (1.0 - gamma);
      for (int h = 0; h <= 64; ++h)
        for (int s = 0; s < mdp.n_states(); ++s) {
          const double bound = std::pow(gamma, h) * r_max / (1.0 - gamma);
          const double gap = std::abs(fh.v(h, s) - v(s));
          ++checks;
          if (gap > bound + slack) ++violations;
          tightest = std::min(tightest, bound + slack - gap);
        }
    }
  }
  return {violations == 0, std::to_string(violations) + " violations in " + std::to_string(checks) +
                               " (h, s) checks, smallest margin " + num(tightest)};
}

Verdict ode_equilibrium_check() {
  Rng rng = make_rng(4000);
  double worst_residual = 0.0, worst_identity = 0.0;
  const double gamma = 0.9;
  const int H = 6;
  for (int k = 0; k < 20; ++k) {
    const int n = 3 + uniform_index(rng, 4), na = 2;
    const TabularMdp mdp = build_random_mdp(rng, n, na);
    const Policy mu = random_policy(rng, n, na);
    const StateWeighting d = behavior_state_action_distribution(mdp, mu);
    const FeatureMap phi(random_matrix(n * na, n * na - 2, rng), FeatureMap::Kind::StateAction, na);
    const Equilibrium eq = ode_equilibrium(mdp, d, phi, gamma, H);
    worst_residual = std::max(worst_residual, ode_drift_oracle(eq.w, mdp, d.weights(), phi, gamma));

    const FeatureMap id = FeatureMap::tabular_actions(n, na);
    const Equilibrium tab = ode_equilibrium(mdp, d, id, gamma, H);
    const OptimalHorizons opt = fh_optimal(mdp, gamma, H);
    for (int h = 1; h <= H; ++h)
      for (int s = 0; s < n; ++s)
        for (int a = 0; a < na; ++a)
          worst_identity = std::max(worst_identity, std::abs(tab.w.row(h)(s * na + a) - opt.values.q[h](s, a)));
  }
  return {worst_residual <= 1e-8 && worst_identity <= 1e-8,
          "max residual " + num(worst_residual) + ", identity-feature gap to optimal q " + num(worst_identity)};
}

Verdict n_step_operations() {
  const std::vector<std::pair<int, int>> cases{{64, 1}, {64, 8}, {64, 64}};
  const std::vector<long> expected{64, 15, 64};
  Rng rng = make_rng(5000);
  const TabularMdp mdp = build_random_mdp(rng, 5, 2);
  const FeatureMap phi = FeatureMap::tabular_states(5);
  const Policy pi = Policy::uniform(5, 2);
  std::string detail;
  bool ok = true;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto [H, n] = cases[i];
    const NStepSchedule sched(H, n);
    HorizonWeights w(sched.blocks(), phi.dim());
    RingBuffers ring(n);
    OpCounter ops;
    Rng stream = make_rng(5001);
    int s = sample_start(mdp, stream);
    bool exact = true;
    for (int t = 0; t < 500; ++t) {
      const OpCounter before = ops;
      const Transition tr = sample_step(mdp, s, pi.sample(s, stream), stream);
      n_step_fhtd_step(w, ring, phi, tr, 0.1, 0.9, sched, &ops);
      if (ops.updates > before.updates) {
        exact = exact && (ops.reward_adds - before.reward_adds) + (ops.value_updates - before.value_updates) == expected[i];
      }
      s = tr.s_next;
    }
    const long per = ops.updates ? (ops.reward_adds + ops.value_updates) / ops.updates : -1;
    ok = ok && exact && per == expected[i] && ops.updates == 500 - n + 1;
    detail += "(" + std::to_string(H) + "," + std::to_string(n) + ")->" + std::to_string(per) + (exact ? "" : "!") + " ";
  }
  return {ok, detail + "operations per update"};
}

Verdict reduction_identities() {
  Rng rng = make_rng(6000);
  const TabularMdp mdp = build_random_mdp(rng, 6, 2);
  const FeatureMap phi(random_matrix(6, 4, rng), FeatureMap::Kind::State);
  const Policy pi = random_policy(rng, 6, 2);
  const int H = 8;
  const double alpha = 0.05, gamma = 0.9;
  const Vector init = random_vector(4, rng);
  HorizonWeights one = HorizonWeights::uniform_init(H, init), nstep = one, lam = one;
  RingBuffers ring1(1), ringH(H);
  const NStepSchedule sched(H, 1);
  int s = sample_start(mdp, rng);
  for (int t = 0; t < 2000; ++t) {
    const Transition tr = sample_step(mdp, s, pi.sample(s, rng), rng);
    one_step_fhtd_step(one, phi, tr, alpha, TargetScheme::standard(gamma));
    n_step_fhtd_step(nstep, ring1, phi, tr, alpha, gamma, sched);
    fhtd_lambda_step(lam, ringH, phi, tr, alpha, gamma, 0.0);
    s = tr.s_next;
  }
  const bool n_equal = nstep == one;
  const bool l_equal = lam == one;

  // lambda = 1 under frozen values on a deterministic chain equals the Monte Carlo fixed-horizon return.
  const int len = 6, Hc = 4;
  std::vector<Matrix> p(1, Matrix::Zero(len + 1, len + 1)), r(1, Matrix::Zero(len + 1, len + 1));
  std::vector<double> rewards;
  for (int i = 0; i < len; ++i) {
    p[0](i, i + 1) = 1.0;
    rewards.push_back(std::round(10.0 * (uniform01(rng) - 0.5)));
    r[0](i, i + 1) = rewards.back();
  }
  p[0](len, len) = 1.0;
  std::vector<bool> term(len + 1, false);
  term[len] = true;
  Vector start = Vector::Zero(len + 1);
  start(0) = 1.0;
  const TabularMdp chain(p, r, term, start);
  const FeatureMap tab = FeatureMap::tabular_states(len + 1);
  RowMatrix frozen_rows = RowMatrix::Zero(Hc + 1, len + 1);
  for (int h = 1; h <= Hc; ++h)
    for (int i = 0; i < len; ++i) frozen_rows(h, i) = std::round(8.0 * (uniform01(rng) - 0.5));
  HorizonWeights frozen(Hc, len + 1);
  for (int h = 1; h <= Hc; ++h) frozen.mutable_row(h) = frozen_rows.row(h);
  HorizonWeights target = frozen;
  RingBuffers ring(Hc);
  const double g = 0.5, a = 0.25;
  for (int i = 0; i < len; ++i) {
    const Transition tr{i, 0, rewards[static_cast<std::size_t>(i)], i + 1, i + 1 == len};
    fhtd_lambda_backup(frozen, target, ring, tab, tr, a, g, 1.0);
  }
  double worst = 0.0;
  for (int i = 0; i < len; ++i)
    for (int h = 1; h <= Hc; ++h) {
      double ret = 0.0, disc = 1.0;
      for (int k = i; k < std::min(len, i + h); ++k) {
        ret += disc * rewards[static_cast<std::size_t>(k)];
        disc *= g;
      }
      const double expected = frozen_rows(h, i) + a * (ret - frozen_rows(h, i));
      worst = std::max(worst, std::abs(target.row(h)(i) - expected));
    }
  return {n_equal && l_equal && worst <= 1e-12, std::string("n=1 ") + (n_equal ? "bitwise equal" : "DIFFERS") +
                                                  ", lambda=0 " + (l_equal ? "bitwise equal" : "DIFFERS") +
                                                  ", lambda=1 vs MC max gap " + num(worst)};
}

Verdict agreement_shape() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = parse_config("agreement", {{"runs", 200}});
  const auto records = run(c);
  double h1 = 0.0, h32 = 0.0;
  bool final_exact = true;
  for (const auto& r : records) {
    const auto& y = r.series.front().data.y;  // entry h - 1
    final_exact = final_exact && y[63] == 1.0;
    h1 += y[0];
    h32 += y[31];
  }
  h1 /= static_cast<double>(records.size());
  h32 /= static_cast<double>(records.size());
  const double secs = seconds_since(t0);
  return {final_exact && h1 < h32 && secs < 120.0,
          std::string("h=64 ") + (final_exact ? "exactly 1" : "NOT 1") + ", mean h=1 " + num(h1) + " < h=32 " +
              num(h32) + ", " + num(secs) + " s"};
}

Verdict slippery_maze() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto maze = build_slippery_maze_env();
  const OptimalHorizons opt = fh_optimal(maze.mdp, 1.0, 500);
  const Policy greedy = opt.greedy_policy(500, maze.mdp.n_actions());
  const double exact = expected_episode_length(maze.mdp, greedy);
  Rng rng = make_rng(9000);
  const int episodes = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int e = 0; e < episodes; ++e) {
    int s = sample_start(maze.mdp, rng);
    double steps = 0.0;
    while (!maze.mdp.terminal(s)) {
      s = sample_step(maze.mdp, s, greedy.sample(s, rng), rng).s_next;
      ++steps;
    }
    sum += steps;
    sum_sq += steps * steps;
  }
  const double mean = sum / episodes;
  const double se = std::sqrt((sum_sq / episodes - mean * mean) / (episodes - 1));
  const bool mc_ok = std::abs(mean - exact) <= 2.0 * se;

  const ExperimentConfig c = parse_config("maze", {{"algorithms", {"fhq"}}, {"horizons", {8, 16}}});
  const auto records = run(c);
  const auto agg = aggregate(records);
  std::map<std::string, std::vector<double>> final_len;
  for (const auto& m : agg)
    if (m.metric == "final_length")
      for (const auto& s : m.series) final_len[s.id] = s.mean;
  const auto& h8 = final_len.at("fhq H=8");
  const auto& h16 = final_len.at("fhq H=16");
  const double best8 = *std::min_element(h8.begin(), h8.end());
  const double best16 = *std::min_element(h16.begin(), h16.end());
  std::string per_alpha;
  for (std::size_t i = 0; i < c.alphas.size(); ++i)
    per_alpha += " a=" + num(c.alphas[i]) + ":" + num(h8[i]) + "/" + num(h16[i]);
  const double secs = seconds_since(t0);
  return {mc_ok && best16 < best8 && secs < 300.0,
          "optimal length " + num(exact) + " vs MC " + num(mean) + " +- " + num(se) + "; final-20 length H=8 best " +
              num(best8) + ", H=16 best " + num(best16) + " (H=8/H=16" + per_alpha + "), " + num(secs) + " s"};
}

Verdict deep_mechanism() {
  const auto t0 = std::chrono::steady_clock::now();
  // Gradient against central differences.
  Rng rng = make_rng(10000);
  const MlpShape shape{25, 16, 16, 8, 4};
  const TabularMdp grid = build_checkered_grid();
  const FeatureMap enc = FeatureMap::tabular_states(grid.n_states());
  const Mlp net = Mlp::initialized(shape, rng);
  const Mlp target = Mlp::initialized(shape, rng);
  std::vector<Transition> batch;
  for (int i = 0; i < 16; ++i) {
    int s = uniform_index(rng, grid.n_states());
    while (grid.terminal(s)) s = uniform_index(rng, grid.n_states());
    batch.push_back(sample_step(grid, s, uniform_index(rng, 4), rng));
  }
  const LossGrad lg = loss_and_grad(net, batch, enc, 0.99, target);
  double worst_rel = 0.0;
  int probes = 0;
  std::uniform_int_distribution<long> pick(0, shape.n_params() - 1);
  while (probes < 100) {
    const long k = pick(rng);
    // Fourth-order central stencil; a wider step keeps roundoff below the tolerance.
    const double step = 1e-4;
    auto shifted = [&](double dx) {
      Mlp moved = net;
      moved.params()(k) += dx;
      return loss_and_grad(moved, batch, enc, 0.99, target).loss;
    };
    const double fd =
        (-shifted(2 * step) + 8 * shifted(step) - 8 * shifted(-step) + shifted(-2 * step)) / (12 * step);
    const double scale = std::max(std::abs(fd), std::abs(lg.grad(k)));
    if (scale < 1e-7) continue;  // coordinate outside the batch's active paths
    worst_rel = std::max(worst_rel, std::abs(fd - lg.grad(k)) / scale);
    ++probes;
  }

  // Frozen-target regression on a fixed batch.
  Mlp learner = net;
  RmsPropState opt(shape.n_params(), 1e-5);
  double prev = loss_and_grad(learner, batch, enc, 0.99, target).loss;
  bool monotone = true;
  for (int step = 0; step < 200; ++step) {
    rmsprop_step(learner.params(), loss_and_grad(learner, batch, enc, 0.99, target).grad, opt);
    const double now = loss_and_grad(learner, batch, enc, 0.99, target).loss;
    monotone = monotone && now <= prev;
    prev = now;
  }

  // Training on the checkered grid against the random policy's exact discounted return.
  const ExperimentConfig c = parse_config("deep", nlohmann::json::object());
  const Vector v_random = solve_values(grid, Policy::uniform(grid.n_states(), grid.n_actions()), c.gamma);
  const double baseline = grid.start_dist().dot(v_random);
  const auto records = run(c);
  int beat = 0;
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    const double ret = r.summary.at("final_window_return").get<double>();
    lowest = std::min(lowest, ret);
    beat += ret > baseline;
  }
  const double secs = seconds_since(t0);
  return {worst_rel < 1e-4 && monotone && beat >= 9 && secs < 600.0,
          "gradient rel. error " + num(worst_rel) + " at 100 probes, frozen-target loss " +
              (monotone ? "non-increasing" : "INCREASED") + ", DFHQ beat random (" + num(baseline) + ") in " +
              std::to_string(beat) + "/" + std::to_string(records.size()) + " seeds (lowest " + num(lowest) + "), " +
              num(secs) + " s"};
}

Verdict companion_recursion() {
  Rng rng = make_rng(11000);
  std::vector<Vector> rewards;
  for (int n = 0; n < 5; ++n) rewards.push_back(random_vector(6, rng));
  const double alpha = 0.5;
  const SyncTrace tr = sync_fhtd_iterate(rewards, alpha, 200);
  int settled = -1;
  for (Eigen::Index t = 0; t < tr.delta_norms.rows(); ++t) {
    if (tr.delta_norms.row(t).maxCoeff() < 1e-6) {
      settled = static_cast<int>(t + 1);
      break;
    }
  }
  double worst = 0.0;
  const double first = tr.delta_norms(0, 0);
  for (Eigen::Index t = 0; t < tr.delta_norms.rows(); ++t)
    worst = std::max(worst, std::abs(tr.delta_norms(t, 0) - std::pow(1.0 - alpha, static_cast<double>(t)) * first));
  return {settled > 0 && worst <= 1e-12, "all ||Delta_n|| < 1e-6 at iteration " + std::to_string(settled) +
                                             ", max |Delta_1 - (1-a)^t Delta_1^1| = " + num(worst)};
}

Verdict companion_descent() {
  Rng rng = make_rng(12000);
  const double c = 0.1, gamma = 0.9;
  const int N = 5;
  double worst = 0.0, worst_alpha = 0.0;
  bool converged = true;
  for (int k = 0; k < 10; ++k) {
    const TabularMdp mdp = build_random_mdp(rng, 6, 2);
    const Policy pi = random_policy(rng, 6, 2);
    const FeatureMap phi(random_matrix(6, 3, rng), FeatureMap::Kind::State);
    const StateWeighting d = behavior_state_distribution(mdp, pi);
    const Matrix f = phi.matrix();
    const Matrix dm = d.weights().asDiagonal();
    const Matrix gram = f.transpose() * dm * f;
    const double m_big = Eigen::SelfAdjointEigenSolver<Matrix>(gram).eigenvalues().maxCoeff();
    const double alpha_max = 2.0 * c / (m_big * (2.0 - c) * (2.0 - c));
    const GdResult gd = surrogate_gd_run(mdp, pi, d, phi, gamma, 0.5 * alpha_max, N, c);
    converged = converged && gd.converged;
    worst_alpha = std::max(worst_alpha, std::abs(gd.constants.alpha_max - alpha_max) / alpha_max);

    // Pi_D T u*_{n-1} from the normal equations, u*_0 = 0.
    const Matrix p = policy_transition_matrix(mdp, pi);
    const Vector r = policy_reward_vector(mdp, pi);
    Vector u = Vector::Zero(6);
    for (int n = 0; n < N; ++n) {
      const Vector t = r + gamma * p * u;
      const Vector proj = f * gram.ldlt().solve(f.transpose() * dm * t);
      const Vector gap = f * gd.w[static_cast<std::size_t>(n)] - proj;
      worst = std::max(worst, std::sqrt(gap.cwiseAbs2().dot(d.weights())));
      u = proj;
    }
  }
  return {converged && worst <= 1e-8 && worst_alpha < 1e-12,
          "max ||Phi w_n - Pi_D T u*_{n-1}||_D = " + num(worst) + " over 10 MDPs, n <= 5, " +
              (converged ? "all converged" : "NOT all converged")};
}

Verdict determinism() {
  const std::map<std::string, std::vector<std::string>> small{
      {"baird", {"--set", "steps=500", "--set", "H=20"}},
      {"walk", {"--set", "steps=200", "--set", "H=20"}},
      {"maze", {"--set", "episodes=5", "--set", "final_window=2", "--set", "horizons=[4,8]", "--set", "gammas=[0.9]",
                "--set", "alphas=[0.5]"}},
      {"checkered", {"--set", "episodes=3", "--set", "ns=[1,4]", "--set", "lambdas=[0.5]", "--set", "alphas=[0.25]"}},
      {"agreement", {"--set", "H=16"}},
      {"deep", {"--set", "frames=1500", "--set", "eps_anneal_frames=500", "--set", "H=4", "--set", "hidden=16"}},
      {"convergence", {"--set", "steps=50"}},
  };
  const fs::path root = fs::temp_directory_path() / "fhrl_acceptance_determinism";
  fs::remove_all(root);
  int identical = 0, compared = 0;
  std::string mismatch;
  for (const auto& id : experiment_ids()) {
    std::vector<std::string> dirs;
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = root / (id + "_" + std::to_string(rep));
      std::vector<std::string> args{id, "--runs", "3", "--seed", "7", "--quiet", "--out", out.string()};
      args.insert(args.end(), small.at(id).begin(), small.at(id).end());
      std::ostringstream o, e;
      if (cli::main(args, o, e) != 0) mismatch += id + " failed: " + e.str();
      dirs.push_back(out.string());
    }
    for (const auto& entry : fs::directory_iterator(dirs[0])) {
      if (entry.path().extension() != ".csv") continue;
      auto read = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
      };
      ++compared;
      if (read(entry.path()) == read(fs::path(dirs[1]) / entry.path().filename())) {
        ++identical;
      } else {
        mismatch += " " + id + "/" + entry.path().filename().string();
      }
    }
  }
  fs::remove_all(root);
  return {compared > 0 && identical == compared && mismatch.empty(),
          std::to_string(identical) + "/" + std::to_string(compared) + " CSVs byte-identical across 7 experiments" +
              (mismatch.empty() ? "" : ";" + mismatch)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"Baird stability", baird_stability},
      {"Prefix equality with TD(0)", prefix_equality},
      {"DP equals brute-force enumeration", dp_brute_force},
      {"Truncation bound", truncation_bound},
      {"ODE equilibrium", ode_equilibrium_check},
      {"n-step operation count", n_step_operations},
      {"Reduction identities", reduction_identities},
      {"Horizon agreement shape", agreement_shape},
      {"Slippery maze", slippery_maze},
      {"Deep FHQ mechanism", deep_mechanism},
      {"Synchronous recursion", companion_recursion},
      {"Surrogate gradient descent", companion_descent},
      {"CLI determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << (i + 1 < 10 ? " " : "") << i + 1 << ". " << criteria[i].first
              << ": " << v.detail << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
