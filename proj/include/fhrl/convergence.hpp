#pragma once

#include "fhrl/dp.hpp"
#include "fhrl/learners.hpp"
#include "fhrl/mdp.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

namespace fhrl {

/// Diagonal weighting D over states or state-action pairs, and its norm.
class StateWeighting {
 public:
  explicit StateWeighting(Vector weights) : d_(std::move(weights)) {
    if (d_.size() == 0 || !d_.allFinite() || d_.minCoeff() < 0.0) {
      throw std::invalid_argument("weighting entries must be finite and non-negative");
    }
    if (std::abs(d_.sum() - 1.0) > 1e-12) throw std::invalid_argument("weighting must sum to 1");
  }

  static StateWeighting uniform(int n) { return StateWeighting(Vector::Constant(n, 1.0 / n)); }

  /// Normalizes non-negative weights; tiny negative round-off is clamped to zero.
  static StateWeighting normalized(Vector raw) {
    raw = raw.cwiseMax(0.0);
    const double total = raw.sum();
    if (!(total > 0.0)) throw std::invalid_argument("weighting has no mass");
    return StateWeighting(raw / total);
  }

  int size() const { return static_cast<int>(d_.size()); }
  const Vector& weights() const { return d_; }
  double operator()(int i) const { return d_(i); }
  auto matrix() const { return d_.asDiagonal(); }
  bool full_support() const { return d_.minCoeff() > 0.0; }

  /// ||x||_D = sqrt(x^T D x).
  double norm(const Vector& x) const { return std::sqrt(x.cwiseAbs2().dot(d_)); }

 private:
  Vector d_;
};

/// Stationary distribution of a row-stochastic matrix (left eigenvector for the eigenvalue closest to 1).
inline Vector stationary_distribution(const Matrix& p) {
  Eigen::EigenSolver<Matrix> es(p.transpose());
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < es.eigenvalues().size(); ++i) {
    if (std::abs(es.eigenvalues()(i) - 1.0) < std::abs(es.eigenvalues()(best) - 1.0)) best = i;
  }
  Vector v = es.eigenvectors().col(best).real();
  if (v.sum() < 0.0) v = -v;
  v = v.cwiseMax(0.0);
  return v / v.sum();
}

/**
 * Behavior chain with restarts: a transition into a terminal state is
 * replaced by a draw from the start distribution, so terminals get zero
 * stationary weight.
 */
inline Matrix restart_chain(const TabularMdp& mdp, const Policy& mu) {
  Matrix p = policy_transition_matrix(mdp, mu);
  const int n = mdp.n_states();
  for (int t = 0; t < n; ++t) {
    if (!mdp.terminal(t)) continue;
    for (int s = 0; s < n; ++s) {
      const double into = mdp.terminal(s) ? 0.0 : p(s, t);
      p(s, t) -= into;
      p.row(s) += into * mdp.start_dist().transpose();
    }
  }
  for (int t = 0; t < n; ++t)
    if (mdp.terminal(t)) p.row(t) = mdp.start_dist().transpose();
  return p;
}

inline StateWeighting behavior_state_distribution(const TabularMdp& mdp, const Policy& mu) {
  Vector d = stationary_distribution(restart_chain(mdp, mu));
  for (int s = 0; s < mdp.n_states(); ++s)
    if (mdp.terminal(s)) d(s) = 0.0;
  return StateWeighting::normalized(d);
}

/// d(s, a) = d_mu(s) mu(a|s), indexed s * n_actions + a.
inline StateWeighting behavior_state_action_distribution(const TabularMdp& mdp, const Policy& mu) {
  const Vector ds = behavior_state_distribution(mdp, mu).weights();
  const int na = mdp.n_actions();
  Vector d(mdp.n_states() * na);
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int a = 0; a < na; ++a) d(s * na + a) = ds(s) * mu(s, a);
  return StateWeighting::normalized(d);
}

// ---------------------------------------------------------------------------
// Iteration matrices

struct IterationReport {
  Matrix a_fhtd;  ///< Phi^T D Phi
  Matrix a_td;    ///< Phi^T D (I - gamma P) Phi
  Vector fhtd_eigenvalues;
  Eigen::VectorXcd td_eigenvalues;
  bool fhtd_symmetric = false;
  bool fhtd_positive_definite = false;
  double td_min_real_part = 0.0;
};

inline IterationReport iteration_matrices(const FeatureMap& phi, const StateWeighting& d, const Matrix& p,
                                          double gamma) {
  const Matrix& f = phi.matrix();
  if (f.rows() != d.size() || p.rows() != d.size() || p.cols() != d.size()) {
    throw std::invalid_argument("feature rows, weighting and transition matrix must agree in size");
  }
  IterationReport rep;
  rep.a_fhtd = f.transpose() * d.matrix() * f;
  const Matrix i_minus_p = Matrix::Identity(p.rows(), p.cols()) - gamma * p;
  rep.a_td = f.transpose() * d.matrix() * i_minus_p * f;
  rep.fhtd_symmetric = (rep.a_fhtd - rep.a_fhtd.transpose()).cwiseAbs().maxCoeff() <= 1e-12;
  const Matrix sym = 0.5 * (rep.a_fhtd + rep.a_fhtd.transpose());
  rep.fhtd_eigenvalues = Eigen::SelfAdjointEigenSolver<Matrix>(sym).eigenvalues();
  rep.fhtd_positive_definite = rep.fhtd_symmetric && rep.fhtd_eigenvalues.minCoeff() > 0.0;
  rep.td_eigenvalues = Eigen::EigenSolver<Matrix>(rep.a_td).eigenvalues();
  rep.td_min_real_part = rep.td_eigenvalues.real().minCoeff();
  return rep;
}

// ---------------------------------------------------------------------------
// ODE equilibrium of linear FHQ-learning

class SingularGramError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Equilibrium {
  HorizonWeights w;
  bool least_squares = false;  ///< Gram matrix singular; min-norm solution used
};

namespace detail {

/// E_{y ~ p(.|x)}[r + gamma w^h . phi*_w(y, h)] for every state-action row x. Terminal y bootstraps 0.
inline Vector expected_targets(const TabularMdp& mdp, const FeatureMap& phi, const HorizonWeights& w, int h,
                               double gamma) {
  const int n = mdp.n_states();
  const int na = mdp.n_actions();
  Vector boot = Vector::Zero(n);
  if (h > 0) {
    for (int y = 0; y < n; ++y) {
      if (mdp.terminal(y)) continue;
      boot(y) = w.value(phi, phi.index(y, greedy_action(w, phi, y, h)), h);
    }
  }
  Vector g(n * na);
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < na; ++a) g(s * na + a) = mdp.expected_reward(s, a) + gamma * mdp.prob(a).row(s).dot(boot);
  return g;
}

inline void check_control_inputs(const TabularMdp& mdp, const StateWeighting& d, const FeatureMap& phi) {
  if (phi.kind() != FeatureMap::Kind::StateAction || phi.n_actions() != mdp.n_actions() ||
      phi.rows() != mdp.n_states() * mdp.n_actions() || d.size() != phi.rows()) {
    throw std::invalid_argument("state-action features and weighting must cover every (s, a) of the MDP");
  }
}

}  // namespace detail

/**
 * Solves each row h+1 from row h of `w` (rows of w other than the inputs are
 * ignored): Phi^T D Phi w^{h+1} = Phi^T D E[r + gamma w^h phi*]. With
 * `sequential` set, each solved row feeds the next, giving the equilibrium
 * in H solves; otherwise every row reads the given w.
 */
inline Equilibrium ode_solve_rows(const HorizonWeights& w, const TabularMdp& mdp, const StateWeighting& d,
                                  const FeatureMap& phi, double gamma, bool allow_least_squares, bool sequential) {
  detail::check_control_inputs(mdp, d, phi);
  const Matrix& f = phi.matrix();
  const Matrix gram = f.transpose() * d.matrix() * f;
  Eigen::FullPivLU<Matrix> lu(gram);
  const bool singular = !lu.isInvertible();
  if (singular && !allow_least_squares) {
    throw SingularGramError("Gram matrix Phi^T D Phi is singular (rank " + std::to_string(lu.rank()) + " < " +
                            std::to_string(gram.rows()) +
                            "); pass allow_least_squares for a flagged minimum-norm solution");
  }
  std::optional<Eigen::CompleteOrthogonalDecomposition<Matrix>> cod;
  if (singular) cod.emplace(gram);

  const int H = w.horizons();
  Equilibrium out{HorizonWeights(H, w.dim()), singular};
  for (int h = 0; h < H; ++h) {
    const HorizonWeights& source = sequential ? out.w : w;
    const Vector g = detail::expected_targets(mdp, phi, source, h, gamma);
    const Vector b = f.transpose() * d.matrix() * g;
    const Vector row = singular ? Vector(cod->solve(b)) : Vector(lu.solve(b));
    out.w.mutable_row(h + 1) = row.transpose();
  }
  return out;
}

inline Equilibrium ode_equilibrium(const TabularMdp& mdp, const StateWeighting& d, const FeatureMap& phi,
                                   double gamma, int H, bool allow_least_squares = false) {
  return ode_solve_rows(HorizonWeights(H, phi.dim()), mdp, d, phi, gamma, allow_least_squares, true);
}

/// Expected update direction per horizon, E[(target^h - w^h phi) phi]; row h of the result (row 0 unused).
inline RowMatrix ode_drift(const HorizonWeights& w, const TabularMdp& mdp, const StateWeighting& d,
                           const FeatureMap& phi, double gamma) {
  detail::check_control_inputs(mdp, d, phi);
  const Matrix& f = phi.matrix();
  RowMatrix drift = RowMatrix::Zero(w.horizons() + 1, w.dim());
  for (int h = 1; h <= w.horizons(); ++h) {
    const Vector g = detail::expected_targets(mdp, phi, w, h - 1, gamma);
    const Vector v = f * w.row(h).transpose();
    drift.row(h) = (f.transpose() * d.matrix() * (g - v)).transpose();
  }
  return drift;
}

inline double ode_residual(const HorizonWeights& w, const TabularMdp& mdp, const StateWeighting& d,
                           const FeatureMap& phi, double gamma) {
  return ode_drift(w, mdp, d, phi, gamma).cwiseAbs().maxCoeff();
}

struct BoundCheck {
  std::vector<double> left;   ///< gamma^2 E[(w^h phi*_w - w_e^h phi*_{w_e})^2]
  std::vector<double> right;  ///< E[(w^{h+1} phi - w_e^{h+1} phi)^2]
  std::vector<bool> holds;    ///< left + 1e-12 < right
  std::vector<bool> degenerate;  ///< right side within 1e-12 of zero: w^{h+1} already at equilibrium

  bool all_hold() const {
    for (bool b : holds)
      if (!b) return false;
    return true;
  }
};

/// Per-horizon contraction condition, h = 0..H-1, evaluated exactly under d.
inline BoundCheck ode_bound_check(const HorizonWeights& w, const HorizonWeights& w_e, const TabularMdp& mdp,
                                  const StateWeighting& d, const FeatureMap& phi, double gamma) {
  detail::check_control_inputs(mdp, d, phi);
  if (w.horizons() != w_e.horizons() || w.dim() != w_e.dim()) throw std::invalid_argument("weight shapes differ");
  const int H = w.horizons();
  const int n = mdp.n_states();
  const int na = mdp.n_actions();
  BoundCheck out;
  for (int h = 0; h < H; ++h) {
    Vector gap = Vector::Zero(n);  // w^h phi*_w(y) - w_e^h phi*_{w_e}(y)
    if (h > 0) {
      for (int y = 0; y < n; ++y) {
        if (mdp.terminal(y)) continue;
        gap(y) = w.value(phi, phi.index(y, greedy_action(w, phi, y, h)), h) -
                 w_e.value(phi, phi.index(y, greedy_action(w_e, phi, y, h)), h);
      }
    }
    const Vector gap_sq = gap.cwiseAbs2();
    double left = 0.0, right = 0.0;
    for (int s = 0; s < n; ++s) {
      for (int a = 0; a < na; ++a) {
        const int x = phi.index(s, a);
        if (d(x) == 0.0) continue;
        left += d(x) * mdp.prob(a).row(s).dot(gap_sq);
        const double diff = w.value(phi, x, h + 1) - w_e.value(phi, x, h + 1);
        right += d(x) * diff * diff;
      }
    }
    left *= gamma * gamma;
    out.left.push_back(left);
    out.right.push_back(right);
    out.holds.push_back(left + 1e-12 < right);
    out.degenerate.push_back(right <= 1e-12);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synchronous tabular recursion

struct SyncTrace {
  Matrix delta_norms;          ///< row t-1 holds ||Delta_n^t||, t = 1..T, column n-1
  std::vector<Vector> values;  ///< v_n after T iterations
};

/**
 * v_n <- v_n - alpha Delta_n with Delta_n = v_n - v_{n-1} - r_n and v_0 = 0,
 * all horizons updated from the same iterate. Starts from v = 0 unless
 * `init` is given.
 */
inline SyncTrace sync_fhtd_iterate(const std::vector<Vector>& rewards, double alpha, int steps,
                                   const std::vector<Vector>* init = nullptr) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  if (rewards.empty() || steps < 1) throw std::invalid_argument("need at least one horizon and one step");
  const auto N = rewards.size();
  const auto dim = rewards.front().size();
  std::vector<Vector> v = init ? *init : std::vector<Vector>(N, Vector::Zero(dim));
  if (v.size() != N) throw std::invalid_argument("init must hold one vector per horizon");
  SyncTrace out{Matrix(steps, static_cast<Eigen::Index>(N)), {}};
  std::vector<Vector> delta(N);
  for (int t = 0; t < steps; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      delta[n] = v[n] - rewards[n];
      if (n > 0) delta[n] -= v[n - 1];
      out.delta_norms(t, static_cast<Eigen::Index>(n)) = delta[n].norm();
    }
    for (std::size_t n = 0; n < N; ++n) v[n] -= alpha * delta[n];
  }
  out.values = std::move(v);
  return out;
}

// ---------------------------------------------------------------------------
// Full-expectation gradient descent on the per-horizon Bellman losses

struct StabilityConstants {
  double M = 0.0;        ///< ||Phi^T D Phi||
  double M_prime = 0.0;  ///< max(M, ||Phi^T D P Phi||)
  double m = 0.0;        ///< 1 / ||(Phi^T D Phi)^{-1}||
  double kappa = 0.0;    ///< M' / m
  double c = 0.0;
  double alpha_max = 0.0;  ///< 2c / (M (2 - c)^2)
};

inline StabilityConstants stability_constants(const FeatureMap& phi, const StateWeighting& d, const Matrix& p,
                                              double c) {
  if (!(c > 0.0 && c < 1.0)) throw std::invalid_argument("margin c must lie in (0, 1)");
  const Matrix& f = phi.matrix();
  const Matrix gram = f.transpose() * d.matrix() * f;
  const Vector eig = Eigen::SelfAdjointEigenSolver<Matrix>(gram).eigenvalues();
  if (!(eig.minCoeff() > 0.0)) throw SingularGramError("features are not linearly independent under D");
  const Matrix cross = f.transpose() * d.matrix() * p * f;
  StabilityConstants k;
  k.M = eig.maxCoeff();
  k.M_prime = std::max(k.M, Eigen::JacobiSVD<Matrix>(cross).singularValues()(0));
  k.m = eig.minCoeff();
  k.kappa = k.M_prime / k.m;
  k.c = c;
  k.alpha_max = 2.0 * c / (k.M * (2.0 - c) * (2.0 - c));
  return k;
}

struct LossTrace {
  std::vector<long> step;
  std::vector<double> surrogate;  ///< J = 1/2 ||T v_{n-1} - Phi w_n||_D^2 with the current v_{n-1}
  std::vector<double> truth;      ///< J* = 1/2 ||T u*_{n-1} - Phi w_n||_D^2
  std::vector<double> distance;   ///< ||w_n - w_n*||
  std::vector<double> drift;      ///< eps = ||T v_{n-1} - T u*_{n-1}||_D
};

struct GdResult {
  StabilityConstants constants;
  std::vector<LossTrace> traces;  ///< one per horizon n = 1..N
  std::vector<Vector> w;          ///< final w_n
  std::vector<Vector> w_star;     ///< Phi w_n* = Pi_D T u*_{n-1}
  std::vector<double> projection_gap;  ///< ||Phi w_n - Pi_D T u*_{n-1}||_D
  long steps = 0;
  bool converged = false;
};

struct GdOptions {
  long max_steps = 2000000;
  double tolerance = 1e-13;  ///< stop once every per-step move is below this
  long record_every = 1;
};

/**
 * Runs w_n <- w_n + alpha Phi^T D (T Phi w_{n-1} - Phi w_n) for all horizons
 * at once from w = 0, where T v = r_pi + gamma P_pi v. This is descent on J.
 * Refuses alpha >= alpha_max.
 */
inline GdResult surrogate_gd_run(const TabularMdp& mdp, const Policy& pi, const StateWeighting& d,
                                 const FeatureMap& phi, double gamma, double alpha, int n_horizons, double c,
                                 const GdOptions& opt = {}) {
  const Matrix p = policy_transition_matrix(mdp, pi);
  const Vector r = policy_reward_vector(mdp, pi);
  GdResult out;
  out.constants = stability_constants(phi, d, p, c);
  if (!(alpha > 0.0) || alpha >= out.constants.alpha_max) {
    throw std::invalid_argument("step size " + format_double(alpha) + " must lie in (0, alpha_max = " +
                                format_double(out.constants.alpha_max) + ")");
  }
  if (n_horizons < 1) throw std::invalid_argument("need at least one horizon");
  const Matrix& f = phi.matrix();
  const Matrix ftd = f.transpose() * d.matrix();
  const Eigen::LDLT<Matrix> gram(ftd * f);
  auto bellman = [&](const Vector& v) -> Vector { return r + gamma * p * v; };

  // Converged targets: u*_0 = 0, Phi w_n* = Pi_D T u*_{n-1}.
  std::vector<Vector> true_targets;
  Vector u = Vector::Zero(mdp.n_states());
  for (int n = 0; n < n_horizons; ++n) {
    const Vector target = bellman(u);
    const Vector ws = gram.solve(ftd * target);
    true_targets.push_back(target);
    out.w_star.push_back(ws);
    u = f * ws;
  }

  std::vector<Vector> w(n_horizons, Vector::Zero(phi.dim()));
  out.traces.resize(n_horizons);
  std::vector<Vector> targets(n_horizons);
  for (long t = 0;; ++t) {
    for (int n = 0; n < n_horizons; ++n) targets[n] = bellman(n == 0 ? Vector::Zero(mdp.n_states()) : Vector(f * w[n - 1]));
    const bool record = t % opt.record_every == 0;
    double largest_move = 0.0;
    for (int n = 0; n < n_horizons; ++n) {
      const Vector v = f * w[n];
      if (record) {
        auto& tr = out.traces[n];
        tr.step.push_back(t);
        tr.surrogate.push_back(0.5 * std::pow(d.norm(targets[n] - v), 2));
        tr.truth.push_back(0.5 * std::pow(d.norm(true_targets[n] - v), 2));
        tr.distance.push_back((w[n] - out.w_star[n]).norm());
        tr.drift.push_back(d.norm(targets[n] - true_targets[n]));
      }
      const Vector move = alpha * (ftd * (targets[n] - v));
      largest_move = std::max(largest_move, move.cwiseAbs().maxCoeff());
      w[n] += move;
    }
    out.steps = t + 1;
    if (!std::isfinite(largest_move)) throw DivergenceError(0, t);
    if (largest_move < opt.tolerance) {
      out.converged = true;
      break;
    }
    if (out.steps >= opt.max_steps) break;
  }
  out.w = w;
  for (int n = 0; n < n_horizons; ++n) out.projection_gap.push_back(d.norm(f * (w[n] - out.w_star[n])));
  return out;
}

/// Pi_D = Phi (Phi^T D Phi)^{-1} Phi^T D.
inline Matrix projection_matrix(const FeatureMap& phi, const StateWeighting& d) {
  const Matrix& f = phi.matrix();
  const Matrix ftd = f.transpose() * d.matrix();
  return f * (ftd * f).ldlt().solve(ftd);
}

// ---------------------------------------------------------------------------
// Progress monitor

/// Losses around one window of learning against a frozen target. Losses are norms (not squared).
struct LossWindow {
  double surrogate_before = 0.0;
  double surrogate_after = 0.0;
  double true_before = 0.0;
  double true_after = 0.0;
  double eps = 0.0;  ///< distance between frozen and true target in the same norm
};

struct WindowVerdict {
  double surrogate_drop = 0.0;
  double true_drop = 0.0;
  double guaranteed_drop = 0.0;  ///< c - 2 eps
  bool converged = false;        ///< surrogate drop < c
  bool violated = false;         ///< progressing window with true drop <= c - 2 eps
};

struct ProgressReport {
  double c = 0.0;
  std::vector<WindowVerdict> windows;
  int violations = 0;
  int progressing = 0;
};

inline ProgressReport progress_monitor(const std::vector<LossWindow>& windows, double c) {
  if (!(c > 0.0)) throw std::invalid_argument("stopping constant c must be positive");
  ProgressReport rep{c, {}, 0, 0};
  for (const auto& w : windows) {
    if (w.eps < 0.0) throw std::invalid_argument("target drift eps must be non-negative");
    WindowVerdict v;
    v.surrogate_drop = w.surrogate_before - w.surrogate_after;
    v.true_drop = w.true_before - w.true_after;
    v.guaranteed_drop = c - 2.0 * w.eps;
    v.converged = v.surrogate_drop < c;
    if (!v.converged) {
      ++rep.progressing;
      v.violated = !(v.true_drop > v.guaranteed_drop);
      rep.violations += v.violated;
    }
    rep.windows.push_back(v);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON reports

inline nlohmann::json to_json(const IterationReport& r) {
  std::vector<double> re, im;
  for (Eigen::Index i = 0; i < r.td_eigenvalues.size(); ++i) {
    re.push_back(r.td_eigenvalues(i).real());
    im.push_back(r.td_eigenvalues(i).imag());
  }
  return {{"fhtd_eigenvalues", std::vector<double>(r.fhtd_eigenvalues.data(),
                                                   r.fhtd_eigenvalues.data() + r.fhtd_eigenvalues.size())},
          {"fhtd_positive_definite", r.fhtd_positive_definite},
          {"td_eigenvalues_real", re},
          {"td_eigenvalues_imag", im},
          {"td_min_real_part", r.td_min_real_part}};
}

inline nlohmann::json to_json(const BoundCheck& b) {
  return {{"left", b.left}, {"right", b.right}, {"holds", b.holds}, {"degenerate", b.degenerate}};
}

inline nlohmann::json to_json(const StabilityConstants& k) {
  return {{"M", k.M}, {"M_prime", k.M_prime}, {"m", k.m}, {"kappa", k.kappa}, {"c", k.c}, {"alpha_max", k.alpha_max}};
}

inline nlohmann::json to_json(const GdResult& g) {
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : g.traces) {
    traces.push_back({{"step", t.step},
                      {"surrogate", t.surrogate},
                      {"truth", t.truth},
                      {"distance", t.distance},
                      {"drift", t.drift}});
  }
  return {{"constants", to_json(g.constants)},
          {"steps", g.steps},
          {"converged", g.converged},
          {"projection_gap", g.projection_gap},
          {"traces", traces}};
}

inline nlohmann::json to_json(const ProgressReport& p) {
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& w : p.windows) {
    windows.push_back({{"surrogate_drop", w.surrogate_drop},
                       {"true_drop", w.true_drop},
                       {"guaranteed_drop", w.guaranteed_drop},
                       {"converged", w.converged},
                       {"violated", w.violated}});
  }
  return {{"c", p.c}, {"progressing", p.progressing}, {"violations", p.violations}, {"windows", windows}};
}

/// Loss traces as CSV rows "step,horizon,value" for one chosen series.
inline void write_trace_csv(std::ostream& os, const GdResult& g, const std::string& series) {
  os << "step,horizon,value\n";
  for (std::size_t n = 0; n < g.traces.size(); ++n) {
    const auto& t = g.traces[n];
    const std::vector<double>* col = series == "surrogate" ? &t.surrogate
                                     : series == "truth"   ? &t.truth
                                     : series == "distance" ? &t.distance
                                     : series == "drift"    ? &t.drift
                                                            : nullptr;
    if (!col) throw std::invalid_argument("unknown trace series '" + series + "'");
    for (std::size_t i = 0; i < t.step.size(); ++i) os << t.step[i] << ',' << n + 1 << ',' << format_double((*col)[i]) << '\n';
  }
}

}  // namespace fhrl
