#pragma once

#include "fhrl/csv.hpp"
#include "fhrl/mdp.hpp"

#include <cmath>
#include <ostream>
#include <vector>

namespace fhrl {

/**
 * Exact fixed-horizon value table for h = 0..H.
 *
 * v is (H+1) x n_states with row 0 identically zero. Control tables also
 * carry q[h] (n_states x n_actions); prediction tables leave q empty.
 */
struct HorizonValues {
  int H = 0;
  double gamma = 1.0;
  Matrix v;
  std::vector<Matrix> q;

  bool has_q() const { return !q.empty(); }
};

/// Fixed-horizon policy evaluation: v[h] = sum_a pi sum_s' p (r + gamma v[h-1](s')).
inline HorizonValues fh_values(const TabularMdp& mdp, const Policy& pi, double gamma, int H) {
  if (H < 0) throw std::invalid_argument("H must be non-negative");
  if (pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions()) {
    throw std::invalid_argument("policy shape does not match MDP");
  }
  const Matrix p_pi = policy_transition_matrix(mdp, pi);
  const Vector r_pi = policy_reward_vector(mdp, pi);
  HorizonValues out{H, gamma, Matrix::Zero(H + 1, mdp.n_states()), {}};
  for (int h = 1; h <= H; ++h) {
    out.v.row(h) = (r_pi + gamma * p_pi * out.v.row(h - 1).transpose()).transpose();
  }
  return out;
}

/// argmax with lowest-index tie-break.
template <typename Row>
int argmax_lowest(const Row& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = static_cast<int>(i);
  }
  return best;
}

struct OptimalHorizons {
  HorizonValues values;            ///< v[h] = max_a q[h]
  std::vector<std::vector<int>> greedy;  ///< greedy[h][s], h = 0..H

  Policy greedy_policy(int h, int n_actions) const { return Policy::deterministic(greedy[h], n_actions); }
};

/// Fixed-horizon optimal control: one greedy policy per horizon.
inline OptimalHorizons fh_optimal(const TabularMdp& mdp, double gamma, int H) {
  if (H < 1) throw std::invalid_argument("fh_optimal needs H >= 1");
  const int n = mdp.n_states();
  const int na = mdp.n_actions();
  Matrix r_sa(n, na);
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < na; ++a) r_sa(s, a) = mdp.expected_reward(s, a);

  OptimalHorizons out;
  out.values = HorizonValues{H, gamma, Matrix::Zero(H + 1, n), std::vector<Matrix>(H + 1, Matrix::Zero(n, na))};
  out.greedy.assign(H + 1, std::vector<int>(n, 0));
  for (int h = 1; h <= H; ++h) {
    const Vector prev = out.values.v.row(h - 1).transpose();
    Matrix& q = out.values.q[h];
    for (int a = 0; a < na; ++a) q.col(a) = r_sa.col(a) + gamma * mdp.prob(a) * prev;
    for (int s = 0; s < n; ++s) {
      const int best = argmax_lowest(q.row(s));
      out.greedy[h][s] = best;
      out.values.v(h, s) = q(s, best);
    }
  }
  return out;
}

namespace detail {

inline std::vector<int> non_terminal_states(const TabularMdp& mdp) {
  std::vector<int> idx;
  for (int s = 0; s < mdp.n_states(); ++s)
    if (!mdp.terminal(s)) idx.push_back(s);
  return idx;
}

/// Every non-terminal state reaches a terminal with positive probability.
inline bool absorbing_under(const Matrix& p_pi, const TabularMdp& mdp) {
  const int n = mdp.n_states();
  std::vector<bool> reaches(n, false);
  for (int s = 0; s < n; ++s) reaches[s] = mdp.terminal(s);
  bool changed = true;
  while (changed) {
    changed = false;
    for (int s = 0; s < n; ++s) {
      if (reaches[s]) continue;
      for (int s2 = 0; s2 < n; ++s2) {
        if (p_pi(s, s2) > 0.0 && reaches[s2]) {
          reaches[s] = true;
          changed = true;
          break;
        }
      }
    }
  }
  for (bool r : reaches)
    if (!r) return false;
  return true;
}

}  // namespace detail

/**
 * Infinite-horizon values from the linear system (I - gamma P_pi) v = r_pi,
 * solved over non-terminal states with terminals pinned at zero.
 * gamma = 1 requires every state to reach a terminal.
 */
inline Vector infinite_values(const TabularMdp& mdp, const Policy& pi, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("gamma must lie in [0, 1]");
  const Matrix p_pi = policy_transition_matrix(mdp, pi);
  const Vector r_pi = policy_reward_vector(mdp, pi);
  if (gamma >= 1.0 && !detail::absorbing_under(p_pi, mdp)) {
    throw std::domain_error("gamma = 1 on a chain that does not terminate: system is singular");
  }
  const auto live = detail::non_terminal_states(mdp);
  const auto m = static_cast<Eigen::Index>(live.size());
  Vector v = Vector::Zero(mdp.n_states());
  if (m == 0) return v;
  Matrix a = Matrix::Identity(m, m);
  Vector b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    b(i) = r_pi(live[i]);
    for (Eigen::Index j = 0; j < m; ++j) a(i, j) -= gamma * p_pi(live[i], live[j]);
  }
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) throw std::domain_error("Bellman system is singular");
  const Vector x = lu.solve(b);
  for (Eigen::Index i = 0; i < m; ++i) v(live[i]) = x(i);
  return v;
}

/// Expected number of steps to absorption from the start distribution.
inline double expected_episode_length(const TabularMdp& mdp, const Policy& pi) {
  const Matrix p_pi = policy_transition_matrix(mdp, pi);
  if (!detail::absorbing_under(p_pi, mdp)) {
    throw std::domain_error("policy does not reach a terminal state from every state");
  }
  const auto live = detail::non_terminal_states(mdp);
  const auto m = static_cast<Eigen::Index>(live.size());
  if (m == 0) return 0.0;
  Matrix a = Matrix::Identity(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) a(i, j) -= p_pi(live[i], live[j]);
  Eigen::FullPivLU<Matrix> lu(a);
  if (!lu.isInvertible()) throw std::domain_error("absorbing-chain system is singular");
  const Vector steps = lu.solve(Vector::Ones(m));
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) total += mdp.start_dist()(live[i]) * steps(i);
  return total;
}

/**
 * Fraction of non-terminal states whose greedy action at horizon h equals
 * the greedy action at H_final. Entry h of the result, h = 0..H_final.
 */
inline std::vector<double> horizon_agreement(const OptimalHorizons& opt, const TabularMdp& mdp) {
  const int H = opt.values.H;
  const auto live = detail::non_terminal_states(mdp);
  std::vector<double> out(H + 1, 0.0);
  if (live.empty()) return out;
  for (int h = 0; h <= H; ++h) {
    int same = 0;
    for (int s : live) same += opt.greedy[h][s] == opt.greedy[H][s];
    out[h] = static_cast<double>(same) / static_cast<double>(live.size());
  }
  return out;
}

inline std::vector<double> horizon_agreement(const TabularMdp& mdp, double gamma, int H_final) {
  return horizon_agreement(fh_optimal(mdp, gamma, H_final), mdp);
}

/// e[h][s] = (v[h][s] - v[h-1][s]) / gamma^(h-1): expected reward exactly h steps ahead.
inline Matrix per_step_reward(const HorizonValues& values) {
  const int H = values.H;
  const double g = values.gamma;
  if (g < 0.0) throw std::invalid_argument("gamma must be non-negative");
  if (g == 0.0 && H > 1) throw std::domain_error("per-step rewards beyond h = 1 are undefined for gamma = 0");
  Matrix e = Matrix::Zero(H + 1, values.v.cols());
  for (int h = 1; h <= H; ++h) e.row(h) = (values.v.row(h) - values.v.row(h - 1)) / std::pow(g, h - 1);
  return e;
}

/**
 * Independent oracle: enumerates every length-H trajectory (a_0, s_1, ...,
 * a_{H-1}, s_H) from each start state and averages prefix returns by path
 * probability. No Bellman recursion is used. Limited to n_states <= 6,
 * H <= 8 and at most 5e7 enumerated paths.
 */
inline HorizonValues brute_force_fh_values(const TabularMdp& mdp, const Policy& pi, double gamma, int H) {
  const int n = mdp.n_states();
  const int na = mdp.n_actions();
  if (H < 0) throw std::invalid_argument("H must be non-negative");
  if (H > 8 || n > 6) throw std::length_error("instance too large for brute-force enumeration");
  const int branch = n * na;
  double paths = 1.0;
  for (int i = 0; i < H; ++i) paths *= branch;
  if (paths * n > 5e7) throw std::length_error("instance too large for brute-force enumeration");

  HorizonValues out{H, gamma, Matrix::Zero(H + 1, n), {}};
  if (H == 0) return out;
  std::vector<int> digits(H, 0);  // digit k encodes (a_k, s_{k+1}) as a * n + s'
  std::vector<double> prefix_return(H + 1);
  for (int s0 = 0; s0 < n; ++s0) {
    std::fill(digits.begin(), digits.end(), 0);
    while (true) {
      double prob = 1.0;
      double discount = 1.0;
      int s = s0;
      prefix_return[0] = 0.0;
      for (int k = 0; k < H; ++k) {
        const int a = digits[k] / n;
        const int s2 = digits[k] % n;
        prob *= pi(s, a) * mdp.prob(s, a, s2);
        if (prob == 0.0) break;
        prefix_return[k + 1] = prefix_return[k] + discount * mdp.reward(s, a, s2);
        discount *= gamma;
        s = s2;
      }
      if (prob > 0.0) {
        for (int h = 1; h <= H; ++h) out.v(h, s0) += prob * prefix_return[h];
      }
      int k = H - 1;
      while (k >= 0 && ++digits[k] == branch) digits[k--] = 0;
      if (k < 0) break;
    }
  }
  return out;
}

/// CSV dump: "h,s,value" for v, or "h,s,a,value" when q is present.
inline void write_values_csv(std::ostream& os, const HorizonValues& values) {
  if (values.has_q()) {
    os << "h,s,a,value\n";
    for (int h = 0; h <= values.H; ++h)
      for (Eigen::Index s = 0; s < values.q[h].rows(); ++s)
        for (Eigen::Index a = 0; a < values.q[h].cols(); ++a)
          os << h << ',' << s << ',' << a << ',' << format_double(values.q[h](s, a)) << '\n';
  } else {
    os << "h,s,value\n";
    for (int h = 0; h <= values.H; ++h)
      for (Eigen::Index s = 0; s < values.v.cols(); ++s)
        os << h << ',' << s << ',' << format_double(values.v(h, s)) << '\n';
  }
}

}  // namespace fhrl
