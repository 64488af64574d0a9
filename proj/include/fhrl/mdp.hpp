#pragma once

#include "fhrl/core.hpp"

#include <json.hpp>

#include <cmath>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace fhrl {

/**
 * Finite MDP with dense per-action transition and reward matrices.
 *
 * prob(a)(s, s') is p(s'|s,a) and reward(a)(s, s') the deterministic reward
 * of that transition. Terminal states are absorbing: they self-loop under
 * every action with reward 0, so fixed-horizon sweeps need no special case
 * for episode ends. Validated on construction.
 */
class TabularMdp {
 public:
  static constexpr double kTolerance = 1e-12;

  TabularMdp(std::vector<Matrix> prob, std::vector<Matrix> reward, std::vector<bool> terminal,
             Vector start_dist)
      : prob_(std::move(prob)),
        reward_(std::move(reward)),
        terminal_(std::move(terminal)),
        start_(std::move(start_dist)) {
    validate();
  }

  int n_states() const { return static_cast<int>(terminal_.size()); }
  int n_actions() const { return static_cast<int>(prob_.size()); }

  const Matrix& prob(int a) const { return prob_[a]; }
  const Matrix& reward(int a) const { return reward_[a]; }
  double prob(int s, int a, int s_next) const { return prob_[a](s, s_next); }
  double reward(int s, int a, int s_next) const { return reward_[a](s, s_next); }
  bool terminal(int s) const { return terminal_[s]; }
  const std::vector<bool>& terminal_flags() const { return terminal_; }
  const Vector& start_dist() const { return start_; }

  /// Expected immediate reward r(s,a) = sum_s' p(s'|s,a) r(s,a,s').
  double expected_reward(int s, int a) const {
    return prob_[a].row(s).dot(reward_[a].row(s));
  }

  double max_abs_reward() const {
    double m = 0.0;
    for (int a = 0; a < n_actions(); ++a) {
      for (int s = 0; s < n_states(); ++s) {
        for (int s2 = 0; s2 < n_states(); ++s2) {
          if (prob_[a](s, s2) > 0.0) m = std::max(m, std::abs(reward_[a](s, s2)));
        }
      }
    }
    return m;
  }

 private:
  void validate() const {
    const auto n = static_cast<Eigen::Index>(terminal_.size());
    if (n == 0 || prob_.empty()) throw std::invalid_argument("MDP needs at least one state and action");
    if (reward_.size() != prob_.size()) throw std::invalid_argument("reward/prob action count mismatch");
    if (start_.size() != n) throw std::invalid_argument("start_dist size mismatch");
    for (std::size_t a = 0; a < prob_.size(); ++a) {
      const Matrix& p = prob_[a];
      const Matrix& r = reward_[a];
      if (p.rows() != n || p.cols() != n || r.rows() != n || r.cols() != n) {
        throw std::invalid_argument("transition/reward matrix shape mismatch");
      }
      if (!p.allFinite() || !r.allFinite()) throw std::invalid_argument("non-finite MDP entry");
      if (p.minCoeff() < 0.0 || p.maxCoeff() > 1.0) throw std::invalid_argument("probability outside [0,1]");
      for (Eigen::Index s = 0; s < n; ++s) {
        if (std::abs(p.row(s).sum() - 1.0) > kTolerance) {
          throw std::invalid_argument("transition row (s=" + std::to_string(s) + ", a=" +
                                      std::to_string(a) + ") does not sum to 1");
        }
        if (terminal_[s] && (p(s, s) != 1.0 || r(s, s) != 0.0)) {
          throw std::invalid_argument("terminal state " + std::to_string(s) +
                                      " must self-loop with reward 0");
        }
      }
    }
    if (start_.minCoeff() < 0.0 || std::abs(start_.sum() - 1.0) > kTolerance) {
      throw std::invalid_argument("start_dist is not a probability vector");
    }
  }

  std::vector<Matrix> prob_;
  std::vector<Matrix> reward_;
  std::vector<bool> terminal_;
  Vector start_;
};

/// Stochastic policy: one probability row per state.
class Policy {
 public:
  explicit Policy(Matrix action_probs) : probs_(std::move(action_probs)) {
    if (probs_.size() == 0 || !probs_.allFinite() || probs_.minCoeff() < 0.0) {
      throw std::invalid_argument("policy probabilities must be finite and non-negative");
    }
    for (Eigen::Index s = 0; s < probs_.rows(); ++s) {
      if (std::abs(probs_.row(s).sum() - 1.0) > TabularMdp::kTolerance) {
        throw std::invalid_argument("policy row " + std::to_string(s) + " does not sum to 1");
      }
    }
  }

  static Policy uniform(int n_states, int n_actions) {
    return Policy(Matrix::Constant(n_states, n_actions, 1.0 / n_actions));
  }

  static Policy deterministic(const std::vector<int>& actions, int n_actions) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), n_actions);
    for (std::size_t s = 0; s < actions.size(); ++s) m(static_cast<Eigen::Index>(s), actions[s]) = 1.0;
    return Policy(std::move(m));
  }

  int n_states() const { return static_cast<int>(probs_.rows()); }
  int n_actions() const { return static_cast<int>(probs_.cols()); }
  double operator()(int s, int a) const { return probs_(s, a); }
  auto row(int s) const { return probs_.row(s); }
  const Matrix& probs() const { return probs_; }

  int sample(int s, Rng& rng) const { return sample_categorical(probs_.row(s), rng); }

 private:
  Matrix probs_;
};

/**
 * Feature matrix Phi. Rows are indexed by state (prediction) or by the pair
 * (s, a) at row s * n_actions + a (control). The identity map is kept as a
 * flag so tabular learners touch one coordinate instead of a dense row.
 */
class FeatureMap {
 public:
  enum class Kind { State, StateAction };

  FeatureMap(Matrix phi, Kind kind, int n_actions = 1)
      : phi_(std::move(phi)), kind_(kind), n_actions_(n_actions) {
    if (!phi_.allFinite()) throw std::invalid_argument("feature matrix has non-finite entries");
    if (kind_ == Kind::StateAction && (n_actions_ < 1 || phi_.rows() % n_actions_ != 0)) {
      throw std::invalid_argument("state-action feature rows must be a multiple of n_actions");
    }
    one_hot_ = phi_.rows() == phi_.cols() && phi_.isIdentity(0.0);
  }

  static FeatureMap tabular_states(int n_states) {
    return FeatureMap(Matrix::Identity(n_states, n_states), Kind::State);
  }
  static FeatureMap tabular_actions(int n_states, int n_actions) {
    const int n = n_states * n_actions;
    return FeatureMap(Matrix::Identity(n, n), Kind::StateAction, n_actions);
  }

  Kind kind() const { return kind_; }
  int dim() const { return static_cast<int>(phi_.cols()); }
  int rows() const { return static_cast<int>(phi_.rows()); }
  int n_actions() const { return n_actions_; }
  bool one_hot() const { return one_hot_; }
  const Matrix& matrix() const { return phi_; }

  int index(int s, int a = 0) const { return kind_ == Kind::StateAction ? s * n_actions_ + a : s; }
  auto row(int idx) const { return phi_.row(idx); }

  /// w . phi(idx) for a weight row w.
  template <typename W>
  double dot(const W& w, int idx) const {
    if (one_hot_) return w(idx);
    if constexpr (std::decay_t<W>::ColsAtCompileTime == 1) {
      return w.dot(phi_.row(idx).transpose());
    } else {
      return w.dot(phi_.row(idx));
    }
  }

  /// w += scale * phi(idx).
  template <typename W>
  void add_scaled(W&& w, int idx, double scale) const {
    if (one_hot_) {
      w(idx) += scale;
    } else if constexpr (std::decay_t<W>::ColsAtCompileTime == 1) {
      w += scale * phi_.row(idx).transpose();
    } else {
      w += scale * phi_.row(idx);
    }
  }

 private:
  Matrix phi_;
  Kind kind_;
  int n_actions_;
  bool one_hot_ = false;
};

/// One sampled environment step (S_t, A_t, R_{t+1}, S_{t+1}).
struct Transition {
  int s = 0;
  int a = 0;
  double r = 0.0;
  int s_next = 0;
  bool done = false;
};

inline Transition sample_step(const TabularMdp& mdp, int s, int a, Rng& rng) {
  if (s < 0 || s >= mdp.n_states() || a < 0 || a >= mdp.n_actions()) {
    throw std::out_of_range("state or action out of range");
  }
  if (mdp.terminal(s)) throw std::logic_error("sample_step called from terminal state " + std::to_string(s));
  const int s_next = sample_categorical(mdp.prob(a).row(s), rng);
  return Transition{s, a, mdp.reward(s, a, s_next), s_next, mdp.terminal(s_next)};
}

inline int sample_start(const TabularMdp& mdp, Rng& rng) {
  return sample_categorical(mdp.start_dist(), rng);
}

inline double importance_ratio(const Policy& target, const Policy& behavior, int s, int a) {
  const double mu = behavior(s, a);
  if (!(mu > 0.0)) {
    throw std::domain_error("behavior policy has zero probability for (s=" + std::to_string(s) +
                            ", a=" + std::to_string(a) + "): coverage violated");
  }
  return target(s, a) / mu;
}

/// State-to-state matrix P_pi(s, s') = sum_a pi(a|s) p(s'|s,a).
inline Matrix policy_transition_matrix(const TabularMdp& mdp, const Policy& pi) {
  Matrix p = Matrix::Zero(mdp.n_states(), mdp.n_states());
  for (int a = 0; a < mdp.n_actions(); ++a) p += pi.probs().col(a).asDiagonal() * mdp.prob(a);
  return p;
}

/// Expected one-step reward vector r_pi(s).
inline Vector policy_reward_vector(const TabularMdp& mdp, const Policy& pi) {
  Vector r = Vector::Zero(mdp.n_states());
  for (int s = 0; s < mdp.n_states(); ++s) {
    for (int a = 0; a < mdp.n_actions(); ++a) r(s) += pi(s, a) * mdp.expected_reward(s, a);
  }
  return r;
}

// JSON document: {"n_states", "n_actions", "prob"[s][a][s'], "reward"[s][a][s'],
// "terminal", "start_dist"}.

inline nlohmann::json to_json(const TabularMdp& mdp) {
  using nlohmann::json;
  const int n = mdp.n_states();
  const int na = mdp.n_actions();
  json prob = json::array();
  json reward = json::array();
  for (int s = 0; s < n; ++s) {
    json ps = json::array();
    json rs = json::array();
    for (int a = 0; a < na; ++a) {
      std::vector<double> prow(n), rrow(n);
      for (int s2 = 0; s2 < n; ++s2) {
        prow[s2] = mdp.prob(s, a, s2);
        rrow[s2] = mdp.reward(s, a, s2);
      }
      ps.push_back(prow);
      rs.push_back(rrow);
    }
    prob.push_back(std::move(ps));
    reward.push_back(std::move(rs));
  }
  std::vector<double> start(mdp.start_dist().data(), mdp.start_dist().data() + n);
  return json{{"n_states", n},     {"n_actions", na},
              {"prob", prob},      {"reward", reward},
              {"terminal", mdp.terminal_flags()}, {"start_dist", start}};
}

inline TabularMdp mdp_from_json(const nlohmann::json& j) {
  const int n = j.at("n_states").get<int>();
  const int na = j.at("n_actions").get<int>();
  if (n < 1 || na < 1) throw std::invalid_argument("n_states and n_actions must be positive");
  std::vector<Matrix> prob(na, Matrix::Zero(n, n));
  std::vector<Matrix> reward(na, Matrix::Zero(n, n));
  const auto& jp = j.at("prob");
  const auto& jr = j.at("reward");
  if (jp.size() != static_cast<std::size_t>(n) || jr.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("prob/reward outer dimension must equal n_states");
  }
  for (int s = 0; s < n; ++s) {
    if (jp[s].size() != static_cast<std::size_t>(na) || jr[s].size() != static_cast<std::size_t>(na)) {
      throw std::invalid_argument("prob/reward second dimension must equal n_actions");
    }
    for (int a = 0; a < na; ++a) {
      if (jp[s][a].size() != static_cast<std::size_t>(n) || jr[s][a].size() != static_cast<std::size_t>(n)) {
        throw std::invalid_argument("prob/reward inner dimension must equal n_states");
      }
      for (int s2 = 0; s2 < n; ++s2) {
        prob[a](s, s2) = jp[s][a][s2].get<double>();
        reward[a](s, s2) = jr[s][a][s2].get<double>();
      }
    }
  }
  const auto terminal = j.at("terminal").get<std::vector<bool>>();
  const auto start = j.at("start_dist").get<std::vector<double>>();
  if (terminal.size() != static_cast<std::size_t>(n)) throw std::invalid_argument("terminal size mismatch");
  return TabularMdp(std::move(prob), std::move(reward), terminal,
                    Eigen::Map<const Vector>(start.data(), static_cast<Eigen::Index>(start.size())));
}

}  // namespace fhrl
