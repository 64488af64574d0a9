#pragma once

#include "fhrl/csv.hpp"
#include "fhrl/dp.hpp"
#include "fhrl/mdp.hpp"

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace fhrl {

/**
 * Stacked per-horizon linear weights w, shape (H+1) x d. Row h holds the
 * weights of V^h (or Q^h). Row 0 is V^0 = 0: it is zero on construction and
 * no mutable access to it is handed out.
 */
class HorizonWeights {
 public:
  HorizonWeights(int H, int d) : w_(RowMatrix::Zero(H + 1, d)) {
    if (H < 0 || d < 1) throw std::invalid_argument("HorizonWeights needs H >= 0 and d >= 1");
  }

  /// Every row h >= 1 set to init (the "common initialization" used by Baird and the walk).
  static HorizonWeights uniform_init(int H, const Vector& init) {
    HorizonWeights w(H, static_cast<int>(init.size()));
    for (int h = 1; h <= H; ++h) w.w_.row(h) = init.transpose();
    return w;
  }

  int horizons() const { return static_cast<int>(w_.rows()) - 1; }
  int dim() const { return static_cast<int>(w_.cols()); }

  auto row(int h) const { return w_.row(h); }
  auto mutable_row(int h) {
    if (h < 1 || h > horizons()) throw std::out_of_range("row " + std::to_string(h) + " is not writable");
    return w_.row(h);
  }
  const RowMatrix& matrix() const { return w_; }

  double value(const FeatureMap& phi, int feature_index, int h) const { return phi.dot(w_.row(h), feature_index); }
  bool all_finite() const { return w_.allFinite(); }

  bool operator==(const HorizonWeights& other) const {
    return w_.rows() == other.w_.rows() && w_.cols() == other.w_.cols() && w_ == other.w_;
  }

 private:
  RowMatrix w_;
};

/**
 * Target weighting per horizon, as a (reward coefficient, bootstrap
 * coefficient) pair: target^h = c_r(h) R + c_b(h) V^{h-1}(S').
 *
 *   Standard        (1, gamma)
 *   AverageReward   (1/h, (h-1)/h)
 *   AltExponential  (gamma^(H-h), 1)
 *   Hyperbolic      (1 / (1 + k (H-h)), 1)
 */
struct TargetScheme {
  enum class Kind { Standard, AverageReward, AltExponential, Hyperbolic };

  Kind kind = Kind::Standard;
  double gamma = 1.0;
  double k = 0.0;
  int H = 1;

  static TargetScheme standard(double gamma) { return checked({Kind::Standard, gamma, 0.0, 1}); }
  static TargetScheme average_reward() { return checked({Kind::AverageReward, 1.0, 0.0, 1}); }
  static TargetScheme alt_exponential(double gamma, int H) { return checked({Kind::AltExponential, gamma, 0.0, H}); }
  static TargetScheme hyperbolic(double k, int H) { return checked({Kind::Hyperbolic, 1.0, k, H}); }

  double reward_coef(int h) const {
    switch (kind) {
      case Kind::Standard: return 1.0;
      case Kind::AverageReward: return 1.0 / h;
      case Kind::AltExponential: return std::pow(gamma, H - h);
      case Kind::Hyperbolic: return 1.0 / (1.0 + k * (H - h));
    }
    return 1.0;
  }

  double bootstrap_coef(int h) const {
    switch (kind) {
      case Kind::Standard: return gamma;
      case Kind::AverageReward: return static_cast<double>(h - 1) / h;
      case Kind::AltExponential:
      case Kind::Hyperbolic: return 1.0;
    }
    return gamma;
  }

 private:
  static TargetScheme checked(TargetScheme s) {
    if (!(s.gamma > 0.0 && s.gamma <= 1.0)) throw std::invalid_argument("scheme gamma must lie in (0, 1]");
    if (s.kind == Kind::Hyperbolic && !(s.k > 0.0)) throw std::invalid_argument("hyperbolic k must be positive");
    if (s.H < 1) throw std::invalid_argument("scheme H must be >= 1");
    return s;
  }
};

/**
 * Circular history of the last `capacity` steps: feature row index of the
 * visited state (or state-action), the reward received, and optionally one
 * greedy-indicator row of `indicator_width` flags. Index i means "stored i
 * steps ago"; valid for i < size().
 */
class RingBuffers {
 public:
  explicit RingBuffers(int capacity, int indicator_width = 0)
      : capacity_(capacity),
        width_(indicator_width),
        features_(capacity, 0),
        rewards_(capacity, 0.0),
        greedy_(static_cast<std::size_t>(capacity) * indicator_width, 0) {
    if (capacity < 1) throw std::invalid_argument("ring capacity must be >= 1");
  }

  void push(int feature_index, double reward = 0.0) {
    const auto slot = static_cast<std::size_t>(count_ % capacity_);
    features_[slot] = feature_index;
    rewards_[slot] = reward;
    ++count_;
  }

  /// Overwrites the reward of the most recent entry (rewards arrive after the feature).
  void set_latest_reward(double r) { rewards_[slot(0)] = r; }

  void set_latest_greedy(int col, bool flag) { greedy_[slot(0) * width_ + col] = flag ? 1 : 0; }

  int feature(int i) const { return features_[slot(i)]; }
  double reward(int i) const { return rewards_[slot(i)]; }
  bool greedy(int i, int col) const { return greedy_[slot(i) * width_ + col] != 0; }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(std::min<long>(count_, capacity_)); }
  long count() const { return count_; }
  void clear() { count_ = 0; }

 private:
  std::size_t slot(int i) const {
    if (i < 0 || i >= size()) throw std::out_of_range("ring index " + std::to_string(i) + " not stored");
    return static_cast<std::size_t>((count_ - 1 - i) % capacity_);
  }

  int capacity_;
  int width_;
  long count_ = 0;
  std::vector<int> features_;
  std::vector<double> rewards_;
  std::vector<std::uint8_t> greedy_;
};

namespace detail {

inline void checked_add(HorizonWeights& w, const FeatureMap& phi, int h, int idx, double step) {
  auto row = w.mutable_row(h);
  phi.add_scaled(row, idx, step);
  const bool finite = phi.one_hot() ? std::isfinite(row(idx)) : row.allFinite();
  if (!finite) throw DivergenceError(h);
}

/// max_a' w^h . phi(s, a'); zero at h = 0 (Q^0 = 0).
inline double max_action_value(const HorizonWeights& w, const FeatureMap& phi, int s, int h) {
  if (h == 0) return 0.0;
  double best = w.value(phi, phi.index(s, 0), h);
  for (int a = 1; a < phi.n_actions(); ++a) best = std::max(best, w.value(phi, phi.index(s, a), h));
  return best;
}

inline void require_finite(const Vector& deltas) {
  for (Eigen::Index h = 1; h < deltas.size(); ++h)
    if (!std::isfinite(deltas(h))) throw DivergenceError(static_cast<int>(h));
}

}  // namespace detail

/// argmax_a w^h . phi(s, a) with lowest-index ties; action 0 at h = 0.
inline int greedy_action(const HorizonWeights& w, const FeatureMap& phi, int s, int h) {
  if (h == 0) return 0;
  int best = 0;
  double best_value = w.value(phi, phi.index(s, 0), h);
  for (int a = 1; a < phi.n_actions(); ++a) {
    const double v = w.value(phi, phi.index(s, a), h);
    if (v > best_value) {
      best = a;
      best_value = v;
    }
  }
  return best;
}

inline int epsilon_greedy(const HorizonWeights& w, const FeatureMap& phi, int s, int h, double epsilon, Rng& rng) {
  if (uniform01(rng) < epsilon) return uniform_index(rng, phi.n_actions());
  return greedy_action(w, phi, s, h);
}

/**
 * One-step FHTD. All H TD errors are formed from the pre-step weights, then
 * each row h moves by alpha * rho * delta^h * phi(s). A terminal successor
 * bootstraps from zero. Returns delta indexed by h (entry 0 unused).
 */
inline Vector one_step_fhtd_step(HorizonWeights& w, const FeatureMap& phi, const Transition& tr, double alpha,
                                 const TargetScheme& scheme, double rho = 1.0) {
  const int H = w.horizons();
  const int i = phi.index(tr.s);
  const int j = phi.index(tr.s_next);
  Vector deltas = Vector::Zero(H + 1);
  for (int h = 1; h <= H; ++h) {
    const double boot = tr.done ? 0.0 : w.value(phi, j, h - 1);
    deltas(h) = scheme.reward_coef(h) * tr.r + scheme.bootstrap_coef(h) * boot - w.value(phi, i, h);
  }
  detail::require_finite(deltas);
  if (rho == 0.0) return deltas;
  for (int h = 1; h <= H; ++h) detail::checked_add(w, phi, h, i, alpha * rho * deltas(h));
  return deltas;
}

/// FHQ-learning: delta^h = r + gamma max_a' Q^{h-1}(s', a') - Q^h(s, a), snapshot reads.
inline Vector fhq_step(HorizonWeights& w, const FeatureMap& phi, const Transition& tr, double alpha, double gamma) {
  const int H = w.horizons();
  const int i = phi.index(tr.s, tr.a);
  Vector deltas = Vector::Zero(H + 1);
  for (int h = 1; h <= H; ++h) {
    const double boot = tr.done ? 0.0 : detail::max_action_value(w, phi, tr.s_next, h - 1);
    deltas(h) = tr.r + gamma * boot - w.value(phi, i, h);
  }
  detail::require_finite(deltas);
  for (int h = 1; h <= H; ++h) detail::checked_add(w, phi, h, i, alpha * deltas(h));
  return deltas;
}

// ---------------------------------------------------------------------------
// n-step FHTD

/**
 * Horizons learned by n-step FHTD: ceil(H/n) blocks. When n divides H they
 * are n, 2n, ..., H; otherwise the first block is H mod n and the rest step
 * by n. Weight row b (1-based) holds block b.
 */
struct NStepSchedule {
  int H;
  int n;

  NStepSchedule(int H_, int n_) : H(H_), n(n_) {
    if (H < 1 || n < 1 || n > H) throw std::invalid_argument("n-step schedule needs 1 <= n <= H");
  }

  int blocks() const { return (H + n - 1) / n; }
  int remainder() const { return H % n; }
  int horizon(int block) const {
    const int first = remainder() == 0 ? n : remainder();
    return first + (block - 1) * n;
  }
  /// Number of rewards summed by block b's target.
  int rewards_in(int block) const { return block == 1 ? horizon(1) : n; }
};

/// Counts the per-step work of n-step FHTD: reward-sum additions and value updates.
struct OpCounter {
  long reward_adds = 0;
  long value_updates = 0;
  long updates = 0;  ///< steps on which an update was made
};

namespace detail {

/// Target sums for a state `age` steps back holding `available` rewards (ages age..age-available+1).
/// Returns the full discounted sum of min(available, n) rewards and the partial
/// sum of the first `partial_len` of them.
inline std::pair<double, double> discounted_sums(const RingBuffers& ring, int age, int count, int partial_len,
                                                 double gamma, OpCounter* ops) {
  double acc = ring.reward(age);
  double partial = partial_len == 1 ? acc : 0.0;
  double g = 1.0;
  for (int k = 1; k < count; ++k) {
    g *= gamma;
    acc += g * ring.reward(age - k);
    if (ops) ++ops->reward_adds;
    if (k + 1 == partial_len) partial = acc;
  }
  if (partial_len > count) partial = acc;
  return {acc, partial};
}

}  // namespace detail

/**
 * One step of n-step FHTD. Stores (phi(s), r); once n transitions are held,
 * updates the state seen n steps ago toward the discounted n-reward sum plus
 * gamma^n V^{h-n}(s'). The first block sums only its own H mod n rewards when
 * n does not divide H. On a terminal transition the pending states are
 * flushed with truncated sums and the buffer is cleared.
 *
 * Returns the TD errors of the regular update (entry b per block), or
 * nothing during warm-up.
 */
inline std::optional<Vector> n_step_fhtd_step(HorizonWeights& w, RingBuffers& ring, const FeatureMap& phi,
                                              const Transition& tr, double alpha, double gamma,
                                              const NStepSchedule& sched, OpCounter* ops = nullptr) {
  const int n = sched.n;
  const int B = sched.blocks();
  if (w.horizons() != B) throw std::invalid_argument("weights must have ceil(H/n) block rows");
  if (ring.capacity() != n) throw std::invalid_argument("ring capacity must equal n");
  ring.push(phi.index(tr.s), tr.r);

  std::optional<Vector> result;
  if (ring.size() == n) {
    double gn = 1.0;
    for (int k = 0; k < n; ++k) gn *= gamma;
    const int old_idx = ring.feature(n - 1);
    const int next_idx = phi.index(tr.s_next);
    const auto [full, partial] = detail::discounted_sums(ring, n - 1, n, sched.rewards_in(1), gamma, ops);
    Vector deltas = Vector::Zero(B + 1);
    for (int b = 1; b <= B; ++b) {
      double target;
      if (b == 1 && sched.remainder() != 0) {
        target = partial;
      } else {
        const double boot = tr.done ? 0.0 : w.value(phi, next_idx, b - 1);
        target = full + gn * boot;
      }
      deltas(b) = target - w.value(phi, old_idx, b);
    }
    detail::require_finite(deltas);
    for (int b = 1; b <= B; ++b) detail::checked_add(w, phi, b, old_idx, alpha * deltas(b));
    if (ops) {
      ops->value_updates += B;
      ++ops->updates;
    }
    result = std::move(deltas);
  }

  if (tr.done) {
    // States younger than n steps: their horizon reaches past the terminal,
    // where every later reward is zero.
    const int oldest = ring.size() == n ? n - 2 : ring.size() - 1;
    for (int age = oldest; age >= 0; --age) {
      const int available = age + 1;
      const int idx = ring.feature(age);
      const auto [full, partial] = detail::discounted_sums(ring, age, available, sched.rewards_in(1), gamma, nullptr);
      Vector deltas = Vector::Zero(B + 1);
      for (int b = 1; b <= B; ++b) {
        const double target = (b == 1 && sched.remainder() != 0) ? partial : full;
        deltas(b) = target - w.value(phi, idx, b);
      }
      detail::require_finite(deltas);
      for (int b = 1; b <= B; ++b) detail::checked_add(w, phi, b, idx, alpha * deltas(b));
    }
    ring.clear();
  }
  return result;
}

// ---------------------------------------------------------------------------
// FHTD(lambda) and FHQ(lambda)

namespace detail {

/// Backs delta^h up to rows h..H at the features stored 0..H-h steps ago,
/// weighted by (gamma lambda)^i, or cut by the greedy indicators when given.
inline void lambda_backups(const Vector& deltas, HorizonWeights& target, const RingBuffers& ring,
                           const FeatureMap& phi, double alpha, double gamma, double lambda, bool cut_at_nongreedy) {
  const int H = target.horizons();
  const double decay = gamma * lambda;
  for (int h = 1; h <= H; ++h) {
    double e = 1.0;
    const int reach = std::min(H - h, ring.size() - 1);
    for (int i = 0; i <= reach; ++i) {
      if (e == 0.0) break;
      detail::checked_add(target, phi, h + i, ring.feature(i), alpha * e * deltas(h));
      if (i != H - h) e *= cut_at_nongreedy ? decay * (ring.greedy(i, h + i - 1) ? 1.0 : 0.0) : decay;
    }
  }
}

inline Vector lambda_deltas(const HorizonWeights& w, const FeatureMap& phi, const Transition& tr, double gamma) {
  const int H = w.horizons();
  const int i = phi.index(tr.s);
  const int j = phi.index(tr.s_next);
  Vector deltas = Vector::Zero(H + 1);
  for (int h = 1; h <= H; ++h) {
    const double boot = tr.done ? 0.0 : w.value(phi, j, h - 1);
    deltas(h) = tr.r + gamma * boot - w.value(phi, i, h);
  }
  require_finite(deltas);
  return deltas;
}

}  // namespace detail

/**
 * FHTD(lambda) with frozen reads: TD errors come from `snapshot`, backups
 * land in `target`. With snapshot == target this is the online algorithm;
 * keeping them apart accumulates the lambda-return correction against fixed
 * values.
 */
inline Vector fhtd_lambda_backup(const HorizonWeights& snapshot, HorizonWeights& target, RingBuffers& ring,
                                 const FeatureMap& phi, const Transition& tr, double alpha, double gamma,
                                 double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (ring.capacity() != snapshot.horizons()) throw std::invalid_argument("ring capacity must equal H");
  ring.push(phi.index(tr.s), tr.r);
  const Vector deltas = detail::lambda_deltas(snapshot, phi, tr, gamma);
  detail::lambda_backups(deltas, target, ring, phi, alpha, gamma, lambda, false);
  if (tr.done) ring.clear();
  return deltas;
}

/// Online FHTD(lambda): O(H^2) backups per step over the last H states.
inline Vector fhtd_lambda_step(HorizonWeights& w, RingBuffers& ring, const FeatureMap& phi, const Transition& tr,
                               double alpha, double gamma, double lambda) {
  return fhtd_lambda_backup(w, w, ring, phi, tr, alpha, gamma, lambda);
}

/**
 * FHQ(lambda): like FHTD(lambda) over state-action features, bootstrapping
 * from max_a' Q^{h-1}(s', a'). The trace carried from age i to i+1 is
 * multiplied by gamma lambda times the flag "A_{t-i} was greedy for horizon
 * h+i", so a non-greedy action cuts every older backup of that chain.
 */
inline Vector fhq_lambda_step(HorizonWeights& w, RingBuffers& ring, const FeatureMap& phi, const Transition& tr,
                              double alpha, double gamma, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must lie in [0, 1]");
  const int H = w.horizons();
  if (ring.capacity() != H) throw std::invalid_argument("ring capacity must equal H");
  ring.push(phi.index(tr.s, tr.a), tr.r);
  for (int h = 1; h <= H; ++h) ring.set_latest_greedy(h - 1, tr.a == greedy_action(w, phi, tr.s, h));

  const int i = phi.index(tr.s, tr.a);
  Vector deltas = Vector::Zero(H + 1);
  for (int h = 1; h <= H; ++h) {
    const double boot = tr.done ? 0.0 : detail::max_action_value(w, phi, tr.s_next, h - 1);
    deltas(h) = tr.r + gamma * boot - w.value(phi, i, h);
  }
  detail::require_finite(deltas);
  detail::lambda_backups(deltas, w, ring, phi, alpha, gamma, lambda, true);
  if (tr.done) ring.clear();
  return deltas;
}

// ---------------------------------------------------------------------------
// Infinite-horizon baselines

enum class BaselineKind { Td0, QLearning };

struct BaselineResult {
  double td_error = 0.0;
  bool diverged = false;
};

/// Single-row semi-gradient TD(0) or Q-learning. Non-finite weights set the flag instead of throwing.
inline BaselineResult baseline_step(BaselineKind kind, Vector& w, const FeatureMap& phi, const Transition& tr,
                                    double alpha, double gamma, double rho = 1.0) {
  double boot = 0.0;
  int i = 0;
  if (kind == BaselineKind::Td0) {
    i = phi.index(tr.s);
    if (!tr.done) boot = phi.dot(w, phi.index(tr.s_next));
  } else {
    i = phi.index(tr.s, tr.a);
    if (!tr.done) {
      boot = phi.dot(w, phi.index(tr.s_next, 0));
      for (int a = 1; a < phi.n_actions(); ++a) boot = std::max(boot, phi.dot(w, phi.index(tr.s_next, a)));
    }
  }
  const double delta = tr.r + gamma * boot - phi.dot(w, i);
  if (rho != 0.0) phi.add_scaled(w, i, alpha * rho * delta);
  return BaselineResult{delta, !std::isfinite(delta) || !w.allFinite()};
}

// ---------------------------------------------------------------------------
// Checkpoints: CSV rows "h,dim,value".

inline void write_checkpoint(std::ostream& os, const HorizonWeights& w) {
  os << "h,dim,value\n";
  for (int h = 0; h <= w.horizons(); ++h)
    for (int k = 0; k < w.dim(); ++k) os << h << ',' << k << ',' << format_double(w.row(h)(k)) << '\n';
}

inline HorizonWeights read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "h,dim,value") throw std::invalid_argument("bad checkpoint header");
  struct Entry {
    int h, k;
    double v;
  };
  std::vector<Entry> entries;
  int max_h = 0, max_k = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw std::invalid_argument("bad checkpoint row");
    Entry e{std::stoi(line.substr(0, c1)), std::stoi(line.substr(c1 + 1, c2 - c1 - 1)),
            parse_double(line.substr(c2 + 1))};
    max_h = std::max(max_h, e.h);
    max_k = std::max(max_k, e.k);
    entries.push_back(e);
  }
  HorizonWeights w(max_h, max_k + 1);
  for (const auto& e : entries) {
    if (e.h == 0) {
      if (e.v != 0.0) throw std::invalid_argument("checkpoint row 0 must be zero");
      continue;
    }
    w.mutable_row(e.h)(e.k) = e.v;
  }
  return w;
}

}  // namespace fhrl
