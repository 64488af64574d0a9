#pragma once

#include "fhrl/mdp.hpp"

#include <array>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

namespace fhrl {

/// Grid movement shared by every grid environment.
enum GridAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr int kGridActions = 4;

/**
 * Rectangular grid with blocked cells. Open cells are numbered row-major and
 * become MDP states; moves into a wall or off the grid leave the agent in
 * place.
 */
class GridLayout {
 public:
  explicit GridLayout(std::vector<std::string> rows) : rows_(std::move(rows)) {
    if (rows_.empty()) throw std::invalid_argument("empty grid");
    const auto width = rows_.front().size();
    index_.assign(rows_.size() * width, -1);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r].size() != width) throw std::invalid_argument("ragged grid rows");
      for (std::size_t c = 0; c < width; ++c) {
        if (rows_[r][c] != '#') {
          index_[r * width + c] = static_cast<int>(cells_.size());
          cells_.push_back({static_cast<int>(r), static_cast<int>(c)});
        }
      }
    }
  }

  static GridLayout open(int height, int width) {
    return GridLayout(std::vector<std::string>(height, std::string(width, '.')));
  }

  int height() const { return static_cast<int>(rows_.size()); }
  int width() const { return static_cast<int>(rows_.front().size()); }
  int n_cells() const { return static_cast<int>(cells_.size()); }
  std::array<int, 2> cell(int state) const { return cells_[state]; }
  char glyph(int row, int col) const { return rows_[row][col]; }

  /// State id of (row, col), or -1 for walls and out-of-range positions.
  int state(int row, int col) const {
    if (row < 0 || col < 0 || row >= height() || col >= width()) return -1;
    return index_[row * width() + col];
  }

  int move(int state_id, int action) const {
    static constexpr std::array<std::array<int, 2>, 4> kDelta{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
    const auto [r, c] = cells_[state_id];
    const int next = state(r + kDelta[action][0], c + kDelta[action][1]);
    return next < 0 ? state_id : next;
  }

  /// Breadth-first shortest path length under deterministic moves; -1 if unreachable.
  int shortest_path(int from, int to) const {
    std::vector<int> dist(cells_.size(), -1);
    std::deque<int> queue{from};
    dist[from] = 0;
    while (!queue.empty()) {
      const int s = queue.front();
      queue.pop_front();
      if (s == to) return dist[s];
      for (int a = 0; a < kGridActions; ++a) {
        const int n = move(s, a);
        if (dist[n] < 0) {
          dist[n] = dist[s] + 1;
          queue.push_back(n);
        }
      }
    }
    return -1;
  }

 private:
  std::vector<std::string> rows_;
  std::vector<int> index_;
  std::vector<std::array<int, 2>> cells_;
};

namespace detail {

inline std::vector<Matrix> zero_mats(int n_actions, int n) {
  return std::vector<Matrix>(n_actions, Matrix::Zero(n, n));
}

inline Vector point_mass(int n, int s) {
  Vector v = Vector::Zero(n);
  v(s) = 1.0;
  return v;
}

inline void make_absorbing(std::vector<Matrix>& prob, std::vector<Matrix>& reward, int s) {
  for (std::size_t a = 0; a < prob.size(); ++a) {
    prob[a].row(s).setZero();
    reward[a].row(s).setZero();
    prob[a](s, s) = 1.0;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baird's counterexample

inline constexpr int kBairdDashed = 0;
inline constexpr int kBairdSolid = 1;

enum class BairdBehavior { Canonical, Uniform };

struct BairdProblem {
  TabularMdp mdp;
  FeatureMap features;
  Policy behavior;
  Policy target;
};

/**
 * Seven states, two actions. Dashed jumps uniformly to one of the first six
 * states, solid jumps to the seventh. All rewards are zero. Features use the
 * overparameterized layout: states 1..6 read 2 w_i + w_8, state 7 reads
 * w_7 + 2 w_8, so d = 8 > |S| and the Gram matrix is singular.
 *
 * Canonical behavior takes dashed with probability 6/7.
 */
inline BairdProblem build_baird(BairdBehavior behavior = BairdBehavior::Canonical) {
  constexpr int n = 7;
  auto prob = detail::zero_mats(2, n);
  auto reward = detail::zero_mats(2, n);
  for (int s = 0; s < n; ++s) {
    for (int s2 = 0; s2 < 6; ++s2) prob[kBairdDashed](s, s2) = 1.0 / 6.0;
    prob[kBairdSolid](s, 6) = 1.0;
  }
  TabularMdp mdp(std::move(prob), std::move(reward), std::vector<bool>(n, false),
                 Vector::Constant(n, 1.0 / n));

  Matrix phi = Matrix::Zero(n, 8);
  for (int s = 0; s < 6; ++s) {
    phi(s, s) = 2.0;
    phi(s, 7) = 1.0;
  }
  phi(6, 6) = 1.0;
  phi(6, 7) = 2.0;

  Matrix mu(n, 2);
  if (behavior == BairdBehavior::Canonical) {
    mu.col(kBairdDashed).setConstant(6.0 / 7.0);
    mu.col(kBairdSolid).setConstant(1.0 / 7.0);
  } else {
    mu.setConstant(0.5);
  }
  Matrix pi = Matrix::Zero(n, 2);
  pi.col(kBairdSolid).setOnes();

  return BairdProblem{std::move(mdp), FeatureMap(std::move(phi), FeatureMap::Kind::State), Policy(std::move(mu)),
                      Policy(std::move(pi))};
}

inline Vector baird_initial_weights() {
  Vector w(8);
  w << 1, 1, 1, 1, 1, 1, 10, 1;
  return w;
}

// ---------------------------------------------------------------------------
// Slippery maze

inline constexpr double kMazeSlip = 0.75;

inline const std::vector<std::string>& slippery_maze_rows() {
  // S start (center), G goal (bottom-right). Shortest slip-free path: 14.
  static const std::vector<std::string> rows{
      "...........",
      ".#####.###.",
      ".#.......#.",
      ".#.#####.#.",
      ".#.#...#.#.",
      "...#.S.#...",
      ".#.#...#.#.",
      ".#.#.#####.",
      ".#.......#.",
      ".##.######.",
      "..........G",
  };
  return rows;
}

struct SlipperyMaze {
  TabularMdp mdp;
  GridLayout layout;
  int start;
  int goal;
};

/**
 * Maze with 4-directional moves where every chosen action is replaced by a
 * uniformly drawn action (possibly the same one) with probability 0.75.
 * Every step costs -1; the goal is absorbing.
 */
inline SlipperyMaze build_slippery_maze_env() {
  GridLayout layout(slippery_maze_rows());
  int start = -1;
  int goal = -1;
  for (int s = 0; s < layout.n_cells(); ++s) {
    const auto [r, c] = layout.cell(s);
    if (layout.glyph(r, c) == 'S') start = s;
    if (layout.glyph(r, c) == 'G') goal = s;
  }
  if (layout.shortest_path(start, goal) != 14) {
    throw std::logic_error("slippery maze fixture must have a 14-step shortest path");
  }
  const int n = layout.n_cells();
  auto prob = detail::zero_mats(kGridActions, n);
  auto reward = detail::zero_mats(kGridActions, n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < kGridActions; ++a) {
      for (int realized = 0; realized < kGridActions; ++realized) {
        const double p = kMazeSlip / kGridActions + (realized == a ? 1.0 - kMazeSlip : 0.0);
        const int s2 = layout.move(s, realized);
        prob[a](s, s2) += p;
        reward[a](s, s2) = -1.0;
      }
    }
  }
  detail::make_absorbing(prob, reward, goal);
  std::vector<bool> terminal(n, false);
  terminal[goal] = true;
  TabularMdp mdp(std::move(prob), std::move(reward), std::move(terminal), detail::point_mass(n, start));
  return SlipperyMaze{std::move(mdp), std::move(layout), start, goal};
}

inline TabularMdp build_slippery_maze() { return build_slippery_maze_env().mdp; }

// ---------------------------------------------------------------------------
// Checkered grid

inline constexpr double kCheckeredTerminalReward = 11.0;

/**
 * 5x5 grid, deterministic moves, terminal corners (0,0) and (4,4). Entering
 * a cell with the center's parity gives +1, the other parity -1, a terminal
 * corner 11. Bumping a wall enters no cell and gives 0. Starts in the center.
 */
inline TabularMdp build_checkered_grid() {
  constexpr int side = 5;
  const GridLayout layout = GridLayout::open(side, side);
  const int n = layout.n_cells();
  const int center = layout.state(side / 2, side / 2);
  const int corner_a = layout.state(0, 0);
  const int corner_b = layout.state(side - 1, side - 1);
  auto entry_reward = [&](int s) {
    if (s == corner_a || s == corner_b) return kCheckeredTerminalReward;
    const auto [r, c] = layout.cell(s);
    return (r + c) % 2 == (side / 2 + side / 2) % 2 ? 1.0 : -1.0;
  };
  auto prob = detail::zero_mats(kGridActions, n);
  auto reward = detail::zero_mats(kGridActions, n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < kGridActions; ++a) {
      const int s2 = layout.move(s, a);
      prob[a](s, s2) = 1.0;
      reward[a](s, s2) = s2 == s ? 0.0 : entry_reward(s2);
    }
  }
  std::vector<bool> terminal(n, false);
  for (int t : {corner_a, corner_b}) {
    detail::make_absorbing(prob, reward, t);
    terminal[t] = true;
  }
  return TabularMdp(std::move(prob), std::move(reward), std::move(terminal), detail::point_mass(n, center));
}

// ---------------------------------------------------------------------------
// Random walk

inline constexpr int kWalkLeft = 0;
inline constexpr int kWalkRight = 1;

/**
 * n non-terminal states 0..n-1 in a line plus two terminals: state n sits
 * left of state 0 (entry reward -1) and state n+1 right of state n-1 (entry
 * reward +1). Actions move left/right deterministically; the equiprobable
 * behavior lives in the policy.
 */
inline TabularMdp build_random_walk(int n = 19) {
  if (n < 3 || n % 2 == 0) throw std::invalid_argument("random walk needs an odd n >= 3");
  const int total = n + 2;
  const int left_end = n;
  const int right_end = n + 1;
  auto prob = detail::zero_mats(2, total);
  auto reward = detail::zero_mats(2, total);
  for (int s = 0; s < n; ++s) {
    const int l = s == 0 ? left_end : s - 1;
    const int r = s == n - 1 ? right_end : s + 1;
    prob[kWalkLeft](s, l) = 1.0;
    prob[kWalkRight](s, r) = 1.0;
    if (l == left_end) reward[kWalkLeft](s, l) = -1.0;
    if (r == right_end) reward[kWalkRight](s, r) = 1.0;
  }
  std::vector<bool> terminal(total, false);
  for (int t : {left_end, right_end}) {
    detail::make_absorbing(prob, reward, t);
    terminal[t] = true;
  }
  return TabularMdp(std::move(prob), std::move(reward), std::move(terminal),
                    detail::point_mass(total, (n - 1) / 2));
}

// ---------------------------------------------------------------------------
// Random grid

/**
 * side x side grid without terminals. Each cell gets an entry reward drawn
 * once from the integers -3..3; a move off the grid re-enters the same cell.
 */
inline TabularMdp build_random_grid(Rng& rng, int side = 8) {
  if (side < 2) throw std::invalid_argument("random grid side must be >= 2");
  const GridLayout layout = GridLayout::open(side, side);
  const int n = layout.n_cells();
  std::vector<double> entry(n);
  std::uniform_int_distribution<int> draw(-3, 3);
  for (auto& r : entry) r = draw(rng);
  auto prob = detail::zero_mats(kGridActions, n);
  auto reward = detail::zero_mats(kGridActions, n);
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < kGridActions; ++a) {
      const int s2 = layout.move(s, a);
      prob[a](s, s2) = 1.0;
      reward[a](s, s2) = entry[s2];
    }
  }
  return TabularMdp(std::move(prob), std::move(reward), std::vector<bool>(n, false),
                    detail::point_mass(n, layout.state(side / 2, side / 2)));
}

/// Dense random MDP for oracle checks: Dirichlet-ish rows, rewards in [-1, 1].
inline TabularMdp build_random_mdp(Rng& rng, int n_states, int n_actions, double sparsity = 0.0) {
  auto prob = detail::zero_mats(n_actions, n_states);
  auto reward = detail::zero_mats(n_actions, n_states);
  for (int a = 0; a < n_actions; ++a) {
    for (int s = 0; s < n_states; ++s) {
      double total = 0.0;
      for (int s2 = 0; s2 < n_states; ++s2) {
        const double w = uniform01(rng) < sparsity ? 0.0 : -std::log(1.0 - uniform01(rng));
        prob[a](s, s2) = w;
        total += w;
        reward[a](s, s2) = 2.0 * uniform01(rng) - 1.0;
      }
      if (total <= 0.0) {
        prob[a](s, uniform_index(rng, n_states)) = 1.0;
      } else {
        prob[a].row(s) /= total;
      }
    }
  }
  return TabularMdp(std::move(prob), std::move(reward), std::vector<bool>(n_states, false),
                    Vector::Constant(n_states, 1.0 / n_states));
}

inline Policy random_policy(Rng& rng, int n_states, int n_actions) {
  Matrix m(n_states, n_actions);
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < n_actions; ++a) m(s, a) = 0.1 + uniform01(rng);
    m.row(s) /= m.row(s).sum();
  }
  return Policy(std::move(m));
}

}  // namespace fhrl
