#pragma once

#include "fhrl/convergence.hpp"
#include "fhrl/csv.hpp"
#include "fhrl/dp.hpp"
#include "fhrl/mdp.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <ostream>
#include <vector>

namespace fhrl {

struct MlpShape {
  int input = 1;
  int hidden1 = 64;
  int hidden2 = 64;
  int horizons = 1;
  int actions = 1;

  int outputs() const { return horizons * actions; }
  long n_params() const {
    return static_cast<long>(hidden1) * (input + 1) + static_cast<long>(hidden2) * (hidden1 + 1) +
           static_cast<long>(outputs()) * (hidden2 + 1);
  }
  bool operator==(const MlpShape&) const = default;
};

/**
 * Two ReLU hidden layers shared by every horizon, then H * A linear outputs.
 * Unit (h - 1) * A + a is Q^h(s, a); Q^0 is implicit zero. All parameters
 * live in one flat vector so the optimizer and finite differences treat
 * them uniformly.
 */
class Mlp {
 public:
  using MatMap = Eigen::Map<const Matrix>;
  using VecMap = Eigen::Map<const Vector>;

  explicit Mlp(const MlpShape& shape) : shape_(shape), params_(Vector::Zero(shape.n_params())) {
    if (shape.input < 1 || shape.hidden1 < 1 || shape.hidden2 < 1 || shape.horizons < 1 || shape.actions < 1) {
      throw std::invalid_argument("MLP dimensions must be positive");
    }
  }

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static Mlp initialized(const MlpShape& shape, Rng& rng, bool zero_output = false) {
    Mlp net(shape);
    auto fill = [&](long offset, int rows, int cols, bool zero) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
      for (long i = 0; i < static_cast<long>(rows) * cols; ++i) {
        net.params_(offset + i) = zero ? 0.0 : bound * (2.0 * uniform01(rng) - 1.0);
      }
    };
    fill(net.w1_offset(), shape.hidden1, shape.input, false);
    fill(net.w2_offset(), shape.hidden2, shape.hidden1, false);
    fill(net.w3_offset(), shape.outputs(), shape.hidden2, zero_output);
    return net;
  }

  const MlpShape& shape() const { return shape_; }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }

  MatMap w1() const { return MatMap(params_.data() + w1_offset(), shape_.hidden1, shape_.input); }
  VecMap b1() const { return VecMap(params_.data() + b1_offset(), shape_.hidden1); }
  MatMap w2() const { return MatMap(params_.data() + w2_offset(), shape_.hidden2, shape_.hidden1); }
  VecMap b2() const { return VecMap(params_.data() + b2_offset(), shape_.hidden2); }
  MatMap w3() const { return MatMap(params_.data() + w3_offset(), shape_.outputs(), shape_.hidden2); }
  VecMap b3() const { return VecMap(params_.data() + b3_offset(), shape_.outputs()); }

  long w1_offset() const { return 0; }
  long b1_offset() const { return w1_offset() + static_cast<long>(shape_.hidden1) * shape_.input; }
  long w2_offset() const { return b1_offset() + shape_.hidden1; }
  long b2_offset() const { return w2_offset() + static_cast<long>(shape_.hidden2) * shape_.hidden1; }
  long w3_offset() const { return b2_offset() + shape_.hidden2; }
  long b3_offset() const { return w3_offset() + static_cast<long>(shape_.outputs()) * shape_.hidden2; }

  struct Activations {
    Matrix z1, a1, z2, a2, out;  ///< one column per input
  };

  /// Batched forward pass: x has one input column per sample.
  Activations forward_batch(const Matrix& x) const {
    if (x.rows() != shape_.input) throw std::invalid_argument("input dimension mismatch");
    Activations act;
    act.z1 = (w1() * x).colwise() + b1();
    act.a1 = act.z1.cwiseMax(0.0);
    act.z2 = (w2() * act.a1).colwise() + b2();
    act.a2 = act.z2.cwiseMax(0.0);
    act.out = (w3() * act.a2).colwise() + b3();
    return act;
  }

  /// Q table with rows h = 0..H (row 0 zero) and one column per action.
  Matrix forward(const Vector& x) const {
    const Matrix out = forward_batch(x).out;
    Matrix q = Matrix::Zero(shape_.horizons + 1, shape_.actions);
    for (int h = 1; h <= shape_.horizons; ++h)
      for (int a = 0; a < shape_.actions; ++a) q(h, a) = out(unit(h, a), 0);
    return q;
  }

  double q(const Vector& x, int h, int a) const {
    if (h == 0) return 0.0;
    return forward_batch(x).out(unit(h, a), 0);
  }

  int unit(int h, int a) const { return (h - 1) * shape_.actions + a; }

  bool operator==(const Mlp& other) const { return shape_ == other.shape_ && params_ == other.params_; }

 private:
  MlpShape shape_;
  Vector params_;
};

/// Greedy action of Q^h from a forward pass (lowest index on ties).
inline int mlp_greedy(const Mlp& net, const Vector& x, int h) {
  const Matrix q = net.forward(x);
  return argmax_lowest(q.row(h));
}

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

namespace detail {

inline Matrix encode_batch(const FeatureMap& encoder, const std::vector<Transition>& batch, bool next) {
  Matrix x(encoder.dim(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = encoder.row(next ? batch[i].s_next : batch[i].s).transpose();
  }
  return x;
}

}  // namespace detail

/**
 * Multi-horizon regression loss: targets r + gamma max_a' Q^{h-1}(s', a')
 * from `target` are constants; loss = mean over the batch of
 * (1/H) sum_h (target^h - Q^h(s, a))^2. Terminal successors bootstrap 0.
 */
inline LossGrad loss_and_grad(const Mlp& net, const std::vector<Transition>& batch, const FeatureMap& encoder,
                              double gamma, const Mlp& target) {
  if (batch.empty()) throw std::invalid_argument("batch must be non-empty");
  const auto& sh = net.shape();
  const int H = sh.horizons;
  const int A = sh.actions;
  const auto B = static_cast<Eigen::Index>(batch.size());

  const auto act = net.forward_batch(detail::encode_batch(encoder, batch, false));
  const Matrix next_out = H > 1 ? target.forward_batch(detail::encode_batch(encoder, batch, true)).out : Matrix();

  Matrix g_out = Matrix::Zero(sh.outputs(), B);
  double loss = 0.0;
  const double scale = 1.0 / (static_cast<double>(H) * static_cast<double>(B));
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& tr = batch[static_cast<std::size_t>(i)];
    for (int h = 1; h <= H; ++h) {
      double boot = 0.0;
      if (h > 1 && !tr.done) boot = next_out.block((h - 2) * A, i, A, 1).maxCoeff();
      const double err = tr.r + gamma * boot - act.out(net.unit(h, tr.a), i);
      loss += err * err;
      g_out(net.unit(h, tr.a), i) = -2.0 * scale * err;
    }
  }
  loss *= scale;

  LossGrad out{loss, Vector::Zero(sh.n_params())};
  auto view = [&](long offset, int rows, int cols) { return Eigen::Map<Matrix>(out.grad.data() + offset, rows, cols); };
  const Matrix x = detail::encode_batch(encoder, batch, false);
  view(net.w3_offset(), sh.outputs(), sh.hidden2) = g_out * act.a2.transpose();
  view(net.b3_offset(), sh.outputs(), 1) = g_out.rowwise().sum();
  const Matrix d2 = (net.w3().transpose() * g_out).cwiseProduct((act.z2.array() > 0.0).cast<double>().matrix());
  view(net.w2_offset(), sh.hidden2, sh.hidden1) = d2 * act.a1.transpose();
  view(net.b2_offset(), sh.hidden2, 1) = d2.rowwise().sum();
  const Matrix d1 = (net.w2().transpose() * d2).cwiseProduct((act.z1.array() > 0.0).cast<double>().matrix());
  view(net.w1_offset(), sh.hidden1, sh.input) = d1 * x.transpose();
  view(net.b1_offset(), sh.hidden1, 1) = d1.rowwise().sum();
  return out;
}

struct RmsPropState {
  double lr = 2.5e-4;
  double decay = 0.99;
  double eps = 1e-8;
  Vector acc;  ///< running mean of squared gradients

  RmsPropState() = default;
  RmsPropState(long n, double lr_, double decay_ = 0.99, double eps_ = 1e-8)
      : lr(lr_), decay(decay_), eps(eps_), acc(Vector::Zero(n)) {}
};

inline void rmsprop_step(Vector& params, const Vector& grad, RmsPropState& opt) {
  if (grad.size() != params.size() || opt.acc.size() != params.size()) {
    throw std::invalid_argument("optimizer state, gradient and parameters must have equal length");
  }
  opt.acc = opt.decay * opt.acc + (1.0 - opt.decay) * grad.cwiseAbs2();
  params.array() -= opt.lr * grad.array() / (opt.acc.array().sqrt() + opt.eps);
}

/// Fixed-capacity FIFO of transitions with uniform sampling (with replacement).
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  void push(const Transition& tr) {
    if (items_.size() < capacity_) {
      items_.push_back(tr);
    } else {
      items_[cursor_] = tr;
    }
    cursor_ = (cursor_ + 1) % capacity_;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return items_.at(i); }

  std::size_t sample_index(Rng& rng) const {
    if (items_.empty()) throw std::logic_error("sampling from an empty replay buffer");
    return std::uniform_int_distribution<std::size_t>(0, items_.size() - 1)(rng);
  }

  std::vector<Transition> sample(Rng& rng, std::size_t batch) const {
    std::vector<Transition> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(items_[sample_index(rng)]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::vector<Transition> items_;
};

// ---------------------------------------------------------------------------
// Training

struct DfhqConfig {
  int H = 32;
  int hidden1 = 64;
  int hidden2 = 64;
  double lr = 2.5e-4;
  double gamma = 0.99;
  std::size_t buffer_capacity = 100000;
  std::size_t batch = 32;
  double eps_start = 1.0;
  double eps_end = 0.1;
  long eps_anneal_frames = 50000;
  long total_frames = 60000;
  int max_episode_steps = 500;
  long target_freeze_k = 0;  ///< <= 1: bootstrap from the online network
  double monitor_c = 1e-3;   ///< stopping constant fed to the progress monitor

  double epsilon(long frame) const {
    if (frame >= eps_anneal_frames) return eps_end;
    return eps_start + (eps_end - eps_start) * static_cast<double>(frame) / static_cast<double>(eps_anneal_frames);
  }
};

struct DfhqEpisode {
  long frame = 0;       ///< frame count at episode end
  int episode = 0;
  int length = 0;
  double ret = 0.0;     ///< discounted return
  double mean_loss = 0.0;
};

struct DfhqResult {
  Mlp net;
  std::vector<DfhqEpisode> episodes;
  std::optional<ProgressReport> progress;
  long frames = 0;
  bool diverged = false;

  /// Mean discounted return of the last k episodes (all if fewer).
  double mean_recent_return(std::size_t k) const {
    if (episodes.empty()) return 0.0;
    const std::size_t first = episodes.size() > k ? episodes.size() - k : 0;
    double total = 0.0;
    for (std::size_t i = first; i < episodes.size(); ++i) total += episodes[i].ret;
    return total / static_cast<double>(episodes.size() - first);
  }
};

namespace detail {

/// Exact expected targets r + gamma max Q^{h-1}(s', .) of `source` for every (h, s, a), flattened.
inline Vector model_targets(const TabularMdp& mdp, const FeatureMap& encoder, const Mlp& source, double gamma) {
  const int H = source.shape().horizons;
  const int n = mdp.n_states();
  const int A = mdp.n_actions();
  Matrix next_max = Matrix::Zero(H + 1, n);  // max_a Q^h(y, a)
  for (int y = 0; y < n; ++y) {
    if (mdp.terminal(y)) continue;
    const Matrix q = source.forward(encoder.row(y).transpose());
    for (int h = 1; h <= H; ++h) next_max(h, y) = q.row(h).maxCoeff();
  }
  Vector g(static_cast<Eigen::Index>(H) * n * A);
  for (int h = 1; h <= H; ++h)
    for (int s = 0; s < n; ++s)
      for (int a = 0; a < A; ++a)
        g(((h - 1) * n + s) * A + a) =
            mdp.expected_reward(s, a) + gamma * mdp.prob(a).row(s).dot(next_max.row(h - 1).transpose());
  return g;
}

inline Vector model_values(const TabularMdp& mdp, const FeatureMap& encoder, const Mlp& net) {
  const int H = net.shape().horizons;
  const int n = mdp.n_states();
  const int A = mdp.n_actions();
  Vector v(static_cast<Eigen::Index>(H) * n * A);
  for (int s = 0; s < n; ++s) {
    const Matrix q = net.forward(encoder.row(s).transpose());
    for (int h = 1; h <= H; ++h)
      for (int a = 0; a < A; ++a) v(((h - 1) * n + s) * A + a) = q(h, a);
  }
  return v;
}

/// Uniform weights over (h, s, a) with s non-terminal.
inline StateWeighting model_weighting(const TabularMdp& mdp, int H) {
  const int n = mdp.n_states();
  const int A = mdp.n_actions();
  Vector d = Vector::Zero(static_cast<Eigen::Index>(H) * n * A);
  for (int h = 1; h <= H; ++h)
    for (int s = 0; s < n; ++s)
      if (!mdp.terminal(s))
        for (int a = 0; a < A; ++a) d(((h - 1) * n + s) * A + a) = 1.0;
  return StateWeighting::normalized(d);
}

}  // namespace detail

/**
 * DFHQ on a tabular environment seen through `encoder`: epsilon-greedy on
 * Q^H, one replay mini-batch and RMSprop step per frame once a batch is
 * stored. With target_freeze_k > 1 the bootstrap network refreshes every k
 * frames and each window is scored by the progress monitor against the
 * exact model: surrogate loss vs the frozen targets, true loss vs the
 * optimal q-tables, eps the distance between the two targets.
 */
inline DfhqResult dfhq_train(const TabularMdp& env, const FeatureMap& encoder, const DfhqConfig& cfg, Rng& rng) {
  if (encoder.kind() != FeatureMap::Kind::State || encoder.rows() != env.n_states()) {
    throw std::invalid_argument("encoder must have one row per environment state");
  }
  const MlpShape shape{encoder.dim(), cfg.hidden1, cfg.hidden2, cfg.H, env.n_actions()};
  DfhqResult res{Mlp::initialized(shape, rng), {}, std::nullopt, 0, false};
  Mlp& net = res.net;
  RmsPropState opt(shape.n_params(), cfg.lr);
  ReplayBuffer replay(cfg.buffer_capacity);
  const bool frozen = cfg.target_freeze_k > 1;
  Mlp target_net = net;

  std::optional<Vector> true_targets;
  std::optional<StateWeighting> weighting;
  std::vector<LossWindow> windows;
  LossWindow open_window;
  Vector frozen_targets;
  if (frozen) {
    const auto opt_q = fh_optimal(env, cfg.gamma, cfg.H);
    Vector t(static_cast<Eigen::Index>(cfg.H) * env.n_states() * env.n_actions());
    for (int h = 1; h <= cfg.H; ++h)
      for (int s = 0; s < env.n_states(); ++s)
        for (int a = 0; a < env.n_actions(); ++a) t(((h - 1) * env.n_states() + s) * env.n_actions() + a) = opt_q.values.q[h](s, a);
    true_targets = t;
    weighting = detail::model_weighting(env, cfg.H);
  }
  auto open = [&] {
    frozen_targets = detail::model_targets(env, encoder, target_net, cfg.gamma);
    const Vector v = detail::model_values(env, encoder, net);
    open_window = LossWindow{weighting->norm(frozen_targets - v), 0.0, weighting->norm(*true_targets - v), 0.0,
                             weighting->norm(frozen_targets - *true_targets)};
  };
  auto close = [&] {
    const Vector v = detail::model_values(env, encoder, net);
    open_window.surrogate_after = weighting->norm(frozen_targets - v);
    open_window.true_after = weighting->norm(*true_targets - v);
    windows.push_back(open_window);
  };
  if (frozen) open();

  long frame = 0;
  int episode = 0;
  try {
    while (frame < cfg.total_frames) {
      int s = sample_start(env, rng);
      double ret = 0.0, discount = 1.0, loss_sum = 0.0;
      int length = 0, loss_count = 0;
      while (!env.terminal(s) && length < cfg.max_episode_steps && frame < cfg.total_frames) {
        const Vector x = encoder.row(s).transpose();
        int a;
        if (uniform01(rng) < cfg.epsilon(frame)) {
          a = uniform_index(rng, env.n_actions());
        } else {
          a = mlp_greedy(net, x, cfg.H);
        }
        const auto tr = sample_step(env, s, a, rng);
        replay.push(tr);
        ret += discount * tr.r;
        discount *= cfg.gamma;
        ++length;
        ++frame;
        if (replay.size() >= cfg.batch) {
          const auto batch = replay.sample(rng, cfg.batch);
          const LossGrad lg = loss_and_grad(net, batch, encoder, cfg.gamma, frozen ? target_net : net);
          if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) throw DivergenceError(cfg.H, frame);
          rmsprop_step(net.params(), lg.grad, opt);
          loss_sum += lg.loss;
          ++loss_count;
        }
        if (frozen && frame % cfg.target_freeze_k == 0) {
          close();
          target_net = net;
          open();
        }
        s = tr.s_next;
      }
      res.episodes.push_back(DfhqEpisode{frame, episode++, length, ret, loss_count ? loss_sum / loss_count : 0.0});
    }
  } catch (const DivergenceError&) {
    res.diverged = true;
  }
  res.frames = frame;
  if (frozen) res.progress = progress_monitor(windows, cfg.monitor_c);
  return res;
}

struct ValueReturnRow {
  long frame = 0;
  int episode = 0;
  double q_pred = 0.0;
  double realized_return = 0.0;
};

/**
 * Rolls out epsilon-greedy episodes of the frozen network and pairs each
 * selected Q^H(s_t, a_t) with the discounted H-step return realized from t
 * (rewards after the episode end count as zero).
 */
inline std::vector<ValueReturnRow> log_value_vs_return(const Mlp& net, const TabularMdp& env,
                                                       const FeatureMap& encoder, int episodes, double gamma,
                                                       Rng& rng, double epsilon = 0.05, int max_steps = 500) {
  const int H = net.shape().horizons;
  std::vector<ValueReturnRow> rows;
  long frame = 0;
  for (int e = 0; e < episodes; ++e) {
    std::vector<double> preds, rewards;
    std::vector<long> frames;
    int s = sample_start(env, rng);
    while (!env.terminal(s) && static_cast<int>(rewards.size()) < max_steps) {
      const Vector x = encoder.row(s).transpose();
      const Matrix q = net.forward(x);
      const int a = uniform01(rng) < epsilon ? uniform_index(rng, env.n_actions()) : argmax_lowest(q.row(H));
      const auto tr = sample_step(env, s, a, rng);
      preds.push_back(q(H, a));
      rewards.push_back(tr.r);
      frames.push_back(frame++);
      s = tr.s_next;
    }
    for (std::size_t t = 0; t < rewards.size(); ++t) {
      double g = 0.0, disc = 1.0;
      for (std::size_t k = t; k < rewards.size() && k < t + static_cast<std::size_t>(H); ++k) {
        g += disc * rewards[k];
        disc *= gamma;
      }
      rows.push_back(ValueReturnRow{frames[t], e, preds[t], g});
    }
  }
  return rows;
}

inline void write_value_return_csv(std::ostream& os, const std::vector<ValueReturnRow>& rows) {
  os << "frame,episode,q_pred,realized_return\n";
  for (const auto& r : rows)
    os << r.frame << ',' << r.episode << ',' << format_double(r.q_pred) << ',' << format_double(r.realized_return)
       << '\n';
}

/// Training curve rows "frame,episode,return,loss".
inline void write_training_csv(std::ostream& os, const DfhqResult& res) {
  os << "frame,episode,return,loss\n";
  for (const auto& e : res.episodes)
    os << e.frame << ',' << e.episode << ',' << format_double(e.ret) << ',' << format_double(e.mean_loss) << '\n';
}

/// Shape-tagged JSON dump of the parameters.
inline nlohmann::json to_json(const Mlp& net) {
  const auto& s = net.shape();
  return {{"input", s.input},
          {"hidden1", s.hidden1},
          {"hidden2", s.hidden2},
          {"horizons", s.horizons},
          {"actions", s.actions},
          {"params", std::vector<double>(net.params().data(), net.params().data() + net.params().size())}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  const MlpShape shape{j.at("input").get<int>(), j.at("hidden1").get<int>(), j.at("hidden2").get<int>(),
                       j.at("horizons").get<int>(), j.at("actions").get<int>()};
  Mlp net(shape);
  const auto p = j.at("params").get<std::vector<double>>();
  if (static_cast<long>(p.size()) != shape.n_params()) throw std::invalid_argument("parameter count mismatch");
  net.params() = Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size()));
  if (!net.params().allFinite()) throw std::invalid_argument("non-finite parameter in checkpoint");
  return net;
}

}  // namespace fhrl
