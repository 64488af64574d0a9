#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace fhrl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Random source used everywhere. Owned by the caller; every sampling
/// routine takes it by reference so runs are reproducible from a seed.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline int uniform_index(Rng& rng, int n) {
  return std::uniform_int_distribution<int>(0, n - 1)(rng);
}

/// Draws an index from an unnormalized-safe probability row by inverse CDF.
template <typename Row>
int sample_categorical(const Row& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last_positive = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs(i) <= 0.0) continue;
    acc += probs(i);
    last_positive = static_cast<int>(i);
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;  // u landed in the rounding slack at the top
}

/// Thrown when a learner produces a non-finite value. The harness catches
/// it and records the run as diverged.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int horizon, long step = -1)
      : std::runtime_error("non-finite value at horizon " + std::to_string(horizon)),
        horizon_(horizon),
        step_(step) {}

  int horizon() const { return horizon_; }
  long step() const { return step_; }
  DivergenceError at_step(long step) const { return DivergenceError(horizon_, step); }

 private:
  int horizon_;
  long step_;
};

}  // namespace fhrl
