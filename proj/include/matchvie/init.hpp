// Deterministic parameter initialisation.
#pragma once

#include "matchvie/ad/tape.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace matchvie {

/// Raw-engine based so streams match across standard libraries.
class InitRng {
 public:
  explicit InitRng(std::uint64_t seed) : engine_(seed) {}
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename Scalar>
ad::Mat<Scalar> uniform_matrix(Eigen::Index rows, Eigen::Index cols, double limit, InitRng& rng) {
  ad::Mat<Scalar> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
  return m;
}

/// Glorot-uniform weights for a fan_in x fan_out map.
template <typename Scalar>
ad::Mat<Scalar> xavier(Eigen::Index fan_in, Eigen::Index fan_out, InitRng& rng) {
  return uniform_matrix<Scalar>(fan_in, fan_out, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

template <typename Scalar>
ad::Mat<Scalar> zeros(Eigen::Index rows, Eigen::Index cols) {
  return ad::Mat<Scalar>::Zero(rows, cols);
}

}  // namespace matchvie
