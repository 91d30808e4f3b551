// Adam with global gradient-norm clipping.
#pragma once

#include "matchvie/ad/tape.hpp"

#include <cmath>
#include <vector>

namespace matchvie {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

template <typename Scalar>
class Adam {
 public:
  Adam(const ad::ParamStore<Scalar>& store, AdamConfig cfg) : cfg_(cfg) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.push_back(ad::Mat<Scalar>::Zero(store[i].value.rows(), store[i].value.cols()));
      v_.push_back(m_.back());
    }
  }

  /// Clips `grads` in place, applies one update and returns the pre-clip norm.
  Scalar step(ad::ParamStore<Scalar>& store, ad::Gradients<Scalar>& grads) {
    const Scalar norm = grads.norm();
    if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) grads.scale(static_cast<Scalar>(cfg_.clip_norm / norm));
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    const Scalar b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const Scalar step = static_cast<Scalar>(cfg_.lr / c1);
    const Scalar eps = static_cast<Scalar>(cfg_.eps);
    const Scalar root_c2 = static_cast<Scalar>(std::sqrt(c2));
    for (std::size_t i = 0; i < store.size(); ++i) {
      const ad::Mat<Scalar>& g = grads.grads[i];
      if (g.size() == 0) continue;
      m_[i] = b1 * m_[i] + (1 - b1) * g;
      v_[i] = b2 * v_[i] + (1 - b2) * g.cwiseProduct(g);
      store[i].value.array() -= step * m_[i].array() / (v_[i].array().sqrt() / root_c2 + eps);
    }
    return norm;
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<ad::Mat<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace matchvie
