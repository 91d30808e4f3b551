// Differentiable operations on tape variables.
#pragma once

#include "matchvie/ad/tape.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace matchvie::ad {

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [&t, a, b](const Mat<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().transpose();
  return t.record(std::move(out), {a}, [&t, a](const Mat<Scalar>& g) { t.accumulate(a, g.transpose()); });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [&t, a, b](const Mat<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value() - b.value();
  return t.record(std::move(out), {a, b}, [&t, a, b](const Mat<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

/// a + 1 * bias, with bias a 1 x cols row.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> a, Var<Scalar> bias) {
  detail::require(bias.rows() == 1 && bias.cols() == a.cols(), "add_bias: bias must be 1 x cols");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return t.record(std::move(out), {a, bias}, [&t, a, bias](const Mat<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(bias, g.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> cmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "cmul: shape mismatch");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [&t, a, b](const Mat<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar k) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value() * k;
  return t.record(std::move(out), {a}, [&t, a, k](const Mat<Scalar>& g) { t.accumulate(a, g * k); });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().cwiseMax(Scalar(0));
  return t.record(std::move(out), {a}, [&t, a](const Mat<Scalar>& g) {
    t.accumulate(a, (a.value().array() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> a, Scalar slope) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = (a.value().array() > Scalar(0)).select(a.value(), a.value() * slope);
  return t.record(std::move(out), {a}, [&t, a, slope](const Mat<Scalar>& g) {
    t.accumulate(a, (a.value().array() > Scalar(0)).select(g, g * slope));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = (Scalar(1) + (-a.value().array()).exp()).inverse().matrix();
  Mat<Scalar> saved = out;
  return t.record(std::move(out), {a}, [&t, a, s = std::move(saved)](const Mat<Scalar>& g) {
    t.accumulate(a, (g.array() * s.array() * (Scalar(1) - s.array())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().array().tanh().matrix();
  return t.record(std::move(out), {a}, [&t, a](const Mat<Scalar>& g) {
    const auto th = a.value().array().tanh();
    t.accumulate(a, (g.array() * (Scalar(1) - th.square())).matrix());
  });
}

/// Row-wise softmax. `mask`, when given, is added before normalisation
/// (use -inf to exclude entries). A fully excluded row yields zeros.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a, const Mat<Scalar>* mask = nullptr) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> z = a.value();
  if (mask) z += *mask;
  Mat<Scalar> out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.row(r).maxCoeff();
    if (!std::isfinite(m)) {
      out.row(r).setZero();
      continue;
    }
    // Vectorised exp does not map -inf exactly to 0, so masked entries are cleared explicitly.
    out.row(r) = (z.row(r).array() == -std::numeric_limits<Scalar>::infinity())
                     .select(Scalar(0), (z.row(r).array() - m).exp());
    out.row(r) /= out.row(r).sum();
  }
  Mat<Scalar> probs = out;
  return t.record(std::move(out), {a}, [&t, a, probs = std::move(probs)](const Mat<Scalar>& g) {
    Mat<Scalar> gp = g.cwiseProduct(probs);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = gp.rowwise().sum();
    t.accumulate(a, gp - (probs.array().colwise() * s.array()).matrix());
  });
}

/// Row-wise layer normalisation with learned gain and bias (both 1 x cols).
template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> a, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar(1e-5)) {
  detail::require(gain.rows() == 1 && gain.cols() == a.cols(), "layer_norm: gain shape");
  detail::require(bias.rows() == 1 && bias.cols() == a.cols(), "layer_norm: bias shape");
  Tape<Scalar>& t = *a.tape;
  const Eigen::Index n = a.cols();
  const Mat<Scalar>& x = a.value();
  Mat<Scalar> xhat(x.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Mat<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return t.record(std::move(out), {a, gain, bias},
                  [&t, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](const Mat<Scalar>& g) {
                    t.accumulate(bias, g.colwise().sum());
                    t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                    if (!t.requires_grad(a)) return;
                    Mat<Scalar> gx = (g.array().rowwise() * gain.value().row(0).array()).matrix();
                    Mat<Scalar> da(gx.rows(), n);
                    for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                      const Scalar m1 = gx.row(r).mean();
                      const Scalar m2 = gx.row(r).cwiseProduct(xhat.row(r)).mean();
                      da.row(r) = inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                    t.accumulate(a, da);
                  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  Tape<Scalar>& t = *parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<Scalar>> saved(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [&t, saved](const Mat<Scalar>& g) {
    Eigen::Index off = 0;
    for (const auto& p : saved) {
      t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Tape<Scalar>& t = *parts[0].tape;
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<Scalar> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<Scalar>> saved(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [&t, saved](const Mat<Scalar>& g) {
    Eigen::Index off = 0;
    for (const auto& p : saved) {
      t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().middleCols(start, count);
  return t.record(std::move(out), {a}, [&t, a, start, count](const Mat<Scalar>& g) {
    Mat<Scalar> full = Mat<Scalar>::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value().middleRows(start, count);
  return t.record(std::move(out), {a}, [&t, a, start, count](const Mat<Scalar>& g) {
    Mat<Scalar> full = Mat<Scalar>::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

/// out.row(r) = a.row(index[r]); the embedding-table lookup.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> a, std::vector<int> index) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    detail::require(index[r] >= 0 && index[r] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = a.value().row(index[r]);
  }
  return t.record(std::move(out), {a}, [&t, a, index = std::move(index)](const Mat<Scalar>& g) {
    Mat<Scalar> full = Mat<Scalar>::Zero(a.rows(), a.cols());
    for (std::size_t r = 0; r < index.size(); ++r) full.row(index[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(a, full);
  });
}

/// Constant sparse operator applied from the left: S * a. `s` must outlive
/// the tape's backward pass.
template <typename Scalar>
Var<Scalar> sparse_left(const SparseMat<Scalar>& s, Var<Scalar> a) {
  detail::require(s.cols() == a.rows(), "sparse_left: dimension mismatch");
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = s * a.value();
  const SparseMat<Scalar>* sp = &s;
  return t.record(std::move(out), {a}, [&t, a, sp](const Mat<Scalar>& g) {
    t.accumulate(a, Mat<Scalar>(sp->transpose() * g));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [&t, a](const Mat<Scalar>& g) {
    t.accumulate(a, Mat<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Dense layer: x W (+ b).
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace matchvie::ad
