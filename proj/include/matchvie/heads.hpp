// Prediction heads: pairwise key->value relevancy with a focal loss, and
// token-level BIOES tagging scored by a linear-chain CRF (one chain per
// text segment).
#pragma once

#include "matchvie/ad/ops.hpp"
#include "matchvie/backbone.hpp"
#include "matchvie/init.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matchvie::heads {

// ---------------------------------------------------------------------------
// Relevancy branch

struct FocalParams {
  double alpha_pos = 0.75;  // weight on positive edges
  double alpha_neg = 0.25;  // weight on negative edges
  double gamma = 2.0;

  static FocalParams focal(double alpha, double gamma) { return {alpha, 1.0 - alpha, gamma}; }
  /// Unweighted cross-entropy, used when the focal term is ablated.
  static FocalParams cross_entropy() { return {1.0, 1.0, 0.0}; }
};

inline constexpr double kProbClamp = 1e-7;

/// Loss of one edge with positive-class probability p and label y.
inline double focal_term(double p, int y, const FocalParams& f) {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (y == 1) return -f.alpha_pos * std::pow(1.0 - p, f.gamma) * std::log(pc);
  return -f.alpha_neg * std::pow(p, f.gamma) * std::log(1.0 - pc);
}

/// Mean focal loss over the off-diagonal entries of N x N matrices.
template <typename Scalar>
double focal_loss(const ad::Mat<Scalar>& probs, const ad::Mat<Scalar>& labels, const FocalParams& f) {
  if (probs.rows() != probs.cols() || labels.rows() != probs.rows() || labels.cols() != probs.cols())
    throw ad::ShapeError("focal_loss: probs and labels must both be N x N");
  const Eigen::Index n = probs.rows();
  if (n < 2) return 0.0;
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) total += focal_term(static_cast<double>(probs(i, j)), labels(i, j) > 0.5 ? 1 : 0, f);
  return total / static_cast<double>(n * (n - 1));
}

template <typename Scalar>
void add_edge_params(ad::ParamStore<Scalar>& store, int d_edge, InitRng& rng) {
  store.add("heads/edge_w1", xavier<Scalar>(d_edge, d_edge, rng));
  store.add("heads/edge_b1", zeros<Scalar>(1, d_edge));
  store.add("heads/edge_w2", xavier<Scalar>(d_edge, 2, rng));
  store.add("heads/edge_b2", zeros<Scalar>(1, 2));
}

/// Two logits (negative, positive) per flattened edge row.
template <typename Scalar>
ad::Var<Scalar> edge_logits(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, ad::Var<Scalar> edges) {
  using backbone::param;
  ad::Var<Scalar> h =
      ad::relu(ad::linear(edges, param(tape, store, "heads/edge_w1"), param(tape, store, "heads/edge_b1")));
  return ad::linear(h, param(tape, store, "heads/edge_w2"), param(tape, store, "heads/edge_b2"));
}

/// p'_ij from flattened N^2 x 2 logits, as an N x N matrix.
template <typename Scalar>
ad::Mat<Scalar> match_probabilities(const ad::Mat<Scalar>& logits, int n) {
  if (logits.rows() != static_cast<Eigen::Index>(n) * n || logits.cols() != 2)
    throw ad::ShapeError("match_probabilities: expected N^2 x 2 logits");
  ad::Mat<Scalar> p(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Scalar z = logits(i * n + j, 1) - logits(i * n + j, 0);
      p(i, j) = Scalar(1) / (Scalar(1) + std::exp(-z));
    }
  return p;
}

/// Focal loss straight from logits, averaged over off-diagonal edges.
/// `labels` is N x N with 1 marking a key->value link i->j.
template <typename Scalar>
ad::Var<Scalar> focal_loss(ad::Var<Scalar> logits, const ad::Mat<Scalar>& labels, const FocalParams& f) {
  const Eigen::Index n = labels.rows();
  if (labels.cols() != n || logits.rows() != n * n || logits.cols() != 2)
    throw ad::ShapeError("focal_loss: expected N^2 x 2 logits and N x N labels");
  ad::Tape<Scalar>& t = *logits.tape;
  const ad::Mat<Scalar>& z = logits.value();
  ad::Mat<Scalar> grad = ad::Mat<Scalar>::Zero(n * n, 2);
  double total = 0;
  const double count = n > 1 ? static_cast<double>(n * (n - 1)) : 1.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const Eigen::Index r = i * n + j;
      const double gap = static_cast<double>(z(r, 1) - z(r, 0));
      const double p = 1.0 / (1.0 + std::exp(-gap));
      const double q = 1.0 / (1.0 + std::exp(gap));  // 1 - p without cancellation
      const bool in_range = p > kProbClamp && p < 1.0 - kProbClamp;
      double dp;
      if (labels(i, j) > 0.5) {
        const double lg = std::log(std::clamp(p, kProbClamp, 1.0 - kProbClamp));
        total += -f.alpha_pos * std::pow(q, f.gamma) * lg;
        dp = (f.gamma != 0 ? f.alpha_pos * f.gamma * std::pow(q, f.gamma - 1) * lg : 0.0) -
             (in_range ? f.alpha_pos * std::pow(q, f.gamma) / p : 0.0);
      } else {
        const double lg = std::log(std::clamp(q, kProbClamp, 1.0 - kProbClamp));
        total += -f.alpha_neg * std::pow(p, f.gamma) * lg;
        dp = (f.gamma != 0 ? -f.alpha_neg * f.gamma * std::pow(p, f.gamma - 1) * lg : 0.0) +
             (in_range ? f.alpha_neg * std::pow(p, f.gamma) / q : 0.0);
      }
      const double dz = dp * p * q / count;
      grad(r, 1) = static_cast<Scalar>(dz);
      grad(r, 0) = static_cast<Scalar>(-dz);
    }
  ad::Mat<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(n > 1 ? total / count : 0.0);
  return t.record(std::move(out), {logits},
                  [&t, logits, grad = std::move(grad)](const ad::Mat<Scalar>& g) { t.accumulate(logits, g(0, 0) * grad); });
}

// ---------------------------------------------------------------------------
// BIOES tag scheme

struct Span {
  int category = 0;  // index into the scheme's category list
  int start = 0;     // first token
  int end = 0;       // one past the last token
  bool operator==(const Span&) const = default;
};

/// Tag 0 is O; category k owns B = 1+4k, I = 2+4k, E = 3+4k, S = 4+4k.
class TagScheme {
 public:
  enum Kind { kO = 0, kB = 1, kI = 2, kE = 3, kS = 4 };

  TagScheme() = default;
  explicit TagScheme(std::vector<std::string> categories) : categories_(std::move(categories)) {}

  const std::vector<std::string>& categories() const { return categories_; }
  int num_categories() const { return static_cast<int>(categories_.size()); }
  int num_tags() const { return 4 * num_categories() + 1; }
  int tag(Kind kind, int category) const { return kind == kO ? 0 : 4 * category + static_cast<int>(kind); }
  static Kind kind(int tag) { return tag == 0 ? kO : static_cast<Kind>((tag - 1) % 4 + 1); }
  static int category(int tag) { return tag == 0 ? -1 : (tag - 1) / 4; }

  /// Category index of a label, or -1 when the label is not tagged.
  int index_of(const std::string& label) const {
    const auto it = std::find(categories_.begin(), categories_.end(), label);
    return it == categories_.end() ? -1 : static_cast<int>(it - categories_.begin());
  }

  /// Tags of a segment of `length` tokens forming one entity (or O when
  /// category < 0).
  std::vector<int> encode_segment(int length, int category) const {
    std::vector<int> tags(static_cast<std::size_t>(length), 0);
    if (category < 0 || length == 0) return tags;
    if (length == 1) {
      tags[0] = tag(kS, category);
      return tags;
    }
    tags.front() = tag(kB, category);
    for (int k = 1; k + 1 < length; ++k) tags[static_cast<std::size_t>(k)] = tag(kI, category);
    tags.back() = tag(kE, category);
    return tags;
  }

  /// Tags for a list of non-overlapping spans over `length` tokens.
  std::vector<int> encode_spans(int length, const std::vector<Span>& spans) const {
    std::vector<int> tags(static_cast<std::size_t>(length), 0);
    for (const auto& s : spans) {
      const auto part = encode_segment(s.end - s.start, s.category);
      std::copy(part.begin(), part.end(), tags.begin() + s.start);
    }
    return tags;
  }

  /// Spans of a tag sequence. Each maximal run of non-O tags sharing a
  /// category is parsed as S / B I* E pieces when well formed; otherwise the
  /// whole run becomes one span.
  static std::vector<Span> decode(const std::vector<int>& tags) {
    std::vector<Span> out;
    const int n = static_cast<int>(tags.size());
    int k = 0;
    while (k < n) {
      if (tags[static_cast<std::size_t>(k)] == 0) {
        ++k;
        continue;
      }
      const int cat = category(tags[static_cast<std::size_t>(k)]);
      int end = k;
      while (end < n && tags[static_cast<std::size_t>(end)] != 0 && category(tags[static_cast<std::size_t>(end)]) == cat)
        ++end;
      std::vector<Span> pieces;
      bool ok = true;
      for (int m = k; m < end && ok;) {
        const Kind kd = kind(tags[static_cast<std::size_t>(m)]);
        if (kd == kS) {
          pieces.push_back({cat, m, m + 1});
          ++m;
        } else if (kd == kB) {
          int e = m + 1;
          while (e < end && kind(tags[static_cast<std::size_t>(e)]) == kI) ++e;
          if (e < end && kind(tags[static_cast<std::size_t>(e)]) == kE) {
            pieces.push_back({cat, m, e + 1});
            m = e + 1;
          } else {
            ok = false;
          }
        } else {
          ok = false;
        }
      }
      if (ok) {
        out.insert(out.end(), pieces.begin(), pieces.end());
      } else {
        out.push_back({cat, k, end});
      }
      k = end;
    }
    return out;
  }

 private:
  std::vector<std::string> categories_;
};

// ---------------------------------------------------------------------------
// Emissions

template <typename Scalar>
void add_tag_params(ad::ParamStore<Scalar>& store, int d_model, int num_tags, InitRng& rng) {
  store.add("heads/tag_w1", uniform_matrix<Scalar>(d_model, d_model, 0.1, rng));
  store.add("heads/tag_b1", zeros<Scalar>(1, d_model));
  store.add("heads/tag_w2", uniform_matrix<Scalar>(d_model, num_tags, 0.1, rng));
  store.add("heads/tag_b2", zeros<Scalar>(1, num_tags));
  store.add("crf/transitions", zeros<Scalar>(num_tags, num_tags));
  store.add("crf/start", zeros<Scalar>(1, num_tags));
  store.add("crf/end", zeros<Scalar>(1, num_tags));
}

/// Pre-softmax BIOES emissions, tokens x num_tags.
template <typename Scalar>
ad::Var<Scalar> bioes_logits(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, ad::Var<Scalar> context) {
  using backbone::param;
  ad::Var<Scalar> h =
      ad::relu(ad::linear(context, param(tape, store, "heads/tag_w1"), param(tape, store, "heads/tag_b1")));
  return ad::linear(h, param(tape, store, "heads/tag_w2"), param(tape, store, "heads/tag_b2"));
}

// ---------------------------------------------------------------------------
// Linear-chain CRF

template <typename Scalar>
struct CrfView {
  const ad::Mat<Scalar>& transitions;  // T x T, [from, to]
  const ad::Mat<Scalar>& start;        // 1 x T
  const ad::Mat<Scalar>& end;          // 1 x T
};

namespace detail {

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& x) {
  using S = typename Derived::Scalar;
  const S m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.derived().array() - m).exp().sum());
}

}  // namespace detail

/// Forward log-potentials alpha (L x T) over rows [begin, begin+len) of the
/// emission matrix.
template <typename Scalar>
ad::Mat<Scalar> crf_forward(const ad::Mat<Scalar>& em, int begin, int len, const CrfView<Scalar>& crf) {
  const Eigen::Index T = em.cols();
  ad::Mat<Scalar> alpha(len, T);
  alpha.row(0) = em.row(begin) + crf.start;
  for (int t = 1; t < len; ++t)
    for (Eigen::Index y = 0; y < T; ++y)
      alpha(t, y) = detail::log_sum_exp(alpha.row(t - 1).transpose() + crf.transitions.col(y)) + em(begin + t, y);
  return alpha;
}

template <typename Scalar>
ad::Mat<Scalar> crf_backward(const ad::Mat<Scalar>& em, int begin, int len, const CrfView<Scalar>& crf) {
  const Eigen::Index T = em.cols();
  ad::Mat<Scalar> beta(len, T);
  beta.row(len - 1) = crf.end;
  for (int t = len - 2; t >= 0; --t)
    for (Eigen::Index y = 0; y < T; ++y)
      beta(t, y) = detail::log_sum_exp(crf.transitions.row(y) + em.row(begin + t + 1) + beta.row(t + 1));
  return beta;
}

template <typename Scalar>
Scalar crf_log_partition(const ad::Mat<Scalar>& em, const CrfView<Scalar>& crf) {
  if (em.rows() == 0) throw std::invalid_argument("crf: empty sequence");
  const ad::Mat<Scalar> alpha = crf_forward(em, 0, static_cast<int>(em.rows()), crf);
  return detail::log_sum_exp(alpha.row(alpha.rows() - 1) + crf.end);
}

template <typename Scalar>
Scalar crf_path_score(const ad::Mat<Scalar>& em, const std::vector<int>& tags, const CrfView<Scalar>& crf,
                      int begin = 0) {
  Scalar s = crf.start(0, tags.front()) + crf.end(0, tags.back());
  for (std::size_t t = 0; t < tags.size(); ++t) {
    s += em(begin + static_cast<Eigen::Index>(t), tags[t]);
    if (t > 0) s += crf.transitions(tags[t - 1], tags[t]);
  }
  return s;
}

template <typename Scalar>
Scalar crf_nll(const ad::Mat<Scalar>& em, const std::vector<int>& gold, const CrfView<Scalar>& crf) {
  if (static_cast<Eigen::Index>(gold.size()) != em.rows())
    throw std::invalid_argument("crf_nll: gold length " + std::to_string(gold.size()) + " != sequence length " +
                                std::to_string(em.rows()));
  return crf_log_partition(em, crf) - crf_path_score(em, gold, crf);
}

/// Highest-scoring path; ties resolve to the lowest tag id.
template <typename Scalar>
std::vector<int> crf_viterbi(const ad::Mat<Scalar>& em, const CrfView<Scalar>& crf, int begin = 0, int len = -1) {
  if (len < 0) len = static_cast<int>(em.rows()) - begin;
  if (len <= 0) return {};
  const Eigen::Index T = em.cols();
  ad::Mat<Scalar> delta(len, T);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> back(len, T);
  delta.row(0) = em.row(begin) + crf.start;
  for (int t = 1; t < len; ++t)
    for (Eigen::Index y = 0; y < T; ++y) {
      int best = 0;
      Scalar best_score = delta(t - 1, 0) + crf.transitions(0, y);
      for (Eigen::Index p = 1; p < T; ++p) {
        const Scalar s = delta(t - 1, p) + crf.transitions(p, y);
        if (s > best_score) {
          best_score = s;
          best = static_cast<int>(p);
        }
      }
      delta(t, y) = best_score + em(begin + t, y);
      back(t, y) = best;
    }
  int last = 0;
  Scalar best_score = delta(len - 1, 0) + crf.end(0, 0);
  for (Eigen::Index y = 1; y < T; ++y)
    if (delta(len - 1, y) + crf.end(0, y) > best_score) {
      best_score = delta(len - 1, y) + crf.end(0, y);
      last = static_cast<int>(y);
    }
  std::vector<int> path(static_cast<std::size_t>(len));
  path.back() = last;
  for (int t = len - 1; t > 0; --t) path[static_cast<std::size_t>(t - 1)] = back(t, path[static_cast<std::size_t>(t)]);
  return path;
}

/// Summed CRF negative log-likelihood of independent chains. `chains` are
/// [start, end) row ranges of `emissions`; empty chains are skipped. `gold`
/// holds one tag per emission row.
template <typename Scalar>
ad::Var<Scalar> crf_nll(ad::Var<Scalar> emissions, const std::vector<std::pair<int, int>>& chains,
                        const std::vector<int>& gold, ad::Var<Scalar> transitions, ad::Var<Scalar> start,
                        ad::Var<Scalar> end) {
  const Eigen::Index T = emissions.cols();
  if (static_cast<Eigen::Index>(gold.size()) != emissions.rows())
    throw std::invalid_argument("crf_nll: gold length " + std::to_string(gold.size()) + " != sequence length " +
                                std::to_string(emissions.rows()));
  if (transitions.rows() != T || transitions.cols() != T || start.cols() != T || end.cols() != T)
    throw ad::ShapeError("crf_nll: transition shapes do not match the tag count");
  const ad::Mat<Scalar>& em = emissions.value();
  const CrfView<Scalar> crf{transitions.value(), start.value(), end.value()};
  ad::Mat<Scalar> g_em = ad::Mat<Scalar>::Zero(em.rows(), T);
  ad::Mat<Scalar> g_tr = ad::Mat<Scalar>::Zero(T, T);
  ad::Mat<Scalar> g_start = ad::Mat<Scalar>::Zero(1, T), g_end = ad::Mat<Scalar>::Zero(1, T);
  Scalar total = 0;
  for (const auto& [b, e] : chains) {
    const int len = e - b;
    if (len <= 0) continue;
    const ad::Mat<Scalar> alpha = crf_forward(em, b, len, crf);
    const ad::Mat<Scalar> beta = crf_backward(em, b, len, crf);
    const Scalar log_z = detail::log_sum_exp(alpha.row(len - 1) + crf.end);
    std::vector<int> tags(gold.begin() + b, gold.begin() + e);
    total += log_z - crf_path_score(em, tags, crf, b);
    // d logZ: marginals; d score: gold indicators.
    for (int t = 0; t < len; ++t) {
      g_em.row(b + t) += ((alpha.row(t) + beta.row(t)).array() - log_z).exp().matrix();
      g_em(b + t, tags[static_cast<std::size_t>(t)]) -= 1;
    }
    g_start += ((alpha.row(0) + beta.row(0)).array() - log_z).exp().matrix();
    g_end += ((alpha.row(len - 1) + crf.end).array() - log_z).exp().matrix();
    g_start(0, tags.front()) -= 1;
    g_end(0, tags.back()) -= 1;
    for (int t = 1; t < len; ++t) {
      for (Eigen::Index p = 0; p < T; ++p)
        for (Eigen::Index y = 0; y < T; ++y)
          g_tr(p, y) += std::exp(alpha(t - 1, p) + crf.transitions(p, y) + em(b + t, y) + beta(t, y) - log_z);
      g_tr(tags[static_cast<std::size_t>(t - 1)], tags[static_cast<std::size_t>(t)]) -= 1;
    }
  }
  ad::Mat<Scalar> out(1, 1);
  out(0, 0) = total;
  ad::Tape<Scalar>& t = *emissions.tape;
  return t.record(std::move(out), {emissions, transitions, start, end},
                  [&t, emissions, transitions, start, end, g_em = std::move(g_em), g_tr = std::move(g_tr),
                   g_start = std::move(g_start), g_end = std::move(g_end)](const ad::Mat<Scalar>& g) {
                    const Scalar k = g(0, 0);
                    if (t.requires_grad(emissions)) t.accumulate(emissions, k * g_em);
                    if (t.requires_grad(transitions)) t.accumulate(transitions, k * g_tr);
                    if (t.requires_grad(start)) t.accumulate(start, k * g_start);
                    if (t.requires_grad(end)) t.accumulate(end, k * g_end);
                  });
}

/// Viterbi decode of every chain; returns one tag per emission row.
template <typename Scalar>
std::vector<int> decode_chains(const ad::Mat<Scalar>& em, const std::vector<std::pair<int, int>>& chains,
                               const CrfView<Scalar>& crf) {
  std::vector<int> tags(static_cast<std::size_t>(em.rows()), 0);
  for (const auto& [b, e] : chains) {
    const auto path = crf_viterbi(em, crf, b, e - b);
    std::copy(path.begin(), path.end(), tags.begin() + b);
  }
  return tags;
}

}  // namespace matchvie::heads
