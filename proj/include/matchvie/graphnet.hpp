// Fully connected document graph over text segments. Nodes are pooled
// context features, edges start from digit-encoded relative geometry, and
// each layer drives both edge and node updates from triplet features
// g_ij = Wg [v_i | e_ij | v_j].
//
// Edge tensors are stored flattened: row i*N + j holds e_ij.
#pragma once

#include "matchvie/ad/ops.hpp"
#include "matchvie/backbone.hpp"
#include "matchvie/docmodel.hpp"
#include "matchvie/init.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matchvie::graphnet {

struct GraphConfig {
  int num_layers = 2;
  int num_heads = 8;
  int d_node = 64;
  int d_edge = 32;
  bool use_num2vec = true;

  void validate() const {
    if (num_layers < 0) throw ConfigError("graph.num_layers must be >= 0");
    if (num_heads < 1) throw ConfigError("graph.num_heads must be >= 1");
    if (d_node < 1 || d_edge < 1) throw ConfigError("graph.d_node and graph.d_edge must be >= 1");
    if (d_node % num_heads != 0) throw ConfigError("graph.d_node must be divisible by graph.num_heads");
  }
  int edge_input_dim() const { return use_num2vec ? 40 : 5; }
};

/// Eight digit slots scaled by 0.1: four integral digits right-aligned, four
/// fractional digits left-aligned, negated for negative input. Magnitudes of
/// 10000 or more saturate to 9999.9999.
inline std::array<double, 8> num2vec(double value) {
  if (!std::isfinite(value)) throw std::domain_error("num2vec: non-finite input");
  constexpr long long kMax = 99999999;
  const double mag = std::fabs(value);
  long long q = mag >= 10000.0 ? kMax : std::llround(mag * 1e4);
  if (q > kMax) q = kMax;
  std::array<double, 8> out{};
  long long whole = q / 10000, frac = q % 10000;
  for (int k = 3; k >= 0; --k, whole /= 10) out[static_cast<std::size_t>(k)] = static_cast<double>(whole % 10) / 10.0;
  for (int k = 7; k >= 4; --k, frac /= 10) out[static_cast<std::size_t>(k)] = static_cast<double>(frac % 10) / 10.0;
  if (value < 0)
    for (auto& x : out) x = -x;
  return out;
}

/// [x_ij, y_ij, w_i/h_i, h_j/h_i, w_j/h_i], offsets centre to centre in units
/// of h_i.
inline std::array<double, 5> edge_features(const TextSegment& i, const TextSegment& j) {
  const double hi = i.box.height();
  if (!(hi > 0)) throw ValidationError("segment " + std::to_string(i.id) + ": zero-height box in edge features");
  return {(j.box.cx() - i.box.cx()) / hi, (j.box.cy() - i.box.cy()) / hi, i.box.width() / hi, j.box.height() / hi,
          j.box.width() / hi};
}

/// Document-dependent constants of the graph stage.
template <typename Scalar>
struct GraphInputs {
  int n = 0;
  ad::SparseMat<Scalar> pool;  // N x tokens, row i averages segment i's span
  ad::Mat<Scalar> edge_in;     // N^2 x (40 | 5)
};

template <typename Scalar>
GraphInputs<Scalar> prepare_graph(const Document& doc, const std::vector<std::pair<int, int>>& spans,
                                  const GraphConfig& cfg) {
  const int n = static_cast<int>(doc.segments.size());
  if (static_cast<int>(spans.size()) != n) throw ad::ShapeError("prepare_graph: span count != segment count");
  GraphInputs<Scalar> g;
  g.n = n;
  int tokens = 0;
  std::vector<Eigen::Triplet<Scalar>> trip;
  for (int i = 0; i < n; ++i) {
    const auto [s, e] = spans[static_cast<std::size_t>(i)];
    tokens = std::max(tokens, e);
    for (int m = s; m < e; ++m) trip.emplace_back(i, m, Scalar(1) / static_cast<Scalar>(e - s));
  }
  g.pool.resize(n, tokens);
  g.pool.setFromTriplets(trip.begin(), trip.end());
  g.edge_in.resize(static_cast<Eigen::Index>(n) * n, cfg.edge_input_dim());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const auto f = edge_features(doc.segments[static_cast<std::size_t>(i)], doc.segments[static_cast<std::size_t>(j)]);
      auto row = g.edge_in.row(static_cast<Eigen::Index>(i) * n + j);
      for (int k = 0; k < 5; ++k) {
        if (!cfg.use_num2vec) {
          row(k) = static_cast<Scalar>(f[static_cast<std::size_t>(k)]);
          continue;
        }
        const auto digits = num2vec(f[static_cast<std::size_t>(k)]);
        for (int s = 0; s < 8; ++s) row(k * 8 + s) = static_cast<Scalar>(digits[static_cast<std::size_t>(s)]);
      }
    }
  return g;
}

template <typename Scalar>
struct DocumentGraph {
  ad::Var<Scalar> nodes;  // N x d_node
  ad::Var<Scalar> edges;  // N^2 x d_edge
  int n = 0;
};

template <typename Scalar>
void add_params(ad::ParamStore<Scalar>& store, const GraphConfig& cfg, int d_context, InitRng& rng) {
  cfg.validate();
  const int dn = cfg.d_node, de = cfg.d_edge, dg = cfg.d_node;
  store.add("graph/node_w", xavier<Scalar>(d_context, dn, rng));
  store.add("graph/node_b", zeros<Scalar>(1, dn));
  store.add("graph/edge_w", xavier<Scalar>(cfg.edge_input_dim(), de, rng));
  store.add("graph/edge_b", zeros<Scalar>(1, de));
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "graph/layer" + std::to_string(l);
    store.add(p + "/Wg", xavier<Scalar>(2 * dn + de, dg, rng));
    store.add(p + "/We", xavier<Scalar>(dg, de, rng));
    store.add(p + "/attn", xavier<Scalar>(dg, cfg.num_heads, rng));
    store.add(p + "/Wv", xavier<Scalar>(dg, dn, rng));
  }
}

/// out[i*N + j] = a_i + e[i*N + j] + b_j.
template <typename Scalar>
ad::Var<Scalar> pair_broadcast_add(ad::Var<Scalar> a, ad::Var<Scalar> e, ad::Var<Scalar> b) {
  const Eigen::Index n = a.rows(), d = a.cols();
  if (b.rows() != n || b.cols() != d || e.rows() != n * n || e.cols() != d)
    throw ad::ShapeError("pair_broadcast_add: expected a, b of N x d and e of N^2 x d");
  ad::Mat<Scalar> out = e.value();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out.row(i * n + j) += a.value().row(i) + b.value().row(j);
  ad::Tape<Scalar>& t = *a.tape;
  return t.record(std::move(out), {a, e, b}, [&t, a, e, b, n, d](const ad::Mat<Scalar>& g) {
    if (t.requires_grad(e)) t.accumulate(e, g);
    ad::Mat<Scalar> ga = ad::Mat<Scalar>::Zero(n, d), gb = ad::Mat<Scalar>::Zero(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        ga.row(i) += g.row(i * n + j);
        gb.row(j) += g.row(i * n + j);
      }
    if (t.requires_grad(a)) t.accumulate(a, ga);
    if (t.requires_grad(b)) t.accumulate(b, gb);
  });
}

/// Per head h: alpha_ij = softmax over j != i of scores[i*N + j, h], and
/// out[i, h-block] = sum_j alpha_ij messages[i*N + j, h-block]. With N = 1
/// the output is zero.
template <typename Scalar>
ad::Var<Scalar> edge_softmax_aggregate(ad::Var<Scalar> scores, ad::Var<Scalar> messages, int n,
                                       std::vector<ad::Mat<Scalar>>* alpha_out = nullptr) {
  const Eigen::Index heads = scores.cols(), nn = static_cast<Eigen::Index>(n) * n;
  if (scores.rows() != nn || messages.rows() != nn || heads == 0 || messages.cols() % heads != 0)
    throw ad::ShapeError("edge_softmax_aggregate: shape mismatch");
  const Eigen::Index k = messages.cols() / heads;
  const ad::Mat<Scalar>& s = scores.value();
  const ad::Mat<Scalar>& m = messages.value();
  ad::Mat<Scalar> alpha = ad::Mat<Scalar>::Zero(nn, heads);
  for (int i = 0; i < n; ++i)
    for (Eigen::Index h = 0; h < heads; ++h) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (int j = 0; j < n; ++j)
        if (j != i) mx = std::max(mx, s(i * n + j, h));
      Scalar z = 0;
      for (int j = 0; j < n; ++j)
        if (j != i) z += alpha(i * n + j, h) = std::exp(s(i * n + j, h) - mx);
      for (int j = 0; j < n; ++j)
        if (j != i) alpha(i * n + j, h) /= z;
    }
  ad::Mat<Scalar> out = ad::Mat<Scalar>::Zero(n, messages.cols());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      for (Eigen::Index h = 0; h < heads; ++h)
        out.row(i).segment(h * k, k) += alpha(i * n + j, h) * m.row(i * n + j).segment(h * k, k);
    }
  if (alpha_out) alpha_out->push_back(alpha);
  ad::Tape<Scalar>& t = *scores.tape;
  return t.record(std::move(out), {scores, messages},
                  [&t, scores, messages, alpha = std::move(alpha), n, heads, k](const ad::Mat<Scalar>& g) {
                    const ad::Mat<Scalar>& m = messages.value();
                    const Eigen::Index nn = static_cast<Eigen::Index>(n) * n;
                    ad::Mat<Scalar> gm = ad::Mat<Scalar>::Zero(nn, m.cols());
                    ad::Mat<Scalar> gs = ad::Mat<Scalar>::Zero(nn, heads);
                    for (int i = 0; i < n; ++i)
                      for (Eigen::Index h = 0; h < heads; ++h) {
                        const auto gi = g.row(i).segment(h * k, k);
                        Scalar weighted = 0;
                        for (int j = 0; j < n; ++j) {
                          if (j == i) continue;
                          const Eigen::Index r = i * n + j;
                          gm.row(r).segment(h * k, k) = alpha(r, h) * gi;
                          gs(r, h) = gi.dot(m.row(r).segment(h * k, k));
                          weighted += alpha(r, h) * gs(r, h);
                        }
                        for (int j = 0; j < n; ++j) {
                          if (j == i) continue;
                          const Eigen::Index r = i * n + j;
                          gs(r, h) = alpha(r, h) * (gs(r, h) - weighted);
                        }
                      }
                    if (t.requires_grad(scores)) t.accumulate(scores, gs);
                    if (t.requires_grad(messages)) t.accumulate(messages, gm);
                  });
}

/// Nodes are mean-pooled context rows projected to d_node; edges are the
/// projected edge inputs.
template <typename Scalar>
DocumentGraph<Scalar> init_graph(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store,
                                 const backbone::FusedContext<Scalar>& ctx, const GraphInputs<Scalar>& in) {
  using backbone::param;
  if (in.pool.cols() != ctx.features.rows()) throw ad::ShapeError("init_graph: spans do not cover the context rows");
  ad::Var<Scalar> pooled = ad::sparse_left(in.pool, ctx.features);
  DocumentGraph<Scalar> g;
  g.n = in.n;
  g.nodes = ad::linear(pooled, param(tape, store, "graph/node_w"), param(tape, store, "graph/node_b"));
  g.edges = ad::linear(tape.constant(in.edge_in), param(tape, store, "graph/edge_w"), param(tape, store, "graph/edge_b"));
  return g;
}

/// g_ij = Wg [v_i | e_ij | v_j], computed as three partial products.
template <typename Scalar>
ad::Var<Scalar> triplet_features(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const DocumentGraph<Scalar>& g,
                                 int layer) {
  ad::Var<Scalar> wg = backbone::param(tape, store, "graph/layer" + std::to_string(layer) + "/Wg");
  const Eigen::Index dn = g.nodes.cols(), de = g.edges.cols();
  if (wg.rows() != 2 * dn + de) throw ad::ShapeError("triplet_features: Wg rows != 2 d_node + d_edge");
  ad::Var<Scalar> a = ad::matmul(g.nodes, ad::slice_rows(wg, 0, dn));
  ad::Var<Scalar> e = ad::matmul(g.edges, ad::slice_rows(wg, dn, de));
  ad::Var<Scalar> b = ad::matmul(g.nodes, ad::slice_rows(wg, dn + de, dn));
  return pair_broadcast_add(a, e, b);
}

template <typename Scalar>
DocumentGraph<Scalar> gnn_layer(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const GraphConfig& cfg,
                                const DocumentGraph<Scalar>& g, int layer,
                                std::vector<ad::Mat<Scalar>>* alpha_out = nullptr) {
  using backbone::param;
  const std::string p = "graph/layer" + std::to_string(layer);
  ad::Var<Scalar> trip = triplet_features(tape, store, g, layer);
  DocumentGraph<Scalar> out;
  out.n = g.n;
  out.edges = ad::relu(ad::matmul(trip, param(tape, store, p + "/We")));
  ad::Var<Scalar> scores = ad::leaky_relu(ad::matmul(trip, param(tape, store, p + "/attn")), Scalar(0.2));
  ad::Var<Scalar> messages = ad::matmul(trip, param(tape, store, p + "/Wv"));
  if (scores.cols() != cfg.num_heads) throw ad::ShapeError("gnn_layer: attention heads != graph.num_heads");
  out.nodes = ad::relu(edge_softmax_aggregate(scores, messages, g.n, alpha_out)) + g.nodes;
  return out;
}

template <typename Scalar>
DocumentGraph<Scalar> run_gnn(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const GraphConfig& cfg,
                              DocumentGraph<Scalar> g) {
  for (int l = 0; l < cfg.num_layers; ++l) g = gnn_layer(tape, store, cfg, g, l);
  return g;
}

}  // namespace matchvie::graphnet
