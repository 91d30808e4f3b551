#include <doctest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "matchvie/graphnet.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <random>
#include <set>

using namespace matchvie;
using namespace matchvie::graphnet;
using ad::Mat;
using ad::Var;

namespace {

TextSegment segment_at(int id, double cx, double cy, double w, double h) {
  TextSegment s;
  s.id = id;
  s.text = "x";
  s.box = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  s.tokens = {{"x", s.box}};
  return s;
}

std::vector<double> as_vector(const std::array<double, 8>& a) { return {a.begin(), a.end()}; }

struct Model {
  Document doc = testing::tiny_document();
  Vocabulary vocab = build_vocabulary({doc}, 1, {.add_characters = true});
  backbone::BackboneConfig bcfg;
  GraphConfig gcfg;
  ad::ParamStore<double> store;

  explicit Model(GraphConfig g = small_graph()) : gcfg(g) {
    bcfg.embed_dim = 4;
    bcfg.num_heads = 2;
    bcfg.conv_channels = {2};
    InitRng rng(21);
    backbone::add_params(store, bcfg, vocab.size(), rng);
    add_params(store, gcfg, bcfg.embed_dim, rng);
  }
  static GraphConfig small_graph() {
    GraphConfig g;
    g.d_node = 4;
    g.d_edge = 3;
    g.num_heads = 2;
    return g;
  }
  DocumentGraph<double> initial(ad::Tape<double>& t, const Document& d) {
    // The tape references these constants until backward has run.
    inputs = std::make_unique<backbone::BackboneInputs<double>>(backbone::prepare_inputs<double>(d, vocab, bcfg));
    const auto ctx = backbone::encode(t, store, bcfg, *inputs);
    graph_in = std::make_unique<GraphInputs<double>>(prepare_graph<double>(d, ctx.segment_spans, gcfg));
    return init_graph(t, store, ctx, *graph_in);
  }
  std::unique_ptr<backbone::BackboneInputs<double>> inputs;
  std::unique_ptr<GraphInputs<double>> graph_in;
};

}  // namespace

TEST_CASE("num2vec digit slots") {
  CHECK(as_vector(num2vec(12.34)) == std::vector<double>{0, 0, 0.1, 0.2, 0.3, 0.4, 0, 0});
  CHECK(as_vector(num2vec(0)) == std::vector<double>(8, 0.0));
  CHECK(as_vector(num2vec(-3.5)) == std::vector<double>{0, 0, 0, -0.3, -0.5, 0, 0, 0});
  CHECK(as_vector(num2vec(12345)) == std::vector<double>(8, 0.9));
  CHECK(as_vector(num2vec(-9999.99999)) == std::vector<double>(8, -0.9));
  CHECK(as_vector(num2vec(0.00004)) == std::vector<double>(8, 0.0));
  CHECK_THROWS(num2vec(std::numeric_limits<double>::quiet_NaN()));
  CHECK_THROWS(num2vec(std::numeric_limits<double>::infinity()));
}

TEST_CASE("num2vec range, oddness and injectivity on random inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-12000, 12000);
  std::set<std::vector<double>> seen;
  std::set<long long> keys;
  int violations = 0;
  for (int k = 0; k < 10000; ++k) {
    const double x = k % 2 ? u(rng) : u(rng) / 1000;
    const auto v = num2vec(x), w = num2vec(-x);
    for (int s = 0; s < 8; ++s) {
      if (std::abs(v[static_cast<std::size_t>(s)]) > 0.9 + 1e-12) ++violations;
      if (v[static_cast<std::size_t>(s)] != -w[static_cast<std::size_t>(s)]) ++violations;
    }
    if (std::abs(x) < 9999.99995) {
      const long long key = std::llround(x * 1e4);
      if (keys.insert(key).second != seen.insert(as_vector(v)).second) ++violations;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("edge features") {
  const auto unit_a = segment_at(0, 0.5, 0.5, 1, 1), unit_b = segment_at(1, 0.5, 0.5, 1, 1);
  const auto e0 = edge_features(unit_a, unit_b);
  CHECK(std::vector<double>(e0.begin(), e0.end()) == std::vector<double>{0, 0, 1, 1, 1});
  const auto i = segment_at(0, 10, 10, 20, 10), j = segment_at(1, 40, 10, 10, 5);
  const auto e = edge_features(i, j);
  CHECK(std::vector<double>(e.begin(), e.end()) == std::vector<double>{3, 0, 2, 0.5, 1});
  const auto self = edge_features(i, i);
  CHECK(std::vector<double>(self.begin(), self.end()) == std::vector<double>{0, 0, 2, 1, 2});
  SUBCASE("offsets are antisymmetric for equal heights") {
    const auto a = segment_at(0, 3, 7, 4, 2), b = segment_at(1, 11, 2, 9, 2);
    CHECK(edge_features(a, b)[0] == -edge_features(b, a)[0]);
    CHECK(edge_features(a, b)[1] == -edge_features(b, a)[1]);
  }
  SUBCASE("zero height names the segment") {
    auto flat = segment_at(4, 5, 5, 3, 0);
    CHECK_THROWS_WITH(edge_features(flat, i), doctest::Contains("segment 4"));
  }
}

TEST_CASE("graph initialisation") {
  Model m;
  ad::Tape<double> t;
  const auto g = m.initial(t, m.doc);
  CHECK(g.n == 3);
  CHECK(g.nodes.rows() == 3);
  CHECK(g.edges.rows() == 9);
  CHECK(g.edges.cols() == 3);
  SUBCASE("single-token segment is its projected context row") {
    const auto in = backbone::prepare_inputs<double>(m.doc, m.vocab, m.bcfg);
    ad::Tape<double> t2;
    const Mat<double> ctx = backbone::encode(t2, m.store, m.bcfg, in).features.value();
    Mat<double> proj = ctx * m.store.get("graph/node_w").value;
    proj.rowwise() += m.store.get("graph/node_b").value.row(0);
    CHECK((g.nodes.value().row(0) - proj.row(0)).norm() < 1e-12);
    CHECK((g.nodes.value().row(2) - proj.bottomRows(3).colwise().mean()).norm() < 1e-12);
  }
  SUBCASE("uniform translation leaves edges unchanged") {
    Document moved = m.doc;
    for (auto& s : moved.segments) {
      s.box = {s.box.x0 + 5, s.box.y0 + 3, s.box.x1 + 5, s.box.y1 + 3};
      for (auto& tok : s.tokens) tok.box = {tok.box.x0 + 5, tok.box.y0 + 3, tok.box.x1 + 5, tok.box.y1 + 3};
    }
    const auto a = prepare_graph<double>(m.doc, {{0, 1}, {1, 2}, {2, 5}}, m.gcfg);
    const auto b = prepare_graph<double>(moved, {{0, 1}, {1, 2}, {2, 5}}, m.gcfg);
    CHECK(a.edge_in == b.edge_in);
  }
  SUBCASE("raw geometry replaces digit encoding when disabled") {
    GraphConfig raw = m.gcfg;
    raw.use_num2vec = false;
    const auto in = prepare_graph<double>(m.doc, {{0, 1}, {1, 2}, {2, 5}}, raw);
    CHECK(in.edge_in.cols() == 5);
    const auto f = edge_features(m.doc.segments[0], m.doc.segments[1]);
    for (int k = 0; k < 5; ++k) CHECK(in.edge_in(1, k) == f[static_cast<std::size_t>(k)]);
  }
}

TEST_CASE("triplet features") {
  SUBCASE("scalar arithmetic with unit weights") {
    ad::ParamStore<double> store;
    store.add("graph/layer0/Wg", Mat<double>::Ones(3, 1));
    ad::Tape<double> t;
    Mat<double> v(2, 1), e = Mat<double>::Zero(4, 1);
    v << 2, 3;
    e(1, 0) = 5;  // e_12
    const DocumentGraph<double> g{t.constant(v), t.constant(e), 2};
    const Mat<double> trip = triplet_features(t, store, g, 0).value();
    CHECK(trip(1, 0) == 10);
    CHECK(trip(2, 0) == 3 + 0 + 2);
  }
  Model m;
  ad::Tape<double> t;
  const auto g = m.initial(t, m.doc);
  SUBCASE("ordered concatenation is asymmetric") {
    const Mat<double> trip = triplet_features(t, m.store, g, 0).value();
    CHECK((trip.row(1) - trip.row(3)).norm() > 1e-6);
  }
  SUBCASE("zero weights") {
    m.store.get("graph/layer0/Wg").value.setZero();
    CHECK(triplet_features(t, m.store, g, 0).value().isZero());
  }
  SUBCASE("matches explicit concatenation") {
    const Mat<double> trip = triplet_features(t, m.store, g, 0).value();
    const Mat<double>& wg = m.store.get("graph/layer0/Wg").value;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        Eigen::RowVectorXd cat(11);
        cat << g.nodes.value().row(i), g.edges.value().row(i * 3 + j), g.nodes.value().row(j);
        CHECK((cat * wg - trip.row(i * 3 + j)).norm() < 1e-12);
      }
  }
}

TEST_CASE("graph layer") {
  Model m;
  ad::Tape<double> t;
  const auto g = m.initial(t, m.doc);
  SUBCASE("attention is a distribution over other nodes") {
    std::vector<Mat<double>> alpha;
    gnn_layer(t, m.store, m.gcfg, g, 0, &alpha);
    REQUIRE(alpha.size() == 1);
    for (int i = 0; i < 3; ++i)
      for (int h = 0; h < 2; ++h) {
        double s = 0;
        for (int j = 0; j < 3; ++j) s += alpha[0](i * 3 + j, h);
        CHECK(s == doctest::Approx(1.0));
        CHECK(alpha[0](i * 3 + i, h) == 0.0);
      }
  }
  SUBCASE("equal triplets give uniform attention") {
    m.store.get("graph/layer0/Wg").value.setZero();
    std::vector<Mat<double>> alpha;
    gnn_layer(t, m.store, m.gcfg, g, 0, &alpha);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) CHECK(alpha[0](i * 3 + j, 0) == doctest::Approx(0.5));
  }
  SUBCASE("single node keeps its features") {
    Document one = m.doc;
    one.segments.resize(1);
    one.segments[0].links.clear();
    ad::Tape<double> t1;
    const auto g1 = m.initial(t1, one);
    const auto out = gnn_layer(t1, m.store, m.gcfg, g1, 0);
    CHECK(out.nodes.value() == g1.nodes.value());
    CHECK(out.edges.rows() == 1);
  }
  SUBCASE("zero layers is the identity, two layers compose") {
    GraphConfig none = m.gcfg;
    none.num_layers = 0;
    const auto same = run_gnn(t, m.store, none, g);
    CHECK(same.nodes.value() == g.nodes.value());
    CHECK(same.edges.value() == g.edges.value());
    const auto two = run_gnn(t, m.store, m.gcfg, g);
    const auto manual = gnn_layer(t, m.store, m.gcfg, gnn_layer(t, m.store, m.gcfg, g, 0), 1);
    CHECK(two.nodes.value() == manual.nodes.value());
    CHECK(two.edges.value() == manual.edges.value());
  }
}

TEST_CASE("gradients through two graph layers and the backbone") {
  Model m;
  InitRng rng(30);
  const Mat<double> wn = uniform_matrix<double>(3, 4, 1.0, rng);
  const Mat<double> we = uniform_matrix<double>(9, 3, 1.0, rng);
  auto loss = [&](ad::Tape<double>& t) {
    const auto g = run_gnn(t, m.store, m.gcfg, m.initial(t, m.doc));
    return ad::sum(ad::cmul(ad::tanh(g.nodes), t.constant(wn))) + ad::sum(ad::cmul(g.edges, t.constant(we)));
  };
  std::vector<std::string> names;
  for (std::size_t i = 0; i < m.store.size(); ++i) names.push_back(m.store[i].name);
  for (const auto& [name, err] : testing::gradient_errors(m.store, loss, names)) {
    INFO(name);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("relabelling segments permutes nodes and edges") {
  Model m;
  m.doc.segments.push_back(m.doc.segments[1]);
  auto& extra = m.doc.segments.back();
  extra.id = 3;
  extra.links.clear();
  extra.text = "9.10";
  extra.tokens[0].text = "9.10";
  for (auto* b : {&extra.box, &extra.tokens[0].box}) *b = {b->x0 + 2, b->y0 + 18, b->x1 + 2, b->y1 + 18};
  ad::Tape<double> t;
  const auto base = run_gnn(t, m.store, m.gcfg, m.initial(t, m.doc));
  std::vector<int> perm{0, 1, 2, 3};
  std::mt19937 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Document d = m.doc;
    for (int k = 0; k < 4; ++k) {
      d.segments[static_cast<std::size_t>(k)] = m.doc.segments[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
      d.segments[static_cast<std::size_t>(k)].id = k;
      d.segments[static_cast<std::size_t>(k)].links.clear();
    }
    ad::Tape<double> tp;
    const auto out = run_gnn(tp, m.store, m.gcfg, m.initial(tp, d));
    double worst = 0;
    for (int i = 0; i < 4; ++i) {
      const int pi = perm[static_cast<std::size_t>(i)];
      worst = std::max(worst, (out.nodes.value().row(i) - base.nodes.value().row(pi)).cwiseAbs().maxCoeff());
      for (int j = 0; j < 4; ++j) {
        const int pj = perm[static_cast<std::size_t>(j)];
        worst = std::max(worst,
                         (out.edges.value().row(i * 4 + j) - base.edges.value().row(pi * 4 + pj)).cwiseAbs().maxCoeff());
      }
    }
    CHECK(worst < 1e-9);
  }
}
