#include <doctest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "matchvie/backbone.hpp"

#include <numeric>

using namespace matchvie;
using namespace matchvie::backbone;
using ad::Mat;
using ad::Var;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.embed_dim = 4;
  c.num_heads = 2;
  c.conv_channels = {2};
  c.conv_kernel = 3;
  c.conv_stride = 2;
  c.roi_h = 2;
  c.roi_w = 2;
  return c;
}

struct Setup {
  Document doc = testing::tiny_document();
  Vocabulary vocab = build_vocabulary({doc}, 1, {.add_characters = true});
  BackboneConfig cfg = tiny_config();
  ad::ParamStore<double> store;
  BackboneInputs<double> in;

  explicit Setup(BackboneConfig c = tiny_config()) : cfg(std::move(c)) {
    InitRng rng(3);
    add_params(store, cfg, vocab.size(), rng);
    in = prepare_inputs<double>(doc, vocab, cfg);
  }
};

}  // namespace

TEST_CASE("token embeddings: zero table, repeated tokens, gradient") {
  Setup s;
  SUBCASE("zero table gives zero rows") {
    s.store.get("backbone/token_table").value.setZero();
    ad::Tape<double> t;
    CHECK(embed_tokens(t, s.store, s.in).value().isZero());
  }
  SUBCASE("same token twice gives identical rows") {
    Document d = s.doc;
    d.segments[2].tokens[2].text = "Acme";
    const auto in = prepare_inputs<double>(d, s.vocab, s.cfg);
    ad::Tape<double> t;
    const Mat<double> e = embed_tokens(t, s.store, in).value();
    CHECK(e.row(2) == e.row(4));
    CHECK(e.rows() == 5);
    CHECK(e.cols() == 4);
  }
  SUBCASE("unknown word maps to its characters, or UNK") {
    Document d = s.doc;
    d.segments[2].tokens[0].text = "\xE2\x82\xAC";
    const auto in = prepare_inputs<double>(d, s.vocab, s.cfg);
    ad::Tape<double> t;
    const Mat<double> e = embed_tokens(t, s.store, in).value();
    CHECK(e.row(2) == s.store.get("backbone/token_table").value.row(Vocabulary::kUnk));
  }
  SUBCASE("table gradient matches central differences (h = 1e-3)") {
    InitRng rng(9);
    const Mat<double> w = uniform_matrix<double>(5, 4, 1.0, rng);
    auto loss = [&](ad::Tape<double>& t) {
      Var<double> e = embed_tokens(t, s.store, s.in);
      return ad::sum(ad::cmul(ad::cmul(e, e), t.constant(w)));
    };
    const auto errs = testing::gradient_errors(s.store, loss, {"backbone/token_table"}, 1e-3, 1000);
    CHECK(errs.at("backbone/token_table") < 1e-4);
  }
}

TEST_CASE("position embeddings") {
  Setup s;
  SUBCASE("zero weights") {
    s.store.get("backbone/pos_w").value.setZero();
    ad::Tape<double> t;
    CHECK(embed_positions(t, s.store, s.in).value().isZero());
  }
  SUBCASE("identical boxes give identical rows") {
    Document d = s.doc;
    d.segments[2].tokens[1].box = d.segments[2].tokens[0].box;
    const auto in = prepare_inputs<double>(d, s.vocab, s.cfg);
    ad::Tape<double> t;
    const Mat<double> p = embed_positions(t, s.store, in).value();
    CHECK(p.row(2) == p.row(3));
  }
  SUBCASE("direct matrix product on normalised coordinates") {
    BackboneConfig c = tiny_config();
    c.embed_dim = 2;
    c.num_heads = 1;
    Setup s2(c);
    // Rows of the d x 4 map [1,0,0,0], [0,1,0,0], stored transposed.
    Mat<double> w = Mat<double>::Zero(4, 2);
    w(0, 0) = 1;
    w(1, 1) = 1;
    s2.store.get("backbone/pos_w").value = w;
    Document d = s2.doc;
    d.page_width = 40;
    d.page_height = 20;
    d.segments[0].tokens[0].box = {20, 5, 30, 20};  // (0.5, 0.25, 0.75, 1.0)
    d.segments[0].box = d.segments[0].tokens[0].box;
    const auto in = prepare_inputs<double>(d, s2.vocab, s2.cfg);
    ad::Tape<double> t;
    const Mat<double> p = embed_positions(t, s2.store, in).value();
    CHECK(p(0, 0) == doctest::Approx(0.5));
    CHECK(p(0, 1) == doctest::Approx(0.25));
  }
}

TEST_CASE("visual embeddings") {
  SUBCASE("constant-zero image through a bias-free net is zero") {
    Setup s;
    s.doc.image->pixels.assign(s.doc.image->pixels.size(), 0.0f);
    s.in = prepare_inputs<double>(s.doc, s.vocab, s.cfg);
    ad::Tape<double> t;
    CHECK(embed_visual(t, s.store, s.cfg, s.in).value().isZero());
  }
  SUBCASE("identical boxes give identical rows") {
    Setup s;
    s.doc.segments[2].tokens[1].box = s.doc.segments[2].tokens[0].box;
    s.in = prepare_inputs<double>(s.doc, s.vocab, s.cfg);
    ad::Tape<double> t;
    const Mat<double> v = embed_visual(t, s.store, s.cfg, s.in).value();
    CHECK(v.row(2) == v.row(3));
    CHECK_FALSE(v.isZero());
  }
  SUBCASE("uniform 0.5 patch pools to 0.5 through a 1x1 identity net") {
    BackboneConfig c = tiny_config();
    c.conv_channels = {1};
    c.conv_kernel = 1;
    c.conv_stride = 1;
    c.roi_h = 1;
    c.roi_w = 1;
    Setup s(c);
    s.store.get("backbone/conv0/w").value.setOnes();
    s.store.get("backbone/conv0/b").value.setZero();
    Document d = s.doc;
    d.page_width = 4;
    d.page_height = 4;
    Image img(4, 4, 1, 1.0f);
    for (int r = 0; r < 2; ++r)
      for (int col = 0; col < 2; ++col) img.at(r, col) = 0.5f;
    d.image = img;
    for (auto& seg : d.segments)
      for (auto& tok : seg.tokens) tok.box = {0, 0, 2, 2};
    const auto in = prepare_inputs<double>(d, s.vocab, c);
    ad::Tape<double> t;
    const Mat<double> pooled = roi_align(conv_features(t, s.store, c, in), in).value();
    REQUIRE(pooled.cols() == 1);
    for (Eigen::Index r = 0; r < pooled.rows(); ++r) CHECK(pooled(r, 0) == doctest::Approx(0.5));
  }
  SUBCASE("missing image while enabled is a configuration error") {
    Setup s;
    s.doc.image.reset();
    s.in = prepare_inputs<double>(s.doc, s.vocab, s.cfg);
    ad::Tape<double> t;
    CHECK_THROWS_AS(embed_visual(t, s.store, s.cfg, s.in), ConfigError);
  }
  SUBCASE("disabled visual branch ignores the image") {
    BackboneConfig c = tiny_config();
    c.use_visual = false;
    Setup s(c);
    ad::Tape<double> t1, t2;
    const Mat<double> a = encode(t1, s.store, c, s.in).features.value();
    Document d = s.doc;
    d.image = testing::tiny_document(99).image;
    const auto in2 = prepare_inputs<double>(d, s.vocab, c);
    const Mat<double> b = encode(t2, s.store, c, in2).features.value();
    CHECK(a == b);
    d.image.reset();
    ad::Tape<double> t3;
    CHECK(encode(t3, s.store, c, prepare_inputs<double>(d, s.vocab, c)).features.value() == a);
  }
}

TEST_CASE("fusion by layer normalisation") {
  Setup s;
  ad::Tape<double> t;
  InitRng rng(4);
  const Mat<double> T = uniform_matrix<double>(5, 4, 1.0, rng);
  const Mat<double> P = uniform_matrix<double>(5, 4, 1.0, rng);
  const Mat<double> I = uniform_matrix<double>(5, 4, 1.0, rng);
  SUBCASE("rows are standardised before gain and bias") {
    const Mat<double> f = fuse_qkv(t, s.store, t.constant(T), t.constant(P), t.constant(I)).value();
    for (Eigen::Index r = 0; r < 5; ++r) {
      CHECK(f.row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(f.row(r).array().square().mean() == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  SUBCASE("zero visual input and zero bias reduce to LayerNorm(P + T)") {
    const Mat<double> f =
        fuse_qkv(t, s.store, t.constant(T), t.constant(P), t.constant(Mat<double>::Zero(5, 4))).value();
    const Mat<double> g = ad::layer_norm_rows(t.constant(Mat<double>(P + T)), t.constant(Mat<double>::Ones(1, 4)),
                                              t.constant(Mat<double>::Zero(1, 4)), 1e-5)
                              .value();
    CHECK((f - g).norm() < 1e-12);
  }
  SUBCASE("hand-computed 2 x 4 fixture") {
    Mat<double> T2(2, 4), P2 = Mat<double>::Zero(2, 4), I2 = Mat<double>::Zero(2, 4);
    T2 << 1, 2, 3, 4, 2, 2, 2, 6;
    const Mat<double> f = fuse_qkv(t, s.store, t.constant(T2), t.constant(P2), t.constant(I2)).value();
    // Row 0: mean 2.5, var 1.25. Row 1: mean 3, var 3.
    const double s0 = std::sqrt(1.25 + 1e-5), s1 = std::sqrt(3.0 + 1e-5);
    const double expected[2][4] = {{-1.5 / s0, -0.5 / s0, 0.5 / s0, 1.5 / s0}, {-1 / s1, -1 / s1, -1 / s1, 3 / s1}};
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c) CHECK(f(r, c) == doctest::Approx(expected[r][c]).epsilon(1e-12));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(fuse_qkv(t, s.store, t.constant(T), t.constant(P), t.constant(Mat<double>::Zero(4, 4))),
                    ad::ShapeError);
  }
}

TEST_CASE("self-attention context") {
  Setup s;
  InitRng rng(5);
  SUBCASE("single token takes the value path") {
    const Mat<double> x = uniform_matrix<double>(1, 4, 1.0, rng);
    ad::Tape<double> t;
    const Mat<double> out = self_attention_context(t, s.store, s.cfg, t.constant(x), {{0, 1}}).features.value();
    const auto& st = s.store;
    const Mat<double> v = (x * st.get("backbone/attn0/wv").value) + st.get("backbone/attn0/bv").value;
    const Mat<double> expected = v * st.get("backbone/attn0/wo").value + st.get("backbone/attn0/bo").value;
    CHECK((out - expected).norm() < 1e-12);
  }
  SUBCASE("attention rows sum to one") {
    const Mat<double> x = uniform_matrix<double>(5, 4, 1.0, rng);
    ad::Tape<double> t;
    std::vector<Mat<double>> weights;
    attention_layer(t, s.store, s.cfg, t.constant(x), 0, &weights);
    REQUIRE(weights.size() == 2);
    for (const auto& w : weights)
      for (Eigen::Index r = 0; r < w.rows(); ++r) CHECK(w.row(r).sum() == doctest::Approx(1.0));
  }
  SUBCASE("permuting tokens permutes output rows") {
    const Mat<double> x = uniform_matrix<double>(5, 4, 1.0, rng);
    const std::vector<int> perm = {3, 0, 4, 1, 2};
    Mat<double> xp(5, 4);
    for (int r = 0; r < 5; ++r) xp.row(r) = x.row(perm[static_cast<std::size_t>(r)]);
    ad::Tape<double> t;
    const Mat<double> a = self_attention_context(t, s.store, s.cfg, t.constant(x), {}).features.value();
    const Mat<double> b = self_attention_context(t, s.store, s.cfg, t.constant(xp), {}).features.value();
    for (int r = 0; r < 5; ++r) CHECK((b.row(r) - a.row(perm[static_cast<std::size_t>(r)])).norm() < 1e-12);
  }
}

TEST_CASE("every backbone parameter group matches finite differences") {
  Setup s;
  InitRng rng(8);
  const Mat<double> w = uniform_matrix<double>(5, 4, 1.0, rng);
  auto loss = [&](ad::Tape<double>& t) {
    Var<double> c = encode(t, s.store, s.cfg, s.in).features;
    return ad::sum(ad::cmul(ad::tanh(c), t.constant(w)));
  };
  std::vector<std::string> names;
  for (std::size_t i = 0; i < s.store.size(); ++i) names.push_back(s.store[i].name);
  for (const auto& [name, err] : testing::gradient_errors(s.store, loss, names)) {
    INFO(name);
    CHECK(err < 1e-4);
  }
}
