#include <doctest.h>

#include "crf_oracle.hpp"
#include "gradcheck.hpp"
#include "matchvie/heads.hpp"

#include <cmath>
#include <random>

using namespace matchvie;
using namespace matchvie::heads;
using ad::Mat;
using ad::Var;

TEST_CASE("edge relevancy probabilities") {
  ad::ParamStore<double> store;
  InitRng rng(1);
  add_edge_params(store, 3, rng);
  const Mat<double> edges = uniform_matrix<double>(9, 3, 1.0, rng);
  SUBCASE("zero MLP gives 0.5 everywhere") {
    for (const char* n : {"heads/edge_w1", "heads/edge_b1", "heads/edge_w2", "heads/edge_b2"})
      store.get(n).value.setZero();
    ad::Tape<double> t;
    const Mat<double> p = match_probabilities(edge_logits(t, store, t.constant(edges)).value(), 3);
    CHECK((p.array() == 0.5).all());
  }
  SUBCASE("equal logits and monotone gap") {
    Mat<double> logits(4, 2);
    logits << 1, 1, 0, 1, 0, 2, 0, 3;
    const Mat<double> p = match_probabilities(logits, 2);
    CHECK(p(0, 0) == 0.5);
    CHECK(p(0, 1) < p(1, 0));
    CHECK(p(1, 0) < p(1, 1));
  }
}

TEST_CASE("focal loss scalar values") {
  const FocalParams f;
  CHECK(focal_term(1.0, 1, f) == 0.0);
  CHECK(focal_term(0.9, 1, f) == doctest::Approx(0.75 * 0.01 * -std::log(0.9)).epsilon(1e-12));
  CHECK(focal_term(0.9, 1, f) == doctest::Approx(7.902e-4).epsilon(1e-3));
  CHECK(focal_term(0.9, 0, f) == doctest::Approx(0.46628).epsilon(1e-4));
  SUBCASE("gamma 0 is alpha-weighted cross-entropy") {
    const FocalParams ce{0.75, 0.25, 0.0};
    CHECK(focal_term(0.3, 1, ce) == doctest::Approx(-0.75 * std::log(0.3)));
    CHECK(focal_term(0.3, 0, ce) == doctest::Approx(-0.25 * std::log(0.7)));
  }
  SUBCASE("non-negative and decreasing in p for positives") {
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 100; ++k) {
      const double p = k / 100.0;
      CHECK(focal_term(p, 0, f) >= 0);
      const double v = focal_term(p, 1, f);
      CHECK(v >= 0);
      CHECK(v <= prev);
      prev = v;
    }
  }
  SUBCASE("matrix form averages off-diagonal entries and checks shape") {
    Mat<double> p(2, 2), y(2, 2);
    p << 0.99, 0.9, 0.9, 0.01;
    y << 1, 1, 0, 0;
    CHECK(focal_loss(p, y, f) == doctest::Approx(0.5 * (focal_term(0.9, 1, f) + focal_term(0.9, 0, f))));
    CHECK_THROWS_AS(focal_loss(p, Mat<double>(Mat<double>::Zero(3, 3)), f), ad::ShapeError);
  }
}

TEST_CASE("focal loss from logits: value and gradient") {
  ad::ParamStore<double> store;
  InitRng rng(2);
  store.add("z", uniform_matrix<double>(16, 2, 2.0, rng));
  Mat<double> labels = Mat<double>::Zero(4, 4);
  labels(0, 1) = labels(2, 3) = labels(2, 0) = 1;
  for (const FocalParams& f : {FocalParams{}, FocalParams::cross_entropy(), FocalParams{0.6, 0.4, 1.5}}) {
    ad::Tape<double> t;
    const double v = focal_loss(t.param(store.get("z")), labels, f).scalar();
    CHECK(v == doctest::Approx(focal_loss(match_probabilities(store.get("z").value, 4), labels, f)).epsilon(1e-12));
    const auto errs = testing::gradient_errors(
        store, [&](ad::Tape<double>& tp) { return focal_loss(tp.param(store.get("z")), labels, f); }, {"z"});
    CHECK(errs.at("z") < 1e-6);
  }
  SUBCASE("single node has no edges to score") {
    ad::Tape<double> t;
    CHECK(focal_loss(t.constant(Mat<double>::Zero(1, 2)), Mat<double>(Mat<double>::Zero(1, 1)), FocalParams{})
              .scalar() == 0.0);
  }
}

TEST_CASE("BIOES scheme") {
  const TagScheme s({"total", "date"});
  CHECK(s.num_tags() == 9);
  CHECK(s.tag(TagScheme::kB, 1) == 5);
  CHECK(s.tag(TagScheme::kS, 0) == 4);
  CHECK(TagScheme::category(7) == 1);
  CHECK(TagScheme::kind(7) == TagScheme::kE);
  CHECK(s.encode_segment(1, 0) == std::vector<int>{4});
  CHECK(s.encode_segment(3, 1) == std::vector<int>{5, 6, 7});
  CHECK(s.encode_segment(2, -1) == std::vector<int>{0, 0});

  SUBCASE("decode inverts encode on well-formed sequences") {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<Span> spans;
      int pos = 0;
      const int length = 12;
      while (pos < length) {
        const int gap = static_cast<int>(rng() % 3);
        const int len = 1 + static_cast<int>(rng() % 3);
        if (pos + gap + len > length) break;
        spans.push_back({static_cast<int>(rng() % 2), pos + gap, pos + gap + len});
        pos += gap + len;
      }
      CHECK(TagScheme::decode(s.encode_spans(length, spans)) == spans);
    }
  }
  SUBCASE("malformed runs become one span per same-category run") {
    // I-total I-total : no begin
    CHECK(TagScheme::decode({2, 2}) == std::vector<Span>{{0, 0, 2}});
    // B-total E-date : category changes, each run repaired separately
    CHECK(TagScheme::decode({1, 7}) == std::vector<Span>{{0, 0, 1}, {1, 1, 2}});
    // S-total B-total I-total : trailing B without E
    CHECK(TagScheme::decode({0, 4, 1, 2, 0}) == std::vector<Span>{{0, 1, 4}});
    // S-date S-date is well formed
    CHECK(TagScheme::decode({8, 8}) == std::vector<Span>{{1, 0, 1}, {1, 1, 2}});
  }
}

TEST_CASE("BIOES emissions") {
  ad::ParamStore<double> store;
  InitRng rng(3);
  add_tag_params(store, 4, 9, rng);
  const Mat<double> ctx = uniform_matrix<double>(3, 4, 1.0, rng);
  SUBCASE("shape and zero-weight uniformity") {
    ad::Tape<double> t;
    CHECK(bioes_logits(t, store, t.constant(ctx)).rows() == 3);
    CHECK(bioes_logits(t, store, t.constant(ctx)).cols() == 9);
    for (const char* n : {"heads/tag_w1", "heads/tag_w2", "heads/tag_b2"}) store.get(n).value.setZero();
    ad::Tape<double> t2;
    const Mat<double> p = ad::softmax_rows(bioes_logits(t2, store, t2.constant(ctx))).value();
    CHECK((p.array() - 1.0 / 9).abs().maxCoeff() < 1e-15);
  }
  SUBCASE("MLP and CRF gradients match finite differences") {
    store.get("crf/transitions").value = uniform_matrix<double>(9, 9, 0.5, rng);
    store.get("crf/start").value = uniform_matrix<double>(1, 9, 0.5, rng);
    store.get("crf/end").value = uniform_matrix<double>(1, 9, 0.5, rng);
    const std::vector<int> gold{1, 3, 8};
    auto loss = [&](ad::Tape<double>& t) {
      Var<double> em = bioes_logits(t, store, t.constant(ctx));
      return crf_nll(em, {{0, 2}, {2, 3}}, gold, t.param(store.get("crf/transitions")),
                     t.param(store.get("crf/start")), t.param(store.get("crf/end")));
    };
    std::vector<std::string> names;
    for (std::size_t i = 0; i < store.size(); ++i) names.push_back(store[i].name);
    for (const auto& [name, err] : testing::gradient_errors(store, loss, names, 1e-5, 200)) {
      INFO(name);
      CHECK(err < 1e-4);
    }
  }
}

namespace {

struct RandomCrf {
  Mat<double> em, trans, start, end;
  CrfView<double> view() const { return {trans, start, end}; }
};

RandomCrf random_crf(int L, int T, InitRng& rng) {
  return {uniform_matrix<double>(L, T, 2.0, rng), uniform_matrix<double>(T, T, 2.0, rng),
          uniform_matrix<double>(1, T, 2.0, rng), uniform_matrix<double>(1, T, 2.0, rng)};
}

}  // namespace

TEST_CASE("CRF against path enumeration") {
  InitRng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int L = 1 + static_cast<int>(rng.below(5)), T = 1 + static_cast<int>(rng.below(4));
    const RandomCrf c = random_crf(L, T, rng);
    const auto oracle = testing::enumerate_paths(c.em, c.trans, c.start, c.end);
    CHECK(std::abs(crf_log_partition(c.em, c.view()) - oracle.log_z) < 1e-9);
    const auto path = crf_viterbi(c.em, c.view());
    CHECK(path == oracle.best);
    std::vector<int> gold(static_cast<std::size_t>(L));
    for (auto& g : gold) g = static_cast<int>(rng.below(static_cast<std::uint64_t>(T)));
    const double nll = crf_nll(c.em, gold, c.view());
    CHECK(nll >= -1e-12);
    CHECK(crf_path_score(c.em, path, c.view()) >= crf_path_score(c.em, gold, c.view()));
  }
}

TEST_CASE("CRF closed forms") {
  SUBCASE("zero potentials give L ln T") {
    const Mat<double> z = Mat<double>::Zero(4, 5), tr = Mat<double>::Zero(5, 5), s = Mat<double>::Zero(1, 5);
    CHECK(crf_nll(z, {0, 1, 2, 3}, CrfView<double>{tr, s, s}) == doctest::Approx(4 * std::log(5.0)));
    CHECK(crf_viterbi(z, CrfView<double>{tr, s, s}) == std::vector<int>{0, 0, 0, 0});
  }
  SUBCASE("single step is a softmax") {
    InitRng rng(4);
    const RandomCrf c = random_crf(1, 4, rng);
    const Mat<double> logits = c.em + c.start + c.end;
    const double lse = std::log(logits.array().exp().sum());
    CHECK(crf_nll(c.em, {2}, c.view()) == doctest::Approx(lse - logits(0, 2)));
  }
  SUBCASE("dominant emissions select their path") {
    Mat<double> em = Mat<double>::Zero(3, 3);
    em(0, 2) = em(1, 0) = em(2, 1) = 10;
    const Mat<double> tr = Mat<double>::Zero(3, 3), s = Mat<double>::Zero(1, 3);
    CHECK(crf_viterbi(em, CrfView<double>{tr, s, s}) == std::vector<int>{2, 0, 1});
  }
  SUBCASE("gold length mismatch") {
    const Mat<double> z = Mat<double>::Zero(2, 2), s = Mat<double>::Zero(1, 2);
    CHECK_THROWS_WITH(crf_nll(z, {0}, CrfView<double>{z, s, s}), doctest::Contains("gold length"));
  }
  SUBCASE("chains are independent and decode separately") {
    InitRng rng(6);
    const RandomCrf c = random_crf(5, 3, rng);
    ad::Tape<double> t;
    const std::vector<int> gold{0, 1, 2, 2, 1};
    const double joint = crf_nll(t.constant(c.em), {{0, 2}, {2, 2}, {2, 5}}, gold, t.constant(c.trans),
                                 t.constant(c.start), t.constant(c.end))
                             .scalar();
    const double split = crf_nll(Mat<double>(c.em.topRows(2)), {0, 1}, c.view()) +
                         crf_nll(Mat<double>(c.em.bottomRows(3)), {2, 2, 1}, c.view());
    CHECK(joint == doctest::Approx(split).epsilon(1e-12));
    const auto tags = decode_chains(c.em, {{0, 2}, {2, 5}}, c.view());
    const auto a = crf_viterbi(Mat<double>(c.em.topRows(2)), c.view());
    const auto b = crf_viterbi(Mat<double>(c.em.bottomRows(3)), c.view());
    CHECK(std::vector<int>(tags.begin(), tags.begin() + 2) == a);
    CHECK(std::vector<int>(tags.begin() + 2, tags.end()) == b);
  }
}
