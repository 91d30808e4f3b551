#include <doctest.h>

#include "matchvie/docmodel.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

using namespace matchvie;
using nlohmann::json;

namespace {

const std::filesystem::path kFixtures = MATCHVIE_FIXTURE_DIR;

json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

TextSegment seg(int id, double x0, double y0, double x1, double y1, std::string text = "t") {
  TextSegment s;
  s.id = id;
  s.text = text;
  s.box = {x0, y0, x1, y1};
  s.tokens.push_back({text, s.box});
  return s;
}

std::vector<std::string> texts(const Document& d) {
  std::vector<std::string> out;
  for (const auto& s : d.segments) out.push_back(s.text);
  return out;
}

}  // namespace

TEST_CASE("FUNSD fixture loads with labels, words and links") {
  const Document d = load_funsd_document(kFixtures / "funsd" / "0001_form.json");
  REQUIRE(d.segments.size() == 6);
  CHECK(d.segments[0].label == "question");
  CHECK(d.segments[2].label == "header");
  CHECK(d.segments[5].label == "other");
  CHECK(d.segments[2].tokens.size() == 3);
  CHECK(d.segments[2].tokens[1].text == "SALES");
  CHECK(d.segments[2].tokens[1].box == BBox{166, 140, 216, 154});
  CHECK(d.segments[5].links.empty());
  CHECK(d.segments[0].links == std::vector<Link>{{0, 1}});
  CHECK(d.segments[1].links == std::vector<Link>{{0, 1}});
  CHECK(d.links() == std::vector<Link>{{0, 1}, {3, 4}});
  CHECK_FALSE(d.explicit_page_size);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("FUNSD parse then serialize is the identity on bundled fixtures") {
  for (const char* name : {"0001_form.json", "0002_form.json"}) {
    const json original = read_json(kFixtures / "funsd" / name);
    const json written = to_funsd_json(parse_funsd(original, name));
    CHECK(written == original);
  }
}

TEST_CASE("a link listed on one endpoint appears on both") {
  const json j = json::parse(R"({"form": [
    {"id": 0, "text": "Name:", "box": [0, 0, 40, 10], "label": "question",
     "words": [{"text": "Name:", "box": [0, 0, 40, 10]}], "linking": [[0, 1]]},
    {"id": 1, "text": "Ann", "box": [50, 0, 80, 10], "label": "answer",
     "words": [{"text": "Ann", "box": [50, 0, 80, 10]}], "linking": []}]})");
  const Document d = parse_funsd(j, "two");
  CHECK(d.segments[0].links == std::vector<Link>{{0, 1}});
  CHECK(d.segments[1].links == std::vector<Link>{{0, 1}});
  // Oracle: serialize and parse again; the link structure is a fixed point.
  const Document again = parse_funsd(to_funsd_json(d), "two");
  CHECK(again.segments == d.segments);
  CHECK(to_funsd_json(again)["form"][1]["linking"] == json::array({json::array({0, 1})}));
}

TEST_CASE("FUNSD errors name the offending field or segment") {
  SUBCASE("missing box") {
    const json j = json::parse(R"({"form": [{"id": 0, "text": "a", "label": "other", "words": [], "linking": []}]})");
    try {
      parse_funsd(j, "x");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("form[0].box") != std::string::npos);
    }
  }
  SUBCASE("reversed box") {
    const json j = json::parse(
        R"({"form": [{"id": 5, "text": "a", "box": [10, 0, 5, 10], "label": "other", "words": [], "linking": []}]})");
    try {
      parse_funsd(j, "x");
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("segment 5") != std::string::npos);
    }
  }
  SUBCASE("malformed JSON file") {
    const auto p = std::filesystem::temp_directory_path() / "matchvie_bad.json";
    std::ofstream(p) << "{\"form\": [";
    CHECK_THROWS_AS(load_funsd_document(p), ParseError);
    std::filesystem::remove(p);
  }
  SUBCASE("link to unknown id") {
    const json j = json::parse(
        R"({"form": [{"id": 0, "text": "a", "box": [0, 0, 5, 10], "label": "other", "words": [], "linking": [[0, 9]]}]})");
    CHECK_THROWS_AS(parse_funsd(j, "x"), ValidationError);
  }
}

TEST_CASE("reading order: simple cases") {
  SUBCASE("vertically stacked") {
    Document d;
    d.segments = {seg(0, 10, 100, 60, 110, "low"), seg(1, 10, 10, 60, 20, "high")};
    CHECK(texts(reading_order_sort(d)) == std::vector<std::string>{"high", "low"});
  }
  SUBCASE("same row") {
    Document d;
    d.segments = {seg(0, 200, 10, 260, 20, "right"), seg(1, 10, 12, 60, 22, "left")};
    CHECK(texts(reading_order_sort(d)) == std::vector<std::string>{"left", "right"});
  }
  SUBCASE("empty document passes through") {
    Document d;
    CHECK(reading_order_sort(d).segments.empty());
  }
}

TEST_CASE("reading order on a jittered 3x3 grid matches row-major enumeration") {
  std::vector<std::string> expected;
  Document d;
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> jitter(-2.0, 2.0);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const std::string name = "r" + std::to_string(r) + "c" + std::to_string(c);
      expected.push_back(name);
      const double y = 20 + 30 * r + jitter(rng);
      const double x = 10 + 100 * c + jitter(rng);
      d.segments.push_back(seg(0, x, y, x + 60, y + 12, name));
    }
  std::shuffle(d.segments.begin(), d.segments.end(), rng);
  for (std::size_t i = 0; i < d.segments.size(); ++i) d.segments[i].id = static_cast<int>(i);
  CHECK(texts(reading_order_sort(d)) == expected);
}

TEST_CASE("reading order is an idempotent permutation that carries links") {
  GenConfig g;
  g.render_images = false;
  for (int k = 0; k < 20; ++k) {
    Document d = generate_synthetic_document(g, 11, k);
    // Scramble segment order and ids.
    std::mt19937 rng(static_cast<unsigned>(k));
    std::vector<int> perm(d.segments.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::shuffle(perm.begin(), perm.end(), rng);
    Document scrambled = d;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      TextSegment s = d.segments[i];
      s.id = perm[i];
      for (auto& l : s.links) l = {perm[static_cast<std::size_t>(l.key)], perm[static_cast<std::size_t>(l.value)]};
      scrambled.segments[static_cast<std::size_t>(perm[i])] = s;
    }
    const Document once = reading_order_sort(scrambled);
    const Document twice = reading_order_sort(once);
    CHECK(once.segments == twice.segments);
    CHECK(once.segments == d.segments);
    std::multiset<std::string> a, b;
    for (const auto& s : scrambled.segments) a.insert(s.text);
    for (const auto& s : once.segments) b.insert(s.text);
    CHECK(a == b);
    // Link structure: same (key text, value text) pairs.
    auto pairs = [](const Document& doc) {
      std::multiset<std::pair<std::string, std::string>> out;
      for (const auto& l : doc.links())
        out.emplace(doc.segments[static_cast<std::size_t>(l.key)].text,
                    doc.segments[static_cast<std::size_t>(l.value)].text);
      return out;
    };
    CHECK(pairs(once) == pairs(scrambled));
    CHECK_NOTHROW(once.validate());
  }
}

TEST_CASE("vocabulary ordering, threshold and round trip") {
  Document d;
  TextSegment s;
  s.tokens = {{"a", {}}, {"a", {}}, {"b", {}}};
  d.segments.push_back(s);

  const Vocabulary v1 = build_vocabulary({d}, 1);
  CHECK(v1.id("a") == 2);
  CHECK(v1.id("b") == 3);
  CHECK(v1.size() == 4);

  const Vocabulary v2 = build_vocabulary({d}, 2);
  CHECK(v2.id("a") == 2);
  CHECK(v2.id("b") == Vocabulary::kUnk);
  CHECK(v2.size() == 3);

  const auto path = std::filesystem::temp_directory_path() / "matchvie_vocab.tsv";
  v1.save(path);
  const Vocabulary loaded = Vocabulary::load(path);
  CHECK(loaded.map() == v1.map());
  std::filesystem::remove(path);

  const Vocabulary empty = build_vocabulary({}, 1);
  CHECK(empty.size() == 2);
  CHECK_THROWS_AS(build_vocabulary({d}, 0), ConfigError);
}

TEST_CASE("vocabulary ties break lexicographically and digits fall back to characters") {
  Document d;
  TextSegment s;
  s.tokens = {{"zeta", {}}, {"alpha", {}}, {"12.50", {}}};
  d.segments.push_back(s);
  const Vocabulary v = build_vocabulary({d}, 1, {.add_characters = true});
  CHECK_FALSE(v.contains("12.50"));
  CHECK(v.lookup_word("zeta") == std::vector<int>{v.id("zeta")});
  CHECK(v.lookup_word("12.50") ==
        std::vector<int>{v.id("1"), v.id("2"), v.id("."), v.id("5"), v.id("0")});
  CHECK(v.lookup_word("\xE2\x82\xAC") == std::vector<int>{Vocabulary::kUnk});
  // "a" occurs three times (alpha x2 + zeta x1) and comes first.
  CHECK(v.id("a") == 2);
}

TEST_CASE("synthetic corpus hits the configured key-value ratio") {
  GenConfig g;
  g.num_docs = 300;
  g.kv_ratio = 0.75;
  g.render_images = false;
  const auto docs = generate_synthetic_corpus(g, 5);
  REQUIRE(docs.size() == 300);
  CHECK(std::abs(kv_ratio(docs) - 0.75) <= 0.03);

  const auto cats = synthetic_categories(g.num_categories);
  const std::set<std::string> cat_set(cats.begin(), cats.end());
  for (const auto& d : docs) {
    CHECK_NOTHROW(d.validate());
    for (const auto& l : d.links()) {
      CHECK(d.segments[static_cast<std::size_t>(l.key)].label == "key");
      CHECK(cat_set.count(d.segments[static_cast<std::size_t>(l.value)].label) == 1);
    }
  }
}

TEST_CASE("synthetic generation is deterministic and order independent") {
  GenConfig g;
  g.num_docs = 8;
  const auto a = generate_synthetic_corpus(g, 42);
  const auto b = generate_synthetic_corpus(g, 42);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(to_funsd_json(a[k]).dump() == to_funsd_json(b[k]).dump());
    CHECK(a[k].image == b[k].image);
  }
  const Document alone = generate_synthetic_document(g, 42, 5);
  CHECK(to_funsd_json(alone).dump() == to_funsd_json(a[5]).dump());
  const auto c = generate_synthetic_corpus(g, 43);
  CHECK(to_funsd_json(a[0]).dump() != to_funsd_json(c[0]).dump());
}

TEST_CASE("kv_ratio 0 yields no links and only identifiable standalone categories") {
  GenConfig g;
  g.num_docs = 30;
  g.kv_ratio = 0.0;
  g.render_images = false;
  for (const auto& d : generate_synthetic_corpus(g, 1)) {
    CHECK(d.links().empty());
    for (const auto& s : d.segments) {
      CHECK(s.label != "key");
      if (s.label != "other") CHECK((s.label == "company" || s.label == "phone"));
    }
  }
}

TEST_CASE("generator config validation") {
  GenConfig g;
  g.kv_ratio = 1.5;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  try {
    g.validate();
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("kv_ratio") != std::string::npos);
  }
  g.kv_ratio = -0.1;
  CHECK_THROWS_AS(generate_synthetic_corpus(g, 1), ConfigError);
}

TEST_CASE("rendered page is white with dark glyph cells inside token boxes") {
  GenConfig g;
  const Document d = generate_synthetic_document(g, 3, 0);
  REQUIRE(d.image.has_value());
  CHECK(d.image->height == 100);
  CHECK(d.image->width == 75);
  const auto dark = std::count(d.image->pixels.begin(), d.image->pixels.end(), 0.0f);
  CHECK(dark > 0);
  CHECK(static_cast<std::size_t>(dark) < d.image->pixels.size() / 2);

  const auto p = std::filesystem::temp_directory_path() / "matchvie_page.pgm";
  write_pgm(*d.image, p);
  CHECK(read_pgm(p) == *d.image);
  std::filesystem::remove(p);
}
