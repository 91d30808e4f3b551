// Tiny hand-built documents shared by the unit and acceptance suites.
#pragma once

#include "matchvie/docmodel.hpp"

#include <random>
#include <string>
#include <vector>

namespace matchvie::testing {

/// 3 segments / 5 tokens on a 32 x 32 page with a random 8 x 8 image.
/// Segment 0 ("Total:") links to segment 1 ("4.90").
inline Document tiny_document(unsigned seed = 7) {
  Document d;
  d.id = "tiny";
  d.page_width = 32;
  d.page_height = 32;
  auto make = [&](int id, std::vector<std::pair<std::string, BBox>> words, std::string label) {
    TextSegment s;
    s.id = id;
    s.label = std::move(label);
    for (auto& [w, b] : words) {
      s.text += (s.text.empty() ? "" : " ") + w;
      s.box = s.tokens.empty() ? b : s.box.united(b);
      s.tokens.push_back({w, b});
    }
    return s;
  };
  d.segments.push_back(make(0, {{"Total:", {2, 3, 10, 7}}}, "key"));
  d.segments.push_back(make(1, {{"4.90", {13, 3.5, 19, 7.5}}}, "total"));
  d.segments.push_back(make(2, {{"Acme", {3, 15, 9, 19}}, {"Foods", {10, 15, 17, 19}}, {"Ltd", {18, 15, 23, 20}}},
                            "company"));
  d.segments[0].links = {{0, 1}};
  d.segments[1].links = {{0, 1}};
  Image img(8, 8, 1);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& p : img.pixels) p = u(rng);
  d.image = img;
  return d;
}

}  // namespace matchvie::testing
