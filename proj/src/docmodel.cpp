#include "matchvie/docmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace matchvie {

bool BBox::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && x0 <= x1 && y0 <= y1;
}

bool BBox::contains(const BBox& o) const { return x0 <= o.x0 && y0 <= o.y0 && o.x1 <= x1 && o.y1 <= y1; }

BBox BBox::united(const BBox& o) const {
  return {std::min(x0, o.x0), std::min(y0, o.y0), std::max(x1, o.x1), std::max(y1, o.y1)};
}

std::size_t Document::total_tokens() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.tokens.size();
  return n;
}

std::vector<Link> Document::links() const {
  std::set<Link> all;
  for (const auto& s : segments)
    for (const auto& l : s.links) all.insert(l);
  return {all.begin(), all.end()};
}

void Document::validate() const {
  const int n = static_cast<int>(segments.size());
  for (int i = 0; i < n; ++i) {
    const auto& s = segments[static_cast<std::size_t>(i)];
    const std::string where = "document " + id + ", segment " + std::to_string(s.id);
    if (s.id != i) throw ValidationError(where + ": ids must be 0..N-1 in order");
    if (!s.box.valid()) throw ValidationError(where + ": invalid box");
    if (page_width > 0 && page_height > 0 &&
        (s.box.x0 < 0 || s.box.y0 < 0 || s.box.x1 > page_width || s.box.y1 > page_height))
      throw ValidationError(where + ": box outside page");
    for (const auto& t : s.tokens) {
      if (t.text.empty()) throw ValidationError(where + ": empty token text");
      if (!t.box.valid()) throw ValidationError(where + ": invalid token box");
      if (!s.box.contains(t.box)) throw ValidationError(where + ": token box outside segment box");
    }
    for (const auto& l : s.links) {
      if (l.key == l.value) throw ValidationError(where + ": self-link");
      if (l.key < 0 || l.key >= n || l.value < 0 || l.value >= n)
        throw ValidationError(where + ": link endpoint out of range");
      if (l.key != i && l.value != i) throw ValidationError(where + ": link does not involve segment");
    }
  }
}

double kv_ratio(const std::vector<Document>& docs, std::string_view key_label) {
  std::size_t entities = 0;
  std::size_t linked = 0;
  for (const auto& d : docs) {
    std::set<int> values;
    for (const auto& l : d.links()) values.insert(l.value);
    for (const auto& s : d.segments) {
      if (s.label == "other" || s.label == key_label) continue;
      ++entities;
      if (values.count(s.id)) ++linked;
    }
  }
  return entities == 0 ? 0.0 : static_cast<double>(linked) / static_cast<double>(entities);
}

// ---------------------------------------------------------------------------

Document reading_order_sort(const Document& doc) {
  Document out = doc;
  const std::size_t n = doc.segments.size();
  if (n == 0) return out;

  std::vector<double> heights;
  heights.reserve(n);
  for (const auto& s : doc.segments) heights.push_back(s.box.height());
  std::sort(heights.begin(), heights.end());
  const double median = n % 2 ? heights[n / 2] : 0.5 * (heights[n / 2 - 1] + heights[n / 2]);
  const double tol = 0.5 * median;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto& segs = doc.segments;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& sa = segs[a].box;
    const auto& sb = segs[b].box;
    if (sa.cy() != sb.cy()) return sa.cy() < sb.cy();
    if (sa.x0 != sb.x0) return sa.x0 < sb.x0;
    return a < b;
  });

  std::vector<std::size_t> sorted;
  sorted.reserve(n);
  std::size_t band_start = 0;
  auto flush = [&](std::size_t end) {
    std::vector<std::size_t> band(order.begin() + static_cast<long>(band_start), order.begin() + static_cast<long>(end));
    std::sort(band.begin(), band.end(), [&](std::size_t a, std::size_t b) {
      const auto& sa = segs[a].box;
      const auto& sb = segs[b].box;
      if (sa.x0 != sb.x0) return sa.x0 < sb.x0;
      if (sa.cy() != sb.cy()) return sa.cy() < sb.cy();
      return a < b;
    });
    sorted.insert(sorted.end(), band.begin(), band.end());
  };
  double anchor = segs[order[0]].box.cy();
  for (std::size_t k = 1; k < n; ++k) {
    const double cy = segs[order[k]].box.cy();
    if (cy - anchor > tol) {
      flush(k);
      band_start = k;
      anchor = cy;
    }
  }
  flush(n);

  std::vector<int> remap(n);
  for (std::size_t k = 0; k < n; ++k) remap[sorted[k]] = static_cast<int>(k);
  out.segments.clear();
  for (std::size_t k = 0; k < n; ++k) {
    TextSegment s = segs[sorted[k]];
    s.id = static_cast<int>(k);
    for (auto& l : s.links) l = {remap[static_cast<std::size_t>(l.key)], remap[static_cast<std::size_t>(l.value)]};
    out.segments.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

namespace {
bool has_digit(std::string_view w) {
  return std::any_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; });
}
}  // namespace

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

int Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::lookup_word(const std::string& word) const {
  if (!has_digit(word)) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return {it->second};
  }
  std::vector<int> out;
  bool any_known = false;
  for (const auto& ch : utf8_chars(word)) {
    const int i = id(ch);
    any_known = any_known || i != kUnk;
    out.push_back(i);
  }
  if (!any_known) {
    // Digit-bearing words can still be whole entries in vocabularies built
    // without character fallback.
    auto it = ids_.find(word);
    return {it == ids_.end() ? kUnk : it->second};
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write vocabulary: " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) f << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read vocabulary: " + path.string());
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError("vocabulary line " + std::to_string(lineno) + ": missing tab");
    const std::string token = line.substr(0, tab);
    int id = 0;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("vocabulary line " + std::to_string(lineno) + ": bad id");
    }
    if (id != static_cast<int>(v.tokens_.size()) || v.ids_.count(token))
      throw ParseError("vocabulary line " + std::to_string(lineno) + ": ids must be unique and consecutive");
    v.add(token);
  }
  if (v.tokens_.size() < 2) throw ParseError("vocabulary missing reserved entries");
  return v;
}

Vocabulary build_vocabulary(const std::vector<Document>& docs, int min_freq, VocabOptions options) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& d : docs)
    for (const auto& s : d.segments)
      for (const auto& t : s.tokens) {
        if (options.add_characters) {
          for (const auto& ch : utf8_chars(t.text)) ++counts[ch];
          if (has_digit(t.text)) continue;
        }
        ++counts[t.text];
      }
  std::vector<std::pair<std::string, std::size_t>> entries(counts.begin(), counts.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, c] : entries)
    if (c >= static_cast<std::size_t>(min_freq) && tok != "<pad>" && tok != "<unk>") v.add(tok);
  return v;
}

}  // namespace matchvie
