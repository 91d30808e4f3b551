#include "matchvie/inference.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace matchvie::inference {

std::vector<MatchedPair> match_pairs(const ad::Mat<double>& probs, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("inference.threshold must lie in (0, 1)");
  if (probs.rows() != probs.cols()) throw ad::ShapeError("match_pairs: probabilities must be N x N");
  const int n = static_cast<int>(probs.rows());
  std::vector<std::optional<MatchedPair>> best(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      if (i == j || !(probs(i, j) > threshold)) continue;
      auto& b = best[static_cast<std::size_t>(j)];
      if (!b || probs(i, j) > b->confidence) b = MatchedPair{i, j, probs(i, j)};
    }
  std::vector<bool> is_value(static_cast<std::size_t>(n), false);
  for (const auto& b : best)
    if (b) is_value[static_cast<std::size_t>(b->value)] = true;
  std::vector<MatchedPair> out;
  for (const auto& b : best)
    if (b && !is_value[static_cast<std::size_t>(b->key)]) out.push_back(*b);
  std::sort(out.begin(), out.end(),
            [](const MatchedPair& a, const MatchedPair& b) { return std::tie(a.key, a.value) < std::tie(b.key, b.value); });
  return out;
}

std::string normalize_key(const std::string& text) {
  std::string out;
  for (unsigned char c : text) {
    if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) continue;
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  return out;
}

void LookupTable::add(const std::string& category, const std::string& phrase) {
  const std::string key = normalize_key(phrase);
  if (key.empty()) return;
  auto [it, inserted] = index_.emplace(key, category);
  if (!inserted) return;
  phrases_[category].push_back(key);
}

std::string LookupTable::lookup(const std::string& key_text) const {
  const auto it = index_.find(normalize_key(key_text));
  return it == index_.end() ? kUnknown : it->second;
}

nlohmann::json LookupTable::to_json() const { return phrases_; }

LookupTable LookupTable::from_json(const nlohmann::json& j) {
  LookupTable t;
  for (const auto& [category, list] : j.items())
    for (const auto& phrase : list) t.add(category, phrase.get<std::string>());
  return t;
}

LookupTable LookupTable::build(const std::vector<Document>& docs, const std::vector<std::string>& categories) {
  const std::set<std::string> wanted(categories.begin(), categories.end());
  std::map<std::string, std::map<std::string, int>> counts;
  for (const auto& d : docs)
    for (const auto& l : d.links()) {
      const auto& value = d.segments[static_cast<std::size_t>(l.value)];
      if (!wanted.count(value.label)) continue;
      const std::string key = normalize_key(d.segments[static_cast<std::size_t>(l.key)].text);
      if (!key.empty()) ++counts[key][value.label];
    }
  LookupTable t;
  for (const auto& [phrase, by_cat] : counts) {
    const auto best = std::max_element(by_cat.begin(), by_cat.end(), [](const auto& a, const auto& b) {
      return a.second < b.second || (a.second == b.second && a.first > b.first);
    });
    t.add(best->first, phrase);
  }
  return t;
}

Eigen::RowVectorXd CharCountEncoder::encode(const std::string& text) const {
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(128);
  for (unsigned char c : text)
    if (c < 128) v(std::tolower(c)) += 1;
  return v;
}

std::string map_key_semantic(const std::string& key_text, const std::vector<std::string>& categories,
                             const TextEncoder& encoder) {
  if (categories.empty()) throw std::invalid_argument("map_key_semantic: empty category list");
  const Eigen::RowVectorXd k = encoder.encode(key_text);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double d = (encoder.encode(categories[c]) - k).norm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return categories[best];
}

std::string category_phrase(const std::string& category) {
  std::string out = category;
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

std::string role_name(Record::Role role) {
  switch (role) {
    case Record::Role::Key: return "key";
    case Record::Role::Value: return "value";
    case Record::Role::Standalone: return "standalone";
    case Record::Role::Unassigned: return "unassigned";
  }
  return "unassigned";
}

std::vector<int> ExtractionResult::unassigned() const {
  std::vector<int> out;
  for (const auto& r : records)
    if (r.role == Record::Role::Unassigned) out.push_back(r.segment_id);
  return out;
}

std::string ExtractionResult::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : records) {
    nlohmann::json j = {{"segment_id", r.segment_id},
                        {"role", role_name(r.role)},
                        {"category", r.category.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.category)},
                        {"text", r.text},
                        {"confidence", r.confidence},
                        {"paired_with", r.paired_with}};
    if (!r.spans.empty()) {
      nlohmann::json spans = nlohmann::json::array();
      for (std::size_t k = 0; k < r.spans.size(); ++k)
        spans.push_back({{"category", r.span_categories[k]}, {"start", r.spans[k].start}, {"end", r.spans[k].end}});
      j["spans"] = spans;
    }
    os << j.dump() << '\n';
  }
  return os.str();
}

std::string dominant_category(const SegmentTags& tags, const heads::TagScheme& scheme) {
  std::map<int, int> covered;
  for (const auto& s : tags.spans) covered[s.category] += s.end - s.start;
  int best = -1, best_len = 0;
  for (const auto& s : tags.spans)
    if (covered[s.category] > best_len) {
      best = s.category;
      best_len = covered[s.category];
    }
  return best < 0 ? std::string() : scheme.categories()[static_cast<std::size_t>(best)];
}

ExtractionResult merge_predictions(const Document& doc, const std::vector<MatchedPair>& pairs,
                                   const std::vector<SegmentTags>& tags, const heads::TagScheme& scheme,
                                   const CategoryMapper& mapper, const MergeOptions& options) {
  const std::size_t n = doc.segments.size();
  if (tags.size() != n) throw std::invalid_argument("merge_predictions: one tag set per segment required");
  ExtractionResult out;
  out.pairs = pairs;
  out.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out.records[i];
    r.segment_id = static_cast<int>(i);
    r.text = doc.segments[i].text;
  }
  for (const auto& p : pairs) {
    auto& key = out.records[static_cast<std::size_t>(p.key)];
    key.role = Record::Role::Key;
    key.category = options.key_label;
    key.paired_with.push_back(p.value);
    key.confidence = std::max(key.confidence, p.confidence);
  }
  for (const auto& p : pairs) {
    auto& v = out.records[static_cast<std::size_t>(p.value)];
    v.role = Record::Role::Value;
    v.paired_with = {p.key};
    v.confidence = p.confidence;
    v.category = mapper.map(doc.segments[static_cast<std::size_t>(p.key)].text);
    if (v.category == kUnknown) {
      const std::string fallback = dominant_category(tags[static_cast<std::size_t>(p.value)], scheme);
      if (!fallback.empty()) v.category = fallback;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out.records[i];
    if (r.role != Record::Role::Unassigned) continue;
    if (tags[i].spans.empty()) continue;
    r.role = Record::Role::Standalone;
    r.category = dominant_category(tags[i], scheme);
    r.confidence = tags[i].confidence;
    r.spans = tags[i].spans;
    for (const auto& s : r.spans) r.span_categories.push_back(scheme.categories()[static_cast<std::size_t>(s.category)]);
  }
  return out;
}

}  // namespace matchvie::inference
