// Merging the two prediction branches into one extraction per document:
// thresholded key->value pairs take priority, their key text decides the
// value's category, and remaining segments fall back to entity tagging.
#pragma once

#include "matchvie/ad/tape.hpp"
#include "matchvie/docmodel.hpp"
#include "matchvie/heads.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace matchvie::inference {

inline const std::string kUnknown = "unknown";

struct MatchedPair {
  int key = 0;
  int value = 0;
  double confidence = 0;
  bool operator==(const MatchedPair&) const = default;
};

/// Directed pairs i->j with p(i, j) > threshold. Each value keeps its
/// highest-scoring key (lower id on ties); pairs whose key is itself a kept
/// value are dropped. Sorted by (key, value).
std::vector<MatchedPair> match_pairs(const ad::Mat<double>& probs, double threshold = 0.5);

/// Lowercase, with ASCII punctuation and whitespace removed.
std::string normalize_key(const std::string& text);

/// Category -> normalised key phrases.
class LookupTable {
 public:
  void add(const std::string& category, const std::string& phrase);
  /// Category of a key text, or "unknown".
  std::string lookup(const std::string& key_text) const;
  const std::map<std::string, std::vector<std::string>>& phrases() const { return phrases_; }

  nlohmann::json to_json() const;
  static LookupTable from_json(const nlohmann::json& j);

  /// Phrases of keys linked to labelled values. A phrase seen with several
  /// categories goes to its most frequent one (alphabetical on ties).
  static LookupTable build(const std::vector<Document>& docs, const std::vector<std::string>& categories);

 private:
  std::map<std::string, std::vector<std::string>> phrases_;
  std::map<std::string, std::string> index_;
};

/// Fixed-length text representation used by the similarity mapper.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Eigen::RowVectorXd encode(const std::string& text) const = 0;
};

/// Bag of lowercase character counts; a transparent encoder for tests and a
/// baseline.
class CharCountEncoder : public TextEncoder {
 public:
  Eigen::RowVectorXd encode(const std::string& text) const override;
};

/// Category whose encoding is nearest (L2) to the key's; first on ties.
std::string map_key_semantic(const std::string& key_text, const std::vector<std::string>& categories,
                             const TextEncoder& encoder);

/// Human-readable form of a category identifier ("due_date" -> "due date").
std::string category_phrase(const std::string& category);

class CategoryMapper {
 public:
  virtual ~CategoryMapper() = default;
  virtual std::string map(const std::string& key_text) const = 0;
};

class LookupMapper : public CategoryMapper {
 public:
  explicit LookupMapper(LookupTable table) : table_(std::move(table)) {}
  std::string map(const std::string& key_text) const override { return table_.lookup(key_text); }

 private:
  LookupTable table_;
};

class SemanticMapper : public CategoryMapper {
 public:
  SemanticMapper(std::shared_ptr<const TextEncoder> encoder, std::vector<std::string> categories)
      : encoder_(std::move(encoder)), categories_(std::move(categories)) {}
  std::string map(const std::string& key_text) const override {
    std::vector<std::string> phrases;
    for (const auto& c : categories_) phrases.push_back(category_phrase(c));
    const std::string hit = map_key_semantic(key_text, phrases, *encoder_);
    for (std::size_t k = 0; k < phrases.size(); ++k)
      if (phrases[k] == hit) return categories_[k];
    return kUnknown;
  }

 private:
  std::shared_ptr<const TextEncoder> encoder_;
  std::vector<std::string> categories_;
};

/// Every value maps to one fixed label (FUNSD-style "answer").
class FixedMapper : public CategoryMapper {
 public:
  explicit FixedMapper(std::string label) : label_(std::move(label)) {}
  std::string map(const std::string&) const override { return label_; }

 private:
  std::string label_;
};

/// Entity-branch output for one segment.
struct SegmentTags {
  std::vector<heads::Span> spans;  // token offsets relative to the segment
  double confidence = 0;
};

struct Record {
  enum class Role { Key, Value, Standalone, Unassigned };
  int segment_id = 0;
  Role role = Role::Unassigned;
  std::string category;
  std::string text;
  double confidence = 0;
  std::vector<int> paired_with;
  std::vector<heads::Span> spans;  // standalone only, categories resolved via `span_categories`
  std::vector<std::string> span_categories;
};

std::string role_name(Record::Role role);

struct ExtractionResult {
  std::vector<MatchedPair> pairs;
  std::vector<Record> records;  // one per segment, in segment order

  std::vector<int> unassigned() const;
  /// Line-delimited JSON records.
  std::string to_jsonl() const;
};

struct MergeOptions {
  std::string key_label = "key";  // category given to key-role segments
};

/// Category covering the most tokens of a segment's spans; first span on
/// ties. Empty when the segment has no spans.
std::string dominant_category(const SegmentTags& tags, const heads::TagScheme& scheme);

ExtractionResult merge_predictions(const Document& doc, const std::vector<MatchedPair>& pairs,
                                   const std::vector<SegmentTags>& tags, const heads::TagScheme& scheme,
                                   const CategoryMapper& mapper, const MergeOptions& options = {});

}  // namespace matchvie::inference
