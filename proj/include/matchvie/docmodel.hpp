// Document and annotation model, FUNSD-format I/O, reading order,
// vocabulary, and the synthetic form generator.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace matchvie {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  bool valid() const;
  bool contains(const BBox& other) const;
  BBox united(const BBox& other) const;
  bool operator==(const BBox&) const = default;
};

struct Token {
  std::string text;
  BBox box;
  bool operator==(const Token&) const = default;
};

/// Directed key -> value link between two segment ids.
struct Link {
  int key = 0;
  int value = 0;
  auto operator<=>(const Link&) const = default;
};

struct TextSegment {
  int id = 0;
  std::string text;
  std::vector<Token> tokens;
  BBox box;
  std::string label = "other";
  std::vector<Link> links;
  bool operator==(const TextSegment&) const = default;
};

/// Row-major H x W x C pixel grid, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}
  float& at(int r, int col, int ch = 0) { return pixels[(static_cast<std::size_t>(r) * width + col) * channels + ch]; }
  float at(int r, int col, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(r) * width + col) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

struct Document {
  std::string id;
  std::vector<TextSegment> segments;
  double page_width = 0;
  double page_height = 0;
  /// False when the page size was inferred (plain FUNSD files carry none);
  /// only explicit sizes are written back.
  bool explicit_page_size = true;
  std::optional<Image> image;

  std::size_t total_tokens() const;
  /// Unique directed links, sorted.
  std::vector<Link> links() const;
  /// Throws ValidationError on any broken invariant.
  void validate() const;
};

struct CorpusStats {
  std::size_t num_train = 0;
  std::size_t num_test = 0;
  std::size_t num_categories = 0;
  double kv_ratio = 0;
};

/// Fraction of entity segments (labels other than "other" and `key_label`)
/// that are the value end of some link.
double kv_ratio(const std::vector<Document>& docs, std::string_view key_label = "key");

// ---------------------------------------------------------------------------
// FUNSD annotation schema

Document parse_funsd(const nlohmann::json& j, std::string id, double page_width = 0, double page_height = 0);
nlohmann::json to_funsd_json(const Document& doc);
Document load_funsd_document(const std::filesystem::path& path);
void save_funsd_document(const Document& doc, const std::filesystem::path& path);
/// Every *.json in `dir`, sorted by file name. A sibling .pgm image is
/// attached when present.
std::vector<Document> load_funsd_directory(const std::filesystem::path& dir);

Image read_pgm(const std::filesystem::path& path);
void write_pgm(const Image& image, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// Groups segments into rows by centre height (tolerance 0.5 x median
/// segment height), orders rows top to bottom and segments left to right,
/// then renumbers ids 0..N-1 and remaps links.
Document reading_order_sort(const Document& doc);

// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary();

  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  int add(const std::string& token);

  /// Rows of the embedding table used for one word: the word's own id when
  /// known and digit-free, otherwise the ids of its characters.
  std::vector<int> lookup_word(const std::string& word) const;

  const std::unordered_map<std::string, int>& map() const { return ids_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct VocabOptions {
  /// Also count every UTF-8 character of every word, so that unknown words
  /// can fall back to character rows.
  bool add_characters = false;
};

Vocabulary build_vocabulary(const std::vector<Document>& docs, int min_freq, VocabOptions options = {});

/// Splits a word into UTF-8 code points.
std::vector<std::string> utf8_chars(std::string_view word);

// ---------------------------------------------------------------------------
// Synthetic forms

struct GenConfig {
  int num_docs = 300;
  int num_categories = 6;
  double kv_ratio = 0.75;
  double page_width = 600;
  double page_height = 800;
  int distractors = 3;
  int min_entities = 6;
  int max_entities = 10;
  double image_scale = 0.125;
  bool render_images = true;

  void validate() const;
};

/// Category names the generator draws from, in configured order.
std::vector<std::string> synthetic_categories(int num_categories);

/// Deterministic in (config, seed); document k only depends on (seed, k).
std::vector<Document> generate_synthetic_corpus(const GenConfig& config, std::uint64_t seed,
                                                const std::string& id_prefix = "synth");
Document generate_synthetic_document(const GenConfig& config, std::uint64_t seed, int index,
                                     const std::string& id_prefix = "synth");

/// White page with a filled black rectangle per character cell.
Image render_page(const Document& doc, double scale);

}  // namespace matchvie
