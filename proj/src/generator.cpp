#include "matchvie/docmodel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

namespace matchvie {

namespace {

enum class ValueKind { Amount, Date, Company, Phone, Identifier, Email };

struct CategorySpec {
  const char* name;
  ValueKind kind;
  std::vector<const char*> keys;
};

const std::vector<CategorySpec>& category_table() {
  static const std::vector<CategorySpec> table = {
      {"total", ValueKind::Amount, {"Total", "Total Amount", "Total (RM)", "Total Sales", "Grand Total", "Amount Due"}},
      {"date", ValueKind::Date, {"Date", "Invoice Date", "Issued On", "Date of Issue", "Bill Date"}},
      {"company", ValueKind::Company, {"Company", "Vendor", "Supplier", "Seller", "Sold By"}},
      {"tax", ValueKind::Amount, {"Tax", "GST", "Tax Amount", "Service Tax", "VAT"}},
      {"due_date", ValueKind::Date, {"Due Date", "Payment Due", "Due By", "Pay Before"}},
      {"phone", ValueKind::Phone, {"Phone", "Tel", "Contact No", "Telephone", "Fax"}},
      {"invoice_no", ValueKind::Identifier, {"Invoice No", "Receipt #", "Bill No", "Reference", "Doc No"}},
      {"email", ValueKind::Email, {"Email", "E-mail", "Contact Email", "Mail To"}},
  };
  return table;
}

// Portable helpers over the raw engine output (distribution objects are not
// reproducible across standard libraries).
struct Rng {
  std::mt19937_64 engine;
  explicit Rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x4d56u};
    engine.seed(seq);
  }
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine() % n; }
  int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1))); }
  double unit() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }
  bool chance(double p) { return unit() < p; }
  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[below(v.size())];
  }
};

const std::vector<std::string> kMonths = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                          "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
const std::vector<std::string> kCompanyHeads = {"Acme", "Global", "Sunrise", "Golden", "Pacific", "Metro",
                                                "Prime", "Eastern", "Royal", "United", "Summit", "Crystal"};
const std::vector<std::string> kCompanyBodies = {"Trading", "Hardware", "Foods", "Logistics", "Stationery",
                                                 "Electronics", "Supplies", "Motors", "Bakery", "Pharmacy"};
const std::vector<std::string> kCompanyTails = {"Sdn Bhd", "Ltd", "Inc", "Corp", "LLC", "Enterprise"};
const std::vector<std::string> kMailUsers = {"sales", "info", "billing", "accounts", "support", "orders"};
const std::vector<std::string> kOtherTexts = {"INVOICE", "RECEIPT", "Thank you", "Thank you for your business",
                                              "Page 1 of 1", "Customer Copy", "TAX INVOICE", "Goods sold are not returnable",
                                              "Please come again", "Description", "Qty", "Unit Price"};

std::string two(int v) {
  std::string s = std::to_string(v);
  return s.size() < 2 ? "0" + s : s;
}

std::string amount_text(Rng& rng) {
  const int magnitude = rng.range(0, 2);
  const int whole = magnitude == 0 ? rng.range(0, 9) : magnitude == 1 ? rng.range(10, 99) : rng.range(100, 999);
  std::string s = std::to_string(whole) + "." + two(rng.range(0, 99));
  const int prefix = rng.range(0, 3);
  if (prefix == 1) s = "RM " + s;
  if (prefix == 2) s = "$" + s;
  return s;
}

std::string date_text(Rng& rng) {
  const int d = rng.range(1, 28), m = rng.range(1, 12), y = rng.range(2015, 2024);
  switch (rng.range(0, 2)) {
    case 0: return two(d) + "/" + two(m) + "/" + std::to_string(y);
    case 1: return std::to_string(y) + "-" + two(m) + "-" + two(d);
    default: return std::to_string(d) + " " + kMonths[static_cast<std::size_t>(m - 1)] + " " + std::to_string(y);
  }
}

std::string value_text(ValueKind kind, Rng& rng) {
  switch (kind) {
    case ValueKind::Amount: return amount_text(rng);
    case ValueKind::Date: return date_text(rng);
    case ValueKind::Company:
      return rng.pick(kCompanyHeads) + " " + rng.pick(kCompanyBodies) + " " + rng.pick(kCompanyTails);
    case ValueKind::Phone:
      return rng.chance(0.5) ? "+60 " + std::to_string(rng.range(3, 9)) + "-" + std::to_string(rng.range(1000, 9999)) +
                                   " " + std::to_string(rng.range(1000, 9999))
                             : "(0" + std::to_string(rng.range(3, 9)) + ") " + std::to_string(rng.range(1000, 9999)) +
                                   " " + std::to_string(rng.range(1000, 9999));
    case ValueKind::Identifier:
      return (rng.chance(0.5) ? "INV-" : "#A") + std::to_string(rng.range(10000, 99999));
    case ValueKind::Email: {
      std::string head = rng.pick(kCompanyHeads);
      std::transform(head.begin(), head.end(), head.begin(), [](unsigned char c) { return std::tolower(c); });
      return rng.pick(kMailUsers) + "@" + head + ".com";
    }
  }
  return {};
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

struct Block {
  enum Kind { Pair, Standalone, Other } kind;
  std::string key_text;
  std::string value_text;
  std::string category;
  bool vertical = false;
};

struct Layout {
  double char_w;
  double text_h;
  double pitch;
};

TextSegment make_segment(const std::string& text, const std::string& label, double x, double y, const Layout& lay) {
  TextSegment s;
  s.text = text;
  s.label = label;
  double cursor = x;
  bool first = true;
  for (const auto& w : split_words(text)) {
    if (!first) cursor += lay.char_w;
    first = false;
    const double width = lay.char_w * static_cast<double>(utf8_chars(w).size());
    Token t{w, {cursor, y, cursor + width, y + lay.text_h}};
    s.box = s.tokens.empty() ? t.box : s.box.united(t.box);
    s.tokens.push_back(std::move(t));
    cursor += width;
  }
  return s;
}

}  // namespace

void GenConfig::validate() const {
  if (!(kv_ratio >= 0.0 && kv_ratio <= 1.0)) throw ConfigError("generator.kv_ratio must lie in [0, 1]");
  if (num_docs < 0) throw ConfigError("generator.num_docs must be >= 0");
  if (num_categories < 1 || num_categories > static_cast<int>(category_table().size()))
    throw ConfigError("generator.num_categories must lie in [1, " + std::to_string(category_table().size()) + "]");
  if (min_entities < 1 || max_entities < min_entities) throw ConfigError("generator.min_entities/max_entities invalid");
  if (distractors < 0) throw ConfigError("generator.distractors must be >= 0");
  if (page_width < 400 || page_height < 400) throw ConfigError("generator.page_width/page_height must be >= 400");
  if (image_scale <= 0 || image_scale > 1) throw ConfigError("generator.image_scale must lie in (0, 1]");
  // Standalone entities need a category whose value form is unique.
  std::map<ValueKind, int> kinds;
  for (int c = 0; c < num_categories; ++c) ++kinds[category_table()[static_cast<std::size_t>(c)].kind];
  bool any_identifiable = false;
  for (const auto& [k, n] : kinds) any_identifiable = any_identifiable || n == 1;
  if (kv_ratio < 1.0 && !any_identifiable)
    throw ConfigError("generator.num_categories leaves no text-identifiable category for standalone entities");
  // Worst case: every block takes two rows plus a blank row, at the
  // largest row pitch, in two columns.
  const int max_rows = static_cast<int>((page_height - 60) / 28.0);
  if (3 * (max_entities + distractors + 2) > 2 * max_rows)
    throw ConfigError("generator.max_entities/distractors do not fit on the page");
}

std::vector<std::string> synthetic_categories(int num_categories) {
  std::vector<std::string> out;
  for (int c = 0; c < num_categories && c < static_cast<int>(category_table().size()); ++c)
    out.emplace_back(category_table()[static_cast<std::size_t>(c)].name);
  return out;
}

Document generate_synthetic_document(const GenConfig& config, std::uint64_t seed, int index,
                                     const std::string& id_prefix) {
  Rng rng(seed, static_cast<std::uint64_t>(index));
  const auto& table = category_table();
  const int ncat = config.num_categories;

  std::map<ValueKind, int> kind_count;
  for (int c = 0; c < ncat; ++c) ++kind_count[table[static_cast<std::size_t>(c)].kind];
  std::vector<int> identifiable;
  for (int c = 0; c < ncat; ++c)
    if (kind_count[table[static_cast<std::size_t>(c)].kind] == 1) identifiable.push_back(c);

  std::vector<Block> blocks;
  const int entities = rng.range(config.min_entities, config.max_entities);
  std::vector<int> pool;
  for (int e = 0; e < entities; ++e) {
    const bool linked = identifiable.empty() || rng.chance(config.kv_ratio);
    Block b;
    int c = 0;
    if (linked) {
      // Prefer distinct fields per form; refill the pool when exhausted.
      if (pool.empty()) {
        for (int k = 0; k < ncat; ++k) pool.push_back(k);
      }
      const std::size_t at = rng.below(pool.size());
      c = pool[at];
      pool.erase(pool.begin() + static_cast<long>(at));
      const auto& spec = table[static_cast<std::size_t>(c)];
      b.kind = Block::Pair;
      b.key_text = std::string(spec.keys[rng.below(spec.keys.size())]) + (rng.chance(0.5) ? ":" : "");
      b.vertical = rng.chance(0.35);
    } else {
      c = rng.pick(identifiable);
      b.kind = Block::Standalone;
    }
    const auto& spec = table[static_cast<std::size_t>(c)];
    b.category = spec.name;
    b.value_text = value_text(spec.kind, rng);
    blocks.push_back(std::move(b));
  }
  // Numeric distractors share surface forms with amount and date values.
  for (int k = 0; k < config.distractors; ++k) {
    Block b;
    b.kind = Block::Other;
    b.value_text = rng.chance(0.7) ? amount_text(rng) : date_text(rng);
    blocks.push_back(std::move(b));
  }
  const int plain = rng.range(1, 2);
  for (int k = 0; k < plain; ++k) {
    Block b;
    b.kind = Block::Other;
    b.value_text = rng.pick(kOtherTexts);
    blocks.push_back(std::move(b));
  }
  for (std::size_t k = blocks.size(); k > 1; --k) std::swap(blocks[k - 1], blocks[rng.below(k)]);

  Layout lay;
  lay.char_w = 6.0 + static_cast<double>(rng.range(0, 2));
  lay.text_h = 10.0 + static_cast<double>(rng.range(0, 4));
  lay.pitch = lay.text_h * 2.0;
  const double margin = 30;
  const double col_w = (config.page_width - 2 * margin) / 2.0;
  const int max_rows = static_cast<int>((config.page_height - 2 * margin) / lay.pitch);

  std::array<int, 2> next_row{0, 0};
  Document doc;
  char suffix[16];
  std::snprintf(suffix, sizeof(suffix), "_%04d", index);
  doc.id = id_prefix + suffix;
  doc.page_width = config.page_width;
  doc.page_height = config.page_height;

  auto width_of = [&](const std::string& text) { return lay.char_w * static_cast<double>(utf8_chars(text).size()); };

  for (auto& b : blocks) {
    if (b.kind == Block::Pair && !b.vertical) {
      const double need = width_of(b.key_text) + lay.char_w * 4 + width_of(b.value_text) +
                          lay.char_w * static_cast<double>(split_words(b.value_text).size());
      if (need > col_w - 28) b.vertical = true;
    }
    const int rows_needed = b.kind == Block::Pair && b.vertical ? 2 : 1;
    int col = next_row[0] <= next_row[1] ? 0 : 1;
    if (next_row[static_cast<std::size_t>(col)] + rows_needed > max_rows) col = 1 - col;
    if (next_row[static_cast<std::size_t>(col)] + rows_needed > max_rows) break;
    const int row = next_row[static_cast<std::size_t>(col)];
    next_row[static_cast<std::size_t>(col)] += rows_needed + (rng.chance(0.3) ? 1 : 0);

    const double x = margin + col * col_w + static_cast<double>(rng.range(0, 24));
    const double y = margin + row * lay.pitch + static_cast<double>(rng.range(-2, 2));
    if (b.kind == Block::Pair) {
      TextSegment key = make_segment(b.key_text, "key", x, y, lay);
      TextSegment value;
      if (b.vertical) {
        value = make_segment(b.value_text, b.category, x + static_cast<double>(rng.range(0, 12)), y + lay.pitch, lay);
      } else {
        const double gap = lay.char_w * static_cast<double>(rng.range(1, 4));
        value = make_segment(b.value_text, b.category, x + width_of(b.key_text) + gap, y, lay);
      }
      const int kid = static_cast<int>(doc.segments.size());
      key.id = kid;
      value.id = kid + 1;
      key.links = {{kid, kid + 1}};
      value.links = {{kid, kid + 1}};
      doc.segments.push_back(std::move(key));
      doc.segments.push_back(std::move(value));
    } else {
      TextSegment s = make_segment(b.value_text, b.kind == Block::Standalone ? b.category : "other", x, y, lay);
      s.id = static_cast<int>(doc.segments.size());
      doc.segments.push_back(std::move(s));
    }
  }

  doc = reading_order_sort(doc);
  if (config.render_images) doc.image = render_page(doc, config.image_scale);
  return doc;
}

std::vector<Document> generate_synthetic_corpus(const GenConfig& config, std::uint64_t seed,
                                                const std::string& id_prefix) {
  config.validate();
  std::vector<Document> docs;
  docs.reserve(static_cast<std::size_t>(config.num_docs));
  for (int k = 0; k < config.num_docs; ++k) docs.push_back(generate_synthetic_document(config, seed, k, id_prefix));
  return docs;
}

Image render_page(const Document& doc, double scale) {
  const int h = std::max(1, static_cast<int>(std::lround(doc.page_height * scale)));
  const int w = std::max(1, static_cast<int>(std::lround(doc.page_width * scale)));
  Image img(h, w, 1, 1.0f);
  for (const auto& s : doc.segments)
    for (const auto& t : s.tokens) {
      const auto chars = utf8_chars(t.text);
      const double cell = t.box.width() / static_cast<double>(std::max<std::size_t>(1, chars.size()));
      for (std::size_t k = 0; k < chars.size(); ++k) {
        if (chars[k] == " ") continue;
        // Glyph cell shrunk by 15% on each side.
        const double gx0 = t.box.x0 + cell * (static_cast<double>(k) + 0.15);
        const double gx1 = t.box.x0 + cell * (static_cast<double>(k) + 0.85);
        const double gy0 = t.box.y0 + 0.15 * t.box.height();
        const double gy1 = t.box.y1 - 0.15 * t.box.height();
        const int c0 = std::clamp(static_cast<int>(std::floor(gx0 * scale)), 0, w - 1);
        const int c1 = std::clamp(static_cast<int>(std::ceil(gx1 * scale)) - 1, 0, w - 1);
        const int r0 = std::clamp(static_cast<int>(std::floor(gy0 * scale)), 0, h - 1);
        const int r1 = std::clamp(static_cast<int>(std::ceil(gy1 * scale)) - 1, 0, h - 1);
        for (int r = r0; r <= r1; ++r)
          for (int c = c0; c <= c1; ++c) img.at(r, c) = 0.0f;
      }
    }
  return img;
}

}  // namespace matchvie
