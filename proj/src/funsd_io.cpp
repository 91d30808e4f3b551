#include "matchvie/docmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace matchvie {

namespace {

using nlohmann::json;

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + ": expected object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + "." + key + ": missing");
  return *it;
}

BBox parse_box(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw ParseError(where + ": expected array of 4 numbers");
  double v[4];
  for (std::size_t i = 0; i < 4; ++i) {
    if (!j[i].is_number()) throw ParseError(where + ": expected array of 4 numbers");
    v[i] = j[i].get<double>();
  }
  return {v[0], v[1], v[2], v[3]};
}

json number(double v) {
  if (std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 9e15) return json(static_cast<long long>(v));
  return json(v);
}

json box_json(const BBox& b) { return json::array({number(b.x0), number(b.y0), number(b.x1), number(b.y1)}); }

void check_box(const BBox& b, int segment_id, const char* what) {
  if (!std::isfinite(b.x0) || !std::isfinite(b.y0) || !std::isfinite(b.x1) || !std::isfinite(b.y1))
    throw ValidationError("segment " + std::to_string(segment_id) + ": non-finite " + what);
  if (b.x0 > b.x1) throw ValidationError("segment " + std::to_string(segment_id) + ": " + what + " has x0 > x1");
  if (b.y0 > b.y1) throw ValidationError("segment " + std::to_string(segment_id) + ": " + what + " has y0 > y1");
}

}  // namespace

Document parse_funsd(const json& j, std::string id, double page_width, double page_height) {
  const json& form = field(j, "form", "document");
  if (!form.is_array()) throw ParseError("form: expected array");

  Document doc;
  doc.id = std::move(id);

  // Listed links per entry, in raw (file) ids.
  std::vector<std::vector<std::pair<long long, long long>>> raw_links;
  std::vector<long long> raw_ids;
  for (std::size_t k = 0; k < form.size(); ++k) {
    const std::string where = "form[" + std::to_string(k) + "]";
    const json& e = form[k];
    const json& jid = field(e, "id", where);
    if (!jid.is_number_integer()) throw ParseError(where + ".id: expected integer");
    const json& jtext = field(e, "text", where);
    if (!jtext.is_string()) throw ParseError(where + ".text: expected string");
    const json& jlabel = field(e, "label", where);
    if (!jlabel.is_string()) throw ParseError(where + ".label: expected string");
    const json& jwords = field(e, "words", where);
    if (!jwords.is_array()) throw ParseError(where + ".words: expected array");
    const json& jlinking = field(e, "linking", where);
    if (!jlinking.is_array()) throw ParseError(where + ".linking: expected array");

    TextSegment s;
    const long long rid = jid.get<long long>();
    raw_ids.push_back(rid);
    s.id = static_cast<int>(k);
    s.text = jtext.get<std::string>();
    s.label = jlabel.get<std::string>();
    s.box = parse_box(field(e, "box", where), where + ".box");
    check_box(s.box, static_cast<int>(rid), "box");
    for (std::size_t w = 0; w < jwords.size(); ++w) {
      const std::string ww = where + ".words[" + std::to_string(w) + "]";
      const json& jt = field(jwords[w], "text", ww);
      if (!jt.is_string()) throw ParseError(ww + ".text: expected string");
      Token t{jt.get<std::string>(), parse_box(field(jwords[w], "box", ww), ww + ".box")};
      check_box(t.box, static_cast<int>(rid), "word box");
      if (t.text.empty()) continue;
      s.tokens.push_back(std::move(t));
    }
    std::vector<std::pair<long long, long long>> listed;
    for (std::size_t l = 0; l < jlinking.size(); ++l) {
      const json& p = jlinking[l];
      if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
        throw ParseError(where + ".linking[" + std::to_string(l) + "]: expected [int, int]");
      listed.emplace_back(p[0].get<long long>(), p[1].get<long long>());
    }
    raw_links.push_back(std::move(listed));
    doc.segments.push_back(std::move(s));
  }

  std::map<long long, int> position;
  for (std::size_t k = 0; k < raw_ids.size(); ++k)
    if (!position.emplace(raw_ids[k], static_cast<int>(k)).second)
      throw ValidationError("duplicate segment id " + std::to_string(raw_ids[k]));

  auto resolve = [&](long long rid, long long owner) {
    auto it = position.find(rid);
    if (it == position.end())
      throw ValidationError("segment " + std::to_string(owner) + ": link to unknown id " + std::to_string(rid));
    return it->second;
  };

  // Own listed links first, then links listed only on the other endpoint.
  std::vector<std::vector<Link>> per(doc.segments.size());
  for (std::size_t k = 0; k < raw_links.size(); ++k)
    for (const auto& [a, b] : raw_links[k]) {
      const Link l{resolve(a, raw_ids[k]), resolve(b, raw_ids[k])};
      if (l.key == l.value) throw ValidationError("segment " + std::to_string(raw_ids[k]) + ": self-link");
      auto& mine = per[k];
      if (std::find(mine.begin(), mine.end(), l) == mine.end()) mine.push_back(l);
    }
  for (std::size_t k = 0; k < per.size(); ++k) {
    const std::vector<Link> own = per[k];
    for (const auto& l : own) {
      for (int end : {l.key, l.value}) {
        auto& other = per[static_cast<std::size_t>(end)];
        if (std::find(other.begin(), other.end(), l) == other.end()) other.push_back(l);
      }
    }
  }
  for (std::size_t k = 0; k < per.size(); ++k) doc.segments[k].links = std::move(per[k]);

  if (j.contains("page_size")) {
    const json& ps = j["page_size"];
    if (!ps.is_array() || ps.size() != 2 || !ps[0].is_number() || !ps[1].is_number())
      throw ParseError("page_size: expected [width, height]");
    doc.page_width = ps[0].get<double>();
    doc.page_height = ps[1].get<double>();
    doc.explicit_page_size = true;
  } else if (page_width > 0 && page_height > 0) {
    doc.page_width = page_width;
    doc.page_height = page_height;
    doc.explicit_page_size = false;
  } else {
    double w = 1, h = 1;
    for (const auto& s : doc.segments) {
      w = std::max(w, s.box.x1);
      h = std::max(h, s.box.y1);
    }
    doc.page_width = w;
    doc.page_height = h;
    doc.explicit_page_size = false;
  }
  return doc;
}

json to_funsd_json(const Document& doc) {
  json form = json::array();
  for (const auto& s : doc.segments) {
    json words = json::array();
    for (const auto& t : s.tokens) words.push_back({{"text", t.text}, {"box", box_json(t.box)}});
    json linking = json::array();
    for (const auto& l : s.links) linking.push_back(json::array({l.key, l.value}));
    form.push_back({{"id", s.id},
                    {"text", s.text},
                    {"box", box_json(s.box)},
                    {"label", s.label},
                    {"words", std::move(words)},
                    {"linking", std::move(linking)}});
  }
  json out = {{"form", std::move(form)}};
  if (doc.explicit_page_size) out["page_size"] = json::array({number(doc.page_width), number(doc.page_height)});
  return out;
}

Document load_funsd_document(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": malformed JSON: " + e.what());
  }
  Document doc;
  try {
    doc = parse_funsd(j, path.stem().string());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  auto pgm = path;
  pgm.replace_extension(".pgm");
  if (std::filesystem::exists(pgm)) {
    doc.image = read_pgm(pgm);
    if (!doc.explicit_page_size) {
      doc.page_width = std::max(doc.page_width, static_cast<double>(doc.image->width));
      doc.page_height = std::max(doc.page_height, static_cast<double>(doc.image->height));
    }
  }
  return doc;
}

void save_funsd_document(const Document& doc, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_funsd_json(doc).dump(1) << '\n';
}

std::vector<Document> load_funsd_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ParseError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  docs.reserve(files.size());
  for (const auto& p : files) docs.push_back(load_funsd_document(p));
  return docs;
}

// ---------------------------------------------------------------------------

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P5") throw ParseError(path.string() + ": expected binary PGM (P5)");
  auto next_int = [&]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string skip;
      std::getline(f, skip);
      f >> std::ws;
    }
    int v = 0;
    if (!(f >> v)) throw ParseError(path.string() + ": bad PGM header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw ParseError(path.string() + ": unsupported PGM");
  f.get();
  Image img(h, w, 1);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size())) throw ParseError(path.string() + ": truncated PGM");
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]) / static_cast<float>(maxval);
  return img;
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(image.width) * image.height);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      float v = 0;
      for (int ch = 0; ch < image.channels; ++ch) v += image.at(r, c, ch);
      v /= static_cast<float>(image.channels);
      buf[static_cast<std::size_t>(r) * image.width + c] =
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace matchvie
