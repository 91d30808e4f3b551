#include "matchvie/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace matchvie {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"generator.num_docs", "300"},
      {"generator.test_docs", "100"},
      {"generator.seed", "1"},
      {"generator.num_categories", "6"},
      {"generator.kv_ratio", "0.75"},
      {"generator.page_width", "600"},
      {"generator.page_height", "800"},
      {"generator.distractors", "3"},
      {"generator.min_entities", "6"},
      {"generator.max_entities", "10"},
      {"generator.image_scale", "0.125"},
      {"generator.render_images", "true"},
      {"backbone.embed_dim", "64"},
      {"backbone.num_heads", "4"},
      {"backbone.num_layers", "1"},
      {"backbone.residual", "false"},
      {"backbone.use_visual", "true"},
      {"backbone.image_channels", "1"},
      {"backbone.conv_channels", "8,16,16"},
      {"backbone.conv_kernel", "3"},
      {"backbone.conv_stride", "2"},
      {"backbone.roi_h", "2"},
      {"backbone.roi_w", "2"},
      {"backbone.min_freq", "1"},
      {"graph.num_layers", "2"},
      {"graph.num_heads", "8"},
      {"graph.d_node", "64"},
      {"graph.d_edge", "32"},
      {"graph.use_num2vec", "true"},
      {"loss.use_focal", "true"},
      {"loss.focal.alpha", "0.75"},
      {"loss.focal.gamma", "2"},
      {"loss.lambda_entity", "1"},
      {"loss.lambda_re", "1"},
      {"train.learning_rate", "0.0005"},
      {"train.epochs", "60"},
      {"train.batch_size", "1"},
      {"train.seed", "1"},
      {"train.clip_norm", "5"},
      {"train.use_kv_branch", "true"},
      {"train.eval_docs", "100"},
      {"train.eval_skip_labels", "key"},
      {"train.entity_granularity", "segment"},
      {"train.mapper_hidden", "32"},
      {"train.mapper_epochs", "30"},
      {"train.mapper_lr", "0.005"},
      {"inference.threshold", "0.5"},
      {"inference.mapper", "lookup"},
      {"inference.key_label", "key"},
      {"inference.value_label", ""},
      {"paths.train", "data/train"},
      {"paths.test", "data/test"},
      {"paths.checkpoint", "runs/checkpoint"},
      {"paths.metrics", "runs/metrics.jsonl"},
      {"paths.output", "runs/extractions"},
      {"paths.report", "runs/eval_report.json"},
  };
  return d;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (entity_granularity != "segment" && entity_granularity != "span")
    throw ConfigError("train.entity_granularity must be 'segment' or 'span'");
}

void InferenceConfig::validate() const {
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("inference.threshold must lie in (0, 1)");
  if (mapper != "lookup" && mapper != "semantic") throw ConfigError("inference.mapper must be 'lookup' or 'semantic'");
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) {
    order_.push_back(k);
    values_[k] = v;
  }
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": key outside any section");
    set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path);
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  return it->second;
}

void RunConfig::ablate(const std::string& what) {
  if (what == "focal") {
    set("loss.use_focal", "false");
  } else if (what == "kv") {
    set("train.use_kv_branch", "false");
  } else if (what == "num2vec") {
    set("graph.use_num2vec", "false");
  } else {
    throw ConfigError("unknown ablation '" + what + "' (expected focal, kv or num2vec)");
  }
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& k : order_) os << k << " = " << values_.at(k) << '\n';
  return os.str();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : order_) j[k] = values_.at(k);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

double RunConfig::real(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

long long RunConfig::integer(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

bool RunConfig::boolean(const std::string& key) const {
  std::string v = get(key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + get(key) + "'");
}

std::vector<int> RunConfig::int_list(const std::string& key) const {
  std::vector<int> out;
  for (const auto& item : split(get(key), ',')) {
    try {
      std::size_t used = 0;
      const int x = std::stoi(item, &used);
      if (used == item.size()) {
        out.push_back(x);
        continue;
      }
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a comma-separated list of integers, got '" + get(key) + "'");
  }
  return out;
}

std::vector<std::string> RunConfig::string_list(const std::string& key) const { return split(get(key), ','); }

GenConfig RunConfig::generator() const {
  GenConfig g;
  g.num_docs = static_cast<int>(integer("generator.num_docs"));
  g.num_categories = static_cast<int>(integer("generator.num_categories"));
  g.kv_ratio = real("generator.kv_ratio");
  g.page_width = real("generator.page_width");
  g.page_height = real("generator.page_height");
  g.distractors = static_cast<int>(integer("generator.distractors"));
  g.min_entities = static_cast<int>(integer("generator.min_entities"));
  g.max_entities = static_cast<int>(integer("generator.max_entities"));
  g.image_scale = real("generator.image_scale");
  g.render_images = boolean("generator.render_images");
  g.validate();
  return g;
}

int RunConfig::test_docs() const {
  const auto n = integer("generator.test_docs");
  if (n < 0) throw ConfigError("generator.test_docs must be >= 0");
  return static_cast<int>(n);
}

std::uint64_t RunConfig::generator_seed() const { return static_cast<std::uint64_t>(integer("generator.seed")); }

int RunConfig::min_freq() const { return static_cast<int>(integer("backbone.min_freq")); }

ModelConfig RunConfig::model() const {
  ModelConfig m;
  auto& b = m.backbone;
  b.embed_dim = static_cast<int>(integer("backbone.embed_dim"));
  b.num_heads = static_cast<int>(integer("backbone.num_heads"));
  b.num_layers = static_cast<int>(integer("backbone.num_layers"));
  b.residual = boolean("backbone.residual");
  b.use_visual = boolean("backbone.use_visual");
  b.image_channels = static_cast<int>(integer("backbone.image_channels"));
  b.conv_channels = int_list("backbone.conv_channels");
  b.conv_kernel = static_cast<int>(integer("backbone.conv_kernel"));
  b.conv_stride = static_cast<int>(integer("backbone.conv_stride"));
  b.roi_h = static_cast<int>(integer("backbone.roi_h"));
  b.roi_w = static_cast<int>(integer("backbone.roi_w"));
  auto& g = m.graph;
  g.num_layers = static_cast<int>(integer("graph.num_layers"));
  g.num_heads = static_cast<int>(integer("graph.num_heads"));
  g.d_node = static_cast<int>(integer("graph.d_node"));
  g.d_edge = static_cast<int>(integer("graph.d_edge"));
  g.use_num2vec = boolean("graph.use_num2vec");
  auto& l = m.loss;
  l.use_focal = boolean("loss.use_focal");
  l.focal_alpha = real("loss.focal.alpha");
  l.focal_gamma = real("loss.focal.gamma");
  l.lambda_entity = real("loss.lambda_entity");
  l.lambda_re = real("loss.lambda_re");
  m.use_kv_branch = boolean("train.use_kv_branch");
  m.validate();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.learning_rate = real("train.learning_rate");
  t.epochs = static_cast<int>(integer("train.epochs"));
  t.batch_size = static_cast<int>(integer("train.batch_size"));
  t.seed = static_cast<std::uint64_t>(integer("train.seed"));
  t.clip_norm = real("train.clip_norm");
  t.eval_docs = static_cast<int>(integer("train.eval_docs"));
  t.eval_skip_labels = string_list("train.eval_skip_labels");
  t.entity_granularity = get("train.entity_granularity");
  t.mapper_hidden = static_cast<int>(integer("train.mapper_hidden"));
  t.mapper_epochs = static_cast<int>(integer("train.mapper_epochs"));
  t.mapper_lr = real("train.mapper_lr");
  t.validate();
  return t;
}

InferenceConfig RunConfig::inference() const {
  InferenceConfig i;
  i.threshold = real("inference.threshold");
  i.mapper = get("inference.mapper");
  i.key_label = get("inference.key_label");
  i.value_label = get("inference.value_label");
  i.validate();
  return i;
}

PathsConfig RunConfig::paths() const {
  return {get("paths.train"), get("paths.test"), get("paths.checkpoint"), get("paths.metrics"), get("paths.output"),
          get("paths.report")};
}

}  // namespace matchvie
