// Flat sectioned run configuration: `[section]` headers followed by
// `key = value` lines, every key known in advance with a default.
#pragma once

#include "matchvie/docmodel.hpp"
#include "matchvie/model.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace matchvie {

struct TrainConfig {
  double learning_rate = 5e-4;
  int epochs = 60;
  int batch_size = 1;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  int eval_docs = 100;  // documents scored at the end of each epoch (0 = none)
  std::vector<std::string> eval_skip_labels{"key"};
  std::string entity_granularity = "segment";  // segment | span
  int mapper_hidden = 32;
  int mapper_epochs = 30;
  double mapper_lr = 0.005;

  void validate() const;
};

struct InferenceConfig {
  double threshold = 0.5;
  std::string mapper = "lookup";  // lookup | semantic
  std::string key_label = "key";
  std::string value_label;  // when set, every matched value gets this label

  void validate() const;
};

struct PathsConfig {
  std::string train = "data/train";
  std::string test = "data/test";
  std::string checkpoint = "runs/checkpoint";
  std::string metrics = "runs/metrics.jsonl";
  std::string output = "runs/extractions";
  std::string report = "runs/eval_report.json";
};

class RunConfig {
 public:
  RunConfig();

  /// Parses `[section]` / `key = value` text; `#` and `;` start comments.
  void load_text(const std::string& text, const std::string& origin = "config");
  void load_file(const std::string& path);
  /// `section.key=value`.
  void set_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool contains(const std::string& key) const { return values_.count(key) > 0; }

  /// focal | kv | num2vec.
  void ablate(const std::string& what);

  /// One `section.key = value` line per key, in declaration order.
  std::string echo() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  GenConfig generator() const;
  int test_docs() const;
  std::uint64_t generator_seed() const;
  int min_freq() const;
  ModelConfig model() const;
  TrainConfig train() const;
  InferenceConfig inference() const;
  PathsConfig paths() const;

 private:
  double real(const std::string& key) const;
  long long integer(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<int> int_list(const std::string& key) const;
  std::vector<std::string> string_list(const std::string& key) const;

  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

}  // namespace matchvie
