// Joint training, evaluation and checkpoints for the float model used by the
// command-line tool.
#pragma once

#include "matchvie/config.hpp"
#include "matchvie/inference.hpp"
#include "matchvie/model.hpp"
#include "matchvie/semantic.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace matchvie {

using TrainModel = Model<float>;
using TrainExample = Example<float>;

/// Fresh model whose vocabulary (with character fallback rows) and tag
/// scheme come from `docs`.
std::unique_ptr<TrainModel> build_model(const ModelConfig& cfg, const std::vector<Document>& docs, int min_freq,
                                        std::uint64_t seed);

/// Throws ConfigError when `docs` carry an entity label outside `scheme`.
void check_categories(const heads::TagScheme& scheme, const std::vector<Document>& docs);

/// Counts for precision / recall / F1. Precision is 0 when nothing was
/// predicted.
struct PRF {
  long tp = 0, fp = 0, fn = 0;
  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
  }
  nlohmann::json to_json() const;
};

struct EvalReport {
  PRF pairs;
  PRF entities;  // micro-averaged over categories
  std::map<std::string, PRF> per_category;
  int documents = 0;

  nlohmann::json to_json() const;
  /// Per-category precision / recall / F1 table.
  std::string table() const;
};

struct EvalOptions {
  std::vector<std::string> skip_labels{"key"};
  std::string granularity = "segment";  // segment | span
};

/// Adds one document's pair and entity counts to `report`.
void score_document(const Document& gold, const inference::ExtractionResult& pred, const EvalOptions& options,
                    EvalReport& report);

/// Everything needed to turn model output into an extraction.
struct Extractor {
  const inference::CategoryMapper* mapper = nullptr;
  InferenceConfig inference;

  inference::ExtractionResult run(TrainModel& model, const TrainExample& ex) const;
};

EvalReport evaluate(TrainModel& model, const std::vector<TrainExample>& examples, const Extractor& extractor,
                    const EvalOptions& options);

struct StepRecord {
  int epoch = 0;
  long step = 0;
  double loss_total = 0, loss_entity = 0, loss_re = 0;
  std::optional<double> pair_f1, entity_f1;  // set on end-of-epoch records only

  nlohmann::json to_json() const;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_record;     // every step, then each epoch summary
  std::function<void(const StepRecord&)> on_epoch_end;  // epoch summary only
};

struct EvalSetup {
  const std::vector<TrainExample>* examples = nullptr;
  Extractor extractor;
  EvalOptions options;
};

struct TrainResult {
  std::vector<double> step_losses;  // one per optimiser step
  std::vector<StepRecord> epochs;   // end-of-epoch summaries
};

/// Adam over whole-document batches with gradient-norm clipping. Throws
/// TrainingError on a non-finite loss.
TrainResult train(TrainModel& model, const std::vector<TrainExample>& examples, const TrainConfig& config,
                  const EvalSetup* eval = nullptr, const TrainHooks& hooks = {});

/// Key texts of annotated links paired with their value's index in
/// `categories` (links whose value label is not listed are skipped).
std::vector<std::pair<std::string, int>> mapper_examples(const std::vector<Document>& docs,
                                                         const std::vector<std::string>& categories);

/// Fits a BiLSTM key encoder over the model's (frozen) token table.
std::unique_ptr<inference::BiLstmEncoder> train_semantic_encoder(const TrainModel& model,
                                                                 const std::vector<Document>& docs,
                                                                 const std::vector<std::string>& categories,
                                                                 const TrainConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: params.bin, vocab.tsv, meta.json and optionally mapper.bin.

using NamedArrays = std::vector<std::pair<std::string, ad::Mat<double>>>;

void write_arrays(const std::string& path, const NamedArrays& arrays);
NamedArrays read_arrays(const std::string& path);

struct Checkpoint {
  RunConfig config;
  std::unique_ptr<TrainModel> model;
  inference::LookupTable lookup;
  std::vector<std::string> mapper_categories;
  std::unique_ptr<inference::BiLstmEncoder> encoder;  // absent until fitted
};

void save_checkpoint(const std::string& dir, const RunConfig& config, const TrainModel& model,
                     const inference::LookupTable& lookup, const std::vector<std::string>& mapper_categories,
                     const inference::BiLstmEncoder* encoder);
Checkpoint load_checkpoint(const std::string& dir);

/// Mapper selected by the inference settings: a fixed value label, the
/// lookup table, or the fitted encoder (which must outlive the mapper).
std::unique_ptr<inference::CategoryMapper> make_mapper(const inference::LookupTable& lookup,
                                                       const std::vector<std::string>& categories,
                                                       const inference::BiLstmEncoder* encoder,
                                                       const InferenceConfig& inference);
std::unique_ptr<inference::CategoryMapper> make_mapper(const Checkpoint& ckpt, const InferenceConfig& inference);

}  // namespace matchvie
