// End-to-end runs behind the command-line tool: corpus generation, training,
// evaluation and inference, all driven by one RunConfig.
#pragma once

#include "matchvie/config.hpp"
#include "matchvie/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace matchvie::pipeline {

/// Seed of the held-out split, derived from the generator seed.
std::uint64_t test_seed(std::uint64_t seed);

struct Corpus {
  std::vector<Document> train, test;
};

/// Train and test documents described by the generator section.
Corpus synthesize(const RunConfig& config);

/// Writes `dir`/train and `dir`/test (FUNSD json plus a .pgm page image per
/// document) and `dir`/manifest.json. Stale .json/.pgm files in the two
/// split directories are removed first.
CorpusStats write_corpus(const RunConfig& config, const std::filesystem::path& dir, std::ostream& log);

/// Entity labels that keys map to: every model category except the key label.
std::vector<std::string> value_categories(const heads::TagScheme& scheme, const std::string& key_label);

struct TrainRun {
  std::unique_ptr<TrainModel> model;
  inference::LookupTable lookup;
  std::vector<std::string> mapper_categories;
  std::unique_ptr<inference::BiLstmEncoder> encoder;
  TrainResult result;
};

struct TrainOptions {
  bool write_checkpoint = true;
  bool write_metrics = true;
  bool fit_encoder = true;
};

/// Trains on in-memory documents; `eval_docs` (possibly empty) are scored at
/// each epoch end. Checkpoints and the metrics log go to the configured
/// paths unless disabled in `options`.
TrainRun train_on(const RunConfig& config, const std::vector<Document>& train_docs,
                  const std::vector<Document>& eval_docs, std::ostream& log, const TrainOptions& options = {});

/// Loads paths.train (and paths.test when present) and trains.
TrainRun train_from_disk(const RunConfig& config, std::ostream& log);

/// Scores `docs` with a trained model using the inference and evaluation
/// settings of `config`.
EvalReport evaluate_docs(const RunConfig& config, TrainModel& model, const inference::CategoryMapper& mapper,
                         const std::vector<Document>& docs);

/// Loads a checkpoint and scores the documents in `test_dir`. Throws
/// ConfigError when the documents use labels the checkpoint never saw.
EvalReport evaluate_checkpoint(const RunConfig& config, const std::string& checkpoint_dir,
                               const std::string& test_dir);

/// Extraction for one FUNSD-format document file.
inference::ExtractionResult infer_file(const RunConfig& config, const std::string& checkpoint_dir,
                                       const std::string& input_path);

}  // namespace matchvie::pipeline
