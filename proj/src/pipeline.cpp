#include "matchvie/pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>

namespace matchvie::pipeline {

namespace fs = std::filesystem;

std::uint64_t test_seed(std::uint64_t seed) { return seed * 0x9e3779b97f4a7c15ULL + 0x7e57ULL; }

Corpus synthesize(const RunConfig& config) {
  GenConfig gen = config.generator();
  Corpus c;
  c.train = generate_synthetic_corpus(gen, config.generator_seed(), "train");
  gen.num_docs = config.test_docs();
  c.test = generate_synthetic_corpus(gen, test_seed(config.generator_seed()), "test");
  return c;
}

namespace {

void write_split(const std::vector<Document>& docs, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && (e.path().extension() == ".json" || e.path().extension() == ".pgm"))
      fs::remove(e.path());
  for (const auto& d : docs) {
    save_funsd_document(d, dir / (d.id + ".json"));
    if (d.image) write_pgm(*d.image, dir / (d.id + ".pgm"));
  }
}

std::vector<Document> concat(const std::vector<Document>& a, const std::vector<Document>& b) {
  std::vector<Document> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

CorpusStats write_corpus(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  const Corpus c = synthesize(config);
  write_split(c.train, dir / "train");
  write_split(c.test, dir / "test");
  CorpusStats stats;
  stats.num_train = c.train.size();
  stats.num_test = c.test.size();
  stats.num_categories = static_cast<std::size_t>(config.generator().num_categories);
  stats.kv_ratio = kv_ratio(concat(c.train, c.test));
  const nlohmann::json manifest = {
      {"seed", config.generator_seed()},
      {"test_seed", test_seed(config.generator_seed())},
      {"num_train", stats.num_train},
      {"num_test", stats.num_test},
      {"num_categories", stats.num_categories},
      {"categories", synthetic_categories(config.generator().num_categories)},
      {"kv_ratio", stats.kv_ratio},
      {"kv_ratio_train", kv_ratio(c.train)},
      {"kv_ratio_test", kv_ratio(c.test)},
      {"target_kv_ratio", config.generator().kv_ratio},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw ParseError("failed writing " + (dir / "manifest.json").string());
  log << "wrote " << stats.num_train << " train and " << stats.num_test << " test documents to " << dir.string()
      << " (kv_ratio " << std::fixed << std::setprecision(4) << stats.kv_ratio << ")\n";
  return stats;
}

std::vector<std::string> value_categories(const heads::TagScheme& scheme, const std::string& key_label) {
  std::vector<std::string> out;
  for (const auto& c : scheme.categories())
    if (c != key_label) out.push_back(c);
  return out;
}

TrainRun train_on(const RunConfig& config, const std::vector<Document>& train_docs,
                  const std::vector<Document>& eval_docs, std::ostream& log, const TrainOptions& options) {
  const ModelConfig mc = config.model();
  const TrainConfig tc = config.train();
  const InferenceConfig ic = config.inference();
  const PathsConfig pc = config.paths();
  if (train_docs.empty()) throw TrainingError("training corpus is empty");

  TrainRun run;
  run.model = build_model(mc, train_docs, config.min_freq(), tc.seed);
  TrainModel& model = *run.model;
  run.mapper_categories = value_categories(model.scheme(), ic.key_label);
  run.lookup = inference::LookupTable::build(train_docs, run.mapper_categories);

  std::vector<TrainExample> examples;
  examples.reserve(train_docs.size());
  for (const auto& d : train_docs) examples.push_back(model.prepare(d));

  const std::size_t n_eval = std::min(eval_docs.size(), static_cast<std::size_t>(std::max(0, tc.eval_docs)));
  const std::vector<Document> held(eval_docs.begin(), eval_docs.begin() + static_cast<std::ptrdiff_t>(n_eval));
  check_categories(model.scheme(), held);
  std::vector<TrainExample> eval_examples;
  for (const auto& d : held) eval_examples.push_back(model.prepare(d));
  // Per-epoch scores use the lookup table; the encoder is fitted afterwards.
  InferenceConfig epoch_inference = ic;
  if (epoch_inference.mapper == "semantic") epoch_inference.mapper = "lookup";
  const auto epoch_mapper = make_mapper(run.lookup, run.mapper_categories, nullptr, epoch_inference);
  EvalSetup eval{&eval_examples, {epoch_mapper.get(), epoch_inference},
                 {tc.eval_skip_labels, tc.entity_granularity}};

  log << "training on " << train_docs.size() << " documents (" << model.vocabulary().size() << " vocabulary rows, "
      << model.scheme().num_categories() << " categories, " << model.params().num_scalars() << " parameters), "
      << held.size() << " held-out documents scored per epoch\n";

  std::ofstream metrics;
  if (options.write_metrics) {
    const fs::path mp(pc.metrics);
    if (mp.has_parent_path()) fs::create_directories(mp.parent_path());
    metrics.open(mp);
    if (!metrics) throw ParseError("cannot write metrics log " + pc.metrics);
  }
  auto save = [&] {
    if (options.write_checkpoint)
      save_checkpoint(pc.checkpoint, config, model, run.lookup, run.mapper_categories, run.encoder.get());
  };

  TrainHooks hooks;
  hooks.on_record = [&](const StepRecord& r) {
    if (metrics.is_open()) metrics << r.to_json().dump() << '\n' << std::flush;
  };
  hooks.on_epoch_end = [&](const StepRecord& r) {
    log << "epoch " << r.epoch << std::fixed << std::setprecision(4) << "  loss " << r.loss_total << " (entity "
        << r.loss_entity << ", relevancy " << r.loss_re << ")";
    if (r.pair_f1) log << "  pair F1 " << *r.pair_f1 << "  entity F1 " << *r.entity_f1;
    log << '\n' << std::flush;
    save();
  };

  run.result = train(model, examples, tc, held.empty() ? nullptr : &eval, hooks);

  if (options.fit_encoder && tc.mapper_epochs > 0 && !run.mapper_categories.empty()) {
    run.encoder = train_semantic_encoder(model, train_docs, run.mapper_categories, tc);
    log << "fitted the semantic key encoder on " << mapper_examples(train_docs, run.mapper_categories).size()
        << " key texts\n";
  }
  save();
  return run;
}

TrainRun train_from_disk(const RunConfig& config, std::ostream& log) {
  const PathsConfig pc = config.paths();
  const auto train_docs = load_funsd_directory(pc.train);
  std::vector<Document> test_docs;
  if (config.train().eval_docs > 0) {
    if (fs::is_directory(pc.test))
      test_docs = load_funsd_directory(pc.test);
    else
      log << "no held-out directory at " << pc.test << ", skipping per-epoch evaluation\n";
  }
  return train_on(config, train_docs, test_docs, log);
}

EvalReport evaluate_docs(const RunConfig& config, TrainModel& model, const inference::CategoryMapper& mapper,
                         const std::vector<Document>& docs) {
  const TrainConfig tc = config.train();
  std::vector<TrainExample> examples;
  examples.reserve(docs.size());
  for (const auto& d : docs) examples.push_back(model.prepare(d));
  return evaluate(model, examples, {&mapper, config.inference()}, {tc.eval_skip_labels, tc.entity_granularity});
}

EvalReport evaluate_checkpoint(const RunConfig& config, const std::string& checkpoint_dir,
                               const std::string& test_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_dir);
  const auto docs = load_funsd_directory(test_dir);
  check_categories(ckpt.model->scheme(), docs);
  const auto mapper = make_mapper(ckpt, config.inference());
  return evaluate_docs(config, *ckpt.model, *mapper, docs);
}

inference::ExtractionResult infer_file(const RunConfig& config, const std::string& checkpoint_dir,
                                       const std::string& input_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_dir);
  const Document doc = load_funsd_document(input_path);
  const auto mapper = make_mapper(ckpt, config.inference());
  const TrainExample ex = ckpt.model->prepare(doc);
  return Extractor{mapper.get(), config.inference()}.run(*ckpt.model, ex);
}

}  // namespace matchvie::pipeline
