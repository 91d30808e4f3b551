#include "matchvie/training.hpp"

#include "matchvie/optim.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <tuple>

namespace matchvie {

namespace fs = std::filesystem;

std::unique_ptr<TrainModel> build_model(const ModelConfig& cfg, const std::vector<Document>& docs, int min_freq,
                                        std::uint64_t seed) {
  return std::make_unique<TrainModel>(cfg, build_vocabulary(docs, min_freq, {.add_characters = true}),
                                      heads::TagScheme(entity_categories(docs)), seed);
}

void check_categories(const heads::TagScheme& scheme, const std::vector<Document>& docs) {
  const auto& known = scheme.categories();
  for (const auto& c : entity_categories(docs))
    if (std::find(known.begin(), known.end(), c) == known.end())
      throw ConfigError("label '" + c + "' is not among the checkpoint's categories");
}

nlohmann::json PRF::to_json() const {
  return {{"tp", tp}, {"fp", fp}, {"fn", fn}, {"precision", precision()}, {"recall", recall()}, {"f1", f1()}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [c, prf] : per_category) cats[c] = prf.to_json();
  return {{"documents", documents}, {"pairs", pairs.to_json()}, {"entities", entities.to_json()}, {"per_category", cats}};
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "category" << std::right << std::setw(10) << "precision" << std::setw(10)
     << "recall" << std::setw(10) << "f1" << std::setw(8) << "gold" << '\n';
  os << std::fixed << std::setprecision(4);
  auto row = [&](const std::string& name, const PRF& p) {
    os << std::left << std::setw(16) << name << std::right << std::setw(10) << p.precision() << std::setw(10)
       << p.recall() << std::setw(10) << p.f1() << std::setw(8) << (p.tp + p.fn) << '\n';
  };
  for (const auto& [c, prf] : per_category) row(c, prf);
  row("micro", entities);
  row("pairs", pairs);
  return os.str();
}

void score_document(const Document& gold, const inference::ExtractionResult& pred, const EvalOptions& options,
                    EvalReport& report) {
  using inference::Record;
  ++report.documents;
  std::set<std::pair<int, int>> gold_pairs, pred_pairs;
  for (const auto& l : gold.links()) gold_pairs.emplace(l.key, l.value);
  for (const auto& p : pred.pairs) pred_pairs.emplace(p.key, p.value);
  for (const auto& p : pred_pairs) (gold_pairs.count(p) ? report.pairs.tp : report.pairs.fp)++;
  for (const auto& g : gold_pairs)
    if (!pred_pairs.count(g)) report.pairs.fn++;

  const std::set<std::string> skip(options.skip_labels.begin(), options.skip_labels.end());
  auto counted = [&](const std::string& label) { return !label.empty() && label != "other" && !skip.count(label); };
  using Entity = std::tuple<int, int, int, std::string>;  // segment, start, end, category
  const bool spans = options.granularity == "span";
  std::set<Entity> g, p;
  for (std::size_t i = 0; i < gold.segments.size(); ++i) {
    const auto& s = gold.segments[i];
    if (counted(s.label)) g.emplace(static_cast<int>(i), 0, spans ? static_cast<int>(s.tokens.size()) : 0, s.label);
  }
  for (const auto& r : pred.records) {
    const int len = spans ? static_cast<int>(gold.segments[static_cast<std::size_t>(r.segment_id)].tokens.size()) : 0;
    if (r.role == Record::Role::Key || r.role == Record::Role::Value) {
      if (counted(r.category)) p.emplace(r.segment_id, 0, len, r.category);
    } else if (r.role == Record::Role::Standalone) {
      if (!spans) {
        if (counted(r.category)) p.emplace(r.segment_id, 0, 0, r.category);
        continue;
      }
      for (std::size_t k = 0; k < r.spans.size(); ++k)
        if (counted(r.span_categories[k]))
          p.emplace(r.segment_id, r.spans[k].start, r.spans[k].end, r.span_categories[k]);
    }
  }
  for (const auto& e : p) {
    const bool hit = g.count(e) > 0;
    (hit ? report.entities.tp : report.entities.fp)++;
    (hit ? report.per_category[std::get<3>(e)].tp : report.per_category[std::get<3>(e)].fp)++;
  }
  for (const auto& e : g)
    if (!p.count(e)) {
      report.entities.fn++;
      report.per_category[std::get<3>(e)].fn++;
    }
}

inference::ExtractionResult Extractor::run(TrainModel& model, const TrainExample& ex) const {
  if (ex.num_segments() == 0) return {};
  const auto pred = model.predict(ex);
  std::vector<inference::MatchedPair> pairs;
  if (pred.probs.size() > 0) pairs = inference::match_pairs(pred.probs, inference.threshold);
  return inference::merge_predictions(*ex.doc, pairs, pred.segments, model.scheme(), *mapper,
                                      {.key_label = inference.key_label});
}

EvalReport evaluate(TrainModel& model, const std::vector<TrainExample>& examples, const Extractor& extractor,
                    const EvalOptions& options) {
  EvalReport report;
  for (const auto& ex : examples) score_document(*ex.doc, extractor.run(model, ex), options, report);
  return report;
}

nlohmann::json StepRecord::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", epoch},         {"step", step},       {"loss_total", loss_total}, {"loss_entity", loss_entity},
          {"loss_re", loss_re},     {"pair_f1", opt(pair_f1)}, {"entity_f1", opt(entity_f1)}};
}

TrainResult train(TrainModel& model, const std::vector<TrainExample>& examples, const TrainConfig& config,
                  const EvalSetup* eval, const TrainHooks& hooks) {
  config.validate();
  if (examples.empty()) throw TrainingError("training corpus is empty");
  auto& store = model.params();
  Adam<float> opt(store, {.lr = config.learning_rate, .clip_norm = config.clip_norm});
  InitRng shuffle(config.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  TrainResult result;
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[shuffle.below(k)]);
    double ep_total = 0, ep_entity = 0, ep_re = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
      ad::Gradients<float> grads(store);
      StepRecord rec;
      rec.epoch = epoch;
      for (std::size_t k = b; k < end; ++k) {
        ad::Tape<float> tape;
        const auto losses = model.loss(tape, examples[order[k]]);
        tape.backward(losses.total);
        tape.collect(grads);
        rec.loss_total += static_cast<double>(losses.total.scalar());
        rec.loss_entity += losses.entity;
        rec.loss_re += losses.re;
      }
      const double count = static_cast<double>(end - b);
      if (end - b > 1) grads.scale(static_cast<float>(1.0 / count));
      opt.step(store, grads);
      rec.step = ++step;
      rec.loss_total /= count;
      rec.loss_entity /= count;
      rec.loss_re /= count;
      ep_total += rec.loss_total * count;
      ep_entity += rec.loss_entity * count;
      ep_re += rec.loss_re * count;
      result.step_losses.push_back(rec.loss_total);
      if (hooks.on_record) hooks.on_record(rec);
    }
    const double n = static_cast<double>(order.size());
    StepRecord summary{epoch, step, ep_total / n, ep_entity / n, ep_re / n, std::nullopt, std::nullopt};
    if (eval && eval->examples && !eval->examples->empty()) {
      const EvalReport r = evaluate(model, *eval->examples, eval->extractor, eval->options);
      summary.pair_f1 = r.pairs.f1();
      summary.entity_f1 = r.entities.f1();
    }
    result.epochs.push_back(summary);
    if (hooks.on_record) hooks.on_record(summary);
    if (hooks.on_epoch_end) hooks.on_epoch_end(summary);
  }
  return result;
}

std::vector<std::pair<std::string, int>> mapper_examples(const std::vector<Document>& docs,
                                                         const std::vector<std::string>& categories) {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& d : docs)
    for (const auto& l : d.links()) {
      const auto& label = d.segments[static_cast<std::size_t>(l.value)].label;
      const auto it = std::find(categories.begin(), categories.end(), label);
      if (it != categories.end())
        out.emplace_back(d.segments[static_cast<std::size_t>(l.key)].text, static_cast<int>(it - categories.begin()));
    }
  return out;
}

std::unique_ptr<inference::BiLstmEncoder> train_semantic_encoder(const TrainModel& model,
                                                                 const std::vector<Document>& docs,
                                                                 const std::vector<std::string>& categories,
                                                                 const TrainConfig& config) {
  const ad::Mat<double> table = model.params().get("backbone/token_table").value.cast<double>();
  auto enc = std::make_unique<inference::BiLstmEncoder>(model.vocabulary(), table, config.mapper_hidden,
                                                        config.seed + 17);
  std::vector<std::string> phrases;
  for (const auto& c : categories) phrases.push_back(inference::category_phrase(c));
  enc->fit(mapper_examples(docs, categories), phrases, config.mapper_epochs, config.mapper_lr, config.seed);
  return enc;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'V', 'I', 'E', 'A', 'R', 'R', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError("checkpoint file " + path + " is truncated");
  return v;
}

template <typename Scalar>
NamedArrays export_params(const ad::ParamStore<Scalar>& store) {
  NamedArrays out;
  for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store[i].name, store[i].value.template cast<double>());
  return out;
}

template <typename Scalar>
void import_params(ad::ParamStore<Scalar>& store, const NamedArrays& arrays, const std::string& path) {
  std::map<std::string, const ad::Mat<double>*> by_name;
  for (const auto& [n, m] : arrays) by_name[n] = &m;
  if (by_name.size() != store.size())
    throw ParseError(path + ": holds " + std::to_string(by_name.size()) + " arrays, model expects " +
                     std::to_string(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ParseError(path + ": missing parameter " + p.name);
    if (it->second->rows() != p.value.rows() || it->second->cols() != p.value.cols())
      throw ParseError(path + ": parameter " + p.name + " has shape " + std::to_string(it->second->rows()) + "x" +
                       std::to_string(it->second->cols()) + ", model expects " + std::to_string(p.value.rows()) + "x" +
                       std::to_string(p.value.cols()));
    p.value = it->second->template cast<Scalar>();
  }
}

}  // namespace

void write_arrays(const std::string& path, const NamedArrays& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, arrays.size());
  for (const auto& [name, m] : arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::int64_t>(out, m.rows());
    put<std::int64_t>(out, m.cols());
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw ParseError("failed writing " + path);
}

NamedArrays read_arrays(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint file " + path);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError(path + " is not a parameter file");
  const auto count = take<std::uint64_t>(in, path);
  NamedArrays out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = take<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw ParseError("checkpoint file " + path + " is truncated");
    const auto rows = take<std::int64_t>(in, path), cols = take<std::int64_t>(in, path);
    if (rows < 0 || cols < 0) throw ParseError(path + ": negative shape for " + name);
    ad::Mat<double> m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size())))
      throw ParseError("checkpoint file " + path + " is truncated");
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

void save_checkpoint(const std::string& dir, const RunConfig& config, const TrainModel& model,
                     const inference::LookupTable& lookup, const std::vector<std::string>& mapper_categories,
                     const inference::BiLstmEncoder* encoder) {
  fs::create_directories(dir);
  const fs::path root(dir);
  write_arrays((root / "params.bin").string(), export_params(model.params()));
  model.vocabulary().save(root / "vocab.tsv");
  nlohmann::json meta = {{"format", 1},
                         {"config", config.to_json()},
                         {"categories", model.scheme().categories()},
                         {"lookup", lookup.to_json()},
                         {"mapper_categories", mapper_categories}};
  if (encoder) {
    meta["mapper_hidden"] = encoder->hidden();
    write_arrays((root / "mapper.bin").string(), export_params(encoder->params()));
  } else if (fs::exists(root / "mapper.bin")) {
    fs::remove(root / "mapper.bin");
  }
  std::ofstream out(root / "meta.json");
  out << meta.dump(2) << '\n';
  if (!out) throw ParseError("failed writing " + (root / "meta.json").string());
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "meta.json")) throw ParseError("no checkpoint at " + dir + " (meta.json missing)");
  std::ifstream in(root / "meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((root / "meta.json").string() + ": " + e.what());
  }
  Checkpoint c;
  c.config = RunConfig::from_json(meta.at("config"));
  Vocabulary vocab = Vocabulary::load(root / "vocab.tsv");
  heads::TagScheme scheme(meta.at("categories").get<std::vector<std::string>>());
  c.model = std::make_unique<TrainModel>(c.config.model(), std::move(vocab), std::move(scheme), 0);
  import_params(c.model->params(), read_arrays((root / "params.bin").string()), (root / "params.bin").string());
  c.lookup = inference::LookupTable::from_json(meta.at("lookup"));
  c.mapper_categories = meta.at("mapper_categories").get<std::vector<std::string>>();
  if (meta.contains("mapper_hidden")) {
    const ad::Mat<double> table = c.model->params().get("backbone/token_table").value.cast<double>();
    c.encoder = std::make_unique<inference::BiLstmEncoder>(c.model->vocabulary(), table,
                                                           meta.at("mapper_hidden").get<int>(), 0);
    import_params(c.encoder->params(), read_arrays((root / "mapper.bin").string()), (root / "mapper.bin").string());
  }
  return c;
}

std::unique_ptr<inference::CategoryMapper> make_mapper(const inference::LookupTable& lookup,
                                                       const std::vector<std::string>& categories,
                                                       const inference::BiLstmEncoder* encoder,
                                                       const InferenceConfig& inference) {
  if (!inference.value_label.empty()) return std::make_unique<inference::FixedMapper>(inference.value_label);
  if (inference.mapper == "semantic") {
    if (!encoder) throw ConfigError("inference.mapper = semantic but no fitted encoder is available");
    std::shared_ptr<const inference::TextEncoder> enc(encoder, [](const inference::TextEncoder*) {});
    return std::make_unique<inference::SemanticMapper>(enc, categories);
  }
  return std::make_unique<inference::LookupMapper>(lookup);
}

std::unique_ptr<inference::CategoryMapper> make_mapper(const Checkpoint& ckpt, const InferenceConfig& inference) {
  return make_mapper(ckpt.lookup, ckpt.mapper_categories, ckpt.encoder.get(), inference);
}

}  // namespace matchvie
