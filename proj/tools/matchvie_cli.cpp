// matchvie: generate a synthetic corpus, train, evaluate and run inference.
#include "matchvie/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

using namespace matchvie;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::string> ablations;
  std::optional<std::uint64_t> seed;
  std::string mapper;
};

// Config file, then --set, then the dedicated flags.
RunConfig resolve(const Common& c, const char* seed_key) {
  RunConfig rc;
  if (!c.config_path.empty()) rc.load_file(c.config_path);
  for (const auto& s : c.sets) rc.set_assignment(s);
  for (const auto& a : c.ablations) rc.ablate(a);
  if (c.seed && seed_key) rc.set(seed_key, std::to_string(*c.seed));
  if (!c.mapper.empty()) rc.set("inference.mapper", c.mapper);
  std::cerr << "# resolved configuration\n" << rc.echo() << std::flush;
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw ParseError("cannot write " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Key-value matching information extraction for form documents"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_path, "Sectioned key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "Override one key: section.key=value (repeatable)");
  app.add_option("--seed", common.seed, "Generator seed for gen, training seed otherwise");
  app.add_option("--ablate", common.ablations, "Switch off one component (repeatable)")
      ->check(CLI::IsMember({"focal", "kv", "num2vec"}));
  app.add_option("--mapper", common.mapper, "Key-to-category mapping for matched values")
      ->check(CLI::IsMember({"lookup", "semantic"}));

  auto* gen = app.add_subcommand("gen", "Write a synthetic train/test corpus with a manifest");
  std::string gen_out = "data";
  gen->add_option("--out,out_dir", gen_out, "Output directory (train/ and test/ are created inside)");

  auto* train = app.add_subcommand("train", "Train on paths.train, scoring paths.test each epoch");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a labelled directory");
  std::string eval_ckpt, eval_test;
  bool per_category = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory (default paths.checkpoint)");
  eval->add_option("--test", eval_test, "Labelled documents (default paths.test)");
  eval->add_flag("--per-category", per_category, "Print the per-category precision / recall / F1 table");

  auto* infer = app.add_subcommand("infer", "Extract entities and pairs from one document");
  std::string infer_ckpt, infer_input, infer_output;
  infer->add_option("input", infer_input, "FUNSD-format document")->required();
  infer->add_option("--checkpoint", infer_ckpt, "Checkpoint directory (default paths.checkpoint)");
  infer->add_option("--output", infer_output, "JSONL output (default paths.output/<name>.jsonl)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const RunConfig rc = resolve(common, "generator.seed");
      pipeline::write_corpus(rc, gen_out, std::cout);
    } else if (*train) {
      const RunConfig rc = resolve(common, "train.seed");
      const PathsConfig pc = rc.paths();
      if (!fs::is_directory(pc.train)) throw ParseError("training corpus not found: " + pc.train);
      pipeline::train_from_disk(rc, std::cout);
      std::cout << "checkpoint written to " << pc.checkpoint << ", metrics log " << pc.metrics << '\n';
    } else if (*eval) {
      const RunConfig rc = resolve(common, "train.seed");
      const PathsConfig pc = rc.paths();
      const std::string ckpt = eval_ckpt.empty() ? pc.checkpoint : eval_ckpt;
      const std::string test = eval_test.empty() ? pc.test : eval_test;
      const EvalReport r = pipeline::evaluate_checkpoint(rc, ckpt, test);
      std::cout << std::fixed << std::setprecision(4) << "documents " << r.documents << "\npair      P "
                << r.pairs.precision() << "  R " << r.pairs.recall() << "  F1 " << r.pairs.f1() << "\nentity    P "
                << r.entities.precision() << "  R " << r.entities.recall() << "  F1 " << r.entities.f1() << '\n';
      if (per_category) std::cout << '\n' << r.table();
      write_text(pc.report, r.to_json().dump(2) + "\n");
      std::cerr << "report written to " << pc.report << '\n';
    } else if (*infer) {
      const RunConfig rc = resolve(common, "train.seed");
      const PathsConfig pc = rc.paths();
      const std::string ckpt = infer_ckpt.empty() ? pc.checkpoint : infer_ckpt;
      const auto result = pipeline::infer_file(rc, ckpt, infer_input);
      const fs::path out =
          infer_output.empty() ? fs::path(pc.output) / (fs::path(infer_input).stem().string() + ".jsonl")
                               : fs::path(infer_output);
      write_text(out, result.to_jsonl());
      std::cout << result.records.size() << " segments, " << result.pairs.size() << " pairs written to "
                << out.string() << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
