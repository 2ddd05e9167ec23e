// ctnmt: pretrain a teacher LM, train NMT models with concerted training, translate,
// score, and run ablation grids.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ctnmt/experiment.hpp"

namespace fs = std::filesystem;
using namespace ctnmt;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kRuntime = 4 };

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load_with_overrides(const CommonFlags& f) {
  auto cfg = f.config.empty() ? config_from_json(Json::object()) : load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out = f.out;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

int cmd_pretrain(const CommonFlags& flags, const std::string& mono_path) {
  auto cfg = load_with_overrides(flags);
  if (!mono_path.empty() && !fs::exists(mono_path)) throw ConfigError("monolingual corpus not found: " + mono_path);
  auto data = prepare_data(cfg.task);
  auto mono = prepare_mono(cfg.task, data.src_vocab, mono_path);
  TeacherLm<float> teacher(teacher_config_for(cfg, data.src_vocab), cfg.seed);
  auto report = pretrain_teacher(teacher, mono, mix_seed(cfg.seed, 0x7EAC));
  fs::create_directories(cfg.out);
  write_checkpoint(cfg.out + "/teacher.ckpt", teacher_checkpoint(teacher, cfg, data.src_vocab, report));
  data.src_vocab.save(cfg.out + "/src.vocab");
  Json summary = {{"final_loss", report.final_loss},
                  {"masked_accuracy", report.masked_accuracy},
                  {"steps", report.steps},
                  {"sentences", mono.size()}};
  write_text(cfg.out + "/pretrain.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << std::endl;
  return kOk;
}

int cmd_train(const CommonFlags& flags, const std::string& teacher_path, const std::optional<std::string>& strategy,
              const std::string& resume) {
  auto cfg = load_with_overrides(flags);
  if (strategy) apply_strategy(*strategy, cfg.fusion);
  cfg.validate();
  if (cfg.fusion.needs_teacher() && teacher_path.empty()) {
    throw ConfigError("strategy " + strategy_string(cfg.fusion) + " requires --teacher");
  }
  if (!teacher_path.empty() && !fs::exists(teacher_path)) throw ConfigError("teacher checkpoint not found: " + teacher_path);
  auto data = prepare_data(cfg.task);
  std::shared_ptr<TeacherLm<float>> teacher;
  if (!teacher_path.empty()) teacher = load_teacher(read_checkpoint(teacher_path), data.src_vocab);
  fs::create_directories(cfg.out);
  data.src_vocab.save(cfg.out + "/src.vocab");
  data.tgt_vocab.save(cfg.out + "/tgt.vocab");
  write_text(cfg.out + "/config.json", config_to_json(cfg).dump(2) + "\n");
  Trainer trainer(cfg, data, teacher.get());
  if (!resume.empty()) trainer.restore(read_checkpoint(resume));
  MetricsLog log(cfg.out + "/metrics.jsonl");
  trainer.run(log, cfg.out);
  Json summary = {{"steps", trainer.steps_done()}, {"best_valid_bleu", trainer.best_bleu()}};
  std::cout << summary.dump() << std::endl;
  return kOk;
}

struct LoadedModel {
  std::unique_ptr<ConcertedModel<float>> model;
  ExperimentConfig cfg;
  Vocab src_vocab, tgt_vocab;
};

LoadedModel load_for_decoding(const std::string& path, const std::string& vocab_dir) {
  if (!fs::exists(path)) throw ConfigError("model checkpoint not found: " + path);
  auto ck = read_checkpoint(path);
  const std::string dir = vocab_dir.empty() ? fs::path(path).parent_path().string() : vocab_dir;
  LoadedModel m;
  m.src_vocab = Vocab::load((fs::path(dir) / "src.vocab").string());
  m.tgt_vocab = Vocab::load((fs::path(dir) / "tgt.vocab").string());
  if (m.src_vocab.hash() != ck.src_vocab_hash || m.tgt_vocab.hash() != ck.tgt_vocab_hash) {
    throw DataError("vocabulary files in " + dir + " do not match the checkpoint's vocabulary hashes");
  }
  m.model = load_model(ck, &m.cfg, m.src_vocab.size(), m.tgt_vocab.size());
  return m;
}

std::vector<std::string> translate_lines(const LoadedModel& m, const std::vector<std::string>& lines, std::size_t beam,
                                         double lenpen) {
  std::vector<std::string> out;
  for (const auto& line : lines) {
    auto src = m.src_vocab.encode(tokenize(line));
    if (src.empty()) {
      out.emplace_back();
      continue;
    }
    const auto limit = std::min(src.size() + m.cfg.decode.max_extra, m.cfg.nmt.max_len);
    out.push_back(detokenize(m.tgt_vocab.decode(translate(*m.model, src, beam, lenpen, limit))));
  }
  return out;
}

int cmd_translate(const std::string& model, const std::string& vocab_dir, const std::string& input,
                  const std::string& output, std::optional<std::size_t> beam, std::optional<double> lenpen) {
  if (!fs::exists(input)) throw ConfigError("input file not found: " + input);
  auto m = load_for_decoding(model, vocab_dir);
  const auto width = beam.value_or(m.cfg.decode.beam);
  if (width < 1) throw ConfigError("--beam must be >= 1");
  write_lines(output, translate_lines(m, read_lines(input), width, lenpen.value_or(m.cfg.decode.lenpen)));
  return kOk;
}

int cmd_evaluate(const std::string& hyp_path, const std::string& ref_path, const std::string& model,
                 const std::string& vocab_dir, const std::string& input, std::optional<std::size_t> beam,
                 std::optional<double> lenpen) {
  if (!fs::exists(ref_path)) throw ConfigError("reference file not found: " + ref_path);
  std::vector<std::string> hyp_lines;
  if (!model.empty()) {
    if (!fs::exists(input)) throw ConfigError("input file not found: " + input);
    auto m = load_for_decoding(model, vocab_dir);
    hyp_lines = translate_lines(m, read_lines(input), beam.value_or(m.cfg.decode.beam),
                                lenpen.value_or(m.cfg.decode.lenpen));
  } else {
    if (!fs::exists(hyp_path)) throw ConfigError("hypothesis file not found: " + hyp_path);
    hyp_lines = read_lines(hyp_path);
  }
  std::vector<Words> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(tokenize(l));
  for (const auto& l : read_lines(ref_path)) refs.push_back(tokenize(l));
  if (hyps.size() != refs.size()) {
    throw DataError(std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) + " references");
  }
  std::cout << "BLEU = " << detail::fixed(bleu(hyps, refs)) << std::endl;
  return kOk;
}

int cmd_experiment(const std::string& config, const std::string& out, std::optional<std::size_t> workers) {
  if (config.empty()) throw ConfigError("experiment needs --config");
  auto grid = grid_from_json(read_json_file(config));
  if (!out.empty()) grid.out = out;
  if (grid.out.empty()) grid.out = "runs/experiment";
  if (workers) grid.workers = *workers;
  for (const auto& cell : expand_grid(grid)) {
    config_from_json(detail::cell_config_json(grid, cell, 0));
  }
  auto result = run_grid(grid, &std::cerr);
  write_results_table(std::cout, result.summaries);
  if (result.failures()) {
    std::cerr << result.failures() << " run(s) failed; see " << grid.out << "/runs.tsv" << std::endl;
    return kRuntime;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concerted training of transformer NMT with a pretrained teacher LM"};
  app.require_subcommand(1);

  CommonFlags common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--seed", common.seed, "Override the config seed");
    sub->add_option("--out", common.out, "Output directory");
  };

  std::string mono_path, teacher_path, resume, model, vocab_dir, input, output, hyp, ref;
  std::optional<std::string> strategy;
  std::optional<std::size_t> beam, workers;
  std::optional<double> lenpen;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the teacher language model");
  add_common(pretrain);
  pretrain->add_option("--mono", mono_path, "Monolingual corpus (one sentence per line)");

  auto* train = app.add_subcommand("train", "Train an NMT model");
  add_common(train);
  train->add_option("--teacher", teacher_path, "Teacher checkpoint");
  train->add_option("--strategy", strategy, "Comma-separated subset of ad,ds,sched (or none)");
  train->add_option("--resume", resume, "Model checkpoint to continue from");

  auto* tr = app.add_subcommand("translate", "Translate a tokenized file");
  tr->add_option("--model", model, "Model checkpoint")->required();
  tr->add_option("--vocab-dir", vocab_dir, "Directory with src.vocab and tgt.vocab");
  tr->add_option("--input", input, "Source sentences")->required();
  tr->add_option("--output", output, "Output file")->required();
  tr->add_option("--beam", beam, "Beam width");
  tr->add_option("--lenpen", lenpen, "Length penalty exponent");

  auto* ev = app.add_subcommand("evaluate", "Corpus BLEU of hypotheses (or of a model's translations)");
  ev->add_option("--hyp", hyp, "Hypothesis file");
  ev->add_option("--ref", ref, "Reference file")->required();
  ev->add_option("--model", model, "Model checkpoint to translate --input with");
  ev->add_option("--vocab-dir", vocab_dir, "Directory with src.vocab and tgt.vocab");
  ev->add_option("--input", input, "Source sentences for --model");
  ev->add_option("--beam", beam, "Beam width");
  ev->add_option("--lenpen", lenpen, "Length penalty exponent");

  auto* ex = app.add_subcommand("experiment", "Run an ablation grid");
  ex->add_option("--config", common.config, "Grid config file");
  ex->add_option("--out", common.out, "Output directory");
  ex->add_option("--workers", workers, "Parallel workers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(common, mono_path);
    if (*train) return cmd_train(common, teacher_path, strategy, resume);
    if (*tr) return cmd_translate(model, vocab_dir, input, output, beam, lenpen);
    if (*ev) {
      if (hyp.empty() && model.empty()) throw ConfigError("evaluate needs --hyp or --model");
      return cmd_evaluate(hyp, ref, model, vocab_dir, input, beam, lenpen);
    }
    if (*ex) return cmd_experiment(common.config, common.out, workers);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << std::endl;
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntime;
  }
  return kUsage;
}
