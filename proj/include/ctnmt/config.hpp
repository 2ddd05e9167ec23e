#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctnmt/concerted.hpp"
#include "ctnmt/data.hpp"
#include "ctnmt/errors.hpp"
#include "ctnmt/fusion.hpp"
#include "ctnmt/nmt_model.hpp"
#include "ctnmt/optimizer.hpp"
#include "ctnmt/teacher.hpp"

namespace ctnmt {

using Json = nlohmann::json;

struct TaskConfig {
  std::string kind = "lexswap-reorder";  // a synthetic kind, or "corpus"
  std::size_t train_pairs = 5000;
  std::size_t valid_pairs = 200;
  std::size_t test_pairs = 500;
  std::size_t mono_sentences = 0;  // 0 selects 10 x train_pairs
  std::size_t vocab_size = 40;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  double swap_prob = 0.3;
  std::uint64_t data_seed = 1;
  std::string train_path, valid_path, test_path, mono_path;
  std::size_t src_vocab_max = 0;
  std::size_t tgt_vocab_max = 0;

  bool synthetic() const { return kind != "corpus"; }
};

struct OptimConfig {
  std::string rule = "adam";
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;
  std::size_t warmup = 400;
  double lr_scale = 1.0;
  double label_smoothing = 0.1;

  OptimizerOptions options() const {
    OptimizerOptions o;
    o.rule = rule == "sgd" ? UpdateRule::sgd : UpdateRule::adam;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.eps = eps;
    o.clip_norm = clip_norm;
    return o;
  }
};

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_tokens = 2048;
  std::size_t log_every = 50;
  std::size_t valid_every = 500;
  std::size_t drift_every = 500;
  std::size_t probe_sentences = 200;
  bool save_checkpoints = true;
};

struct DecodeConfig {
  std::size_t beam = 8;
  double lenpen = 0.6;
  std::size_t max_extra = 10;  // output length limit beyond the source length
  std::size_t valid_beam = 1;  // 1 = batched greedy during validation
};

struct ExperimentConfig {
  TaskConfig task;
  NmtConfig nmt;
  TeacherConfig teacher;
  FusionConfig fusion;
  DistillSide distill_side = DistillSide::encoder;
  OptimConfig optim;
  TrainConfig train;
  DecodeConfig decode;
  std::uint64_t seed = 1;
  std::string out = "runs/default";

  // Everything that can be checked without data; run before any corpus is touched.
  void validate() const {
    if (task.synthetic()) {
      parse_synth_kind(task.kind);
      if (task.vocab_size <= 10) throw ConfigError("task.vocab_size must exceed 10");
      if (task.min_len < 1 || task.min_len > task.max_len) throw ConfigError("task length range is empty");
      if (task.train_pairs == 0) throw ConfigError("task.train_pairs must be positive");
    } else if (task.train_path.empty()) {
      throw ConfigError("task.train_path is required for corpus tasks");
    }
    if (task.valid_pairs == 0 && task.synthetic()) throw ConfigError("task.valid_pairs must be positive");
    NmtConfig n = nmt;
    n.src_vocab = n.tgt_vocab = 16;
    n.validate();
    teacher.validate();
    FusionConfig f = fusion;
    f.resolve(train.steps);
    f.validate(nmt.num_layers, teacher.num_layers);
    if (optim.rule != "adam" && optim.rule != "sgd") throw ConfigError("optimizer.rule must be adam or sgd");
    if (optim.warmup == 0) throw ConfigError("optimizer.warmup must be positive");
    if (optim.label_smoothing < 0.0 || optim.label_smoothing >= 1.0) {
      throw ConfigError("optimizer.label_smoothing must be in [0,1)");
    }
    if (train.steps == 0) throw ConfigError("train.steps must be positive");
    if (train.batch_tokens < 2 * (task.max_len + 1)) throw ConfigError("train.batch_tokens is below one sentence pair");
    if (train.log_every == 0) throw ConfigError("train.log_every must be positive");
    if (decode.beam < 1) throw ConfigError("decode.beam must be >= 1");
  }
};

namespace detail {

// Reads `key` from `obj` into `value` when present and records it as known.
class Section {
 public:
  Section(const Json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename V>
  Section& get(const std::string& key, V& value) {
    known_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return *this;
    try {
      value = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
    return *this;
  }

  const Json* sub(const std::string& key) {
    known_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!known_.count(it.key())) {
        throw ConfigError("unknown config key '" + (name_.empty() ? "" : name_ + ".") + it.key() + "'");
      }
    }
  }

 private:
  const Json& obj_;
  std::string name_;
  std::set<std::string> known_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j, ExperimentConfig cfg = {}) {
  detail::Section root(j, "");
  if (const auto* s = root.sub("task")) {
    detail::Section t(*s, "task");
    t.get("kind", cfg.task.kind).get("train_pairs", cfg.task.train_pairs).get("valid_pairs", cfg.task.valid_pairs)
        .get("test_pairs", cfg.task.test_pairs).get("mono_sentences", cfg.task.mono_sentences)
        .get("vocab_size", cfg.task.vocab_size).get("min_len", cfg.task.min_len).get("max_len", cfg.task.max_len)
        .get("swap_prob", cfg.task.swap_prob).get("data_seed", cfg.task.data_seed)
        .get("train_path", cfg.task.train_path).get("valid_path", cfg.task.valid_path)
        .get("test_path", cfg.task.test_path).get("mono_path", cfg.task.mono_path)
        .get("src_vocab_max", cfg.task.src_vocab_max).get("tgt_vocab_max", cfg.task.tgt_vocab_max);
    t.finish();
  }
  if (const auto* s = root.sub("nmt")) {
    detail::Section t(*s, "nmt");
    t.get("num_layers", cfg.nmt.num_layers).get("d_model", cfg.nmt.d_model).get("num_heads", cfg.nmt.num_heads)
        .get("d_ff", cfg.nmt.d_ff).get("dropout", cfg.nmt.dropout).get("max_len", cfg.nmt.max_len);
    t.finish();
  }
  const auto* teacher_json = root.sub("teacher");
  if (!teacher_json || !teacher_json->contains("d_model")) cfg.teacher.d_model = cfg.nmt.d_model;
  if (const auto* s = teacher_json) {
    detail::Section t(*s, "teacher");
    std::string dir = to_string(cfg.teacher.directionality);
    t.get("directionality", dir).get("num_layers", cfg.teacher.num_layers).get("d_model", cfg.teacher.d_model)
        .get("num_heads", cfg.teacher.num_heads).get("d_ff", cfg.teacher.d_ff).get("max_len", cfg.teacher.max_len)
        .get("mask_prob", cfg.teacher.mask_prob).get("pretrain_steps", cfg.teacher.pretrain_steps)
        .get("pretrain_lr", cfg.teacher.pretrain_lr).get("warmup", cfg.teacher.warmup)
        .get("batch_tokens", cfg.teacher.batch_tokens);
    t.finish();
    if (dir == "bidirectional") {
      cfg.teacher.directionality = Directionality::bidirectional;
    } else if (dir == "causal") {
      cfg.teacher.directionality = Directionality::causal;
    } else {
      throw ConfigError("teacher.directionality must be bidirectional or causal");
    }
  }
  if (const auto* s = root.sub("fusion")) {
    detail::Section t(*s, "fusion");
    std::string strategy = strategy_string(cfg.fusion);
    std::string regime = to_string(cfg.fusion.lm_regime);
    std::string side = cfg.distill_side == DistillSide::encoder ? "encoder" : "decoder";
    t.get("alpha", cfg.fusion.alpha).get("student_tap_layer", cfg.fusion.student_tap_layer)
        .get("teacher_tap_layer", cfg.fusion.teacher_tap_layer).get("strategy", strategy)
        .get("T_prime", cfg.fusion.t_prime).get("T", cfg.fusion.t_total).get("lm_regime", regime)
        .get("distill_side", side);
    t.finish();
    apply_strategy(strategy, cfg.fusion);
    cfg.fusion.lm_regime = parse_lm_regime(regime);
    if (side == "encoder") {
      cfg.distill_side = DistillSide::encoder;
    } else if (side == "decoder") {
      cfg.distill_side = DistillSide::decoder;
    } else {
      throw ConfigError("fusion.distill_side must be encoder or decoder");
    }
  }
  if (const auto* s = root.sub("optimizer")) {
    detail::Section t(*s, "optimizer");
    t.get("rule", cfg.optim.rule).get("beta1", cfg.optim.beta1).get("beta2", cfg.optim.beta2)
        .get("eps", cfg.optim.eps).get("clip_norm", cfg.optim.clip_norm).get("warmup", cfg.optim.warmup)
        .get("lr_scale", cfg.optim.lr_scale).get("label_smoothing", cfg.optim.label_smoothing);
    t.finish();
  }
  if (const auto* s = root.sub("train")) {
    detail::Section t(*s, "train");
    t.get("steps", cfg.train.steps).get("batch_tokens", cfg.train.batch_tokens).get("log_every", cfg.train.log_every)
        .get("valid_every", cfg.train.valid_every).get("drift_every", cfg.train.drift_every)
        .get("probe_sentences", cfg.train.probe_sentences).get("save_checkpoints", cfg.train.save_checkpoints);
    t.finish();
  }
  if (const auto* s = root.sub("decode")) {
    detail::Section t(*s, "decode");
    t.get("beam", cfg.decode.beam).get("lenpen", cfg.decode.lenpen).get("max_extra", cfg.decode.max_extra)
        .get("valid_beam", cfg.decode.valid_beam);
    t.finish();
  }
  root.get("seed", cfg.seed).get("out", cfg.out);
  root.finish();
  cfg.validate();
  return cfg;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["task"] = {{"kind", c.task.kind},
               {"train_pairs", c.task.train_pairs},
               {"valid_pairs", c.task.valid_pairs},
               {"test_pairs", c.task.test_pairs},
               {"mono_sentences", c.task.mono_sentences},
               {"vocab_size", c.task.vocab_size},
               {"min_len", c.task.min_len},
               {"max_len", c.task.max_len},
               {"swap_prob", c.task.swap_prob},
               {"data_seed", c.task.data_seed},
               {"train_path", c.task.train_path},
               {"valid_path", c.task.valid_path},
               {"test_path", c.task.test_path},
               {"mono_path", c.task.mono_path},
               {"src_vocab_max", c.task.src_vocab_max},
               {"tgt_vocab_max", c.task.tgt_vocab_max}};
  j["nmt"] = {{"num_layers", c.nmt.num_layers}, {"d_model", c.nmt.d_model}, {"num_heads", c.nmt.num_heads},
              {"d_ff", c.nmt.d_ff},             {"dropout", c.nmt.dropout}, {"max_len", c.nmt.max_len}};
  j["teacher"] = {{"directionality", to_string(c.teacher.directionality)},
                  {"num_layers", c.teacher.num_layers},
                  {"d_model", c.teacher.d_model},
                  {"num_heads", c.teacher.num_heads},
                  {"d_ff", c.teacher.d_ff},
                  {"max_len", c.teacher.max_len},
                  {"mask_prob", c.teacher.mask_prob},
                  {"pretrain_steps", c.teacher.pretrain_steps},
                  {"pretrain_lr", c.teacher.pretrain_lr},
                  {"warmup", c.teacher.warmup},
                  {"batch_tokens", c.teacher.batch_tokens}};
  j["fusion"] = {{"alpha", c.fusion.alpha},
                 {"student_tap_layer", c.fusion.student_tap_layer},
                 {"teacher_tap_layer", c.fusion.teacher_tap_layer},
                 {"strategy", strategy_string(c.fusion)},
                 {"T_prime", c.fusion.t_prime},
                 {"T", c.fusion.t_total},
                 {"lm_regime", to_string(c.fusion.lm_regime)},
                 {"distill_side", c.distill_side == DistillSide::encoder ? "encoder" : "decoder"}};
  j["optimizer"] = {{"rule", c.optim.rule},         {"beta1", c.optim.beta1},
                    {"beta2", c.optim.beta2},       {"eps", c.optim.eps},
                    {"clip_norm", c.optim.clip_norm}, {"warmup", c.optim.warmup},
                    {"lr_scale", c.optim.lr_scale}, {"label_smoothing", c.optim.label_smoothing}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_tokens", c.train.batch_tokens},
                {"log_every", c.train.log_every},
                {"valid_every", c.train.valid_every},
                {"drift_every", c.train.drift_every},
                {"probe_sentences", c.train.probe_sentences},
                {"save_checkpoints", c.train.save_checkpoints}};
  j["decode"] = {{"beam", c.decode.beam},
                 {"lenpen", c.decode.lenpen},
                 {"max_extra", c.decode.max_extra},
                 {"valid_beam", c.decode.valid_beam}};
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

}  // namespace ctnmt
