#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ctnmt/checkpoint.hpp"
#include "ctnmt/config.hpp"
#include "ctnmt/eval.hpp"

namespace ctnmt {

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  Vocab src_vocab;
  Vocab tgt_vocab;
  std::vector<SentencePair> train;
  std::vector<SentencePair> valid;
  std::vector<SentencePair> test;
};

namespace detail {

inline Sentence synth_ids(const IndexSentence& s) {
  Sentence out;
  out.reserve(s.size());
  for (int w : s) out.push_back(static_cast<TokenId>(w + kNumReserved));
  return out;
}

inline SynthOptions synth_options(const TaskConfig& task, std::size_t n, std::uint64_t stream) {
  SynthOptions o;
  o.kind = parse_synth_kind(task.kind);
  o.n_pairs = n;
  o.vocab_size = task.vocab_size;
  o.min_len = task.min_len;
  o.max_len = task.max_len;
  o.seed = task.data_seed;
  o.swap_prob = task.swap_prob;
  o.mono_factor = 0;
  o.stream = stream;
  return o;
}

inline std::vector<SentencePair> synth_pairs(const TaskConfig& task, std::size_t n, std::uint64_t stream) {
  std::vector<SentencePair> out;
  for (const auto& [s, t] : synth_task(synth_options(task, n, stream)).pairs) out.push_back({synth_ids(s), synth_ids(t)});
  return out;
}

inline std::vector<SentencePair> encode_pairs(const ParallelCorpus& corpus, const Vocab& src, const Vocab& tgt) {
  std::vector<SentencePair> out;
  for (const auto& p : corpus.pairs) out.push_back({src.encode(p.src), tgt.encode(p.tgt)});
  return out;
}

inline void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

}  // namespace detail

// Parallel data and vocabularies; a pure function of the task section.
inline PreparedData prepare_data(const TaskConfig& task) {
  PreparedData d;
  if (task.synthetic()) {
    d.src_vocab = d.tgt_vocab = synth_vocab(task.vocab_size);
    d.train = detail::synth_pairs(task, task.train_pairs, 0);
    d.valid = detail::synth_pairs(task, task.valid_pairs, 1);
    d.test = detail::synth_pairs(task, task.test_pairs, 2);
    return d;
  }
  detail::require_file(task.train_path, "training corpus");
  auto train = load_parallel(task.train_path);
  std::vector<Words> src_side, tgt_side;
  for (const auto& p : train.pairs) {
    src_side.push_back(p.src);
    tgt_side.push_back(p.tgt);
  }
  if (src_side.empty()) throw DataError(task.train_path + ": no sentence pairs");
  d.src_vocab = build_vocab(src_side, task.src_vocab_max);
  d.tgt_vocab = build_vocab(tgt_side, task.tgt_vocab_max);
  d.train = detail::encode_pairs(train, d.src_vocab, d.tgt_vocab);
  if (!task.valid_path.empty()) {
    detail::require_file(task.valid_path, "validation corpus");
    d.valid = detail::encode_pairs(load_parallel(task.valid_path), d.src_vocab, d.tgt_vocab);
  }
  if (!task.test_path.empty()) {
    detail::require_file(task.test_path, "test corpus");
    d.test = detail::encode_pairs(load_parallel(task.test_path), d.src_vocab, d.tgt_vocab);
  }
  return d;
}

// Monolingual source-side sentences for teacher pretraining.
inline std::vector<Sentence> prepare_mono(const TaskConfig& task, const Vocab& src_vocab,
                                          const std::string& override_path = "") {
  const std::string path = override_path.empty() ? task.mono_path : override_path;
  std::vector<Sentence> out;
  if (!path.empty()) {
    detail::require_file(path, "monolingual corpus");
    for (const auto& words : load_monolingual(path)) out.push_back(src_vocab.encode(words));
    if (out.empty()) throw DataError(path + ": empty monolingual corpus");
    return out;
  }
  if (!task.synthetic()) throw ConfigError("corpus tasks need task.mono_path or --mono for pretraining");
  const std::size_t n = task.mono_sentences ? task.mono_sentences : 10 * task.train_pairs;
  auto opt = detail::synth_options(task, 1, 3);
  opt.mono_factor = n;
  for (const auto& s : synth_task(opt).mono) out.push_back(detail::synth_ids(s));
  return out;
}

inline TeacherConfig teacher_config_for(const ExperimentConfig& cfg, const Vocab& src_vocab) {
  TeacherConfig t = cfg.teacher;
  t.vocab = src_vocab.size();
  return t;
}

inline NmtConfig nmt_config_for(const ExperimentConfig& cfg, const PreparedData& data) {
  NmtConfig n = cfg.nmt;
  n.src_vocab = data.src_vocab.size();
  n.tgt_vocab = data.tgt_vocab.size();
  return n;
}

// ---------------------------------------------------------------------------
// Teacher checkpoints

inline CheckpointData teacher_checkpoint(const TeacherLm<float>& teacher, const ExperimentConfig& cfg,
                                         const Vocab& src_vocab, const PretrainReport& report) {
  CheckpointData ck;
  ck.kind = "teacher";
  ck.step = report.steps;
  ck.src_vocab_hash = src_vocab.hash();
  Json echo = config_to_json(cfg);
  echo["pretrain_report"] = {{"final_loss", report.final_loss}, {"masked_accuracy", report.masked_accuracy}};
  ck.config_json = echo.dump();
  append_tensors(ck, teacher.params().items());
  return ck;
}

inline std::shared_ptr<TeacherLm<float>> load_teacher(const CheckpointData& ck, const Vocab& src_vocab) {
  if (ck.kind != "teacher") throw CheckpointError("expected a teacher checkpoint, found '" + ck.kind + "'");
  if (ck.src_vocab_hash != src_vocab.hash()) {
    throw DataError("teacher vocabulary hash differs from the source vocabulary of this task");
  }
  Json echo = Json::parse(ck.config_json);
  echo.erase("pretrain_report");
  const auto cfg = config_from_json(echo);
  auto teacher = std::make_shared<TeacherLm<float>>(teacher_config_for(cfg, src_vocab), 0);
  restore_tensors(ck, teacher->params().items());
  teacher->set_mode(TeacherMode::frozen);
  return teacher;
}

inline std::shared_ptr<TeacherLm<float>> clone_teacher(const TeacherLm<float>& teacher) {
  auto copy = std::make_shared<TeacherLm<float>>(teacher.config(), 0);
  copy->copy_values_from(teacher);
  copy->set_mode(TeacherMode::frozen);
  return copy;
}

// ---------------------------------------------------------------------------
// Training

struct TrainRecord {
  std::size_t step = 0;
  double loss_nmt = 0.0;
  std::optional<double> loss_kd;
  double loss = 0.0;
  double eta_nmt = 0.0;
  double eta_lm = 0.0;
  double rho = 0.0;
  double grad_norm = 0.0;
  std::optional<double> student_gap;
  std::optional<double> teacher_drift;
  std::optional<double> valid_bleu;
  double wall_time = 0.0;

  Json to_json() const {
    Json j;
    j["step"] = step;
    j["loss_nmt"] = loss_nmt;
    j["loss_kd"] = loss_kd ? Json(*loss_kd) : Json(nullptr);
    j["loss"] = loss;
    j["eta_nmt"] = eta_nmt;
    j["eta_lm"] = eta_lm;
    j["rho"] = rho;
    j["grad_norm"] = grad_norm;
    if (student_gap) j["student_gap"] = *student_gap;
    if (teacher_drift) j["teacher_drift"] = *teacher_drift;
    if (valid_bleu) j["valid_bleu"] = *valid_bleu;
    j["wall_time"] = wall_time;
    return j;
  }
};

// Append-only JSON-lines sink; every record is one flushed line.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) : out_(std::make_unique<std::ofstream>(path, std::ios::app)) {
    if (!*out_) throw std::runtime_error("cannot open metrics log " + path);
  }
  void write(const Json& record) {
    if (!out_) return;
    *out_ << record.dump() << '\n';
    out_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> out_;
};

// Step-by-step trainer. The batch and the dropout stream of step t depend only on
// (seed, t), so a restored trainer continues exactly where a saved one stopped.
class Trainer {
 public:
  Trainer(ExperimentConfig cfg, const PreparedData& data, const TeacherLm<float>* pretrained)
      : cfg_(std::move(cfg)), data_(data) {
    cfg_.fusion.resolve(cfg_.train.steps);
    cfg_.validate();
    std::shared_ptr<TeacherLm<float>> teacher;
    if (cfg_.fusion.needs_teacher()) {
      if (!pretrained) throw ConfigError("strategy " + strategy_string(cfg_.fusion) + " requires --teacher");
      teacher = clone_teacher(*pretrained);
      snapshot_ = clone_teacher(*pretrained);
    }
    model_ = std::make_unique<ConcertedModel<float>>(nmt_config_for(cfg_, data_), cfg_.fusion, teacher, cfg_.seed,
                                                     cfg_.distill_side);
    model_->configure_teacher_mode();
    optimizer_ = std::make_unique<Optimizer<float>>(model_->param_groups(), cfg_.optim.options());
    batches_per_epoch_ = group_by_length(data_.train, cfg_.train.batch_tokens).size();
    start_ = std::chrono::steady_clock::now();
  }

  const ExperimentConfig& config() const { return cfg_; }
  ConcertedModel<float>& model() { return *model_; }
  const ConcertedModel<float>& model() const { return *model_; }
  Optimizer<float>& optimizer() { return *optimizer_; }
  const TeacherLm<float>* snapshot() const { return snapshot_.get(); }
  std::size_t steps_done() const { return optimizer_->steps(); }
  double best_bleu() const { return best_bleu_; }

  double eta_nmt(std::size_t t) const {
    return cfg_.optim.lr_scale * nmt_rate(t, cfg_.nmt.d_model, cfg_.optim.warmup);
  }
  double rho_at(std::size_t t) const {
    switch (cfg_.fusion.effective_regime()) {
      case LmRegime::fine_tune: return 1.0;
      case LmRegime::slow: return 0.01;
      case LmRegime::scheduled:
        return rho(static_cast<double>(t), static_cast<double>(cfg_.fusion.t_prime),
                   static_cast<double>(cfg_.fusion.t_total));
      case LmRegime::frozen: return 0.0;
    }
    return 0.0;
  }

  // Batch used at step t (1-based).
  const Batch& batch_for(std::size_t t) {
    const std::size_t epoch = (t - 1) / batches_per_epoch_;
    if (!epoch_batches_ || cached_epoch_ != epoch) {
      epoch_batches_ = make_batches(data_.train, cfg_.train.batch_tokens, mix_seed(cfg_.seed, 1000 + epoch));
      cached_epoch_ = epoch;
    }
    return (*epoch_batches_)[(t - 1) % batches_per_epoch_];
  }

  // Loss of the next step's batch without updating anything (dropout as in training).
  double peek_next_loss() {
    const std::size_t t = steps_done() + 1;
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0xD5 + 7919 * t));
    RunContext ctx{true, cfg_.nmt.dropout, &rng};
    NoGradGuard no_grad;
    return model_->forward(batch_for(t), ctx, cfg_.optim.label_smoothing).total.item();
  }

  TrainRecord step() {
    const std::size_t t = steps_done() + 1;
    const Batch& batch = batch_for(t);
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0xD5 + 7919 * t));
    RunContext ctx{true, cfg_.nmt.dropout, &rng};
    active_tape<float>().clear();
    auto parts = model_->forward(batch, ctx, cfg_.optim.label_smoothing);
    backward(parts.total);
    TrainRecord rec;
    rec.step = t;
    rec.eta_nmt = eta_nmt(t);
    rec.eta_lm = lm_learning_rate(t, rec.eta_nmt, cfg_.fusion.effective_regime(), cfg_.fusion.t_prime,
                                  cfg_.fusion.t_total);
    rec.rho = rho_at(t);
    rec.grad_norm = optimizer_->step(rec.eta_nmt, rec.eta_lm);
    rec.loss_nmt = parts.nmt.item();
    if (parts.kd.defined()) rec.loss_kd = parts.kd.item();
    rec.loss = parts.total.item();
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return rec;
  }

  std::vector<Sentence> decode(const std::vector<SentencePair>& pairs, std::size_t beam) const {
    std::vector<Sentence> src;
    for (const auto& p : pairs) src.push_back(p.src);
    if (beam <= 1) return greedy_translate_batch(*model_, src, cfg_.decode.max_extra);
    std::vector<Sentence> out;
    for (const auto& s : src) {
      out.push_back(translate(*model_, s, beam, cfg_.decode.lenpen,
                              std::min(s.size() + cfg_.decode.max_extra, cfg_.nmt.max_len)));
    }
    return out;
  }

  double bleu_on(const std::vector<SentencePair>& pairs, std::size_t beam) const {
    if (pairs.empty()) return 0.0;
    std::vector<Sentence> refs;
    for (const auto& p : pairs) refs.push_back(p.tgt);
    return bleu(decode(pairs, beam), refs);
  }

  double validation_bleu() const { return bleu_on(data_.valid, cfg_.decode.valid_beam); }

  std::optional<DriftReport> drift() const {
    if (!snapshot_ || data_.valid.empty()) return std::nullopt;
    std::vector<Sentence> probe;
    for (std::size_t i = 0; i < std::min(cfg_.train.probe_sentences, data_.valid.size()); ++i) {
      probe.push_back(data_.valid[i].src);
    }
    return teacher_drift(*model_, *snapshot_, probe);
  }

  CheckpointData checkpoint() const {
    CheckpointData ck;
    ck.kind = "model";
    ck.step = steps_done();
    ck.src_vocab_hash = data_.src_vocab.hash();
    ck.tgt_vocab_hash = data_.tgt_vocab.hash();
    ck.config_json = config_to_json(cfg_).dump();
    append_tensors(ck, model_->state_tensors());
    append_optimizer_state(ck, *optimizer_);
    ck.tensors.push_back({"trainer.best_bleu", {1}, {static_cast<float>(best_bleu_)}});
    return ck;
  }

  void restore(const CheckpointData& ck) {
    if (ck.kind != "model") throw CheckpointError("expected a model checkpoint, found '" + ck.kind + "'");
    if (ck.src_vocab_hash != data_.src_vocab.hash() || ck.tgt_vocab_hash != data_.tgt_vocab.hash()) {
      throw DataError("checkpoint vocabulary hash differs from this task's vocabulary");
    }
    optimizer_sources(ck, *optimizer_);
    restore_tensors(ck, model_->state_tensors());
    restore_optimizer_state(ck, *optimizer_);
    if (const auto* b = ck.find("trainer.best_bleu")) best_bleu_ = b->values.at(0);
  }

  // Runs to the configured step count, logging every interval and validating every
  // valid_every steps. With an output directory, keeps best.ckpt and last.ckpt there.
  void run(MetricsLog& log, const std::string& out_dir = "") {
    const auto& tc = cfg_.train;
    while (steps_done() < tc.steps) {
      auto rec = step();
      const bool at_end = rec.step == tc.steps;
      const bool validate_now = tc.valid_every && (rec.step % tc.valid_every == 0 || at_end);
      if (tc.drift_every && (rec.step % tc.drift_every == 0 || at_end)) {
        if (auto d = drift()) {
          rec.student_gap = d->student_gap;
          rec.teacher_drift = d->teacher_shift;
        }
      }
      if (validate_now && !data_.valid.empty()) {
        rec.valid_bleu = validation_bleu();
        if (*rec.valid_bleu > best_bleu_ || !best_state_) {
          best_bleu_ = *rec.valid_bleu;
          best_state_ = checkpoint();
          if (!out_dir.empty() && tc.save_checkpoints) write_checkpoint(out_dir + "/best.ckpt", *best_state_);
        }
      }
      if (rec.step % tc.log_every == 0 || at_end || rec.valid_bleu || rec.teacher_drift) log.write(rec.to_json());
      last_ = rec;
    }
    if (!out_dir.empty() && tc.save_checkpoints) write_checkpoint(out_dir + "/last.ckpt", checkpoint());
  }

  const std::optional<CheckpointData>& best_state() const { return best_state_; }
  const TrainRecord& last_record() const { return last_; }

 private:
  ExperimentConfig cfg_;
  const PreparedData& data_;
  std::unique_ptr<ConcertedModel<float>> model_;
  std::unique_ptr<Optimizer<float>> optimizer_;
  std::shared_ptr<TeacherLm<float>> snapshot_;
  std::size_t batches_per_epoch_ = 1;
  std::optional<std::vector<Batch>> epoch_batches_;
  std::size_t cached_epoch_ = 0;
  double best_bleu_ = -1.0;
  std::optional<CheckpointData> best_state_;
  TrainRecord last_;
  std::chrono::steady_clock::time_point start_;
};

// Rebuilds a model (and its teacher) from a model checkpoint for decoding.
inline std::unique_ptr<ConcertedModel<float>> load_model(const CheckpointData& ck, ExperimentConfig* cfg_out = nullptr,
                                                         std::size_t src_vocab_size = 0,
                                                         std::size_t tgt_vocab_size = 0) {
  if (ck.kind != "model") throw CheckpointError("expected a model checkpoint, found '" + ck.kind + "'");
  auto cfg = config_from_json(Json::parse(ck.config_json));
  cfg.fusion.resolve(cfg.train.steps);
  NmtConfig n = cfg.nmt;
  n.src_vocab = src_vocab_size;
  n.tgt_vocab = tgt_vocab_size;
  std::shared_ptr<TeacherLm<float>> teacher;
  if (cfg.fusion.needs_teacher()) {
    TeacherConfig t = cfg.teacher;
    t.vocab = src_vocab_size;
    teacher = std::make_shared<TeacherLm<float>>(t, 0);
  }
  auto model = std::make_unique<ConcertedModel<float>>(n, cfg.fusion, teacher, cfg.seed, cfg.distill_side);
  restore_tensors(ck, model->state_tensors());
  if (teacher) teacher->set_mode(TeacherMode::frozen);
  model->nmt().params().set_requires_grad(false);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace ctnmt
