#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctnmt/errors.hpp"
#include "ctnmt/layers.hpp"
#include "ctnmt/optimizer.hpp"

namespace ctnmt {

enum class Directionality { bidirectional, causal };

inline std::string to_string(Directionality d) {
  return d == Directionality::bidirectional ? "bidirectional" : "causal";
}

struct TeacherConfig {
  Directionality directionality = Directionality::bidirectional;
  std::size_t num_layers = 4;
  std::size_t d_model = 128;
  std::size_t num_heads = 4;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  std::size_t vocab = 0;
  std::size_t max_len = 64;
  double mask_prob = 0.15;
  std::size_t pretrain_steps = 2000;
  double pretrain_lr = 1e-3;
  std::size_t warmup = 100;
  std::size_t batch_tokens = 2048;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }

  void validate() const {
    if (num_layers < 1) throw ConfigError("teacher.num_layers must be >= 1");
    if (num_heads < 1 || d_model % num_heads != 0 || d_model % 2 != 0) {
      throw ConfigError("teacher.d_model must be even and divisible by teacher.num_heads");
    }
    if (mask_prob < 0.0 || mask_prob > 1.0) throw ConfigError("teacher.mask_prob must be in [0,1]");
    if (pretrain_lr <= 0.0) throw ConfigError("teacher.pretrain_lr must be positive");
  }
};

// H^lm: one vector per source token, taken from one teacher layer, with no gradient history.
template <typename T>
struct TeacherFeatures {
  Tensor<T> vectors;  // [batch*len, d_teacher]
  std::size_t layer = 0;
  PadMask mask;
};

enum class TeacherMode { frozen, trainable };

// Transformer encoder language model used as the distillation teacher.
template <typename T>
class TeacherLm {
 public:
  TeacherLm(const TeacherConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    if (config_.vocab == 0) throw ConfigError("teacher vocabulary size must be set");
    std::mt19937_64 rng(seed);
    const auto d = config_.d_model;
    embed_ = params_.add("teacher.embed", {config_.vocab, d},
                         init::normal(config_.vocab * d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      blocks_.emplace_back(params_, "teacher.layer" + std::to_string(l), d, config_.num_heads,
                           config_.ff_width(), rng);
    }
    final_norm_ = LayerNorm<T>(params_, "teacher.final_norm", d);
    head_ = Linear<T>(params_, "teacher.head", d, config_.vocab, rng);
  }

  const TeacherConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  std::size_t num_layers() const { return config_.num_layers; }
  std::size_t default_layer() const { return config_.num_layers - 1; }
  bool causal() const { return config_.directionality == Directionality::causal; }

  TeacherMode mode() const { return mode_; }
  void set_mode(TeacherMode mode) {
    mode_ = mode;
    params_.set_requires_grad(mode == TeacherMode::trainable);
  }

  // Trainable mode restricted to the parameters below `layer`.
  void set_trainable_up_to(std::size_t layer) {
    set_mode(TeacherMode::frozen);
    mode_ = TeacherMode::trainable;
    for (auto& p : params_up_to(layer)) p.tensor.set_requires_grad(true);
  }

  // Parameters that hidden state `layer` depends on.
  std::vector<NamedTensor<T>> params_up_to(std::size_t layer) const {
    std::vector<NamedTensor<T>> out;
    for (const auto& p : params_.items()) {
      bool keep = p.name == "teacher.embed";
      for (std::size_t l = 0; l < layer && !keep; ++l) {
        keep = p.name.rfind("teacher.layer" + std::to_string(l) + ".", 0) == 0;
      }
      if (keep) out.push_back(p);
    }
    return out;
  }

  // Hidden states 0..up_to (0 is the embedding output). Recorded on the tape whenever
  // grad mode is on and the teacher is trainable.
  std::vector<Tensor<T>> hidden_states(const TokenBatch& ids, std::size_t up_to, const RunContext& ctx = {}) const {
    if (up_to > config_.num_layers) {
      throw IndexError("teacher layer " + std::to_string(up_to) + " outside [0, " +
                       std::to_string(config_.num_layers) + "]");
    }
    if (ids.len > config_.max_len) {
      throw DimensionError("teacher input length " + std::to_string(ids.len) + " exceeds max length");
    }
    for (TokenId id : ids.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
        throw IndexError("token id " + std::to_string(id) + " outside teacher vocabulary");
      }
    }
    const PadMask mask = PadMask::of(ids);
    std::vector<Tensor<T>> states;
    states.push_back(ctx.drop(embed_tokens(embed_, ids)));
    for (std::size_t l = 0; l < up_to; ++l) states.push_back(blocks_[l](states.back(), mask, causal(), ctx));
    return states;
  }

  Tensor<T> lm_logits(const Tensor<T>& top_state) const { return head_(final_norm_(top_state)); }

  // Tape-free forward; the returned vectors are constants.
  TeacherFeatures<T> extract_features(const TokenBatch& ids, std::size_t layer) const {
    NoGradGuard no_grad;
    auto states = hidden_states(ids, layer);
    return {states[layer].detach(), layer, PadMask::of(ids)};
  }

  void copy_values_from(const TeacherLm& other) {
    const auto& src = other.params().items();
    const auto& dst = params_.items();
    if (src.size() != dst.size()) throw DimensionError("teacher copy: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].tensor.shape() != dst[i].tensor.shape()) throw DimensionError("teacher copy: shape mismatch");
      auto d = dst[i].tensor;
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.data().begin());
    }
  }

 private:
  TeacherConfig config_;
  ParamSet<T> params_;
  Tensor<T> embed_;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNorm<T> final_norm_;
  Linear<T> head_;
  TeacherMode mode_ = TeacherMode::trainable;
};

template <typename T>
void teacher_mode(TeacherLm<T>& teacher, TeacherMode mode) {
  teacher.set_mode(mode);
}

struct PretrainReport {
  double final_loss = 0.0;
  double masked_accuracy = 0.0;  // next-token accuracy for causal teachers
  std::size_t steps = 0;
  std::vector<double> losses;    // one per step
};

namespace detail {

// Input/target pair for one language-modelling step. Targets are kPad where unsupervised.
struct LmExample {
  TokenBatch inputs;
  std::vector<TokenId> targets;
};

// BERT-style corruption: max(1, round(p * n)) of a sentence's n real tokens are selected;
// selected tokens become [MASK] 80% of the time, a random word 10%, and stay unchanged 10%.
inline LmExample make_lm_example(const std::vector<Sentence>& sentences, Directionality dir,
                                 double mask_prob, std::size_t vocab, std::mt19937_64& rng) {
  LmExample ex;
  ex.inputs = TokenBatch::from_sequences(sentences);
  ex.targets.assign(ex.inputs.ids.size(), kPad);
  const auto L = ex.inputs.len;
  if (dir == Directionality::causal) {
    for (std::size_t b = 0; b < ex.inputs.batch; ++b) {
      for (std::size_t t = 0; t + 1 < L; ++t) ex.targets[b * L + t] = ex.inputs.ids[b * L + t + 1];
    }
    return ex;
  }
  const auto words = static_cast<TokenId>(vocab) - kNumReserved;
  std::vector<bool> chosen(ex.inputs.ids.size(), false);
  if (mask_prob > 0.0) {
    for (std::size_t b = 0; b < ex.inputs.batch; ++b) {
      std::vector<std::size_t> real;
      for (std::size_t t = 0; t < L; ++t) {
        if (ex.inputs.ids[b * L + t] != kPad) real.push_back(b * L + t);
      }
      if (real.empty()) continue;
      const auto count = std::min(real.size(), std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(
                                                     mask_prob * static_cast<double>(real.size())))));
      std::shuffle(real.begin(), real.end(), rng);
      for (std::size_t k = 0; k < count; ++k) chosen[real[k]] = true;
    }
  }
  for (std::size_t i = 0; i < ex.inputs.ids.size(); ++i) {
    const TokenId original = ex.inputs.ids[i];
    if (!chosen[i]) continue;
    ex.targets[i] = original;
    const double r = detail::unit_uniform(rng);
    if (r < 0.8) {
      ex.inputs.ids[i] = kMask;
    } else if (r < 0.9 && words > 0) {
      ex.inputs.ids[i] = kNumReserved + static_cast<TokenId>(rng() % static_cast<std::uint64_t>(words));
    }
  }
  return ex;
}

inline std::vector<std::vector<std::size_t>> token_budget_groups(const std::vector<Sentence>& corpus,
                                                                 std::size_t budget,
                                                                 std::mt19937_64& rng) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (auto idx : order) {
    const auto n = corpus[idx].size();
    if (!current.empty() && tokens + n > budget) {
      groups.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(idx);
    tokens += n;
  }
  if (!current.empty()) groups.push_back(std::move(current));
  return groups;
}

inline Sentence with_eos(const Sentence& s) {
  Sentence out = s;
  out.push_back(kEos);
  return out;
}

}  // namespace detail

// Argmax accuracy at supervised positions over (at most 512 sentences of) `corpus`, using a
// fixed corruption seed.
template <typename T>
double lm_accuracy(const TeacherLm<T>& teacher, const std::vector<Sentence>& corpus, std::uint64_t seed) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  std::size_t correct = 0, total = 0;
  const std::size_t limit = std::min<std::size_t>(corpus.size(), 512);
  for (std::size_t start = 0; start < limit; start += 64) {
    std::vector<Sentence> chunk;
    for (std::size_t i = start; i < std::min(limit, start + 64); ++i) chunk.push_back(detail::with_eos(corpus[i]));
    auto ex = detail::make_lm_example(chunk, teacher.config().directionality, teacher.config().mask_prob,
                                      teacher.config().vocab, rng);
    auto states = teacher.hidden_states(ex.inputs, teacher.num_layers());
    auto logits = teacher.lm_logits(states.back());
    const std::size_t V = logits.dim(1);
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
      if (ex.targets[i] == kPad) continue;
      const T* row = logits.ptr() + i * V;
      const auto best = static_cast<TokenId>(std::max_element(row, row + V) - row);
      correct += best == ex.targets[i];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// Linear warmup to 1, then linear decay to 0 at the last step.
inline double pretrain_rate_factor(std::size_t step, std::size_t warmup, std::size_t total) {
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
  if (t <= w || total <= warmup) return std::min(1.0, t / w);
  return std::max(0.0, static_cast<double>(total + 1 - step) / static_cast<double>(total + 1 - warmup));
}

// Pre-trains the teacher on monolingual sentences (ids without EOS; EOS is appended as in
// NMT sources). Bidirectional teachers use the masked-LM objective, causal ones next-token
// prediction. Leaves the teacher frozen.
template <typename T>
PretrainReport pretrain_teacher(TeacherLm<T>& teacher, const std::vector<Sentence>& corpus, std::uint64_t seed) {
  if (corpus.empty()) throw DataError("pretrain_teacher: empty monolingual corpus");
  const auto& cfg = teacher.config();
  for (const auto& s : corpus) {
    for (TokenId id : s) {
      if (id < kNumReserved || static_cast<std::size_t>(id) >= cfg.vocab) {
        throw DataError("pretrain_teacher: token id " + std::to_string(id) +
                        " does not belong to the teacher vocabulary");
      }
    }
  }
  teacher.set_mode(TeacherMode::trainable);
  ParamGroups<T> groups;
  groups.nmt = teacher.params().items();
  Optimizer<T> opt(groups, OptimizerOptions{});
  std::mt19937_64 rng(seed);
  PretrainReport report;
  std::vector<std::vector<std::size_t>> groups_of_epoch;
  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
    if (cursor >= groups_of_epoch.size()) {
      groups_of_epoch = detail::token_budget_groups(corpus, cfg.batch_tokens, rng);
      cursor = 0;
    }
    std::vector<Sentence> sentences;
    for (auto idx : groups_of_epoch[cursor++]) sentences.push_back(detail::with_eos(corpus[idx]));
    auto ex = detail::make_lm_example(sentences, cfg.directionality, cfg.mask_prob, cfg.vocab, rng);
    active_tape<T>().clear();
    auto states = teacher.hidden_states(ex.inputs, teacher.num_layers());
    auto loss = cross_entropy_smoothed(teacher.lm_logits(states.back()), std::span<const TokenId>(ex.targets),
                                       0.0, kPad);
    backward(loss);
    const double lr = cfg.pretrain_lr * pretrain_rate_factor(step, cfg.warmup, cfg.pretrain_steps);
    opt.step(lr, 0.0);
    report.losses.push_back(loss.item());
  }
  report.steps = cfg.pretrain_steps;
  report.final_loss = report.losses.empty() ? 0.0 : report.losses.back();
  report.masked_accuracy = lm_accuracy(teacher, corpus, seed ^ 0x5eedULL);
  teacher.set_mode(TeacherMode::frozen);
  return report;
}

}  // namespace ctnmt
