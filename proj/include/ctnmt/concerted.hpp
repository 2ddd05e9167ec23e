#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctnmt/data.hpp"
#include "ctnmt/fusion.hpp"
#include "ctnmt/nmt_model.hpp"
#include "ctnmt/optimizer.hpp"
#include "ctnmt/teacher.hpp"

namespace ctnmt {

// Parses a comma-separated subset of {ad, ds, sched} ("" or "none" = baseline).
inline void apply_strategy(std::string_view text, FusionConfig& fusion) {
  fusion.use_ad = fusion.use_ds = fusion.use_schedule = false;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    auto item = text.substr(start, end - start);
    if (item == "ad") {
      fusion.use_ad = true;
    } else if (item == "ds") {
      fusion.use_ds = true;
    } else if (item == "sched") {
      fusion.use_schedule = true;
    } else if (!item.empty() && item != "none" && item != "base") {
      throw ConfigError("unknown strategy '" + std::string(item) + "' (expected ad, ds, sched)");
    }
    start = end + 1;
  }
}

inline std::string strategy_string(const FusionConfig& f) {
  std::string s;
  auto put = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  put(f.use_ad, "ad");
  put(f.use_ds, "ds");
  put(f.use_schedule, "sched");
  return s.empty() ? "none" : s;
}

enum class DistillSide { encoder, decoder };

template <typename T>
struct LossParts {
  Tensor<T> nmt;
  Tensor<T> kd;  // undefined unless distillation is on
  Tensor<T> total;
};

// NMT transformer plus the optional teacher, projection and switch gate.
//
// The teacher enters in two places: its features (projected into the NMT width) feed the
// encoder input through the switch gate, or through a fixed average when only the rate
// schedule is on; and its detached features are the distillation target for the student
// tap layer. A trainable teacher only receives gradients through the input path.
template <typename T>
class ConcertedModel {
 public:
  ConcertedModel(const NmtConfig& nmt, const FusionConfig& fusion, std::shared_ptr<TeacherLm<T>> teacher,
                 std::uint64_t seed, DistillSide side = DistillSide::encoder)
      : nmt_(nmt, seed), fusion_config_(fusion), teacher_(std::move(teacher)),
        fusion_(teacher_ ? teacher_->config().d_model : nmt.d_model, nmt.d_model, mix_seed(seed, 0xF05E)),
        side_(side) {
    if (fusion_config_.needs_teacher() && !teacher_) {
      throw ConfigError("strategy " + strategy_string(fusion_config_) + " requires a teacher checkpoint");
    }
    if (teacher_) {
      fusion_config_.validate(nmt.num_layers, teacher_->num_layers());
      if (teacher_->config().vocab != nmt.src_vocab) {
        throw ConfigError("teacher vocabulary size " + std::to_string(teacher_->config().vocab) +
                          " differs from the NMT source vocabulary " + std::to_string(nmt.src_vocab));
      }
      if (side_ == DistillSide::decoder && teacher_->config().vocab != nmt.tgt_vocab) {
        throw ConfigError("decoder-side distillation needs a teacher over the target vocabulary");
      }
    }
  }

  NmtModel<T>& nmt() { return nmt_; }
  const NmtModel<T>& nmt() const { return nmt_; }
  TeacherLm<T>* teacher() { return teacher_.get(); }
  const TeacherLm<T>* teacher() const { return teacher_.get(); }
  FusionLayer<T>& fusion() { return fusion_; }
  const FusionLayer<T>& fusion() const { return fusion_; }
  const FusionConfig& fusion_config() const { return fusion_config_; }
  DistillSide distill_side() const { return side_; }

  std::size_t teacher_layer() const { return teacher_ ? fusion_config_.teacher_layer(teacher_->num_layers()) : 0; }
  std::size_t student_layer() const { return fusion_config_.student_layer(nmt_.config().num_layers); }

  // The teacher trains only when its features feed the encoder and the regime moves it.
  bool teacher_trainable() const {
    return teacher_ && fusion_config_.feeds_teacher() && fusion_config_.effective_regime() != LmRegime::frozen;
  }

  // Only the part of a trainable teacher below the tap layer sits on a gradient path.
  void configure_teacher_mode() {
    if (!teacher_) return;
    if (teacher_trainable()) {
      teacher_->set_trainable_up_to(teacher_layer());
    } else {
      teacher_->set_mode(TeacherMode::frozen);
    }
  }

  // Encoder for a source batch (ids with </s>). When `teacher_state` is given it receives
  // the teacher's tap-layer state for reuse as a distillation target.
  EncoderOutput<T> encode(const TokenBatch& src, const RunContext& ctx, Tensor<T>* teacher_state = nullptr) const {
    const PadMask mask = PadMask::of(src);
    auto h_nmt = nmt_.embed_source(src);
    Tensor<T> input = h_nmt;
    if (fusion_config_.feeds_teacher() || (teacher_state && teacher_)) {
      auto states = teacher_->hidden_states(src, teacher_layer());
      const auto& h_teacher = states.back();
      if (teacher_state) *teacher_state = h_teacher;
      if (fusion_config_.feeds_teacher()) {
        auto h_lm = fusion_.project(h_teacher);
        input = fusion_config_.use_ds ? dynamic_switch(h_lm, h_nmt, fusion_.gate()) : average_fusion(h_lm, h_nmt);
      }
    }
    return nmt_.encode(input, mask, ctx);
  }

  // Projected, detached teacher features used as the distillation target.
  Tensor<T> distillation_target(const Tensor<T>& teacher_state) const {
    NoGradGuard no_grad;
    return fusion_.project(teacher_state.detach());
  }

  LossParts<T> forward(const Batch& batch, const RunContext& ctx, double label_smoothing) const {
    LossParts<T> out;
    Tensor<T> teacher_state;
    const bool want_target = fusion_config_.use_ad && side_ == DistillSide::encoder;
    auto enc = encode(batch.src, ctx, want_target ? &teacher_state : nullptr);
    auto dec = nmt_.decode(batch.tgt_in, enc, ctx);
    out.nmt = nmt_.nmt_loss(dec, std::span<const TokenId>(batch.tgt_out), label_smoothing);
    if (!fusion_config_.use_ad) {
      out.total = out.nmt;
      return out;
    }
    if (side_ == DistillSide::encoder) {
      out.kd = asymptotic_distillation_loss(distillation_target(teacher_state), enc.states[student_layer()],
                                            std::span<const std::uint8_t>(enc.mask.valid));
    } else {
      // Teacher over the reference (tgt + </s>), matched position-wise to decoder states.
      TokenBatch reference{batch.tgt_in.batch, batch.tgt_in.len, batch.tgt_out};
      auto feats = teacher_->extract_features(reference, teacher_layer());
      auto valid = reference.valid();
      out.kd = asymptotic_distillation_loss(distillation_target(feats.vectors), dec.states[student_layer()],
                                            std::span<const std::uint8_t>(valid));
    }
    out.total = combined_loss(out.nmt, out.kd, fusion_config_.alpha);
    return out;
  }

  // NMT group: the transformer plus whichever fusion parameters sit on the gradient path.
  // LM group: the teacher, when trainable.
  ParamGroups<T> param_groups() const {
    ParamGroups<T> g;
    g.nmt = nmt_.params().items();
    if (fusion_config_.feeds_teacher()) {
      append(g.nmt, fusion_.projection_params().items());
      if (fusion_config_.use_ds) append(g.nmt, fusion_.gate_params().items());
    }
    if (teacher_trainable()) g.lm = teacher_->params_up_to(teacher_layer());
    return g;
  }

  // Everything persisted in a model checkpoint.
  std::vector<NamedTensor<T>> state_tensors() const {
    auto all = nmt_.params().items();
    append(all, fusion_.projection_params().items());
    append(all, fusion_.gate_params().items());
    if (teacher_) append(all, teacher_->params().items());
    return all;
  }

 private:
  static void append(std::vector<NamedTensor<T>>& dst, const std::vector<NamedTensor<T>>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
  }

  NmtModel<T> nmt_;
  FusionConfig fusion_config_;
  std::shared_ptr<TeacherLm<T>> teacher_;
  FusionLayer<T> fusion_;
  DistillSide side_;
};

}  // namespace ctnmt
