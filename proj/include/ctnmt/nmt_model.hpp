#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ctnmt/errors.hpp"
#include "ctnmt/layers.hpp"

namespace ctnmt {

struct NmtConfig {
  std::size_t num_layers = 3;
  std::size_t d_model = 128;
  std::size_t num_heads = 4;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  double dropout = 0.1;
  std::size_t max_len = 64;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }

  void validate() const {
    if (num_layers < 1) throw ConfigError("nmt.num_layers must be >= 1");
    if (num_heads < 1 || d_model % num_heads != 0) {
      throw ConfigError("nmt.d_model (" + std::to_string(d_model) + ") must be divisible by nmt.num_heads (" +
                        std::to_string(num_heads) + ")");
    }
    if (d_model % 2 != 0) throw ConfigError("nmt.d_model must be even");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("nmt.dropout must be in [0,1)");
    if (max_len < 1) throw ConfigError("nmt.max_len must be positive");
  }
};

// states[0] is the encoder input representation, states[l] the output of layer l.
template <typename T>
struct EncoderOutput {
  std::vector<Tensor<T>> states;
  PadMask mask;
  Tensor<T> memory;  // final-normalised top layer, read by cross-attention
};

template <typename T>
struct DecoderOutput {
  std::vector<Tensor<T>> states;
  Tensor<T> logits;  // [batch*len, tgt_vocab]
  PadMask mask;
};

// Pre-norm transformer encoder-decoder with untied source/target/output embeddings.
template <typename T>
class NmtModel {
 public:
  NmtModel(const NmtConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    if (config_.src_vocab == 0 || config_.tgt_vocab == 0) throw ConfigError("vocabulary sizes must be set");
    std::mt19937_64 rng(seed);
    const auto d = config_.d_model;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    src_embed_ = params_.add("nmt.src_embed", {config_.src_vocab, d}, init::normal(config_.src_vocab * d, emb_std, rng));
    tgt_embed_ = params_.add("nmt.tgt_embed", {config_.tgt_vocab, d}, init::normal(config_.tgt_vocab * d, emb_std, rng));
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      encoder_.emplace_back(params_, "nmt.enc" + std::to_string(l), d, config_.num_heads, config_.ff_width(), rng);
    }
    enc_norm_ = LayerNorm<T>(params_, "nmt.enc_norm", d);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      decoder_.emplace_back(params_, "nmt.dec" + std::to_string(l), d, config_.num_heads, config_.ff_width(), rng);
    }
    dec_norm_ = LayerNorm<T>(params_, "nmt.dec_norm", d);
    output_ = Linear<T>(params_, "nmt.output", d, config_.tgt_vocab, rng);
  }

  const NmtConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Word embedding layer output (h^nmt): scaled embeddings plus sinusoidal positions.
  Tensor<T> embed_source(const TokenBatch& src) const {
    check_length(src.len);
    return embed_tokens(src_embed_, src);
  }

  EncoderOutput<T> encode(const Tensor<T>& input_repr, const PadMask& mask, const RunContext& ctx) const {
    check_length(mask.len);
    if (input_repr.rank() != 2 || input_repr.dim(0) != mask.batch * mask.len ||
        input_repr.dim(1) != config_.d_model) {
      throw DimensionError("encode: input " + shape_str(input_repr.shape()) + " does not match batch " +
                           std::to_string(mask.batch) + "x" + std::to_string(mask.len));
    }
    EncoderOutput<T> out;
    out.mask = mask;
    out.states.push_back(ctx.drop(input_repr));
    for (const auto& block : encoder_) out.states.push_back(block(out.states.back(), mask, false, ctx));
    out.memory = enc_norm_(out.states.back());
    return out;
  }

  DecoderOutput<T> decode(const TokenBatch& tgt_prefix, const EncoderOutput<T>& enc, const RunContext& ctx) const {
    if (tgt_prefix.len == 0 || tgt_prefix.batch == 0) throw DimensionError("decode: empty target prefix");
    check_length(tgt_prefix.len);
    if (tgt_prefix.batch != enc.mask.batch) {
      throw DimensionError("decode: target batch " + std::to_string(tgt_prefix.batch) +
                           " vs source batch " + std::to_string(enc.mask.batch));
    }
    DecoderOutput<T> out;
    out.mask = PadMask::of(tgt_prefix);
    out.states.push_back(ctx.drop(embed_tokens(tgt_embed_, tgt_prefix)));
    for (const auto& block : decoder_) {
      out.states.push_back(block(out.states.back(), out.mask, enc.memory, enc.mask, ctx));
    }
    out.logits = output_(dec_norm_(out.states.back()));
    return out;
  }

  // L_nmt: label-smoothed NLL of `targets` (flattened [batch*len], kPad ignored).
  Tensor<T> nmt_loss(const DecoderOutput<T>& dec, std::span<const TokenId> targets, double epsilon) const {
    return cross_entropy_smoothed(dec.logits, targets, epsilon, kPad);
  }

 private:
  void check_length(std::size_t len) const {
    if (len > config_.max_len) {
      throw DimensionError("sequence length " + std::to_string(len) + " exceeds max length " +
                           std::to_string(config_.max_len));
    }
  }

  NmtConfig config_;
  ParamSet<T> params_;
  Tensor<T> src_embed_, tgt_embed_;
  std::vector<EncoderBlock<T>> encoder_;
  LayerNorm<T> enc_norm_;
  std::vector<DecoderBlock<T>> decoder_;
  LayerNorm<T> dec_norm_;
  Linear<T> output_;
};

}  // namespace ctnmt
