#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "ctnmt/concerted.hpp"

namespace ctnmt {

struct Hypothesis {
  Sentence tokens;
  double log_prob = 0.0;
  bool finished = false;
};

struct BeamOptions {
  std::size_t beam_width = 8;
  double length_penalty = 0.6;
  std::size_t max_len = 64;
  TokenId eos = kEos;
};

// Next-token log-probabilities for each prefix (prefixes exclude <s>). Entries of -inf are
// never expanded.
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<Sentence>& prefixes)>;

// GNMT length normaliser ((5 + |Y|) / 6)^alpha; |Y| counts </s>.
inline double length_normalizer(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

inline double normalized_score(const Hypothesis& h, double alpha) {
  return h.log_prob / length_normalizer(h.tokens.size(), alpha);
}

// Beam search. Each step expands every live hypothesis by every token and keeps the
// `beam_width` best candidates by log-probability; candidates ending in </s> leave the beam
// as finished. Stops when no live hypothesis remains or at max_len. Returns the finished
// hypothesis with the best length-normalised score, else the best unfinished one. Ties go
// to the lexicographically smaller token sequence (lower ids first, then shorter).
inline Hypothesis beam_search(const StepScorer& scorer, const BeamOptions& opt) {
  if (opt.beam_width < 1) throw std::invalid_argument("beam_search: beam width must be >= 1");
  auto by_logprob = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  };
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < opt.max_len && !live.empty(); ++step) {
    std::vector<Sentence> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto scores = scorer(prefixes);
    std::vector<Hypothesis> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t c = 0; c < scores[i].size(); ++c) {
        const double lp = scores[i][c];
        if (!std::isfinite(lp)) continue;
        Hypothesis h{live[i].tokens, live[i].log_prob + lp, false};
        h.tokens.push_back(static_cast<TokenId>(c));
        h.finished = static_cast<TokenId>(c) == opt.eos;
        candidates.push_back(std::move(h));
      }
    }
    const std::size_t keep = std::min(opt.beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      by_logprob);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      (candidates[i].finished ? finished : live).push_back(std::move(candidates[i]));
    }
  }
  const auto& pool = finished.empty() ? live : finished;
  if (pool.empty()) return Hypothesis{};
  return *std::min_element(pool.begin(), pool.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    const double sa = normalized_score(a, opt.length_penalty), sb = normalized_score(b, opt.length_penalty);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  });
}

// Argmax decoding with the same tie rule (lowest id).
inline Hypothesis greedy_search(const StepScorer& scorer, std::size_t max_len, TokenId eos = kEos) {
  Hypothesis h;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto scores = scorer({h.tokens});
    std::size_t best = scores[0].size();
    for (std::size_t c = 0; c < scores[0].size(); ++c) {
      if (!std::isfinite(scores[0][c])) continue;
      if (best == scores[0].size() || scores[0][c] > scores[0][best]) best = c;
    }
    if (best == scores[0].size()) break;
    h.log_prob += scores[0][best];
    h.tokens.push_back(static_cast<TokenId>(best));
    if (static_cast<TokenId>(best) == eos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

namespace detail {

template <typename T>
EncoderOutput<T> tile_encoder(const EncoderOutput<T>& enc, std::size_t copies) {
  EncoderOutput<T> out;
  const auto rows = enc.mask.len;
  const auto d = enc.memory.dim(1);
  std::vector<T> mem(copies * rows * d);
  for (std::size_t k = 0; k < copies; ++k) {
    std::copy(enc.memory.data().begin(), enc.memory.data().end(), mem.begin() + static_cast<std::ptrdiff_t>(k * rows * d));
  }
  out.memory = Tensor<T>({copies * rows, d}, std::move(mem));
  out.mask.batch = copies;
  out.mask.len = rows;
  for (std::size_t k = 0; k < copies; ++k) out.mask.valid.insert(out.mask.valid.end(), enc.mask.valid.begin(), enc.mask.valid.end());
  return out;
}

template <typename T>
std::vector<double> log_softmax_row(const T* row, std::size_t V) {
  const double mx = *std::max_element(row, row + V);
  double z = 0.0;
  for (std::size_t c = 0; c < V; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(V);
  for (std::size_t c = 0; c < V; ++c) out[c] = static_cast<double>(row[c]) - lse;
  // Never generate padding, <s> or <mask>.
  for (TokenId banned : {kPad, kBos, kMask}) {
    if (static_cast<std::size_t>(banned) < V) out[static_cast<std::size_t>(banned)] = -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace detail

// Scorer over a trained model for one source sentence (ids without </s>).
template <typename T>
StepScorer model_scorer(const ConcertedModel<T>& model, const Sentence& source) {
  Sentence src = source;
  src.push_back(kEos);
  EncoderOutput<T> enc;
  {
    NoGradGuard no_grad;
    enc = model.encode(TokenBatch::from_sequences({src}), RunContext{});
  }
  return [&model, enc](const std::vector<Sentence>& prefixes) {
    NoGradGuard no_grad;
    std::vector<Sentence> inputs;
    for (const auto& p : prefixes) {
      Sentence s{kBos};
      s.insert(s.end(), p.begin(), p.end());
      inputs.push_back(std::move(s));
    }
    auto tgt = TokenBatch::from_sequences(inputs);
    auto tiled = detail::tile_encoder(enc, prefixes.size());
    auto dec = model.nmt().decode(tgt, tiled, RunContext{});
    const std::size_t V = dec.logits.dim(1);
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      const std::size_t last = i * tgt.len + prefixes[i].size();
      out.push_back(detail::log_softmax_row(dec.logits.ptr() + last * V, V));
    }
    return out;
  };
}

// Beam-search translation of one source sentence; output excludes </s>.
template <typename T>
Sentence translate(const ConcertedModel<T>& model, const Sentence& source, std::size_t beam_width,
                   double length_penalty, std::size_t max_len) {
  BeamOptions opt{beam_width, length_penalty, max_len, kEos};
  auto hyp = beam_search(model_scorer(model, source), opt);
  if (!hyp.tokens.empty() && hyp.tokens.back() == kEos) hyp.tokens.pop_back();
  return hyp.tokens;
}

// Batched greedy decoding; faster than per-sentence search for validation.
template <typename T>
std::vector<Sentence> greedy_translate_batch(const ConcertedModel<T>& model, const std::vector<Sentence>& sources,
                                             std::size_t max_extra, std::size_t chunk = 64) {
  NoGradGuard no_grad;
  std::vector<Sentence> results(sources.size());
  for (std::size_t start = 0; start < sources.size(); start += chunk) {
    const std::size_t end = std::min(sources.size(), start + chunk);
    std::vector<Sentence> src;
    std::size_t longest = 0;
    for (std::size_t i = start; i < end; ++i) {
      Sentence s = sources[i];
      s.push_back(kEos);
      longest = std::max(longest, s.size());
      src.push_back(std::move(s));
    }
    auto enc = model.encode(TokenBatch::from_sequences(src), RunContext{});
    const std::size_t B = end - start;
    const std::size_t limit = std::min(longest + max_extra, model.nmt().config().max_len);
    std::vector<Sentence> prefix(B, Sentence{kBos});
    std::vector<bool> done(B, false);
    for (std::size_t step = 0; step < limit; ++step) {
      TokenBatch tgt;
      tgt.batch = B;
      tgt.len = step + 1;
      tgt.ids.resize(B * tgt.len);
      for (std::size_t b = 0; b < B; ++b) {
        std::copy(prefix[b].begin(), prefix[b].end(), tgt.ids.begin() + static_cast<std::ptrdiff_t>(b * tgt.len));
      }
      auto dec = model.nmt().decode(tgt, enc, RunContext{});
      const std::size_t V = dec.logits.dim(1);
      bool all_done = true;
      for (std::size_t b = 0; b < B; ++b) {
        if (done[b]) {
          prefix[b].push_back(kEos);
          continue;
        }
        auto lp = detail::log_softmax_row(dec.logits.ptr() + (b * tgt.len + step) * V, V);
        const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        prefix[b].push_back(best);
        if (best == kEos) {
          done[b] = true;
        } else {
          all_done = false;
        }
      }
      if (all_done) break;
    }
    for (std::size_t b = 0; b < B; ++b) {
      Sentence out;
      for (std::size_t t = 1; t < prefix[b].size() && prefix[b][t] != kEos; ++t) out.push_back(prefix[b][t]);
      results[start + b] = std::move(out);
    }
  }
  return results;
}

// ---------------------------------------------------------------------------
// BLEU

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

template <typename Tok>
BleuStats bleu_stats(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  }
  BleuStats st;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    st.hyp_len += h.size();
    st.ref_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<Tok>, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<Tok>(r.begin() + i, r.begin() + i + n)];
      std::map<std::vector<Tok>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<Tok>(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) st.matches[n - 1] += std::min(count, it->second);
      }
      if (h.size() >= n) st.totals[n - 1] += h.size() - n + 1;
    }
  }
  return st;
}

inline double bleu_from_stats(const BleuStats& st) {
  if (st.hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (st.matches[n] == 0 || st.totals[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]));
  }
  const double bp = st.hyp_len < st.ref_len
                        ? std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len))
                        : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

// Corpus BLEU-4 with multi-bleu semantics: case-sensitive tokens, clipped counts, brevity
// penalty, no smoothing.
template <typename Tok>
double bleu(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  return bleu_from_stats(bleu_stats(hypotheses, references));
}

// ---------------------------------------------------------------------------
// Forgetting probe

struct DriftReport {
  double student_gap = 0.0;    // distillation loss between student tap and projected teacher
  double teacher_shift = 0.0;  // MSE between current teacher features and the snapshot's
};

template <typename T>
DriftReport teacher_drift(const ConcertedModel<T>& model, const TeacherLm<T>& snapshot,
                          const std::vector<Sentence>& probe, std::size_t chunk = 64) {
  if (probe.empty()) throw DataError("teacher_drift: empty probe corpus");
  if (!model.teacher()) throw ConfigError("teacher_drift: model has no teacher");
  NoGradGuard no_grad;
  double gap_sum = 0.0, shift_sum = 0.0;
  std::size_t weight = 0;
  for (std::size_t start = 0; start < probe.size(); start += chunk) {
    std::vector<Sentence> src;
    for (std::size_t i = start; i < std::min(probe.size(), start + chunk); ++i) {
      Sentence s = probe[i];
      s.push_back(kEos);
      src.push_back(std::move(s));
    }
    auto batch = TokenBatch::from_sequences(src);
    Tensor<T> teacher_state;
    auto enc = model.encode(batch, RunContext{}, &teacher_state);
    std::span<const std::uint8_t> valid(enc.mask.valid);
    std::size_t rows = 0;
    for (auto v : valid) rows += v;
    auto target = model.distillation_target(teacher_state);
    gap_sum += static_cast<double>(asymptotic_distillation_loss(target, enc.states[model.student_layer()], valid).item()) *
               static_cast<double>(rows);
    auto reference = snapshot.extract_features(batch, model.teacher_layer());
    shift_sum += static_cast<double>(mse(teacher_state, reference.vectors, valid).item()) * static_cast<double>(rows);
    weight += rows;
  }
  return {gap_sum / static_cast<double>(weight), shift_sum / static_cast<double>(weight)};
}

}  // namespace ctnmt
