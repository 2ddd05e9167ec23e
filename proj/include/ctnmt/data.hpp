#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctnmt/errors.hpp"
#include "ctnmt/sequence.hpp"

namespace ctnmt {

using Words = std::vector<std::string>;

inline Words tokenize(std::string_view line) {
  Words out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string detokenize(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Token <-> id bijection with the reserved ids 0..4 = <pad> <s> </s> <unk> <mask>.
class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>", "<mask>"} { reindex(); }

  static Vocab from_words(const Words& ordered) {
    Vocab v;
    for (const auto& w : ordered) {
      if (v.index_.count(w)) throw DataError("vocabulary: duplicate token '" + w + "'");
      v.tokens_.push_back(w);
      v.index_.emplace(w, static_cast<TokenId>(v.tokens_.size() - 1));
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  Sentence encode(const Words& words) const {
    Sentence s;
    s.reserve(words.size());
    for (const auto& w : words) s.push_back(id(w));
    return s;
  }

  // Drops everything from the first </s>, and any <pad>/<s>.
  Words decode(const Sentence& ids) const {
    Words out;
    for (TokenId id : ids) {
      if (id == kEos) break;
      if (id == kPad || id == kBos) continue;
      out.push_back(token(id));
    }
    return out;
  }

  const Words& tokens() const { return tokens_; }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("ctnmt-vocab");
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

  // One token per line; line number - 1 is the id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary " + path);
    Words lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    Vocab v;
    if (lines.size() < v.tokens_.size() || !std::equal(v.tokens_.begin(), v.tokens_.end(), lines.begin())) {
      throw DataError("vocabulary " + path + " does not start with the reserved tokens");
    }
    return from_words(Words(lines.begin() + static_cast<std::ptrdiff_t>(v.tokens_.size()), lines.end()));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  Words tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Frequency-ranked vocabulary (ties lexicographic). Words seen fewer than min_count times
// are left out and map to <unk>; max_size (0 = unlimited) caps the non-reserved entries.
inline Vocab build_vocab(const std::vector<Words>& corpus, std::size_t max_size = 0, std::size_t min_count = 1) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& s : corpus) {
    for (const auto& w : s) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Words words;
  for (const auto& [w, c] : ranked) {
    if (c < min_count) continue;
    if (max_size && words.size() >= max_size) break;
    words.push_back(w);
  }
  return Vocab::from_words(words);
}

struct WordPair {
  Words src;
  Words tgt;
};

struct ParallelCorpus {
  std::vector<WordPair> pairs;
  std::size_t dropped = 0;  // lines over the length limit
};

inline constexpr std::size_t kMaxCorpusTokens = 150;

inline ParallelCorpus parse_parallel(std::istream& in, const std::string& origin,
                                     std::size_t max_tokens = kMaxCorpusTokens) {
  ParallelCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    if (tabs != 1) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected exactly one TAB, found " +
                      std::to_string(tabs));
    }
    const auto pos = line.find('\t');
    WordPair p{tokenize(std::string_view(line).substr(0, pos)), tokenize(std::string_view(line).substr(pos + 1))};
    if (p.src.size() > max_tokens || p.tgt.size() > max_tokens) {
      ++corpus.dropped;
      continue;
    }
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

// `source TAB target` per line, whitespace tokenised.
inline ParallelCorpus load_parallel(const std::string& path, std::size_t max_tokens = kMaxCorpusTokens) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open parallel corpus " + path);
  return parse_parallel(in, path, max_tokens);
}

inline std::vector<Words> load_monolingual(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open monolingual corpus " + path);
  std::vector<Words> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(tokenize(line));
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

struct SentencePair {
  Sentence src;
  Sentence tgt;
};

// A padded training batch: encoder input is src + </s>, decoder input <s> + tgt, decoder
// targets tgt + </s>.
struct Batch {
  TokenBatch src;
  TokenBatch tgt_in;
  std::vector<TokenId> tgt_out;
  std::vector<std::size_t> members;  // indices into the pair list
  std::size_t src_tokens = 0;
  std::size_t tgt_tokens = 0;

  std::size_t sentences() const { return members.size(); }
};

inline Batch make_batch(const std::vector<SentencePair>& pairs, const std::vector<std::size_t>& members) {
  std::vector<Sentence> src, tgt_in, tgt_out;
  Batch b;
  b.members = members;
  for (auto i : members) {
    Sentence s = pairs[i].src;
    s.push_back(kEos);
    Sentence ti{kBos};
    ti.insert(ti.end(), pairs[i].tgt.begin(), pairs[i].tgt.end());
    Sentence to = pairs[i].tgt;
    to.push_back(kEos);
    b.src_tokens += s.size();
    b.tgt_tokens += to.size();
    src.push_back(std::move(s));
    tgt_in.push_back(std::move(ti));
    tgt_out.push_back(std::move(to));
  }
  b.src = TokenBatch::from_sequences(src);
  b.tgt_in = TokenBatch::from_sequences(tgt_in);
  b.tgt_out = TokenBatch::from_sequences(tgt_out).ids;
  return b;
}

// Length-sorted groups whose (source + target) token count, </s> included, stays within the
// budget; a single over-budget pair forms its own group.
inline std::vector<std::vector<std::size_t>> group_by_length(const std::vector<SentencePair>& pairs,
                                                             std::size_t token_budget) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pairs[a].src.size() != pairs[b].src.size()) return pairs[a].src.size() < pairs[b].src.size();
    return pairs[a].tgt.size() < pairs[b].tgt.size();
  });
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (auto i : order) {
    const std::size_t n = pairs[i].src.size() + pairs[i].tgt.size() + 2;
    if (!current.empty() && tokens + n > token_budget) {
      groups.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += n;
  }
  if (!current.empty()) groups.push_back(std::move(current));
  return groups;
}

// Budget-bounded length-sorted batches in a seed-shuffled order.
inline std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t token_budget,
                                       std::uint64_t seed) {
  auto groups = group_by_length(pairs, token_budget);
  std::mt19937_64 rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(pairs, g));
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic translation tasks

enum class SynthKind { copy, reverse, lexswap_reorder };

inline SynthKind parse_synth_kind(std::string_view s) {
  if (s == "copy") return SynthKind::copy;
  if (s == "reverse") return SynthKind::reverse;
  if (s == "lexswap-reorder") return SynthKind::lexswap_reorder;
  throw ConfigError("unknown synthetic task '" + std::string(s) + "'");
}

struct SynthOptions {
  SynthKind kind = SynthKind::lexswap_reorder;
  std::size_t n_pairs = 1000;
  std::size_t vocab_size = 64;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::uint64_t seed = 1;
  double swap_prob = 0.3;
  bool identity_lexicon = false;
  std::size_t mono_factor = 10;
  std::uint64_t stream = 0;  // independent sample streams (train/valid/test) over one language
};

// Word-index sentences (0..vocab_size-1) before vocabulary mapping.
using IndexSentence = std::vector<int>;

struct SynthCorpus {
  std::vector<std::pair<IndexSentence, IndexSentence>> pairs;
  std::vector<IndexSentence> mono;
  std::vector<int> lexicon;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return detail::splitmix64(detail::splitmix64(a) ^ (b + 0x632be59bd9b4e019ULL));
}

// Maps a source through the lexicon, then swaps non-overlapping adjacent pairs, each with
// probability swap_prob, scanning left to right.
inline IndexSentence synth_target(SynthKind kind, const IndexSentence& source, const std::vector<int>& lexicon,
                                  double swap_prob, std::mt19937_64& rng) {
  switch (kind) {
    case SynthKind::copy: return source;
    case SynthKind::reverse: return IndexSentence(source.rbegin(), source.rend());
    case SynthKind::lexswap_reorder: {
      IndexSentence out;
      out.reserve(source.size());
      for (int w : source) out.push_back(lexicon.at(static_cast<std::size_t>(w)));
      std::size_t i = 0;
      while (i + 1 < out.size()) {
        if (detail::unit_uniform(rng) < swap_prob) {
          std::swap(out[i], out[i + 1]);
          i += 2;
        } else {
          ++i;
        }
      }
      return out;
    }
  }
  return source;
}

// Synthetic parallel data over a seeded first-order Markov source language: every word has
// three preferred successors taking 75% of the transition mass. The language and lexicon
// depend only on `seed`; `stream` selects an independent sample.
inline SynthCorpus synth_task(const SynthOptions& opt) {
  if (opt.vocab_size <= 10) throw ConfigError("synthetic vocab_size must exceed 10");
  if (opt.min_len < 1 || opt.min_len > opt.max_len) throw ConfigError("synthetic length range is empty");
  const int V = static_cast<int>(opt.vocab_size);
  std::mt19937_64 structure(mix_seed(opt.seed, 0xC0FFEE));
  SynthCorpus corpus;
  corpus.lexicon.resize(opt.vocab_size);
  std::iota(corpus.lexicon.begin(), corpus.lexicon.end(), 0);
  if (!opt.identity_lexicon) std::shuffle(corpus.lexicon.begin(), corpus.lexicon.end(), structure);
  std::vector<std::array<int, 3>> successors(opt.vocab_size);
  for (auto& s : successors) {
    for (auto& w : s) w = static_cast<int>(structure() % static_cast<std::uint64_t>(V));
  }
  auto sample = [&](std::mt19937_64& rng) {
    const auto span = opt.max_len - opt.min_len + 1;
    const std::size_t len = opt.min_len + static_cast<std::size_t>(rng() % span);
    IndexSentence s;
    s.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(V)));
    while (s.size() < len) {
      if (detail::unit_uniform(rng) < 0.75) {
        s.push_back(successors[static_cast<std::size_t>(s.back())][rng() % 3]);
      } else {
        s.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(V)));
      }
    }
    return s;
  };
  std::mt19937_64 pair_rng(mix_seed(opt.seed, 2 * opt.stream + 1));
  corpus.pairs.reserve(opt.n_pairs);
  for (std::size_t i = 0; i < opt.n_pairs; ++i) {
    auto src = sample(pair_rng);
    auto tgt = synth_target(opt.kind, src, corpus.lexicon, opt.swap_prob, pair_rng);
    corpus.pairs.emplace_back(std::move(src), std::move(tgt));
  }
  std::mt19937_64 mono_rng(mix_seed(opt.seed, 2 * opt.stream + 2));
  corpus.mono.reserve(opt.mono_factor * opt.n_pairs);
  for (std::size_t i = 0; i < opt.mono_factor * opt.n_pairs; ++i) corpus.mono.push_back(sample(mono_rng));
  return corpus;
}

inline std::string synth_word(int index) { return "w" + std::to_string(index); }

inline Words synth_words(const IndexSentence& s) {
  Words w;
  w.reserve(s.size());
  for (int i : s) w.push_back(synth_word(i));
  return w;
}

// Closed vocabulary covering every synthetic word in index order.
inline Vocab synth_vocab(std::size_t vocab_size) {
  Words words;
  for (std::size_t i = 0; i < vocab_size; ++i) words.push_back(synth_word(static_cast<int>(i)));
  return Vocab::from_words(words);
}

}  // namespace ctnmt
