#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "varbert/common.hpp"
#include "varbert/corpus.hpp"

namespace varbert {

using TokenId = std::int32_t;

// Token-index range [begin, end).
using TokenRange = Span;

namespace special {
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kPad = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;  // reserved; the byte-level base never emits it
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kCount = 5;
inline constexpr const char* kNames[kCount] = {"<s>", "<pad>", "</s>", "<unk>", "<mask>"};
}  // namespace special

inline constexpr TokenId kFirstByteToken = special::kCount;
inline constexpr std::size_t kBaseVocabSize = special::kCount + 256;

inline TokenId byte_token(unsigned char b) { return kFirstByteToken + b; }

struct MergeRule {
  TokenId left = 0;
  TokenId right = 0;
  TokenId result = 0;
};

struct VocabHeader {
  std::size_t vocab_size = 0;
  std::size_t max_merges = 0;
  std::string corpus_hash;
};

class BpeVocab {
 public:
  BpeVocab() { reset_base(); }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<MergeRule>& merges() const { return merges_; }
  const VocabHeader& header() const { return header_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  static bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }

  // Fingerprint over token strings and merge order.
  std::string hash() const {
    Fingerprint fp;
    fp.add_u64(tokens_.size());
    for (const auto& t : tokens_) fp.add_field(t);
    fp.add_u64(merges_.size());
    for (const auto& m : merges_) {
      fp.add_u64(static_cast<std::uint64_t>(m.left));
      fp.add_u64(static_cast<std::uint64_t>(m.right));
      fp.add_u64(static_cast<std::uint64_t>(m.result));
    }
    return fp.hex();
  }

  // Appends a merge; returns the resulting token id. A merge whose output
  // string already exists as an ordinary token reuses that id.
  TokenId add_merge(TokenId left, TokenId right) {
    std::string merged = token(left) + token(right);
    TokenId result;
    auto it = ordinary_index_.find(merged);
    if (it != ordinary_index_.end()) {
      result = it->second;
    } else {
      result = static_cast<TokenId>(tokens_.size());
      tokens_.push_back(merged);
      ordinary_index_.emplace(std::move(merged), result);
    }
    merge_rank_.emplace(pair_key(left, right), RankedMerge{merges_.size(), result});
    merges_.push_back({left, right, result});
    return result;
  }

  void set_header(VocabHeader h) { header_ = std::move(h); }

  // Greedy BPE over one pre-token: repeatedly applies the highest-priority
  // merge present, left to right.
  std::vector<TokenId> encode_chunk(std::string_view chunk) const {
    std::vector<TokenId> symbols;
    symbols.reserve(chunk.size());
    for (unsigned char c : chunk) symbols.push_back(byte_token(c));
    while (symbols.size() > 1) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      TokenId left = 0, right = 0, result = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
        if (it != merge_rank_.end() && it->second.rank < best_rank) {
          best_rank = it->second.rank;
          left = symbols[i];
          right = symbols[i + 1];
          result = it->second.result;
        }
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      std::vector<TokenId> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          next.push_back(result);
          ++i;
        } else {
          next.push_back(symbols[i]);
        }
      }
      symbols.swap(next);
    }
    return symbols;
  }

  TokenId ordinary_token_id(std::string_view s) const {
    auto it = ordinary_index_.find(std::string(s));
    if (it == ordinary_index_.end()) throw DataError("unknown token '" + std::string(s) + "'");
    return it->second;
  }

 private:
  struct RankedMerge {
    std::size_t rank;
    TokenId result;
  };

  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
  }

  void reset_base() {
    tokens_.clear();
    for (TokenId i = 0; i < special::kCount; ++i) tokens_.emplace_back(special::kNames[i]);
    for (int b = 0; b < 256; ++b) {
      tokens_.emplace_back(1, static_cast<char>(b));
      ordinary_index_.emplace(tokens_.back(), static_cast<TokenId>(tokens_.size() - 1));
    }
  }

  std::vector<std::string> tokens_;
  std::vector<MergeRule> merges_;
  std::unordered_map<std::string, TokenId> ordinary_index_;
  std::unordered_map<std::uint64_t, RankedMerge> merge_rank_;
  VocabHeader header_;
};

// ---------------------------------------------------------------------------
// Pre-tokenization: maximal runs of whitespace and of non-whitespace. Runs
// are further cut at `forced` offsets (slot edges); such cuts do not start a
// new word.

struct PreToken {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool word_start = false;
};

inline std::vector<PreToken> pretokenize(std::string_view text, const std::vector<std::size_t>& forced = {}) {
  std::vector<PreToken> out;
  std::size_t f = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    bool ws = is_space(static_cast<unsigned char>(text[i]));
    std::size_t j = i + 1;
    while (j < text.size() && is_space(static_cast<unsigned char>(text[j])) == ws) ++j;
    std::size_t start = i;
    bool first = true;
    while (f < forced.size() && forced[f] <= start) ++f;
    while (f < forced.size() && forced[f] < j) {
      out.push_back({start, forced[f], first});
      first = false;
      start = forced[f];
      ++f;
    }
    out.push_back({start, j, first});
    i = j;
  }
  return out;
}

struct Encoding {
  std::vector<TokenId> ids;
  // Byte range of each token in the source text.
  std::vector<Span> offsets;
  // First token of each whitespace-delimited word; whitespace runs count as
  // words of their own.
  std::vector<bool> word_starts;
  // Per variable, per occurrence: the token range covering it.
  std::vector<std::vector<TokenRange>> slot_token_spans;

  std::size_t size() const { return ids.size(); }
};

inline Encoding encode_with_slots(const BpeVocab& vocab, std::string_view text,
                                  const std::vector<std::vector<Span>>& slots) {
  std::vector<std::size_t> forced;
  for (const auto& occ : slots)
    for (const Span& s : occ) {
      forced.push_back(s.begin);
      forced.push_back(s.end);
    }
  std::sort(forced.begin(), forced.end());
  forced.erase(std::unique(forced.begin(), forced.end()), forced.end());

  Encoding enc;
  for (const PreToken& p : pretokenize(text, forced)) {
    auto ids = vocab.encode_chunk(text.substr(p.begin, p.end - p.begin));
    std::size_t pos = p.begin;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      std::size_t len = vocab.token(ids[k]).size();
      enc.ids.push_back(ids[k]);
      enc.offsets.push_back({pos, pos + len});
      enc.word_starts.push_back(p.word_start && k == 0);
      pos += len;
    }
  }

  enc.slot_token_spans.resize(slots.size());
  for (std::size_t v = 0; v < slots.size(); ++v) {
    for (const Span& s : slots[v]) {
      auto lo = std::lower_bound(enc.offsets.begin(), enc.offsets.end(), s.begin,
                                 [](const Span& o, std::size_t x) { return o.begin < x; });
      auto hi = std::lower_bound(enc.offsets.begin(), enc.offsets.end(), s.end,
                                 [](const Span& o, std::size_t x) { return o.begin < x; });
      enc.slot_token_spans[v].push_back({static_cast<std::size_t>(lo - enc.offsets.begin()),
                                         static_cast<std::size_t>(hi - enc.offsets.begin())});
    }
  }
  return enc;
}

inline Encoding encode(const BpeVocab& vocab, std::string_view text) { return encode_with_slots(vocab, text, {}); }

// Canonical text of a function, encoded with token boundaries forced at every
// variable occurrence.
inline Encoding encode_function(const BpeVocab& vocab, const DecompiledFunction& f) {
  auto c = canonicalize(f);
  return encode_with_slots(vocab, c.text, c.slot_spans);
}

inline std::string decode(const BpeVocab& vocab, const std::vector<TokenId>& ids) {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw DataError("token id " + std::to_string(id) + " out of range (vocab size " +
                      std::to_string(vocab.size()) + ")");
    out += vocab.token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

inline BpeVocab train_bpe(std::string_view corpus, std::size_t vocab_size, std::size_t max_merges) {
  if (corpus.empty()) throw DataError("empty tokenizer corpus");
  if (vocab_size < kBaseVocabSize)
    throw UsageError("vocab_size must be at least " + std::to_string(kBaseVocabSize));
  if (max_merges == 0) throw UsageError("max_merges must be positive");

  BpeVocab vocab;

  std::map<std::string, std::int64_t> word_counts;
  for (const PreToken& p : pretokenize(corpus)) ++word_counts[std::string(corpus.substr(p.begin, p.end - p.begin))];

  std::vector<std::vector<TokenId>> words;
  std::vector<std::int64_t> freq;
  for (const auto& [w, c] : word_counts) {
    std::vector<TokenId> sym;
    for (unsigned char ch : w) sym.push_back(byte_token(ch));
    words.push_back(std::move(sym));
    freq.push_back(c);
  }

  using Pair = std::pair<TokenId, TokenId>;
  const auto& tok = vocab.tokens();
  // Highest count first, then lexicographic on the pair's strings.
  auto better = [&tok](const std::tuple<std::int64_t, TokenId, TokenId>& x,
                       const std::tuple<std::int64_t, TokenId, TokenId>& y) {
    if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
    const auto& xa = tok[std::get<1>(x)];
    const auto& ya = tok[std::get<1>(y)];
    if (xa != ya) return xa < ya;
    return tok[std::get<2>(x)] < tok[std::get<2>(y)];
  };
  std::set<std::tuple<std::int64_t, TokenId, TokenId>, decltype(better)> queue(better);
  std::map<Pair, std::int64_t> counts;
  std::map<Pair, std::set<std::size_t>> where;

  auto bump = [&](const Pair& p, std::int64_t delta, std::size_t w) {
    auto& c = counts[p];
    if (c > 0) queue.erase({c, p.first, p.second});
    c += delta;
    if (c > 0) {
      queue.insert({c, p.first, p.second});
      where[p].insert(w);
    } else {
      counts.erase(p);
    }
  };
  for (std::size_t w = 0; w < words.size(); ++w)
    for (std::size_t i = 0; i + 1 < words[w].size(); ++i) bump({words[w][i], words[w][i + 1]}, freq[w], w);

  std::size_t n_merges = 0;
  while (vocab.size() < vocab_size) {
    if (n_merges == max_merges || queue.empty()) {
      throw DataError("corpus supports a vocabulary of at most " + std::to_string(vocab.size()) + " tokens with " +
                      std::to_string(n_merges) + " merges (requested " + std::to_string(vocab_size) + ")");
    }
    auto [count, a, b] = *queue.begin();
    (void)count;
    TokenId merged = vocab.add_merge(a, b);
    ++n_merges;
    Pair target{a, b};
    std::set<std::size_t> affected = std::move(where[target]);
    where.erase(target);
    for (std::size_t w : affected) {
      auto& sym = words[w];
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) bump({sym[i], sym[i + 1]}, -freq[w], w);
      std::vector<TokenId> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym.swap(next);
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) bump({sym[i], sym[i + 1]}, freq[w], w);
    }
  }
  vocab.set_header({vocab_size, max_merges, fingerprint_of(corpus)});
  return vocab;
}

// ---------------------------------------------------------------------------
// Vocabulary files: <prefix>.tokens (header line, then one escaped token per
// line in id order) and <prefix>.merges (header line, then "left right").

inline std::string escape_token(std::string_view t) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : t) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c <= 0x20 || c >= 0x7f) {
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

inline std::string unescape_token(std::string_view s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw DataError("bad hex escape in vocab file");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
    } else if (i + 1 < s.size() && s[i + 1] == '\\') {
      out.push_back('\\');
      ++i;
    } else if (i + 3 < s.size() && s[i + 1] == 'x') {
      out.push_back(static_cast<char>(nibble(s[i + 2]) * 16 + nibble(s[i + 3])));
      i += 3;
    } else {
      throw DataError("bad escape in vocab file");
    }
  }
  return out;
}

inline void save_vocab(const BpeVocab& vocab, const std::filesystem::path& prefix) {
  const auto& h = vocab.header();
  std::string tokens = "#varbert-vocab v1 vocab_size=" + std::to_string(vocab.size()) +
                       " max_merges=" + std::to_string(h.max_merges) + " corpus_hash=" +
                       (h.corpus_hash.empty() ? "-" : h.corpus_hash) + " specials=";
  for (TokenId i = 0; i < special::kCount; ++i) tokens += (i ? "," : "") + std::string(special::kNames[i]);
  tokens += "\n";
  for (const auto& t : vocab.tokens()) tokens += escape_token(t) + "\n";
  std::string merges = "#varbert-merges v1 count=" + std::to_string(vocab.merges().size()) + "\n";
  for (const auto& m : vocab.merges()) merges += escape_token(vocab.token(m.left)) + " " + escape_token(vocab.token(m.right)) + "\n";
  auto p = prefix;
  write_file_atomic(p.concat(".tokens"), tokens);
  p = prefix;
  write_file_atomic(p.concat(".merges"), merges);
}

inline BpeVocab load_vocab(const std::filesystem::path& prefix) {
  auto tp = prefix, mp = prefix;
  tp.concat(".tokens");
  mp.concat(".merges");
  std::istringstream tin(read_file(tp)), min(read_file(mp));
  std::string line;
  if (!std::getline(tin, line) || line.rfind("#varbert-vocab v1", 0) != 0) throw DataError("bad vocab header in " + tp.string());
  VocabHeader header;
  std::istringstream hs(line);
  std::string field;
  while (hs >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    auto key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "vocab_size") header.vocab_size = std::stoull(val);
    if (key == "max_merges") header.max_merges = std::stoull(val);
    if (key == "corpus_hash") header.corpus_hash = val == "-" ? "" : val;
  }
  std::vector<std::string> tokens;
  while (std::getline(tin, line)) tokens.push_back(unescape_token(line));

  BpeVocab vocab;
  if (!std::getline(min, line) || line.rfind("#varbert-merges v1", 0) != 0) throw DataError("bad merges header in " + mp.string());
  while (std::getline(min, line)) {
    auto sp = line.find(' ');
    if (sp == std::string::npos) throw DataError("bad merge line '" + line + "'");
    vocab.add_merge(vocab.ordinary_token_id(unescape_token(line.substr(0, sp))),
                    vocab.ordinary_token_id(unescape_token(line.substr(sp + 1))));
  }
  if (vocab.tokens() != tokens) throw DataError("token list does not match merge list in " + prefix.string());
  if (header.vocab_size != vocab.size()) throw DataError("vocab header size mismatch in " + tp.string());
  vocab.set_header(header);
  return vocab;
}

}  // namespace varbert
