#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "varbert/common.hpp"
#include "varbert/numeric.hpp"
#include "varbert/tokenizer.hpp"

namespace varbert {

enum class MaskAction { Mask, Random, Keep };

struct PlannedAction {
  std::size_t position = 0;
  MaskAction action = MaskAction::Mask;
  TokenId replacement = special::kMask;  // the id written into the input
  TokenId target = 0;                    // the original id
};

struct MaskingPlan {
  std::vector<PlannedAction> actions;  // sorted by position
  std::uint64_t epoch_seed = 0;
  // Set for constrained plans with nothing to predict; training skips these.
  bool skip = false;

  std::size_t size() const { return actions.size(); }
  bool operator==(const MaskingPlan& o) const {
    if (actions.size() != o.actions.size()) return false;
    for (std::size_t i = 0; i < actions.size(); ++i) {
      const auto &a = actions[i], &b = o.actions[i];
      if (a.position != b.position || a.action != b.action || a.replacement != b.replacement || a.target != b.target)
        return false;
    }
    return true;
  }
};

// Token ranges of every variable occurrence in an encoding.
using ConstrainedSet = std::vector<TokenRange>;

inline ConstrainedSet constrained_set(const Encoding& enc) {
  ConstrainedSet c;
  for (const auto& occ : enc.slot_token_spans) c.insert(c.end(), occ.begin(), occ.end());
  std::sort(c.begin(), c.end());
  return c;
}

// The sequence used to predict variable `var`: its occurrences keep their
// tokens and become the only slot, while every other variable with
// collapse[v] set shrinks to a single MASK. Training and inference share it,
// so a model never sees the true token counts of the other variables.
inline Encoding variable_view(const Encoding& enc, std::size_t var, const std::vector<bool>& collapse) {
  if (var >= enc.slot_token_spans.size()) throw UsageError("variable index out of range");
  struct Cut {
    TokenRange range;
    std::size_t var;
  };
  std::vector<Cut> cuts;
  for (std::size_t v = 0; v < enc.slot_token_spans.size(); ++v) {
    if (v != var && !(v < collapse.size() && collapse[v])) continue;
    for (const TokenRange& r : enc.slot_token_spans[v]) cuts.push_back({r, v});
  }
  std::sort(cuts.begin(), cuts.end(), [](const Cut& a, const Cut& b) { return a.range.begin < b.range.begin; });
  Encoding out;
  out.slot_token_spans.resize(1);
  const bool has_words = enc.word_starts.size() == enc.size();
  auto copy = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      out.ids.push_back(enc.ids[i]);
      out.offsets.push_back(i < enc.offsets.size() ? enc.offsets[i] : Span{});
      out.word_starts.push_back(has_words ? enc.word_starts[i] : true);
    }
  };
  std::size_t cursor = 0;
  for (const Cut& c : cuts) {
    if (c.range.begin < cursor || c.range.end > enc.size()) throw DataError("variable token ranges overlap");
    copy(cursor, c.range.begin);
    if (c.var == var) {
      const std::size_t begin = out.size();
      copy(c.range.begin, c.range.end);
      out.slot_token_spans[0].push_back({begin, out.size()});
    } else if (c.range.begin < c.range.end) {
      out.ids.push_back(special::kMask);
      const bool known = c.range.end <= enc.offsets.size();
      out.offsets.push_back(known ? Span{enc.offsets[c.range.begin].begin, enc.offsets[c.range.end - 1].end} : Span{});
      out.word_starts.push_back(has_words ? enc.word_starts[c.range.begin] : true);
    }
    cursor = c.range.end;
  }
  copy(cursor, enc.size());
  return out;
}

struct MaskingRates {
  double select = 0.15;
  double mask = 0.8;
  double random = 0.1;  // the remainder keeps the original token
};

namespace detail {

inline double unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline PlannedAction draw_action(Rng& rng, std::size_t vocab_size, const MaskingRates& r) {
  PlannedAction a;
  const double u = unit(rng);
  if (u < r.mask) {
    a.action = MaskAction::Mask;
  } else if (u < r.mask + r.random) {
    a.action = MaskAction::Random;
    std::uniform_int_distribution<TokenId> pick(special::kCount, static_cast<TokenId>(vocab_size) - 1);
    a.replacement = pick(rng);
  } else {
    a.action = MaskAction::Keep;
  }
  return a;
}

inline void finish(PlannedAction& a, std::size_t pos, TokenId original) {
  a.position = pos;
  a.target = original;
  if (a.action == MaskAction::Mask) a.replacement = special::kMask;
  if (a.action == MaskAction::Keep) a.replacement = original;
}

}  // namespace detail

// Dynamic token-level masking: each position is selected independently, then
// replaced by MASK / a random ordinary token / itself.
inline MaskingPlan plan_mlm(const Encoding& enc, std::size_t vocab_size, std::uint64_t epoch_seed,
                            const MaskingRates& rates = {}) {
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) throw UsageError("vocabulary has no ordinary tokens");
  MaskingPlan plan;
  plan.epoch_seed = epoch_seed;
  Rng rng(epoch_seed);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    if (detail::unit(rng) >= rates.select) continue;
    PlannedAction a = detail::draw_action(rng, vocab_size, rates);
    detail::finish(a, i, enc.ids[i]);
    plan.actions.push_back(a);
  }
  return plan;
}

// Whole-word masking: words are selected with the token-level rate, so the
// expected masked-token fraction is unchanged; one action covers the word.
inline MaskingPlan plan_mlm_whole_word(const Encoding& enc, std::size_t vocab_size, std::uint64_t epoch_seed,
                                       const MaskingRates& rates = {}) {
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) throw UsageError("vocabulary has no ordinary tokens");
  if (enc.word_starts.size() != enc.size()) throw DataError("encoding lacks word boundaries");
  MaskingPlan plan;
  plan.epoch_seed = epoch_seed;
  Rng rng(epoch_seed);
  std::size_t i = 0;
  while (i < enc.size()) {
    std::size_t j = i + 1;
    while (j < enc.size() && !enc.word_starts[j]) ++j;
    if (detail::unit(rng) < rates.select) {
      const PlannedAction proto = detail::draw_action(rng, vocab_size, rates);
      for (std::size_t k = i; k < j; ++k) {
        PlannedAction a = proto;
        if (a.action == MaskAction::Random && k > i) {
          std::uniform_int_distribution<TokenId> pick(special::kCount, static_cast<TokenId>(vocab_size) - 1);
          a.replacement = pick(rng);
        }
        detail::finish(a, k, enc.ids[k]);
        plan.actions.push_back(a);
      }
    }
    i = j;
  }
  return plan;
}

// Constrained masking: every token inside a variable occurrence becomes MASK;
// nothing else is selected.
inline MaskingPlan plan_cmlm(const Encoding& enc, const ConstrainedSet& constrained) {
  MaskingPlan plan;
  std::vector<bool> chosen(enc.size(), false);
  for (const TokenRange& r : constrained) {
    if (r.begin > r.end || r.end > enc.size()) throw DataError("constrained span outside the sequence");
    for (std::size_t k = r.begin; k < r.end; ++k) chosen[k] = true;
  }
  for (std::size_t k = 0; k < enc.size(); ++k)
    if (chosen[k]) plan.actions.push_back({k, MaskAction::Mask, special::kMask, enc.ids[k]});
  plan.skip = plan.actions.empty();
  return plan;
}

struct MaskedInput {
  std::vector<TokenId> ids;
  std::vector<ops::Target> targets;  // position -> original id
};

inline MaskedInput apply_plan(const Encoding& enc, const MaskingPlan& plan) {
  MaskedInput out{enc.ids, {}};
  for (const PlannedAction& a : plan.actions) {
    if (a.position >= enc.size()) throw DataError("plan position outside the sequence");
    out.ids[a.position] = a.replacement;
    out.targets.push_back({a.position, a.target});
  }
  return out;
}

// Wraps content ids as BOS ... EOS, truncating the content so the sequence
// fits max_seq (EOS is kept); targets past the cut are dropped.
inline MaskedInput frame_sequence(const MaskedInput& in, std::size_t max_seq) {
  const std::size_t keep = std::min(in.ids.size(), max_seq - 2);
  MaskedInput out;
  out.ids.reserve(keep + 2);
  out.ids.push_back(special::kBos);
  out.ids.insert(out.ids.end(), in.ids.begin(), in.ids.begin() + static_cast<std::ptrdiff_t>(keep));
  out.ids.push_back(special::kEos);
  for (const auto& t : in.targets)
    if (t.row < keep) out.targets.push_back({t.row + 1, t.id});
  return out;
}

inline std::string plan_to_text(const MaskingPlan& plan) {
  std::string out = "seed " + std::to_string(plan.epoch_seed) + (plan.skip ? " skip" : "") + "\n";
  for (const auto& a : plan.actions) {
    const char* kind = a.action == MaskAction::Mask ? "MASK" : a.action == MaskAction::Random ? "RANDOM" : "KEEP";
    out += std::to_string(a.position) + " " + kind + " " + std::to_string(a.replacement) + " " +
           std::to_string(a.target) + "\n";
  }
  return out;
}

}  // namespace varbert
