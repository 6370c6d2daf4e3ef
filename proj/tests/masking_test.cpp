#include <gtest/gtest.h>

#include <cmath>

#include "varbert/masking.hpp"
#include "varbert/toygen.hpp"

using namespace varbert;

namespace {

// An encoding with `n` ordinary tokens; every `word_len` tokens start a word.
Encoding synthetic(std::size_t n, std::size_t word_len = 1) {
  Encoding e;
  for (std::size_t i = 0; i < n; ++i) {
    e.ids.push_back(static_cast<TokenId>(kFirstByteToken + (i * 7) % 200));
    e.offsets.push_back({i, i + 1});
    e.word_starts.push_back(i % word_len == 0);
  }
  return e;
}

const BpeVocab& toy_vocab() {
  static const BpeVocab v = [] {
    std::string text;
    for (const auto& f : toygen::generate({}))
      if (f.split == Split::Train) text += canonicalize(f).text + "\n";
    return train_bpe(text, 512, 10000);
  }();
  return v;
}

}  // namespace

TEST(Masking, MlmRatesMatchExpectation) {
  const std::size_t n = 200000, vocab = 1000;
  auto enc = synthetic(n);
  auto plan = plan_mlm(enc, vocab, 42);
  std::size_t mask = 0, random = 0, keep = 0;
  for (const auto& a : plan.actions) {
    EXPECT_EQ(a.target, enc.ids[a.position]);
    switch (a.action) {
      case MaskAction::Mask: ++mask; EXPECT_EQ(a.replacement, special::kMask); break;
      case MaskAction::Random:
        ++random;
        EXPECT_FALSE(BpeVocab::is_special(a.replacement));
        EXPECT_LT(a.replacement, static_cast<TokenId>(vocab));
        break;
      case MaskAction::Keep: ++keep; EXPECT_EQ(a.replacement, a.target); break;
    }
  }
  const double sel = static_cast<double>(plan.size()) / n;
  // Binomial standard errors: 0.0008 for selection, about 0.0023 for the split.
  EXPECT_NEAR(sel, 0.15, 0.005);
  EXPECT_NEAR(static_cast<double>(mask) / plan.size(), 0.8, 0.012);
  EXPECT_NEAR(static_cast<double>(random) / plan.size(), 0.1, 0.01);
  EXPECT_NEAR(static_cast<double>(keep) / plan.size(), 0.1, 0.01);
  for (std::size_t i = 1; i < plan.size(); ++i) EXPECT_LT(plan.actions[i - 1].position, plan.actions[i].position);
}

TEST(Masking, RandomNeverPicksSpecials) {
  auto enc = synthetic(50000);
  MaskingRates all_random{1.0, 0.0, 1.0};
  auto plan = plan_mlm(enc, kBaseVocabSize + 1, 9, all_random);
  ASSERT_EQ(plan.size(), enc.size());
  for (const auto& a : plan.actions) {
    ASSERT_EQ(a.action, MaskAction::Random);
    ASSERT_GE(a.replacement, special::kCount);
    ASSERT_LE(a.replacement, static_cast<TokenId>(kBaseVocabSize));
  }
  EXPECT_THROW(plan_mlm(enc, special::kCount, 1), UsageError);
}

TEST(Masking, PlansAreSeededAndDynamic) {
  auto enc = synthetic(300);
  EXPECT_EQ(plan_mlm(enc, 1000, 5), plan_mlm(enc, 1000, 5));
  EXPECT_EQ(plan_to_text(plan_mlm(enc, 1000, 5)), plan_to_text(plan_mlm(enc, 1000, 5)));
  // Ten epochs: consecutive plans almost always differ.
  std::size_t differ = 0;
  for (std::uint64_t e = 0; e < 10; ++e)
    differ += !(plan_mlm(enc, 1000, derive_seed(1, e)) == plan_mlm(enc, 1000, derive_seed(1, e + 1)));
  EXPECT_GE(differ, 9u);
}

TEST(Masking, WholeWordCoversWordsEntirely) {
  const std::size_t n = 60000, word = 3;
  auto enc = synthetic(n, word);
  auto plan = plan_mlm_whole_word(enc, 1000, 77);
  std::vector<int> hit(n, 0);
  for (const auto& a : plan.actions) hit[a.position] = 1 + static_cast<int>(a.action);
  std::size_t selected_words = 0;
  for (std::size_t w = 0; w < n; w += word) {
    for (std::size_t k = 1; k < word; ++k) {
      // Either every token of the word is selected or none, with one action kind.
      EXPECT_EQ(hit[w + k] != 0, hit[w] != 0);
      EXPECT_EQ(hit[w + k], hit[w]);
    }
    selected_words += hit[w] != 0;
  }
  EXPECT_NEAR(static_cast<double>(selected_words) / (n / word), 0.15, 0.01);
  Encoding broken = enc;
  broken.word_starts.pop_back();
  EXPECT_THROW(plan_mlm_whole_word(broken, 1000, 1), DataError);
}

TEST(Masking, ConstrainedMasksExactlyTheVariables) {
  const auto& v = toy_vocab();
  for (const auto& f : toygen::generate({.seed = 2, .functions = 30})) {
    auto enc = encode_function(v, f);
    auto plan = plan_cmlm(enc, constrained_set(enc));
    // Oracle: tokens whose byte range lies inside a variable occurrence.
    auto c = canonicalize(f);
    std::vector<bool> inside(enc.size(), false);
    for (const auto& occ : c.slot_spans)
      for (const Span& s : occ)
        for (std::size_t i = 0; i < enc.size(); ++i)
          if (enc.offsets[i].begin >= s.begin && enc.offsets[i].end <= s.end) inside[i] = true;
    std::size_t expected = 0;
    for (bool b : inside) expected += b;
    ASSERT_EQ(plan.size(), expected) << f.function_id;
    for (const auto& a : plan.actions) {
      EXPECT_TRUE(inside[a.position]);
      EXPECT_EQ(a.action, MaskAction::Mask);
      EXPECT_EQ(a.replacement, special::kMask);
    }
    auto masked = apply_plan(enc, plan);
    for (std::size_t i = 0; i < enc.size(); ++i)
      EXPECT_EQ(masked.ids[i], inside[i] ? special::kMask : enc.ids[i]);
    EXPECT_FALSE(plan.skip);
  }
}

TEST(Masking, ConstrainedWithoutVariablesIsSkipped) {
  auto enc = synthetic(10);
  auto plan = plan_cmlm(enc, {});
  EXPECT_TRUE(plan.skip);
  EXPECT_EQ(plan.size(), 0u);
  EXPECT_THROW(plan_cmlm(enc, {{8, 12}}), DataError);
}

TEST(Masking, FrameSequenceWrapsAndTruncates) {
  MaskedInput in{{10, 11, 12, 13, 14}, {{0, 10}, {3, 13}, {4, 14}}};
  auto full = frame_sequence(in, 16);
  EXPECT_EQ(full.ids, (std::vector<TokenId>{special::kBos, 10, 11, 12, 13, 14, special::kEos}));
  ASSERT_EQ(full.targets.size(), 3u);
  EXPECT_EQ(full.targets[1].row, 4u);
  auto cut = frame_sequence(in, 5);
  EXPECT_EQ(cut.ids, (std::vector<TokenId>{special::kBos, 10, 11, 12, special::kEos}));
  ASSERT_EQ(cut.targets.size(), 1u);
  EXPECT_EQ(cut.targets[0].row, 1u);
}

TEST(Masking, ApplyPlanRecordsTargets) {
  auto enc = synthetic(20);
  auto plan = plan_mlm(enc, 500, 3, {0.5, 0.8, 0.1});
  auto m = apply_plan(enc, plan);
  ASSERT_EQ(m.targets.size(), plan.size());
  for (std::size_t k = 0; k < plan.size(); ++k) {
    EXPECT_EQ(m.targets[k].row, plan.actions[k].position);
    EXPECT_EQ(m.targets[k].id, enc.ids[plan.actions[k].position]);
    EXPECT_EQ(m.ids[plan.actions[k].position], plan.actions[k].replacement);
  }
}

TEST(Masking, VariableViewCollapsesOtherVariables) {
  // Tokens 0..9; variable 0 at [1,3) and [6,8), variable 1 at [4,6).
  Encoding e = synthetic(10);
  e.slot_token_spans = {{{1, 3}, {6, 8}}, {{4, 6}}};
  auto view = variable_view(e, 0, {true, true});
  ASSERT_EQ(view.size(), 9u);
  EXPECT_EQ(view.ids[4], special::kMask);
  EXPECT_EQ(view.offsets[4].begin, 4u);
  EXPECT_EQ(view.offsets[4].end, 6u);
  ASSERT_EQ(view.slot_token_spans.size(), 1u);
  ASSERT_EQ(view.slot_token_spans[0].size(), 2u);
  EXPECT_EQ(view.slot_token_spans[0][1].begin, 5u);
  for (const auto& r : view.slot_token_spans[0])
    for (std::size_t k = r.begin; k < r.end; ++k) EXPECT_EQ(view.ids[k], e.ids[k < 5 ? k : k + 1]);

  // A variable that is not collapsed keeps its tokens.
  auto kept = variable_view(e, 1, {false, false});
  EXPECT_EQ(kept.ids, e.ids);
  EXPECT_EQ(kept.slot_token_spans[0].size(), 1u);
  EXPECT_THROW(variable_view(e, 2, {}), UsageError);
}

TEST(Masking, VariableViewTargetsEveryVariableTokenOncePerPass) {
  // Over all views of a function, CMLM targets cover each variable token once.
  std::size_t targets = 0, tokens = 0;
  for (const auto& f : toygen::generate({.seed = 5, .functions = 20})) {
    auto enc = encode_function(toy_vocab(), f);
    for (const auto& occ : enc.slot_token_spans)
      for (const auto& r : occ) tokens += r.size();
    const std::vector<bool> all(enc.slot_token_spans.size(), true);
    for (std::size_t v = 0; v < enc.slot_token_spans.size(); ++v) {
      auto view = variable_view(enc, v, all);
      auto plan = plan_cmlm(view, constrained_set(view));
      targets += plan.size();
      for (const auto& a : plan.actions) EXPECT_EQ(a.replacement, special::kMask);
      std::size_t other_tokens = 0, other_occurrences = 0;
      for (std::size_t w = 0; w < enc.slot_token_spans.size(); ++w)
        for (const auto& r : enc.slot_token_spans[w])
          if (w != v) other_tokens += r.size(), other_occurrences += 1;
      EXPECT_EQ(view.size(), enc.size() - other_tokens + other_occurrences);
    }
  }
  EXPECT_EQ(targets, tokens);
}
