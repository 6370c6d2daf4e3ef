#include <gtest/gtest.h>

#include "varbert/model.hpp"

using namespace varbert;

namespace {

ModelConfig tiny() { return {1, 1, 4, 16, 8, 260, 0.0}; }

ModelConfig small_test_config() { return {2, 2, 8, 0, 16, 270, 0.0}; }

std::vector<TokenId> ids_of(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Model, TinyParamCountByHand) {
  // tok_emb 260*4 + pos_emb 8*4 = 1072
  // one layer: q,k,v,o 4*(16+4) = 80; ffn 4*16+16 + 16*4+4 = 148; two norms 16
  // emb norm 8, head bias 260
  EXPECT_EQ(param_count(tiny()), 1072u + 80u + 148u + 16u + 8u + 260u);
  Model<float> m(tiny(), 1);
  EXPECT_EQ(m.allocated_elements(), param_count(tiny()));
  Model<float> big(small_test_config(), 1);
  EXPECT_EQ(big.allocated_elements(), param_count(small_test_config()));
}

TEST(Model, PresetSizes) {
  const double base = static_cast<double>(param_count(presets::varbert_base(50000)));
  const double small = static_cast<double>(param_count(presets::varbert_small(50000)));
  EXPECT_NEAR(base / 125e6, 1.0, 0.05);
  EXPECT_NEAR(small / 45e6, 1.0, 0.05);
  auto b = presets::varbert_base(50000);
  EXPECT_EQ(b.layers, 12u);
  EXPECT_EQ(b.heads, 12u);
  EXPECT_EQ(b.hidden, 768u);
  EXPECT_EQ(b.ffn(), 3072u);
  EXPECT_EQ(b.max_seq, 512u);
  auto s = presets::varbert_small(50000);
  EXPECT_EQ(s.layers, 6u);
  EXPECT_EQ(s.heads, 8u);
  EXPECT_EQ(s.hidden, 512u);
  EXPECT_EQ(s.max_seq, 1024u);
  EXPECT_THROW(presets::by_name("varbert-huge", 1000), UsageError);
  EXPECT_EQ(presets::by_name("varbert-toy", 512), presets::varbert_toy(512));
}

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(Model<float>(c, 1), UsageError);
  c = tiny();
  c.dropout = 1.0;
  EXPECT_THROW(Model<float>(c, 1), UsageError);
  c = tiny();
  c.layers = 0;
  EXPECT_THROW(Model<float>(c, 1), UsageError);
  EXPECT_EQ(model_config_from_json(to_json(small_test_config())).ffn(), small_test_config().ffn());
}

TEST(Model, InitializationIsSeeded) {
  Model<float> a(small_test_config(), 7), b(small_test_config(), 7), c(small_test_config(), 8);
  EXPECT_EQ(a.param("tok_emb").values, b.param("tok_emb").values);
  EXPECT_NE(a.param("tok_emb").values, c.param("tok_emb").values);
  for (float g : a.param("layer.0.ln1.gamma").values) EXPECT_EQ(g, 1.0f);
  for (float v : a.param("head.bias").values) EXPECT_EQ(v, 0.0f);
}

TEST(Model, EvalForwardIsDeterministic) {
  Model<float> m(small_test_config(), 3);
  auto ids = ids_of({0, 10, 20, 30, 4, 2});
  EXPECT_EQ(m.logits(ids), m.logits(ids));
  EXPECT_EQ(m.logits(ids).size(), ids.size() * 270);
}

TEST(Model, RejectsBadInputs) {
  Model<float> m(tiny(), 1);
  EXPECT_THROW(m.logits({}), DataError);
  EXPECT_THROW(m.logits(std::vector<TokenId>(9, 5)), DataError);
  EXPECT_THROW(m.logits(ids_of({0, 260})), DataError);
  std::vector<bool> short_mask(1, true);
  EXPECT_THROW(m.logits(ids_of({0, 5}), &short_mask), DataError);
  Tape<float> recording;
  EXPECT_THROW(m.encode_eval(recording, ids_of({0, 5})), RuntimeError);
}

TEST(Model, PaddingDoesNotChangeValidPositions) {
  Model<double> m(small_test_config(), 4);
  auto ids = ids_of({0, 40, 50, 60, 2});
  auto plain = m.logits(ids);
  auto padded_ids = ids;
  padded_ids.insert(padded_ids.end(), 3, special::kPad);
  std::vector<bool> valid(padded_ids.size(), true);
  for (std::size_t i = ids.size(); i < valid.size(); ++i) valid[i] = false;
  auto padded = m.logits(padded_ids, &valid);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_NEAR(padded[i], plain[i], 1e-10);
}

TEST(Model, PermutationEquivariantWithoutPositions) {
  Model<double> m(small_test_config(), 5);
  std::fill(m.param("pos_emb").values.begin(), m.param("pos_emb").values.end(), 0.0);
  auto ids = ids_of({11, 22, 33, 44});
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<TokenId> permuted(ids.size());
  for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = ids[perm[i]];
  auto a = m.logits(ids), b = m.logits(permuted);
  const std::size_t M = 270;
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < M; ++j) EXPECT_NEAR(b[i * M + j], a[perm[i] * M + j], 1e-10);
}

TEST(Model, FloatAndDoubleAgree) {
  Model<double> d(small_test_config(), 6);
  Model<float> f(d);
  auto ids = ids_of({0, 100, 200, 4, 2});
  auto ld = d.logits(ids);
  auto lf = f.logits(ids);
  for (std::size_t i = 0; i < ld.size(); ++i) EXPECT_NEAR(lf[i], ld[i], 1e-4);
}

TEST(Model, FullModelGradientCheck) {
  ModelConfig c = small_test_config();
  Model<double> m(c, 9);
  std::vector<Tensor<double>*> params;
  for (auto& [name, t] : m.params()) params.push_back(&t);
  const auto ids = ids_of({0, 50, 4, 60, 4, 2});
  auto r = grad_check(
      params,
      [&](Tape<double>& t) {
        Var h = m.encode(t, ids, nullptr, false, nullptr);
        Var logits = m.head(t, h, {2, 4});
        return ops::cross_entropy_masked(t, logits, {{0, 70}, {1, 80}});
      },
      1e-4, 300, 3);
  EXPECT_LT(r.max_rel_error, 5e-5);
  EXPECT_EQ(r.coordinates_checked, 300u);
}

TEST(Model, WeightDecayGroups) {
  EXPECT_TRUE(weight_decays("tok_emb"));
  EXPECT_TRUE(weight_decays("pos_emb"));
  EXPECT_TRUE(weight_decays("layer.0.attn.q.weight"));
  EXPECT_FALSE(weight_decays("layer.0.attn.q.bias"));
  EXPECT_FALSE(weight_decays("layer.0.ln1.gamma"));
  EXPECT_FALSE(weight_decays("head.bias"));
}
