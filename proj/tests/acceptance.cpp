// Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
// criterion fails.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <thread>

#include "varbert/checkpoint.hpp"
#include "varbert/eval.hpp"
#include "varbert/service.hpp"
#include "varbert/toygen.hpp"
#include "varbert/training.hpp"

using namespace varbert;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradMinutes = 2.0;
constexpr std::size_t kMaskPositions = 1'000'000;
constexpr double kSelectTol = 0.002;
constexpr double kSplitTol = 0.005;
constexpr std::size_t kRoundTrips = 10'000;
constexpr double kUniformPplTol = 0.001;
constexpr double kAdamTol = 1e-10;
constexpr double kPresetTol = 0.05;
constexpr double kOracleEmMin = 95.0;
constexpr double kHeuristicEmMin = 85.0;
constexpr double kEndToEndMinutes = 30.0;
constexpr double kCmlmGainPp = 30.0;
constexpr double kOracleSlackPp = 1.0;
constexpr std::size_t kGoldenRequests = 100;

// Recipe for the toy end-to-end run.
constexpr std::size_t kVocabSize = 512;
constexpr std::size_t kPretrainEpochs = 40;
constexpr std::size_t kPretrainBatch = 8;
constexpr double kPretrainLr = 1e-3;
constexpr std::size_t kFinetuneEpochs = 15;
constexpr std::size_t kFinetuneBatch = 4;
constexpr double kFinetuneLr = 2e-3;
constexpr double kFinetuneDropout = 0.1;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << x;
  return s.str();
}

Tensor<double> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : t.values) v = d(rng);
  return t;
}

std::vector<double> weights(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> w(n);
  for (double& v : w) v = d(rng);
  return w;
}

std::string train_text(const std::vector<DecompiledFunction>& fns) {
  std::string text;
  for (const auto& f : fns)
    if (f.split == Split::Train) text += canonicalize(f).text + "\n";
  return text;
}

// 1. Gradient checks in double precision.
Outcome gradients() {
  const auto start = Clock::now();
  std::vector<std::pair<std::string, GradCheckResult>> results;
  auto check = [&](std::string name, std::vector<Tensor<double>*> params, auto build, double eps = 1e-5,
                   std::size_t coords = 200) { results.emplace_back(std::move(name), grad_check(params, build, eps, coords)); };

  auto a = random_tensor({3, 4}, 1), b = random_tensor({4, 5}, 2), c = random_tensor({3, 5}, 3);
  auto bt = random_tensor({5, 4}, 4), bias = random_tensor({5}, 5);
  auto w15 = weights(15, 6);
  check("matmul/add/scale", {&a, &b, &c, &bt, &bias}, [&](Tape<double>& t) {
    Var x = ops::matmul(t, t.param(a), t.param(b));
    Var y = ops::matmul_nt(t, t.param(a), t.param(bt));
    Var z = ops::add(t, ops::add(t, x, ops::scale(t, y, 0.7)), t.param(c));
    return ops::weighted_sum(t, ops::add_row(t, z, t.param(bias)), w15);
  });
  auto table = random_tensor({6, 4}, 7), other = random_tensor({5, 3}, 8);
  auto w25 = weights(25, 9);
  check("gather/slice/concat", {&table, &other}, [&](Tape<double>& t) {
    Var g = ops::gather_rows(t, t.param(table), {0, 3, 3, 5, 1});
    return ops::weighted_sum(t, ops::concat_cols(t, {ops::slice_cols(t, g, 1, 2), t.param(other)}), w25);
  });
  auto sx = random_tensor({3, 5}, 10);
  auto sw = weights(15, 11);
  check("masked softmax", {&sx}, [&](Tape<double>& t) {
    Var m = ops::mask_cols(t, t.param(sx), {true, true, false, true, true});
    return ops::weighted_sum(t, ops::softmax_rows(t, m), sw);
  });
  auto lx = random_tensor({4, 6}, 12, 2.0), lg = random_tensor({6}, 13), lb = random_tensor({6}, 14);
  auto lw = weights(24, 15);
  check("layer norm", {&lx, &lg, &lb}, [&](Tape<double>& t) {
    return ops::weighted_sum(t, ops::layer_norm(t, t.param(lx), t.param(lg), t.param(lb)), lw);
  });
  auto gx = random_tensor({3, 7}, 16, 2.0);
  auto gw = weights(21, 17);
  check("gelu", {&gx}, [&](Tape<double>& t) { return ops::weighted_sum(t, ops::gelu(t, t.param(gx)), gw); });
  auto dx = random_tensor({4, 8}, 18);
  auto dw = weights(32, 19);
  check("dropout", {&dx}, [&](Tape<double>& t) {
    Rng rng(3);
    return ops::weighted_sum(t, ops::dropout(t, t.param(dx), 0.3, &rng, true), dw);
  });
  auto cx = random_tensor({4, 9}, 20);
  check("cross entropy", {&cx}, [&](Tape<double>& t) {
    Var p = t.param(cx);
    Var ce = ops::cross_entropy_masked(t, p, {{0, 2}, {2, 8}, {3, 0}});
    return ops::add(t, ce, ops::scale(t, ops::sum_squares(t, p), 0.01));
  });

  Model<double> m({2, 2, 8, 0, 16, 270, 0.0}, 9);
  std::vector<Tensor<double>*> params;
  for (auto& [name, t] : m.params()) params.push_back(&t);
  const std::vector<TokenId> ids = {0, 50, 4, 60, 4, 2};
  check(
      "2-layer model", params,
      [&](Tape<double>& t) {
        Var h = m.encode(t, ids, nullptr, false, nullptr);
        return ops::cross_entropy_masked(t, m.head(t, h, {2, 4}), {{0, 70}, {1, 80}});
      },
      1e-4, 2000);

  double worst = 0;
  std::string worst_name;
  for (const auto& [name, r] : results)
    if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_name = name;
  const double minutes = seconds_since(start) / 60;
  return {worst < kGradTol && minutes < kGradMinutes,
          std::to_string(results.size()) + " checks, max rel error " + fmt(worst) + " (" + worst_name + "), " +
              fmt(minutes * 60, 3) + "s"};
}

// 2. Masking statistics and constrained masking.
Outcome masking() {
  constexpr std::size_t kVocab = 1000;
  Encoding enc;
  Rng ids(5);
  std::uniform_int_distribution<TokenId> pick(special::kCount, kVocab - 1);
  for (std::size_t i = 0; i < 1000; ++i) enc.ids.push_back(pick(ids));
  std::size_t positions = 0, selected = 0;
  std::map<MaskAction, std::size_t> actions;
  bool random_ok = true;
  for (std::uint64_t seed = 0; positions < kMaskPositions; ++seed) {
    auto plan = plan_mlm(enc, kVocab, derive_seed(7, seed));
    positions += enc.size();
    selected += plan.size();
    for (const auto& a : plan.actions) {
      ++actions[a.action];
      if (a.action == MaskAction::Random) random_ok &= a.replacement >= special::kCount && a.replacement < TokenId(kVocab);
    }
  }
  const double sel = double(selected) / double(positions);
  const double fm = double(actions[MaskAction::Mask]) / double(selected);
  const double fr = double(actions[MaskAction::Random]) / double(selected);
  const double fk = double(actions[MaskAction::Keep]) / double(selected);
  bool stats_ok = std::abs(sel - 0.15) <= kSelectTol && std::abs(fm - 0.8) <= kSplitTol &&
                  std::abs(fr - 0.1) <= kSplitTol && std::abs(fk - 0.1) <= kSplitTol && random_ok;

  // Constrained masking on 1000 toy functions against a byte-offset oracle.
  std::vector<DecompiledFunction> fns;
  for (std::uint64_t seed = 11; fns.size() < 1000; ++seed) {
    auto more = toygen::generate({.seed = seed});
    fns.insert(fns.end(), more.begin(), more.end());
  }
  fns.resize(1000);
  const BpeVocab vocab = train_bpe(train_text(toygen::generate({})), kVocabSize, 10000);
  std::size_t exact = 0, views_ok = 0, views = 0;
  for (const auto& f : fns) {
    const Encoding e = encode_function(vocab, f);
    const auto c = canonicalize(f);
    std::vector<bool> inside(e.size(), false);
    for (const auto& occ : c.slot_spans)
      for (const Span& s : occ)
        for (std::size_t i = 0; i < e.size(); ++i)
          if (e.offsets[i].begin >= s.begin && e.offsets[i].end <= s.end) inside[i] = true;
    const MaskedInput masked = apply_plan(e, plan_cmlm(e, constrained_set(e)));
    bool ok = masked.targets.size() == std::size_t(std::count(inside.begin(), inside.end(), true));
    for (std::size_t i = 0; i < e.size() && ok; ++i) ok = masked.ids[i] == (inside[i] ? special::kMask : e.ids[i]);
    exact += ok;
    // The per-variable training input masks exactly that variable's tokens.
    for (std::size_t v = 0; v < f.variables.size(); ++v, ++views) {
      std::size_t tokens = 0, others = 0;
      for (std::size_t i = 0; i < e.size(); ++i)
        for (const Span& s : c.slot_spans[v])
          if (e.offsets[i].begin >= s.begin && e.offsets[i].end <= s.end) ++tokens;
      for (std::size_t u = 0; u < f.variables.size(); ++u)
        if (u != v) others += c.slot_spans[u].size();
      auto in = make_training_input(e, Objective::CMLM, vocab.size(), 1 << 20, 1, 0, 0, v);
      const auto masks = std::size_t(std::count(in.ids.begin(), in.ids.end(), special::kMask));
      bool vok = in.targets.size() == tokens && masks == tokens + others;
      for (const auto& t : in.targets) vok = vok && in.ids[t.row] == special::kMask;
      views_ok += vok;
    }
  }
  return {stats_ok && exact == fns.size() && views_ok == views,
          "select " + fmt(sel * 100, 5) + "%, mask/random/keep " + fmt(fm * 100, 4) + "/" + fmt(fr * 100, 4) + "/" +
              fmt(fk * 100, 4) + "% over " + std::to_string(positions) + " positions; cmlm exact " +
              std::to_string(exact) + "/" + std::to_string(fns.size()) + ", variable views " +
              std::to_string(views_ok) + "/" + std::to_string(views)};
}

// 3. Tokenizer round trips, determinism and sizes.
Outcome tokenizer() {
  const auto fns = toygen::generate({});
  const std::string text = train_text(fns);
  const BpeVocab vocab = train_bpe(text, kVocabSize, 10000);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> len(0, 64), byte(0, 255);
  std::size_t trips = 0, trips_ok = 0;
  for (std::size_t i = 0; i < kRoundTrips; ++i, ++trips) {
    std::string s(std::size_t(len(rng)), '\0');
    for (char& ch : s) ch = static_cast<char>(byte(rng));
    trips_ok += decode(vocab, encode(vocab, s).ids) == s;
  }
  for (const auto& f : fns) {
    for (const std::string& s : {f.raw_code, canonicalize(f).text}) {
      ++trips;
      trips_ok += decode(vocab, encode(vocab, s).ids) == s;
    }
  }
  const bool same_hash = train_bpe(text, kVocabSize, 10000).hash() == vocab.hash();
  const std::size_t s400 = train_bpe(text, 400, 10000).size(), s1000 = train_bpe(text, 1000, 10000).size();
  return {trips_ok == trips && same_hash && s400 == 400 && s1000 == 1000,
          std::to_string(trips_ok) + "/" + std::to_string(trips) + " round trips, hash " +
              (same_hash ? "stable" : "differs") + ", sizes " + std::to_string(s400) + "/" + std::to_string(s1000)};
}

// Textbook recursion, memoized per pair.
std::size_t recursive_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> int {
    if (i == 0) return int(j);
    if (j == 0) return int(i);
    int& m = memo[i][j];
    if (m >= 0) return m;
    return m = std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1])});
  };
  return std::size_t(d(a.size(), b.size()));
}

// 4. Metrics.
Outcome metrics() {
  std::vector<std::string> all = {""};
  for (std::size_t n = 0, from = 0; n < 6; ++n) {
    const std::size_t to = all.size();
    for (std::size_t i = from; i < to; ++i)
      for (char ch : {'a', 'b', 'c'}) all.push_back(all[i] + ch);
    from = to;
  }
  std::size_t pairs = 0, agree = 0;
  for (const auto& p : all)
    for (const auto& g : all) {
      if (g.empty()) continue;
      ++pairs;
      const std::size_t d = recursive_distance(p, g);
      agree += edit_distance(p, g) == d && cer(p, g) == double(d) / double(g.size());
    }

  // Zero weights give a uniform distribution over the vocabulary.
  const auto fns = toygen::generate({});
  const BpeVocab vocab = train_bpe(train_text(fns), kVocabSize, 10000);
  const Model<float> zero(presets::varbert_toy(vocab.size()));
  std::vector<MaskedInput> inputs;
  std::vector<const DecompiledFunction*> test;
  for (const auto& f : fns) {
    if (f.split != Split::Test) continue;
    test.push_back(&f);
    const Encoding e = encode_function(vocab, f);
    for (std::size_t v = 0; v < f.variables.size(); ++v)
      inputs.push_back(make_training_input(e, Objective::CMLM, vocab.size(), zero.config().max_seq, 1, 0, 0, v));
  }
  const double ppl = perplexity(zero, inputs);
  const double rel = std::abs(ppl - double(vocab.size())) / double(vocab.size());

  // Top-K accuracy never decreases in K.
  Predictor<float> random_model(Model<float>(presets::varbert_toy(vocab.size()), 5), vocab);
  const auto preds = predict_dataset(random_model, test, InferenceMode::Heuristic, 3, 10);
  const auto report = build_report(preds, InferenceMode::Heuristic, 3, vocab);
  bool monotone = true;
  for (const auto& row : report.rows)
    for (std::size_t i = 1; i < row.top_k.size(); ++i) monotone &= row.top_k[i] >= row.top_k[i - 1];
  return {agree == pairs && rel <= kUniformPplTol && monotone,
          std::to_string(agree) + "/" + std::to_string(pairs) + " edit distances agree, uniform ppl " + fmt(ppl, 8) +
              " vs " + std::to_string(vocab.size()) + ", top-k " + (monotone ? "monotone" : "not monotone")};
}

// 5. Schedule and optimizer.
Outcome optimizer() {
  TrainConfig c;
  const double lr = lr_at_step(10000, c, 100000);
  c.weight_decay = 0.1;
  const std::vector<double> grads = {0.5, -0.2, 0.1};
  std::vector<double> theta = {1.0}, m = {0.0}, v = {0.0};
  double expect = 1.0, worst = 0;
  for (std::size_t t = 1; t <= 3; ++t) {
    std::vector<double> g = {grads[t - 1]};
    adam_update<double>(theta, g, m, v, t, 0.01, true, c);
    double m_ref = 0, v_ref = 0;
    for (std::size_t s = 1; s <= t; ++s) {
      m_ref += (1 - c.beta1) * std::pow(c.beta1, double(t - s)) * grads[s - 1];
      v_ref += (1 - c.beta2) * std::pow(c.beta2, double(t - s)) * grads[s - 1] * grads[s - 1];
    }
    const double u = (m_ref / (1 - std::pow(c.beta1, double(t)))) /
                     (std::sqrt(v_ref / (1 - std::pow(c.beta2, double(t)))) + c.adam_eps);
    expect -= 0.01 * (u + c.weight_decay * expect);
    worst = std::max({worst, std::abs(theta[0] - expect), std::abs(m[0] - m_ref), std::abs(v[0] - v_ref)});
  }
  return {lr == 1e-4 && worst <= kAdamTol, "lr(10000) = " + fmt(lr, 17) + ", adam trace max diff " + fmt(worst, 3)};
}

// 6. Parameter counts.
Outcome parameters() {
  std::mt19937_64 rng(23);
  auto in = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::size_t agree = 0;
  for (int i = 0; i < 10; ++i) {
    const std::size_t heads = in(1, 4);
    ModelConfig c{in(1, 3), heads, heads * in(2, 8), in(0, 1) ? in(4, 40) : 0, in(8, 64), in(261, 700), 0.1};
    std::size_t allocated = Model<float>(c, i).allocated_elements();
    agree += allocated == param_count(c);
  }
  const double base = double(param_count(presets::varbert_base(50000)));
  const double small = double(param_count(presets::varbert_small(50000)));
  const bool ok = agree == 10 && std::abs(base / 125e6 - 1) <= kPresetTol && std::abs(small / 45e6 - 1) <= kPresetTol;
  return {ok, std::to_string(agree) + "/10 configs agree, base " + fmt(base / 1e6, 5) + "M, small " +
                  fmt(small / 1e6, 5) + "M"};
}

// Shared toy run for criteria 7-10.
struct ToyRun {
  std::vector<DecompiledFunction> fns;
  std::vector<const DecompiledFunction*> train, test;
  std::vector<Encoding> train_enc, val_enc;
  BpeVocab vocab;
  std::size_t max_allowed = 0;
  std::optional<Checkpoint<float>> pretrained, finetuned;
  double seconds = 0;
  std::vector<VariablePrediction> test_oracle, test_heuristic;
  double train_oracle_em = 0, train_heuristic_em = 0, test_oracle_em = 0, test_heuristic_em = 0;
};

double top1(const std::vector<VariablePrediction>& preds, InferenceMode mode, const ToyRun& run) {
  return build_report(preds, mode, run.max_allowed, run.vocab).rows.at(0).top_k.at(0);
}

TrainConfig finetune_config() {
  TrainConfig fc;
  fc.objective = Objective::CMLM;
  fc.max_epochs = kFinetuneEpochs;
  fc.batch_size = kFinetuneBatch;
  fc.peak_lr = kFinetuneLr;
  fc.warmup_steps = 0;
  fc.dropout = kFinetuneDropout;
  return fc;
}

ToyRun& toy_run(const fs::path& workdir) {
  static std::optional<ToyRun> cached;
  if (cached) return *cached;
  ToyRun& r = cached.emplace();
  const auto start = Clock::now();
  r.fns = toygen::generate({});
  write_file_atomic(workdir / "toy.jsonl", format_dataset(r.fns));
  r.vocab = train_bpe(train_text(r.fns), kVocabSize, 10000);
  for (const auto& f : r.fns) {
    if (f.split == Split::Train) {
      r.train.push_back(&f);
      r.train_enc.push_back(encode_function(r.vocab, f));
    } else if (f.split == Split::Validation) {
      r.val_enc.push_back(encode_function(r.vocab, f));
    } else {
      r.test.push_back(&f);
    }
  }
  r.max_allowed = max_gold_tokens(r.vocab, r.train);

  TrainConfig pc;
  pc.objective = Objective::MLM_WW;
  pc.max_epochs = kPretrainEpochs;
  pc.batch_size = kPretrainBatch;
  pc.peak_lr = kPretrainLr;
  pc.warmup_steps = 0;
  auto pre = pretrain<float>(r.train_enc, r.val_enc, r.vocab, presets::varbert_toy(r.vocab.size()), pc);
  std::cerr << "pretrain " << fmt(seconds_since(start), 4) << "s\n";
  r.pretrained = pre.checkpoint;
  save_checkpoint(workdir / "pretrained.ckpt", *r.pretrained);
  auto fin = finetune<float>(*r.pretrained, r.train_enc, r.val_enc, r.vocab, finetune_config());
  std::cerr << "finetune done at " << fmt(seconds_since(start), 4) << "s\n";
  r.finetuned = fin.checkpoint;
  save_checkpoint(workdir / "finetuned.ckpt", *r.finetuned);

  const Predictor<float> p(r.finetuned->model, r.vocab);
  r.train_oracle_em = top1(predict_dataset(p, r.train, InferenceMode::Oracle, r.max_allowed, 1), InferenceMode::Oracle, r);
  r.train_heuristic_em =
      top1(predict_dataset(p, r.train, InferenceMode::Heuristic, r.max_allowed, 1), InferenceMode::Heuristic, r);
  r.seconds = seconds_since(start);
  r.test_oracle = predict_dataset(p, r.test, InferenceMode::Oracle, r.max_allowed, 10);
  r.test_heuristic = predict_dataset(p, r.test, InferenceMode::Heuristic, r.max_allowed, 10);
  r.test_oracle_em = top1(r.test_oracle, InferenceMode::Oracle, r);
  r.test_heuristic_em = top1(r.test_heuristic, InferenceMode::Heuristic, r);
  return r;
}

// 7. Toy end-to-end.
Outcome end_to_end(const fs::path& workdir) {
  const ToyRun& r = toy_run(workdir);
  const double minutes = r.seconds / 60;
  return {r.train_oracle_em >= kOracleEmMin && r.train_heuristic_em >= kHeuristicEmMin && minutes <= kEndToEndMinutes,
          "train top-1 oracle " + fmt(r.train_oracle_em) + "%, heuristic " + fmt(r.train_heuristic_em) + "% in " +
              fmt(minutes, 3) + " min (test oracle " + fmt(r.test_oracle_em) + "%, heuristic " +
              fmt(r.test_heuristic_em) + "%, max_allowed " + std::to_string(r.max_allowed) + ")"};
}

// 8. Objective and pre-training ablations, heuristic top-1 on the test split.
Outcome ablations(const fs::path& workdir) {
  ToyRun& r = toy_run(workdir);
  auto em = [&](const Model<float>& m) {
    const Predictor<float> p(m, r.vocab);
    return top1(predict_dataset(p, r.test, InferenceMode::Heuristic, r.max_allowed, 1), InferenceMode::Heuristic, r);
  };
  const double mlm_only = em(r.pretrained->model);
  Checkpoint<float> scratch{Model<float>(r.pretrained->model.config(), derive_seed(1, 0x696e6974ULL)), std::nullopt,
                            r.vocab.hash(), nlohmann::json::object()};
  const double from_scratch = em(finetune<float>(scratch, r.train_enc, r.val_enc, r.vocab, finetune_config())
                                     .checkpoint.model);
  const double cmlm = r.test_heuristic_em;
  return {cmlm - mlm_only >= kCmlmGainPp && cmlm > from_scratch,
          "test heuristic top-1: cmlm " + fmt(cmlm) + "%, mlm only " + fmt(mlm_only) + "%, scratch finetune " +
              fmt(from_scratch) + "%"};
}

// 9. Heuristic and oracle agree whenever the heuristic picks the gold count.
Outcome consistency(const fs::path& workdir) {
  const ToyRun& r = toy_run(workdir);
  const auto bad = consistency_violations(r.test_heuristic, r.test_oracle);
  std::size_t matched = 0;
  for (const auto& v : r.test_heuristic) matched += v.head() && v.head()->count == v.gold_count;
  return {bad.empty() && r.test_oracle_em >= r.test_heuristic_em - kOracleSlackPp,
          std::to_string(bad.size()) + " mismatches over " + std::to_string(matched) + " gold-count picks, oracle " +
              fmt(r.test_oracle_em) + "% vs heuristic " + fmt(r.test_heuristic_em) + "%"};
}

// 10. Live service against the direct library path.
Outcome service(const fs::path& workdir) {
  const ToyRun& r = toy_run(workdir);
  auto model = std::make_shared<const LoadedModel>(
      LoadedModel{Predictor<float>(r.finetuned->model, r.vocab), fingerprint_of(read_file(workdir / "finetuned.ckpt")),
                  r.vocab.hash(), (workdir / "finetuned.ckpt").string()});
  PredictionService svc(model, {.max_body_bytes = 1 << 20, .default_max_allowed = r.max_allowed});
  if (!svc.bind("127.0.0.1", 0)) return {false, "could not bind a port"};
  std::thread server([&] { svc.serve(); });
  svc.wait_until_ready();
  httplib::Client client("127.0.0.1", svc.port());
  client.set_read_timeout(120);

  std::size_t equal = 0, stable = 0;
  for (std::size_t i = 0; i < kGoldenRequests; ++i) {
    const DecompiledFunction& f = r.fns[(i * 37) % r.fns.size()];
    const InferenceMode mode = i % 2 ? InferenceMode::Oracle : InferenceMode::Heuristic;
    InferenceRequest req = request_for(f, r.vocab, mode, 1 + i % 5, r.max_allowed);
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& s : req.slots) {
      nlohmann::json spans = nlohmann::json::array();
      for (const Span& sp : s.spans) spans.push_back({sp.begin, sp.end});
      slots.push_back({{"name", s.placeholder}, {"spans", spans}, {"count", *s.oracle_count}});
    }
    nlohmann::json body = {{"code", f.raw_code}, {"slots", slots}, {"k", req.k}, {"mode", mode_name(mode)},
                           {"max_allowed", req.max_allowed}};
    if (i % 7 == 3 && f.variables.size() > 1) {
      body["accepted"] = {{f.variables[0].decompiler_name, f.variables[0].gold_name}};
      req.accepted[f.variables[0].decompiler_name] = f.variables[0].gold_name;
    }
    const std::string direct = to_wire(suggestions_document(*model, req, model->predictor.refine_with_accepted(req)));
    auto first = client.Post("/predict", body.dump(), "application/json");
    auto second = client.Post("/predict", body.dump(), "application/json");
    equal += first && first->status == 200 && first->body == direct;
    stable += first && second && first->body == second->body;
    if (i < 3) write_file_atomic(workdir / ("golden_" + std::to_string(i) + ".json"), body.dump() + "\n" + direct + "\n");
  }
  svc.stop();
  server.join();
  return {equal == kGoldenRequests && stable == kGoldenRequests,
          std::to_string(equal) + "/" + std::to_string(kGoldenRequests) + " byte-equal, " + std::to_string(stable) +
              "/" + std::to_string(kGoldenRequests) + " repeatable"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Directory for artifacts");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  const std::vector<std::function<Outcome()>> criteria = {
      gradients, masking, tokenizer, metrics, optimizer, parameters,
      [&] { return end_to_end(workdir); }, [&] { return ablations(workdir); },
      [&] { return consistency(workdir); }, [&] { return service(workdir); }};
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && std::find(only.begin(), only.end(), int(i + 1)) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all &= o.pass;
    std::cout << "criterion " << (i + 1) << " " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
