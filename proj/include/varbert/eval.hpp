#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "varbert/corpus.hpp"
#include "varbert/inference.hpp"
#include "varbert/masking.hpp"

namespace varbert {

inline bool exact_match(std::string_view pred, std::string_view gold) { return strip_name(pred) == strip_name(gold); }

inline bool top_k_accuracy(const std::vector<std::string>& ranked, std::string_view gold, std::size_t k) {
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i)
    if (exact_match(ranked[i], gold)) return true;
  return false;
}

// Levenshtein distance with unit costs.
inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

// Edit distance normalized by the gold length; may exceed 1.
inline double cer(std::string_view pred, std::string_view gold) {
  if (gold.empty()) throw DataError("cer with an empty gold name");
  return static_cast<double>(edit_distance(pred, gold)) / static_cast<double>(gold.size());
}

// exp(mean NLL) over every target of every input.
template <typename T>
double perplexity(const Model<T>& model, const std::vector<MaskedInput>& inputs) {
  double nll = 0;
  std::size_t count = 0;
  for (const MaskedInput& in : inputs) {
    if (in.targets.empty()) continue;
    Tape<T> tape(false);
    Var hidden = model.encode_eval(tape, in.ids);
    std::vector<std::size_t> rows;
    std::vector<ops::Target> targets;
    for (const auto& t : in.targets) {
      targets.push_back({rows.size(), t.id});
      rows.push_back(t.row);
    }
    Var loss = ops::cross_entropy_masked(tape, model.head_eval(tape, hidden, std::move(rows)), std::move(targets));
    nll += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(in.targets.size());
    count += in.targets.size();
  }
  if (count == 0) throw DataError("perplexity over an empty target set");
  return std::exp(nll / static_cast<double>(count));
}

struct TokenNll {
  double nll = 0;
  std::size_t tokens = 0;
};

// Summed NLL of each variable's gold tokens, one constrained-masking forward
// per variable over its variable_view.
template <typename T>
std::vector<TokenNll> variable_nll(const Model<T>& model, const Encoding& enc) {
  std::vector<TokenNll> out(enc.slot_token_spans.size());
  const std::vector<bool> collapse(enc.slot_token_spans.size(), true);
  for (std::size_t v = 0; v < out.size(); ++v) {
    const Encoding view = variable_view(enc, v, collapse);
    MaskedInput in = frame_sequence(apply_plan(view, plan_cmlm(view, constrained_set(view))), model.config().max_seq);
    if (in.targets.empty()) continue;
    Tape<T> tape(false);
    Var hidden = model.encode_eval(tape, in.ids);
    std::vector<std::size_t> rows;
    for (const auto& t : in.targets) rows.push_back(t.row);
    Var logits = model.head_eval(tape, hidden, rows);
    const auto& values = tape.value(logits);
    const std::size_t m = tape.cols(logits);
    for (std::size_t i = 0; i < in.targets.size(); ++i) {
      const T* row = &values[i * m];
      double mx = -INFINITY;
      for (std::size_t c = 0; c < m; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double z = 0;
      for (std::size_t c = 0; c < m; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      out[v].nll += std::log(z) + mx - static_cast<double>(row[in.targets[i].id]);
      out[v].tokens += 1;
    }
  }
  return out;
}

struct VariablePrediction {
  std::string function_id;
  std::string placeholder;
  std::string gold;
  std::size_t gold_count = 0;
  std::optional<bool> body_in_train;
  std::vector<PredictionCandidate> ranked;  // head is the prediction
  TokenNll nll;

  const PredictionCandidate* head() const { return ranked.empty() ? nullptr : &ranked.front(); }
  std::string predicted() const { return ranked.empty() ? std::string() : ranked.front().name; }
};

// Predicts every variable of the functions. Oracle mode restricts each
// variable to its gold token count.
template <typename T>
std::vector<VariablePrediction> predict_dataset(const Predictor<T>& predictor,
                                                const std::vector<const DecompiledFunction*>& functions,
                                                InferenceMode mode, std::size_t max_allowed = 7,
                                                std::size_t k = 10) {
  std::vector<VariablePrediction> out;
  for (const DecompiledFunction* f : functions) {
    const Encoding gold_enc = encode_function(predictor.vocab(), *f);
    const std::vector<TokenNll> nll = variable_nll(predictor.model(), gold_enc);
    InferenceRequest req = request_for(*f, predictor.vocab(), mode, k, max_allowed);
    const PreparedFunction p = predictor.prepare(req);
    for (std::size_t v = 0; v < f->variables.size(); ++v) {
      VariablePrediction vp;
      vp.function_id = f->function_id;
      vp.placeholder = f->variables[v].decompiler_name;
      vp.gold = f->variables[v].gold_name;
      vp.gold_count = *req.slots[v].oracle_count;
      vp.body_in_train = f->body_in_train;
      std::vector<std::size_t> counts;
      if (mode == InferenceMode::Oracle) counts.push_back(vp.gold_count);
      vp.ranked = predictor.top_k_suggestions(p, v, k, max_allowed, req.policy, std::move(counts));
      vp.nll = nll[v];
      out.push_back(std::move(vp));
    }
  }
  return out;
}

// Longest gold name in tokens: the MaxAllowedToken statistic of a split.
inline std::size_t max_gold_tokens(const BpeVocab& vocab, const std::vector<const DecompiledFunction*>& functions) {
  std::size_t longest = 0;
  for (const DecompiledFunction* f : functions)
    for (const auto& v : f->variables) longest = std::max(longest, encode(vocab, v.gold_name).size());
  if (longest == 0) throw DataError("no variables to derive max_allowed from");
  return longest;
}

inline std::string_view mode_name(InferenceMode m) { return m == InferenceMode::Oracle ? "oracle" : "heuristic"; }

inline InferenceMode parse_mode(std::string_view s) {
  if (s == "oracle") return InferenceMode::Oracle;
  if (s == "heuristic") return InferenceMode::Heuristic;
  throw UsageError("unknown mode '" + std::string(s) + "' (expected heuristic or oracle)");
}

// Label for a wrong prediction; the first matching rule wins.
inline std::string error_category(const VariablePrediction& vp, const BpeVocab& vocab) {
  const PredictionCandidate* h = vp.head();
  if (!h || h->count != vp.gold_count) return "wrong-count";
  const Encoding gold = encode(vocab, vp.gold);
  for (std::size_t j = 0; j < h->tokens.size() && j < gold.ids.size(); ++j)
    if (h->tokens[j] == gold.ids[j]) return "partial-token";
  if (edit_distance(h->name, vp.gold) <= 2) return "off-by-few-chars";
  return "other";
}

inline constexpr std::size_t kReportRanks[] = {1, 3, 5, 10};

struct ReportRow {
  std::string label;
  std::size_t variables = 0;
  std::size_t functions = 0;
  std::array<double, 4> top_k{};  // percentages at kReportRanks
  double cer = 0;                 // percentage
  std::optional<double> perplexity;
};

struct EvalReport {
  InferenceMode mode = InferenceMode::Heuristic;
  std::size_t max_allowed = 7;
  std::string dataset_hash;
  std::string checkpoint_hash;
  std::vector<ReportRow> rows;  // Overall, Body-in-train, Body-not-in-train
  std::map<std::string, std::size_t> errors;
  std::size_t wrong = 0;
};

namespace detail {

inline ReportRow aggregate(std::string label, const std::vector<const VariablePrediction*>& vars) {
  ReportRow row;
  row.label = std::move(label);
  row.variables = vars.size();
  std::set<std::string> fns;
  double nll = 0;
  std::size_t tokens = 0;
  std::array<std::size_t, 4> hits{};
  double cer_sum = 0;
  for (const VariablePrediction* vp : vars) {
    fns.insert(vp->function_id);
    std::vector<std::string> names;
    for (const auto& c : vp->ranked) names.push_back(c.name);
    for (std::size_t r = 0; r < 4; ++r) hits[r] += top_k_accuracy(names, vp->gold, kReportRanks[r]);
    cer_sum += cer(vp->predicted(), vp->gold);
    nll += vp->nll.nll;
    tokens += vp->nll.tokens;
  }
  row.functions = fns.size();
  if (!vars.empty()) {
    const double n = static_cast<double>(vars.size());
    for (std::size_t r = 0; r < 4; ++r) row.top_k[r] = 100.0 * static_cast<double>(hits[r]) / n;
    row.cer = 100.0 * cer_sum / n;
  }
  if (tokens > 0) row.perplexity = std::exp(nll / static_cast<double>(tokens));
  return row;
}

}  // namespace detail

inline EvalReport build_report(const std::vector<VariablePrediction>& preds, InferenceMode mode,
                               std::size_t max_allowed, const BpeVocab& vocab, std::string dataset_hash = "",
                               std::string checkpoint_hash = "") {
  std::set<std::string> untagged;
  for (const auto& vp : preds)
    if (!vp.body_in_train) untagged.insert(vp.function_id);
  if (!untagged.empty()) {
    std::string list;
    for (const auto& id : untagged) list += (list.empty() ? "" : ", ") + id;
    throw DataError("functions lack a body_in_train tag: " + list);
  }
  EvalReport rep;
  rep.mode = mode;
  rep.max_allowed = max_allowed;
  rep.dataset_hash = std::move(dataset_hash);
  rep.checkpoint_hash = std::move(checkpoint_hash);
  std::vector<const VariablePrediction*> all, in, out;
  for (const auto& vp : preds) {
    all.push_back(&vp);
    (*vp.body_in_train ? in : out).push_back(&vp);
    if (!exact_match(vp.predicted(), vp.gold)) {
      ++rep.wrong;
      ++rep.errors[error_category(vp, vocab)];
    }
  }
  rep.rows.push_back(detail::aggregate("Overall", all));
  rep.rows.push_back(detail::aggregate("Body-in-train", in));
  rep.rows.push_back(detail::aggregate("Body-not-in-train", out));
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"split", row.label}, {"variables", row.variables}, {"functions", row.functions},
                        {"cer", row.cer}};
    for (std::size_t i = 0; i < 4; ++i) j["top" + std::to_string(kReportRanks[i])] = row.top_k[i];
    j["perplexity"] = row.perplexity ? nlohmann::json(*row.perplexity) : nlohmann::json(nullptr);
    rows.push_back(j);
  }
  return {{"mode", mode_name(r.mode)},       {"max_allowed", r.max_allowed}, {"dataset_hash", r.dataset_hash},
          {"checkpoint_hash", r.checkpoint_hash}, {"rows", rows},           {"wrong", r.wrong},
          {"error_taxonomy", r.errors}};
}

inline std::string render_table(const EvalReport& r) {
  std::string out = "mode=" + std::string(mode_name(r.mode)) + " max_allowed=" + std::to_string(r.max_allowed) +
                    " dataset=" + r.dataset_hash + " checkpoint=" + r.checkpoint_hash + "\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %6s %6s %7s %7s %7s %7s %7s %8s\n", "Split", "Vars", "Funcs", "Top-1",
                "Top-3", "Top-5", "Top-10", "CER", "PPL");
  out += buf;
  for (const auto& row : r.rows) {
    std::string ppl = row.perplexity ? std::to_string(*row.perplexity).substr(0, 7) : "-";
    std::snprintf(buf, sizeof buf, "%-18s %6zu %6zu %7.2f %7.2f %7.2f %7.2f %7.2f %8s\n", row.label.c_str(),
                  row.variables, row.functions, row.top_k[0], row.top_k[1], row.top_k[2], row.top_k[3], row.cer,
                  ppl.c_str());
    out += buf;
  }
  if (r.wrong > 0) {
    out += "errors (" + std::to_string(r.wrong) + "):";
    for (const auto& [k, n] : r.errors) out += " " + k + "=" + std::to_string(n);
    out += "\n";
  }
  return out;
}

// Variables where the heuristic picked the gold count but its prediction
// differs from the oracle one. Both lists must come from the same functions.
inline std::vector<std::string> consistency_violations(const std::vector<VariablePrediction>& heuristic,
                                                       const std::vector<VariablePrediction>& oracle) {
  if (heuristic.size() != oracle.size()) throw UsageError("prediction lists differ in length");
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < heuristic.size(); ++i) {
    const auto *h = heuristic[i].head(), *o = oracle[i].head();
    if (!h || h->count != heuristic[i].gold_count) continue;
    if (!o || h->name != o->name || h->tokens != o->tokens || h->token_probs != o->token_probs)
      bad.push_back(heuristic[i].function_id + ":" + heuristic[i].placeholder);
  }
  return bad;
}

}  // namespace varbert
