#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "varbert/corpus.hpp"
#include "varbert/masking.hpp"
#include "varbert/model.hpp"
#include "varbert/tokenizer.hpp"

namespace varbert {

// Raised when a masked sequence does not fit the model; callers should
// shorten the function text.
class SequenceTooLong : public DataError {
 public:
  using DataError::DataError;
};

struct PredictionCandidate {
  std::string name;
  std::size_t count = 0;
  std::vector<double> token_probs;
  double mean_prob = 0;
  std::vector<TokenId> tokens;
  std::size_t occurrence = 0;  // which occurrence produced the candidate
};

enum class InferenceMode { Heuristic, Oracle };

// How the occurrences of one variable are reconciled.
//   PerOccurrence: each occurrence is decoded on its own and the one with the
//     highest mean_prob is reported.
//   Joint: per-position distributions are averaged over occurrences first.
//     The default.
enum class OccurrencePolicy { PerOccurrence, Joint };

struct SlotRequest {
  std::string placeholder;
  std::vector<Span> spans;
  std::optional<std::size_t> oracle_count;  // required in oracle mode
};

struct InferenceRequest {
  std::string text;
  std::vector<SlotRequest> slots;
  std::map<std::string, std::string> accepted;  // placeholder -> name
  std::size_t k = 10;
  InferenceMode mode = InferenceMode::Heuristic;
  std::size_t max_allowed = 7;
  OccurrencePolicy policy = OccurrencePolicy::Joint;
};

struct SlotSuggestions {
  std::string placeholder;
  std::vector<PredictionCandidate> candidates;  // ranked; head is the prediction
};

// A request with accepted names substituted in and the text encoded with
// token boundaries at every slot occurrence.
struct PreparedFunction {
  std::string text;
  Encoding encoding;
  std::vector<std::string> placeholders;
  std::vector<bool> pending;
};

inline std::string strip_name(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Checks request shape; throws UsageError for malformed requests.
inline void validate_request(const InferenceRequest& req) {
  if (req.k < 1) throw UsageError("k must be at least 1");
  if (req.max_allowed < 1) throw UsageError("max_allowed must be at least 1");
  std::set<std::string> names;
  std::vector<std::pair<Span, std::string>> all;
  for (const auto& s : req.slots) {
    if (s.placeholder.empty()) throw UsageError("slot with empty placeholder");
    if (!names.insert(s.placeholder).second) throw UsageError("placeholder " + s.placeholder + " declared twice");
    if (s.spans.empty()) throw UsageError("slot " + s.placeholder + " has no spans");
    for (const Span& sp : s.spans) {
      if (sp.begin >= sp.end || sp.end > req.text.size())
        throw UsageError("slot " + s.placeholder + ": span [" + std::to_string(sp.begin) + "," +
                         std::to_string(sp.end) + ") invalid for text of " + std::to_string(req.text.size()) +
                         " bytes");
      all.emplace_back(sp, s.placeholder);
    }
  }
  std::sort(all.begin(), all.end());
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i - 1].first.end > all[i].first.begin)
      throw UsageError("spans of " + all[i - 1].second + " and " + all[i].second + " overlap");
  for (const auto& [ph, name] : req.accepted) {
    if (!names.count(ph)) throw UsageError("accepted name for unknown slot " + ph);
    if (strip_name(name).empty()) throw UsageError("accepted name for " + ph + " is empty");
  }
  if (req.mode == InferenceMode::Oracle)
    for (const auto& s : req.slots)
      if (!req.accepted.count(s.placeholder) && (!s.oracle_count || *s.oracle_count < 1))
        throw UsageError("oracle mode needs a count for slot " + s.placeholder);
}

// Request for every variable of a dataset record; oracle counts come from the
// gold names.
inline InferenceRequest request_for(const DecompiledFunction& f, const BpeVocab& vocab, InferenceMode mode,
                                    std::size_t k = 10, std::size_t max_allowed = 7) {
  InferenceRequest req;
  req.text = f.raw_code;
  req.k = k;
  req.mode = mode;
  req.max_allowed = max_allowed;
  for (const auto& v : f.variables)
    req.slots.push_back({v.decompiler_name, v.occurrences, encode(vocab, v.gold_name).size()});
  return req;
}

template <typename T = float>
class Predictor {
 public:
  Predictor(Model<T> model, BpeVocab vocab) : model_(std::move(model)), vocab_(std::move(vocab)) {
    if (model_.config().vocab_size != vocab_.size())
      throw DataError("model vocabulary size " + std::to_string(model_.config().vocab_size) +
                      " does not match tokenizer size " + std::to_string(vocab_.size()));
  }

  const Model<T>& model() const { return model_; }
  const BpeVocab& vocab() const { return vocab_; }

  PreparedFunction prepare(const InferenceRequest& req) const {
    validate_request(req);
    std::vector<std::vector<Span>> spans;
    std::vector<std::string> names;
    PreparedFunction p;
    for (const auto& s : req.slots) {
      std::vector<Span> sorted = s.spans;
      std::sort(sorted.begin(), sorted.end());
      spans.push_back(std::move(sorted));
      auto it = req.accepted.find(s.placeholder);
      const bool pending = it == req.accepted.end();
      names.push_back(pending ? req.text.substr(spans.back()[0].begin, spans.back()[0].size()) : it->second);
      p.placeholders.push_back(s.placeholder);
      p.pending.push_back(pending);
    }
    // Pending spans keep their original text (they are masked anyway);
    // accepted ones receive the accepted name as real tokens.
    auto sub = substitute(req.text, spans, names);
    p.text = std::move(sub.text);
    p.encoding = encode_with_slots(vocab_, p.text, sub.spans);
    return p;
  }

  // Top entries of one masked position: (probability, token) in rank order.
  using Ranked = std::vector<std::pair<double, TokenId>>;

  // rows[o][j]: ranked tokens for mask j of occurrence o.
  struct CountForward {
    std::size_t count = 0;
    std::vector<std::vector<Ranked>> rows;
  };

  // One forward over the variable_view of `var` (other pending variables as
  // a single MASK) with every occurrence of `var` replaced by n MASKs.
  CountForward forward_count(const PreparedFunction& p, std::size_t var, std::size_t n, std::size_t keep) const {
    if (n < 1) throw UsageError("mask count must be at least 1");
    if (var >= p.pending.size() || !p.pending[var]) throw UsageError("slot is not pending");
    const Encoding view = variable_view(p.encoding, var, p.pending);
    const auto& occurrences = view.slot_token_spans[0];

    std::vector<TokenId> ids{special::kBos};
    std::vector<std::vector<std::size_t>> positions(occurrences.size());
    std::size_t cursor = 0;
    for (std::size_t o = 0; o < occurrences.size(); ++o) {
      ids.insert(ids.end(), view.ids.begin() + static_cast<std::ptrdiff_t>(cursor),
                 view.ids.begin() + static_cast<std::ptrdiff_t>(occurrences[o].begin));
      for (std::size_t j = 0; j < n; ++j) {
        positions[o].push_back(ids.size());
        ids.push_back(special::kMask);
      }
      cursor = occurrences[o].end;
    }
    ids.insert(ids.end(), view.ids.begin() + static_cast<std::ptrdiff_t>(cursor), view.ids.end());
    ids.push_back(special::kEos);
    if (ids.size() > model_.config().max_seq)
      throw SequenceTooLong("sequence of " + std::to_string(ids.size()) + " tokens with " + std::to_string(n) +
                            " masks exceeds max_seq " + std::to_string(model_.config().max_seq) +
                            "; truncate the function context");

    std::vector<std::size_t> rows;
    for (const auto& occ : positions) rows.insert(rows.end(), occ.begin(), occ.end());
    Tape<T> tape(false);
    Var hidden = model_.encode_eval(tape, ids);
    Var logits = model_.head_eval(tape, hidden, rows);
    const auto& values = tape.value(logits);
    const std::size_t m = tape.cols(logits);

    CountForward out;
    out.count = n;
    out.rows.resize(positions.size());
    std::size_t r = 0;
    for (std::size_t o = 0; o < positions.size(); ++o)
      for (std::size_t j = 0; j < n; ++j, ++r) out.rows[o].push_back(rank_row(&values[r * m], m, keep));
    return out;
  }

  // Fixed-count prediction for a variable: per-position argmax over the joint
  // distribution (or reported for the best occurrence, per policy).
  PredictionCandidate predict_fixed_count(const PreparedFunction& p, std::size_t var, std::size_t n,
                                          OccurrencePolicy policy = OccurrencePolicy::Joint) const {
    return candidates_from(forward_count(p, var, n, keep_for(1, policy)), 1, policy).front();
  }

  // Count heuristic: every count in 1..max_allowed, best mean_prob wins,
  // ties toward the smaller count.
  PredictionCandidate best_variable(const PreparedFunction& p, std::size_t var, std::size_t max_allowed = 7,
                                    OccurrencePolicy policy = OccurrencePolicy::Joint) const {
    if (max_allowed < 1) throw UsageError("max_allowed must be at least 1");
    std::optional<PredictionCandidate> best;
    for (std::size_t n = 1; n <= max_allowed; ++n) {
      PredictionCandidate c = predict_fixed_count(p, var, n, policy);
      if (!best || c.mean_prob > best->mean_prob) best = std::move(c);
    }
    return *best;
  }

  // Ranked suggestions across counts. `counts` defaults to 1..max_allowed.
  std::vector<PredictionCandidate> top_k_suggestions(const PreparedFunction& p, std::size_t var, std::size_t k,
                                                     std::size_t max_allowed = 7,
                                                     OccurrencePolicy policy = OccurrencePolicy::Joint,
                                                     std::vector<std::size_t> counts = {}) const {
    if (k < 1) throw UsageError("k must be at least 1");
    if (counts.empty())
      for (std::size_t n = 1; n <= max_allowed; ++n) counts.push_back(n);
    std::vector<PredictionCandidate> all;
    for (std::size_t n : counts) {
      auto c = candidates_from(forward_count(p, var, n, keep_for(k, policy)), k, policy);
      all.insert(all.end(), std::make_move_iterator(c.begin()), std::make_move_iterator(c.end()));
    }
    return rank_and_dedupe(std::move(all), k);
  }

  std::vector<SlotSuggestions> refine_with_accepted(const InferenceRequest& req) const {
    const PreparedFunction p = prepare(req);
    std::vector<SlotSuggestions> out;
    for (std::size_t v = 0; v < req.slots.size(); ++v) {
      if (!p.pending[v]) continue;
      std::vector<std::size_t> counts;
      if (req.mode == InferenceMode::Oracle) counts.push_back(*req.slots[v].oracle_count);
      out.push_back({req.slots[v].placeholder,
                     top_k_suggestions(p, v, req.k, req.max_allowed, req.policy, std::move(counts))});
    }
    return out;
  }

  static std::vector<PredictionCandidate> rank_and_dedupe(std::vector<PredictionCandidate> all, std::size_t k) {
    std::stable_sort(all.begin(), all.end(), [](const PredictionCandidate& a, const PredictionCandidate& b) {
      if (a.mean_prob != b.mean_prob) return a.mean_prob > b.mean_prob;
      if (a.count != b.count) return a.count < b.count;
      if (a.occurrence != b.occurrence) return a.occurrence < b.occurrence;
      return a.tokens < b.tokens;
    });
    std::vector<PredictionCandidate> out;
    std::set<std::string> seen;
    for (auto& c : all) {
      if (out.size() == k) break;
      if (seen.insert(c.name).second) out.push_back(std::move(c));
    }
    return out;
  }

 private:
  // Joint averaging needs whole distributions; otherwise k entries suffice.
  std::size_t keep_for(std::size_t k, OccurrencePolicy policy) const {
    return policy == OccurrencePolicy::Joint ? vocab_.size() : k;
  }

  // Softmax over the full row; specials are excluded from the ranking but
  // keep their probability mass.
  static Ranked rank_row(const T* logits, std::size_t m, std::size_t keep) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
    double z = 0;
    for (std::size_t i = 0; i < m; ++i) z += std::exp(static_cast<double>(logits[i]) - mx);
    Ranked all;
    all.reserve(m);
    for (std::size_t i = special::kCount; i < m; ++i)
      all.emplace_back(std::exp(static_cast<double>(logits[i]) - mx) / z, static_cast<TokenId>(i));
    keep = std::min(keep, all.size());
    auto order = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), order);
    all.resize(keep);
    return all;
  }

  // The k best token sequences by summed probability (hence by mean), built
  // position by position; pruning to k after each step is exact because the
  // score is additive.
  static std::vector<std::pair<double, std::vector<std::size_t>>> best_paths(const std::vector<Ranked>& rows,
                                                                             std::size_t k) {
    std::vector<std::pair<double, std::vector<std::size_t>>> beams{{0.0, {}}};
    for (const Ranked& row : rows) {
      std::vector<std::pair<double, std::vector<std::size_t>>> next;
      for (const auto& [score, path] : beams)
        for (std::size_t r = 0; r < row.size(); ++r) {
          auto p = path;
          p.push_back(r);
          next.emplace_back(score + row[r].first, std::move(p));
        }
      std::stable_sort(next.begin(), next.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      if (next.size() > k) next.resize(k);
      beams = std::move(next);
    }
    return beams;
  }

  std::vector<PredictionCandidate> candidates_from(const CountForward& f, std::size_t k,
                                                   OccurrencePolicy policy) const {
    std::vector<std::vector<Ranked>> per_occ = f.rows;
    if (policy == OccurrencePolicy::Joint && per_occ.size() > 1) per_occ = {average_rows(f, k)};
    std::vector<PredictionCandidate> all;
    for (std::size_t o = 0; o < per_occ.size(); ++o) {
      for (const auto& [score, path] : best_paths(per_occ[o], k)) {
        PredictionCandidate c;
        c.count = f.count;
        c.occurrence = o;
        for (std::size_t j = 0; j < path.size(); ++j) {
          c.tokens.push_back(per_occ[o][j][path[j]].second);
          c.token_probs.push_back(per_occ[o][j][path[j]].first);
        }
        c.mean_prob = score / static_cast<double>(f.count);
        c.name = strip_name(decode(vocab_, c.tokens));
        all.push_back(std::move(c));
      }
    }
    return rank_and_dedupe(std::move(all), k);
  }

  // Averages each position's distribution over occurrences.
  static std::vector<Ranked> average_rows(const CountForward& f, std::size_t keep) {
    std::vector<Ranked> out;
    const double occ = static_cast<double>(f.rows.size());
    for (std::size_t j = 0; j < f.count; ++j) {
      std::map<TokenId, double> acc;
      for (const auto& o : f.rows)
        for (const auto& [p, id] : o[j]) acc[id] += p / occ;
      Ranked r;
      for (const auto& [id, p] : acc) r.emplace_back(p, id);
      std::sort(r.begin(), r.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      if (r.size() > keep) r.resize(keep);
      out.push_back(std::move(r));
    }
    return out;
  }

  Model<T> model_;
  BpeVocab vocab_;
};

}  // namespace varbert
