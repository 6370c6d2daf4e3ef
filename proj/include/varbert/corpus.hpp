#pragma once

#include <algorithm>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "varbert/common.hpp"

namespace varbert {

enum class Split { Train, Validation, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "valid" || s == "dev") return Split::Validation;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

// Half-open byte range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
  auto operator<=>(const Span&) const = default;
};

struct VariableSlot {
  std::string decompiler_name;
  std::string gold_name;
  std::vector<Span> occurrences;
};

struct DecompiledFunction {
  std::string function_id;
  std::string raw_code;
  std::vector<VariableSlot> variables;
  Split split = Split::Train;
  std::optional<bool> body_in_train;
};

// raw_code with every placeholder replaced by its gold name.
struct CanonicalFunction {
  std::string text;
  // slot_spans[v] are the spans of variable v in `text`.
  std::vector<std::vector<Span>> slot_spans;
};

inline bool is_ident_char(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

// Whole-identifier occurrences of `name` in `text`.
inline std::vector<Span> find_identifier(std::string_view text, std::string_view name) {
  std::vector<Span> out;
  if (name.empty()) return out;
  std::size_t pos = 0;
  while ((pos = text.find(name, pos)) != std::string_view::npos) {
    std::size_t end = pos + name.size();
    bool left_ok = pos == 0 || !is_ident_char(static_cast<unsigned char>(text[pos - 1]));
    bool right_ok = end == text.size() || !is_ident_char(static_cast<unsigned char>(text[end]));
    if (left_ok && right_ok) out.push_back({pos, end});
    pos = end;
  }
  return out;
}

// Checks the record-level invariants; throws DataError describing the first
// violation.
inline void validate(const DecompiledFunction& f) {
  if (f.function_id.empty()) throw DataError("empty function id");
  std::vector<std::pair<Span, std::size_t>> all;
  std::set<std::string> names;
  for (std::size_t v = 0; v < f.variables.size(); ++v) {
    const auto& slot = f.variables[v];
    if (slot.decompiler_name.empty()) throw DataError("slot " + std::to_string(v) + ": empty decompiler name");
    if (slot.gold_name.empty()) throw DataError("slot " + slot.decompiler_name + ": empty gold name");
    if (!names.insert(slot.decompiler_name).second)
      throw DataError("placeholder " + slot.decompiler_name + " declared twice");
    if (slot.occurrences.empty()) throw DataError("slot " + slot.decompiler_name + " has no occurrences");
    for (std::size_t i = 0; i < slot.occurrences.size(); ++i) {
      const Span& s = slot.occurrences[i];
      if (s.begin >= s.end || s.end > f.raw_code.size())
        throw DataError("slot " + slot.decompiler_name + ": span [" + std::to_string(s.begin) + "," +
                        std::to_string(s.end) + ") out of bounds");
      if (i > 0 && slot.occurrences[i - 1].end > s.begin)
        throw DataError("slot " + slot.decompiler_name + ": spans unsorted or overlapping");
      all.emplace_back(s, v);
    }
  }
  std::sort(all.begin(), all.end());
  for (std::size_t i = 1; i < all.size(); ++i) {
    if (all[i - 1].first.end > all[i].first.begin)
      throw DataError("spans of " + f.variables[all[i - 1].second].decompiler_name + " and " +
                      f.variables[all[i].second].decompiler_name + " overlap");
  }
  // Every whole-identifier occurrence of a placeholder must be declared.
  for (const auto& slot : f.variables) {
    for (const Span& s : find_identifier(f.raw_code, slot.decompiler_name)) {
      if (!std::binary_search(slot.occurrences.begin(), slot.occurrences.end(), s))
        throw DataError("placeholder " + slot.decompiler_name + " occurs undeclared at offset " +
                        std::to_string(s.begin));
    }
  }
}

struct Substituted {
  std::string text;
  std::vector<std::vector<Span>> spans;
};

// Replaces each span of variable v by names[v]; spans are recomputed for the
// output text. `spans` need not be globally sorted.
inline Substituted substitute(std::string_view text, const std::vector<std::vector<Span>>& spans,
                              const std::vector<std::string>& names) {
  struct Edit {
    Span span;
    std::size_t var;
    std::size_t occ;
  };
  std::vector<Edit> edits;
  for (std::size_t v = 0; v < spans.size(); ++v)
    for (std::size_t i = 0; i < spans[v].size(); ++i) edits.push_back({spans[v][i], v, i});
  std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) { return a.span.begin < b.span.begin; });

  Substituted out;
  out.spans.resize(spans.size());
  for (std::size_t v = 0; v < spans.size(); ++v) out.spans[v].resize(spans[v].size());
  std::size_t cursor = 0;
  for (const Edit& e : edits) {
    out.text.append(text.substr(cursor, e.span.begin - cursor));
    std::size_t start = out.text.size();
    out.text.append(names[e.var]);
    out.spans[e.var][e.occ] = {start, out.text.size()};
    cursor = e.span.end;
  }
  out.text.append(text.substr(cursor));
  return out;
}

inline std::vector<std::vector<Span>> occurrence_spans(const DecompiledFunction& f) {
  std::vector<std::vector<Span>> spans;
  spans.reserve(f.variables.size());
  for (const auto& v : f.variables) spans.push_back(v.occurrences);
  return spans;
}

inline CanonicalFunction canonicalize(const DecompiledFunction& f) {
  std::vector<std::string> gold;
  for (const auto& slot : f.variables) {
    for (const Span& s : slot.occurrences) {
      if (s.end > f.raw_code.size() ||
          std::string_view(f.raw_code).substr(s.begin, s.size()) != slot.decompiler_name)
        throw DataError("span drift in " + f.function_id + ": slot " + slot.decompiler_name + " at offset " +
                        std::to_string(s.begin));
    }
    gold.push_back(slot.gold_name);
  }
  auto sub = substitute(f.raw_code, occurrence_spans(f), gold);
  return {std::move(sub.text), std::move(sub.spans)};
}

// Inverse of canonicalize given the decompiler names.
inline std::string decanonicalize(const CanonicalFunction& c, const std::vector<VariableSlot>& slots) {
  std::vector<std::string> dec;
  for (const auto& s : slots) dec.push_back(s.decompiler_name);
  return substitute(c.text, c.slot_spans, dec).text;
}

// Hash of the whitespace-normalized text with variables replaced by VAR0,
// VAR1, ... in order of first occurrence.
inline std::string anonymized_body_hash(std::string_view text, const std::vector<std::vector<Span>>& spans) {
  std::vector<std::size_t> order(spans.size());
  for (std::size_t v = 0; v < spans.size(); ++v) order[v] = v;
  auto first = [&](std::size_t v) { return spans[v].empty() ? text.size() : spans[v].front().begin; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return first(a) < first(b); });
  std::vector<std::string> names(spans.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) names[order[rank]] = "VAR" + std::to_string(rank);
  std::string anon = substitute(text, spans, names).text;

  std::string norm;
  bool pending_space = false;
  for (unsigned char c : anon) {
    if (is_space(c)) {
      pending_space = !norm.empty();
      continue;
    }
    if (pending_space) norm.push_back(' ');
    pending_space = false;
    norm.push_back(static_cast<char>(c));
  }
  return fingerprint_of(norm);
}

inline std::unordered_set<std::string> train_body_hashes(const std::vector<CanonicalFunction>& train) {
  std::unordered_set<std::string> hashes;
  for (const auto& c : train) hashes.insert(anonymized_body_hash(c.text, c.slot_spans));
  return hashes;
}

// Sets body_in_train on records that lack the tag. Returns the number of
// records whose tag was recomputed.
inline std::size_t tag_body_in_train(const std::vector<CanonicalFunction>& train,
                                     std::vector<DecompiledFunction>& eval) {
  auto hashes = train_body_hashes(train);
  std::size_t computed = 0;
  for (auto& f : eval) {
    if (f.body_in_train.has_value()) continue;
    auto c = canonicalize(f);
    f.body_in_train = hashes.count(anonymized_body_hash(c.text, c.slot_spans)) > 0;
    ++computed;
  }
  return computed;
}

// ---------------------------------------------------------------------------
// Line-delimited record format

inline DecompiledFunction function_from_json(const nlohmann::json& j) {
  DecompiledFunction f;
  f.function_id = j.at("id").get<std::string>();
  f.raw_code = j.at("code").get<std::string>();
  f.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("body_in_train") && !j.at("body_in_train").is_null())
    f.body_in_train = j.at("body_in_train").get<bool>();
  for (const auto& jv : j.at("vars")) {
    VariableSlot slot;
    slot.decompiler_name = jv.at("dec_name").get<std::string>();
    slot.gold_name = jv.at("gold_name").get<std::string>();
    for (const auto& js : jv.at("spans")) {
      if (!js.is_array() || js.size() != 2) throw DataError("span must be [start,end]");
      slot.occurrences.push_back({js[0].get<std::size_t>(), js[1].get<std::size_t>()});
    }
    f.variables.push_back(std::move(slot));
  }
  return f;
}

inline nlohmann::json function_to_json(const DecompiledFunction& f) {
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& slot : f.variables) {
    nlohmann::json spans = nlohmann::json::array();
    for (const Span& s : slot.occurrences) spans.push_back({s.begin, s.end});
    vars.push_back({{"dec_name", slot.decompiler_name}, {"gold_name", slot.gold_name}, {"spans", spans}});
  }
  nlohmann::json j = {{"id", f.function_id}, {"code", f.raw_code}, {"vars", vars}, {"split", split_name(f.split)}};
  if (f.body_in_train) j["body_in_train"] = *f.body_in_train;
  return j;
}

struct LineError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct ParseResult {
  std::vector<DecompiledFunction> functions;
  std::vector<LineError> errors;
  std::map<Split, std::size_t> split_counts;
};

inline ParseResult parse_dataset(std::istream& in) {
  ParseResult result;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      auto f = function_from_json(nlohmann::json::parse(line));
      validate(f);
      if (!seen.insert(f.function_id).second) throw DataError("duplicate function id '" + f.function_id + "'");
      ++result.split_counts[f.split];
      result.functions.push_back(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      result.errors.push_back({lineno, e.what()});
    } catch (const DataError& e) {
      result.errors.push_back({lineno, e.what()});
    }
  }
  return result;
}

inline std::string format_dataset(const std::vector<DecompiledFunction>& functions) {
  std::string out;
  for (const auto& f : functions) {
    out += function_to_json(f).dump();
    out.push_back('\n');
  }
  return out;
}

// Canonical corpus: function texts joined by a single newline, plus an index
// of function boundaries and slot spans (offsets into the corpus text).
struct CanonicalCorpus {
  std::string text;
  nlohmann::json index;
};

inline CanonicalCorpus build_canonical_corpus(const std::vector<DecompiledFunction>& functions) {
  CanonicalCorpus corpus;
  corpus.index = nlohmann::json::array();
  for (const auto& f : functions) {
    if (!corpus.text.empty()) corpus.text.push_back('\n');
    auto c = canonicalize(f);
    std::size_t base = corpus.text.size();
    corpus.text += c.text;
    nlohmann::json slots = nlohmann::json::array();
    for (std::size_t v = 0; v < f.variables.size(); ++v) {
      nlohmann::json spans = nlohmann::json::array();
      for (const Span& s : c.slot_spans[v]) spans.push_back({base + s.begin, base + s.end});
      slots.push_back({{"dec_name", f.variables[v].decompiler_name},
                       {"gold_name", f.variables[v].gold_name},
                       {"spans", spans}});
    }
    nlohmann::json entry = {{"id", f.function_id},
                            {"offset", base},
                            {"length", c.text.size()},
                            {"split", split_name(f.split)},
                            {"slots", slots}};
    entry["body_in_train"] = f.body_in_train ? nlohmann::json(*f.body_in_train) : nlohmann::json(nullptr);
    corpus.index.push_back(std::move(entry));
  }
  return corpus;
}

inline std::vector<const DecompiledFunction*> select_split(const std::vector<DecompiledFunction>& functions,
                                                           Split split) {
  std::vector<const DecompiledFunction*> out;
  for (const auto& f : functions)
    if (f.split == split) out.push_back(&f);
  return out;
}

}  // namespace varbert
