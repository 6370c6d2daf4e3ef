#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "varbert/common.hpp"
#include "varbert/corpus.hpp"

// Synthetic Hex-Rays style functions with a closed pool of gold names. Each
// template has roles (parameters or locals); a variant picks the function
// name stem and the gold name of every role, so names are recoverable from
// the surrounding API calls and identifiers.
namespace varbert::toygen {

struct Role {
  std::string key;
  std::string ctype;
  bool param = false;
};

struct Variant {
  std::vector<std::string> stems;            // function-name stems
  std::map<std::string, std::string> names;  // role key -> gold name
};

struct Template {
  std::string ret;
  std::vector<Role> roles;
  // Body lines; `$key$` marks a role, `#` a random small constant. Lines
  // starting with '?' are emitted with probability 1/2.
  std::vector<std::string> body;
  std::vector<Variant> variants;
};

inline const std::vector<Template>& templates() {
  static const std::vector<Template> t = {
      {"size_t",
       {{"path", "const char *", true}, {"buf", "void *", true}, {"size", "size_t", true}, {"fp", "FILE *"},
        {"nread", "size_t"}},
       {"$fp$ = fopen($path$, \"rb\");", "if ( !$fp$ )", "  return -#LL;", "?if ( !$size$ )", "?  return 0LL;",
        "$nread$ = fread($buf$, 1uLL, $size$, $fp$);", "fclose($fp$);", "return $nread$;"},
       {{{"read_file", "load_blob", "slurp"},
         {{"path", "path"}, {"buf", "buf"}, {"size", "size"}, {"fp", "fp"}, {"nread", "count"}}},
        {{"load_config", "read_settings"},
         {{"path", "path"}, {"buf", "data"}, {"size", "len"}, {"fp", "fp"}, {"nread", "result"}}}}},
      {"ssize_t",
       {{"fd", "int", true}, {"buf", "const char *", true}, {"len", "size_t", true}, {"sent", "ssize_t"},
        {"total", "size_t"}},
       {"$total$ = 0LL;", "while ( $total$ < $len$ )", "{", "  $sent$ = send($fd$, &$buf$[$total$], $len$ - $total$, #);",
        "  if ( $sent$ <= 0 )", "    return -1LL;", "?  usleep(#u);", "  $total$ += $sent$;", "}", "return $total$;"},
       {{{"send_all", "net_write", "sock_send"},
         {{"fd", "sockfd"}, {"buf", "buf"}, {"len", "len"}, {"sent", "bytes_sent"}, {"total", "offset"}}},
        {{"write_packet", "flush_packet"},
         {{"fd", "sockfd"}, {"buf", "data"}, {"len", "size"}, {"sent", "ret"}, {"total", "count"}}}}},
      {"char *",
       {{"dst", "char *", true}, {"src", "const char *", true}, {"n", "size_t", true}, {"i", "size_t"}},
       {"for ( $i$ = 0LL; $i$ < $n$ && $src$[$i$]; ++$i$ )", "  $dst$[$i$] = $src$[$i$];", "?if ( $i$ < $n$ )",
        "$dst$[$i$] = 0;", "return $dst$;"},
       {{{"copy_string", "str_copy", "safe_strcpy"}, {{"dst", "dst"}, {"src", "src"}, {"n", "n"}, {"i", "i"}}},
        {{"dup_name", "copy_label"}, {{"dst", "result"}, {"src", "str"}, {"n", "size"}, {"i", "idx"}}}}},
      {"__int64",
       {{"head", "struct node *", true}, {"key", "int", true}, {"node", "struct node *"}, {"count", "int"}},
       {"$count$ = 0;", "for ( $node$ = $head$; $node$; $node$ = $node$->next )", "{", "  if ( $node$->key == $key$ )",
        "    ++$count$;", "?  if ( $count$ > # )", "?    break;", "}", "return (unsigned int)$count$;"},
       {{{"list_count", "count_matches", "list_find_all"},
         {{"head", "head"}, {"key", "key"}, {"node", "node"}, {"count", "count"}}},
        {{"tree_visit", "walk_entries"}, {{"head", "head"}, {"key", "value"}, {"node", "ptr"}, {"count", "n"}}}}},
      {"unsigned int",
       {{"str", "const unsigned __int8 *", true}, {"hash", "unsigned int"}, {"c", "int"}},
       {"$hash$ = #;", "while ( 1 )", "{", "  $c$ = *$str$++;", "  if ( !$c$ )", "    break;",
        "  $hash$ = $c$ + 33 * $hash$;", "?  $hash$ ^= $hash$ >> #;", "}", "return $hash$;"},
       {{{"djb2_hash", "hash_string", "str_hash"}, {{"str", "str"}, {"hash", "hash"}, {"c", "c"}}},
        {{"compute_checksum", "crc_update"}, {{"str", "data"}, {"hash", "result"}, {"c", "value"}}}}},
      {"__int64",
       {{"line", "char *", true}, {"tokens", "char **", true}, {"max", "int", true}, {"token", "char *"},
        {"n", "int"}},
       {"$n$ = 0;", "for ( $token$ = strtok($line$, \" \\t\"); $token$; $token$ = strtok(0LL, \" \\t\") )", "{",
        "  if ( $n$ >= $max$ )", "    break;", "  $tokens$[$n$++] = $token$;", "}", "?$tokens$[$n$] = 0LL;",
        "return (unsigned int)$n$;"},
       {{{"split_line", "tokenize", "split_words"},
         {{"line", "line"}, {"tokens", "tokens"}, {"max", "size"}, {"token", "token"}, {"n", "count"}}},
        {{"parse_args", "split_argv"},
         {{"line", "str"}, {"tokens", "tokens"}, {"max", "size"}, {"token", "token"}, {"n", "n"}}}}},
      {"void *",
       {{"count", "size_t", true}, {"size", "size_t", true}, {"ptr", "void *"}, {"total", "size_t"}},
       {"$total$ = $size$ * $count$;", "if ( $size$ && $total$ / $size$ != $count$ )", "  return 0LL;",
        "$ptr$ = malloc($total$);", "if ( $ptr$ )", "  memset($ptr$, 0, $total$);", "?else", "?  perror(\"alloc\");",
        "return $ptr$;"},
       {{{"xcalloc", "zalloc_array", "safe_calloc"},
         {{"count", "num_items"}, {"size", "size"}, {"ptr", "ptr"}, {"total", "len"}}},
        {{"alloc_table", "new_buffer"}, {{"count", "n"}, {"size", "size"}, {"ptr", "buf"}, {"total", "offset"}}}}},
      {"int",
       {{"arr", "int *", true}, {"len", "int", true}, {"i", "int"}, {"j", "int"}, {"tmp", "int"}},
       {"for ( $i$ = 1; $i$ < $len$; ++$i$ )", "{", "  $tmp$ = $arr$[$i$];", "  for ( $j$ = $i$ - 1; $j$ >= 0 && $arr$[$j$] > $tmp$; --$j$ )",
        "    $arr$[$j$ + 1] = $arr$[$j$];", "  $arr$[$j$ + 1] = $tmp$;", "}", "?qsort_check($arr$, $len$);", "return $len$;"},
       {{{"insertion_sort", "sort_ints", "isort"}, {{"arr", "data"}, {"len", "n"}, {"i", "i"}, {"j", "j"}, {"tmp", "key"}}},
        {{"order_scores", "rank_values"},
         {{"arr", "buf"}, {"len", "count"}, {"i", "idx"}, {"j", "j"}, {"tmp", "value"}}}}},
      {"__int64",
       {{"sockfd", "int", true}, {"port", "unsigned __int16", true}, {"addr", "struct sockaddr_in"},
        {"ret", "int"}},
       {"memset(&$addr$, 0, sizeof($addr$));", "$addr$.sin_family = 2;", "$addr$.sin_port = htons($port$);",
        "?$addr$.sin_addr.s_addr = htonl(#u);", "$ret$ = bind($sockfd$, (const struct sockaddr *)&$addr$, 0x10u);",
        "if ( $ret$ < 0 )", "  perror(\"bind\");", "return (unsigned int)$ret$;"},
       {{{"bind_port", "net_bind", "listen_on"},
         {{"sockfd", "sockfd"}, {"port", "port"}, {"addr", "addr"}, {"ret", "ret"}}},
        {{"setup_server", "open_listener"},
         {{"sockfd", "sockfd"}, {"port", "port"}, {"addr", "addr"}, {"ret", "result"}}}}},
      {"__int64",
       {{"flags", "unsigned int", true}, {"mode", "int", true}, {"value", "int"}},
       {"$value$ = 0;", "if ( ($flags$ & #) != 0 )", "  $value$ |= 1u;", "if ( ($flags$ & 0x80) != 0 )",
        "  $value$ |= 4u;", "?if ( $mode$ == # )", "?  $value$ = -$value$;", "if ( $mode$ > 2 )", "  $value$ <<= $mode$;",
        "return (unsigned int)$value$;"},
       {{{"decode_flags", "parse_mode_bits"}, {{"flags", "flags"}, {"mode", "mode"}, {"value", "result"}}},
        {{"perm_mask", "access_bits"}, {{"flags", "flags"}, {"mode", "mode"}, {"value", "value"}}}}},
  };
  return t;
}

struct Config {
  std::uint64_t seed = 7;
  std::size_t functions = 200;
  double train_fraction = 0.8;
  double validation_fraction = 0.1;
  double duplicate_rate = 0.1;  // per split, copies of train bodies
};

inline std::string hex_offset(Rng& rng) {
  static const char* digits = "0123456789ABCDEF";
  std::uniform_int_distribution<int> d(1, 15);
  std::string s;
  s += digits[d(rng)];
  s += 'h';
  return s;
}

inline DecompiledFunction render(const Template& t, const Variant& var, Rng& rng, const std::string& id) {
  std::uniform_int_distribution<int> small(2, 64);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<std::size_t> stem_pick(0, var.stems.size() - 1);
  std::uniform_int_distribution<int> suffix(0, 3);

  // Hex-Rays placeholders: parameters a1.., locals numbered after them.
  std::map<std::string, std::string> placeholder;
  std::size_t params = 0, next_param = 0, next_local = 0;
  for (const Role& r : t.roles) params += r.param;
  for (const Role& r : t.roles)
    placeholder[r.key] = r.param ? "a" + std::to_string(++next_param) : "v" + std::to_string(params + 1 + next_local++);

  std::string code;
  std::map<std::string, std::vector<Span>> spans;
  auto emit = [&](std::string_view line) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '$') {
        const std::size_t close = line.find('$', i + 1);
        const std::string key(line.substr(i + 1, close - i - 1));
        const std::string& ph = placeholder.at(key);
        spans[key].push_back({code.size(), code.size() + ph.size()});
        code += ph;
        i = close;
      } else if (line[i] == '#') {
        code += std::to_string(small(rng));
      } else {
        code += line[i];
      }
    }
  };

  std::string fn = var.stems[stem_pick(rng)];
  if (int s = suffix(rng); s > 0) fn += "_" + std::to_string(s);
  std::string sig = t.ret + " __fastcall " + fn + "(";
  bool first = true;
  for (const Role& r : t.roles) {
    if (!r.param) continue;
    sig += (first ? "" : ", ") + r.ctype + (r.ctype.back() == '*' ? "" : " ") + "$" + r.key + "$";
    first = false;
  }
  emit(sig + ")\n{\n");
  for (const Role& r : t.roles) {
    if (r.param) continue;
    emit("  " + r.ctype + (r.ctype.back() == '*' ? "" : " ") + "$" + r.key + "$; // [rsp+" + hex_offset(rng) +
         "] [rbp-" + hex_offset(rng) + "]\n");
  }
  emit("\n");
  for (const std::string& line : t.body) {
    if (!line.empty() && line[0] == '?') {
      if (coin(rng)) emit("  " + line.substr(1) + "\n");
    } else {
      emit("  " + line + "\n");
    }
  }
  emit("}");

  DecompiledFunction f;
  f.function_id = id;
  f.raw_code = code;
  for (const Role& r : t.roles) {
    auto it = spans.find(r.key);
    if (it == spans.end()) continue;
    f.variables.push_back({placeholder.at(r.key), var.names.at(r.key), it->second});
  }
  return f;
}

// Emits `functions` records: unique bodies plus duplicate_rate copies of
// train bodies in every split, with body_in_train tags set.
inline std::vector<DecompiledFunction> generate(const Config& cfg) {
  if (cfg.functions < 10) throw UsageError("toygen needs at least 10 functions");
  const std::size_t n_train = static_cast<std::size_t>(std::lround(cfg.functions * cfg.train_fraction));
  const std::size_t n_val = static_cast<std::size_t>(std::lround(cfg.functions * cfg.validation_fraction));
  const std::size_t n_test = cfg.functions - n_train - n_val;
  auto dups = [&](std::size_t n) { return static_cast<std::size_t>(std::lround(n * cfg.duplicate_rate)); };

  Rng rng(derive_seed(cfg.seed, 0x746f7967ULL));
  const auto& ts = templates();
  std::unordered_set<std::string> bodies;
  std::size_t serial = 0;
  auto fresh = [&](Split split) {
    for (;;) {
      const Template& t = ts[std::uniform_int_distribution<std::size_t>(0, ts.size() - 1)(rng)];
      const Variant& v = t.variants[std::uniform_int_distribution<std::size_t>(0, t.variants.size() - 1)(rng)];
      char id[32];
      std::snprintf(id, sizeof id, "toy_%04zu", serial);
      DecompiledFunction f = render(t, v, rng, id);
      if (!bodies.insert(anonymized_body_hash(f.raw_code, occurrence_spans(f))).second) continue;
      ++serial;
      f.split = split;
      f.body_in_train = false;
      return f;
    }
  };

  std::vector<DecompiledFunction> out;
  std::vector<std::size_t> train_unique;
  auto copy_of_train = [&](Split split) {
    const std::size_t src = train_unique[std::uniform_int_distribution<std::size_t>(0, train_unique.size() - 1)(rng)];
    DecompiledFunction f = out[src];
    char id[32];
    std::snprintf(id, sizeof id, "toy_%04zu", serial++);
    f.function_id = id;
    f.split = split;
    f.body_in_train = true;
    return f;
  };

  for (std::size_t i = 0; i < n_train - dups(n_train); ++i) {
    train_unique.push_back(out.size());
    out.push_back(fresh(Split::Train));
  }
  for (std::size_t i = 0; i < dups(n_train); ++i) out.push_back(copy_of_train(Split::Train));
  // A train body is trivially in train; the tag only matters for eval splits.
  for (auto& f : out) f.body_in_train = true;
  for (Split s : {Split::Validation, Split::Test}) {
    const std::size_t n = s == Split::Validation ? n_val : n_test;
    for (std::size_t i = 0; i < n - dups(n); ++i) out.push_back(fresh(s));
    for (std::size_t i = 0; i < dups(n); ++i) out.push_back(copy_of_train(s));
  }
  for (const auto& f : out) validate(f);
  return out;
}

// Distinct gold names across the templates.
inline std::set<std::string> gold_pool() {
  std::set<std::string> names;
  for (const auto& t : templates())
    for (const auto& v : t.variants)
      for (const auto& [k, n] : v.names) names.insert(n);
  return names;
}

}  // namespace varbert::toygen
