#pragma once

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "varbert/checkpoint.hpp"
#include "varbert/corpus.hpp"
#include "varbert/eval.hpp"
#include "varbert/inference.hpp"
#include "varbert/service.hpp"
#include "varbert/tokenizer.hpp"
#include "varbert/toygen.hpp"
#include "varbert/training.hpp"

namespace varbert::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "varbert 1.0";

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

// Records what a run consumed and produced, written next to its outputs.
struct Manifest {
  std::string subcommand;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();

  void input(const fs::path& p) { inputs[p.string()] = fingerprint_of(read_file(p)); }
  void output(const fs::path& p) { outputs[p.string()] = fingerprint_of(read_file(p)); }

  void write(const fs::path& path) const {
    nlohmann::json j = {{"tool", kToolVersion}, {"subcommand", subcommand}, {"config", config},
                        {"inputs", inputs},     {"outputs", outputs}};
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

inline fs::path manifest_path(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

inline std::vector<DecompiledFunction> load_dataset(const fs::path& path) {
  std::istringstream in(read_file(path));
  ParseResult r = parse_dataset(in);
  if (!r.errors.empty()) {
    std::string msg = path.string() + ": " + std::to_string(r.errors.size()) + " invalid record(s)";
    for (std::size_t i = 0; i < r.errors.size() && i < 10; ++i)
      msg += "\n  line " + std::to_string(r.errors[i].line) + ": " + r.errors[i].message;
    throw DataError(msg);
  }
  return std::move(r.functions);
}

inline std::vector<Encoding> encode_split(const BpeVocab& vocab, const std::vector<DecompiledFunction>& fns,
                                          Split split) {
  std::vector<Encoding> out;
  for (const DecompiledFunction* f : select_split(fns, split)) out.push_back(encode_function(vocab, *f));
  return out;
}

// Shared flags of pretrain and finetune.
struct TrainFlags {
  std::string data, vocab, out, log;
  std::size_t epochs = 40, batch_size = 1024, warmup = 10000;
  double lr = 1e-4, weight_decay = 0.01, dropout = 0.1;
  std::uint64_t seed = 1;
  bool f64 = false;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset (.jsonl) with split tags")->required()->check(CLI::ExistingFile);
    app->add_option("--vocab", vocab, "tokenizer prefix (prefix.tokens / prefix.merges)")->required();
    app->add_option("--out", out, "checkpoint to write")->required();
    app->add_option("--epochs", epochs, "epochs (at most 40)")->capture_default_str();
    app->add_option("--batch-size", batch_size, "sequences per optimizer step")->capture_default_str();
    app->add_option("--lr", lr, "peak learning rate")->capture_default_str();
    app->add_option("--warmup", warmup, "warmup steps; 0 = 6% of the planned steps")->capture_default_str();
    app->add_option("--weight-decay", weight_decay)->capture_default_str();
    app->add_option("--dropout", dropout)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--log", log, "write per-step records (.jsonl)");
    app->add_flag("--f64", f64, "train in 64-bit floating point and store f64 tensors");
  }

  TrainConfig config(Objective objective) const {
    TrainConfig c;
    c.objective = objective;
    c.batch_size = batch_size;
    c.max_epochs = epochs;
    c.peak_lr = lr;
    c.warmup_steps = warmup;
    c.weight_decay = weight_decay;
    c.dropout = dropout;
    c.seed = seed;
    return c;
  }
};

inline StepSink progress_sink(std::ostream& err, std::ofstream* log) {
  return [&err, log](const StepRecord& r) {
    if (log) *log << to_json(r).dump() << "\n";
    if (r.step % 50 == 1) err << "step " << r.step << " epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss << "\n";
  };
}

template <typename T>
void write_training_outputs(const TrainOutcome<T>& outcome, const TrainFlags& f, Manifest& m, std::ostream& err) {
  save_checkpoint(f.out, outcome.checkpoint, f.f64 ? StorageType::F64 : StorageType::F32);
  m.output(f.out);
  if (!f.log.empty()) m.output(f.log);
  m.config["train"] = to_json(f.config(parse_objective(outcome.checkpoint.meta.value("objective", "mlm"))));
  m.config["epochs_completed"] = outcome.checkpoint.meta.value("epochs_completed", 0);
  if (outcome.log.diverged) {
    m.config["diverged"] = outcome.log.message;
    m.write(manifest_path(f.out));
    throw RuntimeError("training diverged (" + outcome.log.message + "); last good weights saved to " + f.out);
  }
  m.write(manifest_path(f.out));
  if (!outcome.log.epochs.empty())
    err << "done: " << outcome.log.steps.size() << " steps, final epoch loss " << outcome.log.epochs.back().mean_loss
        << "\n";
}

inline int run_toygen(const toygen::Config& cfg, const std::string& out) {
  const auto fns = toygen::generate(cfg);
  write_file_atomic(out, format_dataset(fns));
  Manifest m{"toygen"};
  m.config = {{"seed", cfg.seed}, {"functions", cfg.functions}, {"duplicate_rate", cfg.duplicate_rate}};
  m.output(out);
  m.write(manifest_path(out));
  return kOk;
}

inline int run_corpus(const std::string& input, const std::string& out_dir, std::ostream& err) {
  auto fns = load_dataset(input);
  std::vector<CanonicalFunction> train;
  for (auto& f : fns)
    if (f.split == Split::Train) {
      train.push_back(canonicalize(f));
      if (!f.body_in_train) f.body_in_train = true;
    }
  const std::size_t computed = tag_body_in_train(train, fns);
  fs::create_directories(out_dir);
  const fs::path dataset = fs::path(out_dir) / "functions.jsonl";
  const fs::path text = fs::path(out_dir) / "corpus.txt";
  const fs::path index = fs::path(out_dir) / "index.json";
  write_file_atomic(dataset, format_dataset(fns));
  CanonicalCorpus corpus = build_canonical_corpus(fns);
  write_file_atomic(text, corpus.text);
  write_file_atomic(index, corpus.index.dump() + "\n");
  std::map<std::string, std::size_t> counts;
  std::size_t in_train = 0, evals = 0;
  for (const auto& f : fns) {
    ++counts[std::string(split_name(f.split))];
    if (f.split != Split::Train) {
      ++evals;
      in_train += *f.body_in_train;
    }
  }
  err << "corpus: " << fns.size() << " functions";
  for (const auto& [s, n] : counts) err << ", " << s << " " << n;
  err << "; body-in-train " << in_train << "/" << evals << " eval functions (" << computed << " tags computed)\n";
  Manifest m{"corpus"};
  m.config = {{"splits", counts}, {"tags_computed", computed}};
  m.input(input);
  for (const auto& p : {dataset, text, index}) m.output(p);
  m.write(fs::path(out_dir) / "manifest.json");
  return kOk;
}

inline int run_tokenizer(const std::string& data, const std::string& split, std::size_t vocab_size,
                         std::size_t max_merges, const std::string& out, std::ostream& err) {
  const auto fns = load_dataset(data);
  std::string text;
  for (const DecompiledFunction* f : select_split(fns, parse_split(split))) {
    if (!text.empty()) text.push_back('\n');
    text += canonicalize(*f).text;
  }
  if (text.empty()) throw DataError("split '" + split + "' of " + data + " is empty");
  const BpeVocab vocab = train_bpe(text, vocab_size, max_merges ? max_merges : vocab_size);
  save_vocab(vocab, out);
  err << "vocabulary: " << vocab.size() << " tokens, " << vocab.merges().size() << " merges, hash " << vocab.hash()
      << "\n";
  Manifest m{"tokenizer"};
  m.config = {{"vocab_size", vocab_size}, {"max_merges", max_merges}, {"split", split}, {"vocab_hash", vocab.hash()}};
  m.input(data);
  m.output(out + ".tokens");
  m.output(out + ".merges");
  m.write(manifest_path(out));
  return kOk;
}

template <typename T>
int run_pretrain(const TrainFlags& f, ModelConfig mc, Objective objective, std::ostream& err) {
  const auto fns = load_dataset(f.data);
  const BpeVocab vocab = load_vocab(f.vocab);
  mc.vocab_size = vocab.size();
  std::ofstream log;
  if (!f.log.empty()) log.open(f.log);
  auto outcome = pretrain<T>(encode_split(vocab, fns, Split::Train), encode_split(vocab, fns, Split::Validation),
                             vocab, mc, f.config(objective), progress_sink(err, f.log.empty() ? nullptr : &log));
  outcome.checkpoint.meta["data_hash"] = fingerprint_of(read_file(f.data));
  log.close();
  Manifest m{"pretrain"};
  m.config["model"] = to_json(mc);
  m.input(f.data);
  m.input(f.vocab + ".tokens");
  m.input(f.vocab + ".merges");
  write_training_outputs(outcome, f, m, err);
  return kOk;
}

template <typename T>
int run_finetune(const TrainFlags& f, const std::string& init, std::ostream& err) {
  const auto fns = load_dataset(f.data);
  const BpeVocab vocab = load_vocab(f.vocab);
  const std::string init_bytes = read_file(init);
  Checkpoint<T> start = deserialize_checkpoint<T>(init_bytes, vocab.hash());
  std::ofstream log;
  if (!f.log.empty()) log.open(f.log);
  auto outcome = finetune<T>(start, encode_split(vocab, fns, Split::Train), encode_split(vocab, fns, Split::Validation),
                             vocab, f.config(Objective::CMLM), progress_sink(err, f.log.empty() ? nullptr : &log));
  outcome.checkpoint.meta["data_hash"] = fingerprint_of(read_file(f.data));
  outcome.checkpoint.meta["init_hash"] = fingerprint_of(init_bytes);
  log.close();
  Manifest m{"finetune"};
  m.input(f.data);
  m.input(init);
  m.input(f.vocab + ".tokens");
  m.input(f.vocab + ".merges");
  write_training_outputs(outcome, f, m, err);
  return kOk;
}

// Model location: explicit flags, else $VARBERT_MODEL_DIR/{model.ckpt,vocab}.
struct ModelFlags {
  std::string checkpoint, vocab, model_dir;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "checkpoint file");
    app->add_option("--vocab", vocab, "tokenizer prefix");
    app->add_option("--model-dir", model_dir, "directory holding model.ckpt and vocab.*")->envname("VARBERT_MODEL_DIR");
  }

  std::pair<std::string, std::string> resolve() const {
    std::string ck = checkpoint, vb = vocab;
    if (ck.empty() && !model_dir.empty()) ck = (fs::path(model_dir) / "model.ckpt").string();
    if (vb.empty() && !model_dir.empty()) vb = (fs::path(model_dir) / "vocab").string();
    if (ck.empty() || vb.empty()) throw UsageError("no model given: pass --checkpoint and --vocab or set VARBERT_MODEL_DIR");
    return {ck, vb};
  }
};

inline int run_eval(const ModelFlags& mf, const std::string& data, const std::string& split, const std::string& mode,
                    std::size_t max_allowed, std::size_t k, const std::string& out, std::ostream& os) {
  const auto [ck, vb] = mf.resolve();
  const auto model = load_model(ck, vb);
  const auto fns = load_dataset(data);
  const auto selected = select_split(fns, parse_split(split));
  if (selected.empty()) throw DataError("split '" + split + "' of " + data + " is empty");
  const InferenceMode m = parse_mode(mode);
  if (max_allowed == 0) {
    max_allowed = max_gold_tokens(model->predictor.vocab(), select_split(fns, Split::Train));
    os << "max_allowed " << max_allowed << " (longest train gold name)\n";
  }
  const auto preds = predict_dataset(model->predictor, selected, m, max_allowed, k);
  const EvalReport report =
      build_report(preds, m, max_allowed, model->predictor.vocab(), fingerprint_of(read_file(data)), model->model_hash);
  os << render_table(report);
  if (!out.empty()) {
    nlohmann::json j = to_json(report);
    j["split"] = split;
    nlohmann::json vars = nlohmann::json::array();
    for (const auto& vp : preds)
      vars.push_back({{"function", vp.function_id}, {"slot", vp.placeholder}, {"gold", vp.gold},
                      {"predicted", vp.predicted()}, {"count", vp.head() ? vp.head()->count : 0},
                      {"gold_count", vp.gold_count}, {"body_in_train", *vp.body_in_train}});
    j["variables"] = vars;
    write_file_atomic(out, to_wire(j, 2) + "\n");
    write_file_atomic(out + ".txt", render_table(report));
    Manifest man{"eval"};
    man.config = {{"split", split}, {"mode", mode}, {"max_allowed", max_allowed}, {"k", k}};
    man.input(data);
    man.input(ck);
    man.output(out);
    man.output(out + ".txt");
    man.write(manifest_path(out));
  }
  return kOk;
}

inline int run_predict(const ModelFlags& mf, const std::string& input, std::optional<std::size_t> k,
                       const std::string& mode, std::size_t max_allowed, const std::string& out, std::ostream& os) {
  const auto [ck, vb] = mf.resolve();
  const auto model = load_model(ck, vb);
  std::string body;
  if (input == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    body = ss.str();
  } else {
    body = read_file(input);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("request is not valid JSON: ") + e.what());
  }
  if (k) j["k"] = *k;
  if (!mode.empty()) j["mode"] = mode;
  const InferenceRequest req = parse_predict_request(j, max_allowed);
  const std::string doc = to_wire(suggestions_document(*model, req, model->predictor.refine_with_accepted(req)), 2) + "\n";
  if (out.empty()) {
    os << doc;
  } else {
    write_file_atomic(out, doc);
    Manifest man{"predict"};
    man.config = {{"k", req.k}, {"mode", mode_name(req.mode)}, {"max_allowed", req.max_allowed}};
    if (input != "-") man.input(input);
    man.input(ck);
    man.output(out);
    man.write(manifest_path(out));
  }
  return kOk;
}

inline std::atomic<bool> g_stop{false};

inline int run_serve(const ModelFlags& mf, const std::string& host, int port, std::size_t max_body,
                     std::size_t max_allowed, double reload_seconds, std::ostream& err) {
  const auto [ck, vb] = mf.resolve();
  PredictionService service(load_model(ck, vb), {max_body, max_allowed});
  if (!service.bind(host, port)) throw RuntimeError("cannot bind " + host + ":" + std::to_string(port));
  err << "serving on " << host << ":" << service.port() << "\n";
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  std::thread server([&] { service.serve(); });
  auto stamp = fs::last_write_time(ck);
  auto next_check = std::chrono::steady_clock::now();
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    if (reload_seconds <= 0 || std::chrono::steady_clock::now() < next_check) continue;
    next_check = std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                        std::chrono::duration<double>(reload_seconds));
    std::error_code ec;
    const auto now = fs::last_write_time(ck, ec);
    if (ec || now == stamp) continue;
    try {
      service.swap_model(load_model(ck, vb));
      stamp = now;
      err << "reloaded " << ck << "\n";
    } catch (const std::exception& e) {
      err << "reload failed, keeping the current model: " << e.what() << "\n";
    }
  }
  service.stop();
  server.join();
  return kOk;
}

inline ModelConfig preset_with_overrides(const std::string& preset, std::size_t layers, std::size_t heads,
                                         std::size_t hidden, std::size_t ffn, std::size_t max_seq) {
  ModelConfig c = presets::by_name(preset, 0);
  if (layers) c.layers = layers;
  if (heads) c.heads = heads;
  if (hidden) c.hidden = hidden;
  if (ffn) c.ffn_dim = ffn;
  if (max_seq) c.max_seq = max_seq;
  return c;
}

// Entry point; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Variable-name recovery for decompiled code", "varbert"};
  app.set_config("--config", "", "read options from a TOML/INI file (flags override it)");
  app.require_subcommand(1);

  toygen::Config tg;
  std::string tg_out;
  auto* toy = app.add_subcommand("toygen", "emit the synthetic toy corpus");
  toy->add_option("--out", tg_out, "output .jsonl")->required();
  toy->add_option("--functions", tg.functions)->capture_default_str();
  toy->add_option("--seed", tg.seed)->capture_default_str();
  toy->add_option("--duplicate-rate", tg.duplicate_rate)->capture_default_str()->check(CLI::Range(0.0, 0.5));

  std::string corpus_in, corpus_out;
  auto* corpus = app.add_subcommand("corpus", "validate records, tag body-in-train, build the canonical corpus");
  corpus->add_option("--input", corpus_in)->required()->check(CLI::ExistingFile);
  corpus->add_option("--out", corpus_out, "output directory")->required();

  std::string tok_data, tok_split = "train", tok_out;
  std::size_t vocab_size = 0, max_merges = 0;
  auto* tok = app.add_subcommand("tokenizer", "train the byte-level BPE vocabulary");
  tok->add_option("--data", tok_data)->required()->check(CLI::ExistingFile);
  tok->add_option("--split", tok_split)->capture_default_str();
  tok->add_option("--vocab-size", vocab_size)->required()->check(CLI::Range(std::size_t{261}, std::size_t{1} << 24));
  tok->add_option("--max-merges", max_merges, "merge cap (default: vocab size)");
  tok->add_option("--out", tok_out, "output prefix")->required();

  TrainFlags pre_flags;
  std::string preset = "varbert-toy", objective = "mlm-ww";
  std::size_t layers = 0, heads = 0, hidden = 0, ffn = 0, max_seq = 0;
  auto* pre = app.add_subcommand("pretrain", "masked-language-model pre-training from scratch");
  pre_flags.add(pre);
  pre->add_option("--preset", preset, "varbert-base | varbert-small | varbert-toy")->capture_default_str();
  pre->add_option("--objective", objective, "mlm | mlm-ww")->capture_default_str();
  pre->add_option("--layers", layers);
  pre->add_option("--heads", heads);
  pre->add_option("--hidden", hidden);
  pre->add_option("--ffn", ffn);
  pre->add_option("--max-seq", max_seq);

  TrainFlags fin_flags;
  std::string init;
  auto* fin = app.add_subcommand("finetune", "constrained masked-language-model fine-tuning");
  fin_flags.add(fin);
  fin->add_option("--init", init, "checkpoint to start from")->required()->check(CLI::ExistingFile);

  ModelFlags eval_model;
  std::string eval_data, eval_split = "test", eval_mode = "heuristic", eval_out;
  std::size_t eval_max = 7, eval_k = 10;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint and emit a report");
  eval_model.add(ev);
  ev->add_option("--data", eval_data)->required()->check(CLI::ExistingFile);
  ev->add_option("--split", eval_split)->capture_default_str();
  ev->add_option("--mode", eval_mode, "heuristic | oracle")->capture_default_str();
  ev->add_option("--max-allowed", eval_max, "count cap; 0 = longest gold name of the train split")
      ->capture_default_str()
      ->check(CLI::Range(0, 64));
  ev->add_option("--k", eval_k)->capture_default_str()->check(CLI::Range(1, 1000));
  ev->add_option("--out", eval_out, "report .json (a .txt table is written alongside)");

  ModelFlags pred_model;
  std::string pred_in = "-", pred_mode, pred_out;
  std::optional<std::size_t> pred_k;
  std::size_t pred_max = 7;
  auto* pr = app.add_subcommand("predict", "suggest names for one request (JSON file or stdin)");
  pred_model.add(pr);
  pr->add_option("--input", pred_in, "request file, - for stdin")->capture_default_str();
  pr->add_option("--k", pred_k)->check(CLI::Range(1, 1000));
  pr->add_option("--mode", pred_mode, "override the request mode");
  pr->add_option("--max-allowed", pred_max)->capture_default_str()->check(CLI::Range(1, 64));
  pr->add_option("--out", pred_out, "write the response here instead of stdout");

  ModelFlags serve_model;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_body = 1 << 20, serve_max = 7;
  double reload = 2.0;
  auto* sv = app.add_subcommand("serve", "run the HTTP prediction service");
  serve_model.add(sv);
  sv->add_option("--host", host)->capture_default_str();
  sv->add_option("--port", port)->capture_default_str()->check(CLI::Range(0, 65535));
  sv->add_option("--max-body", max_body, "max request body bytes")->capture_default_str();
  sv->add_option("--max-allowed", serve_max)->capture_default_str()->check(CLI::Range(1, 64));
  sv->add_option("--reload-interval", reload, "seconds between checkpoint change checks; 0 disables")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (*toy) return run_toygen(tg, tg_out);
    if (*corpus) return run_corpus(corpus_in, corpus_out, err);
    if (*tok) return run_tokenizer(tok_data, tok_split, vocab_size, max_merges, tok_out, err);
    if (*pre) {
      const ModelConfig mc = preset_with_overrides(preset, layers, heads, hidden, ffn, max_seq);
      const Objective o = parse_objective(objective);
      return pre_flags.f64 ? run_pretrain<double>(pre_flags, mc, o, err) : run_pretrain<float>(pre_flags, mc, o, err);
    }
    if (*fin) return fin_flags.f64 ? run_finetune<double>(fin_flags, init, err) : run_finetune<float>(fin_flags, init, err);
    if (*ev) return run_eval(eval_model, eval_data, eval_split, eval_mode, eval_max, eval_k, eval_out, out);
    if (*pr) return run_predict(pred_model, pred_in, pred_k, pred_mode, pred_max, pred_out, out);
    if (*sv) return run_serve(serve_model, host, port, max_body, serve_max, reload, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace varbert::cli
