#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "varbert/common.hpp"
#include "varbert/numeric.hpp"
#include "varbert/tokenizer.hpp"

namespace varbert {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 64;
  std::size_t ffn_dim = 0;  // 0 means 4 * hidden
  std::size_t max_seq = 256;
  std::size_t vocab_size = kBaseVocabSize;
  double dropout = 0.1;

  std::size_t ffn() const { return ffn_dim ? ffn_dim : 4 * hidden; }
  std::size_t head_dim() const { return hidden / heads; }
  // The same config with the ffn default spelled out.
  friend ModelConfig resolved(ModelConfig c) {
    c.ffn_dim = c.ffn();
    return c;
  }

  void validate() const {
    if (!layers || !heads || !hidden || !max_seq || !vocab_size) throw UsageError("model dimensions must be positive");
    if (hidden % heads) throw UsageError("hidden size must be divisible by the number of heads");
    if (max_seq < 2) throw UsageError("max_seq must leave room for BOS/EOS");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},   {"heads", c.heads},     {"hidden", c.hidden},           {"ffn_dim", c.ffn()},
          {"max_seq", c.max_seq}, {"vocab_size", c.vocab_size}, {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.validate();
  return c;
}

namespace presets {

inline ModelConfig varbert_base(std::size_t vocab_size) { return {12, 12, 768, 0, 512, vocab_size, 0.1}; }
inline ModelConfig varbert_small(std::size_t vocab_size) { return {6, 8, 512, 0, 1024, vocab_size, 0.1}; }
inline ModelConfig varbert_toy(std::size_t vocab_size) { return {2, 2, 64, 0, 256, vocab_size, 0.1}; }

inline ModelConfig by_name(const std::string& name, std::size_t vocab_size) {
  if (name == "varbert-base") return varbert_base(vocab_size);
  if (name == "varbert-small") return varbert_small(vocab_size);
  if (name == "varbert-toy") return varbert_toy(vocab_size);
  throw UsageError("unknown model preset '" + name + "' (varbert-base, varbert-small, varbert-toy)");
}

}  // namespace presets

// Embeddings + per-layer attention, feed-forward and two layer norms +
// embedding layer norm + MLM head bias (the head weight is the tied token
// embedding).
inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t h = c.hidden, f = c.ffn(), m = c.vocab_size;
  const std::size_t embeddings = m * h + c.max_seq * h;
  const std::size_t attention = 4 * h * h + 4 * h;
  const std::size_t feed_forward = 2 * h * f + f + h;
  const std::size_t norms = 4 * h;
  return embeddings + c.layers * (attention + feed_forward + norms) + 2 * h + m;
}

// Decoupled weight decay applies to matrices and embeddings only.
inline bool weight_decays(const std::string& name) {
  return name == "tok_emb" || name == "pos_emb" || name.ends_with(".weight");
}

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(resolved(config)) {
    config_.validate();
    allocate();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (auto& [name, t] : params_) {
      if (name.ends_with(".gamma")) {
        std::fill(t.values.begin(), t.values.end(), T(1));
      } else if (name.ends_with(".bias") || name.ends_with(".beta")) {
        std::fill(t.values.begin(), t.values.end(), T(0));
      } else {
        for (auto& v : t.values) v = static_cast<T>(normal(rng));
      }
    }
  }

  // Uninitialized (zero) weights with the shapes implied by `config`.
  explicit Model(const ModelConfig& config) : config_(resolved(config)) {
    config_.validate();
    allocate();
  }

  template <typename U>
  explicit Model(const Model<U>& other) : config_(other.config()) {
    allocate();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& src = other.params()[i].second.values;
      auto& dst = params_[i].second.values;
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<T>(src[k]);
    }
  }

  Model(const Model& other) : config_(other.config_), params_(other.params_) { rebind(); }
  Model& operator=(const Model& other) {
    config_ = other.config_;
    params_ = other.params_;
    rebind();
    return *this;
  }

  const ModelConfig& config() const { return config_; }

  void set_dropout(double p) {
    ModelConfig c = config_;
    c.dropout = p;
    c.validate();
    config_ = c;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }

  Tensor<T>& param(const std::string& name) { return params_.at(index_.at(name)).second; }
  const Tensor<T>& param(const std::string& name) const { return params_.at(index_.at(name)).second; }

  std::size_t allocated_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Final hidden states [n x H]. key_valid (optional) marks non-pad positions;
  // dropout is active only when training.
  Var encode(Tape<T>& tape, const std::vector<TokenId>& ids, const std::vector<bool>* key_valid, bool training,
             Rng* rng) {
    const std::size_t n = ids.size();
    if (n == 0) throw DataError("empty input sequence");
    if (n > config_.max_seq)
      throw DataError("sequence of " + std::to_string(n) + " tokens exceeds max_seq " +
                      std::to_string(config_.max_seq) + "; truncate upstream");
    if (key_valid && key_valid->size() != n) throw DataError("pad mask length mismatch");
    std::vector<std::size_t> tok(n), pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config_.vocab_size)
        throw DataError("token id " + std::to_string(ids[i]) + " outside model vocabulary");
      tok[i] = static_cast<std::size_t>(ids[i]);
      pos[i] = i;
    }
    const double p = config_.dropout;
    using namespace ops;
    Var x = add(tape, gather_rows(tape, tape.param(*tok_emb_), std::move(tok)),
                gather_rows(tape, tape.param(*pos_emb_), std::move(pos)));
    x = layer_norm(tape, x, tape.param(*emb_ln_.gamma), tape.param(*emb_ln_.beta));
    x = dropout(tape, x, p, rng, training);

    const std::size_t d = config_.head_dim();
    const T score_scale = T(1) / std::sqrt(T(d));
    for (auto& L : layers_) {
      Var q = add_row(tape, matmul(tape, x, tape.param(*L.q.w)), tape.param(*L.q.b));
      Var k = add_row(tape, matmul(tape, x, tape.param(*L.k.w)), tape.param(*L.k.b));
      Var v = add_row(tape, matmul(tape, x, tape.param(*L.v.w)), tape.param(*L.v.b));
      std::vector<Var> heads;
      for (std::size_t h = 0; h < config_.heads; ++h) {
        Var qh = slice_cols(tape, q, h * d, d);
        Var kh = slice_cols(tape, k, h * d, d);
        Var vh = slice_cols(tape, v, h * d, d);
        Var s = scale(tape, matmul_nt(tape, qh, kh), score_scale);
        if (key_valid) s = mask_cols(tape, s, *key_valid);
        Var attn = dropout(tape, softmax_rows(tape, s), p, rng, training);
        heads.push_back(matmul(tape, attn, vh));
      }
      Var o = add_row(tape, matmul(tape, concat_cols(tape, heads), tape.param(*L.o.w)), tape.param(*L.o.b));
      o = dropout(tape, o, p, rng, training);
      x = layer_norm(tape, add(tape, x, o), tape.param(*L.ln1.gamma), tape.param(*L.ln1.beta));

      Var f = gelu(tape, add_row(tape, matmul(tape, x, tape.param(*L.ffn_in.w)), tape.param(*L.ffn_in.b)));
      f = add_row(tape, matmul(tape, f, tape.param(*L.ffn_out.w)), tape.param(*L.ffn_out.b));
      f = dropout(tape, f, p, rng, training);
      x = layer_norm(tape, add(tape, x, f), tape.param(*L.ln2.gamma), tape.param(*L.ln2.beta));
    }
    return x;
  }

  // MLM logits [rows x M] for the selected rows of `hidden`.
  Var head(Tape<T>& tape, Var hidden, std::vector<std::size_t> rows) {
    Var h = ops::gather_rows(tape, hidden, std::move(rows));
    return ops::add_row(tape, ops::matmul_nt(tape, h, tape.param(*tok_emb_)), tape.param(*head_bias_));
  }

  // Forward on a non-recording tape. Leaves parameters and gradients
  // untouched, so a shared model may serve concurrent callers.
  Var encode_eval(Tape<T>& tape, const std::vector<TokenId>& ids, const std::vector<bool>* key_valid = nullptr) const {
    if (tape.recording()) throw RuntimeError("encode_eval needs a non-recording tape");
    return const_cast<Model*>(this)->encode(tape, ids, key_valid, false, nullptr);
  }

  Var head_eval(Tape<T>& tape, Var hidden, std::vector<std::size_t> rows) const {
    if (tape.recording()) throw RuntimeError("head_eval needs a non-recording tape");
    return const_cast<Model*>(this)->head(tape, hidden, std::move(rows));
  }

  // Evaluation-mode logits for every position, row-major [n x M].
  std::vector<T> logits(const std::vector<TokenId>& ids, const std::vector<bool>* key_valid = nullptr) const {
    Tape<T> tape(false);
    Var hidden = encode_eval(tape, ids, key_valid);
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    Var out = head_eval(tape, hidden, std::move(rows));
    auto v = tape.values(out);
    return {v.begin(), v.end()};
  }

 private:
  struct Linear {
    Tensor<T>* w = nullptr;
    Tensor<T>* b = nullptr;
  };
  struct Norm {
    Tensor<T>* gamma = nullptr;
    Tensor<T>* beta = nullptr;
  };
  struct Layer {
    Linear q, k, v, o;
    Norm ln1;
    Linear ffn_in, ffn_out;
    Norm ln2;
  };

  void add_param(const std::string& name, std::vector<std::size_t> shape) {
    index_[name] = params_.size();
    params_.emplace_back(name, Tensor<T>(std::move(shape)));
  }

  void allocate() {
    const std::size_t h = config_.hidden, f = config_.ffn(), m = config_.vocab_size;
    params_.clear();
    index_.clear();
    add_param("tok_emb", {m, h});
    add_param("pos_emb", {config_.max_seq, h});
    add_param("emb_ln.gamma", {h});
    add_param("emb_ln.beta", {h});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      for (const char* proj : {"q", "k", "v", "o"}) {
        add_param(p + "attn." + proj + ".weight", {h, h});
        add_param(p + "attn." + proj + ".bias", {h});
      }
      add_param(p + "ln1.gamma", {h});
      add_param(p + "ln1.beta", {h});
      add_param(p + "ffn.in.weight", {h, f});
      add_param(p + "ffn.in.bias", {f});
      add_param(p + "ffn.out.weight", {f, h});
      add_param(p + "ffn.out.bias", {h});
      add_param(p + "ln2.gamma", {h});
      add_param(p + "ln2.beta", {h});
    }
    add_param("head.bias", {m});
    rebind();
  }

  void rebind() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].first] = i;
    tok_emb_ = &param("tok_emb");
    pos_emb_ = &param("pos_emb");
    emb_ln_ = {&param("emb_ln.gamma"), &param("emb_ln.beta")};
    head_bias_ = &param("head.bias");
    layers_.assign(config_.layers, Layer{});
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      auto lin = [&](const std::string& base) { return Linear{&param(base + ".weight"), &param(base + ".bias")}; };
      auto norm = [&](const std::string& base) { return Norm{&param(base + ".gamma"), &param(base + ".beta")}; };
      layers_[l] = {lin(p + "attn.q"), lin(p + "attn.k"),  lin(p + "attn.v"),   lin(p + "attn.o"),
                    norm(p + "ln1"),   lin(p + "ffn.in"),  lin(p + "ffn.out"), norm(p + "ln2")};
    }
  }

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, std::size_t> index_;
  Tensor<T>* tok_emb_ = nullptr;
  Tensor<T>* pos_emb_ = nullptr;
  Norm emb_ln_;
  Tensor<T>* head_bias_ = nullptr;
  std::vector<Layer> layers_;
};

}  // namespace varbert
