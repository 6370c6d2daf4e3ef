#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "varbert/checkpoint.hpp"
#include "varbert/eval.hpp"
#include "varbert/inference.hpp"

namespace varbert {

// An immutable model ready to serve, with its fingerprints.
struct LoadedModel {
  Predictor<float> predictor;
  std::string model_hash;
  std::string vocab_hash;
  std::string source;
};

inline std::shared_ptr<const LoadedModel> load_model(const std::filesystem::path& checkpoint,
                                                     const std::filesystem::path& vocab_prefix) {
  BpeVocab vocab = load_vocab(vocab_prefix);
  const std::string bytes = read_file(checkpoint);
  Checkpoint<float> ck = deserialize_checkpoint<float>(bytes, vocab.hash());
  return std::make_shared<const LoadedModel>(
      LoadedModel{Predictor<float>(std::move(ck.model), std::move(vocab)), fingerprint_of(bytes), ck.vocab_hash,
                  checkpoint.string()});
}

inline nlohmann::json to_json(const PredictionCandidate& c) {
  return {{"name", c.name}, {"count", c.count}, {"mean_prob", c.mean_prob}, {"token_probs", c.token_probs}};
}

// The response document for a set of suggestions. Both the HTTP path and
// direct library callers render through here.
inline nlohmann::json suggestions_document(const LoadedModel& m, const InferenceRequest& req,
                                           const std::vector<SlotSuggestions>& suggestions) {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& s : suggestions) {
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : s.candidates) cands.push_back(to_json(c));
    slots.push_back({{"slot", s.placeholder}, {"candidates", cands}});
  }
  return {{"model_hash", m.model_hash}, {"vocab_hash", m.vocab_hash}, {"mode", mode_name(req.mode)},
          {"k", req.k},                 {"max_allowed", req.max_allowed}, {"suggestions", slots}};
}

// Wire schema:
//   {"code": str, "slots": [{"name": str, "spans": [[b, e], ...], "count": int?}],
//    "accepted": {name: str}, "k": int, "mode": "heuristic"|"oracle", "max_allowed": int}
inline InferenceRequest parse_predict_request(const nlohmann::json& j, std::size_t default_max_allowed = 7) {
  if (!j.is_object()) throw UsageError("request body must be a JSON object");
  InferenceRequest req;
  try {
    req.text = j.at("code").get<std::string>();
    for (const auto& s : j.at("slots")) {
      SlotRequest slot;
      slot.placeholder = s.at("name").get<std::string>();
      for (const auto& sp : s.at("spans")) {
        if (!sp.is_array() || sp.size() != 2) throw UsageError("span of " + slot.placeholder + " is not [begin, end]");
        slot.spans.push_back({sp[0].get<std::size_t>(), sp[1].get<std::size_t>()});
      }
      if (s.contains("count") && !s["count"].is_null()) slot.oracle_count = s["count"].get<std::size_t>();
      req.slots.push_back(std::move(slot));
    }
    if (j.contains("accepted")) req.accepted = j["accepted"].get<std::map<std::string, std::string>>();
    if (j.contains("k")) {
      const auto k = j["k"].get<long long>();
      if (k < 1) throw UsageError("k must be at least 1");
      req.k = static_cast<std::size_t>(k);
    }
    if (j.contains("mode")) req.mode = parse_mode(j["mode"].get<std::string>());
    req.max_allowed = j.value("max_allowed", default_max_allowed);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed request: ") + e.what());
  }
  return req;
}

// Serializes for the wire. Decoded names may end inside a multi-byte UTF-8
// sequence; such bytes become U+FFFD instead of failing the request.
inline std::string to_wire(const nlohmann::json& j, int indent = -1) {
  return j.dump(indent, ' ', false, nlohmann::json::error_handler_t::replace);
}

struct HttpReply {
  int status = 200;
  std::string body;
};

inline HttpReply error_reply(int status, const std::string& message) {
  return {status, nlohmann::json{{"error", {{"status", status}, {"message", message}}}}.dump()};
}

// Pure request handler: no I/O besides the model.
inline HttpReply handle_predict(const LoadedModel* model, std::string_view body, std::size_t default_max_allowed = 7) {
  if (!model) return error_reply(503, "no model loaded");
  try {
    const nlohmann::json j = nlohmann::json::parse(body);
    const InferenceRequest req = parse_predict_request(j, default_max_allowed);
    return {200, to_wire(suggestions_document(*model, req, model->predictor.refine_with_accepted(req)))};
  } catch (const nlohmann::json::parse_error& e) {
    return error_reply(400, std::string("invalid JSON: ") + e.what());
  } catch (const SequenceTooLong& e) {
    return error_reply(413, e.what());
  } catch (const UsageError& e) {
    return error_reply(400, e.what());
  } catch (const DataError& e) {
    return error_reply(400, e.what());
  } catch (const std::exception& e) {
    return error_reply(500, e.what());
  }
}

inline nlohmann::json model_info(const LoadedModel& m) {
  const ModelConfig& c = m.predictor.model().config();
  return {{"config", to_json(c)},   {"param_count", param_count(c)}, {"vocab_hash", m.vocab_hash},
          {"model_hash", m.model_hash}, {"source", m.source}};
}

// Request counters and a latency histogram per endpoint.
class ServiceMetrics {
 public:
  static constexpr std::array<double, 9> kBucketsMs = {1, 5, 10, 50, 100, 500, 1000, 5000, 30000};

  void record(const std::string& endpoint, int status, double ms) {
    std::lock_guard lock(mu_);
    auto& e = endpoints_[endpoint];
    ++e.by_status[status];
    std::size_t b = 0;
    while (b < kBucketsMs.size() && ms > kBucketsMs[b]) ++b;
    ++e.buckets[b];
    e.total_ms += ms;
  }

  nlohmann::json to_json() const {
    std::lock_guard lock(mu_);
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, e] : endpoints_) {
      nlohmann::json statuses = nlohmann::json::object();
      std::size_t n = 0;
      for (const auto& [s, c] : e.by_status) {
        statuses[std::to_string(s)] = c;
        n += c;
      }
      nlohmann::json hist = nlohmann::json::array();
      for (std::size_t b = 0; b <= kBucketsMs.size(); ++b)
        hist.push_back({{"le_ms", b < kBucketsMs.size() ? nlohmann::json(kBucketsMs[b]) : nlohmann::json("inf")},
                        {"count", e.buckets[b]}});
      out[name] = {{"requests", n}, {"by_status", statuses}, {"latency_ms", hist}, {"total_ms", e.total_ms}};
    }
    return out;
  }

 private:
  struct Endpoint {
    std::map<int, std::size_t> by_status;
    std::array<std::size_t, kBucketsMs.size() + 1> buckets{};
    double total_ms = 0;
  };
  mutable std::mutex mu_;
  std::map<std::string, Endpoint> endpoints_;
};

struct ServiceOptions {
  std::size_t max_body_bytes = 1 << 20;
  std::size_t default_max_allowed = 7;
};

// HTTP front end. The model pointer is swapped under a lock; each request
// holds its own reference, so a swap never disturbs requests in flight.
class PredictionService {
 public:
  explicit PredictionService(std::shared_ptr<const LoadedModel> initial, ServiceOptions options = {})
      : model_(std::move(initial)), options_(options) {
    server_.set_payload_max_length(options_.max_body_bytes);
    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      timed("health", res, [&] { return HttpReply{200, nlohmann::json{{"status", "ok"}, {"model_loaded", model() != nullptr}}.dump()}; });
    });
    server_.Get("/model", [this](const httplib::Request&, httplib::Response& res) {
      timed("model", res, [&] {
        auto m = model();
        return m ? HttpReply{200, model_info(*m).dump()} : error_reply(503, "no model loaded");
      });
    });
    server_.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
      timed("predict", res, [&] {
        auto m = model();
        return handle_predict(m.get(), req.body, options_.default_max_allowed);
      });
    });
    server_.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(metrics_.to_json().dump(), "application/json");
    });
  }

  std::shared_ptr<const LoadedModel> model() const {
    std::lock_guard lock(mu_);
    return model_;
  }

  void swap_model(std::shared_ptr<const LoadedModel> next) {
    std::lock_guard lock(mu_);
    model_ = std::move(next);
  }

  // Binds and serves until stop(); port 0 picks a free port (see port()).
  bool bind(const std::string& host, int port) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    return port_ > 0;
  }
  bool serve() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  int port() const { return port_; }
  const ServiceMetrics& metrics() const { return metrics_; }

 private:
  template <typename F>
  void timed(const std::string& endpoint, httplib::Response& res, F&& handler) {
    const auto t0 = std::chrono::steady_clock::now();
    HttpReply r = handler();
    res.status = r.status;
    res.set_content(std::move(r.body), "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics_.record(endpoint, r.status, ms);
  }

  mutable std::mutex mu_;
  std::shared_ptr<const LoadedModel> model_;
  ServiceOptions options_;
  ServiceMetrics metrics_;
  httplib::Server server_;
  int port_ = -1;
};

}  // namespace varbert
