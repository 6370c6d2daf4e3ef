#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "varbert/common.hpp"
#include "varbert/model.hpp"

namespace varbert {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Adam first/second moments, parallel to Model::params().
template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState zeros(const Model<T>& model) {
    AdamState s;
    for (const auto& [name, t] : model.params()) {
      s.m.emplace_back(t.size(), T(0));
      s.v.emplace_back(t.size(), T(0));
    }
    return s;
  }
};

enum class StorageType { F32, F64 };

template <typename T>
struct Checkpoint {
  Model<T> model;
  std::optional<AdamState<T>> optimizer;
  std::string vocab_hash;
  // Free-form provenance (epochs completed, objective, input fingerprints...).
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'V', 'B', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void append_values(std::string& out, const std::vector<T>& values, StorageType type) {
  if (type == StorageType::F32) {
    for (T v : values) {
      float f = static_cast<float>(v);
      out.append(reinterpret_cast<const char*>(&f), sizeof f);
    }
  } else {
    for (T v : values) {
      double d = static_cast<double>(v);
      out.append(reinterpret_cast<const char*>(&d), sizeof d);
    }
  }
}

template <typename T>
void read_values(std::string_view data, std::size_t offset, std::vector<T>& values, StorageType type) {
  const std::size_t width = type == StorageType::F32 ? 4 : 8;
  if (offset + values.size() * width > data.size()) throw DataError("checkpoint truncated");
  const char* p = data.data() + offset;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (type == StorageType::F32) {
      float f;
      std::memcpy(&f, p + i * 4, 4);
      values[i] = static_cast<T>(f);
    } else {
      double d;
      std::memcpy(&d, p + i * 8, 8);
      values[i] = static_cast<T>(d);
    }
  }
}

}  // namespace detail

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then the
// raw little-endian tensors in header order.
template <typename T>
std::string serialize_checkpoint(const Checkpoint<T>& ck, StorageType type = StorageType::F32) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  auto put = [&](const std::string& name, const std::vector<std::size_t>& shape, const std::vector<T>& values) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", values.size()}});
    detail::append_values(payload, values, type);
  };
  const auto& params = ck.model.params();
  for (const auto& [name, t] : params) put(name, t.shape, t.values);
  nlohmann::json optimizer = nullptr;
  if (ck.optimizer) {
    optimizer = {{"step", ck.optimizer->step}};
    for (std::size_t i = 0; i < params.size(); ++i) {
      put("adam.m." + params[i].first, params[i].second.shape, ck.optimizer->m.at(i));
      put("adam.v." + params[i].first, params[i].second.shape, ck.optimizer->v.at(i));
    }
  }
  nlohmann::json header = {{"format", "varbert-checkpoint"},
                           {"config", to_json(ck.model.config())},
                           {"vocab_hash", ck.vocab_hash},
                           {"dtype", type == StorageType::F32 ? "f32" : "f64"},
                           {"tensors", tensors},
                           {"optimizer", optimizer},
                           {"meta", ck.meta}};
  const std::string hs = header.dump();
  std::string out(detail::kCheckpointMagic, 8);
  std::uint32_t version = detail::kCheckpointVersion;
  std::uint64_t hlen = hs.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += hs;
  out += payload;
  return out;
}

// Parses only the JSON header.
inline nlohmann::json checkpoint_header(std::string_view bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0)
    throw DataError("not a varbert checkpoint");
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&hlen, bytes.data() + 12, 8);
  if (version != detail::kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  if (20 + hlen > bytes.size()) throw DataError("checkpoint header truncated");
  return nlohmann::json::parse(bytes.substr(20, hlen));
}

// expected_vocab_hash, when non-empty, must match the stored fingerprint.
template <typename T>
Checkpoint<T> deserialize_checkpoint(std::string_view bytes, const std::string& expected_vocab_hash = "") {
  nlohmann::json header = checkpoint_header(bytes);
  std::uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 12, 8);
  const std::string_view data = bytes.substr(20 + hlen);
  const StorageType type = header.at("dtype") == "f64" ? StorageType::F64 : StorageType::F32;

  Checkpoint<T> ck{Model<T>(model_config_from_json(header.at("config"))), std::nullopt,
                   header.at("vocab_hash").get<std::string>(), header.value("meta", nlohmann::json::object())};
  if (!expected_vocab_hash.empty() && expected_vocab_hash != ck.vocab_hash)
    throw DataError("checkpoint vocab hash " + ck.vocab_hash + " does not match vocabulary " + expected_vocab_hash);

  std::map<std::string, nlohmann::json> table;
  for (const auto& t : header.at("tensors")) table[t.at("name").get<std::string>()] = t;
  auto load = [&](const std::string& name, const std::vector<std::size_t>& shape, std::vector<T>& values) {
    auto it = table.find(name);
    if (it == table.end()) throw DataError("checkpoint lacks tensor " + name);
    if (it->second.at("shape").get<std::vector<std::size_t>>() != shape)
      throw DataError("tensor " + name + " has a shape inconsistent with the model config");
    detail::read_values(data, it->second.at("offset").get<std::size_t>(), values, type);
  };
  auto& params = ck.model.params();
  for (auto& [name, t] : params) load(name, t.shape, t.values);
  if (!header.at("optimizer").is_null()) {
    AdamState<T> st = AdamState<T>::zeros(ck.model);
    st.step = header.at("optimizer").at("step").get<std::size_t>();
    for (std::size_t i = 0; i < params.size(); ++i) {
      load("adam.m." + params[i].first, params[i].second.shape, st.m[i]);
      load("adam.v." + params[i].first, params[i].second.shape, st.v[i]);
    }
    ck.optimizer = std::move(st);
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck, StorageType type = StorageType::F32) {
  write_file_atomic(path, serialize_checkpoint(ck, type));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const std::string& expected_vocab_hash = "") {
  return deserialize_checkpoint<T>(read_file(path), expected_vocab_hash);
}

}  // namespace varbert
