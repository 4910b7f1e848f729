#pragma once

// Tensor container used for model weights and paused memory banks.
//
//   bytes 0..7   "PANOKIT1"
//   bytes 8..15  index length N, unsigned little-endian
//   next N bytes JSON index: {"format", "version", "meta",
//                             "tensors": [{"name", "shape", "offset", "count"}]}
//   remainder    payload, IEEE-754 binary64 little-endian; offset/count in values

#include <bit>
#include <cstring>
#include <string>
#include <vector>

#include "json.hpp"
#include "panokit/config.hpp"
#include "panokit/memory.hpp"
#include "panokit/model.hpp"

namespace panokit {

inline constexpr char kArchiveMagic[9] = "PANOKIT1";
inline constexpr int kArchiveVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

struct TensorArchive {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const Tensor<double>& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw ParseError("archive has no tensor named " + name, 0);
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}
inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  return v;
}

}  // namespace detail

inline std::string encode_archive(const TensorArchive& a) {
  nlohmann::ordered_json index;
  index["format"] = "panokit-tensors";
  index["version"] = kArchiveVersion;
  index["meta"] = a.meta;
  index["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : a.tensors) {
    index["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"count", t.value.size()}});
    offset += t.value.size();
  }
  const std::string idx = index.dump();
  std::string out(kArchiveMagic, 8);
  detail::put_u64(out, idx.size());
  out += idx;
  out.reserve(out.size() + 8 * offset);
  for (const auto& t : a.tensors)
    for (double v : t.value.storage()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline TensorArchive decode_archive(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, kArchiveMagic) != 0) throw ParseError("not a panokit archive", 0);
  const std::uint64_t n = detail::get_u64(bytes, 8);
  if (n > bytes.size() - 16) throw ParseError("index length exceeds file size", 8);
  nlohmann::ordered_json index;
  try {
    index = nlohmann::ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(n));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed index: ") + e.what(), 16 + (e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!index.is_object() || index.value("format", "") != "panokit-tensors" || !index.contains("tensors") ||
      !index["tensors"].is_array())
    throw ParseError("index is not a panokit tensor index", 16);
  if (index.value("version", 0) != kArchiveVersion) throw ParseError("unsupported archive version", 16);
  const std::size_t payload = 16 + n, values = (bytes.size() - payload) / 8;
  if ((bytes.size() - payload) % 8) throw ParseError("payload is not a whole number of values", payload);
  TensorArchive a;
  a.meta = index.value("meta", nlohmann::ordered_json::object());
  for (const auto& e : index["tensors"]) {
    try {
      const auto shape = e.at("shape").get<Shape>();
      const std::size_t off = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
      if (shape_numel(shape) != count || off > values || count > values - off)
        throw ParseError("tensor " + e.at("name").get<std::string>() + " does not fit the payload", payload);
      Tensor<double> t(shape);
      for (std::size_t k = 0; k < count; ++k) t[k] = std::bit_cast<double>(detail::get_u64(bytes, payload + 8 * (off + k)));
      a.tensors.push_back({e.at("name").get<std::string>(), std::move(t)});
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(std::string("bad tensor entry: ") + ex.what(), 16);
    }
  }
  return a;
}

inline void save_archive(const std::string& path, const TensorArchive& a) { write_file(path, encode_archive(a)); }
inline TensorArchive load_archive(const std::string& path) { return decode_archive(read_file(path)); }

// ---------------------------------------------------------------------------
// Model weights

template <class T>
TensorArchive model_archive(const Model<T>& m, const RunConfig& cfg) {
  TensorArchive a;
  a.meta["kind"] = "model";
  a.meta["config"] = run_config_to_json(cfg);
  for (const auto& [name, v] : m.params().items()) a.tensors.push_back({name, v.value().template cast<double>()});
  return a;
}

template <class T>
void save_model(const std::string& path, const Model<T>& m, const RunConfig& cfg) {
  save_archive(path, model_archive(m, cfg));
}

template <class T>
struct LoadedModel {
  RunConfig config;
  Model<T> model;
};

template <class T>
LoadedModel<T> load_model(const std::string& path) {
  const TensorArchive a = load_archive(path);
  if (a.meta.value("kind", "") != "model" || !a.meta.contains("config"))
    throw ParseError(path + " is not a model checkpoint", 16);
  RunConfig cfg = run_config_from_json(nlohmann::json::parse(a.meta["config"].dump()));
  Model<T> m(model_config(cfg));
  for (auto& [name, v] : m.params().items()) {
    const Tensor<double>& src = a.at(name);
    if (src.shape() != v.shape()) throw ParseError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()), 16);
    v.mutable_value() = src.template cast<T>();
  }
  if (a.tensors.size() != m.params().items().size()) throw ParseError("checkpoint has extra tensors", 16);
  return {cfg, std::move(m)};
}

// ---------------------------------------------------------------------------
// Memory bank (pause / resume)

template <class T>
TensorArchive bank_archive(const MemoryBank<T>& bank, const Rng& rng) {
  TensorArchive a;
  a.meta["kind"] = "bank";
  nlohmann::ordered_json rs = nlohmann::ordered_json::array();
  for (auto s : rng.state()) rs.push_back(std::to_string(s));
  a.meta["rng"] = rs;
  auto entry = [&](const std::string& prefix, std::size_t frame, double score, const Var<T>* mem, const Var<T>& ptr) {
    a.meta["entries"].push_back({{"name", prefix}, {"frame_idx", frame}, {"obj_score", score}});
    if (mem) a.tensors.push_back({prefix + ".mem", mem->value().template cast<double>()});
    a.tensors.push_back({prefix + ".pointer", ptr.value().template cast<double>()});
  };
  a.meta["entries"] = nlohmann::ordered_json::array();
  if (bank.prompted) entry("prompted", bank.prompted->frame_idx, bank.prompted->obj_score, &bank.prompted->mem, bank.prompted->pointer);
  for (std::size_t k = 0; k < bank.recent.size(); ++k)
    entry("recent." + std::to_string(k), bank.recent[k].frame_idx, bank.recent[k].obj_score, &bank.recent[k].mem,
          bank.recent[k].pointer);
  for (std::size_t k = 0; k < bank.archive.size(); ++k)
    entry("archive." + std::to_string(k), bank.archive[k].frame_idx, bank.archive[k].obj_score, nullptr,
          bank.archive[k].pointer);
  return a;
}

template <class T>
void save_bank(const std::string& path, const MemoryBank<T>& bank, const Rng& rng) {
  save_archive(path, bank_archive(bank, rng));
}

template <class T>
MemoryBank<T> bank_from_archive(const TensorArchive& a, Rng& rng) {
  if (a.meta.value("kind", "") != "bank") throw ParseError("archive is not a memory bank", 16);
  std::array<std::uint64_t, 4> st{};
  const auto& rs = a.meta.at("rng");
  for (std::size_t i = 0; i < 4; ++i) st[i] = std::stoull(rs.at(i).get<std::string>());
  rng.set_state(st);
  MemoryBank<T> bank;
  for (const auto& e : a.meta.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const std::size_t frame = e.at("frame_idx").get<std::size_t>();
    const double score = e.at("obj_score").get<double>();
    const Var<T> ptr(a.at(name + ".pointer").template cast<T>());
    if (name.rfind("archive.", 0) == 0) {
      bank.archive.push_back({frame, ptr, score});
    } else {
      MemoryEntry<T> m{frame, Var<T>(a.at(name + ".mem").template cast<T>()), ptr, score};
      if (name == "prompted") bank.prompted = std::move(m);
      else bank.recent.push_back(std::move(m));
    }
  }
  return bank;
}

template <class T>
MemoryBank<T> load_bank(const std::string& path, Rng& rng) {
  return bank_from_archive<T>(load_archive(path), rng);
}

}  // namespace panokit
