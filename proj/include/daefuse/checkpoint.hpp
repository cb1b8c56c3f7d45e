#pragma once

// Checkpoint archive: one file holding a JSON manifest and named float64
// tensors.
//
//   "DAEFCKPT"                      8 bytes
//   u32  format version (1)
//   u64  manifest length, manifest  (UTF-8 JSON, sorted keys)
//   u64  tensor count
//   per tensor, in key order:
//     u32 name length, name bytes
//     4 x i32 dims
//     dims-product x f64 values
//
// All integers and doubles are little-endian. Encoding is a pure function
// of the archive contents, so load -> save reproduces the file byte for byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "daefuse/config.hpp"
#include "daefuse/error.hpp"
#include "daefuse/networks.hpp"
#include "daefuse/optim.hpp"

namespace daefuse {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'E', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointFormat = 1;

struct ArchiveTensor {
  Dims dims{1, 1, 1, 1};
  std::vector<double> values;

  friend bool operator==(const ArchiveTensor&, const ArchiveTensor&) = default;
};

struct Archive {
  json manifest = json::object();
  std::map<std::string, ArchiveTensor> tensors;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(ErrorKind::IOError, "truncated checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string encode_archive(const Archive& a) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointFormat);
  const std::string manifest = a.manifest.dump();
  detail::put<std::uint64_t>(out, manifest.size());
  out += manifest;
  detail::put<std::uint64_t>(out, a.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    for (int d : t.dims) detail::put<std::int32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
  }
  return out;
}

inline Archive decode_archive(const std::string& in) {
  if (in.size() < sizeof(kCheckpointMagic) || std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    fail(ErrorKind::UnsupportedFormat, "not a checkpoint archive");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  if (detail::take<std::uint32_t>(in, pos) != kCheckpointFormat) {
    fail(ErrorKind::UnsupportedFormat, "unknown checkpoint format version");
  }
  Archive a;
  const auto manifest_len = detail::take<std::uint64_t>(in, pos);
  if (pos + manifest_len > in.size()) fail(ErrorKind::IOError, "truncated checkpoint manifest");
  a.manifest = json::parse(in.substr(pos, manifest_len));
  pos += manifest_len;
  const auto count = detail::take<std::uint64_t>(in, pos);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::take<std::uint32_t>(in, pos);
    if (pos + len > in.size()) fail(ErrorKind::IOError, "truncated tensor name");
    std::string name = in.substr(pos, len);
    pos += len;
    ArchiveTensor t;
    for (int& d : t.dims) d = detail::take<std::int32_t>(in, pos);
    const std::size_t n = element_count(t.dims);
    if (pos + n * sizeof(double) > in.size()) fail(ErrorKind::IOError, "truncated tensor '" + name + "'");
    t.values.resize(n);
    std::memcpy(t.values.data(), in.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    a.tensors.emplace(std::move(name), std::move(t));
  }
  if (pos != in.size()) fail(ErrorKind::IOError, "trailing bytes after checkpoint");
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_archive(a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IOError, "short write to " + path.string());
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::NotFound, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_archive(buf.str());
}

// ---------------------------------------------------------------------------
// Model and optimizer state <-> archive

inline void store_model(Archive& a, const ModelParameters& m, const std::string& config_hash = {}) {
  json buffers = json::array();
  for (const auto& [name, e] : m.store.entries()) {
    a.tensors["model/" + name] = {e.tensor.dims(), {e.tensor.values().begin(), e.tensor.values().end()}};
    if (!e.trainable) buffers.push_back(name);
  }
  a.manifest["version"] = m.version;
  a.manifest["phase_tag"] = m.phase_tag;
  a.manifest["network"] = m.network;
  a.manifest["attention"] = m.attention;
  a.manifest["fusion_mode"] = m.cross_attention ? "cross-attention" : "concatenation";
  a.manifest["buffers"] = buffers;
  a.manifest["training_config_hash"] = config_hash;
  a.manifest["artifact_version"] = kVersion;
}

inline ModelParameters load_model(const Archive& a) {
  ModelParameters m;
  try {
    m.version = a.manifest.at("version").get<std::int64_t>();
    m.phase_tag = a.manifest.at("phase_tag").get<int>();
    m.network = a.manifest.at("network").get<NetworkConfig>();
    m.attention = a.manifest.at("attention").get<AttentionConfig>();
    m.cross_attention = a.manifest.value("fusion_mode", std::string("cross-attention")) != "concatenation";
  } catch (const json::exception& e) {
    fail(ErrorKind::UnsupportedFormat, std::string("checkpoint manifest incomplete: ") + e.what());
  }
  std::set<std::string> buffers;
  for (const auto& b : a.manifest.value("buffers", json::array())) buffers.insert(b.get<std::string>());
  const std::string prefix = "model/";
  for (const auto& [key, t] : a.tensors) {
    if (key.rfind(prefix, 0) != 0) continue;
    const std::string name = key.substr(prefix.size());
    m.store.add(name, t.dims, t.values, !buffers.count(name));
  }
  // structural check against a fresh model of the same config
  const ModelParameters reference = init_model(m.network, m.attention);
  for (const auto& [name, e] : reference.store.entries()) {
    if (!m.store.contains(name) || m.store.get(name).dims() != e.tensor.dims()) {
      fail(ErrorKind::UnsupportedFormat, "checkpoint lacks or misshapes parameter '" + name + "'");
    }
  }
  if (!m.store.all_finite()) fail(ErrorKind::NumericalError, "checkpoint contains non-finite weights");
  return m;
}

inline void store_optimizer(Archive& a, const std::string& tag, const OptimizerState& s) {
  a.manifest["optimizers"][tag]["steps"] = s.steps;
  for (const auto& [name, v] : s.first)
    a.tensors["opt/" + tag + "/m/" + name] = {{1, 1, 1, static_cast<int>(v.size())}, v};
  for (const auto& [name, v] : s.second)
    a.tensors["opt/" + tag + "/v/" + name] = {{1, 1, 1, static_cast<int>(v.size())}, v};
}

inline OptimizerState load_optimizer(const Archive& a, const std::string& tag) {
  OptimizerState s;
  if (!a.manifest.contains("optimizers") || !a.manifest["optimizers"].contains(tag)) return s;
  s.steps = a.manifest["optimizers"][tag].at("steps").get<std::int64_t>();
  const std::string m_prefix = "opt/" + tag + "/m/";
  const std::string v_prefix = "opt/" + tag + "/v/";
  for (const auto& [key, t] : a.tensors) {
    if (key.rfind(m_prefix, 0) == 0) s.first[key.substr(m_prefix.size())] = t.values;
    if (key.rfind(v_prefix, 0) == 0) s.second[key.substr(v_prefix.size())] = t.values;
  }
  return s;
}

/// Model-only checkpoint (as used for inference).
inline void save_model(const std::filesystem::path& path, const ModelParameters& m, const std::string& config_hash = {}) {
  Archive a;
  store_model(a, m, config_hash);
  write_archive(path, a);
}

inline ModelParameters load_model(const std::filesystem::path& path) { return load_model(read_archive(path)); }

}  // namespace daefuse
