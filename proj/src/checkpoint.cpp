// SPDX-License-Identifier: Apache-2.0
#include "dranet/checkpoint.hpp"

#include "dranet/run_config.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dranet {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'R', 'A', 'N'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return value;
}

void append_tensor(std::string& data, json& manifest, const std::string& name, const Tensor4f& t) {
  const std::size_t offset = data.size();
  for (Index i = 0; i < t.size(); ++i) put_le(data, std::bit_cast<std::uint32_t>(t[i]));
  manifest.push_back({{"name", name},
                      {"shape", {t.n(), t.c(), t.h(), t.w()}},
                      {"dtype", "f32"},
                      {"offset", offset},
                      {"length", data.size() - offset}});
}

struct ManifestEntry {
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

Tensor4f read_tensor(const std::string& data, const std::string& name, const ManifestEntry& e) {
  if (e.length != static_cast<std::uint64_t>(e.shape.size()) * 4) {
    throw FormatError("checkpoint tensor '" + name + "': byte length does not match its shape");
  }
  if (e.offset > data.size() || e.length > data.size() - e.offset) {
    throw FormatError("checkpoint tensor data: '" + name + "' extends past the end of the file (truncated?)");
  }
  Tensor4f t(e.shape);
  for (Index i = 0; i < t.size(); ++i) {
    t[i] = std::bit_cast<float>(get_le<std::uint32_t>(data, e.offset + static_cast<std::size_t>(i) * 4));
  }
  return t;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  check_store(ckpt.config, ckpt.params);
  std::string data;
  json manifest = json::array();
  for (const auto& [name, t] : ckpt.params) append_tensor(data, manifest, "param/" + name, t);
  json header{{"format", "dranet-checkpoint"},
              {"config", to_json(ckpt.config)},
              {"variant", variant_name(ckpt.config.variant)},
              {"iteration", ckpt.iteration},
              {"seed", ckpt.seed},
              {"rng_state", ckpt.rng_state},
              {"run_config", ckpt.run_config}};
  if (ckpt.optimizer) {
    const auto& opt = *ckpt.optimizer;
    for (const auto& [name, t] : opt.m) append_tensor(data, manifest, "adam.m/" + name, t);
    for (const auto& [name, t] : opt.v) append_tensor(data, manifest, "adam.v/" + name, t);
    header["optimizer"] = {{"type", "adam"},
                           {"t", opt.t},
                           {"beta1", std::bit_cast<std::uint64_t>(opt.beta1)},
                           {"beta2", std::bit_cast<std::uint64_t>(opt.beta2)},
                           {"eps", std::bit_cast<std::uint64_t>(opt.eps)}};
  }
  header["tensors"] = manifest;
  const std::string header_text = header.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += data;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint magic: not a DRAN checkpoint");
  }
  if (bytes.size() < 16) throw FormatError("checkpoint preamble: file truncated");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != Checkpoint::kVersion) {
    throw FormatError("checkpoint version: unsupported version " + std::to_string(version) + " (this build reads " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint header: truncated");
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: invalid JSON: ") + e.what());
  }
  const std::string data = bytes.substr(16 + header_len);

  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("config"));
    ckpt.iteration = header.at("iteration").get<std::uint64_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.run_config = header.value("run_config", json::object());
    if (header.at("variant").get<std::string>() != variant_name(ckpt.config.variant)) {
      throw FormatError("checkpoint header: variant disagrees with config");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  std::unordered_map<std::string, ManifestEntry> manifest;
  std::vector<std::string> order;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError("checkpoint manifest: tensor '" + name + "' has unsupported dtype");
      }
      const auto dims = entry.at("shape").get<std::vector<Index>>();
      if (dims.size() != 4) throw FormatError("checkpoint manifest: tensor '" + name + "' is not rank 4");
      ManifestEntry e{{dims[0], dims[1], dims[2], dims[3]},
                      entry.at("offset").get<std::uint64_t>(),
                      entry.at("length").get<std::uint64_t>()};
      if (!manifest.emplace(name, e).second) throw FormatError("checkpoint manifest: duplicate tensor '" + name + "'");
      order.push_back(name);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }

  auto take = [&](const std::string& key) -> Tensor4f {
    auto it = manifest.find(key);
    if (it == manifest.end()) throw FormatError("checkpoint manifest: missing tensor '" + key + "'");
    return read_tensor(data, key, it->second);
  };

  const auto layers = model_layers(ckpt.config);
  for (const auto& layer : layers) {
    for (const char* suffix : {".weight", ".bias"}) {
      const std::string name = layer.name + suffix;
      ckpt.params.insert(name, take("param/" + name));
    }
  }
  try {
    check_store(ckpt.config, ckpt.params);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  std::size_t expected = ckpt.params.size();

  if (header.contains("optimizer")) {
    try {
      const auto& o = header.at("optimizer");
      AdamState<float> st;
      st.t = o.at("t").get<std::int64_t>();
      st.beta1 = std::bit_cast<double>(o.at("beta1").get<std::uint64_t>());
      st.beta2 = std::bit_cast<double>(o.at("beta2").get<std::uint64_t>());
      st.eps = std::bit_cast<double>(o.at("eps").get<std::uint64_t>());
      for (const auto& [name, p] : ckpt.params) {
        st.m.insert(name, take("adam.m/" + name));
        st.v.insert(name, take("adam.v/" + name));
        if (st.m.at(name).shape() != p.shape() || st.v.at(name).shape() != p.shape()) {
          throw FormatError("checkpoint optimizer: moment shape mismatch for '" + name + "'");
        }
      }
      expected += 2 * ckpt.params.size();
      ckpt.optimizer = std::move(st);
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint optimizer: ") + e.what());
    }
  }
  if (manifest.size() != expected) throw FormatError("checkpoint manifest: unexpected extra tensors");
  std::uint64_t data_end = 0;
  for (const auto& [_, e] : manifest) data_end = std::max(data_end, e.offset + e.length);
  if (data_end != data.size()) throw FormatError("checkpoint tensor data: trailing or missing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace dranet
