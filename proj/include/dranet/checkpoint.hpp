// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/model.hpp"
#include "dranet/optim.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace dranet {

/// Binary layout:
///   "DRAN" | u32 LE version | u64 LE header length | UTF-8 JSON header | tensor data
/// The header carries the config, variant, iteration, RNG state and a
/// manifest (name, shape, dtype, byte offset into the data section, byte
/// length) for every tensor. Scalars are little-endian f32.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  NamedTensors<float> params;
  std::optional<AdamState<float>> optimizer;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string rng_state;
  /// Free-form run configuration echo.
  nlohmann::json run_config = nlohmann::json::object();

  bool operator==(const Checkpoint& o) const {
    return config == o.config && params == o.params && optimizer == o.optimizer && iteration == o.iteration &&
           seed == o.seed && rng_state == o.rng_state && run_config == o.run_config;
  }
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dranet
