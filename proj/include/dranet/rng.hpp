// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

namespace dranet {

/// The engine's single random source: mt19937_64 for raw bits, 53-bit
/// uniforms, and Box-Muller normals (the second draw of each pair is kept
/// as a spare). The whole state serializes to a string so training can
/// resume bit-exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform on {0, ..., count - 1}.
  Index uniform_index(Index count) {
    const auto n = static_cast<std::uint64_t>(count);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return static_cast<Index>(r % n);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << std::bit_cast<std::uint64_t>(spare_);
    return os.str();
  }

  void restore(const std::string& state) {
    std::istringstream is(state);
    int spare_flag = 0;
    std::uint64_t spare_bits = 0;
    is >> engine_ >> spare_flag >> spare_bits;
    if (!is) throw FormatError("malformed RNG state string");
    has_spare_ = spare_flag != 0;
    spare_ = std::bit_cast<double>(spare_bits);
  }

  bool operator==(const Rng& other) const {
    return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
           std::bit_cast<std::uint64_t>(spare_) == std::bit_cast<std::uint64_t>(other.spare_);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dranet
