// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dranet/rng.hpp"
#include "dranet/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dranet {

/// A single image held as a (1, channels, h, w) tensor of [0, 1] samples.
/// 8-bit on disk; values may leave [0, 1] once noise is added.
struct Image {
  Tensor4d pixels;

  Image() = default;
  explicit Image(Tensor4d t);
  Image(Index channels, Index height, Index width) : Image(Tensor4d(1, channels, height, width)) {}

  Index channels() const { return pixels.c(); }
  Index height() const { return pixels.h(); }
  Index width() const { return pixels.w(); }
  double& at(Index c, Index y, Index x) { return pixels(0, c, y, x); }
  double at(Index c, Index y, Index x) const { return pixels(0, c, y, x); }

  /// Samples clamped to [0, 1] and rounded to the 8-bit grid, scaled to [0, 255].
  Tensor4d quantized255() const;
};

// PNM (binary P5 / P6, maxval 255) ------------------------------------------

struct PnmError : FormatError {
  enum class Kind { Io, BadMagic, BadHeader, UnsupportedMaxval, ShortData };
  PnmError(Kind kind, const std::string& what) : FormatError(what), kind(kind) {}
  Kind kind;
};

Image decode_pnm(const std::string& bytes);
std::string encode_pnm(const Image& image);
Image read_pnm(const std::filesystem::path& path);
/// Writes "P5\n<w> <h>\n255\n" (or P6) followed by clamped, rounded samples.
void write_pnm(const Image& image, const std::filesystem::path& path);

// Transforms ------------------------------------------------------------------

/// BT.601 luma: 0.299 r + 0.587 g + 0.114 b.
Image to_grayscale(const Image& rgb);

/// Element k of the dihedral group of the square: rotation by k*90 degrees
/// (counter-clockwise) for k < 4, horizontal mirror followed by rotation by
/// (k-4)*90 degrees for k >= 4.
Image augment(const Image& patch, int k);

Image crop(const Image& image, Index top, Index left, Index height, Index width);

/// `count` size x size crops at uniformly random top-left corners.
std::vector<Image> crop_patches(const Image& image, Index size, Index count, Rng& rng);

/// Reflect padding (no edge repeat) on the bottom and right up to the next
/// multiple of `multiple` in each dimension.
Image pad_reflect(const Image& image, Index multiple);

// Noise -----------------------------------------------------------------------

constexpr double kMaxSigma = 50.0;

/// clean + (sigma / 255) * N(0, 1) per scalar, unclipped.
template <typename Scalar>
Tensor4<Scalar> add_awgn(const Tensor4<Scalar>& clean, double sigma, Rng& rng, bool strict = true) {
  if (strict && (sigma < 0.0 || sigma > kMaxSigma)) {
    throw ConfigError("noise level " + std::to_string(sigma) + " outside [0, 50]");
  }
  Tensor4<Scalar> noisy = clean;
  if (sigma == 0.0) return noisy;
  const double k = sigma / 255.0;
  for (Index i = 0; i < noisy.size(); ++i) noisy[i] = static_cast<Scalar>(noisy[i] + k * rng.normal());
  return noisy;
}

struct SigmaRange {
  double lo = 0.0;
  double hi = kMaxSigma;
  /// Draw one sigma per batch instead of per patch.
  bool per_batch = false;

  void validate() const {
    if (lo < 0.0 || hi > kMaxSigma || lo > hi) throw ConfigError("sigma range must satisfy 0 <= lo <= hi <= 50");
  }
};

/// Range mode: sigma drawn uniformly on [lo, hi] for each batch item (or
/// once per batch), then AWGN at that level. Returns the sigmas used.
template <typename Scalar>
Tensor4<Scalar> add_awgn(const Tensor4<Scalar>& clean, const SigmaRange& range, Rng& rng, std::vector<double>& sigmas) {
  range.validate();
  sigmas.clear();
  Tensor4<Scalar> noisy = clean;
  const Index per_item = clean.c() * clean.h() * clean.w();
  double sigma = 0.0;
  for (Index n = 0; n < clean.n(); ++n) {
    if (n == 0 || !range.per_batch) sigma = range.lo == range.hi ? range.lo : rng.uniform(range.lo, range.hi);
    sigmas.push_back(sigma);
    if (sigma == 0.0) continue;
    const double k = sigma / 255.0;
    Scalar* p = noisy.data() + n * per_item;
    for (Index i = 0; i < per_item; ++i) p[i] = static_cast<Scalar>(p[i] + k * rng.normal());
  }
  return noisy;
}

// Datasets --------------------------------------------------------------------

/// .pgm/.ppm files of a flat directory in lexicographic filename order.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Loads every listed image, converting colour to grayscale when
/// `channels` is 1. Throws DataError for an empty or missing directory.
std::vector<Image> load_dataset(const std::filesystem::path& dir, Index channels,
                                std::vector<std::filesystem::path>* paths = nullptr);

struct PatchBatch {
  Tensor4f clean;
  Tensor4f noisy;
  std::vector<double> sigma;  // 0-255 scale, one per patch
};

struct SamplerConfig {
  Index patch_size = 128;
  Index batch_size = 8;
  SigmaRange sigma;
  bool augment = true;
};

/// Draws training batches; the sequence is a pure function of the RNG state
/// and the dataset order.
class PatchSampler {
 public:
  PatchSampler(std::vector<Image> images, SamplerConfig config);

  PatchBatch next(Rng& rng) const;
  const SamplerConfig& config() const { return config_; }
  std::size_t image_count() const { return images_.size(); }

 private:
  std::vector<Image> images_;
  SamplerConfig config_;
};

}  // namespace dranet
