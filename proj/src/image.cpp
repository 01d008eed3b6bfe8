// SPDX-License-Identifier: Apache-2.0
#include "dranet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dranet {

Image::Image(Tensor4d t) : pixels(std::move(t)) {
  if (pixels.n() != 1) throw ShapeError("an image tensor must have n = 1, got " + pixels.shape().str());
}

Tensor4d Image::quantized255() const {
  Tensor4d out(pixels.shape());
  out.array() = (pixels.array().max(0.0).min(1.0) * 255.0).round();
  return out;
}

namespace {

using Kind = PnmError::Kind;

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char ch = bytes_[pos_];
      if (ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (pos_ == start || pos_ - start > 9) throw PnmError(Kind::BadHeader, std::string("PNM header: bad ") + field);
    return std::stol(bytes_.substr(start, pos_ - start));
  }

  void single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw PnmError(Kind::BadHeader, "PNM header: missing whitespace after maxval");
    }
    ++pos_;
  }

  std::size_t position() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Image decode_pnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw PnmError(Kind::BadMagic, "PNM: expected magic P5 or P6");
  }
  const Index channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader header(bytes);
  const long width = header.number("width");
  const long height = header.number("height");
  const long maxval = header.number("maxval");
  if (width < 1 || height < 1) throw PnmError(Kind::BadHeader, "PNM header: zero image dimension");
  if (maxval != 255) throw PnmError(Kind::UnsupportedMaxval, "PNM: maxval " + std::to_string(maxval) + " != 255");
  header.single_whitespace();
  const std::size_t offset = header.position();
  const auto needed = static_cast<std::size_t>(channels * height * width);
  if (bytes.size() - offset < needed) {
    throw PnmError(Kind::ShortData, "PNM: expected " + std::to_string(needed) + " sample bytes, found " +
                                        std::to_string(bytes.size() - offset));
  }
  Image image(channels, height, width);
  const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      for (Index c = 0; c < channels; ++c) image.at(c, y, x) = src[(y * width + x) * channels + c] / 255.0;
    }
  }
  return image;
}

std::string encode_pnm(const Image& image) {
  const Index channels = image.channels();
  if (channels != 1 && channels != 3) throw ShapeError("PNM images have 1 or 3 channels");
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width()) + " " +
                    std::to_string(image.height()) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(channels * image.height() * image.width()));
  const Tensor4d q = image.quantized255();
  auto* dst = reinterpret_cast<unsigned char*>(out.data() + header);
  for (Index y = 0; y < image.height(); ++y) {
    for (Index x = 0; x < image.width(); ++x) {
      for (Index c = 0; c < channels; ++c) {
        dst[(y * image.width() + x) * channels + c] = static_cast<unsigned char>(q(0, c, y, x));
      }
    }
  }
  return out;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PnmError(Kind::Io, "cannot open image '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_pnm(buf.str());
  } catch (const PnmError& e) {
    throw PnmError(e.kind, path.string() + ": " + e.what());
  }
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  const std::string bytes = encode_pnm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PnmError(Kind::Io, "cannot write image '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PnmError(Kind::Io, "short write to '" + path.string() + "'");
}

Image to_grayscale(const Image& rgb) {
  if (rgb.channels() != 3) throw ShapeError("to_grayscale expects 3 channels, got " + std::to_string(rgb.channels()));
  Image gray(1, rgb.height(), rgb.width());
  gray.pixels.plane(0, 0) =
      0.299 * rgb.pixels.plane(0, 0) + 0.587 * rgb.pixels.plane(0, 1) + 0.114 * rgb.pixels.plane(0, 2);
  return gray;
}

namespace {

/// Counter-clockwise quarter turn.
Image rot90(const Image& in) {
  Image out(in.channels(), in.width(), in.height());
  for (Index c = 0; c < in.channels(); ++c) {
    for (Index y = 0; y < in.height(); ++y) {
      for (Index x = 0; x < in.width(); ++x) out.at(c, in.width() - 1 - x, y) = in.at(c, y, x);
    }
  }
  return out;
}

Image mirror(const Image& in) {
  Image out(in.channels(), in.height(), in.width());
  for (Index c = 0; c < in.channels(); ++c) {
    out.pixels.plane(0, c) = in.pixels.plane(0, c).rowwise().reverse();
  }
  return out;
}

}  // namespace

Image augment(const Image& patch, int k) {
  if (k < 0 || k > 7) throw ConfigError("augmentation index must be in [0, 7]");
  Image out = k >= 4 ? mirror(patch) : patch;
  for (int i = 0; i < k % 4; ++i) out = rot90(out);
  return out;
}

Image crop(const Image& image, Index top, Index left, Index height, Index width) {
  if (top < 0 || left < 0 || top + height > image.height() || left + width > image.width()) {
    throw ShapeError("crop window outside the image");
  }
  Image out(image.channels(), height, width);
  for (Index c = 0; c < image.channels(); ++c) {
    out.pixels.plane(0, c) = image.pixels.plane(0, c).block(top, left, height, width);
  }
  return out;
}

std::vector<Image> crop_patches(const Image& image, Index size, Index count, Rng& rng) {
  if (image.height() < size || image.width() < size) {
    throw DataError("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                    " is smaller than the patch size " + std::to_string(size));
  }
  std::vector<Image> patches;
  patches.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const Index top = rng.uniform_index(image.height() - size + 1);
    const Index left = rng.uniform_index(image.width() - size + 1);
    patches.push_back(crop(image, top, left, size, size));
  }
  return patches;
}

Image pad_reflect(const Image& image, Index multiple) {
  auto padded = [multiple](Index n) { return (n + multiple - 1) / multiple * multiple; };
  const Index H = image.height();
  const Index W = image.width();
  const Index ph = padded(H);
  const Index pw = padded(W);
  // mirrors repeat when the padding is wider than the image; a single row or
  // column has nothing to mirror and is repeated
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index{0};
    i %= 2 * (n - 1);
    return i < n ? i : 2 * (n - 1) - i;
  };
  Image out(image.channels(), ph, pw);
  for (Index c = 0; c < image.channels(); ++c) {
    for (Index y = 0; y < ph; ++y) {
      for (Index x = 0; x < pw; ++x) out.at(c, y, x) = image.at(c, reflect(y, H), reflect(x, W));
    }
  }
  return out;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw DataError("dataset directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

std::vector<Image> load_dataset(const std::filesystem::path& dir, Index channels,
                                std::vector<std::filesystem::path>* paths) {
  const auto files = list_images(dir);
  if (files.empty()) throw DataError("dataset directory '" + dir.string() + "' contains no .pgm/.ppm images");
  std::vector<Image> images;
  for (const auto& f : files) {
    Image img = read_pnm(f);
    if (channels == 1 && img.channels() == 3) img = to_grayscale(img);
    if (img.channels() != channels) {
      throw DataError("'" + f.string() + "' has " + std::to_string(img.channels()) + " channels, model expects " +
                      std::to_string(channels));
    }
    images.push_back(std::move(img));
  }
  if (paths) *paths = files;
  return images;
}

PatchSampler::PatchSampler(std::vector<Image> images, SamplerConfig config)
    : images_(std::move(images)), config_(config) {
  if (images_.empty()) throw DataError("patch sampler needs at least one image");
  if (config_.patch_size < 1 || config_.batch_size < 1) throw ConfigError("patch and batch sizes must be >= 1");
  config_.sigma.validate();
  for (const auto& img : images_) {
    if (img.height() < config_.patch_size || img.width() < config_.patch_size) {
      throw DataError("training image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                      " is smaller than the patch size " + std::to_string(config_.patch_size));
    }
  }
}

PatchBatch PatchSampler::next(Rng& rng) const {
  const Index P = config_.patch_size;
  const Index C = images_.front().channels();
  Tensor4d clean(config_.batch_size, C, P, P);
  for (Index n = 0; n < config_.batch_size; ++n) {
    const Image& src = images_[static_cast<std::size_t>(rng.uniform_index(static_cast<Index>(images_.size())))];
    Image patch = crop_patches(src, P, 1, rng).front();
    if (config_.augment) patch = augment(patch, static_cast<int>(rng.uniform_index(8)));
    clean.item(n) = patch.pixels.item(0);
  }
  PatchBatch batch;
  batch.clean = clean.cast<float>();
  batch.noisy = add_awgn(batch.clean, config_.sigma, rng, batch.sigma);
  return batch;
}

}  // namespace dranet
