// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>

namespace dranet {

using Index = std::int64_t;

/// Base of every error the engine raises; the CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct FormatError : DataError {
  using DataError::DataError;
};

struct Shape {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

/// Dense rank-4 array in (n, c, h, w) row-major order.
///
/// Storage is an Eigen column array so elementwise work can be written as
/// Eigen expressions through `array()`. Copies are deep; a tensor handed to
/// the tape is treated as immutable from then on.
template <typename Scalar_>
class Tensor4 {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using PlaneMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstPlaneMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor4() : Tensor4(Shape{}) {}

  explicit Tensor4(const Shape& shape) : shape_(checked(shape)), data_(Storage::Zero(shape.size())) {}

  Tensor4(Index n, Index c, Index h, Index w) : Tensor4(Shape{n, c, h, w}) {}

  Tensor4(const Shape& shape, Storage data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
    }
  }

  static Tensor4 zeros(const Shape& shape) { return Tensor4(shape); }
  static Tensor4 constant(const Shape& shape, Scalar value) {
    return Tensor4(shape, Storage::Constant(shape.size(), value));
  }
  static Tensor4 scalar(Scalar value) { return constant(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return shape_.size(); }

  Index offset(Index n, Index c, Index y, Index x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  Scalar& operator()(Index n, Index c, Index y, Index x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(Index n, Index c, Index y, Index x) const { return data_[offset(n, c, y, x)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  /// h x w view of one (n, c) plane.
  PlaneMap plane(Index n, Index c) { return PlaneMap(data() + offset(n, c, 0, 0), shape_.h, shape_.w); }
  ConstPlaneMap plane(Index n, Index c) const {
    return ConstPlaneMap(data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }

  /// Item = one batch element, viewed as (c, h*w).
  PlaneMap item(Index n) { return PlaneMap(data() + offset(n, 0, 0, 0), shape_.c, shape_.plane()); }
  ConstPlaneMap item(Index n) const {
    return ConstPlaneMap(data() + offset(n, 0, 0, 0), shape_.c, shape_.plane());
  }

  Scalar item_value() const {
    if (size() != 1) throw ShapeError("tensor of shape " + shape_.str() + " is not a scalar");
    return data_[0];
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    return Tensor4<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  Tensor4 reshaped(const Shape& shape) const {
    if (shape.size() != size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor4(shape, data_);
  }

  Tensor4& operator+=(const Tensor4& other) {
    require_same(other, "+=");
    data_ += other.data_;
    return *this;
  }

  /// Bitwise equality of shape and every scalar.
  bool operator==(const Tensor4& other) const {
    return shape_ == other.shape_ && std::memcmp(data(), other.data(), sizeof(Scalar) * size()) == 0;
  }

  void require_same(const Tensor4& other, const char* what) const {
    if (other.shape_ != shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + other.shape_.str());
    }
  }

 private:
  static Shape checked(const Shape& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) throw ShapeError("tensor dims must be >= 1, got " + s.str());
    return s;
  }

  Shape shape_;
  Storage data_;
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

}  // namespace dranet
