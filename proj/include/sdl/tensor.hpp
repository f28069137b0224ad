#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sdl {

using Index = Eigen::Index;

/// Extents of a 4-D tensor in (batch, channels, height, width) order.
/// Lower-rank data is stored with leading unit extents.
struct Shape {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& operand, const Shape& got,
             const std::string& expected)
      : std::invalid_argument(op + ": operand '" + operand + "' has shape " + got.str() +
                              ", expected " + expected) {}
};

/// Dense row-major NCHW tensor. Elements live in a contiguous Eigen array so
/// whole-tensor arithmetic goes through Eigen expressions.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Array::Zero(shape.size())) {}
  Tensor(const Shape& shape, Scalar fill) : shape_(shape), data_(Array::Constant(shape.size(), fill)) {}
  Tensor(const Shape& shape, Array data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("Tensor", "data", shape_, std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// One (h, w) plane as a row-major matrix view.
  auto plane(Index n, Index c) {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }
  auto plane(Index n, Index c) const {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }

  /// Copies batch items [first, first + count).
  Tensor batch_slice(Index first, Index count) const {
    Shape s = shape_;
    s.n = count;
    const Index item = shape_.c * shape_.h * shape_.w;
    return Tensor(s, data_.segment(first * item, count * item));
  }

  void set_batch(Index index, const Tensor& item) {
    const Index len = shape_.c * shape_.h * shape_.w;
    if (item.size() != len) throw ShapeError("set_batch", "item", item.shape(), "one batch item");
    data_.segment(index * len, len) = item.array();
  }

  Tensor reshaped(const Shape& s) const {
    if (s.size() != size()) throw ShapeError("reshape", "tensor", shape_, s.str());
    return Tensor(s, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Shape shape_{0, 0, 0, 0};
  Array data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace sdl
