#ifndef VOLNET_TENSOR_HPP
#define VOLNET_TENSOR_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "volnet/error.hpp"

namespace volnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline void check_shape(const Shape& shape) {
  if (shape.empty()) fail(ErrorCode::InvalidShape, "empty shape");
  for (Index extent : shape)
    if (extent < 1) fail(ErrorCode::InvalidShape, "non-positive extent in " + shape_string(shape));
}

// Dense row-major array (last axis fastest). Activations use [C, D, H, W] per
// sample and [N, C, D, H, W] per batch.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      fail(ErrorCode::InvalidShape, "data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector(Eigen::Map<const Vector>(values.begin(), Index(values.size())))) {}

  const Shape& shape() const { return shape_; }
  Index rank() const { return Index(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(std::size_t(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), std::size_t(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), std::size_t(data_.size())}; }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Eigen::Map<RowMatrix> matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const RowMatrix> matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return {data_.data(), rows, cols};
  }

  // Flat offset of a coordinate; throws when the coordinate is outside the shape.
  Index offset(std::span<const Index> coord) const {
    if (Index(coord.size()) != rank())
      fail(ErrorCode::IndexOutOfRange, "coordinate rank mismatch for shape " + shape_string(shape_));
    Index flat = 0;
    for (std::size_t i = 0; i < coord.size(); ++i) {
      if (coord[i] < 0 || coord[i] >= shape_[i])
        fail(ErrorCode::IndexOutOfRange, "coordinate outside shape " + shape_string(shape_));
      flat = flat * shape_[i] + coord[i];
    }
    return flat;
  }

  Scalar& at(std::initializer_list<Index> coord) { return data_[offset({coord.begin(), coord.size()})]; }
  Scalar at(std::initializer_list<Index> coord) const { return data_[offset({coord.begin(), coord.size()})]; }
  Scalar& at(std::span<const Index> coord) { return data_[offset(coord)]; }
  Scalar at(std::span<const Index> coord) const { return data_[offset(coord)]; }

  Scalar& operator[](Index flat) { return data_[flat]; }
  Scalar operator[](Index flat) const { return data_[flat]; }

  Tensor reshaped(Shape shape) const {
    check_shape(shape);
    if (shape_size(shape) != size())
      fail(ErrorCode::InvalidShape, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  void set_zero() { data_.setZero(); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           std::equal(data_.data(), data_.data() + data_.size(), other.data_.data());
  }

 private:
  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      fail(ErrorCode::ShapeMismatch, "matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                         " over tensor " + shape_string(shape_));
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
Tensor<Scalar> create(const Shape& shape, Scalar fill_value) {
  return Tensor<Scalar>(shape, fill_value);
}

namespace detail {

// Visits every coordinate of `extents` in row-major order except the last axis,
// handing the caller the coordinate prefix; the last axis is left to the caller
// so it can copy contiguous runs.
template <typename Fn>
void for_each_row(const Shape& extents, Fn&& fn) {
  const std::size_t rank = extents.size();
  Shape coord(rank, 0);
  if (rank == 0) return;
  const Index rows = shape_size(extents) / extents.back();
  for (Index r = 0; r < rows; ++r) {
    fn(coord);
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      if (++coord[axis] < extents[axis]) break;
      coord[axis] = 0;
    }
  }
}

inline Shape strides_of(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace detail

// Sub-array of `size` starting at `offset`; an exact copy, no interpolation.
template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& t, std::span<const Index> offset, std::span<const Index> size) {
  const std::size_t rank = t.shape().size();
  if (offset.size() != rank || size.size() != rank)
    fail(ErrorCode::CropOutOfBounds, "crop rank does not match tensor " + shape_string(t.shape()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (offset[i] < 0 || size[i] < 1 || offset[i] + size[i] > t.shape()[i])
      fail(ErrorCode::CropOutOfBounds, "window outside tensor " + shape_string(t.shape()));
  }
  Shape out_shape(size.begin(), size.end());
  Tensor<Scalar> out(out_shape);
  const Shape strides = detail::strides_of(t.shape());
  const Index run = out_shape.back();
  Scalar* dst = out.data();
  detail::for_each_row(out_shape, [&](const Shape& coord) {
    Index src = offset[rank - 1];
    for (std::size_t i = 0; i + 1 < rank; ++i) src += (coord[i] + offset[i]) * strides[i];
    std::copy_n(t.data() + src, run, dst);
    dst += run;
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& t, std::initializer_list<Index> offset, std::initializer_list<Index> size) {
  return crop(t, std::span<const Index>(offset.begin(), offset.size()),
              std::span<const Index>(size.begin(), size.size()));
}

// Concatenation along `axis`; all other extents must agree.
template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> ts, Index axis) {
  if (ts.empty()) fail(ErrorCode::ShapeMismatch, "concat of zero tensors");
  const Shape& first = ts.front().shape();
  if (axis < 0 || axis >= Index(first.size())) fail(ErrorCode::InvalidAxes, "concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : ts) {
    if (t.shape().size() != first.size()) fail(ErrorCode::ShapeMismatch, "concat rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (Index(i) != axis && t.shape()[i] != first[i])
        fail(ErrorCode::ShapeMismatch,
             "concat extents differ: " + shape_string(first) + " vs " + shape_string(t.shape()));
    out_shape[axis] += t.shape()[axis];
  }
  const Index outer = std::accumulate(first.begin(), first.begin() + axis, Index{1}, std::multiplies<>());
  Tensor<Scalar> out(out_shape);
  Scalar* dst = out.data();
  for (Index o = 0; o < outer; ++o) {
    for (const auto& t : ts) {
      const Index block = t.size() / outer;
      std::copy_n(t.data() + o * block, block, dst);
      dst += block;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>> ts) {
  return concat(ts, 0);
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& ts) {
  return concat(std::span<const Tensor<Scalar>>(ts), 0);
}

// `count` consecutive entries of `axis` starting at `begin`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& t, Index axis, Index begin, Index count) {
  Shape offset(t.shape().size(), 0);
  Shape size = t.shape();
  offset[axis] = begin;
  size[axis] = count;
  return crop(t, std::span<const Index>(offset), std::span<const Index>(size));
}

template <typename Scalar>
struct Moments {
  Tensor<Scalar> mean;
  Tensor<Scalar> variance;
};

// Mean and biased variance over `axes`, one value per index of the kept axes
// (shape [1] when every axis is reduced). Welford accumulation in double.
template <typename Scalar>
Moments<Scalar> reduce_moments(const Tensor<Scalar>& t, std::span<const Index> axes) {
  const Index rank = t.rank();
  if (axes.empty()) fail(ErrorCode::InvalidAxes, "empty reduction set");
  std::vector<bool> reduced(std::size_t(rank), false);
  for (Index axis : axes) {
    if (axis < 0 || axis >= rank) fail(ErrorCode::InvalidAxes, "axis " + std::to_string(axis) + " out of range");
    if (reduced[axis]) fail(ErrorCode::InvalidAxes, "repeated axis " + std::to_string(axis));
    reduced[axis] = true;
  }
  Shape kept_shape;
  for (Index i = 0; i < rank; ++i)
    if (!reduced[i]) kept_shape.push_back(t.dim(i));
  if (kept_shape.empty()) kept_shape.push_back(1);

  const Index groups = shape_size(kept_shape);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(groups);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(groups);
  std::vector<Index> counts(std::size_t(groups), 0);

  Shape coord(std::size_t(rank), 0);
  for (Index flat = 0; flat < t.size(); ++flat) {
    Index group = 0;
    for (Index i = 0; i < rank; ++i)
      if (!reduced[i]) group = group * t.dim(i) + coord[i];
    const double x = double(t[flat]);
    const Index k = ++counts[group];
    const double delta = x - mean[group];
    mean[group] += delta / double(k);
    m2[group] += delta * (x - mean[group]);
    for (Index i = rank; i-- > 0;) {
      if (++coord[i] < t.dim(i)) break;
      coord[i] = 0;
    }
  }
  Moments<Scalar> out{Tensor<Scalar>(kept_shape), Tensor<Scalar>(kept_shape)};
  for (Index g = 0; g < groups; ++g) {
    out.mean[g] = Scalar(mean[g]);
    out.variance[g] = Scalar(std::max(0.0, m2[g] / double(counts[g])));
  }
  return out;
}

template <typename Scalar>
Moments<Scalar> reduce_moments(const Tensor<Scalar>& t, std::initializer_list<Index> axes) {
  return reduce_moments(t, std::span<const Index>(axes.begin(), axes.size()));
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.vec().allFinite();
}

}  // namespace volnet

#endif  // VOLNET_TENSOR_HPP
