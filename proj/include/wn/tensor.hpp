#pragma once

#include <Eigen/Core>

#include <cmath>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wn/errors.hpp"

namespace wn {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMajorX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense n-dimensional array over a flat row-major buffer, templated on the
/// scalar type. It is the single value carrier between modules; fixed-rank
/// views into the buffer are Eigen maps, so arithmetic stays in Eigen
/// expressions and never copies.
template <typename Scalar = double>
class TensorT {
 public:
  using MapMat = Eigen::Map<RowMajorX<Scalar>>;
  using ConstMapMat = Eigen::Map<const RowMajorX<Scalar>>;
  using MapVec = Eigen::Map<VectorX<Scalar>>;
  using ConstMapVec = Eigen::Map<const VectorX<Scalar>>;

  TensorT() = default;

  explicit TensorT(std::vector<Index> shape) : shape_(std::move(shape)) {
    data_.setZero(checked_size(shape_));
  }

  TensorT(std::vector<Index> shape, VectorX<Scalar> flat)
      : shape_(std::move(shape)), data_(std::move(flat)) {
    if (checked_size(shape_) != data_.size()) {
      throw DimensionError("tensor: flat data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  /// Rank-2 tensor holding a copy of an Eigen matrix expression.
  template <typename Derived>
  static TensorT from_matrix(const Eigen::MatrixBase<Derived>& m) {
    TensorT t({m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  /// Rank-1 tensor holding a copy of an Eigen vector expression.
  template <typename Derived>
  static TensorT from_vector(const Eigen::MatrixBase<Derived>& v) {
    TensorT t({v.size()});
    t.flat() = v;
    return t;
  }

  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  const std::vector<Index>& shape() const { return shape_; }

  Index dim(Index i) const {
    if (i < 0 || i >= rank()) throw DimensionError("tensor: axis out of range");
    return shape_[static_cast<std::size_t>(i)];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  VectorX<Scalar>& flat() { return data_; }
  const VectorX<Scalar>& flat() const { return data_; }

  /// Row-major matrix view of a rank-2 tensor.
  MapMat matrix() {
    require_rank(2);
    return MapMat(data_.data(), shape_[0], shape_[1]);
  }
  ConstMapMat matrix() const {
    require_rank(2);
    return ConstMapMat(data_.data(), shape_[0], shape_[1]);
  }

  /// Matrix view of the flat buffer under an arbitrary (rows, cols) split.
  MapMat as_matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw DimensionError("tensor: as_matrix size mismatch");
    return MapMat(data_.data(), rows, cols);
  }
  ConstMapMat as_matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw DimensionError("tensor: as_matrix size mismatch");
    return ConstMapMat(data_.data(), rows, cols);
  }

  Scalar& operator()(Index i) { return data_[offset({i})]; }
  Scalar operator()(Index i) const { return data_[offset({i})]; }
  Scalar& operator()(Index i, Index j) { return data_[offset({i, j})]; }
  Scalar operator()(Index i, Index j) const { return data_[offset({i, j})]; }
  Scalar& operator()(Index i, Index j, Index k) { return data_[offset({i, j, k})]; }
  Scalar operator()(Index i, Index j, Index k) const { return data_[offset({i, j, k})]; }
  Scalar& operator()(Index i, Index j, Index k, Index l) { return data_[offset({i, j, k, l})]; }
  Scalar operator()(Index i, Index j, Index k, Index l) const {
    return data_[offset({i, j, k, l})];
  }

  /// Same buffer under a new shape; element count must be preserved.
  TensorT reshaped(std::vector<Index> shape) const {
    if (checked_size(shape) != size()) {
      throw DimensionError("tensor: reshape to " + shape_string(shape) +
                           " changes element count");
    }
    return TensorT(std::move(shape), data_);
  }

  bool all_finite() const { return data_.allFinite(); }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  static std::string shape_string(const std::vector<Index>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
  }

 private:
  static Index checked_size(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("tensor: non-positive extent in " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  void require_rank(Index r) const {
    if (rank() != r) {
      throw DimensionError("tensor: rank-" + std::to_string(r) + " view of rank-" +
                           std::to_string(rank()) + " tensor");
    }
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank()) {
      throw DimensionError("tensor: index arity does not match rank");
    }
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  std::vector<Index> shape_;
  VectorX<Scalar> data_;
};

using Tensor = TensorT<double>;

}  // namespace wn
