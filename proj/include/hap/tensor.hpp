#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hap/errors.hpp"

namespace hap {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense n-dimensional array, row-major. A rank-2 tensor of shape (N, F) has
// the same memory layout as a column-major F x N matrix, which is how batches
// are handed to the autodiff graph.
template <typename Scalar_>
class BasicTensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMajorMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_ = Vector::Zero(shape_size(shape_));
  }

  BasicTensor(Shape shape, Vector data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape),
                    Eigen::Map<const Vector>(values.begin(),
                                             static_cast<Index>(values.size()))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  // Row-major matrix view: leading dimension by the product of the rest.
  Eigen::Map<RowMajorMatrix> matrix() {
    return Eigen::Map<RowMajorMatrix>(data_.data(), leading(), trailing());
  }
  Eigen::Map<const RowMajorMatrix> matrix() const {
    return Eigen::Map<const RowMajorMatrix>(data_.data(), leading(), trailing());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Index leading() const { return shape_.empty() ? 1 : shape_.front(); }
  Index trailing() const { return shape_.empty() ? 1 : data_.size() / shape_.front(); }

  void check_shape() const {
    for (Index d : shape_) {
      if (d <= 0) {
        throw ShapeError("tensor dimensions must be positive, got " +
                         shape_string(shape_));
      }
    }
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<double>;
using TensorList = std::vector<Tensor>;

// Tensor-list algebra: parameter vectors, gradients and probe vectors are all
// lists of tensors sharing one layout.

template <typename Scalar>
Scalar dot(std::span<const BasicTensor<Scalar>> a,
           std::span<const BasicTensor<Scalar>> b) {
  if (a.size() != b.size()) throw ShapeError("tensor list lengths differ");
  Scalar acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) {
      throw ShapeError("tensor shapes differ: " + shape_string(a[i].shape()) +
                       " vs " + shape_string(b[i].shape()));
    }
    acc += a[i].data().dot(b[i].data());
  }
  return acc;
}

inline double dot(const TensorList& a, const TensorList& b) {
  return dot<double>(std::span<const Tensor>(a), std::span<const Tensor>(b));
}

inline TensorList zeros_like(const TensorList& like) {
  TensorList out;
  out.reserve(like.size());
  for (const auto& t : like) out.push_back(Tensor::zeros(t.shape()));
  return out;
}

// a + alpha * b
inline TensorList axpy(const TensorList& a, double alpha, const TensorList& b) {
  if (a.size() != b.size()) throw ShapeError("tensor list lengths differ");
  TensorList out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) throw ShapeError("tensor shapes differ");
    out[i].data() += alpha * b[i].data();
  }
  return out;
}

inline TensorList scaled(const TensorList& a, double alpha) {
  TensorList out = a;
  for (auto& t : out) t.data() *= alpha;
  return out;
}

inline Index total_size(const TensorList& list) {
  Index n = 0;
  for (const auto& t : list) n += t.size();
  return n;
}

// Concatenate into one flat vector in declaration order, and back.
inline Eigen::VectorXd flatten(const TensorList& list) {
  Eigen::VectorXd flat(total_size(list));
  Index offset = 0;
  for (const auto& t : list) {
    flat.segment(offset, t.size()) = t.data();
    offset += t.size();
  }
  return flat;
}

inline TensorList unflatten(const Eigen::VectorXd& flat, const TensorList& like) {
  if (flat.size() != total_size(like)) throw ShapeError("flat vector length mismatch");
  TensorList out;
  out.reserve(like.size());
  Index offset = 0;
  for (const auto& t : like) {
    out.emplace_back(t.shape(), flat.segment(offset, t.size()));
    offset += t.size();
  }
  return out;
}

}  // namespace hap
