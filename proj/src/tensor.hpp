#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bkn {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_volume(const Shape& shape);

/// Dense row-major array of doubles. No views and no strides: every
/// operation returns a fresh tensor and leaves its inputs untouched.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Element of a rank-2 tensor.
  double at(std::size_t row, std::size_t col) const;
  double& at(std::size_t row, std::size_t col);

  Tensor reshaped(Shape shape) const;

  /// True when every element is finite.
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Batch/channel/height/width view of an NCHW tensor. Rank-2 tensors are
/// treated as [m, C] with a 1x1 spatial extent.
struct Shape4 {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t spatial() const noexcept { return height * width; }
  /// Positions pooled per channel: m * a * b.
  std::size_t effective_count() const noexcept { return batch * height * width; }

  static Shape4 of(const Tensor& t);
};

Tensor matmul(const Tensor& lhs, const Tensor& rhs);
Tensor transpose(const Tensor& t);

/// Mean over the listed axes; the reduced axes are dropped from the shape.
Tensor reduce_mean_over(const Tensor& t, std::span<const std::size_t> axes);
inline Tensor reduce_mean_over(const Tensor& t, std::initializer_list<std::size_t> axes) {
  return reduce_mean_over(t, std::span<const std::size_t>(axes.begin(), axes.size()));
}

// Elementwise arithmetic with trailing-axis broadcasting: shapes are aligned
// from the last axis and a size-1 (or missing) axis stretches.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor sqrt(const Tensor& t);
Tensor square(const Tensor& t);
Tensor scale(const Tensor& t, double s);

Shape broadcast_shape(const Shape& a, const Shape& b);

namespace kernel {

/// C += op(A) * op(B) with C of size m x n and inner extent k. Row-major,
/// leading dimensions equal to the logical row widths. Every output element
/// accumulates its k terms in increasing order.
void gemm_accumulate(bool transpose_a, bool transpose_b, std::size_t m,
                     std::size_t n, std::size_t k, const double* a,
                     const double* b, double* c);

}  // namespace kernel

}  // namespace bkn
