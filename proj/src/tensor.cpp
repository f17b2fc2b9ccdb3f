#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "error.hpp"

namespace bkn {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_volume(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                         std::to_string(shape_volume(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return data_[row * shape_[1] + col];
}

double& Tensor::at(std::size_t row, std::size_t col) {
  return data_[row * shape_[1] + col];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_volume(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Shape4 Shape4::of(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.size() == 2) return Shape4{s[0], s[1], 1, 1};
  if (s.size() == 4) return Shape4{s[0], s[1], s[2], s[3]};
  throw DimensionError("expected a [m,C] or [m,C,a,b] tensor, got " +
                       shape_string(s));
}

namespace kernel {

void gemm_accumulate(bool transpose_a, bool transpose_b, std::size_t m,
                     std::size_t n, std::size_t k, const double* a,
                     const double* b, double* c) {
  // Column blocks keep a k x kBlock panel of b in cache across rows of c.
  constexpr std::size_t kBlock = 128;
  if (!transpose_a && !transpose_b) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = b + p * n;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  } else if (transpose_a && !transpose_b) {
    // a is k x m
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[p * m + i];
          const double* brow = b + p * n;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  } else if (!transpose_a && transpose_b) {
    // b is n x k. A transposed copy lets the inner loop run over contiguous
    // columns; each c[i][j] still accumulates over p in increasing order.
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_accumulate(false, false, m, n, k, a, bt.data(), c);
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = c[i * n + j];
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] = acc;
      }
    }
  }
}

}  // namespace kernel

Tensor matmul(const Tensor& lhs, const Tensor& rhs) {
  if (lhs.rank() != 2 || rhs.rank() != 2 || lhs.dim(1) != rhs.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(lhs.shape()) +
                         " x " + shape_string(rhs.shape()));
  }
  const std::size_t m = lhs.dim(0), k = lhs.dim(1), n = rhs.dim(1);
  Tensor out({m, n});
  kernel::gemm_accumulate(false, false, m, n, k, lhs.values().data(),
                          rhs.values().data(), out.values().data());
  return out;
}

Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) {
    throw DimensionError("transpose expects a matrix, got " +
                         shape_string(t.shape()));
  }
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

Tensor reduce_mean_over(const Tensor& t, std::span<const std::size_t> axes) {
  const Shape& in = t.shape();
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= in.size()) {
      throw DimensionError("reduce axis " + std::to_string(ax) +
                           " invalid for " + shape_string(in));
    }
    if (reduced[ax]) {
      throw DimensionError("reduce axis " + std::to_string(ax) + " repeated");
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) {
      count *= in[i];
    } else {
      out_shape.push_back(in[i]);
    }
  }
  if (count == 0) throw DimensionError("mean over an empty extent");

  // Row-major strides of the output, indexed by input axis.
  std::vector<std::size_t> out_stride(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = s;
      s *= in[i];
    }
  }
  Tensor sum(out_shape);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < in.size(); ++i) o += idx[i] * out_stride[i];
    sum[o] += t[flat];
    for (std::size_t i = in.size(); i-- > 0;) {
      if (++idx[i] < in[i]) break;
      idx[i] = 0;
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : sum.values()) v *= inv;
  return sum;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_string(a) + " and " +
                           shape_string(b) + " are not broadcast-compatible");
    }
    out[r - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

template <class Op>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, Op op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t r = out_shape.size();
  auto strides_for = [&](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t axis = s.size() - 1 - i;
      const std::size_t out_axis = r - 1 - i;
      st[out_axis] = s[axis] == 1 ? 0 : acc;
      acc *= s[axis];
    }
    return st;
  };
  const auto sa = strides_for(a.shape());
  const auto sb = strides_for(b.shape());
  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < r; ++i) {
      ia += idx[i] * sa[i];
      ib += idx[i] * sb[i];
    }
    out[flat] = op(a[ia], b[ib]);
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_apply(a, b, [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values()) {
    if (v == 0.0) throw NumericError("division by exact zero");
  }
  return broadcast_apply(a, b, [](double x, double y) { return x / y; });
}

Tensor sqrt(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0.0) throw NumericError("sqrt of a negative value");
    out[i] = std::sqrt(t[i]);
  }
  return out;
}

Tensor square(const Tensor& t) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * t[i];
  return out;
}

Tensor scale(const Tensor& t, double s) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * s;
  return out;
}

}  // namespace bkn
