#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smolora/errors.hpp"

namespace smolora {

// Stand-in for -infinity in masked routing logits. Softmax maps it to exactly
// zero by explicit test rather than relying on exp() underflow.
inline constexpr double kMaskSentinel = std::numeric_limits<double>::lowest();

inline bool is_masked(double v) noexcept { return v == kMaskSentinel; }

// Dense row-major matrix of doubles. Both dimensions are always >= 1.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols) {
    check_dims(rows, cols);
    data_.assign(rows * cols, fill);
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_dims(rows, cols);
    if (data_.size() != rows * cols) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows, cols));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  static void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
      throw ShapeError(std::string(op) + ": shapes " + a.shape() + " and " + b.shape() +
                       " differ");
    }
  }

 private:
  static void check_dims(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Matrix& m) {
  os << '[';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << (r == 0 ? "[" : ", [");
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c == 0 ? "" : ", ") << m(r, c);
    os << ']';
  }
  return os << ']';
}

inline void require_finite(const Matrix& m, const char* op) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double av = a(i, k);
      if (av == 0.0) continue;
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix operator+(Matrix a, const Matrix& b) {
  a += b;
  return a;
}

inline Matrix operator-(Matrix a, const Matrix& b) {
  Matrix::require_same_shape(a, b, "-");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] -= b.data()[i];
  return a;
}

inline Matrix operator*(double s, Matrix a) {
  a *= s;
  return a;
}

// Column-wise softmax. Entries equal to kMaskSentinel come out as exactly 0.
// Every column needs at least one unmasked entry.
inline Matrix softmax_columns(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double peak = kMaskSentinel;
    bool any = false;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      if (is_masked(m(r, c))) continue;
      peak = any ? std::max(peak, m(r, c)) : m(r, c);
      any = true;
    }
    if (!any) throw ArgumentError("softmax_columns: column " + std::to_string(c) + " fully masked");
    double total = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      if (is_masked(m(r, c))) continue;
      out(r, c) = std::exp(m(r, c) - peak);
      total += out(r, c);
    }
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) /= total;
  }
  return out;
}

inline Matrix mean_over_columns(const Matrix& m) {
  Matrix out(m.rows(), 1);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    out(r, 0) = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(m.cols());
  }
  return out;
}

// Indices of the k largest entries of column `c`, ties to the lowest index.
inline std::vector<std::size_t> topk_indices(const Matrix& m, std::size_t c, std::size_t k) {
  if (k == 0 || k > m.rows()) {
    throw ArgumentError("top-k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(m.rows()) + "]");
  }
  std::vector<std::size_t> order(m.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return m(a, c) > m(b, c); });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// Applies top-k independently to each column; unselected entries become
// kMaskSentinel.
inline Matrix topk_mask_columns(const Matrix& m, std::size_t k) {
  Matrix out(m.rows(), m.cols(), kMaskSentinel);
  for (std::size_t c = 0; c < m.cols(); ++c)
    for (std::size_t r : topk_indices(m, c, k)) out(r, c) = m(r, c);
  return out;
}

inline Matrix topk_mask(const Matrix& v, std::size_t k) {
  if (v.cols() != 1) throw ShapeError("topk_mask: expected a column vector, got " + v.shape());
  return topk_mask_columns(v, k);
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace smolora
