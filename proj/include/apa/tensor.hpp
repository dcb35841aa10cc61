#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace apa {

using Shape = std::vector<std::size_t>;

/// Raised when an operation is asked to work on a degenerate input, such as
/// normalizing a zero vector or taking the log of a non-positive entry.
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
///
/// Rank-1 tensors of length d behave as a single row (1 x d) wherever a
/// row-wise operation is applied, so per-sample and batched code share one
/// implementation.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != count(shape_)) {
      throw DimensionMismatch("tensor: " + std::to_string(values_.size()) +
                              " values for shape " + shape_string(shape_));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  /// Row count when viewed as a matrix; rank-1 tensors are one row.
  std::size_t rows() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : shape_[0];
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.back();
  }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }

  bool same_shape(const Tensor& other) const noexcept {
    return shape_ == other.shape_;
  }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same(other, "+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& other) {
    require_same(other, "-=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& other) const = default;

  void require_same(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw DimensionMismatch(std::string(what) + ": shape " +
                              shape_string(shape_) + " vs " +
                              shape_string(other.shape_));
    }
  }

 private:
  static std::size_t count(const Shape& shape) {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> values_;
};

// Small dense helpers on spans. Used by the closed-form solvers and by the
// analysis code, outside any autodiff graph.

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm2(const Tensor& t) { return norm2(t.values()); }

/// Cosine similarity. NaN when either side is the zero vector, so callers can
/// exclude and count the pair.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline std::vector<double> normalized(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > 0.0)) throw DegenerateInput("normalize: zero-norm vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

/// Row `r` of a matrix as an owning rank-1 tensor.
inline Tensor row_of(const Tensor& m, std::size_t r) {
  auto span = m.row(r);
  return Tensor::vector(std::vector<double>(span.begin(), span.end()));
}

/// Stack equal-length rows into a [n x d] matrix.
inline Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Tensor({0, 0});
  const std::size_t d = rows.front().size();
  std::vector<double> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw DimensionMismatch("stack_rows: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), d}, std::move(flat));
}

/// Select rows by index into a new [k x d] matrix.
inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> idx) {
  const std::size_t d = m.cols();
  std::vector<double> flat;
  flat.reserve(idx.size() * d);
  for (std::size_t i : idx) {
    if (i >= m.rows()) throw std::out_of_range("gather_rows: index");
    auto r = m.row(i);
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({idx.size(), d}, std::move(flat));
}

}  // namespace apa
