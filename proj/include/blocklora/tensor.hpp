#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace blocklora {

/// Dense row-major matrix of doubles. Dimensions are always positive and
/// every entry is finite; constructors and the free operations below throw
/// rather than produce NaN/Inf.
class Matrix {
 public:
  /// Zero-filled rows x cols matrix.
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix zeros(std::size_t rows, std::size_t cols);
  static Matrix ones(std::size_t rows, std::size_t cols);
  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }

  /// "RxC", used in error messages.
  std::string shape_string() const;
  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
/// Sum of a[p,q] * b[p,q] over all positions, in row-major order.
double flatten_dot(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
double frobenius_norm(const Matrix& a);

/// Multiplies row p of `a` by column_vector(p, 0); column_vector is rows x 1.
Matrix scale_rows(const Matrix& a, const Matrix& column_vector);
/// Adds column_vector (rows x 1) to every column of `a`.
Matrix add_column(const Matrix& a, const Matrix& column_vector);
Matrix tanh(const Matrix& a);

/// Mean over all entries of (a - b)^2.
double mean_squared_error(const Matrix& a, const Matrix& b);

/// Throws DomainError naming `context` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* context);

}  // namespace blocklora
