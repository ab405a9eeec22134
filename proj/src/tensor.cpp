#include "blocklora/tensor.hpp"

#include <cmath>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

void require_positive(std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("matrix dimensions must be positive, got " + std::to_string(rows) +
                     "x" + std::to_string(cols));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_() {
  require_positive(rows, cols);
  data_.assign(rows * cols, 0.0);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require_positive(rows, cols);
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
  require_finite(*this, "Matrix");
}

Matrix Matrix::zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

Matrix Matrix::ones(std::size_t rows, std::size_t cols) {
  return Matrix(rows, cols, std::vector<double>(rows * cols, 1.0));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

void require_finite(const Matrix& m, const char* context) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) {
      throw DomainError(std::string(context) + ": non-finite entry in " + m.shape_string() +
                        " matrix");
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aik * b_row[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out(a.rows(), a.cols());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  require_finite(out, "hadamard");
  return out;
}

double flatten_dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "flatten_dot");
  double sum = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) sum += x[i] * y[i];
  if (!std::isfinite(sum)) throw DomainError("flatten_dot: non-finite result");
  return sum;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
  require_finite(out, "add");
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= y[i];
  require_finite(out, "subtract");
  return out;
}

Matrix scale(const Matrix& a, double factor) {
  Matrix out = a;
  for (double& v : out.data()) v *= factor;
  require_finite(out, "scale");
  return out;
}

double frobenius_norm(const Matrix& a) {
  double sum = 0.0;
  for (double v : a.data()) sum += v * v;
  return std::sqrt(sum);
}

Matrix scale_rows(const Matrix& a, const Matrix& column_vector) {
  if (column_vector.cols() != 1 || column_vector.rows() != a.rows()) {
    throw ShapeError("scale_rows: expected (" + std::to_string(a.rows()) + "x1) vector, got " +
                     column_vector.shape_string() + " for " + a.shape_string());
  }
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double s = column_vector(i, 0);
    for (double& v : out.row(i)) v *= s;
  }
  require_finite(out, "scale_rows");
  return out;
}

Matrix add_column(const Matrix& a, const Matrix& column_vector) {
  if (column_vector.cols() != 1 || column_vector.rows() != a.rows()) {
    throw ShapeError("add_column: expected (" + std::to_string(a.rows()) + "x1) vector, got " +
                     column_vector.shape_string());
  }
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double s = column_vector(i, 0);
    for (double& v : out.row(i)) v += s;
  }
  require_finite(out, "add_column");
  return out;
}

Matrix tanh(const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v = std::tanh(v);
  return out;
}

double mean_squared_error(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "mean_squared_error");
  double sum = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    sum += d * d;
  }
  return sum / static_cast<double>(x.size());
}

}  // namespace blocklora
