#include <doctest.h>

#include <cmath>
#include <limits>

#include "blocklora/errors.hpp"
#include "blocklora/rng.hpp"
#include "blocklora/tensor.hpp"
#include "oracles.hpp"

using namespace blocklora;

TEST_CASE("matrix construction validates shape and values") {
  CHECK_THROWS_AS(Matrix(0, 3), ShapeError);
  CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), DomainError);
  CHECK_THROWS_AS(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), DomainError);

  const Matrix m(2, 3);
  CHECK(m.size() == 6);
  for (double v : m.data()) CHECK(v == 0.0);
  CHECK(m.shape_string() == "(2x3)");
}

TEST_CASE("matmul") {
  SUBCASE("identity on the left") {
    const Matrix m = Matrix::from_rows({{1.5, -2.0}, {0.25, 7.0}});
    CHECK(matmul(Matrix::identity(2), m) == m);
  }
  SUBCASE("hand arithmetic") {
    const Matrix got = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{1}, {1}}));
    CHECK(got == Matrix::from_rows({{3}, {7}}));
  }
  SUBCASE("random product against triple loop") {
    RngState rng(11);
    const Matrix a = sample_normal(rng, 5, 3);
    const Matrix b = sample_normal(rng, 3, 4);
    const Matrix got = matmul(a, b);
    REQUIRE(got.rows() == 5);
    REQUIRE(got.cols() == 4);
    CHECK(oracle::max_abs_diff(oracle::matmul(oracle::to_dense(a), oracle::to_dense(b)), got) <= 1e-12);
  }
  SUBCASE("mismatch names both shapes") {
    try {
      matmul(Matrix(2, 3), Matrix(2, 3));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string what = e.what();
      CHECK(what.find("(2x3)") != std::string::npos);
      CHECK(what.find("(2x3)", what.find("(2x3)") + 1) != std::string::npos);
    }
  }
}

TEST_CASE("matmul is associative within 1e-9") {
  RngState rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t p = 1 + rng.below(6), q = 1 + rng.below(6), r = 1 + rng.below(6), s = 1 + rng.below(6);
    const Matrix a = sample_normal(rng, p, q);
    const Matrix b = sample_normal(rng, q, r);
    const Matrix c = sample_normal(rng, r, s);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    CHECK(frobenius_norm(subtract(left, right)) <= 1e-9 * std::max(1.0, frobenius_norm(left)));
  }
}

TEST_CASE("hadamard") {
  const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(hadamard(m, Matrix::ones(2, 2)) == m);
  CHECK(hadamard(m, Matrix::zeros(2, 2)) == Matrix::zeros(2, 2));
  CHECK(hadamard(m, Matrix::from_rows({{0, 1}, {1, 0}})) == Matrix::from_rows({{0, 2}, {3, 0}}));
  CHECK_THROWS_AS(hadamard(m, Matrix(2, 1)), ShapeError);

  RngState rng(13);
  const Matrix a = sample_normal(rng, 7, 5);
  const Matrix b = sample_normal(rng, 7, 5);
  CHECK(hadamard(a, b) == hadamard(b, a));
}

TEST_CASE("flatten_dot") {
  const Matrix ones = Matrix::from_rows({{1, 1}, {1, 1}});
  CHECK(flatten_dot(Matrix::zeros(2, 2), ones) == 0.0);
  CHECK(flatten_dot(ones, ones) == 4.0);
  CHECK_THROWS_AS(flatten_dot(ones, Matrix(4, 1)), ShapeError);

  RngState rng(14);
  const Matrix a = sample_normal(rng, 4, 4);
  const Matrix b = sample_normal(rng, 4, 4);
  CHECK(std::abs(flatten_dot(a, b) - oracle::dot(oracle::to_dense(a), oracle::to_dense(b))) <= 1e-12);
}

TEST_CASE("elementwise helpers") {
  const Matrix a = Matrix::from_rows({{1, -2}, {3, 0}});
  CHECK(transpose(a) == Matrix::from_rows({{1, 3}, {-2, 0}}));
  CHECK(add(a, a) == scale(a, 2.0));
  CHECK(subtract(a, a) == Matrix::zeros(2, 2));
  CHECK(frobenius_norm(a) == doctest::Approx(std::sqrt(14.0)));
  CHECK(scale_rows(a, Matrix::from_rows({{0}, {2}})) == Matrix::from_rows({{0, 0}, {6, 0}}));
  CHECK(add_column(a, Matrix::from_rows({{1}, {-1}})) == Matrix::from_rows({{2, -1}, {2, -1}}));
  CHECK(mean_squared_error(a, Matrix::zeros(2, 2)) == doctest::Approx(14.0 / 4.0));
  CHECK_THROWS_AS(scale(a, std::numeric_limits<double>::infinity()), DomainError);
}

TEST_CASE("rng streams are reproducible and forks are independent of position") {
  RngState a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  RngState fresh(42);
  CHECK(a.fork(5).next_u64() == fresh.fork(5).next_u64());
  CHECK(fresh.fork(5).next_u64() != fresh.fork(6).next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) < 7);
  }
}

TEST_CASE("normal draws have unit variance") {
  RngState rng(15);
  const Matrix z = sample_normal(rng, 200, 100);
  double mean = 0.0, sq = 0.0;
  for (double v : z.data()) {
    mean += v;
    sq += v * v;
  }
  mean /= z.size();
  sq /= z.size();
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(sq - 1.0) < 0.03);
}

TEST_CASE("sample_bernoulli_vector") {
  RngState rng(16);
  CHECK(sample_bernoulli_vector(rng, 50, 1.0) == Matrix::ones(50, 1));
  CHECK(sample_bernoulli_vector(rng, 50, 0.0) == Matrix::zeros(50, 1));
  CHECK_THROWS_AS(sample_bernoulli_vector(rng, 5, 1.5), DomainError);
  CHECK_THROWS_AS(sample_bernoulli_vector(rng, 5, -0.1), DomainError);

  const Matrix v = sample_bernoulli_vector(rng, 100000, 0.7);
  double ones = 0.0;
  for (double x : v.data()) {
    CHECK((x == 0.0 || x == 1.0));
    ones += x;
  }
  CHECK(ones / 100000.0 >= 0.68);
  CHECK(ones / 100000.0 <= 0.72);

  RngState s1(99), s2(99);
  CHECK(sample_bernoulli_vector(s1, 300, 0.4) == sample_bernoulli_vector(s2, 300, 0.4));
}

TEST_CASE("bernoulli counts follow the binomial mean") {
  constexpr double p = 0.3;
  constexpr int length = 1000;
  constexpr int trials = 1000;
  RngState rng(17);
  double total = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (double x : sample_bernoulli_vector(rng, length, p).data()) total += x;
  }
  const double mean_count = total / trials;
  // Standard error of the mean count over `trials` trials.
  const double sigma = std::sqrt(length * p * (1 - p) / trials);
  CHECK(std::abs(mean_count - p * length) <= 3.0 * sigma);
}
