#include <catch2/catch_amalgamated.hpp>

#include "selpred/matrix.hpp"
#include "selpred/rng.hpp"
#include "test_support.hpp"

using selpred::Matrix;
using selpred::Rng;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  std::size_t i = 0;
  for (const auto& row : rows) {
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("column_mean_std uses the population convention") {
  const auto [means, stds] = selpred::column_mean_std(from_rows({{0, 0}, {2, 0}}));
  CHECK(means[0] == 1.0);
  CHECK(means[1] == 0.0);
  CHECK(stds[0] == 1.0);
  CHECK(stds[1] == 0.0);

  const auto [m1, s1] = selpred::column_mean_std(from_rows({{5}}));
  CHECK(m1[0] == 5.0);
  CHECK(s1[0] == 0.0);

  const auto [m2, s2] = selpred::column_mean_std(from_rows({{1, 2}, {-1, -2}}));
  CHECK(m2[0] == 0.0);
  CHECK(m2[1] == 0.0);
  CHECK(s2[0] == 1.0);
  CHECK(s2[1] == 2.0);

  CHECK_THROWS_AS(selpred::column_mean_std(Matrix()), selpred::DimensionError);
}

TEST_CASE("center_columns removes column means") {
  const Matrix c = selpred::center_columns(from_rows({{1, 1}, {3, 1}}));
  CHECK(c == from_rows({{-1, 0}, {1, 0}}));

  CHECK(selpred::center_columns(from_rows({{7}})) == from_rows({{0}}));

  const Matrix centered = from_rows({{-1, 2}, {1, -2}});
  CHECK(selpred::center_columns(centered) == centered);
}

TEST_CASE("center_columns is idempotent and re-centering yields zero means") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    Rng r = rng.split(trial);
    const Matrix m = test_support::random_matrix(7, 5, r, 3.0);
    const Matrix once = selpred::center_columns(m);
    const Matrix twice = selpred::center_columns(once);
    for (std::size_t t = 0; t < once.data.size(); ++t)
      CHECK(std::abs(once.data[t] - twice.data[t]) < 1e-12);
    const auto [means, stds] = selpred::column_mean_std(once);
    for (double mu : means) CHECK(std::abs(mu) < 1e-12);
  }
}

TEST_CASE("matmul handles identity, outer products and zeros") {
  const Matrix x = from_rows({{1, 2}, {3, 4}});
  CHECK(selpred::matmul(Matrix::identity(2), x) == x);

  const Matrix a = from_rows({{1, -1}});
  CHECK(selpred::matmul(a, a, /*transpose_a=*/true) ==
        from_rows({{1, -1}, {-1, 1}}));

  CHECK(selpred::matmul(Matrix::zeros(2, 2), x) == Matrix::zeros(2, 2));

  CHECK_THROWS_AS(selpred::matmul(Matrix(2, 3), Matrix(2, 3)),
                  selpred::DimensionError);
  CHECK_THROWS_AS(selpred::matmul(Matrix(3, 2), Matrix(3, 2), true),
                  selpred::DimensionError);
}

TEST_CASE("argmax_row breaks ties toward the lowest index") {
  const Matrix m = from_rows({{1, 3, 3}, {2, 2, 2}});
  CHECK(selpred::argmax_row(m, 0) == 1);
  CHECK(selpred::argmax_row(m, 1) == 0);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 10000; ++i) {
    const auto va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    any_diff = any_diff || (va != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("rng split streams do not depend on parent consumption") {
  Rng parent1(7), parent2(7);
  parent2.next_u64();  // consume before splitting
  parent2.next_u64();
  Rng child1 = parent1.split(42);
  Rng child2 = parent2.split(42);
  for (int i = 0; i < 100; ++i) CHECK(child1.next_u64() == child2.next_u64());

  Rng other = parent1.split(43);
  bool differs = false;
  Rng child3 = Rng(7).split(42);
  for (int i = 0; i < 100; ++i)
    differs = differs || (other.next_u64() != child3.next_u64());
  CHECK(differs);
}

TEST_CASE("rng uniform stays in [0,1) and normal is roughly standard") {
  Rng rng(5);
  double sum = 0.0, sum2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double g = rng.normal();
    sum += g;
    sum2 += g * g;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sum2 / n - 1.0) < 0.05);
}
