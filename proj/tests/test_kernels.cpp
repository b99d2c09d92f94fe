#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "lmrt/kernels.hpp"
#include "lmrt/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace lmrt;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

std::vector<double> random_dist(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = -std::log(1.0 - rng.uniform());
    s += x;
  }
  for (auto& x : v) x /= s;
  return v;
}

}  // namespace

TEST_CASE("blocked reductions: serial and parallel agree bitwise") {
  for (std::size_t n : {0ul, 1ul, 100ul, 4096ul, 4097ul, 50000ul}) {
    auto x = random_vec(n, 17 + n);
    auto y = random_vec(n, 91 + n);
    CHECK(kernels::serial::sum(x) == kernels::par::sum(x));
    CHECK(kernels::serial::dot(x, y) == kernels::par::dot(x, y));
    auto p = random_dist(std::max<std::size_t>(n, 1), 3 + n);
    CHECK(kernels::serial::entropy(p) == kernels::par::entropy(p));
  }
}

TEST_CASE("blocked sum is thread-count invariant") {
#ifdef _OPENMP
  auto x = random_vec(30011, 5);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const double s1 = kernels::par::sum(x);
  const double e1 = kernels::par::entropy(random_dist(30011, 6));
  omp_set_num_threads(std::max(2, saved));
  const double s2 = kernels::par::sum(x);
  const double e2 = kernels::par::entropy(random_dist(30011, 6));
  omp_set_num_threads(saved);
  CHECK(s1 == s2);
  CHECK(e1 == e2);
#endif
}

TEST_CASE("blocked sum matches naive sum within rounding") {
  auto x = random_vec(25000, 8);
  double naive = 0.0;
  for (double v : x) naive += v;
  CHECK(kernels::par::sum(x) == doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("entropy kernel analytic cases") {
  std::vector<double> uniform4(4, 0.25);
  CHECK(kernels::serial::entropy(uniform4) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  std::vector<double> point{1.0, 0.0, 0.0};
  CHECK(kernels::serial::entropy(point) == 0.0);
  std::vector<double> mix{0.5, 0.25, 0.25};
  CHECK(kernels::serial::entropy(mix) ==
        doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("topk selection: serial equals parallel, ties break to lower id") {
  SUBCASE("tie at the boundary") {
    std::vector<double> p{0.1, 0.3, 0.3, 0.3};
    auto top2 = kernels::serial::topk_indices(p, 2);
    REQUIRE(top2.size() == 2);
    CHECK(top2[0] == 1);
    CHECK(top2[1] == 2);
  }
  SUBCASE("permuted ids keep the tie rule") {
    std::vector<double> p{0.3, 0.1, 0.3, 0.3};
    auto top2 = kernels::serial::topk_indices(p, 2);
    CHECK(top2[0] == 0);
    CHECK(top2[1] == 2);
  }
  SUBCASE("large vector, serial == parallel") {
    auto p = random_dist(60000, 11);
    // Force exact ties so the total order matters.
    for (int i = 0; i < 60000; i += 7) p[i] = 1e-5;
    for (std::size_t k : {1ul, 5ul, 50ul, 500ul, 5000ul, 60000ul}) {
      auto s = kernels::serial::topk_indices(p, k);
      auto q = kernels::par::topk_indices(p, k);
      CHECK(s == q);
      CHECK(s.size() == k);
      CHECK(std::is_sorted(s.begin(), s.end()));
    }
  }
}

TEST_CASE("matrix kernels: serial equals parallel bitwise") {
  const std::size_t m = 37, k = 23, n = 41;
  auto a = random_vec(m * k, 21);
  auto b = random_vec(k * n, 22);
  std::vector<double> c1(m * n), c2(m * n);
  kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n, false);
  kernels::par::matmul(a.data(), b.data(), c2.data(), m, k, n, false);
  CHECK(c1 == c2);

  std::vector<double> d1(k * n), d2(k * n);
  kernels::serial::matmul_at_b(a.data(), c1.data(), d1.data(), m, k, n, false);
  kernels::par::matmul_at_b(a.data(), c2.data(), d2.data(), m, k, n, false);
  CHECK(d1 == d2);

  std::vector<double> e1(m * k, 1.0), e2(m * k, 1.0);
  kernels::serial::matmul_a_bt(c1.data(), b.data(), e1.data(), m, n, k, true);
  kernels::par::matmul_a_bt(c2.data(), b.data(), e2.data(), m, n, k, true);
  CHECK(e1 == e2);
}

TEST_CASE("matmul matches a hand-computed product") {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8}, c(4);
  kernels::serial::matmul(a.data(), b.data(), c.data(), 2, 2, 2, false);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("softmax rows: serial equals parallel, rows normalize") {
  const std::size_t rows = 13, n = 257;
  auto x1 = random_vec(rows * n, 33);
  auto x2 = x1;
  kernels::serial::softmax_rows(x1.data(), rows, n);
  kernels::par::softmax_rows(x2.data(), rows, n);
  CHECK(x1 == x2);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x1[r * n + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}
