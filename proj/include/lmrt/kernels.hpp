#pragma once

// Hot numeric kernels, each in two variants:
//
//   kernels::serial::*  reference implementations, plain loops
//   kernels::par::*     OpenMP versions with identical results
//
// The two variants are bitwise-equal by construction and stay equal for any
// thread count: reductions run over a fixed block decomposition (block sums
// combined in block order), and matrix kernels partition over output rows so
// each element is produced by one thread with a fixed inner loop.
//
// tools/bench_kernels compares their timings; tests/test_kernels.cpp checks
// the equality.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lmrt::kernels {

inline constexpr std::size_t kBlock = 4096;

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

inline double sum_block(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

inline double plogp_block(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i]);
  }
  return s;
}

inline double dot_block(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Partial-result buffer for blocked reductions: stack storage for the
// common case, heap beyond 64 blocks.
struct PartialBuf {
  std::array<double, 64> stack;
  std::vector<double> heap;
  double* data = nullptr;
  explicit PartialBuf(std::size_t nb) {
    if (nb <= stack.size()) {
      data = stack.data();
    } else {
      heap.resize(nb);
      data = heap.data();
    }
  }
};

inline double max_block(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

// exp(x - shift) in place over a block, returning the block sum.
inline double expsum_block(double* x, std::size_t n, double shift) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - shift);
    s += x[i];
  }
  return s;
}

// Strict total order on (probability desc, id asc). Ties at the K-th rank
// therefore resolve to the lower vocabulary id, and a top-K set is unique.
struct TopkLess {
  const double* p;
  bool operator()(std::int32_t a, std::int32_t b) const {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  }
};

}  // namespace detail

namespace serial {

inline double sum(std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return detail::sum_block(x.data(), n);
  detail::PartialBuf partial(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * kBlock;
    partial.data[b] = detail::sum_block(x.data() + lo, std::min(kBlock, n - lo));
  }
  return detail::sum_block(partial.data, nb);
}

// -sum p ln p with 0 ln 0 := 0. Input is a probability vector.
inline double entropy(std::span<const double> p) {
  const std::size_t n = p.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return -detail::plogp_block(p.data(), n);
  detail::PartialBuf partial(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * kBlock;
    partial.data[b] = detail::plogp_block(p.data() + lo, std::min(kBlock, n - lo));
  }
  return -detail::sum_block(partial.data, nb);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return detail::dot_block(a.data(), b.data(), n);
  detail::PartialBuf partial(nb);
  for (std::size_t b2 = 0; b2 < nb; ++b2) {
    const std::size_t lo = b2 * kBlock;
    partial.data[b2] =
        detail::dot_block(a.data() + lo, b.data() + lo, std::min(kBlock, n - lo));
  }
  return detail::sum_block(partial.data, nb);
}

// Indices of the k largest entries of p, ascending by index.
// Expected O(n) selection; never a full sort.
inline std::vector<std::int32_t> topk_indices(std::span<const double> p,
                                              std::size_t k) {
  const std::size_t n = p.size();
  std::vector<std::int32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k < n) {
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(),
                     detail::TopkLess{p.data()});
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

// out = a*x + b, elementwise; out may alias x.
inline void axpb(std::span<const double> x, double a, double b,
                 std::span<double> out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b;
}

// y += a*x.
inline void axpy(std::span<const double> x, double a, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double max(std::span<const double> x) {
  return detail::max_block(x.data(), x.size());
}

// Overwrites logits with softmax probabilities. Max-shifted; blocked so the
// normalizer is thread-count invariant.
inline void softmax_inplace(std::span<double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  const double shift = max(x);
  if (nb <= 1) {
    const double z = detail::expsum_block(x.data(), n, shift);
    const double inv = 1.0 / z;
    for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
    return;
  }
  detail::PartialBuf partial(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * kBlock;
    partial.data[b] =
        detail::expsum_block(x.data() + lo, std::min(kBlock, n - lo), shift);
  }
  const double inv = 1.0 / detail::sum_block(partial.data, nb);
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

// log(sum exp(x)) with the same blocked structure.
inline double logsumexp(std::span<const double> x) {
  const std::size_t n = x.size();
  const double shift = max(x);
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  double z = 0.0;
  if (nb <= 1) {
    for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - shift);
    return shift + std::log(z);
  }
  detail::PartialBuf partialv(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t lo = b * kBlock;
    const std::size_t len = std::min(kBlock, n - lo);
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += std::exp(x[lo + i] - shift);
    partialv.data[b] = s;
  }
  return shift + std::log(detail::sum_block(partialv.data, nb));
}

// Row-major C(m x n) = A(m x k) * B(k x n), plus C when accumulate.
inline void matmul(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) = A^T * B with A stored (k x m): C[i][j] = sum_l A[l][i] B[l][j].
inline void matmul_at_b(const double* a, const double* b, double* c,
                        std::size_t k, std::size_t m, std::size_t n,
                        bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[l * m + i];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x k) = A * B^T with B stored (k x n): C[i][j] = sum_l A[i][l] B[j][l].
inline void matmul_a_bt(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t n, std::size_t k,
                        bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      double s = accumulate ? crow[j] : 0.0;
      const double* brow = b + j * n;
      for (std::size_t l = 0; l < n; ++l) s += arow[l] * brow[l];
      crow[j] = s;
    }
  }
}

// Per row of a (rows x n) matrix: subtract the row max, exponentiate,
// normalize. Returns nothing; logits are overwritten with probabilities.
inline void softmax_rows(double* x, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = x + r * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
}

}  // namespace serial

namespace par {

// Work below this many scalar ops is not worth a fork/join; the par kernels
// fall back to the serial bodies, which produce bitwise-identical results.
inline constexpr std::size_t kParThreshold = 1 << 15;

inline double sum(std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return detail::sum_block(x.data(), n);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    partial.data[b] = detail::sum_block(x.data() + lo, std::min(kBlock, n - lo));
  }
  return detail::sum_block(partial.data, nb);
}

inline double entropy(std::span<const double> p) {
  const std::size_t n = p.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return -detail::plogp_block(p.data(), n);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    partial.data[b] = detail::plogp_block(p.data() + lo, std::min(kBlock, n - lo));
  }
  return -detail::sum_block(partial.data, nb);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return detail::dot_block(a.data(), b.data(), n);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b2 = 0; b2 < static_cast<std::ptrdiff_t>(nb); ++b2) {
    const std::size_t lo = static_cast<std::size_t>(b2) * kBlock;
    partial.data[b2] =
        detail::dot_block(a.data() + lo, b.data() + lo, std::min(kBlock, n - lo));
  }
  return detail::sum_block(partial.data, nb);
}

// Chunked selection: each thread selects a local top-k, then the candidate
// union is reduced once more. The comparator is a strict total order, so the
// selected set is exactly the serial one.
inline std::vector<std::int32_t> topk_indices(std::span<const double> p,
                                              std::size_t k) {
  const std::size_t n = p.size();
  if (k >= n || n < 4 * kBlock) return serial::topk_indices(p, k);
  const std::size_t nchunk =
      std::min<std::size_t>(static_cast<std::size_t>(max_threads()),
                            (n + kBlock - 1) / kBlock);
  if (nchunk <= 1) return serial::topk_indices(p, k);
  const std::size_t chunk = (n + nchunk - 1) / nchunk;
  std::vector<std::vector<std::int32_t>> local(nchunk);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(nchunk); ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * chunk;
    const std::size_t hi = std::min(lo + chunk, n);
    std::vector<std::int32_t>& idx = local[c];
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), static_cast<std::int32_t>(lo));
    if (k < idx.size()) {
      std::nth_element(idx.begin(), idx.begin() + k, idx.end(),
                       detail::TopkLess{p.data()});
      idx.resize(k);
    }
  }
  std::vector<std::int32_t> cand;
  cand.reserve(nchunk * k);
  for (const auto& v : local) cand.insert(cand.end(), v.begin(), v.end());
  if (k < cand.size()) {
    std::nth_element(cand.begin(), cand.begin() + k, cand.end(),
                     detail::TopkLess{p.data()});
    cand.resize(k);
  }
  std::sort(cand.begin(), cand.end());
  return cand;
}

inline void axpb(std::span<const double> x, double a, double b,
                 std::span<double> out) {
  if (x.size() < kParThreshold) {
    serial::axpb(x, a, b, out);
    return;
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = a * x[i] + b;
}

inline void axpy(std::span<const double> x, double a, std::span<double> y) {
  if (x.size() < kParThreshold) {
    serial::axpy(x, a, y);
    return;
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double max(std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return detail::max_block(x.data(), n);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    partial.data[b] = detail::max_block(x.data() + lo, std::min(kBlock, n - lo));
  }
  return detail::max_block(partial.data, nb);
}

inline void softmax_inplace(std::span<double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) {
    serial::softmax_inplace(x);
    return;
  }
  const double shift = max(x);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    partial.data[b] =
        detail::expsum_block(x.data() + lo, std::min(kBlock, n - lo), shift);
  }
  const double inv = 1.0 / detail::sum_block(partial.data, nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    x[i] *= inv;
  }
}

inline double logsumexp(std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t nb = (n + kBlock - 1) / kBlock;
  if (nb <= 1) return serial::logsumexp(x);
  const double shift = max(x);
  detail::PartialBuf partial(nb);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    const std::size_t len = std::min(kBlock, n - lo);
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += std::exp(x[lo + i] - shift);
    partial.data[b] = s;
  }
  return shift + std::log(detail::sum_block(partial.data, nb));
}

inline void matmul(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n < kParThreshold) {
    serial::matmul(a, b, c, m, k, n, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void matmul_at_b(const double* a, const double* b, double* c,
                        std::size_t k, std::size_t m, std::size_t n,
                        bool accumulate) {
  if (m * k * n < kParThreshold) {
    serial::matmul_at_b(a, b, c, k, m, n, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[l * m + static_cast<std::size_t>(i)];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void matmul_a_bt(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t n, std::size_t k,
                        bool accumulate) {
  if (m * k * n < kParThreshold) {
    serial::matmul_a_bt(a, b, c, m, n, k, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (std::size_t j = 0; j < k; ++j) {
      double s = accumulate ? crow[j] : 0.0;
      const double* brow = b + j * n;
      for (std::size_t l = 0; l < n; ++l) s += arow[l] * brow[l];
      crow[j] = s;
    }
  }
}

inline void softmax_rows(double* x, std::size_t rows, std::size_t n) {
  if (rows * n < kParThreshold) {
    serial::softmax_rows(x, rows, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    double* row = x + static_cast<std::size_t>(r) * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
}

}  // namespace par
}  // namespace lmrt::kernels
