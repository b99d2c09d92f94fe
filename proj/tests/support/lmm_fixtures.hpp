#pragma once

// Synthetic predictor tables for mixed-model tests.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lmrt/corpus.hpp"
#include "lmrt/rng.hpp"

namespace lmrt::testsupport {

// A complete (subject x word) grid with word-level covariates. Covariates
// are drawn once per word, so the design is balanced across subjects.
// `raw` and `z` are set to the same values; fits read the z columns.
struct GridData {
  PredictorTable table;
  std::vector<double> covariate1;  // per word
  std::vector<double> covariate2;  // per word
};

inline GridData make_grid(
    std::size_t n_subjects, std::size_t n_words, std::uint64_t seed,
    const std::function<double(std::size_t subj, std::size_t word, double x1,
                               double x2, Rng& noise)>& rt_fn) {
  Rng rng(seed);
  GridData g;
  for (std::size_t w = 0; w < n_words; ++w) {
    g.covariate1.push_back(rng.normal());
    g.covariate2.push_back(rng.normal());
  }
  PredictorTable& t = g.table;
  t.predictor_names = {"x1", "x2"};
  t.raw.assign(2, {});
  for (std::size_t s = 0; s < n_subjects; ++s) {
    for (std::size_t w = 0; w < n_words; ++w) {
      t.subject.push_back("subj" + std::to_string(s));
      t.story.push_back("story");
      t.word_index.push_back(w);
      t.word.push_back("w" + std::to_string(w));
      t.rt.push_back(rt_fn(s, w, g.covariate1[w], g.covariate2[w], rng));
      t.raw[0].push_back(g.covariate1[w]);
      t.raw[1].push_back(g.covariate2[w]);
    }
  }
  t.z = t.raw;
  t.col_mean.assign(2, 0.0);
  t.col_sd.assign(2, 1.0);
  return g;
}

// Ordinary least squares oracle: X (row-major, with leading 1s added here),
// returns the coefficient vector.
inline std::vector<double> ols_oracle(const std::vector<std::vector<double>>& xcols,
                                      const std::vector<double>& y) {
  const std::size_t n = y.size();
  const std::size_t p = xcols.size() + 1;
  // Normal equations, solved by Gaussian elimination.
  std::vector<std::vector<double>> a(p, std::vector<double>(p + 1, 0.0));
  auto xv = [&](std::size_t i, std::size_t j) {
    return j == 0 ? 1.0 : xcols[j - 1][i];
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p; ++c) a[r][c] += xv(i, r) * xv(i, c);
      a[r][p] += xv(i, r) * y[i];
    }
  }
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < p; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    std::swap(a[col], a[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= p; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> beta(p);
  for (std::size_t r = 0; r < p; ++r) beta[r] = a[r][p] / a[r][r];
  return beta;
}

}  // namespace lmrt::testsupport
