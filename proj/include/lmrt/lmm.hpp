#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmrt/corpus.hpp"

namespace lmrt {

enum class FitCriterion { kML, kREML };
enum class CovarianceStructure { kDiagonal, kFull };

// Model specification against a PredictorTable. Fixed-effect names refer to
// z-scored predictor columns; the intercept is implicit and always first.
// Grouping factors are "subject" and "word".
struct LmmSpec {
  std::string response = "rt";
  std::vector<std::string> fixed;
  std::vector<std::string> random_intercepts;  // factor names
  std::vector<std::pair<std::string, std::string>> random_slopes;  // (factor, predictor)
  CovarianceStructure covariance = CovarianceStructure::kDiagonal;
  FitCriterion criterion = FitCriterion::kREML;
  std::size_t max_iterations = 500;
  double tolerance = 1e-8;

  bool has_random_effects() const {
    return !random_intercepts.empty() || !random_slopes.empty();
  }
};

// Grouped random-effects structure: per factor, columns are laid out
// level-major (all of level 0's terms, then level 1's, ...), which keeps the
// relative-covariance factor block diagonal per level.
struct FactorBlock {
  std::string factor;
  std::vector<std::string> terms;  // "(Intercept)" or predictor names
  std::size_t col_offset = 0;      // first column in Z
  std::size_t n_levels = 0;

  std::size_t n_terms() const { return terms.size(); }
  std::size_t n_cols() const { return n_terms() * n_levels; }
};

struct DesignMatrices {
  Eigen::MatrixXd x;                       // n x p, intercept first
  Eigen::VectorXd y;
  std::vector<std::string> fixed_names;    // "(Intercept)", then spec order
  std::vector<FactorBlock> blocks;
  // Per observation, per factor: level index and term values.
  std::vector<std::vector<std::size_t>> obs_level;   // [factor][row]
  std::vector<std::vector<double>> obs_terms;        // [factor][row * n_terms]
  std::size_t q = 0;                       // total random-effects columns

  Eigen::SparseMatrix<double> z_matrix() const;  // n x q, for inspection
};

DesignMatrices build_design(const PredictorTable& table, const LmmSpec& spec);

struct FixedEffect {
  std::string name;
  double beta = 0.0;
  double se = 0.0;
  double t = 0.0;
};

struct VarianceComponent {
  std::string name;  // "subject (Intercept)", "word (Intercept)", "Residual", ...
  double variance = 0.0;
};

struct LmmFit {
  LmmSpec spec;
  std::vector<FixedEffect> fixed;
  std::vector<VarianceComponent> varcomp;
  double sigma2 = 0.0;     // residual variance
  double loglik = 0.0;     // maximized log-likelihood under spec.criterion
  double deviance = 0.0;   // -2 loglik (profiled)
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<std::string> singular_components;  // variance < 1e-10 * sigma2
  std::size_t n_rows = 0;
  std::size_t n_fixed = 0;   // includes intercept
  std::size_t n_theta = 0;   // covariance parameters
  // Optimized relative-covariance parameters on the natural scale, factor
  // by factor (diagonal entries, or lower-triangle column-major for full).
  std::vector<double> theta;

  // Fixed + covariance parameters + residual variance.
  std::size_t parameter_count() const { return n_fixed + n_theta + 1; }
  const FixedEffect& effect(const std::string& name) const;
};

// Maximizes the profiled (RE)ML deviance over the relative-covariance
// parameters (log/Cholesky scale, Nelder-Mead with a local-minimum polish),
// then solves the mixed-model equations for the fixed effects.
LmmFit fit_lmm(const PredictorTable& table, const LmmSpec& spec);

// Profiled deviance at a given natural-scale theta (layout as LmmFit::theta).
// Diagnostic surface: lets callers verify fit_lmm ended at a local minimum.
double profiled_deviance(const PredictorTable& table, const LmmSpec& spec,
                         std::span<const double> theta);

struct LrtResult {
  double chi2 = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};

// Likelihood-ratio test of nested fits. Fits differing in fixed effects
// must both use ML.
LrtResult lrt(const LmmFit& full, const LmmFit& reduced);

void write_fit_report(std::ostream& out, const LmmFit& fit);
void write_lrt_report(std::ostream& out, const std::string& label,
                      const LrtResult& r);

}  // namespace lmrt
