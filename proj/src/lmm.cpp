#include "lmrt/lmm.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <tuple>

#include "lmrt/common.hpp"
#include "lmrt/csv.hpp"
#include "lmrt/stats.hpp"

namespace lmrt {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;
constexpr double kPhiClamp = 15.0;  // exp(+-15) bounds the relative sd scale

void factor_keys(const PredictorTable& table, const std::string& factor,
                 std::vector<std::size_t>& level_of_row,
                 std::size_t& n_levels) {
  std::vector<std::string> keys(table.rows());
  if (factor == "subject") {
    for (std::size_t i = 0; i < table.rows(); ++i) keys[i] = table.subject[i];
  } else if (factor == "word") {
    for (std::size_t i = 0; i < table.rows(); ++i) {
      keys[i] = table.story[i] + "\x1f" + std::to_string(table.word_index[i]);
    }
  } else {
    throw UsageError("unknown grouping factor '" + factor +
                     "' (expected subject or word)");
  }
  std::map<std::string, std::size_t> index;
  level_of_row.resize(table.rows());
  for (std::size_t i = 0; i < table.rows(); ++i) {
    auto [it, inserted] = index.try_emplace(keys[i], index.size());
    level_of_row[i] = it->second;
  }
  n_levels = index.size();
}

}  // namespace

DesignMatrices build_design(const PredictorTable& table, const LmmSpec& spec) {
  if (spec.response != "rt") {
    throw UsageError("response column '" + spec.response +
                     "' not present (only rt is)");
  }
  if (table.rows() == 0) throw InputError("empty predictor table");

  DesignMatrices d;
  const std::size_t n = table.rows();
  const std::size_t p = spec.fixed.size() + 1;
  d.x.resize(n, p);
  d.y.resize(n);
  d.fixed_names.push_back("(Intercept)");
  for (std::size_t i = 0; i < n; ++i) {
    d.x(i, 0) = 1.0;
    d.y(i) = table.rt[i];
  }
  for (std::size_t j = 0; j < spec.fixed.size(); ++j) {
    const auto& col = table.z[table.column(spec.fixed[j])];
    for (std::size_t i = 0; i < n; ++i) d.x(i, j + 1) = col[i];
    d.fixed_names.push_back(spec.fixed[j]);
  }

  // Group random terms by factor, intercept first, slopes in spec order.
  std::vector<std::string> factor_order;
  std::map<std::string, std::vector<std::string>> terms_by_factor;
  auto add_term = [&](const std::string& factor, const std::string& term) {
    auto [it, inserted] = terms_by_factor.try_emplace(factor);
    if (inserted) factor_order.push_back(factor);
    if (std::find(it->second.begin(), it->second.end(), term) !=
        it->second.end()) {
      throw UsageError("duplicate random term " + term + " for factor " + factor);
    }
    it->second.push_back(term);
  };
  for (const auto& f : spec.random_intercepts) add_term(f, "(Intercept)");
  for (const auto& [f, pred] : spec.random_slopes) {
    if (std::find(spec.fixed.begin(), spec.fixed.end(), pred) ==
        spec.fixed.end()) {
      throw UsageError("random slope predictor '" + pred +
                       "' is not a fixed effect");
    }
    add_term(f, pred);
  }

  std::size_t offset = 0;
  for (const auto& factor : factor_order) {
    FactorBlock block;
    block.factor = factor;
    block.terms = terms_by_factor[factor];
    block.col_offset = offset;

    std::vector<std::size_t> level_of_row;
    std::size_t n_levels = 0;
    factor_keys(table, factor, level_of_row, n_levels);
    block.n_levels = n_levels;

    std::vector<double> term_values(n * block.n_terms());
    for (std::size_t t = 0; t < block.n_terms(); ++t) {
      if (block.terms[t] == "(Intercept)") {
        for (std::size_t i = 0; i < n; ++i) {
          term_values[i * block.n_terms() + t] = 1.0;
        }
      } else {
        const auto& col = table.z[table.column(block.terms[t])];
        for (std::size_t i = 0; i < n; ++i) {
          term_values[i * block.n_terms() + t] = col[i];
        }
      }
    }
    d.obs_level.push_back(std::move(level_of_row));
    d.obs_terms.push_back(std::move(term_values));
    offset += block.n_cols();
    d.blocks.push_back(std::move(block));
  }
  d.q = offset;
  return d;
}

Eigen::SparseMatrix<double> DesignMatrices::z_matrix() const {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t f = 0; f < blocks.size(); ++f) {
    const auto& b = blocks[f];
    const std::size_t k = b.n_terms();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = b.col_offset + obs_level[f][i] * k;
      for (std::size_t t = 0; t < k; ++t) {
        const double v = obs_terms[f][i * k + t];
        if (v != 0.0) {
          trips.emplace_back(static_cast<int>(i), static_cast<int>(base + t), v);
        }
      }
    }
  }
  Eigen::SparseMatrix<double> z(static_cast<int>(n), static_cast<int>(q));
  z.setFromTriplets(trips.begin(), trips.end());
  return z;
}

namespace {

// Per-factor relative-covariance factor (lower triangular, level-invariant).
struct ThetaLayout {
  // Per factor: number of terms k; diagonal structure uses k parameters,
  // full uses k(k+1)/2 laid out column-major over the lower triangle.
  std::vector<std::size_t> k_per_factor;
  CovarianceStructure structure = CovarianceStructure::kDiagonal;

  std::size_t n_params() const {
    std::size_t n = 0;
    for (std::size_t k : k_per_factor) {
      n += structure == CovarianceStructure::kDiagonal ? k : k * (k + 1) / 2;
    }
    return n;
  }

  // Natural-scale parameters: exp of the diagonal entries, off-diagonals
  // unchanged, in the same layout.
  std::vector<double> to_natural(const Eigen::VectorXd& phi) const {
    std::vector<double> out;
    std::size_t at = 0;
    for (std::size_t k : k_per_factor) {
      if (structure == CovarianceStructure::kDiagonal) {
        for (std::size_t j = 0; j < k; ++j) {
          out.push_back(std::exp(
              std::clamp(phi[static_cast<int>(at++)], -kPhiClamp, kPhiClamp)));
        }
      } else {
        for (std::size_t col = 0; col < k; ++col) {
          for (std::size_t row = col; row < k; ++row) {
            const double v = phi[static_cast<int>(at++)];
            out.push_back(row == col
                              ? std::exp(std::clamp(v, -kPhiClamp, kPhiClamp))
                              : v);
          }
        }
      }
    }
    return out;
  }

  // Expands natural-scale parameters into per-factor dense lower blocks.
  std::vector<Eigen::MatrixXd> expand_natural(
      std::span<const double> theta) const {
    if (theta.size() != n_params()) {
      throw UsageError("theta has wrong length for this random structure");
    }
    std::vector<Eigen::MatrixXd> blocks;
    std::size_t at = 0;
    for (std::size_t k : k_per_factor) {
      Eigen::MatrixXd L = Eigen::MatrixXd::Zero(static_cast<int>(k),
                                                static_cast<int>(k));
      if (structure == CovarianceStructure::kDiagonal) {
        for (std::size_t j = 0; j < k; ++j) {
          L(static_cast<int>(j), static_cast<int>(j)) = theta[at++];
        }
      } else {
        for (std::size_t col = 0; col < k; ++col) {
          for (std::size_t row = col; row < k; ++row) {
            L(static_cast<int>(row), static_cast<int>(col)) = theta[at++];
          }
        }
      }
      blocks.push_back(std::move(L));
    }
    return blocks;
  }

  // Expands the unconstrained vector phi into per-factor dense lower blocks.
  // Diagonal entries go through exp(); off-diagonals are unconstrained.
  std::vector<Eigen::MatrixXd> expand(const Eigen::VectorXd& phi) const {
    std::vector<Eigen::MatrixXd> blocks;
    std::size_t at = 0;
    for (std::size_t k : k_per_factor) {
      Eigen::MatrixXd L = Eigen::MatrixXd::Zero(static_cast<int>(k),
                                                static_cast<int>(k));
      if (structure == CovarianceStructure::kDiagonal) {
        for (std::size_t j = 0; j < k; ++j) {
          L(static_cast<int>(j), static_cast<int>(j)) =
              std::exp(std::clamp(phi[static_cast<int>(at++)], -kPhiClamp,
                                  kPhiClamp));
        }
      } else {
        for (std::size_t col = 0; col < k; ++col) {
          for (std::size_t row = col; row < k; ++row) {
            const double v = phi[static_cast<int>(at++)];
            L(static_cast<int>(row), static_cast<int>(col)) =
                row == col ? std::exp(std::clamp(v, -kPhiClamp, kPhiClamp))
                           : std::clamp(v, -1e3, 1e3);
          }
        }
      }
      blocks.push_back(std::move(L));
    }
    return blocks;
  }
};

// One profiled-deviance evaluation; also returns the solution pieces
// needed after optimization.
struct DevianceResult {
  double deviance = std::numeric_limits<double>::infinity();
  double pwrss = 0.0;
  double ldL2 = 0.0;    // log det (Lambda' Z' Z Lambda + I)
  double ldRX2 = 0.0;   // log det S
  Eigen::VectorXd beta;
  Eigen::VectorXd u;
  Eigen::MatrixXd s_inverse;  // (R_X' R_X)^-1 for vcov(beta)
};

class ProfiledDeviance {
 public:
  ProfiledDeviance(const DesignMatrices& d, FitCriterion criterion)
      : d_(d), criterion_(criterion) {
    n_ = static_cast<std::size_t>(d_.x.rows());
    p_ = static_cast<std::size_t>(d_.x.cols());
    xtx_ = d_.x.transpose() * d_.x;
    xty_ = d_.x.transpose() * d_.y;
    yty_ = d_.y.squaredNorm();
  }

  DevianceResult evaluate(const std::vector<Eigen::MatrixXd>& lambda) const {
    DevianceResult res;
    const std::size_t q = d_.q;

    // Row i of Z Lambda, factor by factor: (x_i^T Theta_f) at the level's
    // columns. Accumulate M = (Z Lambda)'(Z Lambda) + I and the projections.
    std::vector<Eigen::Triplet<double>> trips;
    Eigen::MatrixXd zltx = Eigen::MatrixXd::Zero(static_cast<int>(q),
                                                 static_cast<int>(p_));
    Eigen::VectorXd zlty = Eigen::VectorXd::Zero(static_cast<int>(q));

    std::vector<std::size_t> col_idx;
    std::vector<double> col_val;
    const std::size_t nf = d_.blocks.size();
    std::vector<Eigen::VectorXd> scratch(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      scratch[f].resize(static_cast<int>(d_.blocks[f].n_terms()));
    }
    trips.reserve(n_ * 16);
    for (std::size_t i = 0; i < n_; ++i) {
      col_idx.clear();
      col_val.clear();
      for (std::size_t f = 0; f < nf; ++f) {
        const auto& b = d_.blocks[f];
        const std::size_t k = b.n_terms();
        Eigen::Map<const Eigen::VectorXd> xi(d_.obs_terms[f].data() + i * k,
                                             static_cast<int>(k));
        scratch[f].noalias() = lambda[f].transpose() * xi;
        const std::size_t base = b.col_offset + d_.obs_level[f][i] * k;
        for (std::size_t t = 0; t < k; ++t) {
          const double v = scratch[f][static_cast<int>(t)];
          if (v != 0.0) {
            col_idx.push_back(base + t);
            col_val.push_back(v);
          }
        }
      }
      for (std::size_t a = 0; a < col_idx.size(); ++a) {
        zlty[static_cast<int>(col_idx[a])] += col_val[a] * d_.y(static_cast<int>(i));
        for (std::size_t j = 0; j < p_; ++j) {
          zltx(static_cast<int>(col_idx[a]), static_cast<int>(j)) +=
              col_val[a] * d_.x(static_cast<int>(i), static_cast<int>(j));
        }
        for (std::size_t b2 = 0; b2 < col_idx.size(); ++b2) {
          trips.emplace_back(static_cast<int>(col_idx[a]),
                             static_cast<int>(col_idx[b2]),
                             col_val[a] * col_val[b2]);
        }
      }
    }
    for (std::size_t j = 0; j < q; ++j) {
      trips.emplace_back(static_cast<int>(j), static_cast<int>(j), 1.0);
    }
    Eigen::SparseMatrix<double> m(static_cast<int>(q), static_cast<int>(q));
    m.setFromTriplets(trips.begin(), trips.end());

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(m);
    if (ldlt.info() != Eigen::Success) return res;  // infinite deviance
    res.ldL2 = 0.0;
    const auto& dv = ldlt.vectorD();
    for (int j = 0; j < dv.size(); ++j) {
      if (!(dv[j] > 0.0)) return res;
      res.ldL2 += std::log(dv[j]);
    }

    const Eigen::MatrixXd a_mat = ldlt.solve(zltx);      // q x p
    const Eigen::VectorXd a_vec = ldlt.solve(zlty);      // q
    Eigen::MatrixXd s = xtx_ - zltx.transpose() * a_mat;  // p x p
    const Eigen::VectorXd s_rhs = xty_ - zltx.transpose() * a_vec;
    Eigen::LLT<Eigen::MatrixXd> s_llt(s);
    if (s_llt.info() != Eigen::Success) return res;
    res.beta = s_llt.solve(s_rhs);
    res.u = a_vec - a_mat * res.beta;
    res.ldRX2 = 0.0;
    for (int j = 0; j < s_llt.matrixLLT().rows(); ++j) {
      res.ldRX2 += 2.0 * std::log(s_llt.matrixLLT()(j, j));
    }
    res.s_inverse =
        s_llt.solve(Eigen::MatrixXd::Identity(static_cast<int>(p_),
                                              static_cast<int>(p_)));

    // Explicit penalized residual sum of squares.
    double rss = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      double fit = 0.0;
      for (std::size_t j = 0; j < p_; ++j) {
        fit += d_.x(static_cast<int>(i), static_cast<int>(j)) *
               res.beta[static_cast<int>(j)];
      }
      for (std::size_t f = 0; f < nf; ++f) {
        const auto& b = d_.blocks[f];
        const std::size_t k = b.n_terms();
        Eigen::Map<const Eigen::VectorXd> xi(d_.obs_terms[f].data() + i * k,
                                             static_cast<int>(k));
        scratch[f].noalias() = lambda[f].transpose() * xi;
        const std::size_t base = b.col_offset + d_.obs_level[f][i] * k;
        for (std::size_t t = 0; t < k; ++t) {
          fit += scratch[f][static_cast<int>(t)] *
                 res.u[static_cast<int>(base + t)];
        }
      }
      const double r = d_.y(static_cast<int>(i)) - fit;
      rss += r * r;
    }
    res.pwrss = rss + res.u.squaredNorm();

    if (criterion_ == FitCriterion::kML) {
      res.deviance =
          res.ldL2 + static_cast<double>(n_) *
                         (1.0 + std::log(kTwoPi * res.pwrss /
                                         static_cast<double>(n_)));
    } else {
      const double nmp = static_cast<double>(n_ - p_);
      res.deviance = res.ldL2 + res.ldRX2 +
                     nmp * (1.0 + std::log(kTwoPi * res.pwrss / nmp));
    }
    return res;
  }

  std::size_t n() const { return n_; }
  std::size_t p() const { return p_; }
  const Eigen::MatrixXd& xtx() const { return xtx_; }
  const Eigen::VectorXd& xty() const { return xty_; }

 private:
  const DesignMatrices& d_;
  FitCriterion criterion_;
  std::size_t n_ = 0, p_ = 0;
  Eigen::MatrixXd xtx_;
  Eigen::VectorXd xty_;
  double yty_ = 0.0;
};

// Nelder-Mead on the unconstrained scale; deterministic for fixed inputs.
struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  std::size_t iterations = 0;
};

template <typename Fn>
NelderMeadResult nelder_mead(Fn&& fn, const Eigen::VectorXd& x0, double step,
                             double tol, std::size_t max_iter) {
  const int dim = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> pts;
  std::vector<double> vals;
  pts.push_back(x0);
  for (int j = 0; j < dim; ++j) {
    Eigen::VectorXd v = x0;
    v[j] += step;
    pts.push_back(v);
  }
  for (const auto& v : pts) vals.push_back(fn(v));

  NelderMeadResult out;
  std::vector<std::size_t> order(pts.size());
  for (std::size_t it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    const std::size_t best = order.front(), worst = order.back();
    const std::size_t second_worst = order[order.size() - 2];
    if (std::abs(vals[worst] - vals[best]) < tol) {
      out.converged = true;
      break;
    }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(dim);
    for (std::size_t i : order) {
      if (i != worst) centroid += pts[i];
    }
    centroid /= static_cast<double>(pts.size() - 1);

    const Eigen::VectorXd reflect = centroid + (centroid - pts[worst]);
    const double f_reflect = fn(reflect);
    if (f_reflect < vals[best]) {
      const Eigen::VectorXd expand = centroid + 2.0 * (centroid - pts[worst]);
      const double f_expand = fn(expand);
      if (f_expand < f_reflect) {
        pts[worst] = expand;
        vals[worst] = f_expand;
      } else {
        pts[worst] = reflect;
        vals[worst] = f_reflect;
      }
    } else if (f_reflect < vals[second_worst]) {
      pts[worst] = reflect;
      vals[worst] = f_reflect;
    } else {
      const Eigen::VectorXd contract =
          centroid + 0.5 * (pts[worst] - centroid);
      const double f_contract = fn(contract);
      if (f_contract < vals[worst]) {
        pts[worst] = contract;
        vals[worst] = f_contract;
      } else {
        for (std::size_t i : order) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          vals[i] = fn(pts[i]);
        }
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (vals[i] < vals[best]) best = i;
  }
  out.x = pts[best];
  out.value = vals[best];
  return out;
}

LmmFit finalize_ols(const PredictorTable& table, const LmmSpec& spec,
                    const DesignMatrices& d) {
  LmmFit fit;
  fit.spec = spec;
  fit.n_rows = static_cast<std::size_t>(d.x.rows());
  fit.n_fixed = static_cast<std::size_t>(d.x.cols());
  fit.n_theta = 0;
  const std::size_t n = fit.n_rows, p = fit.n_fixed;
  if (n < p) throw InputError("fit: fewer rows than parameters");

  Eigen::MatrixXd xtx = d.x.transpose() * d.x;
  Eigen::LLT<Eigen::MatrixXd> llt(xtx);
  if (llt.info() != Eigen::Success) {
    throw NumericError("fit: singular fixed-effects matrix");
  }
  Eigen::VectorXd beta = llt.solve(d.x.transpose() * d.y);
  const double rss = (d.y - d.x * beta).squaredNorm();
  const double denom = spec.criterion == FitCriterion::kML
                           ? static_cast<double>(n)
                           : static_cast<double>(n - p);
  fit.sigma2 = rss / denom;
  Eigen::MatrixXd cov =
      llt.solve(Eigen::MatrixXd::Identity(static_cast<int>(p),
                                          static_cast<int>(p))) *
      fit.sigma2;
  for (std::size_t j = 0; j < p; ++j) {
    FixedEffect e;
    e.name = d.fixed_names[j];
    e.beta = beta[static_cast<int>(j)];
    e.se = std::sqrt(cov(static_cast<int>(j), static_cast<int>(j)));
    e.t = e.beta / e.se;
    fit.fixed.push_back(e);
  }
  if (spec.criterion == FitCriterion::kML) {
    fit.deviance = static_cast<double>(n) *
                   (1.0 + std::log(kTwoPi * rss / static_cast<double>(n)));
  } else {
    const double nmp = static_cast<double>(n - p);
    double ldRX2 = 0.0;
    for (int j = 0; j < llt.matrixLLT().rows(); ++j) {
      ldRX2 += 2.0 * std::log(llt.matrixLLT()(j, j));
    }
    fit.deviance = ldRX2 + nmp * (1.0 + std::log(kTwoPi * rss / nmp));
  }
  fit.loglik = -0.5 * fit.deviance;
  fit.varcomp.push_back({"Residual", fit.sigma2});
  fit.converged = true;
  fit.iterations = 0;
  (void)table;
  return fit;
}

}  // namespace

const FixedEffect& LmmFit::effect(const std::string& name) const {
  for (const auto& e : fixed) {
    if (e.name == name) return e;
  }
  throw UsageError("fit has no fixed effect '" + name + "'");
}

LmmFit fit_lmm(const PredictorTable& table, const LmmSpec& spec) {
  DesignMatrices d = build_design(table, spec);
  if (!spec.has_random_effects()) return finalize_ols(table, spec, d);

  const std::size_t n = static_cast<std::size_t>(d.x.rows());
  const std::size_t p = static_cast<std::size_t>(d.x.cols());
  ThetaLayout layout;
  layout.structure = spec.covariance;
  for (const auto& b : d.blocks) layout.k_per_factor.push_back(b.n_terms());
  const std::size_t ntheta = layout.n_params();
  if (n < p + ntheta + 1) throw InputError("fit: fewer rows than parameters");

  ProfiledDeviance profiled(d, spec.criterion);
  auto objective = [&](const Eigen::VectorXd& phi) {
    return profiled.evaluate(layout.expand(phi)).deviance;
  };

  // Quadratic coordinate polish: tightens the Nelder-Mead optimum to near
  // machine precision (the deviance is smooth in phi), walking downhill in
  // bounded steps when the local quadratic model is not convex.
  auto polish = [&](Eigen::VectorXd x, double fx) {
    const double h = 1e-3;
    for (int sweep = 0; sweep < 40; ++sweep) {
      double gained = 0.0;
      for (int j = 0; j < x.size(); ++j) {
        Eigen::VectorXd xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const double fp = objective(xp);
        const double fm = objective(xm);
        const double curv = fp - 2.0 * fx + fm;
        double step;
        if (curv > 0.0) {
          step = std::clamp(0.5 * h * (fm - fp) / curv, -1.0, 1.0);
        } else {
          step = fp < fm ? 2.0 * h : -2.0 * h;
        }
        Eigen::VectorXd cand = x;
        cand[j] += step;
        const double fc = objective(cand);
        double best = fx;
        if (fp < best) {
          best = fp;
          x = xp;
        }
        if (fm < best) {
          best = fm;
          x = xm;
        }
        if (fc < best) {
          best = fc;
          x = cand;
        }
        gained += fx - best;
        fx = best;
      }
      if (gained < 1e-13) break;
    }
    return std::make_pair(x, fx);
  };

  Eigen::VectorXd phi0 = Eigen::VectorXd::Zero(static_cast<int>(ntheta));
  NelderMeadResult nm;
  std::size_t total_iterations = 0;
  bool converged = false;
  for (int attempt = 0; attempt < 4; ++attempt) {
    nm = nelder_mead(objective, phi0, attempt == 0 ? 0.5 : 0.1, spec.tolerance,
                     spec.max_iterations);
    total_iterations += nm.iterations;
    converged = nm.converged;
    std::tie(nm.x, nm.value) = polish(nm.x, nm.value);

    // Local-minimum check: +-1% on each variance parameter (natural scale).
    bool improved = false;
    Eigen::VectorXd probe = nm.x;
    for (int j = 0; j < probe.size() && !improved; ++j) {
      for (double delta : {std::log(1.01), std::log(0.99)}) {
        Eigen::VectorXd cand = nm.x;
        cand[j] += delta;  // multiplies the component by 1.01 / 0.99
        if (objective(cand) < nm.value - 1e-6) {
          probe = cand;
          improved = true;
          break;
        }
      }
    }
    if (!improved) break;
    phi0 = probe;
  }

  auto lambda = layout.expand(nm.x);
  DevianceResult res = profiled.evaluate(lambda);

  LmmFit fit;
  fit.spec = spec;
  fit.n_rows = n;
  fit.n_fixed = p;
  fit.n_theta = ntheta;
  fit.theta = layout.to_natural(nm.x);
  fit.converged = converged && std::isfinite(res.deviance);
  fit.iterations = total_iterations;
  fit.deviance = res.deviance;
  fit.loglik = -0.5 * res.deviance;
  const double denom = spec.criterion == FitCriterion::kML
                           ? static_cast<double>(n)
                           : static_cast<double>(n - p);
  fit.sigma2 = res.pwrss / denom;

  for (std::size_t j = 0; j < p; ++j) {
    FixedEffect e;
    e.name = d.fixed_names[j];
    e.beta = res.beta[static_cast<int>(j)];
    e.se = std::sqrt(fit.sigma2 *
                     res.s_inverse(static_cast<int>(j), static_cast<int>(j)));
    e.t = e.beta / e.se;
    fit.fixed.push_back(e);
  }

  for (std::size_t f = 0; f < d.blocks.size(); ++f) {
    const auto& b = d.blocks[f];
    const Eigen::MatrixXd cov = fit.sigma2 * lambda[f] * lambda[f].transpose();
    for (std::size_t t = 0; t < b.n_terms(); ++t) {
      VarianceComponent vc;
      vc.name = b.factor + " (" + b.terms[t] + ")";
      vc.variance = cov(static_cast<int>(t), static_cast<int>(t));
      fit.varcomp.push_back(vc);
      if (vc.variance < 1e-10 * fit.sigma2) {
        fit.singular_components.push_back(vc.name);
      }
    }
  }
  fit.varcomp.push_back({"Residual", fit.sigma2});
  return fit;
}

double profiled_deviance(const PredictorTable& table, const LmmSpec& spec,
                         std::span<const double> theta) {
  DesignMatrices d = build_design(table, spec);
  if (!spec.has_random_effects()) {
    if (!theta.empty()) throw UsageError("theta must be empty without random terms");
    LmmFit ols = finalize_ols(table, spec, d);
    return ols.deviance;
  }
  ThetaLayout layout;
  layout.structure = spec.covariance;
  for (const auto& b : d.blocks) layout.k_per_factor.push_back(b.n_terms());
  ProfiledDeviance profiled(d, spec.criterion);
  return profiled.evaluate(layout.expand_natural(theta)).deviance;
}

namespace {

bool subset(const std::vector<std::string>& small,
            const std::vector<std::string>& big) {
  for (const auto& s : small) {
    if (std::find(big.begin(), big.end(), s) == big.end()) return false;
  }
  return true;
}

std::vector<std::string> random_term_names(const LmmSpec& spec) {
  std::vector<std::string> out;
  for (const auto& f : spec.random_intercepts) out.push_back(f + "|(Intercept)");
  for (const auto& [f, p] : spec.random_slopes) out.push_back(f + "|" + p);
  return out;
}

}  // namespace

LrtResult lrt(const LmmFit& full, const LmmFit& reduced) {
  if (full.n_rows != reduced.n_rows) {
    throw UsageError("lrt: fits use different data (row counts differ)");
  }
  if (full.spec.criterion != reduced.spec.criterion) {
    throw UsageError("lrt: fits use different criteria");
  }
  const bool fixed_differ = full.spec.fixed != reduced.spec.fixed;
  if (fixed_differ && full.spec.criterion == FitCriterion::kREML) {
    throw UsageError(
        "lrt: REML log-likelihoods are not comparable across fixed-effect "
        "structures; refit with ML");
  }
  if (!subset(reduced.spec.fixed, full.spec.fixed)) {
    throw UsageError("lrt: reduced fixed effects are not nested in the full model");
  }
  if (!subset(random_term_names(reduced.spec), random_term_names(full.spec))) {
    throw UsageError("lrt: reduced random terms are not nested in the full model");
  }
  if (full.parameter_count() < reduced.parameter_count()) {
    throw UsageError("lrt: full model has fewer parameters than reduced");
  }

  LrtResult r;
  r.df = full.parameter_count() - reduced.parameter_count();
  r.chi2 = 2.0 * (full.loglik - reduced.loglik);
  if (r.chi2 < 0.0) r.chi2 = 0.0;  // numerical slack, clamped
  if (r.df == 0) {
    r.p = r.chi2 <= 1e-6 ? 1.0 : 0.0;
  } else {
    r.p = stats::chi_square_upper_tail(r.chi2, static_cast<int>(r.df));
  }
  return r;
}

void write_fit_report(std::ostream& out, const LmmFit& fit) {
  out << "criterion: "
      << (fit.spec.criterion == FitCriterion::kML ? "ML" : "REML") << "\n";
  out << "loglik: " << csv::format_double(fit.loglik)
      << "  deviance: " << csv::format_double(fit.deviance)
      << "  converged: " << (fit.converged ? "yes" : "no")
      << "  iterations: " << fit.iterations << "\n";
  out << "rows: " << fit.n_rows << "  parameters: " << fit.parameter_count()
      << "\n";
  if (!fit.singular_components.empty()) {
    out << "singular components:";
    for (const auto& s : fit.singular_components) out << " " << s;
    out << "\n";
  }
  out << "\nterm,beta,se,t\n";
  for (const auto& e : fit.fixed) {
    out << csv::escape_field(e.name) << "," << csv::format_double(e.beta) << ","
        << csv::format_double(e.se) << "," << csv::format_double(e.t) << "\n";
  }
  out << "\nvariance component,variance\n";
  for (const auto& v : fit.varcomp) {
    out << csv::escape_field(v.name) << "," << csv::format_double(v.variance)
        << "\n";
  }
}

void write_lrt_report(std::ostream& out, const std::string& label,
                      const LrtResult& r) {
  out << label << ": chi2(" << r.df << ") = " << csv::format_double(r.chi2)
      << ", p = " << csv::format_double(r.p) << "\n";
}

}  // namespace lmrt
