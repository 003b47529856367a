#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/qr_solver.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

/// Coefficients whose standardized magnitude is at or below this count as zero.
inline constexpr double kShrinkZero = 1e-6;

struct ShrinkagePoint {
  double lambda = 0.0;
  double loss = 0.0;  // check loss without the penalty
  double sic = 0.0;
  std::size_t df = 0;
  double xi1_l1norm = 0.0;
  bool failed = false;
};

struct ShrinkageResult {
  double lambda_star = 0.0;
  double xi1_l1norm = 0.0;
  std::size_t df = 0;
  double lambda_max = 0.0;
  std::vector<ShrinkagePoint> sic_path;  // grid order
  Eigen::VectorXd coefficients;          // (xi1, xi2-block, beta) at lambda_star
};

/// Stacked (Pi1, Pi2, Z) design with the penalized xi1 block first.
struct ShrinkageDesign {
  Eigen::MatrixXd A;
  Eigen::Index n_penalized = 0;
  Eigen::VectorXd column_scale;  // root mean square of each column
};

inline ShrinkageDesign shrinkage_design(const LongitudinalDataset& ds, const BasisSet& specs,
                                        const std::vector<std::size_t>& tested) {
  const auto cd = split_design_for_constancy(ds, specs, tested);
  ShrinkageDesign sd;
  sd.A.resize(cd.Pi1.rows(), cd.Pi1.cols() + cd.Pi2.cols() + ds.Z().cols());
  sd.A << cd.Pi1, cd.Pi2, ds.Z();
  sd.n_penalized = cd.Pi1.cols();
  const double N = static_cast<double>(sd.A.rows());
  sd.column_scale = (sd.A.colwise().squaredNorm().array() / N).sqrt().transpose();
  return sd;
}

/// ||xi1||_1 over the penalized block, counting standardized magnitudes at
/// or below the zero threshold as zero.
inline double xi1_l1norm(const ShrinkageDesign& sd, const Eigen::VectorXd& coef) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < sd.n_penalized; ++j)
    if (std::abs(coef(j)) * sd.column_scale(j) > kShrinkZero) s += std::abs(coef(j));
  return s;
}

namespace detail {

inline ShrinkagePoint shrink_at(const ShrinkageDesign& sd, const Eigen::VectorXd& y, double tau, double lambda,
                                const SolverOptions& opt, Eigen::VectorXd* coef_out = nullptr) {
  QrProblem pb;
  pb.design = sd.A;
  pb.response = y;
  pb.tau = tau;
  L1Penalty pen;
  for (Eigen::Index j = 0; j < sd.n_penalized; ++j) pen.indices.push_back(j);
  pen.lambda = lambda;
  pb.penalty = pen;
  const auto sol = solve_l1(pb, opt);
  ShrinkagePoint pt;
  pt.lambda = lambda;
  pt.loss = check_loss(sol.residuals, tau);
  for (Eigen::Index j = 0; j < sol.coefficients.size(); ++j)
    if (std::abs(sol.coefficients(j)) * sd.column_scale(j) > kShrinkZero) ++pt.df;
  pt.xi1_l1norm = xi1_l1norm(sd, sol.coefficients);
  const double N = static_cast<double>(y.size());
  pt.sic = std::log(pt.loss) + std::log(N) / (2.0 * N) * static_cast<double>(pt.df);
  if (coef_out) *coef_out = sol.coefficients;
  return pt;
}

}  // namespace detail

/// Smallest lambda of a doubling sequence that shrinks all of xi1 to zero.
/// The sequence ends at max(tau, 1-tau) * max_j ||a_j||_1, where zero is
/// optimal for any data.
inline double shrinkage_lambda_max(const ShrinkageDesign& sd, const Eigen::VectorXd& y, double tau,
                                   const SolverOptions& opt = {}) {
  double bound = 0.0;
  for (Eigen::Index j = 0; j < sd.n_penalized; ++j) bound = std::max(bound, sd.A.col(j).lpNorm<1>());
  bound *= std::max(tau, 1.0 - tau);
  if (bound == 0.0) return 0.0;
  double lambda = bound * std::ldexp(1.0, -30);
  while (lambda < bound) {
    if (detail::shrink_at(sd, y, tau, lambda, opt).xi1_l1norm == 0.0) return lambda;
    lambda *= 2.0;
  }
  return bound;
}

/// Zero followed by `points` log-spaced values over [1e-3 lambda_max, lambda_max].
inline std::vector<double> default_lambda_grid(double lambda_max, int points = 30) {
  std::vector<double> g{0.0};
  if (lambda_max <= 0.0) return g;
  const double lo = std::log(1e-3 * lambda_max), hi = std::log(lambda_max);
  for (int k = 0; k < points; ++k)
    g.push_back(std::exp(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1)));
  g.back() = lambda_max;
  return g;
}

/// L1 shrinkage of the non-constant spline directions of the tested
/// coefficients, tuned by SIC over the lambda grid (default grid if empty).
inline ShrinkageResult shrinkage_constancy(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                           const std::vector<std::size_t>& tested,
                                           std::vector<double> lambda_grid = {}, const FitOptions& opt = {}) {
  const auto sd = shrinkage_design(ds, specs, tested);
  const auto& y = ds.response();
  ShrinkageResult res;
  if (lambda_grid.empty()) {
    res.lambda_max = shrinkage_lambda_max(sd, y, tau, opt.solver);
    lambda_grid = default_lambda_grid(res.lambda_max);
  } else {
    for (double l : lambda_grid)
      if (!(l >= 0.0)) throw DomainError("shrinkage: lambda grid must be non-negative");
    res.lambda_max = *std::max_element(lambda_grid.begin(), lambda_grid.end());
  }

  std::optional<std::size_t> best;
  std::string last_error;
  std::vector<Eigen::VectorXd> coefs(lambda_grid.size());
  for (std::size_t k = 0; k < lambda_grid.size(); ++k) {
    ShrinkagePoint pt;
    try {
      pt = detail::shrink_at(sd, y, tau, lambda_grid[k], opt.solver, &coefs[k]);
    } catch (const Error& e) {
      pt.lambda = lambda_grid[k];
      pt.failed = true;
      last_error = e.what();
    }
    res.sic_path.push_back(pt);
    if (!pt.failed && (!best || pt.sic < res.sic_path[*best].sic)) best = k;
  }
  if (!best) throw SolverError("shrinkage: every lambda failed: " + last_error);
  const auto& b = res.sic_path[*best];
  res.lambda_star = b.lambda;
  res.xi1_l1norm = b.xi1_l1norm;
  res.df = b.df;
  res.coefficients = coefs[*best];
  return res;
}

inline ShrinkageResult shrinkage_constancy(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                                           const std::vector<std::size_t>& tested,
                                           std::vector<double> lambda_grid = {}, const FitOptions& opt = {}) {
  return shrinkage_constancy(ds, uniform_basis_set(spec, ds.p()), tau, tested, std::move(lambda_grid), opt);
}

}  // namespace plvcqr
