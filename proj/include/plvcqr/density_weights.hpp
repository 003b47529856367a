#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <optional>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/qr_solver.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

struct DensityWeights {
  double eps = 0.0;
  Eigen::VectorXd f_hat;  // dataset order
  std::size_t floor_count = 0;
};

/// Entries of f_hat never exceed this value.
inline constexpr double kDensityCap = 1e3;

/// Hall-Sheather bandwidth with n the subject count, clamped so that
/// tau +- eps stays inside (0,1).
inline double hall_sheather_bandwidth(double tau, std::size_t n) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("hall_sheather_bandwidth: tau outside (0,1)");
  if (n < 1) throw ArgumentError("hall_sheather_bandwidth: n must be >= 1");
  const boost::math::normal_distribution<double> std_normal;
  const double z = boost::math::quantile(std_normal, tau);
  const double phi = boost::math::pdf(std_normal, z);
  const double ratio = 1.5 * phi * phi / (2.0 * z * z + 1.0);
  const double eps = 1.57 * std::pow(static_cast<double>(n), -1.0 / 3.0) * std::pow(ratio, 2.0 / 3.0);
  return std::min(eps, (1.0 - 1e-3) * std::min(tau, 1.0 - tau));
}

/// 2 eps / spread, with the spread floored so that the result is at most the cap.
inline double difference_quotient(double spread, double eps, bool* floored = nullptr) {
  const double floor = 2.0 * eps / kDensityCap;
  const bool hit = !(spread > floor);
  if (floored) *floored = hit;
  return 2.0 * eps / (hit ? floor : spread);
}

inline DensityWeights density_from_spread(const Eigen::VectorXd& spread, double eps) {
  DensityWeights w;
  w.eps = eps;
  w.f_hat.resize(spread.size());
  for (Eigen::Index i = 0; i < spread.size(); ++i) {
    bool hit = false;
    w.f_hat(i) = difference_quotient(spread(i), eps, &hit);
    if (hit) ++w.floor_count;
  }
  return w;
}

/// Difference-quotient densities for a generic stacked design: fits at
/// tau - eps and tau + eps, spread_i = a_i'(b(tau+eps) - b(tau-eps)).
inline DensityWeights estimate_weights(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, double tau,
                                       std::size_t n_subjects, const SolverOptions& opt = {},
                                       const std::optional<Eigen::VectorXd>& center = std::nullopt) {
  const double eps = hall_sheather_bandwidth(tau, n_subjects);
  SolverOptions side = opt;
  if (center) side.start = *center;
  QrProblem pb;
  pb.design = design;
  pb.response = y;
  pb.tau = tau - eps;
  const auto lo = solve(pb, side);
  pb.tau = tau + eps;
  const auto hi = solve(pb, side);
  return density_from_spread(design * (hi.coefficients - lo.coefficients), eps);
}

/// Same for the PLVC model on a dataset.
inline DensityWeights estimate_weights(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                       const FitOptions& opt = {},
                                       const std::optional<Eigen::VectorXd>& center = std::nullopt) {
  const auto d = build_design(ds, specs);
  return estimate_weights(detail::stack_columns(d.Pi, d.Z), ds.response(), tau, ds.n_subjects(),
                          opt.solver, center);
}

inline DensityWeights estimate_weights(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                                       const FitOptions& opt = {}) {
  return estimate_weights(ds, uniform_basis_set(spec, ds.p()), tau, opt);
}

/// Diagonal of B in dataset order (the subject blocks are themselves
/// diagonal). Homoscedastic mode gives the identity.
inline Eigen::VectorXd build_B(const DensityWeights& w, bool homoscedastic = false) {
  if (homoscedastic) return Eigen::VectorXd::Ones(w.f_hat.size());
  return w.f_hat;
}

}  // namespace plvcqr
