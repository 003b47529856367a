#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/density_weights.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/qr_solver.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

enum class TestMethod { wald, qrs, qrs_delta };
enum class Correlation { empirical, exchangeable };
enum class WeightMode { identity, estimated };

inline const char* to_string(TestMethod m) {
  switch (m) {
    case TestMethod::wald: return "wald";
    case TestMethod::qrs: return "qrs";
    case TestMethod::qrs_delta: return "qrs_delta";
  }
  return "?";
}

struct TestResult {
  TestMethod method = TestMethod::qrs;
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::map<std::string, double> aux;
};

struct TestOptions {
  Correlation correlation = Correlation::empirical;
  WeightMode weights = WeightMode::identity;
  std::optional<Eigen::VectorXd> B;  // explicit diagonal weights, overrides `weights`
  FitOptions fit;
};

inline double chi_squared_sf(double x, int df) {
  if (df < 1) throw ArgumentError("chi-squared reference needs df >= 1");
  if (!(x > 0.0)) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

struct ResidualizedDesign {
  Eigen::MatrixXd D;
  Eigen::MatrixXd W;
  Eigen::VectorXd B;                  // empty means identity
  std::vector<Eigen::Index> dropped;  // collinear nuisance columns
  double condition = 1.0;             // of W'BW over the kept columns
  double orthogonality = 0.0;         // ||D'BW|| / (||D|| ||W||)
};

inline double orthogonality_ratio(const Eigen::MatrixXd& D, const Eigen::MatrixXd& W, const Eigen::VectorXd& B) {
  const double nd = D.norm(), nw = W.norm();
  if (nd == 0.0 || nw == 0.0) return 0.0;
  const Eigen::MatrixXd cross = B.size() ? Eigen::MatrixXd(D.transpose() * B.asDiagonal() * W)
                                         : Eigen::MatrixXd(D.transpose() * W);
  return cross.norm() / (nd * nw);
}

/// D = (I - W (W'BW)^{-1} W'B) T by weighted least squares on sqrt(B)-scaled rows.
inline ResidualizedDesign residualize(const Eigen::MatrixXd& test, const Eigen::MatrixXd& nuisance,
                                      const Eigen::VectorXd& B = {}) {
  const Eigen::Index N = test.rows();
  if (nuisance.rows() != N) throw DimensionError("residualize: row count mismatch");
  if (B.size() && B.size() != N) throw DimensionError("residualize: weight length mismatch");
  if (B.size() && (B.array() <= 0.0).any()) throw DomainError("residualize: weights must be positive");
  ResidualizedDesign out;
  out.W = nuisance;
  out.B = B;
  const Eigen::VectorXd sw = B.size() ? Eigen::VectorXd(B.cwiseSqrt()) : Eigen::VectorXd::Ones(N);
  const Eigen::MatrixXd Ts = sw.asDiagonal() * test;

  Eigen::Index rank = 0;
  std::vector<Eigen::Index> keep;
  if (nuisance.cols() > 0) {
    const Eigen::MatrixXd Ws = sw.asDiagonal() * nuisance;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> cqr(Ws);
    cqr.setThreshold(1e-10);
    rank = cqr.rank();
    for (Eigen::Index k = 0; k < nuisance.cols(); ++k) {
      const auto j = cqr.colsPermutation().indices()(k);
      (k < rank ? keep : out.dropped).push_back(j);
    }
    std::sort(keep.begin(), keep.end());
    std::sort(out.dropped.begin(), out.dropped.end());
  }
  if (rank == 0) {
    out.D = test;
    out.orthogonality = orthogonality_ratio(out.D, out.W, out.B);
    return out;
  }

  Eigen::MatrixXd Wk(N, rank);
  for (Eigen::Index k = 0; k < rank; ++k) Wk.col(k) = sw.cwiseProduct(nuisance.col(keep[static_cast<std::size_t>(k)]));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Wk);
  const Eigen::MatrixXd R = qr.matrixQR().topLeftCorner(rank, rank).triangularView<Eigen::Upper>();
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(R).singularValues();
  const double cond_r = sv(rank - 1) > 0.0 ? sv(0) / sv(rank - 1) : std::numeric_limits<double>::infinity();
  out.condition = cond_r * cond_r;
  if (!(out.condition <= 1e12))
    throw IllConditionedError("residualize: W'BW is numerically singular (condition " +
                                  std::to_string(out.condition) + ")",
                              out.condition);

  Eigen::MatrixXd res = Ts - Wk * qr.solve(Ts);
  res -= Wk * qr.solve(res);  // one refinement sweep
  out.D = sw.cwiseInverse().asDiagonal() * res;
  out.orthogonality = orthogonality_ratio(out.D, out.W, out.B);
  return out;
}

/// Fraction of ordered within-subject pairs whose residuals are both negative.
inline double estimate_delta(const Eigen::VectorXd& residuals, const std::vector<std::size_t>& offsets) {
  double both = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    const auto m = static_cast<double>(offsets[i + 1] - offsets[i]);
    double neg = 0.0;
    for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r)
      if (residuals(static_cast<Eigen::Index>(r)) < 0.0) neg += 1.0;
    both += neg * (neg - 1.0);
    pairs += m * (m - 1.0);
  }
  if (pairs == 0.0) throw NoPairsError("estimate_delta: every subject has a single observation");
  return both / pairs;
}

struct RankScoreParts {
  Eigen::VectorXd S;
  Eigen::MatrixXd V;
  double statistic = 0.0;
};

/// S = N^{-1/2} D'psi and V from per-subject score outer products
/// (empirical) or from the exchangeable working covariance A(delta) with
/// diagonal tau - tau^2 and off-diagonal delta - tau^2.
inline RankScoreParts rank_score_statistic(const Eigen::MatrixXd& D, const Eigen::VectorXd& psi_values,
                                           const std::vector<std::size_t>& offsets, double tau,
                                           Correlation corr, double delta = 0.0) {
  const Eigen::Index N = D.rows(), k = D.cols();
  if (psi_values.size() != N) throw DimensionError("rank score: psi length mismatch");
  if (offsets.empty() || offsets.back() != static_cast<std::size_t>(N))
    throw DimensionError("rank score: subject offsets do not cover the rows");
  const double n = static_cast<double>(N);
  RankScoreParts out;
  out.S = D.transpose() * psi_values / std::sqrt(n);
  out.V = Eigen::MatrixXd::Zero(k, k);
  const double diag = tau - tau * tau, off = delta - tau * tau;
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    const auto r0 = static_cast<Eigen::Index>(offsets[i]);
    const auto m = static_cast<Eigen::Index>(offsets[i + 1] - offsets[i]);
    const auto Di = D.middleRows(r0, m);
    if (corr == Correlation::empirical) {
      const Eigen::VectorXd g = Di.transpose() * psi_values.segment(r0, m);
      out.V.noalias() += g * g.transpose();
    } else {
      const Eigen::VectorXd c = Di.colwise().sum().transpose();
      out.V.noalias() += (diag - off) * (Di.transpose() * Di) + off * (c * c.transpose());
    }
  }
  out.V /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.V);
  const auto& ev = es.eigenvalues();
  if (k == 0 || !(ev(k - 1) > 0.0) || ev(0) <= 1e-10 * ev(k - 1))
    throw DegenerateDesignError("rank score: score covariance is singular");
  const Eigen::VectorXd u = es.eigenvectors().transpose() * out.S;
  out.statistic = std::max(0.0, (u.array().square() / ev.array()).sum());
  return out;
}

struct RankScoreOutput {
  TestResult result;
  RankScoreParts parts;
  ResidualizedDesign residualized;
  QrSolution restricted;
};

/// Rank score test of the `test` columns given the `nuisance` columns: the
/// restricted fit uses only the nuisance block.
inline RankScoreOutput rank_score_test(const Eigen::MatrixXd& test, const Eigen::MatrixXd& nuisance,
                                       const Eigen::VectorXd& y, double tau,
                                       const std::vector<std::size_t>& offsets, Correlation corr,
                                       const Eigen::VectorXd& B = {}, const SolverOptions& opt = {}) {
  if (test.cols() == 0) throw ArgumentError("rank score: empty test block");
  if (test.rows() != y.size()) throw DimensionError("rank score: test block rows != response length");
  RankScoreOutput out;
  if (nuisance.cols() > 0) {
    QrProblem pb;
    pb.design = nuisance;
    pb.response = y;
    pb.tau = tau;
    out.restricted = solve(pb, opt);
  } else {
    if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0,1)");
    out.restricted.residuals = y;
    out.restricted.objective = check_loss(y, tau);
  }
  out.residualized = residualize(test, nuisance, B);
  const auto& D = out.residualized.D;
  for (Eigen::Index c = 0; c < D.cols(); ++c) {
    const double scale = std::max(test.col(c).norm(), std::numeric_limits<double>::min());
    if (D.col(c).norm() <= 1e-8 * scale)
      throw DegenerateDesignError("rank score: test column " + std::to_string(c) +
                                  " lies in the nuisance span");
  }

  Eigen::VectorXd ps(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) ps(i) = psi(out.restricted.residuals(i), tau);
  double delta = 0.0;
  if (corr == Correlation::exchangeable) delta = estimate_delta(out.restricted.residuals, offsets);
  out.parts = rank_score_statistic(D, ps, offsets, tau, corr, delta);

  auto& r = out.result;
  r.method = corr == Correlation::exchangeable ? TestMethod::qrs_delta : TestMethod::qrs;
  r.statistic = out.parts.statistic;
  r.df = static_cast<int>(test.cols());
  r.p_value = chi_squared_sf(r.statistic, r.df);
  if (corr == Correlation::exchangeable) r.aux["delta"] = delta;
  r.aux["condition"] = out.residualized.condition;
  r.aux["dropped_columns"] = static_cast<double>(out.residualized.dropped.size());
  r.aux["orthogonality"] = out.residualized.orthogonality;
  return out;
}

namespace detail {

inline std::vector<std::size_t> check_beta_indices(std::vector<std::size_t> tested, std::size_t q) {
  if (tested.empty()) throw ArgumentError("test: empty set of tested constant coefficients");
  std::sort(tested.begin(), tested.end());
  tested.erase(std::unique(tested.begin(), tested.end()), tested.end());
  if (tested.back() >= q) throw ArgumentError("test: constant coefficient index out of range");
  return tested;
}

// Weight diagonal per the options; `estimated` fits the full model at tau +- eps.
inline Eigen::VectorXd weights_for(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                   const TestOptions& opt, TestResult& r) {
  if (opt.B) {
    if (static_cast<std::size_t>(opt.B->size()) != ds.n_obs())
      throw DimensionError("test: explicit weight vector length != N");
    return *opt.B;
  }
  if (opt.weights == WeightMode::identity) return {};
  const auto w = estimate_weights(ds, specs, tau, opt.fit);
  r.aux["eps"] = w.eps;
  r.aux["floor_count"] = static_cast<double>(w.floor_count);
  return w.f_hat;
}

}  // namespace detail

/// Rank score test of H0: beta_T = 0 with the restricted fit over (Pi, Z without T).
inline RankScoreOutput rank_score_beta_detail(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                              const std::vector<std::size_t>& tested_in,
                                              const TestOptions& opt = {}) {
  const auto tested = detail::check_beta_indices(tested_in, ds.q());
  const auto d = build_design(ds, specs);
  const auto N = d.Pi.rows();
  Eigen::MatrixXd Z1(N, static_cast<Eigen::Index>(tested.size()));
  Eigen::MatrixXd W(N, d.Pi.cols() + static_cast<Eigen::Index>(ds.q() - tested.size()));
  W.leftCols(d.Pi.cols()) = d.Pi;
  Eigen::Index c1 = 0, c2 = d.Pi.cols();
  for (std::size_t j = 0; j < ds.q(); ++j) {
    const auto col = d.Z.col(static_cast<Eigen::Index>(j));
    if (std::binary_search(tested.begin(), tested.end(), j)) Z1.col(c1++) = col;
    else W.col(c2++) = col;
  }
  TestResult weights_info;
  const Eigen::VectorXd B = detail::weights_for(ds, specs, tau, opt, weights_info);
  auto out = rank_score_test(Z1, W, ds.response(), tau, ds.subject_offsets(), opt.correlation, B, opt.fit.solver);
  for (const auto& [k, v] : weights_info.aux) out.result.aux[k] = v;
  return out;
}

inline TestResult rank_score_beta(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                  const std::vector<std::size_t>& tested, const TestOptions& opt = {}) {
  return rank_score_beta_detail(ds, specs, tau, tested, opt).result;
}

inline TestResult rank_score_beta(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                                  const std::vector<std::size_t>& tested, const TestOptions& opt = {}) {
  return rank_score_beta(ds, uniform_basis_set(spec, ds.p()), tau, tested, opt);
}

struct WaldParts {
  Eigen::MatrixXd K;
  Eigen::MatrixXd Lambda;
  Eigen::MatrixXd C;  // K^{-1} Lambda K^{-1}
  double statistic = 0.0;
};

/// Sandwich pieces from a residualized Z*, weights B and full-fit scores.
inline WaldParts wald_statistic(const Eigen::MatrixXd& Zstar, const Eigen::VectorXd& B,
                                const Eigen::VectorXd& psi_values, const std::vector<std::size_t>& offsets,
                                const Eigen::VectorXd& beta, const std::vector<std::size_t>& tested) {
  const Eigen::Index N = Zstar.rows(), q = Zstar.cols();
  if (psi_values.size() != N || (B.size() && B.size() != N)) throw DimensionError("wald: length mismatch");
  if (beta.size() != q) throw DimensionError("wald: beta length != Z* columns");
  WaldParts out;
  out.K = B.size() ? Eigen::MatrixXd(Zstar.transpose() * B.asDiagonal() * Zstar)
                   : Eigen::MatrixXd(Zstar.transpose() * Zstar);
  out.Lambda = Eigen::MatrixXd::Zero(q, q);
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    const auto r0 = static_cast<Eigen::Index>(offsets[i]);
    const auto m = static_cast<Eigen::Index>(offsets[i + 1] - offsets[i]);
    const Eigen::VectorXd g = Zstar.middleRows(r0, m).transpose() * psi_values.segment(r0, m);
    out.Lambda.noalias() += g * g.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ek(out.K);
  const auto& kv = ek.eigenvalues();
  if (q == 0 || !(kv(0) > 1e-12 * kv(q - 1)))
    throw IllConditionedError("wald: K is singular", kv(0) > 0.0 ? kv(q - 1) / kv(0) : INFINITY);
  const Eigen::MatrixXd Kinv = ek.eigenvectors() * kv.cwiseInverse().asDiagonal() * ek.eigenvectors().transpose();
  out.C = Kinv * out.Lambda * Kinv;

  const auto T = static_cast<Eigen::Index>(tested.size());
  Eigen::MatrixXd Ctt(T, T);
  Eigen::VectorXd bt(T);
  for (Eigen::Index a = 0; a < T; ++a) {
    bt(a) = beta(static_cast<Eigen::Index>(tested[static_cast<std::size_t>(a)]));
    for (Eigen::Index b = 0; b < T; ++b)
      Ctt(a, b) = out.C(static_cast<Eigen::Index>(tested[static_cast<std::size_t>(a)]),
                        static_cast<Eigen::Index>(tested[static_cast<std::size_t>(b)]));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ec(Ctt);
  const auto& cv = ec.eigenvalues();
  if (!(cv(0) > 1e-12 * std::max(cv(T - 1), 0.0)) || !(cv(T - 1) > 0.0))
    throw IllConditionedError("wald: tested covariance block is singular",
                              cv(0) > 0.0 ? cv(T - 1) / cv(0) : INFINITY);
  const Eigen::VectorXd u = ec.eigenvectors().transpose() * bt;
  out.statistic = std::max(0.0, (u.array().square() / cv.array()).sum());
  return out;
}

/// Wald test of H0: beta_T = 0 from the full fit and the sandwich covariance,
/// with estimated density weights unless explicit weights are supplied.
inline TestResult wald_test(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                            const std::vector<std::size_t>& tested_in, const TestOptions& opt = {}) {
  const auto tested = detail::check_beta_indices(tested_in, ds.q());
  const auto d = build_design(ds, specs);
  const Eigen::MatrixXd A = detail::stack_columns(d.Pi, d.Z);
  QrProblem pb;
  pb.design = A;
  pb.response = ds.response();
  pb.tau = tau;
  const auto full = solve(pb, opt.fit.solver);

  TestResult r;
  r.method = TestMethod::wald;
  Eigen::VectorXd B;
  if (opt.B) {
    if (static_cast<std::size_t>(opt.B->size()) != ds.n_obs())
      throw DimensionError("wald: explicit weight vector length != N");
    B = *opt.B;
  } else {
    const auto w = estimate_weights(A, ds.response(), tau, ds.n_subjects(), opt.fit.solver, full.coefficients);
    B = w.f_hat;
    r.aux["eps"] = w.eps;
    r.aux["floor_count"] = static_cast<double>(w.floor_count);
  }
  const auto rd = residualize(d.Z, d.Pi, B);
  Eigen::VectorXd ps(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) ps(i) = psi(full.residuals(i), tau);
  const auto parts = wald_statistic(rd.D, B, ps, ds.subject_offsets(),
                                    full.coefficients.tail(static_cast<Eigen::Index>(ds.q())), tested);
  r.statistic = parts.statistic;
  r.df = static_cast<int>(tested.size());
  r.p_value = chi_squared_sf(r.statistic, r.df);
  r.aux["condition"] = rd.condition;
  r.aux["dropped_columns"] = static_cast<double>(rd.dropped.size());
  r.aux["orthogonality"] = rd.orthogonality;
  return r;
}

inline TestResult wald_test(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                            const std::vector<std::size_t>& tested, const TestOptions& opt = {}) {
  return wald_test(ds, uniform_basis_set(spec, ds.p()), tau, tested, opt);
}

/// Rank score test that the tested varying coefficients are constant in t:
/// the non-constant spline directions Pi1 are tested against W = (Pi2, Z).
inline RankScoreOutput constancy_test_detail(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                             const std::vector<std::size_t>& tested,
                                             const TestOptions& opt = {}) {
  const auto cd = split_design_for_constancy(ds, specs, tested);
  const Eigen::MatrixXd W = detail::stack_columns(cd.Pi2, ds.Z());
  TestResult weights_info;
  const Eigen::VectorXd B = detail::weights_for(ds, specs, tau, opt, weights_info);
  auto out = rank_score_test(cd.Pi1, W, ds.response(), tau, ds.subject_offsets(), opt.correlation, B,
                             opt.fit.solver);
  auto& r = out.result;
  for (const auto& [k, v] : weights_info.aux) r.aux[k] = v;
  const double z = (r.statistic - r.df) / std::sqrt(2.0 * r.df);
  r.aux["normal_statistic"] = z;
  r.aux["normal_p_value"] =
      boost::math::cdf(boost::math::complement(boost::math::normal_distribution<double>(), z));
  return out;
}

inline TestResult constancy_test(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                                 const std::vector<std::size_t>& tested, const TestOptions& opt = {}) {
  return constancy_test_detail(ds, specs, tau, tested, opt).result;
}

inline TestResult constancy_test(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                                 const std::vector<std::size_t>& tested, const TestOptions& opt = {}) {
  return constancy_test(ds, uniform_basis_set(spec, ds.p()), tau, tested, opt);
}

}  // namespace plvcqr
