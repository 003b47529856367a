#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/qr_solver.hpp"
#include "plvcqr/random.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

/// One fitted conditional quantile: alpha_l(t) = pi_l(t)' theta_l and beta.
struct QuantileFit {
  double tau = 0.5;
  BasisSet specs;
  TimeMap time_map;
  std::vector<std::string> x_names;
  std::vector<std::string> z_names;
  std::vector<Eigen::VectorXd> theta;
  Eigen::VectorXd beta;
  double objective = 0.0;
  Eigen::VectorXd residuals;  // dataset order
  SolveStatus status = SolveStatus::optimal;
  Eigen::Index design_rank = 0;

  std::size_t p() const noexcept { return theta.size(); }
  std::size_t q() const noexcept { return static_cast<std::size_t>(beta.size()); }
  std::size_t parameter_count() const {
    std::size_t k = q();
    for (const auto& s : specs) k += static_cast<std::size_t>(s.basis_dim());
    return k;
  }

  /// (theta_1, ..., theta_p, beta) in design column order.
  Eigen::VectorXd coefficients() const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index pos = 0;
    for (const auto& t : theta) {
      c.segment(pos, t.size()) = t;
      pos += t.size();
    }
    c.tail(beta.size()) = beta;
    return c;
  }
};

struct FitOptions {
  SolverOptions solver;
};

namespace detail {

inline Eigen::MatrixXd stack_columns(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd m(a.rows(), a.cols() + b.cols());
  m << a, b;
  return m;
}

inline QrSolution fit_columns(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, double tau,
                              const SolverOptions& opt) {
  QrProblem pb;
  pb.design = design;
  pb.response = y;
  pb.tau = tau;
  return solve(pb, opt);
}

inline QuantileFit fit_from_solution(const LongitudinalDataset& ds, const BasisSet& specs,
                                     double tau, const QrSolution& sol) {
  QuantileFit f;
  f.tau = tau;
  f.specs = specs;
  f.time_map = ds.time_map();
  f.x_names = ds.x_names();
  f.z_names = ds.z_names();
  const auto off = block_offsets(specs);
  for (std::size_t l = 0; l < specs.size(); ++l)
    f.theta.push_back(sol.coefficients.segment(off[l], specs[l].basis_dim()));
  f.beta = sol.coefficients.tail(static_cast<Eigen::Index>(ds.q()));
  f.objective = sol.objective;
  f.residuals = sol.residuals;
  f.status = sol.status;
  f.design_rank = sol.rank;
  return f;
}

}  // namespace detail

/// Minimizes the check loss over the stacked spline-by-covariate design (Pi, Z).
inline QuantileFit fit(const LongitudinalDataset& ds, const BasisSet& specs, double tau,
                       const FitOptions& opt = {}) {
  const auto d = build_design(ds, specs);
  const auto sol = detail::fit_columns(detail::stack_columns(d.Pi, d.Z), ds.response(), tau, opt.solver);
  return detail::fit_from_solution(ds, specs, tau, sol);
}

inline QuantileFit fit(const LongitudinalDataset& ds, const SplineSpec& spec, double tau,
                       const FitOptions& opt = {}) {
  return fit(ds, uniform_basis_set(spec, ds.p()), tau, opt);
}

/// Constant-coefficient (LCC) fit: every alpha_l held constant in t.
inline QuantileFit fit_constant(const LongitudinalDataset& ds, double tau, const FitOptions& opt = {}) {
  return fit(ds, make_spec(0, 0), tau, opt);
}

inline double sic_value(double loss, std::size_t n_obs, std::size_t n_params) {
  const double N = static_cast<double>(n_obs);
  return std::log(loss) + std::log(N) / (2.0 * N) * static_cast<double>(n_params);
}

struct SicEntry {
  int k = 0;
  double loss = 0.0;
  double sic = 0.0;
  std::size_t n_params = 0;
  bool failed = false;
  std::string error;
};

struct KnotSelection {
  int k_star = 0;
  std::vector<SicEntry> table;
};

struct KnotRange {
  int lo = 1;
  int hi = 1;
};

/// Default search range {1, ..., ceil(N^(1/5)) + 2}.
inline KnotRange default_knot_range(std::size_t n_obs) {
  return {1, static_cast<int>(std::ceil(std::pow(static_cast<double>(n_obs), 0.2))) + 2};
}

/// Smallest k attaining the minimum SIC among successful entries.
inline int argmin_sic(const std::vector<SicEntry>& table) {
  int best_k = -1;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : table) {
    if (e.failed) continue;
    if (best_k < 0 || e.sic < best || (e.sic == best && e.k < best_k)) {
      best = e.sic;
      best_k = e.k;
    }
  }
  return best_k;
}

/// Schwarz-type knot selection: log(check loss) + log(N)/(2N) * #parameters,
/// with uniform knots and the same k for every coefficient.
inline KnotSelection select_knots(const LongitudinalDataset& ds, double tau, int degree,
                                  KnotRange range, const FitOptions& opt = {}) {
  if (range.hi < range.lo || range.lo < 0) throw ArgumentError("select_knots: empty k range");
  KnotSelection sel;
  std::string last_error;
  for (int k = range.lo; k <= range.hi; ++k) {
    SicEntry e;
    e.k = k;
    try {
      const auto f = fit(ds, make_spec(k, degree), tau, opt);
      e.loss = f.objective;
      e.n_params = f.parameter_count();
      e.sic = sic_value(e.loss, ds.n_obs(), e.n_params);
    } catch (const Error& err) {
      e.failed = true;
      e.error = err.what();
      last_error = err.what();
    }
    sel.table.push_back(e);
  }
  sel.k_star = argmin_sic(sel.table);
  if (sel.k_star < 0) throw SolverError("select_knots: every candidate failed: " + last_error);
  return sel;
}

inline KnotSelection select_knots(const LongitudinalDataset& ds, double tau, int degree = 3,
                                  const FitOptions& opt = {}) {
  return select_knots(ds, tau, degree, default_knot_range(ds.n_obs()), opt);
}

/// alpha_l at a time already on [0,1].
inline double eval_alpha_unit(const QuantileFit& f, std::size_t l, double u) {
  if (l >= f.p()) throw DimensionError("eval_alpha: coefficient index out of range");
  return eval_basis(f.specs[l], u).dot(f.theta[l]);
}

/// alpha_l at original-scale time t.
inline double eval_alpha(const QuantileFit& f, std::size_t l, double t) {
  if (!f.time_map.contains(t))
    throw ExtrapolationError("eval_alpha: t = " + std::to_string(t) + " outside the observed range [" +
                             std::to_string(f.time_map.t_min()) + ", " +
                             std::to_string(f.time_map.t_max()) + "]");
  return eval_alpha_unit(f, l, f.time_map.to_unit(t));
}

inline double predict_quantile(const QuantileFit& f, const Eigen::Ref<const Eigen::VectorXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& z, double t) {
  if (static_cast<std::size_t>(x.size()) != f.p() || static_cast<std::size_t>(z.size()) != f.q())
    throw DimensionError("predict_quantile: covariate dimensions do not match the fit");
  double v = z.dot(f.beta);
  for (std::size_t l = 0; l < f.p(); ++l) {
    const double xl = x(static_cast<Eigen::Index>(l));
    if (xl != 0.0) v += xl * eval_alpha(f, l, t);
  }
  return v;
}

struct QuantileProcess {
  std::vector<double> taus;
  std::vector<QuantileFit> fits;
};

/// Independent fits on a strictly increasing tau grid, sharing one basis set.
inline QuantileProcess fit_process(const LongitudinalDataset& ds, const BasisSet& specs,
                                   const std::vector<double>& taus, const FitOptions& opt = {}) {
  if (taus.empty()) throw ArgumentError("fit_process: empty tau grid");
  for (std::size_t k = 0; k < taus.size(); ++k) {
    if (!(taus[k] > 0.0 && taus[k] < 1.0)) throw DomainError("fit_process: tau outside (0,1)");
    if (k > 0 && !(taus[k] > taus[k - 1])) throw ArgumentError("fit_process: tau grid not strictly increasing");
  }
  const auto d = build_design(ds, specs);
  const Eigen::MatrixXd design = detail::stack_columns(d.Pi, d.Z);
  QuantileProcess proc;
  proc.taus = taus;
  for (double tau : taus) {
    try {
      const auto sol = detail::fit_columns(design, ds.response(), tau, opt.solver);
      proc.fits.push_back(detail::fit_from_solution(ds, specs, tau, sol));
    } catch (const Error& e) {
      throw SolverError("fit_process: tau = " + std::to_string(tau) + ": " + e.what());
    }
  }
  return proc;
}

inline QuantileProcess fit_process(const LongitudinalDataset& ds, const SplineSpec& spec,
                                   const std::vector<double>& taus, const FitOptions& opt = {}) {
  return fit_process(ds, uniform_basis_set(spec, ds.p()), taus, opt);
}

/// Conditional quantile at level u from the process: values across the grid
/// are sorted (rearranged) first, then interpolated linearly in tau and
/// clamped at the grid ends.
inline double process_quantile(const QuantileProcess& proc, const Eigen::Ref<const Eigen::VectorXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& z, double t, double u) {
  std::vector<double> q;
  q.reserve(proc.fits.size());
  for (const auto& f : proc.fits) q.push_back(predict_quantile(f, x, z, t));
  std::sort(q.begin(), q.end());
  const auto& g = proc.taus;
  if (u <= g.front()) return q.front();
  if (u >= g.back()) return q.back();
  const auto it = std::upper_bound(g.begin(), g.end(), u);
  const auto hi = static_cast<std::size_t>(it - g.begin());
  const std::size_t lo = hi - 1;
  const double w = (u - g[lo]) / (g[hi] - g[lo]);
  return (1.0 - w) * q[lo] + w * q[hi];
}

struct AssessmentSample {
  double t_star = 0.0;
  std::vector<double> simulated;  // Y*
  std::vector<double> observed;   // y of the qualifying observations
};

/// Draws Y* = Q(u | x*, z*, t*) with u ~ U(0,1) and (x*, z*) taken from a
/// uniformly chosen observation within `tol` of t* (original time units).
inline AssessmentSample assess(const QuantileProcess& proc, const LongitudinalDataset& ds, double t_star,
                               double tol, std::size_t n_draws, std::uint64_t seed) {
  if (proc.fits.empty()) throw ArgumentError("assess: empty quantile process");
  std::vector<const Observation*> window;
  for (const auto& s : ds.subjects())
    for (const auto& o : s.observations)
      if (std::abs(o.t - t_star) <= tol) window.push_back(&o);
  if (window.empty())
    throw EmptyWindowError("assess: no observation within " + std::to_string(tol) + " of t* = " +
                           std::to_string(t_star));
  AssessmentSample out;
  out.t_star = t_star;
  for (const auto* o : window) out.observed.push_back(o->y);
  Rng rng(stream_seed(seed, 0));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, window.size() - 1);
  out.simulated.reserve(n_draws);
  for (std::size_t k = 0; k < n_draws; ++k) {
    const double u = unif(rng);
    const auto* o = window[pick(rng)];
    out.simulated.push_back(process_quantile(proc, o->x, o->z, t_star, u));
  }
  return out;
}

}  // namespace plvcqr
