#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"

namespace plvcqr {

/// Clamped B-spline space on [0,1]: boundary knots repeated degree+1 times.
struct SplineSpec {
  int degree = 3;
  int k_internal = 0;
  std::vector<double> knots;

  int basis_dim() const noexcept { return k_internal + degree + 1; }
  std::span<const double> internal_knots() const {
    return {knots.data() + degree + 1, static_cast<std::size_t>(k_internal)};
  }

  friend bool operator==(const SplineSpec&, const SplineSpec&) = default;
};

enum class KnotPlacement { uniform, sample_quantile };

namespace detail {

inline SplineSpec clamp_knots(int degree, const std::vector<double>& internal) {
  SplineSpec s;
  s.degree = degree;
  s.k_internal = static_cast<int>(internal.size());
  s.knots.assign(static_cast<std::size_t>(degree + 1), 0.0);
  s.knots.insert(s.knots.end(), internal.begin(), internal.end());
  s.knots.insert(s.knots.end(), static_cast<std::size_t>(degree + 1), 1.0);
  return s;
}

// Type-7 empirical quantile of a sorted sample.
inline double sorted_quantile(const std::vector<double>& v, double prob) {
  const double h = prob * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Builds a spline space with k_n internal knots.
///
/// Uniform placement puts knots at i/(k_n+1). Sample-quantile placement uses
/// empirical quantiles of `times` (already on [0,1]) and nudges coincident
/// knots apart by at most `min_gap` each.
inline SplineSpec make_spec(int k_internal, int degree,
                            KnotPlacement placement = KnotPlacement::uniform,
                            std::span<const double> times = {}) {
  if (k_internal < 0) throw ArgumentError("k_n must be non-negative");
  if (degree < 0) throw ArgumentError("spline degree must be non-negative");
  std::vector<double> internal(static_cast<std::size_t>(k_internal));
  if (placement == KnotPlacement::uniform) {
    for (int i = 1; i <= k_internal; ++i)
      internal[static_cast<std::size_t>(i - 1)] =
          static_cast<double>(i) / static_cast<double>(k_internal + 1);
    return detail::clamp_knots(degree, internal);
  }

  std::vector<double> sample(times.begin(), times.end());
  std::sort(sample.begin(), sample.end());
  const auto distinct = static_cast<std::size_t>(
      std::unique(sample.begin(), sample.end()) - sample.begin());
  if (distinct < static_cast<std::size_t>(k_internal))
    throw ArgumentError("sample-quantile knots need at least k_n distinct times");
  sample.assign(times.begin(), times.end());
  std::sort(sample.begin(), sample.end());

  constexpr double min_gap = 1e-6;
  double prev = 0.0;
  for (int i = 0; i < k_internal; ++i) {
    double knot = detail::sorted_quantile(
        sample, static_cast<double>(i + 1) / static_cast<double>(k_internal + 1));
    knot = std::max(knot, prev + min_gap);
    internal[static_cast<std::size_t>(i)] = knot;
    prev = knot;
  }
  if (k_internal > 0 && internal.back() >= 1.0 - min_gap)
    throw DegenerateKnotsError("internal knots cannot be separated inside (0,1)");
  return detail::clamp_knots(degree, internal);
}

/// Knot span index for t in [0,1]; t = 1 falls in the last non-empty span.
inline int find_span(const SplineSpec& spec, double t) {
  const int last = spec.basis_dim() - 1;
  if (t >= 1.0) return last;
  auto it = std::upper_bound(spec.knots.begin(), spec.knots.end(), t);
  const int span = static_cast<int>(it - spec.knots.begin()) - 1;
  return std::clamp(span, spec.degree, last);
}

/// Writes the degree+1 basis values that can be nonzero at t into `out` and
/// returns the index of the first of them.
inline int eval_nonzero(const SplineSpec& spec, double t, std::span<double> out) {
  const int p = spec.degree;
  const int span = find_span(spec, t);
  const auto& U = spec.knots;
  double left[32];
  double right[32];
  if (p >= 31) throw ArgumentError("spline degree too large");
  out[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - U[static_cast<std::size_t>(span + 1 - j)];
    right[j] = U[static_cast<std::size_t>(span + j)] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = denom > 0.0 ? out[static_cast<std::size_t>(r)] / denom : 0.0;
      out[static_cast<std::size_t>(r)] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    out[static_cast<std::size_t>(j)] = saved;
  }
  return span - p;
}

/// pi(t): all basis_dim values at t.
inline Eigen::VectorXd eval_basis(const SplineSpec& spec, double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw DomainError("eval_basis: t = " + std::to_string(t) + " outside [0,1]");
  Eigen::VectorXd b = Eigen::VectorXd::Zero(spec.basis_dim());
  std::vector<double> nz(static_cast<std::size_t>(spec.degree + 1));
  const int first = eval_nonzero(spec, t, nz);
  for (int r = 0; r <= spec.degree; ++r) b(first + r) = nz[static_cast<std::size_t>(r)];
  return b;
}

/// One spline space per varying coefficient; usually all equal.
using BasisSet = std::vector<SplineSpec>;

inline BasisSet uniform_basis_set(const SplineSpec& spec, std::size_t p) {
  return BasisSet(p, spec);
}

/// Column offset of each coefficient block in Pi, plus the total at the end.
inline std::vector<Eigen::Index> block_offsets(const BasisSet& specs) {
  std::vector<Eigen::Index> off{0};
  for (const auto& s : specs) off.push_back(off.back() + s.basis_dim());
  return off;
}

struct PlvcDesign {
  Eigen::MatrixXd Pi;  // N x sum(basis_dim)
  Eigen::MatrixXd Z;   // N x q
};

/// Rows x_{ij,l} * pi_l(t_ij)' interleaved over l, plus Z in the same order.
inline PlvcDesign build_design(const LongitudinalDataset& ds, const BasisSet& specs) {
  if (specs.size() != ds.p())
    throw DimensionError("build_design: need one spline spec per varying covariate");
  const auto off = block_offsets(specs);
  const auto N = static_cast<Eigen::Index>(ds.n_obs());
  PlvcDesign d{Eigen::MatrixXd::Zero(N, off.back()), ds.Z()};
  std::vector<double> nz;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    nz.resize(static_cast<std::size_t>(s.degree + 1));
    for (Eigen::Index i = 0; i < N; ++i) {
      const double x = ds.X()(i, static_cast<Eigen::Index>(l));
      if (x == 0.0) continue;
      const int first = eval_nonzero(s, ds.unit_times()(i), nz);
      for (int r = 0; r <= s.degree; ++r)
        d.Pi(i, off[l] + first + r) = x * nz[static_cast<std::size_t>(r)];
    }
  }
  return d;
}

inline PlvcDesign build_design(const LongitudinalDataset& ds, const SplineSpec& spec) {
  return build_design(ds, uniform_basis_set(spec, ds.p()));
}

/// Change of basis G with G*pi(t) = (1, pibar(t)): first row ones, then the
/// identity rows 2..K. Coefficients map back as theta = G' * (gamma, xi).
struct ConstancyTransform {
  Eigen::MatrixXd G;
  int reduced_dim = 0;

  Eigen::VectorXd reduced_basis(const SplineSpec& spec, double t) const {
    return eval_basis(spec, t).tail(reduced_dim);
  }
  Eigen::VectorXd theta_from(double gamma, const Eigen::VectorXd& xi) const {
    Eigen::VectorXd v(reduced_dim + 1);
    v << gamma, xi;
    return G.transpose() * v;
  }
};

inline ConstancyTransform make_constancy_transform(const SplineSpec& spec) {
  const int K = spec.basis_dim();
  if (K < 2) throw ArgumentError("constancy transform needs basis_dim >= 2");
  ConstancyTransform ct;
  ct.G = Eigen::MatrixXd::Identity(K, K);
  ct.G.row(0).setOnes();
  ct.reduced_dim = K - 1;
  return ct;
}

/// Column layout of the constancy split. Pi2 columns follow covariate order:
/// a tested covariate contributes its x column (the constant gamma_l), an
/// untested one its full spline block.
struct ConstancyDesign {
  Eigen::MatrixXd Pi1;
  Eigen::MatrixXd Pi2;
  std::vector<std::size_t> tested;
  std::vector<Eigen::Index> pi1_offsets;  // per tested covariate, plus total
  std::vector<Eigen::Index> pi2_offsets;  // per covariate, plus total
};

inline ConstancyDesign split_design_for_constancy(const LongitudinalDataset& ds,
                                                  const BasisSet& specs,
                                                  std::vector<std::size_t> tested) {
  if (tested.empty()) throw ArgumentError("constancy split: empty tested set");
  if (specs.size() != ds.p())
    throw DimensionError("constancy split: need one spline spec per varying covariate");
  std::sort(tested.begin(), tested.end());
  tested.erase(std::unique(tested.begin(), tested.end()), tested.end());
  if (tested.back() >= ds.p()) throw ArgumentError("constancy split: index out of range");

  const auto full = build_design(ds, specs);
  const auto off = block_offsets(specs);
  const auto N = full.Pi.rows();
  auto is_tested = [&](std::size_t l) {
    return std::binary_search(tested.begin(), tested.end(), l);
  };

  ConstancyDesign cd;
  cd.tested = tested;
  cd.pi1_offsets = {0};
  cd.pi2_offsets = {0};
  for (std::size_t l = 0; l < ds.p(); ++l) {
    const Eigen::Index k = specs[l].basis_dim();
    if (is_tested(l)) {
      if (k < 2) throw ArgumentError("constancy split: tested block needs basis_dim >= 2");
      cd.pi1_offsets.push_back(cd.pi1_offsets.back() + k - 1);
      cd.pi2_offsets.push_back(cd.pi2_offsets.back() + 1);
    } else {
      cd.pi2_offsets.push_back(cd.pi2_offsets.back() + k);
    }
  }
  cd.Pi1.resize(N, cd.pi1_offsets.back());
  cd.Pi2.resize(N, cd.pi2_offsets.back());
  std::size_t t_pos = 0;
  for (std::size_t l = 0; l < ds.p(); ++l) {
    const Eigen::Index k = specs[l].basis_dim();
    if (is_tested(l)) {
      cd.Pi1.middleCols(cd.pi1_offsets[t_pos], k - 1) = full.Pi.middleCols(off[l] + 1, k - 1);
      cd.Pi2.col(cd.pi2_offsets[l]) = ds.X().col(static_cast<Eigen::Index>(l));
      ++t_pos;
    } else {
      cd.Pi2.middleCols(cd.pi2_offsets[l], k) = full.Pi.middleCols(off[l], k);
    }
  }
  return cd;
}

inline ConstancyDesign split_design_for_constancy(const LongitudinalDataset& ds,
                                                  const SplineSpec& spec,
                                                  std::vector<std::size_t> tested) {
  return split_design_for_constancy(ds, uniform_basis_set(spec, ds.p()), std::move(tested));
}

}  // namespace plvcqr
