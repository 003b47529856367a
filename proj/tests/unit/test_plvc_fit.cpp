#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/simulation.hpp"

using namespace plvcqr;

namespace {

double cox_de_boor(const std::vector<double>& U, int s, int k, double t) {
  if (k == 0) {
    if (U[s] < U[s + 1] && U[s] <= t && t < U[s + 1]) return 1.0;
    if (t == U.back() && U[s + 1] == U.back() && U[s] < U[s + 1]) return 1.0;
    return 0.0;
  }
  double v = 0.0;
  if (U[s + k] > U[s]) v += (t - U[s]) / (U[s + k] - U[s]) * cox_de_boor(U, s, k - 1, t);
  if (U[s + k + 1] > U[s + 1]) v += (U[s + k + 1] - t) / (U[s + k + 1] - U[s + 1]) * cox_de_boor(U, s + 1, k - 1, t);
  return v;
}

using Curve = double (*)(double);

// y = x1 * a(t) + z + noise; x0 is the intercept with coefficient 0.
LongitudinalDataset make_data(std::uint64_t seed, std::size_t n, std::size_t m, Curve a, double noise) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SubjectGroup> groups;
  for (std::size_t i = 0; i < n; ++i) {
    SubjectGroup s{"s" + std::to_string(i), {}};
    for (std::size_t j = 0; j < m; ++j) {
      Observation o;
      o.subject_id = s.id;
      o.t = 10.0 * u(rng);
      o.x = Eigen::Vector2d(1.0, 1.0 + u(rng));
      o.z = Eigen::VectorXd::Constant(1, g(rng));
      o.y = o.x(1) * a(o.t / 10.0) + o.z(0) + noise * g(rng);
      s.observations.push_back(o);
    }
    groups.push_back(std::move(s));
  }
  return LongitudinalDataset(std::move(groups), {std::string(kInterceptName), "x1"}, {"z"});
}

double flat(double) { return 2.0; }
double wiggly(double t) { return 2.0 + 3.0 * std::sin(4.0 * std::numbers::pi * t); }

std::size_t zero_residuals(const QuantileFit& f) {
  return static_cast<std::size_t>((f.residuals.array().abs() <= 1e-9 * (1.0 + f.residuals.cwiseAbs().maxCoeff())).count());
}

}  // namespace

TEST(Fit, NoiseFreeInterpolation) {
  const auto ds = make_data(1, 12, 4, flat, 0.0);
  const auto f = fit(ds, make_spec(1, 3), 0.5);
  EXPECT_LE(f.objective, 1e-9);
  EXPECT_NEAR(f.beta(0), 1.0, 1e-9);
  for (double t : {0.0, 2.5, 7.0}) EXPECT_NEAR(eval_alpha(f, 1, std::clamp(t, ds.time_map().t_min(), ds.time_map().t_max())), 2.0, 1e-8);
}

TEST(Fit, SingleSubjectLineCubicNoKnots) {
  std::vector<Observation> obs;
  for (int j = 0; j < 8; ++j) {
    Observation o;
    o.subject_id = "a";
    o.t = j / 7.0;
    o.y = 1.5 - 2.0 * o.t;
    o.x = Eigen::VectorXd::Ones(1);
    o.z = Eigen::VectorXd(0);
    obs.push_back(o);
  }
  const LongitudinalDataset ds({SubjectGroup{"a", obs}}, {"x"}, {});
  const auto spec = make_spec(0, 3);
  const auto f = fit(ds, spec, 0.5);
  // direct solve on the 4-column basis design
  Eigen::MatrixXd B(8, 4);
  for (int j = 0; j < 8; ++j) B.row(j) = eval_basis(spec, j / 7.0).transpose();
  const Eigen::VectorXd c = B.colPivHouseholderQr().solve(ds.response());
  EXPECT_LE((f.theta[0] - c).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE(f.objective, 1e-10);
  EXPECT_NEAR(eval_alpha(f, 0, 0.37), 1.5 - 2.0 * 0.37, 1e-9);
}

TEST(Fit, ResidualsMatchCoefficients) {
  for (double tau : {0.1, 0.5, 0.9}) {
    const auto ds = make_data(2, 20, 5, wiggly, 1.0);
    const auto f = fit(ds, make_spec(2, 3), tau);
    const auto d = build_design(ds, f.specs);
    Eigen::MatrixXd A(d.Pi.rows(), d.Pi.cols() + d.Z.cols());
    A << d.Pi, d.Z;
    const Eigen::VectorXd r = ds.response() - A * f.coefficients();
    EXPECT_LE((r - f.residuals).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE(zero_residuals(f), f.parameter_count());
    double loss = 0;
    for (double e : r) loss += e * (tau - (e < 0 ? 1.0 : 0.0));
    EXPECT_NEAR(loss, f.objective, 1e-9 * loss);
  }
}

TEST(Fit, VertexPropertyOnSimulatedData) {
  SimulationConfig cfg;
  cfg.n = 30;
  for (std::uint64_t r = 0; r < 10; ++r) {
    const auto ds = gen_dataset(cfg, r);
    for (double tau : {0.25, 0.5}) {
      const auto f = fit(ds, make_spec(1, 3), tau);
      EXPECT_LE(zero_residuals(f), f.parameter_count());
      EXPECT_GE(zero_residuals(f), 1u);
    }
  }
}

TEST(Fit, NestingBound) {
  SimulationConfig cfg;
  cfg.n = 40;
  for (std::uint64_t r = 0; r < 5; ++r) {
    const auto ds = gen_dataset(cfg, r);
    for (double tau : {0.2, 0.5, 0.8}) {
      const auto lcc = fit_constant(ds, tau);
      for (int k : {0, 1, 3}) EXPECT_LE(fit(ds, make_spec(k, 3), tau).objective, lcc.objective + 1e-8);
    }
  }
}

TEST(SelectKnots, SicArithmetic) {
  EXPECT_NEAR(sic_value(50.0, 100, 4 * (3 + 2 + 1) + 1), 4.4877, 5e-5);
  EXPECT_NEAR(sic_value(50.0, 100, 25), std::log(50.0) + std::log(100.0) / 200.0 * 25.0, 1e-15);
}

TEST(SelectKnots, TiesBrokenDownward) {
  std::vector<SicEntry> t(3);
  t[0].k = 1;
  t[0].sic = 2.0;
  t[1].k = 2;
  t[1].sic = 1.0;
  t[2].k = 3;
  t[2].sic = 1.0;
  EXPECT_EQ(argmin_sic(t), 2);
  t[1].failed = true;
  EXPECT_EQ(argmin_sic(t), 3);
}

TEST(SelectKnots, WigglyCoefficientNeedsMoreKnots) {
  const auto a = make_data(5, 60, 8, wiggly, 0.3);
  const auto b = make_data(5, 60, 8, flat, 0.3);
  const KnotRange range{0, 6};
  const auto sa = select_knots(a, 0.5, 3, range);
  const auto sb = select_knots(b, 0.5, 3, range);
  EXPECT_GT(sa.k_star, sb.k_star);
  EXPECT_EQ(sa.table.size(), 7u);
  for (const auto& e : sa.table) {
    EXPECT_FALSE(e.failed);
    EXPECT_EQ(e.n_params, 2u * static_cast<std::size_t>(3 + e.k + 1) + 1u);
  }
}

TEST(SelectKnots, DefaultRange) {
  EXPECT_EQ(default_knot_range(100).lo, 1);
  EXPECT_EQ(default_knot_range(100).hi, 3 + 2);
  EXPECT_EQ(default_knot_range(1024).hi, 4 + 2);
  EXPECT_EQ(default_knot_range(1025).hi, 5 + 2);
}

TEST(SelectKnots, EmptyRangeThrows) {
  const auto ds = make_data(1, 5, 4, flat, 1.0);
  EXPECT_THROW(select_knots(ds, 0.5, 3, KnotRange{3, 2}), ArgumentError);
}

TEST(EvalAlpha, ConstantAndUnitCoefficients) {
  const auto ds = make_data(3, 10, 4, flat, 1.0);
  auto f = fit(ds, make_spec(2, 3), 0.5);
  const double lo = ds.time_map().t_min(), hi = ds.time_map().t_max();
  f.theta[1].setConstant(4.25);
  for (int g = 0; g <= 20; ++g) EXPECT_NEAR(eval_alpha(f, 1, lo + (hi - lo) * g / 20.0), 4.25, 1e-12);
  f.theta[1].setZero();
  f.theta[1](0) = 1.0;
  EXPECT_DOUBLE_EQ(eval_alpha(f, 1, lo), 1.0);
  EXPECT_THROW(eval_alpha(f, 1, hi + 1.0), ExtrapolationError);
  EXPECT_THROW(eval_alpha(f, 7, lo), DimensionError);
}

TEST(EvalAlpha, MatchesCoxDeBoor) {
  const auto ds = make_data(4, 10, 4, wiggly, 1.0);
  auto f = fit(ds, make_spec(3, 3), 0.5);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  for (auto& v : f.theta[0]) v = g(rng);
  const double t = ds.time_map().to_original(0.37);
  double want = 0;
  for (int s = 0; s < f.specs[0].basis_dim(); ++s) want += f.theta[0](s) * cox_de_boor(f.specs[0].knots, s, 3, 0.37);
  EXPECT_NEAR(eval_alpha(f, 0, t), want, 1e-12);
}

TEST(PredictQuantile, ZeroUnitAndAffine) {
  const auto ds = make_data(6, 15, 4, wiggly, 1.0);
  const auto f = fit(ds, make_spec(2, 3), 0.4);
  const double t = ds.time_map().to_original(0.6);
  EXPECT_DOUBLE_EQ(predict_quantile(f, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1), t), 0.0);
  EXPECT_NEAR(predict_quantile(f, Eigen::Vector2d(0, 1), Eigen::VectorXd::Zero(1), t), eval_alpha(f, 1, t), 1e-14);
  const Eigen::Vector2d x1(1.0, 0.3), x2(1.0, 2.2);
  const Eigen::VectorXd z1 = Eigen::VectorXd::Constant(1, -0.5), z2 = Eigen::VectorXd::Constant(1, 1.5);
  const double w = 0.3;
  const double lhs = predict_quantile(f, w * x1 + (1 - w) * x2, w * z1 + (1 - w) * z2, t);
  const double rhs = w * predict_quantile(f, x1, z1, t) + (1 - w) * predict_quantile(f, x2, z2, t);
  EXPECT_NEAR(lhs, rhs, 1e-12);
  EXPECT_THROW(predict_quantile(f, Eigen::VectorXd::Zero(3), z1, t), DimensionError);
}

TEST(PredictQuantile, ZeroResidualPointReturnsY) {
  const auto ds = make_data(7, 15, 4, wiggly, 1.0);
  const auto f = fit(ds, make_spec(1, 3), 0.5);
  Eigen::Index i = 0;
  f.residuals.cwiseAbs().minCoeff(&i);
  ASSERT_LE(std::abs(f.residuals(i)), 1e-9);
  const double t = ds.time_map().to_original(ds.unit_times()(i));
  EXPECT_NEAR(predict_quantile(f, ds.X().row(i).transpose(), ds.Z().row(i).transpose(), t), ds.response()(i), 1e-8);
}

TEST(FitProcess, SingletonMatchesFit) {
  const auto ds = make_data(8, 15, 4, wiggly, 1.0);
  const auto spec = make_spec(1, 3);
  const auto proc = fit_process(ds, spec, {0.5});
  const auto f = fit(ds, spec, 0.5);
  ASSERT_EQ(proc.fits.size(), 1u);
  EXPECT_EQ(proc.fits[0].coefficients(), f.coefficients());
  EXPECT_EQ(proc.fits[0].objective, f.objective);
}

TEST(FitProcess, OrderedAtCovariateMean) {
  const auto ds = make_data(9, 150, 6, wiggly, 1.0);
  const auto proc = fit_process(ds, make_spec(1, 3), {0.25, 0.5, 0.75});
  const Eigen::VectorXd xbar = ds.X().colwise().mean().transpose();
  const Eigen::VectorXd zbar = ds.Z().colwise().mean().transpose();
  const double lo = ds.time_map().t_min(), hi = ds.time_map().t_max();
  for (int g = 1; g < 10; ++g) {
    const double t = lo + (hi - lo) * g / 10.0;
    const double q1 = predict_quantile(proc.fits[0], xbar, zbar, t);
    const double q2 = predict_quantile(proc.fits[1], xbar, zbar, t);
    const double q3 = predict_quantile(proc.fits[2], xbar, zbar, t);
    EXPECT_LT(q1, q2);
    EXPECT_LT(q2, q3);
  }
}

TEST(FitProcess, BadGrids) {
  const auto ds = make_data(1, 5, 4, flat, 1.0);
  EXPECT_THROW(fit_process(ds, make_spec(0, 3), {}), ArgumentError);
  EXPECT_THROW(fit_process(ds, make_spec(0, 3), {0.5, 0.4}), ArgumentError);
  EXPECT_THROW(fit_process(ds, make_spec(0, 3), {0.0, 0.5}), DomainError);
}

TEST(Assess, NoiseFreeModelReproducesResponses) {
  const auto ds = make_data(10, 20, 5, flat, 0.0);
  const auto proc = fit_process(ds, make_spec(1, 3), {0.1, 0.5, 0.9});
  const auto& o = ds.subjects()[3].observations[2];
  const auto s = assess(proc, ds, o.t, 0.0, 50, 4);
  ASSERT_EQ(s.simulated.size(), 50u);
  ASSERT_EQ(s.observed.size(), 1u);
  for (double v : s.simulated) EXPECT_NEAR(v, o.y, 1e-8);
}

TEST(Assess, ZeroDrawsAndEmptyWindow) {
  const auto ds = make_data(11, 10, 4, flat, 1.0);
  const auto proc = fit_process(ds, make_spec(0, 3), {0.25, 0.75});
  const double t = ds.subjects()[0].observations[0].t;
  EXPECT_TRUE(assess(proc, ds, t, 1e-3, 0, 1).simulated.empty());
  EXPECT_THROW(assess(proc, ds, ds.time_map().t_max() + 5.0, 1e-3, 10, 1), EmptyWindowError);
}

TEST(Assess, SeedDeterminismAndClamping) {
  const auto ds = make_data(12, 30, 4, wiggly, 1.0);
  const auto proc = fit_process(ds, make_spec(1, 3), {0.25, 0.5, 0.75});
  const auto& o = ds.subjects()[0].observations[0];
  const auto a = assess(proc, ds, o.t, 0.05, 200, 9);
  const auto b = assess(proc, ds, o.t, 0.05, 200, 9);
  EXPECT_EQ(a.simulated, b.simulated);
  // below 0.25 and above 0.75 the process is clamped to the fitted end quantiles
  const double lo = process_quantile(proc, o.x, o.z, o.t, 0.01);
  const double hi = process_quantile(proc, o.x, o.z, o.t, 0.99);
  EXPECT_DOUBLE_EQ(lo, process_quantile(proc, o.x, o.z, o.t, 0.25));
  EXPECT_DOUBLE_EQ(hi, process_quantile(proc, o.x, o.z, o.t, 0.75));
  const double mid = process_quantile(proc, o.x, o.z, o.t, 0.375);
  EXPECT_NEAR(mid, 0.5 * (process_quantile(proc, o.x, o.z, o.t, 0.25) + process_quantile(proc, o.x, o.z, o.t, 0.5)), 1e-12);
}

TEST(Assess, CrossingQuantilesAreSorted) {
  const auto ds = make_data(13, 10, 4, flat, 1.0);
  auto proc = fit_process(ds, make_spec(0, 3), {0.25, 0.75});
  std::swap(proc.fits[0], proc.fits[1]);  // force crossing
  const auto& o = ds.subjects()[0].observations[0];
  double prev = -1e300;
  for (int k = 0; k <= 20; ++k) {
    const double v = process_quantile(proc, o.x, o.z, o.t, k / 20.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Fit, CaseOneMonteCarloMse) {
  // 400 replicates; the tolerance is the larger of 0.02 and 3 Monte Carlo standard errors
  SimulationConfig cfg;
  cfg.reps = 400;
  cfg.seed = 2;
  MseSpec spec;
  spec.estimators = {Estimator::plvc};
  const auto rep = mc_mse(cfg, spec);
  ASSERT_EQ(rep.estimates.size(), 1u);
  const auto& e = rep.estimates[0];
  EXPECT_NEAR(e.mse, 0.111, std::max(0.02, 3.0 * e.mse_se)) << "se " << e.mse_se;
}
