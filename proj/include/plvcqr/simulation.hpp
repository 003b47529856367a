#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/inference.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/random.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

/// Coefficient functions used to generate responses.
enum class Truth { plvc, lcc, constancy };

inline const char* to_string(Truth t) {
  switch (t) {
    case Truth::plvc: return "plvc";
    case Truth::lcc: return "lcc";
    case Truth::constancy: return "constancy";
  }
  return "?";
}

struct SimulationConfig {
  int error_case = 1;  // 1 exchangeable normal, 2 AR(1) normal, 3 exchangeable t(3)
  std::size_t n = 100;
  double tau = 0.5;
  double beta = 1.0;
  double eta = 1.0;
  double rho = 0.8;
  std::size_t reps = 100;
  std::uint64_t seed = 1;
  Truth truth = Truth::plvc;
  bool heteroscedastic = true;  // scale errors by (1 + |x1|)

  void check() const {
    if (error_case < 1 || error_case > 3) throw ArgumentError("simulation: case must be 1, 2 or 3");
    if (n < 1) throw ArgumentError("simulation: n must be >= 1");
    if (reps < 1) throw ArgumentError("simulation: reps must be >= 1");
    if (!(rho >= 0.0 && rho < 1.0)) throw DomainError("simulation: rho must lie in [0,1)");
    if (!(tau > 0.0 && tau < 1.0)) throw DomainError("simulation: tau outside (0,1)");
  }
};

/// alpha_l(t) of the data-generating model, t on the original scale.
inline double true_alpha(const SimulationConfig& cfg, std::size_t l, double t) {
  constexpr double pi = std::numbers::pi;
  if (cfg.truth == Truth::lcc) {
    constexpr double c[4] = {15.0, 2.0, 6.0, -4.0};
    return c[l];
  }
  switch (l) {
    case 0: return 15.0 + 20.0 * std::sin(t * pi / 20.0);
    case 1:
      if (cfg.truth == Truth::constancy) return 2.0 - 3.0 * cfg.eta * std::cos((t - 25.0) * pi / 15.0);
      return 2.0 - 3.0 * std::cos((3.0 * t - 25.0) * pi / 15.0);
    case 2: return 6.0 - 0.6 * t;
    case 3: {
      const double u = 20.0 - 3.0 * t;
      return -4.0 + u * u * u / 1000.0;
    }
    default: throw ArgumentError("true_alpha: coefficient index out of range");
  }
}

/// Scheduled times 0..10; each of 1..10 is skipped with probability 0.2 and
/// jittered by U(-0.5, 0.5) when kept. Time 0 is always present and not jittered.
inline std::vector<double> measurement_times(Rng& rng) {
  std::bernoulli_distribution skip(0.2);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::vector<double> t{0.0};
  for (int s = 1; s <= 10; ++s) {
    const bool skipped = skip(rng);
    const double j = jitter(rng);
    if (!skipped) t.push_back(static_cast<double>(s) + j);
  }
  std::sort(t.begin(), t.end());
  return t;
}

inline std::vector<double> measurement_times(std::uint64_t seed) {
  Rng rng(seed);
  return measurement_times(rng);
}

/// F^{-1}(tau) of the unit-variance normal (cases 1, 2) or t(3) (case 3) marginal.
inline double marginal_quantile(int error_case, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("marginal_quantile: tau outside (0,1)");
  if (error_case == 3) return boost::math::quantile(boost::math::students_t_distribution<double>(3.0), tau);
  if (error_case == 1 || error_case == 2) return boost::math::quantile(boost::math::normal_distribution<double>(), tau);
  throw ArgumentError("marginal_quantile: case must be 1, 2 or 3");
}

/// Within-subject correlation matrix for the given times.
inline Eigen::MatrixXd error_correlation(int error_case, double rho, const std::vector<double>& t) {
  const auto m = static_cast<Eigen::Index>(t.size());
  Eigen::MatrixXd S(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) {
      if (a == b) S(a, b) = 1.0;
      else if (error_case == 2)
        S(a, b) = std::pow(rho, std::abs(t[static_cast<std::size_t>(a)] - t[static_cast<std::size_t>(b)]));
      else S(a, b) = rho;
    }
  return S;
}

/// Raw errors e_i (before centering and scaling) for one subject.
inline Eigen::VectorXd draw_errors(int error_case, double rho, const std::vector<double>& t, Rng& rng) {
  const auto m = static_cast<Eigen::Index>(t.size());
  std::normal_distribution<double> nrm(0.0, 1.0);
  Eigen::VectorXd g(m);
  for (Eigen::Index j = 0; j < m; ++j) g(j) = nrm(rng);
  const Eigen::LLT<Eigen::MatrixXd> llt(error_correlation(error_case, rho, t));
  Eigen::VectorXd e = llt.matrixL() * g;
  if (error_case == 3) {
    std::chi_squared_distribution<double> chi(3.0);
    for (Eigen::Index j = 0; j < m; ++j) e(j) *= std::sqrt(3.0 / chi(rng));
  }
  return e;
}

struct SimulatedData {
  LongitudinalDataset data;
  Eigen::VectorXd raw_errors;  // e_ij in dataset order
};

/// Replicate `index` of the configured design. Varying covariates are
/// ("(intercept)", x1, x2, x3), the constant covariate is z.
inline SimulatedData gen_dataset_with_errors(const SimulationConfig& cfg, std::uint64_t index) {
  cfg.check();
  Rng rng = make_stream(cfg.seed, index);
  std::normal_distribution<double> nrm(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  std::bernoulli_distribution coin(0.5);
  const double shift = marginal_quantile(cfg.error_case, cfg.tau);

  std::vector<SubjectGroup> groups;
  std::vector<double> raw;
  groups.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    SubjectGroup g;
    g.id = "s" + std::to_string(i + 1);
    const auto t = measurement_times(rng);
    const double z = coin(rng) ? 1.0 : 0.0;
    const Eigen::VectorXd e = draw_errors(cfg.error_case, cfg.rho, t, rng);
    for (std::size_t j = 0; j < t.size(); ++j) {
      Observation o;
      o.subject_id = g.id;
      o.t = t[j];
      o.x.resize(4);
      o.x(0) = 1.0;
      o.x(1) = nrm(rng);
      o.x(2) = t[j] / 10.0 + 2.0 * unif(rng);
      o.x(3) = expo(rng);
      o.z = Eigen::VectorXd::Constant(1, z);
      const double ej = e(static_cast<Eigen::Index>(j));
      const double scale = cfg.heteroscedastic ? 1.0 + std::abs(o.x(1)) : 1.0;
      double y = cfg.beta * z + scale * (ej - shift);
      for (std::size_t l = 0; l < 4; ++l) y += true_alpha(cfg, l, o.t) * o.x(static_cast<Eigen::Index>(l));
      o.y = y;
      raw.push_back(ej);
      g.observations.push_back(std::move(o));
    }
    groups.push_back(std::move(g));
  }
  SimulatedData out{LongitudinalDataset(std::move(groups), {std::string(kInterceptName), "x1", "x2", "x3"}, {"z"}),
                    Eigen::Map<Eigen::VectorXd>(raw.data(), static_cast<Eigen::Index>(raw.size()))};
  return out;
}

inline LongitudinalDataset gen_dataset(const SimulationConfig& cfg, std::uint64_t index) {
  return gen_dataset_with_errors(cfg, index).data;
}

/// Worker count: explicit value, else PLVCQR_THREADS, else hardware concurrency.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PLVCQR_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(r) for r in [0, reps) on up to `threads` workers. Each call
/// writes only its own slot, so results do not depend on scheduling.
inline void parallel_for(std::size_t reps, unsigned threads, const std::function<void(std::size_t)>& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(reps, 1))));
  if (threads == 1) {
    for (std::size_t r = 0; r < reps; ++r) body(r);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t r = next++; r < reps; r = next++) body(r);
    });
  for (auto& th : pool) th.join();
}

/// A test applied in a level/power study.
enum class McTest { qrs, qrs_delta, wald, constancy_qrs, constancy_qrs_delta };

inline const char* to_string(McTest t) {
  switch (t) {
    case McTest::qrs: return "qrs";
    case McTest::qrs_delta: return "qrs_delta";
    case McTest::wald: return "wald";
    case McTest::constancy_qrs: return "constancy_qrs";
    case McTest::constancy_qrs_delta: return "constancy_qrs_delta";
  }
  return "?";
}

struct LevelPowerSpec {
  std::vector<McTest> tests{McTest::qrs, McTest::qrs_delta, McTest::wald};
  double level = 0.05;
  WeightMode weights = WeightMode::identity;  // rank score tests only
  std::optional<int> knots;                    // fixed k_n; SIC per replicate otherwise
  int degree = 3;
  std::size_t constancy_coef = 1;  // x1
  double failure_cap = 0.05;
  unsigned threads = 0;
};

struct McRate {
  std::string method;
  std::size_t valid = 0;
  std::size_t failures = 0;
  std::size_t rejections = 0;
  double rate = 0.0;
  double se = 0.0;  // binomial
  double statistic_mean = 0.0;
  double statistic_se = 0.0;
  double df_mean = 0.0;
};

struct McEstimate {
  std::string estimator;
  std::size_t valid = 0;
  std::size_t failures = 0;
  double bias = 0.0;
  double mse = 0.0;
  double mse_se = 0.0;
  std::vector<double> alpha_ise;  // per varying coefficient, mean over replicates
};

struct McReport {
  SimulationConfig config;
  std::size_t reps = 0;
  std::vector<McRate> rates;
  std::vector<McEstimate> estimates;
  double mean_knots = 0.0;
};

namespace detail {

inline void check_failures(std::size_t failures, std::size_t reps, double cap, const std::string& what) {
  if (static_cast<double>(failures) > cap * static_cast<double>(reps))
    throw SolverError(what + ": " + std::to_string(failures) + " of " + std::to_string(reps) +
                      " replicates failed, above the failure cap");
}

inline void mean_and_se(const std::vector<double>& v, double& mean, double& se) {
  mean = 0.0;
  se = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace detail

/// Rejection rates of the requested tests over cfg.reps replicates.
inline McReport mc_level_power(const SimulationConfig& cfg, const LevelPowerSpec& spec = {}) {
  cfg.check();
  if (spec.tests.empty()) throw ArgumentError("mc_level_power: no tests requested");
  const std::size_t T = spec.tests.size();
  struct Outcome {
    std::vector<std::optional<TestResult>> res;
    int k = -1;
  };
  std::vector<Outcome> out(cfg.reps);
  parallel_for(cfg.reps, resolve_threads(spec.threads), [&](std::size_t r) {
    auto& o = out[r];
    o.res.assign(T, std::nullopt);
    try {
      const auto ds = gen_dataset(cfg, r);
      const int k = spec.knots ? *spec.knots : select_knots(ds, cfg.tau, spec.degree).k_star;
      o.k = k;
      const auto specs = uniform_basis_set(make_spec(k, spec.degree), ds.p());
      for (std::size_t m = 0; m < T; ++m) {
        TestOptions topt;
        topt.weights = spec.weights;
        try {
          switch (spec.tests[m]) {
            case McTest::qrs: o.res[m] = rank_score_beta(ds, specs, cfg.tau, {0}, topt); break;
            case McTest::qrs_delta:
              topt.correlation = Correlation::exchangeable;
              o.res[m] = rank_score_beta(ds, specs, cfg.tau, {0}, topt);
              break;
            case McTest::wald: o.res[m] = wald_test(ds, specs, cfg.tau, {0}, topt); break;
            case McTest::constancy_qrs:
              o.res[m] = constancy_test(ds, specs, cfg.tau, {spec.constancy_coef}, topt);
              break;
            case McTest::constancy_qrs_delta:
              topt.correlation = Correlation::exchangeable;
              o.res[m] = constancy_test(ds, specs, cfg.tau, {spec.constancy_coef}, topt);
              break;
          }
        } catch (const Error&) {
        }
      }
    } catch (const Error&) {
    }
  });

  McReport rep;
  rep.config = cfg;
  rep.reps = cfg.reps;
  double ksum = 0.0;
  std::size_t kcount = 0;
  for (const auto& o : out)
    if (o.k >= 0) {
      ksum += o.k;
      ++kcount;
    }
  rep.mean_knots = kcount ? ksum / static_cast<double>(kcount) : 0.0;
  for (std::size_t m = 0; m < T; ++m) {
    McRate rate;
    rate.method = to_string(spec.tests[m]);
    std::vector<double> stats;
    double df_sum = 0.0;
    for (const auto& o : out) {
      if (!o.res[m]) {
        ++rate.failures;
        continue;
      }
      ++rate.valid;
      stats.push_back(o.res[m]->statistic);
      df_sum += o.res[m]->df;
      if (o.res[m]->p_value < spec.level) ++rate.rejections;
    }
    detail::check_failures(rate.failures, cfg.reps, spec.failure_cap, "mc_level_power/" + rate.method);
    if (rate.valid) {
      const double v = static_cast<double>(rate.valid);
      rate.rate = static_cast<double>(rate.rejections) / v;
      rate.se = std::sqrt(rate.rate * (1.0 - rate.rate) / v);
      rate.df_mean = df_sum / v;
    }
    detail::mean_and_se(stats, rate.statistic_mean, rate.statistic_se);
    rep.rates.push_back(rate);
  }
  return rep;
}

enum class Estimator { plvc, lcc };

inline const char* to_string(Estimator e) { return e == Estimator::plvc ? "plvc" : "lcc"; }

struct MseSpec {
  std::vector<Estimator> estimators{Estimator::plvc, Estimator::lcc};
  std::optional<int> knots;
  int degree = 3;
  double failure_cap = 0.05;
  unsigned threads = 0;
};

/// Monte Carlo bias and MSE of beta-hat under each estimator, plus the mean
/// over replicates of N^{-1} sum (alpha-hat_l - alpha_l)^2 at the design points.
inline McReport mc_mse(const SimulationConfig& cfg, const MseSpec& spec = {}) {
  cfg.check();
  if (spec.estimators.empty()) throw ArgumentError("mc_mse: no estimators requested");
  const std::size_t E = spec.estimators.size();
  struct Outcome {
    std::vector<std::optional<double>> beta;
    std::vector<std::vector<double>> ise;
    int k = -1;
  };
  std::vector<Outcome> out(cfg.reps);
  parallel_for(cfg.reps, resolve_threads(spec.threads), [&](std::size_t r) {
    auto& o = out[r];
    o.beta.assign(E, std::nullopt);
    o.ise.assign(E, {});
    std::optional<LongitudinalDataset> ds;
    try {
      ds = gen_dataset(cfg, r);
    } catch (const Error&) {
      return;
    }
    for (std::size_t e = 0; e < E; ++e) {
      try {
        QuantileFit f;
        if (spec.estimators[e] == Estimator::plvc) {
          const int k = spec.knots ? *spec.knots : select_knots(*ds, cfg.tau, spec.degree).k_star;
          o.k = k;
          f = fit(*ds, make_spec(k, spec.degree), cfg.tau);
        } else {
          f = fit_constant(*ds, cfg.tau);
        }
        o.beta[e] = f.beta(0);
        const auto& u = ds->unit_times();
        std::vector<double> ise(ds->p(), 0.0);
        Eigen::Index row = 0;
        for (const auto& s : ds->subjects())
          for (const auto& ob : s.observations) {
            for (std::size_t l = 0; l < ds->p(); ++l) {
              const double diff = eval_alpha_unit(f, l, u(row)) - true_alpha(cfg, l, ob.t);
              ise[l] += diff * diff;
            }
            ++row;
          }
        for (auto& v : ise) v /= static_cast<double>(ds->n_obs());
        o.ise[e] = std::move(ise);
      } catch (const Error&) {
      }
    }
  });

  McReport rep;
  rep.config = cfg;
  rep.reps = cfg.reps;
  double ksum = 0.0;
  std::size_t kcount = 0;
  for (const auto& o : out)
    if (o.k >= 0) {
      ksum += o.k;
      ++kcount;
    }
  rep.mean_knots = kcount ? ksum / static_cast<double>(kcount) : 0.0;
  for (std::size_t e = 0; e < E; ++e) {
    McEstimate est;
    est.estimator = to_string(spec.estimators[e]);
    std::vector<double> sq;
    double bias = 0.0;
    for (const auto& o : out) {
      if (o.beta.empty() || !o.beta[e]) {
        ++est.failures;
        continue;
      }
      ++est.valid;
      const double err = *o.beta[e] - cfg.beta;
      bias += err;
      sq.push_back(err * err);
      if (est.alpha_ise.empty()) est.alpha_ise.assign(o.ise[e].size(), 0.0);
      for (std::size_t l = 0; l < o.ise[e].size(); ++l) est.alpha_ise[l] += o.ise[e][l];
    }
    detail::check_failures(est.failures, cfg.reps, spec.failure_cap, "mc_mse/" + est.estimator);
    if (est.valid) {
      bias /= static_cast<double>(est.valid);
      est.bias = bias;
      for (auto& v : est.alpha_ise) v /= static_cast<double>(est.valid);
    }
    detail::mean_and_se(sq, est.mse, est.mse_se);
    rep.estimates.push_back(est);
  }
  return rep;
}

}  // namespace plvcqr
