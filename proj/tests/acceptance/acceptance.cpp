#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "plvcqr/density_weights.hpp"
#include "plvcqr/inference.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/qr_solver.hpp"
#include "plvcqr/shrinkage.hpp"
#include "plvcqr/simulation.hpp"
#include "plvcqr/spline_basis.hpp"

using namespace plvcqr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

unsigned threads = 0;

SimulationConfig design(std::size_t n, std::size_t reps, std::uint64_t seed) {
  SimulationConfig cfg;
  cfg.error_case = 1;
  cfg.tau = 0.5;
  cfg.n = n;
  cfg.reps = reps;
  cfg.seed = seed;
  return cfg;
}

McRate rate_of(const SimulationConfig& cfg, McTest test, std::optional<int> knots = std::nullopt) {
  LevelPowerSpec spec;
  spec.tests = {test};
  spec.knots = knots;
  spec.threads = threads;
  return mc_level_power(cfg, spec).rates.at(0);
}

// reference value +/- max(0.02, 3 binomial SEs)
Outcome within_reference(const McRate& r, double ref) {
  const double tol = std::max(0.02, 3.0 * r.se);
  return {std::abs(r.rate - ref) <= tol,
          fmt("rate=%.4f se=%.4f valid=%zu ref=%.3f tol=%.4f", r.rate, r.se, r.valid, ref, tol)};
}

// ---- Monte Carlo reproductions ----

Outcome c1_level_qrs() {
  auto cfg = design(100, 2000, 101);
  cfg.beta = 0.0;
  return within_reference(rate_of(cfg, McTest::qrs), 0.053);
}

Outcome c2_wald_over_rejection() {
  auto cfg = design(30, 2000, 102);
  cfg.beta = 0.0;
  LevelPowerSpec spec;
  spec.tests = {McTest::qrs, McTest::wald};
  spec.threads = threads;
  const auto rep = mc_level_power(cfg, spec);
  const auto& q = rep.rates[0];
  const auto& w = rep.rates[1];
  return {w.rate > q.rate && w.rate > 0.08, fmt("wald=%.4f qrs=%.4f (ref 0.130 vs 0.061)", w.rate, q.rate)};
}

Outcome c3_constancy_level() {
  auto cfg = design(100, 2000, 103);
  cfg.truth = Truth::constancy;
  cfg.eta = 0.0;
  return within_reference(rate_of(cfg, McTest::constancy_qrs), 0.049);
}

Outcome c4_efficiency() {
  MseSpec spec;
  spec.threads = threads;
  auto cfg = design(100, 1000, 104);
  const auto plvc = mc_mse(cfg, spec);
  const double r1 = plvc.estimates[1].mse / plvc.estimates[0].mse;
  cfg.truth = Truth::lcc;
  const auto lcc = mc_mse(cfg, spec);
  const double r2 = lcc.estimates[1].mse / lcc.estimates[0].mse;
  return {r1 >= 1.4 && r2 >= 0.9 && r2 <= 1.1,
          fmt("plvc truth ratio=%.3f (mse %.4f/%.4f, ref 1.68); lcc truth ratio=%.3f (ref 1.00)", r1,
              plvc.estimates[1].mse, plvc.estimates[0].mse, r2)};
}

Outcome monotone(const std::vector<McRate>& rates, const std::vector<double>& grid, const char* label) {
  bool ok = true;
  std::string d = label;
  for (std::size_t k = 0; k < rates.size(); ++k) {
    d += fmt(" %.2f:%.4f", grid[k], rates[k].rate);
    if (k > 0) {
      const double slack = 2.0 * std::hypot(rates[k].se, rates[k - 1].se);
      ok = ok && rates[k].rate >= rates[k - 1].rate - slack;
    }
  }
  return {ok, d};
}

Outcome c5_power_monotone() {
  const std::vector<double> betas{0.0, 0.5, 1.0}, etas{0.0, 0.75, 1.5};
  std::vector<McRate> rb, re;
  for (double b : betas) {
    auto cfg = design(100, 300, 105);
    cfg.beta = b;
    rb.push_back(rate_of(cfg, McTest::qrs));
  }
  for (double e : etas) {
    auto cfg = design(100, 300, 205);
    cfg.truth = Truth::constancy;
    cfg.eta = e;
    re.push_back(rate_of(cfg, McTest::constancy_qrs));
  }
  const auto a = monotone(rb, betas, "beta"), b = monotone(re, etas, "eta");
  return {a.pass && b.pass, a.detail + "; " + b.detail};
}

Outcome c6_rate() {
  MseSpec spec;
  spec.estimators = {Estimator::plvc};
  spec.threads = threads;
  const auto small = mc_mse(design(50, 100, 106), spec).estimates[0];
  const auto large = mc_mse(design(200, 100, 106), spec).estimates[0];
  bool ok = true;
  std::string d;
  for (std::size_t l = 0; l < small.alpha_ise.size(); ++l) {
    ok = ok && large.alpha_ise[l] < small.alpha_ise[l];
    d += fmt("l=%zu n50=%.4f n200=%.4f ", l, small.alpha_ise[l], large.alpha_ise[l]);
  }
  return {ok, d};
}

// ---- deterministic properties ----

double subset_oracle(const QrProblem& pb) {
  const auto N = pb.design.rows(), d = pb.design.cols();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(d));
  double best = std::numeric_limits<double>::infinity();
  std::function<void(Eigen::Index, Eigen::Index)> rec = [&](Eigen::Index start, Eigen::Index depth) {
    if (depth == d) {
      Eigen::MatrixXd H(d, d);
      Eigen::VectorXd h(d);
      for (Eigen::Index k = 0; k < d; ++k) {
        H.row(k) = pb.design.row(idx[static_cast<std::size_t>(k)]);
        h(k) = pb.response(idx[static_cast<std::size_t>(k)]);
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(H);
      if (lu.isInvertible()) best = std::min(best, qr_objective(pb, lu.solve(h)));
      return;
    }
    for (Eigen::Index i = start; i < N; ++i) {
      idx[static_cast<std::size_t>(depth)] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
  return best;
}

Outcome c7_solver_oracle() {
  std::mt19937_64 rng(107);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> tu(0.05, 0.95);
  double worst = 0.0;
  std::size_t infeasible = 0;
  for (int k = 0; k < 200; ++k) {
    const int d = std::uniform_int_distribution<int>(1, 3)(rng);
    const int N = std::uniform_int_distribution<int>(d, 12)(rng);
    QrProblem pb;
    pb.design.resize(N, d);
    pb.response.resize(N);
    for (int i = 0; i < N; ++i) {
      pb.design(i, 0) = 1.0;
      for (int j = 1; j < d; ++j) pb.design(i, j) = g(rng);
      pb.response(i) = 1.0 + pb.design.row(i).sum() + 2.0 * g(rng);
    }
    pb.tau = tu(rng);
    const auto sol = solve(pb);
    worst = std::max(worst, std::abs(sol.objective - subset_oracle(pb)));
    if (!optimality_certificate(pb, sol.coefficients).feasible) ++infeasible;
  }
  return {worst <= 1e-8 && infeasible == 0, fmt("max |objective - oracle|=%.3g infeasible=%zu", worst, infeasible)};
}

Outcome c8_spline() {
  double worst = 0.0;
  int count = 0;
  for (int degree : {0, 1, 2, 3, 4})
    for (int k : {0, 1, 4, 9}) {
      const auto spec = make_spec(k, degree);
      ++count;
      for (int g = 0; g < 1000; ++g) {
        const double t = static_cast<double>(g) / 999.0;
        worst = std::max(worst, std::abs(eval_basis(spec, t).sum() - 1.0));
      }
    }
  const Eigen::VectorXd b = eval_basis(make_spec(0, 3), 0.5);
  const Eigen::Vector4d want(0.125, 0.375, 0.375, 0.125);
  const double bern = (b - want).cwiseAbs().maxCoeff();
  return {count == 20 && worst <= 1e-12 && bern <= 1e-12,
          fmt("specs=%d max |sum-1|=%.3g bernstein err=%.3g", count, worst, bern)};
}

Outcome c9_orthogonality() {
  double worst = 0.0;
  int n_checks = 0;
  auto cfg = design(60, 1, 109);
  TestOptions est;
  est.weights = WeightMode::estimated;
  for (std::uint64_t r = 0; r < 10; ++r) {
    const auto ds = gen_dataset(cfg, r);
    const auto specs = uniform_basis_set(make_spec(2, 3), ds.p());
    for (const TestOptions& o : {TestOptions{}, est}) {
      worst = std::max(worst, rank_score_beta_detail(ds, specs, 0.5, {0}, o).residualized.orthogonality);
      worst = std::max(worst, constancy_test_detail(ds, specs, 0.5, {1}, o).residualized.orthogonality);
      worst = std::max(worst, constancy_test_detail(ds, specs, 0.3, {1, 2}, o).residualized.orthogonality);
      n_checks += 3;
    }
    worst = std::max(worst, wald_test(ds, specs, 0.5, {0}).aux.at("orthogonality"));
    ++n_checks;
  }
  return {worst <= 1e-8, fmt("residualizations=%d max ||D'BW||/(||D|| ||W||)=%.3g", n_checks, worst)};
}

Outcome c10_nuisance_invariance() {
  const auto ds = gen_dataset(design(80, 1, 110), 0);
  const auto d = build_design(ds, make_spec(2, 3));
  const Eigen::MatrixXd& W = d.Pi;
  const Eigen::MatrixXd T = d.Z;
  const Eigen::VectorXd B = estimate_weights(ds, make_spec(2, 3), 0.5).f_hat;
  std::mt19937_64 rng(210);
  std::normal_distribution<double> g;
  double worst = 0.0;
  for (auto corr : {Correlation::empirical, Correlation::exchangeable})
    for (const Eigen::VectorXd& weights : {Eigen::VectorXd{}, B}) {
      const double base =
          rank_score_test(T, W, ds.response(), 0.5, ds.subject_offsets(), corr, weights).result.statistic;
      for (int k = 0; k < 20; ++k) {
        Eigen::MatrixXd C(W.cols(), T.cols());
        for (Eigen::Index i = 0; i < C.size(); ++i) C(i) = g(rng);
        const Eigen::MatrixXd Tc = T + W * C;
        const double s =
            rank_score_test(Tc, W, ds.response(), 0.5, ds.subject_offsets(), corr, weights).result.statistic;
        worst = std::max(worst, std::abs(s - base) / std::max(std::abs(base), 1e-300));
      }
    }
  return {worst <= 1e-8, fmt("max relative change=%.3g over 20 C x 2 correlations x 2 weightings", worst)};
}

Outcome c11_null_calibration() {
  auto cfg = design(100, 1000, 111);
  cfg.beta = 0.0;
  cfg.rho = 0.0;
  cfg.heteroscedastic = false;
  cfg.truth = Truth::constancy;
  cfg.eta = 0.0;
  const int k = 2, degree = 3;
  LevelPowerSpec spec;
  spec.tests = {McTest::qrs, McTest::constancy_qrs};
  spec.knots = k;
  spec.degree = degree;
  spec.threads = threads;
  const auto rep = mc_level_power(cfg, spec);
  const auto& T = rep.rates[0];
  const auto& t = rep.rates[1];
  const double want_T = 1.0, want_t = static_cast<double>(k + degree) * 1.0;
  const bool ok = std::abs(T.statistic_mean - want_T) <= 3.0 * T.statistic_se &&
                  std::abs(t.statistic_mean - want_t) <= 3.0 * t.statistic_se;
  return {ok, fmt("mean T_n=%.4f (se %.4f, want %.0f); mean t_n=%.4f (se %.4f, want %.0f)", T.statistic_mean,
                  T.statistic_se, want_T, t.statistic_mean, t.statistic_se, want_t)};
}

// exact agreement of the leading four significant figures
bool four_sig(double value, double ref) {
  const double scale = std::pow(10.0, 3 - std::floor(std::log10(std::abs(ref))));
  return std::round(value * scale) == std::round(ref * scale);
}

Outcome c12_hall_sheather() {
  const double e8 = hall_sheather_bandwidth(0.5, 8), e1000 = hall_sheather_bandwidth(0.5, 1000);
  return {four_sig(e8, 0.3022) && four_sig(e1000, 0.06043),
          fmt("n=8: %.7f (ref 0.3022); n=1000: %.8f (ref 0.06043)", e8, e1000)};
}

Outcome c13_shrinkage_path() {
  auto cfg = design(100, 1, 113);
  cfg.truth = Truth::constancy;
  double worst_increase = 0.0, worst_zero = 0.0;
  for (double eta : {0.0, 1.0})
    for (std::uint64_t r = 0; r < 3; ++r) {
      cfg.eta = eta;
      const auto ds = gen_dataset(cfg, r);
      const auto spec = make_spec(2, 3);
      const auto res = shrinkage_constancy(ds, spec, 0.5, {1});
      for (std::size_t k = 1; k < res.sic_path.size(); ++k)
        worst_increase = std::max(worst_increase, res.sic_path[k].xi1_l1norm - res.sic_path[k - 1].xi1_l1norm);
      const auto sd = shrinkage_design(ds, uniform_basis_set(spec, ds.p()), {1});
      QrProblem pb;
      pb.design = sd.A;
      pb.response = ds.response();
      pb.tau = 0.5;
      const double unpen = xi1_l1norm(sd, solve(pb).coefficients);
      worst_zero = std::max(worst_zero, std::abs(res.sic_path.front().xi1_l1norm - unpen));
    }
  return {worst_increase <= 1e-6 && worst_zero <= 1e-8,
          fmt("max path increase=%.3g; max |lambda=0 - unpenalized|=%.3g", worst_increase, worst_zero)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, Criterion> criteria{
      {1, {"QRS level, case 1, n=100", c1_level_qrs}},
      {2, {"Wald over-rejection, n=30", c2_wald_over_rejection}},
      {3, {"constancy QRS level, n=100", c3_constancy_level}},
      {4, {"LCC/PLVC MSE ratio", c4_efficiency}},
      {5, {"power monotone in beta and eta", c5_power_monotone}},
      {6, {"coefficient ISE decreases n=50 -> n=200", c6_rate}},
      {7, {"solver matches subset oracle with certificate", c7_solver_oracle}},
      {8, {"spline partition of unity and Bernstein values", c8_spline}},
      {9, {"projection orthogonality", c9_orthogonality}},
      {10, {"nuisance invariance", c10_nuisance_invariance}},
      {11, {"null calibration of statistic means", c11_null_calibration}},
      {12, {"Hall-Sheather median values", c12_hall_sheather}},
      {13, {"shrinkage path", c13_shrinkage_path}},
  };

  CLI::App app{"Acceptance checks", "plvcqr_acceptance"};
  std::vector<int> selected;
  app.add_option("--criterion,-c", selected, "Run only these criteria")->delimiter(',');
  app.add_option("--threads", threads, "Monte Carlo worker cap");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty())
    for (const auto& [id, c] : criteria) selected.push_back(id);

  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << "\n";
      return 1;
    }
    Outcome o;
    try {
      o = it->second.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << it->second.name << "): " << o.detail
              << std::endl;
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
