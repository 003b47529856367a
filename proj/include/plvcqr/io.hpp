#pragma once

#include <json.hpp>

#include <ostream>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/inference.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/shrinkage.hpp"
#include "plvcqr/simulation.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr {

using Json = nlohmann::ordered_json;

inline Json to_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Json to_json(const SplineSpec& s) {
  return Json{{"degree", s.degree}, {"k_internal", s.k_internal}, {"knots", s.knots}};
}

/// tau, knots, degree, theta (one row per varying coefficient), beta, objective.
inline Json to_json(const QuantileFit& f) {
  Json j;
  j["tau"] = f.tau;
  const auto& s0 = f.specs.front();
  j["degree"] = s0.degree;
  j["k_internal"] = s0.k_internal;
  j["knots"] = s0.knots;
  bool uniform = true;
  for (const auto& s : f.specs) uniform = uniform && s == s0;
  if (!uniform) {
    Json per = Json::array();
    for (const auto& s : f.specs) per.push_back(to_json(s));
    j["specs"] = per;
  }
  j["time_range"] = {f.time_map.t_min(), f.time_map.t_max()};
  j["x_names"] = f.x_names;
  j["z_names"] = f.z_names;
  Json theta = Json::array();
  for (const auto& t : f.theta) theta.push_back(to_json(t));
  j["theta"] = theta;
  j["beta"] = to_json(f.beta);
  j["objective"] = f.objective;
  j["status"] = to_string(f.status);
  j["design_rank"] = f.design_rank;
  return j;
}

inline Json to_json(const KnotSelection& sel) {
  Json table = Json::array();
  for (const auto& e : sel.table) {
    Json r{{"k", e.k}, {"failed", e.failed}};
    if (e.failed) r["error"] = e.error;
    else {
      r["loss"] = e.loss;
      r["sic"] = e.sic;
      r["n_params"] = e.n_params;
    }
    table.push_back(r);
  }
  return Json{{"k_star", sel.k_star}, {"table", table}};
}

inline Json to_json(const TestResult& r) {
  Json aux = Json::object();
  for (const auto& [k, v] : r.aux) aux[k] = v;
  return Json{{"method", to_string(r.method)}, {"statistic", r.statistic}, {"df", r.df},
              {"p_value", r.p_value}, {"aux", aux}};
}

inline Json to_json(const AssessmentSample& s) {
  return Json{{"t_star", s.t_star}, {"simulated", s.simulated}, {"observed", s.observed}};
}

inline Json to_json(const ShrinkageResult& r) {
  Json path = Json::array();
  for (const auto& p : r.sic_path) {
    Json e{{"lambda", p.lambda}, {"failed", p.failed}};
    if (!p.failed) {
      e["loss"] = p.loss;
      e["sic"] = p.sic;
      e["df"] = p.df;
      e["xi1_l1norm"] = p.xi1_l1norm;
    }
    path.push_back(e);
  }
  return Json{{"lambda_star", r.lambda_star}, {"xi1_l1norm", r.xi1_l1norm}, {"df", r.df},
              {"lambda_max", r.lambda_max}, {"sic_path", path}};
}

inline Json to_json(const SimulationConfig& c) {
  return Json{{"case", c.error_case}, {"n", c.n},         {"tau", c.tau},   {"beta", c.beta},
              {"eta", c.eta},         {"rho", c.rho},     {"reps", c.reps}, {"seed", c.seed},
              {"truth", to_string(c.truth)}, {"heteroscedastic", c.heteroscedastic}};
}

inline Json to_json(const McReport& r) {
  Json rates = Json::array();
  for (const auto& x : r.rates)
    rates.push_back(Json{{"method", x.method},
                         {"valid", x.valid},
                         {"failures", x.failures},
                         {"rejections", x.rejections},
                         {"rate", x.rate},
                         {"se", x.se},
                         {"statistic_mean", x.statistic_mean},
                         {"statistic_se", x.statistic_se},
                         {"df_mean", x.df_mean}});
  Json est = Json::array();
  for (const auto& x : r.estimates)
    est.push_back(Json{{"estimator", x.estimator},
                       {"valid", x.valid},
                       {"failures", x.failures},
                       {"bias", x.bias},
                       {"mse", x.mse},
                       {"mse_se", x.mse_se},
                       {"alpha_ise", x.alpha_ise}});
  return Json{{"config", to_json(r.config)}, {"reps", r.reps}, {"mean_knots", r.mean_knots},
              {"rates", rates}, {"estimates", est}};
}

inline Json to_json(const ValidationReport& v) {
  auto ranges = [](const std::vector<CovariateRange>& rs) {
    Json a = Json::array();
    for (const auto& c : rs) a.push_back(Json{{"name", c.name}, {"min", c.min}, {"max", c.max}});
    return a;
  };
  return Json{{"n_subjects", v.n_subjects},
              {"n_obs", v.n_obs},
              {"min_m", v.min_m},
              {"max_m", v.max_m},
              {"single_observation_subjects", v.single_observation_subjects},
              {"x_ranges", ranges(v.x_ranges)},
              {"z_ranges", ranges(v.z_ranges)},
              {"warnings", v.warnings}};
}

/// One row per method or estimator.
inline void write_report_csv(const McReport& r, std::ostream& out) {
  using detail::format_double;
  out << "kind,name,case,n,tau,beta,eta,reps,valid,failures,rate,se,statistic_mean,mse,bias\n";
  const auto& c = r.config;
  const std::string cfg = std::to_string(c.error_case) + "," + std::to_string(c.n) + "," + format_double(c.tau) +
                          "," + format_double(c.beta) + "," + format_double(c.eta) + "," + std::to_string(r.reps);
  for (const auto& x : r.rates)
    out << "rate," << x.method << "," << cfg << "," << x.valid << "," << x.failures << ","
        << format_double(x.rate) << "," << format_double(x.se) << "," << format_double(x.statistic_mean) << ",,\n";
  for (const auto& x : r.estimates)
    out << "estimate," << x.estimator << "," << cfg << "," << x.valid << "," << x.failures << ",,,,"
        << format_double(x.mse) << "," << format_double(x.bias) << "\n";
}

inline void write_sic_path_csv(const ShrinkageResult& r, std::ostream& out) {
  using detail::format_double;
  out << "lambda,sic,loss,df,xi1_l1norm\n";
  for (const auto& p : r.sic_path) {
    if (p.failed) {
      out << format_double(p.lambda) << ",,,,\n";
      continue;
    }
    out << format_double(p.lambda) << "," << format_double(p.sic) << "," << format_double(p.loss) << "," << p.df
        << "," << format_double(p.xi1_l1norm) << "\n";
  }
}

/// Dense evaluation of every alpha-hat_l on `grid` equally spaced original-scale
/// times, one row per (tau, coefficient, t).
inline void emit_plot_data(const std::vector<QuantileFit>& fits, std::size_t grid, std::ostream& out) {
  using detail::format_double;
  if (grid < 1) throw ArgumentError("plot data: grid size must be >= 1");
  out << "tau,coefficient,t,alpha\n";
  for (const auto& f : fits) {
    const double lo = f.time_map.t_min(), hi = f.time_map.t_max();
    for (std::size_t l = 0; l < f.p(); ++l)
      for (std::size_t g = 0; g < grid; ++g) {
        const double t = grid == 1 ? lo : lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid - 1);
        out << format_double(f.tau) << "," << detail::quote_if_needed(f.x_names[l]) << "," << format_double(t) << ","
            << format_double(eval_alpha(f, l, std::min(t, hi))) << "\n";
      }
  }
}

inline void emit_plot_data(const QuantileFit& f, std::size_t grid, std::ostream& out) {
  emit_plot_data(std::vector<QuantileFit>{f}, grid, out);
}

}  // namespace plvcqr
