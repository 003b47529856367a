#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "plvcqr/data_model.hpp"
#include "plvcqr/errors.hpp"
#include "plvcqr/inference.hpp"
#include "plvcqr/io.hpp"
#include "plvcqr/plvc_fit.hpp"
#include "plvcqr/shrinkage.hpp"
#include "plvcqr/simulation.hpp"
#include "plvcqr/spline_basis.hpp"

namespace plvcqr::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

namespace detail {

struct ModelArgs {
  std::string data;
  std::vector<std::string> varying;
  std::vector<std::string> constant;
  std::string subject = "subject";
  std::string time = "time";
  std::string response = "y";
  bool no_intercept = false;
  int degree = 3;
  std::string knots = "auto";
};

struct OutputArgs {
  std::string output;
  std::string format;  // empty: the subcommand default
};

inline void add_model(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--data", m.data, "Input CSV")->required();
  sub->add_option("--varying", m.varying, "Covariates with time-varying coefficients")->delimiter(',');
  sub->add_option("--constant", m.constant, "Covariates with constant coefficients")->delimiter(',');
  sub->add_option("--subject-col", m.subject, "Subject column")->capture_default_str();
  sub->add_option("--time-col", m.time, "Time column")->capture_default_str();
  sub->add_option("--response-col", m.response, "Response column")->capture_default_str();
  sub->add_flag("--no-intercept", m.no_intercept, "Do not prepend a varying intercept");
  sub->add_option("--degree", m.degree, "Spline degree")->capture_default_str()->check(CLI::Range(0, 10));
  sub->add_option("--knots", m.knots, "Internal knot count, or 'auto' for SIC selection")->capture_default_str();
}

inline void add_output(CLI::App* sub, OutputArgs& o, const std::string& default_format) {
  sub->add_option("--output,-o", o.output, "Output file (default stdout)");
  sub->add_option("--format", o.format, "Output format (default " + default_format + ")")
      ->check(CLI::IsMember({"json", "csv"}));
}

inline LongitudinalDataset load(const ModelArgs& m) {
  ModelSpec spec;
  spec.varying_columns = m.varying;
  spec.constant_columns = m.constant;
  spec.intercept_varying = !m.no_intercept;
  spec.subject_column = m.subject;
  spec.time_column = m.time;
  spec.response_column = m.response;
  return load_csv(m.data, spec);
}

inline std::optional<int> fixed_knots(const std::string& s) {
  if (s == "auto") return std::nullopt;
  int k = 0;
  std::size_t used = 0;
  try {
    k = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || k < 0) throw ArgumentError("--knots must be 'auto' or a non-negative integer");
  return k;
}

inline void check_taus(const std::vector<double>& taus) {
  if (taus.empty()) throw ArgumentError("at least one tau is required");
  for (double t : taus)
    if (!(t > 0.0 && t < 1.0)) throw DomainError("tau values must lie in (0,1)");
}

inline std::size_t varying_index(const LongitudinalDataset& ds, const std::string& name) {
  if (name == "intercept" && !ds.x_names().empty() && ds.x_names()[0] == kInterceptName) return 0;
  return ds.x_index(name);
}

inline std::vector<std::size_t> varying_indices(const LongitudinalDataset& ds, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  for (const auto& n : names) out.push_back(varying_index(ds, n));
  return out;
}

inline std::vector<std::size_t> constant_indices(const LongitudinalDataset& ds, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  for (const auto& n : names) out.push_back(ds.z_index(n));
  return out;
}

// Knot count for the model: fixed, or SIC-selected at `tau`.
inline int resolve_knots(const LongitudinalDataset& ds, const ModelArgs& m, double tau, Json* selection) {
  if (auto k = fixed_knots(m.knots)) return *k;
  const auto sel = select_knots(ds, tau, m.degree);
  if (selection) *selection = to_json(sel);
  return sel.k_star;
}

// The tau closest to 0.5, used when one knot count serves a whole grid.
inline double central_tau(const std::vector<double>& taus) {
  double best = taus.front();
  for (double t : taus)
    if (std::abs(t - 0.5) < std::abs(best - 0.5)) best = t;
  return best;
}

inline void write_text(const OutputArgs& o, const std::string& text, std::ostream& out) {
  if (o.output.empty() || o.output == "-") {
    out << text;
    return;
  }
  std::ofstream f(o.output, std::ios::binary);
  if (!f) throw DataError("cannot write '" + o.output + "'");
  f << text;
}

inline void write_json(const OutputArgs& o, const Json& j, std::ostream& out) { write_text(o, j.dump(2) + "\n", out); }

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << text;
}

inline void flatten_test(Json& j, const TestResult& r) {
  j.update(to_json(r));
}

inline Correlation correlation_for(const std::string& method) {
  return method == "qrs-delta" ? Correlation::exchangeable : Correlation::empirical;
}

inline WeightMode weight_mode(const std::string& w) {
  return w == "estimated" ? WeightMode::estimated : WeightMode::identity;
}

}  // namespace detail

/// Parses argv (argv[0] is the program name) and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Quantile regression for partially linear varying coefficient models on longitudinal data",
               "plvcqr"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  ModelArgs m;
  OutputArgs o;
  std::vector<double> taus;
  std::vector<std::string> coefs;
  std::string method = "qrs";
  std::string weights = "identity";

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit the model at one or more quantile levels");
  add_model(fit_cmd, m);
  add_output(fit_cmd, o, "json");
  fit_cmd->add_option("--tau", taus, "Quantile level(s)")->required()->delimiter(',');
  std::string plot_data;
  std::size_t grid = 100;
  fit_cmd->add_option("--plot-data", plot_data, "Also write coefficient curves to this CSV");
  fit_cmd->add_option("--grid", grid, "Grid size for --plot-data")->capture_default_str()->check(CLI::PositiveNumber);

  // select-knots
  auto* sel_cmd = app.add_subcommand("select-knots", "SIC knot-count selection");
  add_model(sel_cmd, m);
  add_output(sel_cmd, o, "json");
  double tau = 0.5;
  int k_min = -1, k_max = -1;
  sel_cmd->add_option("--tau", tau, "Quantile level")->required();
  sel_cmd->add_option("--k-min", k_min, "Smallest candidate (default 1)");
  sel_cmd->add_option("--k-max", k_max, "Largest candidate (default ceil(N^(1/5)) + 2)");

  // test-beta
  auto* tb_cmd = app.add_subcommand("test-beta", "Test that constant coefficients are zero");
  add_model(tb_cmd, m);
  add_output(tb_cmd, o, "json");
  tb_cmd->add_option("--tau", tau, "Quantile level")->required();
  tb_cmd->add_option("--coef", coefs, "Constant covariates under test")->required()->delimiter(',');
  tb_cmd->add_option("--method", method, "Test")->check(CLI::IsMember({"qrs", "qrs-delta", "wald"}))->capture_default_str();
  tb_cmd->add_option("--weights", weights, "Rank score weights")
      ->check(CLI::IsMember({"identity", "estimated"}))
      ->capture_default_str();

  // test-constancy
  auto* tc_cmd = app.add_subcommand("test-constancy", "Test that varying coefficients are constant in time");
  add_model(tc_cmd, m);
  add_output(tc_cmd, o, "json");
  tc_cmd->add_option("--tau", tau, "Quantile level")->required();
  tc_cmd->add_option("--coef", coefs, "Varying covariates under test ('intercept' for the intercept)")
      ->required()
      ->delimiter(',');
  tc_cmd->add_option("--method", method, "Test")->check(CLI::IsMember({"qrs", "qrs-delta"}))->capture_default_str();
  tc_cmd->add_option("--weights", weights, "Rank score weights")
      ->check(CLI::IsMember({"identity", "estimated"}))
      ->capture_default_str();

  // assess
  auto* as_cmd = app.add_subcommand("assess", "Simulate responses from the fitted quantile process");
  add_model(as_cmd, m);
  add_output(as_cmd, o, "json");
  std::vector<double> t_star;
  double tol = 0.001;
  std::size_t draws = 500;
  std::uint64_t seed = 1;
  std::string model = "plvc";
  as_cmd->add_option("--taus", taus, "Quantile grid (default 0.05,0.10,...,0.95)")->delimiter(',');
  as_cmd->add_option("--t-star", t_star, "Assessment times")->required()->delimiter(',');
  as_cmd->add_option("--tol", tol, "Matching distance")->capture_default_str()->check(CLI::NonNegativeNumber);
  as_cmd->add_option("--draws", draws, "Draws per time")->capture_default_str();
  as_cmd->add_option("--seed", seed, "Random seed")->capture_default_str();
  as_cmd->add_option("--model", model, "Model under assessment")->check(CLI::IsMember({"plvc", "lcc"}))->capture_default_str();

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo studies on the simulation designs");
  add_output(sim_cmd, o, "csv");
  SimulationConfig cfg;
  std::string study = "level";
  std::string truth;
  std::vector<std::string> methods;
  std::string sim_knots = "auto";
  bool homoscedastic = false;
  unsigned threads = 0;
  sim_cmd->add_option("--case", cfg.error_case, "Error case")->check(CLI::Range(1, 3))->capture_default_str();
  sim_cmd->add_option("--n", cfg.n, "Subjects")->capture_default_str()->check(CLI::PositiveNumber);
  sim_cmd->add_option("--tau", cfg.tau, "Quantile level")->capture_default_str();
  sim_cmd->add_option("--reps", cfg.reps, "Replicates")->capture_default_str()->check(CLI::PositiveNumber);
  sim_cmd->add_option("--beta", cfg.beta, "Constant effect")->capture_default_str();
  sim_cmd->add_option("--eta", cfg.eta, "Departure from constancy")->capture_default_str();
  sim_cmd->add_option("--rho", cfg.rho, "Within-subject correlation")->capture_default_str();
  sim_cmd->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  sim_cmd->add_option("--study", study, "level, constancy, mse, or data (write one replicate as CSV)")
      ->check(CLI::IsMember({"level", "constancy", "mse", "data"}))
      ->capture_default_str();
  sim_cmd->add_option("--truth", truth, "Coefficient truth (default depends on the study)")
      ->check(CLI::IsMember({"plvc", "lcc", "constancy"}));
  sim_cmd->add_option("--methods", methods, "Tests or estimators")->delimiter(',');
  sim_cmd->add_option("--weights", weights, "Rank score weights")
      ->check(CLI::IsMember({"identity", "estimated"}))
      ->capture_default_str();
  sim_cmd->add_option("--knots", sim_knots, "Internal knot count, or 'auto'")->capture_default_str();
  sim_cmd->add_flag("--homoscedastic", homoscedastic, "Drop the (1 + |x1|) error scale");
  sim_cmd->add_option("--threads", threads, "Worker cap (default PLVCQR_THREADS or hardware)");
  std::uint64_t replicate = 0;
  sim_cmd->add_option("--replicate", replicate, "Replicate index for --study data")->capture_default_str();

  // shrink
  auto* sh_cmd = app.add_subcommand("shrink", "L1 shrinkage of non-constant spline directions");
  add_model(sh_cmd, m);
  add_output(sh_cmd, o, "json");
  std::vector<double> lambdas;
  std::string path_csv;
  sh_cmd->add_option("--tau", tau, "Quantile level")->required();
  sh_cmd->add_option("--coef", coefs, "Varying covariates to shrink toward constants")->required()->delimiter(',');
  sh_cmd->add_option("--lambda", lambdas, "Penalty grid (default: automatic)")->delimiter(',');
  sh_cmd->add_option("--path-csv", path_csv, "Also write the (lambda, SIC) path to this CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }

  if (o.format.empty()) o.format = sim_cmd->parsed() ? "csv" : "json";

  try {
    if (fit_cmd->parsed()) {
      check_taus(taus);
      const auto ds = load(m);
      Json j;
      j["command"] = "fit";
      Json selection;
      const int k = resolve_knots(ds, m, central_tau(taus), &selection);
      j["k_star"] = k;
      if (!selection.is_null()) j["knot_selection"] = selection;
      j["validation"] = to_json(validate(ds));
      std::vector<QuantileFit> fits;
      Json arr = Json::array();
      for (double t : taus) {
        fits.push_back(fit(ds, make_spec(k, m.degree), t));
        arr.push_back(to_json(fits.back()));
      }
      j["fits"] = arr;
      if (!plot_data.empty()) {
        std::ostringstream csv;
        emit_plot_data(fits, grid, csv);
        write_file(plot_data, csv.str());
      }
      if (o.format == "csv") {
        std::ostringstream csv;
        emit_plot_data(fits, grid, csv);
        write_text(o, csv.str(), out);
      } else {
        write_json(o, j, out);
      }
    } else if (sel_cmd->parsed()) {
      check_taus({tau});
      const auto ds = load(m);
      auto range = default_knot_range(ds.n_obs());
      if (k_min >= 0) range.lo = k_min;
      if (k_max >= 0) range.hi = k_max;
      const auto sel = select_knots(ds, tau, m.degree, range);
      Json j{{"command", "select-knots"}, {"tau", tau}, {"degree", m.degree}};
      j.update(to_json(sel));
      write_json(o, j, out);
    } else if (tb_cmd->parsed() || tc_cmd->parsed()) {
      check_taus({tau});
      const bool beta = tb_cmd->parsed();
      const auto ds = load(m);
      const int k = resolve_knots(ds, m, tau, nullptr);
      const auto specs = uniform_basis_set(make_spec(k, m.degree), ds.p());
      TestOptions topt;
      topt.correlation = correlation_for(method);
      topt.weights = weight_mode(weights);
      TestResult r;
      if (beta) {
        const auto idx = constant_indices(ds, coefs);
        r = method == "wald" ? wald_test(ds, specs, tau, idx, topt) : rank_score_beta(ds, specs, tau, idx, topt);
      } else {
        r = constancy_test(ds, specs, tau, varying_indices(ds, coefs), topt);
      }
      Json j{{"command", beta ? "test-beta" : "test-constancy"}, {"tau", tau}, {"k_internal", k},
             {"degree", m.degree}, {"tested", coefs}};
      flatten_test(j, r);
      write_json(o, j, out);
    } else if (as_cmd->parsed()) {
      if (taus.empty())
        for (int i = 1; i <= 19; ++i) taus.push_back(0.05 * i);
      check_taus(taus);
      const auto ds = load(m);
      int k = 0;
      QuantileProcess proc;
      if (model == "lcc") {
        proc.taus = taus;
        for (double t : taus) proc.fits.push_back(fit_constant(ds, t));
      } else {
        k = resolve_knots(ds, m, central_tau(taus), nullptr);
        proc = fit_process(ds, make_spec(k, m.degree), taus);
      }
      std::vector<AssessmentSample> samples;
      for (std::size_t i = 0; i < t_star.size(); ++i)
        samples.push_back(assess(proc, ds, t_star[i], tol, draws, stream_seed(seed, i)));
      if (o.format == "csv") {
        std::ostringstream csv;
        csv << "t_star,source,value\n";
        for (const auto& s : samples) {
          for (double v : s.simulated)
            csv << plvcqr::detail::format_double(s.t_star) << ",simulated," << plvcqr::detail::format_double(v) << "\n";
          for (double v : s.observed)
            csv << plvcqr::detail::format_double(s.t_star) << ",observed," << plvcqr::detail::format_double(v) << "\n";
        }
        write_text(o, csv.str(), out);
      } else {
        Json arr = Json::array();
        for (const auto& s : samples) arr.push_back(to_json(s));
        Json j{{"command", "assess"}, {"model", model}, {"taus", taus}, {"k_internal", k}, {"samples", arr}};
        write_json(o, j, out);
      }
    } else if (sim_cmd->parsed()) {
      cfg.heteroscedastic = !homoscedastic;
      if (!truth.empty()) cfg.truth = truth == "lcc" ? Truth::lcc : truth == "constancy" ? Truth::constancy : Truth::plvc;
      else cfg.truth = study == "constancy" ? Truth::constancy : Truth::plvc;
      cfg.check();
      const auto knots = fixed_knots(sim_knots);
      McReport rep;
      if (study == "data") {
        std::ostringstream csv;
        write_csv(gen_dataset(cfg, replicate), csv);
        write_text(o, csv.str(), out);
        return kOk;
      }
      if (study == "mse") {
        MseSpec ms;
        ms.knots = knots;
        ms.threads = threads;
        if (!methods.empty()) {
          ms.estimators.clear();
          for (const auto& e : methods) {
            if (e == "plvc") ms.estimators.push_back(Estimator::plvc);
            else if (e == "lcc") ms.estimators.push_back(Estimator::lcc);
            else throw ArgumentError("unknown estimator '" + e + "' (expected plvc or lcc)");
          }
        }
        rep = mc_mse(cfg, ms);
      } else {
        LevelPowerSpec ls;
        ls.knots = knots;
        ls.threads = threads;
        ls.weights = weight_mode(weights);
        const bool constancy = study == "constancy";
        if (methods.empty())
          methods = constancy ? std::vector<std::string>{"qrs", "qrs-delta"}
                              : std::vector<std::string>{"qrs", "qrs-delta", "wald"};
        ls.tests.clear();
        for (const auto& t : methods) {
          if (t == "qrs") ls.tests.push_back(constancy ? McTest::constancy_qrs : McTest::qrs);
          else if (t == "qrs-delta") ls.tests.push_back(constancy ? McTest::constancy_qrs_delta : McTest::qrs_delta);
          else if (t == "wald" && !constancy) ls.tests.push_back(McTest::wald);
          else throw ArgumentError("unknown or inapplicable test '" + t + "'");
        }
        rep = mc_level_power(cfg, ls);
      }
      if (o.format == "json") {
        Json j{{"command", "simulate"}, {"study", study}};
        j.update(to_json(rep));
        write_json(o, j, out);
      } else {
        std::ostringstream csv;
        write_report_csv(rep, csv);
        write_text(o, csv.str(), out);
      }
    } else if (sh_cmd->parsed()) {
      check_taus({tau});
      const auto ds = load(m);
      const int k = resolve_knots(ds, m, tau, nullptr);
      const auto res = shrinkage_constancy(ds, make_spec(k, m.degree), tau, varying_indices(ds, coefs), lambdas);
      if (!path_csv.empty()) {
        std::ostringstream csv;
        write_sic_path_csv(res, csv);
        write_file(path_csv, csv.str());
      }
      if (o.format == "csv") {
        std::ostringstream csv;
        write_sic_path_csv(res, csv);
        write_text(o, csv.str(), out);
      } else {
        Json j{{"command", "shrink"}, {"tau", tau}, {"k_internal", k}, {"degree", m.degree}, {"tested", coefs}};
        j.update(to_json(res));
        write_json(o, j, out);
      }
    }
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ArgumentError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  }
  return kOk;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"plvcqr"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace plvcqr::cli
