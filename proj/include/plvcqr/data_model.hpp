#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "plvcqr/errors.hpp"

namespace plvcqr {

/// Name given to the column of ones prepended to x when the intercept varies.
inline constexpr std::string_view kInterceptName = "(intercept)";

struct Observation {
  std::string subject_id;
  double t = 0.0;  // original time units
  double y = 0.0;
  Eigen::VectorXd x;
  Eigen::VectorXd z;
};

struct SubjectGroup {
  std::string id;
  std::vector<Observation> observations;
};

/// Affine map from the observed time range onto [0,1].
class TimeMap {
 public:
  TimeMap() = default;
  TimeMap(double t_min, double t_max) : t_min_(t_min), t_max_(t_max) {
    if (!(t_max >= t_min)) throw ArgumentError("TimeMap: t_max < t_min");
  }

  double t_min() const noexcept { return t_min_; }
  double t_max() const noexcept { return t_max_; }
  double scale() const noexcept {
    return t_max_ > t_min_ ? t_max_ - t_min_ : 1.0;
  }

  /// Mapped time, clamped to [0,1].
  double to_unit(double t) const noexcept {
    return std::clamp((t - t_min_) / scale(), 0.0, 1.0);
  }
  double to_original(double u) const noexcept { return t_min_ + u * scale(); }

  bool contains(double t) const noexcept {
    const double slack = 1e-12 * std::max(1.0, std::abs(t_max_) + std::abs(t_min_));
    return t >= t_min_ - slack && t <= t_max_ + slack;
  }

 private:
  double t_min_ = 0.0;
  double t_max_ = 1.0;
};

/// Assignment of CSV columns to the varying and constant parts of the model.
struct ModelSpec {
  std::vector<std::string> varying_columns;
  std::vector<std::string> constant_columns;
  bool intercept_varying = true;
  std::string subject_column = "subject";
  std::string time_column = "time";
  std::string response_column = "y";

  void check() const {
    for (const auto& v : varying_columns) {
      if (std::find(constant_columns.begin(), constant_columns.end(), v) !=
          constant_columns.end())
        throw ArgumentError("column '" + v + "' is both varying and constant");
    }
    if (varying_columns.empty() && !intercept_varying)
      throw ArgumentError("model needs at least one varying column");
  }

  std::vector<std::string> x_names() const {
    std::vector<std::string> names;
    if (intercept_varying) names.emplace_back(kInterceptName);
    names.insert(names.end(), varying_columns.begin(), varying_columns.end());
    return names;
  }
};

/// Subjects with their time-ordered records. Immutable once constructed; the
/// flat matrices below are in dataset order (subject-major, time-sorted).
class LongitudinalDataset {
 public:
  LongitudinalDataset(std::vector<SubjectGroup> subjects,
                      std::vector<std::string> x_names,
                      std::vector<std::string> z_names)
      : subjects_(std::move(subjects)),
        x_names_(std::move(x_names)),
        z_names_(std::move(z_names)) {
    if (subjects_.empty()) throw EmptyInputError("dataset has no subjects");
    if (x_names_.empty()) throw ArgumentError("dataset needs p >= 1");
    const auto p = static_cast<Eigen::Index>(x_names_.size());
    const auto q = static_cast<Eigen::Index>(z_names_.size());

    double t_lo = std::numeric_limits<double>::infinity();
    double t_hi = -t_lo;
    std::size_t total = 0;
    for (auto& s : subjects_) {
      if (s.observations.empty())
        throw ArgumentError("subject '" + s.id + "' has no observations");
      std::stable_sort(s.observations.begin(), s.observations.end(),
                       [](const Observation& a, const Observation& b) {
                         return a.t < b.t;
                       });
      for (const auto& o : s.observations) {
        if (o.x.size() != p || o.z.size() != q)
          throw DimensionError("subject '" + s.id +
                               "': covariate length mismatch");
        if (!std::isfinite(o.t) || !std::isfinite(o.y) || !o.x.allFinite() ||
            !o.z.allFinite())
          throw DataError("subject '" + s.id + "': non-finite value");
        t_lo = std::min(t_lo, o.t);
        t_hi = std::max(t_hi, o.t);
      }
      total += s.observations.size();
    }
    time_map_ = TimeMap(t_lo, t_hi);

    const auto n_obs = static_cast<Eigen::Index>(total);
    y_.resize(n_obs);
    u_.resize(n_obs);
    X_.resize(n_obs, p);
    Z_.resize(n_obs, q);
    offsets_.reserve(subjects_.size() + 1);
    Eigen::Index row = 0;
    for (const auto& s : subjects_) {
      offsets_.push_back(static_cast<std::size_t>(row));
      for (const auto& o : s.observations) {
        y_(row) = o.y;
        u_(row) = time_map_.to_unit(o.t);
        X_.row(row) = o.x.transpose();
        Z_.row(row) = o.z.transpose();
        ++row;
      }
    }
    offsets_.push_back(static_cast<std::size_t>(row));
  }

  std::size_t n_subjects() const noexcept { return subjects_.size(); }
  std::size_t n_obs() const noexcept { return offsets_.back(); }
  std::size_t p() const noexcept { return x_names_.size(); }
  std::size_t q() const noexcept { return z_names_.size(); }

  const std::vector<SubjectGroup>& subjects() const noexcept { return subjects_; }
  const std::vector<std::string>& x_names() const noexcept { return x_names_; }
  const std::vector<std::string>& z_names() const noexcept { return z_names_; }
  const TimeMap& time_map() const noexcept { return time_map_; }

  const Eigen::VectorXd& response() const noexcept { return y_; }
  /// Times mapped onto [0,1].
  const Eigen::VectorXd& unit_times() const noexcept { return u_; }
  const Eigen::MatrixXd& X() const noexcept { return X_; }
  const Eigen::MatrixXd& Z() const noexcept { return Z_; }

  /// Row offsets of each subject in dataset order; size n_subjects()+1.
  const std::vector<std::size_t>& subject_offsets() const noexcept { return offsets_; }
  std::size_t subject_size(std::size_t i) const { return offsets_[i + 1] - offsets_[i]; }

  std::size_t x_index(std::string_view name) const { return find_(x_names_, name, "varying"); }
  std::size_t z_index(std::string_view name) const { return find_(z_names_, name, "constant"); }

 private:
  static std::size_t find_(const std::vector<std::string>& names,
                           std::string_view name, const char* role) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw ArgumentError(std::string("no ") + role + " covariate named '" +
                          std::string(name) + "'");
    return static_cast<std::size_t>(it - names.begin());
  }

  std::vector<SubjectGroup> subjects_;
  std::vector<std::string> x_names_;
  std::vector<std::string> z_names_;
  TimeMap time_map_;
  Eigen::VectorXd y_;
  Eigen::VectorXd u_;
  Eigen::MatrixXd X_;
  Eigen::MatrixXd Z_;
  std::vector<std::size_t> offsets_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

/// Reads a longitudinal CSV. Rows may come in any order; subjects are indexed
/// by first appearance and sorted by time internally.
inline LongitudinalDataset load_csv(std::istream& in, const ModelSpec& spec) {
  spec.check();
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      have_header = true;
      break;
    }
  }
  if (!have_header) throw EmptyInputError("CSV input is empty");

  auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i)
    col.emplace(std::string(detail::trim(header[i])), i);
  auto need = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw SchemaError("missing column '" + name + "'");
    return it->second;
  };
  const std::size_t c_subject = need(spec.subject_column);
  const std::size_t c_time = need(spec.time_column);
  const std::size_t c_y = need(spec.response_column);
  std::vector<std::size_t> c_x, c_z;
  for (const auto& v : spec.varying_columns) c_x.push_back(need(v));
  for (const auto& v : spec.constant_columns) c_z.push_back(need(v));

  const std::size_t off = spec.intercept_varying ? 1 : 0;
  const auto p = static_cast<Eigen::Index>(c_x.size() + off);
  const auto q = static_cast<Eigen::Index>(c_z.size());

  std::vector<SubjectGroup> groups;
  std::unordered_map<std::string, std::size_t> group_of;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw ParseError("row " + std::to_string(line_no) + ": expected " +
                           std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    auto num = [&](std::size_t c) {
      double v;
      if (!detail::parse_double(fields[c], v))
        throw ParseError("row " + std::to_string(line_no) + ", column '" +
                             std::string(detail::trim(header[c])) +
                             "': cannot parse '" + fields[c] + "' as a number",
                         line_no);
      return v;
    };
    Observation o;
    o.subject_id = std::string(detail::trim(fields[c_subject]));
    o.t = num(c_time);
    o.y = num(c_y);
    o.x.resize(p);
    if (off) o.x(0) = 1.0;
    for (std::size_t k = 0; k < c_x.size(); ++k)
      o.x(static_cast<Eigen::Index>(k + off)) = num(c_x[k]);
    o.z.resize(q);
    for (std::size_t k = 0; k < c_z.size(); ++k)
      o.z(static_cast<Eigen::Index>(k)) = num(c_z[k]);

    auto [it, inserted] = group_of.emplace(o.subject_id, groups.size());
    if (inserted) groups.push_back(SubjectGroup{o.subject_id, {}});
    groups[it->second].observations.push_back(std::move(o));
  }
  if (groups.empty()) throw EmptyInputError("CSV input has a header but no rows");
  return LongitudinalDataset(std::move(groups), spec.x_names(), spec.constant_columns);
}

inline LongitudinalDataset load_csv(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return load_csv(in, spec);
}

/// Writes the dataset in the layout load_csv reads. The intercept column, if
/// any, is implied and not written.
inline void write_csv(const LongitudinalDataset& ds, std::ostream& out) {
  const bool has_intercept = !ds.x_names().empty() && ds.x_names()[0] == kInterceptName;
  const std::size_t x0 = has_intercept ? 1 : 0;
  out << "subject,time,y";
  for (std::size_t l = x0; l < ds.p(); ++l) out << ',' << detail::quote_if_needed(ds.x_names()[l]);
  for (const auto& name : ds.z_names()) out << ',' << detail::quote_if_needed(name);
  out << '\n';
  for (const auto& s : ds.subjects()) {
    for (const auto& o : s.observations) {
      out << detail::quote_if_needed(s.id) << ',' << detail::format_double(o.t) << ','
          << detail::format_double(o.y);
      for (std::size_t l = x0; l < ds.p(); ++l)
        out << ',' << detail::format_double(o.x(static_cast<Eigen::Index>(l)));
      for (Eigen::Index k = 0; k < o.z.size(); ++k) out << ',' << detail::format_double(o.z(k));
      out << '\n';
    }
  }
}

/// ModelSpec matching a dataset's own column names, for re-reading write_csv output.
inline ModelSpec model_spec_for(const LongitudinalDataset& ds) {
  ModelSpec spec;
  spec.intercept_varying = !ds.x_names().empty() && ds.x_names()[0] == kInterceptName;
  for (std::size_t l = spec.intercept_varying ? 1 : 0; l < ds.p(); ++l)
    spec.varying_columns.push_back(ds.x_names()[l]);
  spec.constant_columns = ds.z_names();
  return spec;
}

struct CovariateRange {
  std::string name;
  double min = 0.0;
  double max = 0.0;
};

struct ValidationReport {
  std::size_t n_subjects = 0;
  std::size_t n_obs = 0;
  std::size_t min_m = 0;
  std::size_t max_m = 0;
  std::size_t single_observation_subjects = 0;
  std::vector<CovariateRange> x_ranges;
  std::vector<CovariateRange> z_ranges;
  std::vector<std::string> warnings;
};

/// Descriptive checks; never mutates and never throws on well-formed datasets.
inline ValidationReport validate(const LongitudinalDataset& ds) {
  ValidationReport r;
  r.n_subjects = ds.n_subjects();
  r.n_obs = ds.n_obs();
  r.min_m = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    const std::size_t m = ds.subject_size(i);
    r.min_m = std::min(r.min_m, m);
    r.max_m = std::max(r.max_m, m);
    if (m == 1) ++r.single_observation_subjects;
  }
  if (r.single_observation_subjects > 0)
    r.warnings.emplace_back("single-observation subjects present");

  for (std::size_t l = 0; l < ds.p(); ++l) {
    const auto col = ds.X().col(static_cast<Eigen::Index>(l));
    r.x_ranges.push_back({ds.x_names()[l], col.minCoeff(), col.maxCoeff()});
    if (ds.x_names()[l] != kInterceptName && col.minCoeff() == col.maxCoeff())
      r.warnings.push_back("degenerate varying covariate: " + ds.x_names()[l]);
  }
  for (std::size_t k = 0; k < ds.q(); ++k) {
    const auto col = ds.Z().col(static_cast<Eigen::Index>(k));
    r.z_ranges.push_back({ds.z_names()[k], col.minCoeff(), col.maxCoeff()});
  }
  return r;
}

}  // namespace plvcqr
