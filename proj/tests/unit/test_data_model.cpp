#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "plvcqr/data_model.hpp"

using namespace plvcqr;

namespace {

ModelSpec spec_x1_z1() {
  ModelSpec s;
  s.varying_columns = {"x1"};
  s.constant_columns = {"z1"};
  return s;
}

LongitudinalDataset parse(const std::string& text, const ModelSpec& spec) {
  std::istringstream in(text);
  return load_csv(in, spec);
}

const char* kTwoByThree =
    "subject,time,y,x1,z1\n"
    "b,10,6,0.6,1\n"
    "a,0,1,0.1,0\n"
    "b,0,4,0.4,1\n"
    "a,5,2,0.2,0\n"
    "a,10,3,0.3,0\n"
    "b,5,5,0.5,1\n";

}  // namespace

TEST(LoadCsv, GroupsAndCounts) {
  const auto ds = parse(kTwoByThree, spec_x1_z1());
  EXPECT_EQ(ds.n_subjects(), 2u);
  EXPECT_EQ(ds.subject_size(0), 3u);
  EXPECT_EQ(ds.subject_size(1), 3u);
  EXPECT_EQ(ds.n_obs(), 6u);
  EXPECT_EQ(ds.p(), 2u);
  EXPECT_EQ(ds.q(), 1u);
  // first appearance order
  EXPECT_EQ(ds.subjects()[0].id, "b");
  EXPECT_EQ(ds.subjects()[1].id, "a");
}

TEST(LoadCsv, MapsTimesOntoUnitInterval) {
  const auto ds = parse(kTwoByThree, spec_x1_z1());
  const std::vector<double> want{0.0, 0.5, 1.0, 0.0, 0.5, 1.0};
  for (std::size_t r = 0; r < want.size(); ++r) EXPECT_DOUBLE_EQ(ds.unit_times()(static_cast<Eigen::Index>(r)), want[r]);
  EXPECT_DOUBLE_EQ(ds.response()(0), 4.0);
  EXPECT_DOUBLE_EQ(ds.response()(2), 6.0);
  EXPECT_DOUBLE_EQ(ds.X()(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(ds.X()(0, 1), 0.4);
  EXPECT_DOUBLE_EQ(ds.Z()(3, 0), 0.0);
}

TEST(LoadCsv, ColumnOrderIsFree) {
  const auto a = parse(kTwoByThree, spec_x1_z1());
  const auto b = parse(
      "z1,x1,y,time,subject\n1,0.6,6,10,b\n0,0.1,1,0,a\n1,0.4,4,0,b\n0,0.2,2,5,a\n0,0.3,3,10,a\n1,0.5,5,5,b\n",
      spec_x1_z1());
  EXPECT_EQ(a.X(), b.X());
  EXPECT_EQ(a.Z(), b.Z());
  EXPECT_EQ(a.response(), b.response());
}

TEST(LoadCsv, NonNumericCellNamesRow) {
  try {
    parse("subject,time,y,x1,z1\na,0,1,0.1,0\na,1,2,NA,0\n", spec_x1_z1());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, MissingColumnIsSchemaError) {
  EXPECT_THROW(parse("subject,time,y,x1\na,0,1,0.1\n", spec_x1_z1()), SchemaError);
}

TEST(LoadCsv, EmptyInput) {
  EXPECT_THROW(parse("", spec_x1_z1()), EmptyInputError);
  EXPECT_THROW(parse("subject,time,y,x1,z1\n", spec_x1_z1()), EmptyInputError);
}

TEST(LoadCsv, MissingFileIsDataError) {
  EXPECT_THROW(load_csv(std::string("/nonexistent/plvcqr.csv"), spec_x1_z1()), DataError);
}

TEST(LoadCsv, RaggedRowIsParseError) {
  EXPECT_THROW(parse("subject,time,y,x1,z1\na,0,1,0.1\n", spec_x1_z1()), ParseError);
}

TEST(ModelSpec, RejectsOverlapAndEmpty) {
  ModelSpec s = spec_x1_z1();
  s.constant_columns.push_back("x1");
  EXPECT_THROW(s.check(), ArgumentError);
  ModelSpec e;
  e.intercept_varying = false;
  EXPECT_THROW(e.check(), ArgumentError);
}

TEST(TimeMap, OrderPreservingAndInvertible) {
  const TimeMap m(-3.0, 17.0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 17.0);
  for (int k = 0; k < 200; ++k) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    if (a < b) {
      EXPECT_LT(m.to_unit(a), m.to_unit(b));
    }
    EXPECT_NEAR(m.to_original(m.to_unit(a)), a, 1e-12);
  }
}

TEST(TimeMap, DegenerateRangeMapsToZero) {
  const auto ds = parse("subject,time,y,x1,z1\na,4,1,0.1,0\nb,4,2,0.3,1\n", spec_x1_z1());
  EXPECT_DOUBLE_EQ(ds.unit_times()(0), 0.0);
  EXPECT_DOUBLE_EQ(ds.time_map().scale(), 1.0);
}

TEST(WriteCsv, RoundTrip) {
  const auto ds = parse(kTwoByThree, spec_x1_z1());
  std::ostringstream out;
  write_csv(ds, out);
  const auto back = parse(out.str(), model_spec_for(ds));
  EXPECT_EQ(back.n_subjects(), ds.n_subjects());
  EXPECT_EQ(back.X(), ds.X());
  EXPECT_EQ(back.Z(), ds.Z());
  EXPECT_EQ(back.response(), ds.response());
  EXPECT_EQ(back.unit_times(), ds.unit_times());
  EXPECT_EQ(back.x_names(), ds.x_names());
}

TEST(WriteCsv, RoundTripRandomValuesExactly) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::vector<SubjectGroup> groups;
  for (int i = 0; i < 5; ++i) {
    SubjectGroup s{"id " + std::to_string(i), {}};
    for (int j = 0; j < 4; ++j) {
      Observation o;
      o.subject_id = s.id;
      o.t = g(rng);
      o.y = g(rng) * 1e7;
      o.x = Eigen::VectorXd::Constant(2, g(rng) * 1e-9);
      o.z = Eigen::VectorXd::Constant(1, g(rng));
      s.observations.push_back(o);
    }
    groups.push_back(std::move(s));
  }
  const LongitudinalDataset ds(groups, {"a", "b,c"}, {"z"});
  std::ostringstream out;
  write_csv(ds, out);
  const auto back = parse(out.str(), model_spec_for(ds));
  EXPECT_EQ(back.X(), ds.X());
  EXPECT_EQ(back.response(), ds.response());
  EXPECT_EQ(back.unit_times(), ds.unit_times());
  EXPECT_EQ(back.x_names(), ds.x_names());
}

TEST(Validate, SingleObservationSubjects) {
  std::ostringstream csv;
  csv << "subject,time,y,x1,z1\n";
  const int m[] = {1, 4, 7};
  int row = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < m[i]; ++j, ++row) csv << "s" << i << "," << j << "," << row << "," << row * 0.1 << ",0\n";
  const auto r = validate(parse(csv.str(), spec_x1_z1()));
  EXPECT_EQ(r.n_subjects, 3u);
  EXPECT_EQ(r.n_obs, 12u);
  EXPECT_EQ(r.min_m, 1u);
  EXPECT_EQ(r.max_m, 7u);
  EXPECT_EQ(r.single_observation_subjects, 1u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.warnings[0], "single-observation subjects present");
}

TEST(Validate, DegenerateVaryingCovariate) {
  const auto r = validate(parse("subject,time,y,x1,z1\na,0,1,2,0\na,1,2,2,1\nb,0,1,2,0\nb,1,3,2,0\n", spec_x1_z1()));
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.warnings[0].rfind("degenerate varying covariate", 0), 0u);
  EXPECT_DOUBLE_EQ(r.x_ranges[1].min, 2.0);
}

TEST(Validate, CleanDatasetHasNoWarnings) {
  const auto r = validate(parse(kTwoByThree, spec_x1_z1()));
  EXPECT_TRUE(r.warnings.empty());
  ASSERT_EQ(r.z_ranges.size(), 1u);
  EXPECT_DOUBLE_EQ(r.z_ranges[0].max, 1.0);
}

TEST(Dataset, RejectsNonFinite) {
  Observation o;
  o.subject_id = "a";
  o.t = 0;
  o.y = std::numeric_limits<double>::quiet_NaN();
  o.x = Eigen::VectorXd::Ones(1);
  o.z = Eigen::VectorXd(0);
  EXPECT_THROW(LongitudinalDataset({SubjectGroup{"a", {o}}}, {"x"}, {}), DataError);
}

TEST(Dataset, NameLookup) {
  const auto ds = parse(kTwoByThree, spec_x1_z1());
  EXPECT_EQ(ds.x_index("x1"), 1u);
  EXPECT_EQ(ds.z_index("z1"), 0u);
  EXPECT_THROW(ds.x_index("z1"), ArgumentError);
}
