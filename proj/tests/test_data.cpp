#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <sstream>

#include "proxor/data.hpp"
#include "proxor/io.hpp"
#include "support.hpp"

using namespace proxor;
using testsupport::sample_from_patterns;

TEST_CASE("minimal valid sample passes validation") {
  SelectedSample s;
  s.a.resize(4);
  s.a << 0, 1, 0, 1;
  s.y.resize(4);
  s.y << 0, 0, 1, 1;
  s.z = MatrixXd::Zero(4, 1);
  s.w = MatrixXd::Ones(4, 1);
  s.x = MatrixXd(4, 0);
  REQUIRE(validate(s).ok());
}

TEST_CASE("non-binary treatment is reported with its row") {
  SelectedSample s;
  s.a.resize(4);
  s.a << 0, 1, 2, 1;
  s.y.resize(4);
  s.y << 0, 0, 1, 1;
  s.z = MatrixXd::Zero(4, 1);
  s.w = MatrixXd::Zero(4, 1);
  s.x = MatrixXd(4, 0);
  const ValidationReport rep = validate(s);
  REQUIRE_FALSE(rep.ok());
  REQUIRE(rep.violations[0].code == Errc::NonBinaryTreatment);
  REQUIRE(rep.violations[0].row == 2);
  REQUIRE(rep.violations[0].column == "a");
}

TEST_CASE("empty outcome stratum is a degenerate sample") {
  SelectedSample s;
  s.a.resize(4);
  s.a << 0, 1, 0, 1;
  s.y = VectorXd::Zero(4);
  s.z = MatrixXd::Zero(4, 1);
  s.w = MatrixXd::Zero(4, 1);
  s.x = MatrixXd(4, 0);
  const ValidationReport rep = validate(s);
  REQUIRE_FALSE(rep.ok());
  REQUIRE(rep.violations[0].code == Errc::DegenerateStratum);
  REQUIRE(rep.violations[0].column == "y");
}

TEST_CASE("row count mismatches are dimension violations") {
  SelectedSample s;
  s.a.resize(4);
  s.a << 0, 1, 0, 1;
  s.y.resize(4);
  s.y << 0, 0, 1, 1;
  s.z = MatrixXd::Zero(3, 1);
  s.w = MatrixXd::Zero(4, 1);
  s.x = MatrixXd(4, 0);
  const ValidationReport rep = validate(s);
  REQUIRE_FALSE(rep.ok());
  REQUIRE(rep.violations[0].code == Errc::DimensionMismatch);
}

TEST_CASE("validation is idempotent") {
  SelectedSample s = sample_from_patterns({{0, 0, 0, 0, 2}, {1, 0, 1, 1, 2}, {0, 1, 0, 1, 1}, {1, 1, 1, 0, 1}});
  const ValidationReport r1 = validate(s);
  const ValidationReport r2 = validate(s);
  REQUIRE(r1.ok());
  REQUIRE(r2.ok());
  REQUIRE(r1.violations.size() == r2.violations.size());
}

TEST_CASE("wald interval construction") {
  const EstimateResult r = make_result(Method::PDR, 0.3, 0.1, true, 1, 0.0);
  REQUIRE(r.ci_low == 0.3 - kZ975 * 0.1);
  REQUIRE(r.ci_high == 0.3 + kZ975 * 0.1);
  REQUIRE(r.ci_low <= r.beta_hat);
  REQUIRE(r.beta_hat <= r.ci_high);
}

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_matrix_bits(const MatrixXd& a, const MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (!same_bits(a(i, j), b(i, j))) return false;
  return true;
}

}  // namespace

TEST_CASE("csv round trip preserves values bit-exactly") {
  Rng rng(99);
  const Eigen::Index n = 60;
  SelectedSample s;
  s.a.resize(n);
  s.y.resize(n);
  s.z.resize(n, 2);
  s.w.resize(n, 1);
  s.x.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.a(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    s.y(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    s.z(i, 0) = rng.normal(0, 3);
    s.z(i, 1) = rng.u01() / 3.0;  // not representable exactly in decimal
    s.w(i, 0) = rng.normal(0, 1) * 1e-8;
    s.x(i, 0) = rng.u01();
  }
  s.a(0) = 1;
  s.y(0) = 1;
  s.a(1) = 0;
  s.y(1) = 0;

  std::stringstream buf;
  write_sample_csv(buf, s);
  const SelectedSample back = read_sample_csv(buf);
  REQUIRE(same_matrix_bits(back.z, s.z));
  REQUIRE(same_matrix_bits(back.w, s.w));
  REQUIRE(same_matrix_bits(back.x, s.x));
  REQUIRE(same_matrix_bits(back.a, s.a));
  REQUIRE(validate(back).ok());

  // a second cycle is a fixed point
  std::stringstream buf2;
  write_sample_csv(buf2, back);
  std::stringstream buf3;
  write_sample_csv(buf3, s);
  REQUIRE(buf2.str() == buf3.str());
}
