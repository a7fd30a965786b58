#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "proxor/common.hpp"

namespace proxor {

// Observed data for the selected subsample: treatment a, outcome y, treatment
// proxies z, outcome proxies w, measured covariates x (x may have zero
// columns). The latent confounder never appears here; only the simulation
// module knows it. row_weight is an optional nonnegative weight column used
// internally to evaluate estimating equations over enumerated populations;
// when empty every row has weight one.
struct SelectedSample {
  VectorXd a;
  VectorXd y;
  MatrixXd z;
  MatrixXd w;
  MatrixXd x;
  VectorXd row_weight;

  Eigen::Index n() const { return a.size(); }
  Eigen::Index proxy_z_dim() const { return z.cols(); }
  Eigen::Index proxy_w_dim() const { return w.cols(); }
  Eigen::Index x_dim() const { return x.cols(); }

  double weight(Eigen::Index i) const { return row_weight.size() > 0 ? row_weight(i) : 1.0; }
  double weight_sum() const {
    return row_weight.size() > 0 ? row_weight.sum() : static_cast<double>(n());
  }
};

struct Violation {
  Errc code;
  Eigen::Index row;     // -1 when not row-specific
  std::string column;   // empty when not column-specific
  std::string reason;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

inline ValidationReport validate(const SelectedSample& s) {
  ValidationReport rep;
  auto add = [&rep](Errc c, Eigen::Index row, const std::string& col, const std::string& why) {
    rep.violations.push_back({c, row, col, why});
  };

  const Eigen::Index n = s.n();
  if (n == 0) {
    add(Errc::DimensionMismatch, -1, "", "sample is empty");
    return rep;
  }
  if (s.y.size() != n) add(Errc::DimensionMismatch, -1, "y", "y length differs from a length");
  if (s.z.rows() != n) add(Errc::DimensionMismatch, -1, "z", "z row count differs from n");
  if (s.w.rows() != n) add(Errc::DimensionMismatch, -1, "w", "w row count differs from n");
  if (s.x.rows() != n && s.x.cols() > 0)
    add(Errc::DimensionMismatch, -1, "x", "x row count differs from n");
  if (s.row_weight.size() > 0 && s.row_weight.size() != n)
    add(Errc::DimensionMismatch, -1, "weight", "row_weight length differs from n");
  if (!rep.ok()) return rep;

  for (Eigen::Index i = 0; i < n; ++i) {
    if (s.a(i) != 0.0 && s.a(i) != 1.0)
      add(Errc::NonBinaryTreatment, i, "a", "treatment value not in {0,1}");
    if (s.y(i) != 0.0 && s.y(i) != 1.0)
      add(Errc::NonBinaryOutcome, i, "y", "outcome value not in {0,1}");
  }
  auto check_finite = [&](const MatrixXd& m, const std::string& name) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        if (!std::isfinite(m(i, j)))
          add(Errc::DimensionMismatch, i, name + std::to_string(j + 1), "non-finite value");
  };
  check_finite(s.z, "z");
  check_finite(s.w, "w");
  check_finite(s.x, "x");

  // Every closed-form denominator degenerates if an outcome or treatment
  // stratum is empty.
  bool any_y1 = false, any_y0 = false, any_a1 = false, any_a0 = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (s.weight(i) <= 0.0) continue;
    if (s.y(i) == 1.0) any_y1 = true;
    if (s.y(i) == 0.0) any_y0 = true;
    if (s.a(i) == 1.0) any_a1 = true;
    if (s.a(i) == 0.0) any_a0 = true;
  }
  if (!any_y1) add(Errc::DegenerateStratum, -1, "y", "no rows with y=1");
  if (!any_y0) add(Errc::DegenerateStratum, -1, "y", "no rows with y=0");
  if (!any_a1) add(Errc::DegenerateStratum, -1, "a", "no rows with a=1");
  if (!any_a0) add(Errc::DegenerateStratum, -1, "a", "no rows with a=0");
  return rep;
}

// Throws the first violation; solvers call this on entry.
inline void require_valid(const SelectedSample& s) {
  const ValidationReport rep = validate(s);
  if (!rep.ok()) {
    const Violation& v = rep.violations.front();
    std::string where = v.column.empty() ? "" : (" column " + v.column);
    if (v.row >= 0) where += " row " + std::to_string(v.row + 1);
    fail(v.code, v.reason + where);
  }
}

enum class Method { PIPW, POR, PDR, Kernel };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::PIPW: return "pipw";
    case Method::POR: return "por";
    case Method::PDR: return "pdr";
    case Method::Kernel: return "kernel";
  }
  return "?";
}

struct EstimateResult {
  Method method = Method::PIPW;
  double beta_hat = kNaN;
  double std_err = kNaN;
  double ci_low = kNaN;
  double ci_high = kNaN;
  bool converged = false;
  int iterations = 0;
  double moment_residual_norm = kNaN;
};

inline EstimateResult make_result(Method m, double beta, double se, bool converged,
                                  int iterations, double residual_norm) {
  EstimateResult r;
  r.method = m;
  r.beta_hat = beta;
  r.std_err = se;
  r.ci_low = beta - kZ975 * se;
  r.ci_high = beta + kZ975 * se;
  r.converged = converged;
  r.iterations = iterations;
  r.moment_residual_norm = residual_norm;
  return r;
}

// User-chosen weight functions of the moment equations: a scalar c(X) in the
// odds ratio moment and vector-valued kappa1(A,W,X), kappa2(A,Z,X) in the
// bridge moments. Exact identification requires the kappa dimensions to equal
// the corresponding bridge parameter dimensions; solvers check this at entry.
struct MomentWeights {
  std::function<double(const RowVectorXd&)> c = [](const RowVectorXd&) { return 1.0; };
  std::function<VectorXd(double, const RowVectorXd&, const RowVectorXd&)> kappa1;
  int kappa1_dim = 0;
  std::function<VectorXd(double, const RowVectorXd&, const RowVectorXd&)> kappa2;
  int kappa2_dim = 0;
};

struct SolverOptions {
  double tol = 1e-8;    // l2 norm of the empirical moment vector
  int max_iter = 200;
  bool force_newton = false;  // skip the direct solve for linear-in-parameter families
};

}  // namespace proxor
