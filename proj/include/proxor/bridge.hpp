#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "proxor/data.hpp"

namespace proxor {

// Parametric working families for the two confounding bridge functions.
//
// The treatment bridge q(a,z,x) recovers inverse treatment probabilities among
// outcome-free selected subjects; the outcome bridge h(a,w,x) recovers the
// conditional outcome odds. Both reduce to a scalar link applied to a linear
// predictor over a family-specific basis:
//   SaturatedBinary            q = tau . (1, a, z, az) per categorical x level
//   InverseLogisticTreatment   q = 1 + exp((1-2a) * tau . (1, a, z, x))
//   LogLinearOutcome           h = exp(psi . (1, a, w, x))
//   LinearBasis                user basis, identity link
class BridgeModel {
 public:
  enum class Family { SaturatedBinary, InverseLogisticTreatment, LogLinearOutcome, LinearBasis };
  using BasisFn = std::function<VectorXd(double, const RowVectorXd&, const RowVectorXd&)>;

  static BridgeModel saturated_binary(std::vector<double> x_levels = {}) {
    BridgeModel m;
    m.family_ = Family::SaturatedBinary;
    m.x_levels_ = std::move(x_levels);
    m.dim_ = 4 * std::max<std::size_t>(1, m.x_levels_.size());
    m.proxy_dim_ = 1;
    return m;
  }

  static BridgeModel inverse_logistic(int proxy_dim, int x_dim, bool include_x = true) {
    BridgeModel m;
    m.family_ = Family::InverseLogisticTreatment;
    m.proxy_dim_ = proxy_dim;
    m.x_dim_ = include_x ? x_dim : 0;
    m.dim_ = 2 + m.proxy_dim_ + m.x_dim_;
    return m;
  }

  static BridgeModel log_linear(int proxy_dim, int x_dim, bool include_x = true) {
    BridgeModel m;
    m.family_ = Family::LogLinearOutcome;
    m.proxy_dim_ = proxy_dim;
    m.x_dim_ = include_x ? x_dim : 0;
    m.dim_ = 2 + m.proxy_dim_ + m.x_dim_;
    return m;
  }

  static BridgeModel linear_basis(int dim, BasisFn fn) {
    BridgeModel m;
    m.family_ = Family::LinearBasis;
    m.dim_ = dim;
    m.proxy_dim_ = -1;  // basis decides
    m.basis_fn_ = std::move(fn);
    return m;
  }

  Family family() const { return family_; }
  int dim() const { return dim_; }
  bool linear_in_params() const {
    return family_ == Family::SaturatedBinary || family_ == Family::LinearBasis;
  }

  VectorXd basis(double a, const RowVectorXd& proxy, const RowVectorXd& x) const {
    switch (family_) {
      case Family::SaturatedBinary: {
        if (proxy.size() != 1) fail(Errc::DimensionMismatch, "saturated family needs a scalar binary proxy");
        VectorXd b = VectorXd::Zero(dim_);
        const double p = proxy(0);
        if (x_levels_.empty()) {
          b << 1.0, a, p, a * p;
        } else {
          if (x.size() != 1)
            fail(Errc::DimensionMismatch, "saturated family with x levels needs scalar categorical x");
          bool found = false;
          for (std::size_t l = 0; l < x_levels_.size(); ++l) {
            if (x(0) == x_levels_[l]) {
              b.segment(4 * static_cast<Eigen::Index>(l), 4) << 1.0, a, p, a * p;
              found = true;
              break;
            }
          }
          if (!found) fail(Errc::DimensionMismatch, "x value not among declared levels");
        }
        return b;
      }
      case Family::InverseLogisticTreatment:
      case Family::LogLinearOutcome: {
        if (proxy.size() != proxy_dim_)
          fail(Errc::DimensionMismatch, "proxy dimension differs from family specification");
        if (x_dim_ > 0 && x.size() < x_dim_)
          fail(Errc::DimensionMismatch, "x dimension differs from family specification");
        VectorXd b(dim_);
        b(0) = 1.0;
        b(1) = a;
        b.segment(2, proxy_dim_) = proxy.head(proxy_dim_).transpose();
        if (x_dim_ > 0) b.segment(2 + proxy_dim_, x_dim_) = x.head(x_dim_).transpose();
        return b;
      }
      case Family::LinearBasis: {
        VectorXd b = basis_fn_(a, proxy, x);
        if (b.size() != dim_) fail(Errc::DimensionMismatch, "user basis returned wrong dimension");
        return b;
      }
    }
    fail(Errc::InvalidSpec, "unknown bridge family");
  }

  // Link applied to the linear predictor and its derivative; grad of the
  // bridge in the parameters is deriv_from * basis.
  double eval_from(double a, double lin) const {
    switch (family_) {
      case Family::SaturatedBinary:
      case Family::LinearBasis:
        return lin;
      case Family::InverseLogisticTreatment:
        return 1.0 + std::exp((1.0 - 2.0 * a) * lin);
      case Family::LogLinearOutcome:
        return std::exp(lin);
    }
    return kNaN;
  }

  double deriv_from(double a, double lin) const {
    switch (family_) {
      case Family::SaturatedBinary:
      case Family::LinearBasis:
        return 1.0;
      case Family::InverseLogisticTreatment: {
        const double s = 1.0 - 2.0 * a;
        return s * std::exp(s * lin);
      }
      case Family::LogLinearOutcome:
        return std::exp(lin);
    }
    return kNaN;
  }

  double eval(double a, const RowVectorXd& proxy, const RowVectorXd& x, const VectorXd& par) const {
    if (par.size() != dim_) fail(Errc::DimensionMismatch, "parameter vector has wrong length");
    return eval_from(a, par.dot(basis(a, proxy, x)));
  }

  VectorXd grad(double a, const RowVectorXd& proxy, const RowVectorXd& x, const VectorXd& par) const {
    if (par.size() != dim_) fail(Errc::DimensionMismatch, "parameter vector has wrong length");
    const VectorXd b = basis(a, proxy, x);
    return deriv_from(a, par.dot(b)) * b;
  }

 private:
  Family family_ = Family::LinearBasis;
  int dim_ = 0;
  int proxy_dim_ = 0;
  int x_dim_ = 0;
  std::vector<double> x_levels_;
  BasisFn basis_fn_;
};

struct BridgeFit {
  BridgeModel model;
  VectorXd params;
  double residual_norm = kNaN;       // l2 norm of the empirical moment vector
  double jacobian_condition = kNaN;  // condition number of the moment Jacobian
  bool converged = false;
  int iterations = 0;
};

inline double eval_q(const BridgeFit& fit, double a, const RowVectorXd& z, const RowVectorXd& x) {
  return fit.model.eval(a, z, x, fit.params);
}

inline double eval_h(const BridgeFit& fit, double a, const RowVectorXd& w, const RowVectorXd& x) {
  return fit.model.eval(a, w, x, fit.params);
}

// Gradient-matched default weights: kappa1 mirrors the treatment-bridge basis
// with the outcome proxy substituted for the treatment proxy, and kappa2 the
// outcome-bridge basis with the proxies swapped the other way. For the
// saturated family this gives (1, A, W, AW) / (1, A, Z, AZ) per covariate
// level; for the continuous families an intercept, A, the proxy, and X.
inline MomentWeights default_weights(const BridgeModel* q_model, const BridgeModel* h_model) {
  MomentWeights w;
  if (q_model != nullptr) {
    const BridgeModel qm = *q_model;
    w.kappa1 = [qm](double a, const RowVectorXd& wrow, const RowVectorXd& xrow) {
      return qm.basis(a, wrow, xrow);
    };
    w.kappa1_dim = qm.dim();
  }
  if (h_model != nullptr) {
    const BridgeModel hm = *h_model;
    w.kappa2 = [hm](double a, const RowVectorXd& zrow, const RowVectorXd& xrow) {
      return hm.basis(a, zrow, xrow);
    };
    w.kappa2_dim = hm.dim();
  }
  return w;
}

namespace detail {

struct MomentProblem {
  std::function<VectorXd(const VectorXd&)> moment;
  std::function<MatrixXd(const VectorXd&)> jacobian;
  int dim = 0;
};

struct RootOutcome {
  VectorXd root;
  double residual_norm = kNaN;
  double jacobian_condition = kNaN;
  int iterations = 0;
  bool converged = false;
};

inline double condition_number(const MatrixXd& j) {
  Eigen::JacobiSVD<MatrixXd> svd(j);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  return smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
}

// Damped Newton on the moment vector. The merit function is |m|; failed
// Newton steps fall back to Levenberg-style regularized directions, and a
// derivative-free Broyden pass is the last resort when the analytic path
// stalls. Throws SingularJacobian / NoConvergence.
inline RootOutcome newton_solve(const MomentProblem& prob, VectorXd start, const SolverOptions& opts) {
  RootOutcome out;
  VectorXd theta = std::move(start);
  VectorXd m = prob.moment(theta);
  if (!m.allFinite()) {
    theta.setZero();
    m = prob.moment(theta);
  }

  {
    // A rank-deficient Jacobian at the start signals a structurally
    // unidentified basis (for instance a duplicated column); report it rather
    // than silently regularizing it away.
    const MatrixXd j0 = prob.jacobian(theta);
    Eigen::FullPivLU<MatrixXd> lu(j0);
    lu.setThreshold(1e-10);
    if (j0.allFinite() && lu.rank() < prob.dim)
      fail(Errc::SingularJacobian,
           "moment Jacobian is rank-deficient; the empirical analogue of the completeness "
           "condition fails for this basis");
  }

  int iter = 0;
  double lm = 0.0;  // Levenberg weight, 0 = pure Newton step
  bool stalled = false;
  while (iter < opts.max_iter && m.allFinite() && m.norm() > opts.tol) {
    ++iter;
    const MatrixXd j = prob.jacobian(theta);
    if (!j.allFinite()) { stalled = true; break; }
    const MatrixXd jtj = j.transpose() * j;
    const VectorXd jtm = j.transpose() * m;
    const double scale = std::max(jtj.trace() / prob.dim, 1e-12);
    bool accepted = false;
    while (!accepted) {
      MatrixXd lhs = jtj;
      lhs.diagonal().array() += lm * scale;
      const VectorXd delta = lhs.ldlt().solve(jtm);
      double step = 1.0;
      const double base = m.norm();
      while (step >= 1.0 / 1024.0) {
        const VectorXd cand = theta - step * delta;
        const VectorXd mc = prob.moment(cand);
        if (mc.allFinite() && (mc.norm() < base || mc.norm() <= opts.tol)) {
          theta = cand;
          m = mc;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (accepted) {
        lm = lm > 1e-8 ? lm * 0.25 : 0.0;
      } else {
        lm = lm == 0.0 ? 1e-4 : lm * 10.0;
        if (lm > 1e10) break;
      }
    }
    if (!accepted) { stalled = true; break; }
  }

  if (stalled && iter < opts.max_iter && m.norm() > opts.tol) {
    // Broyden pass: derivative-free rank-one secant updates.
    MatrixXd b = prob.jacobian(theta);
    if (!b.allFinite()) b = MatrixXd::Identity(prob.dim, prob.dim);
    while (iter < opts.max_iter && m.allFinite() && m.norm() > opts.tol) {
      ++iter;
      const VectorXd delta = b.colPivHouseholderQr().solve(m);
      if (!delta.allFinite()) break;
      double step = 1.0;
      bool accepted = false;
      const double base = m.norm();
      while (step >= 1e-6) {
        const VectorXd cand = theta - step * delta;
        const VectorXd mc = prob.moment(cand);
        if (mc.allFinite() && (mc.norm() < base || mc.norm() <= opts.tol)) {
          const VectorXd sv = cand - theta;
          const VectorXd dm = mc - m;
          b += (dm - b * sv) * sv.transpose() / sv.squaredNorm();
          theta = cand;
          m = mc;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
    }
  }

  out.root = theta;
  out.residual_norm = m.norm();
  out.iterations = iter;
  out.converged = m.allFinite() && m.norm() <= opts.tol;
  if (!out.converged)
    fail(Errc::NoConvergence, "moment solver did not reach tolerance after " +
                                  std::to_string(iter) + " iterations (residual " +
                                  std::to_string(out.residual_norm) + ")");
  out.jacobian_condition = condition_number(prob.jacobian(theta));
  return out;
}

// Weighted logistic regression by iteratively reweighted least squares; used
// only to produce starting values, so failures degrade to a zero start.
inline VectorXd logistic_irls(const MatrixXd& design, const VectorXd& resp, const VectorXd& wt) {
  const Eigen::Index p = design.cols();
  VectorXd beta = VectorXd::Zero(p);
  for (int it = 0; it < 25; ++it) {
    VectorXd eta = design * beta;
    VectorXd mu(eta.size()), wirls(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu(i) = expit(eta(i));
      wirls(i) = wt(i) * mu(i) * (1.0 - mu(i));
    }
    MatrixXd xtwx = design.transpose() * wirls.asDiagonal() * design;
    xtwx.diagonal().array() += 1e-10;
    const VectorXd grad = design.transpose() * (wt.cwiseProduct(resp - mu));
    const VectorXd step = xtwx.ldlt().solve(grad);
    if (!step.allFinite()) return VectorXd::Zero(p);
    beta += step;
    if (step.norm() < 1e-10) break;
  }
  return beta.allFinite() ? beta : VectorXd::Zero(p);
}

// Starting value for the inverse-logistic treatment bridge: among outcome-
// free rows, 1/P(A=a|Z,X) from a logistic regression of A on (1, Z, X) has
// exactly the family form with a zero treatment coefficient.
inline VectorXd q_start(const SelectedSample& s, const BridgeModel& model) {
  if (model.family() != BridgeModel::Family::InverseLogisticTreatment)
    return VectorXd::Zero(model.dim());
  const Eigen::Index n = s.n();
  const int p = model.dim() - 1;  // drop the treatment column
  MatrixXd design(n, p);
  VectorXd wt(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVectorXd zi = s.z.row(i);
    const RowVectorXd xi = s.x.cols() > 0 ? RowVectorXd(s.x.row(i)) : RowVectorXd();
    const VectorXd b = model.basis(0.0, zi, xi);  // (1, 0, z, x)
    design(i, 0) = b(0);
    for (int c = 2; c < model.dim(); ++c) design(i, c - 1) = b(c);
    wt(i) = s.weight(i) * (1.0 - s.y(i));
  }
  const VectorXd coef = logistic_irls(design, s.a, wt);
  VectorXd start = VectorXd::Zero(model.dim());
  start(0) = coef(0);
  for (int c = 2; c < model.dim(); ++c) start(c) = coef(c - 1);
  return start;
}

// Precomputed per-row quantities for one bridge moment system. kappa rows and
// basis rows do not depend on the parameters, so they are assembled once.
struct BridgeCache {
  MatrixXd kappa;      // n x d, kappa(a_i, opposite proxy_i, x_i)
  MatrixXd kappa_sum;  // n x d, kappa(1,.,.) + kappa(0,.,.)  (treatment bridge only)
  MatrixXd basis;      // n x d, family basis at (a_i, own proxy_i, x_i)
  VectorXd a;
  VectorXd s;          // weight_i * (1 - y_i)
  VectorXd wy;         // weight_i * y_i
  double wsum = 0.0;
};

inline BridgeCache build_q_cache(const SelectedSample& s, const BridgeModel& model,
                                 const MomentWeights& weights) {
  if (weights.kappa1_dim != model.dim())
    fail(Errc::DimensionMismatch, "kappa1 dimension must equal the treatment bridge dimension");
  const Eigen::Index n = s.n();
  BridgeCache c;
  c.kappa.resize(n, model.dim());
  c.kappa_sum.resize(n, model.dim());
  c.basis.resize(n, model.dim());
  c.a = s.a;
  c.s.resize(n);
  c.wy.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVectorXd zi = s.z.row(i);
    const RowVectorXd wi = s.w.row(i);
    const RowVectorXd xi = s.x.cols() > 0 ? RowVectorXd(s.x.row(i)) : RowVectorXd();
    const VectorXd k = weights.kappa1(s.a(i), wi, xi);
    if (k.size() != model.dim()) fail(Errc::DimensionMismatch, "kappa1 returned wrong length");
    c.kappa.row(i) = k.transpose();
    c.kappa_sum.row(i) =
        (weights.kappa1(1.0, wi, xi) + weights.kappa1(0.0, wi, xi)).transpose();
    c.basis.row(i) = model.basis(s.a(i), zi, xi).transpose();
    const double wt = s.weight(i);
    c.s(i) = wt * (1.0 - s.y(i));
    c.wy(i) = wt * s.y(i);
  }
  c.wsum = s.weight_sum();
  return c;
}

inline BridgeCache build_h_cache(const SelectedSample& s, const BridgeModel& model,
                                 const MomentWeights& weights) {
  if (weights.kappa2_dim != model.dim())
    fail(Errc::DimensionMismatch, "kappa2 dimension must equal the outcome bridge dimension");
  const Eigen::Index n = s.n();
  BridgeCache c;
  c.kappa.resize(n, model.dim());
  c.basis.resize(n, model.dim());
  c.a = s.a;
  c.s.resize(n);
  c.wy.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVectorXd zi = s.z.row(i);
    const RowVectorXd wi = s.w.row(i);
    const RowVectorXd xi = s.x.cols() > 0 ? RowVectorXd(s.x.row(i)) : RowVectorXd();
    const VectorXd k = weights.kappa2(s.a(i), zi, xi);
    if (k.size() != model.dim()) fail(Errc::DimensionMismatch, "kappa2 returned wrong length");
    c.kappa.row(i) = k.transpose();
    c.basis.row(i) = model.basis(s.a(i), wi, xi).transpose();
    const double wt = s.weight(i);
    c.s(i) = wt * (1.0 - s.y(i));
    c.wy(i) = wt * s.y(i);
  }
  c.wsum = s.weight_sum();
  return c;
}

// Treatment bridge moment: mean of (1-Y) { kappa1 q(A,Z,X;tau) - kappa1(1,.) - kappa1(0,.) }.
inline VectorXd q_moment(const BridgeCache& c, const BridgeModel& model, const VectorXd& tau) {
  const VectorXd lin = c.basis * tau;
  VectorXd q(lin.size());
  for (Eigen::Index i = 0; i < lin.size(); ++i) q(i) = model.eval_from(c.a(i), lin(i));
  return (c.kappa.transpose() * c.s.cwiseProduct(q) -
          c.kappa_sum.transpose() * c.s) / c.wsum;
}

inline MatrixXd q_jacobian(const BridgeCache& c, const BridgeModel& model, const VectorXd& tau) {
  const VectorXd lin = c.basis * tau;
  VectorXd d(lin.size());
  for (Eigen::Index i = 0; i < lin.size(); ++i) d(i) = model.deriv_from(c.a(i), lin(i));
  return c.kappa.transpose() * c.s.cwiseProduct(d).asDiagonal() * c.basis / c.wsum;
}

// Outcome bridge moment: mean of kappa2 { (1-Y) h(A,W,X;psi) - Y }.
inline VectorXd h_moment(const BridgeCache& c, const BridgeModel& model, const VectorXd& psi) {
  const VectorXd lin = c.basis * psi;
  VectorXd h(lin.size());
  for (Eigen::Index i = 0; i < lin.size(); ++i) h(i) = model.eval_from(c.a(i), lin(i));
  return (c.kappa.transpose() * c.s.cwiseProduct(h) - c.kappa.transpose() * c.wy) / c.wsum;
}

inline MatrixXd h_jacobian(const BridgeCache& c, const BridgeModel& model, const VectorXd& psi) {
  const VectorXd lin = c.basis * psi;
  VectorXd d(lin.size());
  for (Eigen::Index i = 0; i < lin.size(); ++i) d(i) = model.deriv_from(c.a(i), lin(i));
  return c.kappa.transpose() * c.s.cwiseProduct(d).asDiagonal() * c.basis / c.wsum;
}

inline BridgeFit solve_bridge(const BridgeCache& cache, const BridgeModel& model,
                              const SolverOptions& opts, bool treatment_bridge,
                              const VectorXd& start) {
  MomentProblem prob;
  prob.dim = model.dim();
  if (treatment_bridge) {
    prob.moment = [&cache, &model](const VectorXd& t) { return q_moment(cache, model, t); };
    prob.jacobian = [&cache, &model](const VectorXd& t) { return q_jacobian(cache, model, t); };
  } else {
    prob.moment = [&cache, &model](const VectorXd& t) { return h_moment(cache, model, t); };
    prob.jacobian = [&cache, &model](const VectorXd& t) { return h_jacobian(cache, model, t); };
  }

  BridgeFit fit;
  fit.model = model;

  if (model.linear_in_params() && !opts.force_newton) {
    // The moment is linear in the parameters; the exact solution is one
    // linear solve. rhs differs between the two bridges.
    const MatrixXd m = prob.jacobian(VectorXd::Zero(model.dim()));
    const VectorXd rhs = -prob.moment(VectorXd::Zero(model.dim()));
    Eigen::FullPivLU<MatrixXd> lu(m);
    lu.setThreshold(1e-10);
    if (lu.rank() < model.dim())
      fail(Errc::SingularJacobian, "linear bridge system is rank-deficient");
    fit.params = lu.solve(rhs);
    fit.residual_norm = prob.moment(fit.params).norm();
    fit.jacobian_condition = condition_number(m);
    fit.iterations = 1;
    fit.converged = fit.residual_norm <= opts.tol;
    if (!fit.converged) fail(Errc::NoConvergence, "linear bridge solve left a nonzero residual");
    return fit;
  }

  const RootOutcome out = newton_solve(prob, start, opts);
  fit.params = out.root;
  fit.residual_norm = out.residual_norm;
  fit.jacobian_condition = out.jacobian_condition;
  fit.iterations = out.iterations;
  fit.converged = out.converged;
  return fit;
}

}  // namespace detail

// Fit the treatment confounding bridge by solving the empirical moment
// equation mean (1-Y){kappa1(A,W,X) q(A,Z,X;tau) - kappa1(1,W,X) - kappa1(0,W,X)} = 0.
inline BridgeFit solve_q(const SelectedSample& sample, const BridgeModel& model,
                         const MomentWeights& weights, const SolverOptions& opts = {}) {
  require_valid(sample);
  // The q moment only sees Y=0 rows; it cannot separate the parameters if the
  // treatment is constant there.
  bool a0 = false, a1 = false;
  for (Eigen::Index i = 0; i < sample.n(); ++i) {
    if (sample.y(i) == 0.0 && sample.weight(i) > 0.0) {
      if (sample.a(i) == 0.0) a0 = true;
      else a1 = true;
    }
  }
  if (!a0 || !a1)
    fail(Errc::DegenerateStratum, "all outcome-free rows share one treatment value");
  const detail::BridgeCache cache = detail::build_q_cache(sample, model, weights);
  return detail::solve_bridge(cache, model, opts, /*treatment_bridge=*/true,
                              detail::q_start(sample, model));
}

// Fit the outcome confounding bridge by solving the empirical moment equation
// mean kappa2(A,Z,X){(1-Y) h(A,W,X;psi) - Y} = 0.
inline BridgeFit solve_h(const SelectedSample& sample, const BridgeModel& model,
                         const MomentWeights& weights, const SolverOptions& opts = {}) {
  require_valid(sample);
  const detail::BridgeCache cache = detail::build_h_cache(sample, model, weights);
  return detail::solve_bridge(cache, model, opts, /*treatment_bridge=*/false,
                              VectorXd::Zero(model.dim()));
}

}  // namespace proxor
