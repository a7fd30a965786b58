#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "proxor/bridge.hpp"

namespace proxor {

// Numerator / denominator expectations whose log ratio is the conditional log
// odds ratio. Both must be strictly positive for a well-posed estimate.
struct ThetaComponents {
  double theta1 = 0.0;
  double theta0 = 0.0;
};

namespace detail {

inline RowVectorXd x_row(const MatrixXd& x, Eigen::Index i) {
  return x.cols() > 0 ? RowVectorXd(x.row(i)) : RowVectorXd();
}

// Per-row bridge evaluations used by the plug-in ratios and by the sandwich.
// Missing bridges evaluate to exactly 0 with zero gradient, which realises
// the stated degenerations of the doubly robust form.
struct EvalCache {
  VectorXd a, y, c, wt;
  VectorXd q_own, dq_scale;  // q(a_i, z_i, x_i), link derivative at own row
  MatrixXd q_basis;          // family basis rows at own (a_i, z_i, x_i)
  VectorXd h_own, h1, h0;
  VectorXd dh_own, dh1, dh0;  // link derivatives
  MatrixXd h_basis_own, h_basis1, h_basis0;
  bool has_q = false, has_h = false;
  double wsum = 0.0;
};

inline EvalCache build_eval_cache(const SelectedSample& s, const BridgeFit* qf,
                                  const BridgeFit* hf,
                                  const std::function<double(const RowVectorXd&)>& c_fn) {
  const Eigen::Index n = s.n();
  EvalCache e;
  e.a = s.a;
  e.y = s.y;
  e.c.resize(n);
  e.wt.resize(n);
  e.wsum = s.weight_sum();
  e.has_q = qf != nullptr;
  e.has_h = hf != nullptr;
  e.q_own = VectorXd::Zero(n);
  e.dq_scale = VectorXd::Zero(n);
  e.h_own = VectorXd::Zero(n);
  e.h1 = VectorXd::Zero(n);
  e.h0 = VectorXd::Zero(n);
  e.dh_own = VectorXd::Zero(n);
  e.dh1 = VectorXd::Zero(n);
  e.dh0 = VectorXd::Zero(n);
  if (e.has_q) e.q_basis.resize(n, qf->model.dim());
  if (e.has_h) {
    e.h_basis_own.resize(n, hf->model.dim());
    e.h_basis1.resize(n, hf->model.dim());
    e.h_basis0.resize(n, hf->model.dim());
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVectorXd xi = x_row(s.x, i);
    e.c(i) = c_fn(xi);
    e.wt(i) = s.weight(i);
    if (e.has_q) {
      const VectorXd b = qf->model.basis(s.a(i), s.z.row(i), xi);
      const double lin = qf->params.dot(b);
      e.q_basis.row(i) = b.transpose();
      e.q_own(i) = qf->model.eval_from(s.a(i), lin);
      e.dq_scale(i) = qf->model.deriv_from(s.a(i), lin);
    }
    if (e.has_h) {
      const RowVectorXd wi = s.w.row(i);
      const VectorXd bo = hf->model.basis(s.a(i), wi, xi);
      const VectorXd b1 = hf->model.basis(1.0, wi, xi);
      const VectorXd b0 = hf->model.basis(0.0, wi, xi);
      const double lo = hf->params.dot(bo), l1 = hf->params.dot(b1), l0 = hf->params.dot(b0);
      e.h_basis_own.row(i) = bo.transpose();
      e.h_basis1.row(i) = b1.transpose();
      e.h_basis0.row(i) = b0.transpose();
      e.h_own(i) = hf->model.eval_from(s.a(i), lo);
      e.h1(i) = hf->model.eval_from(1.0, l1);
      e.h0(i) = hf->model.eval_from(0.0, l0);
      e.dh_own(i) = hf->model.deriv_from(s.a(i), lo);
      e.dh1(i) = hf->model.deriv_from(1.0, l1);
      e.dh0(i) = hf->model.deriv_from(0.0, l0);
    }
  }
  return e;
}

// The three per-row integrands at treatment level `a`. The arithmetic is
// shaped so that the doubly robust term collapses to the other two exactly
// when one bridge is identically zero.
inline double pipw_term(double ind_a, double q_own, double y) { return ind_a * (q_own * y); }

inline double por_term(double one_minus_y, double h_a) { return one_minus_y * h_a; }

inline double pdr_term(double ind_a, double q_own, double y, double one_minus_y, double h_own,
                       double h_a) {
  return ind_a * (q_own * (y - one_minus_y * h_own)) + one_minus_y * h_a;
}

inline ThetaComponents components_from_cache(Method method, const EvalCache& e) {
  ThetaComponents t;
  const Eigen::Index n = e.a.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ind1 = e.a(i) == 1.0 ? 1.0 : 0.0;
    const double ind0 = 1.0 - ind1;
    const double omy = 1.0 - e.y(i);
    double t1 = 0.0, t0 = 0.0;
    switch (method) {
      case Method::PIPW:
        t1 = pipw_term(ind1, e.q_own(i), e.y(i));
        t0 = pipw_term(ind0, e.q_own(i), e.y(i));
        break;
      case Method::POR:
        t1 = por_term(omy, e.h1(i));
        t0 = por_term(omy, e.h0(i));
        break;
      case Method::PDR:
        t1 = pdr_term(ind1, e.q_own(i), e.y(i), omy, e.h_own(i), e.h1(i));
        t0 = pdr_term(ind0, e.q_own(i), e.y(i), omy, e.h_own(i), e.h0(i));
        break;
      case Method::Kernel:
        fail(Errc::InvalidSpec, "kernel estimation lives in the kernel module");
    }
    t.theta1 += e.wt(i) * (e.c(i) * t1);
    t.theta0 += e.wt(i) * (e.c(i) * t0);
  }
  return t;
}

}  // namespace detail

inline ThetaComponents pipw_components(const SelectedSample& s, const BridgeFit& q_fit,
                                       const MomentWeights& weights) {
  const detail::EvalCache e = detail::build_eval_cache(s, &q_fit, nullptr, weights.c);
  return detail::components_from_cache(Method::PIPW, e);
}

inline ThetaComponents por_components(const SelectedSample& s, const BridgeFit& h_fit,
                                      const MomentWeights& weights) {
  const detail::EvalCache e = detail::build_eval_cache(s, nullptr, &h_fit, weights.c);
  return detail::components_from_cache(Method::POR, e);
}

inline ThetaComponents pdr_components(const SelectedSample& s, const BridgeFit* q_fit,
                                      const BridgeFit* h_fit, const MomentWeights& weights) {
  if (q_fit == nullptr && h_fit == nullptr)
    fail(Errc::BothBridgesMissing, "doubly robust ratio needs at least one bridge fit");
  const detail::EvalCache e = detail::build_eval_cache(s, q_fit, h_fit, weights.c);
  return detail::components_from_cache(Method::PDR, e);
}

// Joint M-estimation fit over (tau, psi, beta): the point estimate, the full
// sandwich variance A^{-1} B A^{-T} / n with bread A (stacked moment Jacobian)
// and meat B (outer product of the stacked estimating function), and the
// derived Wald summary for the beta block.
struct StackedFit {
  Method method = Method::PDR;
  double beta_hat = kNaN;
  VectorXd tau_hat, psi_hat;
  MatrixXd vcov, bread, meat;
  EstimateResult result;
};

namespace detail {

inline double safe_log_ratio(double t1, double t0) {
  if (!(t1 > 0.0) || !(t0 > 0.0))
    fail(Errc::EmptyCell, "a plug-in ratio component is not strictly positive (theta1=" +
                              std::to_string(t1) + ", theta0=" + std::to_string(t0) + ")");
  return std::log(t1) - std::log(t0);
}

// Assemble the stacked estimating function and sandwich at the plug-in root.
inline StackedFit assemble_stacked(const SelectedSample& s, Method method, const BridgeFit* qf,
                                   const BridgeFit* hf, const MomentWeights& weights) {
  require_valid(s);
  if (method == Method::PIPW && qf == nullptr)
    fail(Errc::InvalidSpec, "pipw needs a treatment bridge fit");
  if (method == Method::POR && hf == nullptr)
    fail(Errc::InvalidSpec, "por needs an outcome bridge fit");
  if (method == Method::PDR && qf == nullptr && hf == nullptr)
    fail(Errc::BothBridgesMissing, "pdr needs at least one bridge fit");
  if (method == Method::PIPW) hf = nullptr;
  if (method == Method::POR) qf = nullptr;

  const Eigen::Index n = s.n();
  const int k = qf != nullptr ? qf->model.dim() : 0;
  const int m = hf != nullptr ? hf->model.dim() : 0;
  const int dim = k + m + 1;

  const EvalCache e = build_eval_cache(s, qf, hf, weights.c);
  const ThetaComponents th = components_from_cache(method, e);
  const double beta = safe_log_ratio(th.theta1, th.theta0);
  const double emb = std::exp(-beta);

  // kappa rows for the nuisance moment blocks.
  std::optional<BridgeCache> qc, hc;
  if (qf != nullptr) qc.emplace(build_q_cache(s, qf->model, weights));
  if (hf != nullptr) hc.emplace(build_h_cache(s, hf->model, weights));

  MatrixXd g = MatrixXd::Zero(n, dim);
  MatrixXd bread = MatrixXd::Zero(dim, dim);
  const double wsum = e.wsum;

  for (Eigen::Index i = 0; i < n; ++i) {
    const double wt = e.wt(i);
    const double y = e.y(i);
    const double omy = 1.0 - y;
    const double ci = e.c(i);
    const double sgn = e.a(i) == 1.0 ? 1.0 : -1.0;
    const double emba = e.a(i) == 1.0 ? emb : 1.0;  // exp(-beta * a_i)

    if (qf != nullptr) {
      const VectorXd grow = omy * (qc->kappa.row(i).transpose() * e.q_own(i) -
                                   qc->kappa_sum.row(i).transpose());
      g.row(i).segment(0, k) = grow.transpose();
      bread.block(0, 0, k, k) += wt * omy * e.dq_scale(i) *
                                 (qc->kappa.row(i).transpose() * e.q_basis.row(i));
    }
    if (hf != nullptr) {
      const VectorXd grow = hc->kappa.row(i).transpose() * (omy * e.h_own(i) - y);
      g.row(i).segment(k, m) = grow.transpose();
      bread.block(k, k, m, m) += wt * omy * e.dh_own(i) *
                                 (hc->kappa.row(i).transpose() * e.h_basis_own.row(i));
    }

    double gbeta = 0.0;
    switch (method) {
      case Method::PIPW: {
        gbeta = ci * (sgn * e.q_own(i) * y * emba);
        bread.block(dim - 1, 0, 1, k) +=
            wt * ci * sgn * y * emba * e.dq_scale(i) * e.q_basis.row(i);
        bread(dim - 1, dim - 1) += wt * ci * sgn * e.q_own(i) * y * emba * (-e.a(i));
        break;
      }
      case Method::POR: {
        gbeta = ci * (omy * (e.h1(i) * emb - e.h0(i)));
        bread.block(dim - 1, k, 1, m) +=
            wt * ci * omy * (emb * e.dh1(i) * e.h_basis1.row(i) - e.dh0(i) * e.h_basis0.row(i));
        bread(dim - 1, dim - 1) += wt * ci * omy * (-emb) * e.h1(i);
        break;
      }
      case Method::PDR: {
        const double resid = y - omy * e.h_own(i);
        gbeta = ci * (sgn * e.q_own(i) * emba * resid + omy * (e.h1(i) * emb - e.h0(i)));
        if (qf != nullptr)
          bread.block(dim - 1, 0, 1, k) +=
              wt * ci * sgn * emba * resid * e.dq_scale(i) * e.q_basis.row(i);
        if (hf != nullptr)
          bread.block(dim - 1, k, 1, m) +=
              wt * ci * (-sgn * e.q_own(i) * emba * omy * e.dh_own(i) * e.h_basis_own.row(i) +
                         omy * (emb * e.dh1(i) * e.h_basis1.row(i) - e.dh0(i) * e.h_basis0.row(i)));
        bread(dim - 1, dim - 1) +=
            wt * ci * (-e.a(i) * sgn * e.q_own(i) * emba * resid - omy * emb * e.h1(i));
        break;
      }
      case Method::Kernel:
        fail(Errc::InvalidSpec, "kernel estimation lives in the kernel module");
    }
    g(i, dim - 1) = gbeta;
  }
  bread /= wsum;

  const VectorXd mean_g = g.transpose() * e.wt / wsum;
  const MatrixXd meat = g.transpose() * e.wt.asDiagonal() * g / wsum;

  Eigen::FullPivLU<MatrixXd> lu(bread);
  lu.setThreshold(1e-12);
  if (lu.rank() < dim) fail(Errc::SingularJacobian, "stacked moment Jacobian is singular");
  const MatrixXd binv = lu.inverse();
  MatrixXd vcov = binv * meat * binv.transpose() / wsum;
  vcov = ((vcov + vcov.transpose()) / 2.0).eval();

  StackedFit fit;
  fit.method = method;
  fit.beta_hat = beta;
  if (qf != nullptr) fit.tau_hat = qf->params;
  if (hf != nullptr) fit.psi_hat = hf->params;
  fit.vcov = vcov;
  fit.bread = bread;
  fit.meat = meat;
  const double se = std::sqrt(std::max(0.0, vcov(dim - 1, dim - 1)));
  const bool conv = (qf == nullptr || qf->converged) && (hf == nullptr || hf->converged) &&
                    std::isfinite(beta) && std::isfinite(se);
  const int iters = (qf != nullptr ? qf->iterations : 0) + (hf != nullptr ? hf->iterations : 0);
  fit.result = make_result(method, beta, se, conv, iters, mean_g.norm());
  return fit;
}

}  // namespace detail

// Plug-in estimators with sandwich standard errors that propagate the
// nuisance estimation step through the stacked Jacobian.
inline EstimateResult estimate_pipw(const SelectedSample& s, const BridgeFit& q_fit,
                                    const MomentWeights& weights) {
  return detail::assemble_stacked(s, Method::PIPW, &q_fit, nullptr, weights).result;
}

inline EstimateResult estimate_por(const SelectedSample& s, const BridgeFit& h_fit,
                                   const MomentWeights& weights) {
  return detail::assemble_stacked(s, Method::POR, nullptr, &h_fit, weights).result;
}

// A missing fit stands for the constant-zero bridge; with h == 0 the result
// reduces to estimate_pipw and with q == 0 to estimate_por, bit for bit.
inline EstimateResult estimate_pdr(const SelectedSample& s, const BridgeFit* q_fit,
                                   const BridgeFit* h_fit, const MomentWeights& weights) {
  return detail::assemble_stacked(s, Method::PDR, q_fit, h_fit, weights).result;
}

// Solve the stacked estimating equation for (tau, psi, beta). The system is
// block triangular: the bridge blocks do not involve beta, so the root is the
// bridge solutions together with the closed-form beta at those values.
inline StackedFit joint_fit(const SelectedSample& s, Method method, const BridgeModel* q_model,
                            const BridgeModel* h_model, const MomentWeights& weights,
                            const SolverOptions& opts = {}) {
  std::optional<BridgeFit> qf, hf;
  if ((method == Method::PIPW || method == Method::PDR) && q_model != nullptr)
    qf = solve_q(s, *q_model, weights, opts);
  if ((method == Method::POR || method == Method::PDR) && h_model != nullptr)
    hf = solve_h(s, *h_model, weights, opts);
  return detail::assemble_stacked(s, method, qf ? &*qf : nullptr, hf ? &*hf : nullptr, weights);
}

// ---------------------------------------------------------------------------
// Effect modification: beta0(X; alpha) = alpha . beta_basis(X), estimated by
// the method-specific moment equation weighted by the vector c_vec(X).
// ---------------------------------------------------------------------------

struct EffectModSpec {
  std::function<VectorXd(const RowVectorXd&)> beta_basis;
  int beta_dim = 0;
  std::function<VectorXd(const RowVectorXd&)> c_vec;
  int c_dim = 0;

  // Polynomial in a scalar covariate, c_vec equal to the same basis.
  static EffectModSpec polynomial(int degree) {
    EffectModSpec spec;
    spec.beta_dim = degree + 1;
    spec.c_dim = degree + 1;
    auto basis = [degree](const RowVectorXd& x) {
      VectorXd b(degree + 1);
      const double v = x.size() > 0 ? x(0) : 0.0;
      double p = 1.0;
      for (int j = 0; j <= degree; ++j) {
        b(j) = p;
        p *= v;
      }
      return b;
    };
    spec.beta_basis = basis;
    spec.c_vec = basis;
    return spec;
  }

  static EffectModSpec constant() { return polynomial(0); }
};

struct EffectModFit {
  Method method = Method::PDR;
  VectorXd alpha;
  VectorXd alpha_se;
  MatrixXd vcov;  // over (tau, psi, alpha)
  MatrixXd vcov_alpha;
  VectorXd tau, psi;
  bool converged = false;
  int iterations = 0;
  double moment_residual_norm = kNaN;
  std::function<VectorXd(const RowVectorXd&)> beta_basis;

  double beta_at(const RowVectorXd& x) const { return alpha.dot(beta_basis(x)); }
};

inline EffectModFit effect_mod_fit(const SelectedSample& s, Method method,
                                   const EffectModSpec& spec, const BridgeFit* qf,
                                   const BridgeFit* hf, const MomentWeights& weights,
                                   const SolverOptions& opts = {}) {
  require_valid(s);
  if (spec.c_dim != spec.beta_dim)
    fail(Errc::DimensionMismatch,
         "effect modification uses exact identification: dim(c_vec) must equal dim(alpha)");
  if (method == Method::PIPW && qf == nullptr)
    fail(Errc::InvalidSpec, "pipw effect modification needs a treatment bridge fit");
  if (method == Method::POR && hf == nullptr)
    fail(Errc::InvalidSpec, "por effect modification needs an outcome bridge fit");
  if (method == Method::PDR && qf == nullptr && hf == nullptr)
    fail(Errc::BothBridgesMissing, "pdr effect modification needs at least one bridge fit");
  if (method == Method::PIPW) hf = nullptr;
  if (method == Method::POR) qf = nullptr;

  const Eigen::Index n = s.n();
  const int k = qf != nullptr ? qf->model.dim() : 0;
  const int m = hf != nullptr ? hf->model.dim() : 0;
  const int p = spec.beta_dim;
  const detail::EvalCache e = detail::build_eval_cache(s, qf, hf, weights.c);
  const double wsum = e.wsum;

  MatrixXd cvec(n, p), bbeta(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVectorXd xi = detail::x_row(s.x, i);
    const VectorXd cv = spec.c_vec(xi);
    const VectorXd bb = spec.beta_basis(xi);
    if (cv.size() != p || bb.size() != p)
      fail(Errc::DimensionMismatch, "effect modification basis returned wrong length");
    cvec.row(i) = cv.transpose();
    bbeta.row(i) = bb.transpose();
  }

  // Method-specific alpha moment and its Jacobian, at fixed bridge fits.
  auto alpha_moment = [&](const VectorXd& alpha) {
    VectorXd f = VectorXd::Zero(p);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = bbeta.row(i).dot(alpha);
      const double omy = 1.0 - e.y(i);
      const double sgn = e.a(i) == 1.0 ? 1.0 : -1.0;
      const double emba = e.a(i) == 1.0 ? std::exp(-b) : 1.0;
      double val = 0.0;
      if (method == Method::PIPW) {
        val = sgn * e.q_own(i) * e.y(i) * emba;
      } else if (method == Method::POR) {
        val = omy * (e.h1(i) * std::exp(-b) - e.h0(i));
      } else {
        val = sgn * e.q_own(i) * emba * (e.y(i) - omy * e.h_own(i)) +
              omy * (e.h1(i) * std::exp(-b) - e.h0(i));
      }
      f += e.wt(i) * val * cvec.row(i).transpose();
    }
    return VectorXd(f / wsum);
  };
  auto alpha_jacobian = [&](const VectorXd& alpha) {
    MatrixXd j = MatrixXd::Zero(p, p);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = bbeta.row(i).dot(alpha);
      const double omy = 1.0 - e.y(i);
      const double sgn = e.a(i) == 1.0 ? 1.0 : -1.0;
      const double emb = std::exp(-b);
      const double emba = e.a(i) == 1.0 ? emb : 1.0;
      double dval = 0.0;
      if (method == Method::PIPW) {
        dval = -e.a(i) * sgn * e.q_own(i) * e.y(i) * emba;
      } else if (method == Method::POR) {
        dval = -omy * e.h1(i) * emb;
      } else {
        dval = -e.a(i) * sgn * e.q_own(i) * emba * (e.y(i) - omy * e.h_own(i)) -
               omy * e.h1(i) * emb;
      }
      j += e.wt(i) * dval * (cvec.row(i).transpose() * bbeta.row(i));
    }
    return MatrixXd(j / wsum);
  };

  detail::MomentProblem prob{alpha_moment, alpha_jacobian, p};
  const detail::RootOutcome root = detail::newton_solve(prob, VectorXd::Zero(p), opts);
  const VectorXd alpha = root.root;

  // Stacked sandwich over (tau, psi, alpha).
  const int dim = k + m + p;
  std::optional<detail::BridgeCache> qc, hc;
  if (qf != nullptr) qc.emplace(detail::build_q_cache(s, qf->model, weights));
  if (hf != nullptr) hc.emplace(detail::build_h_cache(s, hf->model, weights));
  MatrixXd g = MatrixXd::Zero(n, dim);
  MatrixXd bread = MatrixXd::Zero(dim, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wt = e.wt(i);
    const double y = e.y(i);
    const double omy = 1.0 - y;
    const double sgn = e.a(i) == 1.0 ? 1.0 : -1.0;
    const double b = bbeta.row(i).dot(alpha);
    const double emb = std::exp(-b);
    const double emba = e.a(i) == 1.0 ? emb : 1.0;
    if (qf != nullptr) {
      g.row(i).segment(0, k) = (omy * (qc->kappa.row(i).transpose() * e.q_own(i) -
                                       qc->kappa_sum.row(i).transpose()))
                                   .transpose();
      bread.block(0, 0, k, k) +=
          wt * omy * e.dq_scale(i) * (qc->kappa.row(i).transpose() * e.q_basis.row(i));
    }
    if (hf != nullptr) {
      g.row(i).segment(k, m) =
          (hc->kappa.row(i).transpose() * (omy * e.h_own(i) - y)).transpose();
      bread.block(k, k, m, m) +=
          wt * omy * e.dh_own(i) * (hc->kappa.row(i).transpose() * e.h_basis_own.row(i));
    }
    double val = 0.0, dval = 0.0;
    RowVectorXd dtau = RowVectorXd::Zero(std::max(1, k));
    RowVectorXd dpsi = RowVectorXd::Zero(std::max(1, m));
    if (method == Method::PIPW) {
      val = sgn * e.q_own(i) * y * emba;
      dval = -e.a(i) * val;
      if (k > 0) dtau = sgn * y * emba * e.dq_scale(i) * e.q_basis.row(i);
    } else if (method == Method::POR) {
      val = omy * (e.h1(i) * emb - e.h0(i));
      dval = -omy * e.h1(i) * emb;
      if (m > 0)
        dpsi = omy * (emb * e.dh1(i) * e.h_basis1.row(i) - e.dh0(i) * e.h_basis0.row(i));
    } else {
      const double resid = y - omy * e.h_own(i);
      val = sgn * e.q_own(i) * emba * resid + omy * (e.h1(i) * emb - e.h0(i));
      dval = -e.a(i) * sgn * e.q_own(i) * emba * resid - omy * e.h1(i) * emb;
      if (k > 0) dtau = sgn * emba * resid * e.dq_scale(i) * e.q_basis.row(i);
      if (m > 0)
        dpsi = -sgn * e.q_own(i) * emba * omy * e.dh_own(i) * e.h_basis_own.row(i) +
               omy * (emb * e.dh1(i) * e.h_basis1.row(i) - e.dh0(i) * e.h_basis0.row(i));
    }
    g.row(i).segment(k + m, p) = val * cvec.row(i);
    if (k > 0) bread.block(k + m, 0, p, k) += wt * (cvec.row(i).transpose() * dtau);
    if (m > 0) bread.block(k + m, k, p, m) += wt * (cvec.row(i).transpose() * dpsi);
    bread.block(k + m, k + m, p, p) += wt * dval * (cvec.row(i).transpose() * bbeta.row(i));
  }
  bread /= wsum;
  const MatrixXd meat = g.transpose() * e.wt.asDiagonal() * g / wsum;
  const VectorXd mean_g = g.transpose() * e.wt / wsum;

  Eigen::FullPivLU<MatrixXd> lu(bread);
  lu.setThreshold(1e-12);
  if (lu.rank() < dim) fail(Errc::SingularJacobian, "stacked moment Jacobian is singular");
  const MatrixXd binv = lu.inverse();
  MatrixXd vcov = binv * meat * binv.transpose() / wsum;
  vcov = ((vcov + vcov.transpose()) / 2.0).eval();

  EffectModFit fit;
  fit.method = method;
  fit.alpha = alpha;
  fit.vcov = vcov;
  fit.vcov_alpha = vcov.block(k + m, k + m, p, p);
  fit.alpha_se = fit.vcov_alpha.diagonal().cwiseMax(0.0).cwiseSqrt();
  if (qf != nullptr) fit.tau = qf->params;
  if (hf != nullptr) fit.psi = hf->params;
  fit.converged = root.converged && (qf == nullptr || qf->converged) &&
                  (hf == nullptr || hf->converged);
  fit.iterations = root.iterations;
  fit.moment_residual_norm = mean_g.norm();
  fit.beta_basis = spec.beta_basis;
  return fit;
}

// ---------------------------------------------------------------------------
// Polytomous treatment and outcome. Treatment levels a_0..a_J and outcome
// levels y_0..y_K are coded 0..J and 0..K with 0 the reference. One treatment
// bridge is shared across outcome levels; one outcome bridge is fit per
// non-reference outcome level. Default working models are corner-coded
// saturated bases over the observed categorical proxy levels, which makes the
// J=K=1 case coincide with the binary pipeline.
// ---------------------------------------------------------------------------

struct PolytomousSample {
  VectorXi a;   // values in 0..J
  VectorXi y;   // values in 0..K
  MatrixXd z;
  MatrixXd w;
  MatrixXd x;
  VectorXd row_weight;

  Eigen::Index n() const { return a.size(); }
  double weight(Eigen::Index i) const { return row_weight.size() > 0 ? row_weight(i) : 1.0; }
  double weight_sum() const {
    return row_weight.size() > 0 ? row_weight.sum() : static_cast<double>(n());
  }
  int treatment_levels() const { return a.size() > 0 ? a.maxCoeff() + 1 : 0; }
  int outcome_levels() const { return y.size() > 0 ? y.maxCoeff() + 1 : 0; }
};

struct PolytomousCell {
  double beta_hat = kNaN;
  double std_err = kNaN;
  double ci_low = kNaN;
  double ci_high = kNaN;
  bool converged = false;
};

struct PolytomousResult {
  Method method = Method::PDR;
  int J = 0, K = 0;
  std::vector<std::vector<PolytomousCell>> cells;  // [j-1][k-1]
  VectorXd tau;
  std::vector<VectorXd> psi;  // per outcome level k
};

struct PolytomousOptions {
  std::function<double(const RowVectorXd&)> c = [](const RowVectorXd&) { return 1.0; };
  // Bases over (level, proxy row, x row); empty -> corner-coded saturated
  // bases from the observed levels of the scalar proxies.
  BridgeModel::BasisFn q_basis;
  int q_dim = 0;
  BridgeModel::BasisFn h_basis;
  int h_dim = 0;
  BridgeModel::BasisFn kappa1;
  int kappa1_dim = 0;
  BridgeModel::BasisFn kappa2;
  int kappa2_dim = 0;
  // Preset bridge coefficients replace the moment solves (e.g. a zero outcome
  // bridge realizes the reduction of the doubly robust form).
  std::optional<VectorXd> fixed_tau;
  std::optional<std::vector<VectorXd>> fixed_psi;
  SolverOptions solver;
};

namespace detail {

inline std::vector<double> sorted_unique(const VectorXd& v) {
  std::vector<double> levels(v.data(), v.data() + v.size());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  return levels;
}

// Corner tensor basis: entries ind_level(m) * ind_treat(j) ordered with the
// treatment index varying fastest, where index 0 means the constant 1. For
// two binary factors this is exactly (1, a, z, az).
inline BridgeModel::BasisFn corner_basis(int n_treat, std::vector<double> proxy_levels) {
  return [n_treat, proxy_levels](double a, const RowVectorXd& proxy, const RowVectorXd&) {
    if (proxy.size() != 1)
      fail(Errc::DimensionMismatch, "default polytomous basis needs a scalar categorical proxy");
    const std::size_t lz = proxy_levels.size();
    VectorXd b(static_cast<Eigen::Index>(lz) * n_treat);
    Eigen::Index idx = 0;
    for (std::size_t mz = 0; mz < lz; ++mz) {
      const double zind = mz == 0 ? 1.0 : (proxy(0) == proxy_levels[mz] ? 1.0 : 0.0);
      for (int j = 0; j < n_treat; ++j) {
        const double aind = j == 0 ? 1.0 : (a == static_cast<double>(j) ? 1.0 : 0.0);
        b(idx++) = aind * zind;
      }
    }
    return b;
  };
}

}  // namespace detail

inline PolytomousResult polytomous_fit(const PolytomousSample& ps, Method method,
                                       PolytomousOptions opts = {}) {
  const Eigen::Index n = ps.n();
  if (n == 0) fail(Errc::DimensionMismatch, "empty polytomous sample");
  const int J = ps.treatment_levels() - 1;
  const int K = ps.outcome_levels() - 1;
  if (J < 1 || K < 1) fail(Errc::InvalidSpec, "need at least two treatment and outcome levels");
  if (ps.a.minCoeff() < 0 || ps.y.minCoeff() < 0)
    fail(Errc::InvalidSpec, "levels must be coded 0..J and 0..K");
  {
    double w_ref = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (ps.y(i) == 0) w_ref += ps.weight(i);
    if (w_ref <= 0.0) fail(Errc::DegenerateStratum, "reference outcome level is empty");
  }

  const int n_treat = J + 1;
  if (!opts.q_basis) {
    const std::vector<double> zl = detail::sorted_unique(ps.z.col(0));
    opts.q_basis = detail::corner_basis(n_treat, zl);
    opts.q_dim = n_treat * static_cast<int>(zl.size());
  }
  if (!opts.h_basis) {
    const std::vector<double> wl = detail::sorted_unique(ps.w.col(0));
    opts.h_basis = detail::corner_basis(n_treat, wl);
    opts.h_dim = n_treat * static_cast<int>(wl.size());
  }
  if (!opts.kappa1) {
    const std::vector<double> wl = detail::sorted_unique(ps.w.col(0));
    opts.kappa1 = detail::corner_basis(n_treat, wl);
    opts.kappa1_dim = n_treat * static_cast<int>(wl.size());
  }
  if (!opts.kappa2) {
    const std::vector<double> zl = detail::sorted_unique(ps.z.col(0));
    opts.kappa2 = detail::corner_basis(n_treat, zl);
    opts.kappa2_dim = n_treat * static_cast<int>(zl.size());
  }
  const bool use_q = method == Method::PIPW || method == Method::PDR;
  const bool use_h = method == Method::POR || method == Method::PDR;
  if (use_q && opts.kappa1_dim != opts.q_dim)
    fail(Errc::DimensionMismatch, "kappa1 dimension must equal the treatment bridge dimension");
  if (use_h && opts.kappa2_dim != opts.h_dim)
    fail(Errc::DimensionMismatch, "kappa2 dimension must equal the outcome bridge dimension");

  const double wsum = ps.weight_sum();
  VectorXd indY0(n), wt(n), cv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    indY0(i) = ps.y(i) == 0 ? 1.0 : 0.0;
    wt(i) = ps.weight(i);
    cv(i) = opts.c(detail::x_row(ps.x, i));
  }

  // Treatment bridge: linear solve of the polytomous moment equation.
  const int kq = use_q ? opts.q_dim : 0;
  VectorXd tau;
  MatrixXd q_kappa, q_kappa_sum, q_basis_own;
  std::vector<MatrixXd> q_basis_at(static_cast<std::size_t>(n_treat));
  if (use_q) {
    bool any_other = false;
    for (Eigen::Index i = 0; i < n; ++i)
      if (ps.y(i) == 0 && wt(i) > 0.0 && ps.a(i) != ps.a(0)) any_other = true;
    if (!any_other)
      fail(Errc::DegenerateStratum, "all reference-outcome rows share one treatment level");
    q_kappa.resize(n, kq);
    q_kappa_sum.resize(n, kq);
    q_basis_own.resize(n, kq);
    for (int j = 0; j < n_treat; ++j) q_basis_at[j].resize(n, kq);
    for (Eigen::Index i = 0; i < n; ++i) {
      const RowVectorXd xi = detail::x_row(ps.x, i);
      const RowVectorXd zi = ps.z.row(i);
      const RowVectorXd wi = ps.w.row(i);
      q_kappa.row(i) = opts.kappa1(static_cast<double>(ps.a(i)), wi, xi).transpose();
      VectorXd ksum = VectorXd::Zero(kq);
      for (int j = 0; j < n_treat; ++j) ksum += opts.kappa1(static_cast<double>(j), wi, xi);
      q_kappa_sum.row(i) = ksum.transpose();
      for (int j = 0; j < n_treat; ++j)
        q_basis_at[j].row(i) = opts.q_basis(static_cast<double>(j), zi, xi).transpose();
      q_basis_own.row(i) = q_basis_at[ps.a(i)].row(i);
    }
    if (opts.fixed_tau.has_value()) {
      tau = *opts.fixed_tau;
      if (tau.size() != kq) fail(Errc::DimensionMismatch, "fixed tau has wrong length");
    } else {
      const VectorXd sw = wt.cwiseProduct(indY0);
      const MatrixXd mmat = q_kappa.transpose() * sw.asDiagonal() * q_basis_own / wsum;
      const VectorXd v = q_kappa_sum.transpose() * sw / wsum;
      Eigen::FullPivLU<MatrixXd> lu(mmat);
      lu.setThreshold(1e-10);
      if (lu.rank() < kq)
        fail(Errc::SingularJacobian, "polytomous treatment bridge system is rank-deficient");
      tau = lu.solve(v);
    }
  }

  // Outcome bridges per non-reference outcome level.
  const int kh = use_h ? opts.h_dim : 0;
  std::vector<VectorXd> psis(static_cast<std::size_t>(K));
  MatrixXd h_kappa, h_basis_own;
  std::vector<MatrixXd> h_basis_at(static_cast<std::size_t>(n_treat));
  if (use_h) {
    h_kappa.resize(n, kh);
    h_basis_own.resize(n, kh);
    for (int j = 0; j < n_treat; ++j) h_basis_at[j].resize(n, kh);
    for (Eigen::Index i = 0; i < n; ++i) {
      const RowVectorXd xi = detail::x_row(ps.x, i);
      const RowVectorXd zi = ps.z.row(i);
      const RowVectorXd wi = ps.w.row(i);
      h_kappa.row(i) = opts.kappa2(static_cast<double>(ps.a(i)), zi, xi).transpose();
      for (int j = 0; j < n_treat; ++j)
        h_basis_at[j].row(i) = opts.h_basis(static_cast<double>(j), wi, xi).transpose();
      h_basis_own.row(i) = h_basis_at[ps.a(i)].row(i);
    }
    if (opts.fixed_psi.has_value()) {
      if (static_cast<int>(opts.fixed_psi->size()) != K)
        fail(Errc::DimensionMismatch, "fixed psi needs one vector per outcome level");
      for (int k = 1; k <= K; ++k) {
        psis[k - 1] = (*opts.fixed_psi)[k - 1];
        if (psis[k - 1].size() != kh) fail(Errc::DimensionMismatch, "fixed psi has wrong length");
      }
    } else {
      const VectorXd sw = wt.cwiseProduct(indY0);
      const MatrixXd mmat = h_kappa.transpose() * sw.asDiagonal() * h_basis_own / wsum;
      Eigen::FullPivLU<MatrixXd> lu(mmat);
      lu.setThreshold(1e-10);
      if (lu.rank() < kh)
        fail(Errc::SingularJacobian, "polytomous outcome bridge system is rank-deficient");
      for (int k = 1; k <= K; ++k) {
        VectorXd indYk(n);
        for (Eigen::Index i = 0; i < n; ++i) indYk(i) = ps.y(i) == k ? 1.0 : 0.0;
        const VectorXd v = h_kappa.transpose() * wt.cwiseProduct(indYk) / wsum;
        psis[k - 1] = lu.solve(v);
      }
    }
  }

  PolytomousResult out;
  out.method = method;
  out.J = J;
  out.K = K;
  out.tau = tau;
  out.psi = psis;
  out.cells.assign(J, std::vector<PolytomousCell>(K));

  // theta integrand for treatment level j, outcome level k, row i.
  auto term = [&](int j, int k, Eigen::Index i, const VectorXd& psi_k) {
    const double indA = ps.a(i) == j ? 1.0 : 0.0;
    const double indYk = ps.y(i) == k ? 1.0 : 0.0;
    switch (method) {
      case Method::PIPW: {
        const double qj = tau.dot(q_basis_at[j].row(i));
        return (indA * indYk) * qj;
      }
      case Method::POR: {
        const double hj = psi_k.dot(h_basis_at[j].row(i));
        return indY0(i) * hj;
      }
      case Method::PDR: {
        const double qj = tau.dot(q_basis_at[j].row(i));
        const double hj = psi_k.dot(h_basis_at[j].row(i));
        const double hown = psi_k.dot(h_basis_own.row(i));
        return indA * (qj * (indYk - indY0(i) * hown)) + indY0(i) * hj;
      }
      default:
        fail(Errc::InvalidSpec, "unsupported polytomous method");
    }
  };

  for (int k = 1; k <= K; ++k) {
    const VectorXd psi_k = use_h ? psis[k - 1] : VectorXd();
    // theta for the reference treatment level.
    double t0 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) t0 += wt(i) * (cv(i) * term(0, k, i, psi_k));
    for (int j = 1; j <= J; ++j) {
      double tj = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) tj += wt(i) * (cv(i) * term(j, k, i, psi_k));
      if (!(tj > 0.0) || !(t0 > 0.0))
        fail(Errc::EmptyCell, "polytomous cell (" + std::to_string(j) + "," + std::to_string(k) +
                                  ") has a nonpositive ratio component");
      const double beta = std::log(tj) - std::log(t0);
      const double emb = std::exp(-beta);

      // Stacked sandwich for this cell: [tau block; psi_k block; beta].
      const int dim = kq + kh + 1;
      MatrixXd g = MatrixXd::Zero(n, dim);
      MatrixXd bread = MatrixXd::Zero(dim, dim);
      VectorXd indYk(n);
      for (Eigen::Index i = 0; i < n; ++i) indYk(i) = ps.y(i) == k ? 1.0 : 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double wti = wt(i);
        if (use_q) {
          const double q_own = tau.dot(q_basis_own.row(i));
          g.row(i).segment(0, kq) =
              indY0(i) * (q_kappa.row(i) * q_own - q_kappa_sum.row(i));
          bread.block(0, 0, kq, kq) +=
              wti * indY0(i) * (q_kappa.row(i).transpose() * q_basis_own.row(i));
        }
        if (use_h) {
          const double h_own = psi_k.dot(h_basis_own.row(i));
          g.row(i).segment(kq, kh) = h_kappa.row(i) * (indY0(i) * h_own - indYk(i));
          bread.block(kq, kq, kh, kh) +=
              wti * indY0(i) * (h_kappa.row(i).transpose() * h_basis_own.row(i));
        }
        const double tj_i = term(j, k, i, psi_k);
        const double t0_i = term(0, k, i, psi_k);
        g(i, dim - 1) = cv(i) * (tj_i * emb - t0_i);

        // derivatives of the theta integrands
        const double indAj = ps.a(i) == j ? 1.0 : 0.0;
        const double indA0 = ps.a(i) == 0 ? 1.0 : 0.0;
        if (use_q) {
          RowVectorXd dq_j = RowVectorXd::Zero(kq), dq_0 = RowVectorXd::Zero(kq);
          if (method == Method::PIPW) {
            dq_j = (indAj * indYk(i)) * q_basis_at[j].row(i);
            dq_0 = (indA0 * indYk(i)) * q_basis_at[0].row(i);
          } else if (method == Method::PDR) {
            const double hown = psi_k.dot(h_basis_own.row(i));
            dq_j = indAj * (indYk(i) - indY0(i) * hown) * q_basis_at[j].row(i);
            dq_0 = indA0 * (indYk(i) - indY0(i) * hown) * q_basis_at[0].row(i);
          }
          bread.block(dim - 1, 0, 1, kq) += wti * cv(i) * (dq_j * emb - dq_0);
        }
        if (use_h) {
          RowVectorXd dh_j = RowVectorXd::Zero(kh), dh_0 = RowVectorXd::Zero(kh);
          if (method == Method::POR) {
            dh_j = indY0(i) * h_basis_at[j].row(i);
            dh_0 = indY0(i) * h_basis_at[0].row(i);
          } else if (method == Method::PDR) {
            const double qj = tau.dot(q_basis_at[j].row(i));
            const double q0 = tau.dot(q_basis_at[0].row(i));
            dh_j = indY0(i) * h_basis_at[j].row(i) -
                   indAj * qj * indY0(i) * h_basis_own.row(i);
            dh_0 = indY0(i) * h_basis_at[0].row(i) -
                   indA0 * q0 * indY0(i) * h_basis_own.row(i);
          }
          bread.block(dim - 1, kq, 1, kh) += wti * cv(i) * (dh_j * emb - dh_0);
        }
        bread(dim - 1, dim - 1) += wti * cv(i) * (-tj_i * emb);
      }
      bread /= wsum;
      const MatrixXd meat = g.transpose() * wt.asDiagonal() * g / wsum;
      Eigen::FullPivLU<MatrixXd> lu(bread);
      lu.setThreshold(1e-12);
      PolytomousCell cell;
      cell.beta_hat = beta;
      if (lu.rank() == dim) {
        const MatrixXd binv = lu.inverse();
        const MatrixXd vcov = binv * meat * binv.transpose() / wsum;
        cell.std_err = std::sqrt(std::max(0.0, vcov(dim - 1, dim - 1)));
        cell.ci_low = beta - kZ975 * cell.std_err;
        cell.ci_high = beta + kZ975 * cell.std_err;
        cell.converged = std::isfinite(beta) && std::isfinite(cell.std_err);
      }
      out.cells[j - 1][k - 1] = cell;
    }
  }
  return out;
}

}  // namespace proxor
