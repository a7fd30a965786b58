#pragma once

#include <functional>
#include <string>
#include <vector>

#include "proxor/data.hpp"

namespace proxor {

// A fully enumerated finite data-generating law over (U, X, A, Y, Z, W, S)
// factored along the causal ordering: (U,X), A|U,X, Y|A,U,X, Z|A,U,X,
// W|U,X,Y, S|A,U,X,Y. The factorization itself encodes the proxy
// independences; the selection table is free so assumption violations can be
// represented and detected.
struct DiscreteLawSpec {
  std::vector<double> u_levels;
  std::vector<double> x_levels;  // empty: no measured covariates
  std::vector<double> z_levels;
  std::vector<double> w_levels;

  MatrixXd p_ux;               // nU x nXe joint prior, sums to 1
  MatrixXd p_a1;               // nU x nXe, P(A=1|u,x)
  std::vector<VectorXd> pz;    // [(a*nU + u)*nXe + x] -> distribution over z levels
  std::vector<VectorXd> pw;    // [(u*nXe + x)*2 + y] -> distribution over w levels
  MatrixXd py1[2];             // [a](u,x) = P(Y=1|a,u,x)
  MatrixXd ps1[2][2];          // [a][y](u,x) = P(S=1|a,u,x,y)

  int nU() const { return static_cast<int>(u_levels.size()); }
  int nXe() const { return std::max<int>(1, static_cast<int>(x_levels.size())); }
  bool has_x() const { return !x_levels.empty(); }
  int nZ() const { return static_cast<int>(z_levels.size()); }
  int nW() const { return static_cast<int>(w_levels.size()); }

  const VectorXd& pz_at(int a, int u, int x) const { return pz[(a * nU() + u) * nXe() + x]; }
  const VectorXd& pw_at(int u, int x, int y) const { return pw[(u * nXe() + x) * 2 + y]; }

  // Joint probability of one configuration.
  double joint(int u, int x, int a, int y, int z, int w, int s) const {
    const double pa = a == 1 ? p_a1(u, x) : 1.0 - p_a1(u, x);
    const double py = y == 1 ? py1[a](u, x) : 1.0 - py1[a](u, x);
    const double ps = s == 1 ? ps1[a][y](u, x) : 1.0 - ps1[a][y](u, x);
    return p_ux(u, x) * pa * py * pz_at(a, u, x)(z) * pw_at(u, x, y)(w) * ps;
  }

  void check() const {
    auto in01 = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (std::abs(p_ux.sum() - 1.0) > 1e-12) fail(Errc::InvalidSpec, "prior does not sum to 1");
    for (int u = 0; u < nU(); ++u)
      for (int x = 0; x < nXe(); ++x) {
        if (!in01(p_a1(u, x))) fail(Errc::InvalidSpec, "treatment probability outside [0,1]");
        for (int a = 0; a < 2; ++a) {
          if (!in01(py1[a](u, x))) fail(Errc::InvalidSpec, "outcome probability outside [0,1]");
          for (int y = 0; y < 2; ++y)
            if (!in01(ps1[a][y](u, x)))
              fail(Errc::InvalidSpec, "selection probability outside [0,1]");
          const VectorXd& dz = pz_at(a, u, x);
          if (dz.minCoeff() < -1e-12 || std::abs(dz.sum() - 1.0) > 1e-12)
            fail(Errc::InvalidSpec, "treatment proxy distribution invalid");
        }
        for (int y = 0; y < 2; ++y) {
          const VectorXd& dw = pw_at(u, x, y);
          if (dw.minCoeff() < -1e-12 || std::abs(dw.sum() - 1.0) > 1e-12)
            fail(Errc::InvalidSpec, "outcome proxy distribution invalid");
        }
      }
  }
};

// Exact finite-distribution quantities: the estimand evaluated with the
// latent variable visible, population bridges from linear solves of their
// defining equations, and the three closed-form identification formulas
// evaluated on the selected-sample law.
struct DiscreteOracle {
  double beta0_lemma1 = kNaN;
  double theta1 = kNaN, theta0 = kNaN;
  double beta_pipw = kNaN, beta_por = kNaN, beta_pdr = kNaN;
  double p_select = kNaN;
  // q_exact[x](a, z-index), h_exact[x](a, w-index)
  std::vector<MatrixXd> q_exact, h_exact;
  bool selection_ratio_constant = true;
  double selection_ratio_max_dev = 0.0;
};

namespace detail {

// Minimal L2(nu)-norm solution of M q = r where nu is the given probability
// weight over the unknowns. For square nonsingular systems this is the unique
// solution; for underdetermined ones it picks the canonical bridge (constant
// whenever a constant solves the system). Infeasible systems raise
// IncompleteProxies.
inline VectorXd weighted_minnorm_solve(const MatrixXd& m, const VectorXd& r, const VectorXd& nu) {
  const Eigen::Index cols = m.cols();
  VectorXd scale(cols);
  for (Eigen::Index j = 0; j < cols; ++j) scale(j) = nu(j) > 0.0 ? std::sqrt(nu(j)) : 0.0;
  // columns with zero mass are unreachable; their value is irrelevant
  MatrixXd mt(m.rows(), cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    mt.col(j) = scale(j) > 0.0 ? VectorXd(m.col(j) / scale(j)) : VectorXd::Zero(m.rows());
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(mt);
  cod.setThreshold(1e-10);
  const VectorXd qt = cod.solve(r);
  VectorXd q = VectorXd::Zero(cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    if (scale(j) > 0.0) q(j) = qt(j) / scale(j);
  if ((m * q - r).norm() > 1e-8 * (1.0 + r.norm()))
    fail(Errc::IncompleteProxies,
         "bridge-defining linear system has no solution; the proxy is not informative enough");
  return q;
}

}  // namespace detail

inline DiscreteOracle discrete_oracle(
    const DiscreteLawSpec& law,
    const std::function<double(double)>& c = [](double) { return 1.0; }) {
  law.check();
  const int nu = law.nU(), nx = law.nXe(), nz = law.nZ(), nw = law.nW();

  DiscreteOracle out;
  out.q_exact.assign(nx, MatrixXd::Zero(2, nz));
  out.h_exact.assign(nx, MatrixXd::Zero(2, nw));

  // P(S=1) and P(U,X | S=1)
  double psel = 0.0;
  MatrixXd pux_s1 = MatrixXd::Zero(nu, nx);
  for (int u = 0; u < nu; ++u)
    for (int x = 0; x < nx; ++x)
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) {
          const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
          const double py = y == 1 ? law.py1[a](u, x) : 1.0 - law.py1[a](u, x);
          const double mass = law.p_ux(u, x) * pa * py * law.ps1[a][y](u, x);
          psel += mass;
          pux_s1(u, x) += mass;
        }
  if (psel <= 0.0) fail(Errc::InvalidSpec, "selection probability is zero everywhere");
  out.p_select = psel;
  pux_s1 /= psel;

  // Per-(u,x) selected-sample conditionals.
  // pa_y_s1[a][y](u,x) = P(A=a | u, x, Y=y, S=1)
  MatrixXd pa_y_s1[2][2];
  MatrixXd py1_s1 = MatrixXd::Zero(nu, nx);  // P(Y=1|u,x,S=1)
  for (int a = 0; a < 2; ++a)
    for (int y = 0; y < 2; ++y) pa_y_s1[a][y] = MatrixXd::Zero(nu, nx);
  for (int u = 0; u < nu; ++u)
    for (int x = 0; x < nx; ++x) {
      double mass_ys[2] = {0.0, 0.0};
      double mass_ays[2][2];
      double mass_s = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) {
          const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
          const double py = y == 1 ? law.py1[a](u, x) : 1.0 - law.py1[a](u, x);
          const double mass = pa * py * law.ps1[a][y](u, x);
          mass_ays[a][y] = mass;
          mass_ys[y] += mass;
          mass_s += mass;
        }
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y)
          pa_y_s1[a][y](u, x) = mass_ys[y] > 0.0 ? mass_ays[a][y] / mass_ys[y] : kNaN;
      py1_s1(u, x) = mass_s > 0.0 ? mass_ys[1] / mass_s : kNaN;
    }

  // Estimand with the latent variable visible.
  double th[2] = {0.0, 0.0};
  for (int a = 0; a < 2; ++a)
    for (int u = 0; u < nu; ++u)
      for (int x = 0; x < nx; ++x)
        th[a] += pux_s1(u, x) * c(law.has_x() ? law.x_levels[x] : 0.0) *
                 (pa_y_s1[a][1](u, x) / pa_y_s1[a][0](u, x)) * py1_s1(u, x);
  out.theta1 = th[1];
  out.theta0 = th[0];
  out.beta0_lemma1 = std::log(th[1]) - std::log(th[0]);

  // Exact bridges from the defining conditional-moment equations given the
  // latent variable. Rows index u, unknowns index the proxy level.
  for (int x = 0; x < nx; ++x) {
    for (int a = 0; a < 2; ++a) {
      MatrixXd mz(nu, nz);
      VectorXd rz(nu), nuz = VectorXd::Zero(nz);
      for (int u = 0; u < nu; ++u) {
        // Z | A=a, U=u, X=x, Y=0, S=1 equals Z | A=a, U=u, X=x by construction.
        mz.row(u) = law.pz_at(a, u, x).transpose();
        const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
        const double base_a = pa * (1.0 - law.py1[a](u, x)) * law.ps1[a][0](u, x);
        const double pa_other = a == 1 ? 1.0 - law.p_a1(u, x) : law.p_a1(u, x);
        const double base_o =
            pa_other * (1.0 - law.py1[1 - a](u, x)) * law.ps1[1 - a][0](u, x);
        if (base_a <= 0.0) fail(Errc::IncompleteProxies, "empty treatment stratum in the law");
        rz(u) = (base_a + base_o) / base_a;  // 1 / P(A=a | u, x, Y=0, S=1)
      }
      // Marginal proxy weights among Y=0, S=1 rows at this (a, x).
      for (int u = 0; u < nu; ++u) {
        const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
        const double mass = law.p_ux(u, x) * pa * (1.0 - law.py1[a](u, x)) * law.ps1[a][0](u, x);
        nuz += mass * law.pz_at(a, u, x);
      }
      out.q_exact[x].row(a) = detail::weighted_minnorm_solve(mz, rz, nuz / nuz.sum()).transpose();

      MatrixXd mw(nu, nw);
      VectorXd rw(nu), nuw = VectorXd::Zero(nw);
      for (int u = 0; u < nu; ++u) {
        mw.row(u) = law.pw_at(u, x, 0).transpose();
        // odds of the outcome given (a, u, x) in the selected sample
        const double num = law.py1[a](u, x) * law.ps1[a][1](u, x);
        const double den = (1.0 - law.py1[a](u, x)) * law.ps1[a][0](u, x);
        if (den <= 0.0) fail(Errc::IncompleteProxies, "empty outcome stratum in the law");
        rw(u) = num / den;
      }
      for (int u = 0; u < nu; ++u) {
        const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
        const double mass = law.p_ux(u, x) * pa * (1.0 - law.py1[a](u, x)) * law.ps1[a][0](u, x);
        nuw += mass * law.pw_at(u, x, 0);
      }
      out.h_exact[x].row(a) = detail::weighted_minnorm_solve(mw, rw, nuw / nuw.sum()).transpose();
    }
  }

  // Closed-form identification formulas over the selected-sample law.
  double t_pipw[2] = {0.0, 0.0}, t_por[2] = {0.0, 0.0}, t_pdr[2] = {0.0, 0.0};
  for (int u = 0; u < nu; ++u)
    for (int x = 0; x < nx; ++x)
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) {
          const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
          const double py = y == 1 ? law.py1[a](u, x) : 1.0 - law.py1[a](u, x);
          const double base = law.p_ux(u, x) * pa * py * law.ps1[a][y](u, x) / psel;
          const double cx = c(law.has_x() ? law.x_levels[x] : 0.0);
          for (int z = 0; z < law.nZ(); ++z)
            for (int w = 0; w < law.nW(); ++w) {
              const double cell = base * law.pz_at(a, u, x)(z) * law.pw_at(u, x, y)(w);
              if (cell == 0.0) continue;
              const double q_own = out.q_exact[x](a, z);
              const double h_own = out.h_exact[x](a, w);
              for (int lvl = 0; lvl < 2; ++lvl) {
                const double ind = a == lvl ? 1.0 : 0.0;
                const double h_lvl = out.h_exact[x](lvl, w);
                t_pipw[lvl] += cell * cx * ind * q_own * y;
                t_por[lvl] += cell * cx * (1.0 - y) * h_lvl;
                t_pdr[lvl] += cell * cx *
                              (ind * q_own * (y - (1.0 - y) * h_own) + (1.0 - y) * h_lvl);
              }
            }
        }
  out.beta_pipw = std::log(t_pipw[1]) - std::log(t_pipw[0]);
  out.beta_por = std::log(t_por[1]) - std::log(t_por[0]);
  out.beta_pdr = std::log(t_pdr[1]) - std::log(t_pdr[0]);

  // Does the selection risk ratio against the outcome depend on treatment?
  double max_dev = 0.0;
  for (int u = 0; u < nu; ++u)
    for (int x = 0; x < nx; ++x) {
      const double r1 = law.ps1[1][1](u, x) / law.ps1[1][0](u, x);
      const double r0 = law.ps1[0][1](u, x) / law.ps1[0][0](u, x);
      max_dev = std::max(max_dev, std::abs(r1 - r0) / std::max(1e-300, std::abs(r0)));
    }
  out.selection_ratio_max_dev = max_dev;
  out.selection_ratio_constant = max_dev <= 1e-12;
  return out;
}

// Doubly robust closed form over the selected-sample law with caller-supplied
// bridge tables q(a, z-index, x-index), h(a, w-index, x-index). Used to probe
// the identity with one bridge deliberately wrong.
inline double discrete_beta_pdr_with(
    const DiscreteLawSpec& law, const std::function<double(int, int, int)>& qfun,
    const std::function<double(int, int, int)>& hfun,
    const std::function<double(double)>& c = [](double) { return 1.0; }) {
  law.check();
  const int nu = law.nU(), nx = law.nXe();
  double psel = 0.0;
  double t[2] = {0.0, 0.0};
  for (int u = 0; u < nu; ++u)
    for (int x = 0; x < nx; ++x)
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y) {
          const double pa = a == 1 ? law.p_a1(u, x) : 1.0 - law.p_a1(u, x);
          const double py = y == 1 ? law.py1[a](u, x) : 1.0 - law.py1[a](u, x);
          const double base = law.p_ux(u, x) * pa * py * law.ps1[a][y](u, x);
          psel += base;
          const double cx = c(law.has_x() ? law.x_levels[x] : 0.0);
          for (int z = 0; z < law.nZ(); ++z)
            for (int w = 0; w < law.nW(); ++w) {
              const double cell = base * law.pz_at(a, u, x)(z) * law.pw_at(u, x, y)(w);
              if (cell == 0.0) continue;
              for (int lvl = 0; lvl < 2; ++lvl) {
                const double ind = a == lvl ? 1.0 : 0.0;
                t[lvl] += cell * cx *
                          (ind * qfun(a, z, x) * (y - (1.0 - y) * hfun(a, w, x)) +
                           (1.0 - y) * hfun(lvl, w, x));
              }
            }
        }
  return std::log(t[1] / psel) - std::log(t[0] / psel);
}

}  // namespace proxor
