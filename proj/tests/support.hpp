#pragma once

// Shared helpers for the test suites: random solvable discrete laws, exact
// weighted-population samples enumerated from a law, small dataset builders,
// a quadrature rule, and a literal saddle-point oracle for the kernel fold
// solutions. Oracles built from these stay independent of the estimator
// implementations they check.

#include <functional>
#include <vector>

#include "proxor/estimators.hpp"
#include "proxor/kernel.hpp"
#include "proxor/simulate.hpp"

namespace testsupport {

using namespace proxor;

// Random law satisfying the model structure: homogeneous log odds ratio
// beta0, selection risk ratio free of treatment, proxies carried by the
// factorization. Retries until the bridge-defining systems are well
// conditioned.
inline DiscreteLawSpec random_law(Rng& rng, double beta0, int n_u = 2, int n_z = 2, int n_w = 2,
                                  bool with_x = false) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    DiscreteLawSpec law;
    for (int u = 0; u < n_u; ++u) law.u_levels.push_back(u);
    if (with_x) law.x_levels = {0.0, 1.0};
    for (int z = 0; z < n_z; ++z) law.z_levels.push_back(z);
    for (int w = 0; w < n_w; ++w) law.w_levels.push_back(w);
    const int nx = law.nXe();

    law.p_ux.resize(n_u, nx);
    for (int u = 0; u < n_u; ++u)
      for (int x = 0; x < nx; ++x) law.p_ux(u, x) = 0.2 + rng.u01();
    law.p_ux /= law.p_ux.sum();

    law.p_a1.resize(n_u, nx);
    for (int a = 0; a < 2; ++a) {
      law.py1[a].resize(n_u, nx);
      for (int y = 0; y < 2; ++y) law.ps1[a][y].resize(n_u, nx);
    }
    law.pz.assign(2 * n_u * nx, VectorXd());
    law.pw.assign(n_u * nx * 2, VectorXd());

    for (int u = 0; u < n_u; ++u)
      for (int x = 0; x < nx; ++x) {
        law.p_a1(u, x) = 0.25 + 0.5 * rng.u01();
        const double eta = -1.5 + 1.5 * rng.u01();
        for (int a = 0; a < 2; ++a) law.py1[a](u, x) = expit(beta0 * a + eta);
        const double s0a0 = 0.1 + 0.5 * rng.u01();
        const double s0a1 = 0.1 + 0.5 * rng.u01();
        const double xi = 0.4 + 1.0 * rng.u01();
        law.ps1[0][0](u, x) = s0a0;
        law.ps1[1][0](u, x) = s0a1;
        law.ps1[0][1](u, x) = std::min(0.95, s0a0 * xi);
        law.ps1[1][1](u, x) = std::min(0.95, s0a1 * xi);
        if (law.ps1[0][1](u, x) >= 0.95 || law.ps1[1][1](u, x) >= 0.95) {
          // keep the selection ratio exactly common across treatment arms
          law.ps1[0][1](u, x) = s0a0 * 0.5;
          law.ps1[1][1](u, x) = s0a1 * 0.5;
        }
        for (int a = 0; a < 2; ++a) {
          VectorXd pz(n_z);
          for (int z = 0; z < n_z; ++z) pz(z) = 0.1 + rng.u01();
          law.pz[(a * n_u + u) * nx + x] = pz / pz.sum();
        }
        for (int y = 0; y < 2; ++y) {
          VectorXd pw(n_w);
          for (int w = 0; w < n_w; ++w) pw(w) = 0.1 + rng.u01();
          law.pw[(u * nx + x) * 2 + y] = pw / pw.sum();
        }
      }

    // completeness proxy: the conditional proxy tables must be well separated
    // across latent levels
    bool ok = true;
    for (int x = 0; x < nx && ok; ++x) {
      for (int a = 0; a < 2 && ok; ++a) {
        MatrixXd mz(n_u, n_z);
        for (int u = 0; u < n_u; ++u) mz.row(u) = law.pz_at(a, u, x).transpose();
        Eigen::JacobiSVD<MatrixXd> svd(mz);
        if (svd.singularValues().minCoeff() < 0.08) ok = false;
      }
      MatrixXd mw(n_u, n_w);
      for (int u = 0; u < n_u; ++u) mw.row(u) = law.pw_at(u, x, 0).transpose();
      Eigen::JacobiSVD<MatrixXd> svd(mw);
      if (svd.singularValues().minCoeff() < 0.08) ok = false;
    }
    if (!ok) continue;
    law.check();
    return law;
  }
  fail(Errc::InvalidSpec, "could not draw a well-conditioned random law");
}

// Enumerate the selected-sample law into a weighted sample, one row per
// nonzero cell, weight = P(cell | S=1). Estimating equations evaluated on it
// reproduce population moments exactly.
inline SelectedSample weighted_population(const DiscreteLawSpec& law) {
  std::vector<double> av, yv, zv, wv, xv, wt;
  double psel = 0.0;
  for (int u = 0; u < law.nU(); ++u)
    for (int x = 0; x < law.nXe(); ++x)
      for (int a = 0; a < 2; ++a)
        for (int y = 0; y < 2; ++y)
          for (int z = 0; z < law.nZ(); ++z)
            for (int w = 0; w < law.nW(); ++w) {
              const double p = law.joint(u, x, a, y, z, w, 1);
              psel += p;
              if (p <= 0.0) continue;
              av.push_back(a);
              yv.push_back(y);
              zv.push_back(law.z_levels[z]);
              wv.push_back(law.w_levels[w]);
              if (law.has_x()) xv.push_back(law.x_levels[x]);
              wt.push_back(p);
            }
  const Eigen::Index n = static_cast<Eigen::Index>(av.size());
  SelectedSample s;
  s.a = Eigen::Map<VectorXd>(av.data(), n);
  s.y = Eigen::Map<VectorXd>(yv.data(), n);
  s.z = Eigen::Map<VectorXd>(zv.data(), n);
  s.w = Eigen::Map<VectorXd>(wv.data(), n);
  if (law.has_x())
    s.x = Eigen::Map<VectorXd>(xv.data(), n);
  else
    s.x = MatrixXd(n, 0);
  s.row_weight = Eigen::Map<VectorXd>(wt.data(), n) / psel;
  return s;
}

// Composite Simpson quadrature over (0,1)^2.
template <class F>
double simpson2d(F f, int cells = 200) {
  auto w1 = [cells](int i) {
    if (i == 0 || i == 2 * cells) return 1.0;
    return i % 2 == 1 ? 4.0 : 2.0;
  };
  const double h = 1.0 / (2.0 * cells);
  double total = 0.0;
  for (int i = 0; i <= 2 * cells; ++i)
    for (int j = 0; j <= 2 * cells; ++j)
      total += w1(i) * w1(j) * f(i * h, j * h);
  return total * h * h / 9.0;
}

// Small binary dataset with explicit per-pattern counts. Patterns are
// (a, y, z, w).
struct PatternCount {
  double a, y, z, w;
  int count;
};

inline SelectedSample sample_from_patterns(const std::vector<PatternCount>& pats) {
  std::vector<double> av, yv, zv, wv;
  for (const auto& p : pats)
    for (int k = 0; k < p.count; ++k) {
      av.push_back(p.a);
      yv.push_back(p.y);
      zv.push_back(p.z);
      wv.push_back(p.w);
    }
  const Eigen::Index n = static_cast<Eigen::Index>(av.size());
  SelectedSample s;
  s.a = Eigen::Map<VectorXd>(av.data(), n);
  s.y = Eigen::Map<VectorXd>(yv.data(), n);
  s.z = Eigen::Map<VectorXd>(zv.data(), n);
  s.w = Eigen::Map<VectorXd>(wv.data(), n);
  s.x = MatrixXd(n, 0);
  return s;
}

// Literal saddle-point oracle for one kernel fold and one treatment level:
// assemble the regularized minimax objective exactly as written and find its
// stationary point by one exact Newton step from zero (the objective is
// quadratic in the stacked coefficients), entirely via finite differences of
// the scalar objective. Independent of the closed-form path it checks.
struct SaddleOracle {
  MatrixXd k_zx, k_wx;
  VectorXd g1, g2, g3;
  double lam_q = 0, lam_h = 0, lam_qstar = 0, lam_hstar = 0;
  Eigen::Index m = 0;

  // outcome-bridge problem: variables (alpha; b)
  double objective_h(const VectorXd& theta) const {
    const VectorXd alpha = theta.head(m);
    const VectorXd b = theta.tail(m);
    const VectorXd h = k_wx * alpha;
    const VectorXd qdot = k_zx * b;
    double emp = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      emp += qdot(i) * (h(i) * g1(i) + g2(i)) - qdot(i) * qdot(i);
    emp /= static_cast<double>(m);
    return emp - lam_qstar * b.dot(k_zx * b) + lam_h * alpha.dot(k_wx * alpha);
  }

  // treatment-bridge problem: variables (gamma; c)
  double objective_q(const VectorXd& theta) const {
    const VectorXd gamma = theta.head(m);
    const VectorXd c = theta.tail(m);
    const VectorXd q = k_zx * gamma;
    const VectorXd hdot = k_wx * c;
    double emp = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      emp += hdot(i) * (q(i) * g1(i) + g3(i)) - hdot(i) * hdot(i);
    emp /= static_cast<double>(m);
    return emp - lam_hstar * c.dot(k_wx * c) + lam_q * gamma.dot(k_zx * gamma);
  }

  VectorXd stationary(const std::function<double(const VectorXd&)>& f) const {
    const Eigen::Index dim = 2 * m;
    const double step = 1e-3;
    VectorXd grad(dim);
    VectorXd e = VectorXd::Zero(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
      e(j) = step;
      grad(j) = (f(e) - f(-e)) / (2.0 * step);
      e(j) = 0.0;
    }
    MatrixXd hess(dim, dim);
    VectorXd ej = VectorXd::Zero(dim), ek = VectorXd::Zero(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
      ej(j) = step;
      for (Eigen::Index k = j; k < dim; ++k) {
        ek(k) = step;
        const double v =
            (f(ej + ek) - f(ej - ek) - f(ek - ej) + f(-ej - ek)) / (4.0 * step * step);
        hess(j, k) = v;
        hess(k, j) = v;
        ek(k) = 0.0;
      }
      ej(j) = 0.0;
    }
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(hess);
    cod.setThreshold(1e-10);
    return -cod.solve(grad);
  }
};

inline SaddleOracle make_saddle_oracle(const SelectedSample& s, const FoldEstimate& fe, int a,
                                       const KernelConfig& cfg) {
  SaddleOracle o;
  o.m = static_cast<Eigen::Index>(fe.outfold.size());
  MatrixXd zx(o.m, s.z.cols() + s.x.cols()), wx(o.m, s.w.cols() + s.x.cols());
  o.g1.resize(o.m);
  o.g2.resize(o.m);
  o.g3.resize(o.m);
  for (Eigen::Index r = 0; r < o.m; ++r) {
    const int i = fe.outfold[static_cast<std::size_t>(r)];
    zx.row(r) << s.z.row(i), s.x.row(i);
    wx.row(r) << s.w.row(i), s.x.row(i);
    const double ind = s.a(i) == static_cast<double>(a) ? 1.0 : 0.0;
    o.g1(r) = -ind * (1.0 - s.y(i));
    o.g2(r) = ind * s.y(i);
    o.g3(r) = 1.0 - s.y(i);
  }
  o.k_zx = gaussian_gram(zx, fe.bandwidth_zx);
  o.k_wx = gaussian_gram(wx, fe.bandwidth_wx);
  o.lam_q = *cfg.lambda_q;
  o.lam_h = *cfg.lambda_h;
  o.lam_qstar = *cfg.lambda_qstar;
  o.lam_hstar = *cfg.lambda_hstar;
  return o;
}

// Random valid binary sample for property-style checks.
inline SelectedSample random_binary_sample(Rng& rng, int n) {
  while (true) {
    SelectedSample s;
    s.a.resize(n);
    s.y.resize(n);
    s.z.resize(n, 1);
    s.w.resize(n, 1);
    s.x = MatrixXd(n, 0);
    for (int i = 0; i < n; ++i) {
      s.a(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
      const double u = rng.bernoulli(0.5) ? 1.0 : 0.0;
      s.y(i) = rng.bernoulli(0.25 + 0.3 * u) ? 1.0 : 0.0;
      s.z(i, 0) = rng.bernoulli(0.25 + 0.5 * u) ? 1.0 : 0.0;
      s.w(i, 0) = rng.bernoulli(0.3 + 0.4 * u) ? 1.0 : 0.0;
    }
    if (validate(s).ok()) return s;
  }
}

}  // namespace testsupport
