#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "proxor/data.hpp"

namespace proxor {

// Cross-fitting minimax kernel learner for the two bridge functions and the
// doubly robust aggregation of the per-fold estimates.
//
// Out-of-fold data enter regularized saddle-point problems whose closed-form
// solutions are ridge-type linear systems in the Gram matrices of the (Z,X)
// and (W,X) blocks; in-fold data evaluate the doubly robust integrand. Fold
// means are averaged and the log ratio of the two treatment levels is the
// estimate.
struct KernelConfig {
  int folds = 5;
  // Ridge weights; unset values default to 0.5 / sqrt(m_l) per fold.
  std::optional<double> lambda_q, lambda_h, lambda_qstar, lambda_hstar;
  double pinv_tol = 1e-10;
  // Gaussian kernel bandwidths; unset -> median pairwise distance per block.
  std::optional<double> bandwidth_zx, bandwidth_wx;
  std::uint64_t shuffle_seed = 0;
  // Two readings of the treatment-bridge coefficient formula: the symmetric
  // reading pairs the (W,X) inner operator with the (W,X) weight vector; the
  // literal reading keeps the (Z,X) operator in the weight vector. The
  // symmetric reading is what the saddle-point objective yields and is the
  // default.
  enum class GammaReading { Symmetric, PaperLiteral };
  GammaReading gamma_reading = GammaReading::Symmetric;
  std::function<double(const RowVectorXd&)> c = [](const RowVectorXd&) { return 1.0; };

  double lambda_or_default(const std::optional<double>& v, Eigen::Index m) const {
    return v.has_value() ? *v : 0.5 / std::sqrt(static_cast<double>(m));
  }
};

struct FoldEstimate {
  int fold = 0;
  std::vector<int> infold, outfold;
  VectorXd alpha[2], gamma[2];  // outcome / treatment bridge coefficients per a
  double zeta_l[2] = {kNaN, kNaN};
  double bandwidth_zx = kNaN, bandwidth_wx = kNaN;
  int rank_h[2] = {0, 0}, rank_q[2] = {0, 0};
};

struct KernelCrossfit {
  double beta_hat = kNaN;
  double std_err = kNaN;
  double zeta[2] = {kNaN, kNaN};
  std::vector<FoldEstimate> folds;
  EstimateResult result;
};

inline double gaussian_kernel(const RowVectorXd& u, const RowVectorXd& v, double sigma) {
  return std::exp(-(u - v).squaredNorm() / (2.0 * sigma * sigma));
}

inline MatrixXd gaussian_gram(const MatrixXd& pts, double sigma) {
  const Eigen::Index m = pts.rows();
  MatrixXd k(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    k(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < m; ++j) {
      k(i, j) = gaussian_kernel(pts.row(i), pts.row(j), sigma);
      k(j, i) = k(i, j);
    }
  }
  return k;
}

inline MatrixXd gaussian_cross(const MatrixXd& rows, const MatrixXd& cols, double sigma) {
  MatrixXd k(rows.rows(), cols.rows());
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index j = 0; j < cols.rows(); ++j)
      k(i, j) = gaussian_kernel(rows.row(i), cols.row(j), sigma);
  return k;
}

namespace detail {

inline RowVectorXd sample_x_row(const SelectedSample& s, int i) {
  return s.x.cols() > 0 ? RowVectorXd(s.x.row(i)) : RowVectorXd();
}

inline MatrixXd stack_zx(const SelectedSample& s, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), s.z.cols() + s.x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) << s.z.row(rows[r]), s.x.row(rows[r]);
  return out;
}

inline MatrixXd stack_wx(const SelectedSample& s, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), s.w.cols() + s.x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) << s.w.row(rows[r]), s.x.row(rows[r]);
  return out;
}

inline double median_pairwise_distance(const MatrixXd& pts) {
  const Eigen::Index m = pts.rows();
  // cap the O(m^2) scan; a deterministic stride keeps the result reproducible
  Eigen::Index stride = 1;
  while ((m / stride) > 2000) stride *= 2;
  std::vector<double> d;
  for (Eigen::Index i = 0; i < m; i += stride)
    for (Eigen::Index j = i + stride; j < m; j += stride)
      d.push_back((pts.row(i) - pts.row(j)).norm());
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  const double med = d[d.size() / 2];
  return med > 0.0 ? med : 1.0;
}

// Pseudo-inverse solve of the symmetric PSD system S x = b with a relative
// eigenvalue threshold; reports the retained rank.
inline VectorXd pinv_solve_sym(const MatrixXd& s, const VectorXd& b, double rel_tol, int* rank) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(s);
  const VectorXd ev = es.eigenvalues();
  const double emax = ev.cwiseAbs().maxCoeff();
  const double thresh = rel_tol * std::max(emax, 1e-300);
  VectorXd inv = VectorXd::Zero(ev.size());
  int kept = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > thresh) {
      inv(i) = 1.0 / ev(i);
      ++kept;
    }
  }
  if (rank != nullptr) *rank = kept;
  if (kept == 0)
    fail(Errc::IllConditioned, "pseudo-inverse discarded every direction of a kernel system");
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * b;
}

// 1/4 K (K/m + lambda I)^{-1}: the closed-form value matrix of the inner
// maximization; symmetric because K commutes with its shifted inverse.
inline MatrixXd inner_value_matrix(const MatrixXd& k, double lambda, double pinv_tol) {
  const Eigen::Index m = k.rows();
  MatrixXd shifted = k / static_cast<double>(m);
  shifted.diagonal().array() += lambda;
  MatrixXd out;
  if (lambda > 0.0) {
    out = 0.25 * shifted.ldlt().solve(k);
  } else {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(shifted);
    const VectorXd ev = es.eigenvalues();
    const double thresh = pinv_tol * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
    VectorXd inv = VectorXd::Zero(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i)
      if (ev(i) > thresh) inv(i) = 1.0 / ev(i);
    out = 0.25 * es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * k;
  }
  return ((out + out.transpose()) / 2.0).eval();
}

}  // namespace detail

// Deterministic near-even fold assignment (sizes within one of each other).
inline std::vector<std::vector<int>> make_folds(Eigen::Index n, int folds, std::uint64_t seed) {
  if (folds < 2) fail(Errc::InvalidSpec, "need at least two folds");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x666f6c64));
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.raw() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i % static_cast<std::size_t>(folds)].push_back(idx[i]);
  return out;
}

// Closed-form minimax bridge coefficients for one fold, fit on out-of-fold
// rows only.
inline FoldEstimate fit_fold_bridges(const SelectedSample& s,
                                     const std::vector<std::vector<int>>& folds, int l,
                                     const KernelConfig& cfg) {
  FoldEstimate fe;
  fe.fold = l;
  fe.infold = folds[static_cast<std::size_t>(l)];
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (static_cast<int>(f) != l)
      fe.outfold.insert(fe.outfold.end(), folds[f].begin(), folds[f].end());
  const Eigen::Index m = static_cast<Eigen::Index>(fe.outfold.size());
  if (m < 2) fail(Errc::InvalidSpec, "out-of-fold size must be at least 2");

  const MatrixXd zx = detail::stack_zx(s, fe.outfold);
  const MatrixXd wx = detail::stack_wx(s, fe.outfold);
  VectorXd av(m), yv(m), cv(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const int i = fe.outfold[static_cast<std::size_t>(r)];
    av(r) = s.a(i);
    yv(r) = s.y(i);
    cv(r) = cfg.c(detail::sample_x_row(s, i));
  }

  fe.bandwidth_zx = cfg.bandwidth_zx.value_or(detail::median_pairwise_distance(zx));
  fe.bandwidth_wx = cfg.bandwidth_wx.value_or(detail::median_pairwise_distance(wx));
  const MatrixXd k_zx = gaussian_gram(zx, fe.bandwidth_zx);
  const MatrixXd k_wx = gaussian_gram(wx, fe.bandwidth_wx);

  const double lam_q = cfg.lambda_or_default(cfg.lambda_q, m);
  const double lam_h = cfg.lambda_or_default(cfg.lambda_h, m);
  const double lam_qs = cfg.lambda_or_default(cfg.lambda_qstar, m);
  const double lam_hs = cfg.lambda_or_default(cfg.lambda_hstar, m);

  // Value matrices of the inner maximizations: the q-direction perturbations
  // live on (Z,X) and enter the outcome-bridge problem; the h-direction
  // perturbations live on (W,X) and enter the treatment-bridge problem.
  const MatrixXd gamma_op = detail::inner_value_matrix(k_zx, lam_qs, cfg.pinv_tol);
  const MatrixXd omega_op = detail::inner_value_matrix(k_wx, lam_hs, cfg.pinv_tol);

  const double m2 = static_cast<double>(m) * static_cast<double>(m);
  for (int a = 0; a <= 1; ++a) {
    VectorXd d(m), g2(m), g3(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      const double ind = av(r) == static_cast<double>(a) ? 1.0 : 0.0;
      d(r) = -cv(r) * ind * (1.0 - yv(r));
      g2(r) = cv(r) * ind * yv(r);
      g3(r) = cv(r) * (1.0 - yv(r));
    }
    if (d.cwiseAbs().maxCoeff() == 0.0)
      fail(Errc::IllConditioned, "moment weight diagonal vanishes for a=" + std::to_string(a));

    const MatrixXd kd_h = k_wx * d.asDiagonal();
    MatrixXd sys_h = kd_h * gamma_op * kd_h.transpose() + m2 * lam_h * k_wx;
    sys_h = ((sys_h + sys_h.transpose()) / 2.0).eval();
    const VectorXd rhs_h = k_wx * (d.asDiagonal() * (gamma_op * g2));
    fe.alpha[a] = -detail::pinv_solve_sym(sys_h, rhs_h, cfg.pinv_tol, &fe.rank_h[a]);

    const MatrixXd kd_q = k_zx * d.asDiagonal();
    MatrixXd sys_q = kd_q * omega_op * kd_q.transpose() + m2 * lam_q * k_zx;
    sys_q = ((sys_q + sys_q.transpose()) / 2.0).eval();
    const MatrixXd& vec_op =
        cfg.gamma_reading == KernelConfig::GammaReading::Symmetric ? omega_op : gamma_op;
    const VectorXd rhs_q = k_zx * (d.asDiagonal() * (vec_op * g3));
    fe.gamma[a] = -detail::pinv_solve_sym(sys_q, rhs_q, cfg.pinv_tol, &fe.rank_q[a]);
  }
  return fe;
}

inline FoldEstimate fit_fold_bridges(const SelectedSample& s, int l, const KernelConfig& cfg) {
  return fit_fold_bridges(s, make_folds(s.n(), cfg.folds, cfg.shuffle_seed), l, cfg);
}

// Evaluate fold bridges at arbitrary stacked (proxy, x) points.
inline VectorXd eval_fold_q(const SelectedSample& s, const FoldEstimate& fe, int a,
                            const MatrixXd& zx_points) {
  const MatrixXd out_zx = detail::stack_zx(s, fe.outfold);
  return gaussian_cross(zx_points, out_zx, fe.bandwidth_zx) * fe.gamma[a];
}

inline VectorXd eval_fold_h(const SelectedSample& s, const FoldEstimate& fe, int a,
                            const MatrixXd& wx_points) {
  const MatrixXd out_wx = detail::stack_wx(s, fe.outfold);
  return gaussian_cross(wx_points, out_wx, fe.bandwidth_wx) * fe.alpha[a];
}

// Full cross-fitting estimate: per-fold doubly robust means, averaged across
// folds, with a plug-in influence-function standard error.
inline KernelCrossfit crossfit_beta(const SelectedSample& s, const KernelConfig& cfg) {
  require_valid(s);
  const Eigen::Index n = s.n();
  if (n < 10 * cfg.folds)
    fail(Errc::InvalidSpec, "cross-fitting needs at least 10 rows per fold");
  const auto folds = make_folds(n, cfg.folds, cfg.shuffle_seed);

  KernelCrossfit out;
  out.folds.reserve(folds.size());
  VectorXd phi1 = VectorXd::Zero(n), phi0 = VectorXd::Zero(n);
  double zeta_sum[2] = {0.0, 0.0};
  for (int l = 0; l < cfg.folds; ++l) {
    FoldEstimate fe = fit_fold_bridges(s, folds, l, cfg);
    const MatrixXd in_zx = detail::stack_zx(s, fe.infold);
    const MatrixXd in_wx = detail::stack_wx(s, fe.infold);
    for (int a = 0; a <= 1; ++a) {
      const VectorXd q_in = eval_fold_q(s, fe, a, in_zx);
      const VectorXd h_in = eval_fold_h(s, fe, a, in_wx);
      double acc = 0.0;
      for (std::size_t r = 0; r < fe.infold.size(); ++r) {
        const int i = fe.infold[r];
        const Eigen::Index ri = static_cast<Eigen::Index>(r);
        const double ci = cfg.c(detail::sample_x_row(s, i));
        const double ind = s.a(i) == static_cast<double>(a) ? 1.0 : 0.0;
        const double omy = 1.0 - s.y(i);
        const double phi = ci * (omy * h_in(ri) - ind * q_in(ri) * (omy * h_in(ri) - s.y(i)));
        acc += phi;
        (a == 1 ? phi1 : phi0)(i) = phi;
      }
      fe.zeta_l[a] = acc / static_cast<double>(fe.infold.size());
      zeta_sum[a] += fe.zeta_l[a];
    }
    out.folds.push_back(std::move(fe));
  }
  out.zeta[0] = zeta_sum[0] / cfg.folds;
  out.zeta[1] = zeta_sum[1] / cfg.folds;
  if (!(out.zeta[1] > 0.0) || !(out.zeta[0] > 0.0))
    fail(Errc::EmptyCell, "a cross-fit ratio component is not strictly positive");
  out.beta_hat = std::log(out.zeta[1]) - std::log(out.zeta[0]);

  // Influence-function plug-in variance with fold-specific bridges.
  double ssq = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double psi =
        (phi1(i) - out.zeta[1]) / out.zeta[1] - (phi0(i) - out.zeta[0]) / out.zeta[0];
    ssq += psi * psi;
  }
  out.std_err = std::sqrt(ssq) / static_cast<double>(n);
  out.result = make_result(Method::Kernel, out.beta_hat, out.std_err,
                           std::isfinite(out.beta_hat) && std::isfinite(out.std_err), cfg.folds,
                           0.0);
  return out;
}

}  // namespace proxor
