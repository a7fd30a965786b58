#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "proxor/discrete.hpp"
#include "proxor/estimators.hpp"
#include "proxor/kernel.hpp"

namespace proxor {

enum class Scenario { I, II, III, IV, V, CustomDiscrete, CustomContinuous };

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::I: return "I";
    case Scenario::II: return "II";
    case Scenario::III: return "III";
    case Scenario::IV: return "IV";
    case Scenario::V: return "V";
    case Scenario::CustomDiscrete: return "custom-discrete";
    case Scenario::CustomContinuous: return "custom-continuous";
  }
  return "?";
}

// Structural coefficients of the continuous design with uniform latent U and
// covariate X on (0,1), Gaussian proxies, logistic treatment and outcome, and
// log-linear selection.
struct ContinuousCoefs {
  double mu0A = -1.0, muUA = 1.0, muXA = 1.0;                              // logit P(A=1|U,X)
  double mu0Z = 0.0, muAZ = 0.25, muUZ = 4.0, muXZ = 0.25, sigmaZ = 0.25;  // Z | A,U,X
  double mu0W = 0.0, muYW = 0.25, muUW = 4.0, muXW = 0.25, sigmaW = 0.25;  // W | Y,U,X
  double mu0Y = -3.89, muUY = -2.0, muXY = -1.0;                           // logit P(Y=1|A,U,X)
  double mu0S = -5.0, muAS = 0.4, muYS = 4.0, muUS = 0.3, muXS = 0.2;      // log P(S=1|A,U,X,Y)
};

// The univariate binary design: Bernoulli latent factor, linear-probability
// proxies, logistic outcome, log-linear selection.
inline DiscreteLawSpec binary_design_law(double beta0) {
  DiscreteLawSpec law;
  law.u_levels = {0.0, 1.0};
  law.z_levels = {0.0, 1.0};
  law.w_levels = {0.0, 1.0};
  law.p_ux = MatrixXd::Constant(2, 1, 0.5);
  law.p_a1 = MatrixXd::Zero(2, 1);
  for (int a = 0; a < 2; ++a) {
    law.py1[a] = MatrixXd::Zero(2, 1);
    for (int y = 0; y < 2; ++y) law.ps1[a][y] = MatrixXd::Zero(2, 1);
  }
  law.pz.assign(4, VectorXd::Zero(2));
  law.pw.assign(4, VectorXd::Zero(2));
  for (int u = 0; u < 2; ++u) {
    law.p_a1(u, 0) = expit(0.2 + 0.4 * u);
    for (int a = 0; a < 2; ++a) {
      const double pz1 = 0.2 + 0.1 * a + 0.4 * u + 0.2 * a * u;
      law.pz[(a * 2 + u) * 1 + 0] << 1.0 - pz1, pz1;
      law.py1[a](u, 0) = expit(-0.405 + beta0 * a - 0.7 * u);
      for (int y = 0; y < 2; ++y)
        law.ps1[a][y](u, 0) = std::exp(-2.0 + 0.2 * a + 0.4 * y + 0.7 * u);
    }
    const double pw1 = 0.2 + 0.4 * u;
    for (int y = 0; y < 2; ++y) law.pw[(u * 1 + 0) * 2 + y] << 1.0 - pw1, pw1;
  }
  law.check();
  return law;
}

// Full data-generating specification. The misspecification flags only change
// the analyst-side working models handed to the estimators; scenarios III-V
// share scenario II's generator verbatim.
struct DgpSpec {
  Scenario scenario = Scenario::I;
  double beta0 = std::log(0.2);
  long n_target = 5000;
  ContinuousCoefs cont;
  DiscreteLawSpec disc;
  bool drop_x_from_q = false;
  bool drop_x_from_h = false;

  bool continuous() const {
    return scenario == Scenario::II || scenario == Scenario::III || scenario == Scenario::IV ||
           scenario == Scenario::V || scenario == Scenario::CustomContinuous;
  }

  static DgpSpec scenario_I(long n, double beta0 = std::log(0.2)) {
    DgpSpec s;
    s.scenario = Scenario::I;
    s.beta0 = beta0;
    s.n_target = n;
    s.disc = binary_design_law(beta0);
    return s;
  }
  static DgpSpec scenario_II(long n, double beta0 = std::log(0.2)) {
    DgpSpec s;
    s.scenario = Scenario::II;
    s.beta0 = beta0;
    s.n_target = n;
    return s;
  }
  static DgpSpec scenario_III(long n, double beta0 = std::log(0.2)) {
    DgpSpec s = scenario_II(n, beta0);
    s.scenario = Scenario::III;
    s.drop_x_from_q = true;
    return s;
  }
  static DgpSpec scenario_IV(long n, double beta0 = std::log(0.2)) {
    DgpSpec s = scenario_II(n, beta0);
    s.scenario = Scenario::IV;
    s.drop_x_from_h = true;
    return s;
  }
  static DgpSpec scenario_V(long n, double beta0 = std::log(0.2)) {
    DgpSpec s = scenario_II(n, beta0);
    s.scenario = Scenario::V;
    s.drop_x_from_q = true;
    s.drop_x_from_h = true;
    return s;
  }
  static DgpSpec custom_continuous(const ContinuousCoefs& c, long n, double beta0) {
    DgpSpec s;
    s.scenario = Scenario::CustomContinuous;
    s.cont = c;
    s.n_target = n;
    s.beta0 = beta0;
    return s;
  }
  static DgpSpec custom_discrete(DiscreteLawSpec law, long n, double beta0) {
    DgpSpec s;
    s.scenario = Scenario::CustomDiscrete;
    s.disc = std::move(law);
    s.n_target = n;
    s.beta0 = beta0;
    return s;
  }
};

inline void validate_spec(const DgpSpec& spec) {
  if (spec.n_target < 1) fail(Errc::InvalidSpec, "target population size must be positive");
  if (spec.continuous()) {
    const ContinuousCoefs& c = spec.cont;
    // U, X, A, Y all lie in [0,1]; the selection probability is largest at the
    // positive-part corner of the log-linear predictor.
    const double worst = c.mu0S + std::max(0.0, c.muAS) + std::max(0.0, c.muYS) +
                         std::max(0.0, c.muUS) + std::max(0.0, c.muXS);
    if (worst > 0.0)
      fail(Errc::InvalidSpec, "selection probability exceeds 1 for attainable covariate values");
    if (c.sigmaZ <= 0.0 || c.sigmaW <= 0.0) fail(Errc::InvalidSpec, "proxy scales must be positive");
  } else {
    spec.disc.check();
  }
}

struct GeneratedData {
  SelectedSample selected;
  // diagnostics: full target population, columns (u, x, a, y, z, w, s)
  MatrixXd population;
};

namespace detail {

inline GeneratedData generate_impl(const DgpSpec& spec, std::uint64_t seed, bool retain) {
  validate_spec(spec);
  Rng rng(seed);
  GeneratedData out;
  const long n_target = spec.n_target;
  std::vector<double> sa, sy, sz, sw, sx;
  if (retain) out.population.resize(n_target, 7);

  if (spec.continuous()) {
    const ContinuousCoefs& c = spec.cont;
    const double b0 = spec.beta0;
    for (long i = 0; i < n_target; ++i) {
      const double u = rng.u01();
      const double x = rng.u01();
      const double a = rng.bernoulli(expit(c.mu0A + c.muUA * u + c.muXA * x)) ? 1.0 : 0.0;
      const double z = rng.normal(c.mu0Z + c.muAZ * a + c.muUZ * u + c.muXZ * x, c.sigmaZ);
      const double y =
          rng.bernoulli(expit(c.mu0Y + b0 * a + c.muUY * u + c.muXY * x)) ? 1.0 : 0.0;
      const double w = rng.normal(c.mu0W + c.muYW * y + c.muUW * u + c.muXW * x, c.sigmaW);
      const double s =
          rng.bernoulli(std::exp(c.mu0S + c.muAS * a + c.muYS * y + c.muUS * u + c.muXS * x))
              ? 1.0
              : 0.0;
      if (retain) out.population.row(i) << u, x, a, y, z, w, s;
      if (s == 1.0) {
        sa.push_back(a);
        sy.push_back(y);
        sz.push_back(z);
        sw.push_back(w);
        sx.push_back(x);
      }
    }
  } else {
    const DiscreteLawSpec& law = spec.disc;
    auto draw_from = [&rng](const VectorXd& probs) {
      const double r = rng.u01();
      double acc = 0.0;
      for (Eigen::Index k = 0; k < probs.size(); ++k) {
        acc += probs(k);
        if (r < acc) return static_cast<int>(k);
      }
      return static_cast<int>(probs.size() - 1);
    };
    const int nx = law.nXe();
    VectorXd ux_flat(law.nU() * nx);
    for (int u = 0; u < law.nU(); ++u)
      for (int x = 0; x < nx; ++x) ux_flat(u * nx + x) = law.p_ux(u, x);
    for (long i = 0; i < n_target; ++i) {
      const int uxi = draw_from(ux_flat);
      const int u = uxi / nx, x = uxi % nx;
      const int a = rng.bernoulli(law.p_a1(u, x)) ? 1 : 0;
      const int y = rng.bernoulli(law.py1[a](u, x)) ? 1 : 0;
      const int z = draw_from(law.pz_at(a, u, x));
      const int w = draw_from(law.pw_at(u, x, y));
      const int s = rng.bernoulli(law.ps1[a][y](u, x)) ? 1 : 0;
      const double zval = law.z_levels[z], wval = law.w_levels[w];
      const double xval = law.has_x() ? law.x_levels[x] : 0.0;
      if (retain)
        out.population.row(i) << law.u_levels[u], xval, static_cast<double>(a),
            static_cast<double>(y), zval, wval, static_cast<double>(s);
      if (s == 1) {
        sa.push_back(a);
        sy.push_back(y);
        sz.push_back(zval);
        sw.push_back(wval);
        sx.push_back(xval);
      }
    }
  }

  const Eigen::Index n = static_cast<Eigen::Index>(sa.size());
  SelectedSample& s = out.selected;
  s.a = Eigen::Map<VectorXd>(sa.data(), n);
  s.y = Eigen::Map<VectorXd>(sy.data(), n);
  s.z = Eigen::Map<VectorXd>(sz.data(), n);
  s.w = Eigen::Map<VectorXd>(sw.data(), n);
  const bool has_x = spec.continuous() || spec.disc.has_x();
  if (has_x)
    s.x = Eigen::Map<VectorXd>(sx.data(), n);
  else
    s.x = MatrixXd(n, 0);
  return out;
}

}  // namespace detail

inline SelectedSample generate(const DgpSpec& spec, std::uint64_t seed) {
  return detail::generate_impl(spec, seed, /*retain=*/false).selected;
}

inline GeneratedData generate_with_population(const DgpSpec& spec, std::uint64_t seed) {
  return detail::generate_impl(spec, seed, /*retain=*/true);
}

// Closed-form population bridge parameters for the continuous design, from
// matching moment-generating-function terms in the defining equations.
// Ordering: (intercept, a, proxy, x). The treatment side is exact in the
// rare-outcome limit; the outcome side is exact.
inline std::pair<VectorXd, VectorXd> true_bridge_params_continuous(const DgpSpec& spec) {
  if (!spec.continuous())
    fail(Errc::InvalidSpec, "population bridge parameters need the continuous design");
  const ContinuousCoefs& c = spec.cont;
  if (c.muUZ == 0.0 || c.muUW == 0.0)
    fail(Errc::InvalidSpec, "latent loading on a proxy is zero; the bridge parameters are undefined");

  const double tau_z = c.muUA / c.muUZ;
  const double tau_x = c.muXA - tau_z * c.muXZ;
  const double tau_a = tau_z * tau_z * c.sigmaZ * c.sigmaZ - tau_z * c.muAZ;
  const double tau_0 = c.mu0A + c.muAS - tau_z * c.mu0Z - 0.5 * tau_z * tau_z * c.sigmaZ * c.sigmaZ;

  const double psi_w = c.muUY / c.muUW;
  const double psi_x = c.muXY - psi_w * c.muXW;
  const double psi_a = spec.beta0;
  const double psi_0 =
      c.mu0Y + c.muYS - psi_w * c.mu0W - 0.5 * psi_w * psi_w * c.sigmaW * c.sigmaW;

  VectorXd tau(4), psi(4);
  tau << tau_0, tau_a, tau_z, tau_x;
  psi << psi_0, psi_a, psi_w, psi_x;
  return {tau, psi};
}

// Analyst-side working models for a scenario, honouring the misspecification
// flags (which never touch the generator).
struct AnalystModels {
  BridgeModel q;
  BridgeModel h;
  MomentWeights weights;
};

inline AnalystModels analyst_models(const DgpSpec& spec) {
  if (spec.continuous()) {
    AnalystModels m{BridgeModel::inverse_logistic(1, 1, !spec.drop_x_from_q),
                    BridgeModel::log_linear(1, 1, !spec.drop_x_from_h), MomentWeights{}};
    m.weights = default_weights(&m.q, &m.h);
    return m;
  }
  AnalystModels m{BridgeModel::saturated_binary(spec.disc.x_levels),
                  BridgeModel::saturated_binary(spec.disc.x_levels), MomentWeights{}};
  m.weights = default_weights(&m.q, &m.h);
  return m;
}

struct MonteCarloRow {
  Method method = Method::PIPW;
  double bias = kNaN;
  double sd = kNaN;          // Monte Carlo standard deviation of beta over replicates
  double coverage = kNaN;    // fraction of Wald intervals covering the design value
  double mean_se = kNaN;     // mean estimated sandwich standard error
  double mean_beta = kNaN;
  bool sd_defined = false;
  int n_converged = 0;
  int reps = 0;
};

struct MonteCarloReport {
  Scenario scenario = Scenario::I;
  double beta0 = kNaN;
  long n_target = 0;
  int reps = 0;
  std::uint64_t seed = 0;
  double mean_selected_n = kNaN;
  std::vector<MonteCarloRow> rows;
};

// Replicate loop: per-replicate seeds derive from the master seed, bridge
// fits are shared across the estimators that need them, and failed replicates
// are recorded as non-converged rather than aborting the run.
inline MonteCarloReport run_monte_carlo(const DgpSpec& spec, const std::vector<Method>& methods,
                                        int reps, std::uint64_t seed,
                                        const KernelConfig* kernel_cfg = nullptr) {
  if (reps < 1) fail(Errc::InvalidSpec, "need at least one replicate");
  validate_spec(spec);

  MonteCarloReport report;
  report.scenario = spec.scenario;
  report.beta0 = spec.beta0;
  report.n_target = spec.n_target;
  report.reps = reps;
  report.seed = seed;

  std::vector<std::vector<double>> betas(methods.size()), ses(methods.size());
  std::vector<int> covered(methods.size(), 0);
  double total_n = 0.0;

  const AnalystModels analyst = analyst_models(spec);
  const bool need_q =
      std::any_of(methods.begin(), methods.end(),
                  [](Method m) { return m == Method::PIPW || m == Method::PDR; });
  const bool need_h =
      std::any_of(methods.begin(), methods.end(),
                  [](Method m) { return m == Method::POR || m == Method::PDR; });

  for (int rep = 0; rep < reps; ++rep) {
    const SelectedSample sample = generate(spec, derive_seed(seed, static_cast<std::uint64_t>(rep)));
    total_n += static_cast<double>(sample.n());
    if (!validate(sample).ok()) continue;

    std::optional<BridgeFit> qf, hf;
    if (need_q) {
      try {
        qf = solve_q(sample, analyst.q, analyst.weights);
      } catch (const Error&) {
      }
    }
    if (need_h) {
      try {
        hf = solve_h(sample, analyst.h, analyst.weights);
      } catch (const Error&) {
      }
    }

    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const Method m = methods[mi];
      try {
        EstimateResult r;
        if (m == Method::Kernel) {
          KernelConfig cfg = kernel_cfg != nullptr ? *kernel_cfg : KernelConfig{};
          cfg.shuffle_seed = derive_seed(seed, 0x6b65726eULL + static_cast<std::uint64_t>(rep));
          r = crossfit_beta(sample, cfg).result;
        } else if (m == Method::PIPW) {
          if (!qf) continue;
          r = estimate_pipw(sample, *qf, analyst.weights);
        } else if (m == Method::POR) {
          if (!hf) continue;
          r = estimate_por(sample, *hf, analyst.weights);
        } else {
          if (!qf && !hf) continue;
          r = estimate_pdr(sample, qf ? &*qf : nullptr, hf ? &*hf : nullptr, analyst.weights);
        }
        if (!r.converged || !std::isfinite(r.beta_hat) || !std::isfinite(r.std_err)) continue;
        betas[mi].push_back(r.beta_hat);
        ses[mi].push_back(r.std_err);
        if (r.ci_low <= spec.beta0 && spec.beta0 <= r.ci_high) ++covered[mi];
      } catch (const Error&) {
        // replicate recorded as non-converged for this estimator
      }
    }
  }

  report.mean_selected_n = total_n / reps;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    MonteCarloRow row;
    row.method = methods[mi];
    row.reps = reps;
    row.n_converged = static_cast<int>(betas[mi].size());
    if (row.n_converged > 0) {
      double mean = 0.0;
      for (double b : betas[mi]) mean += b;
      mean /= row.n_converged;
      row.mean_beta = mean;
      row.bias = mean - spec.beta0;
      row.coverage = static_cast<double>(covered[mi]) / row.n_converged;
      double mse = 0.0;
      for (double s : ses[mi]) mse += s;
      row.mean_se = mse / row.n_converged;
      if (row.n_converged >= 2) {
        double ss = 0.0;
        for (double b : betas[mi]) ss += (b - mean) * (b - mean);
        row.sd = std::sqrt(ss / (row.n_converged - 1));
        row.sd_defined = true;
      }
    }
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace proxor
