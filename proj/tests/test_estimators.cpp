#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "proxor/estimators.hpp"
#include "proxor/simulate.hpp"
#include "support.hpp"

using namespace proxor;
using testsupport::PatternCount;
using testsupport::random_binary_sample;
using testsupport::sample_from_patterns;
using testsupport::weighted_population;

namespace {

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

BridgeFit fit_with(BridgeModel model, VectorXd params) {
  BridgeFit f;
  f.model = std::move(model);
  f.params = std::move(params);
  f.converged = true;
  f.residual_norm = 0.0;
  f.iterations = 0;
  return f;
}

MomentWeights saturated_weights() {
  const BridgeModel m = BridgeModel::saturated_binary();
  return default_weights(&m, &m);
}

}  // namespace

TEST_CASE("crude two-by-two table gives a null pipw estimate") {
  std::vector<PatternCount> pats = {
      {1, 1, 0, 0, 5}, {1, 1, 1, 1, 5}, {0, 1, 0, 1, 5}, {0, 1, 1, 0, 5},
      {1, 0, 0, 0, 20}, {1, 0, 1, 1, 20}, {0, 0, 0, 1, 20}, {0, 0, 1, 0, 20}};
  const SelectedSample s = sample_from_patterns(pats);
  REQUIRE(s.n() == 100);
  VectorXd tau(4);
  tau << 2, 0, 0, 0;  // 1 / P(A=a | Y=0) with balanced arms
  const BridgeFit qf = fit_with(BridgeModel::saturated_binary(), tau);
  const EstimateResult r = estimate_pipw(s, qf, saturated_weights());
  REQUIRE(r.beta_hat == 0.0);
  REQUIRE(std::exp(r.beta_hat) == 1.0);
}

TEST_CASE("outcome bridge constant in treatment gives a null por estimate") {
  Rng rng(7);
  const SelectedSample s = random_binary_sample(rng, 80);
  // (intercept, treatment, proxy) with a zero treatment coefficient
  const BridgeFit hf = fit_with(BridgeModel::log_linear(1, 0, false),
                                (VectorXd(3) << 0.4, 0.0, 0.7).finished());
  const EstimateResult r = estimate_por(s, hf, default_weights(nullptr, &hf.model));
  REQUIRE(r.beta_hat == 0.0);
}

TEST_CASE("doubly robust form degenerates to pipw and por bit for bit") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const SelectedSample s = random_binary_sample(rng, 60);
    VectorXd tau(3), psi(3);
    tau << rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5);
    psi << rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5);
    const BridgeFit qf = fit_with(BridgeModel::inverse_logistic(1, 0, false), tau);
    const BridgeFit hf = fit_with(BridgeModel::log_linear(1, 0, false), psi);
    const MomentWeights w = default_weights(&qf.model, &hf.model);

    EstimateResult pipw, pdr_no_h;
    bool pipw_ok = true, pdr_ok = true;
    try {
      pipw = estimate_pipw(s, qf, w);
    } catch (const Error&) {
      pipw_ok = false;
    }
    try {
      pdr_no_h = estimate_pdr(s, &qf, nullptr, w);
    } catch (const Error&) {
      pdr_ok = false;
    }
    REQUIRE(pipw_ok == pdr_ok);
    if (pipw_ok) REQUIRE(same_bits(pipw.beta_hat, pdr_no_h.beta_hat));

    const EstimateResult por = estimate_por(s, hf, w);
    const EstimateResult pdr_no_q = estimate_pdr(s, nullptr, &hf, w);
    REQUIRE(same_bits(por.beta_hat, pdr_no_q.beta_hat));
  }
}

TEST_CASE("pdr with no bridges at all is rejected") {
  Rng rng(17);
  const SelectedSample s = random_binary_sample(rng, 40);
  REQUIRE_THROWS_MATCHES(estimate_pdr(s, nullptr, nullptr, saturated_weights()), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::BothBridgesMissing;
                         }));
}

TEST_CASE("an empty ratio cell is reported") {
  // treated rows are all outcome-free, so the pipw numerator is zero
  std::vector<PatternCount> pats = {
      {1, 0, 0, 0, 10}, {1, 0, 1, 1, 10}, {0, 0, 0, 1, 10}, {0, 1, 1, 0, 10}};
  const SelectedSample s = sample_from_patterns(pats);
  REQUIRE(validate(s).ok());
  VectorXd tau(4);
  tau << 2, 0, 0, 0;
  const BridgeFit qf = fit_with(BridgeModel::saturated_binary(), tau);
  REQUIRE_THROWS_MATCHES(estimate_pipw(s, qf, saturated_weights()), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::EmptyCell;
                         }));
}

TEST_CASE("rescaling c leaves every estimate unchanged") {
  Rng rng(23);
  const SelectedSample s = random_binary_sample(rng, 120);
  const BridgeModel model = BridgeModel::saturated_binary();
  MomentWeights w1 = default_weights(&model, &model);
  const BridgeFit qf = solve_q(s, model, w1);
  const BridgeFit hf = solve_h(s, model, w1);
  MomentWeights w5 = w1;
  w5.c = [](const RowVectorXd&) { return 5.0; };
  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const auto r1 = detail::assemble_stacked(s, m, &qf, &hf, w1).result;
    const auto r5 = detail::assemble_stacked(s, m, &qf, &hf, w5).result;
    REQUIRE_THAT(r5.beta_hat, Catch::Matchers::WithinAbs(r1.beta_hat, 1e-12));
    REQUIRE_THAT(r5.std_err, Catch::Matchers::WithinRel(r1.std_err, 1e-10));
  }
}

TEST_CASE("swapping treatment labels negates the estimate exactly") {
  Rng rng(29);
  const SelectedSample s = random_binary_sample(rng, 100);
  // dyadic parameters keep every bridge evaluation exact under the relabeling
  VectorXd tau(4), psi(4);
  tau << 2.0, 0.5, 0.25, -0.75;
  psi << 0.5, 0.25, 0.125, 0.5;
  const BridgeFit qf = fit_with(BridgeModel::saturated_binary(), tau);
  const BridgeFit hf = fit_with(BridgeModel::saturated_binary(), psi);

  SelectedSample sw = s;
  sw.a = VectorXd::Ones(s.n()) - s.a;
  VectorXd tau_sw(4), psi_sw(4);
  tau_sw << tau(0) + tau(1), -tau(1), tau(2) + tau(3), -tau(3);
  psi_sw << psi(0) + psi(1), -psi(1), psi(2) + psi(3), -psi(3);
  const BridgeFit qf_sw = fit_with(BridgeModel::saturated_binary(), tau_sw);
  const BridgeFit hf_sw = fit_with(BridgeModel::saturated_binary(), psi_sw);

  const MomentWeights w = saturated_weights();
  const EstimateResult base = estimate_pdr(s, &qf, &hf, w);
  const EstimateResult flipped = estimate_pdr(sw, &qf_sw, &hf_sw, w);
  REQUIRE(same_bits(flipped.beta_hat, -base.beta_hat));

  const EstimateResult base_pipw = estimate_pipw(s, qf, w);
  const EstimateResult flipped_pipw = estimate_pipw(sw, qf_sw, w);
  REQUIRE(same_bits(flipped_pipw.beta_hat, -base_pipw.beta_hat));
}

TEST_CASE("joint fit matches the plug-in closed forms and has a sound vcov") {
  const auto spec = DgpSpec::scenario_I(5000);
  const SelectedSample s = generate(spec, 3);
  const auto analyst = analyst_models(spec);
  const BridgeFit qf = solve_q(s, analyst.q, analyst.weights);
  const BridgeFit hf = solve_h(s, analyst.h, analyst.weights);

  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const StackedFit joint = joint_fit(s, m, &analyst.q, &analyst.h, analyst.weights);
    double plug = kNaN;
    if (m == Method::PIPW) plug = estimate_pipw(s, qf, analyst.weights).beta_hat;
    if (m == Method::POR) plug = estimate_por(s, hf, analyst.weights).beta_hat;
    if (m == Method::PDR) plug = estimate_pdr(s, &qf, &hf, analyst.weights).beta_hat;
    REQUIRE_THAT(joint.beta_hat, Catch::Matchers::WithinAbs(plug, 1e-8));
    REQUIRE(joint.result.moment_residual_norm <= 2e-8);

    REQUIRE((joint.vcov - joint.vcov.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(joint.vcov);
    REQUIRE(es.eigenvalues().minCoeff() >= -1e-10);
    REQUIRE(joint.result.std_err > 0.0);
  }
}

TEST_CASE("constant effect modification model reduces to the homogeneous fit") {
  const auto spec = DgpSpec::scenario_II(80000);
  const SelectedSample s = generate(spec, 11);
  const auto analyst = analyst_models(spec);
  const BridgeFit qf = solve_q(s, analyst.q, analyst.weights);
  const BridgeFit hf = solve_h(s, analyst.h, analyst.weights);
  const EffectModSpec constant = EffectModSpec::constant();

  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const EffectModFit em =
        effect_mod_fit(s, m, constant, &qf, &hf, analyst.weights);
    double homo = kNaN;
    if (m == Method::PIPW) homo = estimate_pipw(s, qf, analyst.weights).beta_hat;
    if (m == Method::POR) homo = estimate_por(s, hf, analyst.weights).beta_hat;
    if (m == Method::PDR) homo = estimate_pdr(s, &qf, &hf, analyst.weights).beta_hat;
    REQUIRE(em.converged);
    REQUIRE_THAT(em.alpha(0), Catch::Matchers::WithinAbs(homo, 1e-8));
  }
}

namespace {

// Binary law with a two-level covariate and a covariate-specific log odds
// ratio: beta(0) = log 0.5, beta(1) = log 0.8.
DiscreteLawSpec stratified_beta_law() {
  DiscreteLawSpec law;
  law.u_levels = {0.0, 1.0};
  law.x_levels = {0.0, 1.0};
  law.z_levels = {0.0, 1.0};
  law.w_levels = {0.0, 1.0};
  law.p_ux.resize(2, 2);
  law.p_ux << 0.2, 0.3, 0.3, 0.2;
  law.p_a1.resize(2, 2);
  law.p_a1 << 0.45, 0.55, 0.62, 0.38;
  const double betas[2] = {std::log(0.5), std::log(0.8)};
  for (int a = 0; a < 2; ++a) {
    law.py1[a].resize(2, 2);
    for (int y = 0; y < 2; ++y) law.ps1[a][y].resize(2, 2);
  }
  law.pz.assign(8, VectorXd(2));
  law.pw.assign(8, VectorXd(2));
  for (int u = 0; u < 2; ++u)
    for (int x = 0; x < 2; ++x) {
      const double eta = -0.6 - 0.5 * u + 0.3 * x;
      for (int a = 0; a < 2; ++a) law.py1[a](u, x) = expit(betas[x] * a + eta);
      const double s0 = 0.25 + 0.1 * u + 0.05 * x;
      const double xi = 1.3 - 0.2 * x;
      for (int a = 0; a < 2; ++a) {
        law.ps1[a][0](u, x) = s0 * (a == 1 ? 1.15 : 1.0);
        law.ps1[a][1](u, x) = law.ps1[a][0](u, x) * xi;
        const double pz1 = 0.25 + 0.45 * u + 0.05 * a;
        law.pz[(a * 2 + u) * 2 + x] << 1.0 - pz1, pz1;
      }
      for (int y = 0; y < 2; ++y) {
        const double pw1 = 0.2 + 0.5 * u + 0.06 * y;
        law.pw[(u * 2 + x) * 2 + y] << 1.0 - pw1, pw1;
      }
    }
  law.check();
  return law;
}

}  // namespace

TEST_CASE("linear effect modification recovers the stratum log odds ratios") {
  const DiscreteLawSpec law = stratified_beta_law();
  const SelectedSample pop = weighted_population(law);

  const BridgeModel model = BridgeModel::saturated_binary({0.0, 1.0});
  const MomentWeights w = default_weights(&model, &model);
  const BridgeFit qf = solve_q(pop, model, w);
  const BridgeFit hf = solve_h(pop, model, w);

  const EffectModSpec linear = EffectModSpec::polynomial(1);
  const double b0 = std::log(0.5), b1 = std::log(0.8) - std::log(0.5);
  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const EffectModFit em = effect_mod_fit(pop, m, linear, &qf, &hf, w);
    REQUIRE(em.converged);
    REQUIRE_THAT(em.alpha(0), Catch::Matchers::WithinAbs(b0, 1e-8));
    REQUIRE_THAT(em.alpha(1), Catch::Matchers::WithinAbs(b1, 1e-8));
    RowVectorXd x1(1);
    x1 << 1.0;
    REQUIRE_THAT(em.beta_at(x1), Catch::Matchers::WithinAbs(std::log(0.8), 1e-8));
  }
}

TEST_CASE("two-level polytomous fit coincides with the binary pipeline") {
  Rng rng(31);
  const SelectedSample s = random_binary_sample(rng, 150);
  const BridgeModel model = BridgeModel::saturated_binary();
  const MomentWeights w = default_weights(&model, &model);
  const BridgeFit qf = solve_q(s, model, w);
  const BridgeFit hf = solve_h(s, model, w);

  PolytomousSample ps;
  ps.a = s.a.cast<int>();
  ps.y = s.y.cast<int>();
  ps.z = s.z;
  ps.w = s.w;
  ps.x = s.x;

  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const PolytomousResult poly = polytomous_fit(ps, m);
    double binary = kNaN, binary_se = kNaN;
    EstimateResult r;
    if (m == Method::PIPW) r = estimate_pipw(s, qf, w);
    if (m == Method::POR) r = estimate_por(s, hf, w);
    if (m == Method::PDR) r = estimate_pdr(s, &qf, &hf, w);
    binary = r.beta_hat;
    binary_se = r.std_err;
    REQUIRE_THAT(poly.cells[0][0].beta_hat, Catch::Matchers::WithinAbs(binary, 1e-12));
    REQUIRE_THAT(poly.cells[0][0].std_err, Catch::Matchers::WithinRel(binary_se, 1e-8));
  }
}

namespace {

// Three treatment levels, three latent levels, categorical proxies with three
// levels; designed per-level log odds ratios log(0.5) and log(2.0).
struct PolyLaw {
  PolytomousSample population;
  double beta1, beta2;
};

PolyLaw polytomous_population_law() {
  const int nu = 3, na = 3, nz = 3, nw = 3;
  const double pu[3] = {0.3, 0.4, 0.3};
  const double beta[3] = {0.0, std::log(0.5), std::log(2.0)};
  const double eta[3] = {-1.2, -0.6, -0.2};
  // P(a | u): rows u, cols a
  const double pa[3][3] = {{0.5, 0.3, 0.2}, {0.3, 0.4, 0.3}, {0.2, 0.3, 0.5}};
  // P(z | a, u): informative about u, mildly shifted by a
  auto pz = [](int a, int u, int z) {
    static const double base[3][3] = {
        {0.70, 0.20, 0.10}, {0.20, 0.60, 0.20}, {0.10, 0.25, 0.65}};
    double v = base[u][z] + 0.02 * a * (z == 2 ? 1.0 : (z == 0 ? -1.0 : 0.0));
    return v;
  };
  auto pw = [](int u, int y, int w) {
    static const double base[3][3] = {
        {0.65, 0.25, 0.10}, {0.15, 0.65, 0.20}, {0.10, 0.20, 0.70}};
    double v = base[u][w] + 0.03 * y * (w == 1 ? 1.0 : (w == 0 ? -1.0 : 0.0));
    return v;
  };
  auto ps1 = [](int a, int u, int y) {
    const double s0 = 0.25 + 0.05 * a + 0.08 * u;
    const double xi = 1.4 - 0.15 * u;
    return y == 1 ? s0 * xi : s0;
  };

  std::vector<double> zv, wv, wt;
  std::vector<int> av, yv;
  double psel = 0.0;
  for (int u = 0; u < nu; ++u)
    for (int a = 0; a < na; ++a)
      for (int y = 0; y < 2; ++y) {
        const double py = expit(beta[a] + eta[u]);
        const double pay = pu[u] * pa[u][a] * (y == 1 ? py : 1.0 - py) * ps1(a, u, y);
        for (int z = 0; z < nz; ++z)
          for (int w = 0; w < nw; ++w) {
            const double cell = pay * pz(a, u, z) * pw(u, y, w);
            psel += cell;
            av.push_back(a);
            yv.push_back(y);
            zv.push_back(z);
            wv.push_back(w);
            wt.push_back(cell);
          }
      }
  PolyLaw out;
  const Eigen::Index n = static_cast<Eigen::Index>(av.size());
  out.population.a = Eigen::Map<VectorXi>(av.data(), n);
  out.population.y = Eigen::Map<VectorXi>(yv.data(), n);
  out.population.z = Eigen::Map<VectorXd>(zv.data(), n);
  out.population.w = Eigen::Map<VectorXd>(wv.data(), n);
  out.population.x = MatrixXd(n, 0);
  out.population.row_weight = Eigen::Map<VectorXd>(wt.data(), n) / psel;
  out.beta1 = beta[1];
  out.beta2 = beta[2];
  return out;
}

}  // namespace

TEST_CASE("polytomous population recovers the designed per-level log odds ratios") {
  const PolyLaw law = polytomous_population_law();
  for (Method m : {Method::PIPW, Method::POR, Method::PDR}) {
    const PolytomousResult r = polytomous_fit(law.population, m);
    REQUIRE(r.J == 2);
    REQUIRE(r.K == 1);
    REQUIRE_THAT(r.cells[0][0].beta_hat, Catch::Matchers::WithinAbs(law.beta1, 1e-8));
    REQUIRE_THAT(r.cells[1][0].beta_hat, Catch::Matchers::WithinAbs(law.beta2, 1e-8));
  }
}

TEST_CASE("polytomous pdr with zero outcome bridges equals polytomous pipw") {
  const PolyLaw law = polytomous_population_law();
  PolytomousOptions zero_h;
  zero_h.fixed_psi = std::vector<VectorXd>{VectorXd::Zero(9)};
  const PolytomousResult pdr = polytomous_fit(law.population, Method::PDR, zero_h);
  const PolytomousResult pipw = polytomous_fit(law.population, Method::PIPW);
  for (int j = 0; j < 2; ++j)
    REQUIRE_THAT(pdr.cells[j][0].beta_hat,
                 Catch::Matchers::WithinAbs(pipw.cells[j][0].beta_hat, 1e-13));
}
