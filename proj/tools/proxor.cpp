// Command-line front end: dataset estimation, scenario simulation, kernel
// estimation, and report emission. Every output document embeds the fully
// resolved configuration and the tool version; there are no timestamps, so
// rerunning a command reproduces its outputs byte for byte.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "proxor/estimators.hpp"
#include "proxor/io.hpp"
#include "proxor/kernel.hpp"
#include "proxor/simulate.hpp"
#include "proxor/version.hpp"

using json = nlohmann::ordered_json;
using namespace proxor;

namespace {

// Unseeded runs are reproducible: the default seed is a fixed constant, never
// the wall clock.
constexpr std::uint64_t kDefaultSeed = 20240801;

int log_level() {
  const char* env = std::getenv("PROXOR_LOG");
  if (env == nullptr) return 1;
  const std::string v(env);
  if (v == "quiet") return 0;
  if (v == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[proxor] " << msg << "\n";
}

json tool_block() { return json{{"name", "proxor"}, {"version", kVersion}}; }

void emit(const json& doc, const std::string& out_path) {
  const std::string text = doc.dump(2) + "\n";
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
  } else {
    std::ofstream out(out_path);
    if (!out) fail(Errc::ParseError, "cannot open '" + out_path + "' for writing");
    out << text;
  }
}

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    if (cur == "pipw") out.push_back(Method::PIPW);
    else if (cur == "por") out.push_back(Method::POR);
    else if (cur == "pdr") out.push_back(Method::PDR);
    else if (cur == "kernel") out.push_back(Method::Kernel);
    else fail(Errc::InvalidSpec, "unknown estimator '" + cur + "' (use pipw,por,pdr,kernel)");
    cur.clear();
  };
  for (char ch : list) {
    if (ch == ',') flush();
    else cur += ch;
  }
  flush();
  if (out.empty()) fail(Errc::InvalidSpec, "no estimators requested");
  return out;
}

// Config-file values become defaults before parsing, so explicitly passed
// flags win. Keys use the long option names; '-' and '_' are interchangeable.
json preload_config(int argc, char** argv) {
  std::string path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
  }
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) fail(Errc::ParseError, "cannot open config file '" + path + "'");
  json cfg;
  try {
    in >> cfg;
  } catch (const std::exception& e) {
    fail(Errc::ParseError, std::string("config file: ") + e.what());
  }
  return cfg;
}

std::string norm_key(std::string s) {
  for (char& ch : s)
    if (ch == '-') ch = '_';
  return s;
}

template <class T>
void cfg_get(const json& cfg, const char* key, T& var) {
  for (auto& [k, v] : cfg.items())
    if (norm_key(k) == norm_key(key)) var = v.template get<T>();
}

void cfg_get(const json& cfg, const char* key, std::optional<double>& var) {
  for (auto& [k, v] : cfg.items())
    if (norm_key(k) == norm_key(key) && !v.is_null()) var = v.get<double>();
}

struct EstimateOptions {
  std::string in_path, out_path, config_path;
  std::string estimators = "pipw,por,pdr";
  std::string q_model = "auto";
  std::string h_model = "auto";
  bool drop_x_from_q = false, drop_x_from_h = false;
  std::uint64_t seed = kDefaultSeed;
  int folds = 5;
  double pinv_tol = 1e-10;
  std::optional<double> lambda_q, lambda_h, lambda_qstar, lambda_hstar;
  std::string gamma_reading = "symmetric";
};

bool binary_column(const MatrixXd& m) {
  if (m.cols() != 1) return false;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (m(i, 0) != 0.0 && m(i, 0) != 1.0) return false;
  return true;
}

BridgeModel resolve_q_model(const std::string& name, const SelectedSample& s, bool drop_x) {
  if (name == "saturated" || (name == "auto" && binary_column(s.z) && s.x.cols() == 0))
    return BridgeModel::saturated_binary();
  if (name == "inverse-logistic" || name == "auto")
    return BridgeModel::inverse_logistic(static_cast<int>(s.z.cols()),
                                         static_cast<int>(s.x.cols()), !drop_x);
  fail(Errc::InvalidSpec, "unknown q model '" + name + "' (auto|saturated|inverse-logistic)");
}

BridgeModel resolve_h_model(const std::string& name, const SelectedSample& s, bool drop_x) {
  if (name == "saturated" || (name == "auto" && binary_column(s.w) && s.x.cols() == 0))
    return BridgeModel::saturated_binary();
  if (name == "log-linear" || name == "auto")
    return BridgeModel::log_linear(static_cast<int>(s.w.cols()),
                                   static_cast<int>(s.x.cols()), !drop_x);
  fail(Errc::InvalidSpec, "unknown h model '" + name + "' (auto|saturated|log-linear)");
}

const char* family_name(BridgeModel::Family f) {
  switch (f) {
    case BridgeModel::Family::SaturatedBinary: return "saturated";
    case BridgeModel::Family::InverseLogisticTreatment: return "inverse-logistic";
    case BridgeModel::Family::LogLinearOutcome: return "log-linear";
    case BridgeModel::Family::LinearBasis: return "linear-basis";
  }
  return "?";
}

json bridge_json(const BridgeFit& fit) {
  json b;
  b["family"] = family_name(fit.model.family());
  b["params"] = std::vector<double>(fit.params.data(), fit.params.data() + fit.params.size());
  b["residual_norm"] = fit.residual_norm;
  b["jacobian_condition"] = fit.jacobian_condition;
  b["converged"] = fit.converged;
  b["iterations"] = fit.iterations;
  return b;
}

json result_json(const EstimateResult& r) {
  json j;
  j["method"] = method_name(r.method);
  j["beta_hat"] = r.beta_hat;
  j["odds_ratio"] = std::exp(r.beta_hat);
  j["std_err"] = r.std_err;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["moment_residual_norm"] = r.moment_residual_norm;
  return j;
}

KernelConfig kernel_config_from(const EstimateOptions& o) {
  KernelConfig cfg;
  cfg.folds = o.folds;
  cfg.pinv_tol = o.pinv_tol;
  cfg.lambda_q = o.lambda_q;
  cfg.lambda_h = o.lambda_h;
  cfg.lambda_qstar = o.lambda_qstar;
  cfg.lambda_hstar = o.lambda_hstar;
  cfg.shuffle_seed = o.seed;
  cfg.gamma_reading = o.gamma_reading == "literal" ? KernelConfig::GammaReading::PaperLiteral
                                                   : KernelConfig::GammaReading::Symmetric;
  return cfg;
}

json kernel_json(const KernelCrossfit& k) {
  json r;
  r["method"] = "kernel";
  r["beta_hat"] = k.beta_hat;
  r["odds_ratio"] = std::exp(k.beta_hat);
  r["std_err"] = k.std_err;
  r["ci_low"] = k.result.ci_low;
  r["ci_high"] = k.result.ci_high;
  r["converged"] = k.result.converged;
  r["zeta1"] = k.zeta[1];
  r["zeta0"] = k.zeta[0];
  json folds = json::array();
  for (const FoldEstimate& f : k.folds) {
    json fj;
    fj["fold"] = f.fold;
    fj["n_in"] = f.infold.size();
    fj["n_out"] = f.outfold.size();
    fj["zeta1"] = f.zeta_l[1];
    fj["zeta0"] = f.zeta_l[0];
    fj["rank_q"] = {f.rank_q[0], f.rank_q[1]};
    fj["rank_h"] = {f.rank_h[0], f.rank_h[1]};
    fj["bandwidth_zx"] = f.bandwidth_zx;
    fj["bandwidth_wx"] = f.bandwidth_wx;
    folds.push_back(fj);
  }
  r["folds"] = folds;
  return r;
}

json estimate_config_json(const EstimateOptions& o, const std::string& command) {
  json c;
  c["command"] = command;
  c["in"] = o.in_path;
  c["out"] = o.out_path;
  c["estimators"] = o.estimators;
  c["q_model"] = o.q_model;
  c["h_model"] = o.h_model;
  c["drop_x_from_q"] = o.drop_x_from_q;
  c["drop_x_from_h"] = o.drop_x_from_h;
  c["seed"] = o.seed;
  c["folds"] = o.folds;
  c["pinv_tol"] = o.pinv_tol;
  c["lambda_q"] = o.lambda_q.has_value() ? json(*o.lambda_q) : json();
  c["lambda_h"] = o.lambda_h.has_value() ? json(*o.lambda_h) : json();
  c["lambda_qstar"] = o.lambda_qstar.has_value() ? json(*o.lambda_qstar) : json();
  c["lambda_hstar"] = o.lambda_hstar.has_value() ? json(*o.lambda_hstar) : json();
  c["gamma_reading"] = o.gamma_reading;
  return c;
}

int run_estimate(const EstimateOptions& o) {
  if (o.in_path.empty()) fail(Errc::InvalidSpec, "--in is required (flag or config file)");
  const SelectedSample sample = read_sample_csv_file(o.in_path);
  const ValidationReport rep = validate(sample);
  if (!rep.ok()) {
    json doc;
    doc["tool"] = tool_block();
    doc["config"] = estimate_config_json(o, "estimate");
    json v = json::array();
    for (const Violation& viol : rep.violations)
      v.push_back({{"code", errc_name(viol.code)},
                   {"row", viol.row + 1},
                   {"column", viol.column},
                   {"reason", viol.reason}});
    doc["validation_errors"] = v;
    emit(doc, o.out_path);
    return 1;
  }

  const std::vector<Method> methods = parse_methods(o.estimators);
  const bool need_q = std::any_of(methods.begin(), methods.end(), [](Method m) {
    return m == Method::PIPW || m == Method::PDR;
  });
  const bool need_h = std::any_of(methods.begin(), methods.end(), [](Method m) {
    return m == Method::POR || m == Method::PDR;
  });

  std::optional<BridgeModel> qm, hm;
  if (need_q) qm = resolve_q_model(o.q_model, sample, o.drop_x_from_q);
  if (need_h) hm = resolve_h_model(o.h_model, sample, o.drop_x_from_h);
  const MomentWeights weights = default_weights(qm ? &*qm : nullptr, hm ? &*hm : nullptr);

  bool all_ok = true;
  std::optional<BridgeFit> qf, hf;
  std::string q_error, h_error;
  if (need_q) {
    try {
      qf = solve_q(sample, *qm, weights);
    } catch (const Error& e) {
      q_error = e.what();
      all_ok = false;
    }
  }
  if (need_h) {
    try {
      hf = solve_h(sample, *hm, weights);
    } catch (const Error& e) {
      h_error = e.what();
      all_ok = false;
    }
  }

  json results = json::array();
  for (Method m : methods) {
    json rj;
    try {
      if (m == Method::Kernel) {
        rj = kernel_json(crossfit_beta(sample, kernel_config_from(o)));
      } else if (m == Method::PIPW) {
        if (!qf) fail(Errc::NoConvergence, "treatment bridge failed: " + q_error);
        rj = result_json(estimate_pipw(sample, *qf, weights));
        rj["q_bridge"] = bridge_json(*qf);
      } else if (m == Method::POR) {
        if (!hf) fail(Errc::NoConvergence, "outcome bridge failed: " + h_error);
        rj = result_json(estimate_por(sample, *hf, weights));
        rj["h_bridge"] = bridge_json(*hf);
      } else {
        if (!qf && !hf) fail(Errc::BothBridgesMissing, "both bridges failed");
        rj = result_json(estimate_pdr(sample, qf ? &*qf : nullptr, hf ? &*hf : nullptr, weights));
        if (qf) rj["q_bridge"] = bridge_json(*qf);
        if (hf) rj["h_bridge"] = bridge_json(*hf);
      }
      if (!rj.value("converged", false)) all_ok = false;
    } catch (const Error& e) {
      rj["method"] = method_name(m);
      rj["converged"] = false;
      rj["error"] = e.what();
      all_ok = false;
    }
    results.push_back(rj);
  }

  json doc;
  doc["tool"] = tool_block();
  doc["config"] = estimate_config_json(o, "estimate");
  doc["n"] = sample.n();
  doc["results"] = results;
  emit(doc, o.out_path);
  return all_ok ? 0 : 1;
}

struct SimulateOptions {
  std::string scenario = "I";
  long n_target = 5000;
  int reps = 500;
  std::uint64_t seed = kDefaultSeed;
  double beta0 = std::log(0.2);
  std::string estimators = "por,pipw,pdr";
  std::string out_path, config_path;
  int folds = 5;
  std::optional<double> lambda_q, lambda_h, lambda_qstar, lambda_hstar;
};

DgpSpec spec_for(const SimulateOptions& o) {
  if (o.scenario == "I") return DgpSpec::scenario_I(o.n_target, o.beta0);
  if (o.scenario == "II") return DgpSpec::scenario_II(o.n_target, o.beta0);
  if (o.scenario == "III") return DgpSpec::scenario_III(o.n_target, o.beta0);
  if (o.scenario == "IV") return DgpSpec::scenario_IV(o.n_target, o.beta0);
  if (o.scenario == "V") return DgpSpec::scenario_V(o.n_target, o.beta0);
  fail(Errc::InvalidSpec, "unknown scenario '" + o.scenario + "' (I..V)");
}

int run_simulate(const SimulateOptions& o) {
  const DgpSpec spec = spec_for(o);
  const std::vector<Method> methods = parse_methods(o.estimators);
  KernelConfig kcfg;
  kcfg.folds = o.folds;
  kcfg.lambda_q = o.lambda_q;
  kcfg.lambda_h = o.lambda_h;
  kcfg.lambda_qstar = o.lambda_qstar;
  kcfg.lambda_hstar = o.lambda_hstar;
  log_info("simulating scenario " + o.scenario + " with " + std::to_string(o.reps) + " replicates");
  const MonteCarloReport report = run_monte_carlo(spec, methods, o.reps, o.seed, &kcfg);

  // Aligned plain-text table in the Bias / SD / Coverage layout.
  std::printf("Scenario %s   target N=%ld   replicates=%d   beta0=%s   mean selected n=%.0f\n",
              scenario_name(report.scenario), report.n_target, report.reps,
              format_double(report.beta0).c_str(), report.mean_selected_n);
  std::printf("%-10s %10s %10s %10s %10s %12s\n", "estimator", "bias", "sd", "coverage",
              "mean_se", "converged");
  for (const MonteCarloRow& row : report.rows) {
    std::printf("%-10s %+10.3f %10s %9.1f%% %10.3f %8d/%d\n", method_name(row.method), row.bias,
                row.sd_defined ? (json(row.sd).dump().substr(0, 6)).c_str() : "-", 100.0 * row.coverage,
                row.mean_se, row.n_converged, row.reps);
  }

  json doc;
  doc["tool"] = tool_block();
  json cfg;
  cfg["command"] = "simulate";
  cfg["scenario"] = o.scenario;
  cfg["n"] = o.n_target;
  cfg["reps"] = o.reps;
  cfg["seed"] = o.seed;
  cfg["beta0"] = o.beta0;
  cfg["estimators"] = o.estimators;
  cfg["folds"] = o.folds;
  cfg["out"] = o.out_path;
  doc["config"] = cfg;
  json rep;
  rep["scenario"] = scenario_name(report.scenario);
  rep["n_target"] = report.n_target;
  rep["reps"] = report.reps;
  rep["beta0"] = report.beta0;
  rep["seed"] = report.seed;
  rep["mean_selected_n"] = report.mean_selected_n;
  json rows = json::array();
  bool all_ok = true;
  for (const MonteCarloRow& row : report.rows) {
    json rj;
    rj["method"] = method_name(row.method);
    rj["bias"] = row.bias;
    rj["sd"] = row.sd_defined ? json(row.sd) : json();
    rj["coverage"] = row.coverage;
    rj["mean_se"] = row.mean_se;
    rj["mean_beta"] = row.mean_beta;
    rj["n_converged"] = row.n_converged;
    rj["reps"] = row.reps;
    rows.push_back(rj);
    if (row.n_converged == 0) all_ok = false;
  }
  rep["estimators"] = rows;
  doc["report"] = rep;
  if (!o.out_path.empty()) emit(doc, o.out_path);
  return all_ok ? 0 : 1;
}

int run_kernel(const EstimateOptions& o) {
  if (o.in_path.empty()) fail(Errc::InvalidSpec, "--in is required (flag or config file)");
  const SelectedSample sample = read_sample_csv_file(o.in_path);
  require_valid(sample);
  const KernelCrossfit fit = crossfit_beta(sample, kernel_config_from(o));
  json doc;
  doc["tool"] = tool_block();
  doc["config"] = estimate_config_json(o, "kernel");
  doc["n"] = sample.n();
  doc["result"] = kernel_json(fit);
  emit(doc, o.out_path);
  return fit.result.converged ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proximal odds-ratio estimation under outcome-dependent sampling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  EstimateOptions eo;
  CLI::App* est = app.add_subcommand("estimate", "Estimate the log odds ratio from a CSV dataset");
  est->add_option("--in", eo.in_path, "input CSV (columns a,y,z*,w*,x*)");
  est->add_option("--out", eo.out_path, "output JSON path (default stdout)");
  est->add_option("--estimators", eo.estimators, "comma list of pipw,por,pdr,kernel");
  est->add_option("--q-model", eo.q_model, "auto|saturated|inverse-logistic");
  est->add_option("--h-model", eo.h_model, "auto|saturated|log-linear");
  est->add_flag("--drop-x-from-q", eo.drop_x_from_q, "omit x from the treatment bridge");
  est->add_flag("--drop-x-from-h", eo.drop_x_from_h, "omit x from the outcome bridge");
  est->add_option("--seed", eo.seed, "seed (kernel fold shuffle)");
  est->add_option("--folds", eo.folds, "kernel cross-fitting folds");
  est->add_option("--pinv-tol", eo.pinv_tol, "kernel pseudo-inverse threshold");
  est->add_option("--lambda-q", eo.lambda_q, "kernel ridge weight for the treatment bridge");
  est->add_option("--lambda-h", eo.lambda_h, "kernel ridge weight for the outcome bridge");
  est->add_option("--lambda-qstar", eo.lambda_qstar, "kernel ridge weight, q-direction perturbations");
  est->add_option("--lambda-hstar", eo.lambda_hstar, "kernel ridge weight, h-direction perturbations");
  est->add_option("--gamma-reading", eo.gamma_reading, "symmetric|literal");
  est->add_option("--config", eo.config_path, "JSON config file (flags override)");

  SimulateOptions so;
  CLI::App* sim = app.add_subcommand("simulate", "Monte Carlo study over a built-in scenario");
  sim->add_option("--scenario", so.scenario, "I, II, III, IV or V");
  sim->add_option("--n", so.n_target, "target population size per replicate");
  sim->add_option("--reps", so.reps, "number of replicates");
  sim->add_option("--seed", so.seed, "master seed");
  sim->add_option("--beta0", so.beta0, "design log odds ratio");
  sim->add_option("--estimators", so.estimators, "comma list of pipw,por,pdr,kernel");
  sim->add_option("--folds", so.folds, "kernel folds (kernel estimator only)");
  sim->add_option("--lambda-q", so.lambda_q, "kernel ridge weight");
  sim->add_option("--lambda-h", so.lambda_h, "kernel ridge weight");
  sim->add_option("--lambda-qstar", so.lambda_qstar, "kernel ridge weight");
  sim->add_option("--lambda-hstar", so.lambda_hstar, "kernel ridge weight");
  sim->add_option("--out", so.out_path, "output JSON path");
  sim->add_option("--config", so.config_path, "JSON config file (flags override)");

  EstimateOptions ko;
  CLI::App* ker = app.add_subcommand("kernel", "Cross-fitting kernel estimate from a CSV dataset");
  ker->add_option("--in", ko.in_path, "input CSV (columns a,y,z*,w*,x*)");
  ker->add_option("--out", ko.out_path, "output JSON path (default stdout)");
  ker->add_option("--seed", ko.seed, "fold shuffle seed");
  ker->add_option("--folds", ko.folds, "number of folds");
  ker->add_option("--pinv-tol", ko.pinv_tol, "pseudo-inverse threshold");
  ker->add_option("--lambda-q", ko.lambda_q, "ridge weight for the treatment bridge");
  ker->add_option("--lambda-h", ko.lambda_h, "ridge weight for the outcome bridge");
  ker->add_option("--lambda-qstar", ko.lambda_qstar, "ridge weight, q-direction perturbations");
  ker->add_option("--lambda-hstar", ko.lambda_hstar, "ridge weight, h-direction perturbations");
  ker->add_option("--gamma-reading", ko.gamma_reading, "symmetric|literal");
  ker->add_option("--config", ko.config_path, "JSON config file (flags override)");

  try {
    const json cfg = preload_config(argc, argv);
    if (!cfg.empty()) {
      cfg_get(cfg, "in", eo.in_path);
      cfg_get(cfg, "out", eo.out_path);
      cfg_get(cfg, "estimators", eo.estimators);
      cfg_get(cfg, "q-model", eo.q_model);
      cfg_get(cfg, "h-model", eo.h_model);
      cfg_get(cfg, "drop-x-from-q", eo.drop_x_from_q);
      cfg_get(cfg, "drop-x-from-h", eo.drop_x_from_h);
      cfg_get(cfg, "seed", eo.seed);
      cfg_get(cfg, "folds", eo.folds);
      cfg_get(cfg, "pinv-tol", eo.pinv_tol);
      cfg_get(cfg, "lambda-q", eo.lambda_q);
      cfg_get(cfg, "lambda-h", eo.lambda_h);
      cfg_get(cfg, "lambda-qstar", eo.lambda_qstar);
      cfg_get(cfg, "lambda-hstar", eo.lambda_hstar);
      cfg_get(cfg, "gamma-reading", eo.gamma_reading);
      ko = eo;  // the kernel subcommand shares the estimate option keys
      cfg_get(cfg, "scenario", so.scenario);
      cfg_get(cfg, "n", so.n_target);
      cfg_get(cfg, "reps", so.reps);
      cfg_get(cfg, "seed", so.seed);
      cfg_get(cfg, "beta0", so.beta0);
      cfg_get(cfg, "estimators", so.estimators);
      cfg_get(cfg, "folds", so.folds);
      cfg_get(cfg, "out", so.out_path);
      cfg_get(cfg, "lambda-q", so.lambda_q);
      cfg_get(cfg, "lambda-h", so.lambda_h);
      cfg_get(cfg, "lambda-qstar", so.lambda_qstar);
      cfg_get(cfg, "lambda-hstar", so.lambda_hstar);
    }
    app.parse(argc, argv);
    if (est->parsed()) return run_estimate(eo);
    if (sim->parsed()) return run_simulate(so);
    if (ker->parsed()) return run_kernel(ko);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
