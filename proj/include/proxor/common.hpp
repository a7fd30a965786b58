#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace proxor {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

// 97.5% standard normal quantile; Wald intervals are formed on the log
// odds ratio scale as beta_hat -/+ kZ975 * std_err.
inline constexpr double kZ975 = 1.959963984540054;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum class Errc {
  NonBinaryTreatment,
  NonBinaryOutcome,
  DimensionMismatch,
  DegenerateStratum,
  NoConvergence,
  SingularJacobian,
  EmptyCell,
  BothBridgesMissing,
  IllConditioned,
  InvalidSpec,
  IncompleteProxies,
  ParseError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::NonBinaryTreatment: return "NonBinaryTreatment";
    case Errc::NonBinaryOutcome: return "NonBinaryOutcome";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::DegenerateStratum: return "DegenerateStratum";
    case Errc::NoConvergence: return "NoConvergence";
    case Errc::SingularJacobian: return "SingularJacobian";
    case Errc::EmptyCell: return "EmptyCell";
    case Errc::BothBridgesMissing: return "BothBridgesMissing";
    case Errc::IllConditioned: return "IllConditioned";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::IncompleteProxies: return "IncompleteProxies";
    case Errc::ParseError: return "ParseError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Deterministic random draws built on the standardized mt19937_64 output
// stream, so a fixed seed reproduces samples bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  bool bernoulli(double p) { return u01() < p; }

  // Box-Muller with a cached spare draw.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = u01();
    while (u1 <= 0.0) u1 = u01();
    const double u2 = u01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer over (master, stream). Every replicate or fold owns a
// counter-derived stream, so results do not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace proxor
