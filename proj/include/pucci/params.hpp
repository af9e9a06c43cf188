#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace pucci {

/// Bad input: a precondition of some operation does not hold.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The numerics could not reach a decision (step collapse, undetermined fate, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Operator { Plus, Minus };

inline const char* to_string(Operator op) { return op == Operator::Plus ? "plus" : "minus"; }

inline Operator operator_from_string(const std::string& s) {
  if (s == "plus" || s == "Plus" || s == "+") return Operator::Plus;
  if (s == "minus" || s == "Minus" || s == "-") return Operator::Minus;
  throw ValidationError("unknown operator '" + s + "' (expected plus or minus)");
}

/// Ellipticity constants, exponent and operator of -M^{+/-}(D^2 u) = u^p.
struct ProblemParams {
  double lambda = 1.0;
  double Lambda = 1.0;
  double p = 2.0;
  Operator op = Operator::Minus;
  int dimension = 2;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      throw ValidationError("lambda must be a positive real");
    if (!(Lambda >= lambda) || !std::isfinite(Lambda))
      throw ValidationError("Lambda must satisfy Lambda >= lambda");
    if (!(p > 1.0) || !std::isfinite(p)) throw ValidationError("exponent p must be > 1");
    if (dimension < 2) throw ValidationError("dimension must be >= 2");
  }

  ProblemParams with_p(double q) const {
    ProblemParams out = *this;
    out.p = q;
    return out;
  }
};

struct DerivedConstants {
  double n_tilde_plus = 0.0;
  double n_tilde_minus = 0.0;
  double alpha = 0.0;  // 2/(p-1): slow-decay rate, X-exponent of the Dulac weight
  double beta = 0.0;   // (3-p)/(p-1): Z-exponent of the Dulac weight
  std::optional<double> serrin_minus;  // N-/(N- - 2), absent when N- = 2
  std::optional<double> p_c;           // (N- + 2)/(N- - 2), absent when N- = 2
};

inline DerivedConstants derive(const ProblemParams& params) {
  params.validate();
  const double ratio = params.lambda / params.Lambda;
  const double n1 = static_cast<double>(params.dimension - 1);
  DerivedConstants d;
  d.n_tilde_plus = ratio * n1 + 1.0;
  d.n_tilde_minus = n1 / ratio + 1.0;
  d.alpha = 2.0 / (params.p - 1.0);
  d.beta = (3.0 - params.p) / (params.p - 1.0);
  const double gap = d.n_tilde_minus - 2.0;
  if (gap > 0.0) {
    d.serrin_minus = d.n_tilde_minus / gap;
    d.p_c = (d.n_tilde_minus + 2.0) / gap;
  }
  return d;
}

/// Throws unless the planar M^- analysis applies (operator minus, N = 2, lambda < Lambda).
inline void require_planar_minus(const ProblemParams& params, const char* what) {
  params.validate();
  if (params.op != Operator::Minus)
    throw ValidationError(std::string(what) + " requires operator minus");
  if (params.dimension != 2) throw ValidationError(std::string(what) + " requires dimension 2");
  if (!(params.lambda < params.Lambda))
    throw ValidationError(std::string(what) + " requires lambda < Lambda (N- - 2 = 0 otherwise)");
}

/// Bounds on the critical exponent p-* and the periodic-orbit threshold p~- in the plane.
struct BoundsReport {
  double lower = 0.0;             // (N-+2)/(N--2)
  double upper_plus_form = 0.0;   // denominator (N--2) + (lambda/Lambda)(N--2)^2
  double upper_minus_form = 0.0;  // denominator (N--2) - (lambda/Lambda)(N--2)^2
  double p0_floor = 0.0;          // max{3, (N-+2)/(N--2)}
};

inline BoundsReport exponent_bounds(const ProblemParams& params) {
  require_planar_minus(params, "exponent_bounds");
  const DerivedConstants d = derive(params);
  const double gap = d.n_tilde_minus - 2.0;
  const double ratio = params.lambda / params.Lambda;
  BoundsReport b;
  b.lower = *d.p_c;
  b.upper_plus_form = b.lower + 4.0 / (gap + ratio * gap * gap);
  // gap - ratio*gap^2 = gap*(lambda/Lambda) > 0 whenever lambda < Lambda.
  b.upper_minus_form = b.lower + 4.0 / (gap - ratio * gap * gap);
  b.p0_floor = std::max(3.0, b.lower);
  return b;
}

}  // namespace pucci
