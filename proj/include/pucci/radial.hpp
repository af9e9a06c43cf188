#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pucci/integrator.hpp"
#include "pucci/params.hpp"

namespace pucci {

namespace radial_detail {

// Coefficient dividing the switching variable on each side of u'' = 0.
inline std::pair<double, double> branch_coefficients(const ProblemParams& pp) {
  return pp.op == Operator::Minus ? std::pair{pp.Lambda, pp.lambda}
                                  : std::pair{pp.lambda, pp.Lambda};
}

inline double first_order_coefficient(const ProblemParams& pp) {
  return pp.op == Operator::Minus ? pp.Lambda : pp.lambda;
}

inline double positive_power(double u, double p) { return u > 0.0 ? std::pow(u, p) : 0.0; }

}  // namespace radial_detail

/// s for M^- (resp. s~ for M^+); u'' has the sign of this quantity.
inline double radial_switch(const ProblemParams& pp, double r, double u, double du) {
  const double k = radial_detail::first_order_coefficient(pp);
  return -(pp.dimension - 1) * k * du / r - radial_detail::positive_power(u, pp.p);
}

inline double radial_rhs(const ProblemParams& pp, double r, double u, double du) {
  if (!(r > 0.0)) throw ValidationError("radial_rhs: r must be positive (use taylor_start at 0)");
  if (!(u > 0.0)) throw ValidationError("radial_rhs: u must be positive");
  const auto [neg, pos] = radial_detail::branch_coefficients(pp);
  const double s = radial_switch(pp, r, u, du);
  return s <= 0.0 ? s / neg : s / pos;
}

struct TaylorStart {
  double u = 0.0;
  double du = 0.0;
  double c = 0.0;  // u ~ gamma + c r^2
};

inline TaylorStart taylor_start(const ProblemParams& pp, double gamma, double r0) {
  pp.validate();
  if (!(gamma > 0.0)) throw ValidationError("taylor_start: gamma must be positive");
  if (!(r0 > 0.0)) throw ValidationError("taylor_start: r0 must be positive");
  const double k = radial_detail::first_order_coefficient(pp);
  TaylorStart ts;
  ts.c = -std::pow(gamma, pp.p) / (2.0 * pp.dimension * k);
  ts.u = gamma + ts.c * r0 * r0;
  ts.du = 2.0 * ts.c * r0;
  return ts;
}

// A fixed fraction of the natural length gamma^((1-p)/2), so shots at different gamma are exact rescalings.
inline double default_start_radius(const ProblemParams& pp, double gamma) {
  return 1e-6 * std::pow(gamma, (1.0 - pp.p) / 2.0);
}

struct RadialSample {
  double r = 0.0;
  double u = 0.0;
  double du = 0.0;
  double d2u = 0.0;
  int branch = 0;  // 0: u'' <= 0, 1: u'' > 0
};

enum class RadialFate { VanishesAt, PositiveOnWindow };

inline const char* to_string(RadialFate f) {
  return f == RadialFate::VanishesAt ? "VanishesAt" : "PositiveOnWindow";
}

struct RadialSolution {
  ProblemParams params;
  double gamma = 0.0;
  double r0 = 0.0;
  std::vector<RadialSample> samples;
  std::vector<RadialSample> outputs;  // dense values at requested radii
  RadialFate fate = RadialFate::PositiveOnWindow;
  double fate_radius = 0.0;  // R_p for VanishesAt, r_max otherwise
  std::vector<double> inflections;
};

/// Shot that ended before u = 0 or r_max; carries what was computed.
class UndeterminedShot : public NumericalError {
 public:
  UndeterminedShot(const std::string& msg, RadialSolution partial)
      : NumericalError(msg), partial_(std::move(partial)) {}
  const RadialSolution& partial() const { return partial_; }

 private:
  RadialSolution partial_;
};

inline ode::IntegrationControls default_radial_controls() {
  ode::IntegrationControls c;
  c.rel_tol = 1e-11;
  c.abs_tol = 1e-13;
  c.event_tol = 1e-13;
  return c;
}

/// Regular solution u(0) = gamma, u'(0) = 0, integrated until u = 0 or r = r_max.
/// `output_radii` (increasing, >= r0) are sampled from the dense interpolant.
inline RadialSolution shoot(const ProblemParams& pp, double gamma, double r_max,
                            const ode::IntegrationControls& controls = default_radial_controls(),
                            std::span<const double> output_radii = {},
                            std::optional<double> r0_override = std::nullopt) {
  pp.validate();
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ValidationError("shoot: gamma must be positive");
  const double r0 = r0_override.value_or(default_start_radius(pp, gamma));
  if (!(r_max > r0)) throw ValidationError("shoot: r_max must exceed the start radius");

  const auto [neg, pos] = radial_detail::branch_coefficients(pp);
  auto s_of = [pp](double r, const ode::State<2>& y) { return radial_switch(pp, r, y[0], y[1]); };
  ode::PiecewiseField<2> field;
  field.branch_selector = [s_of](double r, const ode::State<2>& y) {
    return s_of(r, y) <= 0.0 ? 0 : 1;
  };
  field.branches = {
      [s_of, k = neg](double r, const ode::State<2>& y) {
        return ode::State<2>{y[1], s_of(r, y) / k};
      },
      [s_of, k = pos](double r, const ode::State<2>& y) {
        return ode::State<2>{y[1], s_of(r, y) / k};
      }};
  field.switching = {{"inflection", s_of}};

  std::vector<ode::Event<2>> events{
      {"u=0", [](double, const ode::State<2>& y) { return y[0]; }, ode::Crossing::Falling, true}};
  if (pp.op == Operator::Plus)
    events.push_back({"du=0", [](double, const ode::State<2>& y) { return y[1]; },
                      ode::Crossing::Rising, true});

  const TaylorStart ts = taylor_start(pp, gamma, r0);
  const auto traj = ode::integrate(field, ode::State<2>{ts.u, ts.du}, r0, r_max, events, controls,
                                   output_radii);

  RadialSolution sol;
  sol.params = pp;
  sol.gamma = gamma;
  sol.r0 = r0;
  auto to_sample = [&](double r, const ode::State<2>& y, int branch) {
    const double s = radial_switch(pp, r, y[0], y[1]);
    return RadialSample{r, y[0], y[1], s <= 0.0 ? s / neg : s / pos, branch};
  };
  sol.samples.reserve(traj.samples.size());
  for (const auto& s : traj.samples) sol.samples.push_back(to_sample(s.t, s.y, s.branch));
  for (const auto& s : traj.outputs) sol.outputs.push_back(to_sample(s.t, s.y, s.branch));
  for (const auto& h : traj.hits("inflection")) sol.inflections.push_back(h.t);

  switch (traj.termination) {
    case ode::Termination::HorizonReached:
      sol.fate = RadialFate::PositiveOnWindow;
      sol.fate_radius = r_max;
      return sol;
    case ode::Termination::EventStop:
      if (traj.detail == "u=0") {
        sol.fate = RadialFate::VanishesAt;
        sol.fate_radius = traj.termination_time;
        return sol;
      }
      throw UndeterminedShot("shoot: u' became positive for the plus operator at r = " +
                                 std::to_string(traj.termination_time),
                             std::move(sol));
    default:
      throw UndeterminedShot(std::string("shoot: integration ended early (") +
                                 ode::to_string(traj.termination) + ": " + traj.detail + ")",
                             std::move(sol));
  }
}

struct ScalingReport {
  double kappa = 1.0;
  double max_rel_deviation = 0.0;
  std::optional<double> rp_rel_error;  // |R_p(g2) - R_p(g1)/kappa| / R_p(g2)
  std::size_t points = 0;
};

/// Compares u2(r) with (g2/g1) u1(kappa r), kappa = (g2/g1)^((p-1)/2).
inline ScalingReport scaling_check(const ProblemParams& pp, double gamma1, double gamma2,
                                   double r_max,
                                   const ode::IntegrationControls& controls = default_radial_controls(),
                                   std::size_t n_points = 400) {
  if (!(gamma1 > 0.0) || !(gamma2 > 0.0)) throw ValidationError("scaling_check: gammas must be positive");
  const double ratio = gamma2 / gamma1;
  ScalingReport rep;
  rep.kappa = std::pow(ratio, (pp.p - 1.0) / 2.0);

  const RadialSolution probe2 = shoot(pp, gamma2, r_max, controls);
  const RadialSolution probe1 = shoot(pp, gamma1, rep.kappa * r_max, controls);
  const double lo = std::max(probe2.r0, probe1.r0 / rep.kappa);
  const double hi = std::min(probe2.samples.back().r, probe1.samples.back().r / rep.kappa);
  if (!(hi > lo)) throw NumericalError("scaling_check: shots have no common domain");

  std::vector<double> r2, r1;
  for (std::size_t i = 0; i < n_points; ++i) {
    const double r = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_points);
    r2.push_back(r);
    r1.push_back(rep.kappa * r);
  }
  const RadialSolution s2 = shoot(pp, gamma2, r_max, controls, r2);
  const RadialSolution s1 = shoot(pp, gamma1, rep.kappa * r_max, controls, r1);
  const std::size_t n = std::min(s1.outputs.size(), s2.outputs.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = std::abs(s2.outputs[i].u - ratio * s1.outputs[i].u) / gamma2;
    rep.max_rel_deviation = std::max(rep.max_rel_deviation, dev);
  }
  rep.points = n;
  if (s1.fate == RadialFate::VanishesAt && s2.fate == RadialFate::VanishesAt)
    rep.rp_rel_error = std::abs(s2.fate_radius - s1.fate_radius / rep.kappa) / s2.fate_radius;
  return rep;
}

}  // namespace pucci
