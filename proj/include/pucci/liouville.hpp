#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pucci/exponents.hpp"
#include "pucci/integrator.hpp"
#include "pucci/params.hpp"
#include "pucci/phase.hpp"
#include "pucci/radial.hpp"

namespace pucci::liouville {

struct Jet {
  double z = 0.0;
  double dz = 0.0;
  double d2z = 0.0;
};

inline double inflection_radius(double lambda) { return 2.0 * std::sqrt(2.0 * lambda); }

/// z = log(1/(1 + r^2/(8 lambda))^2) with its first two derivatives.
inline Jet inner_solution(double lambda, double r) {
  const double a = 8.0 * lambda;
  const double q = a + r * r;
  return {-2.0 * std::log1p(r * r / a), -4.0 * r / q, -4.0 * (a - r * r) / (q * q)};
}

/// Value and slope where the inner and outer branches meet.
inline Jet junction(double lambda) {
  return {-2.0 * std::log(2.0), -1.0 / std::sqrt(2.0 * lambda), 0.0};
}

/// -M+ of the radial Hessian with eigenvalues d2z (once) and dz/r (once), planar case.
inline double minus_pucci_plus(double lambda, double Lambda, double d2z, double dz_over_r) {
  auto part = [&](double e) { return e > 0.0 ? Lambda * e : lambda * e; };
  return -(part(d2z) + part(dz_over_r));
}

struct OuterSample {
  double r = 0.0;
  double z = 0.0;
  double dz = 0.0;
  double d2z = 0.0;
};

inline ode::IntegrationControls default_liouville_controls() {
  ode::IntegrationControls c;
  c.rel_tol = 1e-12;
  c.abs_tol = 1e-14;
  return c;
}

/// Convex branch -Lambda z'' - lambda z'/r = e^z on (R0, r_max] from the junction data.
/// `radii` (increasing, inside (R0, r_max]) are sampled densely; otherwise the accepted steps are returned.
inline std::vector<OuterSample> outer_ivp(const ProblemParams& pp, double r_max,
                                          const ode::IntegrationControls& controls = default_liouville_controls(),
                                          std::span<const double> radii = {}) {
  pp.validate();
  const double R0 = inflection_radius(pp.lambda);
  if (!(r_max > R0)) throw ValidationError("outer_ivp: r_max must exceed R0 = 2 sqrt(2 lambda)");
  const double lambda = pp.lambda, Lambda = pp.Lambda;
  auto d2 = [=](double r, const ode::State<2>& y) { return (-lambda * y[1] / r - std::exp(y[0])) / Lambda; };
  auto field = ode::PiecewiseField<2>::smooth(
      [d2](double r, const ode::State<2>& y) { return ode::State<2>{y[1], d2(r, y)}; });
  const Jet j = junction(lambda);
  const auto tr = ode::integrate(field, ode::State<2>{j.z, j.dz}, R0, r_max, {}, controls, radii);
  if (tr.termination != ode::Termination::HorizonReached)
    throw NumericalError(std::string("outer_ivp: integration ended early (") + ode::to_string(tr.termination) + ")");

  std::vector<OuterSample> out;
  const auto& src = radii.empty() ? tr.samples : tr.outputs;
  for (const auto& s : src) out.push_back({s.t, s.y[0], s.y[1], d2(s.t, s.y)});
  for (const auto& s : out) {
    // z'' vanishes at R0 itself; allow rounding there.
    if (s.d2z < -1e-13)
      throw NumericalError("outer_ivp: convexity violated at r = " + std::to_string(s.r));
    if (!(s.dz < 0.0)) throw NumericalError("outer_ivp: z' >= 0 at r = " + std::to_string(s.r));
    if (!(s.z < 0.0)) throw NumericalError("outer_ivp: z >= 0 at r = " + std::to_string(s.r));
  }
  return out;
}

/// Glued limit profile: closed form on [0, R0], numerical convex branch on [R0, r_max].
struct LiouvilleProfile {
  double lambda = 0.0;
  double Lambda = 0.0;
  double R0 = 0.0;
  double r_max = 0.0;
  Jet junction_values;
  std::vector<OuterSample> outer;  // uniform grid on [R0, r_max]
  std::vector<double> inflections;
  double max_inner_residual = 0.0;
  double max_outer_residual = 0.0;

  /// z and z' at r (cubic Hermite on the outer grid).
  Jet operator()(double r) const {
    if (r < 0.0) throw ValidationError("profile: r must be non-negative");
    if (r <= R0) return inner_solution(lambda, r);
    if (r > r_max) throw ValidationError("profile: r beyond r_max");
    const double h = outer[1].r - outer[0].r;
    const std::size_t i = std::min(static_cast<std::size_t>((r - R0) / h), outer.size() - 2);
    const OuterSample &a = outer[i], &b = outer[i + 1];
    const double s = (r - a.r) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    const double z = h00 * a.z + h10 * h * a.dz + h01 * b.z + h11 * h * b.dz;
    const double g00 = 6 * s * s - 6 * s, g10 = 3 * s * s - 4 * s + 1, g01 = -g00, g11 = 3 * s * s - 2 * s;
    const double dz = (g00 * a.z + g01 * b.z) / h + g10 * a.dz + g11 * b.dz;
    return {z, dz, (1 - s) * a.d2z + s * b.d2z};
  }
};

inline LiouvilleProfile build_profile(const ProblemParams& pp, std::optional<double> r_max = std::nullopt,
                                      std::size_t n_grid = 50000, double residual_tol = 1e-6) {
  pp.validate();
  if (pp.op != Operator::Plus) throw ValidationError("build_profile: operator must be plus");
  LiouvilleProfile prof;
  prof.lambda = pp.lambda;
  prof.Lambda = pp.Lambda;
  prof.R0 = inflection_radius(pp.lambda);
  prof.r_max = r_max.value_or(50.0 * prof.R0);
  prof.junction_values = junction(pp.lambda);
  if (!(prof.r_max > prof.R0)) throw ValidationError("build_profile: r_max must exceed R0");

  std::vector<double> grid(n_grid + 1);
  for (std::size_t i = 0; i <= n_grid; ++i)
    grid[i] = prof.R0 + (prof.r_max - prof.R0) * static_cast<double>(i) / static_cast<double>(n_grid);
  grid.back() = prof.r_max;
  prof.outer = outer_ivp(pp, prof.r_max, default_liouville_controls(), grid);

  // Residual of -M+(D^2 z) = e^z: analytic derivatives inside, centred differences of z' outside.
  for (std::size_t i = 1; i <= 1000; ++i) {
    const double r = prof.R0 * static_cast<double>(i) / 1000.0;
    const Jet j = inner_solution(pp.lambda, r);
    const double res = minus_pucci_plus(pp.lambda, pp.Lambda, j.d2z, j.dz / r) - std::exp(j.z);
    prof.max_inner_residual = std::max(prof.max_inner_residual, std::abs(res));
  }
  for (std::size_t i = 1; i + 1 < prof.outer.size(); ++i) {
    const auto &a = prof.outer[i - 1], &b = prof.outer[i], &c = prof.outer[i + 1];
    const double d2 = (c.dz - a.dz) / (c.r - a.r);
    const double res = minus_pucci_plus(pp.lambda, pp.Lambda, d2, b.dz / b.r) - std::exp(b.z);
    prof.max_outer_residual = std::max(prof.max_outer_residual, std::abs(res));
  }
  if (prof.max_inner_residual > residual_tol || prof.max_outer_residual > residual_tol)
    throw NumericalError("build_profile: residual above tolerance (inner " + std::to_string(prof.max_inner_residual) +
                         ", outer " + std::to_string(prof.max_outer_residual) + ")");

  // Sign changes of z'' along inner grid then outer grid; zeros are skipped.
  int prev = 0;
  double prev_r = 0.0;
  auto visit = [&](double r, double d2) {
    const int sg = d2 > 0.0 ? 1 : (d2 < 0.0 ? -1 : 0);
    if (sg == 0) return;
    if (prev != 0 && sg != prev) prof.inflections.push_back(prev_r <= prof.R0 && r >= prof.R0 ? prof.R0 : 0.5 * (prev_r + r));
    prev = sg;
    prev_r = r;
  };
  for (std::size_t i = 1; i < 1000; ++i) {
    const double r = prof.R0 * static_cast<double>(i) / 1000.0;
    visit(r, inner_solution(pp.lambda, r).d2z);
  }
  for (const auto& s : prof.outer) visit(s.r, s.d2z);
  return prof;
}

// ---------------------------------------------------------------------------
// Rescaled ball solutions for M+

struct RescaledProfile {
  double p = 0.0;
  double eps = 0.0;            // gamma = 1 normalization: eps^-2 = p
  double eps_unit_ball = 0.0;  // solution on the unit ball: eps^-2 = p u(0)^(p-1)
  double R_p = 0.0;            // first zero of the gamma = 1 shot
  double K = 0.0;              // requested range
  double K_used = 0.0;         // min(K, R_p / eps): part of [0, K] inside the ball
  std::vector<std::pair<double, double>> samples;  // (r, z_p)
};

/// z_p(r) = (p / u(0)) (u(eps_p r) - u(0)) from the gamma = 1 shot, sampled on [0, K].
inline RescaledProfile rescale_zp(const ProblemParams& base, double p, double K, std::size_t n = 2000,
                                  const ode::IntegrationControls& controls = default_radial_controls()) {
  ProblemParams pp = base.with_p(p);
  pp.validate();
  if (pp.op != Operator::Plus) throw ValidationError("rescale_zp: operator must be plus");
  if (!(K > 0.0)) throw ValidationError("rescale_zp: K must be positive");
  RescaledProfile out;
  out.p = p;
  out.K = K;
  out.eps = 1.0 / std::sqrt(p);
  const RadialSolution probe = shoot(pp, 1.0, 1e6, controls);
  if (probe.fate != RadialFate::VanishesAt) throw NumericalError("rescale_zp: the ball shot did not vanish");
  out.R_p = probe.fate_radius;
  out.eps_unit_ball = 1.0 / (std::sqrt(p) * out.R_p);
  out.K_used = std::min(K, out.R_p / out.eps);

  // Outside the ball u is extended by zero, so z_p = -p there.
  std::vector<double> r_scaled;
  std::vector<double> r_plain;
  for (std::size_t i = 0; i <= n; ++i) {
    const double r = K * static_cast<double>(i) / static_cast<double>(n);
    r_plain.push_back(r);
    const double s = out.eps * r;
    if (s >= probe.r0 && s < out.R_p) r_scaled.push_back(s);
  }
  const RadialSolution sol = shoot(pp, 1.0, 1e6, controls, r_scaled);
  std::size_t k = 0;
  for (double r : r_plain) {
    const double s = out.eps * r;
    double u = 0.0;
    if (r == 0.0)
      u = 1.0;
    else if (s < probe.r0)
      u = taylor_start(pp, 1.0, s).u;
    else if (s < out.R_p)
      u = std::max(sol.outputs.at(k++).u, 0.0);
    out.samples.push_back({r, p * (u - 1.0)});
  }
  return out;
}

struct ConvergenceRow {
  double p = 0.0;
  double eps = 0.0;
  double eps_unit_ball = 0.0;
  double R_p = 0.0;
  double K_used = 0.0;
  bool truncated = false;
  double sup_error = 0.0;  // sup |z_p - z| on [0, K]
};

inline std::vector<ConvergenceRow> convergence_table(const ProblemParams& base, const std::vector<double>& ps,
                                                     double K, const LiouvilleProfile& prof) {
  if (K > prof.r_max) throw ValidationError("convergence_table: K beyond the profile range");
  std::vector<ConvergenceRow> rows(ps.size());
  exponents::parallel_for(ps.size(), [&](std::size_t i) {
    const RescaledProfile zp = rescale_zp(base, ps[i], K);
    ConvergenceRow& row = rows[i];
    row.p = ps[i];
    row.eps = zp.eps;
    row.eps_unit_ball = zp.eps_unit_ball;
    row.R_p = zp.R_p;
    row.K_used = zp.K_used;
    row.truncated = zp.K_used < K;
    for (const auto& [r, z] : zp.samples) row.sup_error = std::max(row.sup_error, std::abs(z - prof(r).z));
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Near-critical experiment for M-

struct EntireProfile {
  std::vector<double> r;
  std::vector<double> U;
  double closest_to_n0 = 0.0;

  double operator()(double x) const {
    if (x <= r.front()) return U.front();
    if (x >= r.back()) return U.back();
    const auto it = std::upper_bound(r.begin(), r.end(), x);
    const std::size_t i = static_cast<std::size_t>(it - r.begin()) - 1;
    const double s = (x - r[i]) / (r[i + 1] - r[i]);
    return (1 - s) * U[i] + s * U[i + 1];
  }
};

/// Fast-decaying entire solution with U(0) = 1 rebuilt from the A0 stable manifold:
/// d(ln U)/dt = -X along the orbit, and near N0 X ~ r^2/(2 Lambda), ln U ~ -X/2.
inline EntireProfile entire_profile_from_A0(const ProblemParams& pp, double r_hi, double dt = 1e-3) {
  const phase::System s = phase::System::from(pp);
  phase::OrbitOptions o;
  o.output_step = dt;
  o.horizon = 400.0;
  const phase::Orbit tau = phase::backward_orbit_from_A0(pp, o);
  const auto& out = tau.trajectory.outputs;  // t decreasing from 0
  if (out.size() < 3) throw NumericalError("entire_profile_from_A0: backward orbit too short");
  std::size_t c = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = phase::detail::dist(s.n0(), out[i].y[0], out[i].y[1]);
    if (d < best) {
      best = d;
      c = i;
    }
  }
  EntireProfile prof;
  prof.closest_to_n0 = best;
  const double Xc = out[c].y[0];
  const double ln_rc = 0.5 * std::log(2.0 * s.Lambda * Xc);
  // Core r < r_c from the quadratic expansion, then the orbit towards A0, then X = N~- - 2 beyond.
  const double rc = std::exp(ln_rc);
  for (int k = 0; k < 50; ++k) {
    const double r = rc * k / 50.0;
    prof.r.push_back(r);
    prof.U.push_back(std::exp(-r * r / (4.0 * s.Lambda)));
  }
  double lnU = -Xc / 2.0;
  double t_prev = out[c].t;
  double X_prev = Xc;
  prof.r.push_back(rc);
  prof.U.push_back(std::exp(lnU));
  for (std::size_t i = c; i-- > 0;) {
    const double t = out[i].t, X = out[i].y[0];
    lnU -= 0.5 * (X + X_prev) * (t - t_prev);
    t_prev = t;
    X_prev = X;
    const double r = std::exp(ln_rc + (t - out[c].t));
    prof.r.push_back(r);
    prof.U.push_back(std::exp(lnU));
    if (r > r_hi) return prof;
  }
  // Past the seed point the orbit sits at A0, where X = N~- - 2.
  double r = prof.r.back();
  while (r < r_hi) {
    const double r_next = r * std::exp(dt);
    lnU -= s.gap * dt;
    prof.r.push_back(r_next);
    prof.U.push_back(std::exp(lnU));
    r = r_next;
  }
  return prof;
}

struct NearCriticalRow {
  double eps = 0.0;
  double p = 0.0;
  double R_p = 0.0;           // zero of the gamma = 1 shot
  double M = 0.0;             // u(0) of the unit-ball solution
  double u_eps_at_0 = 0.0;
  double sup_distance = 0.0;  // sup |u_eps - U| on [0, K]
  double annulus_max = 0.0;   // max of u over 1/2 <= r <= 1
};

struct NearCriticalReport {
  double p_hat = 0.0;
  exponents::Bracket p_star;
  double K = 0.0;
  double U_closest_to_n0 = 0.0;
  std::vector<NearCriticalRow> rows;
};

/// Unit-ball solutions at p = p_hat - eps, p_hat the midpoint of the p-* bracket.
inline NearCriticalReport near_critical_experiment(const ProblemParams& pp, const std::optional<exponents::Bracket>& p_star,
                                                   const std::vector<double>& eps_list, double K = 5.0,
                                                   std::size_t n_compare = 400) {
  require_planar_minus(pp, "near_critical_experiment");
  if (!p_star) throw ValidationError("near_critical_experiment: a p-* bracket is required");
  if (eps_list.empty()) throw ValidationError("near_critical_experiment: eps_list is empty");
  if (!(K > 0.0)) throw ValidationError("near_critical_experiment: K must be positive");
  NearCriticalReport rep;
  rep.p_star = *p_star;
  rep.p_hat = p_star->mid();
  rep.K = K;
  const EntireProfile U = entire_profile_from_A0(pp.with_p(rep.p_hat), K);
  rep.U_closest_to_n0 = U.closest_to_n0;

  rep.rows.resize(eps_list.size());
  exponents::parallel_for(eps_list.size(), [&](std::size_t i) {
    const double eps = eps_list[i];
    if (!(eps > 0.0)) throw ValidationError("near_critical_experiment: eps must be positive");
    NearCriticalRow& row = rep.rows[i];
    row.eps = eps;
    row.p = rep.p_hat - eps;
    const ProblemParams q = pp.with_p(row.p);
    const RadialSolution probe = shoot(q, 1.0, 1e8);
    if (probe.fate != RadialFate::VanishesAt)
      throw NumericalError("near_critical_experiment: no ball solution at p = " + std::to_string(row.p));
    row.R_p = probe.fate_radius;
    // u_ball(r) = M u1(r M^((p-1)/2)) with M^((p-1)/2) = R_p, so u_eps(x) = u1(x).
    row.M = std::pow(row.R_p, 2.0 / (row.p - 1.0));
    std::vector<double> radii;
    for (std::size_t k = 0; k <= n_compare; ++k) {
      const double x = K * static_cast<double>(k) / static_cast<double>(n_compare);
      if (x >= probe.r0 && x < row.R_p) radii.push_back(x);
    }
    radii.push_back(0.5 * row.R_p);
    std::sort(radii.begin(), radii.end());
    const RadialSolution sol = shoot(q, 1.0, 1e8, default_radial_controls(), radii);
    row.u_eps_at_0 = 1.0;
    for (const auto& s : sol.outputs) {
      if (s.r == 0.5 * row.R_p) row.annulus_max = row.M * s.u;
      if (s.r <= K) row.sup_distance = std::max(row.sup_distance, std::abs(s.u - U(s.r)));
    }
    if (K >= row.R_p) row.sup_distance = std::max(row.sup_distance, U(std::min(K, U.r.back())));
  });
  return rep;
}

}  // namespace pucci::liouville
