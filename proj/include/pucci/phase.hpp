#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pucci/integrator.hpp"
#include "pucci/params.hpp"
#include "pucci/radial.hpp"

namespace pucci::phase {

using Vec2 = std::array<double, 2>;
using Mat2 = std::array<Vec2, 2>;

struct PhasePoint {
  double X = 0.0;
  double Z = 0.0;
  double t = 0.0;
};

// Branch 0 is R+ (Z > Lambda, u'' < 0), branch 1 is R- (Z < Lambda, u'' > 0).
inline constexpr int kPlusRegion = 0;
inline constexpr int kMinusRegion = 1;

/// Constants of the planar M^- system, validated once.
struct System {
  double lambda = 0.0;
  double Lambda = 0.0;
  double p = 0.0;
  double n_minus = 0.0;  // N~-
  double gap = 0.0;      // N~- - 2
  double alpha = 0.0;
  double beta = 0.0;

  static System from(const ProblemParams& pp) {
    require_planar_minus(pp, "phase plane");
    const DerivedConstants d = derive(pp);
    System s;
    s.lambda = pp.lambda;
    s.Lambda = pp.Lambda;
    s.p = pp.p;
    s.n_minus = d.n_tilde_minus;
    s.gap = d.n_tilde_minus - 2.0;
    s.alpha = d.alpha;
    s.beta = d.beta;
    return s;
  }

  int region(double Z) const { return Z > Lambda ? kPlusRegion : kMinusRegion; }

  Vec2 branch_field(int branch, double X, double Z) const {
    if (branch == kPlusRegion) return {X * (X + Z / Lambda), Z * (2.0 - p * X - Z / Lambda)};
    return {X * (X - gap + Z / lambda), Z * (n_minus - p * X - Z / lambda)};
  }

  Vec2 operator()(double X, double Z) const { return branch_field(region(Z), X, Z); }

  Mat2 jacobian(int branch, double X, double Z) const {
    if (branch == kPlusRegion)
      return {Vec2{2.0 * X + Z / Lambda, X / Lambda}, Vec2{-p * Z, 2.0 - p * X - 2.0 * Z / Lambda}};
    return {Vec2{2.0 * X - gap + Z / lambda, X / lambda},
            Vec2{-p * Z, n_minus - p * X - 2.0 * Z / lambda}};
  }

  bool has_m0() const { return gap - alpha > 0.0; }
  Vec2 n0() const { return {0.0, 2.0 * Lambda}; }
  Vec2 a0() const { return {gap, 0.0}; }
  Vec2 m0() const { return {alpha, lambda * (gap - alpha)}; }
};

/// (f, g) of the Emden-Fowler system for M^- in the plane.
inline Vec2 field(const ProblemParams& pp, double X, double Z) {
  const System s = System::from(pp);
  if (X < 0.0 || Z < 0.0) throw ValidationError("field: (X, Z) must lie in the closed first quadrant");
  return s(X, Z);
}

inline int field_branch(const ProblemParams& pp, double Z) { return System::from(pp).region(Z); }

/// Largest disagreement of the two branches on Z = Lambda over `n` pseudo-random X.
inline double branch_continuity_defect(const System& s, int n = 1000, unsigned seed = 20240611u) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> dist(0.0, 2.0 * (s.gap + s.alpha) + 1.0);
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const double X = dist(gen);
    const Vec2 a = s.branch_field(kPlusRegion, X, s.Lambda);
    const Vec2 b = s.branch_field(kMinusRegion, X, s.Lambda);
    worst = std::max(worst, std::abs(a[0] - b[0]) / (1.0 + std::abs(a[0])));
    worst = std::max(worst, std::abs(a[1] - b[1]) / (1.0 + std::abs(a[1])));
  }
  return worst;
}

inline void assert_branch_continuity(const System& s) {
  const double defect = branch_continuity_defect(s);
  if (defect > 1e-12)
    throw NumericalError("phase field branches disagree on Z = Lambda (defect " +
                         std::to_string(defect) + ")");
}

// ---------------------------------------------------------------------------
// Linearization

struct Eigen2 {
  std::array<std::complex<double>, 2> values;
  std::array<Vec2, 2> vectors{};  // unit vectors; meaningful only for real eigenvalues
};

inline Eigen2 eigen(const Mat2& J) {
  const double tr = J[0][0] + J[1][1];
  const double det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
  const double disc = tr * tr / 4.0 - det;
  Eigen2 e;
  if (disc >= 0.0) {
    const double sq = std::sqrt(disc);
    // Larger-magnitude root first for accuracy, the other from det.
    const double big = tr / 2.0 + (tr >= 0.0 ? sq : -sq);
    const double small = big != 0.0 ? det / big : 0.0;
    e.values = {std::complex<double>(std::max(big, small)), std::complex<double>(std::min(big, small))};
    for (int i = 0; i < 2; ++i) {
      const double mu = e.values[i].real();
      const Vec2 a{J[0][1], mu - J[0][0]};
      const Vec2 b{mu - J[1][1], J[1][0]};
      const double na = std::hypot(a[0], a[1]);
      const double nb = std::hypot(b[0], b[1]);
      const Vec2& v = na >= nb ? a : b;
      const double nv = std::max(na, nb);
      e.vectors[i] = nv > 0.0 ? Vec2{v[0] / nv, v[1] / nv} : (i == 0 ? Vec2{1.0, 0.0} : Vec2{0.0, 1.0});
    }
  } else {
    const double im = std::sqrt(-disc);
    e.values = {std::complex<double>(tr / 2.0, im), std::complex<double>(tr / 2.0, -im)};
  }
  return e;
}

enum class PointName { N0, A0, M0, O };
enum class PointKind { Saddle, Source, Sink, Center };

inline const char* to_string(PointName n) {
  switch (n) {
    case PointName::N0: return "N0";
    case PointName::A0: return "A0";
    case PointName::M0: return "M0";
    case PointName::O: return "O";
  }
  return "?";
}

inline const char* to_string(PointKind k) {
  switch (k) {
    case PointKind::Saddle: return "Saddle";
    case PointKind::Source: return "Source";
    case PointKind::Sink: return "Sink";
    case PointKind::Center: return "Center";
  }
  return "?";
}

struct StationaryPointInfo {
  PointName name = PointName::O;
  PhasePoint coords;
  int branch = kMinusRegion;
  std::array<std::complex<double>, 2> eigenvalues;
  PointKind kind = PointKind::Saddle;
};

inline PointKind classify_linearization(const Eigen2& e, double center_tol = 1e-12) {
  const double r0 = e.values[0].real();
  const double r1 = e.values[1].real();
  if (r0 * r1 < 0.0) return PointKind::Saddle;
  if (e.values[0].imag() != 0.0 && std::abs(r0) <= center_tol) return PointKind::Center;
  if (r0 > 0.0 && r1 > 0.0) return PointKind::Source;
  if (r0 < 0.0 && r1 < 0.0) return PointKind::Sink;
  return PointKind::Center;  // a zero real eigenvalue: non-hyperbolic
}

/// N0 (R+ Jacobian), A0, M0 and O (R- Jacobian). M0 is omitted when its Z-coordinate is <= 0.
inline std::vector<StationaryPointInfo> stationary_points(const ProblemParams& pp) {
  const System s = System::from(pp);
  std::vector<StationaryPointInfo> out;
  auto add = [&](PointName name, Vec2 at, int branch) {
    StationaryPointInfo info;
    info.name = name;
    info.coords = {at[0], at[1], 0.0};
    info.branch = branch;
    const Eigen2 e = eigen(s.jacobian(branch, at[0], at[1]));
    info.eigenvalues = e.values;
    info.kind = classify_linearization(e);
    out.push_back(info);
  };
  add(PointName::N0, s.n0(), kPlusRegion);
  add(PointName::A0, s.a0(), kMinusRegion);
  if (s.has_m0()) add(PointName::M0, s.m0(), kMinusRegion);
  add(PointName::O, {0.0, 0.0}, kMinusRegion);
  return out;
}

/// Unit unstable direction at N0 with positive X component.
inline Vec2 n0_unstable_direction(const System& s) {
  const Vec2 n0 = s.n0();
  const Eigen2 e = eigen(s.jacobian(kPlusRegion, n0[0], n0[1]));
  Vec2 v = e.vectors[0];
  if (v[0] < 0.0) v = {-v[0], -v[1]};
  return v;
}

/// Unit stable direction at A0 with positive Z component.
inline Vec2 a0_stable_direction(const System& s) {
  const Vec2 a0 = s.a0();
  const Eigen2 e = eigen(s.jacobian(kMinusRegion, a0[0], a0[1]));
  if (!(e.values[1].real() < 0.0)) throw ValidationError("A0 has no stable direction for this p");
  Vec2 w = e.vectors[1];
  if (w[1] < 0.0) w = {-w[0], -w[1]};
  return w;
}

// ---------------------------------------------------------------------------
// Orbits

enum class FateKind { BallBlowUp, FastDecay, SlowDecay, PseudoSlow, Undetermined };

inline const char* to_string(FateKind k) {
  switch (k) {
    case FateKind::BallBlowUp: return "BallBlowUp";
    case FateKind::FastDecay: return "FastDecay";
    case FateKind::SlowDecay: return "SlowDecay";
    case FateKind::PseudoSlow: return "PseudoSlow";
    case FateKind::Undetermined: return "Undetermined";
  }
  return "?";
}

struct OrbitFate {
  FateKind kind = FateKind::Undetermined;
  double T = 0.0;          // BallBlowUp time
  double period = 0.0;     // PseudoSlow
  double amplitude = 0.0;  // PseudoSlow
  std::string reason;      // Undetermined

  bool entire() const {
    return kind == FateKind::FastDecay || kind == FateKind::SlowDecay || kind == FateKind::PseudoSlow;
  }
};

enum class AlphaLimit { M0, Periodic, N0, BackwardBlowUp, Undetermined };

inline const char* to_string(AlphaLimit a) {
  switch (a) {
    case AlphaLimit::M0: return "M0";
    case AlphaLimit::Periodic: return "Periodic";
    case AlphaLimit::N0: return "N0";
    case AlphaLimit::BackwardBlowUp: return "BackwardBlowUp";
    case AlphaLimit::Undetermined: return "Undetermined";
  }
  return "?";
}

struct AlphaLimitReport {
  AlphaLimit kind = AlphaLimit::Undetermined;
  double amplitude = 0.0;
  double period = 0.0;
  double closest_to_n0 = std::numeric_limits<double>::infinity();
  std::string reason;
};

enum class OrbitOrigin { FromN0, BackwardFromA0, FromPoint };

struct EllCrossing {
  double t = 0.0;
  double X = 0.0;
  bool upward = false;
};

struct Orbit {
  OrbitOrigin origin = OrbitOrigin::FromPoint;
  ProblemParams params;
  ode::Trajectory<2> trajectory;  // state = (X, Z)
  std::vector<EllCrossing> ell_crossings;
  std::optional<double> gap_crossing_time;  // first crossing of X = N~- - 2
  OrbitFate fate;
  AlphaLimitReport alpha;  // backward orbits only
};

struct OrbitOptions {
  ode::IntegrationControls integration = [] {
    ode::IntegrationControls c;
    c.rel_tol = 1e-10;
    c.abs_tol = 1e-20;  // X and Z stay positive; near N0 the phase of the orbit lives in the relative size of X
    c.event_tol = 1e-12;
    c.blowup_norm = 1e12;
    return c;
  }();
  double horizon = 200.0;
  std::optional<double> delta;  // default 1e-7 (1 + |seed point|)
  double m0_disk = 1e-4;
  double a0_capture = 1e-3;
  double n0_capture = 1e-3;
  double amplitude_agreement = 1e-5;
  double amplitude_floor = 1e-3;
  double escape_factor = 4.0;  // backward escape once Z >= escape_factor * Lambda
  std::optional<double> blowup_X;  // default 10 (N~- - 2) + 100
  double output_step = 0.0;        // > 0: dense samples every output_step in t

  OrbitOptions tightened(double factor) const {
    OrbitOptions o = *this;
    o.integration = integration.tightened(factor);
    return o;
  }
};

inline ode::PiecewiseField<2> make_field(const System& s) {
  ode::PiecewiseField<2> f;
  f.branch_selector = [s](double, const ode::State<2>& y) { return s.region(y[1]); };
  f.branches = {[s](double, const ode::State<2>& y) { return s.branch_field(kPlusRegion, y[0], y[1]); },
                [s](double, const ode::State<2>& y) { return s.branch_field(kMinusRegion, y[0], y[1]); }};
  f.switching = {{"ell", [s](double, const ode::State<2>& y) { return y[1] - s.Lambda; }}};
  return f;
}

inline constexpr const char* kRayLabel = "m0_ray";

struct ReturnTest {
  bool stabilized = false;
  bool contracting = false;
  double amplitude = 0.0;
  double period = 0.0;
};

namespace detail {

inline double dist(Vec2 a, double X, double Z) { return std::hypot(X - a[0], Z - a[1]); }

// Amplitudes d_k = alpha - X_k at successive hits of the ray from M0 towards X = 0.
inline ReturnTest examine_returns(const std::vector<double>& d, const std::vector<double>& times,
                                  const OrbitOptions& o) {
  ReturnTest r;
  const std::size_t n = d.size();
  if (n < 3) return r;
  const double a = d[n - 3], b = d[n - 2], c = d[n - 1];
  r.amplitude = c;
  r.period = std::abs(times[n - 1] - times[n - 2]);
  if (std::abs(c - b) <= o.amplitude_agreement && std::abs(b - a) <= o.amplitude_agreement &&
      c > o.amplitude_floor) {
    r.stabilized = true;
    return r;
  }
  if (c < b && b < a) {
    // Aitken limit of the amplitude sequence; contraction towards zero means capture by M0.
    const double denom = c - 2.0 * b + a;
    const double limit = denom != 0.0 ? c - (c - b) * (c - b) / denom : c;
    if (limit < 0.1 * c) r.contracting = true;
  }
  return r;
}

inline std::vector<double> output_grid(double from, double to, double step) {
  std::vector<double> g;
  if (!(step > 0.0)) return g;
  const double span = std::abs(to - from);
  const double dir = to > from ? 1.0 : -1.0;
  for (std::size_t k = 0; static_cast<double>(k) * step <= span; ++k) g.push_back(from + dir * static_cast<double>(k) * step);
  return g;
}

inline void collect_ell(Orbit& orbit) {
  for (const auto& h : orbit.trajectory.events)
    if (h.label == "ell") orbit.ell_crossings.push_back({h.t, h.y[0], h.rising});
  std::sort(orbit.ell_crossings.begin(), orbit.ell_crossings.end(),
            [](const EllCrossing& a, const EllCrossing& b) { return a.t < b.t; });
}

inline void ray_sequence(const Orbit& orbit, double alpha, std::vector<double>& d,
                         std::vector<double>& times) {
  for (const auto& h : orbit.trajectory.events)
    if (h.label == kRayLabel) {
      d.push_back(alpha - h.y[0]);
      times.push_back(h.t);
    }
}

}  // namespace detail

inline double default_delta(Vec2 at) { return 1e-7 * (1.0 + std::hypot(at[0], at[1])); }

/// Forward orbit from `start` at time t0 with the fate events of the regular orbit.
inline Orbit forward_orbit(const ProblemParams& pp, Vec2 start, double t0, const OrbitOptions& o,
                           OrbitOrigin origin = OrbitOrigin::FromPoint) {
  const System s = System::from(pp);
  assert_branch_continuity(s);
  const double xb = o.blowup_X.value_or(10.0 * s.gap + 100.0);
  std::vector<ode::Event<2>> events{
      {"blowup", [xb](double, const ode::State<2>& y) { return std::min(y[0] - xb, 1e-6 - y[1]); },
       ode::Crossing::Rising, true},
      {"X=gap", [g = s.gap](double, const ode::State<2>& y) { return y[0] - g; },
       ode::Crossing::Rising, false}};
  if (s.has_m0()) {
    const Vec2 m0 = s.m0();
    events.push_back({kRayLabel, [zm = m0[1]](double, const ode::State<2>& y) { return y[1] - zm; },
                      ode::Crossing::Rising, false});
    events.push_back({"m0_disk",
                      [m0, r = o.m0_disk](double, const ode::State<2>& y) {
                        return detail::dist(m0, y[0], y[1]) - r;
                      },
                      ode::Crossing::Falling, true});
  }

  Orbit orbit;
  orbit.origin = origin;
  orbit.params = pp;
  const auto grid = detail::output_grid(t0, t0 + o.horizon, o.output_step);
  orbit.trajectory = ode::integrate(make_field(s), ode::State<2>{start[0], start[1]}, t0,
                                    t0 + o.horizon, events, o.integration, grid);
  detail::collect_ell(orbit);
  const auto gap_hits = orbit.trajectory.hits("X=gap");
  if (!gap_hits.empty()) orbit.gap_crossing_time = gap_hits.front().t;

  const auto& tr = orbit.trajectory;
  OrbitFate& fate = orbit.fate;
  const auto& last = tr.last();
  if (tr.termination == ode::Termination::EventStop && tr.detail == "blowup") {
    // Near blow-up X' = X (X - a) with a = N~- - 2 - Z/lambda, which reaches infinity after ln(X/(X-a))/a.
    const double X = last.y[0];
    const double a = s.gap - last.y[1] / s.lambda;
    fate.kind = FateKind::BallBlowUp;
    fate.T = last.t + (std::abs(a) > 1e-300 ? std::log(X / (X - a)) / a : 1.0 / X);
    return orbit;
  }
  if (tr.termination == ode::Termination::BlowUp) {
    fate.kind = FateKind::BallBlowUp;
    fate.T = tr.termination_time;
    return orbit;
  }
  if (tr.termination == ode::Termination::EventStop && tr.detail == "m0_disk") {
    fate.kind = FateKind::SlowDecay;
    return orbit;
  }
  if (tr.termination == ode::Termination::StepCollapse) {
    fate.kind = FateKind::Undetermined;
    fate.reason = "step collapse: " + tr.detail;
    return orbit;
  }
  if (detail::dist(s.a0(), last.y[0], last.y[1]) < o.a0_capture) {
    fate.kind = FateKind::FastDecay;
    return orbit;
  }
  std::vector<double> d, times;
  detail::ray_sequence(orbit, s.alpha, d, times);
  const ReturnTest rt = detail::examine_returns(d, times, o);
  if (rt.stabilized) {
    fate.kind = FateKind::PseudoSlow;
    fate.amplitude = rt.amplitude;
    fate.period = rt.period;
  } else if (rt.contracting) {
    fate.kind = FateKind::SlowDecay;
  } else {
    fate.kind = FateKind::Undetermined;
    fate.reason = d.size() < 3 ? "horizon reached with fewer than 3 returns"
                               : "horizon reached without a fate criterion";
  }
  return orbit;
}

/// Time origin making t = ln r for the gamma = 1 solution: near N0, X ~ r^2 / (2 Lambda).
inline double regular_orbit_time_origin(const System& s, double X0) {
  return 0.5 * std::log(2.0 * s.Lambda * X0);
}

/// The trajectory Gamma_p leaving N0 along its unstable manifold.
inline Orbit regular_orbit(const ProblemParams& pp, const OrbitOptions& o = {}) {
  const System s = System::from(pp);
  const Vec2 n0 = s.n0();
  const double delta = o.delta.value_or(default_delta(n0));
  if (!(delta > 0.0)) throw ValidationError("regular_orbit: delta must be positive");
  const Eigen2 e = eigen(s.jacobian(kPlusRegion, n0[0], n0[1]));
  if (classify_linearization(e) != PointKind::Saddle)
    throw NumericalError("regular_orbit: N0 is not a saddle");
  const Vec2 v = n0_unstable_direction(s);
  const Vec2 start{n0[0] + delta * v[0], n0[1] + delta * v[1]};
  return forward_orbit(pp, start, regular_orbit_time_origin(s, start[0]), o, OrbitOrigin::FromN0);
}

/// Stable manifold of A0 traced backward in time from t = 0.
inline Orbit backward_orbit_from_A0(const ProblemParams& pp, const OrbitOptions& o = {}) {
  const System s = System::from(pp);
  assert_branch_continuity(s);
  const Vec2 a0 = s.a0();
  const Eigen2 e = eigen(s.jacobian(kMinusRegion, a0[0], a0[1]));
  if (classify_linearization(e) != PointKind::Saddle)
    throw ValidationError("backward_orbit_from_A0: A0 is not a saddle (p too small)");
  const double delta = o.delta.value_or(default_delta(a0));
  if (!(delta > 0.0)) throw ValidationError("backward_orbit_from_A0: delta must be positive");
  const Vec2 w = a0_stable_direction(s);
  const Vec2 start{a0[0] + delta * w[0], a0[1] + delta * w[1]};

  std::vector<ode::Event<2>> events{
      {"escape", [zc = o.escape_factor * s.Lambda](double, const ode::State<2>& y) { return y[1] - zc; },
       ode::Crossing::Any, true}};
  if (s.has_m0()) {
    const Vec2 m0 = s.m0();
    events.push_back({kRayLabel, [zm = m0[1]](double, const ode::State<2>& y) { return y[1] - zm; },
                      ode::Crossing::Rising, false});
    events.push_back({"m0_disk",
                      [m0, r = o.m0_disk](double, const ode::State<2>& y) {
                        return detail::dist(m0, y[0], y[1]) - r;
                      },
                      ode::Crossing::Any, true});
  }

  Orbit orbit;
  orbit.origin = OrbitOrigin::BackwardFromA0;
  orbit.params = pp;
  const auto grid = detail::output_grid(0.0, -o.horizon, o.output_step);
  orbit.trajectory = ode::integrate(make_field(s), ode::State<2>{start[0], start[1]}, 0.0, -o.horizon,
                                    events, o.integration, grid);
  detail::collect_ell(orbit);
  const auto& tr = orbit.trajectory;
  AlphaLimitReport& al = orbit.alpha;
  for (const auto& smp : tr.samples)
    al.closest_to_n0 = std::min(al.closest_to_n0, detail::dist(s.n0(), smp.y[0], smp.y[1]));

  if (tr.termination == ode::Termination::EventStop && tr.detail == "m0_disk") {
    al.kind = AlphaLimit::M0;
    return orbit;
  }
  if ((tr.termination == ode::Termination::EventStop && tr.detail == "escape") ||
      tr.termination == ode::Termination::BlowUp) {
    al.kind = al.closest_to_n0 < o.n0_capture ? AlphaLimit::N0 : AlphaLimit::BackwardBlowUp;
    return orbit;
  }
  if (tr.termination == ode::Termination::StepCollapse) {
    al.reason = "step collapse: " + tr.detail;
    return orbit;
  }
  const auto& last = tr.last();
  if (detail::dist(s.n0(), last.y[0], last.y[1]) < o.n0_capture) {
    al.kind = AlphaLimit::N0;
    return orbit;
  }
  std::vector<double> d, times;
  detail::ray_sequence(orbit, s.alpha, d, times);
  const ReturnTest rt = detail::examine_returns(d, times, o);
  if (rt.stabilized) {
    al.kind = AlphaLimit::Periodic;
    al.amplitude = rt.amplitude;
    al.period = rt.period;
  } else if (rt.contracting) {
    al.kind = AlphaLimit::M0;
  } else {
    al.reason = d.size() < 3 ? "horizon reached with fewer than 3 returns"
                             : "horizon reached without an alpha-limit criterion";
  }
  return orbit;
}

// ---------------------------------------------------------------------------
// Poincare sections

enum class Section { EllUpward, M0Ray };

enum class ReturnVerdict { Inconclusive, Contracting, Stabilized, NotSettled };

inline const char* to_string(ReturnVerdict v) {
  switch (v) {
    case ReturnVerdict::Inconclusive: return "Inconclusive";
    case ReturnVerdict::Contracting: return "Contracting";
    case ReturnVerdict::Stabilized: return "Stabilized";
    case ReturnVerdict::NotSettled: return "NotSettled";
  }
  return "?";
}

struct ReturnSequence {
  std::vector<double> X;
  std::vector<double> times;
  std::vector<double> differences;  // |X_{k+1} - X_k|
  ReturnVerdict verdict = ReturnVerdict::Inconclusive;
  double period = 0.0;
};

/// Successive hits of a section, in integration order.
/// On the M0 ray the verdict uses amplitudes alpha - X_k, so a spiral into M0 is never "stabilized".
inline ReturnSequence poincare_section(const Orbit& orbit, Section section, const OrbitOptions& o = {}) {
  ReturnSequence rs;
  for (const auto& h : orbit.trajectory.events) {
    const bool take = section == Section::EllUpward ? (h.label == "ell" && h.rising) : h.label == kRayLabel;
    if (!take) continue;
    rs.X.push_back(h.y[0]);
    rs.times.push_back(h.t);
  }
  for (std::size_t k = 1; k < rs.X.size(); ++k) rs.differences.push_back(std::abs(rs.X[k] - rs.X[k - 1]));
  const std::size_t n = rs.X.size();
  if (n < 3) return rs;
  rs.period = std::abs(rs.times[n - 1] - rs.times[n - 2]);
  if (section == Section::M0Ray) {
    const double alpha = derive(orbit.params).alpha;
    std::vector<double> d;
    for (double X : rs.X) d.push_back(alpha - X);
    const ReturnTest rt = detail::examine_returns(d, rs.times, o);
    const bool shrinking = d[n - 1] < d[n - 2] && d[n - 2] < d[n - 3];
    rs.verdict = rt.stabilized ? ReturnVerdict::Stabilized
                 : (rt.contracting || shrinking) ? ReturnVerdict::Contracting
                                                 : ReturnVerdict::NotSettled;
    return rs;
  }
  const double d1 = rs.differences[n - 3], d2 = rs.differences[n - 2];
  if (d1 <= o.amplitude_agreement && d2 <= o.amplitude_agreement)
    rs.verdict = ReturnVerdict::Stabilized;
  else if (d2 < d1)
    rs.verdict = ReturnVerdict::Contracting;
  else
    rs.verdict = ReturnVerdict::NotSettled;
  return rs;
}

/// One revolution of the orbit through (X_start, Z of M0), sampled at n points; closed when periodic.
inline std::vector<Vec2> trace_cycle(const ProblemParams& pp, double X_start, std::size_t n = 4000,
                                     const ode::IntegrationControls& controls = OrbitOptions{}.integration,
                                     double max_period = 1e3) {
  const System s = System::from(pp);
  if (!s.has_m0()) throw ValidationError("trace_cycle: M0 is not in the first quadrant");
  const Vec2 m0 = s.m0();
  std::vector<ode::Event<2>> ev{{kRayLabel, [zm = m0[1]](double, const ode::State<2>& y) { return y[1] - zm; },
                                 ode::Crossing::Rising, true}};
  const ode::State<2> y0{X_start, m0[1]};
  // First pass finds the return time, second pass samples the revolution uniformly in time.
  const auto field = make_field(s);
  const auto probe = ode::integrate(field, y0, 0.0, max_period, ev, controls);
  if (probe.termination != ode::Termination::EventStop)
    throw NumericalError("trace_cycle: orbit did not return to the section");
  const double period = probe.termination_time;
  std::vector<double> times(n);
  for (std::size_t i = 0; i < n; ++i) times[i] = period * static_cast<double>(i) / static_cast<double>(n);
  const auto pass = ode::integrate(field, y0, 0.0, period, {}, controls, times);
  std::vector<Vec2> poly;
  poly.reserve(n + 1);
  for (const auto& smp : pass.outputs) poly.push_back({smp.y[0], smp.y[1]});
  poly.push_back({probe.last().y[0], probe.last().y[1]});
  return poly;
}

// ---------------------------------------------------------------------------
// Dulac diagnostic

/// Weighted divergence div(phi F), phi = X^alpha Z^beta, on the branch containing (X, Z).
inline double dulac_density(const System& s, double X, double Z) {
  const double w = std::pow(X, s.alpha) * std::pow(Z, s.beta);
  if (s.region(Z) == kPlusRegion) return w * 4.0 / (s.p - 1.0);
  return -w * (s.p * s.gap - (s.n_minus + 2.0)) / (s.p - 1.0);
}

struct DulacResult {
  double I_plus = 0.0;
  double I_minus = 0.0;
  double total = 0.0;
  double relative() const {
    const double den = std::abs(I_plus) + std::abs(I_minus);
    return den > 0.0 ? std::abs(total) / den : 0.0;
  }
};

namespace detail {

// Part of a polygon on one side of Z = level (Sutherland-Hodgman against a half-plane).
inline std::vector<Vec2> clip_half_plane(const std::vector<Vec2>& poly, double level, bool keep_above) {
  std::vector<Vec2> out;
  const std::size_t n = poly.size();
  auto inside = [&](const Vec2& v) { return keep_above ? v[1] >= level : v[1] <= level; };
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    const bool ia = inside(a), ib = inside(b);
    if (ia) out.push_back(a);
    if (ia != ib) {
      const double s = (level - a[1]) / (b[1] - a[1]);
      out.push_back({a[0] + s * (b[0] - a[0]), level});
    }
  }
  return out;
}

inline double signed_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * a;
}

// Integral of coef X^alpha Z^beta over a polygon as the boundary integral of
// coef X^(alpha+1) Z^beta / (alpha+1) dZ, using 5-point Gauss-Legendre on every edge.
inline double weighted_area(const std::vector<Vec2>& poly, double alpha, double beta, double coef) {
  static constexpr double kNode[5] = {0.0, -0.5384693101056831, 0.5384693101056831, -0.9061798459386640,
                                      0.9061798459386640};
  static constexpr double kWeight[5] = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665,
                                        0.2369268850561891, 0.2369268850561891};
  double sum = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    const double dz = b[1] - a[1];
    if (dz == 0.0) continue;
    double edge = 0.0;
    for (int k = 0; k < 5; ++k) {
      const double s = 0.5 * (1.0 + kNode[k]);
      const double X = a[0] + s * (b[0] - a[0]);
      const double Z = a[1] + s * dz;
      edge += kWeight[k] * std::pow(X, alpha + 1.0) * std::pow(Z, beta);
    }
    sum += 0.5 * edge * dz;
  }
  return coef * sum / (alpha + 1.0);
}

}  // namespace detail

/// Integral of div(phi F) over the region bounded by a closed polygonal orbit, split at Z = Lambda.
inline DulacResult dulac_integral(const ProblemParams& pp, std::vector<Vec2> polygon, double closure_tol = 1e-6) {
  const System s = System::from(pp);
  if (polygon.size() < 4) throw ValidationError("dulac_integral: polygon needs at least 3 distinct vertices");
  const Vec2 &first = polygon.front(), &last = polygon.back();
  const double scale = 1.0 + std::hypot(first[0], first[1]);
  if (std::hypot(first[0] - last[0], first[1] - last[1]) > closure_tol * scale)
    throw ValidationError("dulac_integral: orbit is not closed");
  polygon.pop_back();
  for (const Vec2& v : polygon)
    if (!(v[0] > 0.0) || !(v[1] > 0.0)) throw ValidationError("dulac_integral: vertices must lie in the open first quadrant");
  if (detail::signed_area(polygon) < 0.0) std::reverse(polygon.begin(), polygon.end());

  DulacResult r;
  const auto upper = detail::clip_half_plane(polygon, s.Lambda, true);
  const auto lower = detail::clip_half_plane(polygon, s.Lambda, false);
  if (upper.size() >= 3) r.I_plus = detail::weighted_area(upper, s.alpha, s.beta, 4.0 / (s.p - 1.0));
  if (lower.size() >= 3)
    r.I_minus = detail::weighted_area(lower, s.alpha, s.beta, -(s.p * s.gap - (s.n_minus + 2.0)) / (s.p - 1.0));
  r.total = r.I_plus + r.I_minus;
  return r;
}

// ---------------------------------------------------------------------------
// Geometry helpers

/// Emden-Fowler image of a radial shot: t = ln r, X = -r u'/u, Z = -r u^p/u'.
inline std::vector<PhasePoint> phase_from_radial(const RadialSolution& sol) {
  std::vector<PhasePoint> out;
  out.reserve(sol.samples.size());
  for (const auto& s : sol.samples) {
    if (!(s.u > 0.0) || !(s.du < 0.0)) continue;
    out.push_back({-s.r * s.du / s.u, -s.r * std::pow(s.u, sol.params.p) / s.du, std::log(s.r)});
  }
  return out;
}

inline double point_segment_distance(const Vec2& q, const Vec2& a, const Vec2& b) {
  const double dx = b[0] - a[0], dz = b[1] - a[1];
  const double len2 = dx * dx + dz * dz;
  double s = len2 > 0.0 ? ((q[0] - a[0]) * dx + (q[1] - a[1]) * dz) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return std::hypot(q[0] - (a[0] + s * dx), q[1] - (a[1] + s * dz));
}

/// Largest distance from a vertex of `a` to the polyline `b`.
/// Scans `b` outward from the previous nearest segment and stops once the running
/// minimum drops below the current maximum, which is cheap for curves that nearly coincide.
inline double directed_hausdorff(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  if (b.size() == 1) {
    double worst = 0.0;
    for (const Vec2& q : a) worst = std::max(worst, std::hypot(q[0] - b[0][0], q[1] - b[0][1]));
    return worst;
  }
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(b.size()) - 1;  // segments
  double worst = 0.0;
  std::ptrdiff_t hint = 0;
  for (const Vec2& q : a) {
    double best = std::numeric_limits<double>::infinity();
    std::ptrdiff_t best_idx = hint;
    for (std::ptrdiff_t off = 0; off <= m; ++off) {
      bool any = false;
      const std::ptrdiff_t cand[2] = {hint + off, hint - off};
      for (int c = 0; c < (off == 0 ? 1 : 2); ++c) {
        const std::ptrdiff_t idx = cand[c];
        if (idx < 0 || idx >= m) continue;
        any = true;
        const double d = point_segment_distance(q, b[idx], b[idx + 1]);
        if (d < best) {
          best = d;
          best_idx = idx;
        }
      }
      if (!any || best < worst) break;
    }
    hint = best_idx;
    worst = std::max(worst, best);
  }
  return worst;
}

inline double hausdorff(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

struct Box {
  double x_lo, x_hi, z_lo, z_hi;
  bool contains(const Vec2& v) const { return v[0] >= x_lo && v[0] <= x_hi && v[1] >= z_lo && v[1] <= z_hi; }
};

/// Hausdorff distance of the parts of two curves inside `box`; each clipped part is
/// measured against the whole other curve so the cut at the box edge adds no error.
inline double hausdorff_in_box(const std::vector<Vec2>& a, const std::vector<Vec2>& b, const Box& box) {
  std::vector<Vec2> ia, ib;
  for (const Vec2& v : a)
    if (box.contains(v)) ia.push_back(v);
  for (const Vec2& v : b)
    if (box.contains(v)) ib.push_back(v);
  return std::max(directed_hausdorff(ia, b), directed_hausdorff(ib, a));
}

inline std::vector<PhasePoint> orbit_points(const Orbit& orbit) {
  std::vector<PhasePoint> out;
  out.reserve(orbit.trajectory.samples.size());
  for (const auto& s : orbit.trajectory.samples) out.push_back({s.y[0], s.y[1], s.t});
  return out;
}

}  // namespace pucci::phase
