#pragma once

// Adaptive Dormand-Prince 5(4) integrator with dense output, event location
// and piecewise right-hand sides.
//
// A PiecewiseField carries one smooth right-hand side per branch and a set of
// switching functions whose zero sets separate the branches. Each step is
// taken with a frozen branch; if a switching or event function changes sign
// on the dense interpolant of an accepted step, the root is refined, the step
// is re-taken to the root and the branch is re-selected on the far side.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pucci/params.hpp"

namespace pucci::ode {

template <std::size_t Dim>
using State = std::array<double, Dim>;

template <std::size_t Dim>
using ScalarFn = std::function<double(double, const State<Dim>&)>;

template <std::size_t Dim>
using Rhs = std::function<State<Dim>(double, const State<Dim>&)>;

template <std::size_t Dim>
struct SwitchingSurface {
  std::string label;
  ScalarFn<Dim> fn;
};

template <std::size_t Dim>
struct PiecewiseField {
  /// Index into `branches`, or -1 where the field is undefined.
  std::function<int(double, const State<Dim>&)> branch_selector;
  std::vector<Rhs<Dim>> branches;
  std::vector<SwitchingSurface<Dim>> switching;

  static PiecewiseField smooth(Rhs<Dim> rhs) {
    PiecewiseField field;
    field.branch_selector = [](double, const State<Dim>&) { return 0; };
    field.branches.push_back(std::move(rhs));
    return field;
  }
};

/// Crossing direction, always measured along increasing t (also when integrating backward).
enum class Crossing { Any, Rising, Falling };

template <std::size_t Dim>
struct Event {
  std::string label;
  ScalarFn<Dim> fn;
  Crossing direction = Crossing::Any;
  bool terminal = false;
};

struct IntegrationControls {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double max_step = std::numeric_limits<double>::infinity();
  double min_step = 1e-14;
  double blowup_norm = 1e12;
  double max_time = std::numeric_limits<double>::infinity();  // cap on |t - t0|
  double event_tol = 1e-12;
  double fixed_step = 0.0;  // > 0 switches off error control
  std::size_t max_steps = 20'000'000;

  void validate() const {
    if (!(rel_tol > 0.0) || !(abs_tol > 0.0))
      throw ValidationError("integration tolerances must be positive");
    if (!(min_step > 0.0) || !(min_step < max_step))
      throw ValidationError("need 0 < min_step < max_step");
    if (!(event_tol > 0.0)) throw ValidationError("event_tol must be positive");
    if (!(blowup_norm > 0.0)) throw ValidationError("blowup_norm must be positive");
    if (fixed_step < 0.0) throw ValidationError("fixed_step must be non-negative");
  }

  /// Tolerances divided by `factor`.
  IntegrationControls tightened(double factor) const {
    IntegrationControls c = *this;
    c.rel_tol /= factor;
    c.abs_tol /= factor;
    c.event_tol /= factor;
    return c;
  }
};

template <std::size_t Dim>
struct Sample {
  double t = 0.0;
  State<Dim> y{};
  int branch = 0;
};

template <std::size_t Dim>
struct EventHit {
  double t = 0.0;
  State<Dim> y{};
  std::string label;
  bool rising = false;  // the function increased through zero along increasing t
};

enum class Termination { HorizonReached, EventStop, BlowUp, StepCollapse };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::HorizonReached: return "HorizonReached";
    case Termination::EventStop: return "EventStop";
    case Termination::BlowUp: return "BlowUp";
    case Termination::StepCollapse: return "StepCollapse";
  }
  return "?";
}

template <std::size_t Dim>
struct Trajectory {
  std::vector<Sample<Dim>> samples;  // accepted step end points
  std::vector<EventHit<Dim>> events;
  std::vector<Sample<Dim>> outputs;  // dense output at requested times
  Termination termination = Termination::HorizonReached;
  double termination_time = 0.0;
  std::string detail;

  const Sample<Dim>& last() const { return samples.back(); }

  std::vector<EventHit<Dim>> hits(const std::string& label) const {
    std::vector<EventHit<Dim>> out;
    for (const auto& e : events)
      if (e.label == label) out.push_back(e);
    return out;
  }
};

/// Root of `f` in the bracket [a, b] (either order) to within `tol`.
/// Illinois steps with a bisection fallback whenever the bracket stalls.
template <class F>
double refine_event(double a, double b, F&& f, double tol, int max_iter = 400) {
  if (!(tol > 0.0)) throw ValidationError("refine_event: tol must be positive");
  double fa = f(a);
  double fb = f(b);
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if ((fa > 0.0) == (fb > 0.0)) throw NumericalError("refine_event: no sign change in bracket");
  int side = 0;
  double width = std::abs(b - a);
  for (int it = 0; it < max_iter && std::abs(b - a) > tol; ++it) {
    double c = (fa * b - fb * a) / (fa - fb);
    const double lo = std::min(a, b), hi = std::max(a, b);
    const bool stalled = (it % 3 == 2) && std::abs(b - a) > 0.5 * width;
    if (stalled || !(c > lo && c < hi)) c = 0.5 * (a + b);
    if (it % 3 == 2) width = std::abs(b - a);
    if (c == a || c == b) break;
    const double fc = f(c);
    if (fc == 0.0) return c;
    if ((fc > 0.0) == (fb > 0.0)) {
      b = c;
      fb = fc;
      if (side == -1) fa *= 0.5;
      side = -1;
    } else {
      a = c;
      fa = fc;
      if (side == 1) fb *= 0.5;
      side = 1;
    }
  }
  return 0.5 * (a + b);
}

namespace detail {

// Dormand-Prince 5(4) tableau.
inline constexpr double kC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
inline constexpr double kA[7][6] = {
    {0, 0, 0, 0, 0, 0},
    {1.0 / 5, 0, 0, 0, 0, 0},
    {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
    {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
    {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
inline constexpr double kE[7] = {71.0 / 57600,  0.0,          -71.0 / 16695, 71.0 / 1920,
                                 -17253.0 / 339200, 22.0 / 525, -1.0 / 40};
// Quartic continuous extension (coefficients of theta, theta^2, theta^3, theta^4).
inline constexpr double kP[7][4] = {
    {1.0, -8048581381.0 / 2820520608, 8663915743.0 / 2820520608, -12715105075.0 / 11282082432},
    {0, 0, 0, 0},
    {0, 131558114200.0 / 32700410799, -68118460800.0 / 10900136933, 87487479700.0 / 32700410799},
    {0, -1754552775.0 / 470086768, 14199869525.0 / 1410260304, -10690763975.0 / 1880347072},
    {0, 127303824393.0 / 49829197408, -318862633887.0 / 49829197408,
     701980252875.0 / 199316789632},
    {0, -282668133.0 / 205662961, 2019193451.0 / 616988883, -1453857185.0 / 822651844},
    {0, 40617522.0 / 29380423, -110615467.0 / 29380423, 69997945.0 / 29380423}};

template <std::size_t Dim>
struct Step {
  double t0 = 0.0;
  double h = 0.0;  // signed
  State<Dim> y0{};
  State<Dim> y1{};
  std::array<State<Dim>, 7> k{};
  double error = 0.0;

  State<Dim> dense(double t) const {
    const double theta = (t - t0) / h;
    double w[4] = {theta, theta * theta, theta * theta * theta, theta * theta * theta * theta};
    State<Dim> y = y0;
    for (std::size_t s = 0; s < 7; ++s) {
      const double b = kP[s][0] * w[0] + kP[s][1] * w[1] + kP[s][2] * w[2] + kP[s][3] * w[3];
      if (b == 0.0) continue;
      for (std::size_t i = 0; i < Dim; ++i) y[i] += h * b * k[s][i];
    }
    return y;
  }
};

template <std::size_t Dim>
bool finite(const State<Dim>& y) {
  for (double v : y)
    if (!std::isfinite(v)) return false;
  return true;
}

template <std::size_t Dim>
double max_norm(const State<Dim>& y) {
  double m = 0.0;
  for (double v : y) m = std::max(m, std::abs(v));
  return m;
}

template <std::size_t Dim>
Step<Dim> dp_step(const Rhs<Dim>& rhs, double t, const State<Dim>& y, const State<Dim>& k1,
                  double h, const IntegrationControls& c) {
  Step<Dim> st;
  st.t0 = t;
  st.h = h;
  st.y0 = y;
  st.k[0] = k1;
  for (std::size_t s = 1; s < 7; ++s) {
    State<Dim> ys = y;
    for (std::size_t j = 0; j < s; ++j) {
      if (kA[s][j] == 0.0) continue;
      for (std::size_t i = 0; i < Dim; ++i) ys[i] += h * kA[s][j] * st.k[j][i];
    }
    if (s == 6) st.y1 = ys;
    st.k[s] = rhs(t + kC[s] * h, ys);
  }
  double err = 0.0;
  for (std::size_t i = 0; i < Dim; ++i) {
    double e = 0.0;
    for (std::size_t s = 0; s < 7; ++s) e += kE[s] * st.k[s][i];
    e *= h;
    const double sc = c.abs_tol + c.rel_tol * std::max(std::abs(y[i]), std::abs(st.y1[i]));
    err = std::max(err, std::abs(e) / sc);
  }
  st.error = (finite(st.y1) && finite(st.k[6])) ? err : std::numeric_limits<double>::infinity();
  return st;
}

template <std::size_t Dim>
double initial_step(const Rhs<Dim>& rhs, double t, const State<Dim>& y, const State<Dim>& f0,
                    double dir, const IntegrationControls& c) {
  double d0 = 0.0, d1 = 0.0;
  for (std::size_t i = 0; i < Dim; ++i) {
    const double sc = c.abs_tol + c.rel_tol * std::abs(y[i]);
    d0 = std::max(d0, std::abs(y[i]) / sc);
    d1 = std::max(d1, std::abs(f0[i]) / sc);
  }
  const double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  State<Dim> y1 = y;
  for (std::size_t i = 0; i < Dim; ++i) y1[i] += dir * h0 * f0[i];
  const State<Dim> f1 = rhs(t + dir * h0, y1);
  double d2 = 0.0;
  for (std::size_t i = 0; i < Dim; ++i) {
    const double sc = c.abs_tol + c.rel_tol * std::abs(y[i]);
    d2 = std::max(d2, std::abs(f1[i] - f0[i]) / sc / h0);
  }
  if (!std::isfinite(d2)) return h0;
  const double dm = std::max(d1, d2);
  const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
  return std::min(100.0 * h0, h1);
}

inline int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

}  // namespace detail

/// Integrates `field` from (t0, init) to t1 (t1 < t0 integrates backward).
/// `output_times` must be monotone in the integration direction; the dense
/// interpolant is sampled there into Trajectory::outputs.
template <std::size_t Dim>
Trajectory<Dim> integrate(const PiecewiseField<Dim>& field, const State<Dim>& init, double t0,
                          double t1, const std::vector<Event<Dim>>& events,
                          const IntegrationControls& controls,
                          std::span<const double> output_times = {}) {
  using detail::sign_of;
  controls.validate();
  if (!(t1 != t0) || !std::isfinite(t0) || !std::isfinite(t1))
    throw ValidationError("integrate: degenerate time span");
  if (!detail::finite(init)) throw ValidationError("integrate: non-finite initial state");
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double t_end = t0 + dir * std::min(std::abs(t1 - t0), controls.max_time);

  int branch = field.branch_selector(t0, init);
  if (branch < 0 || branch >= static_cast<int>(field.branches.size()))
    throw ValidationError("integrate: no branch of the field is defined at the initial state");

  Trajectory<Dim> traj;
  double t = t0;
  State<Dim> y = init;
  State<Dim> k1 = field.branches[branch](t, y);
  traj.samples.push_back({t, y, branch});
  const double norm0 = std::max(1.0, detail::max_norm(init));

  const std::size_t n_sw = field.switching.size();
  const std::size_t n_ev = events.size();
  // Last nonzero sign of each monitored function (switching first, then events).
  std::vector<int> last_sign(n_sw + n_ev, 0);
  auto monitored = [&](std::size_t idx, double tt, const State<Dim>& yy) {
    return idx < n_sw ? field.switching[idx].fn(tt, yy) : events[idx - n_sw].fn(tt, yy);
  };
  for (std::size_t m = 0; m < n_sw + n_ev; ++m) last_sign[m] = sign_of(monitored(m, t, y));

  std::size_t out_idx = 0;
  auto emit_outputs = [&](const detail::Step<Dim>& st, double t_hi, int br) {
    while (out_idx < output_times.size()) {
      const double to = output_times[out_idx];
      if (dir * (to - st.t0) < 0.0) {  // before the step: only possible for t0 itself
        ++out_idx;
        continue;
      }
      if (dir * (to - t_hi) > 0.0) break;
      traj.outputs.push_back({to, st.dense(to), br});
      ++out_idx;
    }
  };
  while (out_idx < output_times.size() && output_times[out_idx] == t0) {
    traj.outputs.push_back({t0, y, branch});
    ++out_idx;
  }

  const bool fixed = controls.fixed_step > 0.0;
  double h = fixed ? controls.fixed_step
                   : detail::initial_step(field.branches[branch], t, y, k1, dir, controls);
  h = std::min(h, controls.max_step);
  double err_prev = 1e-4;
  bool rejected_last = false;
  std::size_t steps = 0;

  auto finish = [&](Termination kind, double when, std::string detail) {
    traj.termination = kind;
    traj.termination_time = when;
    traj.detail = std::move(detail);
    return traj;
  };

  while (true) {
    const double remaining = dir * (t_end - t);
    if (remaining <= 0.0 || remaining <= 1e-15 * std::max(1.0, std::abs(t)))
      return finish(Termination::HorizonReached, t, "");
    if (++steps > controls.max_steps)
      return finish(Termination::StepCollapse, t, "step budget exhausted");

    const bool last_step = h >= remaining;
    const double h_try = last_step ? remaining : h;
    const Rhs<Dim>& rhs = field.branches[branch];
    detail::Step<Dim> st = detail::dp_step(rhs, t, y, k1, dir * h_try, controls);

    if (!fixed && st.error > 1.0) {
      const double fac = std::isfinite(st.error) ? std::max(0.2, 0.9 * std::pow(st.error, -0.2)) : 0.2;
      h = h_try * fac;
      rejected_last = true;
      if (h < controls.min_step) {
        if (detail::max_norm(y) >= 1e3 * norm0)
          return finish(Termination::BlowUp, t, "step size collapsed while the state grew");
        return finish(Termination::StepCollapse, t, "step size fell below min_step");
      }
      continue;
    }
    if (fixed && !detail::finite(st.y1))
      return finish(Termination::BlowUp, t, "non-finite state");

    // Earliest sign change of a monitored function inside the step.
    const double t_new = last_step ? t_end : t + dir * h_try;
    double t_cross = t_new;
    bool crossing = false;
    std::vector<std::pair<std::size_t, double>> roots;
    std::vector<int> end_sign(n_sw + n_ev, 0);
    for (std::size_t m = 0; m < n_sw + n_ev; ++m) {
      const double v = monitored(m, t_new, st.y1);
      end_sign[m] = sign_of(v);
      if (end_sign[m] == 0 || last_sign[m] == 0 || end_sign[m] == last_sign[m]) continue;
      auto g = [&](double tau) { return monitored(m, tau, st.dense(tau)); };
      if (sign_of(g(t)) == end_sign[m]) {
        // Sign already flipped at the step start (root within the previous cut); no bracket.
        last_sign[m] = end_sign[m];
        continue;
      }
      const double root = refine_event(t, t_new, g, controls.event_tol);
      roots.emplace_back(m, root);
      if (!crossing || dir * (root - t_cross) < 0.0) t_cross = root;
      crossing = true;
    }

    bool stop = false;
    std::string stop_label;
    if (crossing) {
      detail::Step<Dim> cut = st;
      State<Dim> y_cross = st.y1;
      if (dir * (t_new - t_cross) > 0.0) {
        if (std::abs(t_cross - t) > 0.0) {
          cut = detail::dp_step(rhs, t, y, k1, t_cross - t, controls);
          y_cross = cut.y1;
        } else {
          y_cross = y;
        }
      }
      int new_branch = branch;
      for (const auto& [m, root] : roots) {
        if (std::abs(root - t_cross) > controls.event_tol) continue;
        const bool rising = (end_sign[m] - last_sign[m]) * dir > 0;
        last_sign[m] = end_sign[m];
        if (m < n_sw) {
          traj.events.push_back({t_cross, y_cross, field.switching[m].label, rising});
          new_branch = field.branch_selector(t_new, st.y1);
        } else {
          const Event<Dim>& ev = events[m - n_sw];
          const bool wanted = ev.direction == Crossing::Any ||
                              (ev.direction == Crossing::Rising) == rising;
          if (!wanted) continue;
          traj.events.push_back({t_cross, y_cross, ev.label, rising});
          if (ev.terminal) {
            stop = true;
            stop_label = ev.label;
          }
        }
      }
      if (new_branch < 0 || new_branch >= static_cast<int>(field.branches.size()))
        return finish(Termination::StepCollapse, t_cross, "left the domain of the field");
      emit_outputs(cut, t_cross, branch);
      t = t_cross;
      y = y_cross;
      branch = new_branch;
      k1 = field.branches[branch](t, y);
      traj.samples.push_back({t, y, branch});
    } else {
      for (std::size_t m = 0; m < n_sw + n_ev; ++m)
        if (end_sign[m] != 0) last_sign[m] = end_sign[m];
      emit_outputs(st, t_new, branch);
      t = t_new;
      y = st.y1;
      k1 = st.k[6];
      traj.samples.push_back({t, y, branch});
    }

    if (detail::max_norm(y) > controls.blowup_norm)
      return finish(Termination::BlowUp, t, "state norm exceeded blowup_norm");
    if (stop) return finish(Termination::EventStop, t, stop_label);

    if (!fixed) {
      const double err = std::max(st.error, 1e-10);
      double fac = 0.9 * std::pow(err, -0.7 / 5.0) * std::pow(err_prev, 0.4 / 5.0);
      fac = std::clamp(fac, 0.2, rejected_last ? 1.0 : 5.0);
      if (!crossing) h = h_try * fac;
      h = std::min(h, controls.max_step);
      err_prev = err;
      rejected_last = false;
    }
  }
}

}  // namespace pucci::ode
