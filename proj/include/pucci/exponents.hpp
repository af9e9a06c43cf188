#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pucci/params.hpp"
#include "pucci/phase.hpp"

namespace pucci::exponents {

/// Worker count: hardware concurrency, capped by PUCCI_LAB_THREADS when set.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PUCCI_LAB_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on the worker pool; results must be written to per-index slots.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

enum class DecayClass { Fast, Slow, PseudoSlow };

inline const char* to_string(DecayClass d) {
  switch (d) {
    case DecayClass::Fast: return "Fast";
    case DecayClass::Slow: return "Slow";
    case DecayClass::PseudoSlow: return "PseudoSlow";
  }
  return "?";
}

/// Decay class of an entire solution from the omega-limit of its orbit.
inline DecayClass classify_decay(const phase::Orbit& orbit, const ProblemParams& pp,
                                 const phase::OrbitOptions& o = {}) {
  if (orbit.fate.kind == phase::FateKind::BallBlowUp)
    throw ValidationError("classify_decay: orbit blows up (ball solution, not entire)");
  if (orbit.trajectory.samples.empty()) throw ValidationError("classify_decay: empty orbit");
  const phase::System s = phase::System::from(pp);
  const auto& last = orbit.trajectory.last().y;
  if (phase::detail::dist(s.a0(), last[0], last[1]) < o.a0_capture) return DecayClass::Fast;
  const auto rs = phase::poincare_section(orbit, phase::Section::M0Ray, o);
  if (rs.verdict == phase::ReturnVerdict::Stabilized) return DecayClass::PseudoSlow;
  if (s.has_m0() && (phase::detail::dist(s.m0(), last[0], last[1]) < 1e-3 ||
                     rs.verdict == phase::ReturnVerdict::Contracting))
    return DecayClass::Slow;
  throw ValidationError("classify_decay: orbit has no settled omega-limit");
}

struct FateSample {
  double p = 0.0;
  phase::OrbitFate fate;
  std::vector<double> amplitudes;  // alpha - X at successive M0-ray hits
  double terminal_X = 0.0;
  double terminal_Z = 0.0;
  bool retried = false;
};

struct EstimatorOptions {
  phase::OrbitOptions orbit;
  std::size_t sweep_samples = 32;
  std::size_t cycle_sweep_samples = 128;  // cycles can live on a narrow p-interval
  double backward_horizon = 400.0;
  double dulac_threshold = 1e-3;
};

inline FateSample sample_from_orbit(double p, const phase::Orbit& orbit) {
  FateSample fs;
  fs.p = p;
  fs.fate = orbit.fate;
  const double alpha = derive(orbit.params).alpha;
  for (const auto& h : orbit.trajectory.events)
    if (h.label == phase::kRayLabel) fs.amplitudes.push_back(alpha - h.y[0]);
  fs.terminal_X = orbit.trajectory.last().y[0];
  fs.terminal_Z = orbit.trajectory.last().y[1];
  return fs;
}

/// Fate of Gamma_p; an Undetermined result is retried once with 10x tighter tolerances and twice the horizon.
inline FateSample fate_at(const ProblemParams& base, double p, const phase::OrbitOptions& o) {
  const ProblemParams pp = base.with_p(p);
  FateSample fs = sample_from_orbit(p, phase::regular_orbit(pp, o));
  if (fs.fate.kind == phase::FateKind::Undetermined) {
    phase::OrbitOptions retry = o.tightened(10.0);
    retry.horizon = 2.0 * o.horizon;
    fs = sample_from_orbit(p, phase::regular_orbit(pp, retry));
    fs.retried = true;
  }
  return fs;
}

inline std::vector<FateSample> sweep_fates(const ProblemParams& base, const std::vector<double>& ps,
                                           const phase::OrbitOptions& o = {}) {
  std::vector<FateSample> out(ps.size());
  parallel_for(ps.size(), [&](std::size_t i) { out[i] = fate_at(base, ps[i], o); });
  return out;
}

struct Bracket {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  double mid() const { return 0.5 * (lo + hi); }
};

/// Periodic-orbit detectors at one exponent.
struct CycleSample {
  double p = 0.0;
  phase::FateKind gamma_fate = phase::FateKind::Undetermined;
  phase::AlphaLimit alpha_limit = phase::AlphaLimit::Undetermined;
  bool gamma_detects = false;     // Gamma_p pseudo-slow
  bool backward_detects = false;  // A0 manifold has a periodic alpha-limit
  std::optional<double> amplitude;
  std::optional<double> dulac_ratio;
  bool dulac_rejected = false;
  bool disagreement = false;
  bool detected() const { return (gamma_detects || backward_detects) && !dulac_rejected; }
};

struct BoundsCheck {
  bool lower_below_p_star = false;
  bool p_star_le_p_tilde = false;
  bool tilde_within_plus_form = false;
  bool tilde_within_minus_form = false;
};

struct ExponentEstimate {
  std::optional<Bracket> p_star;
  std::optional<Bracket> p_tilde;
  double tolerance = 0.0;
  BoundsReport bounds;
  BoundsCheck consistent;
  std::vector<FateSample> sweep;
  std::vector<CycleSample> cycle_sweep;
  std::optional<FateSample> p_star_low_end;
  std::optional<FateSample> p_star_high_end;
};

/// Sweep whose blow-up/entire pattern has more than one alternation.
class NonMonotoneSweep : public NumericalError {
 public:
  NonMonotoneSweep(const std::string& msg, std::vector<FateSample> sweep)
      : NumericalError(msg), sweep_(std::move(sweep)) {}
  const std::vector<FateSample>& sweep() const { return sweep_; }

 private:
  std::vector<FateSample> sweep_;
};

/// Detectors that contradict each other at one p.
class DetectorDisagreement : public NumericalError {
 public:
  DetectorDisagreement(const std::string& msg, CycleSample sample)
      : NumericalError(msg), sample_(std::move(sample)) {}
  const CycleSample& sample() const { return sample_; }

 private:
  CycleSample sample_;
};

inline std::pair<double, double> default_window(const ProblemParams& pp) {
  const BoundsReport b = exponent_bounds(pp);
  return {b.lower, b.upper_minus_form};
}

/// n equispaced exponents covering [lo, hi], both ends included.
inline std::vector<double> sweep_grid(double lo, double hi, std::size_t n) {
  if (n < 2) throw ValidationError("sweep needs at least 2 samples");
  std::vector<double> ps(n);
  for (std::size_t i = 0; i < n; ++i) ps[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return ps;
}

namespace detail {

inline void check_window(const ProblemParams& pp, double tol, std::pair<double, double> w) {
  require_planar_minus(pp, "exponent estimation");
  if (!(tol > 0.0)) throw ValidationError("tolerance must be positive");
  if (!(w.second > w.first) || !(w.first > 1.0)) throw ValidationError("invalid exponent window");
}

inline std::string describe(const std::vector<FateSample>& sweep) {
  std::string s;
  for (const auto& f : sweep) s += " " + std::to_string(f.p) + ":" + phase::to_string(f.fate.kind);
  return s;
}

}  // namespace detail

/// Bracket [lo, hi] of the critical exponent: Gamma_lo blows up, Gamma_hi is entire.
inline ExponentEstimate estimate_p_star(const ProblemParams& pp, double tol,
                                        std::optional<std::pair<double, double>> window = std::nullopt,
                                        const EstimatorOptions& opt = {}) {
  const auto w = window.value_or(default_window(pp));
  detail::check_window(pp, tol, w);
  ExponentEstimate est;
  est.tolerance = tol;
  est.bounds = exponent_bounds(pp);
  est.sweep = sweep_fates(pp, sweep_grid(w.first, w.second, opt.sweep_samples), opt.orbit);

  int transitions = 0;
  std::optional<std::size_t> last_blowup, first_entire;
  std::optional<bool> prev;
  for (std::size_t i = 0; i < est.sweep.size(); ++i) {
    const auto& f = est.sweep[i].fate;
    if (f.kind == phase::FateKind::Undetermined) continue;
    const bool entire = f.entire();
    if (prev && *prev != entire) ++transitions;
    prev = entire;
    if (!entire) last_blowup = i;
    if (entire && !first_entire) first_entire = i;
  }
  if (transitions != 1 || !last_blowup || !first_entire || *last_blowup > *first_entire)
    throw NonMonotoneSweep("estimate_p_star: sweep does not show a single blow-up to entire transition:" +
                               detail::describe(est.sweep),
                           est.sweep);

  FateSample lo = est.sweep[*last_blowup];
  FateSample hi = est.sweep[*first_entire];
  while (hi.p - lo.p > tol) {
    const double mid = 0.5 * (lo.p + hi.p);
    FateSample m = fate_at(pp, mid, opt.orbit);
    if (m.fate.kind == phase::FateKind::Undetermined)
      throw NumericalError("estimate_p_star: undetermined fate at p = " + std::to_string(mid) + " (" +
                           m.fate.reason + ")");
    (m.fate.entire() ? hi : lo) = std::move(m);
  }
  est.p_star = Bracket{lo.p, hi.p};
  est.p_star_low_end = lo;
  est.p_star_high_end = hi;
  return est;
}

/// Runs both periodic-orbit detectors at p and validates any detected cycle with the Dulac identity.
inline CycleSample detect_cycle(const ProblemParams& base, double p, const EstimatorOptions& opt) {
  const ProblemParams pp = base.with_p(p);
  const phase::System s = phase::System::from(pp);
  CycleSample cs;
  cs.p = p;
  auto run = [&](const phase::OrbitOptions& o, double back_horizon) {
    const phase::Orbit gamma = phase::regular_orbit(pp, o);
    cs.gamma_fate = gamma.fate.kind;
    cs.gamma_detects = gamma.fate.kind == phase::FateKind::PseudoSlow;
    if (cs.gamma_detects) cs.amplitude = gamma.fate.amplitude;
    phase::OrbitOptions bo = o;
    bo.horizon = back_horizon;
    // A0 is a saddle only above N~-/(N~- - 2); below that the stable manifold is not traced.
    if (p * s.gap > s.n_minus) {
      const phase::Orbit tau = phase::backward_orbit_from_A0(pp, bo);
      cs.alpha_limit = tau.alpha.kind;
      cs.backward_detects = tau.alpha.kind == phase::AlphaLimit::Periodic;
      if (cs.backward_detects && !cs.amplitude) cs.amplitude = tau.alpha.amplitude;
    }
    const bool gamma_blows = cs.gamma_fate == phase::FateKind::BallBlowUp;
    const bool tau_escapes = cs.alpha_limit == phase::AlphaLimit::BackwardBlowUp;
    cs.disagreement = (gamma_blows && tau_escapes) ||
                      (cs.gamma_fate == phase::FateKind::SlowDecay && cs.backward_detects);
  };
  run(opt.orbit, opt.backward_horizon);
  if (cs.disagreement) {
    phase::OrbitOptions tight = opt.orbit.tightened(10.0);
    tight.horizon = 2.0 * opt.orbit.horizon;
    run(tight, 2.0 * opt.backward_horizon);
    if (cs.disagreement)
      throw DetectorDisagreement("estimate_p_tilde: detectors disagree at p = " + std::to_string(p) +
                                     " (Gamma_p " + phase::to_string(cs.gamma_fate) + ", A0 alpha-limit " +
                                     phase::to_string(cs.alpha_limit) + ")",
                                 cs);
  }
  if ((cs.gamma_detects || cs.backward_detects) && cs.amplitude) {
    const auto cycle = phase::trace_cycle(pp, s.alpha - *cs.amplitude, 4000, opt.orbit.integration);
    cs.dulac_ratio = phase::dulac_integral(pp, cycle, 1e-5).relative();
    cs.dulac_rejected = !(*cs.dulac_ratio < opt.dulac_threshold);
  }
  return cs;
}

/// Bracket of the exponent above which no sampled p shows a periodic orbit.
inline ExponentEstimate estimate_p_tilde(const ProblemParams& pp, double tol,
                                         std::optional<std::pair<double, double>> window = std::nullopt,
                                         const EstimatorOptions& opt = {}) {
  const auto w = window.value_or(default_window(pp));
  detail::check_window(pp, tol, w);
  ExponentEstimate est;
  est.tolerance = tol;
  est.bounds = exponent_bounds(pp);
  const auto ps = sweep_grid(w.first, w.second, opt.cycle_sweep_samples);
  est.cycle_sweep.resize(ps.size());
  parallel_for(ps.size(), [&](std::size_t i) { est.cycle_sweep[i] = detect_cycle(pp, ps[i], opt); });

  std::optional<std::size_t> last_fire;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (est.cycle_sweep[i].detected()) last_fire = i;
  if (!last_fire) {
    // Nothing fires anywhere: the infimum is at or below the window's left end.
    est.p_tilde = Bracket{w.first, w.first};
    return est;
  }
  if (*last_fire + 1 == ps.size()) {
    est.p_tilde = Bracket{ps.back(), std::numeric_limits<double>::infinity()};
    return est;
  }
  double lo = ps[*last_fire], hi = ps[*last_fire + 1];
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    const CycleSample cs = detect_cycle(pp, mid, opt);
    est.cycle_sweep.push_back(cs);
    (cs.detected() ? lo : hi) = mid;
  }
  est.p_tilde = Bracket{lo, hi};
  return est;
}

inline BoundsCheck verify_bounds(const ExponentEstimate& est) {
  BoundsCheck c;
  if (est.p_star) c.lower_below_p_star = est.bounds.lower < est.p_star->lo;
  if (est.p_star && est.p_tilde) c.p_star_le_p_tilde = est.p_star->hi <= est.p_tilde->hi + est.tolerance;
  if (est.p_tilde) {
    c.tilde_within_plus_form = est.p_tilde->hi <= est.bounds.upper_plus_form;
    c.tilde_within_minus_form = est.p_tilde->hi <= est.bounds.upper_minus_form;
  }
  return c;
}

/// Both estimates plus the bound checks.
inline ExponentEstimate estimate_exponents(const ProblemParams& pp, double tol,
                                           std::optional<std::pair<double, double>> window = std::nullopt,
                                           const EstimatorOptions& opt = {}) {
  ExponentEstimate est = estimate_p_star(pp, tol, window, opt);
  const ExponentEstimate tilde = estimate_p_tilde(pp, tol, window, opt);
  est.p_tilde = tilde.p_tilde;
  est.cycle_sweep = tilde.cycle_sweep;
  est.consistent = verify_bounds(est);
  return est;
}

}  // namespace pucci::exponents
