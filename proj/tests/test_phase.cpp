#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "pucci/phase.hpp"

using namespace pucci;
using namespace pucci::phase;

namespace {

ProblemParams minus(double p, double lambda = 1.0, double Lambda = 2.0) {
  ProblemParams pp;
  pp.op = Operator::Minus;
  pp.lambda = lambda;
  pp.Lambda = Lambda;
  pp.p = p;
  return pp;
}

const StationaryPointInfo& find(const std::vector<StationaryPointInfo>& pts, PointName n) {
  for (const auto& s : pts)
    if (s.name == n) return s;
  throw std::runtime_error("missing point");
}

// Independent oracle for a disc: polar Gauss-Legendre quadrature with every ray split at Z = Lambda.
std::pair<double, double> disc_integral(const System& s, Vec2 c, double R, int n_theta) {
  const double node[5] = {0.0, -0.5384693101056831, 0.5384693101056831, -0.9061798459386640, 0.9061798459386640};
  const double weight[5] = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665, 0.2369268850561891,
                            0.2369268850561891};
  double up = 0.0, down = 0.0;
  auto radial = [&](double th, double a, double b, int pieces) {
    double sum = 0.0;
    for (int k = 0; k < pieces; ++k) {
      const double lo = a + (b - a) * k / pieces, hi = a + (b - a) * (k + 1) / pieces;
      for (int q = 0; q < 5; ++q) {
        const double rho = 0.5 * (lo + hi) + 0.5 * (hi - lo) * node[q];
        sum += 0.5 * (hi - lo) * weight[q] * rho *
               dulac_density(s, c[0] + rho * std::cos(th), c[1] + rho * std::sin(th));
      }
    }
    return sum;
  };
  const double h = 2.0 * std::numbers::pi / n_theta;
  for (int i = 0; i < n_theta; ++i) {
    const double th = (i + 0.5) * h;  // midpoint in angle: spectrally accurate for periodic integrands
    const double sn = std::sin(th);
    double cut = sn != 0.0 ? (s.Lambda - c[1]) / sn : -1.0;
    if (!(cut > 0.0 && cut < R)) cut = R;
    const double inner = radial(th, 0.0, cut, 8);
    const double outer = cut < R ? radial(th, cut, R, 8) : 0.0;
    const bool center_up = c[1] > s.Lambda;
    (center_up ? up : down) += h * inner;
    (center_up ? down : up) += h * outer;
  }
  return {up, down};
}

std::vector<Vec2> circle(Vec2 c, double r, int n) {
  std::vector<Vec2> poly;
  for (int i = 0; i <= n; ++i) {
    const double th = 2.0 * std::numbers::pi * i / n;
    poly.push_back({c[0] + r * std::cos(th), c[1] + r * std::sin(th)});
  }
  poly.back() = poly.front();
  return poly;
}

std::vector<Vec2> xz(const std::vector<PhasePoint>& pts) {
  std::vector<Vec2> out;
  for (const auto& q : pts) out.push_back({q.X, q.Z});
  return out;
}

}  // namespace

TEST(Field, Examples) {
  const auto pp = minus(5);
  const Vec2 f = field(pp, 0.2, 3.0);
  EXPECT_NEAR(f[0], 0.34, 1e-15);
  EXPECT_NEAR(f[1], -1.5, 1e-15);
  const Vec2 at_m0 = field(pp, 0.5, 0.5);
  EXPECT_EQ(at_m0[0], 0.0);
  EXPECT_EQ(at_m0[1], 0.0);
  // l1: Z = lambda (N~- - 2 - X) in R- is where X' = 0.
  for (double X : {0.1, 0.3, 0.7}) EXPECT_NEAR(field(pp, X, 1.0 - X)[0], 0.0, 1e-15);
  EXPECT_THROW(field(minus(5, 1, 1), 0.1, 0.1), ValidationError);
  ProblemParams plus = minus(5);
  plus.op = Operator::Plus;
  EXPECT_THROW(field(plus, 0.1, 0.1), ValidationError);
}

TEST(Field, BranchesAgreeOnConcavityLine) {
  for (double p : {2.0, 5.0, 13.0})
    for (double Lambda : {1.5, 2.0, 4.0}) EXPECT_LT(branch_continuity_defect(System::from(minus(p, 1.0, Lambda))), 1e-14);
}

TEST(Field, VectorFieldPointsInwardOnBoxEdges) {
  const System s = System::from(minus(5));
  for (int i = 1; i <= 50; ++i) {
    const double X = 0.05 * i;
    EXPECT_LT(s(X, 2.0 * s.Lambda)[1], 0.0);  // L1: Z = 2 Lambda
    const double Z = 0.08 * i;
    EXPECT_GT(s(s.gap, Z)[0], 0.0);  // L2: X = N~- - 2
  }
}

TEST(Jacobian, MatchesCentralDifferences) {
  const System s = System::from(minus(5.7, 1.0, 3.0));
  std::mt19937 gen(7);
  std::uniform_real_distribution<double> ux(0.05, 3.0), uz(0.05, 6.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double X = ux(gen), Z = uz(gen);
    for (int br : {kPlusRegion, kMinusRegion}) {
      const Mat2 J = s.jacobian(br, X, Z);
      const double h = 1e-6;
      for (int c = 0; c < 2; ++c) {
        const double dx = c == 0 ? h : 0.0, dz = c == 1 ? h : 0.0;
        const Vec2 a = s.branch_field(br, X + dx, Z + dz), b = s.branch_field(br, X - dx, Z - dz);
        for (int r = 0; r < 2; ++r) {
          const double fd = (a[r] - b[r]) / (2 * h);
          EXPECT_LE(std::abs(fd - J[r][c]), 1e-6 * std::max(1.0, std::abs(J[r][c])));
        }
      }
    }
  }
}

TEST(Dulac, DensityIsWeightedDivergence) {
  std::mt19937 gen(11);
  std::uniform_real_distribution<double> ux(0.1, 2.0), uz(0.1, 5.0);
  for (double p : {3.5, 5.0, 9.0}) {
    const System s = System::from(minus(p));
    auto phi_f = [&](double X, double Z) {
      const double w = std::pow(X, s.alpha) * std::pow(Z, s.beta);
      const Vec2 f = s(X, Z);
      return Vec2{w * f[0], w * f[1]};
    };
    for (int trial = 0; trial < 100; ++trial) {
      const double X = ux(gen), Z = uz(gen);
      if (std::abs(Z - s.Lambda) < 1e-3) continue;
      const double h = 1e-5;
      const double div = (phi_f(X + h, Z)[0] - phi_f(X - h, Z)[0]) / (2 * h) +
                         (phi_f(X, Z + h)[1] - phi_f(X, Z - h)[1]) / (2 * h);
      EXPECT_NEAR(div, dulac_density(s, X, Z), 1e-6 * std::max(1.0, std::abs(div)));
    }
  }
}

TEST(StationaryPoints, ClosedFormsAndKinds) {
  const auto at5 = stationary_points(minus(5));
  const auto& m0 = find(at5, PointName::M0);
  EXPECT_DOUBLE_EQ(m0.coords.X, 0.5);
  EXPECT_DOUBLE_EQ(m0.coords.Z, 0.5);
  EXPECT_EQ(m0.kind, PointKind::Center);
  EXPECT_LT(std::abs(m0.eigenvalues[0].real()), 1e-9);
  EXPECT_EQ(find(stationary_points(minus(6)), PointName::M0).kind, PointKind::Sink);
  EXPECT_EQ(find(stationary_points(minus(4.9)), PointName::M0).kind, PointKind::Source);
  EXPECT_EQ(find(stationary_points(minus(5.1)), PointName::M0).kind, PointKind::Sink);
  for (double p : {3.5, 4.9, 5.0, 5.1, 8.0, 20.0}) {
    const auto pts = stationary_points(minus(p));
    const auto& n0 = find(pts, PointName::N0);
    const auto& a0 = find(pts, PointName::A0);
    EXPECT_EQ(n0.kind, PointKind::Saddle);
    EXPECT_EQ(a0.kind, PointKind::Saddle);
    EXPECT_EQ(find(pts, PointName::O).kind, PointKind::Saddle);
    EXPECT_DOUBLE_EQ(n0.coords.Z, 4.0);
    EXPECT_DOUBLE_EQ(a0.coords.X, 1.0);
    EXPECT_NEAR(n0.eigenvalues[0].real(), 2.0, 1e-14);
    EXPECT_NEAR(n0.eigenvalues[1].real(), -2.0, 1e-14);
    EXPECT_NEAR(a0.eigenvalues[1].real(), 3.0 - p, 1e-12);  // N~- - p (N~- - 2)
    const auto& m = find(pts, PointName::M0);
    EXPECT_NEAR(m.coords.X, 2.0 / (p - 1.0), 1e-15);
    EXPECT_NEAR(m.coords.Z, 1.0 - 2.0 / (p - 1.0), 1e-15);
  }
  // M0 leaves the quadrant at p = N~-/(N~- - 2) = 3.
  for (const auto& s : stationary_points(minus(2.5))) EXPECT_NE(s.name, PointName::M0);
}

TEST(StationaryPoints, ManifoldDirections) {
  for (double p : {4.0, 7.0}) {
    const System s = System::from(minus(p));
    const Vec2 v = n0_unstable_direction(s);
    EXPECT_GT(v[0], 0.0);
    EXPECT_NEAR(v[1] / v[0], -p * s.Lambda / 2.0, 1e-12);
    const Vec2 w = a0_stable_direction(s);
    EXPECT_GT(w[1], 0.0);
    EXPECT_NEAR(w[0] / w[1], -(s.gap / s.lambda) / (p * s.gap - 2.0), 1e-12);
  }
}

TEST(RegularOrbit, BlowUpMatchesRadialZero) {
  const auto pp = minus(4);
  const Orbit orb = regular_orbit(pp);
  ASSERT_EQ(orb.fate.kind, FateKind::BallBlowUp) << orb.fate.reason;
  ASSERT_TRUE(orb.gap_crossing_time.has_value());
  EXPECT_LT(*orb.gap_crossing_time, orb.fate.T);
  const auto shot = shoot(pp, 1.0, 100.0);
  ASSERT_EQ(shot.fate, RadialFate::VanishesAt);
  EXPECT_NEAR(std::log(shot.fate_radius), orb.fate.T, 1e-4);
  // Inflections of u are the crossings of Z = Lambda.
  ASSERT_EQ(orb.ell_crossings.size(), shot.inflections.size());
  for (std::size_t i = 0; i < shot.inflections.size(); ++i)
    EXPECT_NEAR(orb.ell_crossings[i].t, std::log(shot.inflections[i]), 1e-4);
  // Confinement to the box until X = N~- - 2 is crossed.
  const System s = System::from(pp);
  for (const auto& smp : orb.trajectory.samples) {
    if (smp.t >= *orb.gap_crossing_time) break;
    EXPECT_GE(smp.y[0], 0.0);
    EXPECT_LE(smp.y[0], s.gap + 1e-9);
    EXPECT_GE(smp.y[1], 0.0);
    EXPECT_LE(smp.y[1], 2.0 * s.Lambda + 1e-9);
  }
}

TEST(RegularOrbit, SlowDecayAboveThreshold) {
  const Orbit orb = regular_orbit(minus(20));
  ASSERT_EQ(orb.fate.kind, FateKind::SlowDecay) << orb.fate.reason;
  EXPECT_NEAR(orb.trajectory.last().y[0], 2.0 / 19.0, 1e-3);
  const System s = System::from(minus(20));
  for (const auto& smp : orb.trajectory.samples) {
    EXPECT_LE(smp.y[0], s.gap + 1e-9);
    EXPECT_LE(smp.y[1], 2.0 * s.Lambda + 1e-9);
  }
}

TEST(RegularOrbit, MatchesRadialShotImage) {
  const auto pp = minus(4);
  OrbitOptions o;
  o.output_step = 1e-3;
  const Orbit orb = regular_orbit(pp, o);
  std::vector<PhasePoint> orbit_pts;
  for (const auto& s : orb.trajectory.outputs) orbit_pts.push_back({s.y[0], s.y[1], s.t});
  std::vector<double> radii;
  for (double t = std::log(1e-5); t < orb.fate.T; t += 1e-3) radii.push_back(std::exp(t));
  const auto shot = shoot(pp, 1.0, 100.0, default_radial_controls(), radii);
  std::vector<PhasePoint> shot_pts;
  for (const auto& s : shot.outputs)
    shot_pts.push_back({-s.r * s.du / s.u, -s.r * std::pow(s.u, pp.p) / s.du, std::log(s.r)});
  const System s = System::from(pp);
  const double d = hausdorff_in_box(xz(orbit_pts), xz(shot_pts), {0, s.gap, 0, 2 * s.Lambda});
  EXPECT_LT(d, 1e-4);
}

TEST(RegularOrbit, DenseCrossingMatchesFineFixedStep) {
  OrbitOptions o;
  o.integration.rel_tol = 1e-12;
  o.integration.event_tol = 1e-11;
  const Orbit adaptive = regular_orbit(minus(4), o);
  OrbitOptions f = o;
  f.integration.fixed_step = 1e-3;
  const Orbit fixed = regular_orbit(minus(4), f);
  ASSERT_FALSE(adaptive.ell_crossings.empty());
  ASSERT_EQ(adaptive.ell_crossings.size(), fixed.ell_crossings.size());
  for (std::size_t i = 0; i < adaptive.ell_crossings.size(); ++i)
    EXPECT_NEAR(adaptive.ell_crossings[i].t, fixed.ell_crossings[i].t, 10 * o.integration.event_tol);
}

TEST(RegularOrbit, RejectsBadInput) {
  OrbitOptions o;
  o.delta = -1.0;
  EXPECT_THROW(regular_orbit(minus(4), o), ValidationError);
  EXPECT_THROW(regular_orbit(minus(4, 1, 1)), ValidationError);
}

TEST(BackwardOrbit, AlphaLimits) {
  const Orbit low = backward_orbit_from_A0(minus(4));
  EXPECT_EQ(low.alpha.kind, AlphaLimit::M0) << low.alpha.reason;
  const Orbit high = backward_orbit_from_A0(minus(20));
  EXPECT_NE(high.alpha.kind, AlphaLimit::M0);
  EXPECT_NE(high.alpha.kind, AlphaLimit::Periodic);
  EXPECT_NE(high.alpha.kind, AlphaLimit::Undetermined) << high.alpha.reason;
  for (double p : {4.0, 5.1, 20.0}) {
    OrbitOptions half;
    half.delta = 0.5 * default_delta(System::from(minus(p)).a0());
    EXPECT_EQ(backward_orbit_from_A0(minus(p)).alpha.kind, backward_orbit_from_A0(minus(p), half).alpha.kind)
        << "p=" << p;
  }
}

TEST(BackwardOrbit, PeriodicOrbitPassesDulacCheck) {
  const auto pp = minus(5.1);
  OrbitOptions o;
  o.horizon = 400.0;
  const Orbit orb = backward_orbit_from_A0(pp, o);
  ASSERT_EQ(orb.alpha.kind, AlphaLimit::Periodic) << orb.alpha.reason;
  const System s = System::from(pp);
  const auto cycle = trace_cycle(pp, s.alpha - orb.alpha.amplitude);
  const DulacResult r = dulac_integral(pp, cycle);
  EXPECT_LT(r.relative(), 1e-3);
  const auto ret = poincare_section(orb, Section::M0Ray);
  EXPECT_EQ(ret.verdict, ReturnVerdict::Stabilized);
}

TEST(Poincare, ContractingAndExactCycle) {
  OrbitOptions o;
  o.m0_disk = 1e-9;
  const Orbit spiral = regular_orbit(minus(8), o);
  const auto rs = poincare_section(spiral, Section::M0Ray);
  ASSERT_GE(rs.X.size(), 3u);
  EXPECT_EQ(rs.verdict, ReturnVerdict::Contracting);
  // At p = p_c the R- system conserves a weighted area; small loops around M0 are exact cycles.
  const auto cyc = trace_cycle(minus(5), 0.4);
  EXPECT_NEAR(cyc.back()[0], cyc.front()[0], 1e-9);
  EXPECT_NEAR(cyc.back()[1], cyc.front()[1], 1e-9);
  const auto few = poincare_section(regular_orbit(minus(4)), Section::EllUpward);
  EXPECT_EQ(few.verdict, ReturnVerdict::Inconclusive);
}

TEST(Dulac, MatchesPolarQuadrature) {
  const auto pp = minus(4);
  const System s = System::from(pp);
  const Vec2 c{0.5, 1.8};
  const auto poly = circle(c, 0.45, 4000);
  const DulacResult r = dulac_integral(pp, poly);
  const auto [up, down] = disc_integral(s, c, 0.45, 4000);
  EXPECT_NEAR(r.I_plus, up, 1e-5 * std::abs(up));
  EXPECT_NEAR(r.I_minus, down, 1e-5 * std::abs(down));
  EXPECT_GT(r.I_plus, 0.0);
  EXPECT_GT(r.I_minus, 0.0);
  EXPECT_DOUBLE_EQ(r.total, r.I_plus + r.I_minus);
  // Orientation does not matter.
  auto rev = poly;
  std::reverse(rev.begin(), rev.end());
  EXPECT_NEAR(dulac_integral(pp, rev).total, r.total, 1e-12 * std::abs(r.total));
}

TEST(Dulac, CriticalExponentKeepsOnlyUpperPart) {
  const auto pp = minus(5);
  const DulacResult r = dulac_integral(pp, circle({0.5, 1.6}, 0.45, 400));
  EXPECT_EQ(r.I_minus, 0.0);
  EXPECT_GT(r.I_plus, 0.0);
  EXPECT_EQ(r.total, r.I_plus);
}

TEST(Dulac, RejectsOpenPolygon) {
  auto poly = circle({0.5, 1.6}, 0.45, 100);
  poly.back()[0] += 0.01;
  EXPECT_THROW(dulac_integral(minus(4), poly), ValidationError);
}

TEST(Geometry, HausdorffBasics) {
  std::vector<Vec2> a{{0, 0}, {1, 0}, {2, 0}};
  std::vector<Vec2> b{{0, 0.5}, {2, 0.5}};
  EXPECT_DOUBLE_EQ(hausdorff(a, a), 0.0);
  EXPECT_DOUBLE_EQ(hausdorff(a, b), 0.5);
  std::vector<Vec2> c{{0, 0}, {3, 0}};
  EXPECT_DOUBLE_EQ(directed_hausdorff(a, c), 0.0);
  EXPECT_DOUBLE_EQ(directed_hausdorff(c, a), 1.0);
}

TEST(Geometry, PhaseImageIsScaleInvariant) {
  for (const auto& pp : {minus(4), minus(3.5, 1.0, 3.0)}) {
    std::vector<double> r1, r10;
    const double kappa = std::pow(10.0, (pp.p - 1.0) / 2.0);
    for (double t = -8.0; t < 3.0; t += 2e-3) {
      r1.push_back(std::exp(t));
      r10.push_back(std::exp(t) / kappa);
    }
    const auto a = shoot(pp, 1.0, 1e3, default_radial_controls(), r1);
    const auto b = shoot(pp, 10.0, 1e3 / kappa, default_radial_controls(), r10);
    RadialSolution ra = a, rb = b;
    ra.samples = a.outputs;
    rb.samples = b.outputs;
    const auto pa = phase_from_radial(ra), pb = phase_from_radial(rb);
    EXPECT_LT(hausdorff(xz(pa), xz(pb)), 1e-5);
    for (std::size_t i = 0; i < std::min(pa.size(), pb.size()); ++i)
      EXPECT_NEAR(pa[i].t - pb[i].t, std::log(kappa), 1e-9);
  }
}
