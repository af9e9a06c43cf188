#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pucci/exponents.hpp"
#include "pucci/liouville.hpp"
#include "pucci/params.hpp"
#include "pucci/phase.hpp"
#include "pucci/radial.hpp"

namespace pucci::cli {

inline constexpr int kSchemaVersion = 1;

using Json = nlohmann::ordered_json;

struct RunConfig {
  std::string command;
  double lambda = 1.0;
  double Lambda = 2.0;
  double p = 3.0;
  std::optional<double> p_min;
  std::optional<double> p_max;
  int p_steps = 33;
  double gamma = 1.0;
  std::optional<std::string> op;
  std::optional<double> tol;
  std::optional<double> rmax;
  std::optional<double> K;
  std::vector<double> eps_list{0.5, 0.2, 0.1};
  std::vector<double> p_list{2.0, 5.0, 10.0, 20.0, 40.0};
  std::optional<double> rel_tol;
  std::optional<double> abs_tol;
  std::string out = ".";

  ProblemParams params() const {
    ProblemParams pp;
    pp.lambda = lambda;
    pp.Lambda = Lambda;
    pp.p = p;
    pp.op = operator_from_string(op.value_or("minus"));
    return pp;
  }
};

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline bool uses_controls(const std::string& cmd) {
  return cmd == "shoot" || cmd == "phase" || cmd == "sweep" || cmd == "exponent";
}

/// Fills command defaults and checks every precondition before anything runs.
inline RunConfig resolve(RunConfig c) {
  const std::string& cmd = c.command;
  if (!c.op) c.op = cmd == "liouville" ? "plus" : "minus";
  const ProblemParams pp = c.params();
  pp.validate();
  if (cmd == "liouville" && pp.op != Operator::Plus) throw ValidationError("liouville: operator must be plus");
  if (cmd != "shoot" && cmd != "liouville") require_planar_minus(pp, cmd.c_str());
  if (!(c.gamma > 0.0) || !std::isfinite(c.gamma)) throw ValidationError("gamma must be positive");

  if (!c.tol) c.tol = cmd == "exponent" ? 0.05 : 1e-3;
  if (!(*c.tol > 0.0)) throw ValidationError("tol must be positive");
  if (!c.rmax) c.rmax = 1e4;
  if (!(*c.rmax > 0.0)) throw ValidationError("rmax must be positive");
  if (!c.K) c.K = cmd == "liouville" ? 2.0 * liouville::inflection_radius(c.lambda) : 5.0;
  if (!(*c.K > 0.0)) throw ValidationError("K must be positive");

  if (cmd == "sweep" || cmd == "exponent") {
    const auto w = exponents::default_window(pp);
    if (!c.p_min) c.p_min = w.first;
    if (!c.p_max) c.p_max = w.second;
    if (!(*c.p_min > 1.0) || !(*c.p_max > *c.p_min)) throw ValidationError("need 1 < p-min < p-max");
  }
  if (c.p_steps < 2) throw ValidationError("p-steps must be at least 2");
  if (c.eps_list.empty()) throw ValidationError("eps-list is empty");
  for (double e : c.eps_list)
    if (!(e > 0.0)) throw ValidationError("eps-list entries must be positive");
  if (c.p_list.empty()) throw ValidationError("p-list is empty");
  for (double q : c.p_list)
    if (!(q > 1.0)) throw ValidationError("p-list entries must exceed 1");

  if (uses_controls(cmd)) {
    const ode::IntegrationControls d =
        cmd == "shoot" ? default_radial_controls() : phase::OrbitOptions{}.integration;
    if (!c.rel_tol) c.rel_tol = d.rel_tol;
    if (!c.abs_tol) c.abs_tol = d.abs_tol;
    if (!(*c.rel_tol > 0.0) || !(*c.abs_tol > 0.0)) throw ValidationError("rel-tol and abs-tol must be positive");
  } else if (c.rel_tol || c.abs_tol) {
    throw ValidationError(cmd + ": rel-tol/abs-tol are not used by this command");
  }
  return c;
}

inline Json to_json(const RunConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  Json j;
  j["command"] = c.command;
  j["lambda"] = c.lambda;
  j["Lambda"] = c.Lambda;
  j["p"] = c.p;
  j["p-min"] = opt(c.p_min);
  j["p-max"] = opt(c.p_max);
  j["p-steps"] = c.p_steps;
  j["gamma"] = c.gamma;
  j["operator"] = c.op ? Json(*c.op) : Json(nullptr);
  j["tol"] = opt(c.tol);
  j["rmax"] = opt(c.rmax);
  j["K"] = opt(c.K);
  j["eps-list"] = c.eps_list;
  j["p-list"] = c.p_list;
  j["rel-tol"] = opt(c.rel_tol);
  j["abs-tol"] = opt(c.abs_tol);
  j["out"] = c.out;
  return j;
}

/// Config file accepted by --config; the subcommand stays on the command line.
inline std::string to_toml(const RunConfig& c) {
  std::ostringstream s;
  auto list = [](const std::vector<double>& v) {
    std::string r = "[";
    for (std::size_t i = 0; i < v.size(); ++i) r += (i ? ", " : "") + fmt(v[i]);
    return r + "]";
  };
  s << "# pucci_lab " << c.command << " --config <this file>\n";
  s << "lambda = " << fmt(c.lambda) << "\n";
  s << "Lambda = " << fmt(c.Lambda) << "\n";
  s << "p = " << fmt(c.p) << "\n";
  if (c.p_min) s << "p-min = " << fmt(*c.p_min) << "\n";
  if (c.p_max) s << "p-max = " << fmt(*c.p_max) << "\n";
  s << "p-steps = " << c.p_steps << "\n";
  s << "gamma = " << fmt(c.gamma) << "\n";
  if (c.op) s << "operator = \"" << *c.op << "\"\n";
  if (c.tol) s << "tol = " << fmt(*c.tol) << "\n";
  if (c.rmax) s << "rmax = " << fmt(*c.rmax) << "\n";
  if (c.K) s << "K = " << fmt(*c.K) << "\n";
  s << "eps-list = " << list(c.eps_list) << "\n";
  s << "p-list = " << list(c.p_list) << "\n";
  if (c.rel_tol) s << "rel-tol = " << fmt(*c.rel_tol) << "\n";
  if (c.abs_tol) s << "abs-tol = " << fmt(*c.abs_tol) << "\n";
  s << "out = \"" << c.out << "\"\n";
  return s.str();
}

class Writer {
 public:
  explicit Writer(const RunConfig& c) : cfg_(c), dir_(c.out) { std::filesystem::create_directories(dir_); }

  std::string csv(const std::string& name, const std::string& header, const std::vector<std::string>& rows) const {
    std::ostringstream s;
    s << "# schema_version=" << kSchemaVersion << "\n# config=" << to_json(cfg_).dump() << "\n" << header << "\n";
    for (const auto& r : rows) s << r << "\n";
    return put(name, s.str());
  }

  std::string json(const std::string& name, Json body) const {
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["config"] = to_json(cfg_);
    for (auto& [k, v] : body.items()) j[k] = v;
    return put(name, j.dump(2) + "\n");
  }

  std::string toml() const { return put("run.toml", to_toml(cfg_)); }

 private:
  std::string put(const std::string& name, const std::string& text) const {
    const auto path = dir_ / name;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    return path.string();
  }

  RunConfig cfg_;
  std::filesystem::path dir_;
};

inline std::string row(std::initializer_list<std::string> cells) {
  std::string r;
  for (const auto& c : cells) r += (r.empty() ? "" : ",") + c;
  return r;
}

inline Json bracket_json(const std::optional<exponents::Bracket>& b) {
  if (!b) return nullptr;
  return Json{{"lo", b->lo}, {"hi", b->hi}};
}

inline Json fate_json(const phase::OrbitFate& f) {
  Json j{{"kind", phase::to_string(f.kind)}};
  if (f.kind == phase::FateKind::BallBlowUp) j["T"] = f.T;
  if (f.kind == phase::FateKind::PseudoSlow) {
    j["period"] = f.period;
    j["amplitude"] = f.amplitude;
  }
  if (!f.reason.empty()) j["reason"] = f.reason;
  return j;
}

inline Json sample_json(const exponents::FateSample& s) {
  Json j{{"p", s.p}, {"fate", fate_json(s.fate)}, {"terminal_X", s.terminal_X}, {"terminal_Z", s.terminal_Z}};
  j["amplitudes"] = s.amplitudes;
  j["retried"] = s.retried;
  return j;
}

inline phase::OrbitOptions orbit_options(const RunConfig& c) {
  phase::OrbitOptions o;
  o.integration.rel_tol = *c.rel_tol;
  o.integration.abs_tol = *c.abs_tol;
  return o;
}

inline std::vector<std::string> run_shoot(const RunConfig& c) {
  ode::IntegrationControls ctl = default_radial_controls();
  ctl.rel_tol = *c.rel_tol;
  ctl.abs_tol = *c.abs_tol;
  const RadialSolution sol = shoot(c.params(), c.gamma, *c.rmax, ctl);
  std::vector<std::string> rows;
  for (const auto& s : sol.samples) rows.push_back(row({fmt(s.r), fmt(s.u), fmt(s.du), fmt(s.d2u), std::to_string(s.branch)}));
  const Writer w(c);
  Json body{{"fate", to_string(sol.fate)}, {"radius", sol.fate_radius}, {"r0", sol.r0}};
  body["inflections"] = sol.inflections;
  return {w.csv("radial.csv", "r,u,du,d2u,branch", rows), w.json("shoot.json", body), w.toml()};
}

inline std::vector<std::string> run_phase(const RunConfig& c) {
  const phase::Orbit orb = phase::regular_orbit(c.params(), orbit_options(c));
  std::vector<std::string> rows;
  for (const auto& s : orb.trajectory.samples)
    rows.push_back(row({fmt(s.t), fmt(s.y[0]), fmt(s.y[1]), std::to_string(s.branch)}));
  Json crossings = Json::array();
  for (const auto& e : orb.ell_crossings) crossings.push_back({{"t", e.t}, {"X", e.X}, {"upward", e.upward}});
  Json body{{"fate", fate_json(orb.fate)},
            {"termination", ode::to_string(orb.trajectory.termination)},
            {"gap_crossing_time", orb.gap_crossing_time ? Json(*orb.gap_crossing_time) : Json(nullptr)},
            {"ell_crossings", crossings}};
  const Writer w(c);
  std::vector<std::string> files{w.csv("orbit.csv", "t,X,Z,branch", rows), w.json("phase.json", body), w.toml()};
  if (orb.fate.kind == phase::FateKind::Undetermined)
    throw NumericalError("phase: fate undetermined (" + orb.fate.reason + "); partial output in " + c.out);
  return files;
}

inline std::vector<std::string> run_points(const RunConfig& c) {
  Json pts = Json::array();
  for (const auto& s : phase::stationary_points(c.params())) {
    Json ev = Json::array();
    for (const auto& e : s.eigenvalues) ev.push_back({{"re", e.real()}, {"im", e.imag()}});
    pts.push_back({{"name", phase::to_string(s.name)},
                   {"X", s.coords.X},
                   {"Z", s.coords.Z},
                   {"region", s.branch == phase::kPlusRegion ? "plus" : "minus"},
                   {"eigenvalues", ev},
                   {"kind", phase::to_string(s.kind)}});
  }
  const Writer w(c);
  return {w.json("points.json", Json{{"points", pts}}), w.toml()};
}

inline std::vector<std::string> run_sweep(const RunConfig& c) {
  const auto ps = exponents::sweep_grid(*c.p_min, *c.p_max, static_cast<std::size_t>(c.p_steps));
  const auto samples = exponents::sweep_fates(c.params(), ps, orbit_options(c));
  std::vector<std::string> rows;
  for (const auto& s : samples) {
    const std::string amp = s.amplitudes.empty() ? "" : fmt(s.amplitudes.back());
    rows.push_back(row({fmt(s.p), phase::to_string(s.fate.kind), fmt(s.terminal_X), fmt(s.terminal_Z), amp}));
  }
  const Writer w(c);
  return {w.csv("sweep.csv", "p,fate,terminal_X,terminal_Z,amplitude", rows), w.toml()};
}

inline std::vector<std::string> run_exponent(const RunConfig& c) {
  exponents::EstimatorOptions opt;
  opt.orbit = orbit_options(c);
  const auto est = exponents::estimate_exponents(c.params(), *c.tol, std::pair{*c.p_min, *c.p_max}, opt);
  Json sweep = Json::array();
  for (const auto& s : est.sweep) sweep.push_back(sample_json(s));
  Json cycles = Json::array();
  for (const auto& s : est.cycle_sweep) {
    auto o = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    cycles.push_back({{"p", s.p},
                      {"gamma_fate", phase::to_string(s.gamma_fate)},
                      {"alpha_limit", phase::to_string(s.alpha_limit)},
                      {"gamma_detects", s.gamma_detects},
                      {"backward_detects", s.backward_detects},
                      {"amplitude", o(s.amplitude)},
                      {"dulac_ratio", o(s.dulac_ratio)},
                      {"dulac_rejected", s.dulac_rejected},
                      {"disagreement", s.disagreement},
                      {"detected", s.detected()}});
  }
  Json body{{"p_star", bracket_json(est.p_star)},
            {"p_tilde", bracket_json(est.p_tilde)},
            {"tolerance", est.tolerance},
            {"bounds",
             {{"lower", est.bounds.lower},
              {"upper_plus_form", est.bounds.upper_plus_form},
              {"upper_minus_form", est.bounds.upper_minus_form},
              {"p0_floor", est.bounds.p0_floor}}},
            {"consistent",
             {{"lower_below_p_star", est.consistent.lower_below_p_star},
              {"p_star_le_p_tilde", est.consistent.p_star_le_p_tilde},
              {"tilde_within_plus_form", est.consistent.tilde_within_plus_form},
              {"tilde_within_minus_form", est.consistent.tilde_within_minus_form}}},
            {"sweep", sweep},
            {"cycle_sweep", cycles}};
  const Writer w(c);
  return {w.json("exponent.json", body), w.toml()};
}

inline std::vector<std::string> run_liouville(const RunConfig& c) {
  const ProblemParams pp = c.params();
  const auto prof = liouville::build_profile(pp, std::max(50.0 * liouville::inflection_radius(c.lambda), *c.K));
  std::vector<std::string> rows;
  const int n = 1000;
  for (int i = 0; i <= n; ++i) {
    const double r = *c.K * i / n;
    const auto j = prof(r);
    rows.push_back(row({fmt(r), fmt(j.z), fmt(j.dz), fmt(j.d2z)}));
  }
  std::vector<std::string> table;
  for (const auto& t : liouville::convergence_table(pp, c.p_list, *c.K, prof))
    table.push_back(row({fmt(t.p), fmt(t.eps), fmt(t.eps_unit_ball), fmt(t.R_p), fmt(t.K_used),
                         t.truncated ? "1" : "0", fmt(t.sup_error)}));
  const Writer w(c);
  return {w.csv("profile.csv", "r,z,dz,d2z", rows),
          w.csv("zp_errors.csv", "p,eps,eps_unit_ball,R_p,K_used,truncated,sup_error", table), w.toml()};
}

inline std::vector<std::string> run_converge(const RunConfig& c) {
  const ProblemParams pp = c.params();
  const auto est = exponents::estimate_p_star(pp, *c.tol);
  if (!est.p_star) throw NumericalError("converge: no p-* bracket found");
  const auto rep = liouville::near_critical_experiment(pp, est.p_star, c.eps_list, *c.K);
  Json rows = Json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"eps", r.eps},
                    {"p", r.p},
                    {"R_p", r.R_p},
                    {"M", r.M},
                    {"u_eps_at_0", r.u_eps_at_0},
                    {"sup_distance", r.sup_distance},
                    {"annulus_max", r.annulus_max}});
  Json body{{"p_star", bracket_json(rep.p_star)},
            {"p_hat", rep.p_hat},
            {"K", rep.K},
            {"U_closest_to_n0", rep.U_closest_to_n0},
            {"rows", rows}};
  const Writer w(c);
  return {w.json("converge.json", body), w.toml()};
}

inline std::vector<std::string> dispatch(const RunConfig& c) {
  if (c.command == "shoot") return run_shoot(c);
  if (c.command == "phase") return run_phase(c);
  if (c.command == "points") return run_points(c);
  if (c.command == "sweep") return run_sweep(c);
  if (c.command == "exponent") return run_exponent(c);
  if (c.command == "liouville") return run_liouville(c);
  if (c.command == "converge") return run_converge(c);
  throw ValidationError("unknown command " + c.command);
}

/// Full front end: parse, resolve, run. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Radial Pucci problems: shooting, phase plane, exponents, Liouville limit", "pucci_lab"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML run configuration; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);

  RunConfig c;
  std::optional<double> p_min, p_max;
  app.add_option("--lambda", c.lambda, "lower ellipticity constant");
  app.add_option("--Lambda", c.Lambda, "upper ellipticity constant");
  app.add_option("--p", c.p, "exponent");
  app.add_option("--p-min", c.p_min, "sweep start (default: lower bound)");
  app.add_option("--p-max", c.p_max, "sweep end (default: minus-form upper bound)");
  app.add_option("--p-steps", c.p_steps, "sweep samples");
  app.add_option("--gamma", c.gamma, "u(0) for shoot");
  app.add_option("--operator", c.op, "plus or minus")->check(CLI::IsMember({"plus", "minus"}));
  app.add_option("--tol", c.tol, "bracket tolerance");
  app.add_option("--rmax", c.rmax, "shooting window");
  app.add_option("--K", c.K, "comparison range");
  app.add_option("--eps-list", c.eps_list, "offsets below p-*")->delimiter(',');
  app.add_option("--p-list", c.p_list, "exponents for the z_p table")->delimiter(',');
  app.add_option("--rel-tol", c.rel_tol, "integrator relative tolerance");
  app.add_option("--abs-tol", c.abs_tol, "integrator absolute tolerance");
  app.add_option("--out", c.out, "output directory");

  for (const char* name : {"shoot", "phase", "points", "sweep", "exponent", "liouville", "converge"})
    app.add_subcommand(name)->callback([&c, name] { c.command = name; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "pucci_lab: " << e.what() << "\n";
    return 2;
  }
  try {
    const RunConfig resolved = resolve(c);
    for (const auto& path : dispatch(resolved)) out << path << "\n";
    return 0;
  } catch (const ValidationError& e) {
    err << "pucci_lab: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "pucci_lab: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace pucci::cli
