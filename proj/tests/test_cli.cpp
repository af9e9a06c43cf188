#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "pucci/cli.hpp"

namespace fs = std::filesystem;
using pucci::cli::Json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "pucci_lab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = pucci::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string header_line(const fs::path& csv) {
  std::ifstream f(csv);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty() && line[0] != '#') return line;
  return {};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("pucci_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string dir(const std::string& sub) const { return (dir_ / sub).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, ShootIsBitReproducible) {
  const std::vector<std::string> a{"shoot", "--operator", "plus", "--lambda", "1", "--Lambda", "1", "--p", "3", "--gamma", "1"};
  auto first = a, second = a;
  first.insert(first.end(), {"--out", dir("a")});
  second.insert(second.end(), {"--out", dir("a")});
  ASSERT_EQ(run(first).code, 0);
  const std::string json1 = slurp(dir("a") + "/shoot.json"), csv1 = slurp(dir("a") + "/radial.csv");
  ASSERT_EQ(run(second).code, 0);
  EXPECT_EQ(slurp(dir("a") + "/shoot.json"), json1);
  EXPECT_EQ(slurp(dir("a") + "/radial.csv"), csv1);
  const Json j = Json::parse(json1);
  EXPECT_EQ(j["fate"], "VanishesAt");
  EXPECT_EQ(j["schema_version"], pucci::cli::kSchemaVersion);
  EXPECT_EQ(j["config"]["operator"], "plus");
  EXPECT_EQ(header_line(dir("a") + "/radial.csv"), "r,u,du,d2u,branch");
}

TEST_F(Cli, EmbeddedConfigReproducesOutput) {
  ASSERT_EQ(run({"phase", "--p", "4.5", "--out", dir("a")}).code, 0);
  const std::string before = slurp(dir("a") + "/phase.json");
  const std::string orbit = slurp(dir("a") + "/orbit.csv");
  ASSERT_EQ(run({"phase", "--config", dir("a") + "/run.toml"}).code, 0);
  EXPECT_EQ(slurp(dir("a") + "/phase.json"), before);
  EXPECT_EQ(slurp(dir("a") + "/orbit.csv"), orbit);
}

TEST_F(Cli, FlagsOverrideConfig) {
  fs::create_directories(dir_);
  std::ofstream(dir("cfg.toml")) << "p = 4\nLambda = 2\n";
  ASSERT_EQ(run({"phase", "--config", dir("cfg.toml"), "--p", "4.25", "--out", dir("a")}).code, 0);
  const Json j = Json::parse(slurp(dir("a") + "/phase.json"));
  EXPECT_EQ(j["config"]["p"], 4.25);
  EXPECT_EQ(j["config"]["Lambda"], 2.0);
}

TEST_F(Cli, UnknownConfigKeyRejected) {
  fs::create_directories(dir_);
  std::ofstream(dir("cfg.toml")) << "lambda = 1\nmystery = 3\n";
  const auto r = run({"shoot", "--config", dir("cfg.toml"), "--out", dir("a")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, ValidationExitCode) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"shoot", "--lambda", "2", "--Lambda", "1"},
           {"liouville", "--operator", "minus"},
           {"phase", "--operator", "plus"},
           {"shoot", "--gamma", "-1"},
           {"sweep", "--p-min", "6", "--p-max", "5"},
           {"points", "--rel-tol", "1e-8"},
           {"converge", "--eps-list", "0.1,-0.2"},
           {"nonsense"},
           {}}) {
    auto a = args;
    a.insert(a.end(), {"--out", dir("v")});
    const auto r = run(a);
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  }
  EXPECT_FALSE(fs::exists(dir("v") + "/run.toml"));
}

TEST_F(Cli, NumericalFailureExitCode) {
  const auto r = run({"shoot", "--rel-tol", "1e-30", "--abs-tol", "1e-300", "--out", dir("a")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("StepCollapse"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, PhaseBlowUpAtP4) {
  ASSERT_EQ(run({"phase", "--lambda", "1", "--Lambda", "2", "--p", "4", "--out", dir("a")}).code, 0);
  const Json j = Json::parse(slurp(dir("a") + "/phase.json"));
  EXPECT_EQ(j["fate"]["kind"], "BallBlowUp");
  EXPECT_GT(j["fate"]["T"].get<double>(), 0.0);
  EXPECT_EQ(header_line(dir("a") + "/orbit.csv"), "t,X,Z,branch");
}

TEST_F(Cli, ExponentBracketWithinBounds) {
  ASSERT_EQ(run({"exponent", "--lambda", "1", "--Lambda", "2", "--tol", "0.05", "--out", dir("a")}).code, 0);
  const Json j = Json::parse(slurp(dir("a") + "/exponent.json"));
  ASSERT_FALSE(j["p_star"].is_null());
  const double lo = j["p_star"]["lo"], hi = j["p_star"]["hi"];
  EXPECT_GT(lo, 5.0);
  EXPECT_LE(hi, 13.0);
  EXPECT_LE(hi - lo, 0.05);
  EXPECT_TRUE(j["consistent"]["lower_below_p_star"].get<bool>());
}

TEST_F(Cli, SweepPointsLiouvilleConverge) {
  ASSERT_EQ(run({"sweep", "--p-steps", "5", "--out", dir("s")}).code, 0);
  EXPECT_EQ(header_line(dir("s") + "/sweep.csv"), "p,fate,terminal_X,terminal_Z,amplitude");

  ASSERT_EQ(run({"points", "--p", "6", "--out", dir("p")}).code, 0);
  const Json pts = Json::parse(slurp(dir("p") + "/points.json"))["points"];
  EXPECT_EQ(pts.size(), 4u);
  EXPECT_NE(pts.dump().find("\"M0\""), std::string::npos);

  ASSERT_EQ(run({"liouville", "--out", dir("l")}).code, 0);
  EXPECT_EQ(header_line(dir("l") + "/profile.csv"), "r,z,dz,d2z");
  EXPECT_EQ(header_line(dir("l") + "/zp_errors.csv"), "p,eps,eps_unit_ball,R_p,K_used,truncated,sup_error");

  ASSERT_EQ(run({"converge", "--eps-list", "0.5,0.2", "--out", dir("c")}).code, 0);
  const Json c = Json::parse(slurp(dir("c") + "/converge.json"));
  ASSERT_EQ(c["rows"].size(), 2u);
  EXPECT_LT(c["rows"][0]["M"].get<double>(), c["rows"][1]["M"].get<double>());
}

TEST_F(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("shoot"), std::string::npos);
}
