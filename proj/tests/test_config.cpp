#include "imu/config.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "imu/designs.hpp"
#include "imu/montecarlo.hpp"
#include "imu/serialize.hpp"

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

const char* kFullConfig = R"({
  "mode": "verify",
  "design": {"name": "mdl", "p": [0.7, 0.5], "c": 2.0, "z0": [2, 1, 1],
             "alpha": 1.0, "beta": 2.0, "delayed_urn_update": true},
  "mc": {"replications": 500, "horizon": 4000, "seed": 99, "jobs": 2,
         "record_trajectories": true},
  "delay": {"kind": "geometric", "q": 0.25},
  "output": {"json": "out.json", "csv": "out.csv"},
  "tolerances": {"z_max": 3.5, "cov_gap_max": 0.2, "slope_max": 0.6, "sigma_scale": 1.0}
})";

TEST(Config, ParsesEveryBlock) {
  const imu::RunConfig c = imu::config_from_json(imu::Json::parse(kFullConfig));
  EXPECT_EQ(c.mode, "verify");
  EXPECT_EQ(c.design.name, "mdl");
  EXPECT_EQ(c.design.p, (std::vector<double>{0.7, 0.5}));
  EXPECT_DOUBLE_EQ(c.design.c, 2.0);
  EXPECT_TRUE(c.design.delayed_urn_update);
  EXPECT_EQ(c.mc.replications, 500);
  EXPECT_EQ(c.mc.horizon, 4000);
  ASSERT_TRUE(c.mc.seed.has_value());
  EXPECT_EQ(*c.mc.seed, 99u);
  EXPECT_EQ(c.mc.jobs, 2);
  ASSERT_TRUE(c.delay.has_value());
  EXPECT_EQ(c.delay->kind, "geometric");
  EXPECT_DOUBLE_EQ(c.delay->q, 0.25);
  EXPECT_EQ(c.output.json, "out.json");
  EXPECT_DOUBLE_EQ(c.tolerances.z_max, 3.5);
}

TEST(Config, RoundTripIsStable) {
  const imu::RunConfig c = imu::config_from_json(imu::Json::parse(kFullConfig));
  const imu::Json once = imu::config_to_json(c);
  const imu::Json twice = imu::config_to_json(imu::config_from_json(once));
  EXPECT_EQ(once.dump(), twice.dump());

  // defaults: no seed emitted unless set, no design block without a name
  const imu::Json bare = imu::config_to_json(imu::RunConfig{});
  EXPECT_FALSE(bare.contains("design"));
  EXPECT_FALSE(bare["mc"].contains("seed"));
}

TEST(Config, UnknownKeysAreRejectedEverywhere) {
  const auto bad = [](const char* text) {
    EXPECT_THROW(imu::config_from_json(imu::Json::parse(text)), std::invalid_argument) << text;
  };
  bad(R"({"modes": "verify"})");
  bad(R"({"design": {"name": "dl", "prob": [0.5, 0.5]}})");
  bad(R"({"mc": {"reps": 10}})");
  bad(R"({"delay": {"kind": "fixed", "lags": 2}})");
  bad(R"({"output": {"yaml": "x"}})");
  bad(R"({"tolerances": {"zmax": 3}})");
  bad(R"({"delay": {"kind": "sometimes"}})");
}

TEST(Config, DelayFlagGrammar) {
  EXPECT_EQ(imu::parse_delay_flag("none").kind, "none");
  const imu::DelayBlock f = imu::parse_delay_flag("fixed:2");
  EXPECT_EQ(f.kind, "fixed");
  EXPECT_EQ(f.lag, 2);
  const imu::DelayBlock g = imu::parse_delay_flag("geometric:0.5");
  EXPECT_EQ(g.kind, "geometric");
  EXPECT_DOUBLE_EQ(g.q, 0.5);

  for (const char* s :
       {"fixed", "fixed:", "fixed:abc", "fixed:-1", "geometric:0", "geometric:1.5", "weird:1"})
    EXPECT_THROW(imu::parse_delay_flag(s), std::invalid_argument) << s;
}

TEST(Config, DelayBlockBuildsTheModel) {
  EXPECT_FALSE(imu::delay_from_block(imu::DelayBlock{}).active());
  imu::DelayBlock f{"fixed", 3, 0.5};
  const imu::DelayModel mf = imu::delay_from_block(f);
  EXPECT_TRUE(mf.active());
  EXPECT_EQ(mf.entry(0).lag, 3);
  imu::DelayBlock g{"geometric", 0, 0.75};
  EXPECT_DOUBLE_EQ(imu::delay_from_block(g).entry(1).q, 0.75);
}

TEST(Config, BuildDesignAppliesEngineOptions) {
  const imu::RunConfig c = imu::config_from_json(imu::Json::parse(kFullConfig));
  const imu::NamedDesign d = imu::build_design(c.design);
  EXPECT_EQ(d.name, imu::DesignName::mdl);
  EXPECT_DOUBLE_EQ(d.c, 2.0);
  EXPECT_DOUBLE_EQ(d.spec.estimator_alpha, 1.0);
  EXPECT_DOUBLE_EQ(d.spec.estimator_beta, 2.0);
  EXPECT_TRUE(d.spec.delayed_urn_update);
  EXPECT_TRUE(d.spec.initial_masses.isApprox(VectorXd{{2.0, 1.0, 1.0}}));

  imu::DesignConfig cd;
  cd.name = "const";
  cd.a = {1.0, 3.0};
  cd.d_matrix = {{0.0, 0.0}, {0.0, 0.0}};
  EXPECT_EQ(imu::build_design(cd).label, "const(a=1,3)");

  cd.d_matrix = {{0.0, 0.0}};
  EXPECT_THROW(imu::build_design(cd), std::invalid_argument);
  cd.d_matrix = {{0.0}, {0.0}};
  EXPECT_THROW(imu::build_design(cd), std::invalid_argument);

  imu::DesignConfig bad;
  bad.name = "dl";
  bad.p = {0.5, 0.5};
  bad.alpha = 0.0;
  EXPECT_THROW(imu::build_design(bad), std::invalid_argument);
  bad.name = "polya";
  EXPECT_THROW(imu::build_design(bad), std::invalid_argument);
}

TEST(Serialize, NumbersRoundTripAtFullPrecision) {
  for (const double x : {0.1, 1.0 / 3.0, 1.062, 1e300, -0.0, 5.0, 1.1959459459459459}) {
    const std::string s = imu::detail::num(x);
    double back = 0.0;
    sscanf(s.c_str(), "%lf", &back);
    EXPECT_EQ(back, x) << s;
  }
  EXPECT_EQ(imu::detail::num(0.1), "0.1");
  EXPECT_EQ(imu::detail::num(5.0), "5");
}

TEST(Serialize, SummaryJsonKeysAreStable) {
  const imu::TheoreticalSummary t =
      imu::design_summary(imu::build_mdl(VectorXd{{0.7, 0.5}}));
  const imu::Json j = imu::summary_json(t);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  const std::vector<std::string> expected{
      "a",        "u",        "s",         "v",           "A",
      "lambda11", "lambda12", "lambda22",  "dv_dtheta",   "sigma_D",
      "sigma_xi", "sigma_Dxi", "sigma_total", "lower_bound", "eigenvector_regime",
      "approximate"};
  EXPECT_EQ(keys, expected);
  EXPECT_FALSE(j["lower_bound"].is_null());
  EXPECT_NEAR(j["sigma_total"][0][0].get<double>(), 1.062, 1e-10);
  EXPECT_NEAR(j["v"][0].get<double>(), 0.7, 1e-12);

  // the eigenvector regime has no covariance prediction: empty blocks, no bound
  MatrixXd unit(2, 2);
  unit << 0.2, 0.8, 0.6, 0.4;
  const imu::Json j32 =
      imu::summary_json(imu::design_summary(imu::build_const(VectorXd{{1, 1}}, unit)));
  EXPECT_TRUE(j32["eigenvector_regime"].get<bool>());
  EXPECT_TRUE(j32["lower_bound"].is_null());
  EXPECT_TRUE(j32["sigma_total"].empty());
}

TEST(Serialize, ReportJsonTurnsNanIntoNull) {
  imu::McConfig cfg;
  MatrixXd unit(2, 2);
  unit << 0.2, 0.8, 0.6, 0.4;
  cfg.design = imu::build_const(VectorXd{{1.0, 1.0}}, unit);
  cfg.replications = 20;
  cfg.horizon = 200;
  cfg.master_seed = 5;
  const imu::McReport rep = imu::run_replications(cfg);
  ASSERT_TRUE(std::isnan(rep.cov_rel_err));
  const imu::Json j = imu::report_json(rep);
  EXPECT_TRUE(j["cov_rel_err"].is_null());
  EXPECT_EQ(j["design"].get<std::string>(), cfg.design.label);
}

TEST(Serialize, TrajectoryCsvGolden) {
  imu::AssignmentRecord rec;
  rec.subject = 1;
  rec.treatment = 0;
  rec.immigration_draws = 2;
  rec.outcome = 1.0;
  rec.d_row = VectorXd{{0.5, 0.0}};
  rec.observed_at = 1;
  imu::StepSnapshot snap;
  snap.z = VectorXd{{0.25, 1.0}};
  snap.n_assigned = {1, 0};
  snap.n_immigration_draws = 2;

  const std::string csv = imu::trajectory_csv({rec}, {snap}, 1.0);
  EXPECT_EQ(csv,
            "step,treatment,u_m,xi,z0,z1,z2,n1,n2,n_imm\n"
            "1,1,2,1,1,0.25,1,1,0,2\n");

  EXPECT_THROW(imu::trajectory_csv({rec}, {}, 1.0), std::invalid_argument);
  EXPECT_EQ(imu::trajectory_csv({}, {}, 1.0), "step,treatment,u_m,xi,z0,n_imm\n");
}

TEST(Serialize, ReplicationsCsvGolden) {
  imu::McReport r;
  r.mean_proportions = VectorXd{{0.5, 0.5}};
  imu::ReplicationResult one;
  one.replication = 0;
  one.counts = VectorXd{{3.0, 7.0}};
  one.immigration_draws = 4;
  one.theta_hat = VectorXd{{0.5, 0.25}};
  r.per_replication.push_back(one);

  EXPECT_EQ(imu::replications_csv(r),
            "replication,N1,N2,N0,theta_hat_1,theta_hat_2\n"
            "0,3,7,4,0.5,0.25\n");
}

}  // namespace
