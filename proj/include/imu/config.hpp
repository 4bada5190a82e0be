#pragma once

#include <optional>
#include <string>
#include <vector>

#include "imu/designs.hpp"
#include "imu/serialize.hpp"
#include "imu/urn.hpp"

namespace imu {

struct DesignConfig {
  std::string name;       // bdu | dl | mdl | gdl | const
  std::vector<double> p;  // success probabilities (bdu/dl/mdl/gdl)
  double c = 1.0;         // immigration scale (mdl/gdl)
  std::vector<double> z0;  // initial masses, empty = all ones
  double alpha = 0.5;     // estimator prior successes
  double beta = 1.0;      // estimator prior observations
  bool delayed_urn_update = false;
  std::vector<double> a;                      // const design: immigration rates
  std::vector<std::vector<double>> d_matrix;  // const design: deterministic adding matrix
};

struct McBlock {
  long replications = 1000;
  long horizon = 5000;
  std::optional<std::uint64_t> seed;
  int jobs = 0;  // 0 = hardware concurrency
  bool record_trajectories = false;
};

struct DelayBlock {
  std::string kind = "none";  // none | fixed | geometric
  long lag = 0;               // fixed
  double q = 0.5;             // geometric success probability
};

struct OutputBlock {
  std::string json;
  std::string csv;
};

struct Tolerances {
  double z_max = 4.0;
  double cov_gap_max = 0.15;
  double slope_max = 0.62;
  double sigma_scale = 1.0;  // test hook: scales the predicted covariance in verify gates
};

struct RunConfig {
  std::string mode;  // optional in files; the subcommand decides when absent
  DesignConfig design;
  std::vector<DesignConfig> designs;  // compare mode
  McBlock mc;
  std::optional<DelayBlock> delay;
  OutputBlock output;
  Tolerances tolerances;
};

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed,
                       const char* block) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* key : allowed)
      if (it.key() == key) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + block);
  }
}

inline DesignConfig design_from_json(const Json& j) {
  check_keys(j, {"name", "p", "c", "z0", "alpha", "beta", "delayed_urn_update", "a", "d_matrix"},
             "design block");
  DesignConfig d;
  d.name = j.at("name").get<std::string>();
  if (j.contains("p")) d.p = j["p"].get<std::vector<double>>();
  if (j.contains("c")) d.c = j["c"].get<double>();
  if (j.contains("z0")) d.z0 = j["z0"].get<std::vector<double>>();
  if (j.contains("alpha")) d.alpha = j["alpha"].get<double>();
  if (j.contains("beta")) d.beta = j["beta"].get<double>();
  if (j.contains("delayed_urn_update")) d.delayed_urn_update = j["delayed_urn_update"].get<bool>();
  if (j.contains("a")) d.a = j["a"].get<std::vector<double>>();
  if (j.contains("d_matrix")) d.d_matrix = j["d_matrix"].get<std::vector<std::vector<double>>>();
  return d;
}

inline Json design_to_json(const DesignConfig& d) {
  Json j;
  j["name"] = d.name;
  if (!d.p.empty()) j["p"] = d.p;
  j["c"] = d.c;
  if (!d.z0.empty()) j["z0"] = d.z0;
  j["alpha"] = d.alpha;
  j["beta"] = d.beta;
  j["delayed_urn_update"] = d.delayed_urn_update;
  if (!d.a.empty()) j["a"] = d.a;
  if (!d.d_matrix.empty()) j["d_matrix"] = d.d_matrix;
  return j;
}

}  // namespace detail

inline RunConfig config_from_json(const Json& j) {
  detail::check_keys(
      j, {"mode", "design", "designs", "mc", "delay", "output", "tolerances"}, "config");
  RunConfig c;
  if (j.contains("mode")) c.mode = j["mode"].get<std::string>();
  if (j.contains("design")) c.design = detail::design_from_json(j["design"]);
  if (j.contains("designs"))
    for (const auto& d : j["designs"]) c.designs.push_back(detail::design_from_json(d));
  if (j.contains("mc")) {
    const Json& m = j["mc"];
    detail::check_keys(m, {"replications", "horizon", "seed", "jobs", "record_trajectories"},
                       "mc block");
    if (m.contains("replications")) c.mc.replications = m["replications"].get<long>();
    if (m.contains("horizon")) c.mc.horizon = m["horizon"].get<long>();
    if (m.contains("seed")) c.mc.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("jobs")) c.mc.jobs = m["jobs"].get<int>();
    if (m.contains("record_trajectories"))
      c.mc.record_trajectories = m["record_trajectories"].get<bool>();
  }
  if (j.contains("delay") && !j["delay"].is_null()) {
    const Json& d = j["delay"];
    detail::check_keys(d, {"kind", "lag", "q"}, "delay block");
    DelayBlock b;
    b.kind = d.at("kind").get<std::string>();
    if (b.kind != "none" && b.kind != "fixed" && b.kind != "geometric")
      throw std::invalid_argument("config: delay kind must be none, fixed, or geometric");
    if (d.contains("lag")) b.lag = d["lag"].get<long>();
    if (d.contains("q")) b.q = d["q"].get<double>();
    c.delay = b;
  }
  if (j.contains("output")) {
    const Json& o = j["output"];
    detail::check_keys(o, {"json", "csv"}, "output block");
    if (o.contains("json")) c.output.json = o["json"].get<std::string>();
    if (o.contains("csv")) c.output.csv = o["csv"].get<std::string>();
  }
  if (j.contains("tolerances")) {
    const Json& t = j["tolerances"];
    detail::check_keys(t, {"z_max", "cov_gap_max", "slope_max", "sigma_scale"},
                       "tolerances block");
    if (t.contains("z_max")) c.tolerances.z_max = t["z_max"].get<double>();
    if (t.contains("cov_gap_max")) c.tolerances.cov_gap_max = t["cov_gap_max"].get<double>();
    if (t.contains("slope_max")) c.tolerances.slope_max = t["slope_max"].get<double>();
    if (t.contains("sigma_scale")) c.tolerances.sigma_scale = t["sigma_scale"].get<double>();
  }
  return c;
}

inline Json config_to_json(const RunConfig& c) {
  Json j;
  if (!c.mode.empty()) j["mode"] = c.mode;
  if (!c.design.name.empty()) j["design"] = detail::design_to_json(c.design);
  if (!c.designs.empty()) {
    Json arr = Json::array();
    for (const auto& d : c.designs) arr.push_back(detail::design_to_json(d));
    j["designs"] = arr;
  }
  j["mc"] = Json{{"replications", c.mc.replications},
                 {"horizon", c.mc.horizon},
                 {"jobs", c.mc.jobs},
                 {"record_trajectories", c.mc.record_trajectories}};
  if (c.mc.seed) j["mc"]["seed"] = *c.mc.seed;
  if (c.delay) j["delay"] = Json{{"kind", c.delay->kind}, {"lag", c.delay->lag}, {"q", c.delay->q}};
  j["output"] = Json{{"json", c.output.json}, {"csv", c.output.csv}};
  j["tolerances"] = Json{{"z_max", c.tolerances.z_max},
                         {"cov_gap_max", c.tolerances.cov_gap_max},
                         {"slope_max", c.tolerances.slope_max},
                         {"sigma_scale", c.tolerances.sigma_scale}};
  return j;
}

inline DelayModel delay_from_block(const DelayBlock& b) {
  if (b.kind == "none") return DelayModel{};
  if (b.kind == "fixed") {
    if (b.lag < 0) throw std::invalid_argument("config: fixed delay lag must be >= 0");
    return DelayModel::fixed(b.lag);
  }
  if (b.kind == "geometric") {
    if (!(b.q > 0.0) || b.q > 1.0)
      throw std::invalid_argument("config: geometric delay q must lie in (0,1]");
    return DelayModel::geometric(b.q);
  }
  throw std::invalid_argument("config: delay kind must be none, fixed, or geometric");
}

// Flag form: none | fixed:L | geometric:Q
inline DelayBlock parse_delay_flag(const std::string& s) {
  DelayBlock b;
  if (s == "none") return b;
  const auto colon = s.find(':');
  const std::string head = s.substr(0, colon);
  if (colon == std::string::npos || colon + 1 == s.size())
    throw std::invalid_argument("delay flag needs a parameter, e.g. fixed:2 or geometric:0.5");
  const std::string arg = s.substr(colon + 1);
  try {
    if (head == "fixed") {
      b.kind = "fixed";
      b.lag = std::stol(arg);
    } else if (head == "geometric") {
      b.kind = "geometric";
      b.q = std::stod(arg);
    } else {
      throw std::invalid_argument("");
    }
  } catch (const std::exception&) {
    throw std::invalid_argument("cannot parse delay flag '" + s +
                                "' (want none, fixed:L, or geometric:Q)");
  }
  delay_from_block(b);  // range checks
  return b;
}

inline Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<long>(v.size()));
}

// Instantiates the named design and applies the estimator/engine options the
// config carries on top of the builder defaults.
inline NamedDesign build_design(const DesignConfig& cfg) {
  const DesignName name = parse_design_name(cfg.name);
  const Eigen::VectorXd z0 = to_vector(cfg.z0);
  NamedDesign d;
  switch (name) {
    case DesignName::bdu:
      d = build_bdu(to_vector(cfg.p), z0);
      break;
    case DesignName::dl:
      d = build_dl(to_vector(cfg.p), z0);
      break;
    case DesignName::mdl:
      d = build_mdl(to_vector(cfg.p), cfg.c, z0);
      break;
    case DesignName::gdl:
      d = build_gdl(to_vector(cfg.p), cfg.c, z0);
      break;
    case DesignName::constant: {
      const Eigen::VectorXd a = to_vector(cfg.a);
      const int k = static_cast<int>(a.size());
      if (static_cast<int>(cfg.d_matrix.size()) != k)
        throw std::invalid_argument("const design: d_matrix must have one row per treatment");
      Eigen::MatrixXd dm(k, k);
      for (int i = 0; i < k; ++i) {
        if (static_cast<int>(cfg.d_matrix[static_cast<size_t>(i)].size()) != k)
          throw std::invalid_argument("const design: d_matrix must be K x K");
        for (int j = 0; j < k; ++j) dm(i, j) = cfg.d_matrix[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
      d = build_const(a, dm, z0);
      break;
    }
  }
  if (!(cfg.alpha > 0.0) || !(cfg.beta > 0.0))
    throw std::invalid_argument("estimator constants alpha and beta must be positive");
  d.spec.estimator_alpha = cfg.alpha;
  d.spec.estimator_beta = cfg.beta;
  d.spec.delayed_urn_update = cfg.delayed_urn_update;
  return d;
}

}  // namespace imu
