#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "imu/config.hpp"
#include "imu/designs.hpp"
#include "imu/montecarlo.hpp"
#include "imu/serialize.hpp"
#include "imu/theory.hpp"
#include "imu/urn.hpp"

namespace {

// Exit codes: 0 ok, 1 config, 2 assumptions, 3 engine, 4 gates.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitAssumptions = 2;
constexpr int kExitEngine = 3;
constexpr int kExitGates = 4;

// Flag values held separately from the config so that only flags the user
// actually passed override file values.
struct FlagSet {
  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 0;
  std::string out_json, out_csv;
  std::string design;
  std::vector<double> p;
  double c = 1.0;
  double alpha = 0.5, beta = 1.0;
  std::vector<double> z0;
  long reps = 0, horizon = 0;
  std::string delay;
};

void add_common_flags(CLI::App* sub, FlagSet& f) {
  sub->add_option("--config", f.config_path, "JSON config file; flags override its values");
  sub->add_option("--seed", f.seed, "master seed for all randomness");
  sub->add_option("--jobs", f.jobs, "worker threads (default: hardware parallelism)");
  sub->add_option("--out-json", f.out_json, "write the JSON report to this path");
  sub->add_option("--out-csv", f.out_csv, "write the CSV output to this path");
  sub->add_option("--design", f.design, "design name: bdu, dl, mdl, gdl, const");
  sub->add_option("--p", f.p, "success probabilities, e.g. 0.3,0.4")->delimiter(',');
  sub->add_option("--c", f.c, "immigration scale for mdl/gdl");
  sub->add_option("--alpha", f.alpha, "estimator prior successes");
  sub->add_option("--beta", f.beta, "estimator prior observations");
  sub->add_option("--z0", f.z0, "initial masses, immigration type first")->delimiter(',');
  sub->add_option("--reps", f.reps, "Monte Carlo replications");
  sub->add_option("--horizon", f.horizon, "subjects per replication");
  sub->add_option("--delay", f.delay, "response delay: none, fixed:L, or geometric:Q");
}

imu::RunConfig merge_config(const CLI::App* sub, const FlagSet& f) {
  imu::RunConfig cfg;
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    if (!in) throw std::invalid_argument("cannot open config file: " + f.config_path);
    imu::Json j;
    in >> j;
    cfg = imu::config_from_json(j);
  }
  if (sub->count("--design")) cfg.design.name = f.design;
  if (sub->count("--p")) cfg.design.p = f.p;
  if (sub->count("--c")) cfg.design.c = f.c;
  if (sub->count("--alpha")) cfg.design.alpha = f.alpha;
  if (sub->count("--beta")) cfg.design.beta = f.beta;
  if (sub->count("--z0")) cfg.design.z0 = f.z0;
  if (sub->count("--seed")) cfg.mc.seed = f.seed;
  if (sub->count("--jobs")) cfg.mc.jobs = f.jobs;
  if (sub->count("--reps")) cfg.mc.replications = f.reps;
  if (sub->count("--horizon")) cfg.mc.horizon = f.horizon;
  if (sub->count("--delay")) cfg.delay = imu::parse_delay_flag(f.delay);
  if (sub->count("--out-json")) cfg.output.json = f.out_json;
  if (sub->count("--out-csv")) cfg.output.csv = f.out_csv;
  return cfg;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("cannot open output file: " + path);
  out << content;
}

void emit_json(const imu::Json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  std::cout << text;
  if (!path.empty()) write_file(path, text);
}

imu::NamedDesign design_from_config(const imu::RunConfig& cfg) {
  if (cfg.design.name.empty())
    throw std::invalid_argument("no design given (use --design or a config file)");
  return imu::build_design(cfg.design);
}

int effective_jobs(const imu::RunConfig& cfg) {
  if (cfg.mc.jobs > 0) return cfg.mc.jobs;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int cmd_theory(const imu::RunConfig& cfg) {
  const imu::NamedDesign d = design_from_config(cfg);
  const imu::TheoreticalSummary summary = imu::design_summary(d);
  imu::Json j = imu::summary_json(summary);
  j["design"] = d.label;
  emit_json(j, cfg.output.json);
  return kExitOk;
}

int cmd_simulate(const imu::RunConfig& cfg) {
  imu::NamedDesign d = design_from_config(cfg);
  if (cfg.delay) d.spec.delay = imu::delay_from_block(*cfg.delay);

  std::uint64_t seed;
  if (cfg.mc.seed) {
    seed = *cfg.mc.seed;
  } else {
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }

  imu::UrnProcess proc(d.spec, seed, /*record_history=*/true);
  proc.run(cfg.mc.horizon);
  const imu::UrnState& st = proc.state();

  const imu::LedgerReport ledger = imu::ledger_scan(
      st.z_initial, proc.history(), proc.immigration_history(), proc.snapshots(),
      d.spec.delayed_urn_update);

  imu::Json j;
  j["design"] = d.label;
  j["horizon"] = cfg.mc.horizon;
  j["master_seed"] = seed;
  j["seed_from_entropy"] = !cfg.mc.seed.has_value();
  imu::Json fin;
  {
    imu::Json counts = imu::Json::array();
    imu::Json props = imu::Json::array();
    for (int i = 0; i < st.k(); ++i) {
      counts.push_back(st.n_assigned[static_cast<size_t>(i)]);
      props.push_back(cfg.mc.horizon > 0
                          ? static_cast<double>(st.n_assigned[static_cast<size_t>(i)]) /
                                static_cast<double>(cfg.mc.horizon)
                          : 0.0);
    }
    fin["counts"] = counts;
    fin["proportions"] = props;
    fin["immigration_draws"] = st.n_immigration_draws;
    fin["theta_hat"] = imu::detail::vec_json(proc.current_estimates());
    fin["z"] = imu::detail::vec_json(st.z);
    fin["z0"] = st.z0;
    fin["pending_responses"] = proc.pending_responses();
  }
  j["final"] = fin;
  j["ledger"] = imu::Json{{"ok", ledger.ok},
                          {"first_bad_step", ledger.first_bad_step},
                          {"max_abs_error", ledger.max_abs_error},
                          {"tolerance", ledger.tolerance}};
  emit_json(j, cfg.output.json);
  if (!cfg.output.csv.empty())
    write_file(cfg.output.csv, imu::trajectory_csv(proc.history(), proc.snapshots(), st.z0));
  return ledger.ok ? kExitOk : kExitEngine;
}

int cmd_verify(const imu::RunConfig& cfg) {
  if (!cfg.mc.seed)
    throw std::invalid_argument("verify requires --seed (reproducibility by default)");
  const imu::NamedDesign d = design_from_config(cfg);

  imu::McConfig mc;
  mc.design = d;
  mc.replications = cfg.mc.replications;
  mc.horizon = cfg.mc.horizon;
  mc.master_seed = *cfg.mc.seed;
  if (cfg.delay) mc.delay = imu::delay_from_block(*cfg.delay);
  mc.jobs = effective_jobs(cfg);

  imu::McReport report = imu::run_replications(mc);

  // Test hook: deliberately mis-scale the predicted covariance so the gates
  // can be shown to catch a wrong theory.
  const double scale = cfg.tolerances.sigma_scale;
  if (scale != 1.0 && !report.theory.eigenvector_regime && report.theory.sigma_total.size() > 0) {
    report.theory.sigma_total *= scale;
    const double n = static_cast<double>(report.horizon);
    const double r = static_cast<double>(report.replications);
    double gap = 0.0;
    for (int i = 0; i < report.theory.sigma_total.rows(); ++i) {
      const double denom = report.theory.sigma_total(i, i);
      const double se = std::sqrt(denom / (n * r));
      report.z_scores[i] = (report.mean_proportions[i] - report.theory.v[i]) / se;
      if (denom > 0.0) gap = std::max(gap, std::abs(report.emp_cov(i, i) - denom) / denom);
    }
    report.cov_rel_err = gap;
  }

  std::vector<std::string> failures;
  for (int i = 0; i < report.z_scores.size(); ++i) {
    const double z = report.z_scores[i];
    if (!std::isfinite(z) || std::abs(z) > cfg.tolerances.z_max) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "z-score gate: |z_%d| = %.3f exceeds %.3f", i + 1,
                    z, cfg.tolerances.z_max);
      failures.push_back(buf);
    }
  }
  imu::Json j = imu::report_json(report);
  if (report.theory.eigenvector_regime) {
    std::vector<long> grid = {std::max(10L, cfg.mc.horizon / 16),
                              std::max(10L, cfg.mc.horizon / 4), cfg.mc.horizon};
    const imu::ScalingReport scaling = imu::scaling_consistency_check(
        d, grid, cfg.mc.replications, *cfg.mc.seed, cfg.tolerances.slope_max);
    imu::Json sj;
    sj["n_grid"] = scaling.n_grid;
    sj["rms"] = scaling.rms;
    sj["slope"] = scaling.slope;
    sj["passed"] = scaling.passed;
    j["scaling"] = sj;
    if (!scaling.passed) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "scaling gate: slope %.3f exceeds %.3f", scaling.slope,
                    cfg.tolerances.slope_max);
      failures.push_back(buf);
    }
  } else {
    const double gap = imu::covariance_gap(report);
    if (!(gap <= cfg.tolerances.cov_gap_max)) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "covariance gate: gap %.3f exceeds %.3f", gap,
                    cfg.tolerances.cov_gap_max);
      failures.push_back(buf);
    }
  }

  emit_json(j, cfg.output.json);
  if (!cfg.output.csv.empty()) write_file(cfg.output.csv, imu::replications_csv(report));
  if (!failures.empty()) {
    for (const auto& f : failures) std::cerr << "FAIL " << f << "\n";
    return kExitGates;
  }
  return kExitOk;
}

int cmd_compare(const imu::RunConfig& cfg) {
  std::vector<imu::DesignConfig> blocks = cfg.designs;
  if (blocks.empty() && !cfg.design.name.empty()) blocks.push_back(cfg.design);
  if (blocks.size() < 2)
    throw std::invalid_argument("compare needs at least two designs (config key `designs`)");

  std::string csv = "design,treatment,v,sigma_diag,lower_bound_diag,efficiency_ratio\n";
  auto append_row = [&csv](const std::string& label, int arm, double v, double sigma,
                           double bound) {
    csv += label + ',' + std::to_string(arm + 1);
    csv += ',' + imu::detail::num(v);
    csv += ',' + (std::isfinite(sigma) ? imu::detail::num(sigma) : std::string());
    csv += ',' + (std::isfinite(bound) ? imu::detail::num(bound) : std::string());
    const double ratio = sigma / bound;
    csv += ',' + (std::isfinite(ratio) ? imu::detail::num(ratio) : std::string());
    csv += '\n';
  };

  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& block : blocks) {
    const imu::NamedDesign d = imu::build_design(block);
    const imu::TheoreticalSummary t = imu::design_summary(d);
    const int k = static_cast<int>(t.v.size());
    for (int i = 0; i < k; ++i) {
      const double sigma = t.eigenvector_regime ? nan : t.sigma_total(i, i);
      const double bound = t.lower_bound ? (*t.lower_bound)(i, i) : nan;
      append_row(d.label, i, t.v[i], sigma, bound);
    }
    if (d.name == imu::DesignName::gdl) {
      // Reference: the classical urn targeting the same allocation, for the
      // efficiency comparison the gdl design motivates.
      const double gpu = imu::gpu_reference_variance(d.p);
      const double bound = t.lower_bound ? (*t.lower_bound)(0, 0) : nan;
      std::string label = d.label;
      label.replace(0, 3, "gpu_ref");
      for (int i = 0; i < k; ++i) append_row(label, i, t.v[i], gpu, bound);
    }
  }

  std::cout << csv;
  if (!cfg.output.csv.empty()) write_file(cfg.output.csv, csv);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"immigrated-urn adaptive allocation: simulation, theory, verification"};
  app.require_subcommand(1);

  FlagSet f_theory, f_sim, f_verify, f_compare;
  CLI::App* sub_theory = app.add_subcommand("theory", "analytic limits, covariance, lower bound");
  CLI::App* sub_sim = app.add_subcommand("simulate", "single trajectory with full bookkeeping");
  CLI::App* sub_verify =
      app.add_subcommand("verify", "Monte Carlo gates against the analytic predictions");
  CLI::App* sub_compare = app.add_subcommand("compare", "design efficiency table");
  add_common_flags(sub_theory, f_theory);
  add_common_flags(sub_sim, f_sim);
  add_common_flags(sub_verify, f_verify);
  add_common_flags(sub_compare, f_compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (sub_theory->parsed()) return cmd_theory(merge_config(sub_theory, f_theory));
    if (sub_sim->parsed()) return cmd_simulate(merge_config(sub_sim, f_sim));
    if (sub_verify->parsed()) return cmd_verify(merge_config(sub_verify, f_verify));
    if (sub_compare->parsed()) return cmd_compare(merge_config(sub_compare, f_compare));
    return kExitConfig;
  } catch (const imu::AssumptionViolated& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::DegenerateEigenvalue& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::NotTheorem32Regime& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::NonPositiveFisher& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::NotDiagonalDesign& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::SingularSystem& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::NonFiniteDerivative& e) {
    std::cerr << "assumption violated: " << e.what() << "\n";
    return kExitAssumptions;
  } catch (const imu::Error& e) {
    std::cerr << "engine error: " << e.what() << "\n";
    return kExitEngine;
  } catch (const imu::Json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEngine;
  }
}
