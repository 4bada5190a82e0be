#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "imu/designs.hpp"
#include "imu/errors.hpp"
#include "imu/theory.hpp"
#include "imu/urn.hpp"

namespace imu {

struct McConfig {
  NamedDesign design;
  long replications = 1000;
  long horizon = 5000;
  std::uint64_t master_seed = 0;
  bool record_trajectories = false;
  std::optional<DelayModel> delay;  // overrides the design's own delay model
  int jobs = 1;                     // worker threads; the report does not depend on this
};

struct ReplicationResult {
  long replication = 0;  // 0-based index, also the seed-derivation index
  Eigen::VectorXd counts;
  long immigration_draws = 0;
  Eigen::VectorXd theta_hat;
  std::vector<StepSnapshot> trajectory;  // filled only when requested
};

struct McReport {
  long replications = 0;
  long horizon = 0;
  std::uint64_t master_seed = 0;
  std::string design_label;
  TheoreticalSummary theory;
  Eigen::VectorXd mean_proportions;  // mean of N_n/n across replications
  Eigen::MatrixXd emp_cov;           // empirical covariance of sqrt(n)(N_n/n - v)
  double imm_rate = 0.0;             // mean of N_{n,0}/n
  Eigen::VectorXd z_scores;          // standardized gaps of mean_proportions from v; CLT scale
                                     // (SE of the mean) when a covariance is predicted, single-
                                     // replication scale in the eigenvector regime, where only
                                     // consistency is claimed and the mean has a sqrt(n) drift
  double cov_rel_err = 0.0;          // max relative diagonal gap vs sigma_total (NaN in the
                                     // eigenvector regime, where no covariance is predicted)
  Eigen::VectorXd normality;         // per-treatment KS distance from standard normal
  std::vector<ReplicationResult> per_replication;
};

// Kolmogorov-Smirnov distance of a sample from the standard normal.
inline double ks_statistic_vs_normal(std::vector<double> x) {
  if (x.empty()) return 0.0;
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-x[i] / std::sqrt(2.0));
    d = std::max(d, std::max(cdf - static_cast<double>(i) / n,
                             static_cast<double>(i + 1) / n - cdf));
  }
  return d;
}

namespace detail {

inline ReplicationResult run_one_replication(const McConfig& cfg, long rep) {
  DesignSpec spec = cfg.design.spec;
  if (cfg.delay) spec.delay = *cfg.delay;
  UrnProcess proc(spec, RngStream::derive_seed(cfg.master_seed, static_cast<std::uint64_t>(rep)),
                  cfg.record_trajectories);
  proc.run(cfg.horizon);

  ReplicationResult r;
  r.replication = rep;
  const UrnState& st = proc.state();
  r.counts.resize(st.k());
  for (int i = 0; i < st.k(); ++i) r.counts[i] = static_cast<double>(st.n_assigned[static_cast<size_t>(i)]);
  r.immigration_draws = st.n_immigration_draws;
  r.theta_hat = proc.current_estimates();
  if (cfg.record_trajectories) r.trajectory = proc.snapshots();
  return r;
}

[[noreturn]] inline void rethrow_with_replication(long rep, const std::exception_ptr& ep) {
  const std::string tag = "replication " + std::to_string(rep) + ": ";
  try {
    std::rethrow_exception(ep);
  } catch (const ImmigrationLoopExceeded& e) {
    throw ImmigrationLoopExceeded(tag + e.what());
  } catch (const Error& e) {
    throw Error(tag + e.what());
  } catch (const std::exception& e) {
    throw Error(tag + e.what());
  }
}

}  // namespace detail

// Runs R independent replications with per-replication derived seeds and
// aggregates the report. Results are collected per index and reduced in
// replication order, so the report is byte-identical for any jobs value.
inline McReport run_replications(const McConfig& cfg) {
  if (cfg.replications < 1 || cfg.horizon < 1)
    throw std::invalid_argument("McConfig: replications and horizon must be >= 1");

  McReport rep;
  rep.replications = cfg.replications;
  rep.horizon = cfg.horizon;
  rep.master_seed = cfg.master_seed;
  rep.design_label = cfg.design.label;
  // Throws AssumptionViolated when the design is outside both supported
  // regimes (for example bdu with some p_k >= 1/2).
  rep.theory = design_summary(cfg.design);

  const long R = cfg.replications;
  std::vector<ReplicationResult> results(static_cast<size_t>(R));
  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    for (long i = 0; i < R; ++i) {
      try {
        results[static_cast<size_t>(i)] = detail::run_one_replication(cfg, i);
      } catch (...) {
        detail::rethrow_with_replication(i, std::current_exception());
      }
    }
  } else {
    std::atomic<long> next(0);
    std::mutex err_mutex;
    long first_err_rep = -1;
    std::exception_ptr first_err;
    std::atomic<bool> aborted(false);
    auto worker = [&] {
      while (!aborted.load(std::memory_order_relaxed)) {
        const long i = next.fetch_add(1);
        if (i >= R) break;
        try {
          results[static_cast<size_t>(i)] = detail::run_one_replication(cfg, i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (first_err_rep < 0 || i < first_err_rep) {
            first_err_rep = i;
            first_err = std::current_exception();
          }
          aborted.store(true, std::memory_order_relaxed);
        }
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_err) detail::rethrow_with_replication(first_err_rep, first_err);
  }

  const int k = cfg.design.spec.k_treatments;
  const double n = static_cast<double>(cfg.horizon);
  const double sqrt_n = std::sqrt(n);
  const Eigen::VectorXd& v = rep.theory.v;

  Eigen::VectorXd mean_prop = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd mean_y = Eigen::VectorXd::Zero(k);
  double imm_sum = 0.0;
  for (const auto& r : results) {
    mean_prop += r.counts / n;
    mean_y += sqrt_n * (r.counts / n - v);
    imm_sum += static_cast<double>(r.immigration_draws) / n;
  }
  const double r_count = static_cast<double>(R);
  mean_prop /= r_count;
  mean_y /= r_count;
  rep.mean_proportions = mean_prop;
  rep.imm_rate = imm_sum / r_count;

  Eigen::MatrixXd emp = Eigen::MatrixXd::Zero(k, k);
  if (R >= 2) {
    for (const auto& r : results) {
      const Eigen::VectorXd y = sqrt_n * (r.counts / n - v) - mean_y;
      emp.noalias() += y * y.transpose();
    }
    emp /= (r_count - 1.0);
  }
  rep.emp_cov = emp;

  const bool have_sigma = !rep.theory.eigenvector_regime && rep.theory.sigma_total.size() > 0;
  rep.z_scores.resize(k);
  rep.normality.resize(k);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < k; ++i) {
    const double sd_theory = have_sigma ? std::sqrt(rep.theory.sigma_total(i, i)) : 0.0;
    const double sd_emp = R >= 2 ? std::sqrt(emp(i, i)) : 0.0;
    const double sd = have_sigma && sd_theory > 0.0 ? sd_theory : sd_emp;
    const double se = rep.theory.eigenvector_regime ? sd_emp / sqrt_n
                                                  : sd / std::sqrt(n * r_count);
    rep.z_scores[i] = se > 0.0 ? (mean_prop[i] - v[i]) / se : nan;

    std::vector<double> standardized;
    standardized.reserve(static_cast<size_t>(R));
    if (sd > 0.0)
      for (const auto& r : results)
        standardized.push_back(sqrt_n * (r.counts[i] / n - v[i]) / sd);
    rep.normality[i] = standardized.empty() ? nan : ks_statistic_vs_normal(std::move(standardized));
  }

  if (have_sigma) {
    double gap = 0.0;
    for (int i = 0; i < k; ++i) {
      const double denom = rep.theory.sigma_total(i, i);
      if (denom > 0.0) gap = std::max(gap, std::abs(emp(i, i) - denom) / denom);
    }
    rep.cov_rel_err = gap;
  } else {
    rep.cov_rel_err = nan;
  }

  rep.per_replication = std::move(results);
  return rep;
}

// Max relative diagonal gap between the empirical and theoretical covariance.
// Guarded by a minimum replication count; below it the empirical diagonal is
// too noisy for the acceptance gates to mean anything.
inline double covariance_gap(const McReport& report) {
  if (report.replications < 200)
    throw InsufficientReplications("covariance_gap needs R >= 200, got " +
                                   std::to_string(report.replications));
  if (report.theory.eigenvector_regime || report.theory.sigma_total.size() == 0)
    throw std::invalid_argument("covariance_gap: report carries no theoretical covariance");
  return report.cov_rel_err;
}

struct ScalingReport {
  Eigen::VectorXd v;
  std::vector<long> n_grid;
  std::vector<double> rms;  // RMS of ||N_n - n v|| at each grid point
  double slope = 0.0;       // least-squares slope of log rms against log n
  bool passed = false;
};

// Consistency check for the unit-row-sum regime: the error norm should grow
// like sqrt(n) (up to log-log factors), so the fitted log-log slope stays
// well below 1.
inline ScalingReport scaling_consistency_check(const NamedDesign& design,
                                               const std::vector<long>& n_grid, long R,
                                               std::uint64_t master_seed,
                                               double max_slope = 0.62) {
  if (!validate_assumptions(design.moments).eigenvector_regime)
    throw NotTheorem32Regime("scaling_consistency_check needs unit mean row sums");
  if (n_grid.size() < 2 || R < 1)
    throw std::invalid_argument("scaling_consistency_check: need >= 2 grid points and R >= 1");

  ScalingReport out;
  out.v = eigenvector_limit(design.moments.h);
  out.n_grid = n_grid;

  for (size_t g = 0; g < n_grid.size(); ++g) {
    const std::uint64_t grid_seed =
        RngStream::derive_seed(master_seed, static_cast<std::uint64_t>(g));
    const double n = static_cast<double>(n_grid[g]);
    double sum_sq = 0.0;
    for (long r = 0; r < R; ++r) {
      UrnProcess proc(design.spec,
                      RngStream::derive_seed(grid_seed, static_cast<std::uint64_t>(r)));
      proc.run(n_grid[g]);
      const UrnState& st = proc.state();
      double err_sq = 0.0;
      for (int i = 0; i < st.k(); ++i) {
        const double e = static_cast<double>(st.n_assigned[static_cast<size_t>(i)]) - n * out.v[i];
        err_sq += e * e;
      }
      sum_sq += err_sq;
    }
    out.rms.push_back(std::sqrt(sum_sq / static_cast<double>(R)));
  }

  // least-squares slope of log rms on log n
  const size_t g_count = n_grid.size();
  double mx = 0.0, my = 0.0;
  for (size_t g = 0; g < g_count; ++g) {
    mx += std::log(static_cast<double>(n_grid[g]));
    my += std::log(std::max(out.rms[g], 1e-300));
  }
  mx /= static_cast<double>(g_count);
  my /= static_cast<double>(g_count);
  double sxx = 0.0, sxy = 0.0;
  for (size_t g = 0; g < g_count; ++g) {
    const double dx = std::log(static_cast<double>(n_grid[g])) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(std::max(out.rms[g], 1e-300)) - my);
  }
  out.slope = sxy / sxx;
  out.passed = out.slope <= max_slope;
  return out;
}

}  // namespace imu
