#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "imu/montecarlo.hpp"
#include "imu/theory.hpp"
#include "imu/urn.hpp"

namespace imu {

using Json = nlohmann::ordered_json;

namespace detail {

inline Json vec_json(const Eigen::VectorXd& v) {
  Json arr = Json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Json mat_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Shortest exactly-round-tripping decimal form, for CSV cells.
inline std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == x) {
    for (int prec = 1; prec < 17; ++prec) {
      char shorter[40];
      std::snprintf(shorter, sizeof shorter, "%.*g", prec, x);
      std::sscanf(shorter, "%lf", &back);
      if (back == x) return shorter;
    }
  }
  return buf;
}

}  // namespace detail

inline Json summary_json(const TheoreticalSummary& t) {
  Json j;
  j["a"] = detail::vec_json(t.a);
  j["u"] = detail::vec_json(t.u);
  j["s"] = t.s;
  j["v"] = detail::vec_json(t.v);
  j["A"] = detail::mat_json(t.A);
  j["lambda11"] = detail::mat_json(t.lambda11);
  j["lambda12"] = detail::mat_json(t.lambda12);
  j["lambda22"] = detail::mat_json(t.lambda22);
  j["dv_dtheta"] = detail::mat_json(t.dv_dtheta);
  j["sigma_D"] = detail::mat_json(t.sigma_D);
  j["sigma_xi"] = detail::mat_json(t.sigma_xi);
  j["sigma_Dxi"] = detail::mat_json(t.sigma_Dxi);
  j["sigma_total"] = detail::mat_json(t.sigma_total);
  j["lower_bound"] = t.lower_bound ? detail::mat_json(*t.lower_bound) : Json();
  j["eigenvector_regime"] = t.eigenvector_regime;
  j["approximate"] = t.approximate;
  if (t.approximate) j["moment_se"] = t.moment_se;
  return j;
}

inline Json report_json(const McReport& r) {
  Json j;
  j["design"] = r.design_label;
  j["replications"] = r.replications;
  j["horizon"] = r.horizon;
  j["master_seed"] = r.master_seed;
  j["mean_proportions"] = detail::vec_json(r.mean_proportions);
  j["emp_cov"] = detail::mat_json(r.emp_cov);
  j["imm_rate"] = r.imm_rate;
  j["theory"] = summary_json(r.theory);
  j["z_scores"] = detail::vec_json(r.z_scores);
  j["cov_rel_err"] = std::isnan(r.cov_rel_err) ? Json() : Json(r.cov_rel_err);
  j["normality"] = detail::vec_json(r.normality);
  return j;
}

// One row per subject: the assignment record plus the post-step urn snapshot.
// Matched-length inputs come straight from a recording UrnProcess.
inline std::string trajectory_csv(const std::vector<AssignmentRecord>& history,
                                  const std::vector<StepSnapshot>& snapshots, double z0) {
  if (history.size() != snapshots.size())
    throw std::invalid_argument("trajectory_csv: history and snapshots must be matched");
  const int k = history.empty() ? 0 : static_cast<int>(history.front().d_row.size());

  std::string out = "step,treatment,u_m,xi,z0";
  for (int i = 1; i <= k; ++i) out += ",z" + std::to_string(i);
  for (int i = 1; i <= k; ++i) out += ",n" + std::to_string(i);
  out += ",n_imm\n";

  for (size_t r = 0; r < history.size(); ++r) {
    const AssignmentRecord& rec = history[r];
    const StepSnapshot& snap = snapshots[r];
    out += std::to_string(rec.subject);
    out += ',' + std::to_string(rec.treatment + 1);
    out += ',' + std::to_string(rec.immigration_draws);
    out += ',' + detail::num(rec.outcome);
    out += ',' + detail::num(z0);
    for (int i = 0; i < k; ++i) out += ',' + detail::num(snap.z[i]);
    for (int i = 0; i < k; ++i)
      out += ',' + std::to_string(snap.n_assigned[static_cast<size_t>(i)]);
    out += ',' + std::to_string(snap.n_immigration_draws);
    out += '\n';
  }
  return out;
}

// Per-replication summary table for plotting.
inline std::string replications_csv(const McReport& r) {
  const int k = static_cast<int>(r.mean_proportions.size());
  std::string out = "replication";
  for (int i = 1; i <= k; ++i) out += ",N" + std::to_string(i);
  out += ",N0";
  for (int i = 1; i <= k; ++i) out += ",theta_hat_" + std::to_string(i);
  out += '\n';

  for (const auto& rep : r.per_replication) {
    out += std::to_string(rep.replication);
    for (int i = 0; i < k; ++i) out += ',' + std::to_string(static_cast<long>(rep.counts[i]));
    out += ',' + std::to_string(rep.immigration_draws);
    for (int i = 0; i < k; ++i) out += ',' + detail::num(rep.theta_hat[i]);
    out += '\n';
  }
  return out;
}

}  // namespace imu
