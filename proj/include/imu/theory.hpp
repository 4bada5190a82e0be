#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "imu/errors.hpp"
#include "imu/rng.hpp"
#include "imu/urn.hpp"

namespace imu {

// First and second moments of a design's adding rule and outcomes, the true
// outcome means theta, and the immigration-rate function. Everything the
// analytic pipeline needs, decoupled from how the design samples.
struct MomentSpec {
  Eigen::MatrixXd h;                     // H(k,j) = E[D_{1,kj}]
  std::vector<Eigen::MatrixXd> sigma_k;  // per-treatment Var(D_1^(k))
  Eigen::MatrixXd sigma12;               // (j,k) = Cov(D_{1,kj}, xi_{1,k})
  Eigen::VectorXd var_xi;                // Var(xi_{1,k})
  Eigen::VectorXd theta;                 // true outcome means
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> a_fn;
  // Optional analytic Jacobian, entry (j,k) = da_k/dtheta_j. Built-in designs
  // provide it; when absent, numeric differentiation is used.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> da_dtheta;
  bool estimated_from_samples = false;  // moments came from sampling the adding rule
  double moment_se = 0.0;               // max standard error of the estimated moments

  int k() const { return static_cast<int>(h.rows()); }
};

// D-rows linear in a scalar statistic: D_1^(k) = alpha_k + beta_k * eta_k,
// with d_k = E[eta_k] the parameter the lower bound is taken against.
struct LinearRuleSpec {
  std::vector<Eigen::VectorXd> alpha_k;
  std::vector<Eigen::VectorXd> beta_k;
  Eigen::VectorXd d;           // E[eta_k]
  Eigen::VectorXd var_eta;     // Var(eta_k), componentwise > 0
  Eigen::VectorXd cov_eta_xi;  // Cov(eta_k, xi_k)
  Eigen::VectorXd fisher;      // Fisher information I_k for d_k, componentwise > 0
};

struct TheoreticalSummary {
  Eigen::VectorXd a;  // immigration rates at theta
  Eigen::VectorXd u;  // a (I-H)^-1
  double s = 0.0;     // u 1'
  Eigen::VectorXd v;  // u / s, the limit allocation proportions
  Eigen::MatrixXd A;  // (I-H)^-1 (I - 1'v)
  Eigen::MatrixXd lambda11, lambda12, lambda22;
  Eigen::MatrixXd dv_dtheta;  // (j,k) = dv_k/dtheta_j
  Eigen::MatrixXd sigma_D, sigma_xi, sigma_Dxi, sigma_total;
  std::optional<Eigen::MatrixXd> lower_bound;
  // Unit-row-sum H: only v (the left unit eigenvector) is defined; the
  // covariance blocks above are left empty.
  bool eigenvector_regime = false;
  bool approximate = false;  // moments were estimated by sampling
  double moment_se = 0.0;
};

enum class JacobianMode { analytic, numeric };

namespace detail {

inline void require_square(const Eigen::MatrixXd& m, const char* name) {
  if (m.rows() != m.cols() || m.rows() < 1)
    throw std::invalid_argument(std::string(name) + ": square matrix required");
}

inline void check_row_sums(const Eigen::MatrixXd& h) {
  require_square(h, "h");
  for (int k = 0; k < h.rows(); ++k) {
    const double row = h.row(k).sum();
    if (row >= 1.0 - 1e-9)
      throw AssumptionViolated("mean adding-matrix row " + std::to_string(k + 1) +
                               " sums to " + std::to_string(row) +
                               "; immigration cannot dominate (need row sums < 1)");
  }
}

inline Eigen::VectorXd eval_a(const MomentSpec& m, const Eigen::VectorXd& theta) {
  if (!m.a_fn) throw std::invalid_argument("MomentSpec: a_fn not set");
  Eigen::VectorXd a = m.a_fn(theta);
  if (a.size() != m.k()) throw std::invalid_argument("a_fn returned wrong dimension");
  return a;
}

// u = a (I-H)^-1 via a full-pivot LU on (I-H)', with invertibility check.
inline Eigen::VectorXd solve_u(const Eigen::MatrixXd& h, const Eigen::VectorXd& a) {
  const int k = static_cast<int>(h.rows());
  const Eigen::MatrixXd ih_t = (Eigen::MatrixXd::Identity(k, k) - h).transpose();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ih_t);
  // refuse near-singular systems instead of returning noise; valid designs
  // keep row sums of H at least 1e-9 below one, far from this cutoff
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) throw SingularSystem("I - H is singular to working precision");
  return lu.solve(a);
}

// Limit proportions from (H, a) without assumption checks; internal building block.
inline Eigen::VectorXd v_from(const Eigen::MatrixXd& h, const Eigen::VectorXd& a) {
  const Eigen::VectorXd u = solve_u(h, a);
  const double s = u.sum();
  if (!(s > 0.0) || !std::isfinite(s)) throw SingularSystem("total limit mass s is not positive");
  return u / s;
}

}  // namespace detail

// v = a(I-H)^-1 / (a(I-H)^-1 1'), the almost-sure limit of N_n/n.
inline Eigen::VectorXd limit_proportions(const MomentSpec& m) {
  detail::check_row_sums(m.h);
  const Eigen::VectorXd a = detail::eval_a(m, m.theta);
  if ((a.array() <= 0.0).any() || !a.allFinite())
    throw AssumptionViolated("immigration rates a(theta) must be componentwise positive");
  const Eigen::VectorXd v = detail::v_from(m.h, a);
  if ((v.array() <= 0.0).any())
    throw AssumptionViolated("limit proportions not componentwise positive");
  return v;
}

// A = (I-H)^-1 (I - 1'v); satisfies A 1' = 0.
inline Eigen::MatrixXd mixing_matrix_A(const MomentSpec& m) {
  const int k = m.k();
  const Eigen::VectorXd v = limit_proportions(m);
  const Eigen::MatrixXd ih = Eigen::MatrixXd::Identity(k, k) - m.h;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(ih);
  if (!lu.isInvertible()) throw SingularSystem("I - H is singular to working precision");
  return lu.solve(Eigen::MatrixXd::Identity(k, k) -
                  Eigen::VectorXd::Ones(k) * v.transpose());
}

// Jacobian of the limit proportions in theta, entry (j,k) = dv_k/dtheta_j.
// The dependence runs through a(theta) only; H is held fixed. Analytic mode
// uses the identity dv/dtheta = (1/s) (da/dtheta) A.
inline Eigen::MatrixXd jacobian_dv_dtheta(const MomentSpec& m, JacobianMode mode) {
  const int k = m.k();
  detail::check_row_sums(m.h);
  if (mode == JacobianMode::analytic) {
    if (!m.da_dtheta)
      throw std::invalid_argument("jacobian_dv_dtheta: analytic mode needs da_dtheta");
    const Eigen::VectorXd a = detail::eval_a(m, m.theta);
    const Eigen::VectorXd u = detail::solve_u(m.h, a);
    const double s = u.sum();
    const Eigen::MatrixXd da = m.da_dtheta(m.theta);
    if (da.rows() != k || da.cols() != k)
      throw std::invalid_argument("da_dtheta returned wrong dimension");
    Eigen::MatrixXd jac = (1.0 / s) * da * mixing_matrix_A(m);
    if (!jac.allFinite()) throw NonFiniteDerivative("analytic Jacobian is not finite");
    return jac;
  }
  Eigen::MatrixXd jac(k, k);
  for (int j = 0; j < k; ++j) {
    const double step = std::max(1e-6, 1e-6 * std::abs(m.theta[j]));
    Eigen::VectorXd lo = m.theta, hi = m.theta;
    lo[j] -= step;
    hi[j] += step;
    try {
      const Eigen::VectorXd v_hi = detail::v_from(m.h, detail::eval_a(m, hi));
      const Eigen::VectorXd v_lo = detail::v_from(m.h, detail::eval_a(m, lo));
      jac.row(j) = ((v_hi - v_lo) / (2.0 * step)).transpose();
    } catch (const std::exception& e) {
      throw NonFiniteDerivative(std::string("perturbed evaluation failed: ") + e.what());
    }
  }
  if (!jac.allFinite()) throw NonFiniteDerivative("numeric Jacobian is not finite");
  return jac;
}

// Full covariance decomposition Sigma = Sigma_D + 2 Sigma_xi + Sigma_Dxi +
// Sigma_Dxi' for sqrt(n)(N_n/n - v), via the generic matrix pipeline.
inline TheoreticalSummary asymptotic_covariance(const MomentSpec& m) {
  const int k = m.k();
  if (static_cast<int>(m.sigma_k.size()) != k)
    throw std::invalid_argument("MomentSpec: need one sigma_k per treatment");
  if (m.sigma12.rows() != k || m.sigma12.cols() != k || m.var_xi.size() != k)
    throw std::invalid_argument("MomentSpec: sigma12/var_xi dimensions mismatch");

  TheoreticalSummary out;
  detail::check_row_sums(m.h);
  out.a = detail::eval_a(m, m.theta);
  if ((out.a.array() <= 0.0).any())
    throw AssumptionViolated("immigration rates a(theta) must be componentwise positive");
  out.u = detail::solve_u(m.h, out.a);
  out.s = out.u.sum();
  if (!(out.s > 0.0)) throw SingularSystem("total limit mass s is not positive");
  out.v = out.u / out.s;
  out.A = mixing_matrix_A(m);
  out.dv_dtheta =
      jacobian_dv_dtheta(m, m.da_dtheta ? JacobianMode::analytic : JacobianMode::numeric);

  out.lambda11 = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < k; ++i) {
    if (m.sigma_k[static_cast<size_t>(i)].rows() != k ||
        m.sigma_k[static_cast<size_t>(i)].cols() != k)
      throw std::invalid_argument("MomentSpec: sigma_k dimension mismatch");
    out.lambda11 += out.v[i] * m.sigma_k[static_cast<size_t>(i)];
  }
  out.lambda12 = m.sigma12 * out.v.asDiagonal();
  out.lambda22 = (m.var_xi.array() * out.v.array()).matrix().asDiagonal();

  const Eigen::VectorXd xi_weights = (m.var_xi.array() / out.v.array()).matrix();
  out.sigma_D = out.A.transpose() * out.lambda11 * out.A;
  out.sigma_xi = out.dv_dtheta.transpose() * xi_weights.asDiagonal() * out.dv_dtheta;
  out.sigma_Dxi = out.A.transpose() * m.sigma12 * out.dv_dtheta;
  out.sigma_total =
      out.sigma_D + 2.0 * out.sigma_xi + out.sigma_Dxi + out.sigma_Dxi.transpose();
  out.approximate = m.estimated_from_samples;
  out.moment_se = m.moment_se;
  return out;
}

// Same covariance for diagonal adding rules, computed along the independent
// scalar route: v_k = (a_k/h_k)/S with h_k = 1 - E[D_kk], Jacobians taken in
// (theta, h) coordinates, no matrix inversion anywhere. Cross-checks the
// generic pipeline.
inline TheoreticalSummary asymptotic_covariance_diagonal(const MomentSpec& m) {
  const int k = m.k();
  if (static_cast<int>(m.sigma_k.size()) != k || m.sigma12.rows() != k ||
      m.sigma12.cols() != k || m.var_xi.size() != k)
    throw std::invalid_argument("MomentSpec: moment dimensions mismatch");
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      if (i != j && m.h(i, j) != 0.0)
        throw NotDiagonalDesign("H has a nonzero off-diagonal entry");
      if (i != j && m.sigma12(i, j) != 0.0)
        throw NotDiagonalDesign("sigma12 has a nonzero off-diagonal entry");
      for (int t = 0; t < k; ++t)
        if (!(i == t && j == t) && m.sigma_k[static_cast<size_t>(t)](i, j) != 0.0)
          throw NotDiagonalDesign("sigma_k has mass outside the (k,k) entry");
    }

  Eigen::VectorXd h(k), var_d(k), cov_dxi(k);
  for (int i = 0; i < k; ++i) {
    h[i] = 1.0 - m.h(i, i);
    if (h[i] <= 1e-9)
      throw AssumptionViolated("1 - E[D_kk] must be positive for treatment " +
                               std::to_string(i + 1));
    var_d[i] = m.sigma_k[static_cast<size_t>(i)](i, i);
    cov_dxi[i] = m.sigma12(i, i);
  }

  TheoreticalSummary out;
  out.a = detail::eval_a(m, m.theta);
  if ((out.a.array() <= 0.0).any())
    throw AssumptionViolated("immigration rates a(theta) must be componentwise positive");
  out.u = (out.a.array() / h.array()).matrix();
  out.s = out.u.sum();
  out.v = out.u / out.s;
  const Eigen::VectorXd& v = out.v;

  // (l,k) entry (1/h_l)(delta_lk - v_k); the diagonal-case closed form of A.
  Eigen::MatrixXd a_diag(k, k);
  for (int l = 0; l < k; ++l)
    for (int j = 0; j < k; ++j) a_diag(l, j) = ((l == j ? 1.0 : 0.0) - v[j]) / h[l];
  out.A = a_diag;

  // dv/dh, entry (j,k) = (v_j/h_j)(v_k - delta_jk)
  Eigen::MatrixXd j_h(k, k);
  for (int j = 0; j < k; ++j)
    for (int t = 0; t < k; ++t) j_h(j, t) = v[j] / h[j] * (v[t] - (j == t ? 1.0 : 0.0));

  Eigen::MatrixXd j_theta;
  if (m.da_dtheta) {
    j_theta = m.da_dtheta(m.theta) * a_diag / out.s;
  } else {
    j_theta.resize(k, k);
    for (int j = 0; j < k; ++j) {
      const double step = std::max(1e-6, 1e-6 * std::abs(m.theta[j]));
      Eigen::VectorXd lo = m.theta, hi = m.theta;
      lo[j] -= step;
      hi[j] += step;
      const Eigen::VectorXd w_hi = (detail::eval_a(m, hi).array() / h.array()).matrix();
      const Eigen::VectorXd w_lo = (detail::eval_a(m, lo).array() / h.array()).matrix();
      j_theta.row(j) = ((w_hi / w_hi.sum() - w_lo / w_lo.sum()) / (2.0 * step)).transpose();
    }
  }
  if (!j_theta.allFinite()) throw NonFiniteDerivative("diagonal-route Jacobian is not finite");
  out.dv_dtheta = j_theta;

  out.lambda11 = (var_d.array() * v.array()).matrix().asDiagonal();
  out.lambda12 = (cov_dxi.array() * v.array()).matrix().asDiagonal();
  out.lambda22 = (m.var_xi.array() * v.array()).matrix().asDiagonal();

  out.sigma_D = j_h.transpose() * (var_d.array() / v.array()).matrix().asDiagonal() * j_h;
  out.sigma_xi =
      j_theta.transpose() * (m.var_xi.array() / v.array()).matrix().asDiagonal() * j_theta;
  out.sigma_Dxi =
      -j_h.transpose() * (cov_dxi.array() / v.array()).matrix().asDiagonal() * j_theta;
  out.sigma_total =
      out.sigma_D + 2.0 * out.sigma_xi + out.sigma_Dxi + out.sigma_Dxi.transpose();
  out.approximate = m.estimated_from_samples;
  out.moment_se = m.moment_se;
  return out;
}

// Unit-row-sum H: allocation limit is the left unit eigenvector, normalized
// to sum 1. Requires eigenvalue 1 to be simple.
inline Eigen::VectorXd eigenvector_limit(const Eigen::MatrixXd& h) {
  detail::require_square(h, "h");
  const int k = static_cast<int>(h.rows());
  if (((h * Eigen::VectorXd::Ones(k)) - Eigen::VectorXd::Ones(k)).cwiseAbs().maxCoeff() > 1e-12)
    throw AssumptionViolated("eigenvector_limit: H must have unit row sums");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(h.transpose() - Eigen::MatrixXd::Identity(k, k));
  if (lu.rank() != k - 1)
    throw DegenerateEigenvalue("eigenvalue 1 of H is not simple (rank of H' - I is " +
                               std::to_string(lu.rank()) + ", need K-1)");
  Eigen::VectorXd v = lu.kernel().col(0);
  const double total = v.sum();
  if (std::abs(total) < 1e-300)
    throw DegenerateEigenvalue("left unit eigenvector has zero total mass");
  v /= total;
  for (int i = 0; i < k; ++i) {
    if (v[i] < -1e-9)
      throw DegenerateEigenvalue("left unit eigenvector is not nonnegative");
    if (v[i] < 0.0) v[i] = 0.0;
  }
  return v / v.sum();
}

// Minimal asymptotic covariance for adding rules linear in eta (Cramer-Rao
// style): (dv/dd)' diag(1/(v_k I_k)) (dv/dd). The Jacobian dv/dd combines the
// route through D (diag(v) K A, rows of K the beta_k slopes) with the route
// through the immigration rates (dv/dtheta); for non-constant a the designs
// here estimate the same parameter the adding rule responds to, so the two
// routes add.
inline Eigen::MatrixXd lower_bound(const LinearRuleSpec& l, const MomentSpec& m) {
  const int k = m.k();
  if (l.fisher.size() != k || (l.fisher.array() <= 0.0).any())
    throw NonPositiveFisher("Fisher information must be componentwise positive");
  if (static_cast<int>(l.beta_k.size()) != k)
    throw std::invalid_argument("LinearRuleSpec: need one beta_k per treatment");

  const Eigen::VectorXd v = limit_proportions(m);
  const Eigen::MatrixXd a_mix = mixing_matrix_A(m);
  Eigen::MatrixXd k_matrix(k, k);
  for (int i = 0; i < k; ++i) {
    if (l.beta_k[static_cast<size_t>(i)].size() != k)
      throw std::invalid_argument("LinearRuleSpec: beta_k dimension mismatch");
    k_matrix.row(i) = l.beta_k[static_cast<size_t>(i)].transpose();
  }
  const Eigen::MatrixXd j_theta =
      jacobian_dv_dtheta(m, m.da_dtheta ? JacobianMode::analytic : JacobianMode::numeric);
  const Eigen::MatrixXd dv_dd = v.asDiagonal() * k_matrix * a_mix + j_theta;
  const Eigen::VectorXd w = (v.array() * l.fisher.array()).inverse().matrix();
  return dv_dd.transpose() * w.asDiagonal() * dv_dd;
}

struct AssumptionReport {
  bool a_positive = true;
  bool a_differentiable = true;
  bool adding_rule_ok = true;  // distribution-level probes (DesignSpec overload)
  bool row_sums_ok = true;
  bool eigenvector_regime = false;
  Eigen::VectorXd row_sum_margins;  // 1 - row sum, per treatment
  Eigen::VectorXd d_kk_min;         // sampled minimum of D_kk (DesignSpec overload)
  std::vector<std::string> notes;

  bool covariance_theory_ok() const {
    return a_positive && a_differentiable && adding_rule_ok && row_sums_ok;
  }
  bool ok() const {
    return covariance_theory_ok() || (eigenvector_regime && a_positive && adding_rule_ok);
  }
  std::string summary() const {
    if (notes.empty()) return eigenvector_regime ? "unit-row-sum regime" : "all assumptions hold";
    std::string msg;
    for (const auto& n : notes) msg += (msg.empty() ? "" : "; ") + n;
    return msg;
  }
};

// Checks the standing assumptions on a moment specification: positive,
// differentiable immigration rates and strict row-sum domination, with the
// unit-row-sum boundary flagged as the eigenvector regime instead of failing.
inline AssumptionReport validate_assumptions(const MomentSpec& m) {
  AssumptionReport rep;
  const int k = m.k();
  rep.row_sum_margins.resize(k);

  try {
    const Eigen::VectorXd a = detail::eval_a(m, m.theta);
    if (!a.allFinite() || (a.array() <= 0.0).any()) {
      rep.a_positive = false;
      rep.notes.push_back("a(theta) is not componentwise positive");
    }
    for (int j = 0; j < k && rep.a_differentiable; ++j) {
      const double step = std::max(1e-6, 1e-6 * std::abs(m.theta[j]));
      for (double dir : {-step, step}) {
        Eigen::VectorXd t = m.theta;
        t[j] += dir;
        if (!detail::eval_a(m, t).allFinite()) {
          rep.a_differentiable = false;
          rep.notes.push_back("a(theta) not evaluable near theta (component " +
                              std::to_string(j + 1) + ")");
          break;
        }
      }
    }
  } catch (const std::exception& e) {
    rep.a_positive = rep.a_differentiable = false;
    rep.notes.push_back(std::string("a(theta) evaluation failed: ") + e.what());
  }

  bool all_unit = true;
  for (int i = 0; i < k; ++i) {
    const double row = m.h.row(i).sum();
    rep.row_sum_margins[i] = 1.0 - row;
    if (std::abs(1.0 - row) > 1e-12) all_unit = false;
    if (row >= 1.0 - 1e-9) rep.row_sums_ok = false;
  }
  if (!rep.row_sums_ok) {
    if (all_unit) {
      rep.eigenvector_regime = true;
      rep.notes.push_back("H has exact unit row sums: eigenvector regime");
    } else {
      rep.notes.push_back("some mean adding-matrix row sums reach 1: immigration cannot dominate");
    }
  }
  return rep;
}

// DesignSpec overload: additionally probes the adding-rule sampler, checking
// that draws are finite and that negative off-diagonal mass only occurs where
// the mean is positive.
inline AssumptionReport validate_assumptions(const DesignSpec& d, const MomentSpec& m,
                                             std::uint64_t probe_seed = 0x70726F6265ULL,
                                             int probes = 1000) {
  AssumptionReport rep = validate_assumptions(m);
  const int k = m.k();
  rep.d_kk_min.resize(k);
  Eigen::VectorXd d_row(k);
  for (int t = 0; t < k; ++t) {
    RngStream rng(RngStream::derive_seed(probe_seed, static_cast<std::uint64_t>(t)));
    double dkk_min = std::numeric_limits<double>::infinity();
    for (int i = 0; i < probes; ++i) {
      const double xi = d.adding_rule[static_cast<size_t>(t)](rng, d_row);
      if (!std::isfinite(xi) || !d_row.allFinite()) {
        rep.adding_rule_ok = false;
        rep.notes.push_back("adding rule for treatment " + std::to_string(t + 1) +
                            " produced a non-finite draw");
        break;
      }
      dkk_min = std::min(dkk_min, d_row[t]);
      for (int j = 0; j < k; ++j)
        if (j != t && d_row[j] < -1e-12 && m.h(t, j) <= 0.0) {
          rep.adding_rule_ok = false;
          rep.notes.push_back("treatment " + std::to_string(t + 1) +
                              " can remove type-" + std::to_string(j + 1) +
                              " mass without positive mean replenishment");
          break;
        }
    }
    rep.d_kk_min[t] = dkk_min;
  }
  return rep;
}

// Moment estimation by sampling the adding rule; the resulting summary is
// tagged approximate with the largest mean-level standard error observed.
inline MomentSpec estimate_moments(const DesignSpec& d, const Eigen::VectorXd& theta,
                                   std::function<Eigen::VectorXd(const Eigen::VectorXd&)> a_fn,
                                   std::uint64_t seed, long n_samples = 1000000) {
  const int k = d.k_treatments;
  MomentSpec m;
  m.h.resize(k, k);
  m.sigma12 = Eigen::MatrixXd::Zero(k, k);
  m.var_xi.resize(k);
  m.theta = theta;
  m.a_fn = std::move(a_fn);
  m.estimated_from_samples = true;

  Eigen::VectorXd d_row(k);
  double max_se = 0.0;
  for (int t = 0; t < k; ++t) {
    RngStream rng(RngStream::derive_seed(seed, static_cast<std::uint64_t>(t)));
    Eigen::VectorXd sum_d = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd sum_dd = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd sum_dxi = Eigen::VectorXd::Zero(k);
    double sum_xi = 0.0, sum_xi2 = 0.0;
    for (long i = 0; i < n_samples; ++i) {
      const double xi = d.adding_rule[static_cast<size_t>(t)](rng, d_row);
      sum_d += d_row;
      sum_dd.noalias() += d_row * d_row.transpose();
      sum_dxi += xi * d_row;
      sum_xi += xi;
      sum_xi2 += xi * xi;
    }
    const double n = static_cast<double>(n_samples);
    const Eigen::VectorXd mean_d = sum_d / n;
    const double mean_xi = sum_xi / n;
    m.h.row(t) = mean_d.transpose();
    Eigen::MatrixXd cov = (sum_dd - n * mean_d * mean_d.transpose()) / (n - 1.0);
    m.sigma_k.push_back(cov);
    m.var_xi[t] = (sum_xi2 - n * mean_xi * mean_xi) / (n - 1.0);
    for (int j = 0; j < k; ++j) {
      m.sigma12(j, t) = (sum_dxi[j] - n * mean_d[j] * mean_xi) / (n - 1.0);
      max_se = std::max(max_se, std::sqrt(std::max(0.0, cov(j, j)) / n));
    }
    max_se = std::max(max_se, std::sqrt(std::max(0.0, m.var_xi[t]) / n));
  }
  m.moment_se = max_se;
  return m;
}

// Summary for the unit-row-sum regime: only v is defined.
inline TheoreticalSummary eigenvector_summary(const MomentSpec& m) {
  TheoreticalSummary out;
  out.v = eigenvector_limit(m.h);
  out.eigenvector_regime = true;
  out.approximate = m.estimated_from_samples;
  out.moment_se = m.moment_se;
  return out;
}

// One-stop summary: validates assumptions, routes unit-row-sum designs to the
// eigenvector limit, and otherwise runs the full covariance pipeline plus the
// lower bound when a linear-rule description is available.
inline TheoreticalSummary summarize(const MomentSpec& m,
                                    const std::optional<LinearRuleSpec>& rule = std::nullopt) {
  const AssumptionReport rep = validate_assumptions(m);
  if (rep.eigenvector_regime) return eigenvector_summary(m);
  if (!rep.covariance_theory_ok()) throw AssumptionViolated(rep.summary());
  TheoreticalSummary out = asymptotic_covariance(m);
  if (rule) out.lower_bound = lower_bound(*rule, m);
  return out;
}

}  // namespace imu
