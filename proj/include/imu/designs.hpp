#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>

#include "imu/theory.hpp"
#include "imu/urn.hpp"

namespace imu {

enum class DesignName { bdu, dl, mdl, gdl, constant };

inline const char* to_string(DesignName n) {
  switch (n) {
    case DesignName::bdu: return "bdu";
    case DesignName::dl: return "dl";
    case DesignName::mdl: return "mdl";
    case DesignName::gdl: return "gdl";
    case DesignName::constant: return "const";
  }
  return "?";
}

inline DesignName parse_design_name(const std::string& s) {
  if (s == "bdu") return DesignName::bdu;
  if (s == "dl") return DesignName::dl;
  if (s == "mdl") return DesignName::mdl;
  if (s == "gdl") return DesignName::gdl;
  if (s == "const") return DesignName::constant;
  throw std::invalid_argument("unknown design name: " + s);
}

// A named design bundles everything the engine, the theory pipeline, and the
// reports need: the sampler-level spec, declared moments, the linear-rule
// description where the lower bound applies, and the published closed forms.
struct NamedDesign {
  DesignName name = DesignName::constant;
  Eigen::VectorXd p;  // Bernoulli success probabilities (empty for const)
  double c = 1.0;     // immigration scale for mdl/gdl
  DesignSpec spec;
  MomentSpec moments;
  std::optional<LinearRuleSpec> linear_rule;
  Eigen::VectorXd closed_form_v;                     // size 0 when unavailable
  std::optional<Eigen::MatrixXd> closed_form_sigma;  // full matrix (bdu)
  std::optional<double> closed_form_sigma11;         // two-treatment scalar (mdl/gdl)
  bool theory_unavailable = false;  // bdu with some p_k >= 1/2
  std::string label;
};

namespace detail {

inline void check_probs(const Eigen::VectorXd& p) {
  if (p.size() < 2) throw std::invalid_argument("need at least two treatments");
  if ((p.array() <= 0.0).any() || (p.array() >= 1.0).any())
    throw std::invalid_argument("success probabilities must lie in (0,1)");
}

inline Eigen::VectorXd default_z0(int k, const Eigen::VectorXd& z0) {
  if (z0.size() == 0) return Eigen::VectorXd::Ones(k + 1);
  if (z0.size() != k + 1) throw std::invalid_argument("initial masses must have K+1 entries");
  return z0;
}

inline std::string format_params(const char* name, const Eigen::VectorXd& p, double c,
                                 bool show_c) {
  std::string s = std::string(name) + "(p=";
  char buf[32];
  for (int i = 0; i < p.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%g", p[i]);
    s += (i ? "," : "") + std::string(buf);
  }
  if (show_c) {
    std::snprintf(buf, sizeof buf, ",c=%g", c);
    s += buf;
  }
  return s + ")";
}

// Diagonal Bernoulli adding rule: D_kk = scale * xi, off-diagonal zero.
inline DesignSpec::AddingRule diagonal_bernoulli_rule(int t, double p, double scale) {
  return [t, p, scale](RngStream& rng, Eigen::Ref<Eigen::VectorXd> d_row) {
    d_row.setZero();
    const double xi = rng.bernoulli(p) ? 1.0 : 0.0;
    d_row[t] = scale * xi;
    return xi;
  };
}

// Moments shared by the diagonal Bernoulli designs: D_kk = scale * xi with
// xi ~ Bernoulli(p_k).
inline void fill_diagonal_bernoulli_moments(MomentSpec& m, const Eigen::VectorXd& p,
                                            double scale) {
  const int k = static_cast<int>(p.size());
  const Eigen::ArrayXd q = 1.0 - p.array();
  m.h = (scale * p).asDiagonal();
  m.sigma_k.clear();
  for (int t = 0; t < k; ++t) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(k, k);
    s(t, t) = scale * scale * p[t] * q[t];
    m.sigma_k.push_back(s);
  }
  m.sigma12 = (scale * p.array() * q).matrix().asDiagonal();
  m.var_xi = (p.array() * q).matrix();
  m.theta = p;
}

inline LinearRuleSpec bernoulli_linear_rule(const Eigen::VectorXd& p, double scale) {
  // eta_k = D_kk = scale * xi_k, so d_k = scale * p_k and the Fisher
  // information of d_k from one Bernoulli observation is 1/(scale^2 p q).
  const int k = static_cast<int>(p.size());
  const Eigen::ArrayXd q = 1.0 - p.array();
  LinearRuleSpec l;
  for (int t = 0; t < k; ++t) {
    l.alpha_k.push_back(Eigen::VectorXd::Zero(k));
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
    if (scale != 0.0) beta[t] = 1.0;
    l.beta_k.push_back(beta);
  }
  const double sc = scale == 0.0 ? 1.0 : scale;
  l.d = sc * p;
  l.var_eta = (sc * sc * p.array() * q).matrix();
  l.cov_eta_xi = (sc * p.array() * q).matrix();
  l.fisher = (sc * sc * p.array() * q).inverse().matrix();
  return l;
}

}  // namespace detail

// Birth-and-death urn: constant unit immigration, D_kk = 2 * Bernoulli(p_k).
// The limit law needs every p_k < 1/2; otherwise the engine still runs but
// theory outputs are flagged unavailable.
inline NamedDesign build_bdu(const Eigen::VectorXd& p, const Eigen::VectorXd& z0 = {}) {
  detail::check_probs(p);
  const int k = static_cast<int>(p.size());
  const Eigen::ArrayXd q = 1.0 - p.array();

  NamedDesign d;
  d.name = DesignName::bdu;
  d.p = p;
  d.label = detail::format_params("bdu", p, 1.0, false);

  d.spec.k_treatments = k;
  d.spec.initial_masses = detail::default_z0(k, z0);
  for (int t = 0; t < k; ++t)
    d.spec.adding_rule.push_back(detail::diagonal_bernoulli_rule(t, p[t], 2.0));
  d.spec.immigration_fn = [](const Eigen::VectorXd&, Eigen::VectorXd& a) { a.setOnes(); };

  detail::fill_diagonal_bernoulli_moments(d.moments, p, 2.0);
  d.moments.a_fn = [k](const Eigen::VectorXd&) { return Eigen::VectorXd::Ones(k); };
  d.moments.da_dtheta = [k](const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(k, k); };
  d.linear_rule = detail::bernoulli_linear_rule(p, 2.0);

  if ((p.array() >= 0.5).any()) {
    d.theory_unavailable = true;
    return d;
  }
  const Eigen::ArrayXd h = 1.0 - 2.0 * p.array();  // 1 - E[D_kk]
  const Eigen::ArrayXd w = h.inverse();
  const Eigen::VectorXd v = (w / w.sum()).matrix();
  d.closed_form_v = v;
  // Sigma_D = (dv/dp)' diag(p q / v) (dv/dp), dv_k/dp_j = 2 v_j (delta - v_k)/h_j
  Eigen::MatrixXd jac(k, k);
  for (int j = 0; j < k; ++j)
    for (int t = 0; t < k; ++t) jac(j, t) = 2.0 * v[j] * ((j == t ? 1.0 : 0.0) - v[t]) / h[j];
  d.closed_form_sigma =
      jac.transpose() * (p.array() * q / v.array()).matrix().asDiagonal() * jac;
  return d;
}

// Drop-the-loser: constant unit immigration, D_kk = Bernoulli(p_k); the limit
// allocates proportionally to 1/q_k.
inline NamedDesign build_dl(const Eigen::VectorXd& p, const Eigen::VectorXd& z0 = {}) {
  detail::check_probs(p);
  const int k = static_cast<int>(p.size());
  const Eigen::ArrayXd q = 1.0 - p.array();

  NamedDesign d;
  d.name = DesignName::dl;
  d.p = p;
  d.label = detail::format_params("dl", p, 1.0, false);

  d.spec.k_treatments = k;
  d.spec.initial_masses = detail::default_z0(k, z0);
  for (int t = 0; t < k; ++t)
    d.spec.adding_rule.push_back(detail::diagonal_bernoulli_rule(t, p[t], 1.0));
  d.spec.immigration_fn = [](const Eigen::VectorXd&, Eigen::VectorXd& a) { a.setOnes(); };

  detail::fill_diagonal_bernoulli_moments(d.moments, p, 1.0);
  d.moments.a_fn = [k](const Eigen::VectorXd&) { return Eigen::VectorXd::Ones(k); };
  d.moments.da_dtheta = [k](const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(k, k); };
  d.linear_rule = detail::bernoulli_linear_rule(p, 1.0);

  const Eigen::ArrayXd w = q.inverse();
  d.closed_form_v = (w / w.sum()).matrix();
  return d;
}

// Modified drop-the-loser: immigration a_k = c * theta_hat_k on top of the DL
// adding rule; the limit allocates proportionally to the odds p_k/q_k.
inline NamedDesign build_mdl(const Eigen::VectorXd& p, double c = 1.0,
                             const Eigen::VectorXd& z0 = {}) {
  detail::check_probs(p);
  if (!(c > 0.0)) throw std::invalid_argument("immigration constant c must be positive");
  const int k = static_cast<int>(p.size());
  const Eigen::ArrayXd q = 1.0 - p.array();

  NamedDesign d;
  d.name = DesignName::mdl;
  d.p = p;
  d.c = c;
  d.label = detail::format_params("mdl", p, c, true);

  d.spec.k_treatments = k;
  d.spec.initial_masses = detail::default_z0(k, z0);
  for (int t = 0; t < k; ++t)
    d.spec.adding_rule.push_back(detail::diagonal_bernoulli_rule(t, p[t], 1.0));
  d.spec.immigration_fn = [c](const Eigen::VectorXd& theta, Eigen::VectorXd& a) {
    a = c * theta;
  };

  detail::fill_diagonal_bernoulli_moments(d.moments, p, 1.0);
  d.moments.a_fn = [c](const Eigen::VectorXd& theta) -> Eigen::VectorXd { return c * theta; };
  d.moments.da_dtheta = [c, k](const Eigen::VectorXd&) -> Eigen::MatrixXd {
    return c * Eigen::MatrixXd::Identity(k, k);
  };
  d.linear_rule = detail::bernoulli_linear_rule(p, 1.0);

  const Eigen::ArrayXd w = p.array() / q;
  d.closed_form_v = (w / w.sum()).matrix();
  if (k == 2) {
    const double p1 = p[0], p2 = p[1], q1 = q[0], q2 = q[1];
    d.closed_form_sigma11 = q1 * q2 *
                            (p1 * p1 * (1.0 + q2 * q2) + p2 * p2 * (1.0 + q1 * q1)) /
                            std::pow(p2 * q1 + p1 * q2, 3.0);
  }
  return d;
}

// Generalized drop-the-loser targeting the two-treatment sqrt(p) allocation:
// immigration a_k = c * sqrt(theta_hat_k), nothing added after treatment draws.
inline NamedDesign build_gdl(const Eigen::VectorXd& p, double c = 1.0,
                             const Eigen::VectorXd& z0 = {}) {
  detail::check_probs(p);
  if (p.size() != 2) throw std::invalid_argument("gdl is defined for two treatments");
  if (!(c > 0.0)) throw std::invalid_argument("immigration constant c must be positive");
  const int k = 2;
  const Eigen::ArrayXd q = 1.0 - p.array();

  NamedDesign d;
  d.name = DesignName::gdl;
  d.p = p;
  d.c = c;
  d.label = detail::format_params("gdl", p, c, true);

  d.spec.k_treatments = k;
  d.spec.initial_masses = detail::default_z0(k, z0);
  for (int t = 0; t < k; ++t) {
    const double pt = p[t];
    d.spec.adding_rule.push_back(
        [pt](RngStream& rng, Eigen::Ref<Eigen::VectorXd> d_row) {
          d_row.setZero();
          return rng.bernoulli(pt) ? 1.0 : 0.0;
        });
  }
  d.spec.immigration_fn = [c](const Eigen::VectorXd& theta, Eigen::VectorXd& a) {
    a = c * theta.cwiseMax(0.0).cwiseSqrt();
  };

  d.moments.h = Eigen::MatrixXd::Zero(k, k);
  for (int t = 0; t < k; ++t) d.moments.sigma_k.push_back(Eigen::MatrixXd::Zero(k, k));
  d.moments.sigma12 = Eigen::MatrixXd::Zero(k, k);
  d.moments.var_xi = (p.array() * q).matrix();
  d.moments.theta = p;
  d.moments.a_fn = [c](const Eigen::VectorXd& theta) -> Eigen::VectorXd {
    return c * theta.cwiseMax(0.0).cwiseSqrt().eval();
  };
  d.moments.da_dtheta = [c](const Eigen::VectorXd& theta) -> Eigen::MatrixXd {
    return (c / (2.0 * theta.cwiseMax(1e-300).cwiseSqrt().array())).matrix().asDiagonal();
  };
  d.linear_rule = detail::bernoulli_linear_rule(p, 0.0);  // D == 0: zero slopes

  const double s1 = std::sqrt(p[0]), s2 = std::sqrt(p[1]), s = s1 + s2;
  d.closed_form_v = Eigen::VectorXd{{s1 / s, s2 / s}};
  d.closed_form_sigma11 = (q[0] * p[1] / s1 + p[0] * q[1] / s2) / (2.0 * s * s * s);
  return d;
}

// Constant immigration rates with a deterministic adding matrix. Covers the
// no-feedback corner of the covariance decomposition and, with unit row sums,
// the eigenvector-limit regime.
inline NamedDesign build_const(const Eigen::VectorXd& a_vec, const Eigen::MatrixXd& d_matrix,
                               const Eigen::VectorXd& z0 = {}) {
  const int k = static_cast<int>(a_vec.size());
  if (k < 1) throw std::invalid_argument("need at least one treatment");
  if ((a_vec.array() <= 0.0).any())
    throw std::invalid_argument("immigration rates must be positive");
  if (d_matrix.rows() != k || d_matrix.cols() != k)
    throw std::invalid_argument("adding matrix must be K x K");

  NamedDesign d;
  d.name = DesignName::constant;
  d.c = 1.0;
  {
    char buf[32];
    std::string s = "const(a=";
    for (int i = 0; i < k; ++i) {
      std::snprintf(buf, sizeof buf, "%g", a_vec[i]);
      s += (i ? "," : "") + std::string(buf);
    }
    d.label = s + ")";
  }

  d.spec.k_treatments = k;
  d.spec.initial_masses = detail::default_z0(k, z0);
  for (int t = 0; t < k; ++t) {
    const Eigen::VectorXd row = d_matrix.row(t).transpose();
    d.spec.adding_rule.push_back(
        [row](RngStream& rng, Eigen::Ref<Eigen::VectorXd> d_row) {
          d_row = row;
          return rng.bernoulli(0.5) ? 1.0 : 0.0;
        });
  }
  d.spec.immigration_fn = [a_vec](const Eigen::VectorXd&, Eigen::VectorXd& a) { a = a_vec; };

  d.moments.h = d_matrix;
  for (int t = 0; t < k; ++t) d.moments.sigma_k.push_back(Eigen::MatrixXd::Zero(k, k));
  d.moments.sigma12 = Eigen::MatrixXd::Zero(k, k);
  d.moments.var_xi = Eigen::VectorXd::Constant(k, 0.25);
  d.moments.theta = Eigen::VectorXd::Constant(k, 0.5);
  d.moments.a_fn = [a_vec](const Eigen::VectorXd&) { return a_vec; };
  d.moments.da_dtheta = [k](const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(k, k); };

  if (d_matrix.isZero(0.0)) d.closed_form_v = a_vec / a_vec.sum();
  return d;
}

// Reference variance of the classical generalized Polya urn targeting the
// same sqrt(p) allocation; strictly larger than the gdl variance everywhere.
inline double gpu_reference_variance(const Eigen::VectorXd& p) {
  if (p.size() != 2) throw std::invalid_argument("reference formula is two-treatment");
  const double p1 = p[0], p2 = p[1], q1 = 1.0 - p1, q2 = 1.0 - p2;
  const double s1 = std::sqrt(p1), s2 = std::sqrt(p2), s = s1 + s2;
  return std::sqrt(p1 * p2) / (s * s) +
         1.5 / (s * s * s) * (p2 * q1 / s1 + p1 * q2 / s2);
}

// Theory summary for a named design: routes through the standard pipeline and
// attaches the lower bound when the design's adding rule is linear in eta.
inline TheoreticalSummary design_summary(const NamedDesign& d) {
  return summarize(d.moments, d.linear_rule);
}

}  // namespace imu
