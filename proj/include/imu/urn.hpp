#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <queue>
#include <utility>
#include <vector>

#include "imu/errors.hpp"
#include "imu/rng.hpp"

namespace imu {

// Response delay: number of later subject arrivals that precede the response
// becoming observable. One entry per treatment; a single entry is shared by
// all treatments.
struct DelayModel {
  enum class Kind { none, fixed, geometric };
  struct Entry {
    Kind kind = Kind::none;
    long lag = 0;    // Kind::fixed
    double q = 0.5;  // Kind::geometric success probability
  };
  std::vector<Entry> per_treatment;
  double decay_exponent = 2.0;  // tail-decay metadata, not used by sampling

  bool active() const {
    for (const auto& e : per_treatment)
      if (e.kind != Kind::none) return true;
    return false;
  }
  const Entry& entry(int k) const {
    return per_treatment.size() == 1 ? per_treatment.front() : per_treatment.at(static_cast<size_t>(k));
  }
  long sample(int k, RngStream& rng) const {
    const Entry& e = entry(k);
    switch (e.kind) {
      case Kind::none:
        return 0;
      case Kind::fixed:
        return e.lag;
      case Kind::geometric:
        return rng.geometric(e.q);
    }
    return 0;
  }

  static DelayModel none() { return {}; }
  static DelayModel fixed(long lag) {
    DelayModel d;
    d.per_treatment = {Entry{Kind::fixed, lag, 0.5}};
    return d;
  }
  static DelayModel geometric(double q) {
    DelayModel d;
    d.per_treatment = {Entry{Kind::geometric, 0, q}};
    return d;
  }
};

// Full description of one adaptive design as the engine needs it: urn
// composition, the per-treatment joint (outcome, added-mass row) sampler, and
// the immigration rates as a function of current estimates.
struct DesignSpec {
  // Samples (xi, D-row) jointly for one assignment of treatment k; writes the
  // K-vector of added masses into d_row and returns the outcome xi.
  using AddingRule = std::function<double(RngStream&, Eigen::Ref<Eigen::VectorXd>)>;
  // Writes a(theta_hat) into `a_out` (componentwise positive rates).
  using ImmigrationFn = std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>;

  int k_treatments = 0;
  Eigen::VectorXd initial_masses;  // size K+1: immigration mass first, all > 0
  std::vector<AddingRule> adding_rule;
  ImmigrationFn immigration_fn;
  double estimator_alpha = 0.5;
  double estimator_beta = 1.0;
  DelayModel delay;
  // When true, the sampled D-row is withheld from the urn until the response
  // is observed (the removal of the drawn ball still happens at draw time).
  bool delayed_urn_update = false;
  long max_immigration_draws_per_step = 1000000;

  void validate() const {
    if (k_treatments < 1) throw std::invalid_argument("DesignSpec: k_treatments must be >= 1");
    if (initial_masses.size() != k_treatments + 1)
      throw std::invalid_argument("DesignSpec: initial_masses must have K+1 entries");
    if ((initial_masses.array() <= 0.0).any())
      throw std::invalid_argument("DesignSpec: initial masses must all be positive");
    if (static_cast<int>(adding_rule.size()) != k_treatments)
      throw std::invalid_argument("DesignSpec: need one adding_rule per treatment");
    if (!immigration_fn) throw std::invalid_argument("DesignSpec: immigration_fn not set");
    if (estimator_alpha <= 0.0 || estimator_beta <= 0.0)
      throw std::invalid_argument("DesignSpec: estimator constants must be positive");
    if (max_immigration_draws_per_step < 1)
      throw std::invalid_argument("DesignSpec: immigration cap must be positive");
  }
};

// Running state of the urn. Masses are signed reals: negative masses persist
// (the ledger identity needs them) and only the sampling step clamps to the
// positive part.
struct UrnState {
  double z0 = 0.0;                // immigration-ball mass, constant for the whole run
  Eigen::VectorXd z;              // treatment-ball masses, signed
  Eigen::VectorXd z_initial;      // treatment masses at step 0, for the ledger
  std::vector<long> n_assigned;   // per-treatment assignment counts
  long n_immigration_draws = 0;   // total immigration-ball draws
  Eigen::VectorXd s_observed;     // per-treatment sums of observed outcomes
  std::vector<long> n_observed;   // per-treatment observed-response counts
  long step = 0;                  // subjects assigned so far

  int k() const { return static_cast<int>(z.size()); }
};

// One subject's assignment, as recorded for diagnostics and export.
struct AssignmentRecord {
  long subject = 0;            // 1-based step index m
  int treatment = 0;           // 0-based treatment k
  long immigration_draws = 0;  // u_m, immigration draws before this assignment
  double outcome = 0.0;        // xi
  Eigen::VectorXd d_row;       // realized added-mass row
  long observed_at = 0;        // step at which the outcome enters the estimator
};

inline Eigen::VectorXd positive_part_masses(const UrnState& state) {
  Eigen::VectorXd m(state.k() + 1);
  m[0] = state.z0;
  m.tail(state.k()) = state.z.cwiseMax(0.0);
  return m;
}

// Draws a ball type in {0, .., K} proportionally to positive-part masses;
// type 0 is the immigration ball.
inline int draw_ball(const UrnState& state, RngStream& rng) {
  const int k = state.k();
  double total = state.z0;
  for (int i = 0; i < k; ++i) total += std::max(0.0, state.z[i]);
  double target = rng.uniform01() * total;
  target -= state.z0;
  if (target < 0.0) return 0;
  for (int i = 0; i < k; ++i) {
    target -= std::max(0.0, state.z[i]);
    if (target < 0.0) return i + 1;
  }
  return k;  // numerically pinned to the last positive-mass type
}

inline Eigen::VectorXd current_estimates(const UrnState& state, const DesignSpec& spec) {
  Eigen::VectorXd theta(state.k());
  for (int i = 0; i < state.k(); ++i)
    theta[i] = (spec.estimator_alpha + state.s_observed[i]) /
               (spec.estimator_beta + static_cast<double>(state.n_observed[i]));
  return theta;
}

// Post-step snapshot kept in recording mode, for trajectory export and for
// verifying the mass ledger at every intermediate step.
struct StepSnapshot {
  Eigen::VectorXd z;
  std::vector<long> n_assigned;
  long n_immigration_draws = 0;
};

struct LedgerReport {
  bool ok = true;
  long first_bad_step = -1;
  double max_abs_error = 0.0;
  double tolerance = 0.0;
};

class UrnProcess {
 public:
  UrnProcess(DesignSpec spec, std::uint64_t seed, bool record_history = false)
      : spec_(std::move(spec)),
        rng_(seed),
        delay_rng_(RngStream::derive_seed(seed ^ kDelayStreamTag, 1)),
        record_(record_history) {
    spec_.validate();
    const int k = spec_.k_treatments;
    st_.z0 = spec_.initial_masses[0];
    st_.z = spec_.initial_masses.tail(k);
    st_.z_initial = st_.z;
    st_.n_assigned.assign(static_cast<size_t>(k), 0);
    st_.s_observed = Eigen::VectorXd::Zero(k);
    st_.n_observed.assign(static_cast<size_t>(k), 0);
    theta_buf_.resize(k);
    a_buf_.resize(k);
    d_buf_.resize(k);
  }

  // Resume from an arbitrary mid-run state (diagnostics; skips the
  // positive-initial-mass check, since evolved masses may be negative).
  UrnProcess(DesignSpec spec, UrnState state, std::uint64_t seed, bool record_history = false)
      : spec_(std::move(spec)),
        st_(std::move(state)),
        rng_(seed),
        delay_rng_(RngStream::derive_seed(seed ^ kDelayStreamTag, 1)),
        record_(record_history) {
    const int k = spec_.k_treatments;
    theta_buf_.resize(k);
    a_buf_.resize(k);
    d_buf_.resize(k);
  }

  const UrnState& state() const { return st_; }
  const DesignSpec& spec() const { return spec_; }

  Eigen::VectorXd current_estimates() const { return imu::current_estimates(st_, spec_); }

  // Applies every queued response due by the arrival of the next subject.
  // Returns the number of responses applied. Idempotent within a step.
  int flush_due_responses() {
    const long arriving = st_.step + 1;
    int applied = 0;
    while (!pending_.empty() && pending_.top().due <= arriving) {
      apply_response(pending_.top().treatment, pending_.top().xi, pending_.top().d_row);
      pending_.pop();
      ++applied;
    }
    return applied;
  }

  // Assigns the next subject: immigration-draw loop, ball removal, joint
  // (outcome, D-row) sampling, delay handling. flush_due_responses() is
  // expected to have run for this step already (step() does both).
  AssignmentRecord assign_next_subject() {
    AssignmentRecord rec;
    assign_internal(&rec);
    return rec;
  }

  void step() {
    flush_due_responses();
    assign_internal(nullptr);
  }

  void run(long n_subjects) {
    for (long i = 0; i < n_subjects; ++i) step();
  }

  long pending_responses() const { return static_cast<long>(pending_.size()); }

  const std::vector<AssignmentRecord>& history() const { return history_; }
  const std::vector<Eigen::VectorXd>& immigration_history() const { return a_history_; }
  const std::vector<StepSnapshot>& snapshots() const { return snapshots_; }

 private:
  static constexpr std::uint64_t kDelayStreamTag = 0x64656C61792D3164ULL;

  struct Pending {
    long due = 0;
    long seq = 0;  // insertion order breaks due-step ties deterministically
    int treatment = 0;
    double xi = 0.0;
    Eigen::VectorXd d_row;
    bool operator>(const Pending& o) const {
      return due != o.due ? due > o.due : seq > o.seq;
    }
  };

  void apply_response(int k, double xi, const Eigen::VectorXd& d_row) {
    st_.s_observed[k] += xi;
    ++st_.n_observed[static_cast<size_t>(k)];
    if (spec_.delayed_urn_update) st_.z += d_row;
  }

  // The record is materialized (heap-allocated d_row) only when recording or
  // when the caller wants it back; the Monte Carlo hot path skips both.
  void assign_internal(AssignmentRecord* out) {
    const long m = st_.step + 1;

    for (int i = 0; i < st_.k(); ++i)
      theta_buf_[i] = (spec_.estimator_alpha + st_.s_observed[i]) /
                      (spec_.estimator_beta + static_cast<double>(st_.n_observed[i]));
    spec_.immigration_fn(theta_buf_, a_buf_);  // one evaluation per subject step

    long u = 0;
    int k = -1;
    for (;;) {
      const int ball = draw_ball(st_, rng_);
      if (ball == 0) {
        ++u;
        if (u > spec_.max_immigration_draws_per_step)
          throw ImmigrationLoopExceeded("immigration cap exceeded at step " + std::to_string(m));
        ++st_.n_immigration_draws;
        st_.z += a_buf_;  // immigration ball returned, a(theta_hat) mass added per treatment
      } else {
        k = ball - 1;
        break;
      }
    }

    st_.z[k] -= 1.0;  // drawn treatment ball is not replaced
    const double xi = spec_.adding_rule[static_cast<size_t>(k)](rng_, d_buf_);
    if (!spec_.delayed_urn_update) st_.z += d_buf_;

    st_.step = m;
    ++st_.n_assigned[static_cast<size_t>(k)];

    const long lag = spec_.delay.active() ? spec_.delay.sample(k, delay_rng_) : 0;
    const long due = m + lag;
    if (lag == 0) {
      apply_response(k, xi, d_buf_);
    } else {
      pending_.push(Pending{due, seq_++, k, xi, d_buf_});
    }

    if (record_) {
      history_.push_back(AssignmentRecord{m, k, u, xi, d_buf_, due});
      a_history_.push_back(a_buf_);
      snapshots_.push_back(StepSnapshot{st_.z, st_.n_assigned, st_.n_immigration_draws});
      if (out) *out = history_.back();
    } else if (out) {
      *out = AssignmentRecord{m, k, u, xi, d_buf_, due};
    }
  }

  DesignSpec spec_;
  UrnState st_;
  RngStream rng_;
  RngStream delay_rng_;  // separate stream so delays never perturb urn draws
  bool record_ = false;
  long seq_ = 0;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<Pending>> pending_;
  std::vector<AssignmentRecord> history_;
  std::vector<Eigen::VectorXd> a_history_;
  std::vector<StepSnapshot> snapshots_;
  Eigen::VectorXd theta_buf_, a_buf_, d_buf_;
};

// Mass ledger: the treatment-ball masses must equal the initial masses plus
// all immigration additions a_{m-1} u_m plus all applied D-rows minus one
// unit per assignment. `delayed_urn_update` controls whether D-rows pending
// response observation count as applied.
//
// Checks the final state; throws LedgerMismatch outside tolerance 1e-9 * n.
inline bool ledger_check(const UrnState& state, const std::vector<AssignmentRecord>& history,
                         const std::vector<Eigen::VectorXd>& a_history,
                         bool delayed_urn_update = false) {
  Eigen::VectorXd expected = state.z_initial;
  for (size_t m = 0; m < history.size(); ++m) {
    const AssignmentRecord& rec = history[m];
    expected += static_cast<double>(rec.immigration_draws) * a_history.at(m);
    expected[rec.treatment] -= 1.0;
    if (!delayed_urn_update || rec.observed_at <= state.step) expected += rec.d_row;
  }
  const double err = (state.z - expected).cwiseAbs().maxCoeff();
  const double tol = 1e-9 * std::max<double>(1.0, static_cast<double>(state.step));
  if (err > tol) throw LedgerMismatch(state.step, err);
  return true;
}

// Diagnostic sweep verifying the ledger identity after every recorded step,
// against the per-step snapshots. Reports instead of throwing.
inline LedgerReport ledger_scan(const Eigen::VectorXd& z_initial,
                                const std::vector<AssignmentRecord>& history,
                                const std::vector<Eigen::VectorXd>& a_history,
                                const std::vector<StepSnapshot>& snapshots,
                                bool delayed_urn_update = false) {
  LedgerReport rep;
  Eigen::VectorXd base = z_initial;  // everything applied unconditionally
  std::vector<const AssignmentRecord*> held;  // D-rows waiting on observation
  for (size_t m = 0; m < history.size(); ++m) {
    const AssignmentRecord& rec = history[m];
    const long now = rec.subject;
    base += static_cast<double>(rec.immigration_draws) * a_history.at(m);
    base[rec.treatment] -= 1.0;
    if (!delayed_urn_update) {
      base += rec.d_row;
    } else {
      if (rec.observed_at <= now)
        base += rec.d_row;
      else
        held.push_back(&rec);
      // release previously held rows that have come due by this step
      std::erase_if(held, [&](const AssignmentRecord* r) {
        if (r->observed_at <= now) {
          base += r->d_row;
          return true;
        }
        return false;
      });
    }
    const double err = (snapshots.at(m).z - base).cwiseAbs().maxCoeff();
    const double tol = 1e-9 * std::max<double>(1.0, static_cast<double>(now));
    if (err > rep.max_abs_error) {
      rep.max_abs_error = err;
      rep.tolerance = tol;
    }
    if (err > tol && rep.ok) {
      rep.ok = false;
      rep.first_bad_step = now;
    }
  }
  return rep;
}

}  // namespace imu
