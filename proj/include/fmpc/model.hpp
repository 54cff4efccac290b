#pragma once

#include <optional>
#include <variant>
#include <vector>

#include "fmpc/funnel.hpp"
#include "fmpc/types.hpp"

namespace fmpc::model {

/// Strictly increasing time grid starting at the left end of the working
/// interval. When uniform_step is set, consecutive gaps must match it.
struct Partition {
  std::vector<double> times;
  std::optional<double> uniform_step;

  static Partition uniform(double t0, double t1, double dt);
  /// Index of the right-open cell [t_i, t_{i+1}) containing t; clamped to the
  /// first/last cell just outside the grid (floating-point guard).
  int cell_index(double t) const;
  void validate() const;
  double t_begin() const { return times.front(); }
  double t_end() const { return times.back(); }
  int cells() const { return static_cast<int>(times.size()) - 1; }
};

/// Piecewise-constant control signal over a partition, right-open cells.
struct StepFunction {
  Partition partition;
  std::vector<Vec> values;  // one per cell

  Vec operator()(double t) const;
  void validate() const;
};

struct OperatorNone {};

/// Output map T(z)(t) = sum_j R_j z_j(t) + S eta(t) with internal dynamics
/// eta_dot = Q eta + P z_1 + D2; eta is co-integrated, never re-solved from
/// output history.
struct LinearInternal {
  std::vector<Mat> R;  // r blocks, m x m
  Mat S;               // m x nu
  Mat Q;               // nu x nu
  Mat P;               // nu x m
  Vec D2;              // nu
  Vec eta0;            // nu
};

/// General internal dynamics eta_dot = q_map(x, eta) with operator output
/// readout(x, eta).
struct NonlinearInternal {
  std::function<Vec(const Vec&, const Vec&)> q_map;
  std::function<Vec(const Vec&, const Vec&)> readout;
  Vec eta0;
};

using OperatorSpec = std::variant<OperatorNone, LinearInternal, NonlinearInternal>;

int internal_dim(const OperatorSpec& op);
Vec initial_eta(const OperatorSpec& op);
/// Operator output fed to f and g. None: the state stack itself.
Vec op_output(const OperatorSpec& op, const Vec& x, const Vec& eta);
/// eta_dot; zero-length for OperatorNone.
Vec op_rate(const OperatorSpec& op, const Vec& x, const Vec& eta);

/// Order-r control-affine system: x_i' = x_{i+1}, and on the top block
/// x_r' = f(w) + g(w) u + d(t) with w the operator output.
struct ControlAffineModel {
  int r = 1;
  int m = 1;
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> g;
  OperatorSpec op;
  std::optional<VectorFn> disturbance;
};

/// Data of the linear model family
/// y^{(r)} = sum_j R_j y^{(j-1)} + S eta + D1 + Gamma u,
/// eta_dot = Q eta + P y + D2.
struct LinearParams {
  std::vector<Mat> R;
  Mat S;
  Mat Q;
  Mat P;
  Vec D1;
  Vec D2;
  Mat Gamma;
  Vec eta0;
};

ControlAffineModel make_linear_model(const LinearParams& p);

/// Copy of the model whose internal state starts from eta0 (no-op for
/// OperatorNone with an empty eta0).
ControlAffineModel with_initial_eta(ControlAffineModel mdl, const Vec& eta0);

/// Reference signal with analytic derivatives 0..r.
struct RefSignal {
  int m = 1;
  int r = 1;
  std::function<Vec(double, int)> deriv;  // j-th derivative
  /// Stacked derivatives 0..r-1.
  Vec stack(double t) const;
};

struct TraceFlags {
  bool escaped = false;
  bool funnel_violated = false;
  bool nan = false;
};

/// Node-indexed simulation record. psi/phi/margin columns are filled by the
/// loop drivers when a funnel is attached; u splits into the predictive and
/// feedback components (total applied input is their sum).
struct SimulationTrace {
  int r = 1;
  int m = 1;
  std::vector<double> times;
  std::vector<Vec> x;       // state stack, r*m
  std::vector<Vec> eta;     // internal state (length 0 when none)
  std::vector<Vec> u_fmpc;
  std::vector<Vec> u_fc;
  std::vector<double> psi;
  std::vector<double> phi;
  std::vector<double> margin;
  std::vector<double> jump_times;   // per junction of a concatenation
  std::vector<double> jump_sizes;
  TraceFlags flags;

  Vec y(int node) const { return x[node].head(m); }
  Vec u_total(int node) const { return u_fmpc[node] + u_fc[node]; }
  int nodes() const { return static_cast<int>(times.size()); }
  void validate() const;
};

/// Classical four-stage Runge-Kutta update. Throws NonFinite when a stage
/// evaluation produces NaN/Inf.
Vec rk4_step(const std::function<Vec(double, const Vec&)>& field, double t, const Vec& x,
             double h);

/// Node monitors: blowup threshold marks finite escape; an optional
/// containment predicate sets the funnel flag (and truncates when asked).
struct Monitors {
  double blowup = 1e9;
  std::function<bool(double, const Vec& x, const Vec& eta)> funnel_ok;
  bool truncate_on_funnel = false;
};

using FeedbackFn = std::function<Vec(double, const Vec& x, const Vec& eta)>;

/// Integrates the stacked system (chain + internal state) under a
/// piecewise-constant input. h must divide every partition cell.
/// The trace is returned even when a monitor truncates the run.
SimulationTrace integrate_closed_loop(const ControlAffineModel& plant, const StepFunction& input,
                                      double t0, double t1, double h, const Vec& x0,
                                      const Monitors& mon = {});

/// Same with a feedback law evaluated at every integration stage.
SimulationTrace integrate_closed_loop(const ControlAffineModel& plant, const FeedbackFn& input,
                                      double t0, double t1, double h, const Vec& x0,
                                      const Monitors& mon = {});

/// Joins traces end-to-start. State jumps are allowed only at jump_times;
/// junction semantics are right-open (the later trace owns the junction node)
/// and every junction's jump magnitude is recorded.
SimulationTrace concatenate(const std::vector<SimulationTrace>& traces,
                            const std::vector<double>& jump_times, double tol = 1e-9);

struct DynamicsBounds {
  double f_max = 0.0;
  double g_max = 0.0;
  double g_inv_max = 0.0;
  std::optional<double> g_min;  // present only for pointwise positive-definite g
};

struct SamplingSpec {
  int n = 2000;
  double eta_radius = 1.0;
  double t0 = 0.0;
  double t1 = 1.0;
  unsigned seed = 1;
  bool want_g_min = true;
};

/// Validates and passes through user-supplied analytic bounds.
DynamicsBounds dynamics_bounds_analytic(const DynamicsBounds& values);

/// Estimates the bounds by sampling states from the compact set implied by
/// the auxiliary design (errors inside the funnels, shifted by the reference)
/// and internal states from a ball. Throws NotPositiveDefinite when g_min is
/// requested but the symmetric part of g fails at a sample.
DynamicsBounds dynamics_bounds_sampled(const ControlAffineModel& model,
                                       const funnel::AuxiliaryDesign& design,
                                       const RefSignal& ref, const SamplingSpec& spec);

}  // namespace fmpc::model
