#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fmpc/feedback.hpp"
#include "fmpc/funnel.hpp"
#include "fmpc/learning.hpp"
#include "fmpc/model.hpp"
#include "fmpc/ocp.hpp"
#include "fmpc/types.hpp"

namespace fmpc::loop {

/// Reuse the model state reached at the end of the previous interval verbatim.
/// The prediction never consumes measurements, so the whole input signal can be
/// computed ahead of time from the initial condition alone.
struct CarryOver {};

/// Re-initialize the model from the measured state at every step, projected
/// onto the set of initial values that keep both the model error and the
/// model/system mismatch controllable.  Unset tolerances are resolved against
/// the tracking task via default_eps / default_lambda.
struct ProperInit {
  std::optional<double> eps;     ///< mismatch envelope bound, in (0, 1)
  std::optional<double> lambda;  ///< funnel fraction for the model error, in (0, 1]
  bool strict = false;           ///< throw instead of degrading when the envelope is unmet
};

/// Pin the model output to the measurement at every step (first-order chains
/// only, where the output is the whole chain state).
struct ExactOutputMatch {};

using InitStrategy = std::variant<CarryOver, ProperInit, ExactOutputMatch>;

/// Receding-horizon loop configuration shared by all run_* drivers.
struct MpcConfig {
  double delta = 0.1;                ///< interval between optimizations
  double T = 1.0;                    ///< prediction horizon, >= delta
  double u_max = 1.0;                ///< hard input bound for the optimized input
  double lambda_u = 0.0;             ///< input effort weight in the stage cost
  std::optional<Vec> u_offset;       ///< effort is measured relative to this input
  double control_step = 0.0;         ///< input mesh; 0 means one cell per delta
  InitStrategy init = CarryOver{};   ///< model re-initialization rule
  std::optional<int> learn_every;    ///< model update period, in loop iterations
  /// Apply `init` only on iterations where the model was just refit; the model
  /// carries over everywhere else.  Requires learn_every.
  bool init_only_after_learning = false;
  double h = 1e-3;                   ///< integration step; must divide control_step
  funnel::StageCostKind cost_kind = funnel::StageCostKind::FunnelStrict;
  int ocp_iterations = 60;           ///< descent iteration cap per solve; 0 keeps the warm start
  double zoh_nu = 1.0;               ///< gain of the sampled-hold warm-start law

  double effective_control_step() const { return control_step > 0.0 ? control_step : delta; }

  /// Throws ConfigError on inconsistent values.  `r` checks order-dependent
  /// rules (lambda = 1 and ExactOutputMatch require a first-order chain).
  void validate(int r) const;
};

/// What to track and from where.  `psi1` is the funnel around the output
/// error; `design` carries the auxiliary funnels and gains derived from it.
struct TrackingTask {
  funnel::FunnelSpec psi1;
  funnel::AuxiliaryDesign design;
  model::RefSignal ref;
  double t0 = 0.0;
  double t1 = 1.0;
  Vec x0;                        ///< system chain state at t0
  std::optional<Vec> model_x0;   ///< model chain state at t0 when it differs
  std::optional<Vec> eta0;       ///< model internal state override at t0
};

/// Outcome of projecting a measured chain state onto the admissible set of
/// model initial values.  `state` interpolates between the reference stack
/// (theta = 0) and the measurement (theta = 1); the largest theta that keeps
/// every constraint satisfied wins, so `distance` is minimal along that line.
struct ProperInitResult {
  Vec state;
  double theta = 1.0;
  double distance = 0.0;     ///< ||state - measurement||
  bool in_funnel_set = true; ///< every auxiliary error inside its funnel
  bool lambda_met = true;    ///< primary error under lambda * psi1
  bool envelope_met = true;  ///< every mismatch error level below eps
};

/// Explicit form of the per-step projection used by ProperInit.  `gains`
/// shapes the mismatch error recursion.  With strict = true an unmet envelope
/// throws MeasurementOutsideEnvelope; otherwise the envelope is dropped and
/// the result flags envelope_met = false.
ProperInitResult proper_init(double t, const Vec& measurement,
                             const funnel::AuxiliaryDesign& design, const model::RefSignal& ref,
                             const funnel::GainSpec& gains, double eps, double lambda,
                             bool strict = false);

/// Fraction of the funnel the model error must stay under for re-initialized
/// predictions to remain feasible: sqrt((1 + gamma) / 2) when the auxiliary
/// funnels were designed with an explicit margin gamma, sqrt(1 / 2) otherwise.
double default_lambda(const funnel::AuxiliaryDesign& design);

/// Mismatch envelope bound: 95 % of the largest level certified by the
/// feedback bound table for the worst funnel contraction rate on [t0, t1],
/// clamped to (0, 1); falls back to 1/2 when no level is certified.
double default_eps(const funnel::AuxiliaryDesign& design, const funnel::FunnelSpec& psi1,
                   const funnel::GainSpec& gains, double lambda, double t0, double t1);

/// One row per loop iteration.
struct IterationRecord {
  int k = 0;
  double t = 0.0;
  double cost = 0.0;          ///< optimal cost of the solved problem
  bool cost_infinite = false;
  bool feasible = false;      ///< solver reported a finite-cost input
  double jump = 0.0;          ///< model state change applied before solving
  double residual = std::numeric_limits<double>::quiet_NaN();  ///< learner fit, when it ran
  bool learned = false;       ///< model was replaced this iteration
  double theta = 1.0;         ///< kept fraction of the measurement offset
  bool envelope_met = true;
  std::vector<double> min_margins;  ///< per-level min of psi_i - ||xi_i|| on the applied interval
  double lambda_excess = 0.0;       ///< max of ||xi_1|| - lambda * psi1 on the applied interval
};

/// Aggregates over the whole run.
struct RunSummary {
  double max_error_ratio = 0.0;  ///< max ||y - y_ref|| / psi1 over trace nodes
  double max_u_fmpc = 0.0;
  double max_u_fc = 0.0;
  bool violated = false;         ///< some node left the funnel
  double min_decomposition_margin = std::numeric_limits<double>::infinity();
  ///< min over nodes of psi1 - ||y - y_M|| - ||y_M - y_ref|| (two-loop runs)
  double total_fc_effort = 0.0;  ///< integral of ||u_fc|| over the run
};

/// Full record of a closed-loop run.  Solver failures mid-run abort the loop
/// and are reported in-band: `error` carries the code, `error_iteration` the
/// loop index, and `trace` the partial trajectory up to the failure.
/// Configuration and precondition violations throw instead.
struct RunResult {
  model::SimulationTrace trace;                      ///< the controlled system
  std::optional<model::SimulationTrace> model_trace; ///< prediction model, two-loop runs
  std::vector<IterationRecord> iterations;
  RunSummary summary;
  std::optional<ErrorCode> error;
  int error_iteration = -1;
  std::string error_what;
};

/// Receding-horizon funnel tracking of `mdl` itself: at each step solve the
/// horizon problem from the current state, apply the first interval of the
/// minimizer, repeat.  Only CarryOver initialization is meaningful here.
RunResult run_funnel_mpc(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                         const TrackingTask& task);

/// Two-loop tracking: the horizon problem is solved on `mdl`, the optimized
/// input feeds both `system` and `mdl`, and a model-referenced funnel
/// controller adds a correction to the system input that keeps the true
/// output inside the funnel despite model mismatch.  The correction gain
/// grows as the mismatch approaches the headroom the prediction leaves to
/// the funnel boundary.
RunResult run_robust_fmpc(const model::ControlAffineModel& system,
                          const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                          const TrackingTask& task, const funnel::GainSpec& gains);

/// Model update rule: maps the logged signals and the current parameters to a
/// fit.  The default is learn_linear with the setup's bounds and weights.
using LearnerFn = std::function<learn::LearnResult(const learn::SignalLog&,
                                                   const model::LinearParams&)>;

/// Everything the learning loop needs besides the configuration: the
/// parameter caps, the initial model, the fit weighting, and how much history
/// to keep.
struct LearningSetup {
  learn::ParamBounds bounds;
  model::LinearParams initial;
  learn::LearnWeights weights = learn::LearnWeights::last_only();
  learn::LearnOptions options;
  std::optional<size_t> window = 2000;  ///< records kept for fitting; nullopt = all
  /// Check the initial and every refit parameterization against `bounds`.
  /// Switch off for model families outside the capped class (for example
  /// grey-box fits over a physical parameter box, which is compact on its
  /// own); the learner is then trusted to stay inside its own feasible set.
  bool screen_params = true;
};

/// Two-loop tracking with a model that is refit from closed-loop data every
/// `learn_every` iterations.  A learner output that violates the parameter
/// caps aborts with LearnerReturnedInfeasibleModel; a fit the learner itself
/// rejects (projection failure, no improvement) keeps the previous model and
/// the loop continues.
RunResult run_learning_rfmpc(const model::ControlAffineModel& system, const LearningSetup& setup,
                             const MpcConfig& cfg, const TrackingTask& task,
                             const funnel::GainSpec& gains, const LearnerFn& learner = {});

/// Receding-horizon tracking with sampled-and-held warm starts: each horizon
/// problem starts from the input the sampled-hold feasibility law would apply
/// on each cell, so a solution exists for any descent budget, including
/// ocp_iterations = 0 which applies the warm start unchanged.
RunResult run_sampled_fmpc(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                           const TrackingTask& task);

/// One JSON object per iteration, newline separated: k, cost, feasible, jump,
/// residual (null when the learner did not run).
std::string diagnostics_jsonl(const RunResult& result);

}  // namespace fmpc::loop
