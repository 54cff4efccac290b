#pragma once

#include <optional>
#include <vector>

#include "fmpc/funnel.hpp"
#include "fmpc/model.hpp"
#include "fmpc/types.hpp"

namespace fmpc::feedback {

/// Sample-and-hold high-gain controller parameters together with the
/// worst-case drift constants they were certified from.
struct ZohConfig {
  double iota = 0.75;        ///< activation threshold in (0,1)
  double nu = 1.0;           ///< input gain
  double sample_step = 0.1;  ///< hold interval between samples
  double kappa0 = 0.0;       ///< drift rate of the last error under zero input
  double kappa1 = 0.0;       ///< drift rate with the active input included
  double u_cap = 0.0;        ///< nu / iota, hard bound on every held input

  void validate() const;
};

/// Worst-case constants of the error recursion, levels 0..r-1 with the
/// zero row seeded at level 0: eps bounds the error norms, mu their rates,
/// eta_bar the rate of the gain-weighted errors.
struct FcBoundTable {
  std::vector<double> eps;
  std::vector<double> mu;
  std::vector<double> eta_bar;

  int levels() const { return static_cast<int>(eps.size()); }
  void validate() const;
};

/// Reciprocal margin the model prediction leaves inside the tracking funnel:
/// 1 / (psi1(t) - ||y_M - y_ref||). Throws PredictionOutsideFunnel when the
/// prediction has no margin left.
double adaptive_phi(double t, const Vec& y_M, const Vec& y_ref, const funnel::BoundaryFn& psi1);

/// High-gain feedback u = activation(||e_r||) * N(gamma(||e_r||^2)) * e_r on
/// the error recursion of z = chi_y - chi_ref scaled by phi. Throws
/// DomainViolation (with the blocking index) when the recursion leaves the
/// unit ball before the last level.
Vec funnel_control(const Vec& chi_y, const Vec& chi_ref, double phi, const funnel::GainSpec& gains,
                   int m);

/// funnel_control closed over a reference and a funnel, evaluated at every
/// integration stage: u(t, x, eta) with z = x - chi_ref(t), phi = phi_fn(t).
model::FeedbackFn fc_feedback(const model::RefSignal& ref, const funnel::BoundaryFn& phi_fn,
                              const funnel::GainSpec& gains);

/// Certified bound recursion: starting from eps_0 = eta_bar_0 = 0, each
/// eps_hat_i solves gamma(e^2) e = ratio_bound (1 + gamma(eps_{i-1}^2)
/// eps_{i-1}) + 1 + eta_bar_{i-1} by bisection, eps_i = max(init_error_i,
/// eps_hat_i) must stay below one, and mu_i / eta_bar_i follow the displayed
/// formulas. init_errors holds ||e_i(t0)|| for i = 1..r-1 (empty = zeros).
FcBoundTable fc_bound_table(double phi_ratio_bound, const std::vector<double>& init_errors,
                            const funnel::GainSpec& gains, int r);

/// Everything the sample-and-hold certification consumes. Suprema are taken
/// analytically when provided, otherwise sampled on a dense grid over
/// [t0, t1].
struct ZohDesignInputs {
  int r = 1;
  model::DynamicsBounds bounds;  ///< f_max, g_max and the required g_min
  funnel::BoundaryFn phi;        ///< tracking funnel reciprocal, inf/sup filled
  model::RefSignal ref;
  funnel::GainSpec gains = funnel::GainSpec::known_direction();
  std::vector<double> init_errors;  ///< ||e_i(t0)||, i = 1..r-1; empty = zeros
  double iota = 0.75;
  double t0 = 0.0;
  double t1 = 1.0;
  std::optional<double> phi_ratio_bound;  ///< sup |phi'/phi| override
  std::optional<double> sup_yref_r;       ///< sup ||y_ref^(r)|| override
  double safety_factor = 1.001;           ///< multiplies the minimal gain
  double degenerate_step_cap = 0.1;       ///< sample step when kappa0 = 0
  std::optional<double> u_max_data;       ///< tightens the step for filtered runs
};

/// Computes kappa0, the minimal admissible input gain (scaled by the safety
/// factor), kappa1, and the largest certified sampling step
/// min{kappa0/kappa1^2, (1-iota)/kappa0}; the second branch gains the
/// g_max * u_max_data term when a data input may act below the threshold.
ZohConfig zoh_constants(const ZohDesignInputs& in);

/// Held input for one sampling interval: zero below the activation threshold,
/// otherwise -nu e_r / ||e_r||^2. The norm never exceeds nu / iota.
Vec zoh_control(const Vec& e_r_at_sample, const ZohConfig& cfg);

/// Passes the data input through while the last error is below the threshold
/// and overrides it with zoh_control otherwise. Throws DataInputTooLarge when
/// ||u_data|| exceeds the certified bound.
Vec safety_filter(const Vec& e_r_at_sample, const Vec& u_data, const ZohConfig& cfg,
                  double u_max_data);

/// Data input supplied below the activation threshold when no external
/// controller is attached.
enum class DataPolicy { ZeroInput, HoldLast };

/// Held warm-start value for the sampled optimal control problem: zero while
/// the last auxiliary error fills less than half its funnel, otherwise
/// -nu psi_r(t) xi_r(t) / ||xi_r(t)||^2 (norm at most 2 nu).
Vec zoh_feasibility_feedback(double t_sample, const Vec& chain_state,
                             const funnel::AuxiliaryDesign& design, const model::RefSignal& ref,
                             double nu);

/// Largest integer multiple of h not exceeding sample_step. Throws
/// ConfigError when sample_step < h (nothing to snap to).
double snap_sample_step(double sample_step, double h);

struct ZohRunResult {
  model::SimulationTrace trace;
  std::vector<double> sample_times;
  std::vector<Vec> held_inputs;     ///< applied value per sampling interval
  double actual_sample_step = 0.0;  ///< after snapping onto the h grid
  double max_u_norm = 0.0;
  double max_tracking_scaled = 0.0;  ///< max over nodes of phi ||y - y_ref||
  double max_last_error = 0.0;       ///< max over nodes of ||e_r||
  bool contained = true;  ///< ||e_i|| < 1 (i < r) and ||e_r|| <= 1 at all nodes
};

/// Optional data-driven branch for run_zoh_tracking; when absent the plain
/// sample-and-hold law runs alone.
struct DataInputSpec {
  DataPolicy policy = DataPolicy::ZeroInput;
  double u_max_data = 0.0;
  model::FeedbackFn external;  ///< overrides the policy when set
};

/// Closed-loop sample-and-hold tracking run: at each sample the held input is
/// zoh_control (or safety_filter when a data branch is given), integrated with
/// the global step h between samples. Held values are recorded in the u_fc
/// channel; a passed-through data input lands in u_fmpc.
ZohRunResult run_zoh_tracking(const model::ControlAffineModel& sys, const model::RefSignal& ref,
                              const funnel::BoundaryFn& phi_fn, const funnel::GainSpec& gains,
                              const ZohConfig& cfg, double t0, double t1, double h, const Vec& x0,
                              const std::optional<DataInputSpec>& data = {});

}  // namespace fmpc::feedback
