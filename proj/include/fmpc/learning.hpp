#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fmpc/funnel.hpp"
#include "fmpc/model.hpp"
#include "fmpc/types.hpp"

namespace fmpc::learn {

/// Norm caps carving a compact set out of the linear model family. All caps
/// use the operator 2-norm (largest singular value) for matrices and the
/// Euclidean norm for vectors.
struct ParamBounds {
  double r_bar = 0.0;      ///< cap on each output-feedback block
  double s_bar = 0.0;      ///< cap on the internal-to-output coupling
  double gamma_bar = 1.0;  ///< cap on the input gain and on its inverse
  double d_bar = 0.0;      ///< cap on both constant offsets
  double p_bar = 0.0;      ///< cap on the output-to-internal coupling
  double eta_bar = 0.0;    ///< cap on the internal state magnitude
  double y_bar = 0.0;      ///< largest output magnitude the model must absorb
};

/// Decay the internal matrix must provide so that internal states stay within
/// eta_bar while the output stays within y_bar: largest admissible eigenvalue
/// -(p_bar*y_bar + d_bar)/eta_bar. Returns -infinity when eta_bar == 0 with a
/// positive numerator and 0 when both vanish.
double internal_decay_threshold(const ParamBounds& bounds);

/// Outcome of the parameter screen. `violated` names the first failing check
/// in screen order: S, Gamma, Gamma_inverse, D1, D2, P, eta0, Q_symmetry,
/// Q_eigenvalue, R_1..R_r.
struct FeasibilityReport {
  bool feasible = true;
  std::string violated;
  double value = 0.0;  ///< measured norm or eigenvalue
  double bound = 0.0;  ///< cap it was compared against
  explicit operator bool() const { return feasible; }
};

/// Screens a parameter set against the caps. Internal-dimension checks are
/// vacuous when the model has no internal state.
FeasibilityReport check_feasible_params(const model::LinearParams& params,
                                        const ParamBounds& bounds);

/// Deterministic projection onto the caps: vectors and non-square blocks are
/// scaled down to their cap, the input gain has its singular values clamped
/// into [1/gamma_bar, gamma_bar], and the internal matrix is symmetrized and
/// eigenvalue-shifted below the decay threshold. Idempotent; its output always
/// passes check_feasible_params. Throws InfeasibleProjection when the caps are
/// inconsistent (gamma_bar < 1, or a positive decay demand with eta_bar == 0).
model::LinearParams project_params(const model::LinearParams& params,
                                   const ParamBounds& bounds);

/// Saturation and effort levels any model within the caps can be driven with.
struct UmaxRho {
  double u_max = 0.0;    ///< smallest admissible input saturation
  double rho_bar = 0.0;  ///< effort ceiling at the chosen saturation
};

/// Required input saturation
///   gamma_bar*(r*r_bar*y_bar + s_bar*eta_bar + d_bar + sup|y_ref^(r)|
///              + gain-chain terms + sup|psi_r'|)
/// and effort ceiling r*r_bar*y_bar + s_bar*eta_bar + d_bar + gamma_bar*u,
/// where u is chosen_u_max when given, else the returned u_max. Both values
/// are monotone in every cap.
UmaxRho required_umax_rho(const ParamBounds& bounds, const funnel::AuxiliaryDesign& design,
                          double sup_yref_r, double sup_psi_r_dot,
                          std::optional<double> chosen_u_max = {});

/// Grid-based convenience overload; the sups are taken over [t0, t1].
UmaxRho required_umax_rho(const ParamBounds& bounds, const funnel::AuxiliaryDesign& design,
                          const model::RefSignal& ref, double t0, double t1,
                          std::optional<double> chosen_u_max = {});

/// Membership test for the saturated model family: the tracking task is
/// solvable within u_max (input-bound check against the feasibility gain
/// budget) and the drift plus saturated gain effort stays within rho_bar.
bool check_restricted_membership(const model::ControlAffineModel& mdl,
                                 const funnel::AuxiliaryDesign& design,
                                 const model::DynamicsBounds& dyn_bounds, double u_max,
                                 double rho_bar, double sup_yref_r, double sup_psi_r_dot);

/// One sampled snapshot of the closed loop: measured output, the model chain
/// state used for prediction, and the two input components.
struct LogRecord {
  double t = 0.0;
  Vec y;        ///< measured output, size m
  Vec x_model;  ///< stacked model chain state, size r*m
  Vec u_fmpc;   ///< predictive input component, size m
  Vec u_fc;     ///< feedback input component, size m
};

/// Append-only sample store with an optional sliding window; reads work on
/// snapshots so a learner call sees a fixed prefix.
class SignalLog {
 public:
  static constexpr std::size_t kDefaultWindow = 2000;

  SignalLog(int m, int r, std::optional<std::size_t> window = kDefaultWindow);

  int m() const { return m_; }
  int r() const { return r_; }
  std::optional<std::size_t> window() const { return window_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Requires strictly increasing timestamps and matching dimensions; drops
  /// the oldest record once the window is full.
  void append(LogRecord rec);
  const std::vector<LogRecord>& records() const { return records_; }
  std::vector<LogRecord> snapshot() const { return records_; }

  /// Serializes on the trace column layout: y into y_*, the model chain into
  /// yM_* and dy_*, inputs into u_fmpc_*/u_fc_*; psi/phi/margin/flags are 0.
  std::string to_csv() const;
  static SignalLog from_csv(std::string_view text,
                            std::optional<std::size_t> window = kDefaultWindow);

 private:
  int m_;
  int r_;
  std::optional<std::size_t> window_;
  std::vector<LogRecord> records_;
};

/// Fit weights: per-sample weights a_i on the squared output mismatch plus a
/// drift penalty b toward the previous parameters (squared Frobenius
/// distance, optionally weighted per block in the order R, S, Gamma, D1, Q,
/// P, D2, eta0).
struct LearnWeights {
  enum class Preset { FullWindow, LastOnly };

  Preset preset = Preset::FullWindow;
  std::vector<double> a;         ///< explicit per-sample weights, override the preset
  double b = 0.0;                ///< uniform drift weight
  std::vector<double> b_blocks;  ///< optional per-block drift weights, 8 entries

  static LearnWeights full_window() { return {}; }
  static LearnWeights last_only();
  static LearnWeights regularized(double b);

  /// Effective weight of sample i out of n.
  double sample_weight(std::size_t i, std::size_t n) const;
  /// Effective drift weight of parameter block j in 0..7.
  double block_weight(int j) const;
};

struct LearnOptions {
  bool learn_gamma = true;   ///< fit the input gain (else keep the previous one)
  bool learn_eta0 = true;    ///< fit the internal state at the window start
  int max_iterations = 120;  ///< damped Gauss-Newton iteration cap
  double substep = 0.01;     ///< integration step cap for log playback
  double fd_step = 1e-6;     ///< relative finite-difference step
};

/// Replay of a candidate model over logged inputs: the chain starts from the
/// first record (output block pinned to the measured output), the internal
/// state from params.eta0, and the summed input is held constant per sample
/// interval. Residuals compare the replayed output block with the log.
struct PlaybackResult {
  std::vector<Vec> chain;  ///< replayed chain state per sample, size r*m
  std::vector<Vec> eta;    ///< replayed internal state per sample
  double weighted_sse = 0.0;
  double rms = 0.0;  ///< sqrt(weighted SSE / (sum of weights * m))
};

PlaybackResult playback_linear(const model::LinearParams& params,
                               const std::vector<LogRecord>& records, int m, int r,
                               const LearnWeights& weights = {},
                               const LearnOptions& options = {});

/// Weighted output-mismatch RMS of params on the log (drift terms excluded).
double residual_rms(const model::LinearParams& params, const SignalLog& log,
                    const LearnWeights& weights = {}, const LearnOptions& options = {});

struct LearnResult {
  model::LinearParams params;
  bool updated = false;                ///< an improving step was accepted
  bool infeasible_projection = false;  ///< caps inconsistent, params = previous
  double residual_before = 0.0;        ///< RMS of the previous parameters
  double residual_after = 0.0;         ///< RMS of the returned parameters
  int iterations = 0;
};

/// Constrained fit of the linear model family to a signal log: equation-error
/// warm start, then damped Gauss-Newton on the playback residual with every
/// iterate projected onto the caps. Never returns parameters that fail the
/// screen and never returns a fit worse than `previous` on the same log.
/// Degenerate logs (no excitation, fewer than two samples) return `previous`
/// unchanged. Throws ConfigError on an empty log and DimensionMismatch when
/// log and parameter dimensions disagree.
LearnResult learn_linear(const SignalLog& log, const ParamBounds& bounds,
                         const model::LinearParams& previous,
                         const LearnWeights& weights = {}, const LearnOptions& options = {});

}  // namespace fmpc::learn
