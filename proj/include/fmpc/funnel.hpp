#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "fmpc/types.hpp"

namespace fmpc::funnel {

/// Decay pair of a funnel boundary: psi(t0) >= beta/alpha and
/// psi_dot(t) >= -alpha*psi(t) + beta on the horizon.
struct AlphaBeta {
  double alpha = 1.0;
  double beta = 1.0;
};

/// Funnel boundary function with derivative, range statistics on the working
/// horizon, and its decay pair.
struct FunnelSpec {
  ScalarFn psi;
  ScalarFn psi_dot;
  double inf_psi = 0.0;
  double sup_psi = 0.0;
  double alpha = 1.0;
  double beta = 1.0;
};

struct GridStats {
  double inf = 0.0;
  double sup = 0.0;
};

/// Range of a scalar signal sampled on a uniform n-point grid over [t0, t1].
/// Not certified for adversarial functions; scenario funnels override
/// analytically where exact values matter.
GridStats grid_inf_sup(const ScalarFn& f, double t0, double t1, int n = 10000);

/// Constructive decay pair: alpha = 1, beta = inf psi when inf psi_dot >= 0;
/// otherwise alpha = -inf psi_dot/(inf psi / 2), beta = -inf psi_dot.
/// Throws NonPositiveFunnel when inf psi <= 0 on the grid.
AlphaBeta derive_alpha_beta(const ScalarFn& psi, const ScalarFn& psi_dot, double t0, double t1,
                            int grid_n = 10000);

/// Checks a user-supplied pair against the decay inequalities on the grid.
bool admissible_alpha_beta(const ScalarFn& psi, const ScalarFn& psi_dot, double alpha, double beta,
                           double t0, double t1, int grid_n = 10000);

struct FunnelOverrides {
  std::optional<double> inf_psi;
  std::optional<double> sup_psi;
  std::optional<AlphaBeta> alpha_beta;
};

/// Assembles a FunnelSpec, filling range statistics from the grid and the
/// decay pair from the constructive lemma unless overridden.
FunnelSpec make_funnel(ScalarFn psi, ScalarFn psi_dot, double t0, double t1,
                       const FunnelOverrides& ov = {});

/// psi(t) = a*exp(-lambda*t) + c with analytic range statistics on [t0, t1].
FunnelSpec make_exponential_funnel(double a, double lambda, double c, double t0, double t1,
                                   std::optional<AlphaBeta> ab = {});

/// Constant funnel psi == c with decay pair (1, c).
FunnelSpec make_constant_funnel(double c);

enum class DesignMode { Varying, Simplified };

/// One auxiliary funnel: value, derivative, and range on the horizon.
struct BoundaryFn {
  ScalarFn value;
  ScalarFn deriv;
  double inf = 0.0;
  double sup = 0.0;
};

/// Auxiliary funnel vector (psi_1..psi_r) plus filter gains k_1..k_{r-1} from
/// one of the two parameter designs.
struct AuxiliaryDesign {
  int r = 1;
  int m = 1;
  std::vector<double> k;             // r-1 gains
  std::vector<BoundaryFn> psi_list;  // psi_1..psi_r
  DesignMode mode = DesignMode::Varying;
  double gamma_margin = 0.0;  // initial-error margin constant, 0 when r = 1
  double alpha = 1.0;
  double beta = 1.0;
};

/// Auxiliary error variables xi_1..xi_r (each in R^m) of the stacked error z.
/// xi_1(z) = z_1, xi_{i+1}(z) = xi_i(shift z) + k_i xi_i(z).
std::vector<Vec> xi(const Vec& z, const std::vector<double>& k, int m);

/// Matrix S with stacked (xi_1;..;xi_r) = S z; block lower triangular with
/// identity diagonal blocks.
Mat xi_matrix(const std::vector<double>& k, int r, int m);

/// Time derivatives of xi_i at a point of an error chain (z_dot_j = z_{j+1}):
/// xi_i_dot = xi_i applied to the left-shifted stack, defined for i <= r-1.
std::vector<Vec> xi_shift(const Vec& z, const std::vector<double>& k, int m);

struct DesignOverrides {
  std::optional<double> gamma_margin;
  std::optional<std::vector<double>> gains;
};

/// Builds an AuxiliaryDesign from the funnel and the initial error stack.
/// Varying mode derives gamma and the gains from the recursive inequalities
/// (tight choice) unless pinned via overrides; Simplified mode sets every
/// k_i = alpha+2 and psi_2..psi_r == beta/alpha.
/// Throws InitialErrorOutsideFunnel with the first violated index.
AuxiliaryDesign design_auxiliary(const FunnelSpec& psi1, const Vec& init_error, int m,
                                 DesignMode mode, double t0, const DesignOverrides& ov = {});

/// Boundary-proximity penalty: ||e||^2/(psi^2-||e||^2) inside, infinite at or
/// beyond the boundary.
ExtendedCost funnel_penalty(double t, const Vec& e, const ScalarFn& psi_r);

/// Non-strict quadratic penalty: ||e||^2 while ||e|| <= psi, infinite beyond.
ExtendedCost quadratic_penalty_nonstrict(double t, const Vec& e, const ScalarFn& psi_r);

enum class StageCostKind { FunnelStrict, QuadraticNonStrict, QuadraticUnconstrained };

/// Stage cost: penalty(xi_r) + lambda_u*||u - u_offset||^2, infinity absorbing.
ExtendedCost stage_cost(double t, const Vec& xi_r, const Vec& u, const ScalarFn& psi_r,
                        double lambda_u, const std::optional<Vec>& u_offset = {},
                        StageCostKind kind = StageCostKind::FunnelStrict);

struct Containment {
  bool inside = false;
  std::vector<double> margins;  // psi_i(t) - ||xi_i(z)||
};

/// Membership of the stacked error in the auxiliary funnel set at time t,
/// with per-index margins.
Containment in_D(double t, const Vec& z, const AuxiliaryDesign& design);

/// Feedback gain design: bijection gamma on [0,1), surjection N, and an
/// optional activation threshold that zeroes the feedback for small errors.
struct GainSpec {
  std::function<double(double)> gamma;
  std::function<double(double)> gamma_dot;
  std::function<double(double)> N;
  std::optional<double> s_crit;

  /// activation(s) = s - s_crit clipped at 0 when a threshold is set, else 1.
  double activation(double s) const {
    if (!s_crit) return 1.0;
    return std::max(0.0, s - *s_crit);
  }

  /// gamma(s) = 1/(1-s), N(s) = -scale*s (sign-definite input direction).
  static GainSpec known_direction(double scale = 1.0);
  /// N(s) = s*sin(s) for unknown input direction.
  static GainSpec unknown_direction();
};

/// Feedback error variables e_1..e_r with membership flags.
struct FcErrors {
  std::vector<Vec> e;                   // defined entries only
  std::optional<int> domain_violation;  // 1-based index with ||e_i|| >= 1 blocking the recursion
  std::vector<bool> in_eps;             // per defined index, ||e_i|| < eps when eps given
  bool all_defined(int r) const { return static_cast<int>(e.size()) == r; }
};

/// e_1 = phi z_1, e_{i+1} = phi z_{i+1} + gamma(||e_i||^2) e_i. The recursion
/// stops at the first ||e_i|| >= 1 (outside gamma's domain); later entries are
/// left undefined and the index is reported.
FcErrors fc_errors(double phi, const Vec& z, int m, const GainSpec& gains,
                   std::optional<double> eps = {});

}  // namespace fmpc::funnel
