#pragma once

#include <optional>

#include "fmpc/funnel.hpp"
#include "fmpc/model.hpp"
#include "fmpc/types.hpp"

namespace fmpc::ocp {

/// Finite-horizon problem over piecewise-constant inputs: minimize the
/// funnel stage cost of the predicted model trajectory subject to the
/// per-cell input ball ||u_i|| <= u_max.
struct OcpProblem {
  model::ControlAffineModel mdl;
  funnel::AuxiliaryDesign design;
  model::RefSignal ref;
  double t_hat = 0.0;
  double T = 1.0;
  model::Partition partition;
  double u_max = 1.0;
  double lambda_u = 0.0;
  std::optional<Vec> u_offset;
  Vec x0;
  Vec eta0;
  double h = 1e-3;
  funnel::StageCostKind cost_kind = funnel::StageCostKind::FunnelStrict;
  int max_iterations = 200;

  /// Partition must cover the window and the initial state must lie in the
  /// auxiliary funnel set at t_hat (DomainViolation reports the first index).
  void validate() const;
};

struct OcpSolution {
  model::StepFunction u_star;
  ExtendedCost cost;
  bool feasible = false;
  int iterations = 0;
  ExtendedCost warm_start_cost;
};

/// Left-rectangle quadrature of the stage cost on the RK4 grid of the
/// predicted trajectory; infinite when the prediction escapes or any grid
/// node has the last auxiliary error at/outside its funnel.
ExtendedCost cost_J(const model::StepFunction& u, const OcpProblem& p);

/// Constructive feedback keeping ||xi_r(t)/psi_r(t)|| exactly constant:
/// u = g^{-1}(-f + y_ref^{(r)} - sum_j k_j xi_j^{(r-j)} + xi_r psi_r'/psi_r),
/// with the xi derivatives resolved through the error-chain recursion into a
/// fixed linear combination of xi_1..xi_r. Throws SingularG on evaluation at
/// a state where g is not invertible.
model::FeedbackFn feasibility_feedback(const OcpProblem& p);

/// Input bound sufficient for feasibility:
/// g_inv_max * (f_max + sup||y_ref^{(r)}|| + sum_j k_j mu_j^{r-j} + sup|psi_r'|)
/// with mu_i^0 = sup psi_i and mu_i^{j+1} = mu_{i+1}^j + k_i mu_i^j.
double u_max_bound(const model::DynamicsBounds& bounds, const funnel::AuxiliaryDesign& design,
                   double sup_yref_r, double sup_psi_r_dot);

/// Projected local descent over stacked cell values (central finite
/// differences, per-cell ball projection, first improving step accepted).
/// The warm start defaults to a sample-and-hold rollout of
/// feasibility_feedback; the result never costs more than the warm start.
/// Throws NoFeasiblePoint when the warm start itself is infeasible.
OcpSolution solve_ocp(const OcpProblem& p, std::optional<model::StepFunction> warm_start = {});

}  // namespace fmpc::ocp
