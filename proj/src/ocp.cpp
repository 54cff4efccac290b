#include "fmpc/ocp.hpp"

#include <algorithm>
#include <cmath>

namespace fmpc::ocp {

namespace {

Vec error_stack(const OcpProblem& p, double t, const Vec& x) { return x - p.ref.stack(t); }

model::ControlAffineModel prediction_model(const OcpProblem& p) {
  return model::with_initial_eta(p.mdl, p.eta0);
}

// Coefficients of xi_j^{(order)} over (xi_1..xi_r) via the chain
// xi_i^{(n+1)} = xi_{i+1}^{(n)} - k_i xi_i^{(n)}, valid while j+order <= r.
Vec xi_derivative_coeffs(int j, int order, const std::vector<double>& k, int r) {
  Vec c = Vec::Zero(r);
  if (order == 0) {
    c(j - 1) = 1.0;
    return c;
  }
  c = xi_derivative_coeffs(j + 1, order - 1, k, r) -
      k[j - 1] * xi_derivative_coeffs(j, order - 1, k, r);
  return c;
}

}  // namespace

void OcpProblem::validate() const {
  partition.validate();
  if (std::abs(partition.t_begin() - t_hat) > 1e-9 || partition.t_end() < t_hat + T - 1e-9)
    throw Error(ErrorCode::ConfigError, "partition does not cover the window");
  for (int i = 0; i < partition.cells(); ++i) {
    const double len = partition.times[i + 1] - partition.times[i];
    const double q = len / h;
    if (q < 1.0 - 1e-6 || std::abs(q - std::lround(q)) > 1e-6 * std::max(1.0, q))
      throw Error(ErrorCode::StepIncompatibleWithPartition,
                  "integration step does not divide a partition cell");
  }
  const auto c = funnel::in_D(t_hat, error_stack(*this, t_hat, x0), design);
  if (!c.inside) {
    for (size_t i = 0; i < c.margins.size(); ++i)
      if (c.margins[i] <= 0.0)
        throw Error(ErrorCode::DomainViolation, "initial state outside the auxiliary funnel set",
                    static_cast<long>(i) + 1);
    throw Error(ErrorCode::DomainViolation, "initial state outside the auxiliary funnel set");
  }
}

ExtendedCost cost_J(const model::StepFunction& u, const OcpProblem& p) {
  model::SimulationTrace tr;
  try {
    tr = model::integrate_closed_loop(prediction_model(p), u, p.t_hat, p.t_hat + p.T, p.h, p.x0);
  } catch (const Error&) {
    return ExtendedCost::inf();
  }
  if (tr.flags.nan || tr.flags.escaped) return ExtendedCost::inf();
  const int n = tr.nodes();
  const auto& psi_r = p.design.psi_list[p.design.r - 1];

  std::vector<Vec> xi_r(n);
  for (int k = 0; k < n; ++k) {
    const Vec z = error_stack(p, tr.times[k], tr.x[k]);
    xi_r[k] = funnel::xi(z, p.design.k, p.design.m).back();
    if (p.cost_kind == funnel::StageCostKind::FunnelStrict &&
        !strictly_inside(xi_r[k].norm(), psi_r.value(tr.times[k])))
      return ExtendedCost::inf();
  }
  ExtendedCost total = ExtendedCost::finite(0.0);
  for (int k = 0; k + 1 < n; ++k) {
    const double t = tr.times[k];
    total += p.h * funnel::stage_cost(t, xi_r[k], u(t), psi_r.value, p.lambda_u, p.u_offset,
                                      p.cost_kind);
    if (total.infinite) return ExtendedCost::inf();
  }
  return total;
}

model::FeedbackFn feasibility_feedback(const OcpProblem& p) {
  const int r = p.design.r;
  const int m = p.design.m;
  // Fixed combination sum_j k_j xi_j^{(r-j)} = sum_i c_total(i) xi_{i+1}.
  Vec c_total = Vec::Zero(r);
  for (int j = 1; j <= r - 1; ++j)
    c_total += p.design.k[j - 1] * xi_derivative_coeffs(j, r - j, p.design.k, r);

  const auto design = p.design;
  const auto ref = p.ref;
  const auto mdl = p.mdl;
  return [design, ref, mdl, c_total, r, m](double t, const Vec& x, const Vec& eta) -> Vec {
    Vec z(x.size());
    for (int j = 0; j < r; ++j)
      z.segment(static_cast<long>(j) * m, m) =
          x.segment(static_cast<long>(j) * m, m) - ref.deriv(t, j);
    const auto xs = funnel::xi(z, design.k, m);
    Vec gain_term = Vec::Zero(m);
    for (int i = 0; i < r; ++i) gain_term += c_total(i) * xs[i];
    const auto& psi_r = design.psi_list[r - 1];
    const double pv = psi_r.value(t);
    const Vec rhs_ratio = (psi_r.deriv(t) / pv) * xs[r - 1];

    const Vec w = model::op_output(mdl.op, x, eta);
    const Vec rhs = -mdl.f(w) + ref.deriv(t, r) - gain_term + rhs_ratio;
    const Mat g = mdl.g(w);
    Eigen::FullPivLU<Mat> lu(g);
    if (!lu.isInvertible())
      throw Error(ErrorCode::SingularG, "input map singular along the feedback trajectory");
    return lu.solve(rhs);
  };
}

double u_max_bound(const model::DynamicsBounds& bounds, const funnel::AuxiliaryDesign& design,
                   double sup_yref_r, double sup_psi_r_dot) {
  const int r = design.r;
  // mu[i][j] for 1-based stage i, derivative count j, defined while i+j <= r.
  std::vector<std::vector<double>> mu(r + 2);
  for (int i = 1; i <= r; ++i) {
    mu[i].assign(r + 1, 0.0);
    mu[i][0] = design.psi_list[i - 1].sup;
  }
  for (int j = 0; j < r; ++j)
    for (int i = 1; i + 1 + j <= r; ++i) mu[i][j + 1] = mu[i + 1][j] + design.k[i - 1] * mu[i][j];

  double gain_sum = 0.0;
  for (int j = 1; j <= r - 1; ++j) gain_sum += design.k[j - 1] * mu[j][r - j];
  return bounds.g_inv_max * (bounds.f_max + sup_yref_r + gain_sum + sup_psi_r_dot);
}

namespace {

void project_cell(Vec& u, double u_max) {
  const double n = u.norm();
  if (n > u_max && n > 0.0) u *= u_max / n;
}

model::StepFunction rollout_warm_start(const OcpProblem& p) {
  const auto fb = feasibility_feedback(p);
  model::StepFunction ws;
  ws.partition = p.partition;
  const auto base = prediction_model(p);
  Vec x = p.x0;
  Vec eta = p.eta0;
  for (int i = 0; i < p.partition.cells(); ++i) {
    const double ta = p.partition.times[i];
    const double tb = p.partition.times[i + 1];
    Vec ui = fb(ta, x, eta);
    project_cell(ui, p.u_max);
    ws.values.push_back(ui);
    model::StepFunction hold;
    hold.partition.times = {ta, tb};
    hold.values = {ui};
    const auto tr = model::integrate_closed_loop(model::with_initial_eta(base, eta), hold, ta, tb,
                                                 p.h, x);
    if (tr.flags.nan || tr.flags.escaped) {
      // Fill the remaining cells and let the caller see the infinite cost.
      for (int j = i + 1; j < p.partition.cells(); ++j) ws.values.push_back(Vec::Zero(p.mdl.m));
      return ws;
    }
    x = tr.x.back();
    eta = tr.eta.back();
  }
  return ws;
}

}  // namespace

OcpSolution solve_ocp(const OcpProblem& p, std::optional<model::StepFunction> warm_start) {
  model::StepFunction u = warm_start ? *warm_start : rollout_warm_start(p);
  for (auto& cell : u.values) project_cell(cell, p.u_max);
  const ExtendedCost warm_cost = cost_J(u, p);
  if (warm_cost.infinite)
    throw Error(ErrorCode::NoFeasiblePoint, "warm start infeasible for the funnel problem");

  const int cells = p.partition.cells();
  const int m = p.mdl.m;
  ExtendedCost best = warm_cost;
  double step = 0.5 * std::max(1.0, p.u_max);
  const double fd_eps = 1e-6 * std::max(1.0, p.u_max);
  int iterations = 0;

  for (; iterations < p.max_iterations; ++iterations) {
    // Central differences on stacked cell values.
    std::vector<Vec> grad(cells, Vec::Zero(m));
    for (int i = 0; i < cells; ++i) {
      for (int c = 0; c < m; ++c) {
        model::StepFunction up = u, dn = u;
        up.values[i](c) += fd_eps;
        dn.values[i](c) -= fd_eps;
        const double jp = cost_J(up, p).ordering_value();
        const double jn = cost_J(dn, p).ordering_value();
        grad[i](c) = (jp - jn) / (2.0 * fd_eps);
      }
    }
    double gnorm = 0.0;
    for (const auto& g : grad) gnorm += g.squaredNorm();
    gnorm = std::sqrt(gnorm);
    if (gnorm < 1e-12) break;

    // Backtracking: first improving candidate accepted.
    bool improved = false;
    double s = step;
    for (int half = 0; half < 25; ++half, s *= 0.5) {
      model::StepFunction cand = u;
      for (int i = 0; i < cells; ++i) {
        cand.values[i] -= (s / gnorm) * grad[i];
        project_cell(cand.values[i], p.u_max);
      }
      const ExtendedCost c = cost_J(cand, p);
      if (!c.infinite && c.value < best.value - 1e-15) {
        u = cand;
        best = c;
        improved = true;
        step = 2.0 * s;  // allow growth after a success
        break;
      }
    }
    if (!improved) break;
  }

  OcpSolution sol;
  sol.u_star = u;
  sol.cost = best;
  sol.feasible = !best.infinite;
  sol.iterations = iterations;
  sol.warm_start_cost = warm_cost;
  return sol;
}

}  // namespace fmpc::ocp
