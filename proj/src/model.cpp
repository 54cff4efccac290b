#include "fmpc/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fmpc::model {

Partition Partition::uniform(double t0, double t1, double dt) {
  if (dt <= 0.0 || t1 <= t0)
    throw Error(ErrorCode::ConfigError, "uniform partition needs dt > 0 and t1 > t0");
  const double n_real = (t1 - t0) / dt;
  const int n = static_cast<int>(std::lround(n_real));
  if (n < 1 || std::abs(n_real - n) > 1e-6 * std::max(1.0, n_real))
    throw Error(ErrorCode::ConfigError, "dt does not divide the interval");
  Partition p;
  p.times.resize(n + 1);
  for (int i = 0; i <= n; ++i) p.times[i] = t0 + i * dt;
  p.times[n] = t1;
  p.uniform_step = dt;
  return p;
}

void Partition::validate() const {
  if (times.size() < 2) throw Error(ErrorCode::ConfigError, "partition needs at least two nodes");
  for (size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw Error(ErrorCode::ConfigError, "partition times not strictly increasing");
  if (uniform_step) {
    const double tol = 1e-12 * std::max(1.0, std::abs(*uniform_step));
    for (size_t i = 1; i < times.size(); ++i)
      if (std::abs(times[i] - times[i - 1] - *uniform_step) > tol)
        throw Error(ErrorCode::ConfigError, "partition gap differs from uniform_step");
  }
}

int Partition::cell_index(double t) const {
  const double nudge = 1e-12 * (1.0 + std::abs(t));
  auto it = std::upper_bound(times.begin(), times.end(), t + nudge);
  long i = it - times.begin() - 1;
  i = std::clamp(i, 0L, static_cast<long>(times.size()) - 2);
  return static_cast<int>(i);
}

Vec StepFunction::operator()(double t) const { return values[partition.cell_index(t)]; }

void StepFunction::validate() const {
  partition.validate();
  if (static_cast<int>(values.size()) != partition.cells())
    throw Error(ErrorCode::DimensionMismatch, "step function needs one value per cell");
  for (const auto& v : values)
    if (v.size() != values.front().size())
      throw Error(ErrorCode::DimensionMismatch, "step function values of mixed dimension");
}

int internal_dim(const OperatorSpec& op) {
  return std::visit(
      [](const auto& o) -> int {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OperatorNone>)
          return 0;
        else
          return static_cast<int>(o.eta0.size());
      },
      op);
}

Vec initial_eta(const OperatorSpec& op) {
  return std::visit(
      [](const auto& o) -> Vec {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OperatorNone>)
          return Vec(0);
        else
          return o.eta0;
      },
      op);
}

Vec op_output(const OperatorSpec& op, const Vec& x, const Vec& eta) {
  return std::visit(
      [&](const auto& o) -> Vec {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OperatorNone>) {
          return x;
        } else if constexpr (std::is_same_v<T, LinearInternal>) {
          const int m = static_cast<int>(o.S.rows());
          Vec w = o.S * eta;
          for (size_t j = 0; j < o.R.size(); ++j)
            w += o.R[j] * x.segment(static_cast<long>(j) * m, m);
          return w;
        } else {
          return o.readout(x, eta);
        }
      },
      op);
}

Vec op_rate(const OperatorSpec& op, const Vec& x, const Vec& eta) {
  return std::visit(
      [&](const auto& o) -> Vec {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OperatorNone>) {
          return Vec(0);
        } else if constexpr (std::is_same_v<T, LinearInternal>) {
          const int m = static_cast<int>(o.P.cols());
          return o.Q * eta + o.P * x.head(m) + o.D2;
        } else {
          return o.q_map(x, eta);
        }
      },
      op);
}

ControlAffineModel make_linear_model(const LinearParams& p) {
  if (p.R.empty()) throw Error(ErrorCode::DimensionMismatch, "linear model needs R_1..R_r");
  const int m = static_cast<int>(p.Gamma.rows());
  const int nu = static_cast<int>(p.Q.rows());
  if (p.Gamma.cols() != m || p.D1.size() != m || p.S.rows() != m || p.S.cols() != nu ||
      p.Q.cols() != nu || p.P.rows() != nu || p.P.cols() != m || p.D2.size() != nu ||
      p.eta0.size() != nu)
    throw Error(ErrorCode::DimensionMismatch, "linear model parameter shapes inconsistent");
  for (const auto& R : p.R)
    if (R.rows() != m || R.cols() != m)
      throw Error(ErrorCode::DimensionMismatch, "linear model R block shape");

  ControlAffineModel mdl;
  mdl.r = static_cast<int>(p.R.size());
  mdl.m = m;
  const Vec D1 = p.D1;
  const Mat Gamma = p.Gamma;
  mdl.f = [D1](const Vec& w) { return Vec(w + D1); };
  mdl.g = [Gamma](const Vec&) { return Gamma; };
  mdl.op = LinearInternal{p.R, p.S, p.Q, p.P, p.D2, p.eta0};
  return mdl;
}

ControlAffineModel with_initial_eta(ControlAffineModel mdl, const Vec& eta0) {
  std::visit(
      [&](auto& o) {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OperatorNone>) {
          if (eta0.size() != 0)
            throw Error(ErrorCode::DimensionMismatch, "model has no internal state");
        } else {
          if (eta0.size() != o.eta0.size())
            throw Error(ErrorCode::DimensionMismatch, "internal state dimension differs");
          o.eta0 = eta0;
        }
      },
      mdl.op);
  return mdl;
}

Vec RefSignal::stack(double t) const {
  Vec s(static_cast<long>(r) * m);
  for (int j = 0; j < r; ++j) s.segment(static_cast<long>(j) * m, m) = deriv(t, j);
  return s;
}

void SimulationTrace::validate() const {
  const size_t n = times.size();
  for (size_t i = 1; i < n; ++i)
    if (!(times[i] > times[i - 1]))
      throw Error(ErrorCode::ConfigError, "trace times not strictly increasing");
  if (x.size() != n || eta.size() != n || u_fmpc.size() != n || u_fc.size() != n)
    throw Error(ErrorCode::DimensionMismatch, "trace column lengths inconsistent");
  auto col_ok = [n](const std::vector<double>& c) { return c.empty() || c.size() == n; };
  if (!col_ok(psi) || !col_ok(phi) || !col_ok(margin))
    throw Error(ErrorCode::DimensionMismatch, "trace side columns inconsistent");
}

Vec rk4_step(const std::function<Vec(double, const Vec&)>& field, double t, const Vec& x,
             double h) {
  if (h <= 0.0) throw Error(ErrorCode::ConfigError, "rk4 step size must be positive");
  auto eval = [&](double ts, const Vec& xs) {
    Vec k = field(ts, xs);
    if (!k.allFinite()) throw Error(ErrorCode::NonFinite, "vector field non-finite at a stage");
    return k;
  };
  const Vec k1 = eval(t, x);
  const Vec k2 = eval(t + 0.5 * h, x + 0.5 * h * k1);
  const Vec k3 = eval(t + 0.5 * h, x + 0.5 * h * k2);
  const Vec k4 = eval(t + h, x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

namespace {

using InputFn = std::function<Vec(double, const Vec&, const Vec&)>;

// hold_per_step freezes the input at each step's left endpoint (ZoH); a
// continuous feedback law is instead re-evaluated at every stage.
SimulationTrace integrate_core(const ControlAffineModel& plant, const InputFn& input, double t0,
                               double t1, double h, const Vec& x0, const Monitors& mon,
                               bool hold_per_step) {
  const int rm = plant.r * plant.m;
  if (x0.size() != rm)
    throw Error(ErrorCode::DimensionMismatch, "initial state must have length r*m");
  const double n_real = (t1 - t0) / h;
  const int n = static_cast<int>(std::lround(n_real));
  if (n < 1 || std::abs(n_real - n) > 1e-6 * std::max(1.0, n_real))
    throw Error(ErrorCode::StepIncompatibleWithPartition, "h does not divide the window");

  const Vec eta0 = initial_eta(plant.op);
  const int nu = static_cast<int>(eta0.size());

  const Vec* frozen_u = nullptr;
  auto field = [&](double t, const Vec& s) -> Vec {
    const Vec x = s.head(rm);
    const Vec eta = s.tail(nu);
    const Vec w = op_output(plant.op, x, eta);
    const Vec u = frozen_u ? *frozen_u : input(t, x, eta);
    Vec ds(s.size());
    if (rm > plant.m) ds.head(rm - plant.m) = x.tail(rm - plant.m);
    Vec top = plant.f(w) + plant.g(w) * u;
    if (plant.disturbance) top += (*plant.disturbance)(t);
    ds.segment(rm - plant.m, plant.m) = top;
    if (nu > 0) ds.tail(nu) = op_rate(plant.op, x, eta);
    return ds;
  };

  SimulationTrace tr;
  tr.r = plant.r;
  tr.m = plant.m;
  auto record = [&](double t, const Vec& s) {
    const Vec x = s.head(rm);
    const Vec eta = s.tail(nu);
    tr.times.push_back(t);
    tr.x.push_back(x);
    tr.eta.push_back(eta);
    Vec u = input(t, x, eta);
    if (!u.allFinite()) u = Vec::Zero(plant.m);
    tr.u_fmpc.push_back(u);
    tr.u_fc.push_back(Vec::Zero(plant.m));
  };
  // Returns false when the run must truncate at this node.
  auto monitor = [&](double t, const Vec& s) -> bool {
    const Vec x = s.head(rm);
    if (x.norm() > mon.blowup) {
      tr.flags.escaped = true;
      return false;
    }
    if (mon.funnel_ok && !mon.funnel_ok(t, x, s.tail(nu))) {
      tr.flags.funnel_violated = true;
      if (mon.truncate_on_funnel) return false;
    }
    return true;
  };

  Vec s(rm + nu);
  s << x0, eta0;
  record(t0, s);
  if (!monitor(t0, s)) return tr;
  for (int k = 0; k < n; ++k) {
    const double t = t0 + k * h;
    Vec u_hold;
    if (hold_per_step) {
      u_hold = input(t, s.head(rm), s.tail(nu));
      frozen_u = &u_hold;
    }
    Vec s_next;
    try {
      s_next = rk4_step(field, t, s, h);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NonFinite) {
        tr.flags.nan = true;
        return tr;
      }
      throw;
    }
    frozen_u = nullptr;
    if (!s_next.allFinite()) {
      tr.flags.nan = true;
      return tr;
    }
    s = s_next;
    const double tn = (k + 1 == n) ? t1 : t0 + (k + 1) * h;
    record(tn, s);
    if (!monitor(tn, s)) return tr;
  }
  return tr;
}

}  // namespace

SimulationTrace integrate_closed_loop(const ControlAffineModel& plant, const StepFunction& input,
                                      double t0, double t1, double h, const Vec& x0,
                                      const Monitors& mon) {
  input.validate();
  const auto& pt = input.partition;
  if (pt.t_begin() > t0 + 1e-9 || pt.t_end() < t1 - 1e-9)
    throw Error(ErrorCode::StepIncompatibleWithPartition, "step function does not cover window");
  for (int i = 0; i < pt.cells(); ++i) {
    const double len = pt.times[i + 1] - pt.times[i];
    const double q = len / h;
    if (q < 1.0 - 1e-6 || std::abs(q - std::lround(q)) > 1e-6 * std::max(1.0, q))
      throw Error(ErrorCode::StepIncompatibleWithPartition,
                  "integration step does not divide a partition cell");
  }
  return integrate_core(
      plant, [&input](double t, const Vec&, const Vec&) { return input(t); }, t0, t1, h, x0, mon,
      /*hold_per_step=*/true);
}

SimulationTrace integrate_closed_loop(const ControlAffineModel& plant, const FeedbackFn& input,
                                      double t0, double t1, double h, const Vec& x0,
                                      const Monitors& mon) {
  return integrate_core(
      plant, [&input](double t, const Vec& x, const Vec& eta) { return input(t, x, eta); }, t0, t1,
      h, x0, mon, /*hold_per_step=*/false);
}

namespace {

template <typename T>
void drop_last(std::vector<T>& v) {
  if (!v.empty()) v.pop_back();
}

}  // namespace

SimulationTrace concatenate(const std::vector<SimulationTrace>& traces,
                            const std::vector<double>& jump_times, double tol) {
  if (traces.empty()) throw Error(ErrorCode::TimeMismatch, "nothing to concatenate");
  SimulationTrace out = traces.front();
  for (size_t k = 1; k < traces.size(); ++k) {
    const SimulationTrace& tr = traces[k];
    if (tr.r != out.r || tr.m != out.m)
      throw Error(ErrorCode::DimensionMismatch, "trace dimensions differ");
    if (out.times.empty() || tr.times.empty())
      throw Error(ErrorCode::TimeMismatch, "empty trace in concatenation");
    const double t_end = out.times.back();
    const double t_start = tr.times.front();
    if (std::abs(t_end - t_start) > tol)
      throw Error(ErrorCode::TimeMismatch, "trace junction times do not meet");

    Vec a(out.x.back().size() + out.eta.back().size());
    a << out.x.back(), out.eta.back();
    Vec b(tr.x.front().size() + tr.eta.front().size());
    b << tr.x.front(), tr.eta.front();
    if (a.size() != b.size())
      throw Error(ErrorCode::DimensionMismatch, "state dimensions differ at junction");
    const double jump = (a - b).norm();
    if (jump > tol) {
      const bool authorized = std::any_of(jump_times.begin(), jump_times.end(), [&](double tj) {
        return std::abs(tj - t_start) <= tol;
      });
      if (!authorized)
        throw Error(ErrorCode::TimeMismatch, "state jump at a time not in jump_times");
    }

    // Right-open junction: the later trace owns the junction node.
    drop_last(out.times);
    drop_last(out.x);
    drop_last(out.eta);
    drop_last(out.u_fmpc);
    drop_last(out.u_fc);
    const bool keep_psi = !out.psi.empty() && !tr.psi.empty();
    const bool keep_phi = !out.phi.empty() && !tr.phi.empty();
    const bool keep_margin = !out.margin.empty() && !tr.margin.empty();
    if (keep_psi) drop_last(out.psi); else out.psi.clear();
    if (keep_phi) drop_last(out.phi); else out.phi.clear();
    if (keep_margin) drop_last(out.margin); else out.margin.clear();

    out.times.insert(out.times.end(), tr.times.begin(), tr.times.end());
    out.x.insert(out.x.end(), tr.x.begin(), tr.x.end());
    out.eta.insert(out.eta.end(), tr.eta.begin(), tr.eta.end());
    out.u_fmpc.insert(out.u_fmpc.end(), tr.u_fmpc.begin(), tr.u_fmpc.end());
    out.u_fc.insert(out.u_fc.end(), tr.u_fc.begin(), tr.u_fc.end());
    if (keep_psi) out.psi.insert(out.psi.end(), tr.psi.begin(), tr.psi.end());
    if (keep_phi) out.phi.insert(out.phi.end(), tr.phi.begin(), tr.phi.end());
    if (keep_margin) out.margin.insert(out.margin.end(), tr.margin.begin(), tr.margin.end());

    out.jump_times.insert(out.jump_times.end(), tr.jump_times.begin(), tr.jump_times.end());
    out.jump_sizes.insert(out.jump_sizes.end(), tr.jump_sizes.begin(), tr.jump_sizes.end());
    out.jump_times.push_back(t_start);
    out.jump_sizes.push_back(jump);

    out.flags.escaped = out.flags.escaped || tr.flags.escaped;
    out.flags.funnel_violated = out.flags.funnel_violated || tr.flags.funnel_violated;
    out.flags.nan = out.flags.nan || tr.flags.nan;
  }
  out.validate();
  return out;
}

DynamicsBounds dynamics_bounds_analytic(const DynamicsBounds& values) {
  if (values.f_max < 0.0 || values.g_max <= 0.0 || values.g_inv_max <= 0.0)
    throw Error(ErrorCode::ConfigError, "analytic bounds must be positive");
  if (values.g_min && (*values.g_min <= 0.0 || *values.g_min > values.g_max + 1e-12))
    throw Error(ErrorCode::ConfigError, "g_min must lie in (0, g_max]");
  return values;
}

DynamicsBounds dynamics_bounds_sampled(const ControlAffineModel& mdl,
                                       const funnel::AuxiliaryDesign& design,
                                       const RefSignal& ref, const SamplingSpec& spec) {
  const int r = design.r, m = design.m;
  if (mdl.r != r || mdl.m != m)
    throw Error(ErrorCode::DimensionMismatch, "model and design dimensions differ");
  const Mat S = funnel::xi_matrix(design.k, r, m);
  const Mat Sinv =
      S.triangularView<Eigen::Lower>().solve(Mat::Identity(S.rows(), S.cols()));
  const int nu = internal_dim(mdl.op);

  std::mt19937 rng(spec.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  auto ball = [&](int dim, double radius) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = N(rng);
    const double nrm = v.norm();
    if (nrm < 1e-300) return Vec(Vec::Zero(dim));
    return Vec(radius * std::pow(U(rng), 1.0 / dim) / nrm * v);
  };

  DynamicsBounds b;
  b.f_max = 0.0;
  b.g_max = 0.0;
  b.g_inv_max = 0.0;
  double gmin = std::numeric_limits<double>::infinity();
  for (int it = 0; it < spec.n; ++it) {
    const double t = spec.t0 + U(rng) * (spec.t1 - spec.t0);
    Vec xs(static_cast<long>(r) * m);
    for (int i = 0; i < r; ++i)
      xs.segment(static_cast<long>(i) * m, m) = ball(m, design.psi_list[i].value(t));
    const Vec x = Sinv * xs + ref.stack(t);
    const Vec eta = nu > 0 ? ball(nu, spec.eta_radius) : Vec(0);
    const Vec w = op_output(mdl.op, x, eta);
    b.f_max = std::max(b.f_max, mdl.f(w).norm());
    const Mat g = mdl.g(w);
    Eigen::JacobiSVD<Mat> svd(g);
    const double smax = svd.singularValues().maxCoeff();
    const double smin = svd.singularValues().minCoeff();
    if (smin < 1e-12 * std::max(1.0, smax))
      throw Error(ErrorCode::SingularG, "input map near-singular at a sampled state");
    b.g_max = std::max(b.g_max, smax);
    b.g_inv_max = std::max(b.g_inv_max, 1.0 / smin);
    if (spec.want_g_min) {
      Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (g + g.transpose()));
      const double lmin = es.eigenvalues().minCoeff();
      if (lmin <= 0.0)
        throw Error(ErrorCode::NotPositiveDefinite,
                    "symmetric part of g not positive definite at a sampled state");
      gmin = std::min(gmin, lmin);
    }
  }
  if (spec.want_g_min) b.g_min = gmin;
  return b;
}

}  // namespace fmpc::model
