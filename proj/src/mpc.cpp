#include "fmpc/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "json.hpp"

namespace fmpc::loop {

namespace {

constexpr double kTimeTol = 1e-9;

// Returns n >= 1 with whole ~= n * part, or throws ConfigError.
int exact_ratio(double whole, double part, const char* what) {
  const double q = whole / part;
  const int n = static_cast<int>(std::lround(q));
  if (n < 1 || std::abs(q - n) > 1e-6 * std::max(1.0, q)) throw Error(ErrorCode::ConfigError, what);
  return n;
}

}  // namespace

void MpcConfig::validate(int r) const {
  if (!(delta > 0.0) || !std::isfinite(delta))
    throw Error(ErrorCode::ConfigError, "delta must be positive and finite");
  if (T < delta - kTimeTol)
    throw Error(ErrorCode::ConfigError, "horizon must cover at least one interval");
  if (!(u_max >= 0.0) || !std::isfinite(u_max))
    throw Error(ErrorCode::ConfigError, "u_max must be nonnegative and finite");
  if (lambda_u < 0.0) throw Error(ErrorCode::ConfigError, "lambda_u must be nonnegative");
  const double cs = effective_control_step();
  if (!(cs > 0.0)) throw Error(ErrorCode::ConfigError, "control_step must be positive");
  exact_ratio(delta, cs, "control_step must divide delta");
  exact_ratio(T, cs, "control_step must divide the horizon");
  if (!(h > 0.0)) throw Error(ErrorCode::ConfigError, "h must be positive");
  exact_ratio(cs, h, "h must divide control_step");
  if (learn_every && *learn_every < 1)
    throw Error(ErrorCode::ConfigError, "learn_every must be at least one");
  if (init_only_after_learning && !learn_every)
    throw Error(ErrorCode::ConfigError, "init_only_after_learning needs learn_every");
  if (ocp_iterations < 0) throw Error(ErrorCode::ConfigError, "ocp_iterations must be nonnegative");
  if (!(zoh_nu > 0.0)) throw Error(ErrorCode::ConfigError, "zoh_nu must be positive");
  if (const auto* pi = std::get_if<ProperInit>(&init)) {
    if (pi->eps && !(*pi->eps > 0.0 && *pi->eps < 1.0))
      throw Error(ErrorCode::ConfigError, "eps must lie in (0, 1)");
    if (pi->lambda) {
      if (!(*pi->lambda > 0.0 && *pi->lambda <= 1.0))
        throw Error(ErrorCode::ConfigError, "lambda must lie in (0, 1]");
      if (*pi->lambda == 1.0 && r != 1)
        throw Error(ErrorCode::ConfigError, "lambda = 1 needs a first-order chain");
    }
  }
  if (std::holds_alternative<ExactOutputMatch>(init) && r != 1)
    throw Error(ErrorCode::ConfigError, "exact output matching needs a first-order chain");
}

double default_lambda(const funnel::AuxiliaryDesign& design) {
  if (design.mode == funnel::DesignMode::Varying && design.r > 1)
    return std::sqrt(0.5 * (1.0 + design.gamma_margin));
  return std::sqrt(0.5);
}

double default_eps(const funnel::AuxiliaryDesign& design, const funnel::FunnelSpec& psi1,
                   const funnel::GainSpec& gains, double lambda, double t0, double t1) {
  const double fallback = 0.5;
  if (design.r <= 1) return fallback;
  try {
    const funnel::GridStats dpsi = funnel::grid_inf_sup(psi1.psi_dot, t0, t1);
    const double sup_abs = std::max(std::abs(dpsi.inf), std::abs(dpsi.sup));
    const double denom = (1.0 - lambda) * psi1.inf_psi;
    if (!(denom > 0.0)) return fallback;
    const auto table = feedback::fc_bound_table(sup_abs / denom, {}, gains, design.r);
    double certified = 0.0;
    for (int i = 1; i < table.levels(); ++i) certified = std::max(certified, table.eps[i]);
    if (!(certified > 0.0)) return fallback;
    return std::clamp(0.95 * certified, 1e-6, 0.95);
  } catch (const Error&) {
    return fallback;
  }
}

ProperInitResult proper_init(double t, const Vec& measurement,
                             const funnel::AuxiliaryDesign& design, const model::RefSignal& ref,
                             const funnel::GainSpec& gains, double eps, double lambda,
                             bool strict) {
  const int rm = design.r * design.m;
  const int m = design.m;
  if (measurement.size() != rm)
    throw Error(ErrorCode::DimensionMismatch, "measurement must have length r*m");
  if (!(eps > 0.0 && eps < 1.0)) throw Error(ErrorCode::ConfigError, "eps must lie in (0, 1)");
  if (!(lambda > 0.0 && lambda <= 1.0))
    throw Error(ErrorCode::ConfigError, "lambda must lie in (0, 1]");
  if (lambda == 1.0 && design.r != 1)
    throw Error(ErrorCode::ConfigError, "lambda = 1 needs a first-order chain");

  const Vec x_ref = ref.stack(t);
  const double psi1 = design.psi_list.front().value(t);
  const auto candidate = [&](double theta) -> Vec { return x_ref + theta * (measurement - x_ref); };

  struct Check {
    bool in_set = false;
    bool lambda_ok = false;
    bool envelope_ok = false;
    bool all() const { return in_set && lambda_ok && envelope_ok; }
    bool relaxed() const { return in_set && lambda_ok; }
  };
  const auto check = [&](double theta) -> Check {
    Check c;
    const Vec cand = candidate(theta);
    const Vec z = cand - x_ref;
    c.in_set = funnel::in_D(t, z, design).inside;
    c.lambda_ok = strictly_inside(z.head(m).norm(), lambda * psi1);
    const double headroom = psi1 - z.head(m).norm();
    if (headroom > 0.0) {
      const auto errs = funnel::fc_errors(1.0 / headroom, measurement - cand, m, gains, eps);
      c.envelope_ok = errs.all_defined(design.r) && !errs.domain_violation &&
                      std::all_of(errs.in_eps.begin(), errs.in_eps.end(),
                                  [](bool b) { return b; });
    }
    return c;
  };

  ProperInitResult res;
  const auto finalize = [&](double theta, const Check& c) {
    res.theta = theta;
    res.state = candidate(theta);
    res.distance = (res.state - measurement).norm();
    res.in_funnel_set = c.in_set;
    res.lambda_met = c.lambda_ok;
    res.envelope_met = c.envelope_ok;
    return res;
  };

  const Check at_one = check(1.0);
  if (at_one.all()) return finalize(1.0, at_one);

  const Check at_zero = check(0.0);
  if (!at_zero.envelope_ok && strict)
    throw Error(ErrorCode::MeasurementOutsideEnvelope,
                "measured state too far from the model for any admissible initialization");
  // With the reference stack itself inadmissible (degenerate funnel data)
  // there is nothing better to offer; report it with honest flags.
  if (!at_zero.relaxed()) return finalize(0.0, at_zero);

  // The envelope couples the candidate and the measurement through the funnel
  // headroom, so when it already fails at the reference stack it fails on the
  // whole segment; drop it and keep the funnel and lambda constraints.
  const bool with_envelope = at_zero.envelope_ok;
  const auto admissible = [&](double theta) {
    const Check c = check(theta);
    return with_envelope ? c.all() : c.relaxed();
  };

  if (admissible(1.0)) return finalize(1.0, check(1.0));
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (admissible(mid))
      lo = mid;
    else
      hi = mid;
  }
  // The funnel and lambda constraints shrink linearly with theta, but the
  // envelope need not be monotone; re-verify and back off on failure.
  double theta = lo * (1.0 - 1e-9);
  for (int guard = 0; guard < 64 && !admissible(theta); ++guard)
    theta = theta <= 1e-12 ? 0.0 : 0.5 * theta;
  return finalize(theta, check(theta));
}

namespace {

struct ResolvedInit {
  enum class Kind { Carry, Proper, Exact } kind = Kind::Carry;
  double eps = 0.5;
  double lambda = std::sqrt(0.5);
  bool strict = false;
};

ResolvedInit resolve_init(const MpcConfig& cfg, const TrackingTask& task,
                          const funnel::GainSpec& gains) {
  ResolvedInit r;
  r.lambda = default_lambda(task.design);
  if (const auto* pi = std::get_if<ProperInit>(&cfg.init)) {
    r.kind = ResolvedInit::Kind::Proper;
    if (pi->lambda) r.lambda = *pi->lambda;
    r.eps = pi->eps ? *pi->eps
                    : default_eps(task.design, task.psi1, gains, r.lambda, task.t0, task.t1);
    r.strict = pi->strict;
  } else if (std::holds_alternative<ExactOutputMatch>(cfg.init)) {
    r.kind = ResolvedInit::Kind::Exact;
  }
  return r;
}

void check_task(const model::ControlAffineModel& mdl, const TrackingTask& task) {
  if (task.design.r != mdl.r || task.design.m != mdl.m)
    throw Error(ErrorCode::DimensionMismatch, "auxiliary design does not match the model order");
  if (task.ref.m != mdl.m || task.ref.r != mdl.r)
    throw Error(ErrorCode::DimensionMismatch, "reference does not match the model order");
  if (task.x0.size() != mdl.r * mdl.m)
    throw Error(ErrorCode::DimensionMismatch, "initial state must have length r*m");
  if (!(task.t1 > task.t0 + kTimeTol))
    throw Error(ErrorCode::ConfigError, "empty tracking window");
  if (static_cast<int>(task.design.psi_list.size()) != task.design.r)
    throw Error(ErrorCode::ConfigError, "auxiliary design must carry one funnel per level");
}

int iteration_count(const TrackingTask& task, double delta) {
  return static_cast<int>(std::ceil((task.t1 - task.t0 - kTimeTol) / delta));
}

ocp::OcpProblem make_problem(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                             const TrackingTask& task, double tk, const Vec& x, const Vec& eta) {
  ocp::OcpProblem p;
  p.mdl = mdl;
  p.design = task.design;
  p.ref = task.ref;
  p.t_hat = tk;
  p.T = cfg.T;
  p.partition = model::Partition::uniform(tk, tk + cfg.T, cfg.effective_control_step());
  p.u_max = cfg.u_max;
  p.lambda_u = cfg.lambda_u;
  p.u_offset = cfg.u_offset;
  p.x0 = x;
  p.eta0 = eta;
  p.h = cfg.h;
  p.cost_kind = cfg.cost_kind;
  p.max_iterations = cfg.ocp_iterations;
  return p;
}

// Previous minimizer advanced by one interval, holding its last value on the
// uncovered tail; the receding-horizon analogue of reusing the optimal input.
model::StepFunction shift_warm_start(const model::StepFunction& prev,
                                     const model::Partition& part, int shift_cells) {
  model::StepFunction w;
  w.partition = part;
  const auto& pv = prev.values;
  const int n = part.cells();
  w.values.reserve(n);
  for (int i = 0; i < n; ++i) {
    const size_t j = static_cast<size_t>(i) + static_cast<size_t>(shift_cells);
    w.values.push_back(j < pv.size() ? pv[j] : pv.back());
  }
  return w;
}

// Sample-and-hold warm start: on each cell apply the held sampled feasibility
// law from the state its own rollout reaches. Zero-fills the tail if the
// rollout degenerates; the solver then reports infeasibility honestly.
model::StepFunction zoh_warm_start(const model::ControlAffineModel& mdl, const Vec& x0,
                                   const Vec& eta0, const model::Partition& part,
                                   const funnel::AuxiliaryDesign& design,
                                   const model::RefSignal& ref, double nu, double h) {
  model::StepFunction w;
  w.partition = part;
  Vec x = x0, eta = eta0;
  const int n = part.cells();
  for (int i = 0; i < n; ++i) {
    const double a = part.times[i], b = part.times[i + 1];
    Vec u;
    try {
      u = feedback::zoh_feasibility_feedback(a, x, design, ref, nu);
    } catch (const Error&) {
      u = Vec::Zero(mdl.m);
    }
    w.values.push_back(u);
    bool dead = false;
    try {
      const auto plant = model::with_initial_eta(mdl, eta);
      const auto seg = model::integrate_closed_loop(
          plant, [&u](double, const Vec&, const Vec&) { return u; }, a, b, h, x, {});
      dead = seg.flags.nan || seg.flags.escaped;
      if (!dead) {
        x = seg.x.back();
        eta = seg.eta.back();
      }
    } catch (const Error&) {
      dead = true;
    }
    if (dead) {
      for (int j = i + 1; j < n; ++j) w.values.push_back(Vec::Zero(mdl.m));
      break;
    }
  }
  return w;
}

struct SegmentStats {
  std::vector<double> min_margins;
  double lambda_excess = -std::numeric_limits<double>::infinity();
};

// Containment bookkeeping over one applied interval, accumulated straight
// into the run summary.
SegmentStats scan_segment(const model::SimulationTrace& seg, const TrackingTask& task,
                          double lambda, RunSummary& summary) {
  SegmentStats st;
  st.min_margins.assign(task.design.r, std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < seg.times.size(); ++i) {
    const double t = seg.times[i];
    const Vec z = seg.x[i] - task.ref.stack(t);
    const auto cont = funnel::in_D(t, z, task.design);
    for (int j = 0; j < task.design.r; ++j)
      st.min_margins[j] = std::min(st.min_margins[j], cont.margins[j]);
    const double psi1 = task.design.psi_list.front().value(t);
    st.lambda_excess = std::max(st.lambda_excess, (1.0 - lambda) * psi1 - cont.margins[0]);
    const double err = z.head(task.design.m).norm();
    if (psi1 > 0.0) summary.max_error_ratio = std::max(summary.max_error_ratio, err / psi1);
    if (err >= psi1) summary.violated = true;
    summary.max_u_fmpc = std::max(summary.max_u_fmpc, seg.u_fmpc[i].norm());
    summary.max_u_fc = std::max(summary.max_u_fc, seg.u_fc[i].norm());
  }
  return st;
}

void fill_channels(model::SimulationTrace& seg, const TrackingTask& task) {
  seg.psi.clear();
  seg.phi.clear();
  seg.margin.clear();
  for (size_t i = 0; i < seg.times.size(); ++i) {
    const double t = seg.times[i];
    const double psi1 = task.design.psi_list.front().value(t);
    seg.psi.push_back(psi1);
    seg.phi.push_back(psi1 > 0.0 ? 1.0 / psi1 : std::numeric_limits<double>::infinity());
    seg.margin.push_back(psi1 - (seg.y(i) - task.ref.deriv(t, 0)).norm());
  }
}

void finish_summary(RunResult& out) {
  const auto& tr = out.trace;
  double effort = 0.0;
  for (size_t i = 0; i + 1 < tr.times.size(); ++i)
    effort += 0.5 * (tr.u_fc[i].norm() + tr.u_fc[i + 1].norm()) * (tr.times[i + 1] - tr.times[i]);
  out.summary.total_fc_effort = effort;
}

// Shared by the plain and the sampled-warm-start drivers.
RunResult run_single_loop(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                          const TrackingTask& task, bool sampled) {
  cfg.validate(mdl.r);
  check_task(mdl, task);
  if (!std::holds_alternative<CarryOver>(cfg.init))
    throw Error(ErrorCode::ConfigError,
                "a single-model run has no measurement to re-initialize from; use CarryOver");
  exact_ratio(task.t1 - task.t0, cfg.h, "h must divide the tracking window");

  const double lambda_diag = default_lambda(task.design);
  const double cs = cfg.effective_control_step();
  const int shift_cells = static_cast<int>(std::lround(cfg.delta / cs));
  const int K = iteration_count(task, cfg.delta);

  RunResult out;
  Vec x = task.x0;
  Vec eta = task.eta0 ? *task.eta0 : model::initial_eta(mdl.op);
  std::optional<model::StepFunction> prev;
  std::vector<model::SimulationTrace> segments;

  for (int k = 0; k < K; ++k) {
    const double tk = task.t0 + k * cfg.delta;
    const double te = std::min(tk + cfg.delta, task.t1);
    ocp::OcpProblem p = make_problem(mdl, cfg, task, tk, x, eta);

    if (cfg.cost_kind != funnel::StageCostKind::QuadraticUnconstrained) {
      try {
        p.validate();
      } catch (const Error& e) {
        if (k == 0) throw;
        out.error = e.code();
        out.error_iteration = k;
        out.error_what = e.what();
        break;
      }
    }

    std::optional<model::StepFunction> warm;
    if (sampled)
      warm = zoh_warm_start(mdl, x, eta, p.partition, task.design, task.ref, cfg.zoh_nu, cfg.h);
    else if (prev)
      warm = shift_warm_start(*prev, p.partition, shift_cells);
    else if (cfg.cost_kind == funnel::StageCostKind::QuadraticUnconstrained) {
      model::StepFunction z;
      z.partition = p.partition;
      z.values.assign(p.partition.cells(), cfg.u_offset ? *cfg.u_offset : Vec::Zero(mdl.m));
      warm = z;
    }

    ocp::OcpSolution sol;
    bool solved = false;
    std::string fail_what;
    try {
      sol = ocp::solve_ocp(p, warm);
      solved = true;
    } catch (const Error& e) {
      fail_what = e.what();
      // A stale shifted start can die even when the problem is solvable; the
      // solver's own constructive rollout is the second chance.
      if (e.code() == ErrorCode::NoFeasiblePoint && warm && !sampled) {
        try {
          sol = ocp::solve_ocp(p, std::nullopt);
          solved = true;
        } catch (const Error& e2) {
          fail_what = e2.what();
        }
      }
    }
    if (!solved) {
      out.error = ErrorCode::OcpInfeasible;
      out.error_iteration = k;
      out.error_what = fail_what;
      break;
    }

    model::SimulationTrace seg;
    try {
      seg = model::integrate_closed_loop(model::with_initial_eta(mdl, eta), sol.u_star, tk, te,
                                         cfg.h, x, {});
    } catch (const Error& e) {
      out.error = e.code();
      out.error_iteration = k;
      out.error_what = e.what();
      break;
    }
    fill_channels(seg, task);

    IterationRecord rec;
    rec.k = k;
    rec.t = tk;
    rec.cost = sol.cost.value;
    rec.cost_infinite = sol.cost.infinite;
    rec.feasible = sol.feasible;
    const SegmentStats st = scan_segment(seg, task, lambda_diag, out.summary);
    rec.min_margins = st.min_margins;
    rec.lambda_excess = st.lambda_excess;
    out.iterations.push_back(std::move(rec));

    x = seg.x.back();
    eta = seg.eta.back();
    segments.push_back(std::move(seg));
    prev = sol.u_star;

    if (segments.back().flags.nan || segments.back().flags.escaped) {
      out.error = ErrorCode::NonFinite;
      out.error_iteration = k;
      out.error_what = "closed-loop state left the finite range";
      break;
    }
  }

  if (!segments.empty()) out.trace = model::concatenate(segments, {}, 1e-9);
  finish_summary(out);
  return out;
}

struct TwoLoopSegment {
  model::SimulationTrace sys;
  model::SimulationTrace mdl;
  std::optional<ErrorCode> error;
  std::string error_what;
};

// One interval of the two-loop scheme: the optimized input drives both the
// system and the model, the model-referenced funnel controller corrects only
// the system, and the correction gain is read off the headroom the model
// trajectory leaves inside the funnel.
TwoLoopSegment integrate_two_loop(const model::ControlAffineModel& sys,
                                  const model::ControlAffineModel& mdl,
                                  const model::StepFunction& u_star,
                                  const funnel::GainSpec& gains, const TrackingTask& task,
                                  double a, double b, double h, const Vec& xs0, const Vec& es0,
                                  const Vec& xm0, const Vec& em0) {
  const int rm = sys.r * sys.m;
  const int m = sys.m;
  const int ns = static_cast<int>(es0.size());
  const int nm = static_cast<int>(em0.size());
  const funnel::BoundaryFn& psi1 = task.design.psi_list.front();

  TwoLoopSegment seg;
  seg.sys.r = seg.mdl.r = sys.r;
  seg.sys.m = seg.mdl.m = sys.m;

  const auto correction = [&](double t, const Vec& xs, const Vec& xm) -> Vec {
    const double phi = feedback::adaptive_phi(t, xm.head(m), task.ref.deriv(t, 0), psi1);
    return feedback::funnel_control(xs, xm, phi, gains, m);
  };

  Vec uf = Vec::Zero(m);
  const auto field = [&](double t, const Vec& s) -> Vec {
    const Vec xs = s.segment(0, rm);
    const Vec es = s.segment(rm, ns);
    const Vec xm = s.segment(rm + ns, rm);
    const Vec em = s.tail(nm);
    const Vec uc = correction(t, xs, xm);
    Vec ds(s.size());
    const Vec ws = model::op_output(sys.op, xs, es);
    if (rm > m) ds.segment(0, rm - m) = xs.tail(rm - m);
    Vec top_s = sys.f(ws) + sys.g(ws) * (uf + uc);
    if (sys.disturbance) top_s += (*sys.disturbance)(t);
    ds.segment(rm - m, m) = top_s;
    if (ns > 0) ds.segment(rm, ns) = model::op_rate(sys.op, xs, es);
    const Vec wm = model::op_output(mdl.op, xm, em);
    if (rm > m) ds.segment(rm + ns, rm - m) = xm.tail(rm - m);
    Vec top_m = mdl.f(wm) + mdl.g(wm) * uf;
    if (mdl.disturbance) top_m += (*mdl.disturbance)(t);
    ds.segment(rm + ns + rm - m, m) = top_m;
    if (nm > 0) ds.tail(nm) = model::op_rate(mdl.op, xm, em);
    return ds;
  };

  const int n = exact_ratio(b - a, h, "h must divide the applied interval");
  Vec s(2 * rm + ns + nm);
  s.segment(0, rm) = xs0;
  if (ns > 0) s.segment(rm, ns) = es0;
  s.segment(rm + ns, rm) = xm0;
  if (nm > 0) s.tail(nm) = em0;

  const auto record = [&](double t, const Vec& st) -> bool {
    const Vec xs = st.segment(0, rm);
    const Vec xm = st.segment(rm + ns, rm);
    Vec uc;
    try {
      uc = correction(t, xs, xm);
    } catch (const Error& e) {
      seg.error = e.code();
      seg.error_what = e.what();
      return false;
    }
    const Vec u_node = u_star(t);
    const double psi1_t = psi1.value(t);
    const double phi_t = 1.0 / (psi1_t - (xm.head(m) - task.ref.deriv(t, 0)).norm());
    seg.sys.times.push_back(t);
    seg.sys.x.push_back(xs);
    seg.sys.eta.push_back(st.segment(rm, ns));
    seg.sys.u_fmpc.push_back(u_node);
    seg.sys.u_fc.push_back(uc);
    seg.sys.psi.push_back(psi1_t);
    seg.sys.phi.push_back(phi_t);
    seg.sys.margin.push_back(psi1_t - (xs.head(m) - task.ref.deriv(t, 0)).norm());
    seg.mdl.times.push_back(t);
    seg.mdl.x.push_back(xm);
    seg.mdl.eta.push_back(st.tail(nm));
    seg.mdl.u_fmpc.push_back(u_node);
    seg.mdl.u_fc.push_back(Vec::Zero(m));
    seg.mdl.psi.push_back(psi1_t);
    seg.mdl.phi.push_back(phi_t);
    seg.mdl.margin.push_back(psi1_t - (xm.head(m) - task.ref.deriv(t, 0)).norm());
    return true;
  };

  if (!record(a, s)) return seg;
  for (int i = 0; i < n; ++i) {
    const double t = a + i * h;
    uf = u_star(t);  // held over the step, like any sampled input
    try {
      s = model::rk4_step(field, t, s, h);
    } catch (const Error& e) {
      seg.error = e.code();
      seg.error_what = e.what();
      return seg;
    }
    const double t_next = i + 1 == n ? b : a + (i + 1) * h;
    if (!s.allFinite()) {
      seg.sys.flags.nan = seg.mdl.flags.nan = true;
      seg.error = ErrorCode::NonFinite;
      seg.error_what = "coupled state became non-finite";
      return seg;
    }
    if (s.segment(0, rm).norm() > 1e9 || s.segment(rm + ns, rm).norm() > 1e9) {
      seg.sys.flags.escaped = seg.mdl.flags.escaped = true;
      seg.error = ErrorCode::NonFinite;
      seg.error_what = "coupled state left the finite range";
      return seg;
    }
    if (!record(t_next, s)) return seg;
  }
  return seg;
}

// Core of the two-loop drivers; `setup` switches the learning extension on.
RunResult run_two_loop(const model::ControlAffineModel& system, model::ControlAffineModel mdl,
                       const MpcConfig& cfg, const TrackingTask& task,
                       const funnel::GainSpec& gains, const LearningSetup* setup,
                       const LearnerFn& learner) {
  cfg.validate(system.r);
  check_task(system, task);
  if (mdl.r != system.r || mdl.m != system.m)
    throw Error(ErrorCode::DimensionMismatch, "model and system orders differ");
  exact_ratio(task.t1 - task.t0, cfg.h, "h must divide the tracking window");
  if (setup && !cfg.learn_every)
    throw Error(ErrorCode::ConfigError, "a learning run needs learn_every");

  const int m = system.m;
  const int rm = system.r * system.m;
  const ResolvedInit init = resolve_init(cfg, task, gains);
  const double cs = cfg.effective_control_step();
  const int shift_cells = static_cast<int>(std::lround(cfg.delta / cs));
  const int K = iteration_count(task, cfg.delta);

  model::LinearParams params;
  if (setup) {
    params = setup->initial;
    if (setup->screen_params) {
      const auto report = learn::check_feasible_params(params, setup->bounds);
      if (!report.feasible)
        throw Error(ErrorCode::ConfigError,
                    "initial model parameters violate the caps: " + report.violated);
    }
    mdl = model::make_linear_model(params);
  }

  RunResult out;
  Vec xs = task.x0;
  Vec es = model::initial_eta(system.op);
  Vec xm = task.model_x0 ? *task.model_x0 : task.x0;
  Vec em = task.eta0 ? *task.eta0 : model::initial_eta(mdl.op);
  if (xm.size() != rm)
    throw Error(ErrorCode::DimensionMismatch, "model initial state must have length r*m");

  {
    // The correction loop can only absorb a mismatch whose whole error
    // recursion starts inside the unit ball at the funnel-wide gain.
    const auto errs = funnel::fc_errors(1.0 / task.design.psi_list.front().value(task.t0),
                                        xs - task.ref.stack(task.t0), m, gains, {});
    if (!errs.all_defined(system.r))
      throw Error(ErrorCode::InitialErrorOutsideFunnel,
                  "initial tracking error leaves the unit mismatch envelope",
                  errs.domain_violation ? *errs.domain_violation : -1);
  }

  std::optional<model::StepFunction> prev;
  std::vector<model::SimulationTrace> seg_sys, seg_mdl;
  std::vector<double> model_jumps;
  std::vector<learn::LogRecord> records;

  for (int k = 0; k < K; ++k) {
    const double tk = task.t0 + k * cfg.delta;
    const double te = std::min(tk + cfg.delta, task.t1);
    IterationRecord rec;
    rec.k = k;
    rec.t = tk;

    if (setup) {
      learn::LogRecord lr;
      lr.t = tk;
      lr.y = xs.head(m);
      lr.x_model = xm;
      lr.u_fmpc = Vec::Zero(m);
      lr.u_fc = Vec::Zero(m);
      records.push_back(std::move(lr));
    }

    const Vec xm_before = xm;
    bool learned_now = false;
    if (setup && k > 0 && k % *cfg.learn_every == 0) {
      learn::SignalLog log(m, system.r, setup->window);
      for (const auto& r : records) log.append(r);
      learn::LearnResult fit;
      try {
        fit = learner ? learner(log, params)
                      : learn::learn_linear(log, setup->bounds, params, setup->weights,
                                            setup->options);
      } catch (const Error& e) {
        out.error = e.code();
        out.error_iteration = k;
        out.error_what = e.what();
        break;
      }
      rec.residual = fit.residual_after;
      if (!fit.infeasible_projection) {
        if (setup->screen_params) {
          const auto report = learn::check_feasible_params(fit.params, setup->bounds);
          if (!report.feasible) {
            out.error = ErrorCode::LearnerReturnedInfeasibleModel;
            out.error_iteration = k;
            out.error_what = report.violated;
            break;
          }
        }
        if (fit.updated) {
          params = fit.params;
          mdl = model::make_linear_model(params);
          // Carry the model state through the new parameterization by
          // replaying the kept window under the learned model: the refit
          // model run re-anchors at the logged measurements, so both the
          // chain and the internal state jump with the parameters.
          const auto pb = learn::playback_linear(params, log.records(), m, system.r,
                                                 setup->weights, setup->options);
          em = pb.eta.empty() ? params.eta0 : pb.eta.back();
          if (!pb.chain.empty()) xm = pb.chain.back();
          rec.learned = true;
          learned_now = true;
          model_jumps.push_back(tk);
        }
      }
    }

    Vec xm_new = xm;
    const bool apply_init = !cfg.init_only_after_learning || learned_now;
    if (apply_init && init.kind == ResolvedInit::Kind::Proper) {
      ProperInitResult pr;
      try {
        pr = proper_init(tk, xs, task.design, task.ref, gains, init.eps, init.lambda,
                         init.strict);
      } catch (const Error& e) {
        if (k == 0) throw;
        out.error = e.code();
        out.error_iteration = k;
        out.error_what = e.what();
        break;
      }
      xm_new = pr.state;
      rec.theta = pr.theta;
      rec.envelope_met = pr.envelope_met;
    } else if (apply_init && init.kind == ResolvedInit::Kind::Exact) {
      xm_new = xs;
    }
    rec.jump = (xm_new - xm_before).norm();
    // A refit iteration already authorized the junction above.
    if (rec.jump > 1e-12 && !learned_now) model_jumps.push_back(tk);
    xm = xm_new;
    if (setup) records.back().x_model = xm;

    ocp::OcpProblem p = make_problem(mdl, cfg, task, tk, xm, em);
    if (cfg.cost_kind != funnel::StageCostKind::QuadraticUnconstrained) {
      try {
        p.validate();
      } catch (const Error& e) {
        if (k == 0) throw;
        out.error = e.code();
        out.error_iteration = k;
        out.error_what = e.what();
        break;
      }
    }

    std::optional<model::StepFunction> warm;
    if (prev) warm = shift_warm_start(*prev, p.partition, shift_cells);
    ocp::OcpSolution sol;
    bool solved = false;
    std::string fail_what;
    try {
      sol = ocp::solve_ocp(p, warm);
      solved = true;
    } catch (const Error& e) {
      fail_what = e.what();
      if (e.code() == ErrorCode::NoFeasiblePoint && warm) {
        try {
          sol = ocp::solve_ocp(p, std::nullopt);
          solved = true;
        } catch (const Error& e2) {
          fail_what = e2.what();
        }
      }
    }
    if (!solved) {
      out.error = ErrorCode::OcpInfeasible;
      out.error_iteration = k;
      out.error_what = fail_what;
      break;
    }

    TwoLoopSegment seg =
        integrate_two_loop(system, mdl, sol.u_star, gains, task, tk, te, cfg.h, xs, es, xm, em);
    if (seg.sys.times.empty()) {
      out.error = seg.error.value_or(ErrorCode::NonFinite);
      out.error_iteration = k;
      out.error_what = seg.error_what;
      break;
    }

    rec.cost = sol.cost.value;
    rec.cost_infinite = sol.cost.infinite;
    rec.feasible = sol.feasible;
    const SegmentStats st = scan_segment(seg.sys, task, init.lambda, out.summary);
    rec.min_margins = st.min_margins;
    rec.lambda_excess = st.lambda_excess;

    if (setup) {
      records.back().u_fmpc = seg.sys.u_fmpc.front();
      records.back().u_fc = seg.sys.u_fc.front();
    }

    // Containment decomposition: the funnel radius splits into the headroom
    // the prediction keeps and the mismatch the correction loop allows.
    for (size_t i = 0; i < seg.sys.times.size(); ++i) {
      const double t = seg.sys.times[i];
      const double psi1_t = task.design.psi_list.front().value(t);
      const double decomp = psi1_t - (seg.sys.y(i) - seg.mdl.y(i)).norm() -
                            (seg.mdl.y(i) - task.ref.deriv(t, 0)).norm();
      out.summary.min_decomposition_margin =
          std::min(out.summary.min_decomposition_margin, decomp);
    }

    xs = seg.sys.x.back();
    es = seg.sys.eta.back();
    xm = seg.mdl.x.back();
    em = seg.mdl.eta.back();
    const bool broken = seg.error.has_value();
    out.iterations.push_back(std::move(rec));
    seg_sys.push_back(std::move(seg.sys));
    seg_mdl.push_back(std::move(seg.mdl));
    prev = sol.u_star;
    if (broken) {
      out.error = seg.error;
      out.error_iteration = k;
      out.error_what = seg.error_what;
      break;
    }
  }

  if (!seg_sys.empty()) {
    out.trace = model::concatenate(seg_sys, {}, 1e-9);
    out.model_trace = model::concatenate(seg_mdl, model_jumps, 1e-9);
  }
  finish_summary(out);
  return out;
}

}  // namespace

RunResult run_funnel_mpc(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                         const TrackingTask& task) {
  return run_single_loop(mdl, cfg, task, /*sampled=*/false);
}

RunResult run_sampled_fmpc(const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                           const TrackingTask& task) {
  return run_single_loop(mdl, cfg, task, /*sampled=*/true);
}

RunResult run_robust_fmpc(const model::ControlAffineModel& system,
                          const model::ControlAffineModel& mdl, const MpcConfig& cfg,
                          const TrackingTask& task, const funnel::GainSpec& gains) {
  return run_two_loop(system, mdl, cfg, task, gains, nullptr, {});
}

RunResult run_learning_rfmpc(const model::ControlAffineModel& system, const LearningSetup& setup,
                             const MpcConfig& cfg, const TrackingTask& task,
                             const funnel::GainSpec& gains, const LearnerFn& learner) {
  model::ControlAffineModel placeholder = model::make_linear_model(setup.initial);
  return run_two_loop(system, placeholder, cfg, task, gains, &setup, learner);
}

std::string diagnostics_jsonl(const RunResult& result) {
  std::string out;
  for (const auto& rec : result.iterations) {
    nlohmann::ordered_json j;
    j["k"] = rec.k;
    if (rec.cost_infinite)
      j["cost"] = nullptr;
    else
      j["cost"] = rec.cost;
    j["feasible"] = rec.feasible;
    j["jump"] = rec.jump;
    if (std::isnan(rec.residual))
      j["residual"] = nullptr;
    else
      j["residual"] = rec.residual;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace fmpc::loop
