#include "fmpc/feedback.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fmpc::feedback {

namespace {

void require(bool ok, ErrorCode code, const std::string& what, int index = -1) {
  if (!ok) throw Error(code, what, index);
}

}  // namespace

void ZohConfig::validate() const {
  require(iota > 0.0 && iota < 1.0, ErrorCode::ConfigError, "ZohConfig: iota outside (0,1)");
  require(nu > 0.0, ErrorCode::ConfigError, "ZohConfig: nonpositive input gain");
  require(sample_step > 0.0, ErrorCode::ConfigError, "ZohConfig: nonpositive sample step");
  require(kappa0 >= 0.0 && kappa1 >= 0.0, ErrorCode::ConfigError, "ZohConfig: negative kappa");
  require(u_cap >= 0.0, ErrorCode::ConfigError, "ZohConfig: negative input cap");
}

void FcBoundTable::validate() const {
  require(eps.size() == mu.size() && eps.size() == eta_bar.size(), ErrorCode::ConfigError,
          "FcBoundTable: ragged columns");
  require(!eps.empty() && eps[0] == 0.0 && eta_bar[0] == 0.0, ErrorCode::ConfigError,
          "FcBoundTable: missing zero seed row");
  for (std::size_t i = 0; i < eps.size(); ++i) {
    require(eps[i] >= 0.0 && eps[i] < 1.0, ErrorCode::DomainViolation,
            "FcBoundTable: eps outside [0,1)", static_cast<int>(i));
    require(mu[i] >= 0.0 && eta_bar[i] >= 0.0, ErrorCode::ConfigError,
            "FcBoundTable: negative rate bound", static_cast<int>(i));
  }
}

double adaptive_phi(double t, const Vec& y_M, const Vec& y_ref, const funnel::BoundaryFn& psi1) {
  require(y_M.size() == y_ref.size(), ErrorCode::DimensionMismatch,
          "adaptive_phi: output dimensions differ");
  const double margin = psi1.value(t) - (y_M - y_ref).norm();
  require(margin > 0.0, ErrorCode::PredictionOutsideFunnel,
          "adaptive_phi: prediction at or outside the funnel");
  return 1.0 / margin;
}

Vec funnel_control(const Vec& chi_y, const Vec& chi_ref, double phi, const funnel::GainSpec& gains,
                   int m) {
  require(chi_y.size() == chi_ref.size(), ErrorCode::DimensionMismatch,
          "funnel_control: stack sizes differ");
  const Vec z = chi_y - chi_ref;
  const int r = static_cast<int>(z.size()) / m;
  const auto errs = funnel::fc_errors(phi, z, m, gains);
  if (errs.domain_violation)
    throw Error(ErrorCode::DomainViolation, "funnel_control: error recursion left the unit ball",
                *errs.domain_violation);
  const Vec& er = errs.e.back();
  const double n = er.norm();
  require(n < 1.0, ErrorCode::DomainViolation, "funnel_control: last error outside the unit ball",
          r);
  return gains.activation(n) * gains.N(gains.gamma(n * n)) * er;
}

model::FeedbackFn fc_feedback(const model::RefSignal& ref, const funnel::BoundaryFn& phi_fn,
                              const funnel::GainSpec& gains) {
  const int m = ref.m;
  return [ref, phi_fn, gains, m](double t, const Vec& x, const Vec&) {
    return funnel_control(x, ref.stack(t), phi_fn.value(t), gains, m);
  };
}

namespace {

// Solves gamma(e^2) e = rhs for e in (0,1); the left side grows from 0 to
// infinity, so a root always exists for rhs > 0.
double solve_gain_level(const funnel::GainSpec& gains, double rhs) {
  const auto lhs = [&gains](double e) { return gains.gamma(e * e) * e; };
  double hi = 0.5;
  for (int i = 0; i < 200 && lhs(hi) < rhs; ++i) hi = 0.5 * (1.0 + hi);
  require(lhs(hi) >= rhs, ErrorCode::ConfigError,
          "fc_bound_table: gain does not blow up near one");
  double lo = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (lhs(mid) < rhs ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

FcBoundTable fc_bound_table(double phi_ratio_bound, const std::vector<double>& init_errors,
                            const funnel::GainSpec& gains, int r) {
  require(r >= 1, ErrorCode::ConfigError, "fc_bound_table: order must be positive");
  require(phi_ratio_bound >= 0.0, ErrorCode::ConfigError, "fc_bound_table: negative ratio bound");
  require(init_errors.empty() || static_cast<int>(init_errors.size()) == r - 1,
          ErrorCode::DimensionMismatch, "fc_bound_table: need r-1 initial errors");
  FcBoundTable tab;
  tab.eps = {0.0};
  tab.mu = {0.0};
  tab.eta_bar = {0.0};
  if (r >= 2)
    require(static_cast<bool>(gains.gamma_dot), ErrorCode::ConfigError,
            "fc_bound_table: gain derivative required");
  for (int i = 1; i <= r - 1; ++i) {
    const double prev_eps = tab.eps[i - 1];
    const double prev_gain = gains.gamma(prev_eps * prev_eps) * prev_eps;
    const double rhs = phi_ratio_bound * (1.0 + prev_gain) + 1.0 + tab.eta_bar[i - 1];
    const double eps_hat = solve_gain_level(gains, rhs);
    const double init = init_errors.empty() ? 0.0 : init_errors[i - 1];
    const double eps_i = std::max(init, eps_hat);
    require(eps_i < 1.0, ErrorCode::DomainViolation,
            "fc_bound_table: initial error at or outside the unit ball", i);
    const double gain_i = gains.gamma(eps_i * eps_i) * eps_i;
    const double mu_i = phi_ratio_bound * (1.0 + prev_gain) + 1.0 + gain_i + tab.eta_bar[i - 1];
    const double eta_i =
        2.0 * gains.gamma_dot(eps_i * eps_i) * eps_i * eps_i * mu_i + gains.gamma(eps_i * eps_i) * mu_i;
    tab.eps.push_back(eps_i);
    tab.mu.push_back(mu_i);
    tab.eta_bar.push_back(eta_i);
  }
  tab.validate();
  return tab;
}

ZohConfig zoh_constants(const ZohDesignInputs& in) {
  require(in.r >= 1, ErrorCode::ConfigError, "zoh_constants: order must be positive");
  require(in.iota > 0.0 && in.iota < 1.0, ErrorCode::ConfigError,
          "zoh_constants: iota outside (0,1)");
  require(in.bounds.f_max >= 0.0 && in.bounds.g_max > 0.0, ErrorCode::ConfigError,
          "zoh_constants: invalid dynamics bounds");
  require(in.bounds.g_min.has_value() && *in.bounds.g_min > 0.0 &&
              *in.bounds.g_min <= in.bounds.g_max,
          ErrorCode::ConfigError, "zoh_constants: g_min required in (0, g_max]");
  require(in.phi.inf > 0.0, ErrorCode::NonPositiveFunnel, "zoh_constants: funnel not positive");
  require(in.safety_factor >= 1.0, ErrorCode::ConfigError, "zoh_constants: safety factor < 1");

  double ratio = 0.0;
  if (in.phi_ratio_bound) {
    ratio = *in.phi_ratio_bound;
  } else {
    const auto& phi = in.phi;
    ratio = funnel::grid_inf_sup(
                [&phi](double t) { return std::abs(phi.deriv(t) / phi.value(t)); }, in.t0, in.t1)
                .sup;
  }
  double sup_yr = 0.0;
  if (in.sup_yref_r) {
    sup_yr = *in.sup_yref_r;
  } else {
    const auto& ref = in.ref;
    const int r = in.r;
    sup_yr =
        funnel::grid_inf_sup([&ref, r](double t) { return ref.deriv(t, r).norm(); }, in.t0, in.t1)
            .sup;
  }

  const auto tab = fc_bound_table(ratio, in.init_errors, in.gains, in.r);
  const double eps_top = tab.eps[in.r - 1];
  const double gain_top = in.gains.gamma(eps_top * eps_top) * eps_top;
  const double kappa0 = ratio * (1.0 + gain_top) + in.phi.sup * (in.bounds.f_max + sup_yr) +
                        tab.eta_bar[in.r - 1];

  ZohConfig cfg;
  cfg.iota = in.iota;
  cfg.kappa0 = kappa0;
  cfg.nu = in.safety_factor * 2.0 * kappa0 / (*in.bounds.g_min * in.phi.inf);
  if (cfg.nu <= 0.0) cfg.nu = std::numeric_limits<double>::min();
  cfg.kappa1 = kappa0 + in.phi.sup * (cfg.nu / in.iota) * in.bounds.g_max;
  if (kappa0 <= 0.0) {
    cfg.sample_step = in.degenerate_step_cap;
  } else {
    const double hold_drift =
        kappa0 + (in.u_max_data ? in.phi.sup * in.bounds.g_max * (*in.u_max_data) : 0.0);
    cfg.sample_step =
        std::min(kappa0 / (cfg.kappa1 * cfg.kappa1), (1.0 - in.iota) / hold_drift);
  }
  cfg.u_cap = cfg.nu / cfg.iota;
  cfg.validate();
  return cfg;
}

Vec zoh_control(const Vec& e_r_at_sample, const ZohConfig& cfg) {
  const double n = e_r_at_sample.norm();
  if (n < cfg.iota) return Vec::Zero(e_r_at_sample.size());
  return Vec(-(cfg.nu / (n * n)) * e_r_at_sample);
}

Vec safety_filter(const Vec& e_r_at_sample, const Vec& u_data, const ZohConfig& cfg,
                  double u_max_data) {
  require(u_data.norm() <= u_max_data + 1e-12 * std::max(1.0, u_max_data),
          ErrorCode::DataInputTooLarge, "safety_filter: data input above certified bound");
  if (e_r_at_sample.norm() < cfg.iota) return u_data;
  return zoh_control(e_r_at_sample, cfg);
}

Vec zoh_feasibility_feedback(double t_sample, const Vec& chain_state,
                             const funnel::AuxiliaryDesign& design, const model::RefSignal& ref,
                             double nu) {
  const Vec z = chain_state - ref.stack(t_sample);
  const auto xs = funnel::xi(z, design.k, design.m);
  const Vec& xr = xs[design.r - 1];
  const double psir = design.psi_list[design.r - 1].value(t_sample);
  require(psir > 0.0, ErrorCode::NonPositiveFunnel, "zoh_feasibility_feedback");
  const double n = xr.norm();
  if (n / psir < 0.5) return Vec::Zero(design.m);
  return Vec(-(nu * psir / (n * n)) * xr);
}

double snap_sample_step(double sample_step, double h) {
  require(h > 0.0, ErrorCode::ConfigError, "snap_sample_step: nonpositive h");
  require(sample_step >= h * (1.0 - 1e-9), ErrorCode::ConfigError,
          "snap_sample_step: sample step below the integration step");
  const double k = std::floor(sample_step / h + 1e-9);
  return k * h;
}

ZohRunResult run_zoh_tracking(const model::ControlAffineModel& sys, const model::RefSignal& ref,
                              const funnel::BoundaryFn& phi_fn, const funnel::GainSpec& gains,
                              const ZohConfig& cfg, double t0, double t1, double h, const Vec& x0,
                              const std::optional<DataInputSpec>& data) {
  cfg.validate();
  require(t1 > t0, ErrorCode::ConfigError, "run_zoh_tracking: empty time window");
  const double span_cells = (t1 - t0) / h;
  require(std::abs(span_cells - std::lround(span_cells)) <= 1e-6,
          ErrorCode::StepIncompatibleWithPartition, "run_zoh_tracking: h does not divide window");
  const int r = sys.r;
  const int m = sys.m;

  ZohRunResult out;
  out.actual_sample_step = snap_sample_step(cfg.sample_step, h);

  std::vector<model::SimulationTrace> segments;
  Vec x = x0;
  Vec eta = model::initial_eta(sys.op);
  Vec last_applied = Vec::Zero(m);
  bool broken = false;

  for (int i = 0;; ++i) {
    const double ti = t0 + i * out.actual_sample_step;
    if (ti >= t1 - 1e-12 * std::max(1.0, std::abs(t1))) break;
    const double tn = std::min(ti + out.actual_sample_step, t1);

    const Vec z = x - ref.stack(ti);
    const auto errs = funnel::fc_errors(phi_fn.value(ti), z, m, gains);
    Vec applied = Vec::Zero(m);
    bool passthrough = false;
    if (!errs.all_defined(r)) {
      out.contained = false;  // recursion left the unit ball: hold the safe zero
    } else {
      const Vec& er = errs.e.back();
      if (data) {
        Vec u_data = Vec::Zero(m);
        if (data->external)
          u_data = data->external(ti, x, eta);
        else if (data->policy == DataPolicy::HoldLast)
          u_data = last_applied;
        applied = safety_filter(er, u_data, cfg, data->u_max_data);
        passthrough = er.norm() < cfg.iota;
      } else {
        applied = zoh_control(er, cfg);
      }
    }
    out.sample_times.push_back(ti);
    out.held_inputs.push_back(applied);
    out.max_u_norm = std::max(out.max_u_norm, applied.norm());
    last_applied = applied;

    model::StepFunction hold;
    hold.partition.times = {ti, tn};
    hold.values = {applied};
    auto seg = model::integrate_closed_loop(model::with_initial_eta(sys, eta), hold, ti, tn, h, x);
    if (!passthrough) {
      for (int k = 0; k < seg.nodes(); ++k) std::swap(seg.u_fmpc[k], seg.u_fc[k]);
    }
    const bool dead = seg.flags.nan || seg.flags.escaped || seg.nodes() == 0;
    if (!dead) {
      x = seg.x.back();
      if (!seg.eta.empty()) eta = seg.eta.back();
    }
    segments.push_back(std::move(seg));
    if (dead) {
      out.contained = false;
      broken = true;
      break;
    }
  }

  out.trace = model::concatenate(segments, {});
  for (int k = 0; k < out.trace.nodes(); ++k) {
    const double t = out.trace.times[k];
    const double phi = phi_fn.value(t);
    const Vec z = out.trace.x[k] - ref.stack(t);
    out.trace.phi.push_back(phi);
    out.trace.psi.push_back(1.0 / phi);
    out.trace.margin.push_back(1.0 / phi - z.head(m).norm());
    out.max_tracking_scaled = std::max(out.max_tracking_scaled, phi * z.head(m).norm());
    const auto errs = funnel::fc_errors(phi, z, m, gains);
    if (!errs.all_defined(r)) {
      out.contained = false;
      continue;
    }
    for (int j = 0; j + 1 < r; ++j)
      if (errs.e[j].norm() >= 1.0) out.contained = false;
    const double nr = errs.e.back().norm();
    out.max_last_error = std::max(out.max_last_error, nr);
    if (nr > 1.0 + 1e-9) out.contained = false;
  }
  if (broken) out.trace.flags.funnel_violated = true;
  return out;
}

}  // namespace fmpc::feedback
