#include "fmpc/funnel.hpp"

#include <algorithm>
#include <cmath>

namespace fmpc::funnel {

GridStats grid_inf_sup(const ScalarFn& f, double t0, double t1, int n) {
  if (n < 2) n = 2;
  GridStats s{f(t0), f(t0)};
  const double dt = (t1 - t0) / (n - 1);
  for (int i = 1; i < n; ++i) {
    const double v = f(t0 + i * dt);
    s.inf = std::min(s.inf, v);
    s.sup = std::max(s.sup, v);
  }
  return s;
}

AlphaBeta derive_alpha_beta(const ScalarFn& psi, const ScalarFn& psi_dot, double t0, double t1,
                            int grid_n) {
  const GridStats sp = grid_inf_sup(psi, t0, t1, grid_n);
  const GridStats sd = grid_inf_sup(psi_dot, t0, t1, grid_n);
  if (sp.inf <= 0.0)
    throw Error(ErrorCode::NonPositiveFunnel, "funnel infimum non-positive on the grid");
  if (sd.inf >= 0.0) return {1.0, sp.inf};
  const double alpha = -sd.inf / (0.5 * sp.inf);
  return {alpha, -sd.inf};
}

bool admissible_alpha_beta(const ScalarFn& psi, const ScalarFn& psi_dot, double alpha, double beta,
                           double t0, double t1, int grid_n) {
  if (alpha <= 0.0 || beta <= 0.0) return false;
  if (psi(t0) < beta / alpha - 1e-9 * (1.0 + beta / alpha)) return false;
  if (grid_n < 2) grid_n = 2;
  const double dt = (t1 - t0) / (grid_n - 1);
  for (int i = 0; i < grid_n; ++i) {
    const double t = t0 + i * dt;
    const double rhs = -alpha * psi(t) + beta;
    const double tol = 1e-9 * (1.0 + std::abs(alpha * psi(t)) + beta);
    if (psi_dot(t) < rhs - tol) return false;
  }
  return true;
}

FunnelSpec make_funnel(ScalarFn psi, ScalarFn psi_dot, double t0, double t1,
                       const FunnelOverrides& ov) {
  FunnelSpec f;
  f.psi = std::move(psi);
  f.psi_dot = std::move(psi_dot);
  const GridStats sp = grid_inf_sup(f.psi, t0, t1);
  f.inf_psi = ov.inf_psi.value_or(sp.inf);
  f.sup_psi = ov.sup_psi.value_or(sp.sup);
  if (f.inf_psi <= 0.0)
    throw Error(ErrorCode::NonPositiveFunnel, "funnel infimum non-positive");
  const AlphaBeta ab =
      ov.alpha_beta ? *ov.alpha_beta : derive_alpha_beta(f.psi, f.psi_dot, t0, t1);
  f.alpha = ab.alpha;
  f.beta = ab.beta;
  return f;
}

FunnelSpec make_exponential_funnel(double a, double lambda, double c, double t0, double t1,
                                   std::optional<AlphaBeta> ab) {
  FunnelSpec f;
  f.psi = [a, lambda, c](double t) { return a * std::exp(-lambda * t) + c; };
  f.psi_dot = [a, lambda](double t) { return -a * lambda * std::exp(-lambda * t); };
  f.inf_psi = a >= 0.0 ? f.psi(t1) : f.psi(t0);
  f.sup_psi = a >= 0.0 ? f.psi(t0) : f.psi(t1);
  if (f.inf_psi <= 0.0)
    throw Error(ErrorCode::NonPositiveFunnel, "funnel infimum non-positive");
  if (ab) {
    f.alpha = ab->alpha;
    f.beta = ab->beta;
  } else if (a <= 0.0 || lambda <= 0.0) {
    f.alpha = 1.0;
    f.beta = std::min(f.inf_psi, f.psi(0.0));
  } else {
    // Global infima over t >= 0: inf psi_dot = -a*lambda at 0, inf psi = c.
    if (c <= 0.0) throw Error(ErrorCode::NonPositiveFunnel, "funnel limit non-positive");
    f.beta = a * lambda;
    f.alpha = a * lambda / (0.5 * c);
  }
  return f;
}

FunnelSpec make_constant_funnel(double c) {
  if (c <= 0.0) throw Error(ErrorCode::NonPositiveFunnel, "constant funnel non-positive");
  FunnelSpec f;
  f.psi = [c](double) { return c; };
  f.psi_dot = [](double) { return 0.0; };
  f.inf_psi = f.sup_psi = c;
  f.alpha = 1.0;
  f.beta = c;
  return f;
}

namespace {

// Coefficient rows of xi_i: xi_i(z) = sum_j rows[i][j] * z_{j+1}, row i has
// i+1 entries. Built by the recursion row_{i+1} = shift(row_i) + k_i*row_i.
std::vector<std::vector<double>> xi_rows(const std::vector<double>& k, int r) {
  std::vector<std::vector<double>> rows(r);
  rows[0] = {1.0};
  for (int i = 1; i < r; ++i) {
    rows[i].assign(i + 1, 0.0);
    for (int j = 0; j <= i - 1; ++j) {
      rows[i][j + 1] += rows[i - 1][j];        // shifted stack
      rows[i][j] += k[i - 1] * rows[i - 1][j];  // k_i * xi_i
    }
  }
  return rows;
}

Vec block(const Vec& z, int j, int m) { return z.segment(j * m, m); }

Vec apply_row(const std::vector<double>& row, const Vec& z, int m, int offset) {
  Vec out = Vec::Zero(m);
  for (size_t j = 0; j < row.size(); ++j) out += row[j] * block(z, static_cast<int>(j) + offset, m);
  return out;
}

}  // namespace

std::vector<Vec> xi(const Vec& z, const std::vector<double>& k, int m) {
  const int r = static_cast<int>(k.size()) + 1;
  if (m <= 0 || z.size() != static_cast<long>(r) * m)
    throw Error(ErrorCode::DimensionMismatch, "xi: z must have length r*m");
  const auto rows = xi_rows(k, r);
  std::vector<Vec> out(r);
  for (int i = 0; i < r; ++i) out[i] = apply_row(rows[i], z, m, 0);
  return out;
}

Mat xi_matrix(const std::vector<double>& k, int r, int m) {
  if (r != static_cast<int>(k.size()) + 1)
    throw Error(ErrorCode::DimensionMismatch, "xi_matrix: r must equal |k|+1");
  const auto rows = xi_rows(k, r);
  Mat S = Mat::Zero(static_cast<long>(r) * m, static_cast<long>(r) * m);
  for (int i = 0; i < r; ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      S.block(i * m, static_cast<long>(j) * m, m, m) =
          rows[i][j] * Mat::Identity(m, m);
  return S;
}

std::vector<Vec> xi_shift(const Vec& z, const std::vector<double>& k, int m) {
  const int r = static_cast<int>(k.size()) + 1;
  if (m <= 0 || z.size() != static_cast<long>(r) * m)
    throw Error(ErrorCode::DimensionMismatch, "xi_shift: z must have length r*m");
  const auto rows = xi_rows(k, r);
  // xi_i evaluated on the left-shifted stack; defined while the row stays
  // within the stack, i.e. for i = 1..r-1.
  std::vector<Vec> out(r - 1);
  for (int i = 0; i + 1 < r; ++i) out[i] = apply_row(rows[i], z, m, 1);
  return out;
}

namespace {

double gamma_margin_search(double norm_z1, double psi_t0, int r) {
  auto ok = [&](double g) { return norm_z1 <= std::pow(g, r) * psi_t0; };
  double lo = 0.0, hi = 0.0;
  bool found = false;
  for (int j = 1; j <= 9; ++j) {
    const double g = 0.1 * j;
    if (ok(g)) {
      hi = g;
      lo = 0.1 * (j - 1);
      found = true;
      break;
    }
  }
  if (!found) {
    lo = 0.9;
    hi = 1.0 - 1e-12;
    if (!ok(hi))
      throw Error(ErrorCode::InitialErrorOutsideFunnel, "initial output error not inside funnel", 1);
  }
  if (hi <= 0.1) return 0.1;  // grid floor; any smaller gamma also satisfies
  while (hi - lo > 1e-6) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace

AuxiliaryDesign design_auxiliary(const FunnelSpec& psi1, const Vec& init_error, int m,
                                 DesignMode mode, double t0, const DesignOverrides& ov) {
  if (m <= 0 || init_error.size() % m != 0)
    throw Error(ErrorCode::DimensionMismatch, "design_auxiliary: init_error length not r*m");
  const int r = static_cast<int>(init_error.size()) / m;

  AuxiliaryDesign d;
  d.r = r;
  d.m = m;
  d.mode = mode;
  d.alpha = psi1.alpha;
  d.beta = psi1.beta;
  d.psi_list.push_back(BoundaryFn{psi1.psi, psi1.psi_dot, psi1.inf_psi, psi1.sup_psi});

  const double psi_t0 = psi1.psi(t0);
  const double nz1 = block(init_error, 0, m).norm();
  if (!strictly_inside(nz1, psi_t0))
    throw Error(ErrorCode::InitialErrorOutsideFunnel, "initial output error not inside funnel", 1);
  if (r == 1) return d;

  const double gamma = ov.gamma_margin ? *ov.gamma_margin
                                       : gamma_margin_search(nz1, psi_t0, r);
  d.gamma_margin = gamma;
  const double alpha = psi1.alpha, beta = psi1.beta;

  if (mode == DesignMode::Simplified) {
    d.k.assign(r - 1, alpha + 2.0);
    if (ov.gains) d.k = *ov.gains;
    if (static_cast<int>(d.k.size()) != r - 1)
      throw Error(ErrorCode::DimensionMismatch, "design_auxiliary: need r-1 gains");
    const double c = beta / alpha;
    for (int i = 1; i < r; ++i)
      d.psi_list.push_back(BoundaryFn{[c](double) { return c; }, [](double) { return 0.0; }, c, c});
  } else {
    if (ov.gains && static_cast<int>(ov.gains->size()) != r - 1)
      throw Error(ErrorCode::DimensionMismatch, "design_auxiliary: need r-1 gains");
    const double cinf = beta / (alpha * std::pow(gamma, r - 1));
    for (int i = 1; i <= r - 1; ++i) {
      // Sequential: xi_i and its derivative depend only on k_1..k_{i-1},
      // so padding the not-yet-chosen gains with zeros is inert.
      std::vector<double> padded = d.k;
      padded.resize(r - 1, 0.0);
      const auto xs = xi(init_error, padded, m);
      const auto xd = xi_shift(init_error, padded, m);
      const double nxi = xs[i - 1].norm();
      const double nxid = xd[i - 1].norm();
      double ki;
      if (ov.gains) {
        ki = (*ov.gains)[i - 1];
      } else if (i == 1) {
        ki = 2.0 * nxid / (std::pow(gamma, r - 1) * (1.0 - gamma) * psi_t0) +
             2.0 * (alpha + 1.0 / std::pow(gamma, r - 1)) / (1.0 - gamma);
      } else {
        ki = 2.0 * gamma * nxid /
                 ((1.0 - gamma) * (nxi + beta / (alpha * std::pow(gamma, i - 2)))) +
             2.0 * (1.0 + alpha) / (1.0 - gamma);
      }
      d.k.push_back(ki);
      const double coef = (nxid + ki * nxi) / std::pow(gamma, r - i);
      auto value = [coef, alpha, t0, cinf](double t) {
        return coef * std::exp(-alpha * (t - t0)) + cinf;
      };
      auto deriv = [coef, alpha, t0](double t) {
        return -alpha * coef * std::exp(-alpha * (t - t0));
      };
      d.psi_list.push_back(BoundaryFn{value, deriv, cinf, coef + cinf});
    }
    // xi depends on a full gain vector; recompute was incremental above, so
    // d.k is complete here by construction.
  }

  const Containment c0 = in_D(t0, init_error, d);
  if (!c0.inside) {
    const auto xs = xi(init_error, d.k, m);
    for (int i = 0; i < r; ++i)
      if (!strictly_inside(xs[i].norm(), d.psi_list[i].value(t0)))
        throw Error(ErrorCode::InitialErrorOutsideFunnel,
                    "initial auxiliary error not inside funnel", i + 1);
  }
  return d;
}

ExtendedCost funnel_penalty(double t, const Vec& e, const ScalarFn& psi_r) {
  const double p = psi_r(t);
  const double n = e.norm();
  if (p <= 0.0 || !strictly_inside(n, p)) return ExtendedCost::inf();
  return ExtendedCost::finite(n * n / (p * p - n * n));
}

ExtendedCost quadratic_penalty_nonstrict(double t, const Vec& e, const ScalarFn& psi_r) {
  const double p = psi_r(t);
  const double n = e.norm();
  if (p <= 0.0 || n > p * (1.0 + kStrictMargin)) return ExtendedCost::inf();
  return ExtendedCost::finite(n * n);
}

ExtendedCost stage_cost(double t, const Vec& xi_r, const Vec& u, const ScalarFn& psi_r,
                        double lambda_u, const std::optional<Vec>& u_offset, StageCostKind kind) {
  ExtendedCost c;
  switch (kind) {
    case StageCostKind::FunnelStrict:
      c = funnel_penalty(t, xi_r, psi_r);
      break;
    case StageCostKind::QuadraticNonStrict:
      c = quadratic_penalty_nonstrict(t, xi_r, psi_r);
      break;
    case StageCostKind::QuadraticUnconstrained:
      c = ExtendedCost::finite(xi_r.squaredNorm());
      break;
  }
  if (c.infinite) return c;
  const Vec du = u_offset ? Vec(u - *u_offset) : u;
  c += lambda_u * du.squaredNorm();
  return c;
}

Containment in_D(double t, const Vec& z, const AuxiliaryDesign& design) {
  const auto xs = xi(z, design.k, design.m);
  Containment c;
  c.inside = true;
  c.margins.resize(design.r);
  for (int i = 0; i < design.r; ++i) {
    const double p = design.psi_list[i].value(t);
    c.margins[i] = p - xs[i].norm();
    if (!strictly_inside(xs[i].norm(), p)) c.inside = false;
  }
  return c;
}

GainSpec GainSpec::known_direction(double scale) {
  GainSpec g;
  g.gamma = [](double s) { return 1.0 / (1.0 - s); };
  g.gamma_dot = [](double s) { const double d = 1.0 - s; return 1.0 / (d * d); };
  g.N = [scale](double s) { return -scale * s; };
  return g;
}

GainSpec GainSpec::unknown_direction() {
  GainSpec g = known_direction(1.0);
  g.N = [](double s) { return s * std::sin(s); };
  return g;
}

FcErrors fc_errors(double phi, const Vec& z, int m, const GainSpec& gains,
                   std::optional<double> eps) {
  if (m <= 0 || z.size() % m != 0)
    throw Error(ErrorCode::DimensionMismatch, "fc_errors: z length not r*m");
  const int r = static_cast<int>(z.size()) / m;
  FcErrors out;
  Vec e = phi * block(z, 0, m);
  out.e.push_back(e);
  for (int i = 1; i < r; ++i) {
    const double n = out.e.back().norm();
    if (n >= 1.0) {
      out.domain_violation = i;  // ||e_i|| outside gamma's domain
      break;
    }
    e = phi * block(z, i, m) + gains.gamma(n * n) * out.e.back();
    out.e.push_back(e);
  }
  if (eps) {
    out.in_eps.reserve(out.e.size());
    for (const auto& ei : out.e) out.in_eps.push_back(ei.norm() < *eps);
  }
  return out;
}

}  // namespace fmpc::funnel
