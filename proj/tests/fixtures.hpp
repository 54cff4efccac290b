#pragma once

// Shared hand-built fixtures for the unit suites. Scenario-grade builders
// live in the library; these stay deliberately small and local.

#include <cmath>

#include "fmpc/model.hpp"

namespace fixtures {

using fmpc::Mat;
using fmpc::Vec;

inline Vec v1(double a) {
  Vec v(1);
  v << a;
  return v;
}

inline Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// Exothermic reactor: temperature output, two co-integrated concentrations.
struct Reactor {
  static constexpr double c1 = -1.0, c2 = 1.0, k1 = 8700.0, x1in = 1.0, x2in = 0.0, d = 1.1,
                          q = 1.25, b = 209.2;
  static double k0() { return std::exp(25.0); }
  static double p(double y, double x1) { return k0() * std::exp(-k1 / y) * x1; }

  static fmpc::model::ControlAffineModel plant() {
    fmpc::model::ControlAffineModel mdl;
    mdl.r = 1;
    mdl.m = 1;
    mdl.f = [](const Vec& w) { return w; };
    mdl.g = [](const Vec&) { return Mat::Identity(1, 1); };
    fmpc::model::NonlinearInternal op;
    op.q_map = [](const Vec& x, const Vec& eta) {
      const double pr = p(x(0), eta(0));
      Vec de(2);
      de << c1 * pr + d * (x1in - eta(0)), c2 * pr + d * (x2in - eta(1));
      return de;
    };
    op.readout = [](const Vec& x, const Vec& eta) { return v1(b * p(x(0), eta(0)) - q * x(0)); };
    op.eta0 = v2(0.02, 0.9);
    mdl.op = op;
    return mdl;
  }
};

// Setpoint ramp 270 -> 337.1 over two seconds, then constant.
inline fmpc::model::RefSignal reactor_ref() {
  fmpc::model::RefSignal ref;
  ref.m = 1;
  ref.r = 1;
  ref.deriv = [](double t, int j) {
    if (j == 0) return v1(t < 2.0 ? 270.0 + 33.55 * t : 337.1);
    if (j == 1) return v1(t < 2.0 ? 33.55 : 0.0);
    return v1(0.0);
  };
  return ref;
}

// Two-mass cart reduced to output order two with two internal states.
inline fmpc::model::LinearParams cart_params() {
  const double s2 = std::sqrt(2.0);
  fmpc::model::LinearParams p;
  p.R = {Mat::Zero(1, 1), (Mat(1, 1) << 8.0 / 9.0).finished()};
  p.S = (Mat(1, 2) << -8.0 * s2 / 9.0, -4.0 * s2 / 9.0).finished();
  p.Q = (Mat(2, 2) << 0.0, 1.0, -4.0, -2.0).finished();
  p.P = (Mat(2, 1) << 2.0 * s2, 0.0).finished();
  p.D1 = Vec::Zero(1);
  p.D2 = Vec::Zero(2);
  p.Gamma = (Mat(1, 1) << 1.0 / 9.0).finished();
  p.eta0 = Vec::Zero(2);
  return p;
}

// cos(t) with all derivatives.
inline fmpc::model::RefSignal cos_ref() {
  fmpc::model::RefSignal ref;
  ref.m = 1;
  ref.r = 2;
  ref.deriv = [](double t, int j) { return v1(std::cos(t + j * 1.5707963267948966)); };
  return ref;
}

// Lighter cart variant with output order two and marginally damped internals.
inline fmpc::model::LinearParams cart5_params() {
  const double s2 = std::sqrt(2.0);
  fmpc::model::LinearParams p;
  p.R = {Mat::Zero(1, 1), (Mat(1, 1) << 0.25).finished()};
  p.S = (Mat(1, 2) << -s2 / 8.0, -s2 / 8.0).finished();
  p.Q = (Mat(2, 2) << 0.0, 1.0, -1.0, -1.0).finished();
  p.P = (Mat(2, 1) << s2, 0.0).finished();
  p.D1 = Vec::Zero(1);
  p.D2 = Vec::Zero(2);
  p.Gamma = (Mat(1, 1) << 0.25).finished();
  p.eta0 = Vec::Zero(2);
  return p;
}

// a*sin(w t) with all derivatives.
inline fmpc::model::RefSignal sine_ref(double a, double w) {
  fmpc::model::RefSignal ref;
  ref.m = 1;
  ref.r = 2;
  ref.deriv = [a, w](double t, int j) {
    return v1(a * std::pow(w, j) * std::sin(w * t + j * 1.5707963267948966));
  };
  return ref;
}

inline fmpc::model::RefSignal zero_ref(int m, int r) {
  fmpc::model::RefSignal ref;
  ref.m = m;
  ref.r = r;
  ref.deriv = [m](double, int) { return Vec(Vec::Zero(m)); };
  return ref;
}

inline fmpc::model::StepFunction constant_input(double t0, double t1, double dt,
                                                const Vec& value) {
  fmpc::model::StepFunction u;
  u.partition = fmpc::model::Partition::uniform(t0, t1, dt);
  u.values.assign(u.partition.cells(), value);
  return u;
}

// Single integrator y' = u.
inline fmpc::model::ControlAffineModel integrator1() {
  fmpc::model::ControlAffineModel mdl;
  mdl.r = 1;
  mdl.m = 1;
  mdl.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
  mdl.g = [](const Vec&) { return Mat::Identity(1, 1); };
  return mdl;
}

}  // namespace fixtures
