#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

#include "doctest.h"
#include "fmpc/model.hpp"

using namespace fmpc;
using namespace fmpc::model;

namespace {

Vec v1(double a) {
  Vec v(1);
  v << a;
  return v;
}

// Exothermic reactor: scalar temperature output with two co-integrated
// concentration states.
struct Reactor {
  static constexpr double c1 = -1.0, c2 = 1.0, k1 = 8700.0, x1in = 1.0, x2in = 0.0, d = 1.1,
                          q = 1.25, b = 209.2;
  static double k0() { return std::exp(25.0); }
  static double p(double y, double x1) { return k0() * std::exp(-k1 / y) * x1; }

  static ControlAffineModel plant() {
    ControlAffineModel mdl;
    mdl.r = 1;
    mdl.m = 1;
    mdl.f = [](const Vec& w) { return w; };
    mdl.g = [](const Vec&) { return Mat::Identity(1, 1); };
    NonlinearInternal op;
    op.q_map = [](const Vec& x, const Vec& eta) {
      const double pr = p(x(0), eta(0));
      Vec de(2);
      de << c1 * pr + d * (x1in - eta(0)), c2 * pr + d * (x2in - eta(1));
      return de;
    };
    op.readout = [](const Vec& x, const Vec& eta) { return v1(b * p(x(0), eta(0)) - q * x(0)); };
    op.eta0 = Vec(2);
    op.eta0 << 0.02, 0.9;
    mdl.op = op;
    return mdl;
  }
};

// Two-mass cart with the hand-off force through a spring-damper, reduced to
// output order two with a two-dimensional internal state.
LinearParams cart_params() {
  const double s2 = std::sqrt(2.0);
  LinearParams p;
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

StepFunction constant_input(double t0, double t1, double dt, const Vec& value) {
  StepFunction u;
  u.partition = Partition::uniform(t0, t1, dt);
  u.values.assign(u.partition.cells(), value);
  return u;
}

}  // namespace

TEST_CASE("partitions and step functions") {
  auto p = Partition::uniform(0.0, 1.0, 0.1);
  CHECK(p.times.size() == 11);
  CHECK(p.cell_index(0.0) == 0);
  CHECK(p.cell_index(0.05) == 0);
  CHECK(p.cell_index(0.1) == 1);  // right-open cells
  CHECK(p.cell_index(0.999) == 9);
  CHECK(p.cell_index(1.0) == 9);   // clamped at the right end
  CHECK(p.cell_index(-0.5) == 0);  // clamped at the left end
  p.validate();

  SUBCASE("invariant violations") {
    Partition bad;
    bad.times = {0.0, 0.2, 0.1};
    CHECK_THROWS_AS(bad.validate(), Error);
    Partition gap;
    gap.times = {0.0, 0.1, 0.25};
    gap.uniform_step = 0.1;
    CHECK_THROWS_AS(gap.validate(), Error);
    CHECK_THROWS_AS(Partition::uniform(0.0, 1.0, 0.3), Error);
  }

  SUBCASE("evaluation picks the right-open cell") {
    StepFunction u;
    u.partition = Partition::uniform(0.0, 1.0, 0.5);
    u.values = {v1(5.0), v1(7.0)};
    u.validate();
    CHECK(u(0.25)(0) == 5.0);
    CHECK(u(0.5)(0) == 7.0);
    CHECK(u(0.4999999)(0) == 5.0);
    CHECK(u(1.0)(0) == 7.0);
  }

  SUBCASE("value count must match cells") {
    StepFunction u;
    u.partition = Partition::uniform(0.0, 1.0, 0.5);
    u.values = {v1(5.0)};
    CHECK_THROWS_AS(u.validate(), Error);
  }
}

TEST_CASE("runge-kutta step") {
  SUBCASE("constant field") {
    const Vec x = v1(3.5);
    const Vec y = rk4_step([](double, const Vec&) { return Vec(Vec::Zero(1)); }, 0.0, x, 0.2);
    CHECK(y(0) == 3.5);
  }
  SUBCASE("double integrator exact") {
    Vec x(2);
    x << 0.0, 1.0;
    const auto field = [](double, const Vec& s) {
      Vec d(2);
      d << s(1), 0.0;
      return d;
    };
    const Vec y = rk4_step(field, 0.0, x, 0.37);
    CHECK(y(0) == doctest::Approx(0.37).epsilon(1e-15));
    CHECK(y(1) == 1.0);
  }
  SUBCASE("linear decay matches the fourth-order polynomial") {
    const double h = 0.1;
    const Vec y =
        rk4_step([](double, const Vec& s) { return Vec(-s); }, 0.0, v1(1.0), h);
    CHECK(y(0) == doctest::Approx(0.9048375).epsilon(1e-15));
    CHECK(y(0) ==
          doctest::Approx(1.0 - h + h * h / 2.0 - h * h * h / 6.0 + h * h * h * h / 24.0));
  }
  SUBCASE("non-finite stage detected") {
    bool threw = false;
    try {
      rk4_step([](double, const Vec& s) { return Vec(s / 0.0); }, 0.0, v1(1.0), 0.1);
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::NonFinite);
    }
    CHECK(threw);
  }
}

TEST_CASE("closed-loop integration") {
  SUBCASE("integrator chain drifts linearly") {
    ControlAffineModel chain;
    chain.r = 2;
    chain.m = 1;
    chain.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
    chain.g = [](const Vec&) { return Mat::Identity(1, 1); };
    Vec x0(2);
    x0 << 0.0, 1.0;
    const auto tr =
        integrate_closed_loop(chain, constant_input(0.0, 1.0, 0.5, v1(0.0)), 0.0, 1.0, 0.1, x0);
    REQUIRE(tr.nodes() == 11);
    for (int i = 0; i < tr.nodes(); ++i)
      CHECK(tr.y(i)(0) == doctest::Approx(tr.times[i]).epsilon(1e-13));
    CHECK_FALSE(tr.flags.escaped);
    CHECK_FALSE(tr.flags.funnel_violated);
    CHECK_FALSE(tr.flags.nan);
    tr.validate();
  }

  SUBCASE("piecewise-constant input integrates cellwise") {
    ControlAffineModel one;
    one.r = 1;
    one.m = 1;
    one.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
    one.g = [](const Vec&) { return Mat::Identity(1, 1); };
    StepFunction u;
    u.partition = Partition::uniform(0.0, 1.0, 0.5);
    u.values = {v1(5.0), v1(7.0)};
    const auto tr = integrate_closed_loop(one, u, 0.0, 1.0, 0.1, v1(0.0));
    CHECK(tr.y(10)(0) == doctest::Approx(6.0).epsilon(1e-13));
    CHECK(tr.u_fmpc[4](0) == 5.0);
    CHECK(tr.u_fmpc[5](0) == 7.0);  // right-open at the cell boundary
  }

  SUBCASE("step incompatibility rejected") {
    ControlAffineModel one;
    one.r = 1;
    one.m = 1;
    one.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
    one.g = [](const Vec&) { return Mat::Identity(1, 1); };
    bool threw = false;
    try {
      integrate_closed_loop(one, constant_input(0.0, 1.0, 0.5, v1(0.0)), 0.0, 1.0, 0.3, v1(0.0));
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::StepIncompatibleWithPartition);
    }
    CHECK(threw);
  }

  SUBCASE("additive disturbance enters the top equation") {
    ControlAffineModel chain;
    chain.r = 2;
    chain.m = 1;
    chain.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
    chain.g = [](const Vec&) { return Mat::Identity(1, 1); };
    chain.disturbance = [](double) { return v1(1.0); };
    const auto tr = integrate_closed_loop(
        chain, FeedbackFn([](double, const Vec&, const Vec&) { return Vec(Vec::Zero(1)); }), 0.0,
        1.0, 0.1, Vec(Vec::Zero(2)));
    for (int i = 0; i < tr.nodes(); ++i)
      CHECK(tr.y(i)(0) == doctest::Approx(0.5 * tr.times[i] * tr.times[i]).epsilon(1e-12));
  }

  SUBCASE("finite escape truncates with a flag") {
    ControlAffineModel sq;
    sq.r = 1;
    sq.m = 1;
    sq.f = [](const Vec& w) { return v1(w(0) * w(0)); };
    sq.g = [](const Vec&) { return Mat::Identity(1, 1); };
    const auto tr = integrate_closed_loop(
        sq, FeedbackFn([](double, const Vec&, const Vec&) { return Vec(Vec::Zero(1)); }), 0.0, 2.0,
        1e-4, v1(1.0));
    CHECK(tr.flags.escaped);
    CHECK(tr.times.back() < 1.01);  // blowup of x' = x^2 from 1 sits at t = 1
    CHECK(tr.nodes() >= 2);
    tr.validate();
  }

  SUBCASE("containment monitor flags and optionally truncates") {
    ControlAffineModel still;
    still.r = 1;
    still.m = 1;
    still.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
    still.g = [](const Vec&) { return Mat::Identity(1, 1); };
    Monitors mon;
    mon.funnel_ok = [](double t, const Vec& x, const Vec&) { return std::abs(x(0)) < 1.0 - t; };
    const auto zero_u = FeedbackFn([](double, const Vec&, const Vec&) { return Vec(Vec::Zero(1)); });
    const auto tr = integrate_closed_loop(still, zero_u, 0.0, 1.0, 0.01, v1(0.5), mon);
    CHECK(tr.flags.funnel_violated);
    CHECK(tr.nodes() == 101);  // flag only, no truncation
    Monitors cut = mon;
    cut.truncate_on_funnel = true;
    const auto tr2 = integrate_closed_loop(still, zero_u, 0.0, 1.0, 0.01, v1(0.5), cut);
    CHECK(tr2.flags.funnel_violated);
    CHECK(tr2.times.back() == doctest::Approx(0.5).epsilon(1e-9));
  }

  SUBCASE("reactor run stays finite and matches a hand stage evaluation") {
    const auto plant = Reactor::plant();
    const auto tr =
        integrate_closed_loop(plant, constant_input(0.0, 0.01, 0.01, v1(360.0)), 0.0, 0.01, 1e-4,
                              v1(270.0));
    CHECK(tr.nodes() == 101);
    CHECK_FALSE(tr.flags.nan);
    CHECK_FALSE(tr.flags.escaped);
    for (int i = 0; i < tr.nodes(); ++i) {
      CHECK(std::isfinite(tr.y(i)(0)));
      CHECK(tr.eta[i].allFinite());
    }

    // Hand-rolled four-stage update of the stacked (y, x1, x2) field.
    auto field = [](const Vec& s) {
      const double y = s(0), x1 = s(1), x2 = s(2);
      const double pr = Reactor::p(y, x1);
      Vec d(3);
      d << Reactor::b * pr - Reactor::q * y + 360.0,
          Reactor::c1 * pr + Reactor::d * (Reactor::x1in - x1),
          Reactor::c2 * pr + Reactor::d * (Reactor::x2in - x2);
      return d;
    };
    Vec s(3);
    s << 270.0, 0.02, 0.9;
    const double h = 1e-4;
    const Vec k1 = field(s);
    const Vec k2 = field(s + 0.5 * h * k1);
    const Vec k3 = field(s + 0.5 * h * k2);
    const Vec k4 = field(s + h * k3);
    const Vec s1 = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    CHECK(tr.y(1)(0) == doctest::Approx(s1(0)).epsilon(1e-14));
    CHECK(tr.eta[1](0) == doctest::Approx(s1(1)).epsilon(1e-14));
    CHECK(tr.eta[1](1) == doctest::Approx(s1(2)).epsilon(1e-14));
  }

  SUBCASE("deterministic by construction") {
    const auto plant = Reactor::plant();
    const auto a = integrate_closed_loop(plant, constant_input(0.0, 0.01, 0.01, v1(360.0)), 0.0,
                                         0.01, 1e-4, v1(270.0));
    const auto b = integrate_closed_loop(plant, constant_input(0.0, 0.01, 0.01, v1(360.0)), 0.0,
                                         0.01, 1e-4, v1(270.0));
    REQUIRE(a.nodes() == b.nodes());
    for (int i = 0; i < a.nodes(); ++i) {
      CHECK(a.y(i)(0) == b.y(i)(0));
      CHECK(a.eta[i] == b.eta[i]);
    }
  }
}

TEST_CASE("linear internal operator") {
  const auto mdl = make_linear_model(cart_params());
  SUBCASE("equilibrium stays at zero") {
    const auto tr =
        integrate_closed_loop(mdl, constant_input(0.0, 1.0, 0.1, v1(0.0)), 0.0, 1.0, 1e-3,
                              Vec(Vec::Zero(2)));
    for (int i = 0; i < tr.nodes(); ++i) {
      CHECK(tr.x[i].norm() == 0.0);
      CHECK(tr.eta[i].norm() == 0.0);
    }
  }

  SUBCASE("co-integration matches variation-of-constants quadrature") {
    const auto p = cart_params();
    const double h = 1e-4;
    Vec x0(2);
    x0 << 0.2, 0.0;
    const auto tr =
        integrate_closed_loop(mdl, constant_input(0.0, 1.0, 0.1, v1(1.0)), 0.0, 1.0, h, x0);
    REQUIRE(tr.nodes() == 10001);

    // e^{Q j h} accumulated from one dense matrix exponential.
    const Mat E1 = (p.Q * h).exp();
    std::vector<Mat> E(tr.nodes());
    E[0] = Mat::Identity(2, 2);
    for (int j = 1; j < tr.nodes(); ++j) E[j] = E[j - 1] * E1;

    for (int node = 1000; node <= 10000; node += 1000) {
      Vec acc = Vec::Zero(2);
      for (int j = 0; j <= node; ++j) {
        const double w = (j == 0 || j == node) ? 0.5 : 1.0;
        acc += w * (E[node - j] * (p.P * tr.y(j) + p.D2));
      }
      const Vec eta_hat = E[node] * p.eta0 + h * acc;
      CHECK((eta_hat - tr.eta[node]).norm() <= 1e-6);
    }
  }

  SUBCASE("parameter shape checks") {
    auto p = cart_params();
    p.P = Mat::Zero(3, 1);
    CHECK_THROWS_AS(make_linear_model(p), Error);
  }
}

TEST_CASE("internal state stays inside the decay bound") {
  LinearParams p;
  p.R = {(Mat(1, 1) << -1.0).finished()};
  p.S = Mat::Zero(1, 2);
  p.Q = (Mat(2, 2) << -1.0, 0.0, 0.0, -2.0).finished();
  p.P = (Mat(2, 1) << 0.5, 0.5).finished();
  p.D1 = Vec::Zero(1);
  p.D2 = (Vec(2) << 0.1, 0.0).finished();
  p.Gamma = Mat::Identity(1, 1);

  const double p_bar = p.P.jacobiSvd().singularValues().maxCoeff();
  const double d_bar = p.D2.norm();
  const double y_bar = 0.5;
  const double lam = 1.0;  // |largest eigenvalue of the symmetric part|
  const auto zero_u = FeedbackFn([](double, const Vec&, const Vec&) { return Vec(Vec::Zero(1)); });

  for (double eta01 : {2.0, 0.01}) {
    p.eta0 = (Vec(2) << eta01, 0.0).finished();
    const auto mdl = make_linear_model(p);
    const auto tr = integrate_closed_loop(mdl, zero_u, 0.0, 5.0, 1e-3, v1(0.5));
    const double bound =
        std::max(p.eta0.norm(), (p_bar * y_bar + d_bar) / lam) * (1.0 + 1e-6);
    for (int i = 0; i < tr.nodes(); ++i) CHECK(tr.eta[i].norm() <= bound);
  }
}

TEST_CASE("trace concatenation") {
  ControlAffineModel chain;
  chain.r = 2;
  chain.m = 1;
  chain.f = [](const Vec&) { return Vec(Vec::Zero(1)); };
  chain.g = [](const Vec&) { return Mat::Identity(1, 1); };
  Vec x0(2);
  x0 << 0.0, 1.0;
  const auto first =
      integrate_closed_loop(chain, constant_input(0.0, 1.0, 1.0, v1(0.0)), 0.0, 1.0, 0.1, x0);

  SUBCASE("single trace is unchanged") {
    const auto out = concatenate({first}, {});
    CHECK(out.nodes() == first.nodes());
    CHECK(out.jump_sizes.empty());
  }

  SUBCASE("continuous junction records a zero jump") {
    Vec x1 = first.x.back();
    const auto second =
        integrate_closed_loop(chain, constant_input(1.0, 2.0, 1.0, v1(0.0)), 1.0, 2.0, 0.1, x1);
    const auto out = concatenate({first, second}, {});
    CHECK(out.nodes() == first.nodes() + second.nodes() - 1);
    REQUIRE(out.jump_sizes.size() == 1);
    CHECK(out.jump_sizes[0] == doctest::Approx(0.0).epsilon(1e-12));
    out.validate();
  }

  SUBCASE("re-initialization jump is recorded when authorized") {
    Vec reinit(2);
    reinit << 0.5, 1.0;
    const auto second =
        integrate_closed_loop(chain, constant_input(1.0, 2.0, 1.0, v1(0.0)), 1.0, 2.0, 0.1, reinit);
    const auto out = concatenate({first, second}, {1.0});
    REQUIRE(out.jump_sizes.size() == 1);
    CHECK(out.jump_sizes[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(out.jump_times[0] == doctest::Approx(1.0));
    // Right-open junction: the node at t = 1 holds the re-initialized state.
    const int j = 10;
    CHECK(out.times[j] == doctest::Approx(1.0));
    CHECK(out.x[j](0) == doctest::Approx(0.5));
  }

  SUBCASE("unauthorized jump rejected") {
    Vec reinit(2);
    reinit << 0.5, 1.0;
    const auto second =
        integrate_closed_loop(chain, constant_input(1.0, 2.0, 1.0, v1(0.0)), 1.0, 2.0, 0.1, reinit);
    bool threw = false;
    try {
      concatenate({first, second}, {});
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::TimeMismatch);
    }
    CHECK(threw);
  }

  SUBCASE("junction time gap rejected") {
    const auto second = integrate_closed_loop(chain, constant_input(1.5, 2.0, 0.5, v1(0.0)), 1.5,
                                              2.0, 0.1, first.x.back());
    CHECK_THROWS_AS(concatenate({first, second}, {}), Error);
  }
}

TEST_CASE("dynamics bounds") {
  SUBCASE("analytic values pass through validated") {
    DynamicsBounds in;
    in.f_max = 1.4;
    in.g_max = 0.25;
    in.g_inv_max = 4.0;
    in.g_min = 0.25;
    const auto out = dynamics_bounds_analytic(in);
    CHECK(out.f_max == 1.4);
    CHECK(out.g_max == 0.25);
    CHECK(out.g_inv_max == 4.0);
    CHECK(*out.g_min == 0.25);
    in.g_max = -1.0;
    CHECK_THROWS_AS(dynamics_bounds_analytic(in), Error);
    in.g_max = 0.25;
    in.g_min = 0.5;
    CHECK_THROWS_AS(dynamics_bounds_analytic(in), Error);
  }

  const RefSignal zero_ref{2, 1, [](double, int) { return Vec(Vec::Zero(2)); }};
  const auto design = funnel::design_auxiliary(funnel::make_constant_funnel(1.0),
                                               Vec(Vec::Zero(2)), 2, funnel::DesignMode::Varying,
                                               0.0);

  SUBCASE("identity input map") {
    ControlAffineModel mdl;
    mdl.r = 1;
    mdl.m = 2;
    mdl.f = [](const Vec&) { return Vec(Vec::Zero(2)); };
    mdl.g = [](const Vec&) { return Mat::Identity(2, 2); };
    SamplingSpec spec;
    spec.n = 300;
    const auto b = dynamics_bounds_sampled(mdl, design, zero_ref, spec);
    CHECK(b.f_max == 0.0);
    CHECK(b.g_max == doctest::Approx(1.0));
    CHECK(b.g_inv_max == doctest::Approx(1.0));
    REQUIRE(b.g_min.has_value());
    CHECK(*b.g_min == doctest::Approx(1.0));
  }

  SUBCASE("rotation has no positive-definite symmetric part") {
    ControlAffineModel mdl;
    mdl.r = 1;
    mdl.m = 2;
    mdl.f = [](const Vec&) { return Vec(Vec::Zero(2)); };
    mdl.g = [](const Vec&) { return (Mat(2, 2) << 0.0, 1.0, -1.0, 0.0).finished(); };
    SamplingSpec spec;
    spec.n = 50;
    bool threw = false;
    try {
      dynamics_bounds_sampled(mdl, design, zero_ref, spec);
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::NotPositiveDefinite);
    }
    CHECK(threw);
    spec.want_g_min = false;
    const auto b = dynamics_bounds_sampled(mdl, design, zero_ref, spec);
    CHECK(b.g_max == doctest::Approx(1.0));
    CHECK_FALSE(b.g_min.has_value());
  }
}
