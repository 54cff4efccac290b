#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "fmpc/funnel.hpp"

using namespace fmpc;
using namespace fmpc::funnel;

namespace {

Vec v1(double a) {
  Vec v(1);
  v << a;
  return v;
}

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// Left-rectangle quadrature of the boundary penalty along a path.
ExtendedCost penalty_quadrature(const ScalarFn& path, const ScalarFn& psi, int n) {
  ExtendedCost q = ExtendedCost::finite(0.0);
  const double h = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    q += h * funnel_penalty(i * h, v1(path(i * h)), psi);
    if (q.infinite) return q;
  }
  return q;
}

}  // namespace

TEST_CASE("grid range statistics") {
  const auto s = grid_inf_sup([](double t) { return std::sin(t); }, 0.0, 6.2832, 20000);
  CHECK(s.inf == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(s.sup == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("decay pair derivation") {
  SUBCASE("decaying exponential boundary") {
    const auto ab = derive_alpha_beta(
        [](double t) { return 20.0 * std::exp(-2.0 * t) + 4.0; },
        [](double t) { return -40.0 * std::exp(-2.0 * t); }, 0.0, 20.0);
    CHECK(ab.alpha == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(ab.beta == doctest::Approx(40.0).epsilon(1e-12));
  }
  SUBCASE("analytic exponential constructor") {
    const auto f = make_exponential_funnel(20.0, 2.0, 4.0, 0.0, 4.0);
    CHECK(f.alpha == doctest::Approx(20.0));
    CHECK(f.beta == doctest::Approx(40.0));
    CHECK(f.sup_psi == doctest::Approx(24.0));
    CHECK(f.inf_psi == doctest::Approx(4.0 + 20.0 * std::exp(-8.0)));
  }
  SUBCASE("constant boundary") {
    const auto ab = derive_alpha_beta([](double) { return 3.0; }, [](double) { return 0.0; },
                                      0.0, 5.0);
    CHECK(ab.alpha == doctest::Approx(1.0));
    CHECK(ab.beta == doctest::Approx(3.0));
    const auto f = make_constant_funnel(3.0);
    CHECK(f.alpha == 1.0);
    CHECK(f.beta == 3.0);
    CHECK(f.inf_psi == 3.0);
    CHECK(f.sup_psi == 3.0);
  }
  SUBCASE("non-positive boundary rejected") {
    bool threw = false;
    try {
      derive_alpha_beta([](double t) { return 1.0 - t; }, [](double) { return -1.0; }, 0.0, 2.0);
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::NonPositiveFunnel);
    }
    CHECK(threw);
    CHECK_THROWS_AS(make_constant_funnel(0.0), Error);
  }
}

TEST_CASE("decay pair admissibility") {
  const ScalarFn psi = [](double t) { return 5.0 * std::exp(-2.0 * t) + 0.1; };
  const ScalarFn psi_dot = [](double t) { return -10.0 * std::exp(-2.0 * t); };
  // (2, 0.2) satisfies the decay inequality with equality everywhere.
  CHECK(admissible_alpha_beta(psi, psi_dot, 2.0, 0.2, 0.0, 10.0));
  CHECK_FALSE(admissible_alpha_beta(psi, psi_dot, 2.0, 0.3, 0.0, 10.0));
  CHECK_FALSE(admissible_alpha_beta(psi, psi_dot, 0.5, 0.2, 0.0, 10.0));
  // The derived pair is itself admissible.
  const auto ab = derive_alpha_beta(psi, psi_dot, 0.0, 10.0);
  CHECK(admissible_alpha_beta(psi, psi_dot, ab.alpha, ab.beta, 0.0, 10.0));
  const auto ab2 = derive_alpha_beta(
      [](double t) { return 2.0 + std::sin(t); }, [](double t) { return std::cos(t); }, 0.0, 8.0);
  CHECK(admissible_alpha_beta([](double t) { return 2.0 + std::sin(t); },
                              [](double t) { return std::cos(t); }, ab2.alpha, ab2.beta, 0.0,
                              8.0));
}

TEST_CASE("auxiliary error variables") {
  SUBCASE("two derivatives, scalar output") {
    const auto xs = xi(v2(2.0 / 3.0, 0.0), {3.0}, 1);
    REQUIRE(xs.size() == 2);
    CHECK(xs[0](0) == doctest::Approx(2.0 / 3.0));
    CHECK(xs[1](0) == doctest::Approx(2.0));
  }
  SUBCASE("three derivatives") {
    Vec z(3);
    z << 1.0, 1.0, 1.0;
    const auto xs = xi(z, {1.0, 2.0}, 1);
    CHECK(xs[0](0) == doctest::Approx(1.0));
    CHECK(xs[1](0) == doctest::Approx(2.0));
    CHECK(xs[2](0) == doctest::Approx(6.0));
  }
  SUBCASE("vector output blocks") {
    Vec z(4);
    z << 1.0, 0.0, 0.0, 1.0;
    const auto xs = xi(z, {3.0}, 2);
    CHECK(xs[1](0) == doctest::Approx(3.0));
    CHECK(xs[1](1) == doctest::Approx(1.0));
  }
  SUBCASE("stacked matrix") {
    CHECK((xi_matrix({}, 1, 2) - Mat::Identity(2, 2)).norm() == 0.0);
    const Mat s2 = xi_matrix({3.0}, 2, 1);
    CHECK(s2(0, 0) == 1.0);
    CHECK(s2(0, 1) == 0.0);
    CHECK(s2(1, 0) == 3.0);
    CHECK(s2(1, 1) == 1.0);
    const Mat s3 = xi_matrix({1.0, 2.0}, 3, 1);
    CHECK(s3(2, 0) == doctest::Approx(2.0));
    CHECK(s3(2, 1) == doctest::Approx(3.0));
    CHECK(s3(2, 2) == doctest::Approx(1.0));
  }
  SUBCASE("matrix consistency and linearity") {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> U(-2.0, 2.0);
    const std::vector<double> k{1.7, 0.4, 2.3};
    const int r = 4, m = 2;
    const Mat S = xi_matrix(k, r, m);
    for (int rep = 0; rep < 20; ++rep) {
      Vec z(r * m), w(r * m);
      for (int i = 0; i < r * m; ++i) {
        z(i) = U(rng);
        w(i) = U(rng);
      }
      const auto xs = xi(z, k, m);
      Vec stacked(r * m);
      for (int i = 0; i < r; ++i) stacked.segment(i * m, m) = xs[i];
      CHECK((stacked - S * z).norm() <= 1e-12);
      const auto xz = xi(z, k, m);
      const auto xw = xi(w, k, m);
      const auto xzw = xi(1.5 * z - 0.5 * w, k, m);
      for (int i = 0; i < r; ++i)
        CHECK((xzw[i] - 1.5 * xz[i] + 0.5 * xw[i]).norm() <= 1e-12);
    }
  }
  SUBCASE("shifted stack gives the chain derivative") {
    // For a pure chain (z_dot_i = z_{i+1}): xi_i_dot = xi_{i+1} - k_i xi_i.
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> U(-2.0, 2.0);
    const std::vector<double> k{2.0, 0.7, 1.1};
    Vec z(4);
    for (int i = 0; i < 4; ++i) z(i) = U(rng);
    const auto xs = xi(z, k, 1);
    const auto xd = xi_shift(z, k, 1);
    REQUIRE(xd.size() == 3);
    for (int i = 0; i < 3; ++i)
      CHECK((xd[i] - (xs[i + 1] - k[i] * xs[i])).norm() <= 1e-12);
  }
  SUBCASE("dimension checks") {
    CHECK_THROWS_AS(xi(v2(1.0, 2.0), {1.0, 2.0}, 1), Error);
    CHECK_THROWS_AS(xi_matrix({1.0}, 3, 1), Error);
  }
}

TEST_CASE("auxiliary funnel design, pinned parameters") {
  const auto f =
      make_exponential_funnel(5.0, 2.0, 0.1, 0.0, 10.0, AlphaBeta{2.0, 0.2});
  DesignOverrides ov;
  ov.gamma_margin = 0.2;
  ov.gains = std::vector<double>{14.0};
  const auto d = design_auxiliary(f, v2(-1.0, 0.0), 1, DesignMode::Varying, 0.0, ov);
  REQUIRE(d.r == 2);
  REQUIRE(d.k.size() == 1);
  CHECK(d.k[0] == 14.0);
  CHECK(d.gamma_margin == 0.2);
  for (double t : {0.0, 0.5, 1.0, 3.0}) {
    CHECK(d.psi_list[1].value(t) ==
          doctest::Approx(70.0 * std::exp(-2.0 * t) + 0.5).epsilon(1e-12));
    CHECK(d.psi_list[1].deriv(t) == doctest::Approx(-140.0 * std::exp(-2.0 * t)).epsilon(1e-12));
  }
  CHECK(d.psi_list[1].sup == doctest::Approx(70.5));
  CHECK(d.psi_list[1].inf == doctest::Approx(0.5));
  CHECK(in_D(0.0, v2(-1.0, 0.0), d).inside);
}

TEST_CASE("auxiliary funnel design, derived parameters") {
  const auto f =
      make_exponential_funnel(5.0, 2.0, 0.1, 0.0, 10.0, AlphaBeta{2.0, 0.2});
  const auto d = design_auxiliary(f, v2(-1.0, 0.0), 1, DesignMode::Varying, 0.0);
  // Tight margin: ||z_1|| = gamma^2 psi(0) => gamma = sqrt(1/5.1).
  CHECK(d.gamma_margin == doctest::Approx(std::sqrt(1.0 / 5.1)).epsilon(1e-4));
  const double g = d.gamma_margin;
  CHECK(d.k[0] == doctest::Approx(2.0 * (2.0 + 1.0 / g) / (1.0 - g)).epsilon(1e-10));
  CHECK(in_D(0.0, v2(-1.0, 0.0), d).inside);
  SUBCASE("zero initial error settles on the grid floor") {
    const auto d0 = design_auxiliary(f, v2(0.0, 0.0), 1, DesignMode::Varying, 0.0);
    CHECK(d0.gamma_margin == doctest::Approx(0.1));
    CHECK(in_D(0.0, v2(0.0, 0.0), d0).inside);
  }
}

TEST_CASE("auxiliary funnel design, simplified mode") {
  const auto f = make_constant_funnel(1.0 / 6.0);
  const auto d = design_auxiliary(f, v2(0.04, 0.0), 1, DesignMode::Simplified, 0.0);
  REQUIRE(d.k.size() == 1);
  CHECK(d.k[0] == doctest::Approx(3.0));  // alpha + 2
  CHECK(d.psi_list[1].value(0.0) == doctest::Approx(1.0 / 6.0));
  CHECK(d.psi_list[1].value(4.0) == doctest::Approx(1.0 / 6.0));
  SUBCASE("later-stage violation reports its index") {
    bool threw = false;
    try {
      design_auxiliary(f, v2(0.1, 0.2), 1, DesignMode::Simplified, 0.0);
    } catch (const Error& e) {
      threw = true;
      CHECK(e.code() == ErrorCode::InitialErrorOutsideFunnel);
      CHECK(e.index() == 2);
    }
    CHECK(threw);
  }
  SUBCASE("output error outside the funnel reports index 1") {
    bool threw = false;
    try {
      design_auxiliary(make_constant_funnel(1.0), v2(1.5, 0.0), 1, DesignMode::Simplified, 0.0);
    } catch (const Error& e) {
      threw = true;
      CHECK(e.index() == 1);
    }
    CHECK(threw);
  }
}

TEST_CASE("relative degree one design is trivial") {
  const auto d = design_auxiliary(make_constant_funnel(1.0), v1(0.3), 1, DesignMode::Varying, 0.0);
  CHECK(d.r == 1);
  CHECK(d.k.empty());
  CHECK(d.psi_list.size() == 1);
  CHECK(in_D(0.0, v1(0.3), d).inside);
  CHECK_FALSE(in_D(0.0, v1(1.0), d).inside);
}

TEST_CASE("stage cost and penalties") {
  const ScalarFn two = [](double) { return 2.0; };
  CHECK(funnel_penalty(0.0, v1(1.0), two).value == doctest::Approx(1.0 / 3.0));
  CHECK(funnel_penalty(0.0, v1(0.0), two).value == doctest::Approx(0.0));
  CHECK(funnel_penalty(0.0, v1(2.0), two).infinite);
  CHECK(funnel_penalty(0.0, v1(2.5), two).infinite);
  // Non-strict closure admits the boundary itself.
  CHECK(quadratic_penalty_nonstrict(0.0, v1(2.0), two).value == doctest::Approx(4.0));
  CHECK(quadratic_penalty_nonstrict(0.0, v1(2.0000001), two).infinite);

  const auto c = stage_cost(0.0, v1(1.0), v1(2.0), two, 0.1);
  CHECK(c.value == doctest::Approx(1.0 / 3.0 + 0.4));
  const auto co = stage_cost(0.0, v1(1.0), v1(2.0), two, 0.1, v1(3.0));
  CHECK(co.value == doctest::Approx(1.0 / 3.0 + 0.1));
  const auto cq = stage_cost(0.0, v1(5.0), v1(0.0), two, 1.0, {},
                             StageCostKind::QuadraticUnconstrained);
  CHECK_FALSE(cq.infinite);
  CHECK(cq.value == doctest::Approx(25.0));
  // Infinity absorbs the control term.
  CHECK(stage_cost(0.0, v1(2.0), v1(100.0), two, 0.1).infinite);
}

TEST_CASE("containment with hand-built boundaries") {
  AuxiliaryDesign d;
  d.r = 2;
  d.m = 1;
  d.k = {3.0};
  d.psi_list.push_back(BoundaryFn{[](double) { return 1.0; }, [](double) { return 0.0; }, 1.0, 1.0});
  d.psi_list.push_back(
      BoundaryFn{[](double) { return 1.0 / 6.0; }, [](double) { return 0.0; }, 1.0 / 6.0, 1.0 / 6.0});
  const auto bad = in_D(0.0, v2(2.0 / 3.0, 0.0), d);
  CHECK_FALSE(bad.inside);
  CHECK(bad.margins[0] == doctest::Approx(1.0 / 3.0));
  CHECK(bad.margins[1] == doctest::Approx(1.0 / 6.0 - 2.0));
  const auto good = in_D(0.0, v2(0.0, 0.0), d);
  CHECK(good.inside);
  CHECK(good.margins[0] == doctest::Approx(1.0));
  CHECK(good.margins[1] == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("feedback error chain") {
  const auto gains = GainSpec::known_direction();
  CHECK(gains.gamma(0.5) == doctest::Approx(2.0));
  CHECK(gains.N(gains.gamma(0.5)) == doctest::Approx(-2.0));
  SUBCASE("recursion values") {
    const auto fe = fc_errors(1.0, v2(0.5, 0.0), 1, gains);
    REQUIRE(fe.all_defined(2));
    CHECK(fe.e[0](0) == doctest::Approx(0.5));
    CHECK(fe.e[1](0) == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(fe.domain_violation.has_value());
  }
  SUBCASE("domain violation blocks the recursion") {
    const auto fe = fc_errors(1.0, v2(1.5, 0.0), 1, gains);
    CHECK(fe.e.size() == 1);
    REQUIRE(fe.domain_violation.has_value());
    CHECK(*fe.domain_violation == 1);
    CHECK_FALSE(fe.all_defined(2));
  }
  SUBCASE("last entry may exceed one") {
    const auto fe = fc_errors(1.0, v2(0.9, 0.0), 1, gains);
    CHECK(fe.all_defined(2));
    CHECK(fe.e[1](0) == doctest::Approx(0.9 / 0.19));
  }
  SUBCASE("epsilon flags") {
    const auto fe = fc_errors(1.0, v2(0.5, 0.0), 1, gains, 0.6);
    REQUIRE(fe.in_eps.size() == 2);
    CHECK(fe.in_eps[0]);
    CHECK_FALSE(fe.in_eps[1]);
  }
  SUBCASE("activation threshold") {
    GainSpec g = GainSpec::known_direction();
    g.s_crit = 0.4;
    CHECK(g.activation(0.3) == 0.0);
    CHECK(g.activation(0.9) == doctest::Approx(0.5));
    CHECK(GainSpec::known_direction().activation(0.9) == 1.0);
  }
}

TEST_CASE("penalty dichotomy along random paths") {
  std::mt19937 rng(12345);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const ScalarFn one = [](double) { return 1.0; };
  for (int rep = 0; rep < 100; ++rep) {
    double c[4], ph[4];
    for (int j = 0; j < 4; ++j) {
      c[j] = U(rng);
      ph[j] = U(rng) * 3.14159;
    }
    auto raw = [&](double t) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) s += c[j] * std::sin((j + 1) * t + ph[j]);
      return s;
    };
    double maxp = 0.0;
    for (int i = 0; i <= 4000; ++i) maxp = std::max(maxp, std::abs(raw(i / 4000.0)));
    if (maxp < 1e-6) continue;

    // Strictly inside: quadrature stays finite and converges under refinement.
    {
      const double s = 0.95 / maxp;
      ScalarFn path = [raw, s](double t) { return s * raw(t); };
      const auto q400 = penalty_quadrature(path, one, 400);
      const auto q800 = penalty_quadrature(path, one, 800);
      CHECK_FALSE(q400.infinite);
      CHECK_FALSE(q800.infinite);
      CHECK(std::abs(q800.value - q400.value) <= 0.05 * (1.0 + q800.value));
    }

    // Leaving the funnel on an interval: a fine enough grid certifies infinity.
    {
      const double s = 1.2 / maxp;
      ScalarFn path = [raw, s](double t) { return s * raw(t); };
      double slope = 0.0;
      for (int j = 0; j < 4; ++j) slope += s * std::abs(c[j]) * (j + 1);
      const int n = std::min(1000000, std::max(800, static_cast<int>(8.0 * slope / 0.2)));
      CHECK(penalty_quadrature(path, one, n).infinite);
      CHECK(penalty_quadrature(path, one, 2 * n).infinite);
    }
  }
}
