#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "polyflow/errors.hpp"
#include "polyflow/weighting.hpp"

using namespace polyflow;

TEST_CASE("optimal u minimizes the weighted term") {
  RngStream r(1);
  for (int i = 0; i < 500; ++i) {
    const double lam = std::exp(r.uniform(-3, 3)), L = std::exp(r.uniform(-6, 3));
    const double u = optimal_u(lam, L);
    CHECK(u == doctest::Approx(std::log(lam) + std::log(L)));
    const double g = weighted_term(lam, L, u);
    CHECK(std::abs(g - (1.0 + u)) < 1e-12);
    for (double d : {0.01, 0.1, 1.0}) {
      CHECK(weighted_term(lam, L, u + d) > g);
      CHECK(weighted_term(lam, L, u - d) > g);
    }
  }
  CHECK_THROWS_AS(optimal_u(0.0, 1.0), DomainError);
  CHECK_THROWS_AS(optimal_u(1.0, -1.0), DomainError);
}

TEST_CASE("lambda table interpolates and holds its ends") {
  const LambdaFn l = LambdaFn::from_table({{0.1, 1.0}, {1.0, 3.0}});
  CHECK(l(0.01) == 1.0);
  CHECK(l(2.0) == 3.0);
  CHECK(l(0.55) == doctest::Approx(2.0));
  CHECK(LambdaFn::one()(123.0) == 1.0);
  CHECK_THROWS_AS(LambdaFn::from_table({{1.0, 1.0}, {0.5, 1.0}}), InvalidInputError);
  CHECK_THROWS_AS(LambdaFn::from_table({{0.1, -1.0}}), InvalidInputError);
}

TEST_CASE("fit recovers a planted log-polynomial loss landscape") {
  const std::vector<double> truth{-0.5, 0.8, 0.1, -0.02};
  RngStream r(2);
  std::vector<double> sig(64), loss(64);
  for (std::size_t i = 0; i < sig.size(); ++i) {
    sig[i] = std::exp(r.uniform(-5, 0.4));
    loss[i] = std::exp(oracle::poly_naive(truth, std::log(sig[i])));
  }
  PolyWeightState st = PolyWeightState::make(3, 0.99, 0.0);
  st = update_from_batch(st, sig, loss);
  CHECK(st.initialized);
  for (std::size_t k = 0; k < truth.size(); ++k) CHECK(st.coeffs[k] == doctest::Approx(truth[k]).epsilon(1e-6));
  // The fitted u then equals the variational optimum everywhere on the support.
  WeightingScheme w{WeightingKind::variational_poly, LambdaFn::one(), st, {}};
  for (std::size_t i = 0; i < sig.size(); ++i) CHECK(w.u_value(sig[i]) == doctest::Approx(optimal_u(1.0, loss[i])).epsilon(1e-6));
}

TEST_CASE("first fit is taken verbatim, later fits are blended") {
  PolyWeightState st = PolyWeightState::make(1, 0.9, 0.0);
  const PolyCoeffs a({1.0, 2.0}), b({3.0, 0.0});
  st = blend_coeffs(st, a);
  CHECK(st.coeffs == a);
  st = blend_coeffs(st, b);
  CHECK(st.coeffs[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 3.0));
  CHECK(st.coeffs[1] == doctest::Approx(1.8));
  CHECK_THROWS(blend_coeffs(st, PolyCoeffs({1.0, 2.0, 3.0})));
}

TEST_CASE("streaming fit with too few pairs is refused") {
  const PolyWeightState st = PolyWeightState::make(5);
  const std::vector<double> s{0.1, 0.2}, l{1.0, 1.0};
  CHECK_THROWS_AS(fit_log_losses(st, s, l), InsufficientDataError);
  const std::vector<double> bad{0.1, -0.2};
  CHECK_THROWS(fit_log_losses(PolyWeightState::make(1), bad, l));
}

TEST_CASE("losses are floored before the log") {
  PolyWeightState st = PolyWeightState::make(0, 0.5, 0.0);
  const std::vector<double> s{0.1, 0.2}, l{0.0, 0.0};
  st = update_from_batch(st, s, l);
  CHECK(st.coeffs[0] == doctest::Approx(std::log(st.loss_floor)));
}

TEST_CASE("evaluation is clamped to the fitted log-sigma support") {
  PolyWeightState st = PolyWeightState::make(1, 0.5, 0.0);
  const std::vector<double> s{0.1, 1.0}, l{std::exp(1.0 * std::log(0.1)), 1.0};
  st = update_from_batch(st, s, l);
  REQUIRE(st.has_support);
  CHECK(st.support_lo == doctest::Approx(std::log(0.1)));
  CHECK(st.log_loss_estimate(1e-4) == doctest::Approx(st.log_loss_estimate(0.1)));
  st.clamp_to_support = false;
  CHECK(st.log_loss_estimate(1e-4) == doctest::Approx(std::log(1e-4)));
}

TEST_CASE("scheme u values") {
  RngStream r(3);
  WeightingScheme w;
  CHECK(w.u_value(0.5) == 0.0);
  CHECK_THROWS_AS(w.u_value(0.0), DomainError);
  w.kind = WeightingKind::variational_poly;
  w.lambda = LambdaFn::from_table({{0.1, 2.0}, {1.0, 2.0}});
  CHECK(w.u_value(0.5) == doctest::Approx(std::log(2.0)));  // before the first fit
  w.kind = WeightingKind::mlp;
  w.mlp = MlpWeightState(8, 16, r);
  CHECK(w.u_value(0.5) == 0.0);  // zero output layer
  const std::vector<double> sig{0.1, 0.5};
  CHECK(w.u_values(sig).size() == 2);
  CHECK(w.mlp.features(sig).rows() == 16);
}
