#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "polyflow/errors.hpp"
#include "polyflow/nn.hpp"

using namespace polyflow;

namespace {

void randomize(Mlp& net, RngStream& r, double scale = 0.5) {
  std::vector<double> p(net.num_params());
  for (auto& v : p) v = scale * r.normal();
  net.set_params(p);
}

Matrix randn(int rows, int cols, RngStream& r) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = r.normal();
  return m;
}

}  // namespace

TEST_CASE("fourier frequencies span 1 to 1000 and the embedding has constant norm") {
  const auto f = fourier_frequencies(16);
  REQUIRE(f.size() == 16);
  CHECK(f.front() == doctest::Approx(1.0));
  CHECK(f.back() == doctest::Approx(1000.0));
  for (std::size_t k = 1; k < f.size(); ++k) CHECK(f[k] / f[k - 1] == doctest::Approx(f[1] / f[0]));
  for (double t : {0.0, 0.1, 0.77, 1.5}) {
    const Vector e = fourier_embed(t, 16);
    REQUIRE(e.size() == 32);
    CHECK(e.squaredNorm() == doctest::Approx(16.0));
    CHECK(e(0) == doctest::Approx(std::sin(t)));
    CHECK(e(16) == doctest::Approx(std::cos(t)));
  }
}

TEST_CASE("zero-initialized output layer gives zero output") {
  RngStream r(1);
  Mlp net({3, {16, 16}, 2}, r, true);
  const Matrix out = net.forward(randn(3, 5, r));
  CHECK(out.norm() == 0.0);
  Mlp net2({3, {16}, 2}, r, false);
  CHECK(net2.forward(randn(3, 5, r)).norm() > 0.0);
}

TEST_CASE("mlp backward matches finite differences") {
  RngStream r(2);
  Mlp net({3, {8, 8}, 2}, r);
  randomize(net, r);
  const Matrix x = randn(3, 4, r);
  const Matrix w = randn(2, 4, r);
  MlpCache cache;
  net.forward(x, &cache);
  std::vector<double> grad(net.num_params(), 0.0);
  Matrix gin;
  net.backward(cache, w, grad, &gin);
  Mlp probe = net;
  const auto f = [&](const std::vector<double>& p) {
    probe.set_params(p);
    return (probe.forward(x).array() * w.array()).sum();
  };
  const std::vector<double> p0(net.params().begin(), net.params().end());
  CHECK(oracle::max_rel_error(grad, oracle::numeric_grad(p0, f)) < 1e-6);
  // Input gradient.
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      Matrix xp = x, xm = x;
      xp(i, j) += 1e-6;
      xm(i, j) -= 1e-6;
      const double fd = ((net.forward(xp) - net.forward(xm)).array() * w.array()).sum() / 2e-6;
      CHECK(gin(i, j) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("backward accumulates into the gradient buffer") {
  RngStream r(3);
  Mlp net({2, {4}, 1}, r);
  randomize(net, r);
  const Matrix x = randn(2, 3, r), w = randn(1, 3, r);
  MlpCache c;
  net.forward(x, &c);
  std::vector<double> g1(net.num_params(), 0.0), g2(net.num_params(), 0.0);
  net.backward(c, w, g1);
  net.backward(c, w, g2);
  net.backward(c, w, g2);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(2 * g1[i]));
}

TEST_CASE("stale caches are rejected") {
  RngStream r(4);
  Mlp net({2, {4}, 1}, r);
  MlpCache c;
  net.forward(randn(2, 3, r), &c);
  net.mutable_params()[0] += 1.0;
  std::vector<double> g(net.num_params(), 0.0);
  CHECK_THROWS_AS(net.backward(c, Matrix::Ones(1, 3), g), ContractViolation);
  Mlp other({2, {4}, 1}, r);
  MlpCache c2;
  other.forward(randn(2, 3, r), &c2);
  CHECK_THROWS_AS(net.backward(c2, Matrix::Ones(1, 3), g), ContractViolation);
}

TEST_CASE("denoiser gradient matches finite differences") {
  RngStream r(5);
  Denoiser d(3, {8, 8}, 4, r);
  randomize(d.net(), r);
  const Matrix x = randn(3, 5, r), w = randn(3, 5, r);
  const std::vector<double> c{0.1, 0.4, 0.7, 1.0, 1.3};
  MlpCache cache;
  d.forward(x, c, &cache);
  std::vector<double> g(d.net().num_params(), 0.0);
  d.backward(cache, w, g);
  Denoiser probe = d;
  const auto f = [&](const std::vector<double>& p) {
    probe.net().set_params(p);
    return (probe.forward(x, c).array() * w.array()).sum();
  };
  const std::vector<double> p0(d.net().params().begin(), d.net().params().end());
  CHECK(oracle::max_rel_error(g, oracle::numeric_grad(p0, f)) < 1e-6);
  // A scalar time broadcasts to every column.
  const std::vector<double> same(5, 0.4);
  CHECK((d.forward(x, 0.4) - d.forward(x, same)).norm() == 0.0);
}

TEST_CASE("adam step matches the bias-corrected update") {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, -0.1};
  AdamState st = AdamState::for_size(2);
  adam_step(p, g, st, 0.1);
  // First step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) up to eps.
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.1 / (0.1 + 1e-8)));
  CHECK(st.step == 1);
  const std::vector<double> g2{0.2, 0.3};
  const double m0 = 0.1 * 0.5 * 0.9 + 0.1 * 0.2, v0 = 0.001 * 0.25 * 0.999 + 0.001 * 0.04;
  const double expect = p[0] - 0.1 * (m0 / (1 - 0.81)) / (std::sqrt(v0 / (1 - 0.999 * 0.999)) + 1e-8);
  adam_step(p, g2, st, 0.1);
  CHECK(p[0] == doctest::Approx(expect));
}

TEST_CASE("adam refuses non-finite gradients without touching state") {
  std::vector<double> p{1.0, 2.0};
  AdamState st = AdamState::for_size(2);
  const std::vector<double> bad{0.1, NAN};
  CHECK_THROWS_AS(adam_step(p, bad, st, 0.1), DivergenceError);
  CHECK(p[0] == 1.0);
  CHECK(st.step == 0);
  CHECK(st.m[0] == 0.0);
}

TEST_CASE("parameter ema follows the geometric update") {
  const std::vector<double> p0{1.0, 2.0};
  EmaParams e = EmaParams::from(p0, 0.9);
  const std::vector<double> p1{3.0, 0.0};
  e.update(p1);
  CHECK(e.shadow[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 3.0));
  CHECK(e.shadow[1] == doctest::Approx(1.8));
}
