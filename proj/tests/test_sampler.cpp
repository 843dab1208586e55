#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "polyflow/errors.hpp"
#include "polyflow/sampler.hpp"

using namespace polyflow;

namespace {

ModelField gaussian_field(const oracle::GaussianField& g) {
  return [g](const Matrix& x, double c) { return g.field(x, c); };
}

double integration_error(SamplerMethod m, const oracle::GaussianField& g, const InterpolantPath& path, int n) {
  Matrix x0(1, 3);
  x0 << 0.7, -1.3, 2.1;
  const Matrix got = integrate(gaussian_field(g), path, {m, n}, x0);
  const Matrix want = g.exact(x0, path.t_start(), path.t_end());
  return (got - want).lpNorm<Eigen::Infinity>();
}

}  // namespace

TEST_CASE("euler is first order and heun second order on the gaussian field") {
  for (PathKind k : {PathKind::linear, PathKind::trig}) {
    CAPTURE(static_cast<int>(k));
    oracle::GaussianField g{k, 0.5, 1.3};
    const InterpolantPath path = k == PathKind::linear ? InterpolantPath::linear() : InterpolantPath::trig(1.3);
    std::vector<double> hs, e_euler, e_heun;
    for (int n : {16, 32, 64, 128, 256}) {
      hs.push_back(1.0 / n);
      e_euler.push_back(integration_error(SamplerMethod::euler, g, path, n));
      e_heun.push_back(integration_error(SamplerMethod::heun, g, path, n));
    }
    CHECK(oracle::loglog_slope(hs, e_euler) == doctest::Approx(1.0).epsilon(0.2));
    CHECK(oracle::loglog_slope(hs, e_heun) == doctest::Approx(2.0).epsilon(0.15));
  }
}

TEST_CASE("exact trig step transports point-mass data in a single step") {
  const double sd = 1.7;
  const auto path = InterpolantPath::trig(sd);
  Vector x0(2);
  x0 << 0.4, -1.1;
  // For a point mass the ideal model-space output at (x, t) is the velocity
  // implied by solving x = cos t x0 + sin t sd z for z, divided by sd.
  const ModelField field = [&](const Matrix& x_in, double t) {
    Matrix out(x_in.rows(), x_in.cols());
    for (Eigen::Index j = 0; j < x_in.cols(); ++j) {
      const Vector x = sd * x_in.col(j);
      const Vector z = (x - std::cos(t) * x0) / (std::sin(t) * sd);
      out.col(j) = (-std::sin(t) * x0 + std::cos(t) * sd * z) / sd;
    }
    return out;
  };
  Vector z(2);
  z << 0.3, 0.9;
  const double t0 = path.t_start(), t1 = path.t_end();
  Matrix x(2, 1);
  x.col(0) = std::cos(t0) * x0 + std::sin(t0) * sd * z;
  const Matrix one = step_trig_exact(field, path, x, t0, t1);
  const Vector want = std::cos(t1) * x0 + std::sin(t1) * sd * z;
  CHECK((one.col(0) - want).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK_THROWS_AS(step_trig_exact(field, InterpolantPath::linear(), x, 0.9, 0.1), ConfigError);
}

TEST_CASE("time grid runs from the noise end to the data end") {
  const auto g = time_grid(InterpolantPath::trig(), 4);
  REQUIRE(g.size() == 5);
  CHECK(g.front() == doctest::Approx(InterpolantPath::trig().t_start()));
  CHECK(g.back() == doctest::Approx(InterpolantPath::trig().t_end()));
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] < g[i - 1]);
  CHECK_THROWS(time_grid(InterpolantPath::trig(), 0));
}

TEST_CASE("velocity scales the trig model by sigma_d") {
  const ModelField f = [](const Matrix& x, double) { return x; };
  Matrix x(1, 1);
  x << 2.0;
  CHECK(velocity(f, InterpolantPath::trig(2.0), x, 0.5)(0, 0) == doctest::Approx(2.0));
  CHECK(velocity(f, InterpolantPath::linear(), x, 0.5)(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("conditioned coordinates end exactly at their values") {
  oracle::GaussianField g{PathKind::trig, 0.5, 1.0};
  const ModelField f = [g](const Matrix& x, double c) { return g.field(x, c); };
  for (auto mode : {ConditioningMode::interpolated, ConditioningMode::exact}) {
    Conditioning cond{{0, 2}, {0.25, -0.75}, mode};
    RngStream r(1);
    const Matrix s = sample(f, InterpolantPath::trig(), {SamplerMethod::euler, 5}, r, 4, 3, cond);
    for (Eigen::Index j = 0; j < 4; ++j) {
      CHECK(s(0, j) == 0.25);
      CHECK(s(2, j) == -0.75);
    }
  }
}

TEST_CASE("sampling from the gaussian field reproduces its variance") {
  oracle::GaussianField g{PathKind::trig, 0.5, 1.0};
  const ModelField f = [g](const Matrix& x, double c) { return g.field(x, c); };
  RngStream r(2);
  const Matrix s = sample(f, InterpolantPath::trig(), {SamplerMethod::heun, 20}, r, 20000, 1);
  const double var = s.array().square().mean();
  CHECK(std::sqrt(var) == doctest::Approx(0.5).epsilon(0.03));
}

TEST_CASE("sampling is deterministic per seed") {
  const ModelField f = [](const Matrix& x, double) { return -0.5 * x; };
  RngStream a(3), b(3);
  CHECK((sample(f, InterpolantPath::trig(), {}, a, 5, 2) - sample(f, InterpolantPath::trig(), {}, b, 5, 2)).norm() == 0.0);
}

TEST_CASE("non-finite states raise a divergence error") {
  const ModelField f = [](const Matrix& x, double) { return Matrix::Constant(x.rows(), x.cols(), NAN); };
  RngStream r(4);
  CHECK_THROWS_AS(sample(f, InterpolantPath::trig(), {}, r, 2, 2), DivergenceError);
}
