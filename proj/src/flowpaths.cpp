#include "polyflow/flowpaths.hpp"

#include <cmath>
#include <string>

#include "polyflow/errors.hpp"

namespace polyflow {
namespace {

void check_time(const InterpolantPath& path, double t) {
  const TimeDomain dom = path.domain();
  if (!(t >= dom.lo && t <= dom.hi))
    throw DomainError("time " + std::to_string(t) + " outside path domain [" +
                      std::to_string(dom.lo) + ", " + std::to_string(dom.hi) + "]");
}

void check_shapes(Eigen::Index xr, Eigen::Index xc, Eigen::Index zr, Eigen::Index zc) {
  if (xr != zr || xc != zc) throw InvalidInputError("data and noise dimensions differ");
}

}  // namespace

std::pair<double, double> gamma_alpha(const InterpolantPath& path, double t) {
  check_time(path, t);
  if (path.kind == PathKind::linear) return {1.0 - t, t};
  return {std::cos(t), std::sin(t)};
}

std::pair<double, double> gamma_alpha_dot(const InterpolantPath& path, double t) {
  check_time(path, t);
  if (path.kind == PathKind::linear) return {-1.0, 1.0};
  return {-std::sin(t), std::cos(t)};
}

Vector interpolate(const InterpolantPath& path, const Vector& x, const Vector& z, double t) {
  check_shapes(x.rows(), x.cols(), z.rows(), z.cols());
  const auto [g, a] = gamma_alpha(path, t);
  return g * x + a * z;
}

Vector velocity_target(const InterpolantPath& path, const Vector& x, const Vector& z, double t) {
  check_shapes(x.rows(), x.cols(), z.rows(), z.cols());
  if (path.kind == PathKind::linear) {
    check_time(path, t);
    return z - x;
  }
  const auto [gd, ad] = gamma_alpha_dot(path, t);
  return gd * x + ad * z;
}

double c_noise(const InterpolantPath& path, double t) {
  return path.c_noise_fn ? path.c_noise_fn(t) : t;
}

Vector model_input_scale(const InterpolantPath& path, const Vector& x_t) {
  return path.kind == PathKind::trig ? Vector(x_t / path.sigma_d) : x_t;
}

Matrix model_input_scale(const InterpolantPath& path, const Matrix& x_t) {
  return path.kind == PathKind::trig ? Matrix(x_t / path.sigma_d) : x_t;
}

Matrix interpolate_batch(const InterpolantPath& path, const Matrix& x, const Matrix& z,
                         std::span<const double> t) {
  check_shapes(x.rows(), x.cols(), z.rows(), z.cols());
  if (static_cast<Eigen::Index>(t.size()) != x.cols())
    throw InvalidInputError("one time per sample required");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto [g, a] = gamma_alpha(path, t[static_cast<std::size_t>(j)]);
    out.col(j) = g * x.col(j) + a * z.col(j);
  }
  return out;
}

Matrix velocity_target_batch(const InterpolantPath& path, const Matrix& x, const Matrix& z,
                             std::span<const double> t) {
  check_shapes(x.rows(), x.cols(), z.rows(), z.cols());
  if (static_cast<Eigen::Index>(t.size()) != x.cols())
    throw InvalidInputError("one time per sample required");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto [gd, ad] = gamma_alpha_dot(path, t[static_cast<std::size_t>(j)]);
    out.col(j) = gd * x.col(j) + ad * z.col(j);
  }
  return out;
}

double estimate_sigma_d(const Matrix& data) {
  if (data.size() < 2) return 1.0;
  const double mean = data.mean();
  const double var = (data.array() - mean).square().sum() / static_cast<double>(data.size() - 1);
  return var > 0.0 ? std::sqrt(var) : 1.0;
}

}  // namespace polyflow
