#pragma once

#include <functional>
#include <utility>

#include "polyflow/numcore.hpp"

namespace polyflow {

// Interpolation x_t = gamma(t) x + alpha(t) z between data x and noise z.
// Linear: (1 - t, t) on [0, 1]. Trig: (cos t, sin t) on [0, pi/2] with noise
// scaled by sigma_d.
struct InterpolantPath {
  PathKind kind = PathKind::trig;
  double sigma_d = 1.0;
  // Time-conditioning transform; identity when empty.
  std::function<double(double)> c_noise_fn;

  static InterpolantPath linear() { return {PathKind::linear, 1.0, {}}; }
  static InterpolantPath trig(double sigma_d = 1.0) { return {PathKind::trig, sigma_d, {}}; }

  TimeDomain domain() const { return time_domain(kind); }
  double t_start() const { return domain().hi - kTimeClamp; }
  double t_end() const { return domain().lo + kTimeClamp; }
  // Standard deviation of the prior noise.
  double noise_scale() const { return kind == PathKind::trig ? sigma_d : 1.0; }
};

// Throws DomainError for t outside the closed time domain.
std::pair<double, double> gamma_alpha(const InterpolantPath& path, double t);
// Time derivatives (gamma'(t), alpha'(t)).
std::pair<double, double> gamma_alpha_dot(const InterpolantPath& path, double t);

Vector interpolate(const InterpolantPath& path, const Vector& x, const Vector& z, double t);
Vector velocity_target(const InterpolantPath& path, const Vector& x, const Vector& z, double t);
double c_noise(const InterpolantPath& path, double t);
Vector model_input_scale(const InterpolantPath& path, const Vector& x_t);

// Column-batched variants: each column of x / z is one sample with its own
// time from `t`.
Matrix interpolate_batch(const InterpolantPath& path, const Matrix& x, const Matrix& z,
                         std::span<const double> t);
Matrix velocity_target_batch(const InterpolantPath& path, const Matrix& x, const Matrix& z,
                             std::span<const double> t);
Matrix model_input_scale(const InterpolantPath& path, const Matrix& x_t);

// Pooled standard deviation over all entries of a D x N data matrix.
double estimate_sigma_d(const Matrix& data);

}  // namespace polyflow
