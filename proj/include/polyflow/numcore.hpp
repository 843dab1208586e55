#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "polyflow/rng.hpp"

namespace polyflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class PathKind { linear, trig };

// Endpoint clamp applied to sampled times and sampler grids.
inline constexpr double kTimeClamp = 1e-4;

struct TimeDomain {
  double lo = 0.0;
  double hi = 1.0;
};

TimeDomain time_domain(PathKind kind);

// Polynomial coefficients, index k multiplies x^k.
struct PolyCoeffs {
  std::vector<double> coeffs{0.0};

  PolyCoeffs() = default;
  explicit PolyCoeffs(std::vector<double> c);
  static PolyCoeffs zeros(int degree);

  int degree() const { return static_cast<int>(coeffs.size()) - 1; }
  double operator[](std::size_t k) const { return coeffs[k]; }

  friend bool operator==(const PolyCoeffs&, const PolyCoeffs&) = default;
};

// X(i, j) = xs[i]^j.
Matrix vandermonde(std::span<const double> xs, int degree);

// Minimizer of |Xw - y|^2 + ridge * |w|^2, solved by column-scaled QR of
// the augmented system [X; sqrt(ridge) I].
//
// Throws InsufficientDataError when ridge == 0 and fewer than degree + 1
// points are given, and DegenerateFitError when the system is numerically
// rank deficient.
PolyCoeffs least_squares_fit(std::span<const double> xs, std::span<const double> ys, int degree,
                             double ridge);

// Horner evaluation.
double poly_eval(const PolyCoeffs& c, double x);

enum class TimeSamplerKind { uniform, logit_normal };

struct TimeSampler {
  TimeSamplerKind kind = TimeSamplerKind::logit_normal;
  double p_mean = -0.4;
  double p_std = 1.6;
  PathKind path = PathKind::trig;
  double sigma_d = 1.0;
};

// Maps a standard-normal-scaled draw n ~ N(p_mean, p_std^2) onto the path's
// time domain: sigmoid(n) for linear, arctan(exp(n) / sigma_d) for trig.
// The result is clamped to [lo + kTimeClamp, hi - kTimeClamp].
double logit_normal_time(const TimeSampler& s, double n);

std::vector<double> sample_time(const TimeSampler& s, RngStream& rng, std::size_t count);

}  // namespace polyflow
