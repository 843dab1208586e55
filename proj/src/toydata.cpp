#include "polyflow/toydata.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "polyflow/errors.hpp"

namespace polyflow {

Matrix gaussian_1d(std::size_t n, RngStream& rng, double mean, double sd) {
  Matrix x(1, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < x.cols(); ++j) x(0, j) = rng.normal(mean, sd);
  return x;
}

Eigen::Vector2d EightGaussians::center(int k) const {
  const double a = k * std::numbers::pi / 4.0;
  return {radius * std::cos(a), radius * std::sin(a)};
}

Matrix EightGaussians::sample(std::size_t n, RngStream& rng) const {
  if (!(radius > 0.0) || !(cluster_std > 0.0)) throw InvalidInputError("eight gaussians: radius and std must be positive");
  Matrix x(2, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Eigen::Vector2d c = center(static_cast<int>(rng.index(8)));
    x(0, j) = c.x() + cluster_std * rng.normal();
    x(1, j) = c.y() + cluster_std * rng.normal();
  }
  return x;
}

ModeCoverage mode_coverage(const EightGaussians& spec, const Matrix& samples, double k_std) {
  if (samples.rows() != 2 || samples.cols() == 0) throw InvalidInputError("mode_coverage: expected a non-empty 2 x n matrix");
  std::array<bool, 8> hit{};
  Eigen::Index near = 0;
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    int best = 0;
    double best_d = INFINITY;
    for (int k = 0; k < 8; ++k) {
      const double d = (samples.col(j) - spec.center(k)).norm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (best_d <= k_std * spec.cluster_std) {
      ++near;
      hit[best] = true;
    }
  }
  ModeCoverage out;
  out.fraction_near = static_cast<double>(near) / static_cast<double>(samples.cols());
  for (bool h : hit) out.modes_hit += h ? 1 : 0;
  return out;
}

}  // namespace polyflow
