#pragma once

#include <cstddef>

#include "polyflow/numcore.hpp"
#include "polyflow/rng.hpp"

namespace polyflow {

// 1 x n draws from N(mean, sd^2).
Matrix gaussian_1d(std::size_t n, RngStream& rng, double mean = 0.0, double sd = 1.0);

// Eight isotropic clusters evenly spaced on a circle.
struct EightGaussians {
  double radius = 2.0;
  double cluster_std = 0.1;

  Eigen::Vector2d center(int k) const;
  // 2 x n samples, cluster chosen uniformly per sample.
  Matrix sample(std::size_t n, RngStream& rng) const;
};

struct ModeCoverage {
  // Fraction of samples within `k_std` cluster stds of their nearest center.
  double fraction_near = 0.0;
  // Number of clusters with at least one nearby sample.
  int modes_hit = 0;
};

ModeCoverage mode_coverage(const EightGaussians& spec, const Matrix& samples, double k_std = 4.0);

}  // namespace polyflow
