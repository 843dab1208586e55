#include "polyflow/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "polyflow/errors.hpp"

namespace polyflow {

TimeDomain time_domain(PathKind kind) {
  return kind == PathKind::linear ? TimeDomain{0.0, 1.0} : TimeDomain{0.0, std::numbers::pi / 2};
}

PolyCoeffs::PolyCoeffs(std::vector<double> c) : coeffs(std::move(c)) {
  if (coeffs.empty()) throw InvalidInputError("polynomial needs at least one coefficient");
  for (double w : coeffs)
    if (!std::isfinite(w)) throw InvalidInputError("non-finite polynomial coefficient");
}

PolyCoeffs PolyCoeffs::zeros(int degree) {
  if (degree < 0) throw InvalidInputError("negative polynomial degree");
  return PolyCoeffs(std::vector<double>(static_cast<std::size_t>(degree) + 1, 0.0));
}

Matrix vandermonde(std::span<const double> xs, int degree) {
  if (xs.empty()) throw InvalidInputError("vandermonde: empty input");
  if (degree < 0) throw InvalidInputError("vandermonde: negative degree");
  const auto rows = static_cast<Eigen::Index>(xs.size());
  Matrix X(rows, degree + 1);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double x = xs[static_cast<std::size_t>(i)];
    if (!std::isfinite(x)) throw InvalidInputError("vandermonde: non-finite input");
    double p = 1.0;
    for (int j = 0; j <= degree; ++j) {
      X(i, j) = p;
      p *= x;
    }
  }
  return X;
}

PolyCoeffs least_squares_fit(std::span<const double> xs, std::span<const double> ys, int degree,
                             double ridge) {
  if (xs.size() != ys.size()) throw InvalidInputError("least_squares_fit: length mismatch");
  if (!(ridge >= 0.0) || !std::isfinite(ridge))
    throw InvalidInputError("least_squares_fit: ridge must be finite and non-negative");
  const auto n = static_cast<std::size_t>(degree) + 1;
  if (ridge == 0.0 && xs.size() < n)
    throw InsufficientDataError("least_squares_fit: need " + std::to_string(n) + " points, got " +
                                std::to_string(xs.size()));
  for (double y : ys)
    if (!std::isfinite(y)) throw InvalidInputError("least_squares_fit: non-finite target");

  // Column-scaled QR on the ridge-augmented system [X; sqrt(ridge) I].
  const Matrix X = vandermonde(xs, degree);
  const auto dim = static_cast<Eigen::Index>(n);
  const auto rows = X.rows();
  Vector scale(dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    const double norm = std::sqrt(X.col(j).squaredNorm() + ridge);
    if (!(norm > 0.0)) throw DegenerateFitError("least_squares_fit: zero column in design matrix");
    scale(j) = 1.0 / norm;
  }
  Matrix A = Matrix::Zero(rows + dim, dim);
  A.topRows(rows) = X * scale.asDiagonal();
  A.bottomRows(dim).diagonal() = std::sqrt(ridge) * scale;
  Vector b = Vector::Zero(rows + dim);
  b.head(rows) = Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));

  const Eigen::ColPivHouseholderQR<Matrix> qr(A);
  if (qr.rank() < dim || std::abs(qr.matrixR()(dim - 1, dim - 1)) < 1e-13 * std::abs(qr.matrixR()(0, 0)))
    throw DegenerateFitError("least_squares_fit: rank-deficient design matrix");
  const Vector v = qr.solve(b);

  std::vector<double> w(n);
  for (Eigen::Index j = 0; j < dim; ++j) w[static_cast<std::size_t>(j)] = v(j) * scale(j);
  for (double c : w)
    if (!std::isfinite(c)) throw DegenerateFitError("least_squares_fit: non-finite solution");
  return PolyCoeffs(std::move(w));
}

double poly_eval(const PolyCoeffs& c, double x) {
  if (!std::isfinite(x)) throw InvalidInputError("poly_eval: non-finite input");
  double acc = 0.0;
  for (auto it = c.coeffs.rbegin(); it != c.coeffs.rend(); ++it) acc = acc * x + *it;
  return acc;
}

namespace {

double clamp_to_domain(PathKind kind, double t) {
  const TimeDomain dom = time_domain(kind);
  return std::clamp(t, dom.lo + kTimeClamp, dom.hi - kTimeClamp);
}

}  // namespace

double logit_normal_time(const TimeSampler& s, double n) {
  double t = 0.0;
  if (s.path == PathKind::linear) {
    t = 1.0 / (1.0 + std::exp(-n));
  } else {
    t = std::atan(std::exp(n) / s.sigma_d);
  }
  return clamp_to_domain(s.path, t);
}

std::vector<double> sample_time(const TimeSampler& s, RngStream& rng, std::size_t count) {
  if (count == 0) throw InvalidInputError("sample_time: count must be positive");
  if (s.kind == TimeSamplerKind::logit_normal && !(s.p_std > 0.0))
    throw InvalidInputError("sample_time: p_std must be positive");
  if (!(s.sigma_d > 0.0)) throw InvalidInputError("sample_time: sigma_d must be positive");
  const TimeDomain dom = time_domain(s.path);
  std::vector<double> out(count);
  for (auto& t : out) {
    if (s.kind == TimeSamplerKind::uniform) {
      t = clamp_to_domain(s.path, rng.uniform(dom.lo + kTimeClamp, dom.hi - kTimeClamp));
    } else {
      t = logit_normal_time(s, rng.normal(s.p_mean, s.p_std));
    }
  }
  return out;
}

}  // namespace polyflow
