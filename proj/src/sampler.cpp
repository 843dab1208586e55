#include "polyflow/sampler.hpp"

#include <cmath>

#include "polyflow/errors.hpp"

namespace polyflow {

ModelField as_field(const Denoiser& model) {
  return [&model](const Matrix& x_in, double c) { return model.forward(x_in, c); };
}

Matrix velocity(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t) {
  if (path.kind == PathKind::linear) return field(x, c_noise(path, t));
  return path.sigma_d * field(x / path.sigma_d, c_noise(path, t));
}

Matrix step_euler(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t,
                  double t_next) {
  return x + (t_next - t) * velocity(field, path, x, t);
}

Matrix step_heun(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t,
                 double t_next) {
  const double dt = t_next - t;
  const Matrix v0 = velocity(field, path, x, t);
  const Matrix predicted = x + dt * v0;
  const Matrix v1 = velocity(field, path, predicted, t_next);
  return x + 0.5 * dt * (v0 + v1);
}

Matrix step_trig_exact(const ModelField& field, const InterpolantPath& path, const Matrix& x,
                       double t, double t_next) {
  if (path.kind != PathKind::trig) throw ConfigError("trig_exact sampler requires the trig path");
  const double delta = t - t_next;
  return std::cos(delta) * x - std::sin(delta) * velocity(field, path, x, t);
}

Matrix sampler_step(SamplerMethod method, const ModelField& field, const InterpolantPath& path,
                    const Matrix& x, double t, double t_next) {
  switch (method) {
    case SamplerMethod::euler:
      return step_euler(field, path, x, t, t_next);
    case SamplerMethod::heun:
      return step_heun(field, path, x, t, t_next);
    case SamplerMethod::trig_exact:
      return step_trig_exact(field, path, x, t, t_next);
  }
  throw ConfigError("unknown sampler method");
}

std::vector<double> time_grid(const InterpolantPath& path, int n_steps) {
  if (n_steps < 1) throw ConfigError("sampler needs at least one step");
  const double hi = path.t_start();
  const double lo = path.t_end();
  std::vector<double> grid(static_cast<std::size_t>(n_steps) + 1);
  for (int k = 0; k <= n_steps; ++k) grid[static_cast<std::size_t>(k)] = hi + (lo - hi) * k / n_steps;
  grid.back() = lo;
  return grid;
}

void apply_conditioning(Matrix& x, const Conditioning& cond, const InterpolantPath& path, double t,
                        const Matrix& initial_noise, bool exact) {
  if (cond.indices.size() != cond.values.size())
    throw InvalidInputError("conditioning indices and values differ in length");
  const auto [g, a] = gamma_alpha(path, t);
  for (std::size_t k = 0; k < cond.indices.size(); ++k) {
    const Eigen::Index i = cond.indices[k];
    if (i < 0 || i >= x.rows()) throw InvalidInputError("conditioning index out of range");
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      x(i, j) = exact ? cond.values[k] : g * cond.values[k] + a * initial_noise(i, j);
  }
}

namespace {

void check_finite(const Matrix& x) {
  if (!x.allFinite()) throw DivergenceError("sampler state became non-finite");
}

}  // namespace

Matrix integrate(const ModelField& field, const InterpolantPath& path, const SamplerConfig& cfg,
                 Matrix x) {
  if (cfg.method == SamplerMethod::trig_exact && path.kind != PathKind::trig)
    throw ConfigError("trig_exact sampler requires the trig path");
  const auto grid = time_grid(path, cfg.n_steps);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    x = sampler_step(cfg.method, field, path, x, grid[k], grid[k + 1]);
    check_finite(x);
  }
  return x;
}

Matrix sample(const ModelField& field, const InterpolantPath& path, const SamplerConfig& cfg,
              RngStream& rng, std::size_t count, int dim, const Conditioning& cond) {
  if (cfg.method == SamplerMethod::trig_exact && path.kind != PathKind::trig)
    throw ConfigError("trig_exact sampler requires the trig path");
  if (count == 0 || dim < 1) throw InvalidInputError("sample: count and dim must be positive");
  const double scale = path.noise_scale();
  Matrix noise(dim, static_cast<Eigen::Index>(count));
  for (Eigen::Index j = 0; j < noise.cols(); ++j)
    for (Eigen::Index i = 0; i < noise.rows(); ++i) noise(i, j) = scale * rng.normal();

  const auto grid = time_grid(path, cfg.n_steps);
  const bool exact = cond.mode == ConditioningMode::exact;
  Matrix x = noise;
  if (!cond.empty()) apply_conditioning(x, cond, path, grid.front(), noise, exact);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    x = sampler_step(cfg.method, field, path, x, grid[k], grid[k + 1]);
    check_finite(x);
    if (!cond.empty()) apply_conditioning(x, cond, path, grid[k + 1], noise, exact || k + 2 == grid.size());
  }
  return x;
}

}  // namespace polyflow
