#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "polyflow/flowpaths.hpp"
#include "polyflow/nn.hpp"
#include "polyflow/numcore.hpp"
#include "polyflow/rng.hpp"

namespace polyflow {

// Model-space field F(x_in, c): columns of x_in are samples, all at the same
// conditioning value c. Velocity scaling by sigma_d happens in velocity().
using ModelField = std::function<Matrix(const Matrix& x_in, double c)>;

ModelField as_field(const Denoiser& model);

enum class SamplerMethod { euler, heun, trig_exact };

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::euler;
  int n_steps = 5;
};

// Known coordinates pinned during sampling (inpainting). `interpolated`
// resets them to their noisy path value at each time; `exact` pins them to
// the clean value throughout, matching a model trained with those
// coordinates clamped.
enum class ConditioningMode { interpolated, exact };

struct Conditioning {
  std::vector<Eigen::Index> indices;
  std::vector<double> values;
  ConditioningMode mode = ConditioningMode::interpolated;

  bool empty() const { return indices.empty(); }
};

// Linear: F(x, t). Trig: sigma_d * F(x / sigma_d, c_noise(t)).
Matrix velocity(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t);

Matrix step_euler(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t,
                  double t_next);
// Trapezoidal predictor-corrector.
Matrix step_heun(const ModelField& field, const InterpolantPath& path, const Matrix& x, double t,
                 double t_next);
// Holds the model output fixed over the step and rotates along the
// trigonometric arc. Throws ConfigError on a linear path.
Matrix step_trig_exact(const ModelField& field, const InterpolantPath& path, const Matrix& x,
                       double t, double t_next);

Matrix sampler_step(SamplerMethod method, const ModelField& field, const InterpolantPath& path,
                    const Matrix& x, double t, double t_next);

// n_steps + 1 times, uniform from t_start down to t_end.
std::vector<double> time_grid(const InterpolantPath& path, int n_steps);

// Resets conditioned coordinates of every column to gamma(t) * value +
// alpha(t) * noise, where noise holds the initial draw for that coordinate.
// With `exact` set, coordinates are pinned to the value itself.
void apply_conditioning(Matrix& x, const Conditioning& cond, const InterpolantPath& path, double t,
                        const Matrix& initial_noise, bool exact);

// Integrates the reverse-time ODE from noise. Returns dim x count terminal
// states; conditioned coordinates equal their values exactly. Throws
// DivergenceError if the state becomes non-finite.
Matrix sample(const ModelField& field, const InterpolantPath& path, const SamplerConfig& cfg,
              RngStream& rng, std::size_t count, int dim, const Conditioning& cond = {});

// Integration from a given starting state (no noise draw, no conditioning).
Matrix integrate(const ModelField& field, const InterpolantPath& path, const SamplerConfig& cfg,
                 Matrix x);

}  // namespace polyflow
