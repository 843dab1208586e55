#pragma once

#include <span>
#include <utility>
#include <vector>

#include "polyflow/nn.hpp"
#include "polyflow/numcore.hpp"

namespace polyflow {

enum class WeightingKind { uniform, variational_poly, mlp };

// Noise-dependent prior weight lambda(sigma). Either identically one or a
// piecewise-linear table over sigma (held constant beyond its ends).
struct LambdaFn {
  enum class Kind { constant_one, custom_table };
  Kind kind = Kind::constant_one;
  std::vector<std::pair<double, double>> table;

  static LambdaFn one() { return {}; }
  // Throws InvalidInputError unless sigmas increase strictly and every
  // lambda is positive.
  static LambdaFn from_table(std::vector<std::pair<double, double>> table);

  double operator()(double sigma) const;
};

// Streaming polynomial estimate of the log-loss curve over log(sigma).
//
// The polynomial is only trusted on the log(sigma) range it was fitted on:
// support_lo/support_hi track an EMA (same rate as the coefficients) of each
// batch's smallest and largest log(sigma), and evaluation clamps its argument
// to that interval. Without the clamp a degree-5 fit extrapolates to |u| in
// the hundreds at rarely sampled times and a single such sample swamps the
// gradient.
struct PolyWeightState {
  PolyCoeffs coeffs = PolyCoeffs::zeros(5);
  double ema_mu = 0.99;
  bool initialized = false;
  double ridge = 1e-6;
  double loss_floor = 1e-12;
  bool clamp_to_support = true;
  bool has_support = false;
  double support_lo = 0.0;
  double support_hi = 0.0;

  // P(log sigma) with the support clamp applied.
  double log_loss_estimate(double sigma) const;

  static PolyWeightState make(int degree, double ema_mu = 0.99, double ridge = 1e-6);
  int degree() const { return coeffs.degree(); }
};

// Ridge fit of log(max(L_i, loss_floor)) against log(sigma_i).
PolyCoeffs fit_log_losses(const PolyWeightState& state, std::span<const double> sigmas,
                          std::span<const double> losses);

// EMA blend of a fresh fit into the state; the first fit is taken verbatim.
PolyWeightState blend_coeffs(const PolyWeightState& state, const PolyCoeffs& fitted);

// One streaming update: fit, then blend. Throws InsufficientDataError when
// fewer than degree + 1 pairs are supplied.
PolyWeightState update_from_batch(const PolyWeightState& state, std::span<const double> sigmas,
                                  std::span<const double> losses);

// Learned baseline: u(sigma) = MLP(fourier(sigma)), trained by gradient
// descent on the weighted objective alongside the denoiser.
struct MlpWeightState {
  int n_freq = 32;
  Mlp net;
  AdamState adam;

  MlpWeightState() = default;
  MlpWeightState(int n_freq, int width, RngStream& rng);

  Matrix features(std::span<const double> sigmas) const;
  std::vector<double> evaluate(std::span<const double> sigmas, MlpCache* cache = nullptr) const;
};

struct WeightingScheme {
  WeightingKind kind = WeightingKind::uniform;
  LambdaFn lambda;
  PolyWeightState poly;
  MlpWeightState mlp;

  double u_value(double sigma) const;
  std::vector<double> u_values(std::span<const double> sigmas) const;
};

// Pointwise minimizer of lambda * L * exp(-u) + u.
double optimal_u(double lambda_sigma, double loss_sigma);

// lambda * L * exp(-u) + u.
double weighted_term(double lambda_sigma, double loss_sigma, double u_sigma);

}  // namespace polyflow
