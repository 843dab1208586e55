#include "polyflow/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "polyflow/errors.hpp"

namespace polyflow {

LambdaFn LambdaFn::from_table(std::vector<std::pair<double, double>> table) {
  if (table.empty()) throw InvalidInputError("lambda table is empty");
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (!(table[i].second > 0.0) || !std::isfinite(table[i].second))
      throw InvalidInputError("lambda must be positive");
    if (i > 0 && !(table[i].first > table[i - 1].first))
      throw InvalidInputError("lambda table sigmas must increase strictly");
  }
  return LambdaFn{Kind::custom_table, std::move(table)};
}

double LambdaFn::operator()(double sigma) const {
  if (kind == Kind::constant_one) return 1.0;
  if (sigma <= table.front().first) return table.front().second;
  if (sigma >= table.back().first) return table.back().second;
  const auto hi = std::upper_bound(table.begin(), table.end(), sigma,
                                   [](double s, const auto& p) { return s < p.first; });
  const auto lo = hi - 1;
  const double frac = (sigma - lo->first) / (hi->first - lo->first);
  return lo->second + frac * (hi->second - lo->second);
}

PolyWeightState PolyWeightState::make(int degree, double ema_mu, double ridge) {
  if (!(ema_mu >= 0.0 && ema_mu < 1.0)) throw InvalidInputError("ema_mu must lie in [0, 1)");
  PolyWeightState s;
  s.coeffs = PolyCoeffs::zeros(degree);
  s.ema_mu = ema_mu;
  s.ridge = ridge;
  return s;
}

double PolyWeightState::log_loss_estimate(double sigma) const {
  double x = std::log(sigma);
  if (clamp_to_support && has_support) x = std::clamp(x, support_lo, support_hi);
  return poly_eval(coeffs, x);
}

PolyCoeffs fit_log_losses(const PolyWeightState& state, std::span<const double> sigmas,
                          std::span<const double> losses) {
  if (sigmas.size() != losses.size()) throw InvalidInputError("sigma/loss length mismatch");
  const auto need = static_cast<std::size_t>(state.degree()) + 1;
  if (sigmas.size() < need)
    throw InsufficientDataError("polynomial update needs " + std::to_string(need) + " pairs, got " +
                                std::to_string(sigmas.size()));
  std::vector<double> xs(sigmas.size());
  std::vector<double> ys(losses.size());
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw DomainError("sigma must be positive");
    xs[i] = std::log(sigmas[i]);
    ys[i] = std::log(std::max(losses[i], state.loss_floor));
  }
  return least_squares_fit(xs, ys, state.degree(), state.ridge);
}

PolyWeightState blend_coeffs(const PolyWeightState& state, const PolyCoeffs& fitted) {
  if (fitted.degree() != state.degree()) throw InvalidInputError("coefficient degree mismatch");
  PolyWeightState next = state;
  if (!state.initialized) {
    next.coeffs = fitted;
    next.initialized = true;
    return next;
  }
  for (std::size_t k = 0; k < next.coeffs.coeffs.size(); ++k)
    next.coeffs.coeffs[k] = state.ema_mu * state.coeffs[k] + (1.0 - state.ema_mu) * fitted[k];
  return next;
}

PolyWeightState update_from_batch(const PolyWeightState& state, std::span<const double> sigmas,
                                  std::span<const double> losses) {
  PolyWeightState next = blend_coeffs(state, fit_log_losses(state, sigmas, losses));
  const auto [lo_it, hi_it] = std::minmax_element(sigmas.begin(), sigmas.end());
  const double lo = std::log(*lo_it);
  const double hi = std::log(*hi_it);
  if (!state.has_support) {
    next.support_lo = lo;
    next.support_hi = hi;
    next.has_support = true;
  } else {
    next.support_lo = state.ema_mu * state.support_lo + (1.0 - state.ema_mu) * lo;
    next.support_hi = state.ema_mu * state.support_hi + (1.0 - state.ema_mu) * hi;
  }
  return next;
}

MlpWeightState::MlpWeightState(int n_freq_, int width, RngStream& rng)
    : n_freq(n_freq_), net(MlpShape{2 * n_freq_, {width}, 1}, rng, true) {
  adam = AdamState::for_size(net.num_params());
}

Matrix MlpWeightState::features(std::span<const double> sigmas) const {
  Matrix f(2 * n_freq, static_cast<Eigen::Index>(sigmas.size()));
  for (std::size_t j = 0; j < sigmas.size(); ++j)
    f.col(static_cast<Eigen::Index>(j)) = fourier_embed(sigmas[j], n_freq);
  return f;
}

std::vector<double> MlpWeightState::evaluate(std::span<const double> sigmas, MlpCache* cache) const {
  const Matrix out = net.forward(features(sigmas), cache);
  return std::vector<double>(out.data(), out.data() + out.size());
}

double WeightingScheme::u_value(double sigma) const {
  if (!(sigma > 0.0)) throw DomainError("u_value: sigma must be positive");
  switch (kind) {
    case WeightingKind::uniform:
      return 0.0;
    case WeightingKind::variational_poly: {
      const double base = std::log(lambda(sigma));
      return poly.initialized ? base + poly.log_loss_estimate(sigma) : base;
    }
    case WeightingKind::mlp:
      return mlp.evaluate(std::span<const double>(&sigma, 1)).front();
  }
  return 0.0;
}

std::vector<double> WeightingScheme::u_values(std::span<const double> sigmas) const {
  if (kind == WeightingKind::mlp) {
    for (double s : sigmas)
      if (!(s > 0.0)) throw DomainError("u_value: sigma must be positive");
    return mlp.evaluate(sigmas);
  }
  std::vector<double> out(sigmas.size());
  std::transform(sigmas.begin(), sigmas.end(), out.begin(), [this](double s) { return u_value(s); });
  return out;
}

double optimal_u(double lambda_sigma, double loss_sigma) {
  if (!(lambda_sigma > 0.0) || !(loss_sigma > 0.0))
    throw DomainError("optimal_u: arguments must be positive");
  return std::log(lambda_sigma) + std::log(loss_sigma);
}

double weighted_term(double lambda_sigma, double loss_sigma, double u_sigma) {
  return lambda_sigma * loss_sigma * std::exp(-u_sigma) + u_sigma;
}

}  // namespace polyflow
