#include "polyflow/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "polyflow/errors.hpp"

namespace polyflow {
namespace {

using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<double> fourier_frequencies(int n_freq) {
  if (n_freq < 1) throw InvalidInputError("fourier_frequencies: n_freq must be >= 1");
  std::vector<double> f(static_cast<std::size_t>(n_freq));
  for (int k = 0; k < n_freq; ++k) {
    const double frac = n_freq == 1 ? 0.0 : static_cast<double>(k) / (n_freq - 1);
    f[static_cast<std::size_t>(k)] = std::pow(1000.0, frac);
  }
  return f;
}

Vector fourier_embed(double t, int n_freq) {
  const auto freqs = fourier_frequencies(n_freq);
  Vector out(2 * n_freq);
  for (int k = 0; k < n_freq; ++k) {
    out(k) = std::sin(freqs[static_cast<std::size_t>(k)] * t);
    out(n_freq + k) = std::cos(freqs[static_cast<std::size_t>(k)] * t);
  }
  return out;
}

Mlp::Mlp(MlpShape shape, RngStream& rng, bool zero_output) : shape_(std::move(shape)) {
  if (shape_.input_dim < 1 || shape_.output_dim < 1)
    throw InvalidInputError("Mlp: dimensions must be positive");
  std::vector<int> dims{shape_.input_dim};
  for (int h : shape_.hidden) {
    if (h < 1) throw InvalidInputError("Mlp: hidden width must be positive");
    dims.push_back(h);
  }
  dims.push_back(shape_.output_dim);

  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    LayerView v{offset, offset + static_cast<std::size_t>(dims[l]) * dims[l + 1], dims[l], dims[l + 1]};
    offset = v.b_offset + static_cast<std::size_t>(dims[l + 1]);
    layers_.push_back(v);
  }
  params_.assign(offset, 0.0);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const bool is_output = l + 1 == layers_.size();
    if (is_output && zero_output) continue;
    const LayerView& v = layers_[l];
    const double stddev = 1.0 / std::sqrt(static_cast<double>(v.in));
    for (std::size_t i = 0; i < static_cast<std::size_t>(v.in) * v.out; ++i)
      params_[v.w_offset + i] = stddev * rng.normal();
  }
}

void Mlp::set_params(std::span<const double> p) {
  if (p.size() != params_.size()) throw InvalidInputError("Mlp::set_params: size mismatch");
  std::copy(p.begin(), p.end(), params_.begin());
  ++generation_;
}

Matrix Mlp::forward(const Matrix& in, MlpCache* cache) const {
  if (in.rows() != shape_.input_dim)
    throw InvalidInputError("Mlp::forward: expected input dim " + std::to_string(shape_.input_dim) +
                            ", got " + std::to_string(in.rows()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->owner = this;
    cache->generation = generation_;
  }
  Matrix a = in;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerView& v = layers_[l];
    ConstMatMap W(params_.data() + v.w_offset, v.out, v.in);
    ConstVecMap b(params_.data() + v.b_offset, v.out);
    Matrix h = W * a;
    h.colwise() += b;
    if (cache) cache->inputs.push_back(std::move(a));
    if (l + 1 == layers_.size()) return h;
    a = h.unaryExpr([](double x) { return x * sigmoid(x); });
    if (cache) cache->pre.push_back(std::move(h));
  }
  return a;
}

void Mlp::backward(const MlpCache& cache, const Matrix& grad_out, std::span<double> grad_params,
                   Matrix* grad_in) const {
  if (cache.owner != this || cache.generation != generation_ || cache.inputs.size() != layers_.size())
    throw ContractViolation("Mlp::backward: cache does not match the current parameters");
  if (grad_params.size() != params_.size())
    throw InvalidInputError("Mlp::backward: gradient buffer size mismatch");
  if (grad_out.rows() != shape_.output_dim || grad_out.cols() != cache.inputs.front().cols())
    throw InvalidInputError("Mlp::backward: grad_out shape mismatch");

  Matrix delta = grad_out;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerView& v = layers_[li];
    ConstMatMap W(params_.data() + v.w_offset, v.out, v.in);
    MatMap dW(grad_params.data() + v.w_offset, v.out, v.in);
    Eigen::Map<Vector> db(grad_params.data() + v.b_offset, v.out);
    dW.noalias() += delta * cache.inputs[li].transpose();
    db += delta.rowwise().sum();
    if (li == 0 && grad_in == nullptr) break;
    Matrix back = W.transpose() * delta;
    if (li == 0) {
      *grad_in = std::move(back);
      break;
    }
    const Matrix& pre = cache.pre[li - 1];
    delta = back.array() * pre.unaryExpr([](double x) {
                              const double s = sigmoid(x);
                              return s * (1.0 + x * (1.0 - s));
                            }).array();
  }
}

Denoiser::Denoiser(int data_dim, std::vector<int> hidden, int n_freq, RngStream& rng)
    : data_dim_(data_dim), n_freq_(n_freq) {
  if (data_dim < 1) throw InvalidInputError("Denoiser: data_dim must be positive");
  if (n_freq < 1) throw InvalidInputError("Denoiser: n_freq must be positive");
  net_ = Mlp(MlpShape{data_dim + 2 * n_freq, std::move(hidden), data_dim}, rng, true);
}

Matrix Denoiser::assemble_input(const Matrix& x_in, std::span<const double> c) const {
  if (x_in.rows() != data_dim_)
    throw InvalidInputError("Denoiser: expected data dim " + std::to_string(data_dim_) + ", got " +
                            std::to_string(x_in.rows()));
  if (static_cast<Eigen::Index>(c.size()) != x_in.cols())
    throw InvalidInputError("Denoiser: one conditioning time per column required");
  const auto freqs = fourier_frequencies(n_freq_);
  Matrix in(data_dim_ + 2 * n_freq_, x_in.cols());
  in.topRows(data_dim_) = x_in;
  for (Eigen::Index j = 0; j < x_in.cols(); ++j) {
    const double t = c[static_cast<std::size_t>(j)];
    for (int k = 0; k < n_freq_; ++k) {
      in(data_dim_ + k, j) = std::sin(freqs[static_cast<std::size_t>(k)] * t);
      in(data_dim_ + n_freq_ + k, j) = std::cos(freqs[static_cast<std::size_t>(k)] * t);
    }
  }
  return in;
}

Matrix Denoiser::forward(const Matrix& x_in, std::span<const double> c, MlpCache* cache) const {
  return net_.forward(assemble_input(x_in, c), cache);
}

Matrix Denoiser::forward(const Matrix& x_in, double c) const {
  const std::vector<double> cs(static_cast<std::size_t>(x_in.cols()), c);
  return forward(x_in, cs);
}

void Denoiser::backward(const MlpCache& cache, const Matrix& grad_out,
                        std::span<double> grad_params) const {
  net_.backward(cache, grad_out, grad_params);
}

AdamState AdamState::for_size(std::size_t n) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  return s;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw InvalidInputError("adam_step: shape mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw DivergenceError("adam_step: non-finite gradient");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

EmaParams EmaParams::from(std::span<const double> params, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidInputError("EMA rate must lie in [0, 1)");
  return EmaParams{rate, std::vector<double>(params.begin(), params.end())};
}

void EmaParams::update(std::span<const double> params) {
  if (params.size() != shadow.size()) throw InvalidInputError("EmaParams::update: size mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i)
    shadow[i] = rate * shadow[i] + (1.0 - rate) * params[i];
}

}  // namespace polyflow
