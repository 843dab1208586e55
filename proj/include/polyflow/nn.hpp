#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "polyflow/numcore.hpp"
#include "polyflow/rng.hpp"

namespace polyflow {

// Deterministic log-spaced frequencies in [1, 1000].
std::vector<double> fourier_frequencies(int n_freq);
// [sin(f_0 t), ..., sin(f_{n-1} t), cos(f_0 t), ..., cos(f_{n-1} t)].
Vector fourier_embed(double t, int n_freq);

struct MlpShape {
  int input_dim = 1;
  std::vector<int> hidden{256, 256};
  int output_dim = 1;
};

struct MlpCache {
  // inputs[l] is the activation fed into layer l; pre[l] the pre-activation
  // of hidden layer l.
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  const void* owner = nullptr;
  std::uint64_t generation = 0;
};

// Fully connected network with SiLU hidden activations and a linear output
// layer. All weights and biases live in one flat buffer (per layer: W in
// column-major out x in order, then b) so optimizers and checkpoints can treat
// the parameters as a single vector.
class Mlp {
 public:
  Mlp() = default;
  // Hidden layers use N(0, 1/fan_in) weights; the output layer is zeroed
  // when `zero_output` is set.
  Mlp(MlpShape shape, RngStream& rng, bool zero_output = true);

  const MlpShape& shape() const { return shape_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<const double> params() const { return params_; }
  // Any mutable access invalidates outstanding caches.
  std::span<double> mutable_params() {
    ++generation_;
    return params_;
  }
  void set_params(std::span<const double> p);

  // `in` is input_dim x B; returns output_dim x B.
  Matrix forward(const Matrix& in, MlpCache* cache = nullptr) const;
  // Accumulates d<grad_out, y>/d(params) into `grad_params` (same layout as
  // params). Writes the input gradient when `grad_in` is non-null.
  void backward(const MlpCache& cache, const Matrix& grad_out, std::span<double> grad_params,
                Matrix* grad_in = nullptr) const;

 private:
  struct LayerView {
    std::size_t w_offset;
    std::size_t b_offset;
    int in;
    int out;
  };

  MlpShape shape_;
  std::vector<LayerView> layers_;
  std::vector<double> params_;
  std::uint64_t generation_ = 0;
};

// Velocity network F(x_in, c_noise): an Mlp fed with the concatenation of the
// (already scaled) state and the Fourier embedding of the conditioning time.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(int data_dim, std::vector<int> hidden, int n_freq, RngStream& rng);

  int data_dim() const { return data_dim_; }
  int n_freq() const { return n_freq_; }
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

  // x_in is data_dim x B with one conditioning time per column.
  Matrix forward(const Matrix& x_in, std::span<const double> c, MlpCache* cache = nullptr) const;
  Matrix forward(const Matrix& x_in, double c) const;
  void backward(const MlpCache& cache, const Matrix& grad_out, std::span<double> grad_params) const;

 private:
  Matrix assemble_input(const Matrix& x_in, std::span<const double> c) const;

  int data_dim_ = 0;
  int n_freq_ = 0;
  Mlp net_;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_size(std::size_t n);
};

// Bias-corrected Adam update. Throws DivergenceError on non-finite gradients
// (parameters and state are left untouched in that case).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr);

struct EmaParams {
  double rate = 0.999;
  std::vector<double> shadow;

  static EmaParams from(std::span<const double> params, double rate);
  // shadow <- rate * shadow + (1 - rate) * params
  void update(std::span<const double> params);
};

}  // namespace polyflow
