#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "polyflow/flowpaths.hpp"
#include "polyflow/nn.hpp"
#include "polyflow/numcore.hpp"
#include "polyflow/rng.hpp"
#include "polyflow/weighting.hpp"

namespace polyflow {

inline constexpr int kUGridSize = 32;

struct TrainConfig {
  PathKind path = PathKind::trig;
  double sigma_d = 1.0;
  WeightingKind weighting = WeightingKind::variational_poly;
  TimeSampler time_sampler{};
  int batch_size = 128;
  double lr = 8e-4;
  std::int64_t total_steps = 4000;
  std::vector<double> ema_rates{0.999, 0.9995};
  int poly_degree = 5;
  double poly_mu = 0.99;
  double poly_ridge = 1e-6;
  double loss_floor = 1e-12;
  std::vector<int> hidden{256, 256};
  int time_freqs = 16;
  int mlp_weight_freqs = 32;
  int mlp_weight_width = 64;
  LambdaFn lambda;
  std::uint64_t seed = 0;
  std::int64_t log_interval = 1;
  bool normalize = true;
  // Coordinates held at their clean data values in x_t and excluded from the
  // loss, so the model learns to read them as conditioning.
  std::vector<Eigen::Index> clamp_dims;
  bool log_wall_time = false;
  double divergence_limit = 1e6;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
  InterpolantPath make_path() const;
};

struct FlowBatch {
  Matrix x;
  Matrix z;
  std::vector<double> t;
  Matrix x_t;
  Matrix v_target;
  std::vector<double> per_sample_loss;
  // Coordinates pinned to clean data in x_t and masked out of the loss.
  std::vector<Eigen::Index> clamped;
};

// Fills x_t and v_target from given x, z (columns are samples) and times.
FlowBatch make_flow_batch(const InterpolantPath& path, Matrix x, Matrix z, std::vector<double> t,
                          std::vector<Eigen::Index> clamped = {});

// Runs the model on the batch and sets per_sample_loss to the mean squared
// residual per sample over the unclamped coordinates. Returns the residual F - v_target.
Matrix evaluate_losses(const Denoiser& model, const InterpolantPath& path, FlowBatch& batch,
                       MlpCache* cache = nullptr);

// Draws noise and times, builds the batch, evaluates the per-sample losses.
// Throws DivergenceError on a non-finite loss.
FlowBatch compute_flow_loss(const Denoiser& model, const InterpolantPath& path, const Matrix& x,
                            const TimeSampler& sampler, RngStream& rng);

struct ObjectiveEval {
  double raw_loss = 0.0;
  // mean_i [lambda_i L_i exp(-u_i) + u_i]
  double objective = 0.0;
  std::vector<double> u;
  std::vector<double> model_grad;
  // Only populated for the mlp weighting scheme.
  std::vector<double> weight_grad;
};

// Weighted objective on a fixed batch and, when `with_grad` is set, its
// gradients. The polynomial state enters as a constant; the mlp scheme's
// parameters receive gradients from both terms.
ObjectiveEval weighted_objective(const Denoiser& model, const WeightingScheme& weighting,
                                 const InterpolantPath& path, FlowBatch& batch, bool with_grad);

// Per-dimension affine standardization.
struct Normalizer {
  Vector mean;
  Vector stddev;

  static Normalizer identity(int dim);
  static Normalizer fit(const Matrix& data);
  Matrix apply(const Matrix& raw) const;
  Matrix invert(const Matrix& normalized) const;
};

struct StepRecord {
  std::int64_t step = 0;
  double raw_loss = 0.0;
  double weighted_obj = 0.0;
  std::vector<double> sigma_samples;
  std::vector<double> loss_samples;
  std::array<double, kUGridSize> u_grid{};
  double wall_ms = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

class MetricLog {
 public:
  // Throws ContractViolation unless steps increase strictly.
  void append(StepRecord record);
  const std::vector<StepRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  static std::string csv_header();
  static std::string csv_row(const StepRecord& r);
  std::string to_csv() const;

 private:
  std::vector<StepRecord> records_;
};

// Fixed 32-point grid spanning the clamped time domain.
std::array<double, kUGridSize> u_grid_sigmas(PathKind kind);
double u_grid_variance(const std::array<double, kUGridSize>& u);

struct TrainState {
  TrainConfig config;
  InterpolantPath path;
  Normalizer normalizer;
  Denoiser model;
  AdamState adam;
  std::vector<EmaParams> emas;
  WeightingScheme weighting;
  RngStream rng;
  std::int64_t step = 0;
};

TrainState init_train_state(const TrainConfig& config, int data_dim, Normalizer normalizer);

// One optimization step on already-normalized data (columns are samples).
StepRecord training_step(TrainState& state, const Matrix& data);

struct TrainResult {
  TrainState state;
  MetricLog log;
  // Set when training aborted on divergence; the log holds the steps before it.
  std::optional<std::string> divergence;
};

using StepCallback = std::function<void(const TrainState&, const StepRecord&)>;

// Trains from scratch on raw data (columns are samples). The normalizer is fit
// from the data when config.normalize is set, unless one is supplied.
TrainResult train(const TrainConfig& config, const Matrix& raw_data,
                  std::optional<Normalizer> normalizer = std::nullopt,
                  const StepCallback& on_step = {});

// Continues an existing state up to config.total_steps.
void continue_training(TrainResult& result, const Matrix& raw_data, const StepCallback& on_step = {});

// Binary checkpoint of the complete training state (versioned CBOR document).
void save_checkpoint(const std::string& path, const TrainState& state);
// Restores into a state built by init_train_state from the same config.
void load_checkpoint(const std::string& path, TrainState& state);

}  // namespace polyflow
