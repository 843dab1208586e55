#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyflow/planenv.hpp"
#include "polyflow/sampler.hpp"
#include "polyflow/toydata.hpp"
#include "polyflow/trainer.hpp"

namespace polyflow {

inline constexpr int kConfigSchemaVersion = 1;

enum class DataKind { maze, gaussian_1d, eight_gaussians };

struct DataConfig {
  DataKind kind = DataKind::maze;
  DatasetConfig maze_dataset;
  // Toy datasets.
  std::size_t n_samples = 10000;
  EightGaussians eight;
};

struct EvalConfig {
  std::int64_t interval = 250;
  int episodes = 50;
  std::uint64_t seed = 1000;
  // Absolute success-rate threshold; when unset it is threshold_fraction
  // times the scripted controller's success rate on the same episodes.
  std::optional<double> threshold;
  double threshold_fraction = 0.8;
  // Index into train.ema_rates of the parameter average used for evaluation;
  // -1 evaluates the raw parameters.
  int ema_index = -1;
  // Generated samples for toy-data evaluation.
  int samples = 2000;
};

// Everything needed to reproduce a run from one document.
struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name = "run";
  std::uint64_t seed = 0;
  DataConfig data;
  MazeSpec maze = make_maze("u");
  TrainConfig train;
  // Train with the planning coordinates clamped (maze data only).
  bool condition_training = true;
  SamplerConfig sampler;
  ConditioningMode conditioning = ConditioningMode::exact;
  InverseDynamicsConfig inverse_dynamics;
  EvalConfig eval;
  std::int64_t checkpoint_interval = 0;
};

// Throws ConfigError on unknown keys, wrong types, a missing or unsupported
// schema_version, or invalid values. Missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
// Complete document with every field spelled out.
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);
nlohmann::json read_json_file(const std::string& path);
// RFC 7386 merge patch applied to a config document.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& patch);

// TrainConfig with the run seed, path-dependent sampler fields and the
// conditioning clamp filled in for `data_dim` dimensional data.
TrainConfig effective_train_config(const ExperimentConfig& cfg, int data_dim);

MazeDataset make_maze_dataset(const ExperimentConfig& cfg);
// Columns are samples.
Matrix make_toy_data(const ExperimentConfig& cfg);

// Denoiser holding either the raw or an averaged parameter set.
Denoiser eval_model(const TrainState& state, int ema_index);
Planner make_planner(const ExperimentConfig& cfg, const TrainState& state, const Denoiser& model,
                     const InverseDynamicsModel& inv_dyn);

using CurvePoint = std::pair<std::int64_t, double>;

// First step whose metric reaches the threshold (inclusive), or none.
// Throws InvalidInputError on an empty curve or non-increasing steps.
std::optional<std::int64_t> steps_to_threshold(std::span<const CurvePoint> curve, double threshold);

struct EvalPoint {
  std::int64_t step = 0;
  double success_rate = 0.0;
  double mean_steps_to_goal = 0.0;
  double raw_loss = 0.0;
  double u_grid_variance = 0.0;
};

struct RunCurve {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<EvalPoint> points;
  std::optional<std::int64_t> steps_to_threshold;
  std::optional<std::string> divergence;
  MetricLog log;
};

struct ComparisonReport {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<std::int64_t> eval_steps;
  double oracle_success = 0.0;
  double threshold = 0.0;
  // Ordered variant-major, then seed.
  std::vector<RunCurve> runs;

  const RunCurve& run(const std::string& variant, std::uint64_t seed) const;
  // Median over seeds at every eval step.
  std::vector<double> median_curve(const std::string& variant) const;
  // Median over seeds; a run that never reaches the threshold counts as
  // later than any finite value.
  std::optional<double> median_steps_to_threshold(const std::string& variant) const;
  // Median over seeds of the u-grid variance recorded at `step`.
  double median_u_variance(const std::string& variant, std::int64_t step) const;
};

struct NamedConfig {
  std::string name;
  ExperimentConfig config;
  nlohmann::json document;
};

// Comparison suite document:
//   {"schema_version": 1, "base": {...}, "seeds": [...],
//    "variants": [{"name": "...", "overrides": {...}}, ...]}
// Each variant is the base merged with its overrides.
struct ComparisonSuite {
  std::vector<NamedConfig> variants;
  std::vector<std::uint64_t> seeds;
};

bool is_comparison_document(const nlohmann::json& j);
ComparisonSuite suite_from_json(const nlohmann::json& j);

using ProgressFn = std::function<void(const std::string&)>;

// Trains every variant for every seed with periodic closed-loop evaluation.
// The dataset and inverse dynamics model are built once per seed and shared
// by all variants with identical data settings. Throws ConfigError with
// fewer than two variants, non-maze data, or differing eval step grids.
ComparisonReport run_comparison(const ComparisonSuite& suite, int workers = 0, const ProgressFn& progress = {});

// Writes curves.csv, median.csv, summary.csv, report.svg, metrics/ and
// configs/ into out_dir.
void write_comparison(const ComparisonReport& report, const ComparisonSuite& suite, const std::string& out_dir);

struct ChartSeries {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<ChartSeries> series;
};

// Plot area in pixels and the data range it maps.
struct ChartFrame {
  double width = 720.0;
  double height = 440.0;
  double left = 70.0;
  double right = 170.0;
  double top = 40.0;
  double bottom = 60.0;
  double x_min = 0.0;
  double x_max = 1.0;
  double y_min = 0.0;
  double y_max = 1.0;

  double px(double x) const;
  double py(double y) const;
};

ChartFrame chart_frame(const ChartSpec& spec);
// Self-contained SVG line chart: axes with ticks, one polyline per series
// (non-finite points dropped) and a legend.
std::string render_svg(const ChartSpec& spec);

// Minimal CSV table: header plus string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// Command-line entry point. Returns the process exit code: 0 on success,
// 2 on configuration errors, 3 on any other error. Diagnostics go to `err`
// as a single line "error: <kind>: <message>".
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace polyflow
