#include "polyflow/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "polyflow/errors.hpp"

namespace polyflow {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads an object while recording which keys were consumed so leftovers can
// be rejected.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(fmt::format("{}.{}: wrong type", where_, key));
    }
  }

  const json* sub(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(fmt::format("{}: unknown key '{}'", where_, it.key()));
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

template <class E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<PathKind> kPathNames[] = {{PathKind::trig, "trig"}, {PathKind::linear, "linear"}};
constexpr EnumName<WeightingKind> kWeightingNames[] = {
    {WeightingKind::uniform, "uniform"}, {WeightingKind::variational_poly, "variational_poly"}, {WeightingKind::mlp, "mlp"}};
constexpr EnumName<TimeSamplerKind> kTimeSamplerNames[] = {{TimeSamplerKind::logit_normal, "logit_normal"},
                                                           {TimeSamplerKind::uniform, "uniform"}};
constexpr EnumName<SamplerMethod> kMethodNames[] = {
    {SamplerMethod::euler, "euler"}, {SamplerMethod::heun, "heun"}, {SamplerMethod::trig_exact, "trig_exact"}};
constexpr EnumName<ConditioningMode> kConditioningNames[] = {{ConditioningMode::exact, "exact"},
                                                             {ConditioningMode::interpolated, "interpolated"}};
constexpr EnumName<DataKind> kDataNames[] = {
    {DataKind::maze, "maze"}, {DataKind::gaussian_1d, "gaussian_1d"}, {DataKind::eight_gaussians, "eight_gaussians"}};

template <class E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <class E, std::size_t N>
void get_enum(Reader& r, const char* key, const EnumName<E> (&table)[N], E& out) {
  std::string s;
  bool present = false;
  if (const json* j = r.sub(key)) {
    if (!j->is_string()) throw ConfigError(r.path(key) + ": expected a string");
    s = j->get<std::string>();
    present = true;
  }
  if (!present) return;
  for (const auto& e : table)
    if (s == e.name) {
      out = e.value;
      return;
    }
  std::string allowed;
  for (const auto& e : table) allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
  throw ConfigError(fmt::format("{}: '{}' is not one of {}", r.path(key), s, allowed));
}

void read_cell(Reader& r, const char* key, Cell& c) {
  std::vector<int> v;
  r.get(key, v);
  if (const json* j = r.sub(key); j && v.size() != 2) throw ConfigError(r.path(key) + ": expected [x, y]");
  if (v.size() == 2) c = {v[0], v[1]};
}

void read_maze(const json& j, MazeSpec& maze) {
  Reader r(j, "maze");
  std::vector<std::string> layout;
  r.get("layout", layout);
  std::string id = layout.empty() ? maze.id : "custom";
  r.get("id", id);
  if (!layout.empty()) {
    maze = maze_from_rows(id, layout, maze.start, maze.goal);
  } else if (id != maze.id) {
    maze = make_maze(id);
  }
  read_cell(r, "start", maze.start);
  read_cell(r, "goal", maze.goal);
  r.get("cell_size", maze.cell_size);
  r.get("dt", maze.dt);
  r.get("max_speed", maze.max_speed);
  r.get("max_accel", maze.max_accel);
  r.get("cruise_speed", maze.cruise_speed);
  r.get("position_gain", maze.position_gain);
  r.get("velocity_gain", maze.velocity_gain);
  r.get("waypoint_radius", maze.waypoint_radius);
  r.get("goal_radius", maze.goal_radius);
  r.get("start_jitter", maze.start_jitter);
  r.finish();
}

void read_lambda(const json& j, LambdaFn& lambda) {
  if (j.is_string()) {
    if (j.get<std::string>() != "one") throw ConfigError("train.lambda: expected \"one\" or a table of [sigma, lambda] pairs");
    lambda = LambdaFn::one();
    return;
  }
  std::vector<std::pair<double, double>> table;
  try {
    for (const auto& row : j) {
      const auto v = row.get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("train.lambda: rows must be [sigma, lambda]");
      table.emplace_back(v[0], v[1]);
    }
  } catch (const json::exception&) {
    throw ConfigError("train.lambda: expected a table of [sigma, lambda] pairs");
  }
  try {
    lambda = LambdaFn::from_table(std::move(table));
  } catch (const InvalidInputError& e) {
    throw ConfigError(std::string("train.lambda: ") + e.what());
  }
}

void read_train(const json& j, ExperimentConfig& cfg) {
  Reader r(j, "train");
  TrainConfig& t = cfg.train;
  get_enum(r, "path", kPathNames, t.path);
  r.get("sigma_d", t.sigma_d);
  get_enum(r, "weighting", kWeightingNames, t.weighting);
  if (const json* ts = r.sub("time_sampler")) {
    Reader tr(*ts, "train.time_sampler");
    get_enum(tr, "kind", kTimeSamplerNames, t.time_sampler.kind);
    tr.get("p_mean", t.time_sampler.p_mean);
    tr.get("p_std", t.time_sampler.p_std);
    tr.finish();
  }
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("total_steps", t.total_steps);
  r.get("ema_rates", t.ema_rates);
  r.get("poly_degree", t.poly_degree);
  r.get("poly_mu", t.poly_mu);
  r.get("poly_ridge", t.poly_ridge);
  r.get("loss_floor", t.loss_floor);
  r.get("hidden", t.hidden);
  r.get("time_freqs", t.time_freqs);
  r.get("mlp_weight_freqs", t.mlp_weight_freqs);
  r.get("mlp_weight_width", t.mlp_weight_width);
  if (const json* l = r.sub("lambda")) read_lambda(*l, t.lambda);
  r.get("log_interval", t.log_interval);
  r.get("normalize", t.normalize);
  r.get("condition_training", cfg.condition_training);
  r.get("log_wall_time", t.log_wall_time);
  r.get("divergence_limit", t.divergence_limit);
  r.finish();
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void validate_config(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  if (d.kind == DataKind::maze) {
    validate_maze(cfg.maze);
    check(d.maze_dataset.n_traj >= 1, "data.n_traj must be positive");
    check(d.maze_dataset.horizon >= 2, "data.horizon must be at least 2");
    check(d.maze_dataset.stride >= 1, "data.stride must be positive");
  } else {
    check(d.n_samples >= 1, "data.n_samples must be positive");
    check(d.eight.radius > 0.0 && d.eight.cluster_std > 0.0, "data.radius and data.cluster_std must be positive");
  }
  const int dim = d.kind == DataKind::maze ? 4 * d.maze_dataset.horizon : (d.kind == DataKind::gaussian_1d ? 1 : 2);
  effective_train_config(cfg, dim).validate();
  check(cfg.sampler.n_steps >= 1, "sampler.n_steps must be positive");
  check(!(cfg.sampler.method == SamplerMethod::trig_exact && cfg.train.path == PathKind::linear),
        "sampler.method trig_exact requires the trig path");
  const auto& id = cfg.inverse_dynamics;
  check(id.steps >= 1 && id.batch_size >= 1 && id.lr > 0.0, "inverse_dynamics steps, batch_size and lr must be positive");
  check(id.holdout_fraction >= 0.0 && id.holdout_fraction < 1.0, "inverse_dynamics.holdout_fraction must be in [0, 1)");
  for (int h : id.hidden) check(h >= 1, "inverse_dynamics.hidden widths must be positive");
  const auto& e = cfg.eval;
  check(e.interval >= 1, "eval.interval must be positive");
  check(e.episodes >= 1, "eval.episodes must be positive");
  check(e.samples >= 1, "eval.samples must be positive");
  check(e.threshold_fraction > 0.0, "eval.threshold_fraction must be positive");
  check(e.ema_index >= -1 && e.ema_index < static_cast<int>(cfg.train.ema_rates.size()),
        "eval.ema_index must be -1 or index train.ema_rates");
  check(cfg.checkpoint_interval >= 0, "checkpoint_interval must be non-negative");
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  Reader r(j, "config");
  ExperimentConfig cfg;
  const json* ver = r.sub("schema_version");
  if (!ver) throw ConfigError("config: missing schema_version");
  if (!ver->is_number_integer() || ver->get<int>() != kConfigSchemaVersion)
    throw ConfigError(fmt::format("config: unsupported schema_version (expected {})", kConfigSchemaVersion));
  r.get("name", cfg.name);
  r.get("seed", cfg.seed);
  if (const json* d = r.sub("data")) {
    Reader dr(*d, "data");
    get_enum(dr, "kind", kDataNames, cfg.data.kind);
    dr.get("n_traj", cfg.data.maze_dataset.n_traj);
    dr.get("horizon", cfg.data.maze_dataset.horizon);
    dr.get("stride", cfg.data.maze_dataset.stride);
    dr.get("n_samples", cfg.data.n_samples);
    dr.get("radius", cfg.data.eight.radius);
    dr.get("cluster_std", cfg.data.eight.cluster_std);
    dr.finish();
  }
  if (const json* m = r.sub("maze")) read_maze(*m, cfg.maze);
  if (const json* t = r.sub("train")) read_train(*t, cfg);
  if (const json* s = r.sub("sampler")) {
    Reader sr(*s, "sampler");
    get_enum(sr, "method", kMethodNames, cfg.sampler.method);
    sr.get("n_steps", cfg.sampler.n_steps);
    get_enum(sr, "conditioning", kConditioningNames, cfg.conditioning);
    sr.finish();
  }
  if (const json* s = r.sub("inverse_dynamics")) {
    Reader ir(*s, "inverse_dynamics");
    ir.get("hidden", cfg.inverse_dynamics.hidden);
    ir.get("steps", cfg.inverse_dynamics.steps);
    ir.get("batch_size", cfg.inverse_dynamics.batch_size);
    ir.get("lr", cfg.inverse_dynamics.lr);
    ir.get("holdout_fraction", cfg.inverse_dynamics.holdout_fraction);
    ir.finish();
  }
  if (const json* s = r.sub("eval")) {
    Reader er(*s, "eval");
    er.get("interval", cfg.eval.interval);
    er.get("episodes", cfg.eval.episodes);
    er.get("seed", cfg.eval.seed);
    if (const json* th = er.sub("threshold"); th && !th->is_null()) {
      if (!th->is_number()) throw ConfigError("eval.threshold: expected a number or null");
      cfg.eval.threshold = th->get<double>();
    }
    er.get("threshold_fraction", cfg.eval.threshold_fraction);
    er.get("ema_index", cfg.eval.ema_index);
    er.get("samples", cfg.eval.samples);
    er.finish();
  }
  r.get("checkpoint_interval", cfg.checkpoint_interval);
  r.finish();
  cfg.inverse_dynamics.seed = cfg.seed;
  validate_config(cfg);
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  json lambda;
  if (t.lambda.kind == LambdaFn::Kind::constant_one) {
    lambda = "one";
  } else {
    lambda = json::array();
    for (const auto& [s, l] : t.lambda.table) lambda.push_back({s, l});
  }
  const MazeSpec& m = cfg.maze;
  json doc = {
      {"schema_version", cfg.schema_version},
      {"name", cfg.name},
      {"seed", cfg.seed},
      {"data",
       {{"kind", enum_name(kDataNames, cfg.data.kind)},
        {"n_traj", cfg.data.maze_dataset.n_traj},
        {"horizon", cfg.data.maze_dataset.horizon},
        {"stride", cfg.data.maze_dataset.stride},
        {"n_samples", cfg.data.n_samples},
        {"radius", cfg.data.eight.radius},
        {"cluster_std", cfg.data.eight.cluster_std}}},
      {"maze",
       {{"id", m.id},
        {"layout", maze_rows(m)},
        {"start", {m.start.x, m.start.y}},
        {"goal", {m.goal.x, m.goal.y}},
        {"cell_size", m.cell_size},
        {"dt", m.dt},
        {"max_speed", m.max_speed},
        {"max_accel", m.max_accel},
        {"cruise_speed", m.cruise_speed},
        {"position_gain", m.position_gain},
        {"velocity_gain", m.velocity_gain},
        {"waypoint_radius", m.waypoint_radius},
        {"goal_radius", m.goal_radius},
        {"start_jitter", m.start_jitter}}},
      {"train",
       {{"path", enum_name(kPathNames, t.path)},
        {"sigma_d", t.sigma_d},
        {"weighting", enum_name(kWeightingNames, t.weighting)},
        {"time_sampler",
         {{"kind", enum_name(kTimeSamplerNames, t.time_sampler.kind)},
          {"p_mean", t.time_sampler.p_mean},
          {"p_std", t.time_sampler.p_std}}},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"total_steps", t.total_steps},
        {"ema_rates", t.ema_rates},
        {"poly_degree", t.poly_degree},
        {"poly_mu", t.poly_mu},
        {"poly_ridge", t.poly_ridge},
        {"loss_floor", t.loss_floor},
        {"hidden", t.hidden},
        {"time_freqs", t.time_freqs},
        {"mlp_weight_freqs", t.mlp_weight_freqs},
        {"mlp_weight_width", t.mlp_weight_width},
        {"lambda", lambda},
        {"log_interval", t.log_interval},
        {"normalize", t.normalize},
        {"condition_training", cfg.condition_training},
        {"log_wall_time", t.log_wall_time},
        {"divergence_limit", t.divergence_limit}}},
      {"sampler",
       {{"method", enum_name(kMethodNames, cfg.sampler.method)},
        {"n_steps", cfg.sampler.n_steps},
        {"conditioning", enum_name(kConditioningNames, cfg.conditioning)}}},
      {"inverse_dynamics",
       {{"hidden", cfg.inverse_dynamics.hidden},
        {"steps", cfg.inverse_dynamics.steps},
        {"batch_size", cfg.inverse_dynamics.batch_size},
        {"lr", cfg.inverse_dynamics.lr},
        {"holdout_fraction", cfg.inverse_dynamics.holdout_fraction}}},
      {"eval",
       {{"interval", cfg.eval.interval},
        {"episodes", cfg.eval.episodes},
        {"seed", cfg.eval.seed},
        {"threshold", cfg.eval.threshold ? json(*cfg.eval.threshold) : json(nullptr)},
        {"threshold_fraction", cfg.eval.threshold_fraction},
        {"ema_index", cfg.eval.ema_index},
        {"samples", cfg.eval.samples}}},
      {"checkpoint_interval", cfg.checkpoint_interval},
  };
  return doc;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: invalid JSON ({})", path, e.what()));
  }
}

ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

json merge_config(json base, const json& patch) {
  base.merge_patch(patch);
  return base;
}

TrainConfig effective_train_config(const ExperimentConfig& cfg, int data_dim) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  t.time_sampler.path = t.path;
  t.time_sampler.sigma_d = t.sigma_d;
  t.clamp_dims.clear();
  if (cfg.data.kind == DataKind::maze && cfg.condition_training) {
    if (data_dim != 4 * cfg.data.maze_dataset.horizon)
      throw ConfigError(fmt::format("dataset dimension {} does not match horizon {}", data_dim, cfg.data.maze_dataset.horizon));
    t.clamp_dims = plan_conditioned_dims(cfg.data.maze_dataset.horizon);
  }
  return t;
}

namespace {
constexpr std::uint64_t kDataStream = 0x64617461;  // "data"
constexpr std::uint64_t kSampleStream = 0x73616d70;  // "samp"
}  // namespace

MazeDataset make_maze_dataset(const ExperimentConfig& cfg) {
  if (cfg.data.kind != DataKind::maze) throw ConfigError("config does not describe maze data");
  RngStream rng = RngStream(cfg.seed).split(kDataStream);
  return generate_dataset(cfg.maze, cfg.data.maze_dataset, rng);
}

Matrix make_toy_data(const ExperimentConfig& cfg) {
  RngStream rng = RngStream(cfg.seed).split(kDataStream);
  switch (cfg.data.kind) {
    case DataKind::gaussian_1d:
      return gaussian_1d(cfg.data.n_samples, rng);
    case DataKind::eight_gaussians:
      return cfg.data.eight.sample(cfg.data.n_samples, rng);
    case DataKind::maze:
      break;
  }
  throw ConfigError("config does not describe toy data");
}

Denoiser eval_model(const TrainState& state, int ema_index) {
  Denoiser m = state.model;
  if (ema_index >= 0) {
    if (ema_index >= static_cast<int>(state.emas.size())) throw ConfigError("eval.ema_index out of range");
    m.net().set_params(state.emas[static_cast<std::size_t>(ema_index)].shadow);
  }
  return m;
}

Planner make_planner(const ExperimentConfig& cfg, const TrainState& state, const Denoiser& model,
                     const InverseDynamicsModel& inv_dyn) {
  Planner p;
  p.model = &model;
  p.path = state.path;
  p.normalizer = state.normalizer;
  p.inv_dyn = &inv_dyn;
  p.sampler = cfg.sampler;
  p.horizon = cfg.data.maze_dataset.horizon;
  p.stride = cfg.data.maze_dataset.stride;
  p.conditioning = cfg.conditioning;
  return p;
}

std::optional<std::int64_t> steps_to_threshold(std::span<const CurvePoint> curve, double threshold) {
  if (curve.empty()) throw InvalidInputError("steps_to_threshold: empty curve");
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i].first <= curve[i - 1].first) throw InvalidInputError("steps_to_threshold: steps must increase");
  for (const auto& [step, metric] : curve)
    if (metric >= threshold) return step;
  return std::nullopt;
}

// Comparison ------------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::int64_t> eval_grid(const ExperimentConfig& cfg) {
  std::vector<std::int64_t> g;
  for (std::int64_t s = cfg.eval.interval; s <= cfg.train.total_steps; s += cfg.eval.interval) g.push_back(s);
  return g;
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'; });
}

}  // namespace

const RunCurve& ComparisonReport::run(const std::string& variant, std::uint64_t seed) const {
  for (const auto& r : runs)
    if (r.variant == variant && r.seed == seed) return r;
  throw InvalidInputError("no run for variant " + variant);
}

std::vector<double> ComparisonReport::median_curve(const std::string& variant) const {
  std::vector<double> out;
  for (std::size_t i = 0; i < eval_steps.size(); ++i) {
    std::vector<double> v;
    for (auto s : seeds) v.push_back(run(variant, s).points.at(i).success_rate);
    out.push_back(median_of(std::move(v)));
  }
  return out;
}

std::optional<double> ComparisonReport::median_steps_to_threshold(const std::string& variant) const {
  std::vector<double> v;
  for (auto s : seeds) {
    const auto& r = run(variant, s);
    v.push_back(r.steps_to_threshold ? static_cast<double>(*r.steps_to_threshold) : INFINITY);
  }
  const double m = median_of(std::move(v));
  if (!std::isfinite(m)) return std::nullopt;
  return m;
}

double ComparisonReport::median_u_variance(const std::string& variant, std::int64_t step) const {
  std::vector<double> v;
  for (auto s : seeds) {
    const auto& r = run(variant, s);
    const auto& recs = r.log.records();
    auto it = std::find_if(recs.begin(), recs.end(), [&](const StepRecord& rec) { return rec.step == step; });
    if (it == recs.end()) throw InvalidInputError(fmt::format("no metrics recorded at step {}", step));
    v.push_back(u_grid_variance(it->u_grid));
  }
  return median_of(std::move(v));
}

bool is_comparison_document(const json& j) { return j.is_object() && j.contains("variants"); }

ComparisonSuite suite_from_json(const json& j) {
  Reader r(j, "comparison");
  const json* ver = r.sub("schema_version");
  if (!ver || !ver->is_number_integer() || ver->get<int>() != kConfigSchemaVersion)
    throw ConfigError(fmt::format("comparison: unsupported or missing schema_version (expected {})", kConfigSchemaVersion));
  json base = json::object();
  if (const json* b = r.sub("base")) base = *b;
  if (!base.is_object()) throw ConfigError("comparison.base: expected an object");
  base["schema_version"] = kConfigSchemaVersion;
  ComparisonSuite suite;
  r.get("seeds", suite.seeds);
  const json* vars = r.sub("variants");
  if (!vars || !vars->is_array()) throw ConfigError("comparison.variants: expected an array");
  for (const auto& v : *vars) {
    Reader vr(v, "comparison.variants[]");
    NamedConfig nc;
    vr.get("name", nc.name);
    json overrides = json::object();
    if (const json* o = vr.sub("overrides")) overrides = *o;
    vr.finish();
    if (overrides.contains("schema_version")) throw ConfigError("variant overrides may not change schema_version");
    nc.document = merge_config(base, overrides);
    nc.config = config_from_json(nc.document);
    if (nc.name.empty()) nc.name = nc.config.name;
    nc.config.name = nc.name;
    nc.document["name"] = nc.name;
    suite.variants.push_back(std::move(nc));
  }
  r.finish();
  return suite;
}

ComparisonReport run_comparison(const ComparisonSuite& suite, int workers, const ProgressFn& progress) {
  if (suite.variants.size() < 2) throw ConfigError("comparison needs at least two variants");
  if (suite.seeds.empty()) throw ConfigError("comparison needs at least one seed");
  std::set<std::string> names;
  for (const auto& v : suite.variants) {
    if (!valid_name(v.name)) throw ConfigError(fmt::format("invalid variant name '{}'", v.name));
    if (!names.insert(v.name).second) throw ConfigError(fmt::format("duplicate variant name '{}'", v.name));
    if (v.config.data.kind != DataKind::maze) throw ConfigError("comparison runs require maze data");
  }
  const ExperimentConfig& first = suite.variants.front().config;
  const auto grid = eval_grid(first);
  if (grid.empty()) throw ConfigError("eval.interval exceeds train.total_steps; no evaluation points");
  for (const auto& v : suite.variants) {
    const auto& c = v.config;
    if (eval_grid(c) != grid || c.eval.episodes != first.eval.episodes || c.eval.seed != first.eval.seed)
      throw ConfigError(fmt::format("variant '{}' has a different evaluation grid", v.name));
    if (config_to_json(c)["maze"] != config_to_json(first)["maze"] || c.eval.threshold != first.eval.threshold ||
        c.eval.threshold_fraction != first.eval.threshold_fraction)
      throw ConfigError(fmt::format("variant '{}' is evaluated on a different task", v.name));
  }

  ComparisonReport report;
  for (const auto& v : suite.variants) report.variants.push_back(v.name);
  report.seeds = suite.seeds;
  report.eval_steps = grid;

  OraclePolicy oracle(first.maze);
  const EvalReport oracle_rep = rollout_eval(first.maze, oracle, first.data.maze_dataset.horizon,
                                             first.data.maze_dataset.stride, first.eval.episodes, first.eval.seed);
  report.oracle_success = oracle_rep.success_rate;
  report.threshold = first.eval.threshold ? *first.eval.threshold : first.eval.threshold_fraction * oracle_rep.success_rate;

  // Datasets and inverse dynamics shared across variants with the same data settings.
  struct Shared {
    MazeDataset data;
    InverseDynamicsModel inv_dyn;
  };
  std::map<std::string, std::shared_ptr<const Shared>> shared;
  struct Job {
    const NamedConfig* variant;
    std::uint64_t seed;
    ExperimentConfig cfg;
    std::shared_ptr<const Shared> shared;
  };
  std::vector<Job> jobs;
  for (const auto& v : suite.variants) {
    for (auto seed : suite.seeds) {
      ExperimentConfig cfg = v.config;
      cfg.seed = seed;
      cfg.inverse_dynamics.seed = seed;
      const json doc = config_to_json(cfg);
      const std::string key = fmt::format("{}|{}|{}|{}", seed, doc["data"].dump(), doc["maze"].dump(),
                                          doc["inverse_dynamics"].dump());
      auto& slot = shared[key];
      if (!slot) {
        if (progress) progress(fmt::format("dataset and inverse dynamics for seed {}", seed));
        auto s = std::make_shared<Shared>();
        s->data = make_maze_dataset(cfg);
        s->inv_dyn = train_inverse_dynamics(s->data, cfg.maze.max_accel, cfg.inverse_dynamics);
        slot = std::move(s);
      }
      jobs.push_back({&v, seed, std::move(cfg), slot});
    }
  }

  std::vector<RunCurve> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& job = jobs[i];
        RunCurve rc;
        rc.variant = job.variant->name;
        rc.seed = job.seed;
        const MazeDataset& data = job.shared->data;
        const Matrix raw = data.flat_states();
        const TrainConfig tc = effective_train_config(job.cfg, static_cast<int>(raw.rows()));
        const auto on_step = [&](const TrainState& st, const StepRecord& rec) {
          if (rec.step % job.cfg.eval.interval != 0) return;
          const Denoiser model = eval_model(st, job.cfg.eval.ema_index);
          const Planner planner = make_planner(job.cfg, st, model, job.shared->inv_dyn);
          const EvalReport er = rollout_eval(job.cfg.maze, planner, job.cfg.eval.episodes, job.cfg.eval.seed);
          rc.points.push_back({rec.step, er.success_rate, er.mean_steps_to_goal, rec.raw_loss, u_grid_variance(rec.u_grid)});
          if (progress) {
            std::lock_guard lock(progress_mu);
            progress(fmt::format("{} seed {} step {} success {}", rc.variant, rc.seed, rec.step, er.success_rate));
          }
        };
        TrainResult res = train(tc, raw, data.feature_normalizer(), on_step);
        rc.divergence = res.divergence;
        // A diverged run scores zero for the rest of the grid.
        const double budget = 4.0 * job.cfg.data.maze_dataset.horizon * job.cfg.data.maze_dataset.stride;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        while (rc.points.size() < grid.size()) rc.points.push_back({grid[rc.points.size()], 0.0, budget, nan, nan});
        std::vector<CurvePoint> curve;
        for (const auto& p : rc.points) curve.emplace_back(p.step, p.success_rate);
        rc.steps_to_threshold = steps_to_threshold(curve, report.threshold);
        rc.log = std::move(res.log);
        results[i] = std::move(rc);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  int n_workers = workers > 0 ? workers : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  n_workers = std::min<int>(n_workers, static_cast<int>(jobs.size()));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  report.runs = std::move(results);
  return report;
}

namespace {

std::string fmt_opt(const std::optional<std::int64_t>& v) { return v ? fmt::format("{}", *v) : std::string(); }
std::string fmt_opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create directory {}: {}", dir, ec.message()));
}

}  // namespace

void write_comparison(const ComparisonReport& report, const ComparisonSuite& suite, const std::string& out_dir) {
  ensure_dir(out_dir);
  ensure_dir(out_dir + "/metrics");
  ensure_dir(out_dir + "/configs");

  std::string curves = "variant,seed,step,success_rate,mean_steps_to_goal,raw_loss,u_grid_variance\n";
  for (const auto& r : report.runs)
    for (const auto& p : r.points)
      curves += fmt::format("{},{},{},{},{},{},{}\n", r.variant, r.seed, p.step, p.success_rate, p.mean_steps_to_goal,
                            p.raw_loss, p.u_grid_variance);
  write_text_file(out_dir + "/curves.csv", curves);

  std::string median = "variant,step,success_rate\n";
  ChartSpec chart{"Success rate (median over seeds)", "training step", "success rate", {}};
  for (const auto& v : report.variants) {
    const auto m = report.median_curve(v);
    ChartSeries s{v, {}, {}};
    for (std::size_t i = 0; i < m.size(); ++i) {
      median += fmt::format("{},{},{}\n", v, report.eval_steps[i], m[i]);
      s.xs.push_back(static_cast<double>(report.eval_steps[i]));
      s.ys.push_back(m[i]);
    }
    chart.series.push_back(std::move(s));
  }
  write_text_file(out_dir + "/median.csv", median);
  write_text_file(out_dir + "/report.svg", render_svg(chart));

  std::string summary = "variant,seed,steps_to_threshold,diverged\n";
  for (const auto& r : report.runs)
    summary += fmt::format("{},{},{},{}\n", r.variant, r.seed, fmt_opt(r.steps_to_threshold), r.divergence ? 1 : 0);
  for (const auto& v : report.variants)
    summary += fmt::format("{},median,{},\n", v, fmt_opt(report.median_steps_to_threshold(v)));
  write_text_file(out_dir + "/summary.csv", summary);

  std::string seeds;
  for (auto s : report.seeds) seeds += fmt::format("{}{}", seeds.empty() ? "" : " ", s);
  write_text_file(out_dir + "/meta.csv", fmt::format("key,value\noracle_success,{}\nthreshold,{}\nseeds,{}\n",
                                                     report.oracle_success, report.threshold, seeds));

  for (const auto& r : report.runs)
    write_text_file(fmt::format("{}/metrics/{}_seed{}.csv", out_dir, r.variant, r.seed), r.log.to_csv());
  json variants = json::array();
  for (const auto& v : suite.variants) {
    write_text_file(fmt::format("{}/configs/{}.json", out_dir, v.name), config_to_json(v.config).dump(2) + "\n");
    variants.push_back(v.name);
  }
  const json archived = {{"seeds", report.seeds}, {"variants", variants}};
  write_text_file(out_dir + "/configs/suite.json", archived.dump(2) + "\n");
}

// Files -----------------------------------------------------------------

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CsvTable t;
  std::string line;
  const auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    auto cells = split(line);
    if (cells.size() != t.header.size())
      throw InvalidInputError(fmt::format("{}: row has {} cells, header has {}", path, cells.size(), t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw InvalidInputError(path + ": empty CSV");
  return t;
}

}  // namespace polyflow
