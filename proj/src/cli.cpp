#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "polyflow/errors.hpp"
#include "polyflow/harness.hpp"

namespace polyflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool multi_config = false) {
  if (multi_config)
    cmd->add_option("--config", o.configs, "Config file (repeatable)")->check(CLI::ExistingFile);
  else
    cmd->add_option("--config", o.configs, "Config file")->check(CLI::ExistingFile)->expected(0, 1);
  cmd->add_option("--seed", o.seed, "Override the run seed");
  cmd->add_option("--steps", o.steps, "Override train.total_steps");
  cmd->add_option("--out", o.out, "Output directory")->required();
  cmd->add_flag("--quiet", o.quiet, "Suppress progress output");
}

json apply_overrides(json doc, const CommonOptions& o) {
  if (o.seed) doc["seed"] = *o.seed;
  if (o.steps) doc["train"]["total_steps"] = *o.steps;
  return doc;
}

json default_document() { return json{{"schema_version", kConfigSchemaVersion}}; }

ExperimentConfig single_config(const CommonOptions& o, json* doc_out = nullptr) {
  json doc = o.configs.empty() ? default_document() : read_json_file(o.configs.front());
  if (is_comparison_document(doc)) throw ConfigError("expected a run config, got a comparison suite");
  doc = apply_overrides(std::move(doc), o);
  ExperimentConfig cfg = config_from_json(doc);
  if (doc_out) *doc_out = config_to_json(cfg);
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create directory {}: {}", dir, ec.message()));
}

std::string samples_csv(const Matrix& x) {
  std::string s;
  for (Eigen::Index r = 0; r < x.rows(); ++r) s += fmt::format("{}x{}", r ? "," : "", r);
  s += '\n';
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) s += fmt::format("{}{}", r ? "," : "", x(r, j));
    s += '\n';
  }
  return s;
}

class Progress {
 public:
  Progress(std::ostream& err, bool quiet) : err_(err), quiet_(quiet) {}
  void operator()(const std::string& msg) const {
    if (!quiet_) err_ << msg << '\n' << std::flush;
  }

 private:
  std::ostream& err_;
  bool quiet_;
};

int cmd_gen_data(const CommonOptions& o, std::ostream& out, const Progress& progress) {
  const ExperimentConfig cfg = single_config(o);
  ensure_dir(o.out);
  if (cfg.data.kind == DataKind::maze) {
    const MazeDataset d = make_maze_dataset(cfg);
    const std::string path = o.out + "/dataset.json";
    save_dataset(path, d);
    progress(fmt::format("{} attempts, {} reached, {} collisions", d.attempts, d.reached, d.collisions));
    out << fmt::format("wrote {} trajectories (H={}, m={}) to {}\n", d.trajectories.size(), d.horizon, d.stride, path);
  } else {
    const std::string path = o.out + "/dataset.csv";
    const Matrix x = make_toy_data(cfg);
    write_text_file(path, samples_csv(x));
    out << fmt::format("wrote {} samples to {}\n", x.cols(), path);
  }
  return 0;
}

struct LoadedData {
  Matrix raw;
  std::optional<Normalizer> normalizer;
  std::optional<MazeDataset> maze;
};

LoadedData load_data(const ExperimentConfig& cfg, const std::string& data_path) {
  LoadedData d;
  if (cfg.data.kind == DataKind::maze) {
    d.maze = data_path.empty() ? make_maze_dataset(cfg) : load_dataset(data_path);
    if (d.maze->horizon != cfg.data.maze_dataset.horizon || d.maze->stride != cfg.data.maze_dataset.stride)
      throw ConfigError("dataset horizon/stride differ from the config");
    d.raw = d.maze->flat_states();
    d.normalizer = d.maze->feature_normalizer();
  } else {
    if (!data_path.empty()) throw ConfigError("--data only applies to maze configs");
    d.raw = make_toy_data(cfg);
  }
  return d;
}

// Keeps the header and rows up to and including `step`.
void truncate_metrics(const std::string& path, std::int64_t step) {
  std::ifstream in(path);
  std::string kept = MetricLog::csv_header();
  if (in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::int64_t s = std::stoll(line.substr(0, line.find(',')));
      if (s <= step) kept += line + '\n';
    }
  }
  write_text_file(path, kept);
}

int cmd_train(const CommonOptions& o, const std::string& data_path, const std::string& resume, std::ostream& out,
              const Progress& progress) {
  json doc;
  const ExperimentConfig cfg = single_config(o, &doc);
  const LoadedData data = load_data(cfg, data_path);
  const TrainConfig tc = effective_train_config(cfg, static_cast<int>(data.raw.rows()));
  ensure_dir(o.out);
  write_text_file(o.out + "/config.json", doc.dump(2) + "\n");

  Normalizer norm = data.normalizer ? *data.normalizer
                                    : (tc.normalize ? Normalizer::fit(data.raw)
                                                    : Normalizer::identity(static_cast<int>(data.raw.rows())));
  TrainResult result{init_train_state(tc, static_cast<int>(data.raw.rows()), std::move(norm)), {}, {}};
  const std::string metrics_path = o.out + "/metrics.csv";
  if (!resume.empty()) {
    load_checkpoint(resume, result.state);
    if (result.state.step > tc.total_steps) throw ConfigError("checkpoint is past train.total_steps");
    truncate_metrics(metrics_path, result.state.step);
    progress(fmt::format("resumed from {} at step {}", resume, result.state.step));
  } else {
    write_text_file(metrics_path, MetricLog::csv_header());
  }

  std::ofstream metrics(metrics_path, std::ios::app | std::ios::binary);
  if (!metrics) throw IoError("cannot append to " + metrics_path);
  const std::int64_t report_every = std::max<std::int64_t>(1, tc.total_steps / 10);
  const auto on_step = [&](const TrainState& st, const StepRecord& rec) {
    if (rec.step % tc.log_interval == 0) metrics << MetricLog::csv_row(rec) << std::flush;
    if (cfg.checkpoint_interval > 0 && st.step % cfg.checkpoint_interval == 0)
      save_checkpoint(fmt::format("{}/checkpoint_{}.cbor", o.out, st.step), st);
    if (rec.step % report_every == 0) progress(fmt::format("step {} raw_loss {}", rec.step, rec.raw_loss));
  };
  continue_training(result, data.raw, on_step);
  metrics.close();
  if (result.divergence) throw DivergenceError(*result.divergence);
  save_checkpoint(o.out + "/final.cbor", result.state);
  out << fmt::format("trained {} steps; metrics in {}\n", result.state.step, metrics_path);
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& data_path, const std::string& checkpoint, std::ostream& out,
             const Progress& progress) {
  const ExperimentConfig cfg = single_config(o);
  const LoadedData data = load_data(cfg, data_path);
  const TrainConfig tc = effective_train_config(cfg, static_cast<int>(data.raw.rows()));
  Normalizer norm = data.normalizer ? *data.normalizer
                                    : (tc.normalize ? Normalizer::fit(data.raw)
                                                    : Normalizer::identity(static_cast<int>(data.raw.rows())));
  TrainState state = init_train_state(tc, static_cast<int>(data.raw.rows()), std::move(norm));
  load_checkpoint(checkpoint, state);
  const Denoiser model = eval_model(state, cfg.eval.ema_index);
  ensure_dir(o.out);

  if (cfg.data.kind == DataKind::maze) {
    progress("training inverse dynamics");
    const InverseDynamicsModel inv = train_inverse_dynamics(*data.maze, cfg.maze.max_accel, cfg.inverse_dynamics);
    const Planner planner = make_planner(cfg, state, model, inv);
    const int H = cfg.data.maze_dataset.horizon, m = cfg.data.maze_dataset.stride;
    const EvalReport planner_rep = rollout_eval(cfg.maze, planner, cfg.eval.episodes, cfg.eval.seed);
    OraclePolicy oracle(cfg.maze);
    const EvalReport oracle_rep = rollout_eval(cfg.maze, oracle, H, m, cfg.eval.episodes, cfg.eval.seed);
    RandomPolicy random(cfg.maze.max_accel);
    const EvalReport random_rep = rollout_eval(cfg.maze, random, H, m, cfg.eval.episodes, cfg.eval.seed);
    std::string csv = "policy,step," + EvalReport::csv_header();
    csv += fmt::format("planner,{},{}", state.step, planner_rep.csv_row());
    csv += fmt::format("oracle,{},{}", state.step, oracle_rep.csv_row());
    csv += fmt::format("random,{},{}", state.step, random_rep.csv_row());
    write_text_file(o.out + "/eval.csv", csv);
    out << fmt::format("planner success {} (oracle {}, random {}); written to {}/eval.csv\n", planner_rep.success_rate,
                       oracle_rep.success_rate, random_rep.success_rate, o.out);
    return 0;
  }

  RngStream rng = RngStream(cfg.seed).split(0x65766c);
  const Matrix gen = state.normalizer.invert(
      sample(as_field(model), state.path, cfg.sampler, rng, static_cast<std::size_t>(cfg.eval.samples),
             static_cast<int>(data.raw.rows())));
  write_text_file(o.out + "/samples.csv", samples_csv(gen));
  std::string csv = "metric,value\n";
  for (Eigen::Index r = 0; r < gen.rows(); ++r) {
    const double mean = gen.row(r).mean();
    const double sd = std::sqrt((gen.row(r).array() - mean).square().mean());
    csv += fmt::format("mean_x{},{}\nstd_x{},{}\n", r, mean, r, sd);
  }
  if (cfg.data.kind == DataKind::eight_gaussians) {
    const ModeCoverage mc = mode_coverage(cfg.data.eight, gen);
    csv += fmt::format("fraction_within_4std,{}\nmodes_hit,{}\n", mc.fraction_near, mc.modes_hit);
  }
  write_text_file(o.out + "/eval.csv", csv);
  out << csv;
  return 0;
}

int cmd_compare(const CommonOptions& o, const std::vector<std::uint64_t>& seeds, int workers, std::ostream& out,
                const Progress& progress) {
  if (o.configs.empty()) throw ConfigError("compare needs --config");
  ComparisonSuite suite;
  if (o.configs.size() == 1) {
    json doc = read_json_file(o.configs.front());
    if (!is_comparison_document(doc)) throw ConfigError("comparison needs at least two variants");
    if (o.steps) doc["base"]["train"]["total_steps"] = *o.steps;
    suite = suite_from_json(doc);
  } else {
    for (const auto& path : o.configs) {
      json doc = read_json_file(path);
      if (is_comparison_document(doc)) throw ConfigError("pass either one comparison suite or several run configs");
      doc = apply_overrides(std::move(doc), CommonOptions{{}, std::nullopt, o.steps, {}, false});
      NamedConfig nc;
      nc.config = config_from_json(doc);
      nc.name = nc.config.name;
      nc.document = config_to_json(nc.config);
      suite.variants.push_back(std::move(nc));
    }
  }
  if (!seeds.empty()) suite.seeds = seeds;
  else if (o.seed) suite.seeds = {*o.seed};
  if (suite.seeds.empty()) suite.seeds = {0};

  const ComparisonReport report = run_comparison(suite, workers, [&](const std::string& m) { progress(m); });
  write_comparison(report, suite, o.out);
  out << fmt::format("threshold {} (oracle success {})\n", report.threshold, report.oracle_success);
  for (const auto& v : report.variants) {
    const auto m = report.median_steps_to_threshold(v);
    out << fmt::format("{}: median steps_to_threshold {}\n", v, m ? fmt::format("{}", *m) : std::string("none"));
  }
  return 0;
}

int cmd_fit_demo(const std::string& input, int degree, double ridge, double floor, double mu, const std::string& out_dir,
                 std::ostream& out) {
  const CsvTable t = read_csv(input);
  const int cs = t.column("sigma"), cl = t.column("loss");
  if (cs < 0 || cl < 0) throw ConfigError("fit-demo input needs 'sigma' and 'loss' columns");
  std::vector<double> sigmas, losses;
  for (const auto& row : t.rows) {
    try {
      sigmas.push_back(std::stod(row[static_cast<std::size_t>(cs)]));
      losses.push_back(std::stod(row[static_cast<std::size_t>(cl)]));
    } catch (const std::exception&) {
      throw InvalidInputError("fit-demo: non-numeric cell in " + input);
    }
  }
  PolyWeightState st = PolyWeightState::make(degree, mu, ridge);
  st.loss_floor = floor;
  st = update_from_batch(st, sigmas, losses);
  std::string csv = "k,coeff\n";
  for (int k = 0; k <= st.degree(); ++k) csv += fmt::format("{},{}\n", k, st.coeffs[static_cast<std::size_t>(k)]);
  out << csv;
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    write_text_file(out_dir + "/coeffs.csv", csv);
  }
  return 0;
}

double parse_cell(const std::string& s) {
  if (s.empty()) return std::nan("");
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw InvalidInputError("plot: non-numeric cell '" + s + "'");
  }
}

int cmd_plot(const std::string& input, const std::string& out_path, std::string x_col, std::string y_col,
             const std::string& title, std::ostream& out) {
  const CsvTable t = read_csv(input);
  ChartSpec spec;
  spec.title = title.empty() ? fs::path(input).filename().string() : title;
  const int cv = t.column("variant");
  if (x_col.empty()) x_col = cv >= 0 ? "step" : t.header.front();
  if (y_col.empty()) y_col = cv >= 0 ? "success_rate" : (t.header.size() > 1 ? t.header[1] : t.header.front());
  const int cx = t.column(x_col), cy = t.column(y_col);
  if (cx < 0 || cy < 0) throw ConfigError(fmt::format("plot: columns '{}' and '{}' must exist", x_col, y_col));
  spec.x_label = x_col;
  spec.y_label = y_col;
  if (cv >= 0) {
    // Long format: median over rows sharing (variant, x).
    std::vector<std::string> order;
    std::map<std::string, std::map<double, std::vector<double>>> groups;
    for (const auto& row : t.rows) {
      const std::string& v = row[static_cast<std::size_t>(cv)];
      if (!groups.count(v)) order.push_back(v);
      groups[v][parse_cell(row[static_cast<std::size_t>(cx)])].push_back(parse_cell(row[static_cast<std::size_t>(cy)]));
    }
    for (const auto& v : order) {
      ChartSeries s{v, {}, {}};
      for (auto& [x, ys] : groups[v]) {
        std::sort(ys.begin(), ys.end());
        const std::size_t n = ys.size();
        s.xs.push_back(x);
        s.ys.push_back(n % 2 ? ys[n / 2] : 0.5 * (ys[n / 2 - 1] + ys[n / 2]));
      }
      spec.series.push_back(std::move(s));
    }
  } else {
    ChartSeries s{y_col, {}, {}};
    for (const auto& row : t.rows) {
      s.xs.push_back(parse_cell(row[static_cast<std::size_t>(cx)]));
      s.ys.push_back(parse_cell(row[static_cast<std::size_t>(cy)]));
    }
    spec.series.push_back(std::move(s));
  }
  std::string path = out_path;
  if (fs::is_directory(path) || path.empty() || path.back() == '/') {
    ensure_dir(path);
    path = (fs::path(path) / "plot.svg").string();
  }
  write_text_file(path, render_svg(spec));
  out << "wrote " << path << '\n';
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Flow-matching training with variational loss weighting on toy planning tasks", "polyflow"};
  app.require_subcommand(1);

  CommonOptions gen_o, train_o, eval_o, cmp_o;
  auto* gen = app.add_subcommand("gen-data", "Generate a dataset");
  add_common(gen, gen_o);

  auto* tr = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
  add_common(tr, train_o);
  std::string train_data, resume;
  tr->add_option("--data", train_data, "Maze dataset file (generated from the config when omitted)")->check(CLI::ExistingFile);
  tr->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, eval_o);
  std::string eval_data, checkpoint;
  ev->add_option("--data", eval_data, "Maze dataset file")->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  auto* cmp = app.add_subcommand("compare", "Train several variants and compare learning curves");
  add_common(cmp, cmp_o, true);
  std::vector<std::uint64_t> seeds;
  int workers = 0;
  cmp->add_option("--seeds", seeds, "Seed list")->delimiter(',');
  cmp->add_option("--workers", workers, "Worker threads (0 = one per core)");

  auto* fit = app.add_subcommand("fit-demo", "Fit the log-loss polynomial to a CSV of sigma,loss pairs");
  std::string fit_input, fit_out;
  int degree = 5;
  double ridge = 1e-6, floor = 1e-12, mu = 0.99;
  fit->add_option("--input", fit_input, "CSV with sigma and loss columns")->required()->check(CLI::ExistingFile);
  fit->add_option("--degree", degree, "Polynomial degree");
  fit->add_option("--ridge", ridge, "Ridge penalty");
  fit->add_option("--floor", floor, "Loss floor before the log");
  fit->add_option("--mu", mu, "Coefficient EMA rate");
  fit->add_option("--out", fit_out, "Directory for coeffs.csv");
  bool fit_quiet = false;
  fit->add_flag("--quiet", fit_quiet, "Suppress progress output");

  auto* plot = app.add_subcommand("plot", "Render a CSV as an SVG line chart");
  std::string plot_input, plot_out, x_col, y_col, title;
  plot->add_option("--input", plot_input, "CSV file")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "SVG file or directory")->required();
  plot->add_option("--x", x_col, "x column");
  plot->add_option("--y", y_col, "y column");
  plot->add_option("--title", title, "Chart title");
  bool plot_quiet = false;
  plot->add_flag("--quiet", plot_quiet, "Suppress progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: config: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_o, out, Progress(err, gen_o.quiet));
    if (*tr) return cmd_train(train_o, train_data, resume, out, Progress(err, train_o.quiet));
    if (*ev) return cmd_eval(eval_o, eval_data, checkpoint, out, Progress(err, eval_o.quiet));
    if (*cmp) return cmd_compare(cmp_o, seeds, workers, out, Progress(err, cmp_o.quiet));
    if (*fit) return cmd_fit_demo(fit_input, degree, ridge, floor, mu, fit_out, out);
    if (*plot) return cmd_plot(plot_input, plot_out, x_col, y_col, title, out);
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    err << "error: divergence: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const IoError& e) {
    err << "error: io: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: runtime: " << one_line(e.what()) << '\n';
    return 3;
  }
  return 3;
}

}  // namespace polyflow
