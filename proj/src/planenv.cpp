#include "polyflow/planenv.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "polyflow/errors.hpp"

namespace polyflow {

// Maze geometry -----------------------------------------------------------

bool MazeSpec::is_wall(Cell c) const {
  if (c.x < 0 || c.y < 0 || c.x >= width || c.y >= height) return true;
  return walls[static_cast<std::size_t>(c.y * width + c.x)] != 0;
}

Cell MazeSpec::cell_of(const Position& p) const {
  return Cell{static_cast<int>(std::floor(p.x() / cell_size)), static_cast<int>(std::floor(p.y() / cell_size))};
}

bool MazeSpec::is_free(const Position& p) const {
  if (!p.allFinite()) return false;
  return !is_wall(cell_of(p));
}

Position MazeSpec::center(Cell c) const {
  return Position((c.x + 0.5) * cell_size, (c.y + 0.5) * cell_size);
}

std::vector<Cell> MazeSpec::free_cells() const {
  std::vector<Cell> out;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (!is_wall({x, y})) out.push_back({x, y});
  return out;
}

MazeSpec maze_from_rows(std::string id, const std::vector<std::string>& rows, Cell start, Cell goal) {
  if (rows.empty() || rows.front().empty()) throw ConfigError("maze layout must have at least one row and column");
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw ConfigError("maze layout rows must have equal length");
    for (char ch : r)
      if (ch != '#' && ch != '.') throw ConfigError("maze layout may only contain '#' and '.'");
  }
  MazeSpec m;
  m.id = std::move(id);
  m.height = static_cast<int>(rows.size());
  m.width = static_cast<int>(rows.front().size());
  m.walls.assign(static_cast<std::size_t>(m.width * m.height), 0);
  for (int r = 0; r < m.height; ++r) {
    const int y = m.height - 1 - r;
    for (int x = 0; x < m.width; ++x)
      m.walls[static_cast<std::size_t>(y * m.width + x)] = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(x)] == '#';
  }
  m.start = start;
  m.goal = goal;
  return m;
}

std::vector<std::string> maze_rows(const MazeSpec& maze) {
  std::vector<std::string> rows;
  for (int y = maze.height - 1; y >= 0; --y) {
    std::string r;
    for (int x = 0; x < maze.width; ++x) r += maze.is_wall({x, y}) ? '#' : '.';
    rows.push_back(std::move(r));
  }
  return rows;
}

MazeSpec make_maze(const std::string& id) {
  if (id == "open") return maze_from_rows("open", {".....", ".....", ".....", ".....", "....."}, {0, 0}, {4, 4});
  if (id == "u") return maze_from_rows("u", {".....", ".....", "####.", ".....", "....."}, {0, 0}, {0, 4});
  if (id == "four_rooms")
    return maze_from_rows("four_rooms",
                     {".......", "...#...", ".......", "##.####", "...#...", ".......", "...#..."}, {0, 0},
                     {6, 6});
  throw ConfigError("unknown maze layout '" + id + "'");
}

std::vector<Cell> shortest_path(const MazeSpec& maze, Cell from, Cell to) {
  if (maze.is_wall(from) || maze.is_wall(to)) return {};
  const auto idx = [&](Cell c) { return static_cast<std::size_t>(c.y * maze.width + c.x); };
  std::vector<int> parent(static_cast<std::size_t>(maze.width * maze.height), -1);
  std::vector<char> seen(parent.size(), 0);
  std::deque<Cell> queue{from};
  seen[idx(from)] = 1;
  constexpr int kDx[4] = {1, -1, 0, 0};
  constexpr int kDy[4] = {0, 0, 1, -1};
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    if (c == to) break;
    for (int k = 0; k < 4; ++k) {
      const Cell n{c.x + kDx[k], c.y + kDy[k]};
      if (maze.is_wall(n) || seen[idx(n)]) continue;
      seen[idx(n)] = 1;
      parent[idx(n)] = static_cast<int>(idx(c));
      queue.push_back(n);
    }
  }
  if (!seen[idx(to)]) return {};
  std::vector<Cell> path{to};
  for (int p = parent[idx(to)]; p >= 0; p = parent[static_cast<std::size_t>(p)])
    path.push_back(Cell{p % maze.width, p / maze.width});
  std::reverse(path.begin(), path.end());
  return path;
}

void validate_maze(const MazeSpec& maze) {
  if (maze.width < 1 || maze.height < 1 ||
      maze.walls.size() != static_cast<std::size_t>(maze.width * maze.height))
    throw ConfigError("maze grid has inconsistent dimensions");
  if (maze.is_wall(maze.start)) throw ConfigError("maze start cell is not free");
  if (maze.is_wall(maze.goal)) throw ConfigError("maze goal cell is not free");
  if (!(maze.dt > 0.0 && maze.max_speed > 0.0 && maze.max_accel > 0.0 && maze.cell_size > 0.0))
    throw ConfigError("maze dynamics constants must be positive");
  const auto cells = maze.free_cells();
  for (const Cell& c : cells)
    if (shortest_path(maze, maze.start, c).empty())
      throw ConfigError(fmt::format("maze free space is disconnected: cell ({}, {}) unreachable from start", c.x, c.y));
}

// Dynamics and scripted control ------------------------------------------------

State env_step(const MazeSpec& maze, const State& s, const Action& a, bool* collided) {
  const Action u = a.cwiseMax(-maze.max_accel).cwiseMin(maze.max_accel);
  Eigen::Vector2d v = s.tail<2>() + maze.dt * u;
  const double speed = v.norm();
  if (speed > maze.max_speed) v *= maze.max_speed / speed;
  const Position p = s.head<2>() + maze.dt * v;
  State next;
  if (!maze.is_free(p)) {
    if (collided) *collided = true;
    next << s.head<2>(), 0.0, 0.0;
    return next;
  }
  next << p, v;
  return next;
}

ScriptedController::ScriptedController(const MazeSpec& maze, Position goal)
    : maze_(&maze), goal_(std::move(goal)) {}

Action ScriptedController::act(const State& s) {
  const Position p = s.head<2>();
  const Cell here = maze_->cell_of(p);
  const bool on_path = std::find(path_.begin(), path_.end(), here) != path_.end();
  if (path_.empty() || !on_path) {
    path_ = shortest_path(*maze_, here, maze_->cell_of(goal_));
    next_ = path_.size() > 1 ? 1 : path_.size();
    planned_from_ = here;
  }
  while (next_ < path_.size() && (maze_->center(path_[next_]) - p).norm() < maze_->waypoint_radius) ++next_;
  const Position target = next_ < path_.size() ? maze_->center(path_[next_]) : goal_;
  Eigen::Vector2d v_des = maze_->position_gain * (target - p);
  if (v_des.norm() > maze_->cruise_speed) v_des *= maze_->cruise_speed / v_des.norm();
  const Action a = maze_->velocity_gain * (v_des - s.tail<2>());
  return a.cwiseMax(-maze_->max_accel).cwiseMin(maze_->max_accel);
}

Vector Trajectory::flatten() const {
  return Eigen::Map<const Vector>(states.data(), states.size());
}

RolloutResult rollout_policy(const MazeSpec& maze, const State& start, const StridePolicy& policy,
                             int horizon, int stride, const Position* goal) {
  if (horizon < 1 || stride < 1) throw InvalidInputError("horizon and stride must be positive");
  RolloutResult r;
  r.trajectory.stride = stride;
  r.trajectory.states.resize(4, horizon);
  r.trajectory.actions.resize(2, std::max(horizon - 1, 0));
  State s = start;
  r.trajectory.states.col(0) = s;
  auto check_goal = [&](const State& st) {
    if (goal && (st.head<2>() - *goal).norm() < maze.goal_radius) r.reached_goal = true;
  };
  check_goal(s);
  for (int k = 0; k + 1 < horizon; ++k) {
    const Action a = policy(s).cwiseMax(-maze.max_accel).cwiseMin(maze.max_accel);
    r.trajectory.actions.col(k) = a;
    for (int i = 0; i < stride; ++i) {
      bool hit = false;
      s = env_step(maze, s, a, &hit);
      r.collided = r.collided || hit;
      check_goal(s);
    }
    r.trajectory.states.col(k + 1) = s;
  }
  return r;
}

// Dataset ----------------------------------------------------------------------

Matrix MazeDataset::flat_states() const {
  if (trajectories.empty()) throw InvalidInputError("dataset is empty");
  Matrix out(4 * horizon, static_cast<Eigen::Index>(trajectories.size()));
  for (std::size_t i = 0; i < trajectories.size(); ++i)
    out.col(static_cast<Eigen::Index>(i)) = trajectories[i].flatten();
  return out;
}

Normalizer MazeDataset::feature_normalizer() const {
  Vector mean = Vector::Zero(4);
  Vector sq = Vector::Zero(4);
  double n = 0.0;
  for (const auto& t : trajectories) {
    mean += t.states.rowwise().sum();
    n += static_cast<double>(t.states.cols());
  }
  mean /= n;
  for (const auto& t : trajectories) sq += (t.states.colwise() - mean).array().square().matrix().rowwise().sum();
  Vector stddev = (sq / std::max(n - 1.0, 1.0)).cwiseSqrt();
  for (Eigen::Index i = 0; i < 4; ++i)
    if (!(stddev(i) > 1e-6)) stddev(i) = 1.0;
  Normalizer norm;
  norm.mean = mean.replicate(horizon, 1);
  norm.stddev = stddev.replicate(horizon, 1);
  return norm;
}

namespace {

Position jittered_point(const MazeSpec& maze, Cell c, double jitter, RngStream& rng) {
  return maze.center(c) + Position(rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter)) * maze.cell_size;
}

}  // namespace

MazeDataset generate_dataset(const MazeSpec& maze, const DatasetConfig& cfg, RngStream& rng) {
  if (cfg.n_traj < 1) throw InvalidInputError("n_traj must be positive");
  if (cfg.horizon < 2 || cfg.stride < 1) throw InvalidInputError("horizon must be >= 2 and stride >= 1");
  validate_maze(maze);
  const auto cells = maze.free_cells();
  MazeDataset data;
  data.maze_id = maze.id;
  data.horizon = cfg.horizon;
  data.stride = cfg.stride;
  int consecutive_failures = 0;
  while (static_cast<int>(data.trajectories.size()) < cfg.n_traj) {
    const Cell sc = cells[rng.index(cells.size())];
    const Cell gc = cells[rng.index(cells.size())];
    const Position start = jittered_point(maze, sc, maze.start_jitter, rng);
    const Position goal = jittered_point(maze, gc, maze.start_jitter, rng);
    ++data.attempts;
    ScriptedController ctrl(maze, goal);
    State s0;
    s0 << start, 0.0, 0.0;
    RolloutResult r = rollout_policy(maze, s0, [&](const State& s) { return ctrl.act(s); }, cfg.horizon,
                                     cfg.stride, &goal);
    if (r.reached_goal) ++data.reached;
    if (r.collided) {
      ++data.collisions;
      if (++consecutive_failures >= 100) throw GenerationError("100 consecutive rollouts collided");
      continue;
    }
    consecutive_failures = 0;
    data.trajectories.push_back(std::move(r.trajectory));
  }
  return data;
}

void save_dataset(const std::string& path, const MazeDataset& data) {
  using nlohmann::json;
  const Normalizer norm = data.feature_normalizer();
  json doc;
  doc["format"] = "polyflow-maze-dataset";
  doc["version"] = 1;
  doc["maze_id"] = data.maze_id;
  doc["horizon"] = data.horizon;
  doc["stride"] = data.stride;
  doc["n_traj"] = data.trajectories.size();
  doc["stats"] = {{"attempts", data.attempts}, {"reached", data.reached}, {"collisions", data.collisions}};
  doc["normalization"] = {{"mean", std::vector<double>(norm.mean.data(), norm.mean.data() + 4)},
                          {"std", std::vector<double>(norm.stddev.data(), norm.stddev.data() + 4)}};
  json trajs = json::array();
  for (const auto& t : data.trajectories)
    trajs.push_back({{"states", std::vector<double>(t.states.data(), t.states.data() + t.states.size())},
                     {"actions", std::vector<double>(t.actions.data(), t.actions.data() + t.actions.size())}});
  doc["trajectories"] = std::move(trajs);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset file " + path);
  out << doc.dump() << '\n';
  if (!out) throw IoError("failed writing dataset file " + path);
}

MazeDataset load_dataset(const std::string& path) {
  using nlohmann::json;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file " + path);
  json doc;
  try {
    in >> doc;
    if (doc.at("format").get<std::string>() != "polyflow-maze-dataset") throw IoError("not a maze dataset: " + path);
    if (doc.at("version").get<int>() != 1) throw IoError("unsupported dataset version");
    MazeDataset d;
    d.maze_id = doc.at("maze_id").get<std::string>();
    d.horizon = doc.at("horizon").get<int>();
    d.stride = doc.at("stride").get<int>();
    d.attempts = doc.at("stats").at("attempts").get<int>();
    d.reached = doc.at("stats").at("reached").get<int>();
    d.collisions = doc.at("stats").at("collisions").get<int>();
    for (const auto& tj : doc.at("trajectories")) {
      const auto s = tj.at("states").get<std::vector<double>>();
      const auto a = tj.at("actions").get<std::vector<double>>();
      if (s.size() != static_cast<std::size_t>(4 * d.horizon) || a.size() != static_cast<std::size_t>(2 * (d.horizon - 1)))
        throw IoError("trajectory size does not match the dataset header");
      Trajectory t;
      t.stride = d.stride;
      t.states = Eigen::Map<const Matrix>(s.data(), 4, d.horizon);
      t.actions = Eigen::Map<const Matrix>(a.data(), 2, d.horizon - 1);
      d.trajectories.push_back(std::move(t));
    }
    return d;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed dataset file: ") + e.what());
  }
}

// Inverse dynamics -------------------------------------------------------------

Matrix InverseDynamicsModel::features(const Matrix& from, const Matrix& to) const {
  Matrix f(8, from.cols());
  f.topRows(4) = (from.colwise() - state_mean).array().colwise() / state_std.array();
  f.bottomRows(4) = (to.colwise() - state_mean).array().colwise() / state_std.array();
  return f;
}

Matrix InverseDynamicsModel::predict(const Matrix& from, const Matrix& to) const {
  return action_bound * net.forward(features(from, to)).array().tanh();
}

Action InverseDynamicsModel::predict(const State& from, const State& to) const {
  return predict(Matrix(from), Matrix(to)).col(0);
}

InverseDynamicsModel train_inverse_dynamics(const MazeDataset& data, double action_bound,
                                            const InverseDynamicsConfig& cfg) {
  if (data.trajectories.empty()) throw InvalidInputError("inverse dynamics needs a nonempty dataset");
  if (!(action_bound > 0.0)) throw InvalidInputError("action bound must be positive");
  const Eigen::Index per = data.horizon - 1;
  const Eigen::Index n = per * static_cast<Eigen::Index>(data.trajectories.size());
  Matrix from(4, n), to(4, n), actions(2, n);
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    const auto& t = data.trajectories[i];
    const Eigen::Index off = per * static_cast<Eigen::Index>(i);
    from.middleCols(off, per) = t.states.leftCols(per);
    to.middleCols(off, per) = t.states.rightCols(per);
    actions.middleCols(off, per) = t.actions;
  }

  RngStream rng(cfg.seed);
  RngStream init_rng = rng.split(11);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  if (cfg.shuffle_labels) {
    std::vector<Eigen::Index> perm(order);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    Matrix shuffled(2, n);
    for (Eigen::Index j = 0; j < n; ++j) shuffled.col(j) = actions.col(perm[static_cast<std::size_t>(j)]);
    actions = shuffled;
  }
  const auto n_hold = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(cfg.holdout_fraction * static_cast<double>(n)));
  if (n_hold >= n) throw InvalidInputError("inverse dynamics holdout leaves no training data");
  const Eigen::Index n_train = n - n_hold;

  InverseDynamicsModel model;
  model.action_bound = action_bound;
  const Normalizer sn = Normalizer::fit(from);
  model.state_mean = sn.mean;
  model.state_std = sn.stddev;
  model.net = Mlp(MlpShape{8, cfg.hidden, 2}, init_rng, true);
  AdamState adam = AdamState::for_size(model.net.num_params());

  const Matrix feats = model.features(from, to);
  std::vector<double> grad(model.net.num_params());
  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(n_train));
  Matrix xb(8, bsz), yb(2, bsz);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int j = 0; j < bsz; ++j) {
      const Eigen::Index k = order[rng.index(static_cast<std::uint64_t>(n_train))];
      xb.col(j) = feats.col(k);
      yb.col(j) = actions.col(k);
    }
    MlpCache cache;
    const Matrix out = model.net.forward(xb, &cache);
    const Matrix th = out.array().tanh();
    // d/d(out) of mean |bound*tanh(out) - y|^2 / 2
    const Matrix g = ((action_bound * th - yb).array() * action_bound * (1.0 - th.array().square())) /
                     static_cast<double>(bsz);
    std::fill(grad.begin(), grad.end(), 0.0);
    model.net.backward(cache, g, grad);
    adam_step(model.net.mutable_params(), grad, adam, cfg.lr);
  }

  Matrix hf(4, n_hold), ht(4, n_hold), ha(2, n_hold);
  for (Eigen::Index j = 0; j < n_hold; ++j) {
    const Eigen::Index k = order[static_cast<std::size_t>(n_train + j)];
    hf.col(j) = from.col(k);
    ht.col(j) = to.col(k);
    ha.col(j) = actions.col(k);
  }
  model.holdout_mse = (model.predict(hf, ht) - ha).array().square().mean();
  const Vector mean = ha.rowwise().mean();
  model.action_variance = (ha.colwise() - mean).array().square().mean();
  return model;
}

// Planning ---------------------------------------------------------------------

std::vector<Eigen::Index> plan_conditioned_dims(int horizon) {
  const Eigen::Index last = 4 * (horizon - 1);
  return {0, 1, 2, 3, last, last + 1};
}

Plan plan(const Planner& planner, const State& start_state, const Position& goal, RngStream& rng) {
  if (planner.horizon < 2) throw InvalidInputError("plan: horizon must be at least 2");
  if (!planner.model || !planner.inv_dyn) throw InvalidInputError("plan: models are required");
  const int dim = 4 * planner.horizon;
  if (planner.model->data_dim() != dim) throw InvalidInputError("plan: model dimension does not match horizon");
  const Normalizer& nz = planner.normalizer;
  Conditioning cond;
  cond.mode = planner.conditioning;
  for (int i = 0; i < 4; ++i) {
    cond.indices.push_back(i);
    cond.values.push_back((start_state(i) - nz.mean(i)) / nz.stddev(i));
  }
  const int last = 4 * (planner.horizon - 1);
  for (int i = 0; i < 2; ++i) {
    cond.indices.push_back(last + i);
    cond.values.push_back((goal(i) - nz.mean(last + i)) / nz.stddev(last + i));
  }
  const Matrix normalized = sample(as_field(*planner.model), planner.path, planner.sampler, rng, 1, dim, cond);
  Vector flat = nz.invert(normalized).col(0);
  flat.head<4>() = start_state;
  flat.segment<2>(last) = goal;

  Plan p;
  p.states = Eigen::Map<const Matrix>(flat.data(), 4, planner.horizon);
  const Eigen::Index n = planner.horizon - 1;
  p.actions = planner.inv_dyn->predict(Matrix(p.states.leftCols(n)), Matrix(p.states.rightCols(n)));
  return p;
}

Action PlannerPolicy::act(const State& s, const Position& goal, RngStream& rng) {
  const int last = planner_.horizon - 1;
  if (next_ < 0 || next_ >= last) {
    current_ = plan(planner_, s, goal, rng);
    ++plans_made_;
    next_ = 0;
  }
  const State target = current_.states.col(++next_);
  return planner_.inv_dyn->predict(s, target);
}

Action RandomPolicy::act(const State&, const Position&, RngStream& rng) {
  return Action(rng.uniform(-bound_, bound_), rng.uniform(-bound_, bound_));
}

Action OraclePolicy::act(const State& s, const Position& goal, RngStream&) {
  ScriptedController ctrl(*maze_, goal);
  return ctrl.act(s);
}

std::string EvalReport::csv_header() { return "episodes,successes,success_rate,mean_steps_to_goal\n"; }

std::string EvalReport::csv_row() const {
  return fmt::format("{},{},{},{}\n", episodes, successes, success_rate, mean_steps_to_goal);
}

EvalReport rollout_eval(const MazeSpec& maze, EpisodePolicy& policy, int horizon, int stride, int episodes,
                        std::uint64_t seed) {
  if (episodes < 1) throw InvalidInputError("rollout_eval: episodes must be positive");
  if (horizon < 2 || stride < 1) throw InvalidInputError("rollout_eval: horizon must be >= 2 and stride >= 1");
  validate_maze(maze);
  const int budget = 4 * horizon * stride;
  const Position goal = maze.center(maze.goal);
  const RngStream base(seed);
  EvalReport rep;
  rep.episodes = episodes;
  double steps_total = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    RngStream rng = base.split(static_cast<std::uint64_t>(ep));
    policy.reset();
    State s;
    s << jittered_point(maze, maze.start, maze.start_jitter, rng), 0.0, 0.0;
    int steps = 0;
    bool success = (s.head<2>() - goal).norm() < maze.goal_radius;
    while (!success && steps < budget) {
      const Action a = policy.act(s, goal, rng);
      for (int i = 0; i < stride && steps < budget && !success; ++i) {
        s = env_step(maze, s, a);
        ++steps;
        success = (s.head<2>() - goal).norm() < maze.goal_radius;
      }
    }
    if (success) ++rep.successes;
    steps_total += success ? steps : budget;
  }
  rep.success_rate = static_cast<double>(rep.successes) / episodes;
  rep.mean_steps_to_goal = steps_total / episodes;
  return rep;
}

EvalReport rollout_eval(const MazeSpec& maze, const Planner& planner, int episodes, std::uint64_t seed) {
  PlannerPolicy policy(planner);
  return rollout_eval(maze, policy, planner.horizon, planner.stride, episodes, seed);
}

}  // namespace polyflow
