#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "polyflow/flowpaths.hpp"
#include "polyflow/nn.hpp"
#include "polyflow/numcore.hpp"
#include "polyflow/rng.hpp"
#include "polyflow/sampler.hpp"
#include "polyflow/trainer.hpp"

namespace polyflow {

using State = Eigen::Vector4d;   // x, y, vx, vy
using Action = Eigen::Vector2d;  // acceleration command
using Position = Eigen::Vector2d;

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// Grid maze with a point mass. Cell (x, y) covers [x, x+1) * cell_size by
// [y, y+1) * cell_size; everything outside the grid is wall.
struct MazeSpec {
  std::string id = "u";
  int width = 5;
  int height = 5;
  std::vector<std::uint8_t> walls;  // row-major, index y * width + x
  Cell start{0, 0};
  Cell goal{0, 4};
  double cell_size = 1.0;
  double dt = 0.1;
  double max_speed = 1.2;
  double max_accel = 1.5;
  double cruise_speed = 1.08;
  double position_gain = 2.0;
  double velocity_gain = 2.5;
  double waypoint_radius = 0.35;
  double goal_radius = 0.5;
  double start_jitter = 0.25;

  bool is_wall(Cell c) const;
  bool is_free(const Position& p) const;
  Cell cell_of(const Position& p) const;
  Position center(Cell c) const;
  std::vector<Cell> free_cells() const;
};

// Rows listed top (highest y) first, '#' wall and '.' free. Throws ConfigError
// on ragged or unknown characters.
MazeSpec maze_from_rows(std::string id, const std::vector<std::string>& rows, Cell start, Cell goal);
std::vector<std::string> maze_rows(const MazeSpec& maze);

// Built-in layouts: "open", "u", "four_rooms". Throws ConfigError otherwise.
MazeSpec make_maze(const std::string& id);
// Start and goal free, free space connected. Throws ConfigError.
void validate_maze(const MazeSpec& maze);
// Breadth-first cell path from `from` to `to` inclusive; empty if unreachable.
std::vector<Cell> shortest_path(const MazeSpec& maze, Cell from, Cell to);

// One environment step. Actions are clipped to +-max_accel per axis and the
// speed to max_speed. Entering a wall leaves the mass in place with zero
// velocity and sets `collided`.
State env_step(const MazeSpec& maze, const State& s, const Action& a, bool* collided = nullptr);

// Waypoint-following velocity-tracking controller over the BFS cell path.
class ScriptedController {
 public:
  ScriptedController(const MazeSpec& maze, Position goal);
  Action act(const State& s);

 private:
  const MazeSpec* maze_;
  Position goal_;
  std::vector<Cell> path_;
  std::size_t next_ = 0;
  Cell planned_from_{-1, -1};
};

// Jump-step trajectory: states 4 x H sampled every `stride` env steps and the
// action held over each stride (2 x (H - 1)).
struct Trajectory {
  Matrix states;
  Matrix actions;
  int stride = 4;

  int horizon() const { return static_cast<int>(states.cols()); }
  // Time-major flattening [s_0, s_1, ...] of length 4H.
  Vector flatten() const;
};

using StridePolicy = std::function<Action(const State&)>;

struct RolloutResult {
  Trajectory trajectory;
  bool collided = false;
  bool reached_goal = false;
};

// Runs `policy` once per stride (action held for `stride` env steps).
RolloutResult rollout_policy(const MazeSpec& maze, const State& start, const StridePolicy& policy,
                             int horizon, int stride, const Position* goal = nullptr);

struct DatasetConfig {
  int n_traj = 1000;
  int horizon = 32;
  int stride = 4;
};

struct MazeDataset {
  std::string maze_id;
  int horizon = 32;
  int stride = 4;
  std::vector<Trajectory> trajectories;
  // Rollout statistics before collided rollouts were discarded.
  int attempts = 0;
  int reached = 0;
  int collisions = 0;

  // 4H x N matrix of flattened trajectories.
  Matrix flat_states() const;
  // Per-feature statistics pooled over time, tiled to 4H dimensions.
  Normalizer feature_normalizer() const;
};

// Random start/goal pairs in free space driven by the scripted controller.
// Throws GenerationError when 100 consecutive attempts fail.
MazeDataset generate_dataset(const MazeSpec& maze, const DatasetConfig& cfg, RngStream& rng);

void save_dataset(const std::string& path, const MazeDataset& data);
MazeDataset load_dataset(const std::string& path);

struct InverseDynamicsConfig {
  std::vector<int> hidden{64, 64};
  int steps = 3000;
  int batch_size = 256;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;
};

// a = bound * tanh(MLP(normalized s_t, normalized s_{t+m})).
struct InverseDynamicsModel {
  Mlp net;
  Vector state_mean = Vector::Zero(4);
  Vector state_std = Vector::Ones(4);
  double action_bound = 1.0;
  double holdout_mse = 0.0;
  double action_variance = 0.0;

  Matrix features(const Matrix& from, const Matrix& to) const;
  Matrix predict(const Matrix& from, const Matrix& to) const;
  Action predict(const State& from, const State& to) const;
};

InverseDynamicsModel train_inverse_dynamics(const MazeDataset& data, double action_bound,
                                            const InverseDynamicsConfig& cfg);

struct Planner {
  const Denoiser* model = nullptr;
  InterpolantPath path;
  Normalizer normalizer;
  const InverseDynamicsModel* inv_dyn = nullptr;
  SamplerConfig sampler;
  int horizon = 32;
  int stride = 4;
  ConditioningMode conditioning = ConditioningMode::exact;
};

// Coordinates of the flattened trajectory fixed by planning: the full start
// state and the final position.
std::vector<Eigen::Index> plan_conditioned_dims(int horizon);

struct Plan {
  Matrix states;   // 4 x H
  Matrix actions;  // 2 x (H - 1)
};

// Samples a trajectory with the start state and final position inpainted,
// then recovers actions with the inverse dynamics model.
Plan plan(const Planner& planner, const State& start_state, const Position& goal, RngStream& rng);

// Closed-loop policy queried once per stride; the returned action is held
// for `stride` env steps.
class EpisodePolicy {
 public:
  virtual ~EpisodePolicy() = default;
  virtual void reset() {}
  virtual Action act(const State& s, const Position& goal, RngStream& rng) = 0;
};

// Plans from the current state every horizon - 1 strides and tracks the plan
// by applying inverse dynamics to (current state, next planned state).
class PlannerPolicy : public EpisodePolicy {
 public:
  explicit PlannerPolicy(Planner planner) : planner_(std::move(planner)) {}
  void reset() override { next_ = -1; }
  Action act(const State& s, const Position& goal, RngStream& rng) override;
  int plans_made() const { return plans_made_; }

 private:
  Planner planner_;
  Plan current_;
  int next_ = -1;
  int plans_made_ = 0;
};

class RandomPolicy : public EpisodePolicy {
 public:
  explicit RandomPolicy(double bound) : bound_(bound) {}
  Action act(const State& s, const Position& goal, RngStream& rng) override;

 private:
  double bound_;
};

// The dataset generator's scripted controller.
class OraclePolicy : public EpisodePolicy {
 public:
  explicit OraclePolicy(const MazeSpec& maze) : maze_(&maze) {}
  Action act(const State& s, const Position& goal, RngStream& rng) override;

 private:
  const MazeSpec* maze_;
};

struct EvalReport {
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  // Successful episodes contribute their step count, failures the budget.
  double mean_steps_to_goal = 0.0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
  static std::string csv_header();
  std::string csv_row() const;
};

// Closed-loop episodes from the start cell (jittered) to the goal cell
// center with a budget of 4 * horizon * stride env steps. Episode k draws
// from an independent stream split from `seed`.
EvalReport rollout_eval(const MazeSpec& maze, EpisodePolicy& policy, int horizon, int stride,
                        int episodes, std::uint64_t seed);
EvalReport rollout_eval(const MazeSpec& maze, const Planner& planner, int episodes, std::uint64_t seed);

}  // namespace polyflow
