#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "polyflow/errors.hpp"
#include "polyflow/planenv.hpp"

using namespace polyflow;

namespace {

const MazeDataset& shared_dataset() {
  static const MazeDataset d = [] {
    RngStream r(11);
    return generate_dataset(make_maze("u"), {300, 32, 4}, r);
  }();
  return d;
}

}  // namespace

TEST_CASE("built-in layouts are valid") {
  for (const char* id : {"open", "u", "four_rooms"}) {
    const MazeSpec m = make_maze(id);
    CHECK_NOTHROW(validate_maze(m));
    CHECK_FALSE(shortest_path(m, m.start, m.goal).empty());
  }
  CHECK_THROWS_AS(make_maze("nope"), ConfigError);
}

TEST_CASE("u-maze geometry") {
  const MazeSpec m = make_maze("u");
  CHECK(m.is_wall({0, 2}));
  CHECK(m.is_wall({3, 2}));
  CHECK_FALSE(m.is_wall({4, 2}));
  CHECK(m.is_wall({-1, 0}));
  CHECK(m.is_wall({5, 0}));
  // Around the wall: right along the bottom, up the gap, back left.
  CHECK(shortest_path(m, m.start, m.goal).size() == 13);
  CHECK(m.cell_of(m.center({2, 3})) == Cell{2, 3});
  CHECK(maze_rows(m) == std::vector<std::string>{".....", ".....", "####.", ".....", "....."});
}

TEST_CASE("invalid mazes are rejected") {
  MazeSpec m = make_maze("u");
  m.goal = {0, 2};
  CHECK_THROWS_AS(validate_maze(m), ConfigError);
  const MazeSpec split = maze_from_rows("split", {"..#..", "..#..", "..#.."}, {0, 0}, {4, 0});
  CHECK_THROWS_AS(validate_maze(split), ConfigError);
  CHECK_THROWS_AS(maze_from_rows("ragged", {"...", ".."}, {0, 0}, {1, 0}), ConfigError);
  CHECK_THROWS_AS(maze_from_rows("chars", {"..x"}, {0, 0}, {1, 0}), ConfigError);
  m = make_maze("u");
  m.dt = 0.0;
  CHECK_THROWS_AS(validate_maze(m), ConfigError);
}

TEST_CASE("env step integrates, clips and stops at walls") {
  const MazeSpec m = make_maze("open");
  State s;
  s << 2.5, 2.5, 0.0, 0.0;
  State n = env_step(m, s, Action(1.0, 0.0));
  CHECK(n(2) == doctest::Approx(0.1));
  CHECK(n(0) == doctest::Approx(2.5 + 0.01));
  n = env_step(m, s, Action(100.0, 0.0));
  CHECK(n(2) == doctest::Approx(m.max_accel * m.dt));
  State fast;
  fast << 2.5, 2.5, 5.0, 5.0;
  n = env_step(m, fast, Action(0.0, 0.0));
  CHECK(n.tail<2>().norm() == doctest::Approx(m.max_speed));
  State edge;
  edge << 0.02, 2.5, -1.0, 0.0;
  bool collided = false;
  n = env_step(m, edge, Action(-1.0, 0.0), &collided);
  CHECK(collided);
  CHECK(n.head<2>() == edge.head<2>());
  CHECK(n.tail<2>().norm() == 0.0);
}

TEST_CASE("scripted controller reaches the goal around the wall") {
  const MazeSpec m = make_maze("u");
  ScriptedController c(m, m.center(m.goal));
  State s;
  s << m.center(m.start), 0.0, 0.0;
  bool reached = false;
  for (int i = 0; i < 400 && !reached; ++i) {
    bool col = false;
    s = env_step(m, s, c.act(s), &col);
    REQUIRE_FALSE(col);
    reached = (s.head<2>() - m.center(m.goal)).norm() < m.goal_radius;
  }
  CHECK(reached);
}

TEST_CASE("dataset trajectories are consistent with the dynamics at their stride") {
  const MazeDataset& d = shared_dataset();
  const MazeSpec m = make_maze("u");
  REQUIRE(d.trajectories.size() == 300);
  CHECK(d.collisions + static_cast<int>(d.trajectories.size()) == d.attempts);
  for (std::size_t k = 0; k < 20; ++k) {
    const Trajectory& t = d.trajectories[k];
    REQUIRE(t.states.cols() == 32);
    REQUIRE(t.actions.cols() == 31);
    for (int i = 0; i + 1 < 32; ++i) {
      State s = t.states.col(i);
      for (int j = 0; j < t.stride; ++j) s = env_step(m, s, t.actions.col(i));
      CHECK((s - t.states.col(i + 1)).norm() < 1e-12);
      for (int a = 0; a < 2; ++a) CHECK(std::abs(t.actions(a, i)) <= m.max_accel + 1e-12);
    }
    CHECK(m.is_free(t.states.col(0).head<2>()));
  }
}

TEST_CASE("flattening and feature normalization") {
  const MazeDataset& d = shared_dataset();
  const Matrix flat = d.flat_states();
  CHECK(flat.rows() == 128);
  CHECK(flat(4 * 5 + 1, 7) == d.trajectories[7].states(1, 5));
  const Normalizer n = d.feature_normalizer();
  for (int t = 0; t < 32; ++t)
    for (int f = 0; f < 4; ++f) CHECK(n.mean(4 * t + f) == n.mean(f));
  CHECK(plan_conditioned_dims(32) == std::vector<Eigen::Index>{0, 1, 2, 3, 124, 125});
}

TEST_CASE("dataset generation is deterministic and survives a save/load round trip") {
  RngStream a(3), b(3);
  const MazeSpec m = make_maze("u");
  const MazeDataset d1 = generate_dataset(m, {20, 8, 2}, a), d2 = generate_dataset(m, {20, 8, 2}, b);
  CHECK(d1.flat_states() == d2.flat_states());
  const auto path = (std::filesystem::temp_directory_path() / "polyflow_ds_test.json").string();
  save_dataset(path, d1);
  const MazeDataset back = load_dataset(path);
  CHECK(back.horizon == 8);
  CHECK(back.stride == 2);
  CHECK(back.maze_id == "u");
  CHECK(back.flat_states() == d1.flat_states());
  CHECK(back.trajectories[3].actions == d1.trajectories[3].actions);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_dataset(path), IoError);
}

TEST_CASE("inverse dynamics beats the label-variance baseline and shuffled labels") {
  const MazeDataset& d = shared_dataset();
  InverseDynamicsConfig cfg;
  cfg.steps = 1500;
  const auto model = train_inverse_dynamics(d, 1.5, cfg);
  CHECK(model.holdout_mse < 0.3 * model.action_variance);
  cfg.shuffle_labels = true;
  const auto shuffled = train_inverse_dynamics(d, 1.5, cfg);
  CHECK(shuffled.holdout_mse > 0.8 * shuffled.action_variance);
  const Trajectory& t = d.trajectories[0];
  const Action a = model.predict(State(t.states.col(0)), State(t.states.col(1)));
  CHECK(a.cwiseAbs().maxCoeff() <= 1.5);
}

TEST_CASE("oracle controller succeeds and the random policy rarely does") {
  const MazeSpec m = make_maze("u");
  OraclePolicy o(m);
  const EvalReport ro = rollout_eval(m, o, 32, 4, 50, 1000);
  CHECK(ro.success_rate >= 0.95);
  RandomPolicy rnd(m.max_accel);
  const EvalReport rr = rollout_eval(m, rnd, 32, 4, 50, 1000);
  CHECK(rr.success_rate < 0.2);
  CHECK(rr == rollout_eval(m, rnd, 32, 4, 50, 1000));
  CHECK(rr.mean_steps_to_goal <= 512);
  CHECK_THROWS_AS(rollout_eval(m, rnd, 32, 4, 0, 0), InvalidInputError);
}

TEST_CASE("plans honour the start state and goal") {
  const MazeDataset& d = shared_dataset();
  RngStream r(1);
  Denoiser model(128, {32}, 4, r);
  InverseDynamicsConfig ic;
  ic.steps = 10;
  const auto inv = train_inverse_dynamics(d, 1.5, ic);
  Planner p;
  p.model = &model;
  p.path = InterpolantPath::trig();
  p.normalizer = d.feature_normalizer();
  p.inv_dyn = &inv;
  State s;
  s << 0.4, 0.6, 0.1, -0.2;
  const Position goal(0.5, 4.5);
  const Plan pl = plan(p, s, goal, r);
  REQUIRE(pl.states.cols() == 32);
  REQUIRE(pl.actions.cols() == 31);
  CHECK((pl.states.col(0) - s).norm() < 1e-12);
  CHECK((pl.states.col(31).head<2>() - goal).norm() < 1e-12);
}
