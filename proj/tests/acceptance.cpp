// Acceptance runner. Usage: acceptance [criterion ...] [--out DIR]
// Prints one PASS/FAIL line per criterion and exits nonzero if any failed.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "objective_check.hpp"
#include "oracles.hpp"
#include "polyflow/flowpaths.hpp"
#include "polyflow/harness.hpp"
#include "polyflow/sampler.hpp"
#include "polyflow/weighting.hpp"

using namespace polyflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string g_out = "acceptance_out";

std::string config_path(const std::string& name) { return std::string(POLYFLOW_CONFIG_DIR) + "/" + name; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "polyflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::path(g_out) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::map<std::string, double> read_metrics(const std::string& path) {
  const CsvTable t = read_csv(path);
  std::map<std::string, double> m;
  for (const auto& row : t.rows) m[row[0]] = std::stod(row[1]);
  return m;
}

Outcome c1_optimum() {
  RngStream r(101);
  double worst_identity = 0.0, worst_closed = 0.0;
  int neighbour_failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const double lam = std::exp(r.uniform(-4, 4)), L = std::exp(r.uniform(-8, 4));
    const double u = optimal_u(lam, L);
    const double closed = std::log(lam) + std::log(L);
    worst_closed = std::max(worst_closed, std::abs(u - closed));
    const double g = lam * L * std::exp(-u) + u;
    worst_identity = std::max(worst_identity, std::abs(g - (1.0 + u)));
    for (double d : {0.01, 0.1, 1.0})
      if (!(weighted_term(lam, L, u + d) > g && weighted_term(lam, L, u - d) > g)) ++neighbour_failures;
  }
  return {worst_identity < 1e-12 && worst_closed < 1e-12 && neighbour_failures == 0,
          fmt::format("max |g(u*)-(1+u*)| = {:.3g}, max |u*-(log lam+log L)| = {:.3g}, neighbourhood failures {}",
                      worst_identity, worst_closed, neighbour_failures)};
}

Outcome c2_streaming_fit() {
  RngStream r(202);
  double worst = 0.0;
  for (int sys = 0; sys < 100; ++sys) {
    const int degree = static_cast<int>(r.index(6));
    const double mu = r.uniform(0.5, 0.999);
    const double ridge = r.uniform() < 0.3 ? 0.0 : std::exp(r.uniform(-14, -2));
    const double lo = r.uniform(-7, -2), hi = r.uniform(-0.5, 0.45);
    PolyWeightState st = PolyWeightState::make(degree, mu, ridge);
    std::vector<double> expect;
    const int batches = 1 + static_cast<int>(r.index(4));
    for (int b = 0; b < batches; ++b) {
      std::vector<double> sig(64), loss(64), xs(64), ys(64);
      for (std::size_t i = 0; i < 64; ++i) {
        sig[i] = std::exp(r.uniform(lo, hi));
        loss[i] = std::exp(r.normal() + 0.3 * std::log(sig[i]));
        xs[i] = std::log(sig[i]);
        ys[i] = std::log(loss[i]);
      }
      st = update_from_batch(st, sig, loss);
      const auto fit = oracle::poly_fit(xs, ys, degree, ridge);
      if (expect.empty()) {
        expect = fit;
      } else {
        for (std::size_t k = 0; k < fit.size(); ++k) expect[k] = mu * expect[k] + (1 - mu) * fit[k];
      }
    }
    for (std::size_t k = 0; k < expect.size(); ++k)
      worst = std::max(worst, std::abs(st.coeffs[k] - expect[k]) / std::max(1.0, std::abs(expect[k])));
  }

  double worst_planted = 0.0;
  for (int sys = 0; sys < 20; ++sys) {
    const int degree = 1 + static_cast<int>(r.index(5));
    std::vector<double> truth(static_cast<std::size_t>(degree) + 1);
    // Kept small enough that every planted loss stays above the loss floor.
    for (auto& c : truth) c = r.uniform(-0.3, 0.3);
    std::vector<double> sig(64), loss(64);
    for (std::size_t i = 0; i < 64; ++i) {
      sig[i] = std::exp(r.uniform(-2, 0.45));
      loss[i] = std::exp(oracle::poly_naive(truth, std::log(sig[i])));
    }
    PolyWeightState st = PolyWeightState::make(degree, 0.99, 0.0);
    st = update_from_batch(st, sig, loss);
    for (std::size_t k = 0; k < truth.size(); ++k) worst_planted = std::max(worst_planted, std::abs(st.coeffs[k] - truth[k]));
    for (std::size_t i = 0; i < 64; ++i)
      worst_planted = std::max(worst_planted, std::abs(st.log_loss_estimate(sig[i]) - optimal_u(1.0, loss[i])));
  }
  return {worst < 1e-8 && worst_planted < 1e-6,
          fmt::format("oracle agreement {:.3g} (tol 1e-8), planted recovery {:.3g} (tol 1e-6)", worst, worst_planted)};
}

Outcome c3_gradients() {
  double worst_poly = 0.0, worst_mlp = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = objective_check::run(WeightingKind::variational_poly, 300 + s);
    const auto m = objective_check::run(WeightingKind::mlp, 400 + s);
    worst_poly = std::max(worst_poly, p.model_error);
    worst_mlp = std::max({worst_mlp, m.model_error, m.weight_error});
  }
  return {worst_poly < 1e-4 && worst_mlp < 1e-4,
          fmt::format("max relative error variational_poly {:.3g}, mlp {:.3g} (tol 1e-4)", worst_poly, worst_mlp)};
}

Outcome c4_paths() {
  RngStream r(404);
  double worst_fd = 0.0, worst_circle = 0.0;
  bool boundary_ok = true;
  for (int rep = 0; rep < 10; ++rep) {
    Vector x(4), z(4);
    for (int i = 0; i < 4; ++i) {
      x(i) = r.normal();
      z(i) = r.normal();
    }
    for (const auto& path : {InterpolantPath::linear(), InterpolantPath::trig(r.uniform(0.3, 2.0))}) {
      const auto dom = path.domain();
      const double h = 1e-5;
      for (int k = 1; k < 200; ++k) {
        const double t = dom.lo + (dom.hi - dom.lo) * k / 200.0;
        const Vector fd = (interpolate(path, x, z, t + h) - interpolate(path, x, z, t - h)) / (2 * h);
        worst_fd = std::max(worst_fd, (fd - velocity_target(path, x, z, t)).lpNorm<Eigen::Infinity>());
        if (path.kind == PathKind::trig) {
          const auto [g, a] = gamma_alpha(path, t);
          worst_circle = std::max(worst_circle, std::abs(g * g + a * a - 1.0));
        }
      }
      const double scale = x.norm() + z.norm();
      for (double d = 1e-1; d > 1e-7; d /= 10) {
        boundary_ok = boundary_ok && (interpolate(path, x, z, dom.lo + d) - x).norm() <= 2.0 * d * scale;
        boundary_ok = boundary_ok && (interpolate(path, x, z, dom.hi - d) - z).norm() <= 2.0 * d * scale;
      }
    }
  }
  return {worst_fd < 1e-6 && worst_circle < 1e-12 && boundary_ok,
          fmt::format("fd velocity {:.3g} (tol 1e-6), unit circle {:.3g} (tol 1e-12), boundary O(delta) {}", worst_fd,
                      worst_circle, boundary_ok ? "ok" : "violated")};
}

Outcome c5_sampler() {
  std::vector<std::string> parts;
  bool pass = true;
  for (PathKind k : {PathKind::linear, PathKind::trig}) {
    const oracle::GaussianField g{k, 0.5, 1.3};
    const InterpolantPath path = k == PathKind::linear ? InterpolantPath::linear() : InterpolantPath::trig(1.3);
    const ModelField f = [g](const Matrix& x, double c) { return g.field(x, c); };
    Matrix x0(1, 3);
    x0 << 0.7, -1.3, 2.1;
    const Matrix want = g.exact(x0, path.t_start(), path.t_end());
    std::vector<double> hs, ee, eh;
    for (int n : {16, 32, 64, 128, 256}) {
      hs.push_back(1.0 / n);
      ee.push_back((integrate(f, path, {SamplerMethod::euler, n}, x0) - want).lpNorm<Eigen::Infinity>());
      eh.push_back((integrate(f, path, {SamplerMethod::heun, n}, x0) - want).lpNorm<Eigen::Infinity>());
    }
    const double se = oracle::loglog_slope(hs, ee), sh = oracle::loglog_slope(hs, eh);
    pass = pass && std::abs(se - 1.0) <= 0.2 && std::abs(sh - 2.0) <= 0.3;
    parts.push_back(fmt::format("{} euler {:.3f} heun {:.3f}", k == PathKind::linear ? "linear" : "trig", se, sh));
  }

  RngStream r(505);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const double sd = r.uniform(0.3, 2.5);
    const auto path = InterpolantPath::trig(sd);
    Vector x0(3), z(3);
    for (int i = 0; i < 3; ++i) {
      x0(i) = r.normal();
      z(i) = r.normal();
    }
    const ModelField field = [&](const Matrix& x_in, double t) {
      Matrix out(x_in.rows(), x_in.cols());
      for (Eigen::Index j = 0; j < x_in.cols(); ++j) {
        const Vector x = sd * x_in.col(j);
        const Vector zz = (x - std::cos(t) * x0) / (std::sin(t) * sd);
        out.col(j) = (-std::sin(t) * x0 + std::cos(t) * sd * zz) / sd;
      }
      return out;
    };
    const double t0 = path.t_start(), t1 = path.t_end();
    Matrix x(3, 1);
    x.col(0) = std::cos(t0) * x0 + std::sin(t0) * sd * z;
    const Vector want = std::cos(t1) * x0 + std::sin(t1) * sd * z;
    worst = std::max(worst, (step_trig_exact(field, path, x, t0, t1).col(0) - want).lpNorm<Eigen::Infinity>());
  }
  pass = pass && worst < 1e-10;
  return {pass, fmt::format("slopes: {}; {}; trig_exact single step {:.3g} (tol 1e-10)", parts[0], parts[1], worst)};
}

Outcome c6_generative() {
  const std::string g1 = fresh_dir("gaussian_1d");
  if (cli({"train", "--config", config_path("gaussian_1d.json"), "--out", g1, "--quiet"}) != 0 ||
      cli({"eval", "--config", config_path("gaussian_1d.json"), "--checkpoint", g1 + "/final.cbor", "--out", g1 + "/eval",
           "--quiet"}) != 0)
    return {false, "1-D gaussian run failed"};
  const auto m1 = read_metrics(g1 + "/eval/eval.csv");
  const double mean = m1.at("mean_x0"), sd = m1.at("std_x0");

  const std::string g8 = fresh_dir("eight_gaussians");
  if (cli({"train", "--config", config_path("eight_gaussians.json"), "--out", g8, "--quiet"}) != 0 ||
      cli({"eval", "--config", config_path("eight_gaussians.json"), "--checkpoint", g8 + "/final.cbor", "--out",
           g8 + "/eval", "--quiet"}) != 0)
    return {false, "8-gaussians run failed"};
  const auto m8 = read_metrics(g8 + "/eval/eval.csv");
  const double cover = m8.at("fraction_within_4std");
  return {std::abs(mean) < 0.1 && std::abs(sd - 1.0) < 0.1 && cover >= 0.95,
          fmt::format("1-D mean {:.4f} std {:.4f}; 8-gaussians within 4 std {:.4f}, modes hit {}", mean, sd, cover,
                      m8.at("modes_hit"))};
}

std::string fmt_steps(const std::optional<double>& s) { return s ? fmt::format("{}", *s) : "none"; }

ComparisonReport run_suite(const std::string& config, const std::string& out) {
  const ComparisonSuite suite = suite_from_json(read_json_file(config_path(config)));
  const ComparisonReport rep = run_comparison(suite, 0, [](const std::string& msg) { std::cerr << msg << "\n"; });
  write_comparison(rep, suite, out);
  return rep;
}

Outcome c7_weighting_trend() {
  const std::string out = fresh_dir("compare_weighting");
  const ComparisonReport rep = run_suite("compare_weighting.json", out);
  const auto poly = rep.median_steps_to_threshold("variational_poly");
  const auto uni = rep.median_steps_to_threshold("uniform");
  // A median of none means the threshold was never reached.
  const bool a = poly.has_value() && (!uni.has_value() || *poly <= *uni);
  const double vp = rep.median_u_variance("variational_poly", 500), vm = rep.median_u_variance("mlp", 500);
  const bool b = vp > vm;
  return {a && b, fmt::format("7a median steps_to_threshold poly {} vs uniform {} [{}]; 7b step-500 u-grid variance "
                              "poly {:.4f} vs mlp {:.4f} [{}]; threshold {:.3f}; output {}",
                              fmt_steps(poly), fmt_steps(uni), a ? "pass" : "fail", vp, vm, b ? "pass" : "fail",
                              rep.threshold, out)};
}

Outcome c8_ablation() {
  const std::string out = fresh_dir("ablation_trig_linear");
  const ComparisonReport rep = run_suite("ablation_trig_linear.json", out);
  bool ok = true;
  for (const char* f : {"curves.csv", "median.csv", "summary.csv", "meta.csv", "report.svg", "configs/suite.json"})
    ok = ok && fs::exists(fs::path(out) / f);
  const CsvTable curves = read_csv(out + "/curves.csv");
  const CsvTable summary = read_csv(out + "/summary.csv");
  std::map<std::string, int> curve_rows, summary_rows;
  for (const auto& row : curves.rows) ++curve_rows[row[0]];
  for (const auto& row : summary.rows) ++summary_rows[row[0]];
  const std::size_t per_run = rep.eval_steps.size() * rep.seeds.size();
  for (const char* v : {"trig", "linear"}) {
    ok = ok && static_cast<std::size_t>(curve_rows[v]) == per_run;
    ok = ok && static_cast<std::size_t>(summary_rows[v]) == rep.seeds.size() + 1;
    for (std::uint64_t s : rep.seeds) ok = ok && fs::exists(fmt::format("{}/metrics/{}_seed{}.csv", out, v, s));
  }
  const auto t = rep.median_steps_to_threshold("trig"), l = rep.median_steps_to_threshold("linear");
  std::string direction = "undetermined";
  if (t && (!l || *t < *l)) direction = "trig faster";
  else if (l && (!t || *l < *t)) direction = "linear faster";
  else if (t && l) direction = "tie";
  return {ok, fmt::format("report {}; median steps_to_threshold trig {} linear {} ({}, reported only); output {}",
                          ok ? "complete" : "incomplete", fmt_steps(t), fmt_steps(l), direction, out)};
}

// Every output file, not only the CSVs: datasets, configs and checkpoints too.
std::vector<std::string> output_files(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
  std::sort(files.begin(), files.end());
  return files;
}

Outcome c9_determinism() {
  const std::string root = fresh_dir("determinism");
  const std::string cfg = root + "/run.json";
  write_text_file(cfg, R"({"schema_version": 1, "seed": 3, "data": {"n_traj": 120},
  "train": {"hidden": [32, 32], "total_steps": 60}, "inverse_dynamics": {"steps": 100},
  "eval": {"episodes": 4, "interval": 30}, "checkpoint_interval": 30})");
  const std::string suite = root + "/suite.json";
  write_text_file(suite, R"({"schema_version": 1, "seeds": [0, 1],
  "base": {"data": {"n_traj": 120}, "train": {"hidden": [32, 32], "total_steps": 60},
           "inverse_dynamics": {"steps": 100}, "eval": {"episodes": 4, "interval": 30}},
  "variants": [{"name": "uniform", "overrides": {"train": {"weighting": "uniform"}}},
               {"name": "poly", "overrides": {"train": {"weighting": "variational_poly"}}}]})");
  std::string fit_input = "sigma,loss\n";
  for (int i = 1; i <= 30; ++i) fit_input += fmt::format("{},{}\n", 0.03 * i, 1.0 + 0.1 * i);
  write_text_file(root + "/fit.csv", fit_input);

  const std::vector<std::string> kinds{"gen", "train", "eval", "toy", "compare", "fit"};
  for (const char* rep : {"a", "b"}) {
    const std::string d = root + "/" + rep;
    fs::create_directories(d);
    const std::vector<std::vector<std::string>> cmds{
        {"gen-data", "--config", cfg, "--out", d + "/gen"},
        {"train", "--config", cfg, "--data", d + "/gen/dataset.json", "--out", d + "/train"},
        {"eval", "--config", cfg, "--data", d + "/gen/dataset.json", "--checkpoint", d + "/train/final.cbor", "--out",
         d + "/eval"},
        {"train", "--config", config_path("gaussian_1d.json"), "--steps", "50", "--out", d + "/toy"},
        {"compare", "--config", suite, "--out", d + "/compare"},
        {"fit-demo", "--input", root + "/fit.csv", "--degree", "3", "--out", d + "/fit"}};
    for (auto c : cmds) {
      c.push_back("--quiet");
      if (c[0] == "fit-demo") c.pop_back();
      if (cli(c) != 0) return {false, "command failed: " + c[0]};
    }
  }
  int compared = 0, csvs = 0;
  std::vector<std::string> mismatched;
  for (const auto& k : kinds) {
    const std::string a = root + "/a/" + k, b = root + "/b/" + k;
    const auto fa = output_files(a), fb = output_files(b);
    if (fa != fb || fa.empty()) {
      mismatched.push_back(k + "/(file list)");
      continue;
    }
    for (const auto& f : fa) {
      ++compared;
      if (fs::path(f).extension() == ".csv") ++csvs;
      if (slurp(a + "/" + f) != slurp(b + "/" + f)) mismatched.push_back(k + "/" + f);
    }
  }
  std::string detail = fmt::format("{} output files ({} CSV) across gen-data, train, eval, compare, fit-demo byte-identical", compared, csvs);
  if (!mismatched.empty()) detail = fmt::format("{} mismatched, first {}", mismatched.size(), mismatched.front());
  return {mismatched.empty(), detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  Outcome (*fn)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "variational optimum", 1, c1_optimum},
      {2, "streaming fit oracle equivalence", 5, c2_streaming_fit},
      {3, "gradient correctness", 30, c3_gradients},
      {4, "flow-path identities", 1, c4_paths},
      {5, "sampler order of accuracy", 30, c5_sampler},
      {6, "generative end-to-end", 600, c6_generative},
      {7, "weighting trend", 2700, c7_weighting_trend},
      {8, "ablation harness", 2700, c8_ablation},
      {9, "determinism", 600, c9_determinism},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else {
      wanted.push_back(std::stoi(a));
    }
  }
  bool all_pass = true;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt::format("; over runtime budget {} s", c.budget_s);
    }
    all_pass = all_pass && o.pass;
    std::cout << fmt::format("{} criterion {} ({}): {} [{:.1f} s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail,
                             secs)
              << std::flush;
  }
  return all_pass ? 0 : 1;
}
