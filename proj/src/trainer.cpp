#include "polyflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "polyflow/errors.hpp"

namespace polyflow {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
  if (!(sigma_d > 0.0)) throw ConfigError("sigma_d must be positive");
  if (poly_degree < 0) throw ConfigError("poly_degree must be non-negative");
  if (!(poly_mu >= 0.0 && poly_mu < 1.0)) throw ConfigError("poly_mu must lie in [0, 1)");
  if (weighting == WeightingKind::variational_poly && batch_size < poly_degree + 1)
    throw ConfigError("batch_size must be at least poly_degree + 1 for variational_poly weighting");
  for (double r : ema_rates)
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("EMA rates must lie in [0, 1)");
  if (hidden.empty()) throw ConfigError("denoiser needs at least one hidden layer");
  if (time_freqs < 1 || mlp_weight_freqs < 1 || mlp_weight_width < 1)
    throw ConfigError("embedding sizes must be positive");
  if (log_interval < 1) throw ConfigError("log_interval must be positive");
  if (time_sampler.path != path) throw ConfigError("time sampler path differs from training path");
  for (Eigen::Index i : clamp_dims)
    if (i < 0) throw ConfigError("clamp_dims entries must be non-negative");
}

InterpolantPath TrainConfig::make_path() const {
  return path == PathKind::linear ? InterpolantPath::linear() : InterpolantPath::trig(sigma_d);
}

FlowBatch make_flow_batch(const InterpolantPath& path, Matrix x, Matrix z, std::vector<double> t,
                          std::vector<Eigen::Index> clamped) {
  FlowBatch b;
  b.x_t = interpolate_batch(path, x, z, t);
  b.v_target = velocity_target_batch(path, x, z, t);
  for (Eigen::Index i : clamped) {
    if (i < 0 || i >= x.rows()) throw InvalidInputError("clamped coordinate out of range");
    b.x_t.row(i) = x.row(i);
    b.v_target.row(i).setZero();
  }
  b.clamped = std::move(clamped);
  b.x = std::move(x);
  b.z = std::move(z);
  b.t = std::move(t);
  return b;
}

Matrix evaluate_losses(const Denoiser& model, const InterpolantPath& path, FlowBatch& batch,
                       MlpCache* cache) {
  std::vector<double> c(batch.t.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = c_noise(path, batch.t[i]);
  Matrix residual = model.forward(model_input_scale(path, batch.x_t), c, cache) - batch.v_target;
  for (Eigen::Index i : batch.clamped) residual.row(i).setZero();
  const auto dim = static_cast<double>(residual.rows() - static_cast<Eigen::Index>(batch.clamped.size()));
  if (!(dim > 0)) throw InvalidInputError("every coordinate is clamped");
  batch.per_sample_loss.resize(static_cast<std::size_t>(residual.cols()));
  for (Eigen::Index j = 0; j < residual.cols(); ++j)
    batch.per_sample_loss[static_cast<std::size_t>(j)] = residual.col(j).squaredNorm() / dim;
  return residual;
}

FlowBatch compute_flow_loss(const Denoiser& model, const InterpolantPath& path, const Matrix& x,
                            const TimeSampler& sampler, RngStream& rng) {
  if (x.cols() == 0) throw InvalidInputError("compute_flow_loss: empty batch");
  Matrix z(x.rows(), x.cols());
  const double scale = path.noise_scale();
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = scale * rng.normal();
  auto t = sample_time(sampler, rng, static_cast<std::size_t>(x.cols()));
  FlowBatch batch = make_flow_batch(path, x, std::move(z), std::move(t));
  evaluate_losses(model, path, batch);
  for (double l : batch.per_sample_loss)
    if (!std::isfinite(l)) throw DivergenceError("non-finite flow loss");
  return batch;
}

ObjectiveEval weighted_objective(const Denoiser& model, const WeightingScheme& weighting,
                                 const InterpolantPath& path, FlowBatch& batch, bool with_grad) {
  ObjectiveEval out;
  MlpCache model_cache;
  const Matrix residual = evaluate_losses(model, path, batch, with_grad ? &model_cache : nullptr);
  const std::size_t n = batch.t.size();
  const auto bsz = static_cast<double>(n);

  MlpCache weight_cache;
  if (weighting.kind == WeightingKind::mlp) {
    out.u = weighting.mlp.evaluate(batch.t, with_grad ? &weight_cache : nullptr);
  } else {
    out.u = weighting.u_values(batch.t);
  }

  std::vector<double> scale(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lam = weighting.lambda(batch.t[i]);
    scale[i] = lam * std::exp(-out.u[i]);
    out.raw_loss += batch.per_sample_loss[i];
    out.objective += scale[i] * batch.per_sample_loss[i] + out.u[i];
  }
  out.raw_loss /= bsz;
  out.objective /= bsz;
  if (!with_grad) return out;

  // d/dF of scale_i * |R_i|^2 / D, averaged over the batch.
  const auto dim = static_cast<double>(residual.rows() - static_cast<Eigen::Index>(batch.clamped.size()));
  Matrix grad_out = residual;
  for (Eigen::Index j = 0; j < grad_out.cols(); ++j)
    grad_out.col(j) *= 2.0 * scale[static_cast<std::size_t>(j)] / (dim * bsz);
  out.model_grad.assign(model.net().num_params(), 0.0);
  model.backward(model_cache, grad_out, out.model_grad);

  if (weighting.kind == WeightingKind::mlp) {
    Matrix du(1, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      du(0, static_cast<Eigen::Index>(i)) = (1.0 - scale[i] * batch.per_sample_loss[i]) / bsz;
    out.weight_grad.assign(weighting.mlp.net.num_params(), 0.0);
    weighting.mlp.net.backward(weight_cache, du, out.weight_grad);
  }
  return out;
}

Normalizer Normalizer::identity(int dim) {
  return Normalizer{Vector::Zero(dim), Vector::Ones(dim)};
}

Normalizer Normalizer::fit(const Matrix& data) {
  if (data.cols() < 2) return identity(static_cast<int>(data.rows()));
  Normalizer n;
  n.mean = data.rowwise().mean();
  n.stddev.resize(data.rows());
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const double var = (data.row(i).array() - n.mean(i)).square().sum() /
                       static_cast<double>(data.cols() - 1);
    n.stddev(i) = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return n;
}

Matrix Normalizer::apply(const Matrix& raw) const {
  if (raw.rows() != mean.size()) throw InvalidInputError("Normalizer: dimension mismatch");
  return (raw.colwise() - mean).array().colwise() / stddev.array();
}

Matrix Normalizer::invert(const Matrix& normalized) const {
  if (normalized.rows() != mean.size()) throw InvalidInputError("Normalizer: dimension mismatch");
  Matrix out = normalized.array().colwise() * stddev.array();
  return out.colwise() + mean;
}

void MetricLog::append(StepRecord record) {
  if (!records_.empty() && record.step <= records_.back().step)
    throw ContractViolation("MetricLog: steps must increase");
  records_.push_back(std::move(record));
}

std::string MetricLog::csv_header() {
  std::string h = "step,raw_loss,weighted_obj";
  for (int k = 0; k < kUGridSize; ++k) h += fmt::format(",u_grid_{}", k);
  h += ",wall_ms\n";
  return h;
}

std::string MetricLog::csv_row(const StepRecord& r) {
  std::string row = fmt::format("{},{},{}", r.step, r.raw_loss, r.weighted_obj);
  for (double u : r.u_grid) row += fmt::format(",{}", u);
  row += fmt::format(",{}\n", r.wall_ms);
  return row;
}

std::string MetricLog::to_csv() const {
  std::string out = csv_header();
  for (const auto& r : records_) out += csv_row(r);
  return out;
}

std::array<double, kUGridSize> u_grid_sigmas(PathKind kind) {
  const TimeDomain dom = time_domain(kind);
  const double lo = dom.lo + kTimeClamp;
  const double hi = dom.hi - kTimeClamp;
  std::array<double, kUGridSize> g{};
  for (int k = 0; k < kUGridSize; ++k) g[static_cast<std::size_t>(k)] = lo + (hi - lo) * k / (kUGridSize - 1);
  return g;
}

double u_grid_variance(const std::array<double, kUGridSize>& u) {
  const double mean = std::accumulate(u.begin(), u.end(), 0.0) / kUGridSize;
  double acc = 0.0;
  for (double v : u) acc += (v - mean) * (v - mean);
  return acc / kUGridSize;
}

TrainState init_train_state(const TrainConfig& config, int data_dim, Normalizer normalizer) {
  config.validate();
  if (normalizer.mean.size() != data_dim) throw InvalidInputError("normalizer dimension mismatch");
  RngStream root(config.seed);
  RngStream init_rng = root.split(1);
  TrainState s;
  s.config = config;
  s.path = config.make_path();
  s.normalizer = std::move(normalizer);
  s.model = Denoiser(data_dim, config.hidden, config.time_freqs, init_rng);
  s.adam = AdamState::for_size(s.model.net().num_params());
  for (double rate : config.ema_rates) s.emas.push_back(EmaParams::from(s.model.net().params(), rate));
  s.weighting.kind = config.weighting;
  s.weighting.lambda = config.lambda;
  s.weighting.poly = PolyWeightState::make(config.poly_degree, config.poly_mu, config.poly_ridge);
  s.weighting.poly.loss_floor = config.loss_floor;
  if (config.weighting == WeightingKind::mlp) {
    RngStream weight_rng = root.split(2);
    s.weighting.mlp = MlpWeightState(config.mlp_weight_freqs, config.mlp_weight_width, weight_rng);
  }
  s.rng = root.split(3);
  return s;
}

StepRecord training_step(TrainState& state, const Matrix& data) {
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig& cfg = state.config;
  if (data.cols() == 0) throw InvalidInputError("training_step: empty dataset");

  Matrix x(data.rows(), cfg.batch_size);
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    x.col(j) = data.col(static_cast<Eigen::Index>(state.rng.index(static_cast<std::uint64_t>(data.cols()))));

  Matrix z(x.rows(), x.cols());
  const double scale = state.path.noise_scale();
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = scale * state.rng.normal();
  auto t = sample_time(cfg.time_sampler, state.rng, static_cast<std::size_t>(cfg.batch_size));
  FlowBatch batch = make_flow_batch(state.path, std::move(x), std::move(z), std::move(t), cfg.clamp_dims);

  // Weights come from the state before this batch's own update.
  ObjectiveEval eval = weighted_objective(state.model, state.weighting, state.path, batch, true);
  if (!std::isfinite(eval.raw_loss) || eval.raw_loss > cfg.divergence_limit ||
      !std::isfinite(eval.objective))
    throw DivergenceError(fmt::format("training diverged at step {} (raw loss {})", state.step + 1,
                                      eval.raw_loss));

  adam_step(state.model.net().mutable_params(), eval.model_grad, state.adam, cfg.lr);
  if (state.weighting.kind == WeightingKind::mlp)
    adam_step(state.weighting.mlp.net.mutable_params(), eval.weight_grad, state.weighting.mlp.adam,
              cfg.lr);
  if (state.weighting.kind == WeightingKind::variational_poly) {
    try {
      state.weighting.poly = update_from_batch(state.weighting.poly, batch.t, batch.per_sample_loss);
    } catch (const InsufficientDataError&) {
    } catch (const DegenerateFitError&) {
    }
  }
  for (auto& ema : state.emas) ema.update(state.model.net().params());
  ++state.step;

  StepRecord rec;
  rec.step = state.step;
  rec.raw_loss = eval.raw_loss;
  rec.weighted_obj = eval.objective;
  rec.sigma_samples = std::move(batch.t);
  rec.loss_samples = std::move(batch.per_sample_loss);
  const auto grid = u_grid_sigmas(state.path.kind);
  const auto u = state.weighting.u_values(grid);
  std::copy(u.begin(), u.end(), rec.u_grid.begin());
  if (cfg.log_wall_time)
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

void continue_training(TrainResult& result, const Matrix& raw_data, const StepCallback& on_step) {
  const Matrix data = result.state.normalizer.apply(raw_data);
  while (result.state.step < result.state.config.total_steps) {
    StepRecord rec;
    try {
      rec = training_step(result.state, data);
    } catch (const DivergenceError& e) {
      result.divergence = e.what();
      return;
    }
    if (rec.step % result.state.config.log_interval == 0) result.log.append(rec);
    if (on_step) on_step(result.state, rec);
  }
}

TrainResult train(const TrainConfig& config, const Matrix& raw_data,
                  std::optional<Normalizer> normalizer, const StepCallback& on_step) {
  if (raw_data.cols() == 0 || raw_data.rows() == 0) throw InvalidInputError("train: empty dataset");
  Normalizer norm = normalizer ? *normalizer
                               : (config.normalize ? Normalizer::fit(raw_data)
                                                   : Normalizer::identity(static_cast<int>(raw_data.rows())));
  TrainResult result{init_train_state(config, static_cast<int>(raw_data.rows()), std::move(norm)), {}, {}};
  continue_training(result, raw_data, on_step);
  return result;
}

// Checkpoint layout ------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;
using nlohmann::json;

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json adam_json(const AdamState& a) {
  return json{{"m", a.m}, {"v", a.v}, {"step", a.step}};
}

void json_adam(const json& j, AdamState& a) {
  auto m = j.at("m").get<std::vector<double>>();
  auto v = j.at("v").get<std::vector<double>>();
  if (m.size() != a.m.size() || v.size() != a.v.size())
    throw IoError("checkpoint optimizer state does not match the model shape");
  a.m = std::move(m);
  a.v = std::move(v);
  a.step = j.at("step").get<std::int64_t>();
}

void set_params_checked(Mlp& net, const json& j) {
  const auto p = j.get<std::vector<double>>();
  if (p.size() != net.num_params()) throw IoError("checkpoint parameters do not match the model shape");
  net.set_params(p);
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& s) {
  json doc;
  doc["format"] = "polyflow-checkpoint";
  doc["version"] = kCheckpointVersion;
  doc["step"] = s.step;
  doc["seed"] = s.config.seed;
  doc["data_dim"] = s.model.data_dim();
  doc["sigma_d"] = s.path.sigma_d;
  doc["normalizer"] = {{"mean", vec_json(s.normalizer.mean)}, {"std", vec_json(s.normalizer.stddev)}};
  const auto p = s.model.net().params();
  doc["model"] = std::vector<double>(p.begin(), p.end());
  doc["adam"] = adam_json(s.adam);
  json emas = json::array();
  for (const auto& e : s.emas) emas.push_back({{"rate", e.rate}, {"shadow", e.shadow}});
  doc["ema"] = emas;
  const auto& st = s.rng.state();
  doc["rng"] = std::vector<std::uint64_t>(st.begin(), st.end());
  json w;
  w["kind"] = static_cast<int>(s.weighting.kind);
  w["poly"] = {{"coeffs", s.weighting.poly.coeffs.coeffs},
               {"initialized", s.weighting.poly.initialized},
               {"mu", s.weighting.poly.ema_mu},
               {"ridge", s.weighting.poly.ridge},
               {"loss_floor", s.weighting.poly.loss_floor},
               {"clamp_to_support", s.weighting.poly.clamp_to_support},
               {"has_support", s.weighting.poly.has_support},
               {"support", {s.weighting.poly.support_lo, s.weighting.poly.support_hi}}};
  if (s.weighting.kind == WeightingKind::mlp) {
    const auto wp = s.weighting.mlp.net.params();
    w["mlp"] = {{"params", std::vector<double>(wp.begin(), wp.end())},
                {"adam", adam_json(s.weighting.mlp.adam)}};
  }
  doc["weighting"] = w;

  const auto bytes = json::to_cbor(doc);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into " + path);
}

void load_checkpoint(const std::string& path, TrainState& s) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json doc;
  try {
    doc = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (doc.value("format", "") != "polyflow-checkpoint") throw IoError("not a polyflow checkpoint");
  if (doc.at("version").get<int>() != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + doc.at("version").dump());
  if (doc.at("data_dim").get<int>() != s.model.data_dim()) throw IoError("checkpoint data dimension differs");
  if (static_cast<int>(doc.at("weighting").at("kind").get<int>()) != static_cast<int>(s.weighting.kind))
    throw IoError("checkpoint weighting scheme differs from config");

  try {
    s.step = doc.at("step").get<std::int64_t>();
    s.path.sigma_d = doc.at("sigma_d").get<double>();
    s.normalizer.mean = json_vec(doc.at("normalizer").at("mean"));
    s.normalizer.stddev = json_vec(doc.at("normalizer").at("std"));
    set_params_checked(s.model.net(), doc.at("model"));
    json_adam(doc.at("adam"), s.adam);
    const auto& emas = doc.at("ema");
    if (emas.size() != s.emas.size()) throw IoError("checkpoint EMA count differs from config");
    for (std::size_t i = 0; i < emas.size(); ++i) {
      s.emas[i].rate = emas[i].at("rate").get<double>();
      s.emas[i].shadow = emas[i].at("shadow").get<std::vector<double>>();
    }
    const auto rng = doc.at("rng").get<std::vector<std::uint64_t>>();
    if (rng.size() != 4) throw IoError("bad RNG state in checkpoint");
    s.rng.set_state({rng[0], rng[1], rng[2], rng[3]});
    const auto& w = doc.at("weighting");
    const auto& poly = w.at("poly");
    s.weighting.poly.coeffs = PolyCoeffs(poly.at("coeffs").get<std::vector<double>>());
    s.weighting.poly.initialized = poly.at("initialized").get<bool>();
    s.weighting.poly.ema_mu = poly.at("mu").get<double>();
    s.weighting.poly.ridge = poly.at("ridge").get<double>();
    s.weighting.poly.loss_floor = poly.at("loss_floor").get<double>();
    s.weighting.poly.clamp_to_support = poly.at("clamp_to_support").get<bool>();
    s.weighting.poly.has_support = poly.at("has_support").get<bool>();
    s.weighting.poly.support_lo = poly.at("support").at(0).get<double>();
    s.weighting.poly.support_hi = poly.at("support").at(1).get<double>();
    if (s.weighting.kind == WeightingKind::mlp) {
      set_params_checked(s.weighting.mlp.net, w.at("mlp").at("params"));
      json_adam(w.at("mlp").at("adam"), s.weighting.mlp.adam);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace polyflow
