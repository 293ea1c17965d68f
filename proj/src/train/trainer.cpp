#include "ehpe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <span>

#include "ehpe/autodiff/ops.hpp"

namespace ehpe::train {

using handsim::ConfigError;
using handsim::DataError;
using nlohmann::json;

// ---- Adam ----------------------------------------------------------------------

Adam::Adam(std::vector<ad::Parameter*> params, AdamConfig cfg) : cfg_(cfg) {
  for (auto* p : params)
    if (!p->frozen) params_.push_back(p);
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step(double lr) {
  for (auto* p : params_) {
    if (p->grad.size() != p->value.size())
      throw std::logic_error("parameter " + p->name + " has no gradient buffer");
    for (std::size_t k = 0; k < p->grad.size(); ++k)
      if (!std::isfinite(p->grad[k]))
        throw NumericError("non-finite gradient in parameter " + p->name + " at index " + std::to_string(k));
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[k] / bc1, vh = v[k] / bc2;
      p.value[k] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

std::vector<ad::Parameter*> trainable(ParamStore& store) {
  std::vector<ad::Parameter*> out;
  for (auto& p : store)
    if (!p.frozen) out.push_back(&p);
  return out;
}

// ---- config -------------------------------------------------------------------------

const char* phase_name(Phase p) { return p == Phase::kTW ? "TW" : "PG"; }

TrainConfig TrainConfig::defaults(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  if (phase == Phase::kPG) {
    c.epochs = 40;
    c.lr_initial = 5e-4;
    c.lr_milestones = {20};
  }
  return c;
}

namespace {

template <class T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("phase")) throw ConfigError("config key 'phase' is required");
  const auto phase = get_as<std::string>(j.at("phase"), "phase");
  if (phase != "TW" && phase != "PG" && phase != "tw" && phase != "pg")
    throw ConfigError("phase must be TW or PG, got '" + phase + "'");
  TrainConfig c = defaults(phase == "TW" || phase == "tw" ? Phase::kTW : Phase::kPG);
  for (const auto& [key, v] : j.items()) {
    if (key == "phase") continue;
    else if (key == "epochs") c.epochs = get_as<std::size_t>(v, key);
    else if (key == "batch_size") c.batch_size = get_as<std::size_t>(v, key);
    else if (key == "lr_initial") c.lr_initial = get_as<double>(v, key);
    else if (key == "lr_milestones") c.lr_milestones = get_as<std::vector<std::size_t>>(v, key);
    else if (key == "lr_decay") c.lr_decay = get_as<double>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "dataset") c.dataset = get_as<std::string>(v, key);
    else if (key == "checkpoint_out") c.checkpoint_out = get_as<std::string>(v, key);
    else if (key == "tw_checkpoint") c.tw_checkpoint = get_as<std::string>(v, key);
    else if (key == "log") c.log = get_as<std::string>(v, key);
    else if (key == "tw_joints") c.tw_joints = get_as<std::vector<std::string>>(v, key);
    else if (key == "tw_guidance") c.tw_guidance = get_as<bool>(v, key);
    else if (key == "spi") c.spi = get_as<bool>(v, key);
    else if (key == "fem") c.fem = get_as<bool>(v, key);
    else if (key == "edge_mode") c.edge_mode = get_as<std::string>(v, key);
    else if (key == "gat_layers") c.gat_layers = get_as<std::size_t>(v, key);
    else if (key == "fem_duplicate_tokens") c.fem_duplicate_tokens = get_as<bool>(v, key);
    else if (key == "pin_tw_joints") c.pin_tw_joints = get_as<bool>(v, key);
    else if (key == "embedding_init") c.embedding_init = get_as<std::string>(v, key);
    else if (key == "lambda_h") c.tw_loss.heatmap = get_as<double>(v, key);
    else if (key == "lambda_ed") c.tw_loss.distance = get_as<double>(v, key);
    else if (key == "lambda_r") c.tw_loss.regularization = get_as<double>(v, key);
    else if (key == "lambda_p") c.pg_loss.position = get_as<double>(v, key);
    else if (key == "lambda_e") c.pg_loss.edge = get_as<double>(v, key);
    else if (key == "train_limit") c.train_limit = get_as<std::size_t>(v, key);
    else if (key == "val_limit") c.val_limit = get_as<std::size_t>(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

json TrainConfig::to_json() const {
  return {{"phase", phase_name(phase)},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr_initial", lr_initial},
          {"lr_milestones", lr_milestones},
          {"lr_decay", lr_decay},
          {"seed", seed},
          {"dataset", dataset},
          {"checkpoint_out", checkpoint_out},
          {"tw_checkpoint", tw_checkpoint},
          {"log", log},
          {"tw_joints", tw_joints},
          {"tw_guidance", tw_guidance},
          {"spi", spi},
          {"fem", fem},
          {"edge_mode", edge_mode},
          {"gat_layers", gat_layers},
          {"fem_duplicate_tokens", fem_duplicate_tokens},
          {"pin_tw_joints", pin_tw_joints},
          {"embedding_init", embedding_init},
          {"lambda_h", tw_loss.heatmap},
          {"lambda_ed", tw_loss.distance},
          {"lambda_r", tw_loss.regularization},
          {"lambda_p", pg_loss.position},
          {"lambda_e", pg_loss.edge},
          {"train_limit", train_limit},
          {"val_limit", val_limit}};
}

std::vector<std::size_t> TrainConfig::tw_joint_indices() const {
  std::vector<handsim::JointCategory> cats;
  for (const auto& name : tw_joints) {
    const auto c = handsim::parse_category(name);
    if (!c) throw ConfigError("unknown joint category '" + name + "' (expected W, TIP, DIP, PIP or MCP)");
    if (std::find(cats.begin(), cats.end(), *c) != cats.end()) throw ConfigError("duplicate joint category " + name);
    cats.push_back(*c);
  }
  if (cats.empty()) throw ConfigError("tw_joints must name at least one category");
  return tw::joints_of(cats);
}

tw::ModelConfig TrainConfig::tw_model() const {
  tw::ModelConfig c;
  c.joints = tw_joint_indices();
  c.validate();
  return c;
}

pg::ModelConfig TrainConfig::pg_model(const tw::ModelConfig& twc) const {
  pg::ModelConfig c = pg::ModelConfig::matching(twc);
  c.tw_guidance = tw_guidance;
  c.spi = spi;
  c.fem = fem;
  if (edge_mode != "dynamic" && edge_mode != "fixed") throw ConfigError("edge_mode must be 'dynamic' or 'fixed'");
  c.edge_mode = edge_mode == "dynamic" ? pg::EdgeMode::kDynamic : pg::EdgeMode::kFixed;
  c.gat_layers = gat_layers;
  c.fem_duplicate_tokens = fem_duplicate_tokens;
  c.pin_tw_joints = pin_tw_joints;
  if (embedding_init != "mean_pose" && embedding_init != "zeros")
    throw ConfigError("embedding_init must be 'mean_pose' or 'zeros'");
  c.embedding_init = embedding_init == "mean_pose" ? pg::EmbeddingInit::kMeanPose : pg::EmbeddingInit::kZeros;
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_initial > 0) || !std::isfinite(lr_initial)) throw ConfigError("lr_initial must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must lie in (0, 1]");
  for (double w : {tw_loss.heatmap, tw_loss.distance, tw_loss.regularization, pg_loss.position, pg_loss.edge})
    if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  for (std::size_t i = 1; i < lr_milestones.size(); ++i)
    if (lr_milestones[i] <= lr_milestones[i - 1]) throw ConfigError("lr_milestones must be strictly increasing");
  const auto twc = tw_model();
  if (phase == Phase::kPG) pg_model(twc);
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr_initial;
  for (std::size_t m : cfg.lr_milestones)
    if (epoch >= m) lr *= cfg.lr_decay;
  return lr;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

// ---- data ----------------------------------------------------------------------------

void check_dataset(const handsim::Dataset& ds, const tw::ModelConfig& cfg) {
  if (ds.samples.empty()) throw DataError("dataset has no samples");
  if (ds.channels != cfg.in_channels || ds.camera.width != cfg.image_w || ds.camera.height != cfg.image_h)
    throw DataError("dataset images are " + std::to_string(ds.channels) + "x" + std::to_string(ds.camera.height) +
                    "x" + std::to_string(ds.camera.width) + ", model expects " + std::to_string(cfg.in_channels) +
                    "x" + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
  if (ds.camera.depth_bins != handsim::kDepthBins) throw DataError("dataset depth bins differ from the model's");
}

std::vector<std::size_t> split_indices(const handsim::Dataset& ds, handsim::Split s, std::size_t limit) {
  auto idx = ds.indices(s);
  if (limit > 0 && idx.size() > limit) idx.resize(limit);
  return idx;
}

handsim::Joints world_joints(const handsim::Dataset& ds, std::size_t i) {
  return handsim::unproject(ds.samples[i].joints25d, ds.camera);
}

std::array<handsim::Vec3, pg::kNodes> mean_pose(const handsim::Dataset& ds, const std::vector<std::size_t>& indices,
                                                 const pg::ModelConfig& cfg) {
  std::array<handsim::Vec3, pg::kNodes> m{};
  if (indices.empty()) return m;
  for (std::size_t i : indices)
    for (std::size_t j = 0; j < pg::kNodes; ++j) {
      const auto n = pg::normalize(cfg, ds.samples[i].joints25d[j]);
      for (int k = 0; k < 3; ++k) m[j][k] += n[k];
    }
  for (auto& p : m)
    for (auto& v : p) v /= static_cast<double>(indices.size());
  return m;
}

namespace {

struct Batch {
  std::size_t n = 0;
  std::vector<double> images;
  std::vector<const handsim::Joints*> joints;
};

Batch gather(const handsim::Dataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  b.n = idx.size();
  for (std::size_t i : idx) {
    const auto& s = ds.samples[i];
    b.images.insert(b.images.end(), s.image.begin(), s.image.end());
    b.joints.push_back(&s.joints25d);
  }
  return b;
}

ad::Tensor image_tensor(ad::Tape& tape, const tw::ModelConfig& c, const Batch& b) {
  return tape.constant({b.n, c.in_channels, c.image_h, c.image_w}, b.images);
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

handsim::Joints to_world(const pg::ModelConfig& pgc, const double* coords, const handsim::Camera& cam) {
  handsim::Joints out;
  for (std::size_t j = 0; j < pg::kNodes; ++j) {
    const auto px = pg::denormalize(pgc, {coords[j * 3], coords[j * 3 + 1], coords[j * 3 + 2]});
    out[j] = handsim::unproject_point(px, cam);
  }
  return out;
}

}  // namespace

TwCache run_tw(tw::Model& model, const handsim::Dataset& ds, const std::vector<std::size_t>& indices,
               const pg::ModelConfig& pgc, std::size_t batch) {
  const auto& c = model.config();
  TwCache cache;
  cache.joints = c.num_joints();
  cache.feature_size = c.feature_channels() * c.feature_h() * c.feature_w();
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t end = std::min(indices.size(), start + batch);
    const Batch b = gather(ds, std::span(indices).subspan(start, end - start));
    ad::Tape tape;
    const auto out = model.forward(tape, image_tensor(tape, c, b));
    const auto jd = out.joints.data();
    const auto fd = out.featmap.data();
    for (std::size_t s = 0; s < b.n; ++s) {
      std::vector<double> coords;
      std::vector<handsim::Vec3> px;
      for (std::size_t j = 0; j < cache.joints; ++j) {
        const auto p = tw::volume_to_pixels(c, &jd[(s * cache.joints + j) * 3]);
        px.push_back(p);
        const auto n = pg::normalize(pgc, p);
        coords.insert(coords.end(), n.begin(), n.end());
      }
      cache.coords.push_back(std::move(coords));
      cache.pixels.push_back(std::move(px));
      cache.features.emplace_back(fd.begin() + s * cache.feature_size, fd.begin() + (s + 1) * cache.feature_size);
    }
  }
  return cache;
}

namespace {

struct PgInputs {
  ad::Tensor tw, featmap;
};

PgInputs pg_inputs(ad::Tape& tape, const pg::ModelConfig& pgc, const TwCache& cache,
                   std::span<const std::size_t> rows) {
  std::vector<double> tw, fm;
  for (std::size_t r : rows) {
    tw.insert(tw.end(), cache.coords[r].begin(), cache.coords[r].end());
    fm.insert(fm.end(), cache.features[r].begin(), cache.features[r].end());
  }
  const std::size_t B = rows.size();
  return {tape.constant({B, cache.joints, 3}, std::move(tw)),
          tape.constant({B, pgc.feature_channels, pgc.feature_h, pgc.feature_w}, std::move(fm))};
}

}  // namespace

std::vector<handsim::Joints> predict_cached(pg::Model& pgm, const TwCache& cache, const handsim::Camera& cam) {
  const auto& pgc = pgm.config();
  std::vector<handsim::Joints> out;
  std::vector<std::size_t> rows(cache.coords.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  for (std::size_t start = 0; start < rows.size(); start += 64) {
    const std::size_t end = std::min(rows.size(), start + 64);
    ad::Tape tape;
    const auto in = pg_inputs(tape, pgc, cache, std::span(rows).subspan(start, end - start));
    const auto o = pgm.forward(tape, in.tw, in.featmap);
    const auto d = o.coords.data();
    for (std::size_t s = 0; s < end - start; ++s) out.push_back(to_world(pgc, &d[s * pg::kNodes * 3], cam));
  }
  return out;
}

std::vector<handsim::Joints> predict(tw::Model& twm, pg::Model& pgm, const handsim::Dataset& ds,
                                     const std::vector<std::size_t>& indices) {
  return predict_cached(pgm, run_tw(twm, ds, indices, pgm.config()), ds.camera);
}

std::vector<handsim::Joints> predict_tw_only(tw::Model& twm, const handsim::Dataset& ds,
                                             const std::vector<std::size_t>& indices) {
  const auto& c = twm.config();
  if (c.num_joints() != pg::kNodes)
    throw CheckpointError("TW model covers " + std::to_string(c.num_joints()) +
                          " joints; direct 21-joint decoding needs all of them");
  const pg::ModelConfig frame = pg::ModelConfig::matching(c);
  const auto cache = run_tw(twm, ds, indices, frame);
  std::vector<handsim::Joints> out;
  for (const auto& px : cache.pixels) {
    handsim::Joints j;
    for (std::size_t k = 0; k < pg::kNodes; ++k) j[k] = handsim::unproject_point(px[k], ds.camera);
    out.push_back(j);
  }
  return out;
}

// ---- phase TW ---------------------------------------------------------------------------

namespace {

json stripped(const TrainConfig& cfg) {
  json j = cfg.to_json();
  for (const char* k : {"dataset", "checkpoint_out", "tw_checkpoint", "log"}) j.erase(k);
  return j;
}

struct TwSums {
  double total = 0, heatmap = 0, distance = 0, regularization = 0;
  std::size_t n = 0;

  void add(const tw::LossTW& l, std::size_t b) {
    total += l.total.item() * static_cast<double>(b);
    heatmap += l.heatmap.item() * static_cast<double>(b);
    distance += l.distance.item() * static_cast<double>(b);
    regularization += l.regularization.item() * static_cast<double>(b);
    n += b;
  }
  json to_json() const {
    const double d = n ? static_cast<double>(n) : 1.0;
    return {{"total", total / d}, {"heatmap", heatmap / d}, {"distance", distance / d},
            {"regularization", regularization / d}};
  }
};

tw::LossTW tw_batch_loss(ad::Tape& tape, tw::Model& model, const Batch& b, const tw::LossWeights& lw,
                         ad::Tensor* joints = nullptr) {
  const auto& c = model.config();
  const auto out = model.forward(tape, image_tensor(tape, c, b));
  if (joints) *joints = out.joints;
  const auto t = tw::make_targets(c, b.joints);
  const std::size_t J = c.num_joints();
  return tw::loss_tw(out.heatmap2d, tape.constant({b.n, J, c.heatmap_h(), c.heatmap_w()}, t.heatmaps), out.joints,
                     tape.constant({b.n, J, 3}, t.joints), out.weights, lw);
}

// Forward-only pass; also the mean 2.5D pixel error of the TW joints.
json tw_eval(tw::Model& model, const handsim::Dataset& ds, const std::vector<std::size_t>& idx, std::size_t batch,
            const tw::LossWeights& lw) {
  TwSums sums;
  double px_err = 0;
  const auto& c = model.config();
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::size_t end = std::min(idx.size(), start + batch);
    const Batch b = gather(ds, std::span(idx).subspan(start, end - start));
    ad::Tape tape;
    ad::Tensor joints;
    sums.add(tw_batch_loss(tape, model, b, lw, &joints), b.n);
    const auto jd = joints.data();
    for (std::size_t s = 0; s < b.n; ++s)
      for (std::size_t j = 0; j < c.num_joints(); ++j) {
        const auto p = tw::volume_to_pixels(c, &jd[(s * c.num_joints() + j) * 3]);
        const auto& g = (*b.joints[s])[c.joints[j]];
        px_err += std::sqrt((p[0] - g[0]) * (p[0] - g[0]) + (p[1] - g[1]) * (p[1] - g[1]) +
                            (p[2] - g[2]) * (p[2] - g[2]));
      }
  }
  if (!idx.empty()) px_err /= static_cast<double>(idx.size() * c.num_joints());
  json j = sums.to_json();
  j["joint_error_px"] = px_err;
  j["n"] = idx.size();
  return j;
}

}  // namespace

TwResult train_tw(const TrainConfig& cfg, const handsim::Dataset& ds, const LogSink& sink) {
  if (cfg.phase != Phase::kTW) throw ConfigError("train_tw needs phase TW");
  cfg.validate();
  const auto twc = cfg.tw_model();
  check_dataset(ds, twc);
  const auto train_idx = split_indices(ds, handsim::Split::kTrain, cfg.train_limit);
  const auto val_idx = split_indices(ds, handsim::Split::kVal, cfg.val_limit);
  if (train_idx.empty()) throw DataError("dataset has no training samples");

  tw::Model model(twc, cfg.seed);
  Adam adam(trainable(model.params()));
  TwResult res;
  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, cfg);
    const auto perm = permutation(train_idx.size(), cfg.seed + epoch);
    std::vector<std::size_t> order(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) order[i] = train_idx[perm[i]];
    TwSums sums;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch b = gather(ds, std::span(order).subspan(start, end - start));
      ad::Tape tape;
      const auto l = tw_batch_loss(tape, model, b, cfg.tw_loss);
      require_finite(l.total.item(), "TW loss");
      sums.add(l, b.n);
      if (epoch == 0) continue;
      model.params().zero_grad();
      tape.backward(l.total);
      tape.accumulate_param_grads();
      adam.step(lr);
    }
    json rec = {{"phase", "TW"}, {"epoch", epoch}, {"lr", lr}, {"train", sums.to_json()}};
    rec["val"] = tw_eval(model, ds, val_idx, cfg.batch_size, cfg.tw_loss);
    rec["wall_ms"] = ms_since(t0);
    if (epoch == 0) res.initial_heatmap = rec["train"]["heatmap"];
    res.final_heatmap = rec["train"]["heatmap"];
    res.log.push_back(rec);
    if (sink) sink(rec);
  }
  res.checkpoint.stage = "TW";
  res.checkpoint.meta = {{"tw_model", twc.to_json()}, {"train_config", stripped(cfg)}};
  res.checkpoint.params = snapshot(model.params());
  return res;
}

// ---- phase PG -----------------------------------------------------------------------------

tw::Model load_tw(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("tw_model")) throw CheckpointError("checkpoint has no TW model configuration");
  tw::ModelConfig twc;
  try {
    twc = tw::ModelConfig::from_json(ckpt.meta.at("tw_model"));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("bad TW model configuration: ") + e.what());
  }
  tw::Model m(twc, 0);
  load_params(m.params(), ckpt);
  return m;
}

pg::Model load_pg(const Checkpoint& ckpt) {
  if (ckpt.stage != "PG") throw CheckpointError("expected a PG checkpoint, got stage " + ckpt.stage);
  if (!ckpt.meta.contains("pg_model")) throw CheckpointError("checkpoint has no PG model configuration");
  pg::ModelConfig pgc;
  try {
    pgc = pg::ModelConfig::from_json(ckpt.meta.at("pg_model"));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("bad PG model configuration: ") + e.what());
  }
  pg::Model m(pgc, 0);
  load_params(m.params(), ckpt);
  return m;
}

namespace {

struct PgSums {
  double total = 0, position = 0, edge = 0;
  std::size_t n = 0;

  void add(const pg::LossPG& l, std::size_t b) {
    total += l.total.item() * static_cast<double>(b);
    position += l.position.item() * static_cast<double>(b);
    edge += l.edge.item() * static_cast<double>(b);
    n += b;
  }
  json to_json() const {
    const double d = n ? static_cast<double>(n) : 1.0;
    return {{"total", total / d}, {"position", position / d}, {"edge", edge / d}};
  }
};

std::vector<double> normalized_targets(const handsim::Dataset& ds, const pg::ModelConfig& pgc,
                                       std::span<const std::size_t> idx) {
  std::vector<double> t;
  for (std::size_t i : idx)
    for (const auto& p : ds.samples[i].joints25d) {
      const auto n = pg::normalize(pgc, p);
      t.insert(t.end(), n.begin(), n.end());
    }
  return t;
}

json pg_eval(pg::Model& m, const TwCache& cache, const handsim::Dataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return {{"n", 0}};
  const auto pred = predict_cached(m, cache, ds.camera);
  std::vector<handsim::Joints> gt;
  for (std::size_t i : idx) gt.push_back(world_joints(ds, i));
  const auto pa = metrics::pa_mpjpe(pred, gt);
  return {{"mpjpe", metrics::mpjpe(pred, gt)}, {"pa_mpjpe", pa.pa_mpjpe}, {"n_excluded", pa.excluded},
          {"n", idx.size()}};
}

}  // namespace

PgResult train_pg(const TrainConfig& cfg, const handsim::Dataset& ds, const Checkpoint& tw_ckpt,
                  const LogSink& sink) {
  if (cfg.phase != Phase::kPG) throw ConfigError("train_pg needs phase PG");
  cfg.validate();
  if (tw_ckpt.stage != "TW") throw CheckpointError("PG training needs a TW checkpoint, got stage " + tw_ckpt.stage);
  tw::Model twm = load_tw(tw_ckpt);
  const auto& twc = twm.config();
  if (twc.joints != cfg.tw_joint_indices())
    throw ConfigError("config tw_joints do not match the TW checkpoint's joint set");
  check_dataset(ds, twc);
  twm.params().set_frozen(true);

  PgResult res;
  res.tw_hash_before = params_hash(twm.params());
  const auto pgc = cfg.pg_model(twc);
  const auto train_idx = split_indices(ds, handsim::Split::kTrain, cfg.train_limit);
  const auto val_idx = split_indices(ds, handsim::Split::kVal, cfg.val_limit);
  if (train_idx.empty()) throw DataError("dataset has no training samples");

  pg::Model model(pgc, cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  if (pgc.embedding_init == pg::EmbeddingInit::kMeanPose) model.set_embedding(mean_pose(ds, train_idx, pgc));
  const TwCache train_cache = run_tw(twm, ds, train_idx, pgc, cfg.batch_size);
  const TwCache val_cache = run_tw(twm, ds, val_idx, pgc, cfg.batch_size);
  const auto edges = pg::kinematic_edges();
  const bool learn_edges = pgc.spi && pgc.edge_mode == pg::EdgeMode::kDynamic;

  Adam adam(trainable(model.params()));
  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, cfg);
    const auto order = permutation(train_idx.size(), cfg.seed + epoch);  // rows of the cache
    PgSums sums;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto rows = std::span(order).subspan(start, end - start);
      std::vector<std::size_t> ds_rows;
      for (std::size_t r : rows) ds_rows.push_back(train_idx[r]);
      ad::Tape tape;
      const auto in = pg_inputs(tape, pgc, train_cache, rows);
      const auto out = model.forward(tape, in.tw, in.featmap);
      const auto target = tape.constant({rows.size(), pg::kNodes, 3}, normalized_targets(ds, pgc, ds_rows));
      const auto l = pg::loss_pg(out.coords, target, learn_edges ? out.spi.alphas : std::vector<ad::Tensor>{}, edges,
                                   cfg.pg_loss);
      require_finite(l.total.item(), "PG loss");
      sums.add(l, rows.size());
      if (epoch == 0) continue;
      model.params().zero_grad();
      tape.backward(l.total);
      tape.accumulate_param_grads();
      adam.step(lr);
    }
    json rec = {{"phase", "PG"}, {"epoch", epoch}, {"lr", lr}, {"train", sums.to_json()}};
    rec["val"] = pg_eval(model, val_cache, ds, val_idx);
    rec["wall_ms"] = ms_since(t0);
    if (epoch == 0 && rec["val"].contains("pa_mpjpe")) res.initial_val_pa_mpjpe = rec["val"]["pa_mpjpe"];
    if (rec["val"].contains("pa_mpjpe")) res.final_val_pa_mpjpe = rec["val"]["pa_mpjpe"];
    res.log.push_back(rec);
    if (sink) sink(rec);
  }

  res.tw_hash_after = params_hash(twm.params());
  if (res.tw_hash_after != res.tw_hash_before)
    throw std::logic_error("TW parameters changed during PG training");
  res.checkpoint.stage = "PG";
  res.checkpoint.meta = {{"tw_model", twc.to_json()},
                         {"pg_model", pgc.to_json()},
                         {"train_config", stripped(cfg)},
                         {"tw_checkpoint_sha256", sha256_hex(serialize_checkpoint(tw_ckpt))},
                         {"tw_params_hash", res.tw_hash_before}};
  res.checkpoint.params = snapshot(twm.params());
  for (auto& p : snapshot(model.params())) res.checkpoint.params.push_back(std::move(p));
  return res;
}

// ---- evaluation -----------------------------------------------------------------------------

metrics::EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const handsim::Dataset& ds, handsim::Split split,
                                        std::size_t limit) {
  const auto idx = split_indices(ds, split, limit);
  if (idx.empty()) throw DataError(std::string("dataset has no ") + handsim::split_name(split) + " samples");
  tw::Model twm = load_tw(ckpt);
  check_dataset(ds, twm.config());
  std::vector<handsim::Joints> pred;
  if (ckpt.stage == "PG") {
    pg::Model pgm = load_pg(ckpt);
    pred = predict(twm, pgm, ds, idx);
  } else if (ckpt.stage == "TW") {
    if (twm.config().num_joints() != pg::kNodes)
      throw CheckpointError("stage mismatch: TW checkpoint covers " + std::to_string(twm.config().num_joints()) +
                            " joints; evaluating the full model needs a PG checkpoint");
    pred = predict_tw_only(twm, ds, idx);
  } else {
    throw CheckpointError("unknown checkpoint stage " + ckpt.stage);
  }
  std::vector<handsim::Joints> gt;
  for (std::size_t i : idx) gt.push_back(world_joints(ds, i));
  return metrics::evaluate(pred, gt, handsim::Skeleton::standard().category);
}

bool same_log(const std::vector<json>& a, const std::vector<json>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    json x = a[i], y = b[i];
    x.erase("wall_ms");
    y.erase("wall_ms");
    if (x != y) return false;
  }
  return true;
}

}  // namespace ehpe::train
