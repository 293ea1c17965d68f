#include "ehpe/tw_stage.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "ehpe/autodiff/ops.hpp"

namespace ehpe::tw {

using handsim::ConfigError;
using handsim::JointCategory;

std::vector<std::size_t> default_joints() {
  const std::array<JointCategory, 2> cats = {JointCategory::kWrist, JointCategory::kTip};
  return joints_of(cats);
}

std::vector<std::size_t> joints_of(std::span<const JointCategory> categories) {
  const auto sk = handsim::Skeleton::standard();
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < handsim::kNumJoints; ++j)
    if (std::find(categories.begin(), categories.end(), sk.category[j]) != categories.end()) out.push_back(j);
  return out;
}

namespace {

bool is_pow2(std::size_t v) { return v > 0 && std::has_single_bit(v); }
std::size_t log2i(std::size_t v) { return static_cast<std::size_t>(std::countr_zero(v)); }

}  // namespace

void ModelConfig::validate() const {
  if (image_h == 0 || image_w == 0 || in_channels == 0) throw ConfigError("image dimensions must be positive");
  if (!is_pow2(heatmap_stride) || !is_pow2(feature_stride) || heatmap_stride < 2 || feature_stride <= heatmap_stride)
    throw ConfigError("strides must be powers of two with 2 <= heatmap_stride < feature_stride");
  if (image_h % feature_stride || image_w % feature_stride)
    throw ConfigError("image size must be divisible by feature_stride");
  if (widths.size() != log2i(feature_stride))
    throw ConfigError("widths needs one entry per stride-2 convolution (" + std::to_string(log2i(feature_stride)) + ")");
  if (std::find(widths.begin(), widths.end(), 0u) != widths.end() || head_width == 0 || refine_width == 0)
    throw ConfigError("channel widths must be positive");
  if (depth == 0) throw ConfigError("depth must be positive");
  if (joints.empty()) throw ConfigError("supervised joint set is empty");
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (joints[i] >= handsim::kNumJoints) throw ConfigError("joint index out of range");
    if (i > 0 && joints[i] <= joints[i - 1]) throw ConfigError("joint set must be sorted and unique");
  }
  if (!(sigma_x > 0) || !(sigma_y > 0)) throw ConfigError("sigma must be positive");
  if (refine_blocks < refine_pools) throw ConfigError("refine_blocks must be >= refine_pools");
  const std::size_t div = std::size_t{1} << refine_pools;
  if (refined_at_feature_res) {
    if (div != feature_stride / heatmap_stride)
      throw ConfigError("refined_at_feature_res needs refine_pools = log2(feature_stride / heatmap_stride)");
  } else if (heatmap_h() % div || heatmap_w() % div) {
    throw ConfigError("heatmap size must be divisible by 2^refine_pools");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_h", image_h},
          {"image_w", image_w},
          {"in_channels", in_channels},
          {"heatmap_stride", heatmap_stride},
          {"feature_stride", feature_stride},
          {"depth", depth},
          {"joints", joints},
          {"widths", widths},
          {"head_width", head_width},
          {"refine_width", refine_width},
          {"refine_blocks", refine_blocks},
          {"refine_pools", refine_pools},
          {"refined_at_feature_res", refined_at_feature_res},
          {"sigma_x", sigma_x},
          {"sigma_y", sigma_y}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    j.at("image_h").get_to(c.image_h);
    j.at("image_w").get_to(c.image_w);
    j.at("in_channels").get_to(c.in_channels);
    j.at("heatmap_stride").get_to(c.heatmap_stride);
    j.at("feature_stride").get_to(c.feature_stride);
    j.at("depth").get_to(c.depth);
    j.at("joints").get_to(c.joints);
    j.at("widths").get_to(c.widths);
    j.at("head_width").get_to(c.head_width);
    j.at("refine_width").get_to(c.refine_width);
    j.at("refine_blocks").get_to(c.refine_blocks);
    j.at("refine_pools").get_to(c.refine_pools);
    j.at("refined_at_feature_res").get_to(c.refined_at_feature_res);
    j.at("sigma_x").get_to(c.sigma_x);
    j.at("sigma_y").get_to(c.sigma_y);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("TW model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- model ----------------------------------------------------------------

namespace {

struct ConvSpec {
  std::string name;
  std::size_t cin, cout, k;
};

void add_conv(ParamStore& ps, const ConvSpec& s, std::mt19937_64& rng) {
  auto& w = ps.add(s.name + ".w", {s.cout, s.cin, s.k, s.k}, true);
  he_uniform(w, s.cin * s.k * s.k, rng);
  ps.add(s.name + ".b", {s.cout}, false);
}

struct Ctx {
  ad::Tape& tape;
  ParamStore& ps;
  std::vector<ad::Tensor>& weights;

  ad::Tensor conv(const std::string& name, const ad::Tensor& x, std::size_t stride, std::size_t pad) {
    auto& wp = ps.get(name + ".w");
    auto& bp = ps.get(name + ".b");
    ad::Tensor w = tape.param(wp);
    weights.push_back(w);
    ad::Tensor b = ad::reshape(tape.param(bp), {bp.shape[0], 1, 1});
    return ad::add(ad::conv2d(x, w, stride, pad), b);
  }

  ad::Tensor res_block(const std::string& name, const ad::Tensor& x) {
    ad::Tensor h = ad::relu(conv(name + ".conv0", x, 1, 1));
    return ad::relu(ad::add(x, conv(name + ".conv1", h, 1, 1)));
  }
};

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::size_t cin = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    add_conv(params_, {"tw.backbone." + std::to_string(i), cin, cfg_.widths[i], 3}, rng);
    cin = cfg_.widths[i];
  }
  const std::size_t mid = cfg_.widths[log2i(cfg_.heatmap_stride) - 1];
  const std::size_t J = cfg_.num_joints();
  const std::size_t R = cfg_.refine_width;
  add_conv(params_, {"tw.head.0", mid, cfg_.head_width, 3}, rng);
  add_conv(params_, {"tw.head.1", cfg_.head_width, J, 1}, rng);
  add_conv(params_, {"tw.refine.in", mid + J, R, 1}, rng);
  for (std::size_t b = 0; b < cfg_.refine_blocks; ++b) {
    const std::string n = "tw.refine.block" + std::to_string(b);
    add_conv(params_, {n + ".conv0", R, R, 3}, rng);
    add_conv(params_, {n + ".conv1", R, R, 3}, rng);
  }
  add_conv(params_, {"tw.refine.out", R, cfg_.depth * J, 1}, rng);
}

Outputs Model::forward(ad::Tape& tape, const ad::Tensor& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_h || s[3] != cfg_.image_w)
    throw ad::ShapeError("TW input must be [B," + std::to_string(cfg_.in_channels) + "," + std::to_string(cfg_.image_h) +
                         "," + std::to_string(cfg_.image_w) + "], got " + ad::to_string(s));
  const std::size_t B = s[0];
  const std::size_t J = cfg_.num_joints();
  Outputs out;
  Ctx c{tape, params_, out.weights};

  const std::size_t tap = log2i(cfg_.heatmap_stride) - 1;
  ad::Tensor x = images, mid;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    x = ad::relu(c.conv("tw.backbone." + std::to_string(i), x, 2, 1));
    if (i == tap) mid = x;
  }
  out.featmap = x;

  out.heatmap2d = c.conv("tw.head.1", ad::relu(c.conv("tw.head.0", mid, 1, 1)), 1, 0);

  ad::Tensor r = ad::relu(c.conv("tw.refine.in", ad::concat({mid, out.heatmap2d}, 1), 1, 0));
  std::vector<ad::Tensor> skips;
  std::size_t block = 0;
  auto next_block = [&](const ad::Tensor& v) { return c.res_block("tw.refine.block" + std::to_string(block++), v); };
  for (std::size_t p = 0; p < cfg_.refine_pools; ++p) {
    r = next_block(r);
    skips.push_back(r);
    r = ad::maxpool2d(r, 2, 2);
  }
  while (block < cfg_.refine_blocks) r = next_block(r);
  if (!cfg_.refined_at_feature_res) {
    for (std::size_t p = skips.size(); p-- > 0;) r = ad::add(ad::upsample_nearest(r, 2), skips[p]);
  }
  // Channel c = k * J + j holds depth bin k of joint j.
  ad::Tensor logits = c.conv("tw.refine.out", r, 1, 0);
  const std::size_t H = logits.dim(2), W = logits.dim(3);
  out.volume = ad::permute(ad::reshape(logits, {B, cfg_.depth, J, H, W}), {0, 4, 3, 1, 2});
  out.joints = soft_argmax(out.volume);
  return out;
}

// ---- heatmaps and decoding -----------------------------------------------

std::vector<double> gaussian_target(double x, double y, double sx, double sy, std::size_t h, std::size_t w) {
  if (!(sx > 0) || !(sy > 0)) throw std::invalid_argument("gaussian_target: sigma must be positive");
  if (!(x >= -0.5 && x <= static_cast<double>(w) - 0.5 && y >= -0.5 && y <= static_cast<double>(h) - 0.5))
    throw std::invalid_argument("gaussian_target: joint outside the heatmap");
  const double norm = 1.0 / (2.0 * std::numbers::pi * sx * sy);
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    const double dy = y - static_cast<double>(r);
    for (std::size_t col = 0; col < w; ++col) {
      const double dx = x - static_cast<double>(col);
      out[r * w + col] = norm * std::exp(-dx * dx / (2 * sx * sx) - dy * dy / (2 * sy * sy));
    }
  }
  return out;
}

ad::Tensor soft_argmax(const ad::Tensor& volume) {
  const bool batched = volume.rank() == 5;
  if (!batched && volume.rank() != 4) throw ad::ShapeError("soft_argmax expects [X,Y,D,J] or [B,X,Y,D,J]");
  const auto& s = volume.shape();
  const std::size_t off = batched ? 1 : 0;
  const std::size_t B = batched ? s[0] : 1;
  const std::size_t X = s[off], Y = s[off + 1], D = s[off + 2], J = s[off + 3];
  ad::Tensor v = batched ? volume : ad::reshape(volume, {1, X, Y, D, J});
  ad::Tensor flat = ad::reshape(ad::permute(v, {0, 4, 1, 2, 3}), {B * J, X * Y * D});
  ad::Tensor prob = ad::softmax(flat, 1);
  std::vector<double> grid;
  grid.reserve(X * Y * D * 3);
  for (std::size_t x = 0; x < X; ++x)
    for (std::size_t y = 0; y < Y; ++y)
      for (std::size_t d = 0; d < D; ++d) grid.insert(grid.end(), {double(x), double(y), double(d)});
  ad::Tensor coords = ad::matmul(prob, volume.tape().constant({X * Y * D, 3}, std::move(grid)));
  return batched ? ad::reshape(coords, {B, J, 3}) : ad::reshape(coords, {J, 3});
}

LossTW loss_tw(const ad::Tensor& pred2d, const ad::Tensor& target2d, const ad::Tensor& pred_joints,
               const ad::Tensor& target_joints, const std::vector<ad::Tensor>& weights, const LossWeights& lw) {
  if (pred2d.shape() != target2d.shape())
    throw ad::ShapeError("heatmap shapes differ: " + ad::to_string(pred2d.shape()) + " vs " +
                         ad::to_string(target2d.shape()));
  if (pred_joints.shape() != target_joints.shape())
    throw ad::ShapeError("joint shapes differ: " + ad::to_string(pred_joints.shape()) + " vs " +
                         ad::to_string(target_joints.shape()));
  if (pred2d.rank() != 4 || pred_joints.rank() != 3 || pred2d.dim(0) != pred_joints.dim(0) ||
      pred2d.dim(1) != pred_joints.dim(1))
    throw ad::ShapeError("loss_tw: joint count differs between heatmaps and coordinates");
  const double BJ = static_cast<double>(pred2d.dim(0) * pred2d.dim(1));
  ad::Tape& tape = pred2d.tape();
  LossTW l;
  l.heatmap = ad::scale(ad::sum(ad::square(ad::sub(pred2d, target2d))), 1.0 / BJ);
  l.distance = ad::scale(ad::sum(ad::square(ad::sub(pred_joints, target_joints))), 1.0 / BJ);
  l.regularization = tape.constant_scalar(0.0);
  for (const auto& w : weights) l.regularization = ad::add(l.regularization, ad::sum(ad::abs(w)));
  l.total = ad::add(ad::add(ad::scale(l.heatmap, lw.heatmap), ad::scale(l.distance, lw.distance)),
                    ad::scale(l.regularization, lw.regularization));
  return l;
}

double pixel_to_cell(double px, std::size_t stride) { return (px + 0.5) / static_cast<double>(stride) - 0.5; }
double cell_to_pixel(double cell, std::size_t stride) { return (cell + 0.5) * static_cast<double>(stride) - 0.5; }

Targets make_targets(const ModelConfig& cfg, std::span<const handsim::Joints* const> joints25d) {
  const std::size_t J = cfg.num_joints(), hh = cfg.heatmap_h(), hw = cfg.heatmap_w();
  Targets t;
  t.heatmaps.reserve(joints25d.size() * J * hh * hw);
  t.joints.reserve(joints25d.size() * J * 3);
  const double depth_scale = static_cast<double>(cfg.depth) / static_cast<double>(handsim::kDepthBins);
  for (const auto* js : joints25d) {
    for (std::size_t j : cfg.joints) {
      const auto& p = (*js)[j];
      const auto g = gaussian_target(pixel_to_cell(p[0], cfg.heatmap_stride), pixel_to_cell(p[1], cfg.heatmap_stride),
                                     cfg.sigma_x, cfg.sigma_y, hh, hw);
      t.heatmaps.insert(t.heatmaps.end(), g.begin(), g.end());
      t.joints.push_back(pixel_to_cell(p[0], cfg.volume_stride()));
      t.joints.push_back(pixel_to_cell(p[1], cfg.volume_stride()));
      t.joints.push_back(p[2] * depth_scale - 0.5);
    }
  }
  return t;
}

handsim::Vec3 volume_to_pixels(const ModelConfig& cfg, const double* xyz) {
  const double depth_scale = static_cast<double>(handsim::kDepthBins) / static_cast<double>(cfg.depth);
  return {cell_to_pixel(xyz[0], cfg.volume_stride()), cell_to_pixel(xyz[1], cfg.volume_stride()),
          (xyz[2] + 0.5) * depth_scale};
}

}  // namespace ehpe::tw
