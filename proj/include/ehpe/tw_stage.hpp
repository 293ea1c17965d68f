#pragma once

// TIP-and-wrist stage: strided conv encoder, 2D heatmap head, residual
// refinement to a 2.5D heatmap volume, soft-argmax decoding and the
// stage-one loss.
//
// Coordinate frames used here:
//   pixel     x_px, y_px in [0, W), z in [0, d) as stored in the dataset
//   heatmap   u = (x_px + 0.5) / stride - 0.5, so cell centres sit on integers
//   depth     k = z - 0.5 (bin k covers [k, k + 1))
// The volume is laid out [x, y, depth, joint] so soft-argmax returns (x, y, z)
// in that axis order; tensors carry a leading batch axis.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "ehpe/autodiff/tensor.hpp"
#include "ehpe/handsim.hpp"
#include "ehpe/params.hpp"

namespace ehpe::tw {

/// Wrist plus the five fingertips, in joint-index order.
std::vector<std::size_t> default_joints();
/// Joint indices (sorted) for a set of categories.
std::vector<std::size_t> joints_of(std::span<const handsim::JointCategory> categories);

struct ModelConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t in_channels = 3;
  std::size_t heatmap_stride = 4;
  std::size_t feature_stride = 32;
  std::size_t depth = 8;
  std::vector<std::size_t> joints = default_joints();
  /// One entry per stride-2 convolution; log2(feature_stride) entries.
  std::vector<std::size_t> widths = {16, 32, 64, 128, 128};
  std::size_t head_width = 16;
  std::size_t refine_width = 16;
  std::size_t refine_blocks = 4;
  std::size_t refine_pools = 2;
  bool refined_at_feature_res = false;
  double sigma_x = 1.5;
  double sigma_y = 1.5;

  /// Throws handsim::ConfigError.
  void validate() const;
  std::size_t num_joints() const { return joints.size(); }
  std::size_t heatmap_h() const { return image_h / heatmap_stride; }
  std::size_t heatmap_w() const { return image_w / heatmap_stride; }
  std::size_t feature_h() const { return image_h / feature_stride; }
  std::size_t feature_w() const { return image_w / feature_stride; }
  std::size_t feature_channels() const { return widths.back(); }
  /// Pixel stride of one 2.5D volume cell.
  std::size_t volume_stride() const { return refined_at_feature_res ? feature_stride : heatmap_stride; }
  std::size_t volume_h() const { return image_h / volume_stride(); }
  std::size_t volume_w() const { return image_w / volume_stride(); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LossWeights {
  double heatmap = 3.0;
  double distance = 1e-2;
  double regularization = 1e-2;
};

struct Outputs {
  ad::Tensor heatmap2d;  // [B, J, hm_h, hm_w]
  ad::Tensor volume;     // [B, vol_w, vol_h, d, J]
  ad::Tensor featmap;    // [B, C, feat_h, feat_w]
  ad::Tensor joints;     // [B, J, 3] volume coordinates
  std::vector<ad::Tensor> weights;  // leaves counted by the L1 term
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// images: [B, in_channels, image_h, image_w].
  Outputs forward(ad::Tape& tape, const ad::Tensor& images);

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

/// Normalized 2D Gaussian sampled at cell centres, row-major [h, w]; (x, y)
/// in heatmap cell coordinates.
std::vector<double> gaussian_target(double x, double y, double sigma_x, double sigma_y, std::size_t h,
                                    std::size_t w);

/// Full-volume softmax per joint followed by the coordinate expectation.
/// [X, Y, D, J] -> [J, 3] or [B, X, Y, D, J] -> [B, J, 3].
ad::Tensor soft_argmax(const ad::Tensor& volume);

struct LossTW {
  ad::Tensor total, heatmap, distance, regularization;
};

/// Per-sample terms averaged over the batch:
///   heatmap        (1/J) sum_j sum_pixels (pred - target)^2
///   distance       (1/J) sum_j |pred_j - target_j|^2 (squared, not rooted)
///   regularization sum_k |W_k|_1 over `weights`
LossTW loss_tw(const ad::Tensor& pred2d, const ad::Tensor& target2d, const ad::Tensor& pred_joints,
               const ad::Tensor& target_joints, const std::vector<ad::Tensor>& weights,
               const LossWeights& lw = {});

struct Targets {
  std::vector<double> heatmaps;  // [B, J, hm_h, hm_w]
  std::vector<double> joints;    // [B, J, 3] volume coordinates
};

Targets make_targets(const ModelConfig& cfg, std::span<const handsim::Joints* const> joints25d);

double pixel_to_cell(double px, std::size_t stride);
double cell_to_pixel(double cell, std::size_t stride);

/// Volume coordinates of one joint back to dataset 2.5D pixels.
handsim::Vec3 volume_to_pixels(const ModelConfig& cfg, const double* xyz);

}  // namespace ehpe::tw
