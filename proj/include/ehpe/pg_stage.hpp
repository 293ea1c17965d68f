#pragma once

// Prior-guided stage: 21-node joint graph over the TW outputs, a
// multi-layer dynamic-edge graph-attention branch (SPI), an image-token
// attention branch (FEM), their learned fusion and the stage-two loss.
//
// Node coordinates live in a normalized frame: x' = (x_px - W/2) / (W/2),
// y' likewise, z' = (z - d/2) / (d/2). Batched tensors throughout.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ehpe/autodiff/tensor.hpp"
#include "ehpe/handsim.hpp"
#include "ehpe/params.hpp"
#include "ehpe/tw_stage.hpp"

namespace ehpe::pg {

inline constexpr std::size_t kNodes = handsim::kNumJoints;

/// N x N 0/1 matrix, row-major.
struct Adjacency {
  std::size_t n = 0;
  std::vector<std::uint8_t> mask;

  bool at(std::size_t i, std::size_t j) const { return mask[i * n + j] != 0; }
  /// Undirected edges plus self-loops.
  static Adjacency from_edges(std::size_t n, std::span<const std::pair<std::size_t, std::size_t>> edges);
  /// Nodes reachable in at most two steps (self included).
  Adjacency two_hop() const;
  std::vector<std::size_t> hop_distances(std::size_t from) const;
};

/// The 20 bones as (parent, child) pairs.
std::vector<std::pair<std::size_t, std::size_t>> kinematic_edges();
Adjacency hand_adjacency();

enum class EdgeMode { kDynamic, kFixed };
enum class EmbeddingInit { kMeanPose, kZeros };

struct ModelConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t depth = 8;
  std::size_t feature_channels = 128;
  std::size_t feature_h = 2;
  std::size_t feature_w = 2;
  std::size_t feature_stride = 32;
  std::vector<std::size_t> tw_joints = tw::default_joints();
  /// Off: every node starts from its embedding (no TW coordinates).
  bool tw_guidance = true;
  bool spi = true;
  bool fem = true;
  EdgeMode edge_mode = EdgeMode::kDynamic;
  std::size_t gat_layers = 2;
  std::size_t heads = 8;
  std::size_t hidden = 64;
  std::size_t fem_width = 64;
  bool fem_duplicate_tokens = false;
  bool pin_tw_joints = false;
  EmbeddingInit embedding_init = EmbeddingInit::kMeanPose;

  /// Throws handsim::ConfigError (both branches off is rejected here).
  void validate() const;
  std::size_t node_dim() const { return 3 + feature_channels; }
  std::size_t image_tokens() const { return feature_h * feature_w; }
  std::size_t tokens() const { return (fem_duplicate_tokens ? 2 : 1) * image_tokens() + 1; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Geometry fields copied from a TW configuration.
  static ModelConfig matching(const tw::ModelConfig& twc);
};

struct LossWeights {
  double position = 2e-2;
  double edge = 2e-1;
};

// ---- building blocks --------------------------------------------------------

/// x: [..., d_in] times w: [d_in, d_out] (+ bias [d_out]).
ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor* bias = nullptr);

struct Attention {
  ad::Tensor out;      // [B, Tq, dv]
  ad::Tensor weights;  // [B, Tq, Tk]
};

/// softmax(q k^T / sqrt(d_k)) v over batched [B, T, d] operands.
Attention scaled_dot_attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v);

struct JointGraph {
  ad::Tensor coords;    // [B, 21, 3] normalized
  ad::Tensor features;  // [B, 21, 3 + C]
};

/// tw_coords: [B, |tw_joints|, 3] normalized (ignored without guidance);
/// embedding: [21, 3]; featmap: [B, C, h, w].
JointGraph assemble_joint_features(const ModelConfig& cfg, const ad::Tensor& tw_coords, const ad::Tensor& embedding,
                                   const ad::Tensor& featmap);

struct GatOut {
  ad::Tensor out;    // [B, N, heads * head_dim]
  ad::Tensor alpha;  // [B, heads, N, N]
};

/// Dynamic edges: e_ij = LeakyReLU(a_k . [W_k h_i || W_k h_j]), softmax over
/// the neighbourhood of i, output concat_k sum_j alpha_ij W_k h_j.
/// h: [B, N, d_in]; w: [d_in, heads * head_dim]; a: [heads, 2 * head_dim].
GatOut gat_layer(const ad::Tensor& h, const ad::Tensor& w, const ad::Tensor& a, const Adjacency& nbr,
                 std::size_t heads);
/// Fixed edges: alpha_ij = 1 / |N(i)| on the neighbourhood.
GatOut gat_layer_fixed(const ad::Tensor& h, const ad::Tensor& w, const Adjacency& nbr, std::size_t heads);

/// Cross-layer update LeakyReLU(gat_out + h0 w_skip); h0: [B, N, d0],
/// w_skip: [d0, heads * head_dim].
ad::Tensor skip_fusion(const ad::Tensor& gat_out, const ad::Tensor& h0, const ad::Tensor& w_skip);

ad::Tensor fuse(const ad::Tensor* spi_out, const ad::Tensor* fem_out, const ad::Tensor& omega_g,
                const ad::Tensor& omega_e);

struct LossPG {
  ad::Tensor total, position, edge;
};

/// position: (1/N) sum_i |c_i - c_i*|^2, batch-averaged. edge: sum over
/// `edges` (both directions), heads and every alpha tensor of
/// (alpha_ij - 1)^2, batch-averaged.
LossPG loss_pg(const ad::Tensor& pred, const ad::Tensor& target, const std::vector<ad::Tensor>& alphas,
               std::span<const std::pair<std::size_t, std::size_t>> edges, const LossWeights& lw = {});

// ---- model ------------------------------------------------------------------

struct SpiOut {
  ad::Tensor coords;               // [B, 21, 3]
  std::vector<ad::Tensor> alphas;  // per layer [B, heads, 21, 21]
};

struct FemOut {
  ad::Tensor coords;  // [B, 21, 3]
  ad::Tensor self_attention;
  ad::Tensor cross_attention;
};

struct Outputs {
  JointGraph graph;
  SpiOut spi;
  FemOut fem;
  ad::Tensor coords;  // fused [B, 21, 3]
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Per-joint coordinate initialization for nodes without TW input.
  void set_embedding(const std::array<handsim::Vec3, kNodes>& coords);

  Outputs forward(ad::Tape& tape, const ad::Tensor& tw_coords, const ad::Tensor& featmap);
  SpiOut spi_forward(ad::Tape& tape, const JointGraph& g);
  FemOut fem_forward(ad::Tape& tape, const ad::Tensor& featmap, const JointGraph& g);

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Adjacency one_hop_, two_hop_;
};

// ---- frames -------------------------------------------------------------------

handsim::Vec3 normalize(const ModelConfig& cfg, const handsim::Vec3& px);
handsim::Vec3 denormalize(const ModelConfig& cfg, const handsim::Vec3& n);

}  // namespace ehpe::pg
