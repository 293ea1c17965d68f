#pragma once

// Two-phase training: phase TW fits the TIP-and-wrist stage alone, phase PG
// freezes it and fits the prior-guided stage on all 21 joints.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehpe/handsim.hpp"
#include "ehpe/metrics.hpp"
#include "ehpe/params.hpp"
#include "ehpe/pg_stage.hpp"
#include "ehpe/tw_stage.hpp"

namespace ehpe::train {

/// Non-finite gradient or loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- optimizer -----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  /// Frozen parameters are skipped.
  Adam(std::vector<ad::Parameter*> params, AdamConfig cfg = {});

  /// Applies one bias-corrected update from Parameter::grad. Throws
  /// NumericError naming the first parameter with a non-finite gradient
  /// (before anything is modified).
  void step(double lr);
  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<ad::Parameter*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

std::vector<ad::Parameter*> trainable(ParamStore& store);

// ---- configuration -----------------------------------------------------------------

enum class Phase { kTW, kPG };
const char* phase_name(Phase p);

struct TrainConfig {
  Phase phase = Phase::kTW;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_initial = 1e-3;
  /// Epochs (1-based) from which the next decay applies.
  std::vector<std::size_t> lr_milestones;
  double lr_decay = 0.1;
  std::uint64_t seed = 1;
  std::string dataset;
  std::string checkpoint_out;
  std::string tw_checkpoint;  // PG only
  std::string log;            // NDJSON; empty = no file

  /// TW joint set as category names (W, TIP, DIP, PIP, MCP).
  std::vector<std::string> tw_joints = {"W", "TIP"};
  bool tw_guidance = true;
  bool spi = true;
  bool fem = true;
  std::string edge_mode = "dynamic";
  std::size_t gat_layers = 2;
  bool fem_duplicate_tokens = false;
  bool pin_tw_joints = false;
  std::string embedding_init = "mean_pose";

  tw::LossWeights tw_loss{};
  pg::LossWeights pg_loss{};

  /// 0 = every sample of the split.
  std::size_t train_limit = 0;
  std::size_t val_limit = 0;

  /// Phase defaults: TW 30 epochs at 1e-3; PG 40 epochs at 5e-4, x0.1 at 20.
  static TrainConfig defaults(Phase phase);
  /// Starts from defaults(phase); unknown keys and bad values throw
  /// handsim::ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  std::vector<std::size_t> tw_joint_indices() const;
  tw::ModelConfig tw_model() const;
  /// PG model on top of a TW model configuration.
  pg::ModelConfig pg_model(const tw::ModelConfig& twc) const;
};

/// lr_initial * decay^(number of milestones <= epoch).
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

/// Seeded Fisher-Yates permutation of [0, n); independent of the standard
/// library's shuffle.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

// ---- data plumbing -------------------------------------------------------------------

/// Checks image geometry against the TW model; throws handsim::DataError.
void check_dataset(const handsim::Dataset& ds, const tw::ModelConfig& cfg);

/// Indices of a split, truncated to `limit` when nonzero.
std::vector<std::size_t> split_indices(const handsim::Dataset& ds, handsim::Split s, std::size_t limit);

/// Canonical 3D ground truth.
handsim::Joints world_joints(const handsim::Dataset& ds, std::size_t i);

/// Mean normalized ground-truth pose over `indices`.
std::array<handsim::Vec3, pg::kNodes> mean_pose(const handsim::Dataset& ds, const std::vector<std::size_t>& indices,
                                                 const pg::ModelConfig& cfg);

/// Frozen TW outputs consumed by PG: normalized TW joints [Jt, 3] and the
/// feature map [C, h, w] per sample.
struct TwCache {
  std::size_t joints = 0;
  std::size_t feature_size = 0;
  std::vector<std::vector<double>> coords, features;
  /// Full-resolution 2.5D predictions of the TW joints in pixels.
  std::vector<std::vector<handsim::Vec3>> pixels;
};
TwCache run_tw(tw::Model& model, const handsim::Dataset& ds, const std::vector<std::size_t>& indices,
               const pg::ModelConfig& pgc, std::size_t batch = 32);

/// Full-model 21-joint predictions in canonical 3D, in `indices` order.
std::vector<handsim::Joints> predict(tw::Model& twm, pg::Model& pgm, const handsim::Dataset& ds,
                                     const std::vector<std::size_t>& indices);
std::vector<handsim::Joints> predict_cached(pg::Model& pgm, const TwCache& cache, const handsim::Camera& cam);
/// A TW model covering all 21 joints decoded directly.
std::vector<handsim::Joints> predict_tw_only(tw::Model& twm, const handsim::Dataset& ds,
                                             const std::vector<std::size_t>& indices);

// ---- phases -----------------------------------------------------------------------------

/// Receives each log record as it is produced.
using LogSink = std::function<void(const nlohmann::json&)>;

struct TwResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> log;
  double initial_heatmap = 0.0;  // epoch-0 train L_H
  double final_heatmap = 0.0;    // last-epoch train L_H
};

struct PgResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> log;
  std::string tw_hash_before, tw_hash_after;
  double initial_val_pa_mpjpe = 0.0;  // untrained PG on the trained TW
  double final_val_pa_mpjpe = 0.0;
};

TwResult train_tw(const TrainConfig& cfg, const handsim::Dataset& ds, const LogSink& sink = {});
/// `tw_ckpt` must carry stage "TW". Throws std::logic_error if the TW
/// parameter hash changes.
PgResult train_pg(const TrainConfig& cfg, const handsim::Dataset& ds, const Checkpoint& tw_ckpt,
                  const LogSink& sink = {});

/// Rebuilds models from checkpoints (a PG checkpoint carries its TW
/// parameters).
tw::Model load_tw(const Checkpoint& ckpt);
pg::Model load_pg(const Checkpoint& ckpt);

/// Evaluates a PG checkpoint, or a TW checkpoint covering all 21 joints; any
/// other TW checkpoint throws CheckpointError (stage mismatch).
metrics::EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const handsim::Dataset& ds, handsim::Split split,
                                        std::size_t limit = 0);

/// Log-record equality ignoring wall_ms.
bool same_log(const std::vector<nlohmann::json>& a, const std::vector<nlohmann::json>& b);

}  // namespace ehpe::train
