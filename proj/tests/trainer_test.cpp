#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ehpe/trainer.hpp"

namespace ehpe::train {
namespace {

using nlohmann::json;

const handsim::Dataset& tiny_dataset() {
  static const handsim::Dataset ds = handsim::make_dataset(48, 3);
  return ds;
}

TrainConfig tiny(Phase phase) {
  TrainConfig c = TrainConfig::defaults(phase);
  c.epochs = 2;
  c.batch_size = 4;
  c.train_limit = 8;
  c.val_limit = 4;
  c.lr_milestones.clear();
  return c;
}

const TwResult& tiny_tw() {
  static const TwResult r = train_tw(tiny(Phase::kTW), tiny_dataset());
  return r;
}

// ---- Adam ---------------------------------------------------------------------------

ad::Parameter scalar_param(const std::string& name, double v) {
  ad::Parameter p;
  p.name = name;
  p.shape = {1};
  p.value = {v};
  p.grad = {0.0};
  return p;
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  ad::Parameter a = scalar_param("a", 1.0), b = scalar_param("b", -2.0);
  Adam opt({&a, &b});
  a.grad = {3.7};
  b.grad = {-0.002};
  opt.step(0.01);
  EXPECT_NEAR(a.value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(b.value[0], -2.0 + 0.01, 1e-7);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, ZeroGradientLeavesValuesButAdvancesStep) {
  ad::Parameter a = scalar_param("a", 0.5);
  Adam opt({&a});
  opt.step(0.1);
  EXPECT_EQ(a.value[0], 0.5);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, MatchesHandRecurrenceOnQuadratic) {
  ad::Parameter x = scalar_param("x", 1.5);
  Adam opt({&x});
  double ref = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    x.grad = {2.0 * x.value[0]};
    opt.step(0.1);
    const double g = 2.0 * ref;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    ref -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(x.value[0], ref, 1e-12) << "step " << t;
  }
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  ad::Parameter a = scalar_param("layer.ok", 1.0), b = scalar_param("layer.bad", 2.0);
  Adam opt({&a, &b});
  a.grad = {1.0};
  b.grad = {std::nan("")};
  try {
    opt.step(0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.bad"), std::string::npos);
  }
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Adam, SkipsFrozenParameters) {
  ad::Parameter a = scalar_param("a", 1.0);
  a.frozen = true;
  a.grad = {1.0};
  Adam opt({&a});
  opt.step(0.1);
  EXPECT_EQ(a.value[0], 1.0);
}

// ---- schedule and config ----------------------------------------------------------------

TEST(Schedule, StepDecayAtMilestones) {
  TrainConfig c = TrainConfig::defaults(Phase::kPG);
  c.lr_initial = 1e-4;
  c.lr_milestones = {15, 20};
  c.lr_decay = 0.1;
  EXPECT_DOUBLE_EQ(lr_schedule(1, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(14, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(15, c), 1e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(17, c), 1e-5);
  EXPECT_DOUBLE_EQ(lr_schedule(21, c), 1e-6);
}

TEST(Schedule, PhaseDefaults) {
  const auto tw = TrainConfig::defaults(Phase::kTW);
  EXPECT_EQ(tw.epochs, 30u);
  EXPECT_DOUBLE_EQ(tw.lr_initial, 1e-3);
  const auto pg = TrainConfig::defaults(Phase::kPG);
  EXPECT_EQ(pg.epochs, 40u);
  EXPECT_DOUBLE_EQ(lr_schedule(19, pg), 5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(20, pg), 5e-5);
}

TEST(Config, UnknownKeyIsAnError) {
  const json j = {{"phase", "TW"}, {"epochs", 3}, {"learning_rate", 0.1}};
  try {
    TrainConfig::from_json(j);
    FAIL();
  } catch (const handsim::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(TrainConfig::from_json({{"epochs", 3}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "XX"}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"epochs", "many"}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"batch_size", 0}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"lr_initial", -1.0}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"lr_milestones", {5, 3}}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"tw_joints", {"TIP", "KNUCKLE"}}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "TW"}, {"lambda_r", -1.0}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "PG"}, {"spi", false}, {"fem", false}}), handsim::ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"phase", "PG"}, {"edge_mode", "sparse"}}), handsim::ConfigError);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c = TrainConfig::defaults(Phase::kPG);
  c.tw_joints = {"W", "TIP", "DIP"};
  c.edge_mode = "fixed";
  c.gat_layers = 3;
  c.lr_milestones = {15, 20};
  c.seed = 99;
  c.tw_loss.regularization = 0.5;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Config, TwJointIndicesFollowCategories) {
  TrainConfig c = TrainConfig::defaults(Phase::kTW);
  c.tw_joints = {"TIP", "W"};
  const auto idx = c.tw_joint_indices();
  EXPECT_EQ(idx.size(), 6u);
  const auto& cat = handsim::Skeleton::standard().category;
  for (std::size_t j : idx)
    EXPECT_TRUE(cat[j] == handsim::JointCategory::kTip || cat[j] == handsim::JointCategory::kWrist);
}

TEST(Permutation, IsAPermutationAndSeeded) {
  const auto p = permutation(100, 7);
  std::set<std::size_t> s(p.begin(), p.end());
  EXPECT_EQ(s.size(), 100u);
  EXPECT_EQ(*s.rbegin(), 99u);
  EXPECT_EQ(p, permutation(100, 7));
  EXPECT_NE(p, permutation(100, 8));
  EXPECT_TRUE(permutation(0, 1).empty());
}

// ---- phase TW ---------------------------------------------------------------------------

TEST(TrainTw, LogShapeAndEpochZeroIsForwardOnly) {
  const auto& r = tiny_tw();
  ASSERT_EQ(r.log.size(), 3u);
  for (std::size_t e = 0; e < r.log.size(); ++e) {
    const auto& rec = r.log[e];
    EXPECT_EQ(rec["phase"], "TW");
    EXPECT_EQ(rec["epoch"], e);
    for (const char* k : {"total", "heatmap", "distance", "regularization"}) {
      EXPECT_TRUE(rec["train"].contains(k)) << k;
      EXPECT_TRUE(rec["val"].contains(k)) << k;
    }
    EXPECT_EQ(rec["val"]["n"], 4u);
    EXPECT_TRUE(rec.contains("wall_ms"));
  }
  // No update happened before the epoch-0 validation pass, so train and val
  // regularization agree.
  EXPECT_DOUBLE_EQ(r.log[0]["train"]["regularization"].get<double>(),
                   r.log[0]["val"]["regularization"].get<double>());
}

TEST(TrainTw, EpochZeroLossMatchesIndependentForward) {
  const auto cfg = tiny(Phase::kTW);
  const auto& ds = tiny_dataset();
  tw::Model m(cfg.tw_model(), cfg.seed);
  const auto idx = split_indices(ds, handsim::Split::kTrain, cfg.train_limit);
  double total = 0, heat = 0;
  const auto& c = m.config();
  for (std::size_t i : idx) {  // one sample at a time
    ad::Tape tape;
    const auto out = m.forward(tape, tape.constant({1, c.in_channels, c.image_h, c.image_w}, ds.samples[i].image));
    std::vector<const handsim::Joints*> js = {&ds.samples[i].joints25d};
    const auto t = tw::make_targets(c, js);
    const std::size_t J = c.num_joints();
    const auto l = tw::loss_tw(out.heatmap2d, tape.constant({1, J, c.heatmap_h(), c.heatmap_w()}, t.heatmaps),
                               out.joints, tape.constant({1, J, 3}, t.joints), out.weights);
    total += l.total.item();
    heat += l.heatmap.item();
  }
  total /= static_cast<double>(idx.size());
  heat /= static_cast<double>(idx.size());
  const auto& rec = tiny_tw().log[0]["train"];
  EXPECT_NEAR(rec["total"].get<double>(), total, 1e-9 * std::abs(total));
  EXPECT_NEAR(rec["heatmap"].get<double>(), heat, 1e-9 * std::abs(heat));
  EXPECT_DOUBLE_EQ(tiny_tw().initial_heatmap, rec["heatmap"].get<double>());
}

TEST(TrainTw, DeterministicCheckpointBytesAndLog) {
  const auto again = train_tw(tiny(Phase::kTW), tiny_dataset());
  EXPECT_TRUE(same_log(again.log, tiny_tw().log));
  EXPECT_EQ(serialize_checkpoint(again.checkpoint), serialize_checkpoint(tiny_tw().checkpoint));
}

TEST(TrainTw, SeedChangesResult) {
  auto cfg = tiny(Phase::kTW);
  cfg.seed = 2;
  cfg.epochs = 0;
  const auto other = train_tw(cfg, tiny_dataset());
  EXPECT_NE(params_hash(other.checkpoint.params), params_hash(tiny_tw().checkpoint.params));
}

TEST(TrainTw, CheckpointCarriesStageAndConfig) {
  const auto& ck = tiny_tw().checkpoint;
  EXPECT_EQ(ck.stage, "TW");
  EXPECT_TRUE(ck.meta.contains("tw_model"));
  EXPECT_EQ(ck.meta["train_config"]["epochs"], 2u);
  EXPECT_FALSE(ck.meta["train_config"].contains("dataset"));
  const auto m = load_tw(ck);
  EXPECT_EQ(params_hash(m.params()), params_hash(ck.params));
}

TEST(TrainTw, RejectsWrongPhaseAndEmptyData) {
  EXPECT_THROW(train_tw(tiny(Phase::kPG), tiny_dataset()), handsim::ConfigError);
  handsim::Dataset empty = tiny_dataset();
  empty.samples.clear();
  EXPECT_THROW(train_tw(tiny(Phase::kTW), empty), handsim::DataError);
  handsim::Dataset wrong = tiny_dataset();
  wrong.camera.width += 8;
  EXPECT_THROW(train_tw(tiny(Phase::kTW), wrong), handsim::DataError);
}

// ---- phase PG -----------------------------------------------------------------------------

const PgResult& tiny_pg() {
  static const PgResult r = train_pg(tiny(Phase::kPG), tiny_dataset(), tiny_tw().checkpoint);
  return r;
}

TEST(TrainPg, TwParametersUnchanged) {
  const auto& r = tiny_pg();
  EXPECT_EQ(r.tw_hash_before, r.tw_hash_after);
  EXPECT_EQ(r.tw_hash_before, params_hash(tiny_tw().checkpoint.params));
  EXPECT_EQ(r.checkpoint.meta["tw_params_hash"], r.tw_hash_before);
  // The TW parameters stored in the PG checkpoint are the frozen ones.
  const auto twm = load_tw(r.checkpoint);
  EXPECT_EQ(params_hash(twm.params()), r.tw_hash_before);
}

TEST(TrainPg, DeterministicCheckpointBytes) {
  const auto again = train_pg(tiny(Phase::kPG), tiny_dataset(), tiny_tw().checkpoint);
  EXPECT_TRUE(same_log(again.log, tiny_pg().log));
  EXPECT_EQ(serialize_checkpoint(again.checkpoint), serialize_checkpoint(tiny_pg().checkpoint));
}

TEST(TrainPg, LogRecordsAndInitialMetric) {
  const auto& r = tiny_pg();
  ASSERT_EQ(r.log.size(), 3u);
  for (const auto& rec : r.log) {
    EXPECT_EQ(rec["phase"], "PG");
    for (const char* k : {"total", "position", "edge"}) EXPECT_TRUE(rec["train"].contains(k)) << k;
    for (const char* k : {"mpjpe", "pa_mpjpe", "n_excluded", "n"}) EXPECT_TRUE(rec["val"].contains(k)) << k;
  }
  EXPECT_DOUBLE_EQ(r.initial_val_pa_mpjpe, r.log[0]["val"]["pa_mpjpe"].get<double>());
  EXPECT_DOUBLE_EQ(r.final_val_pa_mpjpe, r.log.back()["val"]["pa_mpjpe"].get<double>());
}

TEST(TrainPg, StageAndJointSetChecks) {
  EXPECT_THROW(train_pg(tiny(Phase::kPG), tiny_dataset(), tiny_pg().checkpoint), CheckpointError);
  auto cfg = tiny(Phase::kPG);
  cfg.tw_joints = {"W", "TIP", "DIP"};
  EXPECT_THROW(train_pg(cfg, tiny_dataset(), tiny_tw().checkpoint), handsim::ConfigError);
  EXPECT_THROW(load_pg(tiny_tw().checkpoint), CheckpointError);
}

TEST(TrainPg, FixedEdgeModeLogsNoEdgeLoss) {
  auto cfg = tiny(Phase::kPG);
  cfg.edge_mode = "fixed";
  cfg.epochs = 1;
  const auto r = train_pg(cfg, tiny_dataset(), tiny_tw().checkpoint);
  for (const auto& rec : r.log) EXPECT_EQ(rec["train"]["edge"].get<double>(), 0.0);
}

TEST(Evaluate, CachedPathMatchesCheckpointEvaluation) {
  const auto& r = tiny_pg();
  const auto report = evaluate_checkpoint(r.checkpoint, tiny_dataset(), handsim::Split::kVal, 4);
  EXPECT_EQ(report.n_samples, 4u);
  EXPECT_NEAR(report.pa_mpjpe, r.final_val_pa_mpjpe, 1e-12);
  EXPECT_NEAR(report.mpjpe, r.log.back()["val"]["mpjpe"].get<double>(), 1e-12);
}

TEST(Evaluate, PartialTwCheckpointIsAStageMismatch) {
  try {
    evaluate_checkpoint(tiny_tw().checkpoint, tiny_dataset(), handsim::Split::kVal);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("stage mismatch"), std::string::npos);
  }
}

TEST(Evaluate, FullTwCheckpointDecodesDirectly) {
  auto cfg = tiny(Phase::kTW);
  cfg.tw_joints = {"W", "TIP", "DIP", "PIP", "MCP"};
  cfg.epochs = 0;
  const auto r = train_tw(cfg, tiny_dataset());
  const auto report = evaluate_checkpoint(r.checkpoint, tiny_dataset(), handsim::Split::kVal, 4);
  EXPECT_EQ(report.n_samples, 4u);
  EXPECT_TRUE(std::isfinite(report.mpjpe));
}

TEST(SameLog, IgnoresWallTimeOnly) {
  std::vector<json> a = {{{"epoch", 0}, {"wall_ms", 1.0}}};
  std::vector<json> b = {{{"epoch", 0}, {"wall_ms", 2.0}}};
  EXPECT_TRUE(same_log(a, b));
  b[0]["epoch"] = 1;
  EXPECT_FALSE(same_log(a, b));
}

}  // namespace
}  // namespace ehpe::train
