#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ehpe/ablation.hpp"
#include "ehpe/handsim.hpp"
#include "ehpe/metrics.hpp"
#include "ehpe/params.hpp"
#include "ehpe/trainer.hpp"

namespace ehpe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for bad flag combinations found after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw handsim::DataError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream o(p, std::ios::binary | std::ios::trunc);
  if (!o) throw handsim::DataError("cannot write " + p.string());
  o << bytes;
  if (!o) throw handsim::DataError("write failed: " + p.string());
}

std::string file_sha(const fs::path& p) { return sha256_hex(read_file(p)); }

struct Manifest {
  json j;
  explicit Manifest(const std::string& command) {
    j = {{"command", command},   {"tool_version", kToolVersion}, {"started_at", utc_now()},
         {"config_sha256", nullptr}, {"dataset_sha256", nullptr},  {"checkpoints", json::object()},
         {"outputs", json::array()}};
  }
  void output(const fs::path& p) { j["outputs"].push_back({{"path", p.string()}, {"sha256", file_sha(p)}}); }
  void finish(const fs::path& primary, std::ostream& out) {
    j["finished_at"] = utc_now();
    const fs::path mp = primary.string() + ".manifest.json";
    write_file(mp, j.dump(2) + "\n");
    out << j.dump(2) << "\n";
  }
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("EHPE_SEED");
  if (!s) return std::nullopt;
  std::string v(s);
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw UsageError("EHPE_SEED must be a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::out_of_range&) {
    throw UsageError("EHPE_SEED out of range: " + v);
  }
}

handsim::Split parse_split(const std::string& s) {
  if (s == "train") return handsim::Split::kTrain;
  if (s == "val") return handsim::Split::kVal;
  if (s == "test") return handsim::Split::kTest;
  throw UsageError("--split must be train, val or test");
}

// ---- gen-data ---------------------------------------------------------------------------

struct GenArgs {
  long long n = 0;
  std::uint64_t seed = 1;
  std::string out;
};

int gen_data(const GenArgs& a, std::ostream& out) {
  if (a.n < 1) throw UsageError("--n must be >= 1");
  Manifest m("gen-data");
  const auto ds = handsim::make_dataset(static_cast<std::size_t>(a.n), a.seed);
  handsim::write_dataset(a.out, ds);
  m.j["dataset_sha256"] = file_sha(a.out);
  m.j["n"] = a.n;
  m.j["seed"] = a.seed;
  m.output(a.out);
  m.finish(a.out, out);
  return kOk;
}

// ---- train ------------------------------------------------------------------------------

struct TrainArgs {
  std::string phase, config, dataset, out, log, tw_checkpoint;
  std::optional<std::size_t> epochs;
  bool verify = false;
};

int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const bool is_pg = a.phase == "pg" || a.phase == "PG";
  if (!is_pg && a.phase != "tw" && a.phase != "TW") throw UsageError("--phase must be tw or pg");
  json j = json::object();
  if (!a.config.empty()) {
    const auto text = read_file(a.config);
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw handsim::ConfigError("config " + a.config + ": " + e.what());
    }
    if (!j.is_object()) throw handsim::ConfigError("config must be a JSON object");
  }
  const std::string flag_phase = is_pg ? "PG" : "TW";
  if (j.contains("phase")) {
    const auto p = j["phase"].is_string() ? j["phase"].get<std::string>() : std::string();
    if (p != flag_phase && p != (is_pg ? "pg" : "tw"))
      throw handsim::ConfigError("config phase '" + j["phase"].dump() + "' conflicts with --phase " + a.phase);
  }
  j["phase"] = flag_phase;
  auto cfg = train::TrainConfig::from_json(j);
  if (!a.dataset.empty()) cfg.dataset = a.dataset;
  if (!a.out.empty()) cfg.checkpoint_out = a.out;
  if (!a.log.empty()) cfg.log = a.log;
  if (!a.tw_checkpoint.empty()) cfg.tw_checkpoint = a.tw_checkpoint;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (const auto s = env_seed()) cfg.seed = *s;
  if (cfg.dataset.empty()) throw UsageError("a dataset is required (--dataset or config key 'dataset')");
  if (cfg.checkpoint_out.empty()) throw UsageError("an output checkpoint is required (--out or config key 'checkpoint_out')");
  if (is_pg && cfg.tw_checkpoint.empty()) throw UsageError("--tw-checkpoint is required for --phase pg");
  cfg.validate();

  Manifest m("train");
  m.j["phase"] = flag_phase;
  m.j["config_sha256"] = sha256_hex(cfg.to_json().dump());
  m.j["config"] = cfg.to_json();
  const auto ds = handsim::read_dataset(cfg.dataset);
  m.j["dataset_sha256"] = file_sha(cfg.dataset);

  std::ofstream log;
  if (!cfg.log.empty()) {
    log.open(cfg.log, std::ios::trunc);
    if (!log) throw handsim::DataError("cannot write " + cfg.log);
  }
  const train::LogSink sink = [&](const json& rec) {
    if (log.is_open()) log << rec.dump() << '\n' << std::flush;
    err << rec["phase"].get<std::string>() << " epoch " << rec["epoch"] << " train " << rec["train"]["total"]
        << " (" << static_cast<long>(rec["wall_ms"].get<double>()) << " ms)\n";
  };

  Checkpoint ckpt;
  if (is_pg) {
    const auto tw = read_checkpoint(cfg.tw_checkpoint);
    m.j["checkpoints"]["tw_input"] = file_sha(cfg.tw_checkpoint);
    auto r = train::train_pg(cfg, ds, tw, sink);
    if (a.verify) {
      const auto again = train::train_pg(cfg, ds, tw);
      if (serialize_checkpoint(again.checkpoint) != serialize_checkpoint(r.checkpoint))
        throw std::logic_error("rerun produced a different checkpoint");
    }
    m.j["tw_params_hash"] = r.tw_hash_after;
    m.j["initial_val_pa_mpjpe"] = r.initial_val_pa_mpjpe;
    m.j["final_val_pa_mpjpe"] = r.final_val_pa_mpjpe;
    ckpt = std::move(r.checkpoint);
  } else {
    auto r = train::train_tw(cfg, ds, sink);
    if (a.verify) {
      const auto again = train::train_tw(cfg, ds);
      if (serialize_checkpoint(again.checkpoint) != serialize_checkpoint(r.checkpoint))
        throw std::logic_error("rerun produced a different checkpoint");
    }
    m.j["initial_heatmap_loss"] = r.initial_heatmap;
    m.j["final_heatmap_loss"] = r.final_heatmap;
    ckpt = std::move(r.checkpoint);
  }
  write_checkpoint(cfg.checkpoint_out, ckpt);
  m.j["checkpoints"]["output"] = file_sha(cfg.checkpoint_out);
  m.output(cfg.checkpoint_out);
  if (log.is_open()) {
    log.close();
    m.output(cfg.log);
  }
  m.finish(cfg.checkpoint_out, out);
  return kOk;
}

// ---- eval -------------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, report, csv, split = "test";
  std::size_t limit = 0;
  bool oracle = false;
};

int eval(const EvalArgs& a, std::ostream& out) {
  if (a.oracle == !a.checkpoint.empty()) throw UsageError("give exactly one of --checkpoint or --oracle");
  const auto split = parse_split(a.split);
  Manifest m("eval");
  const auto ds = handsim::read_dataset(a.dataset);
  m.j["dataset_sha256"] = file_sha(a.dataset);
  metrics::EvalReport report;
  if (a.oracle) {
    const auto idx = train::split_indices(ds, split, a.limit);
    if (idx.empty()) throw handsim::DataError(std::string("dataset has no ") + handsim::split_name(split) + " samples");
    std::vector<handsim::Joints> gt;
    for (std::size_t i : idx) gt.push_back(train::world_joints(ds, i));
    report = metrics::evaluate(gt, gt, handsim::Skeleton::standard().category);
  } else {
    const auto ckpt = read_checkpoint(a.checkpoint);
    m.j["checkpoints"]["input"] = file_sha(a.checkpoint);
    report = train::evaluate_checkpoint(ckpt, ds, split, a.limit);
  }
  const fs::path csv = a.csv.empty() ? fs::path(a.report).replace_extension(".csv") : fs::path(a.csv);
  write_file(a.report, report.to_json().dump(2) + "\n");
  write_file(csv, report.category_csv());
  m.output(a.report);
  m.output(csv);
  out << std::fixed << std::setprecision(6) << "MPJPE " << report.mpjpe << "  PA-MPJPE " << report.pa_mpjpe << "  ("
      << report.n_samples << " samples, " << report.n_excluded << " excluded from alignment)\n";
  out.unsetf(std::ios::fixed);
  m.finish(a.report, out);
  return kOk;
}

// ---- ablate -----------------------------------------------------------------------------

struct AblateArgs {
  std::string suite, dataset, out;
  ablation::Budget budget;
};

int ablate(AblateArgs a, std::ostream& out, std::ostream& err) {
  if (a.budget.epochs < 1) throw UsageError("--budget must be >= 1");
  if (const auto s = env_seed()) a.budget.seed = *s;
  const auto suite = ablation::make_suite(a.suite);
  Manifest m("ablate");
  const auto ds = handsim::read_dataset(a.dataset);
  m.j["dataset_sha256"] = file_sha(a.dataset);
  m.j["suite"] = a.suite;
  m.j["budget"] = {{"epochs", a.budget.epochs},
                   {"batch_size", a.budget.batch_size},
                   {"train_limit", a.budget.train_limit},
                   {"val_limit", a.budget.val_limit},
                   {"seed", a.budget.seed}};
  err << "running " << suite.rows.size() << " rows of " << a.suite << "\n";
  const auto table = ablation::run(suite, ds, a.budget);
  out << table.to_text();
  if (!a.out.empty()) {
    const fs::path base(a.out);
    const fs::path jp = fs::path(base).replace_extension(".json"), cp = fs::path(base).replace_extension(".csv");
    write_file(jp, table.to_json().dump(2) + "\n");
    write_file(cp, table.to_csv());
    m.output(jp);
    m.output(cp);
    m.finish(jp, out);
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage 3D hand pose estimation: data, training, evaluation and ablations", "ehpe"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic hand dataset");
  gen->add_option("--n", ga.n, "Number of samples")->required();
  gen->add_option("--seed", ga.seed, "Generator seed");
  gen->add_option("--out", ga.out, "Output dataset file")->required();

  TrainArgs ta;
  std::size_t epochs = 0;
  auto* tr = app.add_subcommand("train", "Train one phase (tw, then pg)");
  tr->add_option("--phase", ta.phase, "tw or pg")->required();
  tr->add_option("--config", ta.config, "JSON config file");
  tr->add_option("--dataset", ta.dataset, "Dataset file (overrides config)");
  tr->add_option("--out", ta.out, "Output checkpoint (overrides config)");
  tr->add_option("--log", ta.log, "NDJSON metrics log (overrides config)");
  tr->add_option("--tw-checkpoint", ta.tw_checkpoint, "Trained TW checkpoint (phase pg)");
  auto* ep = tr->add_option("--epochs", epochs, "Epoch count (overrides config)");
  tr->add_flag("--verify-repro", ta.verify, "Train twice and require identical checkpoints");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ea.checkpoint, "TW or PG checkpoint");
  ev->add_option("--dataset", ea.dataset, "Dataset file")->required();
  ev->add_option("--report", ea.report, "Output JSON report")->required();
  ev->add_option("--csv", ea.csv, "Output category CSV (default: report path with .csv)");
  ev->add_option("--split", ea.split, "train, val or test");
  ev->add_option("--limit", ea.limit, "Evaluate at most this many samples");
  ev->add_flag("--oracle", ea.oracle, "Use ground truth as predictions");

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Run an ablation suite");
  ab->add_option("--suite", aa.suite, "table3, table4, table5 or table6")->required();
  ab->add_option("--dataset", aa.dataset, "Dataset file")->required();
  ab->add_option("--budget", aa.budget.epochs, "Epochs per phase");
  ab->add_option("--batch-size", aa.budget.batch_size, "Batch size");
  ab->add_option("--train-limit", aa.budget.train_limit, "Training samples per row (0 = all)");
  ab->add_option("--val-limit", aa.budget.val_limit, "Validation samples per row (0 = all)");
  ab->add_option("--out", aa.out, "Table output path; writes .json and .csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return gen_data(ga, out);
    if (tr->parsed()) {
      if (ep->count()) ta.epochs = epochs;
      return train(ta, out, err);
    }
    if (ev->parsed()) return eval(ea, out);
    if (ab->parsed()) return ablate(aa, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const handsim::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const handsim::DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const train::NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}

}  // namespace ehpe::cli
