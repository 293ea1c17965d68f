#pragma once

// Named ablation suites: each row is a pair of phase configurations run
// end to end at a small epoch budget.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehpe/trainer.hpp"

namespace ehpe::ablation {

enum class RowKind {
  kFull,     // TW then PG, evaluate the PG checkpoint
  kTwOnly,   // TW over all 21 joints, decoded directly
  kRejected  // configuration must fail validation
};

struct Row {
  std::string label;
  RowKind kind = RowKind::kFull;
  train::TrainConfig tw, pg;
};

struct Suite {
  std::string name;
  std::vector<std::string> columns;  // configuration columns, before pa_mpjpe
  std::vector<std::vector<std::string>> cells;
  std::vector<Row> rows;
};

/// table3 .. table6; throws handsim::ConfigError for other names.
Suite make_suite(const std::string& name);
std::vector<std::string> suite_names();

struct Budget {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::size_t train_limit = 0;
  std::size_t val_limit = 0;
  std::uint64_t seed = 1;
};

struct RowResult {
  std::string label;
  std::string status;  // "ok" or "rejected"
  std::optional<double> pa_mpjpe, mpjpe;
  std::string note;
};

struct Table {
  Suite suite;
  std::vector<RowResult> results;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  std::string to_text() const;
};

/// Rows run sequentially; TW checkpoints are shared between rows with the
/// same TW configuration. A kRejected row that does not throw a ConfigError
/// is an error (std::logic_error).
Table run(const Suite& suite, const handsim::Dataset& ds, const Budget& budget);

}  // namespace ehpe::ablation
