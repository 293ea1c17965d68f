#include "ehpe/ablation.hpp"

#include <map>
#include <sstream>

namespace ehpe::ablation {

using nlohmann::json;
using train::Phase;
using train::TrainConfig;

namespace {

const std::vector<std::string> kAllCategories = {"W", "TIP", "DIP", "PIP", "MCP"};

std::string letters(const std::vector<std::string>& cats) {
  static const std::map<std::string, std::string> abbrev = {
      {"W", "W"}, {"TIP", "T"}, {"DIP", "D"}, {"PIP", "P"}, {"MCP", "M"}};
  std::string s;
  for (const auto& c : cats) s += (s.empty() ? "" : "+") + abbrev.at(c);
  return s;
}

std::vector<std::string> complement(const std::vector<std::string>& cats) {
  std::vector<std::string> out;
  for (const auto& c : kAllCategories)
    if (std::find(cats.begin(), cats.end(), c) == cats.end()) out.push_back(c);
  return out;
}

Row full_row(std::string label, std::vector<std::string> tw_joints = {"W", "TIP"}) {
  Row r;
  r.label = std::move(label);
  r.tw = TrainConfig::defaults(Phase::kTW);
  r.pg = TrainConfig::defaults(Phase::kPG);
  r.tw.tw_joints = tw_joints;
  r.pg.tw_joints = std::move(tw_joints);
  return r;
}

const char* mark(bool on) { return on ? "yes" : "no"; }

}  // namespace

std::vector<std::string> suite_names() { return {"table3", "table4", "table5", "table6"}; }

Suite make_suite(const std::string& name) {
  Suite s;
  s.name = name;
  if (name == "table3") {
    s.columns = {"TW-stage", "PG-stage"};
    Row tw = full_row("TW", kAllCategories);
    tw.kind = RowKind::kTwOnly;
    Row pg = full_row("PG");
    pg.pg.tw_guidance = false;
    s.rows = {tw, pg, full_row("TW+PG")};
    s.cells = {{mark(true), mark(false)}, {mark(false), mark(true)}, {mark(true), mark(true)}};
  } else if (name == "table4") {
    s.columns = {"TW joints", "PG joints"};
    const std::vector<std::vector<std::string>> sets = {
        {"W", "TIP", "DIP"}, {"W", "TIP", "DIP", "PIP"}, {"TIP", "DIP"}, {"TIP", "DIP", "PIP"},
        {"TIP"},             {"W"},                      {"W", "DIP", "PIP", "MCP"}, {"W", "TIP"}};
    for (const auto& tw : sets) {
      const auto label = letters(tw) + " | " + letters(complement(tw));
      s.rows.push_back(full_row(label, tw));
      s.cells.push_back({letters(tw), letters(complement(tw))});
    }
  } else if (name == "table5") {
    s.columns = {"SPI", "FEM"};
    for (auto [spi, fem] : std::vector<std::pair<bool, bool>>{{false, false}, {false, true}, {true, false}, {true, true}}) {
      Row r = full_row(std::string(spi ? "SPI" : "-") + "/" + (fem ? "FEM" : "-"));
      r.pg.spi = spi;
      r.pg.fem = fem;
      if (!spi && !fem) r.kind = RowKind::kRejected;
      s.rows.push_back(r);
      s.cells.push_back({mark(spi), mark(fem)});
    }
  } else if (name == "table6") {
    s.columns = {"edge weights", "GAT layers"};
    for (auto [mode, layers] :
         std::vector<std::pair<std::string, std::size_t>>{{"fixed", 2}, {"dynamic", 1}, {"dynamic", 3}, {"dynamic", 2}}) {
      Row r = full_row(mode + "/" + std::to_string(layers));
      r.pg.edge_mode = mode;
      r.pg.gat_layers = layers;
      s.rows.push_back(r);
      s.cells.push_back({mode, std::to_string(layers)});
    }
  } else {
    throw handsim::ConfigError("unknown ablation suite '" + name + "' (expected table3, table4, table5 or table6)");
  }
  return s;
}

Table run(const Suite& suite, const handsim::Dataset& ds, const Budget& budget) {
  Table t;
  t.suite = suite;
  std::map<std::string, Checkpoint> tw_cache;
  for (Row row : suite.rows) {
    for (TrainConfig* c : {&row.tw, &row.pg}) {
      c->epochs = budget.epochs;
      c->batch_size = budget.batch_size;
      c->train_limit = budget.train_limit;
      c->val_limit = budget.val_limit;
      c->seed = budget.seed;
      if (c->phase == Phase::kPG && !c->lr_milestones.empty()) {
        // Keep the decay at the same fraction of the run.
        for (auto& m : c->lr_milestones) m = std::max<std::size_t>(1, m * budget.epochs / 40);
      }
    }
    RowResult res;
    res.label = row.label;
    if (row.kind == RowKind::kRejected) {
      try {
        row.pg.validate();
      } catch (const handsim::ConfigError& e) {
        res.status = "rejected";
        res.note = e.what();
        t.results.push_back(res);
        continue;
      }
      throw std::logic_error("ablation row " + row.label + " was expected to be rejected");
    }
    const std::string key = row.tw.to_json().dump();
    auto it = tw_cache.find(key);
    if (it == tw_cache.end()) it = tw_cache.emplace(key, train::train_tw(row.tw, ds).checkpoint).first;
    metrics::EvalReport report;
    if (row.kind == RowKind::kTwOnly) {
      report = train::evaluate_checkpoint(it->second, ds, handsim::Split::kVal, budget.val_limit);
    } else {
      const auto pg = train::train_pg(row.pg, ds, it->second);
      report = train::evaluate_checkpoint(pg.checkpoint, ds, handsim::Split::kVal, budget.val_limit);
    }
    res.status = "ok";
    res.pa_mpjpe = report.pa_mpjpe;
    res.mpjpe = report.mpjpe;
    t.results.push_back(res);
  }
  return t;
}

json Table::to_json() const {
  json rows = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    json cfg = json::object();
    for (std::size_t c = 0; c < suite.columns.size(); ++c) cfg[suite.columns[c]] = suite.cells[i][c];
    rows.push_back({{"label", r.label},
                    {"config", cfg},
                    {"status", r.status},
                    {"pa_mpjpe", r.pa_mpjpe ? json(*r.pa_mpjpe) : json(nullptr)},
                    {"mpjpe", r.mpjpe ? json(*r.mpjpe) : json(nullptr)},
                    {"note", r.note}});
  }
  return {{"suite", suite.name}, {"columns", suite.columns}, {"rows", rows}};
}

std::string Table::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "label";
  for (const auto& c : suite.columns) os << ',' << c;
  os << ",status,pa_mpjpe,mpjpe\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    os << '"' << r.label << '"';
    for (const auto& cell : suite.cells[i]) os << ',' << cell;
    os << ',' << r.status << ',';
    if (r.pa_mpjpe) os << *r.pa_mpjpe;
    os << ',';
    if (r.mpjpe) os << *r.mpjpe;
    os << '\n';
  }
  return os.str();
}

std::string Table::to_text() const {
  std::ostringstream os;
  os << suite.name << '\n';
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    os << "  " << r.label;
    for (std::size_t c = 0; c < suite.columns.size(); ++c) os << "  " << suite.columns[c] << '=' << suite.cells[i][c];
    if (r.pa_mpjpe) {
      os.setf(std::ios::fixed);
      os.precision(4);
      os << "  PA-MPJPE " << *r.pa_mpjpe;
    } else {
      os << "  " << r.status << " (" << r.note << ')';
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ehpe::ablation
