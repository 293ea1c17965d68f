#pragma once

// Named, ordered parameter sets and the checkpoint file that persists them.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ehpe/autodiff/tensor.hpp"

namespace ehpe {

/// Insertion-ordered parameters with stable addresses (tapes hold
/// Parameter pointers while a step is in flight).
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  /// Zero-initialized. Throws std::invalid_argument on a duplicate name.
  ad::Parameter& add(std::string name, ad::Shape shape, bool is_weight);
  ad::Parameter& get(std::string_view name);
  const ad::Parameter& get(std::string_view name) const;
  ad::Parameter* find(std::string_view name);
  const ad::Parameter* find(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  void set_frozen(bool frozen);

 private:
  std::deque<ad::Parameter> params_;
};

/// Uniform(-b, b) with b = sqrt(6 / fan_in), drawn with the handsim
/// uniform01 bit recipe so values do not depend on the standard library.
void he_uniform(ad::Parameter& p, std::size_t fan_in, std::mt19937_64& rng);
void fill(ad::Parameter& p, double v);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string stage;  // "TW" or "PG"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ad::Parameter> params;

  const ad::Parameter* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies matching names from `ckpt` into `store`; every store entry must be
/// present with an identical shape.
void load_params(ParamStore& store, const Checkpoint& ckpt, std::string_view prefix = {});
std::vector<ad::Parameter> snapshot(const ParamStore& store);

std::string sha256_hex(std::string_view bytes);
/// Hash of the serialized parameter records (names, shapes, values; the
/// frozen flag is excluded so freezing does not change identity).
std::string params_hash(const std::vector<ad::Parameter>& params);
std::string params_hash(const ParamStore& store);

}  // namespace ehpe
