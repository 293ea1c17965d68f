#include "ehpe/params.hpp"

#include <cmath>
#include <stdexcept>

#include <openssl/evp.h>

#include "ehpe/binary_io.hpp"
#include "ehpe/handsim.hpp"

namespace ehpe {

ad::Parameter& ParamStore::add(std::string name, ad::Shape shape, bool is_weight) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  ad::Parameter p;
  p.name = std::move(name);
  p.value.assign(ad::numel(shape), 0.0);
  p.grad.assign(p.value.size(), 0.0);
  p.shape = std::move(shape);
  p.is_weight = is_weight;
  params_.push_back(std::move(p));
  return params_.back();
}

ad::Parameter* ParamStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const ad::Parameter* ParamStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

ad::Parameter& ParamStore::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

const ad::Parameter& ParamStore::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("no parameter named " + std::string(name));
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParamStore::set_frozen(bool frozen) {
  for (auto& p : params_) p.frozen = frozen;
}

void he_uniform(ad::Parameter& p, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : p.value) v = (2.0 * handsim::uniform01(rng) - 1.0) * bound;
}

void fill(ad::Parameter& p, double v) { std::fill(p.value.begin(), p.value.end(), v); }

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "EHPECP1";
constexpr std::uint32_t kVersion = 1;

void put_record(io::ByteWriter& w, const ad::Parameter& p, bool with_frozen) {
  w.put_string(p.name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
  for (auto d : p.shape) w.put<std::uint64_t>(d);
  for (double v : p.value) w.put<double>(v);
  if (with_frozen) w.put<std::uint8_t>(p.frozen ? 1 : 0);
}

}  // namespace

const ad::Parameter* Checkpoint::find(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.stage != "TW" && c.stage != "PG") throw CheckpointError("invalid stage tag '" + c.stage + "'");
  io::ByteWriter w;
  w.put_bytes(kMagic);
  w.put<std::uint32_t>(kVersion);
  w.put_string(c.stage);
  const std::string meta = c.meta.dump();
  w.put<std::uint64_t>(meta.size());
  w.put_bytes(meta);
  w.put<std::uint64_t>(c.params.size());
  for (const auto& p : c.params) {
    if (p.value.size() != ad::numel(p.shape)) throw CheckpointError("parameter " + p.name + " has inconsistent size");
    put_record(w, p, true);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  try {
    io::ByteReader r(bytes);
    if (r.get_bytes(kMagic.size()) != kMagic) throw CheckpointError("not an EHPECP1 checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.stage = r.get_string();
    if (c.stage != "TW" && c.stage != "PG") throw CheckpointError("invalid stage tag '" + c.stage + "'");
    const auto meta_len = r.get<std::uint64_t>();
    if (meta_len > r.remaining()) throw CheckpointError("truncated metadata");
    c.meta = nlohmann::json::parse(r.get_bytes(meta_len));
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
      ad::Parameter p;
      p.name = r.get_string();
      const auto rank = r.get<std::uint32_t>();
      if (rank > 8) throw CheckpointError("parameter " + p.name + ": implausible rank");
      for (std::uint32_t k = 0; k < rank; ++k) p.shape.push_back(r.get<std::uint64_t>());
      const auto n = ad::numel(p.shape);
      if (n * 8 > r.remaining()) throw CheckpointError("parameter " + p.name + ": truncated values");
      p.value.resize(n);
      for (double& v : p.value) v = r.get<double>();
      const auto frozen = r.get<std::uint8_t>();
      if (frozen > 1) throw CheckpointError("parameter " + p.name + ": bad frozen flag");
      p.frozen = frozen == 1;
      p.grad.assign(n, 0.0);
      c.params.push_back(std::move(p));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after last parameter");
    return c;
  } catch (const io::FormatError& e) {
    throw CheckpointError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("metadata: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  try {
    io::write_file(path, serialize_checkpoint(c));
  } catch (const std::runtime_error& e) {
    throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(io::read_file(path));
  } catch (const std::runtime_error& e) {
    throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
  }
}

void load_params(ParamStore& store, const Checkpoint& c, std::string_view prefix) {
  for (auto& p : store) {
    const std::string name = std::string(prefix) + p.name;
    const auto* src = c.find(name);
    if (!src) throw CheckpointError("checkpoint lacks parameter " + name);
    if (src->shape != p.shape)
      throw CheckpointError("parameter " + name + " has shape " + ad::to_string(src->shape) + ", expected " +
                            ad::to_string(p.shape));
    p.value = src->value;
  }
}

std::vector<ad::Parameter> snapshot(const ParamStore& store) {
  std::vector<ad::Parameter> out;
  for (const auto& p : store) {
    ad::Parameter q = p;
    q.grad.clear();
    out.push_back(std::move(q));
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string params_hash(const std::vector<ad::Parameter>& params) {
  io::ByteWriter w;
  for (const auto& p : params) put_record(w, p, false);
  return sha256_hex(w.bytes());
}

std::string params_hash(const ParamStore& store) { return params_hash(snapshot(store)); }

}  // namespace ehpe
