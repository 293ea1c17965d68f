#include <cmath>

#include "ehpe/binary_io.hpp"
#include "ehpe/handsim.hpp"

// Layout: see docs/FORMATS.md ("Dataset file").

namespace ehpe::handsim {
namespace {

constexpr std::string_view kMagic = "EHPEDS1";
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::string serialize_dataset(const Dataset& d) {
  const Camera& cam = d.camera;
  const std::size_t img_len = d.channels * cam.height * cam.width;
  io::ByteWriter w;
  w.reserve(128 + d.samples.size() * (img_len * 8 + kNumJoints * 3 * 8 + kNumJoints + 8));
  w.put_bytes(kMagic);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(d.samples.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cam.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cam.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cam.depth_bins));
  w.put<double>(cam.scale);
  w.put<double>(cam.cx);
  w.put<double>(cam.cy);
  w.put<double>(cam.z_near);
  w.put<double>(cam.z_far);
  w.put<std::uint8_t>(80);
  w.put<std::uint8_t>(10);
  w.put<std::uint8_t>(10);
  for (const auto& s : d.samples) {
    if (s.image.size() != img_len) throw DataError("sample image size does not match header dims");
    for (double v : s.image) w.put<double>(v);
    for (const auto& j : s.joints25d)
      for (double v : j) w.put<double>(v);
    for (auto c : s.category) w.put<std::uint8_t>(static_cast<std::uint8_t>(c));
    w.put<std::int64_t>(static_cast<std::int64_t>(s.sample_id));
  }
  return w.take();
}

Dataset parse_dataset(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(kMagic.size()) != kMagic) throw io::FormatError("not an EHPEDS1 dataset (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw io::FormatError("unsupported dataset version " + std::to_string(version));
  Dataset d;
  const auto n = r.get<std::uint64_t>();
  d.channels = r.get<std::uint32_t>();
  d.camera.height = r.get<std::uint32_t>();
  d.camera.width = r.get<std::uint32_t>();
  d.camera.depth_bins = r.get<std::uint32_t>();
  d.camera.scale = r.get<double>();
  d.camera.cx = r.get<double>();
  d.camera.cy = r.get<double>();
  d.camera.z_near = r.get<double>();
  d.camera.z_far = r.get<double>();
  const std::array<int, 3> split = {r.get<std::uint8_t>(), r.get<std::uint8_t>(), r.get<std::uint8_t>()};
  if (split != std::array<int, 3>{80, 10, 10}) throw io::FormatError("unsupported split rule");
  const std::size_t img_len = d.channels * d.camera.height * d.camera.width;
  const std::size_t record = img_len * 8 + kNumJoints * 3 * 8 + kNumJoints + 8;
  if (r.remaining() != n * record)
    throw io::FormatError("record section is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(n * record));
  d.samples.resize(n);
  for (auto& s : d.samples) {
    s.image.resize(img_len);
    for (double& v : s.image) v = r.get<double>();
    for (auto& j : s.joints25d)
      for (double& v : j) v = r.get<double>();
    for (auto& c : s.category) {
      const auto raw = r.get<std::uint8_t>();
      if (raw > 4) throw io::FormatError("invalid joint category byte");
      c = static_cast<JointCategory>(raw);
    }
    s.sample_id = static_cast<std::uint64_t>(r.get<std::int64_t>());
  }
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) {
  try {
    io::write_file(path, serialize_dataset(d));
  } catch (const std::runtime_error& e) {
    throw DataError(std::string("dataset ") + path.string() + ": " + e.what());
  }
}

Dataset read_dataset(const std::filesystem::path& path) {
  try {
    return parse_dataset(io::read_file(path));
  } catch (const std::runtime_error& e) {
    throw DataError(std::string("dataset ") + path.string() + ": " + e.what());
  }
}

}  // namespace ehpe::handsim
