#pragma once

// Synthetic kinematic hands: pose sampling, forward kinematics, orthographic
// 2.5D projection, rasterization and the on-disk dataset format.
//
// Joint order (21): 0 = wrist, then per finger MCP, PIP, DIP, TIP with the
// thumb first: thumb 1-4, index 5-8, middle 9-12, ring 13-16, little 17-20.
// Bone b (0..19) connects joint b+1 to its parent.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehpe::handsim {

inline constexpr std::size_t kNumJoints = 21;
inline constexpr std::size_t kNumBones = 20;
inline constexpr std::size_t kNumFingers = 5;
inline constexpr std::size_t kDepthBins = 8;
inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kImageChannels = 3;

using Vec3 = std::array<double, 3>;
using Joints = std::array<Vec3, kNumJoints>;

enum class JointCategory : std::uint8_t { kTip = 0, kDip = 1, kPip = 2, kMcp = 3, kWrist = 4 };
inline constexpr std::array<JointCategory, 5> kAllCategories = {
    JointCategory::kTip, JointCategory::kDip, JointCategory::kPip, JointCategory::kMcp, JointCategory::kWrist};

const char* category_name(JointCategory c);
std::optional<JointCategory> parse_category(std::string_view name);

/// Joint index of `category` on `finger` (0 = thumb); the wrist ignores finger.
std::size_t joint_index(std::size_t finger, JointCategory category);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Skeleton {
  std::array<double, kNumBones> bone_lengths{};
  std::array<int, kNumJoints> parent{};
  std::array<JointCategory, kNumJoints> category{};

  /// Default hand in canonical units (middle finger wrist-to-tip ~1.8).
  static Skeleton standard();
  /// Throws ConfigError unless lengths are positive, the parent array is a
  /// tree rooted at the wrist and categories count 5/5/5/5/1.
  void validate() const;
  double bone_length_to(std::size_t joint) const { return bone_lengths[joint - 1]; }
};

struct AngleRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling ranges in radians (translation in canonical units).
struct PoseLimits {
  AngleRange mcp_flexion, pip_flexion, dip_flexion, abduction;
  AngleRange roll, pitch, yaw;
  double max_shift = 0.0;

  static PoseLimits defaults();
  /// All ranges collapsed to zero: the flat open hand, no global motion.
  static PoseLimits zero();
  void validate() const;
};

struct FingerAngles {
  double abduction = 0.0;
  double mcp = 0.0;
  double pip = 0.0;
  double dip = 0.0;

  bool operator==(const FingerAngles&) const = default;
};

struct HandPose {
  std::array<FingerAngles, kNumFingers> fingers{};
  double roll = 0.0, pitch = 0.0, yaw = 0.0;
  double shift_x = 0.0, shift_y = 0.0;

  bool operator==(const HandPose&) const = default;
};

/// Uniform in [0,1) from the top 53 bits, independent of the standard
/// library's distribution implementation.
double uniform01(std::mt19937_64& rng);

HandPose sample_pose(std::mt19937_64& rng, const PoseLimits& limits);
HandPose sample_pose(std::uint64_t seed, const PoseLimits& limits);

/// Hand-frame kinematics: wrist at the origin, palm in the z = 0 plane,
/// fingers along +y at zero angles, flexion bending toward -z.
Joints forward_kinematics(const HandPose& pose, const Skeleton& skeleton);

/// Applies the pose's global rotation about the palm centre and its shift.
Joints place_in_view(const Joints& hand_frame, const HandPose& pose, const Skeleton& skeleton);

/// Orthographic camera: (x, y) = scale * (X, Y) + centre, depth
/// z = d * (Z - z_near) / (z_far - z_near).
struct Camera {
  double scale = 14.0;
  double cx = 32.0;
  double cy = 32.0;
  double z_near = -1.5;
  double z_far = 1.5;
  std::size_t depth_bins = kDepthBins;
  std::size_t width = kImageSize;
  std::size_t height = kImageSize;
};

Vec3 project_point(const Vec3& p, const Camera& camera);
Vec3 unproject_point(const Vec3& q, const Camera& camera);
bool in_bounds(const Vec3& q, const Camera& camera);

/// std::nullopt when a joint leaves the image or the depth range (the
/// caller re-draws the pose).
std::optional<Joints> project_to_25d(const Joints& joints3d, const Camera& camera);
Joints unproject(const Joints& joints25d, const Camera& camera);

/// Renders the first joints.size() joints (<= 21) into a [3, H, W] buffer in
/// [0, 1]: bones whose two endpoints are present as anti-aliased segments,
/// joints as truncated Gaussian blobs, both dimmed with depth.
std::vector<double> render_image(std::span<const Vec3> joints25d, const Skeleton& skeleton,
                                 const Camera& camera = {});

struct HandSample {
  std::vector<double> image;  // [3, H, W]
  Joints joints25d{};
  std::array<JointCategory, kNumJoints> category{};
  std::uint64_t sample_id = 0;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
const char* split_name(Split s);
/// 80/10/10 by a 64-bit mix of the sample id.
Split split_of(std::uint64_t sample_id);

struct GeneratorConfig {
  Skeleton skeleton = Skeleton::standard();
  PoseLimits limits = PoseLimits::defaults();
  Camera camera{};
};

HandSample generate_sample(std::uint64_t seed, std::uint64_t sample_id, const GeneratorConfig& cfg = {});

struct Dataset {
  Camera camera{};
  std::size_t channels = kImageChannels;
  std::vector<HandSample> samples;

  std::vector<std::size_t> indices(Split s) const;
};

Dataset make_dataset(std::size_t n, std::uint64_t seed, const GeneratorConfig& cfg = {});
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);
/// Serialized bytes exactly as write_dataset would store them.
std::string serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(std::string_view bytes);

}  // namespace ehpe::handsim
