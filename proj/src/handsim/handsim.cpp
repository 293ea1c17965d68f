#include "ehpe/handsim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ehpe::handsim {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Base direction of each finger in the palm plane, radians from +y.
constexpr std::array<double, kNumFingers> kFingerBaseAngle = {-0.85, -0.22, -0.03, 0.16, 0.34};

// RGB per finger; the wrist blob is white.
constexpr std::array<Vec3, kNumFingers> kFingerColor = {{
    {1.0, 0.2, 0.2}, {0.2, 1.0, 0.2}, {0.2, 0.3, 1.0}, {1.0, 1.0, 0.2}, {1.0, 0.2, 1.0}}};
constexpr Vec3 kWristColor = {1.0, 1.0, 1.0};

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Vec3 rotate(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

// Rotation by `angle` about unit `axis` (Rodrigues).
Mat3 axis_angle(const Vec3& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const auto [x, y, z] = axis;
  return {{{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
           {t * x * y + s * z, t * y * y + c, t * y * z - s * x},
           {t * x * z - s * y, t * y * z + s * x, t * z * z + c}}};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 base_direction(std::size_t finger) {
  const double phi = kFingerBaseAngle[finger];
  return {std::sin(phi), std::cos(phi), 0.0};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double draw(std::mt19937_64& rng, const AngleRange& r) { return r.lo + (r.hi - r.lo) * uniform01(rng); }

void check_range(const AngleRange& r, const char* what) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi))
    throw ConfigError(std::string("empty or invalid range for ") + what);
}

Vec3 palm_centre(const Skeleton& sk) {
  Vec3 c{};
  for (std::size_t f = 0; f < kNumFingers; ++f) {
    const Vec3 d = base_direction(f);
    const double len = sk.bone_length_to(joint_index(f, JointCategory::kMcp));
    for (int k = 0; k < 3; ++k) c[k] += len * d[k] / static_cast<double>(kNumFingers);
  }
  return c;
}

std::size_t finger_of(std::size_t joint) { return joint == 0 ? kNumFingers : (joint - 1) / 4; }

}  // namespace

const char* category_name(JointCategory c) {
  switch (c) {
    case JointCategory::kTip: return "TIP";
    case JointCategory::kDip: return "DIP";
    case JointCategory::kPip: return "PIP";
    case JointCategory::kMcp: return "MCP";
    case JointCategory::kWrist: return "W";
  }
  return "?";
}

std::optional<JointCategory> parse_category(std::string_view name) {
  for (auto c : kAllCategories)
    if (name == category_name(c)) return c;
  return std::nullopt;
}

std::size_t joint_index(std::size_t finger, JointCategory category) {
  switch (category) {
    case JointCategory::kWrist: return 0;
    case JointCategory::kMcp: return 1 + 4 * finger;
    case JointCategory::kPip: return 2 + 4 * finger;
    case JointCategory::kDip: return 3 + 4 * finger;
    case JointCategory::kTip: return 4 + 4 * finger;
  }
  return 0;
}

Skeleton Skeleton::standard() {
  Skeleton sk;
  constexpr std::array<std::array<double, 4>, kNumFingers> lengths = {{
      {0.50, 0.38, 0.30, 0.26},
      {0.88, 0.44, 0.26, 0.21},
      {0.86, 0.48, 0.30, 0.22},
      {0.82, 0.45, 0.28, 0.21},
      {0.78, 0.36, 0.21, 0.19},
  }};
  sk.parent[0] = -1;
  sk.category[0] = JointCategory::kWrist;
  constexpr std::array<JointCategory, 4> chain = {JointCategory::kMcp, JointCategory::kPip, JointCategory::kDip,
                                                  JointCategory::kTip};
  for (std::size_t f = 0; f < kNumFingers; ++f)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t j = 1 + 4 * f + k;
      sk.parent[j] = k == 0 ? 0 : static_cast<int>(j - 1);
      sk.category[j] = chain[k];
      sk.bone_lengths[j - 1] = lengths[f][k];
    }
  return sk;
}

void Skeleton::validate() const {
  for (double l : bone_lengths)
    if (!(l > 0.0) || !std::isfinite(l)) throw ConfigError("bone lengths must be positive");
  if (parent[0] != -1) throw ConfigError("joint 0 (wrist) must be the root");
  for (std::size_t j = 1; j < kNumJoints; ++j) {
    // Walking toward the root must terminate within kNumJoints steps.
    int cur = static_cast<int>(j);
    std::size_t steps = 0;
    while (cur != 0) {
      const int p = parent[static_cast<std::size_t>(cur)];
      if (p < 0 || p >= static_cast<int>(kNumJoints) || ++steps > kNumJoints)
        throw ConfigError("parent array is not a tree rooted at the wrist");
      cur = p;
    }
  }
  std::array<int, 5> counts{};
  for (auto c : category) ++counts[static_cast<std::size_t>(c)];
  if (counts != std::array<int, 5>{5, 5, 5, 5, 1}) throw ConfigError("category counts must be 5/5/5/5/1");
}

PoseLimits PoseLimits::defaults() {
  PoseLimits l;
  l.mcp_flexion = {-10 * kDeg, 90 * kDeg};
  l.pip_flexion = {0.0, 100 * kDeg};
  l.dip_flexion = {0.0, 80 * kDeg};
  l.abduction = {-15 * kDeg, 15 * kDeg};
  l.roll = {-60 * kDeg, 60 * kDeg};
  l.pitch = {-30 * kDeg, 30 * kDeg};
  l.yaw = {-30 * kDeg, 30 * kDeg};
  l.max_shift = 0.3;
  return l;
}

PoseLimits PoseLimits::zero() { return PoseLimits{}; }

void PoseLimits::validate() const {
  check_range(mcp_flexion, "MCP flexion");
  check_range(pip_flexion, "PIP flexion");
  check_range(dip_flexion, "DIP flexion");
  check_range(abduction, "abduction");
  check_range(roll, "roll");
  check_range(pitch, "pitch");
  check_range(yaw, "yaw");
  if (!(max_shift >= 0.0)) throw ConfigError("max_shift must be >= 0");
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

HandPose sample_pose(std::mt19937_64& rng, const PoseLimits& limits) {
  limits.validate();
  HandPose p;
  for (auto& f : p.fingers) {
    f.abduction = draw(rng, limits.abduction);
    f.mcp = draw(rng, limits.mcp_flexion);
    f.pip = draw(rng, limits.pip_flexion);
    f.dip = draw(rng, limits.dip_flexion);
  }
  p.roll = draw(rng, limits.roll);
  p.pitch = draw(rng, limits.pitch);
  p.yaw = draw(rng, limits.yaw);
  p.shift_x = draw(rng, {-limits.max_shift, limits.max_shift});
  p.shift_y = draw(rng, {-limits.max_shift, limits.max_shift});
  return p;
}

HandPose sample_pose(std::uint64_t seed, const PoseLimits& limits) {
  std::mt19937_64 rng(seed);
  return sample_pose(rng, limits);
}

Joints forward_kinematics(const HandPose& pose, const Skeleton& sk) {
  Joints j{};
  const Vec3 normal = {0.0, 0.0, 1.0};
  for (std::size_t f = 0; f < kNumFingers; ++f) {
    const Vec3 d0 = base_direction(f);
    const Vec3 flex_axis = cross(normal, d0);
    const auto& a = pose.fingers[f];
    Mat3 r = mul(axis_angle(normal, a.abduction), axis_angle(flex_axis, a.mcp));
    const std::size_t mcp = joint_index(f, JointCategory::kMcp);
    for (int k = 0; k < 3; ++k) j[mcp][k] = sk.bone_length_to(mcp) * d0[k];
    const std::array<double, 3> flex = {0.0, a.pip, a.dip};
    for (std::size_t seg = 0; seg < 3; ++seg) {
      if (seg > 0) r = mul(r, axis_angle(flex_axis, flex[seg]));
      const std::size_t child = mcp + seg + 1;
      const Vec3 dir = rotate(r, d0);
      for (int k = 0; k < 3; ++k) j[child][k] = j[child - 1][k] + sk.bone_length_to(child) * dir[k];
    }
  }
  return j;
}

Joints place_in_view(const Joints& hand, const HandPose& pose, const Skeleton& sk) {
  const Mat3 r = mul(axis_angle({0, 0, 1}, pose.roll),
                     mul(axis_angle({1, 0, 0}, pose.pitch), axis_angle({0, 1, 0}, pose.yaw)));
  const Vec3 c = palm_centre(sk);
  Joints out{};
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    const Vec3 v = rotate(r, {hand[i][0] - c[0], hand[i][1] - c[1], hand[i][2] - c[2]});
    out[i] = {v[0] + pose.shift_x, v[1] + pose.shift_y, v[2]};
  }
  return out;
}

Vec3 project_point(const Vec3& p, const Camera& cam) {
  return {cam.scale * p[0] + cam.cx, cam.scale * p[1] + cam.cy,
          static_cast<double>(cam.depth_bins) * (p[2] - cam.z_near) / (cam.z_far - cam.z_near)};
}

Vec3 unproject_point(const Vec3& q, const Camera& cam) {
  return {(q[0] - cam.cx) / cam.scale, (q[1] - cam.cy) / cam.scale,
          cam.z_near + q[2] * (cam.z_far - cam.z_near) / static_cast<double>(cam.depth_bins)};
}

bool in_bounds(const Vec3& q, const Camera& cam) {
  return q[0] >= 0.0 && q[0] <= static_cast<double>(cam.width - 1) && q[1] >= 0.0 &&
         q[1] <= static_cast<double>(cam.height - 1) && q[2] >= 0.0 && q[2] < static_cast<double>(cam.depth_bins);
}

std::optional<Joints> project_to_25d(const Joints& joints3d, const Camera& cam) {
  Joints out{};
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    out[i] = project_point(joints3d[i], cam);
    if (!in_bounds(out[i], cam)) return std::nullopt;
  }
  return out;
}

Joints unproject(const Joints& joints25d, const Camera& cam) {
  Joints out{};
  for (std::size_t i = 0; i < kNumJoints; ++i) out[i] = unproject_point(joints25d[i], cam);
  return out;
}

std::vector<double> render_image(std::span<const Vec3> joints, const Skeleton& sk, const Camera& cam) {
  if (joints.size() > kNumJoints) throw ConfigError("render_image: more than 21 joints");
  const std::size_t h = cam.height, w = cam.width, plane = h * w;
  std::vector<double> img(kImageChannels * plane, 0.0);
  const double bins = static_cast<double>(cam.depth_bins);
  auto depth_gain = [&](double z) { return 1.0 - 0.6 * std::clamp(z, 0.0, bins) / bins; };
  auto splat = [&](std::size_t y, std::size_t x, const Vec3& color, double v) {
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      double& px = img[c * plane + y * w + x];
      px = std::max(px, v * color[c]);
    }
  };
  auto clip_lo = [](double v) { return static_cast<std::size_t>(std::max(0.0, std::floor(v))); };
  auto clip_hi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::ceil(v), 0.0, static_cast<double>(n - 1)));
  };

  constexpr double kLineGain = 0.7;
  for (std::size_t child = 1; child < joints.size(); ++child) {
    const auto parent = static_cast<std::size_t>(sk.parent[child]);
    if (parent >= joints.size()) continue;
    const Vec3& p = joints[parent];
    const Vec3& q = joints[child];
    const Vec3& color = kFingerColor[finger_of(child)];
    const double dx = q[0] - p[0], dy = q[1] - p[1];
    const double len2 = dx * dx + dy * dy;
    const std::size_t x0 = clip_lo(std::min(p[0], q[0]) - 2), x1 = clip_hi(std::max(p[0], q[0]) + 2, w);
    const std::size_t y0 = clip_lo(std::min(p[1], q[1]) - 2), y1 = clip_hi(std::max(p[1], q[1]) + 2, h);
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) {
        const double rx = static_cast<double>(x) - p[0], ry = static_cast<double>(y) - p[1];
        const double t = len2 > 0 ? std::clamp((rx * dx + ry * dy) / len2, 0.0, 1.0) : 0.0;
        const double ex = rx - t * dx, ey = ry - t * dy;
        const double coverage = std::clamp(1.5 - std::sqrt(ex * ex + ey * ey), 0.0, 1.0);
        if (coverage <= 0.0) continue;
        splat(y, x, color, kLineGain * coverage * depth_gain(p[2] + t * (q[2] - p[2])));
      }
  }

  constexpr double kBlobSigma = 0.9, kBlobRadius = 3.0;
  for (std::size_t j = 0; j < joints.size(); ++j) {
    const Vec3& q = joints[j];
    const Vec3& color = j == 0 ? kWristColor : kFingerColor[finger_of(j)];
    const std::size_t x0 = clip_lo(q[0] - kBlobRadius), x1 = clip_hi(q[0] + kBlobRadius, w);
    const std::size_t y0 = clip_lo(q[1] - kBlobRadius), y1 = clip_hi(q[1] + kBlobRadius, h);
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) {
        const double rx = static_cast<double>(x) - q[0], ry = static_cast<double>(y) - q[1];
        const double r2 = rx * rx + ry * ry;
        if (r2 > kBlobRadius * kBlobRadius) continue;
        splat(y, x, color, std::exp(-r2 / (2 * kBlobSigma * kBlobSigma)) * depth_gain(q[2]));
      }
  }
  return img;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_of(std::uint64_t sample_id) {
  const std::uint64_t bucket = splitmix64(sample_id ^ 0x5EEDC0DEULL) % 100;
  if (bucket < 80) return Split::kTrain;
  if (bucket < 90) return Split::kVal;
  return Split::kTest;
}

HandSample generate_sample(std::uint64_t seed, std::uint64_t sample_id, const GeneratorConfig& cfg) {
  cfg.skeleton.validate();
  std::mt19937_64 rng(splitmix64(seed * 0x100000001B3ULL + sample_id));
  HandSample s;
  s.sample_id = sample_id;
  s.category = cfg.skeleton.category;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw ConfigError("pose limits never produce an in-bounds hand");
    const HandPose pose = sample_pose(rng, cfg.limits);
    auto j = project_to_25d(place_in_view(forward_kinematics(pose, cfg.skeleton), pose, cfg.skeleton), cfg.camera);
    if (!j) continue;
    s.joints25d = *j;
    break;
  }
  s.image = render_image(s.joints25d, cfg.skeleton, cfg.camera);
  return s;
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (split_of(samples[i].sample_id) == s) out.push_back(i);
  return out;
}

Dataset make_dataset(std::size_t n, std::uint64_t seed, const GeneratorConfig& cfg) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  Dataset d;
  d.camera = cfg.camera;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(seed, i, cfg));
  return d;
}

}  // namespace ehpe::handsim
