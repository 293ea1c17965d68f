#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "ehpe/binary_io.hpp"
#include "ehpe/handsim.hpp"

using namespace ehpe::handsim;

namespace {

double dist(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ehpe_handsim_" + name);
}

}  // namespace

TEST(Skeleton, StandardIsValidWithTaxonomyCounts) {
  const auto sk = Skeleton::standard();
  EXPECT_NO_THROW(sk.validate());
  std::array<int, 5> counts{};
  for (auto c : sk.category) ++counts[static_cast<int>(c)];
  EXPECT_EQ(counts, (std::array<int, 5>{5, 5, 5, 5, 1}));
  EXPECT_EQ(sk.category[4], JointCategory::kTip);
  EXPECT_EQ(sk.category[0], JointCategory::kWrist);
}

TEST(Skeleton, CyclicParentRejected) {
  auto sk = Skeleton::standard();
  sk.parent[2] = 3;
  sk.parent[3] = 2;
  EXPECT_THROW(sk.validate(), ConfigError);
}

TEST(SamplePose, ZeroLimitsGiveFlatHand) {
  const auto p = sample_pose(123, PoseLimits::zero());
  EXPECT_EQ(p, HandPose{});
}

TEST(SamplePose, SameSeedSameAngles) {
  EXPECT_EQ(sample_pose(42, PoseLimits::defaults()), sample_pose(42, PoseLimits::defaults()));
  EXPECT_FALSE(sample_pose(42, PoseLimits::defaults()) == sample_pose(43, PoseLimits::defaults()));
}

TEST(SamplePose, EmptyRangeRejected) {
  auto l = PoseLimits::defaults();
  l.pip_flexion = {1.0, 0.5};
  EXPECT_THROW(sample_pose(1, l), ConfigError);
}

TEST(SamplePose, ThousandDrawsWithinLimits) {
  const auto l = PoseLimits::defaults();
  std::mt19937_64 rng(9);
  auto within = [](double v, const AngleRange& r) { return v >= r.lo && v <= r.hi; };
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_pose(rng, l);
    for (const auto& f : p.fingers) {
      ASSERT_TRUE(within(f.abduction, l.abduction));
      ASSERT_TRUE(within(f.mcp, l.mcp_flexion));
      ASSERT_TRUE(within(f.pip, l.pip_flexion));
      ASSERT_TRUE(within(f.dip, l.dip_flexion));
    }
    ASSERT_TRUE(within(p.roll, l.roll) && within(p.pitch, l.pitch) && within(p.yaw, l.yaw));
    ASSERT_LE(std::fabs(p.shift_x), l.max_shift);
  }
}

TEST(ForwardKinematics, ZeroPoseChainsAreStraight) {
  const auto sk = Skeleton::standard();
  const auto j = forward_kinematics(HandPose{}, sk);
  EXPECT_EQ(j[0], (Vec3{0, 0, 0}));
  for (std::size_t f = 0; f < kNumFingers; ++f) {
    const auto tip = joint_index(f, JointCategory::kTip);
    double total = 0.0;
    for (std::size_t k = 0; k < 4; ++k) total += sk.bone_lengths[4 * f + k];
    EXPECT_NEAR(dist(j[0], j[tip]), total, 1e-12);
  }
}

TEST(ForwardKinematics, NinetyDegreeMcpIsLocal) {
  const auto sk = Skeleton::standard();
  HandPose p;
  p.fingers[2].mcp = std::numbers::pi / 2;
  const auto flat = forward_kinematics(HandPose{}, sk);
  const auto bent = forward_kinematics(p, sk);
  const auto dip = joint_index(2, JointCategory::kDip), tip = joint_index(2, JointCategory::kTip);
  // Distal segment lies along the palm normal.
  EXPECT_NEAR(bent[tip][0] - bent[dip][0], 0.0, 1e-12);
  EXPECT_NEAR(bent[tip][1] - bent[dip][1], 0.0, 1e-12);
  EXPECT_NEAR(std::fabs(bent[tip][2] - bent[dip][2]), sk.bone_length_to(tip), 1e-12);
  for (std::size_t i = 0; i < kNumJoints; ++i) {
    if (i < 9 || i > 12) {
      EXPECT_EQ(flat[i], bent[i]) << i;
    }
  }
}

TEST(ForwardKinematics, BoneLengthsPreservedOnRandomPoses) {
  const auto sk = Skeleton::standard();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pose = sample_pose(rng, PoseLimits::defaults());
    const auto j = place_in_view(forward_kinematics(pose, sk), pose, sk);
    for (std::size_t c = 1; c < kNumJoints; ++c)
      ASSERT_NEAR(dist(j[c], j[static_cast<std::size_t>(sk.parent[c])]), sk.bone_length_to(c), 1e-9);
  }
}

TEST(Projection, WristAtOriginMapsToPrincipalPoint) {
  Camera cam;
  const auto q = project_point({0, 0, 0}, cam);
  EXPECT_DOUBLE_EQ(q[0], 32.0);
  EXPECT_DOUBLE_EQ(q[1], 32.0);
}

TEST(Projection, DepthOnlyDifferenceKeepsPixel) {
  Camera cam;
  const auto a = project_point({0.3, -0.2, 0.1}, cam);
  const auto b = project_point({0.3, -0.2, -0.6}, cam);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
  EXPECT_NE(a[2], b[2]);
}

TEST(Projection, RoundTripRecoversPoint) {
  Camera cam;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p = {uniform01(rng) * 2 - 1, uniform01(rng) * 2 - 1, uniform01(rng) * 2 - 1};
    const auto back = unproject_point(project_point(p, cam), cam);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(back[k], p[k], 1e-9);
  }
}

TEST(Projection, OutOfRangeSignalsRedraw) {
  Joints j{};
  j[5] = {5.0, 0.0, 0.0};  // 70 px right of centre
  EXPECT_FALSE(project_to_25d(j, Camera{}).has_value());
  Joints k{};
  k[3] = {0.0, 0.0, 2.0};  // beyond z_far
  EXPECT_FALSE(project_to_25d(k, Camera{}).has_value());
  EXPECT_TRUE(project_to_25d(Joints{}, Camera{}).has_value());
}

TEST(Render, EmptyIsBlack) {
  const auto img = render_image({}, Skeleton::standard());
  ASSERT_EQ(img.size(), 3u * 64 * 64);
  for (double v : img) EXPECT_EQ(v, 0.0);
}

TEST(Render, SingleJointUniqueMaximum) {
  const std::array<Vec3, 1> j = {{{32.0, 32.0, 2.0}}};
  const auto img = render_image(j, Skeleton::standard());
  std::size_t best = 0;
  int count = 0;
  double bestv = -1;
  for (std::size_t p = 0; p < 64 * 64; ++p) {
    const double v = img[p] + img[4096 + p] + img[8192 + p];
    if (v > bestv) {
      bestv = v;
      best = p;
      count = 1;
    } else if (v == bestv) {
      ++count;
    }
  }
  EXPECT_EQ(best, 32u * 64 + 32u);
  EXPECT_EQ(count, 1);
}

TEST(Render, DeterministicAndInRange) {
  const auto s1 = generate_sample(7, 3);
  const auto img2 = render_image(s1.joints25d, Skeleton::standard());
  EXPECT_EQ(s1.image, img2);
  for (double v : img2) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, FingertipPerturbationIsLocal) {
  const auto s = generate_sample(11, 0);
  auto moved = s.joints25d;
  const auto tip = joint_index(1, JointCategory::kTip), dip = joint_index(1, JointCategory::kDip);
  moved[tip][0] += 2.0;
  const auto a = s.image;
  const auto b = render_image(moved, Skeleton::standard());
  // Anything that changed must lie near the moved DIP-TIP segment (old or new).
  auto seg_dist = [](double x, double y, const Vec3& p, const Vec3& q) {
    const double dx = q[0] - p[0], dy = q[1] - p[1];
    const double t = std::clamp(((x - p[0]) * dx + (y - p[1]) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
    return std::hypot(x - p[0] - t * dx, y - p[1] - t * dy);
  };
  int changed = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        const std::size_t i = (c * 64 + y) * 64 + x;
        if (a[i] == b[i]) continue;
        ++changed;
        const double d = std::min(seg_dist(double(x), double(y), s.joints25d[dip], s.joints25d[tip]),
                                  seg_dist(double(x), double(y), moved[dip], moved[tip]));
        EXPECT_LE(d, 4.5) << "pixel " << x << "," << y;
      }
  EXPECT_GT(changed, 0);
}

TEST(Sample, InvariantsHold) {
  const Camera cam;
  for (std::uint64_t id = 0; id < 50; ++id) {
    const auto s = generate_sample(1, id);
    for (const auto& j : s.joints25d) {
      EXPECT_TRUE(in_bounds(j, cam));
      EXPECT_GE(j[2], 0.0);
      EXPECT_LT(j[2], 8.0);
    }
  }
}

TEST(Dataset, SingleSampleRoundTrip) {
  const auto path = temp_path("one.bin");
  const auto d = make_dataset(1, 5);
  write_dataset(path, d);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.samples.size(), 1u);
  EXPECT_EQ(back.samples[0].image, d.samples[0].image);
  EXPECT_EQ(back.samples[0].joints25d, d.samples[0].joints25d);
  EXPECT_EQ(back.samples[0].category, d.samples[0].category);
  EXPECT_EQ(back.samples[0].sample_id, 0u);
  EXPECT_EQ(back.camera.scale, d.camera.scale);
  std::filesystem::remove(path);
}

TEST(Dataset, ByteIdenticalForSameSeed) {
  EXPECT_EQ(serialize_dataset(make_dataset(6, 9)), serialize_dataset(make_dataset(6, 9)));
  EXPECT_NE(serialize_dataset(make_dataset(6, 9)), serialize_dataset(make_dataset(6, 10)));
}

TEST(Dataset, HeaderLayout) {
  const auto bytes = serialize_dataset(make_dataset(2, 1));
  EXPECT_EQ(bytes.substr(0, 7), "EHPEDS1");
  ehpe::io::ByteReader r(std::string_view(bytes).substr(7));
  EXPECT_EQ(r.get<std::uint32_t>(), 1u);
  EXPECT_EQ(r.get<std::uint64_t>(), 2u);
  EXPECT_EQ(r.get<std::uint32_t>(), 3u);
  EXPECT_EQ(r.get<std::uint32_t>(), 64u);
  EXPECT_EQ(r.get<std::uint32_t>(), 64u);
  EXPECT_EQ(r.get<std::uint32_t>(), 8u);
  const std::size_t header = 7 + 4 + 8 + 4 * 4 + 5 * 8 + 3;
  EXPECT_EQ(bytes.size(), header + 2 * (3 * 64 * 64 * 8 + 63 * 8 + 21 + 8));
}

TEST(Dataset, CorruptInputRejected) {
  auto bytes = serialize_dataset(make_dataset(1, 1));
  EXPECT_THROW(parse_dataset(std::string_view(bytes).substr(0, bytes.size() - 3)), ehpe::io::FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(parse_dataset(bytes), ehpe::io::FormatError);
  EXPECT_THROW(read_dataset("/nonexistent/dir/d.bin"), DataError);
}

TEST(Dataset, ZeroSamplesRejected) { EXPECT_THROW(make_dataset(0, 1), ConfigError); }

TEST(Dataset, CategoryCountsOverThousandSamples) {
  const auto d = make_dataset(1000, 2);
  std::array<std::size_t, 3> splits{};
  for (const auto& s : d.samples) {
    std::array<int, 5> counts{};
    for (auto c : s.category) ++counts[static_cast<int>(c)];
    ASSERT_EQ(counts, (std::array<int, 5>{5, 5, 5, 5, 1}));
    ++splits[static_cast<int>(split_of(s.sample_id))];
  }
  // 80/10/10 hash split, loosely.
  EXPECT_NEAR(splits[0] / 1000.0, 0.8, 0.05);
  EXPECT_NEAR(splits[1] / 1000.0, 0.1, 0.04);
}
