#pragma once

// Pose-error metrics over 21-joint 3D poses: MPJPE, per-sample similarity
// (Procrustes) alignment, per-category breakdown and joint success curves.

#include <array>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehpe/handsim.hpp"

namespace ehpe::metrics {

using handsim::JointCategory;
using handsim::Joints;
using handsim::Vec3;
using Mat3 = std::array<std::array<double, 3>, 3>;

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Cross-covariance of rank < 2 or a point set without spread.
class DegenerateAlignment : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double mpjpe(std::span<const Joints> pred, std::span<const Joints> gt);
/// Per-sample, per-joint Euclidean errors, [n][21].
std::vector<std::array<double, 21>> joint_errors(std::span<const Joints> pred, std::span<const Joints> gt);

/// A = U diag(s) V^T with s sorted descending, U and V orthogonal.
struct Svd3 {
  Mat3 u{}, v{};
  Vec3 s{};
  int sweeps = 0;
};
/// One-sided cyclic Jacobi (tolerance 1e-12, at most 100 sweeps).
Svd3 svd3(const Mat3& a);
double det3(const Mat3& m);

struct Similarity {
  Mat3 rotation{};
  double scale = 1.0;
  Vec3 translation{};

  Vec3 apply(const Vec3& p) const;
};

/// Least-squares similarity taking `pred` onto `gt`; a reflection is
/// removed by flipping the smallest singular direction.
Similarity procrustes_fit(const Joints& pred, const Joints& gt);
Joints procrustes_align(const Joints& pred, const Joints& gt);

struct PaResult {
  double pa_mpjpe = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;
  std::vector<Joints> aligned;  // one per used sample
  std::vector<std::size_t> used_indices;
};
PaResult pa_mpjpe(std::span<const Joints> pred, std::span<const Joints> gt);

struct CategoryBreakdown {
  std::array<double, 5> mean{};
  std::array<std::size_t, 5> count{};
  /// mean / TIP mean; empty when the TIP error is zero.
  std::array<std::optional<double>, 5> ratio{};
};

/// Indexed by JointCategory.
CategoryBreakdown category_breakdown(std::span<const Joints> pred, std::span<const Joints> gt,
                                     const std::array<JointCategory, 21>& categories);

struct PckCurve {
  std::vector<double> thresholds;
  std::vector<double> fractions;
  /// Trapezoidal area normalized by the threshold span (the single
  /// fraction when there is one threshold).
  double auc = 0.0;
};
/// Fraction of joints with error <= t for each threshold.
PckCurve pck_curve(std::span<const Joints> pred, std::span<const Joints> gt, std::span<const double> thresholds);
std::vector<double> default_thresholds();

struct EvalReport {
  std::size_t n_samples = 0;
  std::size_t n_excluded = 0;
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  CategoryBreakdown categories;
  PckCurve pck;  // over aligned predictions

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// category,mean_error,ratio_to_tip
  std::string category_csv() const;
};

EvalReport evaluate(std::span<const Joints> pred, std::span<const Joints> gt,
                    const std::array<JointCategory, 21>& categories,
                    std::span<const double> thresholds = {});

}  // namespace ehpe::metrics
