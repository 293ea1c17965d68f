#include "ehpe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ehpe::metrics {
namespace {

void check_shapes(std::span<const Joints> pred, std::span<const Joints> gt) {
  if (pred.size() != gt.size())
    throw MetricError("prediction count " + std::to_string(pred.size()) + " != ground-truth count " +
                      std::to_string(gt.size()));
}

double norm3(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

double dist(const Vec3& a, const Vec3& b) { return norm3({a[0] - b[0], a[1] - b[1], a[2] - b[2]}); }

Vec3 column(const Mat3& m, int c) { return {m[0][c], m[1][c], m[2][c]}; }

void set_column(Mat3& m, int c, const Vec3& v) {
  for (int r = 0; r < 3; ++r) m[r][c] = v[r];
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Unit vector orthogonal to unit `a`.
Vec3 orthogonal_to(const Vec3& a) {
  const int k = std::fabs(a[0]) <= std::fabs(a[1]) && std::fabs(a[0]) <= std::fabs(a[2]) ? 0
                : std::fabs(a[1]) <= std::fabs(a[2])                                      ? 1
                                                                                          : 2;
  Vec3 e{};
  e[k] = 1.0;
  const double d = dot(a, e);
  Vec3 v{e[0] - d * a[0], e[1] - d * a[1], e[2] - d * a[2]};
  const double n = norm3(v);
  return {v[0] / n, v[1] / n, v[2] / n};
}

}  // namespace

double det3(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Svd3 svd3(const Mat3& a) {
  Mat3 w = a;
  Mat3 v{};
  for (int i = 0; i < 3; ++i) v[i][i] = 1.0;
  Svd3 out;
  for (; out.sweeps < 100; ++out.sweeps) {
    bool rotated = false;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (int r = 0; r < 3; ++r) {
          alpha += w[r][p] * w[r][p];
          beta += w[r][q] * w[r][q];
          gamma += w[r][p] * w[r][q];
        }
        if (gamma == 0.0 || std::fabs(gamma) <= 1e-12 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (int r = 0; r < 3; ++r) {
          const double wp = w[r][p], wq = w[r][q];
          w[r][p] = c * wp - s * wq;
          w[r][q] = s * wp + c * wq;
          const double vp = v[r][p], vq = v[r][q];
          v[r][p] = c * vp - s * vq;
          v[r][q] = s * vp + c * vq;
        }
      }
    if (!rotated) break;
  }
  std::array<int, 3> order{0, 1, 2};
  Vec3 norms{norm3(column(w, 0)), norm3(column(w, 1)), norm3(column(w, 2))};
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return norms[x] > norms[y]; });
  for (int i = 0; i < 3; ++i) {
    out.s[i] = norms[order[i]];
    set_column(out.v, i, column(v, order[i]));
  }
  const double tiny = 1e-300;
  for (int i = 0; i < 3; ++i) {
    const Vec3 col = column(w, order[i]);
    if (out.s[i] > tiny && out.s[i] > 1e-15 * out.s[0]) {
      set_column(out.u, i, {col[0] / out.s[i], col[1] / out.s[i], col[2] / out.s[i]});
    } else if (i == 0) {
      set_column(out.u, 0, {1.0, 0.0, 0.0});
    } else if (i == 1) {
      set_column(out.u, 1, orthogonal_to(column(out.u, 0)));
    } else {
      set_column(out.u, 2, cross(column(out.u, 0), column(out.u, 1)));
    }
  }
  return out;
}

Vec3 Similarity::apply(const Vec3& p) const {
  Vec3 r{};
  for (int i = 0; i < 3; ++i)
    r[i] = scale * (rotation[i][0] * p[0] + rotation[i][1] * p[1] + rotation[i][2] * p[2]) + translation[i];
  return r;
}

Similarity procrustes_fit(const Joints& pred, const Joints& gt) {
  const double n = static_cast<double>(pred.size());
  Vec3 mx{}, my{};
  for (std::size_t j = 0; j < pred.size(); ++j)
    for (int k = 0; k < 3; ++k) {
      mx[k] += pred[j][k] / n;
      my[k] += gt[j][k] / n;
    }
  double var_x = 0;
  Mat3 cov{};
  for (std::size_t j = 0; j < pred.size(); ++j) {
    Vec3 x, y;
    for (int k = 0; k < 3; ++k) {
      x[k] = pred[j][k] - mx[k];
      y[k] = gt[j][k] - my[k];
    }
    var_x += dot(x, x) / n;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cov[r][c] += y[r] * x[c] / n;
  }
  if (var_x == 0.0) throw DegenerateAlignment("prediction has no spread");
  const Svd3 svd = svd3(cov);
  if (svd.s[0] == 0.0 || svd.s[1] <= 1e-12 * svd.s[0])
    throw DegenerateAlignment("cross-covariance rank < 2");
  const double sign = det3(svd.u) * det3(svd.v) < 0 ? -1.0 : 1.0;
  const Vec3 d{1.0, 1.0, sign};
  Similarity s;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k) s.rotation[r][c] += svd.u[r][k] * d[k] * svd.v[c][k];
  s.scale = (svd.s[0] + svd.s[1] + sign * svd.s[2]) / var_x;
  for (int r = 0; r < 3; ++r) {
    double rm = 0;
    for (int c = 0; c < 3; ++c) rm += s.rotation[r][c] * mx[c];
    s.translation[r] = my[r] - s.scale * rm;
  }
  return s;
}

Joints procrustes_align(const Joints& pred, const Joints& gt) {
  const Similarity s = procrustes_fit(pred, gt);
  Joints out;
  for (std::size_t j = 0; j < pred.size(); ++j) out[j] = s.apply(pred[j]);
  return out;
}

std::vector<std::array<double, 21>> joint_errors(std::span<const Joints> pred, std::span<const Joints> gt) {
  check_shapes(pred, gt);
  std::vector<std::array<double, 21>> e(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < 21; ++j) e[i][j] = dist(pred[i][j], gt[i][j]);
  return e;
}

double mpjpe(std::span<const Joints> pred, std::span<const Joints> gt) {
  const auto e = joint_errors(pred, gt);
  if (e.empty()) throw MetricError("no samples");
  double s = 0;
  for (const auto& row : e)
    for (double v : row) s += v;
  return s / static_cast<double>(e.size() * 21);
}

PaResult pa_mpjpe(std::span<const Joints> pred, std::span<const Joints> gt) {
  check_shapes(pred, gt);
  PaResult r;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    try {
      Joints a = procrustes_align(pred[i], gt[i]);
      for (std::size_t j = 0; j < 21; ++j) s += dist(a[j], gt[i][j]);
      r.aligned.push_back(a);
      r.used_indices.push_back(i);
      ++r.used;
    } catch (const DegenerateAlignment&) {
      ++r.excluded;
    }
  }
  r.pa_mpjpe = r.used ? s / static_cast<double>(r.used * 21) : 0.0;
  return r;
}

CategoryBreakdown category_breakdown(std::span<const Joints> pred, std::span<const Joints> gt,
                                     const std::array<JointCategory, 21>& categories) {
  const auto e = joint_errors(pred, gt);
  if (e.empty()) throw MetricError("no samples");
  CategoryBreakdown b;
  std::array<double, 5> sum{};
  for (std::size_t j = 0; j < 21; ++j) {
    const auto c = static_cast<std::size_t>(categories[j]);
    if (c >= 5) throw MetricError("joint " + std::to_string(j) + " has no valid category");
    ++b.count[c];
    for (const auto& row : e) sum[c] += row[j];
  }
  for (std::size_t c = 0; c < 5; ++c)
    b.mean[c] = b.count[c] ? sum[c] / static_cast<double>(b.count[c] * e.size()) : 0.0;
  const double tip = b.mean[static_cast<std::size_t>(JointCategory::kTip)];
  if (tip > 0)
    for (std::size_t c = 0; c < 5; ++c) b.ratio[c] = b.mean[c] / tip;
  return b;
}

PckCurve pck_curve(std::span<const Joints> pred, std::span<const Joints> gt, std::span<const double> thresholds) {
  if (thresholds.empty()) throw MetricError("pck: empty threshold list");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1])) throw MetricError("pck: thresholds must be strictly increasing");
  const auto e = joint_errors(pred, gt);
  if (e.empty()) throw MetricError("no samples");
  PckCurve c;
  c.thresholds.assign(thresholds.begin(), thresholds.end());
  const double total = static_cast<double>(e.size() * 21);
  for (double t : thresholds) {
    std::size_t hit = 0;
    for (const auto& row : e)
      for (double v : row) hit += v <= t;
    c.fractions.push_back(static_cast<double>(hit) / total);
  }
  if (thresholds.size() == 1) {
    c.auc = c.fractions[0];
  } else {
    double area = 0;
    for (std::size_t i = 1; i < thresholds.size(); ++i)
      area += 0.5 * (c.fractions[i] + c.fractions[i - 1]) * (thresholds[i] - thresholds[i - 1]);
    c.auc = area / (thresholds.back() - thresholds.front());
  }
  return c;
}

std::vector<double> default_thresholds() {
  std::vector<double> t(51);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(i);
  return t;
}

EvalReport evaluate(std::span<const Joints> pred, std::span<const Joints> gt,
                    const std::array<JointCategory, 21>& categories, std::span<const double> thresholds) {
  EvalReport r;
  r.n_samples = pred.size();
  r.mpjpe = mpjpe(pred, gt);
  r.categories = category_breakdown(pred, gt, categories);
  const PaResult pa = pa_mpjpe(pred, gt);
  r.pa_mpjpe = pa.pa_mpjpe;
  r.n_excluded = pa.excluded;
  const auto defaults = default_thresholds();
  const std::span<const double> th = thresholds.empty() ? std::span<const double>(defaults) : thresholds;
  if (pa.used > 0) {
    std::vector<Joints> g;
    for (std::size_t i : pa.used_indices) g.push_back(gt[i]);
    r.pck = pck_curve(pa.aligned, g, th);
  } else {
    r.pck.thresholds.assign(th.begin(), th.end());
    r.pck.fractions.assign(th.size(), 0.0);
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::object(), rel = nlohmann::json::object();
  for (auto c : handsim::kAllCategories) {
    const auto i = static_cast<std::size_t>(c);
    per[handsim::category_name(c)] = categories.mean[i];
    rel[handsim::category_name(c)] = categories.ratio[i] ? nlohmann::json(*categories.ratio[i]) : nlohmann::json();
  }
  return {{"n_samples", n_samples},
          {"n_excluded", n_excluded},
          {"mpjpe", mpjpe},
          {"pa_mpjpe", pa_mpjpe},
          {"per_category", per},
          {"relative_per_category", rel},
          {"pck", {{"thresholds", pck.thresholds}, {"fractions", pck.fractions}}},
          {"pck_auc", pck.auc}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    j.at("n_samples").get_to(r.n_samples);
    j.at("n_excluded").get_to(r.n_excluded);
    j.at("mpjpe").get_to(r.mpjpe);
    j.at("pa_mpjpe").get_to(r.pa_mpjpe);
    for (auto c : handsim::kAllCategories) {
      const auto i = static_cast<std::size_t>(c);
      const char* name = handsim::category_name(c);
      j.at("per_category").at(name).get_to(r.categories.mean[i]);
      const auto& rv = j.at("relative_per_category").at(name);
      if (!rv.is_null()) r.categories.ratio[i] = rv.get<double>();
    }
    j.at("pck").at("thresholds").get_to(r.pck.thresholds);
    j.at("pck").at("fractions").get_to(r.pck.fractions);
    j.at("pck_auc").get_to(r.pck.auc);
  } catch (const nlohmann::json::exception& e) {
    throw MetricError(std::string("eval report: ") + e.what());
  }
  if (r.pck.thresholds.size() != r.pck.fractions.size()) throw MetricError("eval report: pck length mismatch");
  return r;
}

std::string EvalReport::category_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "category,mean_error,ratio_to_tip\n";
  for (auto c : handsim::kAllCategories) {
    const auto i = static_cast<std::size_t>(c);
    os << handsim::category_name(c) << ',' << categories.mean[i] << ',';
    if (categories.ratio[i]) os << *categories.ratio[i];
    os << '\n';
  }
  return os.str();
}

}  // namespace ehpe::metrics
