#include "gemm.hpp"

#include <algorithm>

#include <Eigen/Core>

namespace ehpe::ad::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  Map cm(c, em, en);
  if (k == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  // Tiny products: plain loops with a fixed k order and no fused multiply-add,
  // so a permutation of rows or of the k terms cannot change the rounding of
  // sums with at most two nonzero terms.
  if (m * n * k <= 4096) {
    const std::size_t lda = trans_a ? m : k, ldb = trans_b ? k : n;
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * lda + i] : a[i * lda + p];
        double* crow = c + i * n;
        if (trans_b)
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
        else
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[p * ldb + j];
      }
    return;
  }
  ConstMap am(a, trans_a ? ek : em, trans_a ? em : ek);
  ConstMap bm(b, trans_b ? en : ek, trans_b ? ek : en);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) cm.noalias() += lhs * rhs;
    else cm.noalias() = lhs * rhs;
  };
  if (trans_a && trans_b) run(am.transpose(), bm.transpose());
  else if (trans_a) run(am.transpose(), bm);
  else if (trans_b) run(am, bm.transpose());
  else run(am, bm);
}

}  // namespace ehpe::ad::detail
