#pragma once

#include <cstddef>

namespace ehpe::ad::detail {

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n], all row-major. A transposed operand
/// is stored in its untransposed layout ([k,m] / [n,k]).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

}  // namespace ehpe::ad::detail
