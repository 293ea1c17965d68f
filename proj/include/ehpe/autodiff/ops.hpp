#pragma once

#include <cstddef>
#include <vector>

#include "ehpe/autodiff/tensor.hpp"

namespace ehpe::ad {

inline constexpr double kLeakySlope = 0.01;

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kRelu,
  kLeakyRelu,
  kSquare,
  kSqrt,
  kAbs,
};

/// Binary kinds broadcast by the trailing-dimension rule; unary kinds
/// ignore `b`.
Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduces one axis; the axis is kept with size 1 when keepdim is set.
Tensor sum(const Tensor& a, int axis, bool keepdim = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);  // rank 2
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& a, int axis, const std::vector<std::size_t>& indices);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,m,k] x [B,k,n] -> [B,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);

/// x: [C_in,H,W] or [N,C_in,H,W]; kernel: [C_out,C_in,kh,kw]. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);
/// x: [C,H,W] or [N,C,H,W]. Ties route the gradient to the first maximum
/// in row-major window order.
Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride);
/// Nearest-neighbour upsampling of the two trailing axes.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// featmap: [C,h,w] with points [J,2] -> [J,C], or batched
/// [N,C,h,w] with [N,J,2] -> [N,J,C]. Points are (x = column, y = row) in
/// cell coordinates; coordinates outside the map are clamped to the border.
Tensor grid_sample_bilinear(const Tensor& featmap, const Tensor& points);

}  // namespace ehpe::ad
