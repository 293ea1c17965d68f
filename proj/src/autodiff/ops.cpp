#include "ehpe/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "gemm.hpp"

namespace ehpe::ad {
namespace {

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw ShapeError("operand is not recorded on a tape");
  if (&a.tape() != &b.tape()) throw ShapeError("operands recorded on different tapes");
  return a.tape();
}

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each flat output index, the flat index into an input broadcast to `out`.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t n = numel(out);
  std::vector<std::size_t> map(n);
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  Shape in_st_full(r, 0);
  const Shape in_st = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    in_st_full[off + i] = in[i] == 1 ? 0 : in_st[i];
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += in_st_full[d];
      if (idx[d] < out[d]) break;
      src -= in_st_full[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

bool is_binary(OpKind k) { return k == OpKind::kAdd || k == OpKind::kSub || k == OpKind::kMul; }

Tensor binary(OpKind kind, const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  const bool a_same = a.shape() == out_shape;
  const bool b_same = b.shape() == out_shape;
  auto amap = a_same ? std::make_shared<std::vector<std::size_t>>()
                     : std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, a.shape()));
  auto bmap = b_same ? std::make_shared<std::vector<std::size_t>>()
                     : std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, b.shape()));
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_same ? i : (*amap)[i]];
    const double y = bv[b_same ? i : (*bmap)[i]];
    switch (kind) {
      case OpKind::kAdd: out[i] = x + y; break;
      case OpKind::kSub: out[i] = x - y; break;
      default: out[i] = x * y; break;
    }
  }
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return tape.record(out_shape, std::move(out), {ia, ib},
                     [kind, ia, ib, a_same, b_same, amap, bmap](Tape& t, const Node& self) {
    const auto& g = self.grad;
    const std::size_t n = g.size();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      const auto& bv = t.node(ib).value;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = a_same ? i : (*amap)[i];
        double d = g[i];
        if (kind == OpKind::kMul) d *= bv[b_same ? i : (*bmap)[i]];
        ga[j] += d;
      }
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      const auto& av = t.node(ia).value;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = b_same ? i : (*bmap)[i];
        double d = g[i];
        if (kind == OpKind::kSub) d = -d;
        if (kind == OpKind::kMul) d *= av[a_same ? i : (*amap)[i]];
        gb[j] += d;
      }
    }
  });
}

double unary_value(OpKind kind, double x) {
  switch (kind) {
    case OpKind::kRelu: return x > 0.0 ? x : 0.0;
    case OpKind::kLeakyRelu: return x > 0.0 ? x : kLeakySlope * x;
    case OpKind::kSquare: return x * x;
    case OpKind::kSqrt: return std::sqrt(x);
    case OpKind::kAbs: return std::fabs(x);
    default: return x;
  }
}

// Derivative in terms of input x and output y.
double unary_slope(OpKind kind, double x, double y) {
  switch (kind) {
    case OpKind::kRelu: return x > 0.0 ? 1.0 : 0.0;
    case OpKind::kLeakyRelu: return x > 0.0 ? 1.0 : kLeakySlope;
    case OpKind::kSquare: return 2.0 * x;
    case OpKind::kSqrt: return y > 0.0 ? 0.5 / y : 0.0;
    case OpKind::kAbs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    default: return 1.0;
  }
}

Tensor unary(OpKind kind, const Tensor& a) {
  if (!a.valid()) throw ShapeError("operand is not recorded on a tape");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = unary_value(kind, av[i]);
  const std::size_t ia = a.node_id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [kind, ia](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    const auto& x = t.node(ia).value;
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * unary_slope(kind, x[i], self.value[i]);
  });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b) {
  if (is_binary(kind)) return binary(kind, a, b);
  return unary(kind, a);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(OpKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(OpKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(OpKind::kMul, a, b); }
Tensor relu(const Tensor& a) { return unary(OpKind::kRelu, a); }
Tensor leaky_relu(const Tensor& a) { return unary(OpKind::kLeakyRelu, a); }
Tensor square(const Tensor& a) { return unary(OpKind::kSquare, a); }
Tensor sqrt(const Tensor& a) { return unary(OpKind::kSqrt, a); }
Tensor abs(const Tensor& a) { return unary(OpKind::kAbs, a); }

Tensor scale(const Tensor& a, double s) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = s * av[i];
  const std::size_t ia = a.node_id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [s, ia](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  const std::size_t ia = a.node_id();
  return a.tape().record(a.shape(), std::move(out), {ia}, [ia](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  const std::size_t ia = a.node_id();
  return a.tape().record({1}, {s}, {ia}, [ia](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    const double g = self.grad[0];
    for (double& x : ga) x += g;
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const Shape& s = a.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  Shape out_shape = s;
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  auto av = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + k) * inner + i];
  const std::size_t ia = a.node_id();
  return a.tape().record(out_shape, std::move(out), {ia}, [ia, outer, inner, len](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + k) * inner + i] += self.grad[o * inner + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<double> v(a.data().begin(), a.data().end());
  const std::size_t ia = a.node_id();
  return a.tape().record(std::move(shape), std::move(v), {ia}, [ia](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) throw ShapeError("permute: axis count mismatch");
  std::vector<char> seen(r, 0);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis list");
    seen[ax] = 1;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
  const Shape in_st = strides_of(s);
  // src index of every output element
  auto map = std::make_shared<std::vector<std::size_t>>(numel(out_shape));
  {
    Shape st(r);
    for (std::size_t i = 0; i < r; ++i) st[i] = in_st[axes[i]];
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < map->size(); ++flat) {
      (*map)[flat] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += st[d];
        if (idx[d] < out_shape[d]) break;
        src -= st[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  auto av = a.data();
  std::vector<double> out(map->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*map)[i]];
  const std::size_t ia = a.node_id();
  return a.tape().record(out_shape, std::move(out), {ia}, [ia, map](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < map->size(); ++i) ga[(*map)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape& tape = parts.front().tape();
  const Shape& s0 = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, s0.size());
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != s0[i]) throw ShapeError("concat: " + to_string(s) + " vs " + to_string(s0));
    total += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[ax] = total;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> ids, lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[ax];
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += len;
    ids.push_back(p.node_id());
    lens.push_back(len);
  }
  return tape.record(out_shape, std::move(out), ids, [ids, lens, outer, inner, total](Tape& t, const Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t len = lens[k];
      if (t.requires_grad(ids[k])) {
        auto g = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len * inner; ++i)
            g[o * len * inner + i] += self.grad[(o * total + offset) * inner + i];
      }
      offset += len;
    }
  });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  if (begin >= end || end > s[ax]) throw ShapeError("slice: bad range on " + to_string(s));
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(a, axis, idx);
}

Tensor index_select(const Tensor& a, int axis, const std::vector<std::size_t>& indices) {
  const Shape& s = a.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  for (std::size_t i : indices)
    if (i >= s[ax]) throw ShapeError("index_select: index out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax], m = indices.size();
  Shape out_shape = s;
  out_shape[ax] = m;
  auto av = a.data();
  std::vector<double> out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * len + indices[k]) * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * m + k) * inner));
  const std::size_t ia = a.node_id();
  return a.tape().record(out_shape, std::move(out), {ia},
                         [ia, indices, outer, inner, len, m](Tape& t, const Node& self) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < m; ++k)
        for (std::size_t i = 0; i < inner; ++i)
          ga[(o * len + indices[k]) * inner + i] += self.grad[(o * m + k) * inner + i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return tape.record({m, n}, std::move(out), {ia, ib}, [ia, ib, m, n, k](Tape& t, const Node& self) {
    if (t.requires_grad(ia))  // dA = dC B^T
      detail::gemm(false, true, m, k, n, self.grad.data(), t.node(ib).value.data(),
                   t.grad_buffer(ia).data(), true);
    if (t.requires_grad(ib))  // dB = A^T dC
      detail::gemm(true, false, k, n, m, t.node(ia).value.data(), self.grad.data(),
                   t.grad_buffer(ib).data(), true);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1])
    throw ShapeError("bmm " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> out(bs * m * n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < bs; ++i)
    detail::gemm(false, false, m, n, k, av.data() + i * m * k, bv.data() + i * k * n,
                 out.data() + i * m * n, false);
  const std::size_t ia = a.node_id(), ib = b.node_id();
  return tape.record({bs, m, n}, std::move(out), {ia, ib},
                     [ia, ib, bs, m, n, k](Tape& t, const Node& self) {
    const double* av = t.node(ia).value.data();
    const double* bv = t.node(ib).value.data();
    double* ga = t.requires_grad(ia) ? t.grad_buffer(ia).data() : nullptr;
    double* gb = t.requires_grad(ib) ? t.grad_buffer(ib).data() : nullptr;
    for (std::size_t i = 0; i < bs; ++i) {
      const double* g = self.grad.data() + i * m * n;
      if (ga) detail::gemm(false, true, m, k, n, g, bv + i * k * n, ga + i * m * k, true);
      if (gb) detail::gemm(true, false, k, n, m, av + i * m * k, g, gb + i * k * n, true);
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  Tape& tape = same_tape(x, kernel);
  const bool batched = x.rank() == 4;
  if ((x.rank() != 3 && !batched) || kernel.rank() != 4)
    throw ShapeError("conv2d expects [C,H,W] or [N,C,H,W] input and 4-d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t nb = batched ? x.shape()[0] : 1;
  const std::size_t cin = x.dim(-3), h = x.dim(-2), w = x.dim(-1);
  const std::size_t cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kernel.shape()[1] != cin)
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " vs input " + to_string(x.shape()));
  if (kh > h + 2 * pad || kw > w + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t kdim = cin * kh * kw, plane = ho * wo, cols = nb * plane;

  // im2col: rows = (ci, ky, kx), columns = (n, oy, ox); -1 marks padding.
  auto src = std::make_shared<std::vector<std::ptrdiff_t>>(kdim * plane);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const std::size_t row = (ci * kh + ky) * kw + kx;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            (*src)[row * plane + oy * wo + ox] =
                inside ? static_cast<std::ptrdiff_t>((ci * h + static_cast<std::size_t>(iy)) * w +
                                                     static_cast<std::size_t>(ix))
                       : -1;
          }
      }
  auto xv = x.data();
  const std::size_t in_plane = cin * h * w;
  std::vector<double> col(kdim * cols);
  for (std::size_t r = 0; r < kdim; ++r)
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::ptrdiff_t s = (*src)[r * plane + p];
        col[r * cols + n * plane + p] = s < 0 ? 0.0 : xv[n * in_plane + static_cast<std::size_t>(s)];
      }
  std::vector<double> tmp(cout * cols);
  detail::gemm(false, false, cout, cols, kdim, kernel.data().data(), col.data(), tmp.data(), false);
  std::vector<double> out(nb * cout * plane);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t n = 0; n < nb; ++n)
      std::copy_n(tmp.begin() + static_cast<std::ptrdiff_t>(co * cols + n * plane), plane,
                  out.begin() + static_cast<std::ptrdiff_t>((n * cout + co) * plane));
  Shape out_shape = batched ? Shape{nb, cout, ho, wo} : Shape{cout, ho, wo};
  auto col_keep = std::make_shared<std::vector<double>>(std::move(col));
  const std::size_t ix_id = x.node_id(), ik = kernel.node_id();
  return tape.record(out_shape, std::move(out), {ix_id, ik},
                     [=](Tape& t, const Node& self) {
    std::vector<double> g(cout * cols);
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t n = 0; n < nb; ++n)
        std::copy_n(self.grad.begin() + static_cast<std::ptrdiff_t>((n * cout + co) * plane), plane,
                    g.begin() + static_cast<std::ptrdiff_t>(co * cols + n * plane));
    if (t.requires_grad(ik))
      detail::gemm(false, true, cout, kdim, cols, g.data(), col_keep->data(), t.grad_buffer(ik).data(), true);
    if (t.requires_grad(ix_id)) {
      std::vector<double> dcol(kdim * cols);
      detail::gemm(true, false, kdim, cols, cout, t.node(ik).value.data(), g.data(), dcol.data(), false);
      auto gx = t.grad_buffer(ix_id);
      for (std::size_t r = 0; r < kdim; ++r)
        for (std::size_t n = 0; n < nb; ++n)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::ptrdiff_t s = (*src)[r * plane + p];
            if (s >= 0) gx[n * in_plane + static_cast<std::size_t>(s)] += dcol[r * cols + n * plane + p];
          }
    }
  });
}

Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("maxpool2d expects [C,H,W] or [N,C,H,W]");
  const std::size_t h = x.dim(-2), w = x.dim(-1);
  if (window < 1 || stride < 1 || window > h || window > w) throw ShapeError("maxpool2d: window exceeds input");
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  auto xv = x.data();
  std::vector<double> out(planes * ho * wo);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xv[best];
        (*arg)[o] = best;
      }
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  const std::size_t ia = x.node_id();
  return x.tape().record(out_shape, std::move(out), {ia}, [ia, arg](Tape& t, const Node& self) {
    auto gx = t.grad_buffer(ia);
    for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += self.grad[o];
  });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() < 2 || factor < 1) throw ShapeError("upsample_nearest: bad input");
  const std::size_t h = x.dim(-2), w = x.dim(-1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t ho = h * factor, wo = w * factor;
  auto xv = x.data();
  std::vector<double> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(p * ho + y) * wo + xx] = xv[(p * h + y / factor) * w + xx / factor];
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  const std::size_t ia = x.node_id();
  return x.tape().record(out_shape, std::move(out), {ia},
                         [ia, planes, h, w, ho, wo, factor](Tape& t, const Node& self) {
    auto gx = t.grad_buffer(ia);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx)
          gx[(p * h + y / factor) * w + xx / factor] += self.grad[(p * ho + y) * wo + xx];
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  const std::size_t ia = x.node_id();
  return x.tape().record(s, std::move(out), {ia}, [ia, outer, inner, len](Tape& t, const Node& self) {
    auto gx = t.grad_buffer(ia);
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t j = base + k * inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

namespace {

struct BilinearTap {
  std::size_t x0, x1, y0, y1;
  double tx, ty;
  bool free_x, free_y;  // false when the coordinate was clamped
};

BilinearTap bilinear_tap(double x, double y, std::size_t h, std::size_t w) {
  BilinearTap tap{};
  auto axis = [](double v, std::size_t n, std::size_t& i0, std::size_t& i1, double& frac, bool& free) {
    const double hi = static_cast<double>(n - 1);
    free = v > 0.0 && v < hi;
    const double c = std::clamp(v, 0.0, hi);
    if (n == 1) {
      i0 = i1 = 0;
      frac = 0.0;
      free = false;
      return;
    }
    i0 = std::min(static_cast<std::size_t>(std::floor(c)), n - 2);
    i1 = i0 + 1;
    frac = c - static_cast<double>(i0);
  };
  axis(x, w, tap.x0, tap.x1, tap.tx, tap.free_x);
  axis(y, h, tap.y0, tap.y1, tap.ty, tap.free_y);
  return tap;
}

}  // namespace

Tensor grid_sample_bilinear(const Tensor& featmap, const Tensor& points) {
  Tape& tape = same_tape(featmap, points);
  const bool batched = featmap.rank() == 4;
  if (!batched && featmap.rank() != 3) throw ShapeError("grid_sample: featmap must be [C,h,w] or [N,C,h,w]");
  if (points.rank() != (batched ? 3u : 2u) || points.dim(-1) != 2)
    throw ShapeError("grid_sample: points must be [J,2] (or [N,J,2] for a batched map)");
  const std::size_t nb = batched ? featmap.shape()[0] : 1;
  if (batched && points.shape()[0] != nb) throw ShapeError("grid_sample: batch mismatch");
  const std::size_t c = featmap.dim(-3), h = featmap.dim(-2), w = featmap.dim(-1);
  const std::size_t nj = points.dim(-2);
  auto fv = featmap.data();
  auto pv = points.data();
  std::vector<double> out(nb * nj * c);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t j = 0; j < nj; ++j) {
      const auto tap = bilinear_tap(pv[(n * nj + j) * 2], pv[(n * nj + j) * 2 + 1], h, w);
      const double* f = fv.data() + n * c * h * w;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = f + ch * h * w;
        const double top = (1 - tap.tx) * p[tap.y0 * w + tap.x0] + tap.tx * p[tap.y0 * w + tap.x1];
        const double bot = (1 - tap.tx) * p[tap.y1 * w + tap.x0] + tap.tx * p[tap.y1 * w + tap.x1];
        out[(n * nj + j) * c + ch] = (1 - tap.ty) * top + tap.ty * bot;
      }
    }
  Shape out_shape = batched ? Shape{nb, nj, c} : Shape{nj, c};
  const std::size_t iff = featmap.node_id(), ip = points.node_id();
  return tape.record(out_shape, std::move(out), {iff, ip}, [=](Tape& t, const Node& self) {
    const auto& fv = t.node(iff).value;
    const auto& pv = t.node(ip).value;
    double* gf = t.requires_grad(iff) ? t.grad_buffer(iff).data() : nullptr;
    double* gp = t.requires_grad(ip) ? t.grad_buffer(ip).data() : nullptr;
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t j = 0; j < nj; ++j) {
        const std::size_t pj = (n * nj + j) * 2;
        const auto tap = bilinear_tap(pv[pj], pv[pj + 1], h, w);
        double dx = 0.0, dy = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double g = self.grad[(n * nj + j) * c + ch];
          const std::size_t base = (n * c + ch) * h * w;
          const double f00 = fv[base + tap.y0 * w + tap.x0], f01 = fv[base + tap.y0 * w + tap.x1];
          const double f10 = fv[base + tap.y1 * w + tap.x0], f11 = fv[base + tap.y1 * w + tap.x1];
          if (gf) {
            gf[base + tap.y0 * w + tap.x0] += g * (1 - tap.ty) * (1 - tap.tx);
            gf[base + tap.y0 * w + tap.x1] += g * (1 - tap.ty) * tap.tx;
            gf[base + tap.y1 * w + tap.x0] += g * tap.ty * (1 - tap.tx);
            gf[base + tap.y1 * w + tap.x1] += g * tap.ty * tap.tx;
          }
          dx += g * ((1 - tap.ty) * (f01 - f00) + tap.ty * (f11 - f10));
          dy += g * ((1 - tap.tx) * (f10 - f00) + tap.tx * (f11 - f01));
        }
        if (gp) {
          if (tap.free_x) gp[pj] += dx;
          if (tap.free_y) gp[pj + 1] += dy;
        }
      }
  });
}

}  // namespace ehpe::ad
