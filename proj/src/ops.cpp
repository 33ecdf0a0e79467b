#include "choir/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace choir::ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

Dtype result_dtype(std::initializer_list<const Tensor*> inputs) {
  for (auto* t : inputs) {
    if (t && t->dtype() == Dtype::f32) return Dtype::f32;
  }
  return Dtype::f64;
}

// Records `backward` when a tape is active and some input needs a gradient.
template <typename F>
void maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& out, F&& backward) {
  Tape* tape = active_tape();
  if (!tape) return;
  bool needed = false;
  for (auto& t : inputs) needed = needed || t.requires_grad();
  if (!needed) return;
  out.set_requires_grad(true);
  tape->record(op, std::move(inputs), out, std::forward<F>(backward));
}

std::vector<double>& grad_of(const ImplPtr& impl) {
  if (impl->grad.size() != impl->data.size()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  auto sa = contiguous_strides(a);
  auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t eb = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    }
    bc.out[i] = std::max(ea, eb);
    if (i + a.size() >= r && ea != 1) bc.stride_a[i] = sa[i + a.size() - r];
    if (i + b.size() >= r && eb != 1) bc.stride_b[i] = sb[i + b.size() - r];
  }
  return bc;
}

// Merges adjacent axes that both operands traverse contiguously, so the
// innermost run handled by for_each_run is as long as possible.
Broadcast coalesce(const Broadcast& bc) {
  Broadcast out;
  for (std::size_t i = 0; i < bc.out.size(); ++i) {
    if (bc.out[i] == 1) continue;
    if (!out.out.empty() && out.stride_a.back() == bc.stride_a[i] * bc.out[i] &&
        out.stride_b.back() == bc.stride_b[i] * bc.out[i]) {
      out.out.back() *= bc.out[i];
      out.stride_a.back() = bc.stride_a[i];
      out.stride_b.back() = bc.stride_b[i];
      continue;
    }
    out.out.push_back(bc.out[i]);
    out.stride_a.push_back(bc.stride_a[i]);
    out.stride_b.push_back(bc.stride_b[i]);
  }
  return out;
}

// Calls f(out_index, a_index, b_index) for every element of the output.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t n = shape_numel(bc.out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = bc.out[r - 1];
  const std::size_t step_a = bc.stride_a[r - 1];
  const std::size_t step_b = bc.stride_b[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * step_a, ob + j * step_b);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite input");
  }
}

// Calls run(out_offset, a_offset, b_offset, length, a_step, b_step) for each
// innermost run of a broadcast.
template <typename F>
void for_each_run(const Broadcast& bc, F&& run) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    run(std::size_t{0}, std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t n = shape_numel(bc.out);
  const std::size_t inner = bc.out[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    run(o, oa, ob, inner, bc.stride_a[r - 1], bc.stride_b[r - 1]);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

template <Elementwise K>
void binary_forward(const Broadcast& bc, const double* a, const double* b, double* out) {
  for_each_run(bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t len, std::size_t sa,
                       std::size_t sb) {
    for (std::size_t j = 0; j < len; ++j) {
      const double x = a[ia + j * sa];
      const double y = b[ib + j * sb];
      if constexpr (K == Elementwise::add) out[o + j] = x + y;
      if constexpr (K == Elementwise::sub) out[o + j] = x - y;
      if constexpr (K == Elementwise::mul) out[o + j] = x * y;
      if constexpr (K == Elementwise::div) out[o + j] = x / y;
    }
  });
}

template <Elementwise K>
void binary_backward(const Broadcast& bc, const double* g, const double* a, const double* b, double* ga,
                     double* gb) {
  for_each_run(bc, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t len, std::size_t sa,
                       std::size_t sb) {
    for (std::size_t j = 0; j < len; ++j) {
      const double go = g[o + j];
      const std::size_t i = ia + j * sa;
      const std::size_t k = ib + j * sb;
      if constexpr (K == Elementwise::add) {
        if (ga) ga[i] += go;
        if (gb) gb[k] += go;
      }
      if constexpr (K == Elementwise::sub) {
        if (ga) ga[i] += go;
        if (gb) gb[k] -= go;
      }
      if constexpr (K == Elementwise::mul) {
        if (ga) ga[i] += go * b[k];
        if (gb) gb[k] += go * a[i];
      }
      if constexpr (K == Elementwise::div) {
        if (ga) ga[i] += go / b[k];
        if (gb) gb[k] -= go * a[i] / (b[k] * b[k]);
      }
    }
  });
}

template <typename F>
void dispatch(Elementwise kind, F&& f) {
  switch (kind) {
    case Elementwise::add: f(std::integral_constant<Elementwise, Elementwise::add>{}); break;
    case Elementwise::sub: f(std::integral_constant<Elementwise, Elementwise::sub>{}); break;
    case Elementwise::mul: f(std::integral_constant<Elementwise, Elementwise::mul>{}); break;
    default: f(std::integral_constant<Elementwise, Elementwise::div>{}); break;
  }
}

Tensor binary(Elementwise kind, const Tensor& a, const Tensor& b) {
  static const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  if (kind == Elementwise::div) {
    for (double v : b.data()) {
      if (v == 0.0) throw NumericalError("div: division by zero");
    }
  }
  const Broadcast full = a.shape() == b.shape()
                             ? Broadcast{a.shape(), contiguous_strides(a.shape()), contiguous_strides(a.shape())}
                             : broadcast_shapes(a.shape(), b.shape(), name);
  const Broadcast bc = coalesce(full);
  std::vector<double> out(shape_numel(full.out));
  dispatch(kind, [&](auto k) { binary_forward<decltype(k)::value>(bc, a.data().data(), b.data().data(), out.data()); });
  Tensor result = make_result(full.out, std::move(out), result_dtype({&a, &b}));
  maybe_record(name, {a, b}, result, [kind, bc, ai = a.impl(), bi = b.impl(), oi = result.impl()] {
    double* ga = ai->requires_grad ? grad_of(ai).data() : nullptr;
    double* gb = bi->requires_grad ? grad_of(bi).data() : nullptr;
    dispatch(kind, [&](auto k) {
      binary_backward<decltype(k)::value>(bc, oi->grad.data(), ai->data.data(), bi->data.data(), ga, gb);
    });
  });
  return result;
}

// Views `shape` as [outer, extent(axis), inner].
struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

namespace {

// C[m, n] += A[m, k] B[k, n]
void gemm(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    double* Crow = C + r * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[r * k + t];
      if (av == 0.0) continue;
      const double* Brow = B + t * n;
      for (std::size_t c = 0; c < n; ++c) Crow[c] += av * Brow[c];
    }
  }
}

// GA[m, k] += G[m, n] B[k, n]^T
void gemm_bt(const double* G, const double* B, double* GA, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t t = 0; t < k; ++t) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += G[r * n + c] * B[t * n + c];
      GA[r * k + t] += s;
    }
  }
}

// GB[k, n] += A[m, k]^T G[m, n]
void gemm_at(const double* A, const double* G, double* GB, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[r * k + t];
      if (av == 0.0) continue;
      double* GBrow = GB + t * n;
      const double* Grow = G + r * n;
      for (std::size_t c = 0; c < n; ++c) GBrow[c] += av * Grow[c];
    }
  }
}

// [batch, k, n] <-> [k, batch * n]
std::vector<double> fold_batches(const double* x, std::size_t batch, std::size_t k, std::size_t n) {
  std::vector<double> out(batch * k * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < k; ++t) {
      std::copy_n(x + (b * k + t) * n, n, out.data() + t * batch * n + b * n);
    }
  }
  return out;
}

void unfold_batches_add(const double* folded, double* x, std::size_t batch, std::size_t k, std::size_t n) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < k; ++t) {
      const double* src = folded + t * batch * n + b * n;
      double* dst = x + (b * k + t) * n;
      for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const auto& ad = a.data();
  const auto& bd = b.data();

  if (batch_b.empty()) {
    // Every batch of a shares b: one [batch * m, k] x [k, n] product.
    const std::size_t rows = a.numel() / k;
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(rows * n, 0.0);
    gemm(ad.data(), bd.data(), out.data(), rows, k, n);
    Tensor result = make_result(std::move(out_shape), std::move(out), result_dtype({&a, &b}));
    maybe_record("matmul", {a, b}, result, [rows, k, n, ai = a.impl(), bi = b.impl(), oi = result.impl()] {
      if (ai->requires_grad) gemm_bt(oi->grad.data(), bi->data.data(), grad_of(ai).data(), rows, k, n);
      if (bi->requires_grad) gemm_at(ai->data.data(), oi->grad.data(), grad_of(bi).data(), rows, k, n);
    });
    return result;
  }

  if (batch_a.empty()) {
    // a mixes the rows of every batch of b: fold b to [k, batch * n].
    const std::size_t batch = shape_numel(batch_b);
    const std::size_t cols = batch * n;
    std::vector<double> folded = fold_batches(bd.data(), batch, k, n);
    std::vector<double> wide(m * cols, 0.0);
    gemm(ad.data(), folded.data(), wide.data(), m, k, cols);
    std::vector<double> out(batch * m * n);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(wide.data() + r * cols + bi * n, n, out.data() + (bi * m + r) * n);
      }
    }
    Shape out_shape = batch_b;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor result = make_result(std::move(out_shape), std::move(out), result_dtype({&a, &b}));
    maybe_record("matmul", {a, b}, result,
                 [m, k, n, batch, cols, folded = std::move(folded), ai = a.impl(), bi = b.impl(),
                  oi = result.impl()] {
                   std::vector<double> gwide = fold_batches(oi->grad.data(), batch, m, n);
                   if (ai->requires_grad) gemm_bt(gwide.data(), folded.data(), grad_of(ai).data(), m, k, cols);
                   if (bi->requires_grad) {
                     std::vector<double> gfolded(k * cols, 0.0);
                     gemm_at(ai->data.data(), gwide.data(), gfolded.data(), m, k, cols);
                     unfold_batches_add(gfolded.data(), grad_of(bi).data(), batch, k, n);
                   }
                 });
    return result;
  }

  Broadcast bc;
  try {
    bc = broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: batch extents of " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
  }
  // Batch pairs as (out, a, b) matrix indices.
  std::vector<std::array<std::size_t, 3>> pairs;
  pairs.reserve(shape_numel(bc.out));
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
    pairs.push_back({o, i, j});
  });
  Shape out_shape = bc.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(shape_numel(out_shape), 0.0);
  for (const auto& [o, ia, ib] : pairs) {
    gemm(ad.data() + ia * m * k, bd.data() + ib * k * n, out.data() + o * m * n, m, k, n);
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), result_dtype({&a, &b}));
  maybe_record("matmul", {a, b}, result,
               [m, k, n, pairs = std::move(pairs), ai = a.impl(), bi = b.impl(), oi = result.impl()] {
                 double* ga = ai->requires_grad ? grad_of(ai).data() : nullptr;
                 double* gb = bi->requires_grad ? grad_of(bi).data() : nullptr;
                 for (const auto& [o, ia, ib] : pairs) {
                   const double* G = oi->grad.data() + o * m * n;
                   if (ga) gemm_bt(G, bi->data.data() + ib * k * n, ga + ia * m * k, m, k, n);
                   if (gb) gemm_at(ai->data.data() + ia * m * k, G, gb + ib * k * n, m, k, n);
                 }
               });
  return result;
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b, double scalar) {
  switch (kind) {
    case Elementwise::add:
    case Elementwise::sub:
    case Elementwise::mul:
    case Elementwise::div:
      if (!b) throw std::invalid_argument("elementwise: binary op needs a second operand");
      return binary(kind, a, *b);
    case Elementwise::neg:
      return scale(a, -1.0);
    case Elementwise::scale:
      return scale(a, scalar);
    case Elementwise::relu:
      return relu(a);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Elementwise::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Elementwise::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Elementwise::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Elementwise::div, a, b); }
Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("scale", {a}, result, [factor, ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * oi->grad[i];
  });
  return result;
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("add_scalar", {a}, result, [ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
  });
  return result;
}

Tensor clamp_min(const Tensor& a, double lo) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = std::max(v, lo);
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("clamp_min", {a}, result, [lo, ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (ai->data[i] > lo) ga[i] += oi->grad[i];
    }
  });
  return result;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("relu", {a}, result, [ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (ai->data[i] > 0.0) ga[i] += oi->grad[i];
    }
  });
  return result;
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) {
    if (v < 0.0 || !std::isfinite(v)) throw NumericalError("sqrt: negative or non-finite input");
    v = std::sqrt(v);
  }
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("sqrt", {a}, result, [ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (oi->grad[i] != 0.0) ga[i] += 0.5 * oi->grad[i] / oi->data[i];
    }
  });
  return result;
}

Tensor reduce(Reduction kind, const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank(), a.shape());
  const AxisView v = axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto& ad = a.data();
  std::vector<double> out(v.outer * v.inner, 0.0);
  std::vector<std::size_t> argmax;
  if (kind == Reduction::max) argmax.assign(out.size(), 0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      const std::size_t slot = o * v.inner + i;
      if (kind == Reduction::max) {
        std::size_t best = 0;
        double best_v = ad[base];
        for (std::size_t j = 1; j < v.n; ++j) {
          const double x = ad[base + j * v.inner];
          if (x > best_v) {
            best_v = x;
            best = j;
          }
        }
        out[slot] = best_v;
        argmax[slot] = best;
      } else {
        double s = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) s += ad[base + j * v.inner];
        out[slot] = kind == Reduction::mean ? s / static_cast<double>(v.n) : s;
      }
    }
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), a.dtype());
  static const char* names[] = {"sum", "mean", "max"};
  maybe_record(names[static_cast<int>(kind)], {a}, result,
               [kind, v, argmax = std::move(argmax), ai = a.impl(), oi = result.impl()] {
                 auto& ga = grad_of(ai);
                 const auto& g = oi->grad;
                 const double w = kind == Reduction::mean ? 1.0 / static_cast<double>(v.n) : 1.0;
                 for (std::size_t o = 0; o < v.outer; ++o) {
                   for (std::size_t i = 0; i < v.inner; ++i) {
                     const std::size_t base = o * v.n * v.inner + i;
                     const std::size_t slot = o * v.inner + i;
                     if (kind == Reduction::max) {
                       ga[base + argmax[slot] * v.inner] += g[slot];
                     } else {
                       for (std::size_t j = 0; j < v.n; ++j) ga[base + j * v.inner] += w * g[slot];
                     }
                   }
                 }
               });
  return result;
}

Tensor sum(const Tensor& a, int axis, bool keepdim) { return reduce(Reduction::sum, a, axis, keepdim); }
Tensor mean(const Tensor& a, int axis, bool keepdim) { return reduce(Reduction::mean, a, axis, keepdim); }
Tensor max(const Tensor& a, int axis, bool keepdim) { return reduce(Reduction::max, a, axis, keepdim); }

Tensor sum_all(const Tensor& a) {
  return reduce(Reduction::sum, reshape(a, {a.numel()}), 0, false);
}

Tensor softmax(const Tensor& a, int axis) {
  check_finite(a, "softmax");
  const std::size_t ax = normalize_axis(axis, a.rank(), a.shape());
  const AxisView v = axis_view(a.shape(), ax);
  const auto& ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) hi = std::max(hi, ad[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(ad[base + j * v.inner] - hi);
        out[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) out[base + j * v.inner] /= z;
    }
  }
  Tensor result = make_result(a.shape(), std::move(out), a.dtype());
  maybe_record("softmax", {a}, result, [v, ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    const auto& g = oi->grad;
    const auto& y = oi->data;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) dot += g[base + j * v.inner] * y[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t p = base + j * v.inner;
          ga[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  Tensor result = make_result(std::move(shape), std::move(out), a.dtype());
  maybe_record("reshape", {a}, result, [ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
  });
  return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t r = a.rank();
  if (order.size() != r) throw ShapeError("permute: order rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw ShapeError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[order[i]];
  const auto in_strides = contiguous_strides(a.shape());
  // Source offset for each output element, walked with an odometer.
  std::vector<std::size_t> src(a.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < src.size(); ++o) {
      src[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += in_strides[order[d]];
        if (idx[d] < out_shape[d]) break;
        off -= in_strides[order[d]] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(src.size());
  const auto& ad = a.data();
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = ad[src[o]];
  Tensor result = make_result(std::move(out_shape), std::move(out), a.dtype());
  maybe_record("permute", {a}, result, [src = std::move(src), ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += oi->grad[o];
  });
  return result;
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const std::size_t x = normalize_axis(axis0, a.rank(), a.shape());
  const std::size_t y = normalize_axis(axis1, a.rank(), a.shape());
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[x], order[y]);
  return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), first);
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != ax && p.shape()[i] != first[i]) {
        throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(p.shape()) +
                         " differ off the concat axis");
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const AxisView ov = axis_view(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  std::vector<const Tensor*> ptrs;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisView pv = axis_view(p.shape(), ax);
    const auto& pd = p.data();
    for (std::size_t o = 0; o < pv.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * pv.n * pv.inner), pv.n * pv.inner,
                  out.begin() + static_cast<std::ptrdiff_t>(o * ov.n * ov.inner + offset * ov.inner));
    }
    offset += pv.n;
    ptrs.push_back(&p);
  }
  Dtype dtype = Dtype::f64;
  for (const auto& p : parts) {
    if (p.dtype() == Dtype::f32) dtype = Dtype::f32;
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), dtype);
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  maybe_record("concat", parts, result,
               [ov, ax, offsets = std::move(offsets), impls, oi = result.impl()] {
                 for (std::size_t p = 0; p < impls.size(); ++p) {
                   if (!impls[p]->requires_grad) continue;
                   auto& gp = grad_of(impls[p]);
                   const AxisView pv = axis_view(impls[p]->shape, ax);
                   for (std::size_t o = 0; o < pv.outer; ++o) {
                     const double* src = oi->grad.data() + o * ov.n * ov.inner + offsets[p] * ov.inner;
                     double* dst = gp.data() + o * pv.n * pv.inner;
                     for (std::size_t i = 0; i < pv.n * pv.inner; ++i) dst[i] += src[i];
                   }
                 }
               });
  return result;
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), a.shape());
  if (length == 0 || start + length > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  const AxisView v = axis_view(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  std::vector<double> out(v.outer * length * v.inner);
  const auto& ad = a.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(o * v.n * v.inner + start * v.inner),
                length * v.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * v.inner));
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), a.dtype());
  maybe_record("slice", {a}, result, [v, start, length, ai = a.impl(), oi = result.impl()] {
    auto& ga = grad_of(ai);
    for (std::size_t o = 0; o < v.outer; ++o) {
      const double* src = oi->grad.data() + o * length * v.inner;
      double* dst = ga.data() + o * v.n * v.inner + start * v.inner;
      for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
    }
  });
  return result;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index, const Shape& index_shape) {
  if (a.rank() < 1) throw ShapeError("gather_rows: input needs rank >= 1");
  if (shape_numel(index_shape) != index.size()) {
    throw ShapeError("gather_rows: index count does not match index shape " + shape_str(index_shape));
  }
  const std::size_t rows = a.shape()[0];
  const std::size_t row = a.numel() / rows;
  for (auto i : index) {
    if (i >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
  }
  Shape out_shape = index_shape;
  out_shape.insert(out_shape.end(), a.shape().begin() + 1, a.shape().end());
  std::vector<double> out(index.size() * row);
  const auto& ad = a.data();
  for (std::size_t p = 0; p < index.size(); ++p) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(index[p] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(p * row));
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), a.dtype());
  maybe_record("gather_rows", {a}, result,
               [row, idx = std::vector<std::size_t>(index.begin(), index.end()), ai = a.impl(),
                oi = result.impl()] {
                 auto& ga = grad_of(ai);
                 for (std::size_t p = 0; p < idx.size(); ++p) {
                   const double* src = oi->grad.data() + p * row;
                   double* dst = ga.data() + idx[p] * row;
                   for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                 }
               });
  return result;
}

Tensor cross(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() == 0 || a.dim(-1) != 3) {
    throw ShapeError("cross: needs equal shapes with last extent 3, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t p = 0; p < x.size(); p += 3) {
    out[p] = x[p + 1] * y[p + 2] - x[p + 2] * y[p + 1];
    out[p + 1] = x[p + 2] * y[p] - x[p] * y[p + 2];
    out[p + 2] = x[p] * y[p + 1] - x[p + 1] * y[p];
  }
  Tensor result = make_result(a.shape(), std::move(out), result_dtype({&a, &b}));
  maybe_record("cross", {a, b}, result, [ai = a.impl(), bi = b.impl(), oi = result.impl()] {
    const auto& g = oi->grad;
    const auto& x = ai->data;
    const auto& y = bi->data;
    // d(x × y) with upstream g: grad_x = y × g, grad_y = g × x.
    if (ai->requires_grad) {
      auto& gx = grad_of(ai);
      for (std::size_t p = 0; p < g.size(); p += 3) {
        gx[p] += y[p + 1] * g[p + 2] - y[p + 2] * g[p + 1];
        gx[p + 1] += y[p + 2] * g[p] - y[p] * g[p + 2];
        gx[p + 2] += y[p] * g[p + 1] - y[p + 1] * g[p];
      }
    }
    if (bi->requires_grad) {
      auto& gy = grad_of(bi);
      for (std::size_t p = 0; p < g.size(); p += 3) {
        gy[p] += g[p + 1] * x[p + 2] - g[p + 2] * x[p + 1];
        gy[p + 1] += g[p + 2] * x[p] - g[p] * x[p + 2];
        gy[p + 2] += g[p] * x[p + 1] - g[p + 1] * x[p];
      }
    }
  });
  return result;
}

Tensor select_max(const Tensor& values, const Tensor& scores, int axis) {
  if (values.rank() != scores.rank() + 1 ||
      !std::equal(scores.shape().begin(), scores.shape().end(), values.shape().begin())) {
    throw ShapeError("select_max: values " + shape_str(values.shape()) +
                     " must extend scores " + shape_str(scores.shape()) + " by one axis");
  }
  const std::size_t ax = normalize_axis(axis, scores.rank(), scores.shape());
  const AxisView v = axis_view(scores.shape(), ax);
  const std::size_t d = values.shape().back();
  Shape out_shape = values.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<std::size_t> src(v.outer * v.inner);
  const auto& sd = scores.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      std::size_t best = 0;
      for (std::size_t j = 1; j < v.n; ++j) {
        if (sd[base + j * v.inner] > sd[base + best * v.inner]) best = j;
      }
      src[o * v.inner + i] = base + best * v.inner;
    }
  }
  std::vector<double> out(src.size() * d);
  const auto& vd = values.data();
  for (std::size_t s = 0; s < src.size(); ++s) {
    std::copy_n(vd.begin() + static_cast<std::ptrdiff_t>(src[s] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(s * d));
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), values.dtype());
  maybe_record("select_max", {values}, result,
               [d, src = std::move(src), vi = values.impl(), oi = result.impl()] {
                 auto& gv = grad_of(vi);
                 for (std::size_t s = 0; s < src.size(); ++s) {
                   for (std::size_t c = 0; c < d; ++c) gv[src[s] * d + c] += oi->grad[s * d + c];
                 }
               });
  return result;
}

Tensor vn_relu(const Tensor& x, const Tensor& d, double eps) {
  if (x.shape() != d.shape() || x.rank() == 0 || x.dim(-1) != 3) {
    throw ShapeError("vn_relu: needs equal shapes with last extent 3, got " + shape_str(x.shape()) + " and " +
                     shape_str(d.shape()));
  }
  const auto& xv = x.data();
  const auto& dv = d.data();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t p = 0; p < xv.size(); p += 3) {
    const double s = xv[p] * dv[p] + xv[p + 1] * dv[p + 1] + xv[p + 2] * dv[p + 2];
    if (s >= 0.0) continue;
    const double c = s / (dv[p] * dv[p] + dv[p + 1] * dv[p + 1] + dv[p + 2] * dv[p + 2] + eps);
    for (std::size_t a = 0; a < 3; ++a) out[p + a] -= c * dv[p + a];
  }
  Tensor result = make_result(x.shape(), std::move(out), result_dtype({&x, &d}));
  maybe_record("vn_relu", {x, d}, result, [eps, xi = x.impl(), di = d.impl(), oi = result.impl()] {
    const auto& g = oi->grad;
    const auto& xv = xi->data;
    const auto& dv = di->data;
    std::vector<double>* gx = xi->requires_grad ? &grad_of(xi) : nullptr;
    std::vector<double>* gd = di->requires_grad ? &grad_of(di) : nullptr;
    for (std::size_t p = 0; p < g.size(); p += 3) {
      const double s = xv[p] * dv[p] + xv[p + 1] * dv[p + 1] + xv[p + 2] * dv[p + 2];
      if (s >= 0.0) {
        if (gx) {
          for (std::size_t a = 0; a < 3; ++a) (*gx)[p + a] += g[p + a];
        }
        continue;
      }
      // out = x - (s / q) d with q = |d|^2 + eps.
      const double q = dv[p] * dv[p] + dv[p + 1] * dv[p + 1] + dv[p + 2] * dv[p + 2] + eps;
      const double c = s / q;
      const double gdotd = g[p] * dv[p] + g[p + 1] * dv[p + 1] + g[p + 2] * dv[p + 2];
      for (std::size_t a = 0; a < 3; ++a) {
        if (gx) (*gx)[p + a] += g[p + a] - gdotd / q * dv[p + a];
        if (gd) (*gd)[p + a] += -c * g[p + a] - gdotd * (xv[p + a] / q - 2.0 * s * dv[p + a] / (q * q));
      }
    }
  });
  return result;
}

Tensor edge_vn_mean(const Tensor& per_neighbour, const Tensor& per_centre, std::span<const std::size_t> index,
                    std::size_t k, double eps) {
  if (per_neighbour.rank() != 3 || per_neighbour.shape() != per_centre.shape() || per_neighbour.dim(2) != 3 ||
      per_neighbour.dim(1) % 2 != 0) {
    throw ShapeError("edge_vn_mean: expected matching [N, 2C, 3] operands, got " + shape_str(per_neighbour.shape()) +
                     " and " + shape_str(per_centre.shape()));
  }
  const std::size_t n = per_neighbour.dim(0);
  const std::size_t c = per_neighbour.dim(1) / 2;
  if (k == 0 || index.size() != n * k) throw ShapeError("edge_vn_mean: index table does not match the points");
  for (auto j : index) {
    if (j >= n) throw ShapeError("edge_vn_mean: neighbour index " + std::to_string(j) + " out of range");
  }
  const std::size_t row = 2 * c * 3;
  const double inv_k = 1.0 / static_cast<double>(k);
  const double* A = per_neighbour.data().data();
  const double* B = per_centre.data().data();
  std::vector<double> out(n * c * 3, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* b = B + i * row;
    double* o = out.data() + i * c * 3;
    for (std::size_t t = 0; t < k; ++t) {
      const double* a = A + index[i * k + t] * row;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* ay = a + ch * 3;
        const double* ad = a + (c + ch) * 3;
        const double* by = b + ch * 3;
        const double* bd = b + (c + ch) * 3;
        const double y0 = ay[0] + by[0], y1 = ay[1] + by[1], y2 = ay[2] + by[2];
        const double d0 = ad[0] + bd[0], d1 = ad[1] + bd[1], d2 = ad[2] + bd[2];
        const double s = y0 * d0 + y1 * d1 + y2 * d2;
        double z0 = y0, z1 = y1, z2 = y2;
        if (s < 0.0) {
          const double cc = s / (d0 * d0 + d1 * d1 + d2 * d2 + eps);
          z0 -= cc * d0;
          z1 -= cc * d1;
          z2 -= cc * d2;
        }
        o[ch * 3] += z0 * inv_k;
        o[ch * 3 + 1] += z1 * inv_k;
        o[ch * 3 + 2] += z2 * inv_k;
      }
    }
  }
  Tensor result = make_result({n, c, 3}, std::move(out), result_dtype({&per_neighbour, &per_centre}));
  maybe_record("edge_vn_mean", {per_neighbour, per_centre}, result,
               [n, c, k, row, inv_k, eps, idx = std::vector<std::size_t>(index.begin(), index.end()),
                ai = per_neighbour.impl(), bi = per_centre.impl(), oi = result.impl()] {
                 const double* A = ai->data.data();
                 const double* B = bi->data.data();
                 double* GA = ai->requires_grad ? grad_of(ai).data() : nullptr;
                 double* GB = bi->requires_grad ? grad_of(bi).data() : nullptr;
                 for (std::size_t i = 0; i < n; ++i) {
                   const double* b = B + i * row;
                   const double* g = oi->grad.data() + i * c * 3;
                   for (std::size_t t = 0; t < k; ++t) {
                     const std::size_t j = idx[i * k + t];
                     const double* a = A + j * row;
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       double y[3], d[3], gy[3], gd[3] = {0, 0, 0};
                       for (int q = 0; q < 3; ++q) {
                         y[q] = a[ch * 3 + q] + b[ch * 3 + q];
                         d[q] = a[(c + ch) * 3 + q] + b[(c + ch) * 3 + q];
                         gy[q] = g[ch * 3 + q] * inv_k;
                       }
                       const double s = y[0] * d[0] + y[1] * d[1] + y[2] * d[2];
                       if (s < 0.0) {
                         const double qn = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps;
                         const double cc = s / qn;
                         const double gdotd = gy[0] * d[0] + gy[1] * d[1] + gy[2] * d[2];
                         double gz[3] = {gy[0], gy[1], gy[2]};
                         for (int q = 0; q < 3; ++q) {
                           gy[q] = gz[q] - gdotd / qn * d[q];
                           gd[q] = -cc * gz[q] - gdotd * (y[q] / qn - 2.0 * s * d[q] / (qn * qn));
                         }
                       }
                       for (int q = 0; q < 3; ++q) {
                         if (GA) {
                           GA[j * row + ch * 3 + q] += gy[q];
                           GA[j * row + (c + ch) * 3 + q] += gd[q];
                         }
                         if (GB) {
                           GB[i * row + ch * 3 + q] += gy[q];
                           GB[i * row + (c + ch) * 3 + q] += gd[q];
                         }
                       }
                     }
                   }
                 }
               });
  return result;
}

}  // namespace choir::ops
