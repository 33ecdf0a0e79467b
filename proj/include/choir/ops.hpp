#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "choir/tensor.hpp"

// Differentiable primitives. Binary elementwise ops broadcast with the usual
// trailing-axis alignment rules; negative axes count from the end.
namespace choir::ops {

enum class Elementwise { add, sub, mul, div, neg, relu, scale };
enum class Reduction { sum, mean, max };

// Batched matrix product over the last two axes; batch axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// `scalar` is used only by Elementwise::scale; `b` is ignored by unary kinds.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr,
                   double scalar = 1.0);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor clamp_min(const Tensor& a, double lo);
Tensor sqrt(const Tensor& a);

// max routes the subgradient to the first maximal element along the axis.
Tensor reduce(Reduction kind, const Tensor& a, int axis, bool keepdim = false);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor max(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, int axis0 = -2, int axis1 = -1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);

// Rows of `a` (axis 0) picked by `index`; result shape is index_shape followed
// by a.shape[1:].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index,
                   const Shape& index_shape);

// Cross product along a last axis of extent 3.
Tensor cross(const Tensor& a, const Tensor& b);

// values has shape scores.shape + [D]. Along `axis` of scores, picks the
// vector whose score is largest (lowest index on ties). Scores are treated
// as constants by the backward pass.
Tensor select_max(const Tensor& values, const Tensor& scores, int axis);

// Vector-neuron rectifier over 3-vectors on the last axis: keeps x where
// <x, d> >= 0, otherwise removes its component along d, x - <x,d>/(|d|^2+eps) d.
Tensor vn_relu(const Tensor& x, const Tensor& d, double eps = 1e-8);

// Fused edge aggregation. per_neighbour and per_centre are [N, 2C, 3]; for
// edge (i, j = index[i * k + t]) the edge value is per_neighbour[j] +
// per_centre[i], split into C feature channels and C direction channels.
// Returns the mean over the k edges of vn_relu(feature, direction), [N, C, 3].
Tensor edge_vn_mean(const Tensor& per_neighbour, const Tensor& per_centre, std::span<const std::size_t> index,
                    std::size_t k, double eps = 1e-8);

}  // namespace choir::ops

namespace choir {

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return ops::div(a, b); }
inline Tensor operator-(const Tensor& a) { return ops::neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return ops::scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return ops::scale(a, s); }

}  // namespace choir
