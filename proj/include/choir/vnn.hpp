#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "choir/checkpoint.hpp"
#include "choir/knn.hpp"
#include "choir/tensor.hpp"

// Vector-neuron layers. Features are [..., C, 3]: C channels of 3-vectors,
// with rotations acting on the last axis from the right. Weights only mix
// channels, which makes every layer here equivariant.
namespace choir::vnn {

inline constexpr double kNonlinearityEpsilon = 1e-8;

enum class Aggregation { mean, max };

// Uniform in +-sqrt(3 / c_in), giving unit-variance channel mixing.
Tensor init_weight(std::size_t c_out, std::size_t c_in, std::mt19937_64& rng, bool requires_grad = true);

// out[..., c, :] = sum_j weight[c, j] * x[..., j, :]. weight is [C_out, C_in].
Tensor vn_linear(const Tensor& x, const Tensor& weight);

// d = vn_linear(x, direction_weight); each channel keeps its vector when
// <v, d> >= 0 and otherwise drops its component along d.
Tensor vn_nonlinearity(const Tensor& x, const Tensor& direction_weight, double eps = kNonlinearityEpsilon);

// [N, C, 3] -> [1, C, 3].
Tensor vn_mean_pool(const Tensor& x);

// [N, C, 3] -> [N, k, 2C, 3] with channels (x_j - x_i, x_i) for neighbour j of i.
Tensor edge_features(const Tensor& x, const KnnGraph& graph);

// Per point a_i b_i^T flattened: [N, C, 3] x [N, C', 3] -> [N, C * C'].
Tensor invariant_product(const Tensor& a, const Tensor& b);

// Edge convolution: a VN-linear map and a VN nonlinearity applied to every
// edge feature, then aggregated over neighbours.
struct EdgeConvBlock {
  Tensor weight;     // [C_out, 2 C_in]
  Tensor direction;  // [C_out, 2 C_in]

  static EdgeConvBlock init(std::size_t c_in, std::size_t c_out, std::mt19937_64& rng);

  std::size_t in_channels() const { return weight.dim(1) / 2; }
  std::size_t out_channels() const { return weight.dim(0); }

  // Splits the weights so the per-edge maps become per-point maps followed by
  // a gather; equal to forward_explicit up to rounding.
  Tensor forward(const Tensor& x, const KnnGraph& graph, Aggregation agg = Aggregation::mean) const;
  Tensor forward_explicit(const Tensor& x, const KnnGraph& graph, Aggregation agg = Aggregation::mean) const;

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// A VN-linear map followed by a VN nonlinearity with its own direction map.
struct LinearBlock {
  Tensor weight;     // [C_out, C_in]
  Tensor direction;  // [C_out, C_out]

  static LinearBlock init(std::size_t c_in, std::size_t c_out, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// Reads a parameter written by collect() back into `target`, checking shape.
void assign(Tensor& target, const std::vector<NamedTensor>& entries, const std::string& name);

}  // namespace choir::vnn
