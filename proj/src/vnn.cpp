#include "choir/vnn.hpp"

#include <algorithm>
#include <cmath>

#include "choir/error.hpp"
#include "choir/ops.hpp"

namespace choir::vnn {

namespace {

void require_vector_feature(const Tensor& x, const char* who) {
  if (x.rank() < 2 || x.dim(-1) != 3) {
    throw ShapeError(std::string(who) + ": expected [..., C, 3] features, got " + shape_str(x.shape()));
  }
}

void require_graph(const Tensor& x, const KnnGraph& graph, const char* who) {
  if (x.rank() != 3 || x.dim(-1) != 3) {
    throw ShapeError(std::string(who) + ": expected [N, C, 3] features, got " + shape_str(x.shape()));
  }
  if (graph.num_points() != x.dim(0)) {
    throw ShapeError(std::string(who) + ": graph has " + std::to_string(graph.num_points()) +
                     " points but features have " + std::to_string(x.dim(0)));
  }
}

Tensor aggregate(const Tensor& edges, const Tensor& directions, Aggregation agg) {
  if (agg == Aggregation::mean) return ops::mean(edges, 1);
  const Tensor scores = ops::sum(edges * directions, -1);
  return ops::select_max(edges, scores, 1);
}

}  // namespace

Tensor init_weight(std::size_t c_out, std::size_t c_in, std::mt19937_64& rng, bool requires_grad) {
  const double bound = std::sqrt(3.0 / static_cast<double>(c_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(c_out * c_in);
  for (auto& v : w) v = u(rng);
  return Tensor({c_out, c_in}, std::move(w), requires_grad);
}

Tensor vn_linear(const Tensor& x, const Tensor& weight) {
  require_vector_feature(x, "vn_linear");
  if (weight.rank() != 2 || weight.dim(1) != x.dim(-2)) {
    throw ShapeError("vn_linear: weight " + shape_str(weight.shape()) + " does not match features " +
                     shape_str(x.shape()));
  }
  return ops::matmul(weight, x);
}

Tensor vn_nonlinearity(const Tensor& x, const Tensor& direction_weight, double eps) {
  return ops::vn_relu(x, vn_linear(x, direction_weight), eps);
}

Tensor vn_mean_pool(const Tensor& x) {
  require_vector_feature(x, "vn_mean_pool");
  return ops::mean(x, 0, true);
}

Tensor edge_features(const Tensor& x, const KnnGraph& graph) {
  require_graph(x, graph, "edge_features");
  const std::size_t n = x.dim(0), k = graph.k;
  std::vector<std::size_t> self(n * k);
  for (std::size_t i = 0; i < n * k; ++i) self[i] = i / k;
  const Tensor neighbours = ops::gather_rows(x, graph.indices, {n, k});  // [N, k, C, 3]
  const Tensor centre = ops::gather_rows(x, self, {n, k});
  return ops::concat({neighbours - centre, centre}, 2);
}

Tensor invariant_product(const Tensor& a, const Tensor& b) {
  require_vector_feature(a, "invariant_product");
  require_vector_feature(b, "invariant_product");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("invariant_product: point counts differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Tensor gram = ops::matmul(a, ops::transpose(b));  // [N, C, C']
  return ops::reshape(gram, {a.dim(0), a.dim(1) * b.dim(1)});
}

EdgeConvBlock EdgeConvBlock::init(std::size_t c_in, std::size_t c_out, std::mt19937_64& rng) {
  return {init_weight(c_out, 2 * c_in, rng), init_weight(c_out, 2 * c_in, rng)};
}

Tensor EdgeConvBlock::forward(const Tensor& x, const KnnGraph& graph, Aggregation agg) const {
  require_graph(x, graph, "EdgeConvBlock");
  const std::size_t n = x.dim(0), c_in = in_channels(), c_out = out_channels(), k = graph.k;
  if (x.dim(1) != c_in) {
    throw ShapeError("EdgeConvBlock: expected " + std::to_string(c_in) + " channels, got " + shape_str(x.shape()));
  }
  // W (x_j - x_i) + W' x_i = W x_j + (W' - W) x_i, likewise for the direction map.
  const Tensor stacked = ops::concat({weight, direction}, 0);  // [2 C_out, 2 C_in]
  const Tensor on_neighbour = ops::slice(stacked, 1, 0, c_in);
  const Tensor on_centre = ops::slice(stacked, 1, c_in, c_in) - on_neighbour;
  const Tensor per_neighbour = ops::matmul(on_neighbour, x);  // [N, 2 C_out, 3]
  if (agg == Aggregation::mean) {
    return ops::edge_vn_mean(per_neighbour, ops::matmul(on_centre, x), graph.indices, k, kNonlinearityEpsilon);
  }
  const Tensor per_centre = ops::reshape(ops::matmul(on_centre, x), {n, 1, 2 * c_out, 3});
  const Tensor edges = ops::gather_rows(per_neighbour, graph.indices, {n, k}) + per_centre;
  const Tensor y = ops::slice(edges, 2, 0, c_out);
  const Tensor d = ops::slice(edges, 2, c_out, c_out);
  const Tensor z = ops::vn_relu(y, d, kNonlinearityEpsilon);
  return aggregate(z, d, agg);
}

Tensor EdgeConvBlock::forward_explicit(const Tensor& x, const KnnGraph& graph, Aggregation agg) const {
  const Tensor e = edge_features(x, graph);
  const Tensor y = vn_linear(e, weight);
  const Tensor d = vn_linear(e, direction);
  return aggregate(ops::vn_relu(y, d, kNonlinearityEpsilon), d, agg);
}

void EdgeConvBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".linear.weight", weight});
  out.push_back({prefix + ".direction.weight", direction});
}

LinearBlock LinearBlock::init(std::size_t c_in, std::size_t c_out, std::mt19937_64& rng) {
  return {init_weight(c_out, c_in, rng), init_weight(c_out, c_out, rng)};
}

Tensor LinearBlock::forward(const Tensor& x) const { return vn_nonlinearity(vn_linear(x, weight), direction); }

void LinearBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".linear.weight", weight});
  out.push_back({prefix + ".direction.weight", direction});
}

void assign(Tensor& target, const std::vector<NamedTensor>& entries, const std::string& name) {
  const Tensor& source = find_entry(entries, name);
  if (source.shape() != target.shape()) {
    throw DataError("checkpoint entry " + name + " has shape " + shape_str(source.shape()) + ", expected " +
                    shape_str(target.shape()));
  }
  std::copy(source.data().begin(), source.data().end(), target.mutable_data().begin());
}

}  // namespace choir::vnn
