#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "choir/gradcheck.hpp"
#include "choir/knn.hpp"
#include "choir/ops.hpp"
#include "choir/so3.hpp"
#include "choir/vnn.hpp"
#include "support.hpp"

using namespace choir;
using choir::testing::random_tensor;

namespace {

Tensor rotate(const Tensor& x, const Rotation& r) { return ops::matmul(x, so3::to_tensor(r)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

Tensor random_points(std::size_t n, std::mt19937_64& rng) { return random_tensor({n, 3}, rng); }

void check_grad(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double tol = 1e-5,
                std::size_t coords = 0) {
  std::mt19937_64 rng(3);
  GradcheckOptions opts;
  opts.step = 1e-6;
  opts.coords_per_tensor = coords;
  auto r = gradcheck(f, std::move(wrt), opts, rng);
  CHECK(r.checked > 0);
  CHECK(r.max_relative_error < tol);
}

// A fixed cotangent so gradients of vector outputs are checked in full.
Tensor probe(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum_all(ops::mul(out, random_tensor(out.shape(), rng)));
}

}  // namespace

TEST_CASE("vn_relu examples") {
  const Tensor v({1, 1, 3}, {0.3, -1.2, 2.0});
  SUBCASE("direction equal to the vector leaves it unchanged") {
    CHECK(max_abs_diff(ops::vn_relu(v, v), v) < 1e-15);
  }
  SUBCASE("opposite direction removes the vector") {
    CHECK(max_abs(ops::vn_relu(v, ops::neg(v))) < 1e-8);
  }
  SUBCASE("orthogonal component survives") {
    const Tensor x({1, 1, 3}, {1.0, 1.0, 0.0});
    const Tensor d({1, 1, 3}, {-1.0, 0.0, 0.0});
    const Tensor out = ops::vn_relu(x, d);
    CHECK(std::abs(out.data()[0]) < 1e-7);
    CHECK(out.data()[1] == doctest::Approx(1.0));
    CHECK(out.data()[2] == doctest::Approx(0.0));
  }
  SUBCASE("zero direction passes through") {
    const Tensor d = Tensor::zeros({1, 1, 3});
    CHECK(max_abs_diff(ops::vn_relu(v, d), v) < 1e-15);
  }
}

TEST_CASE("vn layers are rotation equivariant") {
  std::mt19937_64 rng(21);
  const std::size_t n = 40;
  for (int trial = 0; trial < 100; ++trial) {
    const Rotation r = so3::sample_uniform(rng);
    const Tensor x = random_tensor({n, 5, 3}, rng);
    const Tensor w = vnn::init_weight(7, 5, rng);
    const Tensor u = vnn::init_weight(5, 5, rng);
    CHECK(max_abs_diff(vnn::vn_linear(rotate(x, r), w), rotate(vnn::vn_linear(x, w), r)) < 1e-9);
    CHECK(max_abs_diff(vnn::vn_nonlinearity(rotate(x, r), u), rotate(vnn::vn_nonlinearity(x, u), r)) < 1e-9);
    CHECK(max_abs_diff(vnn::vn_mean_pool(rotate(x, r)), rotate(vnn::vn_mean_pool(x), r)) < 1e-9);
  }
}

TEST_CASE("edge conv is equivariant under a shared graph") {
  std::mt19937_64 rng(22);
  const std::size_t n = 60;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor p = random_points(n, rng);
    const KnnGraph graph = knn(p, 8);
    const Rotation r = so3::sample_uniform(rng);
    const Tensor x = ops::reshape(p, {n, 1, 3});
    const auto block = vnn::EdgeConvBlock::init(1, 6, rng);
    for (auto agg : {vnn::Aggregation::mean, vnn::Aggregation::max}) {
      const Tensor a = block.forward(rotate(x, r), graph, agg);
      const Tensor b = rotate(block.forward(x, graph, agg), r);
      CHECK(max_abs_diff(a, b) < 1e-9);
    }
  }
}

TEST_CASE("fused edge conv matches the explicit form") {
  std::mt19937_64 rng(23);
  const Tensor p = random_points(80, rng);
  const KnnGraph graph = knn(p, 10);
  const Tensor x = random_tensor({80, 4, 3}, rng);
  const auto block = vnn::EdgeConvBlock::init(4, 9, rng);
  for (auto agg : {vnn::Aggregation::mean, vnn::Aggregation::max}) {
    CHECK(max_abs_diff(block.forward(x, graph, agg), block.forward_explicit(x, graph, agg)) < 1e-12);
  }
}

TEST_CASE("edge features") {
  const Tensor p({4, 3}, {0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3});
  const KnnGraph graph = knn(p, 1);
  const Tensor e = vnn::edge_features(ops::reshape(p, {4, 1, 3}), graph);
  REQUIRE(e.shape() == Shape{4, 1, 2, 3});
  // Point 1's nearest neighbour is the origin.
  CHECK(e.at({1, 0, 0, 0}) == -1.0);
  CHECK(e.at({1, 0, 1, 0}) == 1.0);
  CHECK(e.at({1, 0, 0, 1}) == 0.0);
}

TEST_CASE("edge conv commutes with point permutations") {
  std::mt19937_64 rng(24);
  const std::size_t n = 50, k = 6;
  const Tensor p = random_points(n, rng);
  const KnnGraph graph = knn(p, k);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> inverse(n);
  for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;

  const Tensor q = ops::gather_rows(p, perm, {n});
  KnnGraph permuted = graph;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) permuted.indices[i * k + t] = inverse[graph.indices[perm[i] * k + t]];
  }
  const auto block = vnn::EdgeConvBlock::init(1, 5, rng);
  const Tensor a = block.forward(ops::reshape(q, {n, 1, 3}), permuted);
  const Tensor b = ops::gather_rows(block.forward(ops::reshape(p, {n, 1, 3}), graph), perm, {n});
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("invariant_product") {
  std::mt19937_64 rng(25);
  SUBCASE("hand example") {
    const Tensor a({1, 2, 3}, {1, 0, 0, 0, 2, 0});
    const Tensor b({1, 1, 3}, {3, 4, 5});
    const Tensor out = vnn::invariant_product(a, b);
    REQUIRE(out.shape() == Shape{1, 2});
    CHECK(out.data()[0] == 3.0);
    CHECK(out.data()[1] == 8.0);
  }
  SUBCASE("rotation invariant") {
    for (int trial = 0; trial < 100; ++trial) {
      const Rotation r = so3::sample_uniform(rng);
      const Tensor a = random_tensor({20, 6, 3}, rng);
      const Tensor b = random_tensor({20, 3, 3}, rng);
      const Tensor lhs = vnn::invariant_product(rotate(a, r), rotate(b, r));
      CHECK(max_abs_diff(lhs, vnn::invariant_product(a, b)) < 1e-9);
    }
  }
}

TEST_CASE("gradients") {
  std::mt19937_64 rng(26);
  SUBCASE("vn_relu") {
    Tensor x = random_tensor({6, 4, 3}, rng, true);
    Tensor d = random_tensor({6, 4, 3}, rng, true);
    check_grad([&] { return probe(ops::vn_relu(x, d), 1); }, {x, d});
  }
  SUBCASE("edge_vn_mean") {
    const Tensor p = random_points(12, rng);
    const KnnGraph graph = knn(p, 4);
    Tensor a = random_tensor({12, 6, 3}, rng, true);
    Tensor b = random_tensor({12, 6, 3}, rng, true);
    check_grad([&] { return probe(ops::edge_vn_mean(a, b, graph.indices, graph.k), 2); }, {a, b});
  }
  SUBCASE("edge conv weights and input") {
    const Tensor p = random_points(16, rng);
    const KnnGraph graph = knn(p, 5);
    auto block = vnn::EdgeConvBlock::init(2, 4, rng);
    Tensor x = random_tensor({16, 2, 3}, rng, true);
    for (auto agg : {vnn::Aggregation::mean, vnn::Aggregation::max}) {
      check_grad([&] { return probe(block.forward(x, graph, agg), 3); }, {x, block.weight, block.direction});
    }
  }
  SUBCASE("linear block") {
    auto block = vnn::LinearBlock::init(5, 3, rng);
    Tensor x = random_tensor({7, 5, 3}, rng, true);
    check_grad([&] { return probe(block.forward(x), 4); }, {x, block.weight, block.direction});
  }
}

TEST_CASE("collect and assign") {
  std::mt19937_64 rng(27);
  const auto block = vnn::EdgeConvBlock::init(3, 4, rng);
  std::vector<NamedTensor> entries;
  block.collect("enc.block0", entries);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "enc.block0.linear.weight");
  CHECK(entries[1].name == "enc.block0.direction.weight");

  auto other = vnn::EdgeConvBlock::init(3, 4, rng);
  vnn::assign(other.weight, entries, "enc.block0.linear.weight");
  CHECK(max_abs_diff(other.weight, block.weight) == 0.0);

  Tensor wrong = Tensor::zeros({2, 2});
  CHECK_THROWS(vnn::assign(wrong, entries, "enc.block0.linear.weight"));
  CHECK_THROWS(vnn::assign(wrong, entries, "missing"));
}
