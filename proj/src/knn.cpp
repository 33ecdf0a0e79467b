#include "choir/knn.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace choir {

namespace {

template <typename Real>
KnnGraph brute_force(std::span<const Vec3> points, std::size_t k, Dtype precision) {
  const std::size_t n = points.size();
  if (k == 0) throw std::invalid_argument("knn: k must be positive");
  if (n <= k) {
    throw std::invalid_argument("knn: need more than k = " + std::to_string(k) + " points, got " +
                                std::to_string(n));
  }
  std::vector<Real> xyz(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) xyz[3 * i + a] = static_cast<Real>(points[i][a]);
  }
  KnnGraph g;
  g.k = k;
  g.precision = precision;
  g.indices.resize(n * k);
  std::vector<std::pair<Real, std::size_t>> cand(n - 1);
  const auto closer = [](const auto& l, const auto& r) {
    return l.first < r.first || (l.first == r.first && l.second < r.second);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const Real xi = xyz[3 * i], yi = xyz[3 * i + 1], zi = xyz[3 * i + 2];
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Real dx = xyz[3 * j] - xi;
      const Real dy = xyz[3 * j + 1] - yi;
      const Real dz = xyz[3 * j + 2] - zi;
      const Real d = dx * dx + dy * dy + dz * dz;
      cand[c++] = {d, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), closer);
    for (std::size_t t = 0; t < k; ++t) g.indices[i * k + t] = cand[t].second;
  }
  return g;
}

}  // namespace

KnnGraph KnnGraph::truncated(std::size_t k2) const {
  if (k2 == 0 || k2 > k) {
    throw std::invalid_argument("KnnGraph::truncated: " + std::to_string(k2) + " not in [1, " +
                                std::to_string(k) + "]");
  }
  KnnGraph out;
  out.k = k2;
  out.precision = precision;
  out.frozen = frozen;
  const std::size_t n = num_points();
  out.indices.reserve(n * k2);
  for (std::size_t i = 0; i < n; ++i) {
    out.indices.insert(out.indices.end(), indices.begin() + static_cast<std::ptrdiff_t>(i * k),
                       indices.begin() + static_cast<std::ptrdiff_t>(i * k + k2));
  }
  return out;
}

KnnGraph knn(std::span<const Vec3> points, std::size_t k, Dtype precision) {
  return precision == Dtype::f32 ? brute_force<float>(points, k, precision)
                                 : brute_force<double>(points, k, precision);
}

KnnGraph knn(const PointCloud& pc, std::size_t k, Dtype precision) { return knn(std::span(pc.points), k, precision); }

KnnGraph knn(const Tensor& points, std::size_t k, Dtype precision) {
  return knn(from_tensor(points), k, precision);
}

KnnGraph freeze(KnnGraph g) {
  g.frozen = true;
  return g;
}

std::size_t count_edge_mismatches(const KnnGraph& a, const KnnGraph& b) {
  if (a.k != b.k || a.num_points() != b.num_points()) {
    throw std::invalid_argument("count_edge_mismatches: graphs differ in shape");
  }
  std::size_t missing = 0;
  std::vector<std::size_t> ra(a.k), rb(b.k);
  for (std::size_t i = 0; i < a.num_points(); ++i) {
    auto x = a.row(i);
    auto y = b.row(i);
    ra.assign(x.begin(), x.end());
    rb.assign(y.begin(), y.end());
    std::sort(ra.begin(), ra.end());
    std::sort(rb.begin(), rb.end());
    std::vector<std::size_t> diff;
    std::set_difference(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(diff));
    missing += diff.size();
  }
  return missing;
}

AuditResult knn_rotation_audit(const PointCloud& pc, std::size_t k, Dtype precision, std::size_t trials,
                               std::mt19937_64& rng, bool frozen) {
  AuditResult result;
  const KnnGraph reference = knn(pc, k, precision);
  result.edges = reference.num_edges();
  double total = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Rotation r = so3::sample_uniform(rng);
    std::size_t m = 0;
    if (!frozen) {
      const PointCloud rotated = apply_rotation(pc, r, precision);
      m = count_edge_mismatches(reference, knn(rotated, k, precision));
    }
    result.mismatches.push_back(m);
    total += static_cast<double>(m);
  }
  result.mean_mismatches = trials == 0 ? 0.0 : total / static_cast<double>(trials);
  return result;
}

}  // namespace choir
