#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "choir/pointcloud.hpp"
#include "choir/tensor.hpp"

namespace choir {

inline constexpr std::size_t kDefaultK = 20;

// Row i holds the k nearest neighbours of point i (itself excluded), sorted by
// increasing distance with ties going to the lower index.
struct KnnGraph {
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // N * k, row-major
  Dtype precision = Dtype::f64;
  bool frozen = false;

  std::size_t num_points() const { return k == 0 ? 0 : indices.size() / k; }
  std::size_t num_edges() const { return indices.size(); }
  std::span<const std::size_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }

  // The first k2 neighbours of every row (k2 <= k).
  KnnGraph truncated(std::size_t k2) const;
};

// Squared distances use the difference form; in f32 mode coordinates and all
// arithmetic are single precision.
KnnGraph knn(std::span<const Vec3> points, std::size_t k, Dtype precision = Dtype::f64);
KnnGraph knn(const PointCloud& pc, std::size_t k = kDefaultK, Dtype precision = Dtype::f64);
KnnGraph knn(const Tensor& points, std::size_t k, Dtype precision = Dtype::f64);

KnnGraph freeze(KnnGraph g);

// Directional edge mismatch: |row_i(a) \ row_i(b)| summed over rows.
std::size_t count_edge_mismatches(const KnnGraph& a, const KnnGraph& b);

struct AuditResult {
  std::size_t edges = 0;
  std::vector<std::size_t> mismatches;  // one entry per trial
  double mean_mismatches = 0.0;
};

// Compares knn(pc) with knn(pc * R) for `trials` Haar rotations R. The rotated
// cloud is produced at the audited precision. With frozen = true the
// reference graph is reused for every rotation.
AuditResult knn_rotation_audit(const PointCloud& pc, std::size_t k, Dtype precision, std::size_t trials,
                               std::mt19937_64& rng, bool frozen = false);

}  // namespace choir
