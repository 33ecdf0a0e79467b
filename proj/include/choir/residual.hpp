#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "choir/checkpoint.hpp"
#include "choir/hypothesizer.hpp"
#include "choir/knn.hpp"
#include "choir/pointcloud.hpp"
#include "choir/so3.hpp"
#include "choir/tensor.hpp"

namespace choir {

struct ResidualConfig {
  std::size_t hidden = 64;
  std::size_t blocks = 2;
  std::size_t k = 16;
  std::size_t position_hidden = 16;
};

// Local attention over kNN neighbourhoods with subtraction-based relative
// position encoding.
struct AttentionBlock {
  Tensor query, key, value, output;  // [H, H]
  Tensor pos1, pos1_bias;            // [3, P], [P]
  Tensor pos2, pos2_bias;            // [P, H], [H]
};

// g: invariant inputs (canonical coordinates, invariant scalars) -> rotation.
struct ResidualModel {
  ResidualConfig config;
  std::size_t feature_channels = 0;  // width of the invariant scalars
  Tensor embed, embed_bias;          // [3 + F, H], [H]
  std::vector<AttentionBlock> blocks;
  Tensor head1, head1_bias;          // [H, H], [H]
  Tensor head2, head2_bias;          // [H, 6], [6]

  // The output head starts near the identity frame so that f = h at first.
  static ResidualModel init(const ResidualConfig& config, std::size_t feature_channels, std::mt19937_64& rng);

  std::vector<NamedTensor> parameters(const std::string& prefix = "residual") const;
  void load(const std::vector<NamedTensor>& entries, const std::string& prefix = "residual");
  ResidualModel clone() const;
};

// points * hyp^T, both as tensors ([N, 3] and [3, 3]).
Tensor canonicalize_hypothetically(const Tensor& points, const Tensor& hypothesis);
PointCloud canonicalize_hypothetically(const PointCloud& pc, const Rotation& hypothesis);

// canonical: [N, 3]; invariant_features: [N, F]; graph over the canonical
// points with at least config.k neighbours. Returns a [3, 3] rotation tensor.
Tensor predict_residual(const Tensor& canonical, const Tensor& invariant_features, const KnnGraph& graph,
                        const ResidualModel& m, bool strict = false);

struct PredictorConfig {
  HypothesizerConfig hypothesizer;
  ResidualConfig residual;
  bool use_residual = true;
  KnnMode knn_mode = KnnMode::adaptive;
  Dtype precision = Dtype::f64;  // arithmetic used for kNN graphs
  std::uint32_t corpus_version = kCloudVersion;
};

struct Prediction {
  Tensor orientation;  // f = g h, [3, 3]
  Tensor hypothesis;   // h
  Tensor residual;     // g (identity when the residual is disabled)
};

// f(P) = g(P h^T, phi (V)^T) h. In frozen mode the encoder graph is the one
// handed in (or computed once from the received points) and the residual
// reuses its first residual.k columns.
class CharacteristicOrientationPredictor {
 public:
  CharacteristicOrientationPredictor() = default;
  CharacteristicOrientationPredictor(const PredictorConfig& config, std::mt19937_64& rng);

  const PredictorConfig& config() const { return config_; }
  PredictorConfig& mutable_config() { return config_; }
  const HypothesizerModel& hypothesizer() const { return hypothesizer_; }
  const ResidualModel& residual() const { return residual_; }

  // points: [N, 3]. frozen_graph is consulted only in frozen mode.
  Prediction forward(const Tensor& points, const KnnGraph* frozen_graph = nullptr, bool strict = false) const;

  Rotation predict(const PointCloud& pc, const KnnGraph* frozen_graph = nullptr) const;
  // pc * f(pc)^T.
  PointCloud canonicalize(const PointCloud& pc, const KnnGraph* frozen_graph = nullptr) const;

  // Graph the encoder uses for `pc` in the configured mode and precision.
  KnnGraph encoder_graph(const PointCloud& pc) const;

  std::vector<NamedTensor> parameters() const;
  CharacteristicOrientationPredictor clone() const;

  // Checkpoint entries: "config.*" scalars, then "hypothesizer.*" and
  // "residual.*" parameters.
  std::vector<NamedTensor> to_entries() const;
  static CharacteristicOrientationPredictor from_entries(const std::vector<NamedTensor>& entries);
  void save(const std::filesystem::path& path) const;
  static CharacteristicOrientationPredictor load(const std::filesystem::path& path);

 private:
  PredictorConfig config_;
  HypothesizerModel hypothesizer_;
  ResidualModel residual_;
};

}  // namespace choir
