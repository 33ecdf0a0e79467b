#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "choir/checkpoint.hpp"
#include "choir/knn.hpp"
#include "choir/tensor.hpp"
#include "choir/vnn.hpp"

namespace choir {

enum class KnnMode { adaptive, frozen };

std::string knn_mode_name(KnnMode mode);
KnnMode parse_knn_mode(const std::string& text);

struct HypothesizerConfig {
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t channels = 64;
  std::size_t k = kDefaultK;
  vnn::Aggregation aggregation = vnn::Aggregation::mean;
};

// h = psi(phi(P)): edge-conv encoder, mean pool, VN-linear to two vectors and
// Gram-Schmidt. The auxiliary branch yields the [N, 3, 3] feature V.
struct HypothesizerModel {
  HypothesizerConfig config;
  std::vector<vnn::EdgeConvBlock> blocks;
  vnn::LinearBlock fuse;       // concat(block outputs) -> channels
  Tensor head;                 // [2, channels]
  vnn::LinearBlock auxiliary;  // channels -> 3

  static HypothesizerModel init(const HypothesizerConfig& config, std::mt19937_64& rng);

  std::vector<NamedTensor> parameters(const std::string& prefix = "hypothesizer") const;
  void load(const std::vector<NamedTensor>& entries, const std::string& prefix = "hypothesizer");
  HypothesizerModel clone() const;
};

// points: [N, 3]; graph built on these points (or frozen). Returns [N, C, 3].
Tensor encode(const Tensor& points, const KnnGraph& graph, const HypothesizerModel& m);

// [3, 3] rotation tensor whose rows are the frame vectors. With strict, a
// degenerate frame throws NumericalError instead of being eps-regularized.
Tensor predict_hypothesis(const Tensor& features, const HypothesizerModel& m, bool strict = false);

// [N, 3, 3].
Tensor auxiliary_feature(const Tensor& features, const HypothesizerModel& m);

struct Hypothesis {
  Tensor rotation;  // [3, 3]
  Tensor features;  // phi, [N, C, 3]
  Tensor auxiliary; // V, [N, 3, 3]
};

Hypothesis hypothesize(const Tensor& points, const KnnGraph& graph, const HypothesizerModel& m,
                       bool strict = false);

}  // namespace choir
