#include "choir/hypothesizer.hpp"

#include <numeric>

#include "choir/error.hpp"
#include "choir/ops.hpp"
#include "choir/so3.hpp"

namespace choir {

std::string knn_mode_name(KnnMode mode) { return mode == KnnMode::frozen ? "frozen" : "adaptive"; }

KnnMode parse_knn_mode(const std::string& text) {
  if (text == "adaptive") return KnnMode::adaptive;
  if (text == "frozen") return KnnMode::frozen;
  throw std::invalid_argument("unknown knn mode \"" + text + "\" (expected adaptive or frozen)");
}

HypothesizerModel HypothesizerModel::init(const HypothesizerConfig& config, std::mt19937_64& rng) {
  if (config.widths.empty()) throw std::invalid_argument("hypothesizer needs at least one encoder block");
  HypothesizerModel m;
  m.config = config;
  std::size_t c_in = 1;
  for (std::size_t w : config.widths) {
    m.blocks.push_back(vnn::EdgeConvBlock::init(c_in, w, rng));
    c_in = w;
  }
  const std::size_t total = std::accumulate(config.widths.begin(), config.widths.end(), std::size_t{0});
  m.fuse = vnn::LinearBlock::init(total, config.channels, rng);
  m.head = vnn::init_weight(2, config.channels, rng);
  m.auxiliary = vnn::LinearBlock::init(config.channels, 3, rng);
  return m;
}

std::vector<NamedTensor> HypothesizerModel::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect(prefix + ".encoder.block" + std::to_string(b), out);
  }
  fuse.collect(prefix + ".encoder.fuse", out);
  out.push_back({prefix + ".head.weight", head});
  auxiliary.collect(prefix + ".auxiliary", out);
  return out;
}

void HypothesizerModel::load(const std::vector<NamedTensor>& entries, const std::string& prefix) {
  for (auto& p : parameters(prefix)) vnn::assign(p.value, entries, p.name);
}

HypothesizerModel HypothesizerModel::clone() const {
  HypothesizerModel m = *this;
  for (auto& b : m.blocks) {
    b.weight = b.weight.clone();
    b.direction = b.direction.clone();
  }
  m.fuse.weight = fuse.weight.clone();
  m.fuse.direction = fuse.direction.clone();
  m.head = head.clone();
  m.auxiliary.weight = auxiliary.weight.clone();
  m.auxiliary.direction = auxiliary.direction.clone();
  return m;
}

Tensor encode(const Tensor& points, const KnnGraph& graph, const HypothesizerModel& m) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw ShapeError("encode: expected [N, 3] points, got " + shape_str(points.shape()));
  }
  Tensor x = ops::reshape(points, {points.dim(0), 1, 3});
  std::vector<Tensor> outputs;
  for (const auto& block : m.blocks) {
    x = block.forward(x, graph, m.config.aggregation);
    outputs.push_back(x);
  }
  return m.fuse.forward(ops::concat(outputs, 1));
}

Tensor predict_hypothesis(const Tensor& features, const HypothesizerModel& m, bool strict) {
  const Tensor pooled = vnn::vn_mean_pool(features);                 // [1, C, 3]
  const Tensor two = ops::reshape(vnn::vn_linear(pooled, m.head), {2, 3});
  return so3::gram_schmidt_frame(two, so3::kFrameEpsilon, strict);
}

Tensor auxiliary_feature(const Tensor& features, const HypothesizerModel& m) {
  return m.auxiliary.forward(features);
}

Hypothesis hypothesize(const Tensor& points, const KnnGraph& graph, const HypothesizerModel& m, bool strict) {
  Tensor phi = encode(points, graph, m);
  Tensor rotation = predict_hypothesis(phi, m, strict);
  Tensor v = auxiliary_feature(phi, m);
  return {std::move(rotation), std::move(phi), std::move(v)};
}

}  // namespace choir
