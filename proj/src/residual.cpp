#include "choir/residual.hpp"

#include <cmath>

#include "choir/error.hpp"
#include "choir/ops.hpp"
#include "choir/vnn.hpp"

namespace choir {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// He-uniform for layers feeding a relu.
Tensor dense_weight(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain = 1.0) {
  return uniform({in, out}, gain * std::sqrt(6.0 / static_cast<double>(in)), rng);
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::matmul(x, w) + b; }

Tensor attention(const Tensor& x, const Tensor& positions, const KnnGraph& graph, const AttentionBlock& blk) {
  const std::size_t n = x.dim(0), h = x.dim(1), k = graph.k;
  const Tensor q = ops::matmul(x, blk.query);
  const Tensor keys = ops::gather_rows(ops::matmul(x, blk.key), graph.indices, {n, k});    // [N, k, H]
  const Tensor vals = ops::gather_rows(ops::matmul(x, blk.value), graph.indices, {n, k});  // [N, k, H]
  const Tensor rel = ops::reshape(positions, {n, 1, 3}) - ops::gather_rows(positions, graph.indices, {n, k});
  const Tensor delta = dense(ops::relu(dense(rel, blk.pos1, blk.pos1_bias)), blk.pos2, blk.pos2_bias);
  const Tensor logits = (ops::reshape(q, {n, 1, h}) - keys + delta) * (1.0 / std::sqrt(static_cast<double>(h)));
  const Tensor weights = ops::softmax(logits, 1);
  const Tensor mixed = ops::sum(weights * (vals + delta), 1);  // [N, H]
  return ops::relu(x + ops::matmul(mixed, blk.output));
}

Tensor clone_param(const Tensor& t) { return t.clone(); }

}  // namespace

ResidualModel ResidualModel::init(const ResidualConfig& config, std::size_t feature_channels, std::mt19937_64& rng) {
  if (config.hidden == 0 || config.k == 0) throw std::invalid_argument("residual hidden width and k must be positive");
  ResidualModel m;
  m.config = config;
  m.feature_channels = feature_channels;
  const std::size_t h = config.hidden, p = config.position_hidden;
  m.embed = dense_weight(3 + feature_channels, h, rng);
  m.embed_bias = zeros_param(h);
  for (std::size_t b = 0; b < config.blocks; ++b) {
    AttentionBlock blk;
    blk.query = dense_weight(h, h, rng, 0.5);
    blk.key = dense_weight(h, h, rng, 0.5);
    blk.value = dense_weight(h, h, rng, 0.5);
    blk.output = dense_weight(h, h, rng, 0.5);
    blk.pos1 = dense_weight(3, p, rng);
    blk.pos1_bias = zeros_param(p);
    blk.pos2 = dense_weight(p, h, rng, 0.5);
    blk.pos2_bias = zeros_param(h);
    m.blocks.push_back(std::move(blk));
  }
  m.head1 = dense_weight(h, h, rng);
  m.head1_bias = zeros_param(h);
  m.head2 = dense_weight(h, 6, rng, 1e-2);
  m.head2_bias = Tensor({6}, {1, 0, 0, 0, 1, 0}, true);
  return m;
}

std::vector<NamedTensor> ResidualModel::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out{{prefix + ".embed.weight", embed}, {prefix + ".embed.bias", embed_bias}};
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    const auto& blk = blocks[b];
    out.push_back({p + ".query.weight", blk.query});
    out.push_back({p + ".key.weight", blk.key});
    out.push_back({p + ".value.weight", blk.value});
    out.push_back({p + ".output.weight", blk.output});
    out.push_back({p + ".position.0.weight", blk.pos1});
    out.push_back({p + ".position.0.bias", blk.pos1_bias});
    out.push_back({p + ".position.1.weight", blk.pos2});
    out.push_back({p + ".position.1.bias", blk.pos2_bias});
  }
  out.push_back({prefix + ".head.0.weight", head1});
  out.push_back({prefix + ".head.0.bias", head1_bias});
  out.push_back({prefix + ".head.1.weight", head2});
  out.push_back({prefix + ".head.1.bias", head2_bias});
  return out;
}

void ResidualModel::load(const std::vector<NamedTensor>& entries, const std::string& prefix) {
  for (auto& p : parameters(prefix)) vnn::assign(p.value, entries, p.name);
}

ResidualModel ResidualModel::clone() const {
  ResidualModel m = *this;
  m.embed = clone_param(embed);
  m.embed_bias = clone_param(embed_bias);
  for (auto& blk : m.blocks) {
    for (Tensor* t : {&blk.query, &blk.key, &blk.value, &blk.output, &blk.pos1, &blk.pos1_bias, &blk.pos2,
                      &blk.pos2_bias}) {
      *t = clone_param(*t);
    }
  }
  m.head1 = clone_param(head1);
  m.head1_bias = clone_param(head1_bias);
  m.head2 = clone_param(head2);
  m.head2_bias = clone_param(head2_bias);
  return m;
}

Tensor canonicalize_hypothetically(const Tensor& points, const Tensor& hypothesis) {
  return ops::matmul(points, ops::transpose(hypothesis));
}

PointCloud canonicalize_hypothetically(const PointCloud& pc, const Rotation& hypothesis) {
  return apply_rotation(pc, hypothesis.transposed());
}

Tensor predict_residual(const Tensor& canonical, const Tensor& invariant_features, const KnnGraph& graph,
                        const ResidualModel& m, bool strict) {
  if (canonical.rank() != 2 || canonical.dim(1) != 3 || invariant_features.rank() != 2 ||
      invariant_features.dim(0) != canonical.dim(0) || invariant_features.dim(1) != m.feature_channels) {
    throw ShapeError("predict_residual: got points " + shape_str(canonical.shape()) + " and features " +
                     shape_str(invariant_features.shape()) + ", expected " + std::to_string(m.feature_channels) +
                     " feature channels");
  }
  if (graph.num_points() != canonical.dim(0)) throw ShapeError("predict_residual: graph does not match the cloud");
  Tensor x = ops::relu(dense(ops::concat({canonical, invariant_features}, 1), m.embed, m.embed_bias));
  for (const auto& blk : m.blocks) x = attention(x, canonical, graph, blk);
  const Tensor pooled = ops::mean(x, 0, true);  // [1, H]
  const Tensor six = dense(ops::relu(dense(pooled, m.head1, m.head1_bias)), m.head2, m.head2_bias);
  return so3::gram_schmidt_frame(ops::reshape(six, {2, 3}), so3::kFrameEpsilon, strict);
}

// ---- composed predictor ----

CharacteristicOrientationPredictor::CharacteristicOrientationPredictor(const PredictorConfig& config,
                                                                       std::mt19937_64& rng)
    : config_(config),
      hypothesizer_(HypothesizerModel::init(config.hypothesizer, rng)),
      residual_(ResidualModel::init(config.residual, 3 * config.hypothesizer.channels, rng)) {
  if (config.residual.k > config.hypothesizer.k && config.knn_mode == KnnMode::frozen) {
    throw std::invalid_argument("frozen mode needs residual k <= encoder k");
  }
}

KnnGraph CharacteristicOrientationPredictor::encoder_graph(const PointCloud& pc) const {
  KnnGraph g = knn(pc, config_.hypothesizer.k, config_.precision);
  return config_.knn_mode == KnnMode::frozen ? freeze(std::move(g)) : g;
}

Prediction CharacteristicOrientationPredictor::forward(const Tensor& points, const KnnGraph* frozen_graph,
                                                       bool strict) const {
  const bool frozen = config_.knn_mode == KnnMode::frozen;
  KnnGraph own;
  const KnnGraph* graph = frozen ? frozen_graph : nullptr;
  if (graph == nullptr) {
    own = knn(points, config_.hypothesizer.k, config_.precision);
    graph = &own;
  }
  Hypothesis hyp = hypothesize(points, *graph, hypothesizer_, strict);
  if (!config_.use_residual) {
    return {hyp.rotation, hyp.rotation, so3::to_tensor(Rotation())};
  }
  const Tensor canonical = canonicalize_hypothetically(points, hyp.rotation);
  const Tensor invariants = vnn::invariant_product(hyp.features, hyp.auxiliary);
  const KnnGraph inner =
      frozen ? graph->truncated(config_.residual.k) : knn(canonical, config_.residual.k, config_.precision);
  Tensor g = predict_residual(canonical, invariants, inner, residual_, strict);
  Tensor f = ops::matmul(g, hyp.rotation);
  return {std::move(f), std::move(hyp.rotation), std::move(g)};
}

Rotation CharacteristicOrientationPredictor::predict(const PointCloud& pc, const KnnGraph* frozen_graph) const {
  return so3::from_tensor(forward(to_tensor(pc), frozen_graph, true).orientation);
}

PointCloud CharacteristicOrientationPredictor::canonicalize(const PointCloud& pc, const KnnGraph* frozen_graph) const {
  return apply_rotation(pc, predict(pc, frozen_graph).transposed());
}

std::vector<NamedTensor> CharacteristicOrientationPredictor::parameters() const {
  auto out = hypothesizer_.parameters();
  if (config_.use_residual) {
    auto r = residual_.parameters();
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

CharacteristicOrientationPredictor CharacteristicOrientationPredictor::clone() const {
  CharacteristicOrientationPredictor c;
  c.config_ = config_;
  c.hypothesizer_ = hypothesizer_.clone();
  c.residual_ = residual_.clone();
  return c;
}

std::vector<NamedTensor> CharacteristicOrientationPredictor::to_entries() const {
  const auto scalar = [](double v) { return Tensor::scalar(v); };
  std::vector<double> widths(config_.hypothesizer.widths.begin(), config_.hypothesizer.widths.end());
  std::vector<NamedTensor> out{
      {"config.knn_mode", scalar(config_.knn_mode == KnnMode::frozen ? 1.0 : 0.0)},
      {"config.precision", scalar(config_.precision == Dtype::f32 ? 32.0 : 64.0)},
      {"config.use_residual", scalar(config_.use_residual ? 1.0 : 0.0)},
      {"config.hypothesizer.widths", Tensor({widths.size()}, widths)},
      {"config.hypothesizer.channels", scalar(static_cast<double>(config_.hypothesizer.channels))},
      {"config.hypothesizer.k", scalar(static_cast<double>(config_.hypothesizer.k))},
      {"config.hypothesizer.max_aggregation",
       scalar(config_.hypothesizer.aggregation == vnn::Aggregation::max ? 1.0 : 0.0)},
      {"config.residual.hidden", scalar(static_cast<double>(config_.residual.hidden))},
      {"config.residual.blocks", scalar(static_cast<double>(config_.residual.blocks))},
      {"config.residual.k", scalar(static_cast<double>(config_.residual.k))},
      {"config.residual.position_hidden", scalar(static_cast<double>(config_.residual.position_hidden))},
      {"config.corpus_version", scalar(static_cast<double>(config_.corpus_version))},
  };
  for (auto& p : hypothesizer_.parameters()) out.push_back({p.name, p.value});
  for (auto& p : residual_.parameters()) out.push_back({p.name, p.value});
  return out;
}

CharacteristicOrientationPredictor CharacteristicOrientationPredictor::from_entries(
    const std::vector<NamedTensor>& entries) {
  const auto count = [&](const std::string& name) {
    const double v = find_entry(entries, name).item();
    if (!(v >= 0.0) || v != std::floor(v)) throw DataError("checkpoint entry " + name + " is not a count");
    return static_cast<std::size_t>(v);
  };
  PredictorConfig config;
  config.knn_mode = find_entry(entries, "config.knn_mode").item() != 0.0 ? KnnMode::frozen : KnnMode::adaptive;
  config.precision = find_entry(entries, "config.precision").item() == 32.0 ? Dtype::f32 : Dtype::f64;
  config.use_residual = find_entry(entries, "config.use_residual").item() != 0.0;
  config.hypothesizer.widths.clear();
  for (double w : find_entry(entries, "config.hypothesizer.widths").data()) {
    config.hypothesizer.widths.push_back(static_cast<std::size_t>(w));
  }
  config.hypothesizer.channels = count("config.hypothesizer.channels");
  config.hypothesizer.k = count("config.hypothesizer.k");
  config.hypothesizer.aggregation = find_entry(entries, "config.hypothesizer.max_aggregation").item() != 0.0
                                        ? vnn::Aggregation::max
                                        : vnn::Aggregation::mean;
  config.residual.hidden = count("config.residual.hidden");
  config.residual.blocks = count("config.residual.blocks");
  config.residual.k = count("config.residual.k");
  config.residual.position_hidden = count("config.residual.position_hidden");
  config.corpus_version = static_cast<std::uint32_t>(count("config.corpus_version"));
  std::mt19937_64 rng(0);
  CharacteristicOrientationPredictor p(config, rng);
  p.hypothesizer_.load(entries);
  p.residual_.load(entries);
  return p;
}

void CharacteristicOrientationPredictor::save(const std::filesystem::path& path) const {
  save_checkpoint(path, to_entries());
}

CharacteristicOrientationPredictor CharacteristicOrientationPredictor::load(const std::filesystem::path& path) {
  return from_entries(load_checkpoint(path));
}

}  // namespace choir
