#include "choir/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>

#include "choir/corpus.hpp"
#include "choir/gradcheck.hpp"
#include "choir/ops.hpp"
#include "choir/oracles.hpp"
#include "choir/parallel.hpp"
#include "choir/residual.hpp"
#include "choir/training.hpp"

namespace choir::selfcheck {

namespace {

Check make(std::string name, double value, double threshold, std::string unit) {
  return {std::move(name), value, threshold, std::move(unit), value < threshold};
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor random_points(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    v[3 * i] = g(rng);
    v[3 * i + 1] = 0.7 * g(rng);
    v[3 * i + 2] = 0.4 * g(rng);
  }
  return Tensor({n, 3}, std::move(v));
}

// Contracts a tensor output against fixed random weights.
Tensor probe(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum_all(ops::mul(out, random_tensor(out.shape(), rng, false)));
}

std::vector<Tensor> values(const std::vector<NamedTensor>& entries) {
  std::vector<Tensor> out;
  for (const auto& e : entries) out.push_back(e.value);
  return out;
}

PredictorConfig small_predictor() {
  PredictorConfig c;
  c.hypothesizer.widths = {4, 8};
  c.hypothesizer.channels = 8;
  c.hypothesizer.k = 8;
  c.residual.hidden = 12;
  c.residual.k = 6;
  c.residual.position_hidden = 4;
  c.knn_mode = KnnMode::frozen;
  return c;
}

struct Case {
  std::function<Tensor()> loss;
  std::vector<Tensor> wrt;
  std::size_t coords = 0;
  double floor = 1e-6;
};

Check layer(const std::string& name, const Options& opts, std::uint64_t salt,
            const std::function<Case(std::mt19937_64&)>& build) {
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t draw = 0; draw < opts.gradcheck_points; ++draw) {
    std::mt19937_64 rng(derive_seed(opts.seed, salt, draw));
    Case c = build(rng);
    GradcheckOptions go;
    go.step = 1e-6;
    go.coords_per_tensor = c.coords;
    go.floor = c.floor;
    const auto r = gradcheck(c.loss, c.wrt, go, rng);
    worst = std::max(worst, r.max_relative_error);
    checked += r.checked;
  }
  if (checked == 0) worst = std::numeric_limits<double>::infinity();
  return make("gradcheck " + name, worst, 1e-3, "rel");
}

Dataset sample_corpus(const Options& opts) {
  return generate_synthetic_corpus(default_corpus_spec(3, 8, opts.points, opts.seed));
}

}  // namespace

Check equivariance(const Options& opts) {
  const Dataset data = sample_corpus(opts);
  PredictorConfig config;
  config.knn_mode = KnnMode::frozen;
  double worst = 0.0;
  std::mt19937_64 rng(derive_seed(opts.seed, 1));
  CharacteristicOrientationPredictor model;
  for (std::size_t t = 0; t < opts.trials; ++t) {
    if (t % 10 == 0) model = CharacteristicOrientationPredictor(config, rng);
    const PointCloud& pc = data.clouds[t % data.clouds.size()];
    const Rotation r = so3::sample_uniform(rng);
    const KnnGraph graph = model.encoder_graph(pc);
    const Rotation a = model.predict(pc, &graph);
    const Rotation b = model.predict(apply_rotation(pc, r), &graph);
    worst = std::max(worst, so3::angle_between(b, a * r));
  }
  return make("equivariance f(PR) = f(P)R", worst, 1e-6, "rad");
}

Check residual_invariance(const Options& opts) {
  const Dataset data = sample_corpus(opts);
  PredictorConfig config;
  config.knn_mode = KnnMode::frozen;
  double worst = 0.0;
  std::mt19937_64 rng(derive_seed(opts.seed, 2));
  CharacteristicOrientationPredictor model;
  for (std::size_t t = 0; t < opts.trials; ++t) {
    if (t % 10 == 0) model = CharacteristicOrientationPredictor(config, rng);
    const PointCloud& pc = data.clouds[t % data.clouds.size()];
    const Rotation r = so3::sample_uniform(rng);
    const KnnGraph graph = model.encoder_graph(pc);
    const Rotation a = so3::from_tensor(model.forward(to_tensor(pc), &graph).residual);
    const Rotation b = so3::from_tensor(model.forward(to_tensor(apply_rotation(pc, r)), &graph).residual);
    worst = std::max(worst, so3::angle_between(a, b));
  }
  return make("invariance g(PR) = g(P)", worst, 1e-6, "rad");
}

std::vector<Check> gradients(const Options& opts) {
  std::vector<Check> out;
  out.push_back(layer("vn_linear", opts, 10, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({6, 4, 3}, rng), w = random_tensor({5, 4}, rng);
    return Case{[=] { return probe(vnn::vn_linear(x, w), 1); }, {x, w}};
  }));
  out.push_back(layer("vn_relu", opts, 11, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({6, 4, 3}, rng), d = random_tensor({6, 4, 3}, rng);
    return Case{[=] { return probe(ops::vn_relu(x, d), 2); }, {x, d}};
  }));
  out.push_back(layer("vn_nonlinearity", opts, 12, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({6, 4, 3}, rng), u = random_tensor({4, 4}, rng);
    return Case{[=] { return probe(vnn::vn_nonlinearity(x, u), 3); }, {x, u}};
  }));
  out.push_back(layer("vn_mean_pool", opts, 13, [](std::mt19937_64& rng) {
    Tensor x = random_tensor({6, 4, 3}, rng);
    return Case{[=] { return probe(vnn::vn_mean_pool(x), 4); }, {x}};
  }));
  for (auto agg : {vnn::Aggregation::mean, vnn::Aggregation::max}) {
    const bool mean = agg == vnn::Aggregation::mean;
    out.push_back(layer(mean ? "edge_conv mean" : "edge_conv max", opts, mean ? 14 : 15, [agg](std::mt19937_64& rng) {
      const KnnGraph graph = knn(random_points(16, rng), 5);
      auto block = vnn::EdgeConvBlock::init(2, 4, rng);
      Tensor x = random_tensor({16, 2, 3}, rng);
      return Case{[=] { return probe(block.forward(x, graph, agg), 5); }, {x, block.weight, block.direction}};
    }));
  }
  out.push_back(layer("linear_block", opts, 16, [](std::mt19937_64& rng) {
    auto block = vnn::LinearBlock::init(5, 3, rng);
    Tensor x = random_tensor({7, 5, 3}, rng);
    return Case{[=] { return probe(block.forward(x), 6); }, {x, block.weight, block.direction}};
  }));
  out.push_back(layer("invariant_product", opts, 17, [](std::mt19937_64& rng) {
    Tensor a = random_tensor({6, 4, 3}, rng), b = random_tensor({6, 3, 3}, rng);
    return Case{[=] { return probe(vnn::invariant_product(a, b), 7); }, {a, b}};
  }));
  out.push_back(layer("gram_schmidt", opts, 18, [](std::mt19937_64& rng) {
    Tensor rows = random_tensor({2, 3}, rng);
    return Case{[=] { return probe(so3::gram_schmidt_frame(rows), 8); }, {rows}};
  }));
  out.push_back(layer("hypothesizer", opts, 19, [](std::mt19937_64& rng) {
    const auto m = HypothesizerModel::init(small_predictor().hypothesizer, rng);
    Tensor points = random_points(24, rng).set_requires_grad(true);
    const KnnGraph graph = knn(points, m.config.k);
    auto wrt = values(m.parameters());
    wrt.push_back(points);
    return Case{[=] { return probe(hypothesize(points, graph, m).rotation, 9); }, wrt, 4};
  }));
  out.push_back(layer("residual", opts, 20, [](std::mt19937_64& rng) {
    const auto m = ResidualModel::init(small_predictor().residual, 5, rng);
    Tensor canonical = random_points(20, rng).set_requires_grad(true);
    Tensor features = random_tensor({20, 5}, rng);
    const KnnGraph graph = knn(canonical, m.config.k);
    auto wrt = values(m.parameters());
    wrt.push_back(canonical);
    wrt.push_back(features);
    return Case{[=] { return probe(predict_residual(canonical, features, graph, m), 10); }, wrt, 4};
  }));
  out.push_back(layer("pair_loss", opts, 21, [](std::mt19937_64& rng) {
    Tensor f1 = random_tensor({3, 3}, rng), f2 = random_tensor({3, 3}, rng);
    const Tensor r1 = so3::to_tensor(so3::sample_uniform(rng)), r2 = so3::to_tensor(so3::sample_uniform(rng));
    return Case{[=] { return pair_loss(f1, f2, r1, r2); }, {f1, f2}};
  }));
  out.push_back(layer("composed pair loss", opts, 22, [](std::mt19937_64& rng) {
    PredictorConfig config;
    config.knn_mode = KnnMode::frozen;
    const CharacteristicOrientationPredictor model(config, rng);
    const Rotation r1 = so3::sample_uniform(rng), r2 = so3::sample_uniform(rng);
    const Tensor s1 = random_points(32, rng), s2 = random_points(32, rng);
    const Tensor p1 = ops::matmul(s1, so3::to_tensor(r1)), p2 = ops::matmul(s2, so3::to_tensor(r2));
    const KnnGraph g1 = knn(s1, config.hypothesizer.k), g2 = knn(s2, config.hypothesizer.k);
    const Tensor t1 = so3::to_tensor(r1), t2 = so3::to_tensor(r2);
    return Case{[=] {
                  return pair_loss(model.forward(p1, &g1).orientation, model.forward(p2, &g2).orientation, t1, t2);
                },
                values(model.parameters()), 2, 1e-4};
  }));
  return out;
}

std::vector<Check> rotation_mean(const Options& opts) {
  std::mt19937_64 rng(derive_seed(opts.seed, 3));
  double worst_angle = 0.0, worst_det = 0.0;
  for (std::size_t s = 0; s < opts.mean_sets; ++s) {
    std::vector<Rotation> rs;
    for (std::size_t i = 0; i < 2 + s % 4; ++i) rs.push_back(so3::sample_uniform(rng));
    const auto mean = so3::chordal_mean(rs);
    const Rotation brute = oracles::brute_force_chordal_mean(rs, 100, rng);
    worst_angle = std::max(worst_angle, so3::degrees(so3::angle_between(mean.rotation, brute)));
    worst_det = std::max(worst_det, std::abs(mean.rotation.det() - 1.0));
  }
  return {make("chordal mean vs brute force", worst_angle, 0.1, "deg"),
          make("chordal mean |det - 1|", worst_det, 1e-9, "")};
}

Check loss_forms(const Options& opts) {
  const Dataset data = sample_corpus(opts);
  TrainConfig cfg;
  cfg.points = opts.points;
  cfg.model.knn_mode = KnnMode::frozen;
  std::mt19937_64 rng(derive_seed(opts.seed, 4));
  const CharacteristicOrientationPredictor model(cfg.model, rng);
  double worst = 0.0;
  for (std::size_t t = 0; t < opts.loss_pairs; ++t) {
    const TrainingPair pair = sample_pair(data, cfg, rng);
    const KnnGraph g1 = model.encoder_graph(pair.source1), g2 = model.encoder_graph(pair.source2);
    const double full = pair_loss(model.forward(to_tensor(pair.p1), &g1).orientation,
                                  model.forward(to_tensor(pair.p2), &g2).orientation, so3::to_tensor(pair.r1),
                                  so3::to_tensor(pair.r2))
                            .item();
    const Tensor d = ops::sub(model.forward(to_tensor(pair.source1), &g1).orientation,
                              model.forward(to_tensor(pair.source2), &g2).orientation);
    worst = std::max(worst, std::abs(full - ops::sum_all(ops::mul(d, d)).item()));
  }
  return make("full vs simplified pair loss", worst, 1e-9, "");
}

Check loss_gauge(const Options& opts) {
  std::mt19937_64 rng(derive_seed(opts.seed, 5));
  double worst = 0.0;
  auto t = [](const Rotation& r) { return so3::to_tensor(r); };
  for (std::size_t i = 0; i < opts.loss_pairs; ++i) {
    const Rotation f1 = so3::sample_uniform(rng), f2 = so3::sample_uniform(rng);
    const Rotation r1 = so3::sample_uniform(rng), r2 = so3::sample_uniform(rng);
    const Rotation q = so3::sample_uniform(rng);
    const double a = pair_loss(t(f1), t(f2), t(r1), t(r2)).item();
    const double b = pair_loss(t(f1 * q), t(f2 * q), t(r1 * q), t(r2 * q)).item();
    worst = std::max(worst, std::abs(a - b));
  }
  return make("pair loss under common Q", worst, 1e-12, "");
}

std::vector<Check> run_all(const Options& opts) {
  std::vector<Check> out{equivariance(opts), residual_invariance(opts)};
  for (auto& c : gradients(opts)) out.push_back(std::move(c));
  for (auto& c : rotation_mean(opts)) out.push_back(std::move(c));
  out.push_back(loss_forms(opts));
  out.push_back(loss_gauge(opts));
  return out;
}

void print_table(std::ostream& out, const std::vector<Check>& checks) {
  std::size_t width = 5;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "check" << "  " << std::setw(12) << "value"
      << std::setw(12) << "threshold" << std::setw(5) << "unit" << "result\n";
  for (const auto& c : checks) {
    out << std::left << std::setw(static_cast<int>(width)) << c.name << "  " << std::setw(12) << std::setprecision(4)
        << c.value << std::setw(12) << c.threshold << std::setw(5) << c.unit << (c.passed ? "PASS" : "FAIL") << '\n';
  }
}

}  // namespace choir::selfcheck
