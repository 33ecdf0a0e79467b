#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "choir/corpus.hpp"
#include "choir/metrics.hpp"
#include "choir/parallel.hpp"
#include "choir/so3.hpp"

using namespace choir;

namespace {

PredictorConfig tiny_config(KnnMode mode) {
  PredictorConfig c;
  c.hypothesizer.widths = {4, 8};
  c.hypothesizer.channels = 8;
  c.hypothesizer.k = 8;
  c.residual.hidden = 12;
  c.residual.k = 6;
  c.residual.position_hidden = 4;
  c.knn_mode = mode;
  return c;
}

Dataset tiny_corpus() {
  auto spec = default_corpus_spec(2, 8, 96, 5);
  return generate_synthetic_corpus(spec);
}

}  // namespace

TEST_CASE("angular_spread") {
  std::mt19937_64 rng(51);
  SUBCASE("identical rotations have no spread") {
    const Rotation r = so3::sample_uniform(rng);
    std::vector<Rotation> rs(5, r);
    CHECK(angular_spread(rs).degrees < 1e-6);
  }
  SUBCASE("two rotations about one axis") {
    std::vector<Rotation> rs{Rotation(), so3::rotation_z(0.8)};
    CHECK(angular_spread(rs).degrees == doctest::Approx(so3::degrees(0.4)).epsilon(1e-9));
  }
  SUBCASE("right composition leaves the spread unchanged") {
    std::vector<Rotation> rs, moved;
    const Rotation q = so3::sample_uniform(rng);
    for (int i = 0; i < 12; ++i) {
      rs.push_back(so3::from_axis_angle({1, 2, 3}, 0.1 * i) * so3::sample_uniform(rng));
    }
    for (const auto& r : rs) moved.push_back(r * q);
    CHECK(angular_spread(moved).degrees == doctest::Approx(angular_spread(rs).degrees).epsilon(1e-9));
  }
  SUBCASE("permutation invariant") {
    std::vector<Rotation> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(so3::from_axis_angle({0, 1, 1}, 0.05 * i));
    const double a = angular_spread(rs).degrees;
    std::shuffle(rs.begin(), rs.end(), rng);
    CHECK(angular_spread(rs).degrees == doctest::Approx(a).epsilon(1e-12));
  }
  SUBCASE("Haar samples spread widely") {
    // A model that ignores its input gives net rotations equal to the samples.
    double total = 0.0;
    const int trials = 400;
    for (int t = 0; t < trials; ++t) {
      std::vector<Rotation> rs;
      for (int i = 0; i < 10; ++i) rs.push_back(so3::sample_uniform(rng));
      const double s = angular_spread(rs).degrees;
      CHECK(s <= 180.0);
      total += s;
    }
    const double mean = total / trials;
    CHECK(mean > 100.0);
    CHECK(mean < 120.0);
  }
}

TEST_CASE("perturbation parsing") {
  CHECK(parse_perturbation("none").kind == Perturbation::Kind::none);
  CHECK(parse_perturbation("").kind == Perturbation::Kind::none);
  const auto g = parse_perturbation("gaussian:0.01");
  CHECK(g.kind == Perturbation::Kind::gaussian);
  CHECK(g.magnitude == 0.01);
  CHECK(g.str() == "gaussian:0.01");
  CHECK(parse_perturbation("resample:512").str() == "resample:512");
  CHECK_THROWS(parse_perturbation("gaussian"));
  CHECK_THROWS(parse_perturbation("gaussian:-1"));
  CHECK_THROWS(parse_perturbation("resample:1.5"));
  CHECK_THROWS(parse_perturbation("blur:2"));
}

TEST_CASE("stability") {
  std::mt19937_64 rng(52);
  const Dataset data = tiny_corpus();
  const PointCloud& pc = data.clouds[0];
  EvalConfig cfg;
  SUBCASE("frozen kNN is exactly stable") {
    const CharacteristicOrientationPredictor model(tiny_config(KnnMode::frozen), rng);
    for (int seed = 0; seed < 3; ++seed) {
      std::mt19937_64 r(seed);
      CHECK(stability(pc, model, cfg, r).degrees < 1e-4);
    }
  }
  SUBCASE("needs two rotations") {
    const CharacteristicOrientationPredictor model(tiny_config(KnnMode::frozen), rng);
    cfg.rotations = 1;
    CHECK_THROWS(stability(pc, model, cfg, rng));
  }
}

TEST_CASE("consistency") {
  std::mt19937_64 rng(53);
  const Dataset data = tiny_corpus();
  const CharacteristicOrientationPredictor model(tiny_config(KnnMode::adaptive), rng);
  EvalConfig cfg;
  SUBCASE("identical instances agree") {
    std::vector<PointCloud> same(4, data.clouds[0]);
    CHECK(consistency(same, model, cfg, rng).degrees < 1e-6);
  }
  SUBCASE("needs two instances") {
    std::vector<PointCloud> one(1, data.clouds[0]);
    CHECK_THROWS(consistency(one, model, cfg, rng));
  }
}

TEST_CASE("evaluate") {
  std::mt19937_64 rng(54);
  const Dataset data = tiny_corpus();
  const CharacteristicOrientationPredictor model(tiny_config(KnnMode::frozen), rng);
  EvalConfig cfg;
  cfg.rotations = 4;
  cfg.seed = 9;
  const EvalReport a = evaluate(data, model, cfg);
  REQUIRE(a.classes.size() == 2);
  for (const auto& c : a.classes) {
    CHECK(c.instances.size() == 8);
    CHECK(c.mean_stability_deg >= 0.0);
    CHECK(c.mean_stability_deg <= 180.0);
    CHECK(c.consistency_deg >= 0.0);
    CHECK(c.consistency_deg <= 180.0);
  }
  CHECK(a.metadata.at("knn_mode") == "frozen");

  SUBCASE("same seed, same report") {
    cfg.threads = 2;
    const EvalReport b = evaluate(data, model, cfg);
    for (std::size_t i = 0; i < a.classes.size(); ++i) {
      CHECK(a.classes[i].mean_stability_deg == b.classes[i].mean_stability_deg);
      CHECK(a.classes[i].consistency_deg == b.classes[i].consistency_deg);
    }
  }
  SUBCASE("noise does not improve stability") {
    cfg.perturbation = parse_perturbation("gaussian:0.01");
    const EvalReport noisy = evaluate(data, model, cfg);
    CHECK(noisy.mean_stability() >= a.mean_stability());
    CHECK(noisy.metadata.at("perturbation") == "gaussian:0.01");
  }
  SUBCASE("mode override") {
    cfg.knn_mode = KnnMode::adaptive;
    CHECK(evaluate(data, model, cfg).metadata.at("knn_mode") == "adaptive");
  }
  SUBCASE("single-instance class has no consistency") {
    Dataset small;
    small.clouds = {data.clouds[0], data.clouds[8], data.clouds[9]};
    const EvalReport r = evaluate(small, model, cfg);
    REQUIRE(r.classes.size() == 2);
    CHECK(std::isnan(r.classes[0].consistency_deg));
    CHECK(!r.warnings.empty());
  }
  SUBCASE("json round trip") {
    std::stringstream s;
    write_report_json(s, a);
    const EvalReport b = read_report_json(s);
    REQUIRE(b.classes.size() == a.classes.size());
    CHECK(b.metadata == a.metadata);
    CHECK(b.classes[1].consistency_deg == a.classes[1].consistency_deg);
    CHECK(b.classes[0].instances[3].instance_id == a.classes[0].instances[3].instance_id);
  }
  SUBCASE("csv layout") {
    std::stringstream s;
    write_report_csv(s, a);
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(s, line)) {
      if (line.rfind("#", 0) != 0) rows.push_back(line);
    }
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == "class_id,instances,mean_stability_deg,consistency_deg,degenerate_mean");
    CHECK(rows[1].rfind(a.classes[0].class_id + ",8,", 0) == 0);
  }
}

TEST_CASE("parallel helpers") {
  SUBCASE("derive_seed separates streams") {
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  }
  SUBCASE("parallel_for visits every index once") {
    std::vector<int> hits(100, 0);
    parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  }
  SUBCASE("lowest failing index is reported") {
    try {
      parallel_for(50, 3, [](std::size_t i) {
        if (i % 7 == 3) throw std::runtime_error(std::to_string(i));
      });
      FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()) == "3");
    }
  }
  SUBCASE("CHOIR_THREADS caps the budget") {
    setenv("CHOIR_THREADS", "2", 1);
    CHECK(thread_budget(8) == 2);
    CHECK(thread_budget(1) == 1);
    unsetenv("CHOIR_THREADS");
    CHECK(thread_budget(8) == 8);
  }
}
