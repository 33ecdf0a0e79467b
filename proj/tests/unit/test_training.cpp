#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "choir/gradcheck.hpp"
#include "choir/ops.hpp"
#include "choir/training.hpp"
#include "support.hpp"

using namespace choir;
using choir::testing::random_tensor;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  auto& m = cfg.model;
  m.hypothesizer.widths = {4, 8};
  m.hypothesizer.channels = 8;
  m.hypothesizer.k = 8;
  m.residual.hidden = 12;
  m.residual.k = 6;
  m.residual.position_hidden = 4;
  cfg.points = 64;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  cfg.eval_interval = 2;
  cfg.validation.rotations = 3;
  cfg.augment.patch_size = 8;
  cfg.threads = 1;
  return cfg;
}

Dataset tiny_corpus() { return generate_synthetic_corpus(default_corpus_spec(2, 8, 128, 3)); }

double frob(const Rotation& a, const Rotation& b) { return std::sqrt(frobenius_sq(a.matrix() - b.matrix())); }

HistoryRow row(std::size_t epoch, double s, double c) {
  HistoryRow r;
  r.epoch = epoch;
  r.val_stability_deg = s;
  r.val_consistency_deg = c;
  return r;
}

}  // namespace

TEST_CASE("pair_loss") {
  std::mt19937_64 rng(61);
  const Rotation r1 = so3::sample_uniform(rng), r2 = so3::sample_uniform(rng);
  const Tensor t1 = so3::to_tensor(r1), t2 = so3::to_tensor(r2);
  SUBCASE("perfect prediction costs nothing") { CHECK(pair_loss(t1, t2, t1, t2).item() < 1e-24); }
  SUBCASE("quarter turn about a shared axis costs 4") {
    const Rotation q = so3::rotation_z(std::numbers::pi / 2);
    const Tensor f1 = so3::to_tensor(Rotation());
    const Tensor f2 = so3::to_tensor(q);
    const Tensor id = so3::to_tensor(Rotation());
    CHECK(pair_loss(f1, f2, id, id).item() == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("simultaneous right composition changes nothing") {
    const Rotation f1 = so3::sample_uniform(rng), f2 = so3::sample_uniform(rng), q = so3::sample_uniform(rng);
    const double a = pair_loss(so3::to_tensor(f1), so3::to_tensor(f2), t1, t2).item();
    const double b = pair_loss(so3::to_tensor(f1 * q), so3::to_tensor(f2 * q), so3::to_tensor(r1 * q),
                               so3::to_tensor(r2 * q))
                         .item();
    CHECK(a >= 0.0);
    CHECK(b == doctest::Approx(a).epsilon(1e-12));
  }
  SUBCASE("gradient") {
    Tensor f1 = random_tensor({3, 3}, rng, true);
    Tensor f2 = random_tensor({3, 3}, rng, true);
    GradcheckOptions opts;
    opts.step = 1e-6;
    auto r = gradcheck([&] { return pair_loss(f1, f2, t1, t2); }, {f1, f2}, opts, rng);
    CHECK(r.checked == 18);
    CHECK(r.max_relative_error < 1e-6);
  }
}

TEST_CASE("full loss equals the simplified form for an exactly equivariant model") {
  std::mt19937_64 rng(62);
  const Dataset data = tiny_corpus();
  auto cfg = tiny_train_config();
  cfg.model.knn_mode = KnnMode::frozen;
  const CharacteristicOrientationPredictor model(cfg.model, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const TrainingPair pair = sample_pair(data, cfg, rng);
    const KnnGraph g1 = model.encoder_graph(pair.source1), g2 = model.encoder_graph(pair.source2);
    const Tensor f1 = model.forward(to_tensor(pair.p1), &g1).orientation;
    const Tensor f2 = model.forward(to_tensor(pair.p2), &g2).orientation;
    const double full = pair_loss(f1, f2, so3::to_tensor(pair.r1), so3::to_tensor(pair.r2)).item();
    const Tensor d = ops::sub(model.forward(to_tensor(pair.source1), &g1).orientation,
                              model.forward(to_tensor(pair.source2), &g2).orientation);
    const double simplified = ops::sum_all(ops::mul(d, d)).item();
    CHECK(std::abs(full - simplified) < 1e-9);
  }
}

TEST_CASE("sample_pair") {
  std::mt19937_64 rng(63);
  const Dataset data = tiny_corpus();
  auto cfg = tiny_train_config();
  SUBCASE("cross-instance pairs share a class but not an instance") {
    for (int i = 0; i < 20; ++i) {
      const TrainingPair p = sample_pair(data, cfg, rng);
      CHECK(p.source1.class_id == p.source2.class_id);
      CHECK(p.source1.instance_id != p.source2.instance_id);
      CHECK(p.p1.size() == cfg.points);
    }
  }
  SUBCASE("recorded rotations reproduce the clouds") {
    const TrainingPair p = sample_pair(data, cfg, rng);
    CHECK(max_point_distance(apply_rotation(p.source1, p.r1), p.p1) == 0.0);
    CHECK(max_point_distance(apply_rotation(p.source2, p.r2), p.p2) == 0.0);
  }
  SUBCASE("same-instance without augmentation differs only by rotation") {
    cfg.mode = PairMode::same_instance;
    cfg.augment.patch_removal = false;
    cfg.augment.resample = false;
    const TrainingPair p = sample_pair(data, cfg, rng);
    CHECK(p.source1.instance_id == p.source2.instance_id);
    CHECK(max_point_distance(p.source1, p.source2) == 0.0);
    CHECK(max_point_distance(apply_rotation(p.p1, p.r1.transposed() * p.r2), p.p2) < 1e-12);
  }
  SUBCASE("same-instance augmentation changes the copies") {
    cfg.mode = PairMode::same_instance;
    const TrainingPair p = sample_pair(data, cfg, rng);
    CHECK(p.source1.instance_id == p.source2.instance_id);
    CHECK(p.source1.size() == cfg.points);
    CHECK(max_point_distance(p.source1, p.source2) > 0.0);
  }
  SUBCASE("mixed mode draws both kinds") {
    cfg.mode = PairMode::mixed;
    int cross = 0;
    for (int i = 0; i < 60; ++i) {
      const TrainingPair p = sample_pair(data, cfg, rng);
      cross += p.source1.instance_id != p.source2.instance_id;
    }
    CHECK(cross > 15);
    CHECK(cross < 45);
  }
  SUBCASE("single rotation precision matches the recorded rotation") {
    cfg.model.precision = Dtype::f32;
    const TrainingPair p = sample_pair(data, cfg, rng);
    CHECK(max_point_distance(apply_rotation(p.source1, p.r1, Dtype::f32), p.p1) == 0.0);
  }
  SUBCASE("a lone instance cannot form a cross pair") {
    Dataset lone;
    lone.clouds = {data.clouds[0]};
    CHECK_THROWS_AS(sample_pair(lone, cfg, rng), DataError);
  }
}

TEST_CASE("select_checkpoint") {
  SUBCASE("single checkpoint") { CHECK(select_checkpoint({row(10, 1.0, 2.0)}) == 10); }
  SUBCASE("strictly decreasing sums pick the last") {
    CHECK(select_checkpoint({row(10, 3.0, 3.0), row(20, 2.0, 3.0), row(30, 1.0, 3.0)}) == 30);
  }
  SUBCASE("ties go to the earliest") {
    CHECK(select_checkpoint({row(10, 1.0, 2.0), row(20, 2.0, 1.0)}) == 10);
  }
  SUBCASE("unevaluated rows are ignored") {
    HistoryRow plain;
    plain.epoch = 5;
    CHECK(select_checkpoint({plain, row(10, 4.0, 4.0)}) == 10);
  }
  SUBCASE("empty history fails") { CHECK_THROWS(select_checkpoint({})); }
}

TEST_CASE("history csv") {
  History h{row(1, 0.5, 20.0), row(2, 0.25, 10.0)};
  h[0].loss = 3.25;
  h[1].selected = true;
  HistoryRow plain;
  plain.epoch = 3;
  plain.loss = 0.125;
  h.push_back(plain);
  std::stringstream s;
  write_history(s, h);
  CHECK(s.str().rfind("epoch,loss,val_stability_deg,val_consistency_deg,selected_flag\n1,3.25,0.5,20,0\n", 0) == 0);
  const History back = read_history(s);
  REQUIRE(back.size() == 3);
  CHECK(back[0].loss == 3.25);
  CHECK(back[1].selected);
  CHECK(!back[2].evaluated());
  std::stringstream bad("epoch,loss\n");
  CHECK_THROWS_AS(read_history(bad), DataError);
}

TEST_CASE("config file") {
  const auto path = std::filesystem::temp_directory_path() / "choir_test_train.cfg";
  {
    std::ofstream out(path);
    out << "# desk profile\n"
        << "epochs = 12   # short\n"
        << "\n"
        << "mode = same-instance\n"
        << "widths = 8, 16\n"
        << "precision = single\n";
  }
  TrainConfig cfg;
  apply_config(cfg, read_config_file(path));
  CHECK(cfg.epochs == 12);
  CHECK(cfg.mode == PairMode::same_instance);
  CHECK(cfg.model.hypothesizer.widths == std::vector<std::size_t>{8, 16});
  CHECK(cfg.model.precision == Dtype::f32);

  SUBCASE("later values win") {
    apply_config(cfg, {{"epochs", "3"}});
    CHECK(cfg.epochs == 3);
  }
  SUBCASE("written config reads back") {
    std::ofstream(path) << [&] {
      std::stringstream s;
      write_config(s, cfg);
      return s.str();
    }();
    TrainConfig again;
    apply_config(again, read_config_file(path));
    CHECK(config_entries(again) == config_entries(cfg));
  }
  SUBCASE("errors name the line") {
    std::ofstream(path) << "epochs = 3\nbatch_size: 4\n";
    try {
      read_config_file(path);
      FAIL("expected a throw");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::ofstream(path) << "colour = blue\n";
    CHECK_THROWS_AS(read_config_file(path), DataError);
    std::ofstream(path) << "epochs = many\n";
    CHECK_THROWS_AS(read_config_file(path), DataError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("train") {
  const Dataset data = tiny_corpus();
  auto cfg = tiny_train_config();
  SUBCASE("same seed, same history, any thread count") {
    const TrainResult a = train(data, cfg);
    cfg.threads = 2;
    const TrainResult b = train(data, cfg);
    REQUIRE(a.history.size() == 4);
    REQUIRE(b.history.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(a.history[i].loss == b.history[i].loss);
      CHECK(a.history[i].selected == b.history[i].selected);
    }
    CHECK(a.history[1].evaluated());
    CHECK(!a.history[2].evaluated());
    CHECK(a.history[3].evaluated());
    CHECK(a.selected_epoch == select_checkpoint(a.history));
    const PointCloud& pc = data.clouds[0];
    CHECK(frob(a.model.predict(pc), b.model.predict(pc)) == 0.0);
  }
  SUBCASE("frozen training stays exactly stable") {
    cfg.model.knn_mode = KnnMode::frozen;
    const TrainResult r = train(data, cfg);
    for (const auto& h : r.history) {
      if (h.evaluated()) CHECK(h.val_stability_deg < 0.1);
    }
  }
  SUBCASE("no-residual training only touches h") {
    cfg.model.use_residual = false;
    const TrainResult r = train(data, cfg);
    CHECK(!r.model.config().use_residual);
  }
  SUBCASE("divergence names the batch") {
    cfg.adam.learning_rate = 1e300;
    try {
      train(data, cfg);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.epoch >= 2);
      CHECK(e.pairs.size() == cfg.batch_size);
      CHECK(std::string(e.what()).find("batch seed") != std::string::npos);
    }
  }
}
