#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "choir/checkpoint.hpp"
#include "choir/gradcheck.hpp"
#include "choir/ops.hpp"
#include "choir/optim.hpp"
#include "support.hpp"

using namespace choir;
using choir::testing::random_tensor;

namespace {

// Closed-form 3x3 inverse via the adjugate.
std::vector<double> inverse3(std::span<const double> m) {
  const double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7],
               i = m[8];
  const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  return {(e * i - f * h) / det, (c * h - b * i) / det, (b * f - c * e) / det,
          (f * g - d * i) / det, (a * i - c * g) / det, (c * d - a * f) / det,
          (d * h - e * g) / det, (b * g - a * h) / det, (a * e - b * d) / det};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void check_grad(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double tol = 1e-6) {
  std::mt19937_64 rng(7);
  GradcheckOptions opts;
  opts.step = 1e-6;
  auto r = gradcheck(f, std::move(wrt), opts, rng);
  CHECK(r.checked > 0);
  CHECK(r.max_relative_error < tol);
}

}  // namespace

TEST_CASE("matmul forward") {
  std::mt19937_64 rng(1);
  SUBCASE("identity times M is M") {
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor m = random_tensor({3, 3}, rng);
    CHECK(max_abs_diff(ops::matmul(eye, m).data(), m.data()) == 0.0);
  }
  SUBCASE("M times closed-form inverse is identity") {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor m = random_tensor({3, 3}, rng);
      Tensor inv({3, 3}, inverse3(m.data()));
      Tensor p = ops::matmul(m, inv);
      CHECK(max_abs_diff(p.data(), std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1}) < 1e-10);
    }
  }
  SUBCASE("batch axes broadcast") {
    Tensor w = random_tensor({4, 2}, rng);
    Tensor x = random_tensor({5, 2, 3}, rng);
    Tensor y = ops::matmul(w, x);
    CHECK(y.shape() == Shape{5, 4, 3});
    Tensor x1 = ops::slice(x, 0, 3, 1);
    Tensor y1 = ops::matmul(w, ops::reshape(x1, {2, 3}));
    Tensor y3 = ops::reshape(ops::slice(y, 0, 3, 1), {4, 3});
    CHECK(max_abs_diff(y1.data(), y3.data()) < 1e-15);
  }
  SUBCASE("mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
      ops::matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }
}

TEST_CASE("matmul gradient of sum wrt A is ones times B^T") {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum_all(ops::matmul(a, b)));
  }
  // Central differences, step 1e-6.
  const double h = 1e-6;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    a.mutable_data()[i] = x + h;
    const double fp = ops::sum_all(ops::matmul(a, b)).item();
    a.mutable_data()[i] = x - h;
    const double fm = ops::sum_all(ops::matmul(a, b)).item();
    a.mutable_data()[i] = x;
    const double fd = (fp - fm) / (2 * h);
    const std::size_t col = i % 4;
    const double expected = b.at({col, 0}) + b.at({col, 1});
    CHECK(a.grad()[i] == doctest::Approx(fd).epsilon(1e-6));
    CHECK(a.grad()[i] == doctest::Approx(expected).epsilon(1e-12));
  }
  Tensor w = random_tensor({4, 2}, rng, true);
  Tensor x = random_tensor({5, 2, 3}, rng, true);
  check_grad([&] { return ops::sum_all(ops::matmul(w, x) * ops::matmul(w, x)); }, {w, x});
}

TEST_CASE("elementwise") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 5}, rng);
  CHECK(max_abs_diff(ops::add(x, Tensor::zeros({2, 5})).data(), x.data()) == 0.0);
  CHECK(max_abs_diff(ops::mul(x, Tensor::full({2, 5}, 1.0)).data(), x.data()) == 0.0);
  CHECK(max_abs_diff(ops::elementwise(ops::Elementwise::scale, x, nullptr, 2.0).data(),
                     ops::add(x, x).data()) == 0.0);

  SUBCASE("gradients match finite differences") {
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4}, rng, true);
    Tensor c = ops::add_scalar(random_tensor({3, 1}, rng, false), 2.5);
    c.set_requires_grad(true);
    check_grad([&] { return ops::sum_all(a * b); }, {a, b});
    check_grad([&] { return ops::sum_all(ops::div(a, c) - b); }, {a, b, c});
    check_grad([&] { return ops::sum_all(ops::neg(a) * a); }, {a});
    check_grad([&] { return ops::sum_all(ops::sqrt(c) * 3.0); }, {c});
  }
  SUBCASE("relu") {
    Tensor v({4}, {-1.0, 0.0, 0.5, 2.0});
    auto r = ops::relu(v);
    CHECK(max_abs_diff(r.data(), std::vector<double>{0, 0, 0.5, 2.0}) == 0.0);
  }
  SUBCASE("division by zero fails") {
    Tensor a({2}, {1.0, 2.0});
    Tensor b({2}, {1.0, 0.0});
    CHECK_THROWS_AS(ops::div(a, b), NumericalError);
  }
  SUBCASE("broadcast mismatch fails") {
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
  }
}

TEST_CASE("reductions") {
  std::mt19937_64 rng(4);
  Tensor c = Tensor::full({3, 6}, 2.5);
  auto m = ops::mean(c, 1);
  for (double v : m.data()) CHECK(v == doctest::Approx(2.5));
  CHECK(ops::sum_all(Tensor::full({7}, 1.0)).item() == 7.0);

  SUBCASE("mean gradient is 1/n") {
    Tensor x = random_tensor({5}, rng, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::mean(x, 0));
    for (double g : x.grad()) CHECK(g == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("max ties route to the lowest index") {
    Tensor x({2, 3}, {1.0, 4.0, 4.0, 3.0, 3.0, 1.0}, true);
    Tape tape;
    TapeScope scope(tape);
    auto y = ops::max(x, 1);
    CHECK(y.data()[0] == 4.0);
    CHECK(y.data()[1] == 3.0);
    tape.backward(ops::sum_all(y));
    CHECK(max_abs_diff(x.grad(), std::vector<double>{0, 1, 0, 1, 0, 0}) == 0.0);
  }
  SUBCASE("keepdim and middle axes") {
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    auto s = ops::sum(x, 1, true);
    CHECK(s.shape() == Shape{2, 1, 4});
    CHECK(s.at({1, 0, 2}) == doctest::Approx(x.at({1, 0, 2}) + x.at({1, 1, 2}) + x.at({1, 2, 2})));
    check_grad([&] { return ops::sum_all(ops::mean(x, -1) * ops::max(x, 2, false)); }, {x});
  }
  SUBCASE("invalid axis fails") {
    CHECK_THROWS_AS(ops::sum(Tensor::zeros({2, 2}), 2), ShapeError);
    CHECK_THROWS_AS(ops::mean(Tensor::zeros({2, 2}), -3), ShapeError);
  }
}

TEST_CASE("softmax") {
  std::mt19937_64 rng(5);
  auto u = ops::softmax(Tensor::full({4}, 0.3), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  auto p = ops::softmax(Tensor({2}, {0.0, std::log(3.0)}), 0);
  CHECK(p.data()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p.data()[1] == doctest::Approx(0.75).epsilon(1e-14));
  auto big = ops::softmax(Tensor({2}, {1000.0, 1000.0}), 0);
  CHECK(big.data()[0] == doctest::Approx(0.5));

  Tensor x = random_tensor({3, 5}, rng, true);
  Tensor w = random_tensor({3, 5}, rng);
  check_grad([&] { return ops::sum_all(ops::softmax(x, 1) * w); }, {x});
  check_grad([&] { return ops::sum_all(ops::softmax(x, 0) * w); }, {x});

  Tensor bad({2}, {0.0, std::nan("")});
  CHECK_THROWS_AS(ops::softmax(bad, 0), NumericalError);
}

TEST_CASE("shape ops gradients") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({3, 4, 2}, rng, true);
  Tensor y = random_tensor({3, 1, 2}, rng, true);
  Tensor w = random_tensor({4, 3, 2}, rng);
  check_grad([&] { return ops::sum_all(ops::permute(x, {1, 0, 2}) * w); }, {x});
  check_grad([&] { return ops::sum_all(ops::transpose(x, 0, 1) * w); }, {x});
  check_grad(
      [&] {
        auto c = ops::concat({x, y, x}, 1);
        return ops::sum_all(c * c);
      },
      {x, y});
  check_grad([&] { return ops::sum_all(ops::slice(x, 1, 1, 2) * ops::slice(x, 1, 2, 2)); }, {x});
  check_grad([&] { return ops::sum_all(ops::reshape(x, {6, 4}) * ops::reshape(w, {6, 4})); }, {x});

  std::vector<std::size_t> idx{2, 0, 0, 1, 2, 2};
  auto g = ops::gather_rows(x, idx, {3, 2});
  CHECK(g.shape() == Shape{3, 2, 4, 2});
  CHECK(g.at({0, 1, 3, 1}) == x.at({0, 3, 1}));
  check_grad([&] { return ops::sum_all(ops::gather_rows(x, idx, {3, 2}) * ops::gather_rows(x, idx, {3, 2})); },
             {x});
  std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(ops::gather_rows(x, bad, {1}), ShapeError);
  CHECK_THROWS_AS(ops::slice(x, 1, 3, 2), ShapeError);
}

TEST_CASE("cross and select_max") {
  std::mt19937_64 rng(8);
  Tensor e1({1, 3}, {1, 0, 0});
  Tensor e2({1, 3}, {0, 1, 0});
  auto e3 = ops::cross(e1, e2);
  CHECK(max_abs_diff(e3.data(), std::vector<double>{0, 0, 1}) == 0.0);
  Tensor a = random_tensor({4, 3}, rng, true);
  Tensor b = random_tensor({4, 3}, rng, true);
  Tensor w = random_tensor({4, 3}, rng);
  check_grad([&] { return ops::sum_all(ops::cross(a, b) * w); }, {a, b});

  Tensor values = random_tensor({2, 3, 3}, rng, true);
  Tensor scores({2, 3}, {0.1, 0.7, 0.7, -1.0, -3.0, -2.0});
  auto s = ops::select_max(values, scores, 1);
  CHECK(s.shape() == Shape{2, 3});
  CHECK(s.at({0, 2}) == values.at({0, 1, 2}));
  CHECK(s.at({1, 0}) == values.at({1, 0, 0}));
  check_grad([&] { return ops::sum_all(ops::select_max(values, scores, 1) * ops::slice(w, 0, 0, 2)); },
             {values});
}

TEST_CASE("backward") {
  std::mt19937_64 rng(9);
  SUBCASE("sum gives ones") {
    Tensor x = random_tensor({6}, rng, true);
    Tape tape;
    TapeScope scope(tape);
    backward(ops::sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("squared Frobenius norm gives 2x") {
    Tensor x = random_tensor({2, 3}, rng, true);
    Tape tape;
    TapeScope scope(tape);
    backward(ops::sum_all(x * x));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);
  }
  SUBCASE("non-scalar loss fails") {
    Tensor x = random_tensor({2}, rng, true);
    Tape tape;
    TapeScope scope(tape);
    auto y = x * x;
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  SUBCASE("every participating leaf gets a gradient") {
    Tensor x = random_tensor({3}, rng, true);
    Tensor unused_path = random_tensor({3}, rng, true);
    Tape tape;
    TapeScope scope(tape);
    auto dead = ops::relu(ops::scale(ops::relu(unused_path), 0.0));
    auto loss = ops::sum_all(x * x) + ops::sum_all(dead);
    tape.backward(loss);
    CHECK(x.has_grad());
    CHECK(unused_path.has_grad());
  }
  SUBCASE("no tape means no recording") {
    Tensor x = random_tensor({3}, rng, true);
    auto y = x * x;
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("replay is deterministic") {
    Tensor x = random_tensor({4, 3}, rng, true);
    Tensor w = random_tensor({3, 3}, rng, true);
    std::vector<double> first;
    for (int run = 0; run < 2; ++run) {
      x.zero_grad();
      w.zero_grad();
      Tape tape;
      TapeScope scope(tape);
      auto y = ops::softmax(ops::matmul(x, w), 1);
      tape.backward(ops::sum_all(y * y));
      std::vector<double> g(w.grad().begin(), w.grad().end());
      if (run == 0) {
        first = g;
      } else {
        CHECK(std::memcmp(first.data(), g.data(), g.size() * sizeof(double)) == 0);
      }
    }
  }
}

TEST_CASE("single precision storage rounds values") {
  Tensor x({2}, {0.1, 1.0 / 3.0}, false, Dtype::f32);
  CHECK(x.data()[0] == static_cast<double>(0.1f));
  Tensor y = ops::add(x, Tensor({2}, {1e-12, 0.0}));
  CHECK(y.dtype() == Dtype::f32);
  CHECK(y.data()[0] == static_cast<double>(0.1f));
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> extent(1, 4);
  std::uniform_int_distribution<int> rank(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<NamedTensor> entries;
    const int count = extent(rng);
    for (int e = 0; e < count; ++e) {
      Shape shape(static_cast<std::size_t>(rank(rng)));
      for (auto& s : shape) s = static_cast<std::size_t>(extent(rng));
      Tensor t = random_tensor(shape, rng);
      t.mutable_data()[0] = trial % 2 ? -0.0 : 1e-310;
      entries.push_back({"layer" + std::to_string(e) + ".weight", t});
    }
    std::stringstream buf;
    write_checkpoint(buf, entries);
    auto back = read_checkpoint(buf);
    REQUIRE(back.size() == entries.size());
    for (std::size_t e = 0; e < entries.size(); ++e) {
      CHECK(back[e].name == entries[e].name);
      CHECK(back[e].value.shape() == entries[e].value.shape());
      CHECK(std::memcmp(back[e].value.data().data(), entries[e].value.data().data(),
                        entries[e].value.numel() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("checkpoint header layout and errors") {
  std::vector<NamedTensor> entries{{"w", Tensor({2}, {1.0, -2.0})}};
  std::stringstream buf;
  write_checkpoint(buf, entries);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 9) == "CHOIRCKPT");
  // magic + version + count + u16 len + "w" + u8 rank + u64 extent + 2 f64
  CHECK(bytes.size() == 9 + 4 + 4 + 2 + 1 + 1 + 8 + 16);
  CHECK(static_cast<unsigned char>(bytes[9]) == 1);

  std::string wrong = bytes;
  wrong[0] = 'X';
  std::stringstream bad_magic(wrong);
  CHECK_THROWS_AS(read_checkpoint(bad_magic), DataError);

  std::string future = bytes;
  future[9] = 9;
  std::stringstream bad_version(future);
  CHECK_THROWS_WITH_AS(read_checkpoint(bad_version), doctest::Contains("version 9"), DataError);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(truncated), DataError);
}

TEST_CASE("adam") {
  SUBCASE("first step moves by the learning rate against the gradient sign") {
    Tensor p({3}, {1.0, -2.0, 0.5}, true);
    p.mutable_grad()[0] = 4.0;
    p.mutable_grad()[1] = -0.01;
    p.mutable_grad()[2] = 0.0;
    Adam adam({p}, AdamConfig{});
    adam.step();
    CHECK(p.data()[0] == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(p.data()[1] == doctest::Approx(-1.99).epsilon(1e-6));
    CHECK(p.data()[2] == 0.5);
  }
  SUBCASE("minimizes a quadratic") {
    Tensor p({2}, {3.0, -1.0}, true);
    Adam adam({p}, AdamConfig{0.05});
    for (int it = 0; it < 2000; ++it) {
      adam.zero_grad();
      Tape tape;
      TapeScope scope(tape);
      auto d = ops::add(p, Tensor({2}, {-1.0, 2.0}));
      tape.backward(ops::sum_all(d * d));
      adam.step();
    }
    CHECK(p.data()[0] == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(p.data()[1] == doctest::Approx(-2.0).epsilon(1e-3));
  }
}
