#include "doctest.h"

#include "gxn/conv.hpp"
#include "gxn/grad_check.hpp"
#include "gxn/random.hpp"
#include "gxn/serialize.hpp"

#include <cmath>
#include <sstream>

using namespace gxn;

namespace {

Tensor vec(std::initializer_list<double> v, bool tracked = false) { return Tensor::from({v.size()}, v, tracked); }

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor::Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = lo + (hi - lo) * uniform01(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

// Keeps values at least `gap` away from zero so kinked ops are smooth nearby.
Tensor away_from_zero(Tensor t, double gap) {
  Tensor::Vector v = t.values();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) < gap) v[i] = v[i] < 0 ? -gap - std::abs(v[i]) : gap + std::abs(v[i]);
  }
  return Tensor::constant(t.shape(), v);
}

}  // namespace

TEST_CASE("elementwise examples") {
  CHECK(add(vec({1, 2}), vec({3, 4})).values() == Eigen::Vector2d(4, 6));
  CHECK(max0diff(vec({0.5, 1.0}), vec({1.0, 0.5})).values() == Eigen::Vector2d(0.5, 0.0));
  CHECK(sigmoid(vec({0.0})).item() == 0.5);
  CHECK(relu(vec({-1.0, 2.0})).values() == Eigen::Vector2d(0.0, 2.0));
  CHECK(square(vec({-3.0})).item() == 9.0);
}

TEST_CASE("binary op shape mismatch reports both shapes") {
  try {
    add(vec({1, 2, 3}), vec({1, 2}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
}

TEST_CASE("broadcasting of trailing-1 columns and row vectors") {
  const auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const auto col = Tensor::from({2, 1}, {10, 20});
  const auto row = vec({100, 200});
  CHECK(add(m, col).values() == Eigen::Vector4d(11, 12, 23, 24));
  CHECK(add(m, row).values() == Eigen::Vector4d(101, 202, 103, 204));
  CHECK(add(col, m).values() == Eigen::Vector4d(11, 12, 23, 24));

  auto c = Tensor::from({2, 1}, {1, 1}, true);
  backward(sum(mul(m, c)));
  CHECK(c.grad() == Eigen::Vector2d(3, 7));
}

TEST_CASE("log and exp domain violations are flagged, not thrown") {
  reset_nonfinite_events();
  const auto y = log(vec({-1.0, 1.0}));
  CHECK(std::isnan(y[0]));
  CHECK(y[1] == 0.0);
  CHECK(nonfinite_events() == 1);
  exp(vec({1e6}));
  CHECK(nonfinite_events() == 2);
  reset_nonfinite_events();
}

TEST_CASE("matmul") {
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).values() == m.values());
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({3, 1}, {1, 2, 3})), ShapeError);

  // Oracle: central differences of f(a) = a00*2 + a01*5 evaluated directly.
  auto f = [](double a0, double a1) { return a0 * 2.0 + a1 * 5.0; };
  const double h = 1e-5;
  const double fd0 = (f(1 + h, 1) - f(1 - h, 1)) / (2 * h);
  const double fd1 = (f(1, 1 + h) - f(1, 1 - h)) / (2 * h);
  CHECK(fd0 == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(fd1 == doctest::Approx(5.0).epsilon(1e-9));

  auto a = Tensor::from({1, 2}, {1, 1}, true);
  const auto b = Tensor::from({2, 1}, {2, 5});
  backward(sum(matmul(a, b)));
  CHECK(a.grad()[0] == doctest::Approx(fd0).epsilon(1e-9));
  CHECK(a.grad()[1] == doctest::Approx(fd1).epsilon(1e-9));
}

TEST_CASE("reductions") {
  CHECK(l2_norm_sq(vec({0.5, 0.0})).item() == 0.25);
  CHECK(mean(vec({1, 2, 3})).item() == 2.0);
  CHECK_THROWS_AS(sum(Tensor::zeros({0})), ShapeError);
  CHECK_THROWS_AS(sum(Tensor::zeros({2, 0}), 1), ShapeError);

  const auto m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum(m, 0).values() == Eigen::Vector3d(5, 7, 9));
  CHECK(sum(m, 1).values() == Eigen::Vector2d(6, 15));
  CHECK(l2_norm_sq(m, 1).values() == Eigen::Vector2d(14, 77));

  const auto idx = max_index(Tensor::from({2, 3}, {1, 9, 3, 7, 5, 7}));
  CHECK(!idx.tracked());
  CHECK(idx.values() == Eigen::Vector2d(1, 0));  // first maximum on ties
}

TEST_CASE("softmax cross-entropy") {
  CHECK(softmax_xent(vec({0.3, 0.3, 0.3, 0.3}), 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(softmax_xent(vec({0, 1e6, 0}), 1).item() == doctest::Approx(0.0));

  auto logits = vec({0.0, 0.0}, true);
  backward(softmax_xent(logits, 0));
  CHECK(logits.grad()[0] == doctest::Approx(-0.5));
  CHECK(logits.grad()[1] == doctest::Approx(0.5));

  CHECK_THROWS_AS(softmax_xent(vec({0.0, 0.0}), 2), std::out_of_range);
}

TEST_CASE("backward") {
  auto x = vec({3.0}, true);
  backward(square(x));
  CHECK(x.grad()[0] == 6.0);

  auto y = vec({3.0}, true);
  backward(scale(y, 1.0));
  CHECK(y.grad()[0] == 1.0);

  auto z = vec({3.0}, true);
  auto w = vec({2.0}, true);
  backward(square(w));
  CHECK(z.grad()[0] == 0.0);

  CHECK_THROWS_AS(backward(mul(vec({1, 2}, true), vec({1, 2}))), ShapeError);
  CHECK_THROWS(backward(vec({1.0})));
}

TEST_CASE("backward accumulates: L1 then L2 equals L1 + L2") {
  Rng rng(7);
  const auto init = random_tensor({4}, rng);
  auto a = Tensor::parameter(init.shape(), init.values());
  auto b = Tensor::parameter(init.shape(), init.values());
  auto l1 = [](const Tensor& t) { return sum(tanh(t)); };
  auto l2 = [](const Tensor& t) { return l2_norm_sq(sigmoid(t)); };
  backward(l1(a));
  backward(l2(a));
  backward(add(l1(b), l2(b)));
  CHECK((a.grad() - b.grad()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("tape order visits every node after all its consumers") {
  auto x = vec({1.0, 2.0}, true);
  auto y = tanh(x);
  auto loss = sum(add(mul(y, y), exp(y)));
  GradTape<double> tape(loss);
  const auto order = tape.order();
  std::unordered_map<const Node<double>*, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (const auto* node : order) {
    for (const auto& parent : node->parents) {
      if (parent->tracked) CHECK(pos.at(parent.get()) < pos.at(node));
    }
  }
  CHECK(order.back() == loss.node_ptr().get());
}

TEST_CASE("grad_check examples") {
  Rng rng(3);
  const auto x = random_tensor({6}, rng);
  auto report = grad_check([](const Tensor& t) { return l2_norm_sq(t); }, x, 1e-5);
  CHECK(report.checked == 6);
  CHECK(report.max_rel_error <= 1e-6);

  const auto coeffs = random_tensor({6}, rng);
  report = grad_check([&](const Tensor& t) { return sum(mul(t, coeffs)); }, x, 1e-5);
  CHECK(report.max_rel_error < 1e-9);

  // Coordinate 1 sits on the relu kink and must be excluded.
  report = grad_check([](const Tensor& t) { return sum(relu(t)); }, vec({0.5, 1e-6, -0.7}), 1e-5);
  CHECK(report.skipped_kinks == 1);
  CHECK(report.checked == 2);
  CHECK(report.max_rel_error < 1e-9);

  report = grad_check([](const Tensor& t) { return sum(log(t)); }, vec({1e-6, 1.0}), 1e-5);
  CHECK(report.nonfinite.size() == 1);
}

TEST_CASE("property: every op passes grad_check at 10 random points") {
  Rng rng(11);
  const double h = 1e-5;
  auto check = [&](const char* name, auto&& f, Shape shape, bool kinked, double lo = -1.0, double hi = 1.0) {
    for (int trial = 0; trial < 10; ++trial) {
      auto x = random_tensor(shape, rng, lo, hi);
      if (kinked) x = away_from_zero(x, 0.05);
      const auto report = grad_check(f, x, h);
      INFO(name << " trial " << trial << " worst " << report.worst);
      CHECK(report.max_rel_error <= 1e-4);
      CHECK(report.nonfinite.empty());
    }
  };
  const auto other = random_tensor({3, 4}, rng);
  const auto other_t = random_tensor({4, 2}, rng);
  const auto weight = random_tensor({5, 4}, rng);
  const auto bias = random_tensor({5}, rng);
  const std::vector<std::size_t> targets{1, 3, 0};

  check("add", [&](const Tensor& t) { return l2_norm_sq(add(t, other)); }, {3, 4}, false);
  check("sub", [&](const Tensor& t) { return l2_norm_sq(sub(other, t)); }, {3, 4}, false);
  check("mul", [&](const Tensor& t) { return sum(mul(t, tanh(t))); }, {3, 4}, false);
  check("max0diff", [&](const Tensor& t) { return l2_norm_sq(max0diff(t, scale(t, -0.5))); }, {3, 4}, true);
  check("relu", [&](const Tensor& t) { return l2_norm_sq(relu(t)); }, {3, 4}, true);
  check("leaky_relu", [&](const Tensor& t) { return l2_norm_sq(leaky_relu(t, 0.2)); }, {3, 4}, true);
  check("abs", [&](const Tensor& t) { return sum(mul(abs(t), other)); }, {3, 4}, true);
  check("tanh", [&](const Tensor& t) { return sum(mul(tanh(t), other)); }, {3, 4}, false);
  check("sigmoid", [&](const Tensor& t) { return sum(mul(sigmoid(t), other)); }, {3, 4}, false);
  check("log_sigmoid", [&](const Tensor& t) { return sum(mul(log_sigmoid(scale(t, 4.0)), other)); }, {3, 4}, false);
  check("exp", [&](const Tensor& t) { return sum(mul(exp(t), other)); }, {3, 4}, false);
  check("log", [&](const Tensor& t) { return sum(mul(log(t), other)); }, {3, 4}, false, 0.5, 2.0);
  check("square", [&](const Tensor& t) { return sum(mul(square(t), other)); }, {3, 4}, false);
  check("matmul", [&](const Tensor& t) { return l2_norm_sq(matmul(t, other_t)); }, {3, 4}, false);
  check("linear", [&](const Tensor& t) { return l2_norm_sq(linear(t, weight, bias)); }, {3, 4}, false);
  check("transpose", [&](const Tensor& t) { return sum(mul(transpose(t), transpose(other))); }, {3, 4}, false);
  check("axis sums", [&](const Tensor& t) { return add(l2_norm_sq(sum(t, 0)), l2_norm_sq(sum(t, 1))); }, {3, 4}, false);
  check("mean", [&](const Tensor& t) { return mean(square(t)); }, {3, 4}, false);
  check("pick_log_softmax", [&](const Tensor& t) { return sum(mul(pick_log_softmax(t, targets), vec({1.0, -2.0, 0.5}))); }, {3, 4}, false);
  check("concat/slice", [&](const Tensor& t) { return l2_norm_sq(slice_last(concat_last<double>({other, t}), 2, 4)); }, {3, 4}, false);
  check("gather_rows", [&](const Tensor& t) { return l2_norm_sq(tanh(gather_rows(t, std::vector<std::size_t>{2, 0, 2}))); }, {3, 4}, false);
  check("diagonal", [&](const Tensor& t) { return l2_norm_sq(tanh(diagonal(t))); }, {4, 4}, false);
  check("where_rows", [&](const Tensor& t) { return l2_norm_sq(where_rows({true, false, true}, tanh(t), scale(t, 3.0))); }, {3, 4}, false);
  check("tile_spatial", [&](const Tensor& t) { return l2_norm_sq(tanh(tile_spatial(t, 2, 3))); }, {3, 4}, false);
  check("order_violation_matrix", [&](const Tensor& t) { return sum(mul(order_violation_matrix(t, other), Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}))); },
        {3, 4}, true);
  check("clamp", [&](const Tensor& t) { return l2_norm_sq(clamp(t, -2.0, 2.0)); }, {3, 4}, false);
  check("normalize_rows", [&](const Tensor& t) { return sum(mul(normalize_rows(t), other)); }, {3, 4}, false);
  check("normalize vector", [&](const Tensor& t) { return sum(mul(normalize_rows(t), bias)); }, {5}, false);
}

TEST_CASE("normalize_rows") {
  const auto x = Tensor::from({2, 2}, {3, 4, 0, 0});
  const auto y = normalize_rows(x);
  CHECK(y.values()[0] == doctest::Approx(0.6));
  CHECK(y.values()[1] == doctest::Approx(0.8));
  CHECK(y.values()[2] == 0.0);
  CHECK(std::isfinite(y.values()[3]));
  CHECK_THROWS_AS(normalize_rows(Tensor::zeros({1, 2, 2})), ShapeError);
}

TEST_CASE("convolution layers pass grad_check") {
  Rng rng(5);
  const auto w = random_tensor({3, 4, 4, 2}, rng);
  const auto b = random_tensor({3}, rng);
  const auto x = random_tensor({2, 6, 6, 2}, rng);
  auto r = grad_check([&](const Tensor& t) { return l2_norm_sq(conv2d(t, w, b, 2, 1)); }, x, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  r = grad_check([&](const Tensor& t) { return l2_norm_sq(conv2d(x, t, b, 2, 1)); }, w, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  r = grad_check([&](const Tensor& t) { return l2_norm_sq(conv2d(x, w, t, 2, 1)); }, b, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);

  const auto wt = random_tensor({2, 4, 4, 3}, rng);
  const auto y = random_tensor({2, 3, 3, 2}, rng);
  r = grad_check([&](const Tensor& t) { return l2_norm_sq(conv_transpose2d(t, wt, b, 2, 1)); }, y, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  r = grad_check([&](const Tensor& t) { return l2_norm_sq(conv_transpose2d(y, t, b, 2, 1)); }, wt, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(conv_transpose2d(y, wt, b, 2, 1).shape() == Shape{2, 6, 6, 3});
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  Rng rng(9);
  const auto w = random_tensor({3, 4, 4, 2}, rng);  // conv: 2 -> 3 channels
  const auto zero3 = Tensor::zeros({3});
  const auto zero2 = Tensor::zeros({2});
  const auto x = random_tensor({1, 8, 8, 2}, rng);
  const auto y = random_tensor({1, 4, 4, 3}, rng);
  // Same weights reinterpreted as [Cin=3, k, k, Cout=2] for the transpose.
  const auto wt = Tensor::constant({3, 4, 4, 2}, w.values());
  const double lhs = conv2d(x, w, zero3, 2, 1).values().dot(y.values());
  const double rhs = x.values().dot(conv_transpose2d(y, wt, zero2, 2, 1).values());
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("batch norm") {
  Rng rng(13);
  const auto gamma = random_tensor({3}, rng, 0.5, 1.5);
  const auto beta = random_tensor({3}, rng);
  const auto x = random_tensor({4, 2, 2, 3}, rng);
  BatchNormStats<double> stats(3);
  auto r = grad_check([&](const Tensor& t) { return sum(mul(tanh(batch_norm(t, gamma, beta, stats, true)), x)); }, x, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  r = grad_check([&](const Tensor& t) { return l2_norm_sq(tanh(batch_norm(x, t, beta, stats, true))); }, gamma, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  r = grad_check([&](const Tensor& t) { return sum(mul(tanh(batch_norm(t, gamma, beta, stats, false)), x)); }, x, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);

  // Mode switch changes statistics sourcing, never shapes.
  CHECK(batch_norm(x, gamma, beta, stats, true).shape() == batch_norm(x, gamma, beta, stats, false).shape());
  // Training output is normalized per channel.
  const auto y = batch_norm(x, Tensor::from({3}, {1, 1, 1}), Tensor::zeros({3}), stats, true);
  const auto ym = detail::as_matrix<double>(y.values(), 16, 3);
  CHECK(ym.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tape replay is deterministic") {
  auto run = [] {
    Rng rng(42);
    auto w = Tensor::parameter({3, 4}, random_tensor({3, 4}, rng).values());
    const auto x = random_tensor({2, 4}, rng);
    auto loss = l2_norm_sq(tanh(linear(x, w, Tensor::zeros({3}))));
    backward(loss);
    return std::pair{loss.item(), Tensor::Vector(w.grad())};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("tensor serialization round-trips bit-exactly") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    Shape shape;
    const auto rank = 1 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(1 + uniform_index(rng, 5));
    const auto t = random_tensor(shape, rng, -1e3, 1e3);
    std::stringstream ss;
    write_tensor(ss, t);
    CHECK(ss.str().size() == 8 * (1 + rank + t.size()));
    const auto back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());
  }
  std::stringstream bad("\x01\x00");
  CHECK_THROWS(read_tensor(bad));
}
