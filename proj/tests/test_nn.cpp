#include "doctest.h"

#include "gxn/grad_check.hpp"
#include "gxn/nn.hpp"

#include <cmath>

using namespace gxn;
using namespace gxn::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor::Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = lo + (hi - lo) * uniform01(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

void zero_all(Parameters& params) {
  for (auto& [name, t] : params.tensors) t->mutable_values().setZero();
}

double max_abs_diff(const Tensor& a, const Tensor& b) { return (a.values() - b.values()).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("gru_step with zero parameters halves the state") {
  Rng rng(1);
  GruCell cell(3, 4, rng);
  Parameters p;
  cell.collect("gru", p);
  zero_all(p);
  const auto x = random_tensor({1, 3}, rng);
  const auto v = Tensor::from({1, 4}, {0.8, -0.4, 2.0, 0.0});
  CHECK(max_abs_diff(cell.step(x, v), Tensor::from({1, 4}, {0.4, -0.2, 1.0, 0.0})) == 0.0);
  CHECK(cell.step(x, Tensor::zeros({1, 4})).values().isZero(0.0));
}

TEST_CASE("gru_step rejects mismatched shapes") {
  Rng rng(2);
  GruCell cell(3, 4, rng);
  CHECK_THROWS_AS(cell.step(Tensor::zeros({1, 2}), Tensor::zeros({1, 4})), ShapeError);
  CHECK_THROWS_AS(cell.step(Tensor::zeros({1, 3}), Tensor::zeros({1, 5})), ShapeError);
  CHECK_THROWS_AS(cell.step(Tensor::zeros({2, 3}), Tensor::zeros({1, 4})), ShapeError);
}

TEST_CASE("gru_step gradients match finite differences") {
  Rng rng(3);
  GruCell cell(3, 4, rng);
  const auto x0 = random_tensor({2, 3}, rng);
  const auto h0 = random_tensor({2, 4}, rng);
  const auto probe = random_tensor({2, 4}, rng);
  const auto rx = grad_check([&](const Tensor& x) { return sum(mul(cell.step(x, h0), probe)); }, x0, 1e-5);
  CHECK(rx.ok(1e-4));
  const auto rh = grad_check([&](const Tensor& h) { return sum(mul(cell.step(x0, h), probe)); }, h0, 1e-5);
  CHECK(rh.ok(1e-4));
  Parameters p;
  cell.collect("gru", p);
  const auto x = Tensor::parameter(x0.shape(), x0.values());
  auto leaves = p.leaves();
  leaves.push_back(x);
  const auto rp = grad_check<double>([&] { return sum(mul(cell.step(x, h0), probe)); }, leaves);
  CHECK(rp.ok(1e-4));
  CHECK(rp.checked == p.count() + x.size());
}

TEST_CASE("encode_sequence of length one is a single step from zero") {
  Rng rng(4);
  EmbeddingTable table(6, 3, rng);
  GruCell cell(3, 5, rng);
  const std::vector<TokenId> tokens{4};
  const auto expected = cell.step(table.lookup(tokens), Tensor::zeros({1, 5}));
  CHECK(max_abs_diff(encode_sequence(Direction::forward, tokens, table, cell), expected) == 0.0);
}

TEST_CASE("encode_sequence rejects empty sequences and unknown ids") {
  Rng rng(5);
  EmbeddingTable table(6, 3, rng);
  GruCell fwd(3, 4, rng), bwd(3, 4, rng);
  LinearMap merge(8, 4, rng);
  CHECK_THROWS_AS(encode_sequence(Direction::forward, std::vector<TokenId>{}, table, fwd), std::invalid_argument);
  CHECK_THROWS_AS(encode_sequence(Direction::forward, std::vector<TokenId>{1, 6}, table, fwd), std::invalid_argument);
  CHECK_THROWS_AS(encode_sequence(Direction::bidirectional, std::vector<TokenId>{1}, table, fwd), std::invalid_argument);
  CHECK(encode_sequence(Direction::bidirectional, std::vector<TokenId>{1, 2}, table, fwd, &bwd, &merge).shape() == Shape{4});
}

TEST_CASE("tied bidirectional cells agree on a palindrome") {
  Rng rng(6);
  EmbeddingTable table(8, 4, rng);
  GruCell cell(4, 5, rng);
  const std::vector<std::vector<TokenId>> seqs{{1, 5, 2, 5, 1}, {3, 7, 7, 3}};
  const auto states = run_gru(seqs, table, cell, &cell);
  CHECK(max_abs_diff(states.forward_final, states.backward_final) < 1e-15);

  const std::vector<std::vector<TokenId>> skew{{1, 5, 2, 4, 1}};
  const auto s = run_gru(skew, table, cell, &cell);
  CHECK(max_abs_diff(s.forward_final, s.backward_final) > 1e-6);
}

TEST_CASE("swapping interior tokens changes the encoding") {
  Rng rng(7);
  EmbeddingTable table(8, 4, rng);
  SentenceEncoder uni(Direction::forward, 4, 6, rng);
  SentenceEncoder bi(Direction::bidirectional, 4, 6, rng);
  const std::vector<std::vector<TokenId>> a{{0, 2, 3, 7}};
  const std::vector<std::vector<TokenId>> b{{0, 3, 2, 7}};
  CHECK(max_abs_diff(uni.encode(a, table), uni.encode(b, table)) > 1e-6);
  CHECK(max_abs_diff(bi.encode(a, table), bi.encode(b, table)) > 1e-6);
  CHECK(bi.encode(a, table).shape() == Shape{1, 6});
}

TEST_CASE("batched encoding of ragged sequences matches one-at-a-time encoding") {
  Rng rng(8);
  EmbeddingTable table(9, 4, rng);
  SentenceEncoder enc(Direction::bidirectional, 4, 5, rng);
  const std::vector<std::vector<TokenId>> seqs{{1, 2, 3}, {4}, {5, 6, 7, 8, 0}};
  const auto batched = enc.encode(seqs, table);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::vector<std::vector<TokenId>> one{seqs[i]};
    const auto single = enc.encode(one, table);
    CHECK((batched.matrix().row(static_cast<Eigen::Index>(i)) - single.matrix().row(0)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("sentence encoder gradients over all parameters") {
  Rng rng(9);
  EmbeddingTable table(7, 3, rng);
  SentenceEncoder enc(Direction::bidirectional, 3, 4, rng);
  Parameters p;
  table.collect("we", p);
  enc.collect("enc", p);
  const std::vector<std::vector<TokenId>> seqs{{1, 2, 3}, {6, 0}};
  const auto probe = random_tensor({2, 4}, rng);
  const auto report = grad_check<double>([&] { return sum(mul(enc.encode(seqs, table), probe)); }, p.leaves());
  CHECK(report.ok(1e-4));
}

TEST_CASE("embedding lookup returns rows and rejects unknown ids") {
  Rng rng(10);
  EmbeddingTable table(5, 3, rng);
  const std::vector<TokenId> ids{4, 0};
  const auto rows = table.lookup(ids);
  CHECK(rows.matrix().row(0) == table.weight.matrix().row(4));
  CHECK(rows.matrix().row(1) == table.weight.matrix().row(0));
  const std::vector<TokenId> bad{5};
  CHECK_THROWS_AS(table.lookup(bad), std::invalid_argument);
}

TEST_CASE("conv stack declared output matches a probe") {
  Rng rng(11);
  ConvStack down({16, 16, 3}, {{.out_channels = 4}, {.out_channels = 6, .activation = Activation::leaky_relu}}, rng);
  CHECK(down.output_shape() == Shape{4, 4, 6});
  const auto y = down.forward(random_tensor({2, 16, 16, 3}, rng), Mode::train);
  CHECK(y.shape() == Shape{2, 4, 4, 6});
  CHECK(down.forward(random_tensor({1, 16, 16, 3}, rng), Mode::eval).shape() == Shape{1, 4, 4, 6});

  ConvStack up({4, 4, 6}, {{.out_channels = 5, .transposed = true}, {.out_channels = 3, .transposed = true, .batch_norm = false}}, rng);
  CHECK(up.output_shape() == Shape{16, 16, 3});
  CHECK(up.forward(random_tensor({2, 4, 4, 6}, rng), Mode::train).shape() == Shape{2, 16, 16, 3});
  CHECK_THROWS_AS(down.forward(random_tensor({1, 8, 8, 3}, rng), Mode::eval), ShapeError);
}

TEST_CASE("image encoder: zero image, determinism, shape errors") {
  Rng rng(12);
  ImageEncoder enc({.image_size = 16, .channels = {4, 4}, .feature_dim = 8, .dropout = 0.1}, rng);
  CHECK(enc.feature_dim() == 8);
  const auto zero = enc.encode(Tensor::zeros({1, 16, 16, 3}), Mode::eval);
  CHECK(zero.shape() == Shape{1, 8});
  CHECK(zero.values().isZero(0.0));

  const auto img = random_tensor({1, 16, 16, 3}, rng);
  const auto a = enc.encode(img, Mode::eval);
  const auto b = enc.encode(img, Mode::eval, &rng);
  CHECK(a.values() == b.values());
  CHECK_THROWS_AS(enc.encode(Tensor::zeros({1, 8, 8, 3}), Mode::eval), ShapeError);
  CHECK_THROWS_AS(enc.encode(Tensor::zeros({1, 16, 16, 1}), Mode::eval), ShapeError);
}

TEST_CASE("image encoder gradients wrt pixels and parameters") {
  Rng rng(13);
  ImageEncoder enc({.image_size = 8, .channels = {3, 4}, .feature_dim = 5, .dropout = 0.0}, rng);
  Parameters p;
  enc.collect("cnn", p);
  // Non-zero biases keep ReLU inputs away from their kinks.
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with("bias") || name.ends_with("beta")) t->mutable_values() = random_tensor(t->shape(), rng, 0.05, 0.3).values();
  }
  const auto images = random_tensor({3, 8, 8, 3}, rng);
  const auto probe = random_tensor({3, 5}, rng);
  const auto px = grad_check([&](const Tensor& x) { return sum(mul(enc.encode(x, Mode::eval), probe)); }, images, 1e-5);
  CHECK(px.ok(1e-4));
  CHECK(px.checked > 0);

  const auto x = images;
  GradCheckOptions options;
  options.max_coords_per_tensor = 24;
  const auto pp = grad_check<double>([&] { return sum(mul(enc.encode(x, Mode::train), probe)); }, p.leaves(), options);
  CHECK(pp.ok(1e-4));
  CHECK(pp.checked > 0);
}

TEST_CASE("image decoder output shape, range and determinism") {
  Rng rng(14);
  ImageDecoder dec({.code_dim = 6, .image_size = 64, .channels = {8, 6, 4, 4}}, rng);
  const auto code = random_tensor({2, 6}, rng, -3.0, 3.0);
  const auto out = dec.decode(code, Mode::train);
  CHECK(out.shape() == Shape{2, 64, 64, 3});
  CHECK(out.values().maxCoeff() <= 1.0);
  CHECK(out.values().minCoeff() >= -1.0);
  const auto e1 = dec.decode(code, Mode::eval);
  const auto e2 = dec.decode(code, Mode::eval);
  CHECK(e1.values() == e2.values());
  CHECK(e1.shape() == Shape{2, 64, 64, 3});
  CHECK_THROWS_AS(dec.decode(Tensor::zeros({2, 5}), Mode::eval), ShapeError);
  CHECK_THROWS_AS(ImageDecoder({.code_dim = 4, .image_size = 20, .channels = {4, 4, 4}}, rng), std::invalid_argument);
}

TEST_CASE("image decoder gradients") {
  Rng rng(15);
  ImageDecoder dec({.code_dim = 4, .image_size = 8, .channels = {4, 3}}, rng);
  Parameters p;
  dec.collect("dec", p);
  const auto probe = random_tensor({3, 8, 8, 3}, rng);
  const auto code = random_tensor({3, 4}, rng);
  const auto pc = grad_check([&](const Tensor& c) { return sum(mul(dec.decode(c, Mode::train), probe)); }, code, 1e-5);
  CHECK(pc.ok(1e-4));
  GradCheckOptions options;
  options.max_coords_per_tensor = 24;
  const auto pp = grad_check<double>([&] { return sum(mul(dec.decode(code, Mode::train), probe)); }, p.leaves(), options);
  CHECK(pp.ok(1e-4));
}

TEST_CASE("dropout is inverted and identity at rate zero") {
  Rng rng(16);
  const auto x = random_tensor({4, 50}, rng);
  CHECK(dropout(x, 0.0, rng).values() == x.values());
  const auto y = dropout(x, 0.5, rng);
  for (Eigen::Index i = 0; i < x.values().size(); ++i) {
    const double v = y.values()[i];
    CHECK((v == 0.0 || std::abs(v - 2.0 * x.values()[i]) < 1e-15));
  }
}
