#include "doctest.h"

#include "gxn/captioner.hpp"
#include "gxn/grad_check.hpp"

#include <cmath>

using namespace gxn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor::Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = lo + (hi - lo) * uniform01(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

struct Tiny {
  Rng rng;
  nn::EmbeddingTable words;
  Captioner dec;

  explicit Tiny(CaptionerConfig cfg, std::uint64_t seed = 1) : rng(seed), words(cfg.vocab_size, cfg.word_dim, rng), dec(cfg, rng) {}

  nn::Parameters params() {
    nn::Parameters p;
    words.collect("W_e", p);
    dec.collect("dec", p);
    return p;
  }
};

CaptionerConfig tiny_config(std::size_t vocab = 12) {
  return {.vocab_size = vocab, .word_dim = 5, .feature_dim = 4, .hidden_dim = 6, .max_decode_len = 8, .bos = 1, .eos = TokenId{2}};
}

Eigen::VectorXd flat_grads(nn::Parameters& p) {
  Eigen::Index n = 0;
  for (auto& [name, t] : p.tensors) n += static_cast<Eigen::Index>(t->size());
  Eigen::VectorXd g(n);
  Eigen::Index at = 0;
  for (auto& [name, t] : p.tensors) {
    g.segment(at, static_cast<Eigen::Index>(t->size())) = t->grad();
    at += static_cast<Eigen::Index>(t->size());
  }
  return g;
}

void zero_grads(nn::Parameters& p) {
  for (auto& [name, t] : p.tensors) t->zero_grad();
}

}  // namespace

TEST_CASE("xe_loss of a uniform decoder is T ln V") {
  Tiny m(tiny_config(4));
  m.dec.out.weight.mutable_values().setZero();
  m.dec.out.bias.mutable_values().setZero();
  const auto v = random_tensor({1, 4}, m.rng);
  const std::vector<TokenSeq> gold{{3, 2}};
  CHECK(m.dec.xe_loss(m.words, v, gold, 0.0, nullptr).item() == doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("xe_loss is deterministic and rejects bad input") {
  Tiny m(tiny_config());
  const auto v = random_tensor({2, 4}, m.rng);
  const std::vector<TokenSeq> gold{{4, 5, 2}, {7, 2}};
  Rng a(5), b(5);
  CHECK(m.dec.xe_loss(m.words, v, gold, 0.0, &a).item() == m.dec.xe_loss(m.words, v, gold, 0.0, &b).item());
  CHECK(m.dec.xe_loss(m.words, v, gold, 0.5, &a).item() == m.dec.xe_loss(m.words, v, gold, 0.5, &b).item());
  const std::vector<TokenSeq> too_long{TokenSeq(9, 4), {2}};
  CHECK_THROWS_AS(m.dec.xe_loss(m.words, v, too_long, 0.0, nullptr), std::invalid_argument);
  const std::vector<TokenSeq> one{{4}};
  CHECK_THROWS_AS(m.dec.xe_loss(m.words, v, one, 0.0, nullptr), ShapeError);
  CHECK_THROWS_AS(m.dec.xe_loss(m.words, v, gold, 0.3, nullptr), std::invalid_argument);
  const std::vector<TokenSeq> bad_id{{12}, {2}};
  CHECK_THROWS_AS(m.dec.xe_loss(m.words, v, bad_id, 0.0, nullptr), std::out_of_range);
}

TEST_CASE("scheduled sampling replaces some fed tokens") {
  Tiny m(tiny_config());
  const auto v = random_tensor({4, 4}, m.rng);
  const std::vector<TokenSeq> gold{{4, 5, 6, 2}, {7, 8, 2}, {9, 10, 11, 3, 2}, {4, 4, 2}};
  Rng a(6);
  const double forced = m.dec.xe_loss(m.words, v, gold, 0.0, &a).item();
  CHECK(m.dec.xe_loss(m.words, v, gold, 1.0, &a).item() != forced);
}

TEST_CASE("xe_loss gradient matches finite differences") {
  Tiny m(tiny_config());
  auto p = m.params();
  const auto v = Tensor::parameter({3, 4}, random_tensor({3, 4}, m.rng).values());
  const std::vector<TokenSeq> gold{{4, 5, 2}, {7, 2}, {3, 9, 11, 2}};
  auto leaves = p.leaves();
  leaves.push_back(v);
  const auto report = grad_check<double>([&] { return m.dec.xe_loss(m.words, v, gold, 0.0, nullptr); }, leaves);
  CHECK(report.ok(1e-4));
  CHECK(report.checked == p.count() + v.size());
}

TEST_CASE("greedy decode is deterministic and ignores the rng") {
  Tiny m(tiny_config());
  const auto v = random_tensor({3, 4}, m.rng);
  Rng rng(7);
  const auto before = save_rng(rng);
  const auto a = m.dec.decode(m.words, v, DecodeMode::greedy, &rng);
  CHECK(save_rng(rng) == before);
  const auto b = m.dec.decode(m.words, v, DecodeMode::greedy);
  CHECK(a.tokens == b.tokens);
  CHECK(a.log_prob.values() == b.log_prob.values());
  CHECK_THROWS_AS(m.dec.decode(m.words, v, DecodeMode::sample), std::invalid_argument);
}

TEST_CASE("sampling concentrates on a dominant logit") {
  Tiny m(tiny_config(5));
  m.dec.out.weight.mutable_values().setZero();
  m.dec.out.bias.mutable_values().setZero();
  m.dec.out.bias.mutable_values()[3] = 1e6;
  const auto v = broadcast_to(random_tensor({1, 4}, m.rng), {10000, 4});
  Rng rng(8);
  NoGradGuard no_grad;
  const auto r = m.dec.decode(m.words, v, DecodeMode::sample, &rng);
  std::size_t hits = 0;
  for (const auto& e : r.emitted) hits += e.front() == 3;
  CHECK(static_cast<double>(hits) / 10000.0 >= 0.999);
}

TEST_CASE("decode log_prob equals the recomputed sequence log-probability") {
  Tiny m(tiny_config());
  const auto v = random_tensor({4, 4}, m.rng);
  Rng rng(9);
  for (auto mode : {DecodeMode::greedy, DecodeMode::sample}) {
    const auto r = m.dec.decode(m.words, v, mode, &rng);
    const auto again = m.dec.sequence_log_prob(m.words, v, r.emitted);
    CHECK((r.log_prob.values() - again.values()).cwiseAbs().maxCoeff() < 1e-13);
    for (std::size_t b = 0; b < 4; ++b) {
      const std::vector<TokenSeq> one{r.emitted[b]};
      const std::vector<std::size_t> row{b};
      const auto xe = m.dec.xe_loss(m.words, gather_rows(v, row), one, 0.0, nullptr).item();
      CHECK(-xe == doctest::Approx(r.log_prob.values()[static_cast<Eigen::Index>(b)]).epsilon(1e-13));
      CHECK(r.emitted[b].size() <= 8);
      CHECK(r.truncated[b] == (r.emitted[b].back() != 2));
    }
  }
}

TEST_CASE("scst with a constant reward has zero gradient") {
  Tiny m(tiny_config());
  auto p = m.params();
  const auto v = random_tensor({3, 4}, m.rng);
  Rng rng(10);
  const auto s = scst_loss(m.dec, m.words, v, [](const TokenSeq&, std::size_t) { return 0.7; }, rng);
  backward(s.loss);
  CHECK(flat_grads(p).cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.sample_reward == doctest::Approx(0.7));
}

TEST_CASE("policy-gradient identity on a two-token vocabulary") {
  // Fixed length 1 over {a, b}: sum_w p(w) (r(w) - b0) grad log p(w) == grad p(a).
  auto cfg = tiny_config(2);
  cfg.max_decode_len = 1;
  cfg.bos = 0;
  cfg.eos.reset();
  Tiny m(cfg, 11);
  auto p = m.params();
  const auto v = random_tensor({1, 4}, m.rng);
  const double b0 = 0.3;
  Eigen::VectorXd estimator = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.count()));
  for (TokenId w : {TokenId{0}, TokenId{1}}) {
    zero_grads(p);
    const std::vector<TokenSeq> seq{{w}};
    const auto lp = m.dec.sequence_log_prob(m.words, v, seq);
    backward(sum(lp));
    const double r = w == 0 ? 1.0 : 0.0;
    estimator += std::exp(lp.item()) * (r - b0) * flat_grads(p);
  }
  zero_grads(p);
  const std::vector<TokenSeq> a{{0}};
  backward(exp(sum(m.dec.sequence_log_prob(m.words, v, a))));
  const auto exact = flat_grads(p);
  CHECK((estimator - exact).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(exact.cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("frozen scst loss matches the sampled one") {
  Tiny m(tiny_config());
  const auto v = random_tensor({3, 4}, m.rng);
  auto reward = [](const TokenSeq& c, std::size_t i) { return static_cast<double>(c.size() % 3) + 0.1 * static_cast<double>(i); };
  Rng r1(12);
  const auto live = scst_loss(m.dec, m.words, v, reward, r1);
  Rng r2(12);
  const auto sampled = m.dec.decode(m.words, v, DecodeMode::sample, &r2);
  const auto greedy = m.dec.decode(m.words, v, DecodeMode::greedy);
  std::vector<double> rs, bs;
  for (std::size_t b = 0; b < 3; ++b) {
    rs.push_back(reward(sampled.tokens[b], b));
    bs.push_back(reward(greedy.tokens[b], b));
  }
  CHECK(scst_loss_frozen(m.dec, m.words, v, sampled.emitted, rs, bs).item() == doctest::Approx(live.loss.item()).epsilon(1e-13));
  const std::vector<double> bad{std::nan(""), 0, 0};
  CHECK_THROWS_AS(scst_loss_frozen(m.dec, m.words, v, sampled.emitted, bad, bs), std::runtime_error);
}

TEST_CASE("mixed loss endpoints and midpoint") {
  Tiny m(tiny_config());
  const auto v = random_tensor({3, 4}, m.rng);
  const std::vector<TokenSeq> gold{{4, 5, 2}, {7, 2}, {3, 9, 11, 2}};
  auto reward = [](const TokenSeq& c, std::size_t) { return static_cast<double>(c.size()); };
  const double xe = m.dec.xe_loss(m.words, v, gold, 0.0, nullptr).item();
  Rng s(13);
  const double rl = scst_loss(m.dec, m.words, v, reward, s).loss.item();

  Rng r0(13);
  const auto g0 = mixed_loss(m.dec, m.words, v, gold, reward, 0.0, 0.0, r0);
  CHECK(g0.loss.item() == xe);
  CHECK(!g0.used_scst);
  Rng r1(13);
  const auto g1 = mixed_loss(m.dec, m.words, v, gold, reward, 1.0, 0.0, r1);
  CHECK(g1.loss.item() == rl);
  CHECK(!g1.used_xe);
  Rng rh(13);
  CHECK(mixed_loss(m.dec, m.words, v, gold, reward, 0.5, 0.0, rh).loss.item() == doctest::Approx(0.5 * (xe + rl)).epsilon(1e-14));
  CHECK_THROWS_AS(mixed_loss(m.dec, m.words, v, gold, reward, 1.2, 0.0, rh), std::invalid_argument);
}

TEST_CASE("mixed loss gradient with frozen sampled sequences") {
  Tiny m(tiny_config());
  auto p = m.params();
  const auto v = Tensor::parameter({2, 4}, random_tensor({2, 4}, m.rng).values());
  const std::vector<TokenSeq> gold{{4, 5, 2}, {7, 8, 9, 2}};
  const std::vector<TokenSeq> sampled{{6, 2}, {3, 3, 10}};
  const std::vector<double> r{0.9, 0.2}, b{0.4, 0.5};
  const double gamma = 0.35;
  auto loss = [&] {
    return add(scale(m.dec.xe_loss(m.words, v, gold, 0.0, nullptr), 1.0 - gamma),
               scale(scst_loss_frozen(m.dec, m.words, v, sampled, r, b), gamma));
  };
  auto leaves = p.leaves();
  leaves.push_back(v);
  CHECK(grad_check<double>(loss, leaves).ok(1e-4));
}

TEST_CASE("gamma schedule") {
  CHECK(gamma_schedule(0, 10) == 0.05);
  CHECK(gamma_schedule(9, 10) == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(gamma_schedule(5, 11) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(gamma_schedule(0, 1) == 0.05);
  CHECK(gamma_schedule(20, 10) == 0.95);
}
