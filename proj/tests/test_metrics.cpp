#include "doctest.h"

#include "gxn/metrics.hpp"
#include "gxn/random.hpp"

#include <cmath>
#include <sstream>

using namespace gxn;

namespace {

SimilarityMatrix diagonal_truth(Eigen::MatrixXd scores) {
  SimilarityMatrix m{std::move(scores), {}};
  for (Eigen::Index q = 0; q < m.scores.rows(); ++q) m.ground_truth.push_back({static_cast<std::size_t>(q)});
  return m;
}

// Row q scores column c as -c, with the correct column placed at rank ranks[q].
SimilarityMatrix with_ranks(const std::vector<std::size_t>& ranks, std::size_t columns) {
  SimilarityMatrix m{Eigen::MatrixXd(static_cast<Eigen::Index>(ranks.size()), static_cast<Eigen::Index>(columns)), {}};
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    for (std::size_t c = 0; c < columns; ++c) m.scores(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(c)) = -static_cast<double>(c);
    m.ground_truth.push_back({ranks[q] - 1});
  }
  return m;
}

}  // namespace

TEST_CASE("recall and median rank on an identity-dominant matrix") {
  const auto m = diagonal_truth(Eigen::MatrixXd::Identity(3, 3) * 2.0 - Eigen::MatrixXd::Ones(3, 3) * 0.5);
  CHECK(recall_at_k(m, 1) == 100.0);
  CHECK(median_rank(m) == 1.0);
  CHECK(recall_at_k(m, 3) == 100.0);
}

TEST_CASE("correct item always second") {
  Eigen::MatrixXd s(3, 3);
  s << 0.5, 0.9, 0.1,  //
      0.2, 0.15, 0.1,  //
      0.0, 0.7, 0.6;
  const auto m = diagonal_truth(s);
  CHECK(recall_at_k(m, 1) == 0.0);
  CHECK(recall_at_k(m, 2) == 100.0);
  CHECK(median_rank(m) == 2.0);
}

TEST_CASE("recall_at_k bounds and monotonicity") {
  Rng rng(3);
  Eigen::MatrixXd s(20, 15);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = standard_normal(rng);
  SimilarityMatrix m{s, {}};
  for (std::size_t q = 0; q < 20; ++q) m.ground_truth.push_back({q % 15, (q * 7) % 15});
  double prev = 0.0;
  for (std::size_t k = 1; k <= 15; ++k) {
    const double r = recall_at_k(m, k);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev == 100.0);
  CHECK_THROWS_AS(recall_at_k(m, 0), std::out_of_range);
  CHECK_THROWS_AS(recall_at_k(m, 16), std::out_of_range);
}

TEST_CASE("median rank conventions") {
  CHECK(median_rank(with_ranks({1, 3, 5}, 10)) == 3.0);
  CHECK(median_rank(with_ranks({1, 2, 3, 10}, 10)) == 2.5);
  CHECK(first_correct_ranks(with_ranks({4, 1, 7}, 10)) == std::vector<std::size_t>{4, 1, 7});
}

TEST_CASE("ties rank the lower column index first") {
  SimilarityMatrix m{Eigen::MatrixXd::Zero(2, 4), {{2}, {0}}};
  CHECK(first_correct_ranks(m) == std::vector<std::size_t>{3, 1});
  CHECK(ranked_columns(m.scores.row(0)) == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("metrics are invariant under increasing transforms of scores") {
  Rng rng(4);
  Eigen::MatrixXd s(12, 9);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = standard_normal(rng);
  SimilarityMatrix a{s, {}};
  for (std::size_t q = 0; q < 12; ++q) a.ground_truth.push_back({q % 9});
  SimilarityMatrix b{(s.array() * 3.0 + 1.0).exp().matrix(), a.ground_truth};
  CHECK(first_correct_ranks(a) == first_correct_ranks(b));
  CHECK(median_rank(a) == median_rank(b));
}

TEST_CASE("sum_score fixtures") {
  CHECK(sum_score(68.5, 97.9, 56.6, 94.5) == 317.5);
  CHECK(sum_score(41.3, 81.2, 30.3, 72.4) == 225.2);
  CHECK(sum_score(0, 0, 0, 0) == 0.0);
}

TEST_CASE("bleu examples") {
  // a red circle on the grid
  const TokenSeq ref{1, 2, 3, 4, 5, 6};
  const TokenSeq cand{1, 2, 3};
  CHECK(bleu_n(cand, {ref}, 1).score == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  for (std::size_t n = 1; n <= 4; ++n) CHECK(bleu_n(ref, {ref, cand}, n).score == 1.0);
  CHECK(bleu_n(cand, {cand}, 3).score == 1.0);
  CHECK(bleu_n(cand, {cand}, 4).score == 0.0);
  CHECK(bleu_n(TokenSeq{7, 8}, {ref}, 1).score == 0.0);
  const auto empty = bleu_n(TokenSeq{}, {ref}, 2);
  CHECK(empty.score == 0.0);
  CHECK(empty.empty_candidate);
  CHECK_THROWS_AS(bleu_n(cand, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(bleu_n(cand, {ref}, 5), std::invalid_argument);
}

TEST_CASE("bleu clips repeated n-grams") {
  // "the the the the" against "the cat": clipped unigram precision 1/4, bp = 1.
  const auto s = bleu_n(TokenSeq{5, 5, 5, 5}, {TokenSeq{5, 9}}, 1);
  CHECK(s.score == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("cider examples") {
  const TokenSeq a{1, 2, 3, 4, 5};
  const TokenSeq b{6, 7, 8, 9};
  const CorpusStats stats({{a}, {b}});
  CHECK(stats.documents() == 2);
  CHECK(stats.df({1, 2}) == 1);
  CHECK(cider(a, {a}, stats) == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(cider(b, {a}, stats) == 0.0);
  CHECK_THROWS_AS(cider(a, {a}, CorpusStats{}), std::invalid_argument);
}

TEST_CASE("cider ignores reference order and is deterministic") {
  Rng rng(5);
  std::vector<std::vector<TokenSeq>> corpus;
  for (int i = 0; i < 10; ++i) {
    std::vector<TokenSeq> refs;
    for (int r = 0; r < 5; ++r) {
      TokenSeq s;
      const auto len = 3 + uniform_index(rng, 6);
      for (std::size_t k = 0; k < len; ++k) s.push_back(uniform_index(rng, 12));
      refs.push_back(s);
    }
    corpus.push_back(refs);
  }
  const CorpusStats stats(corpus);
  const TokenSeq cand{1, 4, 2, 7, 3};
  auto refs = corpus[3];
  const double base = cider(cand, refs, stats);
  std::reverse(refs.begin(), refs.end());
  CHECK(cider(cand, refs, stats) == doctest::Approx(base).epsilon(1e-14));
  CHECK(cider(cand, refs, stats) == cider(cand, refs, stats));
  CHECK(cider(cand, refs, stats, {.length_penalty = true}) <= cider(cand, refs, stats) + 1e-12);
}

TEST_CASE("retrieval CSV carries the summary sum") {
  std::ostringstream os;
  write_retrieval_csv(os, {{"gxn", "test", {10, 20, 30, 4}, {5, 15, 25, 6}}});
  const auto text = os.str();
  CHECK(text.find("model,split,direction,R@1,R@5,R@10,Medr,Sum\n") == 0);
  CHECK(text.find("gxn,test,i2t,10,20,30,4,\n") != std::string::npos);
  CHECK(text.find("gxn,test,sum,,,,,70\n") != std::string::npos);

  std::ostringstream cq;
  write_caption_quality_csv(cq, {{.rank_no = 1, .bleu = {0.5, 0.25, 0.125, 0.0625}, .cider = 1.5}});
  CHECK(cq.str() == "rank_no,B@1,B@2,B@3,B@4,CIDEr\n1,50,25,12.5,6.25,1.5\n");
}
