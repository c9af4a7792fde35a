#include "gxn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

namespace gxn {

void validate(const SimilarityMatrix& m) {
  if (m.scores.rows() == 0 || m.scores.cols() == 0) throw std::invalid_argument("similarity matrix is empty");
  if (m.ground_truth.size() != static_cast<std::size_t>(m.scores.rows())) {
    throw std::invalid_argument("ground truth has " + std::to_string(m.ground_truth.size()) + " queries, scores have " +
                                std::to_string(m.scores.rows()));
  }
  for (const auto& gt : m.ground_truth) {
    if (gt.empty()) throw std::invalid_argument("query without a correct item");
    for (auto c : gt) {
      if (c >= static_cast<std::size_t>(m.scores.cols())) throw std::out_of_range("ground-truth column out of range");
    }
  }
}

std::vector<std::size_t> ranked_columns(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::vector<std::size_t> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row[static_cast<Eigen::Index>(a)] > row[static_cast<Eigen::Index>(b)]; });
  return order;
}

std::vector<std::size_t> first_correct_ranks(const SimilarityMatrix& m) {
  validate(m);
  std::vector<std::size_t> ranks;
  ranks.reserve(m.ground_truth.size());
  for (Eigen::Index q = 0; q < m.scores.rows(); ++q) {
    const auto row = m.scores.row(q);
    std::size_t best = std::numeric_limits<std::size_t>::max();
    for (auto g : m.ground_truth[static_cast<std::size_t>(q)]) {
      const double s = row[static_cast<Eigen::Index>(g)];
      std::size_t ahead = 0;
      for (Eigen::Index c = 0; c < row.size(); ++c) {
        if (row[c] > s || (row[c] == s && static_cast<std::size_t>(c) < g)) ++ahead;
      }
      best = std::min(best, ahead + 1);
    }
    ranks.push_back(best);
  }
  return ranks;
}

double recall_at_k(const SimilarityMatrix& m, std::size_t k) {
  if (k < 1 || k > static_cast<std::size_t>(m.scores.cols())) {
    throw std::out_of_range("recall_at_k: k = " + std::to_string(k) + " outside [1, " + std::to_string(m.scores.cols()) + "]");
  }
  const auto ranks = first_correct_ranks(m);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_rank(const SimilarityMatrix& m) {
  const auto ranks = first_correct_ranks(m);
  return median(std::vector<double>(ranks.begin(), ranks.end()));
}

double sum_score(double i2t_r1, double i2t_r10, double t2i_r1, double t2i_r10) {
  // Grouped per direction so that one-decimal table values add up exactly.
  return (i2t_r1 + i2t_r10) + (t2i_r1 + t2i_r10);
}

RetrievalMetrics retrieval_metrics(const SimilarityMatrix& m) {
  const auto ranks = first_correct_ranks(m);
  const auto cols = static_cast<std::size_t>(m.scores.cols());
  auto recall = [&](std::size_t k) {
    k = std::min(k, cols);
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
  };
  return {recall(1), recall(5), recall(10), median(std::vector<double>(ranks.begin(), ranks.end()))};
}

// ---------------------------------------------------------------------------

namespace {

std::map<NGram, std::size_t> ngram_counts(const TokenSeq& seq, std::size_t n) {
  std::map<NGram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[NGram(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

BleuScore bleu_n(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, std::size_t n) {
  if (n < 1 || n > 4) throw std::invalid_argument("BLEU order must be 1..4");
  if (refs.empty()) throw std::invalid_argument("BLEU needs at least one reference");
  if (candidate.empty()) return {0.0, true};
  double log_sum = 0.0;
  for (std::size_t order = 1; order <= n; ++order) {
    const auto cand = ngram_counts(candidate, order);
    std::map<NGram, std::size_t> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngram_counts(r, order)) max_ref[g] = std::max(max_ref[g], c);
    }
    std::size_t clipped = 0, total = 0;
    for (const auto& [g, c] : cand) {
      total += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return {0.0, false};
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const auto c = static_cast<double>(candidate.size());
  double r = static_cast<double>(refs.front().size());
  for (const auto& ref : refs) {
    const auto len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = std::exp(std::min(0.0, 1.0 - r / c));
  return {bp * std::exp(log_sum / static_cast<double>(n)), false};
}

CorpusStats::CorpusStats(const std::vector<std::vector<TokenSeq>>& reference_sets) : documents_(reference_sets.size()) {
  for (const auto& refs : reference_sets) {
    std::set<NGram> seen;
    for (const auto& r : refs) {
      for (std::size_t n = 1; n <= 4; ++n) {
        for (const auto& [g, c] : ngram_counts(r, n)) seen.insert(g);
      }
    }
    for (const auto& g : seen) ++df_[g];
  }
}

std::size_t CorpusStats::df(const NGram& g) const {
  const auto it = df_.find(g);
  return it == df_.end() ? 0 : it->second;
}

namespace {

struct TfIdf {
  std::map<NGram, double> weights;
  double norm = 0.0;
};

TfIdf tfidf(const TokenSeq& seq, std::size_t n, const CorpusStats& stats) {
  TfIdf out;
  const double log_docs = std::log(static_cast<double>(stats.documents()));
  for (const auto& [g, c] : ngram_counts(seq, n)) {
    const double w = static_cast<double>(c) * (log_docs - std::log(std::max(1.0, static_cast<double>(stats.df(g)))));
    out.weights[g] = w;
    out.norm += w * w;
  }
  out.norm = std::sqrt(out.norm);
  return out;
}

double cosine(const TfIdf& a, const TfIdf& b) {
  if (a.norm == 0.0 || b.norm == 0.0) return 0.0;
  double dot = 0.0;
  for (const auto& [g, w] : a.weights) {
    const auto it = b.weights.find(g);
    if (it != b.weights.end()) dot += w * it->second;
  }
  return dot / (a.norm * b.norm);
}

}  // namespace

double cider(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, const CorpusStats& stats, const CiderOptions& options) {
  if (stats.empty()) throw std::invalid_argument("CIDEr needs corpus statistics");
  if (refs.empty()) throw std::invalid_argument("CIDEr needs at least one reference");
  double total = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = tfidf(candidate, n, stats);
    double per_n = 0.0;
    for (const auto& r : refs) {
      double sim = cosine(cand, tfidf(r, n, stats));
      if (options.length_penalty) {
        const double gap = static_cast<double>(candidate.size()) - static_cast<double>(r.size());
        sim *= std::exp(-gap * gap / (2.0 * options.sigma * options.sigma));
      }
      per_n += sim;
    }
    total += per_n / static_cast<double>(refs.size());
  }
  return 10.0 * total / 4.0;
}

// ---------------------------------------------------------------------------

void write_retrieval_csv(std::ostream& os, const std::vector<RetrievalRow>& rows) {
  const auto old = os.precision(10);
  os << "model,split,direction,R@1,R@5,R@10,Medr,Sum\n";
  for (const auto& row : rows) {
    for (const auto& [dir, m] : {std::pair{"i2t", row.i2t}, std::pair{"t2i", row.t2i}}) {
      os << row.model << ',' << row.split << ',' << dir << ',' << m.r1 << ',' << m.r5 << ',' << m.r10 << ',' << m.medr << ",\n";
    }
    os << row.model << ',' << row.split << ",sum,,,,," << sum_score(row.i2t.r1, row.i2t.r10, row.t2i.r1, row.t2i.r10) << '\n';
  }
  os.precision(old);
}

void write_caption_quality_csv(std::ostream& os, const std::vector<CaptionQualityRow>& rows) {
  const auto old = os.precision(10);
  os << "rank_no,B@1,B@2,B@3,B@4,CIDEr\n";
  for (const auto& row : rows) {
    os << row.rank_no;
    for (double b : row.bleu) os << ',' << 100.0 * b;
    os << ',' << row.cider << '\n';
  }
  os.precision(old);
}

}  // namespace gxn
