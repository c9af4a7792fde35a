#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace gxn {

using TokenSeq = std::vector<std::size_t>;

/// scores(q, c): higher is better. ground_truth[q] lists the correct columns.
struct SimilarityMatrix {
  Eigen::MatrixXd scores;
  std::vector<std::vector<std::size_t>> ground_truth;
};

void validate(const SimilarityMatrix& m);

/// 1-based rank of each query's best-ranked correct column under descending
/// score with ties broken by ascending column index.
std::vector<std::size_t> first_correct_ranks(const SimilarityMatrix& m);

/// Column order for one query row, descending score, ascending index on ties.
std::vector<std::size_t> ranked_columns(const Eigen::Ref<const Eigen::RowVectorXd>& row);

/// Percentage of queries with a correct column in the top k.
double recall_at_k(const SimilarityMatrix& m, std::size_t k);
double median_rank(const SimilarityMatrix& m);
double median(std::vector<double> values);

/// R@1 + R@10 over both directions.
double sum_score(double i2t_r1, double i2t_r10, double t2i_r1, double t2i_r10);

struct RetrievalMetrics {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0, medr = 0.0;
};

/// R@5 and R@10 clamp k to the column count.
RetrievalMetrics retrieval_metrics(const SimilarityMatrix& m);

struct BleuScore {
  double score = 0.0;
  bool empty_candidate = false;
};

/// Cumulative BLEU-n in [0, 1] with the closest-reference brevity penalty.
BleuScore bleu_n(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, std::size_t n);

using NGram = std::vector<std::size_t>;

/// Document frequencies of 1..4-grams, one document per image reference set.
class CorpusStats {
 public:
  CorpusStats() = default;
  explicit CorpusStats(const std::vector<std::vector<TokenSeq>>& reference_sets);

  std::size_t documents() const { return documents_; }
  std::size_t df(const NGram& g) const;
  bool empty() const { return documents_ == 0; }

 private:
  std::size_t documents_ = 0;
  std::map<NGram, std::size_t> df_;
};

struct CiderOptions {
  bool length_penalty = false;  // Gaussian penalty on candidate/reference length gap
  double sigma = 6.0;
};

/// CIDEr x 10: mean over n = 1..4 of the mean TF-IDF cosine to each reference.
double cider(const TokenSeq& candidate, const std::vector<TokenSeq>& refs, const CorpusStats& stats, const CiderOptions& options = {});

struct RetrievalRow {
  std::string model, split;
  RetrievalMetrics i2t, t2i;
};

/// model,split,direction,R@1,R@5,R@10,Medr,Sum with i2t, t2i and a summary row.
void write_retrieval_csv(std::ostream& os, const std::vector<RetrievalRow>& rows);

struct CaptionQualityRow {
  std::size_t rank_no = 1;
  double bleu[4] = {0, 0, 0, 0};  // fractions; written as percentages
  double cider = 0.0;
};

void write_caption_quality_csv(std::ostream& os, const std::vector<CaptionQualityRow>& rows);

}  // namespace gxn
