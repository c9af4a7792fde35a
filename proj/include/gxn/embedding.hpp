#pragma once

#include "gxn/nn.hpp"

#include <iosfwd>

namespace gxn {

using nn::Parameters;

struct EmbeddingConfig {
  std::size_t vocab_size = 0;
  std::size_t word_dim = 300;
  std::size_t hidden_dim = 1024;
  std::size_t joint_dim = 1024;
  nn::ImageEncoderConfig image;
  // Off: the abstract text branch is a forward GRU like the grounded one.
  bool bidirectional_high = true;
  // Take |x| of every embedding before scoring (order-embedding style positivity).
  bool abs_preprocess = false;
  // Scale every embedding to unit L2 norm before scoring (applied before abs).
  bool normalize = false;
};

struct RankingConfig {
  double margin = 0.05;
  double lambda = 0.5;
};

void validate(const RankingConfig& cfg);

/// Rows are batch members; every tensor is [B x joint_dim].
struct ImageEmbedding {
  Tensor v_h, v_l;
};

struct TextEmbedding {
  Tensor t_h, t_l;
};

struct EmbeddingPair {
  Tensor v_h, v_l, t_h, t_l;

  EmbeddingPair() = default;
  EmbeddingPair(const ImageEmbedding& v, const TextEmbedding& t) : v_h(v.v_h), v_l(v.v_l), t_h(t.t_h), t_l(t.t_l) {}
};

/// Word table, image encoder, bidirectional (abstract) and unidirectional
/// (grounded) sentence encoders, and the four joint-space projections.
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  EmbeddingModel(const EmbeddingConfig& config, Rng& rng);

  const EmbeddingConfig& config() const { return config_; }
  std::size_t joint_dim() const { return config_.joint_dim; }

  nn::EmbeddingTable words;
  nn::ImageEncoder image_encoder;
  nn::SentenceEncoder text_high;  // bidirectional unless configured otherwise
  nn::SentenceEncoder text_low;   // forward only
  nn::LinearMap proj_v_high, proj_v_low, proj_t_high, proj_t_low;

  ImageEmbedding embed_images(const Tensor& images, nn::Mode mode, Rng* rng = nullptr);
  TextEmbedding embed_captions(std::span<const std::vector<nn::TokenId>> captions) const;
  /// Grounded branches alone, for the generative paths.
  Tensor embed_images_low(const Tensor& images, nn::Mode mode, Rng* rng = nullptr);
  Tensor embed_captions_low(std::span<const std::vector<nn::TokenId>> captions) const;

  /// Everything trained by the ranking objective.
  void collect(Parameters& out);
  void collect_words(Parameters& out);
  void collect_image_low(Parameters& out);  // image encoder + P_v^l
  void collect_text_low(Parameters& out);   // GRU_l + P_t^l

 private:
  Tensor finish(const Tensor& x) const;

  EmbeddingConfig config_;
};

/// s(t, v) = -||max(0, v - t)||^2 for vectors of equal length.
Tensor similarity(const Tensor& t, const Tensor& v);

/// lambda * s(t_h, v_h) + (1 - lambda) * s(t_l, v_l).
Tensor combined_similarity(const Tensor& t_h, const Tensor& v_h, const Tensor& t_l, const Tensor& v_l, double lambda);

/// Sum of margin violations of one positive (t, v) against each negative
/// caption and each negative image.
Tensor ranking_loss_single(const Tensor& t, const Tensor& v, const std::vector<Tensor>& neg_texts, const std::vector<Tensor>& neg_images,
                           double margin);

/// [m x n] combined scores of every caption row against every image row.
Tensor combined_similarity_matrix(const Tensor& t_h, const Tensor& v_h, const Tensor& t_l, const Tensor& v_l, double lambda);

/// Two-branch ranking loss over a batch of matched pairs, with all other batch
/// members as negatives, averaged over positives.
Tensor ranking_loss_dual(const EmbeddingPair& batch, const RankingConfig& cfg);

/// Evaluation scores [captions x images] under no_grad.
Eigen::MatrixXd score_matrix(const TextEmbedding& text, const ImageEmbedding& images, double lambda);

/// One query per line, tab-separated, 17 significant digits.
void write_score_matrix(std::ostream& os, const Eigen::MatrixXd& scores);
Eigen::MatrixXd read_score_matrix(std::istream& is);

}  // namespace gxn
