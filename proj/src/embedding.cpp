#include "gxn/embedding.hpp"

#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace gxn {

void validate(const RankingConfig& cfg) {
  if (!(cfg.margin > 0.0)) throw std::invalid_argument("ranking margin must be positive");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
}

EmbeddingModel::EmbeddingModel(const EmbeddingConfig& config, Rng& rng) : config_(config) {
  if (config.vocab_size == 0) throw std::invalid_argument("embedding model needs a non-empty vocabulary");
  words = nn::EmbeddingTable(config.vocab_size, config.word_dim, rng);
  image_encoder = nn::ImageEncoder(config.image, rng);
  text_high = nn::SentenceEncoder(config.bidirectional_high ? nn::Direction::bidirectional : nn::Direction::forward, config.word_dim, config.hidden_dim, rng);
  text_low = nn::SentenceEncoder(nn::Direction::forward, config.word_dim, config.hidden_dim, rng);
  proj_v_high = nn::LinearMap(image_encoder.feature_dim(), config.joint_dim, rng);
  proj_v_low = nn::LinearMap(image_encoder.feature_dim(), config.joint_dim, rng);
  proj_t_high = nn::LinearMap(config.hidden_dim, config.joint_dim, rng);
  proj_t_low = nn::LinearMap(config.hidden_dim, config.joint_dim, rng);
}

Tensor EmbeddingModel::finish(const Tensor& x) const {
  const auto y = config_.normalize ? normalize_rows(x) : x;
  return config_.abs_preprocess ? abs(y) : y;
}

ImageEmbedding EmbeddingModel::embed_images(const Tensor& images, nn::Mode mode, Rng* rng) {
  const auto feature = image_encoder.encode(images, mode, rng);
  return {finish(proj_v_high(feature)), finish(proj_v_low(feature))};
}

TextEmbedding EmbeddingModel::embed_captions(std::span<const std::vector<nn::TokenId>> captions) const {
  return {finish(proj_t_high(text_high.encode(captions, words))), embed_captions_low(captions)};
}

Tensor EmbeddingModel::embed_images_low(const Tensor& images, nn::Mode mode, Rng* rng) {
  return finish(proj_v_low(image_encoder.encode(images, mode, rng)));
}

Tensor EmbeddingModel::embed_captions_low(std::span<const std::vector<nn::TokenId>> captions) const {
  return finish(proj_t_low(text_low.encode(captions, words)));
}

void EmbeddingModel::collect(Parameters& out) {
  collect_words(out);
  image_encoder.collect("cnn", out);
  text_high.collect("gru_h", out);
  text_low.collect("gru_l", out);
  proj_v_high.collect("P_v_h", out);
  proj_v_low.collect("P_v_l", out);
  proj_t_high.collect("P_t_h", out);
  proj_t_low.collect("P_t_l", out);
}

void EmbeddingModel::collect_words(Parameters& out) { words.collect("W_e", out); }

void EmbeddingModel::collect_image_low(Parameters& out) {
  image_encoder.collect("cnn", out);
  proj_v_low.collect("P_v_l", out);
}

void EmbeddingModel::collect_text_low(Parameters& out) {
  text_low.collect("gru_l", out);
  proj_t_low.collect("P_t_l", out);
}

// ---------------------------------------------------------------------------

Tensor similarity(const Tensor& t, const Tensor& v) {
  if (t.rank() != 1 || t.shape() != v.shape()) throw ShapeError("similarity: " + to_string(t.shape()) + " vs " + to_string(v.shape()));
  return -l2_norm_sq(max0diff(t, v));
}

Tensor combined_similarity(const Tensor& t_h, const Tensor& v_h, const Tensor& t_l, const Tensor& v_l, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  return add(scale(similarity(t_h, v_h), lambda), scale(similarity(t_l, v_l), 1.0 - lambda));
}

Tensor ranking_loss_single(const Tensor& t, const Tensor& v, const std::vector<Tensor>& neg_texts, const std::vector<Tensor>& neg_images,
                           double margin) {
  if (neg_texts.empty() || neg_images.empty()) throw std::invalid_argument("ranking loss needs negatives on both sides");
  const auto offset = add_scalar(-similarity(t, v), margin);
  Tensor loss = Tensor::scalar(0.0);
  for (const auto& tn : neg_texts) loss = add(loss, relu(add(offset, similarity(tn, v))));
  for (const auto& vn : neg_images) loss = add(loss, relu(add(offset, similarity(t, vn))));
  return loss;
}

Tensor combined_similarity_matrix(const Tensor& t_h, const Tensor& v_h, const Tensor& t_l, const Tensor& v_l, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (lambda == 1.0) return order_violation_matrix(t_h, v_h);
  if (lambda == 0.0) return order_violation_matrix(t_l, v_l);
  return add(scale(order_violation_matrix(t_h, v_h), lambda), scale(order_violation_matrix(t_l, v_l), 1.0 - lambda));
}

Tensor ranking_loss_dual(const EmbeddingPair& batch, const RankingConfig& cfg) {
  validate(cfg);
  if (batch.t_h.rank() != 2 || batch.t_h.dim(0) < 2) throw std::invalid_argument("ranking loss needs a batch of at least 2 pairs");
  const auto n = batch.t_h.dim(0);
  // scores(i, j) = s*(caption i, image j)
  const auto scores = combined_similarity_matrix(batch.t_h, batch.v_h, batch.t_l, batch.v_l, cfg.lambda);
  const auto positive = diagonal(scores);
  // Column j holds negative captions for image j; row i holds negative images for caption i.
  const auto caption_side = relu(add_scalar(sub(scores, positive), cfg.margin));
  const auto image_side = relu(add_scalar(sub(scores, reshape(positive, {n, 1})), cfg.margin));
  Tensor::Vector off(static_cast<Eigen::Index>(n * n));
  off.setOnes();
  for (std::size_t i = 0; i < n; ++i) off[static_cast<Eigen::Index>(i * n + i)] = 0.0;
  const auto mask = Tensor::constant({n, n}, std::move(off));
  return scale(sum(mul(add(caption_side, image_side), mask)), 1.0 / static_cast<double>(n));
}

Eigen::MatrixXd score_matrix(const TextEmbedding& text, const ImageEmbedding& images, double lambda) {
  NoGradGuard no_grad;
  return combined_similarity_matrix(text.t_h, images.v_h, text.t_l, images.v_l, lambda).matrix();
}

void write_score_matrix(std::ostream& os, const Eigen::MatrixXd& scores) {
  const auto old = os.precision(17);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) os << (j ? "\t" : "") << scores(i, j);
    os << '\n';
  }
  os.precision(old);
}

Eigen::MatrixXd read_score_matrix(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<double> row;
    for (double x; ls >> x;) row.push_back(x);
    if (!rows.empty() && row.size() != rows.front().size()) throw std::runtime_error("score matrix rows have unequal length");
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace gxn
