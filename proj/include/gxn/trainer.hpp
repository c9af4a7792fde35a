#pragma once

#include "gxn/captioner.hpp"
#include "gxn/embedding.hpp"
#include "gxn/image_gan.hpp"
#include "gxn/metrics.hpp"
#include "gxn/shapes.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>

namespace gxn {

/// A loss or parameter became non-finite.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TrainMode { embed_only, i2t_xe, i2t_mix, t2i, i2t_t2i };

const std::vector<std::string>& train_mode_names();
std::string to_string(TrainMode mode);
/// Rejects unknown names with the list of valid modes.
TrainMode parse_train_mode(const std::string& name);
bool uses_i2t(TrainMode mode);
bool uses_t2i(TrainMode mode);

struct TrainConfig {
  TrainMode mode = TrainMode::embed_only;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
  double learning_rate = 2e-4;
  // Rate of the caption, discriminator and generator updates; unset uses learning_rate.
  std::optional<double> generative_learning_rate;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double margin = 0.05;
  double lambda = 0.5;
  double beta_f = 0.5;
  double beta_w = 0.5;
  double beta_s = 2.0;
  double gamma_start = 0.05;
  double gamma_end = 0.95;
  double xe_warmup = 0.2;          // fraction of i2t_mix epochs run with gamma = 0
  double max_sampling_prob = 0.25;  // scheduled sampling, ramped from 0 over the epochs

  std::size_t word_dim = 300;
  std::size_t hidden_dim = 1024;
  std::size_t joint_dim = 1024;
  std::vector<std::size_t> image_channels{32, 64, 128, 16};
  std::size_t image_feature_dim = 256;
  double image_dropout = 0.1;
  bool bidirectional_high = true;
  bool abs_preprocess = false;
  bool normalize_embeddings = false;
  std::size_t decoder_hidden_dim = 1024;
  std::size_t max_decode_len = 20;
  std::size_t cond_dim = 128;
  std::size_t z_dim = 64;
  std::vector<std::size_t> generator_channels{256, 128, 64, 32};
  std::vector<std::size_t> discriminator_channels{32, 64, 128, 256};
  std::size_t discriminator_text_dim = 128;
  bool cond_augment = true;
  bool non_saturating = false;
  bool cider_length_penalty = false;
  std::size_t eval_chunk = 100;  // images per evaluation forward pass
};

void validate(const TrainConfig& cfg);

/// Reduced widths for single-core runs on the shapes dataset, with unit-norm
/// embeddings, ranking updates at 1e-3 and generative updates at 2e-4; other
/// hyperparameters keep their values from `base`.
TrainConfig desk_profile(TrainConfig base = {});

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);

EmbeddingConfig embedding_config(const TrainConfig& cfg, std::size_t vocab_size);
CaptionerConfig captioner_config(const TrainConfig& cfg, std::size_t vocab_size);
GanConfig gan_config(const TrainConfig& cfg);

enum class ParamGroup { embedding, i2t, discriminator, generator };

/// Embedding model, caption decoder and text-to-image GAN over one word table.
class GxnModel {
 public:
  GxnModel() = default;
  GxnModel(const TrainConfig& cfg, std::size_t vocab_size, Rng& rng);

  EmbeddingModel embed;
  Captioner captioner;
  ImageGan gan;

  /// Every tensor and buffer, each once, under stable names.
  nn::Parameters all();
  /// embedding: everything ranked; i2t: decoder, image encoder, P_v^l, W_e;
  /// discriminator; generator: conditioning, G, GRU_l, P_t^l, W_e.
  nn::Parameters group(ParamGroup g);
};

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamSlot {
  Tensor::Vector m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `param` (a leaf) with `grad`.
void adam_step(Tensor& param, const Tensor::Vector& grad, AdamSlot& slot, const AdamConfig& cfg);

/// Adam with per-parameter moments and step counts, keyed by parameter name.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const AdamConfig& cfg) : config_(cfg) {}

  const AdamConfig& config() const { return config_; }
  /// Updates every tensor of `params` from its accumulated gradient.
  void step(const nn::Parameters& params);
  void step(const nn::Parameters& params, double learning_rate);
  std::map<std::string, AdamSlot>& slots() { return slots_; }
  const std::map<std::string, AdamSlot>& slots() const { return slots_; }

 private:
  AdamConfig config_;
  std::map<std::string, AdamSlot> slots_;
};

/// Token sequences of every caption of every item, in split order.
std::vector<std::vector<TokenSeq>> encode_captions(const data::DatasetSplit& split, const data::Vocabulary& vocab);

struct RetrievalEval {
  RetrievalMetrics i2t, t2i;
  double sum = 0.0;
  Eigen::MatrixXd scores;  // [captions x images], captions item-major
};

/// Both retrieval directions over a split: images query their captions, and
/// every caption queries the images.
RetrievalEval evaluate_retrieval(EmbeddingModel& model, const data::ImageBank& images, const std::vector<std::vector<TokenSeq>>& captions,
                                 double lambda, std::size_t chunk = 100);

struct Batch {
  std::vector<std::size_t> items;  // indices into the training split
  std::vector<TokenSeq> captions;  // one caption per item
};

struct EpochLog {
  std::size_t epoch = 0;
  double rank_loss = 0.0;
  double xe_loss = 0.0;
  double scst_loss = 0.0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  RetrievalMetrics i2t, t2i;
  double sum = 0.0;
  double gamma = 0.0;
};

/// epoch,mode,rank_loss,xe_loss,scst_loss,d_loss,g_loss,i2t_R@1,...,t2i_Medr,Sum,gamma
void write_train_log(std::ostream& os, const std::vector<EpochLog>& rows, TrainMode mode);

struct I2tLosses {
  double gen = 0.0;
  double xe = 0.0;
  double scst = 0.0;
  double rank = 0.0;
};

struct T2iLosses {
  double d = 0.0;
  double g = 0.0;
  double rank = 0.0;
};

/// Training-loop state: model, optimizer, rng, epoch counter and history.
class Trainer {
 public:
  /// `train_images` and `val_images` must match the dataset's splits.
  Trainer(const TrainConfig& cfg, const data::Dataset& dataset, const data::ImageBank& train_images, const data::ImageBank& val_images);

  const TrainConfig& config() const { return config_; }
  GxnModel& model() { return model_; }
  Adam& optimizer() { return adam_; }
  Rng& rng() { return rng_; }
  std::size_t epoch() const { return epoch_; }
  const std::vector<EpochLog>& log() const { return log_; }
  double best_sum() const { return best_sum_; }

  /// Receives "rank", "xe", "scst", "D", "G" as updates happen.
  std::vector<std::string>* call_log = nullptr;

  /// One random caption per image, shuffled into ceil(N / B) balanced batches.
  std::vector<Batch> epoch_batches();
  /// Epochs trained on the XE term alone: all of them without the mixed
  /// objective, the warmup otherwise.
  std::size_t xe_epochs() const;
  double gamma(std::size_t epoch) const;
  /// Scheduled sampling ramps 0 -> max over the XE epochs, then holds.
  double sampling_prob(std::size_t epoch) const;

  /// Ranking update of the embedding parameters.
  double step_embed(const Batch& batch);
  /// Mixed XE / self-critical update of the i2t parameters, then a ranking update.
  I2tLosses step_gen_i2t(const Batch& batch, std::size_t epoch);
  /// Discriminator update, generator update, then a ranking update.
  T2iLosses step_gen_t2i(const Batch& batch);

  /// Validation metrics of the current parameters.
  RetrievalEval validate();
  /// Pre-training evaluation row (epoch 0); run once before the first epoch.
  const EpochLog& start();
  /// Trains one epoch and evaluates; returns its log row.
  const EpochLog& run_epoch();

  /// Runs to config().epochs, writing log.csv, last.ckpt and best.ckpt to
  /// `out`; `after_epoch` sees the trainer once each epoch's files are written.
  void train(const std::filesystem::path& out, const std::function<void(Trainer&)>& after_epoch = {});

  void save(const std::filesystem::path& path);
  /// Restores parameters, optimizer, rng, epoch and history.
  void load(const std::filesystem::path& path);
  /// Parameters from a saved i2t_mix and a t2i run; shared tensors come from
  /// the run with the higher best validation Sum. Optimizer state starts fresh.
  void init_from(const std::filesystem::path& i2t_checkpoint, const std::filesystem::path& t2i_checkpoint);

 private:
  Tensor images_of(const Batch& batch) const;
  double reward(const TokenSeq& candidate, std::size_t item) const;
  void zero_grads();
  void update(ParamGroup g);
  const std::vector<TokenSeq>& references(std::size_t item) const { return train_caps_[item]; }

  TrainConfig config_;
  const data::Dataset* dataset_;
  const data::ImageBank* train_images_;
  const data::ImageBank* val_images_;
  std::vector<std::vector<TokenSeq>> train_caps_, val_caps_;
  CorpusStats train_stats_;
  GxnModel model_;
  Adam adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::vector<EpochLog> log_;
  double best_sum_ = -1.0;
  std::size_t best_epoch_ = 0;
};

struct Checkpoint {
  TrainConfig config;
  std::vector<std::string> vocab;
  std::string meta;  // JSON echo
  std::map<std::string, Tensor> tensors;
};

/// "GXN1", JSON echo, then named tensor blocks.
void write_checkpoint(const std::filesystem::path& path, const std::string& meta, const std::vector<std::pair<std::string, Tensor>>& blocks);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies `param/<name>` and `buffer/<name>` blocks into matching tensors; returns how many were set.
std::size_t restore_parameters(const Checkpoint& ckpt, nn::Parameters& params, bool require_all = true);

/// A model rebuilt from a checkpoint for evaluation and sampling.
struct LoadedModel {
  TrainConfig config;
  data::Vocabulary vocab;
  GxnModel model;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace gxn
