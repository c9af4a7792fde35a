#include "gxn/trainer.hpp"

#include "gxn/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace gxn {

using json = nlohmann::ordered_json;

namespace {

const std::vector<std::pair<TrainMode, std::string>>& mode_table() {
  static const std::vector<std::pair<TrainMode, std::string>> table{{TrainMode::embed_only, "embed_only"},
                                                                    {TrainMode::i2t_xe, "i2t_xe"},
                                                                    {TrainMode::i2t_mix, "i2t_mix"},
                                                                    {TrainMode::t2i, "t2i"},
                                                                    {TrainMode::i2t_t2i, "i2t_t2i"}};
  return table;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("invalid config: " + what);
}

void check_finite(double value, const char* what) {
  if (!std::isfinite(value)) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace

const std::vector<std::string>& train_mode_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [mode, name] : mode_table()) n.push_back(name);
    return n;
  }();
  return names;
}

std::string to_string(TrainMode mode) {
  for (const auto& [m, name] : mode_table()) {
    if (m == mode) return name;
  }
  throw std::invalid_argument("unknown training mode");
}

TrainMode parse_train_mode(const std::string& name) {
  for (const auto& [m, n] : mode_table()) {
    if (n == name) return m;
  }
  std::string valid;
  for (const auto& n : train_mode_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown mode '" + name + "' (valid: " + valid + ")");
}

bool uses_i2t(TrainMode mode) { return mode == TrainMode::i2t_xe || mode == TrainMode::i2t_mix || mode == TrainMode::i2t_t2i; }
bool uses_t2i(TrainMode mode) { return mode == TrainMode::t2i || mode == TrainMode::i2t_t2i; }

void validate(const TrainConfig& cfg) {
  require(cfg.batch_size >= 4, "batch_size must be at least 4");
  require(cfg.learning_rate > 0.0, "learning_rate must be positive");
  require(cfg.generative_learning_rate.value_or(1.0) > 0.0, "generative_learning_rate must be positive");
  require(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0 && cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0, "adam betas must lie in [0, 1)");
  require(cfg.adam_eps > 0.0, "adam_eps must be positive");
  require(cfg.margin >= 0.0, "margin must be non-negative");
  require(cfg.lambda >= 0.0 && cfg.lambda <= 1.0, "lambda must lie in [0, 1]");
  require(cfg.beta_f >= 0.0 && cfg.beta_w >= 0.0 && cfg.beta_s >= 0.0, "GAN weights must be non-negative");
  require(cfg.gamma_start >= 0.0 && cfg.gamma_start <= 1.0 && cfg.gamma_end >= 0.0 && cfg.gamma_end <= 1.0, "gamma bounds must lie in [0, 1]");
  require(cfg.xe_warmup >= 0.0 && cfg.xe_warmup < 1.0, "xe_warmup must lie in [0, 1)");
  require(cfg.max_sampling_prob >= 0.0 && cfg.max_sampling_prob <= 1.0, "max_sampling_prob must lie in [0, 1]");
  require(cfg.image_dropout >= 0.0 && cfg.image_dropout < 1.0, "image_dropout must lie in [0, 1)");
  require(cfg.word_dim > 0 && cfg.hidden_dim > 0 && cfg.joint_dim > 0 && cfg.image_feature_dim > 0 && cfg.decoder_hidden_dim > 0 &&
              cfg.cond_dim > 0 && cfg.z_dim > 0 && cfg.discriminator_text_dim > 0 && cfg.eval_chunk > 0,
          "dimensions must be positive");
  require(!cfg.image_channels.empty() && !cfg.generator_channels.empty() && !cfg.discriminator_channels.empty(), "channel lists must be non-empty");
  require(cfg.max_decode_len > 0, "max_decode_len must be positive");
}

TrainConfig desk_profile(TrainConfig base) {
  base.word_dim = 32;
  base.hidden_dim = 128;
  base.joint_dim = 128;
  base.image_channels = {16, 32, 64, 32};
  base.image_feature_dim = 256;
  base.decoder_hidden_dim = 128;
  base.max_decode_len = 16;
  base.cond_dim = 32;
  base.z_dim = 16;
  base.generator_channels = {64, 32, 16, 8};
  base.discriminator_channels = {8, 16, 32, 64};
  base.discriminator_text_dim = 32;
  base.learning_rate = 1e-3;
  base.generative_learning_rate = 2e-4;
  base.normalize_embeddings = true;
  return base;
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["mode"] = to_string(c.mode);
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["generative_learning_rate"] = c.generative_learning_rate ? json(*c.generative_learning_rate) : json(nullptr);
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["margin"] = c.margin;
  j["lambda"] = c.lambda;
  j["beta_f"] = c.beta_f;
  j["beta_w"] = c.beta_w;
  j["beta_s"] = c.beta_s;
  j["gamma_start"] = c.gamma_start;
  j["gamma_end"] = c.gamma_end;
  j["xe_warmup"] = c.xe_warmup;
  j["max_sampling_prob"] = c.max_sampling_prob;
  j["word_dim"] = c.word_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["joint_dim"] = c.joint_dim;
  j["image_channels"] = c.image_channels;
  j["image_feature_dim"] = c.image_feature_dim;
  j["image_dropout"] = c.image_dropout;
  j["bidirectional_high"] = c.bidirectional_high;
  j["abs_preprocess"] = c.abs_preprocess;
  j["normalize_embeddings"] = c.normalize_embeddings;
  j["decoder_hidden_dim"] = c.decoder_hidden_dim;
  j["max_decode_len"] = c.max_decode_len;
  j["cond_dim"] = c.cond_dim;
  j["z_dim"] = c.z_dim;
  j["generator_channels"] = c.generator_channels;
  j["discriminator_channels"] = c.discriminator_channels;
  j["discriminator_text_dim"] = c.discriminator_text_dim;
  j["cond_augment"] = c.cond_augment;
  j["non_saturating"] = c.non_saturating;
  j["cider_length_penalty"] = c.cider_length_penalty;
  j["eval_chunk"] = c.eval_chunk;
  return j.dump(2);
}

TrainConfig config_from_json(const std::string& text) {
  const auto j = json::parse(text);
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  if (j.contains("generative_learning_rate") && !j.at("generative_learning_rate").is_null()) {
    c.generative_learning_rate = j.at("generative_learning_rate").get<double>();
  }
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("margin", c.margin);
  get("lambda", c.lambda);
  get("beta_f", c.beta_f);
  get("beta_w", c.beta_w);
  get("beta_s", c.beta_s);
  get("gamma_start", c.gamma_start);
  get("gamma_end", c.gamma_end);
  get("xe_warmup", c.xe_warmup);
  get("max_sampling_prob", c.max_sampling_prob);
  get("word_dim", c.word_dim);
  get("hidden_dim", c.hidden_dim);
  get("joint_dim", c.joint_dim);
  get("image_channels", c.image_channels);
  get("image_feature_dim", c.image_feature_dim);
  get("image_dropout", c.image_dropout);
  get("bidirectional_high", c.bidirectional_high);
  get("abs_preprocess", c.abs_preprocess);
  get("normalize_embeddings", c.normalize_embeddings);
  get("decoder_hidden_dim", c.decoder_hidden_dim);
  get("max_decode_len", c.max_decode_len);
  get("cond_dim", c.cond_dim);
  get("z_dim", c.z_dim);
  get("generator_channels", c.generator_channels);
  get("discriminator_channels", c.discriminator_channels);
  get("discriminator_text_dim", c.discriminator_text_dim);
  get("cond_augment", c.cond_augment);
  get("non_saturating", c.non_saturating);
  get("cider_length_penalty", c.cider_length_penalty);
  get("eval_chunk", c.eval_chunk);
  validate(c);
  return c;
}

EmbeddingConfig embedding_config(const TrainConfig& cfg, std::size_t vocab_size) {
  EmbeddingConfig e;
  e.vocab_size = vocab_size;
  e.word_dim = cfg.word_dim;
  e.hidden_dim = cfg.hidden_dim;
  e.joint_dim = cfg.joint_dim;
  e.image = {.image_size = data::image_size, .channels = cfg.image_channels, .feature_dim = cfg.image_feature_dim, .dropout = cfg.image_dropout};
  e.bidirectional_high = cfg.bidirectional_high;
  e.abs_preprocess = cfg.abs_preprocess;
  e.normalize = cfg.normalize_embeddings;
  return e;
}

CaptionerConfig captioner_config(const TrainConfig& cfg, std::size_t vocab_size) {
  return {.vocab_size = vocab_size,
          .word_dim = cfg.word_dim,
          .feature_dim = cfg.joint_dim,
          .hidden_dim = cfg.decoder_hidden_dim,
          .max_decode_len = cfg.max_decode_len,
          .bos = data::Vocabulary::bos,
          .eos = data::Vocabulary::eos};
}

GanConfig gan_config(const TrainConfig& cfg) {
  GanConfig g;
  g.text_dim = cfg.joint_dim;
  g.cond_dim = cfg.cond_dim;
  g.z_dim = cfg.z_dim;
  g.image_size = data::image_size;
  g.generator_channels = cfg.generator_channels;
  g.discriminator_channels = cfg.discriminator_channels;
  g.discriminator_text_dim = cfg.discriminator_text_dim;
  g.beta_f = cfg.beta_f;
  g.beta_w = cfg.beta_w;
  g.beta_s = cfg.beta_s;
  g.cond_augment = cfg.cond_augment;
  g.non_saturating = cfg.non_saturating;
  return g;
}

// ---------------------------------------------------------------------------

GxnModel::GxnModel(const TrainConfig& cfg, std::size_t vocab_size, Rng& rng)
    : embed(embedding_config(cfg, vocab_size), rng), captioner(captioner_config(cfg, vocab_size), rng), gan(gan_config(cfg), rng) {}

nn::Parameters GxnModel::all() {
  nn::Parameters p;
  embed.collect(p);
  captioner.collect("dec", p);
  gan.collect_generator(p);
  gan.collect_discriminator(p);
  return p;
}

nn::Parameters GxnModel::group(ParamGroup g) {
  nn::Parameters p;
  switch (g) {
    case ParamGroup::embedding: embed.collect(p); break;
    case ParamGroup::i2t:
      embed.collect_words(p);
      embed.collect_image_low(p);
      captioner.collect("dec", p);
      break;
    case ParamGroup::discriminator: gan.collect_discriminator(p); break;
    case ParamGroup::generator:
      embed.collect_words(p);
      embed.collect_text_low(p);
      gan.collect_generator(p);
      break;
  }
  return p;
}

// ---------------------------------------------------------------------------

void adam_step(Tensor& param, const Tensor::Vector& grad, AdamSlot& slot, const AdamConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(param.size());
  if (grad.size() != n) throw ShapeError("adam: gradient of " + std::to_string(grad.size()) + " values for tensor " + to_string(param.shape()));
  if (slot.step == 0 && slot.m.size() == 0) {
    slot.m = Tensor::Vector::Zero(n);
    slot.v = Tensor::Vector::Zero(n);
  }
  if (slot.m.size() != n || slot.v.size() != n) throw ShapeError("adam: moment size does not match tensor " + to_string(param.shape()));
  ++slot.step;
  slot.m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * grad;
  slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.step));
  auto& w = param.mutable_values();
  w.array() -= cfg.learning_rate * (slot.m.array() / c1) / ((slot.v.array() / c2).sqrt() + cfg.eps);
}

void Adam::step(const nn::Parameters& params) { step(params, config_.learning_rate); }

void Adam::step(const nn::Parameters& params, double learning_rate) {
  auto cfg = config_;
  cfg.learning_rate = learning_rate;
  for (const auto& [name, t] : params.tensors) adam_step(*t, t->grad(), slots_[name], cfg);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<TokenSeq>> encode_captions(const data::DatasetSplit& split, const data::Vocabulary& vocab) {
  std::vector<std::vector<TokenSeq>> out;
  out.reserve(split.items.size());
  for (const auto& item : split.items) {
    auto& caps = out.emplace_back();
    for (const auto& c : item.captions) caps.push_back(vocab.encode(c));
  }
  return out;
}

RetrievalEval evaluate_retrieval(EmbeddingModel& model, const data::ImageBank& images, const std::vector<std::vector<TokenSeq>>& captions,
                                 double lambda, std::size_t chunk) {
  if (images.size() != captions.size()) throw std::invalid_argument("evaluation: image and caption counts differ");
  if (images.size() == 0) throw std::invalid_argument("evaluation on an empty split");
  NoGradGuard no_grad;
  const auto n = images.size(), d = model.joint_dim();
  Tensor::Vector vh(static_cast<Eigen::Index>(n * d)), vl(vh.size());
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const auto e = model.embed_images(images.batch(idx), nn::Mode::eval);
    vh.segment(static_cast<Eigen::Index>(start * d), e.v_h.values().size()) = e.v_h.values();
    vl.segment(static_cast<Eigen::Index>(start * d), e.v_l.values().size()) = e.v_l.values();
  }
  std::vector<TokenSeq> flat;
  std::vector<std::vector<std::size_t>> image_truth(n);
  std::vector<std::vector<std::size_t>> caption_truth;
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& c : captions[i]) {
      image_truth[i].push_back(flat.size());
      caption_truth.push_back({i});
      flat.push_back(c);
    }
  }
  const auto m = flat.size();
  Tensor::Vector th(static_cast<Eigen::Index>(m * d)), tl(th.size());
  const std::size_t text_chunk = chunk * 5;
  for (std::size_t start = 0; start < m; start += text_chunk) {
    const auto count = std::min(m, start + text_chunk) - start;
    const auto e = model.embed_captions(std::span<const TokenSeq>(flat).subspan(start, count));
    th.segment(static_cast<Eigen::Index>(start * d), e.t_h.values().size()) = e.t_h.values();
    tl.segment(static_cast<Eigen::Index>(start * d), e.t_l.values().size()) = e.t_l.values();
  }
  const ImageEmbedding iv{Tensor::constant({n, d}, std::move(vh)), Tensor::constant({n, d}, std::move(vl))};
  const TextEmbedding tv{Tensor::constant({m, d}, std::move(th)), Tensor::constant({m, d}, std::move(tl))};
  RetrievalEval out;
  out.scores = score_matrix(tv, iv, lambda);
  out.i2t = retrieval_metrics({out.scores.transpose(), image_truth});
  out.t2i = retrieval_metrics({out.scores, caption_truth});
  out.sum = sum_score(out.i2t.r1, out.i2t.r10, out.t2i.r1, out.t2i.r10);
  return out;
}

void write_train_log(std::ostream& os, const std::vector<EpochLog>& rows, TrainMode mode) {
  os << "epoch,mode,rank_loss,xe_loss,scst_loss,d_loss,g_loss,i2t_R@1,i2t_R@5,i2t_R@10,i2t_Medr,t2i_R@1,t2i_R@5,t2i_R@10,t2i_Medr,Sum,gamma\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << ',' << buf;
  };
  for (const auto& r : rows) {
    os << r.epoch << ',' << to_string(mode);
    for (double v : {r.rank_loss, r.xe_loss, r.scst_loss, r.d_loss, r.g_loss, r.i2t.r1, r.i2t.r5, r.i2t.r10, r.i2t.medr, r.t2i.r1, r.t2i.r5,
                     r.t2i.r10, r.t2i.medr, r.sum, r.gamma}) {
      num(v);
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

json log_to_json(const EpochLog& r) {
  return json{{"epoch", r.epoch},       {"rank_loss", r.rank_loss}, {"xe_loss", r.xe_loss}, {"scst_loss", r.scst_loss},
              {"d_loss", r.d_loss},     {"g_loss", r.g_loss},       {"i2t", {r.i2t.r1, r.i2t.r5, r.i2t.r10, r.i2t.medr}},
              {"t2i", {r.t2i.r1, r.t2i.r5, r.t2i.r10, r.t2i.medr}}, {"sum", r.sum}, {"gamma", r.gamma}};
}

EpochLog log_from_json(const json& j) {
  EpochLog r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.rank_loss = j.at("rank_loss").get<double>();
  r.xe_loss = j.at("xe_loss").get<double>();
  r.scst_loss = j.at("scst_loss").get<double>();
  r.d_loss = j.at("d_loss").get<double>();
  r.g_loss = j.at("g_loss").get<double>();
  const auto& a = j.at("i2t");
  r.i2t = {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(), a.at(3).get<double>()};
  const auto& b = j.at("t2i");
  r.t2i = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
  r.sum = j.at("sum").get<double>();
  r.gamma = j.at("gamma").get<double>();
  return r;
}

Tensor vector_block(const Tensor::Vector& v) { return Tensor::constant({static_cast<std::size_t>(v.size())}, v); }

}  // namespace

Trainer::Trainer(const TrainConfig& cfg, const data::Dataset& dataset, const data::ImageBank& train_images, const data::ImageBank& val_images)
    : config_(cfg), dataset_(&dataset), train_images_(&train_images), val_images_(&val_images) {
  gxn::validate(cfg);
  if (train_images.size() != dataset.train.items.size() || val_images.size() != dataset.val.items.size()) {
    throw std::invalid_argument("image banks do not match the dataset splits");
  }
  if (dataset.train.items.size() < 2) throw std::invalid_argument("training needs at least two images");
  train_caps_ = encode_captions(dataset.train, dataset.vocab);
  val_caps_ = encode_captions(dataset.val, dataset.vocab);
  train_stats_ = CorpusStats(train_caps_);
  Rng init(derive_seed(cfg.seed, 0));
  model_ = GxnModel(cfg, dataset.vocab.size(), init);
  adam_ = Adam({.learning_rate = cfg.learning_rate, .beta1 = cfg.adam_beta1, .beta2 = cfg.adam_beta2, .eps = cfg.adam_eps});
  rng_ = Rng(derive_seed(cfg.seed, 1));
}

std::vector<Batch> Trainer::epoch_batches() {
  const auto n = train_caps_.size();
  const auto b = std::min(config_.batch_size, n);
  const auto count = (n + b - 1) / b;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(std::span<std::size_t>(order), rng_);
  std::vector<Batch> batches(count);
  std::size_t at = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const auto size = n / count + (k < n % count ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j, ++at) {
      const auto item = order[at];
      batches[k].items.push_back(item);
      batches[k].captions.push_back(train_caps_[item][uniform_index(rng_, train_caps_[item].size())]);
    }
  }
  return batches;
}

std::size_t Trainer::xe_epochs() const {
  if (config_.mode != TrainMode::i2t_mix && config_.mode != TrainMode::i2t_t2i) return config_.epochs;
  return static_cast<std::size_t>(std::floor(config_.xe_warmup * static_cast<double>(config_.epochs)));
}

double Trainer::gamma(std::size_t epoch) const {
  if (config_.mode != TrainMode::i2t_mix && config_.mode != TrainMode::i2t_t2i) return 0.0;
  const auto warmup = xe_epochs();
  if (epoch < warmup) return 0.0;
  return gamma_schedule(epoch - warmup, config_.epochs - warmup, config_.gamma_start, config_.gamma_end);
}

double Trainer::sampling_prob(std::size_t epoch) const {
  const auto ramp = std::max<std::size_t>(2, xe_epochs()) - 1;
  return config_.max_sampling_prob * std::min(1.0, static_cast<double>(epoch) / static_cast<double>(ramp));
}

Tensor Trainer::images_of(const Batch& batch) const { return train_images_->batch(batch.items); }

double Trainer::reward(const TokenSeq& candidate, std::size_t item) const {
  return cider(candidate, references(item), train_stats_, {.length_penalty = config_.cider_length_penalty});
}

void Trainer::zero_grads() {
  for (const auto& [name, t] : model_.all().tensors) t->zero_grad();
}

void Trainer::update(ParamGroup g) {
  adam_.step(model_.group(g), g == ParamGroup::embedding ? config_.learning_rate : config_.generative_learning_rate.value_or(config_.learning_rate));
}

double Trainer::step_embed(const Batch& batch) {
  zero_grads();
  const auto v = model_.embed.embed_images(images_of(batch), nn::Mode::train, &rng_);
  const auto t = model_.embed.embed_captions(batch.captions);
  const auto loss = ranking_loss_dual(EmbeddingPair(v, t), {.margin = config_.margin, .lambda = config_.lambda});
  check_finite(loss.item(), "ranking loss");
  backward(loss);
  update(ParamGroup::embedding);
  if (call_log) call_log->push_back("rank");
  return loss.item();
}

I2tLosses Trainer::step_gen_i2t(const Batch& batch, std::size_t epoch) {
  zero_grads();
  const auto v_l = model_.embed.embed_images_low(images_of(batch), nn::Mode::train, &rng_);
  std::vector<TokenSeq> targets;
  for (const auto& c : batch.captions) targets.push_back(with_eos(c, data::Vocabulary::eos));
  const RewardFn reward_fn = [&](const TokenSeq& candidate, std::size_t row) { return reward(candidate, batch.items[row]); };
  const auto mixed = mixed_loss(model_.captioner, model_.embed.words, v_l, targets, reward_fn, gamma(epoch), sampling_prob(epoch), rng_);
  check_finite(mixed.loss.item(), "caption loss");
  if (mixed.loss.tracked()) {
    backward(mixed.loss);
    update(ParamGroup::i2t);
  }
  if (call_log) {
    if (mixed.used_xe) call_log->push_back("xe");
    if (mixed.used_scst) call_log->push_back("scst");
  }
  I2tLosses out{.gen = mixed.loss.item(), .xe = mixed.xe, .scst = mixed.scst};
  out.rank = step_embed(batch);
  return out;
}

T2iLosses Trainer::step_gen_t2i(const Batch& batch) {
  auto& gan = model_.gan;
  zero_grads();
  const auto real = images_of(batch);
  const auto t_l = model_.embed.embed_captions_low(batch.captions);
  const auto cond = gan.cond.sample(t_l, &rng_);
  const auto z = sample_noise(batch.items.size(), gan.config.z_dim, rng_);
  const auto fake = gan.generator.generate(z, cond.t_c, nn::Mode::train);

  T2iLosses out;
  const auto d_loss = discriminator_loss(gan.discriminator, real, fake, t_l, mismatched(t_l), gan.config);
  out.d = d_loss.item();
  check_finite(out.d, "discriminator loss");
  backward(d_loss);
  update(ParamGroup::discriminator);
  if (call_log) call_log->push_back("D");

  zero_grads();
  const auto g_loss = generator_loss(gan.discriminator, fake, t_l, cond, gan.config);
  out.g = g_loss.item();
  check_finite(out.g, "generator loss");
  backward(g_loss);
  update(ParamGroup::generator);
  if (call_log) call_log->push_back("G");

  out.rank = step_embed(batch);
  return out;
}

RetrievalEval Trainer::validate() { return evaluate_retrieval(model_.embed, *val_images_, val_caps_, config_.lambda, config_.eval_chunk); }

const EpochLog& Trainer::start() {
  if (log_.empty()) {
    const auto eval = validate();
    log_.push_back({.epoch = 0, .i2t = eval.i2t, .t2i = eval.t2i, .sum = eval.sum});
  }
  return log_.front();
}

const EpochLog& Trainer::run_epoch() {
  start();
  const auto batches = epoch_batches();
  EpochLog row;
  row.epoch = epoch_ + 1;
  row.gamma = gamma(epoch_);
  std::size_t rank_steps = 0;
  for (const auto& batch : batches) {
    switch (config_.mode) {
      case TrainMode::embed_only:
        row.rank_loss += step_embed(batch);
        ++rank_steps;
        break;
      case TrainMode::i2t_xe:
      case TrainMode::i2t_mix: {
        const auto l = step_gen_i2t(batch, epoch_);
        row.xe_loss += l.xe;
        row.scst_loss += l.scst;
        row.rank_loss += l.rank;
        ++rank_steps;
        break;
      }
      case TrainMode::t2i: {
        const auto l = step_gen_t2i(batch);
        row.d_loss += l.d;
        row.g_loss += l.g;
        row.rank_loss += l.rank;
        ++rank_steps;
        break;
      }
      case TrainMode::i2t_t2i: {
        const auto a = step_gen_i2t(batch, epoch_);
        const auto b = step_gen_t2i(batch);
        row.xe_loss += a.xe;
        row.scst_loss += a.scst;
        row.d_loss += b.d;
        row.g_loss += b.g;
        row.rank_loss += a.rank + b.rank;
        rank_steps += 2;
        break;
      }
    }
  }
  const auto nb = static_cast<double>(batches.size());
  row.rank_loss /= static_cast<double>(rank_steps);
  row.xe_loss /= nb;
  row.scst_loss /= nb;
  row.d_loss /= nb;
  row.g_loss /= nb;
  ++epoch_;
  const auto eval = validate();
  row.i2t = eval.i2t;
  row.t2i = eval.t2i;
  row.sum = eval.sum;
  log_.push_back(row);
  return log_.back();
}

void Trainer::train(const std::filesystem::path& out, const std::function<void(Trainer&)>& after_epoch) {
  std::filesystem::create_directories(out);
  {
    std::ofstream os(out / "config.json");
    os << config_to_json(config_) << '\n';
  }
  auto write_log = [&] {
    std::ofstream os(out / "log.csv");
    write_train_log(os, log_, config_.mode);
  };
  start();
  write_log();
  while (epoch_ < config_.epochs) {
    const auto& row = run_epoch();
    if (row.sum > best_sum_) {
      best_sum_ = row.sum;
      best_epoch_ = row.epoch;
      save(out / "best.ckpt");
    }
    save(out / "last.ckpt");
    write_log();
    if (after_epoch) after_epoch(*this);
  }
}

void Trainer::save(const std::filesystem::path& path) {
  const auto params = model_.all();
  json meta;
  meta["config"] = json::parse(config_to_json(config_));
  meta["vocab"] = dataset_->vocab.tokens();
  meta["epoch"] = epoch_;
  meta["best_sum"] = best_sum_;
  meta["best_epoch"] = best_epoch_;
  meta["rng"] = save_rng(rng_);
  meta["log"] = json::array();
  for (const auto& r : log_) meta["log"].push_back(log_to_json(r));
  std::vector<std::pair<std::string, Tensor>> blocks;
  for (const auto& [name, t] : params.tensors) blocks.emplace_back("param/" + name, *t);
  for (const auto& [name, b] : params.buffers) blocks.emplace_back("buffer/" + name, vector_block(*b));
  for (const auto& [name, slot] : adam_.slots()) {
    blocks.emplace_back("adam.m/" + name, vector_block(slot.m));
    blocks.emplace_back("adam.v/" + name, vector_block(slot.v));
    blocks.emplace_back("adam.t/" + name, Tensor::scalar(static_cast<double>(slot.step)));
  }
  write_checkpoint(path, meta.dump(), blocks);
}

void Trainer::load(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.vocab != dataset_->vocab.tokens()) throw std::invalid_argument("checkpoint vocabulary does not match the dataset");
  auto params = model_.all();
  restore_parameters(ckpt, params);
  const auto meta = json::parse(ckpt.meta);
  adam_.slots().clear();
  const std::string prefix = "adam.t/";
  for (const auto& [key, t] : ckpt.tensors) {
    if (key.rfind(prefix, 0) != 0) continue;
    const auto name = key.substr(prefix.size());
    AdamSlot slot;
    slot.step = static_cast<std::uint64_t>(t.item());
    slot.m = ckpt.tensors.at("adam.m/" + name).values();
    slot.v = ckpt.tensors.at("adam.v/" + name).values();
    adam_.slots()[name] = std::move(slot);
  }
  rng_ = load_rng(meta.at("rng").get<std::string>());
  epoch_ = meta.at("epoch").get<std::size_t>();
  best_sum_ = meta.at("best_sum").get<double>();
  best_epoch_ = meta.at("best_epoch").get<std::size_t>();
  log_.clear();
  for (const auto& r : meta.at("log")) log_.push_back(log_from_json(r));
}

void Trainer::init_from(const std::filesystem::path& i2t_checkpoint, const std::filesystem::path& t2i_checkpoint) {
  const auto a = read_checkpoint(i2t_checkpoint);
  const auto b = read_checkpoint(t2i_checkpoint);
  for (const auto* c : {&a, &b}) {
    if (c->vocab != dataset_->vocab.tokens()) throw std::invalid_argument("checkpoint vocabulary does not match the dataset");
  }
  if (!uses_i2t(a.config.mode)) throw std::invalid_argument("--init-i2t checkpoint was trained in mode " + to_string(a.config.mode));
  if (!uses_t2i(b.config.mode)) throw std::invalid_argument("--init-t2i checkpoint was trained in mode " + to_string(b.config.mode));
  nn::Parameters dec, gan, embed;
  model_.captioner.collect("dec", dec);
  model_.gan.collect_generator(gan);
  model_.gan.collect_discriminator(gan);
  model_.embed.collect(embed);
  restore_parameters(a, dec);
  restore_parameters(b, gan);
  const auto sum_a = json::parse(a.meta).at("best_sum").get<double>();
  const auto sum_b = json::parse(b.meta).at("best_sum").get<double>();
  restore_parameters(sum_a >= sum_b ? a : b, embed);
  adam_.slots().clear();
  epoch_ = 0;
  log_.clear();
  best_sum_ = -1.0;
  best_epoch_ = 0;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char magic[4] = {'G', 'X', 'N', '1'};
}

void write_checkpoint(const std::filesystem::path& path, const std::string& meta, const std::vector<std::pair<std::string, Tensor>>& blocks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(magic, 4);
    write_string(os, meta);
    write_u64(os, blocks.size());
    for (const auto& [name, t] : blocks) {
      write_string(os, name);
      write_tensor(os, t);
    }
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char head[4];
  if (!is.read(head, 4) || !std::equal(head, head + 4, magic)) throw std::runtime_error(path.string() + " is not a checkpoint");
  Checkpoint c;
  c.meta = read_string(is);
  const auto meta = json::parse(c.meta);
  c.config = config_from_json(meta.at("config").dump());
  c.vocab = meta.at("vocab").get<std::vector<std::string>>();
  const auto count = read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = read_string(is, 4096);
    c.tensors.emplace(std::move(name), read_tensor(is));
  }
  return c;
}

std::size_t restore_parameters(const Checkpoint& ckpt, nn::Parameters& params, bool require_all) {
  std::size_t restored = 0;
  auto fetch = [&](const std::string& key) -> const Tensor* {
    const auto it = ckpt.tensors.find(key);
    if (it != ckpt.tensors.end()) return &it->second;
    if (require_all) throw std::runtime_error("checkpoint lacks " + key);
    return nullptr;
  };
  for (auto& [name, t] : params.tensors) {
    const auto* src = fetch("param/" + name);
    if (!src) continue;
    if (src->shape() != t->shape()) throw ShapeError("checkpoint tensor " + name + " has shape " + to_string(src->shape()) + ", model expects " + to_string(t->shape()));
    t->mutable_values() = src->values();
    ++restored;
  }
  for (auto& [name, b] : params.buffers) {
    const auto* src = fetch("buffer/" + name);
    if (!src) continue;
    if (static_cast<Eigen::Index>(src->size()) != b->size()) throw ShapeError("checkpoint buffer " + name + " has the wrong size");
    *b = src->values();
    ++restored;
  }
  return restored;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const auto ckpt = read_checkpoint(checkpoint);
  LoadedModel out;
  out.config = ckpt.config;
  out.vocab = data::Vocabulary::from_tokens(ckpt.vocab);
  Rng rng(0);
  out.model = GxnModel(out.config, out.vocab.size(), rng);
  auto params = out.model.all();
  restore_parameters(ckpt, params);
  return out;
}

}  // namespace gxn
