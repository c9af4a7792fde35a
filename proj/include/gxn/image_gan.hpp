#pragma once

#include "gxn/nn.hpp"

namespace gxn {

struct GanConfig {
  std::size_t text_dim = 1024;  // t_l
  std::size_t cond_dim = 128;   // d_c
  std::size_t z_dim = 64;
  std::size_t image_size = 64;
  std::vector<std::size_t> generator_channels{256, 128, 64, 32};
  std::vector<std::size_t> discriminator_channels{32, 64, 128, 256};
  std::size_t discriminator_text_dim = 128;
  double beta_f = 0.5;
  double beta_w = 0.5;
  double beta_s = 2.0;
  // Off: t_c is the compressed t_l and the KL term is dropped.
  bool cond_augment = true;
  bool clamp_log_var = true;  // log sigma^2 in [-10, 10]
  // Generator minimizes -log D(fake) instead of log(1 - D(fake)).
  bool non_saturating = false;
};

void validate(const GanConfig& cfg);

struct CondOutput {
  Tensor t_c;
  Tensor mu, sigma;  // undefined when augmentation is off
};

/// Conditioning augmentation: phi = tanh(compress(t_l)), then Gaussian heads
/// mu(phi) and log sigma^2(phi), t_c = mu + sigma * eps.
class CondAugment {
 public:
  CondAugment() = default;
  CondAugment(const GanConfig& cfg, Rng& rng);

  nn::LinearMap compress, mu_head, log_var_head;

  /// eps ~ N(0, I) from `rng`; a null rng uses eps = 0 (t_c = mu).
  CondOutput sample(const Tensor& t_l, Rng* rng) const;
  /// Explicit noise [B x cond_dim].
  CondOutput apply(const Tensor& t_l, const Tensor& eps) const;
  std::size_t cond_dim() const { return compress.out_dim(); }
  void collect(const std::string& prefix, nn::Parameters& out);

 private:
  bool enabled_ = true;
  bool clamp_ = true;
};

/// 0.5 * sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1) over every entry.
Tensor kl_to_standard_normal(const Tensor& mu, const Tensor& sigma);

/// [n x z_dim] standard-normal noise.
Tensor sample_noise(std::size_t n, std::size_t z_dim, Rng& rng);

/// G_i(z, t_c): image decoder over [z; t_c].
class Generator {
 public:
  Generator() = default;
  Generator(const GanConfig& cfg, Rng& rng);

  std::size_t z_dim() const { return z_dim_; }
  Tensor generate(const Tensor& z, const Tensor& t_c, nn::Mode mode);
  void collect(const std::string& prefix, nn::Parameters& out);

 private:
  std::size_t z_dim_ = 0;
  nn::ImageDecoder decoder_;
};

/// Matching-aware discriminator: conv trunk over the image, compressed t_l
/// tiled over the final map and concatenated before the last conv block,
/// then a zero-initialized linear logit.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const GanConfig& cfg, Rng& rng);

  nn::LinearMap text_compress;
  nn::LinearMap logit_head;

  /// images [B, S, S, 3], t_l [B x text_dim] -> logits [B].
  Tensor logits(const Tensor& images, const Tensor& t_l, nn::Mode mode);
  /// sigmoid(logits).
  Tensor score(const Tensor& images, const Tensor& t_l, nn::Mode mode);
  void collect(const std::string& prefix, nn::Parameters& out);

 private:
  std::size_t image_size_ = 0;
  std::size_t text_dim_ = 0;
  nn::ConvStack trunk_;
  nn::ConvStack joint_;
};

/// Caption features shifted by one row: row i pairs with caption i + 1 (mod B).
Tensor mismatched(const Tensor& t_l);

/// -mean[log D(i, t) + beta_f log(1 - D(fake, t)) + beta_w log(1 - D(i, t'))]
/// with the fake images and caption features detached.
Tensor discriminator_loss(Discriminator& disc, const Tensor& real, const Tensor& fake, const Tensor& t_l, const Tensor& t_l_wrong,
                          const GanConfig& cfg, nn::Mode mode = nn::Mode::train);

/// mean log(1 - D(fake, t)) (or -mean log D) + beta_s KL / B, with the
/// discriminator frozen. `cond` supplies mu and sigma when augmentation is on.
Tensor generator_loss(Discriminator& disc, const Tensor& fake, const Tensor& t_l, const CondOutput& cond, const GanConfig& cfg,
                      nn::Mode mode = nn::Mode::train);

/// Conditioning, generator and discriminator of the text-to-image path.
struct ImageGan {
  GanConfig config;
  CondAugment cond;
  Generator generator;
  Discriminator discriminator;

  ImageGan() = default;
  ImageGan(const GanConfig& cfg, Rng& rng);

  void collect_generator(nn::Parameters& out);  // cond + generator
  void collect_discriminator(nn::Parameters& out);
};

}  // namespace gxn
