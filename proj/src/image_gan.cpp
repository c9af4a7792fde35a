#include "gxn/image_gan.hpp"

#include <cmath>

namespace gxn {

void validate(const GanConfig& cfg) {
  if (!(cfg.beta_f >= 0.0 && cfg.beta_w >= 0.0 && cfg.beta_s >= 0.0)) throw std::invalid_argument("GAN loss weights must be non-negative");
  if (cfg.text_dim == 0 || cfg.cond_dim == 0 || cfg.z_dim == 0 || cfg.discriminator_text_dim == 0) {
    throw std::invalid_argument("GAN dimensions must be positive");
  }
  if (cfg.discriminator_channels.empty()) throw std::invalid_argument("discriminator needs at least one conv layer");
}

CondAugment::CondAugment(const GanConfig& cfg, Rng& rng)
    : compress(cfg.text_dim, cfg.cond_dim, rng),
      mu_head(cfg.cond_dim, cfg.cond_dim, rng),
      log_var_head(cfg.cond_dim, cfg.cond_dim, rng),
      enabled_(cfg.cond_augment),
      clamp_(cfg.clamp_log_var) {}

CondOutput CondAugment::apply(const Tensor& t_l, const Tensor& eps) const {
  const auto phi = tanh(compress(t_l));
  if (!enabled_) return {phi, {}, {}};
  if (eps.shape() != phi.shape()) throw ShapeError("condition noise " + to_string(eps.shape()) + " does not match " + to_string(phi.shape()));
  auto log_var = log_var_head(phi);
  if (clamp_) log_var = clamp(log_var, -10.0, 10.0);
  CondOutput out;
  out.mu = mu_head(phi);
  out.sigma = exp(scale(log_var, 0.5));
  out.t_c = add(out.mu, mul(out.sigma, eps));
  return out;
}

CondOutput CondAugment::sample(const Tensor& t_l, Rng* rng) const {
  const auto rows = t_l.rank() == 2 ? t_l.dim(0) : 1;
  if (!rng) return apply(t_l, Tensor::zeros({rows, cond_dim()}));
  return apply(t_l, sample_noise(rows, cond_dim(), *rng));
}

void CondAugment::collect(const std::string& prefix, nn::Parameters& out) {
  compress.collect(prefix + ".compress", out);
  if (!enabled_) return;
  mu_head.collect(prefix + ".mu", out);
  log_var_head.collect(prefix + ".log_var", out);
}

Tensor kl_to_standard_normal(const Tensor& mu, const Tensor& sigma) {
  if (mu.shape() != sigma.shape()) throw ShapeError("kl: mu " + to_string(mu.shape()) + " vs sigma " + to_string(sigma.shape()));
  if (!(sigma.values().array() > 0.0).all()) throw std::invalid_argument("kl: sigma must be positive");
  const auto var = square(sigma);
  return scale(sum(add_scalar(sub(add(square(mu), var), log(var)), -1.0)), 0.5);
}

Tensor sample_noise(std::size_t n, std::size_t z_dim, Rng& rng) {
  Tensor::Vector v(static_cast<Eigen::Index>(n * z_dim));
  for (auto& x : v) x = standard_normal(rng);
  return Tensor::constant({n, z_dim}, std::move(v));
}

Generator::Generator(const GanConfig& cfg, Rng& rng)
    : z_dim_(cfg.z_dim), decoder_({.code_dim = cfg.z_dim + cfg.cond_dim, .image_size = cfg.image_size, .channels = cfg.generator_channels}, rng) {}

Tensor Generator::generate(const Tensor& z, const Tensor& t_c, nn::Mode mode) {
  if (z.rank() != 2 || z.dim(1) != z_dim_) throw ShapeError("generator: expected [B," + std::to_string(z_dim_) + "] noise, got " + to_string(z.shape()));
  return decoder_.decode(concat_last<double>({z, t_c}), mode);
}

void Generator::collect(const std::string& prefix, nn::Parameters& out) { decoder_.collect(prefix + ".decoder", out); }

Discriminator::Discriminator(const GanConfig& cfg, Rng& rng) : image_size_(cfg.image_size), text_dim_(cfg.text_dim) {
  validate(cfg);
  std::vector<nn::ConvLayerSpec> specs;
  for (std::size_t i = 0; i < cfg.discriminator_channels.size(); ++i) {
    specs.push_back({.out_channels = cfg.discriminator_channels[i], .batch_norm = i > 0, .activation = nn::Activation::leaky_relu});
  }
  trunk_ = nn::ConvStack({cfg.image_size, cfg.image_size, 3}, specs, rng);
  const auto& o = trunk_.output_shape();
  text_compress = nn::LinearMap(cfg.text_dim, cfg.discriminator_text_dim, rng);
  joint_ = nn::ConvStack({o[0], o[1], o[2] + cfg.discriminator_text_dim},
                         {{.out_channels = o[2], .activation = nn::Activation::leaky_relu, .kernel = 3, .stride = 1, .pad = 1}}, rng);
  logit_head = nn::LinearMap(o[0] * o[1] * o[2], 1, rng);
  logit_head.weight.mutable_values().setZero();
}

Tensor Discriminator::logits(const Tensor& images, const Tensor& t_l, nn::Mode mode) {
  if (images.rank() != 4 || images.dim(1) != image_size_ || images.dim(2) != image_size_ || images.dim(3) != 3) {
    throw ShapeError("discriminator: expected [B," + std::to_string(image_size_) + "," + std::to_string(image_size_) + ",3] images, got " +
                     to_string(images.shape()));
  }
  const auto batch = images.dim(0);
  if (t_l.rank() != 2 || t_l.dim(0) != batch || t_l.dim(1) != text_dim_) {
    throw ShapeError("discriminator: caption features " + to_string(t_l.shape()) + " do not match " + std::to_string(batch) + " images");
  }
  const auto maps = trunk_.forward(images, mode);
  const auto text = leaky_relu(text_compress(t_l), 0.2);
  const auto joint = joint_.forward(concat_last<double>({maps, tile_spatial(text, maps.dim(1), maps.dim(2))}), mode);
  return reshape(logit_head(reshape(joint, {batch, joint.size() / batch})), {batch});
}

Tensor Discriminator::score(const Tensor& images, const Tensor& t_l, nn::Mode mode) { return sigmoid(logits(images, t_l, mode)); }

void Discriminator::collect(const std::string& prefix, nn::Parameters& out) {
  trunk_.collect(prefix + ".conv", out);
  text_compress.collect(prefix + ".text", out);
  joint_.collect(prefix + ".joint", out);
  logit_head.collect(prefix + ".logit", out);
}

Tensor mismatched(const Tensor& t_l) {
  if (t_l.rank() != 2 || t_l.dim(0) < 2) throw ShapeError("mismatched captions need a batch of at least two, got " + to_string(t_l.shape()));
  const auto batch = t_l.dim(0);
  std::vector<std::size_t> rows(batch);
  for (std::size_t i = 0; i < batch; ++i) rows[i] = (i + 1) % batch;
  return gather_rows(t_l, rows);
}

Tensor discriminator_loss(Discriminator& disc, const Tensor& real, const Tensor& fake, const Tensor& t_l, const Tensor& t_l_wrong,
                          const GanConfig& cfg, nn::Mode mode) {
  const auto real_term = log_sigmoid(disc.logits(real, t_l.detach(), mode));
  const auto fake_term = log_sigmoid(scale(disc.logits(fake.detach(), t_l.detach(), mode), -1.0));
  const auto wrong_term = log_sigmoid(scale(disc.logits(real, t_l_wrong.detach(), mode), -1.0));
  const auto total = add(add(real_term, scale(fake_term, cfg.beta_f)), scale(wrong_term, cfg.beta_w));
  return scale(mean(total), -1.0);
}

Tensor generator_loss(Discriminator& disc, const Tensor& fake, const Tensor& t_l, const CondOutput& cond, const GanConfig& cfg,
                      nn::Mode mode) {
  nn::Parameters frozen;
  disc.collect("D", frozen);
  Tensor adversarial;
  {
    nn::Freeze freeze(frozen);
    const auto l = disc.logits(fake, t_l.detach(), mode);
    adversarial = cfg.non_saturating ? scale(mean(log_sigmoid(l)), -1.0) : mean(log_sigmoid(scale(l, -1.0)));
  }
  if (!cfg.cond_augment || cfg.beta_s == 0.0) return adversarial;
  if (!cond.mu.defined() || !cond.sigma.defined()) throw std::invalid_argument("generator loss needs mu and sigma with conditioning augmentation");
  const auto batch = static_cast<double>(fake.dim(0));
  return add(adversarial, scale(kl_to_standard_normal(cond.mu, cond.sigma), cfg.beta_s / batch));
}

ImageGan::ImageGan(const GanConfig& cfg, Rng& rng) : config(cfg), cond(cfg, rng), generator(cfg, rng), discriminator(cfg, rng) {}

void ImageGan::collect_generator(nn::Parameters& out) {
  cond.collect("cond", out);
  generator.collect("G", out);
}

void ImageGan::collect_discriminator(nn::Parameters& out) { discriminator.collect("D", out); }

}  // namespace gxn
