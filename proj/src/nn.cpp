#include "gxn/nn.hpp"

#include <cmath>

namespace gxn::nn {

Freeze::Freeze(const Parameters& params) : params_(params) {
  for (auto& [name, t] : params_.tensors) {
    saved_.push_back(*t);
    *t = t->detach();
  }
  for (auto& [name, b] : params_.buffers) buffers_.push_back(*b);
}

Freeze::~Freeze() {
  for (std::size_t i = 0; i < saved_.size(); ++i) *params_.tensors[i].second = saved_[i];
  for (std::size_t i = 0; i < buffers_.size(); ++i) *params_.buffers[i].second = buffers_[i];
}

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  Tensor::Vector v(static_cast<Eigen::Index>(numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = bound * (2.0 * uniform01(rng) - 1.0);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor zero_parameter(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  Tensor::Vector mask(static_cast<Eigen::Index>(x.size()));
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = uniform01(rng) < rate ? 0.0 : keep;
  return mul(x, Tensor::constant(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------

LinearMap::LinearMap(std::size_t in, std::size_t out, Rng& rng)
    : weight(uniform_parameter({out, in}, std::sqrt(6.0 / static_cast<double>(in + out)), rng)), bias(zero_parameter({out})) {}

Tensor LinearMap::operator()(const Tensor& x) const {
  if (x.rank() == 1) return reshape(linear(reshape(x, {1, x.size()}), weight, bias), {out_dim()});
  return linear(x, weight, bias);
}

void LinearMap::collect(const std::string& prefix, Parameters& out) {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

EmbeddingTable::EmbeddingTable(std::size_t vocab, std::size_t dim, Rng& rng) : weight(uniform_parameter({vocab, dim}, 0.1, rng)) {}

Tensor EmbeddingTable::lookup(std::span<const TokenId> ids) const {
  for (auto id : ids) {
    if (id >= vocab_size()) throw std::invalid_argument("unknown token id " + std::to_string(id));
  }
  return gather_rows(weight, ids);
}

void EmbeddingTable::collect(const std::string& prefix, Parameters& out) { out.add(prefix + ".weight", weight); }

// ---------------------------------------------------------------------------

GruCell::GruCell(std::size_t input, std::size_t hidden, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w_z = uniform_parameter({hidden, input}, bound, rng);
  u_z = uniform_parameter({hidden, hidden}, bound, rng);
  b_z = zero_parameter({hidden});
  w_r = uniform_parameter({hidden, input}, bound, rng);
  u_r = uniform_parameter({hidden, hidden}, bound, rng);
  b_r = zero_parameter({hidden});
  w_h = uniform_parameter({hidden, input}, bound, rng);
  u_h = uniform_parameter({hidden, hidden}, bound, rng);
  b_h = zero_parameter({hidden});
}

Tensor GruCell::step(const Tensor& x, const Tensor& h) const {
  if (x.rank() != 2 || x.dim(1) != input_dim() || h.rank() != 2 || h.dim(1) != hidden_dim() || h.dim(0) != x.dim(0)) {
    throw ShapeError("gru_step: input " + to_string(x.shape()) + " / state " + to_string(h.shape()) + " do not match cell " +
                     std::to_string(input_dim()) + "->" + std::to_string(hidden_dim()));
  }
  const auto z = sigmoid(add(linear(x, w_z, b_z), matmul(h, transpose(u_z))));
  const auto r = sigmoid(add(linear(x, w_r, b_r), matmul(h, transpose(u_r))));
  const auto candidate = tanh(add(linear(x, w_h, b_h), matmul(mul(r, h), transpose(u_h))));
  // (1 - z) * h + z * candidate == h + z * (candidate - h)
  return add(h, mul(z, sub(candidate, h)));
}

void GruCell::collect(const std::string& prefix, Parameters& out) {
  out.add(prefix + ".w_z", w_z);
  out.add(prefix + ".u_z", u_z);
  out.add(prefix + ".b_z", b_z);
  out.add(prefix + ".w_r", w_r);
  out.add(prefix + ".u_r", u_r);
  out.add(prefix + ".b_r", b_r);
  out.add(prefix + ".w_h", w_h);
  out.add(prefix + ".u_h", u_h);
  out.add(prefix + ".b_h", b_h);
}

namespace {

Tensor run_direction(std::span<const std::vector<TokenId>> seqs, const EmbeddingTable& table, const GruCell& cell, bool reversed) {
  std::size_t steps = 0;
  for (const auto& s : seqs) steps = std::max(steps, s.size());
  const auto batch = seqs.size();
  Tensor h = Tensor::zeros({batch, cell.hidden_dim()});
  std::vector<TokenId> ids(batch);
  std::vector<bool> active(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    bool all = true;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& s = seqs[b];
      active[b] = t < s.size();
      all = all && active[b];
      ids[b] = active[b] ? (reversed ? s[s.size() - 1 - t] : s[t]) : 0;
    }
    const auto next = cell.step(table.lookup(ids), h);
    h = all ? next : where_rows(active, next, h);
  }
  return h;
}

}  // namespace

EncoderStates run_gru(std::span<const std::vector<TokenId>> seqs, const EmbeddingTable& table, const GruCell& fwd, const GruCell* bwd) {
  if (seqs.empty()) throw std::invalid_argument("encoder: empty batch");
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("encoder: empty token sequence");
    for (auto id : s) {
      if (id >= table.vocab_size()) throw std::invalid_argument("encoder: unknown token id " + std::to_string(id));
    }
  }
  if (fwd.input_dim() != table.dim()) throw ShapeError("encoder: cell input does not match word dimension");
  EncoderStates states;
  states.forward_final = run_direction(seqs, table, fwd, false);
  if (bwd) states.backward_final = run_direction(seqs, table, *bwd, true);
  return states;
}

Tensor encode_sequence(Direction dir, std::span<const TokenId> tokens, const EmbeddingTable& table, const GruCell& fwd,
                       const GruCell* bwd, const LinearMap* merge) {
  const std::vector<std::vector<TokenId>> one{std::vector<TokenId>(tokens.begin(), tokens.end())};
  if (dir == Direction::forward) return reshape(run_gru(one, table, fwd, nullptr).forward_final, {fwd.hidden_dim()});
  if (!bwd || !merge) throw std::invalid_argument("bidirectional encoding needs a backward cell and a merge map");
  const auto states = run_gru(one, table, fwd, bwd);
  return reshape((*merge)(concat_last<double>({states.forward_final, states.backward_final})), {merge->out_dim()});
}

SentenceEncoder::SentenceEncoder(Direction dir, std::size_t word_dim, std::size_t hidden, Rng& rng)
    : direction(dir), forward_cell(word_dim, hidden, rng) {
  if (dir == Direction::bidirectional) {
    backward_cell = GruCell(word_dim, hidden, rng);
    merge = LinearMap(2 * hidden, hidden, rng);
  }
}

Tensor SentenceEncoder::encode(std::span<const std::vector<TokenId>> seqs, const EmbeddingTable& table) const {
  if (direction == Direction::forward) return run_gru(seqs, table, forward_cell, nullptr).forward_final;
  const auto states = run_gru(seqs, table, forward_cell, &backward_cell);
  return merge(concat_last<double>({states.forward_final, states.backward_final}));
}

void SentenceEncoder::collect(const std::string& prefix, Parameters& out) {
  forward_cell.collect(prefix + ".fwd", out);
  if (direction == Direction::bidirectional) {
    backward_cell.collect(prefix + ".bwd", out);
    merge.collect(prefix + ".merge", out);
  }
}

// ---------------------------------------------------------------------------

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::none: return x;
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, 0.2);
    case Activation::tanh: return tanh(x);
  }
  return x;
}

std::size_t halved(std::size_t size, std::size_t layers) {
  for (std::size_t i = 0; i < layers; ++i) size /= 2;
  return size;
}

ConvStack::ConvStack(Shape input, const std::vector<ConvLayerSpec>& specs, Rng& rng) : input_(std::move(input)) {
  if (input_.size() != 3) throw ShapeError("ConvStack input must be {H, W, C}, got " + to_string(input_));
  Shape cur = input_;
  for (const auto& spec : specs) {
    ConvLayer layer;
    layer.spec = spec;
    const auto k = spec.kernel, cin = cur[2], cout = spec.out_channels;
    const double bound = std::sqrt(6.0 / static_cast<double>(k * k * (cin + cout)));
    if (spec.transposed) {
      layer.weight = uniform_parameter({cin, k, k, cout}, bound, rng);
      cur = {(cur[0] - 1) * spec.stride + k - 2 * spec.pad, (cur[1] - 1) * spec.stride + k - 2 * spec.pad, cout};
    } else {
      const ConvGeometry g{cur[0], cur[1], cin, k, spec.stride, spec.pad};
      if (!g.valid()) throw ShapeError("ConvStack: layer does not fit input " + to_string(cur));
      layer.weight = uniform_parameter({cout, k, k, cin}, bound, rng);
      cur = {g.out_height(), g.out_width(), cout};
    }
    if (cur[0] == 0 || cur[1] == 0) throw ShapeError("ConvStack: layer produces an empty map");
    // A bias feeding batch norm is cancelled by the mean subtraction.
    layer.bias = spec.batch_norm ? Tensor::zeros({cout}) : zero_parameter({cout});
    if (spec.batch_norm) {
      layer.gamma = Tensor::parameter({cout}, Tensor::Vector::Ones(static_cast<Eigen::Index>(cout)));
      layer.beta = zero_parameter({cout});
      layer.stats = BatchNormStats<double>(cout);
    }
    layers_.push_back(std::move(layer));
  }
  output_ = cur;
}

Tensor ConvStack::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != input_) {
    throw ShapeError("ConvStack: expected [B," + std::to_string(input_[0]) + "," + std::to_string(input_[1]) + "," +
                     std::to_string(input_[2]) + "], got " + to_string(x.shape()));
  }
  Tensor y = x;
  for (auto& layer : layers_) {
    const auto& s = layer.spec;
    y = s.transposed ? conv_transpose2d(y, layer.weight, layer.bias, s.stride, s.pad) : conv2d(y, layer.weight, layer.bias, s.stride, s.pad);
    if (s.batch_norm) y = batch_norm(y, layer.gamma, layer.beta, layer.stats, mode == Mode::train);
    y = activate(y, s.activation);
  }
  return y;
}

void ConvStack::collect(const std::string& prefix, Parameters& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& layer = layers_[i];
    const auto p = prefix + "." + std::to_string(i);
    out.add(p + ".weight", layer.weight);
    if (!layer.spec.batch_norm) out.add(p + ".bias", layer.bias);
    if (layer.spec.batch_norm) {
      out.add(p + ".gamma", layer.gamma);
      out.add(p + ".beta", layer.beta);
      out.add_buffer(p + ".running_mean", layer.stats.mean);
      out.add_buffer(p + ".running_var", layer.stats.var);
    }
  }
}

// ---------------------------------------------------------------------------

ImageEncoder::ImageEncoder(const ImageEncoderConfig& config, Rng& rng) : config_(config) {
  if (config.channels.empty()) throw std::invalid_argument("image encoder needs at least one conv layer");
  std::vector<ConvLayerSpec> specs;
  for (auto c : config.channels) specs.push_back({.out_channels = c});
  trunk_ = ConvStack({config.image_size, config.image_size, 3}, specs, rng);
  const auto& o = trunk_.output_shape();
  head_ = LinearMap(o[0] * o[1] * o[2], config.feature_dim, rng);
}

Tensor ImageEncoder::encode(const Tensor& images, Mode mode, Rng* rng) {
  const auto batch = images.rank() == 4 ? images.dim(0) : 0;
  const auto maps = trunk_.forward(images, mode);
  auto feature = relu(head_(reshape(maps, {batch, maps.size() / batch})));
  if (mode == Mode::train && rng) feature = dropout(feature, config_.dropout, *rng);
  return feature;
}

void ImageEncoder::collect(const std::string& prefix, Parameters& out) {
  trunk_.collect(prefix + ".conv", out);
  head_.collect(prefix + ".head", out);
}

ImageDecoder::ImageDecoder(const ImageDecoderConfig& config, Rng& rng) : config_(config) {
  const auto layers = config.channels.size();
  if (layers == 0) throw std::invalid_argument("image decoder needs at least one transposed conv layer");
  const auto base = halved(config.image_size, layers);
  if (base == 0 || (base << layers) != config.image_size) {
    throw std::invalid_argument("image size " + std::to_string(config.image_size) + " is not divisible by 2^" + std::to_string(layers));
  }
  const auto c0 = config.channels.front();
  fc_ = LinearMap(config.code_dim, base * base * c0, rng);
  fc_.bias = Tensor::zeros({base * base * c0});
  gamma_ = Tensor::parameter({c0}, Tensor::Vector::Ones(static_cast<Eigen::Index>(c0)));
  beta_ = zero_parameter({c0});
  stats_ = BatchNormStats<double>(c0);
  std::vector<ConvLayerSpec> specs;
  for (std::size_t i = 0; i < layers; ++i) {
    const bool last = i + 1 == layers;
    specs.push_back({.out_channels = last ? std::size_t{3} : config.channels[i + 1],
                     .transposed = true,
                     .batch_norm = !last,
                     .activation = last ? Activation::tanh : Activation::relu});
  }
  deconv_ = ConvStack({base, base, c0}, specs, rng);
}

Tensor ImageDecoder::decode(const Tensor& code, Mode mode) {
  if (code.rank() != 2 || code.dim(1) != config_.code_dim) {
    throw ShapeError("image decoder: expected [B," + std::to_string(config_.code_dim) + "] code, got " + to_string(code.shape()));
  }
  const auto batch = code.dim(0);
  const auto& in = deconv_.input_shape();
  auto maps = reshape(fc_(code), {batch, in[0], in[1], in[2]});
  maps = relu(batch_norm(maps, gamma_, beta_, stats_, mode == Mode::train));
  return deconv_.forward(maps, mode);
}

void ImageDecoder::collect(const std::string& prefix, Parameters& out) {
  out.add(prefix + ".fc.weight", fc_.weight);
  out.add(prefix + ".fc_bn.gamma", gamma_);
  out.add(prefix + ".fc_bn.beta", beta_);
  out.add_buffer(prefix + ".fc_bn.running_mean", stats_.mean);
  out.add_buffer(prefix + ".fc_bn.running_var", stats_.var);
  deconv_.collect(prefix + ".deconv", out);
}

}  // namespace gxn::nn
