#pragma once

#include "gxn/conv.hpp"
#include "gxn/random.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gxn::nn {

using TokenId = std::size_t;

enum class Mode { train, eval };

/// Flat registry of named trainable tensors and non-trainable buffers
/// (batch-norm running statistics), used by the optimizer and checkpoints.
struct Parameters {
  std::vector<std::pair<std::string, Tensor*>> tensors;
  std::vector<std::pair<std::string, Tensor::Vector*>> buffers;

  void add(const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); }
  void add_buffer(const std::string& name, Tensor::Vector& v) { buffers.emplace_back(name, &v); }
  void append(const Parameters& other) {
    tensors.insert(tensors.end(), other.tensors.begin(), other.tensors.end());
    buffers.insert(buffers.end(), other.buffers.begin(), other.buffers.end());
  }
  std::vector<Tensor> leaves() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : tensors) out.push_back(*t);
    return out;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t->size();
    return n;
  }
};

/// Swaps every tensor in `params` for a detached copy and snapshots the
/// buffers; both are restored on destruction. Gradients never reach the
/// frozen originals and running statistics are left untouched.
class Freeze {
 public:
  explicit Freeze(const Parameters& params);
  ~Freeze();
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

 private:
  Parameters params_;
  std::vector<Tensor> saved_;
  std::vector<Tensor::Vector> buffers_;
};

Tensor uniform_parameter(Shape shape, double bound, Rng& rng);
Tensor zero_parameter(Shape shape);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

/// Affine map x W^T + b.
struct LinearMap {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  LinearMap() = default;
  LinearMap(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  /// x: [B x in] -> [B x out].
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, Parameters& out);
};

/// Word embedding matrix W_e; row i is the vector of token i.
struct EmbeddingTable {
  Tensor weight;  // [V x d_w]

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t vocab, std::size_t dim, Rng& rng);

  std::size_t vocab_size() const { return weight.dim(0); }
  std::size_t dim() const { return weight.dim(1); }

  /// [ids.size() x d_w]; unknown ids are rejected.
  Tensor lookup(std::span<const TokenId> ids) const;
  void collect(const std::string& prefix, Parameters& out);
};

/// GRU with h' = (1 - z) * h + z * tanh(W x + U (r * h) + b).
struct GruCell {
  Tensor w_z, u_z, b_z;
  Tensor w_r, u_r, b_r;
  Tensor w_h, u_h, b_h;

  GruCell() = default;
  GruCell(std::size_t input, std::size_t hidden, Rng& rng);

  std::size_t input_dim() const { return w_z.dim(1); }
  std::size_t hidden_dim() const { return w_z.dim(0); }

  /// x: [B x in], h: [B x hidden] -> [B x hidden].
  Tensor step(const Tensor& x, const Tensor& h) const;
  void collect(const std::string& prefix, Parameters& out);
};

enum class Direction { forward, bidirectional };

/// Final states of a (possibly bidirectional) GRU pass; `backward_final` is
/// undefined for forward-only encoders.
struct EncoderStates {
  Tensor forward_final;
  Tensor backward_final;
};

/// Runs `fwd` (and `bwd` reading each sequence reversed) over a batch of
/// variable-length sequences from a zero state. Padding steps keep the state.
EncoderStates run_gru(std::span<const std::vector<TokenId>> seqs, const EmbeddingTable& table, const GruCell& fwd, const GruCell* bwd);

/// Single-sequence encoder: the final hidden state (forward), or the
/// concatenated forward/backward finals projected by `merge` (bidirectional).
Tensor encode_sequence(Direction dir, std::span<const TokenId> tokens, const EmbeddingTable& table, const GruCell& fwd,
                       const GruCell* bwd = nullptr, const LinearMap* merge = nullptr);

/// Batched sentence encoder owning its cells.
struct SentenceEncoder {
  Direction direction = Direction::forward;
  GruCell forward_cell;
  GruCell backward_cell;
  LinearMap merge;  // [2H -> H], bidirectional only

  SentenceEncoder() = default;
  SentenceEncoder(Direction dir, std::size_t word_dim, std::size_t hidden, Rng& rng);

  std::size_t hidden_dim() const { return forward_cell.hidden_dim(); }
  Tensor encode(std::span<const std::vector<TokenId>> seqs, const EmbeddingTable& table) const;
  void collect(const std::string& prefix, Parameters& out);
};

enum class Activation { none, relu, leaky_relu, tanh };

Tensor activate(const Tensor& x, Activation act);

struct ConvLayerSpec {
  std::size_t out_channels = 0;
  bool transposed = false;
  bool batch_norm = true;
  Activation activation = Activation::relu;
  std::size_t kernel = 4;
  std::size_t stride = 2;
  std::size_t pad = 1;
};

struct ConvLayer {
  ConvLayerSpec spec;
  Tensor weight;  // conv: [Cout,k,k,Cin]; transposed: [Cin,k,k,Cout]
  Tensor bias;
  Tensor gamma, beta;
  BatchNormStats<double> stats;
};

/// Ordered convolution / transposed-convolution layers over NHWC images.
class ConvStack {
 public:
  ConvStack() = default;
  /// `input` is {H, W, C}.
  ConvStack(Shape input, const std::vector<ConvLayerSpec>& specs, Rng& rng);

  const Shape& input_shape() const { return input_; }
  /// Declared {H, W, C} after the last layer.
  const Shape& output_shape() const { return output_; }
  std::size_t depth() const { return layers_.size(); }
  std::vector<ConvLayer>& layers() { return layers_; }

  /// x: [B, H, W, C] matching input_shape(). Training mode uses and updates
  /// batch statistics.
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, Parameters& out);

 private:
  Shape input_;
  Shape output_;
  std::vector<ConvLayer> layers_;
};

/// Spatial size after `layers` stride-2 halvings.
std::size_t halved(std::size_t size, std::size_t layers);

struct ImageEncoderConfig {
  std::size_t image_size = 64;
  std::vector<std::size_t> channels{32, 64, 128, 16};  // 4 x 4 x 16 = 256 at 64 x 64 input
  std::size_t feature_dim = 256;
  double dropout = 0.1;
};

/// Toy CNN_Enc: stride-2 conv/BN/ReLU layers, then a ReLU linear head.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& config, Rng& rng);

  const ImageEncoderConfig& config() const { return config_; }
  std::size_t feature_dim() const { return head_.out_dim(); }

  /// images: [B, S, S, 3] -> [B x feature_dim]. `rng` drives dropout in training mode.
  Tensor encode(const Tensor& images, Mode mode, Rng* rng = nullptr);
  void collect(const std::string& prefix, Parameters& out);

 private:
  ImageEncoderConfig config_;
  ConvStack trunk_;
  LinearMap head_;
};

struct ImageDecoderConfig {
  std::size_t code_dim = 192;
  std::size_t image_size = 64;
  std::vector<std::size_t> channels{256, 128, 64, 32};  // channels entering each transposed conv
};

/// CNN_Dec: linear to a (S / 2^L) square map, then transposed convs to
/// [S, S, 3] ending in tanh.
class ImageDecoder {
 public:
  ImageDecoder() = default;
  ImageDecoder(const ImageDecoderConfig& config, Rng& rng);

  const ImageDecoderConfig& config() const { return config_; }

  /// code: [B x code_dim] -> [B, S, S, 3] in [-1, 1].
  Tensor decode(const Tensor& code, Mode mode);
  void collect(const std::string& prefix, Parameters& out);

 private:
  ImageDecoderConfig config_;
  LinearMap fc_;
  Tensor gamma_, beta_;
  BatchNormStats<double> stats_;
  ConvStack deconv_;
};

}  // namespace gxn::nn
