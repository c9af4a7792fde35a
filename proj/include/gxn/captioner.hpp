#pragma once

#include "gxn/nn.hpp"

#include <functional>
#include <optional>

namespace gxn {

using nn::TokenId;
using TokenSeq = std::vector<TokenId>;

struct CaptionerConfig {
  std::size_t vocab_size = 0;
  std::size_t word_dim = 300;
  std::size_t feature_dim = 1024;  // v_l
  std::size_t hidden_dim = 1024;
  std::size_t max_decode_len = 20;
  TokenId bos = 1;
  // Decoding stops after emitting this token; unset decodes exactly max_decode_len steps.
  std::optional<TokenId> eos = TokenId{2};
};

enum class DecodeMode { greedy, sample };

struct DecodeResult {
  std::vector<TokenSeq> tokens;   // without the end token
  std::vector<TokenSeq> emitted;  // every generated id, end token included
  Tensor log_prob;                // [B], differentiable with the tokens held fixed
  std::vector<bool> truncated;    // hit max_decode_len before the end token
};

/// GRU decoder over the shared word table: h0 = tanh(A v_l), input at each
/// step [W_e(previous token); v_l], logits = O h_t.
class Captioner {
 public:
  Captioner() = default;
  Captioner(const CaptionerConfig& config, Rng& rng);

  const CaptionerConfig& config() const { return config_; }

  nn::GruCell cell;
  nn::LinearMap init;
  nn::LinearMap out;

  /// Mean over the batch of -sum_t log p(w_t | previous, v_l). Targets are
  /// used as given (append the end token beforehand). With probability
  /// `sampling_prob` the fed-in previous token is drawn from the model's own
  /// previous-step distribution instead of the gold token.
  Tensor xe_loss(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> targets, double sampling_prob, Rng* rng) const;

  /// Greedy never touches `rng`; sample mode requires it.
  DecodeResult decode(const nn::EmbeddingTable& words, const Tensor& v_l, DecodeMode mode, Rng* rng = nullptr) const;

  /// Teacher-forced log p(seq | v_l) for given sequences -> [B].
  Tensor sequence_log_prob(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> seqs) const;

  void collect(const std::string& prefix, nn::Parameters& out_params);

 private:
  Tensor start_state(const Tensor& v_l) const;
  Tensor step(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenId> previous, Tensor& h) const;
  void check(const nn::EmbeddingTable& words, const Tensor& v_l) const;

  CaptionerConfig config_;
};

/// Appends the end token.
TokenSeq with_eos(TokenSeq seq, TokenId eos);

/// Reward of a candidate caption for batch row `index`.
using RewardFn = std::function<double(const TokenSeq& candidate, std::size_t index)>;

struct ScstResult {
  Tensor loss;
  double sample_reward = 0.0;  // batch means
  double greedy_reward = 0.0;
};

/// Self-critical loss -(r(sampled) - r(greedy)) log p(sampled), batch mean.
ScstResult scst_loss(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, const RewardFn& reward, Rng& rng);

/// Same estimator with the sampled sequences, rewards and baselines given.
Tensor scst_loss_frozen(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> sampled,
                        std::span<const double> rewards, std::span<const double> baselines);

struct MixedLossResult {
  Tensor loss;
  double xe = 0.0;
  double scst = 0.0;
  bool used_xe = false;
  bool used_scst = false;
  double sample_reward = 0.0;
  double greedy_reward = 0.0;
};

/// (1 - gamma) XE + gamma SCST; a zero-weight term is not evaluated.
MixedLossResult mixed_loss(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> targets,
                           const RewardFn& reward, double gamma, double sampling_prob, Rng& rng);

/// Linear 0.05 -> 0.95 over the epochs, clamped.
double gamma_schedule(std::size_t epoch, std::size_t total_epochs);
double gamma_schedule(std::size_t epoch, std::size_t total_epochs, double start, double end);

}  // namespace gxn
