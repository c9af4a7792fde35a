#include "gxn/captioner.hpp"

#include <algorithm>
#include <cmath>

namespace gxn {

Captioner::Captioner(const CaptionerConfig& config, Rng& rng)
    : cell(config.word_dim + config.feature_dim, config.hidden_dim, rng),
      init(config.feature_dim, config.hidden_dim, rng),
      out(config.hidden_dim, config.vocab_size, rng),
      config_(config) {
  if (config.vocab_size == 0) throw std::invalid_argument("captioner needs a non-empty vocabulary");
  if (config.max_decode_len == 0) throw std::invalid_argument("max_decode_len must be positive");
}

void Captioner::check(const nn::EmbeddingTable& words, const Tensor& v_l) const {
  if (words.vocab_size() != config_.vocab_size || words.dim() != config_.word_dim) {
    throw ShapeError("captioner: word table " + to_string(words.weight.shape()) + " does not match the decoder");
  }
  if (v_l.rank() != 2 || v_l.dim(1) != config_.feature_dim || v_l.dim(0) == 0) {
    throw ShapeError("captioner: expected [B," + std::to_string(config_.feature_dim) + "] features, got " + to_string(v_l.shape()));
  }
}

Tensor Captioner::start_state(const Tensor& v_l) const { return tanh(init(v_l)); }

Tensor Captioner::step(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenId> previous, Tensor& h) const {
  h = cell.step(concat_last<double>({words.lookup(previous), v_l}), h);
  return out(h);
}

namespace {

Tensor row_mask(const std::vector<bool>& active) {
  Tensor::Vector m(static_cast<Eigen::Index>(active.size()));
  for (std::size_t i = 0; i < active.size(); ++i) m[static_cast<Eigen::Index>(i)] = active[i] ? 1.0 : 0.0;
  return Tensor::constant({active.size()}, std::move(m));
}

// Sum over steps of the masked picked log-probabilities -> [B].
Tensor accumulate_picks(const Tensor& total, const Tensor& picks, const std::vector<bool>& active) {
  const bool all = std::all_of(active.begin(), active.end(), [](bool a) { return a; });
  const auto contribution = all ? picks : mul(picks, row_mask(active));
  return total.defined() ? add(total, contribution) : contribution;
}

std::size_t draw(const detail::RowMat<double>& probs, std::size_t row, Rng& rng) {
  const auto r = probs.row(static_cast<Eigen::Index>(row));
  return sample_categorical(rng, std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
}

}  // namespace

Tensor Captioner::xe_loss(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> targets, double sampling_prob,
                          Rng* rng) const {
  check(words, v_l);
  if (!(sampling_prob >= 0.0 && sampling_prob <= 1.0)) throw std::invalid_argument("sampling probability must lie in [0, 1]");
  if (sampling_prob > 0.0 && !rng) throw std::invalid_argument("scheduled sampling needs an rng");
  const auto batch = v_l.dim(0);
  if (targets.size() != batch) throw ShapeError("captioner: " + std::to_string(targets.size()) + " captions for " + std::to_string(batch) + " images");
  std::size_t steps = 0;
  for (const auto& t : targets) {
    if (t.empty()) throw std::invalid_argument("empty target caption");
    if (t.size() > config_.max_decode_len) {
      throw std::invalid_argument("target of length " + std::to_string(t.size()) + " exceeds max_decode_len " + std::to_string(config_.max_decode_len));
    }
    steps = std::max(steps, t.size());
  }
  Tensor h = start_state(v_l);
  std::vector<TokenId> prev(batch, config_.bos), tgt(batch);
  std::vector<bool> active(batch);
  Tensor total;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto logits = step(words, v_l, prev, h);
    for (std::size_t b = 0; b < batch; ++b) {
      active[b] = t < targets[b].size();
      tgt[b] = active[b] ? targets[b][t] : 0;
    }
    total = accumulate_picks(total, pick_log_softmax(logits, std::span<const TokenId>(tgt)), active);
    if (t + 1 == steps) break;
    prev = tgt;
    if (sampling_prob > 0.0) {
      const auto probs = softmax_rows(logits);
      for (std::size_t b = 0; b < batch; ++b) {
        if (uniform01(*rng) < sampling_prob) prev[b] = draw(probs, b, *rng);
      }
    }
  }
  return scale(sum(total), -1.0 / static_cast<double>(batch));
}

Tensor Captioner::sequence_log_prob(const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> seqs) const {
  check(words, v_l);
  const auto batch = v_l.dim(0);
  if (seqs.size() != batch) throw ShapeError("captioner: " + std::to_string(seqs.size()) + " sequences for " + std::to_string(batch) + " images");
  std::size_t steps = 0;
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("empty sequence");
    steps = std::max(steps, s.size());
  }
  Tensor h = start_state(v_l);
  std::vector<TokenId> prev(batch, config_.bos), tgt(batch);
  std::vector<bool> active(batch);
  Tensor total;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto logits = step(words, v_l, prev, h);
    for (std::size_t b = 0; b < batch; ++b) {
      active[b] = t < seqs[b].size();
      tgt[b] = active[b] ? seqs[b][t] : 0;
    }
    total = accumulate_picks(total, pick_log_softmax(logits, std::span<const TokenId>(tgt)), active);
    prev = tgt;
  }
  return total;
}

DecodeResult Captioner::decode(const nn::EmbeddingTable& words, const Tensor& v_l, DecodeMode mode, Rng* rng) const {
  check(words, v_l);
  if (mode == DecodeMode::sample && !rng) throw std::invalid_argument("sampling decode needs an rng");
  const auto batch = v_l.dim(0);
  DecodeResult result;
  result.tokens.resize(batch);
  result.emitted.resize(batch);
  result.truncated.assign(batch, true);
  Tensor h = start_state(v_l);
  std::vector<TokenId> prev(batch, config_.bos), chosen(batch);
  std::vector<bool> active(batch, true);
  Tensor total;
  for (std::size_t t = 0; t < config_.max_decode_len; ++t) {
    const auto logits = step(words, v_l, prev, h);
    if (mode == DecodeMode::greedy) {
      chosen = argmax_rows(logits);
    } else {
      const auto probs = softmax_rows(logits);
      for (std::size_t b = 0; b < batch; ++b) chosen[b] = active[b] ? draw(probs, b, *rng) : 0;
    }
    for (std::size_t b = 0; b < batch; ++b) {
      if (!active[b]) chosen[b] = 0;
    }
    total = accumulate_picks(total, pick_log_softmax(logits, std::span<const TokenId>(chosen)), active);
    bool any = false;
    for (std::size_t b = 0; b < batch; ++b) {
      if (!active[b]) continue;
      result.emitted[b].push_back(chosen[b]);
      if (config_.eos && chosen[b] == *config_.eos) {
        active[b] = false;
        result.truncated[b] = false;
      } else {
        result.tokens[b].push_back(chosen[b]);
        any = true;
      }
    }
    if (!any) break;
    prev = chosen;
  }
  if (!config_.eos) result.truncated.assign(batch, false);
  result.log_prob = total;
  return result;
}

void Captioner::collect(const std::string& prefix, nn::Parameters& out_params) {
  cell.collect(prefix + ".cell", out_params);
  init.collect(prefix + ".init", out_params);
  out.collect(prefix + ".out", out_params);
}

TokenSeq with_eos(TokenSeq seq, TokenId eos) {
  seq.push_back(eos);
  return seq;
}

// ---------------------------------------------------------------------------

namespace {

Tensor advantage_loss(const Tensor& log_prob, std::span<const double> rewards, std::span<const double> baselines) {
  const auto batch = log_prob.size();
  if (rewards.size() != batch || baselines.size() != batch) throw ShapeError("scst: reward count does not match batch");
  Tensor::Vector w(static_cast<Eigen::Index>(batch));
  for (std::size_t b = 0; b < batch; ++b) {
    if (!std::isfinite(rewards[b]) || !std::isfinite(baselines[b])) throw std::runtime_error("scst: non-finite reward");
    w[static_cast<Eigen::Index>(b)] = -(rewards[b] - baselines[b]) / static_cast<double>(batch);
  }
  return sum(mul(log_prob, Tensor::constant({batch}, std::move(w))));
}

}  // namespace

ScstResult scst_loss(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, const RewardFn& reward, Rng& rng) {
  const auto sampled = captioner.decode(words, v_l, DecodeMode::sample, &rng);
  DecodeResult greedy;
  {
    NoGradGuard no_grad;
    greedy = captioner.decode(words, v_l, DecodeMode::greedy);
  }
  const auto batch = v_l.dim(0);
  std::vector<double> r(batch), base(batch);
  ScstResult result;
  for (std::size_t b = 0; b < batch; ++b) {
    r[b] = reward(sampled.tokens[b], b);
    base[b] = reward(greedy.tokens[b], b);
    result.sample_reward += r[b] / static_cast<double>(batch);
    result.greedy_reward += base[b] / static_cast<double>(batch);
  }
  result.loss = advantage_loss(sampled.log_prob, r, base);
  return result;
}

Tensor scst_loss_frozen(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> sampled,
                        std::span<const double> rewards, std::span<const double> baselines) {
  return advantage_loss(captioner.sequence_log_prob(words, v_l, sampled), rewards, baselines);
}

MixedLossResult mixed_loss(const Captioner& captioner, const nn::EmbeddingTable& words, const Tensor& v_l, std::span<const TokenSeq> targets,
                           const RewardFn& reward, double gamma, double sampling_prob, Rng& rng) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
  MixedLossResult result;
  Tensor xe, rl;
  if (gamma < 1.0) {
    xe = captioner.xe_loss(words, v_l, targets, sampling_prob, &rng);
    result.xe = xe.item();
    result.used_xe = true;
  }
  if (gamma > 0.0) {
    const auto s = scst_loss(captioner, words, v_l, reward, rng);
    rl = s.loss;
    result.scst = rl.item();
    result.sample_reward = s.sample_reward;
    result.greedy_reward = s.greedy_reward;
    result.used_scst = true;
  }
  if (!result.used_scst) {
    result.loss = xe;
  } else if (!result.used_xe) {
    result.loss = rl;
  } else {
    result.loss = add(scale(xe, 1.0 - gamma), scale(rl, gamma));
  }
  return result;
}

double gamma_schedule(std::size_t epoch, std::size_t total_epochs) { return gamma_schedule(epoch, total_epochs, 0.05, 0.95); }

double gamma_schedule(std::size_t epoch, std::size_t total_epochs, double start, double end) {
  if (total_epochs < 2) return start;
  const double g = start + (end - start) * static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return std::clamp(g, std::min(start, end), std::max(start, end));
}

}  // namespace gxn
