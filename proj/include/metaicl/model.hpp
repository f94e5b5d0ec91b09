#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "metaicl/seqbuild.hpp"
#include "metaicl/tokenizer.hpp"

namespace metaicl {

struct ModelConfig {
  int vocab_size = kVocabSize;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ffn = 512;
  int max_positions = 512;

  bool operator==(const ModelConfig&) const = default;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError

  static ModelConfig tiny();
  static ModelConfig mini();
  static ModelConfig preset(std::string_view name);
};

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Pre-norm block: x += Attn(LN1(x)); x += FFN(LN2(x)). Linear maps act on
// row vectors, so weights are stored (in, out).
template <typename T>
struct LayerWeights {
  RowVector<T> ln1_gain, ln1_bias;
  Matrix<T> qkv_weight;  // d x 3d, columns [q | k | v], heads contiguous inside each
  RowVector<T> qkv_bias;
  Matrix<T> proj_weight;  // d x d
  RowVector<T> proj_bias;
  RowVector<T> ln2_gain, ln2_bias;
  Matrix<T> fc_weight;  // d x ffn
  RowVector<T> fc_bias;
  Matrix<T> out_weight;  // ffn x d
  RowVector<T> out_bias;
};

// Output projection is tied to token_embedding.
template <typename T>
struct ModelParams {
  ModelConfig config;
  Matrix<T> token_embedding;     // vocab x d
  Matrix<T> position_embedding;  // max_positions x d
  std::vector<LayerWeights<T>> layers;
  RowVector<T> final_gain, final_bias;

  static ModelParams zeros(const ModelConfig& config);
  // Gaussian(0, 0.02); residual projections scaled by 1/sqrt(2 n_layers);
  // biases zero; norm gains one.
  static ModelParams initialized(const ModelConfig& config, std::uint64_t seed);

  // Calls f(name, data, rows, cols) for every tensor in a fixed order.
  template <typename F>
  void for_each_tensor(F&& f);
  template <typename F>
  void for_each_tensor(F&& f) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();

  template <typename U>
  ModelParams<U> cast() const;

  bool operator==(const ModelParams& other) const;
};

// Sequences right-padded with kPadToken to a common width.
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<TokenId> tokens;       // batch * width
  std::vector<std::uint8_t> mask;    // batch * width
  std::vector<std::size_t> lengths;  // un-padded lengths

  static PaddedBatch from(std::span<const EncodedSequence> sequences);
  TokenId token(std::size_t b, std::size_t t) const { return tokens[b * width + t]; }
  bool masked(std::size_t b, std::size_t t) const { return mask[b * width + t] != 0; }
};

// Row t holds log p(. | tokens[0, t)). Row 0 (empty prefix) and PAD rows are
// uniform.
struct LogProbs {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::size_t vocab = 0;
  std::vector<double> values;

  double at(std::size_t b, std::size_t t, std::size_t v) const { return values[(b * width + t) * vocab + v]; }
};

template <typename T>
LogProbs forward(const ModelParams<T>& params, const PaddedBatch& batch);

template <typename T>
struct LossAndGrads {
  double loss = 0.0;            // mean NLL over masked positions
  std::size_t masked_tokens = 0;
  ModelParams<T> grads;
};

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& params, const PaddedBatch& batch);

// Same loss without the backward pass.
template <typename T>
double batch_loss(const ModelParams<T>& params, const PaddedBatch& batch);

// Sum over masked positions of log p(token | prefix). No length normalization.
template <typename T>
double sequence_logprob(const ModelParams<T>& params, const EncodedSequence& seq);

// Per-layer keys/values of a shared prefix, reused across continuations.
template <typename T>
struct PrefixState {
  std::vector<TokenId> tokens;
  std::vector<Matrix<T>> keys;    // per layer: prefix_len x d
  std::vector<Matrix<T>> values;  // per layer: prefix_len x d
  RowVector<T> last_hidden;       // final-normed state of the last prefix token
};

template <typename T>
PrefixState<T> encode_prefix(const ModelParams<T>& params, std::span<const TokenId> prefix);

// Log-probability of the masked suffix tokens given prefix + suffix.
template <typename T>
double suffix_logprob(const ModelParams<T>& params, const PrefixState<T>& prefix, std::span<const TokenId> suffix,
                      const std::vector<bool>& suffix_mask);

// sequence_logprob for many sequences, sharing the longest common token
// prefix (bounded by the first masked position) through one PrefixState.
template <typename T>
std::vector<double> score_sequences(const ModelParams<T>& params, std::span<const EncodedSequence> sequences);

}  // namespace metaicl

#include "metaicl/model_params_impl.hpp"
