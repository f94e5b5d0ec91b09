#include "metaicl/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "metaicl/error.hpp"
#include "metaicl/rng.hpp"

namespace metaicl {

namespace {

using Eigen::Index;

template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kNormEps = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
  auto a = x.array();
  auto t = (T(kGeluScale) * (a + T(kGeluCubic) * a.cube())).tanh();
  return (T(0.5) * a * (T(1) + t)).matrix();
}

template <typename T>
Matrix<T> gelu_grad(const Matrix<T>& x) {
  auto a = x.array();
  Matrix<T> t = (T(kGeluScale) * (a + T(kGeluCubic) * a.cube())).tanh().matrix();
  auto ta = t.array();
  return (T(0.5) * (T(1) + ta) +
          T(0.5) * a * (T(1) - ta.square()) * T(kGeluScale) * (T(1) + T(3 * kGeluCubic) * a.square()))
      .matrix();
}

template <typename T>
struct NormTrace {
  Matrix<T> hat;
  ColVector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const RowVector<T>& gain, const RowVector<T>& bias,
                     NormTrace<T>* trace = nullptr) {
  const T inv_d = T(1) / static_cast<T>(x.cols());
  ColVector<T> mean = x.rowwise().sum() * inv_d;
  Matrix<T> centered = x.colwise() - mean;
  ColVector<T> var = centered.array().square().rowwise().sum().matrix() * inv_d;
  ColVector<T> rstd = (var.array() + T(kNormEps)).rsqrt().matrix();
  Matrix<T> hat = centered.array().colwise() * rstd.array();
  Matrix<T> out = (hat.array().rowwise() * gain.array()).rowwise() + bias.array();
  if (trace) {
    trace->hat = std::move(hat);
    trace->rstd = std::move(rstd);
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const NormTrace<T>& trace, const RowVector<T>& gain,
                              RowVector<T>& dgain, RowVector<T>& dbias) {
  dgain += (dy.array() * trace.hat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Matrix<T> dhat = dy.array().rowwise() * gain.array();
  ColVector<T> mean_dhat = dhat.rowwise().sum() * inv_d;
  ColVector<T> mean_dhat_hat = (dhat.array() * trace.hat.array()).rowwise().sum().matrix() * inv_d;
  Matrix<T> dx = (dhat.colwise() - mean_dhat).array() - trace.hat.array().colwise() * mean_dhat_hat.array();
  return dx.array().colwise() * trace.rstd.array();
}

// Row i attends to columns [0, offset + i]; the rest are zeroed.
template <typename T>
void causal_softmax(Matrix<T>& scores, Index offset) {
  const Index n = scores.rows();
  const Index m = scores.cols();
  for (Index i = 0; i < n; ++i) {
    const Index visible = offset + i + 1;
    auto row = scores.row(i).head(visible);
    const T top = row.maxCoeff();
    row = (row.array() - top).exp().matrix();
    row /= row.sum();
    if (visible < m) scores.row(i).tail(m - visible).setZero();
  }
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* where) {
  if (!m.allFinite()) throw NumericalError(std::string("non-finite activations in ") + where);
}

// Log-softmax of logits rows, evaluated at `targets`; optionally returns the
// softmax (for gradients).
template <typename T>
double rows_logprob(const Matrix<T>& logits, std::span<const TokenId> targets, Matrix<T>* softmax_out) {
  double total = 0.0;
  if (softmax_out) softmax_out->resize(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const T top = logits.row(i).maxCoeff();
    const T lse = top + std::log((logits.row(i).array() - top).exp().sum());
    total += static_cast<double>(logits(i, targets[static_cast<std::size_t>(i)]) - lse);
    if (softmax_out) softmax_out->row(i) = (logits.row(i).array() - lse).exp().matrix();
  }
  return total;
}

// --- Batched path with activations kept for backprop ----------------------------

template <typename T>
struct LayerTrace {
  NormTrace<T> ln1;
  Matrix<T> ln1_out;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;  // (sequence, head) -> len x len
  Matrix<T> attn;
  NormTrace<T> ln2;
  Matrix<T> ln2_out;
  Matrix<T> fc_pre;
  Matrix<T> fc_act;
};

template <typename T>
struct Trace {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
  std::vector<TokenId> tokens;
  std::vector<LayerTrace<T>> layers;
  NormTrace<T> final_norm;
  Matrix<T> final_out;
};

void check_batch(const ModelConfig& config, const PaddedBatch& batch) {
  if (batch.batch == 0) throw ConfigError("empty batch");
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t len = batch.lengths[b];
    if (len == 0) throw ConfigError("empty sequence in batch");
    if (len > static_cast<std::size_t>(config.max_positions)) {
      throw ConfigError("sequence of " + std::to_string(len) + " tokens exceeds max_positions " +
                        std::to_string(config.max_positions));
    }
    for (std::size_t t = 0; t < batch.width; ++t) {
      const bool pad = batch.token(b, t) == kPadToken;
      if (pad != (t >= len)) throw ConfigError("PAD tokens must only appear as trailing alignment");
    }
  }
}

template <typename T>
Trace<T> forward_trace(const ModelParams<T>& p, const PaddedBatch& batch) {
  const ModelConfig& c = p.config;
  check_batch(c, batch);
  const Index d = c.d_model;
  const Index dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Trace<T> tr;
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    tr.offsets.push_back(total);
    tr.lengths.push_back(batch.lengths[b]);
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) tr.tokens.push_back(batch.token(b, t));
    total += batch.lengths[b];
  }
  const Index n = static_cast<Index>(total);

  Matrix<T> x(n, d);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < tr.lengths[b]; ++t) {
      const Index row = static_cast<Index>(tr.offsets[b] + t);
      x.row(row) = p.token_embedding.row(tr.tokens[static_cast<std::size_t>(row)]) +
                   p.position_embedding.row(static_cast<Index>(t));
    }
  }

  tr.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& w = p.layers[l];
    auto& lt = tr.layers[l];
    lt.ln1_out = layer_norm(x, w.ln1_gain, w.ln1_bias, &lt.ln1);
    lt.qkv.noalias() = lt.ln1_out * w.qkv_weight;
    lt.qkv.rowwise() += w.qkv_bias;
    lt.attn.resize(n, d);
    lt.probs.resize(batch.batch * static_cast<std::size_t>(c.n_heads));
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const Index off = static_cast<Index>(tr.offsets[b]);
      const Index len = static_cast<Index>(tr.lengths[b]);
      for (Index h = 0; h < c.n_heads; ++h) {
        auto q = lt.qkv.block(off, h * dh, len, dh);
        auto k = lt.qkv.block(off, d + h * dh, len, dh);
        auto v = lt.qkv.block(off, 2 * d + h * dh, len, dh);
        Matrix<T>& probs = lt.probs[b * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(h)];
        probs.noalias() = (q * k.transpose()) * scale;
        causal_softmax(probs, 0);
        lt.attn.block(off, h * dh, len, dh).noalias() = probs.template triangularView<Eigen::Lower>() * v;
      }
    }
    x.noalias() += lt.attn * w.proj_weight;
    x.rowwise() += w.proj_bias;
    lt.ln2_out = layer_norm(x, w.ln2_gain, w.ln2_bias, &lt.ln2);
    lt.fc_pre.noalias() = lt.ln2_out * w.fc_weight;
    lt.fc_pre.rowwise() += w.fc_bias;
    lt.fc_act = gelu(lt.fc_pre);
    x.noalias() += lt.fc_act * w.out_weight;
    x.rowwise() += w.out_bias;
  }
  tr.final_out = layer_norm(x, p.final_gain, p.final_bias, &tr.final_norm);
  check_finite(tr.final_out, "forward");
  return tr;
}

// Rows of the hidden matrix whose next-token prediction is scored, with the
// token each one predicts. Masked position 0 has no prefix and is scored as
// uniform.
struct ScoredRows {
  std::vector<Index> rows;
  std::vector<TokenId> targets;
  std::size_t unconditional = 0;
  std::size_t count() const { return rows.size() + unconditional; }
};

template <typename T>
ScoredRows scored_rows(const Trace<T>& tr, const PaddedBatch& batch) {
  ScoredRows s;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < tr.lengths[b]; ++t) {
      if (!batch.masked(b, t)) continue;
      if (t == 0) {
        ++s.unconditional;
      } else {
        s.rows.push_back(static_cast<Index>(tr.offsets[b] + t - 1));
        s.targets.push_back(batch.token(b, t));
      }
    }
  }
  return s;
}

// Mean NLL over scored rows. When `grads` is given, accumulates parameter
// gradients and returns d(loss)/d(final_out) through `d_final`.
template <typename T>
double loss_head(const ModelParams<T>& p, const Trace<T>& tr, const ScoredRows& sr, ModelParams<T>* grads,
                 Matrix<T>* d_final) {
  const std::size_t count = sr.count();
  if (count == 0) throw ConfigError("loss requires at least one masked position");
  const Index d = p.config.d_model;
  const Index m = static_cast<Index>(sr.rows.size());
  Matrix<T> hidden(m, d);
  for (Index i = 0; i < m; ++i) hidden.row(i) = tr.final_out.row(sr.rows[static_cast<std::size_t>(i)]);
  Matrix<T> logits = hidden * p.token_embedding.transpose();
  Matrix<T> softmax;
  double logp = rows_logprob<T>(logits, sr.targets, grads ? &softmax : nullptr);
  logp -= static_cast<double>(sr.unconditional) * std::log(static_cast<double>(p.config.vocab_size));
  const double loss = -logp / static_cast<double>(count);
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
  if (grads) {
    for (Index i = 0; i < m; ++i) softmax(i, sr.targets[static_cast<std::size_t>(i)]) -= T(1);
    softmax *= T(1) / static_cast<T>(count);
    Matrix<T> d_hidden = softmax * p.token_embedding;
    grads->token_embedding.noalias() += softmax.transpose() * hidden;
    d_final->setZero(tr.final_out.rows(), d);
    for (Index i = 0; i < m; ++i) d_final->row(sr.rows[static_cast<std::size_t>(i)]) += d_hidden.row(i);
  }
  return loss;
}

template <typename T>
void backward(const ModelParams<T>& p, const Trace<T>& tr, Matrix<T> d_final, ModelParams<T>& g) {
  const ModelConfig& c = p.config;
  const Index d = c.d_model;
  const Index dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> dx = layer_norm_backward(d_final, tr.final_norm, p.final_gain, g.final_gain, g.final_bias);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& w = p.layers[li];
    auto& gw = g.layers[li];
    const auto& lt = tr.layers[li];

    // Feed-forward branch.
    gw.out_bias += dx.colwise().sum();
    gw.out_weight.noalias() += lt.fc_act.transpose() * dx;
    Matrix<T> d_pre = dx * w.out_weight.transpose();
    d_pre.array() *= gelu_grad(lt.fc_pre).array();
    gw.fc_bias += d_pre.colwise().sum();
    gw.fc_weight.noalias() += lt.ln2_out.transpose() * d_pre;
    Matrix<T> d_ln2 = d_pre * w.fc_weight.transpose();
    dx += layer_norm_backward(d_ln2, lt.ln2, w.ln2_gain, gw.ln2_gain, gw.ln2_bias);

    // Attention branch.
    gw.proj_bias += dx.colwise().sum();
    gw.proj_weight.noalias() += lt.attn.transpose() * dx;
    Matrix<T> d_attn = dx * w.proj_weight.transpose();
    Matrix<T> d_qkv(lt.qkv.rows(), lt.qkv.cols());
    for (std::size_t b = 0; b < tr.offsets.size(); ++b) {
      const Index off = static_cast<Index>(tr.offsets[b]);
      const Index len = static_cast<Index>(tr.lengths[b]);
      for (Index h = 0; h < c.n_heads; ++h) {
        auto q = lt.qkv.block(off, h * dh, len, dh);
        auto k = lt.qkv.block(off, d + h * dh, len, dh);
        auto v = lt.qkv.block(off, 2 * d + h * dh, len, dh);
        auto d_out = d_attn.block(off, h * dh, len, dh);
        const Matrix<T>& probs = lt.probs[b * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(h)];
        Matrix<T> d_probs = d_out * v.transpose();
        d_qkv.block(off, 2 * d + h * dh, len, dh).noalias() =
            probs.transpose().template triangularView<Eigen::Upper>() * d_out;
        ColVector<T> row_dot = (probs.array() * d_probs.array()).rowwise().sum().matrix();
        Matrix<T> d_scores = (probs.array() * (d_probs.colwise() - row_dot).array()) * scale;
        d_qkv.block(off, h * dh, len, dh).noalias() = d_scores.template triangularView<Eigen::Lower>() * k;
        d_qkv.block(off, d + h * dh, len, dh).noalias() =
            d_scores.transpose().template triangularView<Eigen::Upper>() * q;
      }
    }
    gw.qkv_bias += d_qkv.colwise().sum();
    gw.qkv_weight.noalias() += lt.ln1_out.transpose() * d_qkv;
    Matrix<T> d_ln1 = d_qkv * w.qkv_weight.transpose();
    dx += layer_norm_backward(d_ln1, lt.ln1, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
  }

  for (std::size_t b = 0; b < tr.offsets.size(); ++b) {
    for (std::size_t t = 0; t < tr.lengths[b]; ++t) {
      const std::size_t row = tr.offsets[b] + t;
      g.token_embedding.row(tr.tokens[row]) += dx.row(static_cast<Index>(row));
      g.position_embedding.row(static_cast<Index>(t)) += dx.row(static_cast<Index>(row));
    }
  }
}

// --- Incremental inference path -------------------------------------------------

// Runs `tokens` at absolute positions [start, start + n) on top of an optional
// cached prefix. Returns final-normed hidden states; optionally the full
// per-layer keys/values (prefix + new rows).
template <typename T>
Matrix<T> run_incremental(const ModelParams<T>& p, std::span<const TokenId> tokens, const PrefixState<T>* prefix,
                          std::vector<Matrix<T>>* keys_out, std::vector<Matrix<T>>* values_out) {
  const ModelConfig& c = p.config;
  const Index d = c.d_model;
  const Index dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Index start = prefix ? static_cast<Index>(prefix->tokens.size()) : 0;
  const Index n = static_cast<Index>(tokens.size());
  if (start + n > c.max_positions) {
    throw ConfigError("sequence of " + std::to_string(start + n) + " tokens exceeds max_positions " +
                      std::to_string(c.max_positions));
  }

  Matrix<T> x(n, d);
  for (Index i = 0; i < n; ++i) {
    const TokenId tok = tokens[static_cast<std::size_t>(i)];
    if (tok >= kPadToken) throw ConfigError("PAD token inside a scored sequence");
    x.row(i) = p.token_embedding.row(tok) + p.position_embedding.row(start + i);
  }
  if (keys_out) keys_out->resize(p.layers.size());
  if (values_out) values_out->resize(p.layers.size());

  Matrix<T> keys(start + n, d);
  Matrix<T> values(start + n, d);
  Matrix<T> attn(n, d);
  Matrix<T> scores;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& w = p.layers[l];
    Matrix<T> qkv = layer_norm(x, w.ln1_gain, w.ln1_bias) * w.qkv_weight;
    qkv.rowwise() += w.qkv_bias;
    if (start > 0) {
      keys.topRows(start) = prefix->keys[l];
      values.topRows(start) = prefix->values[l];
    }
    keys.bottomRows(n) = qkv.middleCols(d, d);
    values.bottomRows(n) = qkv.middleCols(2 * d, d);
    for (Index h = 0; h < c.n_heads; ++h) {
      scores.noalias() = (qkv.middleCols(h * dh, dh) * keys.middleCols(h * dh, dh).transpose()) * scale;
      causal_softmax(scores, start);
      attn.middleCols(h * dh, dh).noalias() = scores * values.middleCols(h * dh, dh);
    }
    x.noalias() += attn * w.proj_weight;
    x.rowwise() += w.proj_bias;
    Matrix<T> fc = layer_norm(x, w.ln2_gain, w.ln2_bias) * w.fc_weight;
    fc.rowwise() += w.fc_bias;
    fc = gelu(fc);
    x.noalias() += fc * w.out_weight;
    x.rowwise() += w.out_bias;
    if (keys_out) (*keys_out)[l] = keys;
    if (values_out) (*values_out)[l] = values;
  }
  Matrix<T> out = layer_norm(x, p.final_gain, p.final_bias);
  check_finite(out, "inference");
  return out;
}

template <typename T>
PrefixState<T> empty_prefix(const ModelParams<T>& p) {
  PrefixState<T> s;
  s.keys.assign(p.layers.size(), Matrix<T>(0, p.config.d_model));
  s.values.assign(p.layers.size(), Matrix<T>(0, p.config.d_model));
  return s;
}

}  // namespace

// --- ModelConfig -----------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size != kVocabSize) throw ConfigError("model config: vocab_size must be " + std::to_string(kVocabSize));
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ffn <= 0 || max_positions <= 0) {
    throw ConfigError("model config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
}

ModelConfig ModelConfig::tiny() { return ModelConfig{kVocabSize, 128, 4, 4, 512, 512}; }
ModelConfig ModelConfig::mini() { return ModelConfig{kVocabSize, 64, 2, 2, 256, 256}; }

ModelConfig ModelConfig::preset(std::string_view name) {
  if (name == "tiny") return tiny();
  if (name == "mini") return mini();
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

// --- ModelParams -----------------------------------------------------------------

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& c) {
  c.validate();
  ModelParams<T> p;
  p.config = c;
  p.token_embedding = Matrix<T>::Zero(c.vocab_size, c.d_model);
  p.position_embedding = Matrix<T>::Zero(c.max_positions, c.d_model);
  p.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : p.layers) {
    l.ln1_gain = RowVector<T>::Zero(c.d_model);
    l.ln1_bias = RowVector<T>::Zero(c.d_model);
    l.qkv_weight = Matrix<T>::Zero(c.d_model, 3 * c.d_model);
    l.qkv_bias = RowVector<T>::Zero(3 * c.d_model);
    l.proj_weight = Matrix<T>::Zero(c.d_model, c.d_model);
    l.proj_bias = RowVector<T>::Zero(c.d_model);
    l.ln2_gain = RowVector<T>::Zero(c.d_model);
    l.ln2_bias = RowVector<T>::Zero(c.d_model);
    l.fc_weight = Matrix<T>::Zero(c.d_model, c.d_ffn);
    l.fc_bias = RowVector<T>::Zero(c.d_ffn);
    l.out_weight = Matrix<T>::Zero(c.d_ffn, c.d_model);
    l.out_bias = RowVector<T>::Zero(c.d_model);
  }
  p.final_gain = RowVector<T>::Zero(c.d_model);
  p.final_bias = RowVector<T>::Zero(c.d_model);
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::initialized(const ModelConfig& c, std::uint64_t seed) {
  ModelParams<T> p = zeros(c);
  Rng rng(mix_seed({seed, 0x1417ULL}));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * c.n_layers);
  auto fill = [&](auto& m, double std_dev) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng) * std_dev);
  };
  fill(p.token_embedding, base);
  fill(p.position_embedding, base);
  for (auto& l : p.layers) {
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    fill(l.qkv_weight, base);
    fill(l.proj_weight, residual);
    fill(l.fc_weight, base);
    fill(l.out_weight, residual);
  }
  p.final_gain.setOnes();
  return p;
}

// --- Batches -----------------------------------------------------------------------

PaddedBatch PaddedBatch::from(std::span<const EncodedSequence> sequences) {
  PaddedBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.width = std::max(b.width, s.tokens.size());
  b.tokens.assign(b.batch * b.width, kPadToken);
  b.mask.assign(b.batch * b.width, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& s = sequences[i];
    if (s.loss_mask.size() != s.tokens.size()) throw ConfigError("loss mask length differs from token length");
    std::copy(s.tokens.begin(), s.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.width));
    for (std::size_t t = 0; t < s.tokens.size(); ++t) b.mask[i * b.width + t] = s.loss_mask[t] ? 1 : 0;
    b.lengths.push_back(s.tokens.size());
  }
  return b;
}

// --- Public operations -------------------------------------------------------------

template <typename T>
LogProbs forward(const ModelParams<T>& params, const PaddedBatch& batch) {
  Trace<T> tr = forward_trace(params, batch);
  const std::size_t vocab = static_cast<std::size_t>(params.config.vocab_size);
  const double uniform = -std::log(static_cast<double>(vocab));
  LogProbs out;
  out.batch = batch.batch;
  out.width = batch.width;
  out.vocab = vocab;
  out.values.assign(batch.batch * batch.width * vocab, uniform);
  Matrix<T> logits = tr.final_out * params.token_embedding.transpose();
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 1; t < tr.lengths[b]; ++t) {
      const Index row = static_cast<Index>(tr.offsets[b] + t - 1);
      const T top = logits.row(row).maxCoeff();
      const T lse = top + std::log((logits.row(row).array() - top).exp().sum());
      double* dst = &out.values[(b * batch.width + t) * vocab];
      for (std::size_t v = 0; v < vocab; ++v) dst[v] = static_cast<double>(logits(row, static_cast<Index>(v)) - lse);
    }
  }
  return out;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& params, const PaddedBatch& batch) {
  Trace<T> tr = forward_trace(params, batch);
  ScoredRows sr = scored_rows(tr, batch);
  LossAndGrads<T> out{0.0, sr.count(), ModelParams<T>::zeros(params.config)};
  Matrix<T> d_final;
  out.loss = loss_head(params, tr, sr, &out.grads, &d_final);
  backward(params, tr, std::move(d_final), out.grads);
  return out;
}

template <typename T>
double batch_loss(const ModelParams<T>& params, const PaddedBatch& batch) {
  Trace<T> tr = forward_trace(params, batch);
  return loss_head<T>(params, tr, scored_rows(tr, batch), nullptr, nullptr);
}

template <typename T>
PrefixState<T> encode_prefix(const ModelParams<T>& params, std::span<const TokenId> prefix) {
  PrefixState<T> state = empty_prefix(params);
  if (prefix.empty()) return state;
  Matrix<T> hidden = run_incremental<T>(params, prefix, nullptr, &state.keys, &state.values);
  state.tokens.assign(prefix.begin(), prefix.end());
  state.last_hidden = hidden.row(hidden.rows() - 1);
  return state;
}

template <typename T>
double suffix_logprob(const ModelParams<T>& params, const PrefixState<T>& prefix, std::span<const TokenId> suffix,
                      const std::vector<bool>& suffix_mask) {
  if (suffix_mask.size() != suffix.size()) throw ConfigError("suffix mask length differs from suffix length");
  Matrix<T> hidden = run_incremental<T>(params, suffix, &prefix, nullptr, nullptr);
  const Index d = params.config.d_model;
  std::vector<Index> rows;  // -1 selects prefix.last_hidden
  std::vector<TokenId> targets;
  double total = 0.0;
  for (std::size_t j = 0; j < suffix.size(); ++j) {
    if (!suffix_mask[j]) continue;
    if (j == 0 && prefix.tokens.empty()) {
      total -= std::log(static_cast<double>(params.config.vocab_size));
      continue;
    }
    rows.push_back(j == 0 ? Index{-1} : static_cast<Index>(j - 1));
    targets.push_back(suffix[j]);
  }
  if (rows.empty() && total == 0.0) throw ConfigError("scoring requires at least one masked position");
  if (!rows.empty()) {
    Matrix<T> selected(static_cast<Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      selected.row(static_cast<Index>(i)) = rows[i] < 0 ? prefix.last_hidden : RowVector<T>(hidden.row(rows[i]));
    }
    Matrix<T> logits = selected * params.token_embedding.transpose();
    total += rows_logprob<T>(logits, targets, nullptr);
  }
  if (!std::isfinite(total)) throw NumericalError("non-finite sequence score");
  return total;
}

template <typename T>
double sequence_logprob(const ModelParams<T>& params, const EncodedSequence& seq) {
  if (seq.masked_count() == 0) throw ConfigError("sequence_logprob requires at least one masked position");
  return suffix_logprob(params, empty_prefix(params), seq.tokens, seq.loss_mask);
}

template <typename T>
std::vector<double> score_sequences(const ModelParams<T>& params, std::span<const EncodedSequence> sequences) {
  std::vector<double> scores;
  if (sequences.empty()) return scores;
  std::size_t shared = sequences.front().tokens.size();
  for (const auto& s : sequences) {
    if (s.masked_count() == 0) throw ConfigError("score_sequences: sequence without masked positions");
    shared = std::min(shared, s.first_masked());
    const auto& ref = sequences.front().tokens;
    std::size_t i = 0;
    while (i < shared && s.tokens[i] == ref[i]) ++i;
    shared = i;
  }
  const std::span<const TokenId> prefix_tokens(sequences.front().tokens.data(), shared);
  const PrefixState<T> state = encode_prefix(params, prefix_tokens);
  scores.reserve(sequences.size());
  for (const auto& s : sequences) {
    std::span<const TokenId> suffix(s.tokens.data() + shared, s.tokens.size() - shared);
    std::vector<bool> mask(s.loss_mask.begin() + static_cast<std::ptrdiff_t>(shared), s.loss_mask.end());
    scores.push_back(suffix_logprob(params, state, suffix, mask));
  }
  return scores;
}

#define METAICL_INSTANTIATE(T)                                                                                   \
  template struct ModelParams<T>;                                                                              \
  template LogProbs forward<T>(const ModelParams<T>&, const PaddedBatch&);                                     \
  template LossAndGrads<T> loss_and_grads<T>(const ModelParams<T>&, const PaddedBatch&);                       \
  template double batch_loss<T>(const ModelParams<T>&, const PaddedBatch&);                                    \
  template double sequence_logprob<T>(const ModelParams<T>&, const EncodedSequence&);                          \
  template PrefixState<T> encode_prefix<T>(const ModelParams<T>&, std::span<const TokenId>);                   \
  template double suffix_logprob<T>(const ModelParams<T>&, const PrefixState<T>&, std::span<const TokenId>,    \
                                    const std::vector<bool>&);                                                 \
  template std::vector<double> score_sequences<T>(const ModelParams<T>&, std::span<const EncodedSequence>);

METAICL_INSTANTIATE(float)
METAICL_INSTANTIATE(double)

#undef METAICL_INSTANTIATE

}  // namespace metaicl
