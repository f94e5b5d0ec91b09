#pragma once

// Scalar reference transformer: plain loops over std::vector, one sequence,
// no Eigen expressions. Shares only the parameter layout with the library.

#include <cmath>
#include <vector>

#include "metaicl/model.hpp"

namespace naive {

using Vec = std::vector<double>;

template <typename T>
double at(const metaicl::Matrix<T>& m, long r, long c) {
  return static_cast<double>(m(r, c));
}

template <typename T>
Vec layer_norm(const Vec& x, const metaicl::RowVector<T>& gain, const metaicl::RowVector<T>& bias) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (x[i] - mean) * inv * static_cast<double>(gain(static_cast<long>(i))) +
             static_cast<double>(bias(static_cast<long>(i)));
  }
  return out;
}

inline double gelu(double x) {
  const double k = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

// y = x W + b for a row vector x.
template <typename T>
Vec affine(const Vec& x, const metaicl::Matrix<T>& w, const metaicl::RowVector<T>& b) {
  Vec y(static_cast<std::size_t>(w.cols()));
  for (long j = 0; j < w.cols(); ++j) {
    double s = static_cast<double>(b(j));
    for (long i = 0; i < w.rows(); ++i) s += x[static_cast<std::size_t>(i)] * at(w, i, j);
    y[static_cast<std::size_t>(j)] = s;
  }
  return y;
}

// Row t: log p(. | tokens[0, t)); row 0 is uniform.
template <typename T>
std::vector<Vec> logprobs(const metaicl::ModelParams<T>& p, const std::vector<metaicl::TokenId>& tokens) {
  const auto& c = p.config;
  const std::size_t n = tokens.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t heads = static_cast<std::size_t>(c.n_heads), dh = d / heads;
  std::vector<Vec> h(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      h[t][i] = at(p.token_embedding, tokens[t], static_cast<long>(i)) +
                at(p.position_embedding, static_cast<long>(t), static_cast<long>(i));
    }
  }
  for (const auto& w : p.layers) {
    std::vector<Vec> qkv(n);
    for (std::size_t t = 0; t < n; ++t) qkv[t] = affine(layer_norm(h[t], w.ln1_gain, w.ln1_bias), w.qkv_weight, w.qkv_bias);
    std::vector<Vec> attn(n, Vec(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t q0 = hd * dh, k0 = d + hd * dh, v0 = 2 * d + hd * dh;
      for (std::size_t t = 0; t < n; ++t) {
        Vec score(t + 1);
        double top = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t i = 0; i < dh; ++i) dot += qkv[t][q0 + i] * qkv[s][k0 + i];
          score[s] = dot / std::sqrt(static_cast<double>(dh));
          top = std::max(top, score[s]);
        }
        double z = 0.0;
        for (auto& v : score) z += (v = std::exp(v - top));
        for (std::size_t s = 0; s <= t; ++s) {
          for (std::size_t i = 0; i < dh; ++i) attn[t][q0 + i] += score[s] / z * qkv[s][v0 + i];
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const Vec proj = affine(attn[t], w.proj_weight, w.proj_bias);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += proj[i];
      Vec fc = affine(layer_norm(h[t], w.ln2_gain, w.ln2_bias), w.fc_weight, w.fc_bias);
      for (auto& v : fc) v = gelu(v);
      const Vec out = affine(fc, w.out_weight, w.out_bias);
      for (std::size_t i = 0; i < d; ++i) h[t][i] += out[i];
    }
  }
  const std::size_t vocab = static_cast<std::size_t>(c.vocab_size);
  std::vector<Vec> rows(n, Vec(vocab, -std::log(static_cast<double>(vocab))));
  for (std::size_t t = 1; t < n; ++t) {
    const Vec f = layer_norm(h[t - 1], p.final_gain, p.final_bias);
    Vec logits(vocab);
    double top = -1e300;
    for (std::size_t v = 0; v < vocab; ++v) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += f[i] * at(p.token_embedding, static_cast<long>(v), static_cast<long>(i));
      logits[v] = s;
      top = std::max(top, s);
    }
    double z = 0.0;
    for (double v : logits) z += std::exp(v - top);
    for (std::size_t v = 0; v < vocab; ++v) rows[t][v] = logits[v] - top - std::log(z);
  }
  return rows;
}

// Sum over masked positions of log p(token | prefix), one token at a time.
template <typename T>
double sequence_logprob(const metaicl::ModelParams<T>& p, const metaicl::EncodedSequence& seq) {
  const auto rows = logprobs(p, seq.tokens);
  double total = 0.0;
  for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
    if (seq.loss_mask[t]) total += rows[t][seq.tokens[t]];
  }
  return total;
}

}  // namespace naive
