#pragma once

// Template members of ModelParams; included from model.hpp.

#include <cmath>
#include <string>

namespace metaicl {

template <typename T>
template <typename F>
void ModelParams<T>::for_each_tensor(F&& f) {
  f(std::string("token_embedding"), token_embedding.data(), token_embedding.rows(), token_embedding.cols());
  f(std::string("position_embedding"), position_embedding.data(), position_embedding.rows(),
    position_embedding.cols());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "ln1_gain", l.ln1_gain.data(), Eigen::Index{1}, l.ln1_gain.cols());
    f(p + "ln1_bias", l.ln1_bias.data(), Eigen::Index{1}, l.ln1_bias.cols());
    f(p + "qkv_weight", l.qkv_weight.data(), l.qkv_weight.rows(), l.qkv_weight.cols());
    f(p + "qkv_bias", l.qkv_bias.data(), Eigen::Index{1}, l.qkv_bias.cols());
    f(p + "proj_weight", l.proj_weight.data(), l.proj_weight.rows(), l.proj_weight.cols());
    f(p + "proj_bias", l.proj_bias.data(), Eigen::Index{1}, l.proj_bias.cols());
    f(p + "ln2_gain", l.ln2_gain.data(), Eigen::Index{1}, l.ln2_gain.cols());
    f(p + "ln2_bias", l.ln2_bias.data(), Eigen::Index{1}, l.ln2_bias.cols());
    f(p + "fc_weight", l.fc_weight.data(), l.fc_weight.rows(), l.fc_weight.cols());
    f(p + "fc_bias", l.fc_bias.data(), Eigen::Index{1}, l.fc_bias.cols());
    f(p + "out_weight", l.out_weight.data(), l.out_weight.rows(), l.out_weight.cols());
    f(p + "out_bias", l.out_bias.data(), Eigen::Index{1}, l.out_bias.cols());
  }
  f(std::string("final_gain"), final_gain.data(), Eigen::Index{1}, final_gain.cols());
  f(std::string("final_bias"), final_bias.data(), Eigen::Index{1}, final_bias.cols());
}

template <typename T>
template <typename F>
void ModelParams<T>::for_each_tensor(F&& f) const {
  const_cast<ModelParams<T>*>(this)->for_each_tensor(
      [&](const std::string& name, T* data, Eigen::Index rows, Eigen::Index cols) {
        f(name, static_cast<const T*>(data), rows, cols);
      });
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const T*, Eigen::Index r, Eigen::Index c) {
    n += static_cast<std::size_t>(r * c);
  });
  return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, const T* d, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index i = 0; i < r * c && ok; ++i) ok = std::isfinite(d[i]);
  });
  return ok;
}

template <typename T>
void ModelParams<T>::set_zero() {
  for_each_tensor([](const std::string&, T* d, Eigen::Index r, Eigen::Index c) {
    std::fill(d, d + r * c, T{0});
  });
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out = ModelParams<U>::zeros(config);
  std::vector<const T*> src;
  for_each_tensor([&](const std::string&, const T* d, Eigen::Index, Eigen::Index) { src.push_back(d); });
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string&, U* d, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index j = 0; j < r * c; ++j) d[j] = static_cast<U>(src[i][j]);
    ++i;
  });
  return out;
}

template <typename T>
bool ModelParams<T>::operator==(const ModelParams& other) const {
  if (!(config == other.config)) return false;
  std::vector<const T*> mine;
  for_each_tensor([&](const std::string&, const T* d, Eigen::Index, Eigen::Index) { mine.push_back(d); });
  std::size_t i = 0;
  bool equal = true;
  other.for_each_tensor([&](const std::string&, const T* d, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index j = 0; j < r * c && equal; ++j) equal = mine[i][j] == d[j];
    ++i;
  });
  return equal;
}

}  // namespace metaicl
