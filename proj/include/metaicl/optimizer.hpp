#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "metaicl/model.hpp"

namespace metaicl {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction, no weight decay.
template <typename T>
class Adam {
 public:
  Adam(const ModelConfig& config, AdamConfig hyper = {})
      : hyper_(hyper), first_(ModelParams<T>::zeros(config)), second_(ModelParams<T>::zeros(config)) {}

  void step(ModelParams<T>& params, const ModelParams<T>& grads, double learning_rate) {
    ++steps_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(steps_));
    auto p = spans(params);
    auto g = spans(grads);
    auto m = spans(first_);
    auto v = spans(second_);
    for (std::size_t t = 0; t < p.size(); ++t) {
      for (std::size_t i = 0; i < p[t].size; ++i) {
        const double gi = static_cast<double>(g[t].data[i]);
        double mi = hyper_.beta1 * static_cast<double>(m[t].data[i]) + (1.0 - hyper_.beta1) * gi;
        double vi = hyper_.beta2 * static_cast<double>(v[t].data[i]) + (1.0 - hyper_.beta2) * gi * gi;
        m[t].data[i] = static_cast<T>(mi);
        v[t].data[i] = static_cast<T>(vi);
        const double update = learning_rate * (mi / c1) / (std::sqrt(vi / c2) + hyper_.eps);
        p[t].data[i] = static_cast<T>(static_cast<double>(p[t].data[i]) - update);
      }
    }
  }

  std::size_t steps() const { return steps_; }

 private:
  struct Span {
    T* data;
    std::size_t size;
  };

  static std::vector<Span> spans(const ModelParams<T>& params) {
    std::vector<Span> out;
    params.for_each_tensor([&](const std::string&, const T* d, Eigen::Index r, Eigen::Index c) {
      out.push_back({const_cast<T*>(d), static_cast<std::size_t>(r * c)});
    });
    return out;
  }

  AdamConfig hyper_;
  ModelParams<T> first_;
  ModelParams<T> second_;
  std::size_t steps_ = 0;
};

}  // namespace metaicl
