#pragma once

#include <cmath>
#include <map>
#include <string>

#include "disfacerep/encoders.hpp"

namespace disfacerep {

// AdamW with decoupled weight decay applied to matrix-shaped parameters only
// (biases, gains and single-row tensors are not decayed).
template <typename T>
struct AdamW {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  nn::ParamStore<T> m, v;

  void init_like(const nn::ParamStore<T>& params) {
    for (const auto& [name, p] : params.all()) {
      m.add(name, ad::Matrix<T>(p.rows, p.cols));
      v.add(name, ad::Matrix<T>(p.rows, p.cols));
    }
  }

  // t is the 1-based step count.
  void step(nn::ParamStore<T>& params, const std::map<std::string, ad::Matrix<double>>& grads, long t) {
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params.all()) {
      const ad::Matrix<double>& g = grads.at(name);
      ad::Matrix<T>& mm = m.at(name);
      ad::Matrix<T>& vv = v.at(name);
      const bool decay = p.rows > 1 && p.cols > 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g.data[i];
        mm.data[i] = static_cast<T>(beta1 * mm.data[i] + (1 - beta1) * gi);
        vv.data[i] = static_cast<T>(beta2 * vv.data[i] + (1 - beta2) * gi * gi);
        const double mhat = mm.data[i] / c1, vhat = vv.data[i] / c2;
        double w = p.data[i];
        if (decay) w -= lr * weight_decay * w;
        w -= lr * mhat / (std::sqrt(vhat) + eps);
        p.data[i] = static_cast<T>(w);
      }
    }
  }
};

}  // namespace disfacerep
