#pragma once

#include <algorithm>
#include <cmath>

#include "lrmix/autograd.hpp"

namespace lrmix {

struct AdamConfig {
  double learning_rate = 0.001;
  double weight_decay = 0.0005;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("adam: learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam: beta2 must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("adam: weight_decay must be >= 0");
  }
};

/// One Adam update with bias correction. Weight decay is coupled: it is
/// folded into the gradient before the moment updates. Gradients are left
/// untouched; frozen parameters are skipped.
template <class T>
void adam_step(const ParamList<T>& params, const AdamConfig& cfg) {
  cfg.validate();
  const T lr = static_cast<T>(cfg.learning_rate);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.epsilon);
  for (Parameter<T>* p : params) {
    if (p->frozen()) continue;
    p->mark_step();
    const auto t = static_cast<double>(p->step_count());
    const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
    auto& value = p->value();
    auto& grad = p->grad();
    auto& m = p->adam_m();
    auto& v = p->adam_v();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T g = grad[i] + wd * value[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T m_hat = m[i] / c1;
      const T v_hat = v[i] / c2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    if (const auto& box = p->clamp()) {
      for (auto& x : value.data()) x = std::clamp(x, box->first, box->second);
    }
  }
}

}  // namespace lrmix
