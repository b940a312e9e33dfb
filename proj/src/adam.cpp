// SPDX-License-Identifier: Apache-2.0

#include "cpa/adam.hpp"

#include <cmath>
#include <string>

#include "cpa/error.hpp"

namespace cpa {

void AdamState::step(Tensor& param, const Tensor& grad) {
  Tensor* p = &param;
  step(std::span<Tensor* const>(&p, 1), std::span<const Tensor>(&grad, 1));
}

void AdamState::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ValidationError("adam: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                          " gradients");
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros_like(*p));
      v_.push_back(Tensor::zeros_like(*p));
    }
  }
  if (m_.size() != params.size()) throw ValidationError("adam: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != m_[i].shape()) {
      throw ValidationError("adam: shape mismatch for parameter " + std::to_string(i) + ": " +
                            shape_string(params[i]->shape()) + " vs gradient " + shape_string(grads[i].shape()));
    }
  }

  ++step_;
  const auto& c = config_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      p[j] = p[j] * decay - c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace cpa
