// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpa/tensor.hpp"

namespace cpa {

struct AdamConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled: p <- p - lr * wd * p
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with decoupled weight decay. Moment buffers are created on the
/// first step and keep the shapes of the parameters they track.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  /// Applies one update in place. The parameter list must keep the same
  /// order and shapes across calls.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
  void step(Tensor& param, const Tensor& grad);

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace cpa
