#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "sgm/tensor.hpp"

namespace sgm {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  float learning_rate = 0.1f;
  float momentum = 0.9f;  // SGD only
  float weight_decay = 0.0f;
  float beta1 = 0.9f;  // Adam only
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::size_t steps = 0;
  // Per-parameter moment buffers, lazily sized to match the parameter list.
  std::vector<Eigen::VectorXf> first;
  std::vector<Eigen::VectorXf> second;

  static OptimizerState sgd(float learning_rate, float momentum, float weight_decay);
  static OptimizerState adam(float learning_rate, float weight_decay);
};

// v <- mu v + g + lambda theta;  theta <- theta - eta v
void sgd_step(TensorList& params, OptimizerState& state);
// Bias-corrected Adam with the L2 term lambda theta added to the gradient.
void adam_step(TensorList& params, OptimizerState& state);
void optimizer_step(TensorList& params, OptimizerState& state);

void zero_grad(TensorList& params);

}  // namespace sgm
