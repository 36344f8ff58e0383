#include "sgm/optim.hpp"

#include <cmath>
#include <string>

#include "sgm/errors.hpp"

namespace sgm {

OptimizerState OptimizerState::sgd(float learning_rate, float momentum, float weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::Sgd;
  s.learning_rate = learning_rate;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

OptimizerState OptimizerState::adam(float learning_rate, float weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::Adam;
  s.learning_rate = learning_rate;
  s.momentum = 0.0f;
  s.weight_decay = weight_decay;
  return s;
}

namespace {

void prepare(TensorList& params, OptimizerState& state) {
  if (!(state.learning_rate >= 0.0f))
    throw ArgumentError("optimizer: learning rate must be non-negative");
  for (const auto& p : params)
    if (!p.tensor.has_grad()) throw ArgumentError("optimizer: parameter '" + p.name + "' has no gradient");
  if (state.first.size() != params.size()) {
    state.first.assign(params.size(), Eigen::VectorXf());
    state.second.assign(params.size(), Eigen::VectorXf());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = params[i].tensor.vec().size();
    if (state.first[i].size() != n) state.first[i] = Eigen::VectorXf::Zero(n);
    if (state.kind == OptimizerKind::Adam && state.second[i].size() != n) state.second[i] = Eigen::VectorXf::Zero(n);
  }
  ++state.steps;
}

}  // namespace

void sgd_step(TensorList& params, OptimizerState& state) {
  prepare(params, state);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    auto& v = state.first[i];
    v = state.momentum * v + t.grad_vec() + state.weight_decay * t.vec();
    t.vec() -= state.learning_rate * v;
  }
}

void adam_step(TensorList& params, OptimizerState& state) {
  prepare(params, state);
  const auto t = static_cast<float>(state.steps);
  const float c1 = 1.0f - std::pow(state.beta1, t);
  const float c2 = 1.0f - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    const Eigen::VectorXf g = p.grad_vec() + state.weight_decay * p.vec();
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = state.beta1 * m + (1.0f - state.beta1) * g;
    v = state.beta2 * v + (1.0f - state.beta2) * g.cwiseAbs2();
    p.vec().array() -= state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

void optimizer_step(TensorList& params, OptimizerState& state) {
  if (state.kind == OptimizerKind::Sgd)
    sgd_step(params, state);
  else
    adam_step(params, state);
}

void zero_grad(TensorList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace sgm
