#include "sgm/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "sgm/errors.hpp"

namespace sgm {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Eigen::VectorXf& ensure_grad(TensorImpl& t) {
  if (t.grad.size() != t.data.size()) t.grad = Eigen::VectorXf::Zero(t.data.size());
  return t.grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data = Eigen::VectorXf::Zero(static_cast<Eigen::Index>(sgm::numel(shape)));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::span<const float> values, bool requires_grad)
    : Tensor(std::move(shape), requires_grad) {
  if (values.size() != numel())
    throw DimensionError("tensor of shape " + to_string(impl_->shape) + " given " +
                         std::to_string(values.size()) + " values");
  std::copy(values.begin(), values.end(), impl_->data.data());
}

Tensor::Tensor(Shape shape, std::initializer_list<float> values, bool requires_grad)
    : Tensor(std::move(shape), std::span<const float>(values.begin(), values.size()),
             requires_grad) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  t.vec().setConstant(value);
  return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, float stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, float lo, float hi, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

MapMatf Tensor::mat() {
  const std::size_t cols = rank() == 0 ? 1 : shape().back();
  const std::size_t rows = cols == 0 ? 0 : numel() / cols;
  return {ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

ConstMapMatf Tensor::mat() const {
  const std::size_t cols = rank() == 0 ? 1 : shape().back();
  const std::size_t rows = cols == 0 ? 0 : numel() / cols;
  return {ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::VectorXf& Tensor::grad_vec() { return ensure_grad(*impl_); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) return {};
  return {impl_->grad.data(), numel()};
}

void Tensor::zero_grad() {
  if (impl_->grad.size() == impl_->data.size())
    impl_->grad.setZero();
  else
    impl_->grad = Eigen::VectorXf::Zero(impl_->data.size());
}

Tensor Tensor::clone() const {
  Tensor t(shape(), impl_->requires_grad);
  t.vec() = impl_->data;
  return t;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::append(std::vector<std::shared_ptr<TensorImpl>> inputs, Tensor& output,
                  Backward backward) {
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (!any) return false;
  output.set_requires_grad(true);
  entries_.push_back({std::move(inputs), output.impl(), std::move(backward)});
  return true;
}

bool Tape::record(std::initializer_list<const Tensor*> inputs, Tensor& output, Backward backward) {
  Tape* tape = g_active_tape;
  if (!tape) return false;
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(inputs.size());
  for (const Tensor* t : inputs)
    if (t && t->defined()) impls.push_back(t->impl());
  return tape->append(std::move(impls), output, std::move(backward));
}

bool Tape::record(const std::vector<Tensor>& inputs, Tensor& output, Backward backward) {
  Tape* tape = g_active_tape;
  if (!tape) return false;
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(inputs.size());
  for (const Tensor& t : inputs) impls.push_back(t.impl());
  return tape->append(std::move(impls), output, std::move(backward));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  // Every reachable leaf gets a gradient buffer even if its contribution is zero.
  for (auto& e : entries_)
    for (auto& in : e.inputs)
      if (in->requires_grad) ensure_grad(*in);
  auto& seed = ensure_grad(*loss.impl());
  seed[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.size() != it->output->data.size()) continue;
    it->backward();
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

}  // namespace sgm
