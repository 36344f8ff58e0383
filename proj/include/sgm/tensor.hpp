#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sgm {

using Shape = std::vector<std::size_t>;

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixRMf = MatrixRM<float>;
using MapMatf = Eigen::Map<MatrixRMf>;
using ConstMapMatf = Eigen::Map<const MatrixRMf>;
using MapVecf = Eigen::Map<Eigen::VectorXf>;
using ConstMapVecf = Eigen::Map<const Eigen::VectorXf>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  Eigen::VectorXf data;
  Eigen::VectorXf grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

// Dense row-major float tensor with shared storage. Copies alias the same
// buffer; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::span<const float> values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  // Normal(0, stddev) entries.
  static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev = 1.0f,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, float lo, float hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return static_cast<std::size_t>(impl_->data.size()); }

  std::span<float> data() { return {impl_->data.data(), numel()}; }
  std::span<const float> data() const { return {impl_->data.data(), numel()}; }
  float* ptr() { return impl_->data.data(); }
  const float* ptr() const { return impl_->data.data(); }
  float& operator[](std::size_t i) { return impl_->data[static_cast<Eigen::Index>(i)]; }
  float operator[](std::size_t i) const { return impl_->data[static_cast<Eigen::Index>(i)]; }
  float item() const;

  Eigen::VectorXf& vec() { return impl_->data; }
  const Eigen::VectorXf& vec() const { return impl_->data; }
  // Views the buffer as rows x cols, where cols is the trailing extent.
  MapMatf mat();
  ConstMapMatf mat() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && numel() > 0; }
  Eigen::VectorXf& grad_vec();
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad() { impl_->grad.resize(0); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Records differentiable operations performed while it is the active tape on
// the current thread. Constructing a Tape activates it; destruction restores the
// previously active one. Operations outside any tape are not recorded.
class Tape {
 public:
  using Backward = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Adds an entry when some input requires a gradient and marks the output
  // as requiring one. Returns whether the entry was recorded.
  static bool record(std::initializer_list<const Tensor*> inputs, Tensor& output,
                     Backward backward);
  static bool record(const std::vector<Tensor>& inputs, Tensor& output, Backward backward);

  // Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order. The
  // tape is cleared afterwards.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    Backward backward;
  };
  bool append(std::vector<std::shared_ptr<TensorImpl>> inputs, Tensor& output, Backward backward);

  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Disables recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered name -> tensor list; the unit of checkpointing and optimization.
using TensorList = std::vector<NamedTensor>;

// Gradient buffer of `t`, allocated (zeroed) on first use.
Eigen::VectorXf& ensure_grad(TensorImpl& t);

}  // namespace sgm
