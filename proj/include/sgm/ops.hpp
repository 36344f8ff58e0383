#pragma once

// Differentiable operations. Each returns a fresh tensor and, when a Tape is
// active and some input requires a gradient, records its adjoint.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "sgm/tensor.hpp"

namespace sgm {

enum class Mode { Train, Eval };

// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [n x in] * w^T [in x out] (+ bias [out]); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// alpha * x + beta
Tensor affine(const Tensor& x, float alpha, float beta);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Stable softmax along `axis` of a tensor of any rank.
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);

// 3x3 cross-correlation, stride 1, zero padding 1. Input is C x H x W or
// B x C x H x W; kernel is C_out x C_in x 3 x 3.
Tensor conv2d(const Tensor& input, const Tensor& kernel);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  static BatchNormStats init(std::size_t channels);
};

// Per-channel normalization of B x C x H x W (or C x H x W as B = 1). Train
// mode uses batch statistics and updates the running estimates.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, Mode mode);

// 2x2 stride-2 max pooling over C x H x W or B x C x H x W.
Tensor maxpool2(const Tensor& input);
// B x C x H x W -> B x C
Tensor global_avgpool(const Tensor& input);
// B x C x H x W (or C x H x W) -> (B*H*W) x C, one row per spatial position in
// row-major order.
Tensor map_to_rows(const Tensor& input);

// Mean negative log-likelihood of integer labels under row-wise softmax.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor mse(const Tensor& prediction, const Tensor& target);

// --- row-block operations over stacked graphs -----------------------------
// Inputs hold G blocks of `group` consecutive rows.

// out[(g*k + m)*k + n] = a[g*k + m] + b[g*k + n]
Tensor pair_sum(const Tensor& a, const Tensor& b, std::size_t group);
Tensor group_mean(const Tensor& x, std::size_t group);
Tensor group_sum(const Tensor& x, std::size_t group);
// Each row repeated `times` times consecutively.
Tensor repeat_rows(const Tensor& x, std::size_t times);
// Whole matrix stacked `times` times.
Tensor tile_rows(const Tensor& x, std::size_t times);
// Selects row blocks by index; indices may repeat.
Tensor gather_groups(const Tensor& x, std::span<const std::size_t> index, std::size_t group);
// Scales row i of x [n x d] by s[i].
Tensor mul_rows(const Tensor& x, const Tensor& s);

// For each of the P block pairs (a_p, b_p) with logits A = a_p b_p^T:
//   first  = softmax over columns of A, applied to b_p    (rows of a attend to b)
//   second = softmax over rows of A, transposed, applied to a_p
std::pair<Tensor, Tensor> cross_attention(const Tensor& a, const Tensor& b, std::size_t group);

// Row-wise cosine similarity of a, b [n x d] -> [n]. Rows where either side
// has zero norm yield 0 with zero gradient; their count goes to `degenerate`.
Tensor row_cosine(const Tensor& a, const Tensor& b, std::size_t* degenerate = nullptr);

}  // namespace sgm
