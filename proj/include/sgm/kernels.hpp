#pragma once

// Scalar-generic dense kernels behind the differentiable ops. They work on raw
// row-major buffers and Eigen maps and know nothing about the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>

#include <Eigen/Dense>

#include "sgm/tensor.hpp"

namespace sgm::kernels {

// Lowers a batch of C x H x W images into a (C*9) x (B*H*W) patch matrix for a
// 3x3 kernel with zero padding 1. Column index is b*H*W + y*W + x.
template <typename Scalar>
void im2col3x3(const Scalar* in, std::size_t batch, std::size_t channels, std::size_t height,
               std::size_t width, Scalar* col) {
  const std::size_t plane = height * width;
  const std::size_t ncols = batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* row = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          const Scalar* src = in + (b * channels + c) * plane;
          Scalar* dst = row + b * plane;
          for (std::size_t y = 0; y < height; ++y) {
            const long sy = static_cast<long>(y) + ky - 1;
            Scalar* drow = dst + y * width;
            if (sy < 0 || sy >= static_cast<long>(height)) {
              std::fill(drow, drow + width, Scalar(0));
              continue;
            }
            const Scalar* srow = src + static_cast<std::size_t>(sy) * width;
            for (std::size_t x = 0; x < width; ++x) {
              const long sx = static_cast<long>(x) + kx - 1;
              drow[x] = (sx < 0 || sx >= static_cast<long>(width)) ? Scalar(0)
                                                                    : srow[static_cast<std::size_t>(sx)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col3x3: scatters patch-matrix entries back onto the image
// gradient (accumulating).
template <typename Scalar>
void col2im3x3(const Scalar* col, std::size_t batch, std::size_t channels, std::size_t height,
               std::size_t width, Scalar* out) {
  const std::size_t plane = height * width;
  const std::size_t ncols = batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* row = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * ncols;
        for (std::size_t b = 0; b < batch; ++b) {
          Scalar* dst = out + (b * channels + c) * plane;
          const Scalar* src = row + b * plane;
          for (std::size_t y = 0; y < height; ++y) {
            const long sy = static_cast<long>(y) + ky - 1;
            if (sy < 0 || sy >= static_cast<long>(height)) continue;
            Scalar* drow = dst + static_cast<std::size_t>(sy) * width;
            const Scalar* srow = src + y * width;
            for (std::size_t x = 0; x < width; ++x) {
              const long sx = static_cast<long>(x) + kx - 1;
              if (sx < 0 || sx >= static_cast<long>(width)) continue;
              drow[static_cast<std::size_t>(sx)] += srow[x];
            }
          }
        }
      }
    }
  }
}

// (B*HW) columns grouped per channel -> B x C x HW, and the inverse.
template <typename Scalar>
void channel_major_to_batch_major(const Scalar* src, std::size_t batch, std::size_t channels,
                                  std::size_t plane, Scalar* dst) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(src + c * batch * plane + b * plane, plane, dst + (b * channels + c) * plane);
}

template <typename Scalar>
void batch_major_to_channel_major(const Scalar* src, std::size_t batch, std::size_t channels,
                                  std::size_t plane, Scalar* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + (b * channels + c) * plane, plane, dst + c * batch * plane + b * plane);
}

// Non-overlapping 2x2 max over `planes` H x W planes. Ties resolve to the first
// element in scan order; argmax holds flat input offsets.
template <typename Scalar>
void maxpool2(const Scalar* in, std::size_t planes, std::size_t height, std::size_t width,
              Scalar* out, std::uint32_t* argmax) {
  const std::size_t oh = height / 2, ow = width / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const Scalar* src = in + p * height * width;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (2 * y) * width + 2 * x;
        const std::size_t cand[3] = {best + 1, best + width, best + width + 1};
        for (std::size_t k : cand)
          if (src[k] > src[best]) best = k;
        const std::size_t o = p * oh * ow + y * ow + x;
        out[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(p * height * width + best);
      }
    }
  }
}

// Row-wise numerically stable softmax, in place.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

template <typename Derived>
void softmax_cols(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    auto col = m.col(c);
    const Scalar mx = col.maxCoeff();
    col = (col.array() - mx).exp().matrix();
    col /= col.sum();
  }
}

// Given softmax output y (rows) and upstream gy, returns dL/dx row-wise.
template <typename Scalar>
MatrixRM<Scalar> softmax_rows_backward(const Eigen::Ref<const MatrixRM<Scalar>>& y,
                                       const Eigen::Ref<const MatrixRM<Scalar>>& gy) {
  const VectorX<Scalar> dots = (y.array() * gy.array()).rowwise().sum();
  return (y.array() * (gy.array().colwise() - dots.array())).matrix();
}

template <typename Scalar>
Scalar logistic(Scalar z) {
  return z >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-z))
                        : std::exp(z) / (Scalar(1) + std::exp(z));
}

// Cosine of two vectors; returns 0 (orthogonal) when either has zero norm.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& a,
                                 const Eigen::MatrixBase<DerivedB>& b, bool* degenerate = nullptr) {
  using Scalar = typename DerivedA::Scalar;
  const Scalar na = a.norm(), nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) {
    if (degenerate) *degenerate = true;
    return Scalar(0);
  }
  if (degenerate) *degenerate = false;
  return a.dot(b) / (na * nb);
}

}  // namespace sgm::kernels
