#include "sgm/ops.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

#include "sgm/errors.hpp"
#include "sgm/kernels.hpp"

namespace sgm {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;
using Index = Eigen::Index;

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.defined() && t.rank() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              (t.defined() ? to_string(t.shape()) : std::string("undefined")));
}

MapMatf grad_mat(TensorImpl& t, Index rows, Index cols) { return {ensure_grad(t).data(), rows, cols}; }
ConstMapMatf data_mat(const TensorImpl& t, Index rows, Index cols) { return {t.data.data(), rows, cols}; }
ConstMapMatf out_grad(const TensorImpl& t, Index rows, Index cols) { return {t.grad.data(), rows, cols}; }

Index as_index(std::size_t n) { return static_cast<Index>(n); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.dim(1) == b.dim(0),
          "matmul: inner extents differ for " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index m = as_index(a.dim(0)), k = as_index(a.dim(1)), n = as_index(b.dim(1));
  Tensor out({a.dim(0), b.dim(1)});
  out.mat().noalias() = a.mat() * b.mat();
  ImplPtr A = a.impl(), B = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [A, B, O, m, k, n] {
    auto g = out_grad(*O, m, n);
    if (A->requires_grad) grad_mat(*A, m, k).noalias() += g * data_mat(*B, k, n).transpose();
    if (B->requires_grad) grad_mat(*B, k, n).noalias() += data_mat(*A, m, k).transpose() * g;
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require(x.dim(1) == w.dim(1), "linear: input " + to_string(x.shape()) + " does not fit weight " +
                                    to_string(w.shape()));
  if (bias.defined())
    require(bias.numel() == w.dim(0), "linear: bias " + to_string(bias.shape()) + " does not fit weight " +
                                          to_string(w.shape()));
  const Index n = as_index(x.dim(0)), in = as_index(x.dim(1)), outd = as_index(w.dim(0));
  Tensor out({x.dim(0), w.dim(0)});
  out.mat().noalias() = x.mat() * w.mat().transpose();
  if (bias.defined()) out.mat().rowwise() += bias.vec().transpose();
  ImplPtr X = x.impl(), W = w.impl(), Bv = bias.defined() ? bias.impl() : nullptr, O = out.impl();
  Tape::record({&x, &w, &bias}, out, [X, W, Bv, O, n, in, outd] {
    auto g = out_grad(*O, n, outd);
    if (X->requires_grad) grad_mat(*X, n, in).noalias() += g * data_mat(*W, outd, in);
    if (W->requires_grad) grad_mat(*W, outd, in).noalias() += g.transpose() * data_mat(*X, n, in);
    if (Bv && Bv->requires_grad) ensure_grad(*Bv) += g.colwise().sum().transpose();
  });
  return out;
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shapes differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  out.vec() = a.vec() + b.vec();
  ImplPtr A = a.impl(), B = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [A, B, O] {
    if (A->requires_grad) ensure_grad(*A) += O->grad;
    if (B->requires_grad) ensure_grad(*B) += O->grad;
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  out.vec() = a.vec() - b.vec();
  ImplPtr A = a.impl(), B = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [A, B, O] {
    if (A->requires_grad) ensure_grad(*A) += O->grad;
    if (B->requires_grad) ensure_grad(*B) -= O->grad;
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  out.vec() = a.vec().cwiseProduct(b.vec());
  ImplPtr A = a.impl(), B = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [A, B, O] {
    if (A->requires_grad) ensure_grad(*A) += O->grad.cwiseProduct(B->data);
    if (B->requires_grad) ensure_grad(*B) += O->grad.cwiseProduct(A->data);
  });
  return out;
}

Tensor affine(const Tensor& x, float alpha, float beta) {
  Tensor out(x.shape());
  out.vec() = (alpha * x.vec().array() + beta).matrix();
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O, alpha] { ensure_grad(*X) += alpha * O->grad; });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  out.vec() = x.vec().cwiseMax(0.0f);
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O] {
    ensure_grad(*X) += (X->data.array() > 0.0f).select(O->grad, 0.0f).matrix();
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = kernels::logistic(x[i]);
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O] {
    ensure_grad(*X).array() += O->grad.array() * O->data.array() * (1.0f - O->data.array());
  });
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                               to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Tensor out(x.shape());
  const float* src = x.ptr();
  float* dst = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      float mx = src[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, src[base + j * inner]);
      float total = 0.0f;
      for (std::size_t j = 0; j < len; ++j) {
        const float e = std::exp(src[base + j * inner] - mx);
        dst[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) dst[base + j * inner] /= total;
    }
  }
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O, outer, inner, len] {
    auto& gx = ensure_grad(*X);
    const float* y = O->data.data();
    const float* gy = O->grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        float dot = 0.0f;
        for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * gy[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = base + j * inner;
          gx[as_index(k)] += y[k] * (gy[k] - dot);
        }
      }
    }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out(Shape{});
  out[0] = x.vec().sum();
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O] { ensure_grad(*X).array() += O->grad[0]; });
  return out;
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  Tensor out(Shape{});
  const float inv = 1.0f / static_cast<float>(x.numel());
  out[0] = x.vec().sum() * inv;
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O, inv] { ensure_grad(*X).array() += O->grad[0] * inv; });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor out(std::move(shape));
  out.vec() = x.vec();
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O] { ensure_grad(*X) += O->grad; });
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const Index r = as_index(x.dim(0)), c = as_index(x.dim(1));
  Tensor out({x.dim(1), x.dim(0)});
  out.mat() = x.mat().transpose();
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O, r, c] { grad_mat(*X, r, c) += out_grad(*O, c, r).transpose(); });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == rows, "concat_cols: row counts differ (" + std::to_string(rows) + " vs " +
                                  std::to_string(p.dim(0)) + ")");
    cols += p.dim(1);
  }
  Tensor out({rows, cols});
  std::vector<ImplPtr> impls;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(off, as_index(p.dim(1))) = p.mat();
    impls.push_back(p.impl());
    offsets.push_back(off);
    off += as_index(p.dim(1));
  }
  ImplPtr O = out.impl();
  Tape::record(parts, out, [impls, offsets, O, rows, cols] {
    auto g = out_grad(*O, as_index(rows), as_index(cols));
    for (std::size_t i = 0; i < impls.size(); ++i) {
      if (!impls[i]->requires_grad) continue;
      const Index w = as_index(impls[i]->shape[1]);
      grad_mat(*impls[i], as_index(rows), w) += g.middleCols(offsets[i], w);
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  require(start + count <= x.dim(1), "slice_cols: columns [" + std::to_string(start) + ", " +
                                         std::to_string(start + count) + ") exceed " + to_string(x.shape()));
  const Index r = as_index(x.dim(0)), c = as_index(x.dim(1));
  Tensor out({x.dim(0), count});
  out.mat() = x.mat().middleCols(as_index(start), as_index(count));
  ImplPtr X = x.impl(), O = out.impl();
  Tape::record({&x}, out, [X, O, r, c, start, count] {
    grad_mat(*X, r, c).middleCols(as_index(start), as_index(count)) += out_grad(*O, r, as_index(count));
  });
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4),
          "conv2d: input must be C x H x W or B x C x H x W");
  require_rank(kernel, 4, "conv2d");
  require(kernel.dim(2) == 3 && kernel.dim(3) == 3,
          "conv2d: kernel spatial size must be 3x3, got " + to_string(kernel.shape()));
  const bool batched = input.rank() == 4;
  const std::size_t batch = batched ? input.dim(0) : 1;
  const std::size_t cin = input.dim(batched ? 1 : 0);
  const std::size_t h = input.dim(batched ? 2 : 1), w = input.dim(batched ? 3 : 2);
  require(kernel.dim(1) == cin, "conv2d: channel mismatch, input " + to_string(input.shape()) + " vs kernel " +
                                    to_string(kernel.shape()));
  const std::size_t cout = kernel.dim(0);
  const std::size_t plane = h * w;
  const Index ncols = as_index(batch * plane);
  const Index krows = as_index(cin * 9);

  auto col = std::make_shared<MatrixRMf>(krows, ncols);
  kernels::im2col3x3(input.ptr(), batch, cin, h, w, col->data());
  MatrixRMf y = ConstMapMatf(kernel.ptr(), as_index(cout), krows) * (*col);

  Tensor out(batched ? Shape{batch, cout, h, w} : Shape{cout, h, w});
  kernels::channel_major_to_batch_major(y.data(), batch, cout, plane, out.ptr());

  ImplPtr X = input.impl(), K = kernel.impl(), O = out.impl();
  Tape::record({&input, &kernel}, out, [X, K, O, col, batch, cin, cout, h, w, plane, ncols, krows] {
    MatrixRMf gy(as_index(cout), ncols);
    kernels::batch_major_to_channel_major(O->grad.data(), batch, cout, plane, gy.data());
    if (K->requires_grad) grad_mat(*K, as_index(cout), krows).noalias() += gy * col->transpose();
    if (X->requires_grad) {
      MatrixRMf gcol = data_mat(*K, as_index(cout), krows).transpose() * gy;
      kernels::col2im3x3(gcol.data(), batch, cin, h, w, ensure_grad(*X).data());
    }
  });
  return out;
}

BatchNormStats BatchNormStats::init(std::size_t channels) {
  BatchNormStats s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0f);
  return s;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                   Mode mode) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4),
          "batchnorm2d: input must be C x H x W or B x C x H x W");
  const bool batched = input.rank() == 4;
  const std::size_t batch = batched ? input.dim(0) : 1;
  const std::size_t ch = input.dim(batched ? 1 : 0);
  const std::size_t plane = input.numel() / (batch * ch);
  require(gamma.numel() == ch && beta.numel() == ch && stats.running_mean.numel() == ch &&
              stats.running_var.numel() == ch,
          "batchnorm2d: parameter size does not match " + std::to_string(ch) + " channels");
  const std::size_t count = batch * plane;
  if (mode == Mode::Train && count < 2)
    throw ArgumentError("batchnorm2d: train mode needs at least 2 values per channel, got " +
                        std::to_string(count));

  auto mean = std::make_shared<Eigen::VectorXf>(as_index(ch));
  auto invstd = std::make_shared<Eigen::VectorXf>(as_index(ch));
  const float* x = input.ptr();
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < ch; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = x + (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = x + (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - mu) * (p[i] - mu);
      }
      const double var = s2 / static_cast<double>(count);
      (*mean)[as_index(c)] = static_cast<float>(mu);
      (*invstd)[as_index(c)] = static_cast<float>(1.0 / std::sqrt(var + stats.eps));
      const double unbiased = s2 / static_cast<double>(count - 1);
      float& rm = stats.running_mean[c];
      float& rv = stats.running_var[c];
      rm = static_cast<float>((1.0 - stats.momentum) * rm + stats.momentum * mu);
      rv = static_cast<float>((1.0 - stats.momentum) * rv + stats.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      (*mean)[as_index(c)] = stats.running_mean[c];
      (*invstd)[as_index(c)] = 1.0f / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }

  Tensor out(input.shape());
  float* y = out.ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const float mu = (*mean)[as_index(c)], is = (*invstd)[as_index(c)];
      const float gm = gamma[c], bt = beta[c];
      const std::size_t off = (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[off + i] = gm * (x[off + i] - mu) * is + bt;
    }
  }

  ImplPtr X = input.impl(), G = gamma.impl(), Bt = beta.impl(), O = out.impl();
  const bool train = mode == Mode::Train;
  Tape::record({&input, &gamma, &beta}, out, [X, G, Bt, O, mean, invstd, batch, ch, plane, count, train] {
    const float* xd = X->data.data();
    const float* gy = O->grad.data();
    const float inv_n = 1.0f / static_cast<float>(count);
    for (std::size_t c = 0; c < ch; ++c) {
      const float mu = (*mean)[as_index(c)], is = (*invstd)[as_index(c)];
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const float xhat = (xd[off + i] - mu) * is;
          sum_g += gy[off + i];
          sum_gx += gy[off + i] * xhat;
        }
      }
      if (G->requires_grad) ensure_grad(*G)[as_index(c)] += static_cast<float>(sum_gx);
      if (Bt->requires_grad) ensure_grad(*Bt)[as_index(c)] += static_cast<float>(sum_g);
      if (!X->requires_grad) continue;
      auto& gx = ensure_grad(*X);
      const float gm = G->data[as_index(c)];
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (train) {
            const float xhat = (xd[off + i] - mu) * is;
            gx[as_index(off + i)] +=
                gm * is * (gy[off + i] - inv_n * static_cast<float>(sum_g) - xhat * inv_n * static_cast<float>(sum_gx));
          } else {
            gx[as_index(off + i)] += gm * is * gy[off + i];
          }
        }
      }
    }
  });
  return out;
}

Tensor maxpool2(const Tensor& input) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4),
          "maxpool2: input must be C x H x W or B x C x H x W");
  const std::size_t r = input.rank();
  const std::size_t h = input.dim(r - 2), w = input.dim(r - 1);
  require(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial extent in " + to_string(input.shape()));
  Shape shape = input.shape();
  shape[r - 2] = h / 2;
  shape[r - 1] = w / 2;
  Tensor out(shape);
  const std::size_t planes = input.numel() / (h * w);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  kernels::maxpool2(input.ptr(), planes, h, w, out.ptr(), argmax->data());
  ImplPtr X = input.impl(), O = out.impl();
  Tape::record({&input}, out, [X, O, argmax] {
    auto& gx = ensure_grad(*X);
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += O->grad[as_index(i)];
  });
  return out;
}

Tensor global_avgpool(const Tensor& input) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4),
          "global_avgpool: input must be C x H x W or B x C x H x W");
  const std::size_t r = input.rank();
  const std::size_t plane = input.dim(r - 1) * input.dim(r - 2);
  const std::size_t rows = input.numel() / plane;
  Tensor out(r == 4 ? Shape{input.dim(0), input.dim(1)} : Shape{input.dim(0)});
  ConstMapMatf x(input.ptr(), as_index(rows), as_index(plane));
  out.vec() = x.rowwise().mean();
  ImplPtr X = input.impl(), O = out.impl();
  const float inv = 1.0f / static_cast<float>(plane);
  Tape::record({&input}, out, [X, O, rows, plane, inv] {
    grad_mat(*X, as_index(rows), as_index(plane)).colwise() += O->grad * inv;
  });
  return out;
}

Tensor map_to_rows(const Tensor& input) {
  require(input.defined() && (input.rank() == 3 || input.rank() == 4),
          "map_to_rows: input must be C x H x W or B x C x H x W");
  const std::size_t r = input.rank();
  const std::size_t batch = r == 4 ? input.dim(0) : 1;
  const std::size_t c = input.dim(r - 3);
  const std::size_t plane = input.dim(r - 1) * input.dim(r - 2);
  Tensor out({batch * plane, c});
  for (std::size_t b = 0; b < batch; ++b)
    out.mat().middleRows(as_index(b * plane), as_index(plane)) =
        ConstMapMatf(input.ptr() + b * c * plane, as_index(c), as_index(plane)).transpose();
  ImplPtr X = input.impl(), O = out.impl();
  Tape::record({&input}, out, [X, O, batch, c, plane] {
    auto g = out_grad(*O, as_index(batch * plane), as_index(c));
    auto gx = grad_mat(*X, as_index(batch * c), as_index(plane));
    for (std::size_t b = 0; b < batch; ++b)
      gx.middleRows(as_index(b * c), as_index(c)) += g.middleRows(as_index(b * plane), as_index(plane)).transpose();
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(labels.size() == n, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                  std::to_string(n) + " rows");
  auto prob = std::make_shared<MatrixRMf>(logits.mat());
  kernels::softmax_rows(*prob);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ArgumentError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(c) + ")");
    // log-sum-exp form keeps the loss finite when a probability underflows.
    const auto row = logits.mat().row(as_index(i));
    const float mx = row.maxCoeff();
    const double lse = mx + std::log(static_cast<double>((row.array() - mx).exp().sum()));
    loss += lse - row[labels[i]];
  }
  Tensor out(Shape{});
  out[0] = static_cast<float>(loss / static_cast<double>(n));
  std::vector<int> lab(labels.begin(), labels.end());
  ImplPtr X = logits.impl(), O = out.impl();
  Tape::record({&logits}, out, [X, O, prob, lab, n, c] {
    MatrixRMf g = *prob;
    for (std::size_t i = 0; i < n; ++i) g(as_index(i), lab[i]) -= 1.0f;
    grad_mat(*X, as_index(n), as_index(c)) += g * (O->grad[0] / static_cast<float>(n));
  });
  return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require(prediction.numel() == target.numel(), "mse: sizes differ " + to_string(prediction.shape()) + " vs " +
                                                    to_string(target.shape()));
  require(prediction.numel() > 0, "mse: empty input");
  Tensor out(Shape{});
  const float inv = 1.0f / static_cast<float>(prediction.numel());
  out[0] = (prediction.vec() - target.vec()).squaredNorm() * inv;
  ImplPtr P = prediction.impl(), T = target.impl(), O = out.impl();
  Tape::record({&prediction, &target}, out, [P, T, O, inv] {
    const float g = O->grad[0];
    if (P->requires_grad) ensure_grad(*P) += (2.0f * inv * g) * (P->data - T->data);
    if (T->requires_grad) ensure_grad(*T) -= (2.0f * inv * g) * (P->data - T->data);
  });
  return out;
}

namespace {

void require_groups(const Tensor& x, std::size_t group, const char* op) {
  require_rank(x, 2, op);
  require(group > 0 && x.dim(0) % group == 0,
          std::string(op) + ": " + std::to_string(x.dim(0)) + " rows are not a multiple of group " +
              std::to_string(group));
}

}  // namespace

Tensor pair_sum(const Tensor& a, const Tensor& b, std::size_t group) {
  require_groups(a, group, "pair_sum");
  require_same(a, b, "pair_sum");
  const std::size_t graphs = a.dim(0) / group, d = a.dim(1);
  Tensor out({graphs * group * group, d});
  auto A = a.mat();
  auto B = b.mat();
  auto Out = out.mat();
  for (std::size_t g = 0; g < graphs; ++g)
    for (std::size_t m = 0; m < group; ++m)
      for (std::size_t n = 0; n < group; ++n)
        Out.row(as_index((g * group + m) * group + n)) = A.row(as_index(g * group + m)) + B.row(as_index(g * group + n));
  ImplPtr Ai = a.impl(), Bi = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [Ai, Bi, O, graphs, group, d] {
    auto g = out_grad(*O, as_index(graphs * group * group), as_index(d));
    const Index rows = as_index(graphs * group);
    for (std::size_t gi = 0; gi < graphs; ++gi) {
      for (std::size_t m = 0; m < group; ++m) {
        auto block = g.middleRows(as_index((gi * group + m) * group), as_index(group));
        if (Ai->requires_grad) grad_mat(*Ai, rows, as_index(d)).row(as_index(gi * group + m)) += block.colwise().sum();
        if (Bi->requires_grad)
          grad_mat(*Bi, rows, as_index(d)).middleRows(as_index(gi * group), as_index(group)) += block;
      }
    }
  });
  return out;
}

Tensor group_sum(const Tensor& x, std::size_t group) {
  require_groups(x, group, "group_sum");
  const std::size_t graphs = x.dim(0) / group, d = x.dim(1);
  Tensor out({graphs, d});
  auto X = x.mat();
  // Accumulated in double so the result does not depend on row order.
  for (std::size_t g = 0; g < graphs; ++g)
    out.mat().row(as_index(g)) =
        X.middleRows(as_index(g * group), as_index(group)).cast<double>().colwise().sum().cast<float>();
  ImplPtr Xi = x.impl(), O = out.impl();
  Tape::record({&x}, out, [Xi, O, graphs, group, d] {
    auto gx = grad_mat(*Xi, as_index(graphs * group), as_index(d));
    auto g = out_grad(*O, as_index(graphs), as_index(d));
    for (std::size_t gi = 0; gi < graphs; ++gi)
      gx.middleRows(as_index(gi * group), as_index(group)).rowwise() += g.row(as_index(gi));
  });
  return out;
}

Tensor group_mean(const Tensor& x, std::size_t group) {
  return affine(group_sum(x, group), 1.0f / static_cast<float>(group), 0.0f);
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  require_rank(x, 2, "repeat_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({n * times, d});
  for (std::size_t i = 0; i < n; ++i)
    out.mat().middleRows(as_index(i * times), as_index(times)).rowwise() = x.mat().row(as_index(i));
  ImplPtr Xi = x.impl(), O = out.impl();
  Tape::record({&x}, out, [Xi, O, n, d, times] {
    auto g = out_grad(*O, as_index(n * times), as_index(d));
    auto gx = grad_mat(*Xi, as_index(n), as_index(d));
    for (std::size_t i = 0; i < n; ++i) gx.row(as_index(i)) += g.middleRows(as_index(i * times), as_index(times)).colwise().sum();
  });
  return out;
}

Tensor tile_rows(const Tensor& x, std::size_t times) {
  require_rank(x, 2, "tile_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out({n * times, d});
  for (std::size_t t = 0; t < times; ++t) out.mat().middleRows(as_index(t * n), as_index(n)) = x.mat();
  ImplPtr Xi = x.impl(), O = out.impl();
  Tape::record({&x}, out, [Xi, O, n, d, times] {
    auto g = out_grad(*O, as_index(n * times), as_index(d));
    auto gx = grad_mat(*Xi, as_index(n), as_index(d));
    for (std::size_t t = 0; t < times; ++t) gx += g.middleRows(as_index(t * n), as_index(n));
  });
  return out;
}

Tensor gather_groups(const Tensor& x, std::span<const std::size_t> index, std::size_t group) {
  require_groups(x, group, "gather_groups");
  const std::size_t graphs = x.dim(0) / group, d = x.dim(1);
  for (auto i : index)
    require(i < graphs, "gather_groups: index " + std::to_string(i) + " out of range " + std::to_string(graphs));
  Tensor out({index.size() * group, d});
  for (std::size_t p = 0; p < index.size(); ++p)
    out.mat().middleRows(as_index(p * group), as_index(group)) =
        x.mat().middleRows(as_index(index[p] * group), as_index(group));
  std::vector<std::size_t> idx(index.begin(), index.end());
  ImplPtr Xi = x.impl(), O = out.impl();
  Tape::record({&x}, out, [Xi, O, idx, graphs, group, d] {
    auto g = out_grad(*O, as_index(idx.size() * group), as_index(d));
    auto gx = grad_mat(*Xi, as_index(graphs * group), as_index(d));
    for (std::size_t p = 0; p < idx.size(); ++p)
      gx.middleRows(as_index(idx[p] * group), as_index(group)) += g.middleRows(as_index(p * group), as_index(group));
  });
  return out;
}

Tensor mul_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "mul_rows");
  require(s.numel() == x.dim(0), "mul_rows: " + std::to_string(s.numel()) + " scales for " +
                                     std::to_string(x.dim(0)) + " rows");
  const Index n = as_index(x.dim(0)), d = as_index(x.dim(1));
  Tensor out(x.shape());
  out.mat() = x.mat().array().colwise() * s.vec().array();
  ImplPtr Xi = x.impl(), Si = s.impl(), O = out.impl();
  Tape::record({&x, &s}, out, [Xi, Si, O, n, d] {
    auto g = out_grad(*O, n, d);
    if (Xi->requires_grad) grad_mat(*Xi, n, d).array() += g.array().colwise() * Si->data.array();
    if (Si->requires_grad) ensure_grad(*Si) += (g.array() * data_mat(*Xi, n, d).array()).rowwise().sum().matrix();
  });
  return out;
}

std::pair<Tensor, Tensor> cross_attention(const Tensor& a, const Tensor& b, std::size_t group) {
  require_groups(a, group, "cross_attention");
  require_groups(b, group, "cross_attention");
  if (a.shape() != b.shape())
    throw StructureError("cross_attention: graph blocks differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t pairs = a.dim(0) / group;
  const Index k = as_index(group), d = as_index(a.dim(1));
  auto row_w = std::make_shared<std::vector<MatrixRMf>>(pairs);
  auto col_w = std::make_shared<std::vector<MatrixRMf>>(pairs);
  Tensor first(a.shape()), second(a.shape());
  for (std::size_t p = 0; p < pairs; ++p) {
    auto ap = a.mat().middleRows(as_index(p) * k, k);
    auto bp = b.mat().middleRows(as_index(p) * k, k);
    MatrixRMf logits = ap * bp.transpose();
    MatrixRMf wr = logits, wc = logits;
    kernels::softmax_rows(wr);
    kernels::softmax_cols(wc);
    first.mat().middleRows(as_index(p) * k, k).noalias() = wr * bp;
    second.mat().middleRows(as_index(p) * k, k).noalias() = wc.transpose() * ap;
    (*row_w)[p] = std::move(wr);
    (*col_w)[p] = std::move(wc);
  }
  ImplPtr Ai = a.impl(), Bi = b.impl(), F = first.impl(), S = second.impl();
  const Index rows = as_index(pairs) * k;
  // Logit adjoint dA shared by both outputs: da += dA b, db += dA^T a.
  auto push_logits = [Ai, Bi, k, d, rows](std::size_t p, const MatrixRMf& dlogits) {
    auto ap = data_mat(*Ai, rows, d).middleRows(as_index(p) * k, k);
    auto bp = data_mat(*Bi, rows, d).middleRows(as_index(p) * k, k);
    if (Ai->requires_grad) grad_mat(*Ai, rows, d).middleRows(as_index(p) * k, k).noalias() += dlogits * bp;
    if (Bi->requires_grad) grad_mat(*Bi, rows, d).middleRows(as_index(p) * k, k).noalias() += dlogits.transpose() * ap;
  };
  Tape::record({&a, &b}, first, [Ai, Bi, F, row_w, pairs, k, d, rows, push_logits] {
    auto g = out_grad(*F, rows, d);
    for (std::size_t p = 0; p < pairs; ++p) {
      const MatrixRMf& wr = (*row_w)[p];
      auto gp = g.middleRows(as_index(p) * k, k);
      auto bp = data_mat(*Bi, rows, d).middleRows(as_index(p) * k, k);
      if (Bi->requires_grad) grad_mat(*Bi, rows, d).middleRows(as_index(p) * k, k).noalias() += wr.transpose() * gp;
      MatrixRMf dwr = gp * bp.transpose();
      push_logits(p, kernels::softmax_rows_backward<float>(wr, dwr));
    }
  });
  Tape::record({&a, &b}, second, [Ai, Bi, S, col_w, pairs, k, d, rows, push_logits] {
    auto g = out_grad(*S, rows, d);
    for (std::size_t p = 0; p < pairs; ++p) {
      const MatrixRMf& wc = (*col_w)[p];
      auto gp = g.middleRows(as_index(p) * k, k);
      auto ap = data_mat(*Ai, rows, d).middleRows(as_index(p) * k, k);
      if (Ai->requires_grad) grad_mat(*Ai, rows, d).middleRows(as_index(p) * k, k).noalias() += wc * gp;
      // second = wc^T a, so d(wc) = a g^T; column softmax is row softmax of the transpose.
      MatrixRMf dwc_t = gp * ap.transpose();
      MatrixRMf wc_t = wc.transpose();
      MatrixRMf dlogits = kernels::softmax_rows_backward<float>(wc_t, dwc_t).transpose();
      push_logits(p, dlogits);
    }
  });
  return {first, second};
}

Tensor row_cosine(const Tensor& a, const Tensor& b, std::size_t* degenerate) {
  require_rank(a, 2, "row_cosine");
  require_same(a, b, "row_cosine");
  const Index n = as_index(a.dim(0)), d = as_index(a.dim(1));
  Tensor out({a.dim(0)});
  auto na = std::make_shared<Eigen::VectorXf>(a.mat().rowwise().norm());
  auto nb = std::make_shared<Eigen::VectorXf>(b.mat().rowwise().norm());
  std::size_t bad = 0;
  for (Index i = 0; i < n; ++i) {
    if ((*na)[i] == 0.0f || (*nb)[i] == 0.0f) {
      out[static_cast<std::size_t>(i)] = 0.0f;
      ++bad;
      continue;
    }
    out[static_cast<std::size_t>(i)] = a.mat().row(i).dot(b.mat().row(i)) / ((*na)[i] * (*nb)[i]);
  }
  if (degenerate) *degenerate = bad;
  ImplPtr Ai = a.impl(), Bi = b.impl(), O = out.impl();
  Tape::record({&a, &b}, out, [Ai, Bi, O, na, nb, n, d] {
    auto A = data_mat(*Ai, n, d);
    auto B = data_mat(*Bi, n, d);
    for (Index i = 0; i < n; ++i) {
      const float la = (*na)[i], lb = (*nb)[i];
      if (la == 0.0f || lb == 0.0f) continue;
      const float g = O->grad[i], c = O->data[i];
      if (Ai->requires_grad)
        grad_mat(*Ai, n, d).row(i) += g * (B.row(i) / (la * lb) - c * A.row(i) / (la * la));
      if (Bi->requires_grad)
        grad_mat(*Bi, n, d).row(i) += g * (A.row(i) / (la * lb) - c * B.row(i) / (lb * lb));
    }
  });
  return out;
}

}  // namespace sgm
