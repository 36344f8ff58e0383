#include "sgm/backbone.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "sgm/errors.hpp"
#include "sgm/optim.hpp"

namespace sgm {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng, float gain = 2.0f) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(gain / static_cast<float>(fan_in)), true);
}

std::string block_name(std::size_t i) { return "backbone.block" + std::to_string(i); }

}  // namespace

Conv5Backbone Conv5Backbone::init(std::mt19937_64& rng, const std::array<std::size_t, kBlocks + 1>& channels) {
  Conv5Backbone net;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const std::size_t cin = channels[i], cout = channels[i + 1];
    auto& b = net.blocks[i];
    b.kernel = he_normal({cout, cin, 3, 3}, cin * 9, rng);
    b.gamma = Tensor::full({cout}, 1.0f, true);
    b.beta = Tensor::zeros({cout}, true);
    b.stats = BatchNormStats::init(cout);
  }
  return net;
}

Tensor Conv5Backbone::forward(const Tensor& images, Mode mode) {
  Tensor x = images;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    auto& b = blocks[i];
    x = relu(batchnorm2d(conv2d(x, b.kernel), b.gamma, b.beta, b.stats, mode));
    if (i + 1 < kBlocks) x = maxpool2(x);
  }
  return x;
}

Tensor Conv5Backbone::forward_frozen(const Tensor& images) const {
  NoGradGuard guard;
  Tensor x = images;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const auto& b = blocks[i];
    BatchNormStats stats = b.stats;  // shares the buffers; eval mode only reads them
    x = relu(batchnorm2d(conv2d(x, b.kernel), b.gamma, b.beta, stats, Mode::Eval));
    if (i + 1 < kBlocks) x = maxpool2(x);
  }
  return x;
}

TensorList Conv5Backbone::parameters() const {
  TensorList out;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const auto& b = blocks[i];
    out.push_back({block_name(i) + ".kernel", b.kernel});
    out.push_back({block_name(i) + ".gamma", b.gamma});
    out.push_back({block_name(i) + ".beta", b.beta});
  }
  return out;
}

TensorList Conv5Backbone::state() const {
  TensorList out;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const auto& b = blocks[i];
    out.push_back({block_name(i) + ".kernel", b.kernel});
    out.push_back({block_name(i) + ".gamma", b.gamma});
    out.push_back({block_name(i) + ".beta", b.beta});
    out.push_back({block_name(i) + ".running_mean", b.stats.running_mean});
    out.push_back({block_name(i) + ".running_var", b.stats.running_var});
  }
  return out;
}

PretrainHeads PretrainHeads::init(std::size_t channels, std::size_t classes, std::mt19937_64& rng) {
  // Small weights give near-uniform logits at the start of training.
  PretrainHeads h;
  h.class_weight = Tensor::randn({classes, channels}, rng, 0.01f, true);
  h.class_bias = Tensor::zeros({classes}, true);
  h.rotation_weight = Tensor::randn({4, channels}, rng, 0.01f, true);
  h.rotation_bias = Tensor::zeros({4}, true);
  return h;
}

TensorList PretrainHeads::parameters() const {
  return {{"heads.class.weight", class_weight},
          {"heads.class.bias", class_bias},
          {"heads.rotation.weight", rotation_weight},
          {"heads.rotation.bias", rotation_bias}};
}

Tensor extract_spatial(const Conv5Backbone& backbone, const Tensor& image) {
  if (!image.defined() || (image.rank() != 3 && image.rank() != 4))
    throw DimensionError("extract_spatial: expected 3 x H x W or B x 3 x H x W");
  const std::size_t r = image.rank();
  const std::size_t c = image.dim(r - 3), h = image.dim(r - 2), w = image.dim(r - 1);
  if (c != 3 || h == 0 || w == 0 || h % 16 || w % 16)
    throw DimensionError("extract_spatial: input " + to_string(image.shape()) +
                         " needs 3 channels and extents divisible by 16");
  if (r == 4) return backbone.forward_frozen(image);
  Tensor batch = reshape(image, {1, c, h, w});
  Tensor out = backbone.forward_frozen(batch);
  return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
}

Tensor rot90(const Tensor& image, int k) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2))
    throw DimensionError("rot90: expected a square C x H x W image, got " + to_string(image.shape()));
  k = ((k % 4) + 4) % 4;
  const std::size_t c = image.dim(0), n = image.dim(1);
  Tensor out({c, n, n});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* src = image.ptr() + ch * n * n;
    float* dst = out.ptr() + ch * n * n;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        std::size_t sy = y, sx = x;
        // Counter-clockwise quarter turns: dst(y, x) = src(x, n-1-y).
        for (int t = 0; t < k; ++t) {
          const std::size_t ny = sx, nx = n - 1 - sy;
          sy = ny;
          sx = nx;
        }
        dst[y * n + x] = src[sy * n + sx];
      }
  }
  return out;
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ArgumentError("stack_images: no images");
  const Shape& s = images.front().shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t n = images.front().numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s)
      throw DimensionError("stack_images: image " + std::to_string(i) + " has shape " +
                           to_string(images[i].shape()) + ", expected " + to_string(s));
    std::copy_n(images[i].ptr(), n, out.ptr() + i * n);
  }
  return out;
}

float pretrain_learning_rate(float base, int epoch, int epochs) {
  float lr = base;
  for (double frac : {0.6, 0.8, 0.9})
    if (epoch >= static_cast<int>(std::lround(frac * epochs))) lr *= 0.1f;
  return lr;
}

PretrainResult pretrain(std::span<const Tensor> images, std::span<const int> labels, std::size_t classes,
                        const PretrainOptions& options, const std::function<void(const PretrainEpoch&)>& on_epoch) {
  if (images.empty()) throw ArgumentError("pretrain: empty training set");
  if (images.size() != labels.size()) throw ArgumentError("pretrain: image and label counts differ");
  if (options.batch < 1 || options.epochs < 0) throw ArgumentError("pretrain: batch must be positive");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DataError("pretrain: sample " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                      " outside [0, " + std::to_string(classes) + ")");

  std::mt19937_64 rng(options.seed);
  PretrainResult res;
  res.backbone = Conv5Backbone::init(rng, options.channels);
  res.heads = PretrainHeads::init(res.backbone.out_channels(), classes, rng);
  const bool rotate = options.rotation_weight > 0.0f;

  TensorList params = res.backbone.parameters();
  for (auto& p : res.heads.parameters())
    if (rotate || p.name.rfind("heads.class", 0) == 0) params.push_back(p);
  auto opt = OptimizerState::sgd(options.learning_rate, options.momentum, options.weight_decay);

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(options.batch);

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.learning_rate = pretrain_learning_rate(options.learning_rate, epoch, options.epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<Tensor> batch;
      std::vector<int> cls, rot;
      for (std::size_t j = 0; j < n; ++j) {
        batch.push_back(images[order[start + j]]);
        cls.push_back(labels[order[start + j]]);
        rot.push_back(0);
      }
      if (rotate) {
        std::uniform_int_distribution<int> quarter(0, 3);
        for (std::size_t j = 0; j < n; ++j) {
          const int k = quarter(rng);
          batch.push_back(rot90(images[order[start + j]], k));
          cls.push_back(labels[order[start + j]]);
          rot.push_back(k);
        }
      }

      Tape tape;
      Tensor pooled = global_avgpool(res.backbone.forward(stack_images(batch), Mode::Train));
      Tensor logits = linear(pooled, res.heads.class_weight, res.heads.class_bias);
      Tensor class_loss = cross_entropy(logits, cls);
      Tensor total = class_loss;
      PretrainStep step{epoch, opt.learning_rate, 0.0, class_loss.item(), 0.0};
      if (rotate) {
        Tensor rot_loss =
            cross_entropy(linear(pooled, res.heads.rotation_weight, res.heads.rotation_bias), rot);
        total = add(class_loss, affine(rot_loss, options.rotation_weight, 0.0f));
        step.rotation_loss = rot_loss.item();
      }
      step.total_loss = total.item();
      if (!std::isfinite(step.total_loss))
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      res.steps.push_back(step);

      const auto lm = logits.mat();
      for (std::size_t j = 0; j < n; ++j) {
        Eigen::Index arg;
        lm.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
        correct += static_cast<int>(arg) == cls[j];
      }
      seen += n;

      tape.backward(total);
      optimizer_step(params, opt);
      zero_grad(params);
      loss_sum += step.total_loss;
      ++steps;
    }
    PretrainEpoch log;
    log.epoch = epoch;
    log.learning_rate = opt.learning_rate;
    log.mean_loss = loss_sum / static_cast<double>(steps);
    log.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  // Parameters are frozen from here on.
  for (auto& p : res.backbone.parameters()) p.tensor.clear_grad();
  for (auto& p : res.heads.parameters()) p.tensor.clear_grad();
  return res;
}

double class_accuracy(const Conv5Backbone& backbone, const PretrainHeads& heads, std::span<const Tensor> images,
                      std::span<const int> labels) {
  if (images.empty()) throw ArgumentError("class_accuracy: empty split");
  if (images.size() != labels.size()) throw ArgumentError("class_accuracy: image and label counts differ");
  NoGradGuard guard;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    Tensor pooled = global_avgpool(backbone.forward_frozen(stack_images(images.subspan(start, n))));
    Tensor logits = linear(pooled, heads.class_weight, heads.class_bias);
    const auto lm = logits.mat();
    for (std::size_t j = 0; j < n; ++j) {
      Eigen::Index arg;
      lm.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
      correct += static_cast<int>(arg) == labels[start + j];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

Checkpoint backbone_checkpoint(const Conv5Backbone& backbone, const PretrainHeads& heads) {
  TensorList all = backbone.state();
  for (auto& p : heads.parameters()) all.push_back(p);
  return Checkpoint(std::move(all));
}

namespace {

Tensor fetch(const Checkpoint& ckpt, const std::string& name) {
  auto t = ckpt.find(name);
  if (!t) throw DataError("checkpoint is missing tensor '" + name + "'");
  return t->clone();
}

}  // namespace

Conv5Backbone load_backbone(const Checkpoint& ckpt) {
  Conv5Backbone net;
  for (std::size_t i = 0; i < Conv5Backbone::kBlocks; ++i) {
    auto& b = net.blocks[i];
    const std::string p = block_name(i);
    b.kernel = fetch(ckpt, p + ".kernel");
    if (b.kernel.rank() != 4) throw DataError("checkpoint tensor '" + p + ".kernel' is not rank 4");
    const std::size_t c = b.kernel.dim(0);
    b.gamma = ckpt.get(p + ".gamma", {c}).clone();
    b.beta = ckpt.get(p + ".beta", {c}).clone();
    b.stats = BatchNormStats::init(c);
    b.stats.running_mean = ckpt.get(p + ".running_mean", {c}).clone();
    b.stats.running_var = ckpt.get(p + ".running_var", {c}).clone();
    if (i > 0 && b.kernel.dim(1) != net.blocks[i - 1].kernel.dim(0))
      throw DataError("checkpoint block " + std::to_string(i) + " input channels do not chain");
  }
  return net;
}

PretrainHeads load_heads(const Checkpoint& ckpt) {
  PretrainHeads h;
  h.class_weight = fetch(ckpt, "heads.class.weight");
  if (h.class_weight.rank() != 2) throw DataError("checkpoint class head is not a matrix");
  const std::size_t classes = h.class_weight.dim(0), c = h.class_weight.dim(1);
  h.class_bias = ckpt.get("heads.class.bias", {classes}).clone();
  h.rotation_weight = ckpt.get("heads.rotation.weight", {4, c}).clone();
  h.rotation_bias = ckpt.get("heads.rotation.bias", {4}).clone();
  return h;
}

}  // namespace sgm
