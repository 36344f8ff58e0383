#pragma once

// Conv-5 feature extractor, its pre-training heads, and rotation-augmented
// supervised pre-training.

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "sgm/checkpoint.hpp"
#include "sgm/ops.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

struct ConvBlock {
  Tensor kernel;  // C_out x C_in x 3 x 3, no bias (batchnorm supplies the shift)
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;
};

// Five conv-bn-relu blocks; blocks 0..3 are followed by 2x2 max pooling.
struct Conv5Backbone {
  static constexpr std::size_t kBlocks = 5;
  static constexpr std::array<std::size_t, kBlocks + 1> kDefaultChannels{3, 64, 64, 128, 128, 256};

  std::array<ConvBlock, kBlocks> blocks;

  static Conv5Backbone init(std::mt19937_64& rng,
                            const std::array<std::size_t, kBlocks + 1>& channels = kDefaultChannels);

  std::size_t out_channels() const { return blocks.back().kernel.dim(0); }

  // B x 3 x H x W -> B x C x H/16 x W/16. Train mode updates running statistics.
  Tensor forward(const Tensor& images, Mode mode);
  // Eval-mode forward that never records on a tape and never mutates state.
  Tensor forward_frozen(const Tensor& images) const;

  // Learnable tensors (kernels, gammas, betas).
  TensorList parameters() const;
  // Learnable tensors plus running statistics.
  TensorList state() const;
};

struct PretrainHeads {
  Tensor class_weight;  // classes x C
  Tensor class_bias;
  Tensor rotation_weight;  // 4 x C
  Tensor rotation_bias;

  static PretrainHeads init(std::size_t channels, std::size_t classes, std::mt19937_64& rng);
  std::size_t classes() const { return class_weight.dim(0); }
  TensorList parameters() const;
};

// Spatial representation of one 3 x H x W image (or a batch), eval mode, no
// gradient. H and W must be positive multiples of 16.
Tensor extract_spatial(const Conv5Backbone& backbone, const Tensor& image);

// Rotates a C x H x W image by k quarter turns counter-clockwise.
Tensor rot90(const Tensor& image, int k);

struct PretrainOptions {
  int epochs = 8;
  int batch = 32;
  float learning_rate = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  // 0 disables the rotation task and the rotated copies.
  float rotation_weight = 1.0f;
  std::uint64_t seed = 0;
  std::array<std::size_t, Conv5Backbone::kBlocks + 1> channels = Conv5Backbone::kDefaultChannels;
};

struct PretrainStep {
  int epoch = 0;
  float learning_rate = 0.0f;
  double total_loss = 0.0;
  double class_loss = 0.0;
  double rotation_loss = 0.0;
};

struct PretrainEpoch {
  int epoch = 0;
  float learning_rate = 0.0f;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double seconds = 0.0;
};

struct PretrainResult {
  Conv5Backbone backbone;
  PretrainHeads heads;
  std::vector<PretrainStep> steps;
  std::vector<PretrainEpoch> epochs;
};

// Learning rate for `epoch`: decayed by 0.1 after 60%, 80% and 90% of the run.
float pretrain_learning_rate(float base, int epoch, int epochs);

// Labels must lie in [0, classes); otherwise DataError naming the sample index.
PretrainResult pretrain(std::span<const Tensor> images, std::span<const int> labels, std::size_t classes,
                        const PretrainOptions& options,
                        const std::function<void(const PretrainEpoch&)>& on_epoch = {});

// Argmax class accuracy in eval mode. Throws ArgumentError for an empty set.
double class_accuracy(const Conv5Backbone& backbone, const PretrainHeads& heads, std::span<const Tensor> images,
                      std::span<const int> labels);

Checkpoint backbone_checkpoint(const Conv5Backbone& backbone, const PretrainHeads& heads);
// Shapes are read from the archive; DataError when a tensor is missing.
Conv5Backbone load_backbone(const Checkpoint& ckpt);
PretrainHeads load_heads(const Checkpoint& ckpt);

// Stacks C x H x W tensors into B x C x H x W.
Tensor stack_images(std::span<const Tensor> images);

}  // namespace sgm
