#pragma once

// Episode sampling, meta-training of the graph modules on frozen features, and
// paired-episode evaluation of graph matching and distance baselines.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgm/backbone.hpp"
#include "sgm/checkpoint.hpp"
#include "sgm/graph_matching.hpp"
#include "sgm/optim.hpp"
#include "sgm/scene_graph.hpp"
#include "sgm/synthscene.hpp"

namespace sgm {

// One N-way K-shot task. Sample ids index Dataset::samples. Support is
// class-major (support[c*K + j]); query labels are episode-local class indices.
struct Episode {
  int way = 0;
  int shot = 0;
  int queries = 0;
  std::vector<int> classes;  // dataset class ids, episode order
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;

  bool operator==(const Episode&) const = default;
};

// Uniform classes and samples without replacement. Throws CapacityError.
Episode sample_episode(const SplitView& split, int way, int shot, int queries, std::mt19937_64& rng);

// Frozen spatial maps and pooled features for a set of samples.
class FeatureBank {
 public:
  static FeatureBank build(const Conv5Backbone& backbone, const Dataset& dataset, std::span<const Split> splits,
                           std::size_t batch = 64);
  // Bank over explicit maps; sample ids are positions 0..n-1.
  static FeatureBank from_maps(const Tensor& maps);

  bool contains(std::size_t sample) const;
  std::size_t slot(std::size_t sample) const;  // throws ArgumentError when absent
  std::size_t size() const { return maps_.defined() ? maps_.dim(0) : 0; }
  const Tensor& maps() const { return maps_; }  // n x C x h x w
  // Copies the maps of `samples` into a batch.
  Tensor gather(std::span<const std::size_t> samples) const;
  Tensor map(std::size_t sample) const;
  // Spatially averaged feature (C).
  Eigen::VectorXf pooled(std::size_t sample) const;

 private:
  Tensor maps_;
  std::vector<long> slot_;
};

// Scores every (query, class) pair of an episode: [N*Q x N].
class EpisodeScorer {
 public:
  virtual ~EpisodeScorer() = default;
  virtual MatrixRMf score(const Episode& episode) = 0;
  virtual std::string name() const = 0;
};

enum class Metric { Cosine, Euclidean };
std::string to_string(Metric metric);
Metric parse_metric(const std::string& text);

// Mean pooled feature per class; cosine similarity or negative squared distance.
class PrototypeScorer : public EpisodeScorer {
 public:
  PrototypeScorer(const FeatureBank& bank, Metric metric) : bank_(bank), metric_(metric) {}
  MatrixRMf score(const Episode& episode) override;
  std::string name() const override { return to_string(metric_); }

 private:
  const FeatureBank& bank_;
  Metric metric_;
};

// Scene-graph matching. Graph encodings of every bank sample are computed once.
class GraphMatchScorer : public EpisodeScorer {
 public:
  GraphMatchScorer(const FeatureBank& bank, const GcmParams& gcm, const GmmParams& gmm);
  MatrixRMf score(const Episode& episode) override;
  std::string name() const override { return "sgmnet"; }
  const MatchDiagnostics& diagnostics() const { return diagnostics_; }

 private:
  const FeatureBank& bank_;
  const GcmParams& gcm_;
  const GmmParams& gmm_;
  GraphEncoding cache_;
  MatchDiagnostics diagnostics_;
};

// Every class gets the same score.
class ConstantScorer : public EpisodeScorer {
 public:
  MatrixRMf score(const Episode& episode) override;
  std::string name() const override { return "constant"; }
};

struct EvalReport {
  double mean_accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 * sigma / sqrt(E), sigma the population deviation
  std::size_t episodes = 0;
  std::size_t tie_count = 0;  // queries whose best score was shared
  std::vector<double> accuracies;
};

// Half-width 1.96 * sigma / sqrt(E).
double ci95_half_width(std::span<const double> accuracies);

// Lowest index among the maxima; sets *tied when the maximum is shared.
int argmax_lowest(std::span<const float> scores, bool* tied = nullptr);

// Draws `episodes` episodes from mt19937_64(seed); every scorer sees the same
// sequence for the same arguments.
EvalReport evaluate(EpisodeScorer& scorer, const SplitView& split, int way, int shot, int queries, int episodes,
                    std::uint64_t seed);

struct MetaTrainOptions {
  int way = 5;
  int shot = 1;
  int queries = 6;
  int epochs = 8;
  int episodes_per_epoch = 60;
  int val_episodes = 100;
  int val_queries = 15;
  float learning_rate = 1e-4f;
  float weight_decay = 5e-4f;
  int patience = 0;  // epochs without improvement before stopping; 0 = never
  std::uint64_t seed = 0;
};

struct MetaEpoch {
  int epoch = 0;
  double mean_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct MatcherModel {
  GcmParams gcm;
  GmmParams gmm;

  static MatcherModel init(const GraphDims& dims, const Ablation& ablation, std::uint64_t seed);
  TensorList parameters() const;
};

struct MetaTrainResult {
  MatcherModel model;  // best validation epoch
  std::vector<MetaEpoch> epochs;
  int best_epoch = -1;
  double best_val_accuracy = -1.0;
};

// One episode of MSE training; returns the loss. Throws NumericError on a
// non-finite loss, naming `step` and `episode_seed`.
double meta_train_step(MatcherModel& model, OptimizerState& optimizer, const FeatureBank& bank,
                       const Episode& episode, std::size_t step, std::uint64_t episode_seed);

// Per-pair targets of an episode in score order: 1 where the class matches.
std::vector<float> episode_targets(const Episode& episode);

MetaTrainResult meta_train(const FeatureBank& train_bank, const SplitView& train_split, const FeatureBank& val_bank,
                           const SplitView& val_split, const GraphDims& dims, const Ablation& ablation,
                           const MetaTrainOptions& options,
                           const std::function<void(const MetaEpoch&)>& on_epoch = {});

Checkpoint matcher_checkpoint(const MatcherModel& model);
MatcherModel load_matcher(const Checkpoint& ckpt);

}  // namespace sgm
