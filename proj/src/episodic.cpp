#include "sgm/episodic.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "sgm/errors.hpp"
#include "sgm/kernels.hpp"

namespace sgm {

// ---------------------------------------------------------------------------
// Episodes

namespace {

// First `take` entries of `items` become a uniform sample without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& items, std::size_t take, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
}

}  // namespace

Episode sample_episode(const SplitView& split, int way, int shot, int queries, std::mt19937_64& rng) {
  if (way < 1 || shot < 1 || queries < 0) throw ArgumentError("sample_episode: way and shot must be positive");
  const std::size_t n = static_cast<std::size_t>(way);
  const std::size_t per_class = static_cast<std::size_t>(shot + queries);
  if (split.classes.size() < n)
    throw CapacityError("sample_episode: " + std::to_string(way) + "-way episode needs " + std::to_string(way) +
                        " classes, split has " + std::to_string(split.classes.size()));
  for (std::size_t c = 0; c < split.classes.size(); ++c)
    if (split.members[c].size() < per_class)
      throw CapacityError("sample_episode: class " + std::to_string(split.classes[c]) + " has " +
                          std::to_string(split.members[c].size()) + " samples, episode needs " +
                          std::to_string(per_class) + " (" + std::to_string(shot) + " support + " +
                          std::to_string(queries) + " query)");

  std::vector<std::size_t> order(split.classes.size());
  std::iota(order.begin(), order.end(), 0);
  partial_shuffle(order, n, rng);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries = queries;
  std::vector<std::vector<std::size_t>> picked(n);
  for (std::size_t c = 0; c < n; ++c) {
    ep.classes.push_back(split.classes[order[c]]);
    picked[c] = split.members[order[c]];
    partial_shuffle(picked[c], per_class, rng);
    ep.support.insert(ep.support.end(), picked[c].begin(), picked[c].begin() + shot);
  }
  // Queries interleave classes so label order carries no information.
  for (int q = 0; q < queries; ++q)
    for (std::size_t c = 0; c < n; ++c) {
      ep.query.push_back(picked[c][static_cast<std::size_t>(shot + q)]);
      ep.query_labels.push_back(static_cast<int>(c));
    }
  return ep;
}

std::vector<float> episode_targets(const Episode& episode) {
  std::vector<float> t;
  t.reserve(episode.query.size() * static_cast<std::size_t>(episode.way));
  for (int label : episode.query_labels)
    for (int c = 0; c < episode.way; ++c) t.push_back(label == c ? 1.0f : 0.0f);
  return t;
}

// ---------------------------------------------------------------------------
// Feature bank

FeatureBank FeatureBank::build(const Conv5Backbone& backbone, const Dataset& dataset, std::span<const Split> splits,
                               std::size_t batch) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i)
    if (std::find(splits.begin(), splits.end(), dataset.samples[i].split) != splits.end()) ids.push_back(i);
  if (ids.empty()) throw ArgumentError("feature bank: no samples in the requested splits");

  FeatureBank bank;
  bank.slot_.assign(dataset.samples.size(), -1);
  std::size_t per = 0;
  for (std::size_t start = 0; start < ids.size(); start += batch) {
    const std::size_t n = std::min(batch, ids.size() - start);
    std::vector<Tensor> imgs;
    for (std::size_t j = 0; j < n; ++j) imgs.push_back(dataset.samples[ids[start + j]].image);
    Tensor maps = extract_spatial(backbone, stack_images(imgs));
    if (!bank.maps_.defined()) {
      Shape shape = maps.shape();
      shape[0] = ids.size();
      bank.maps_ = Tensor(shape);
      per = maps.numel() / n;
    }
    std::copy_n(maps.ptr(), maps.numel(), bank.maps_.ptr() + start * per);
  }
  for (std::size_t k = 0; k < ids.size(); ++k) bank.slot_[ids[k]] = static_cast<long>(k);
  return bank;
}

FeatureBank FeatureBank::from_maps(const Tensor& maps) {
  if (!maps.defined() || maps.rank() != 4) throw DimensionError("feature bank: expected n x C x h x w maps");
  FeatureBank bank;
  bank.maps_ = maps.clone();
  bank.maps_.set_requires_grad(false);
  bank.slot_.resize(maps.dim(0));
  std::iota(bank.slot_.begin(), bank.slot_.end(), 0L);
  return bank;
}

bool FeatureBank::contains(std::size_t sample) const { return sample < slot_.size() && slot_[sample] >= 0; }

std::size_t FeatureBank::slot(std::size_t sample) const {
  if (!contains(sample)) throw ArgumentError("feature bank: sample " + std::to_string(sample) + " not loaded");
  return static_cast<std::size_t>(slot_[sample]);
}

Tensor FeatureBank::gather(std::span<const std::size_t> samples) const {
  Shape shape = maps_.shape();
  shape[0] = samples.size();
  Tensor out(shape);
  const std::size_t per = maps_.numel() / maps_.dim(0);
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy_n(maps_.ptr() + slot(samples[i]) * per, per, out.ptr() + i * per);
  return out;
}

Tensor FeatureBank::map(std::size_t sample) const {
  const Shape& s = maps_.shape();
  const std::size_t per = maps_.numel() / s[0];
  return Tensor({s[1], s[2], s[3]}, std::span<const float>(maps_.ptr() + slot(sample) * per, per));
}

Eigen::VectorXf FeatureBank::pooled(std::size_t sample) const {
  const Shape& s = maps_.shape();
  const std::size_t plane = s[2] * s[3];
  ConstMapMatf m(maps_.ptr() + slot(sample) * s[1] * plane, static_cast<Eigen::Index>(s[1]),
                 static_cast<Eigen::Index>(plane));
  return m.rowwise().mean();
}

// ---------------------------------------------------------------------------
// Scorers

std::string to_string(Metric metric) { return metric == Metric::Cosine ? "cosine" : "euclidean"; }

Metric parse_metric(const std::string& text) {
  if (text == "cosine") return Metric::Cosine;
  if (text == "euclidean") return Metric::Euclidean;
  throw ArgumentError("unknown baseline metric '" + text + "' (expected cosine or euclidean)");
}

MatrixRMf PrototypeScorer::score(const Episode& ep) {
  const std::size_t n = static_cast<std::size_t>(ep.way), k = static_cast<std::size_t>(ep.shot);
  std::vector<Eigen::VectorXf> protos(n);
  for (std::size_t c = 0; c < n; ++c) {
    protos[c] = bank_.pooled(ep.support[c * k]);
    for (std::size_t j = 1; j < k; ++j) protos[c] += bank_.pooled(ep.support[c * k + j]);
    protos[c] /= static_cast<float>(k);
  }
  MatrixRMf out(static_cast<Eigen::Index>(ep.query.size()), static_cast<Eigen::Index>(n));
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const Eigen::VectorXf f = bank_.pooled(ep.query[q]);
    for (std::size_t c = 0; c < n; ++c)
      out(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(c)) =
          metric_ == Metric::Cosine ? kernels::cosine(f, protos[c]) : -(f - protos[c]).squaredNorm();
  }
  return out;
}

MatrixRMf ConstantScorer::score(const Episode& ep) {
  return MatrixRMf::Constant(static_cast<Eigen::Index>(ep.query.size()), ep.way, 0.5f);
}

namespace {

GraphEncoding encode_maps(const Tensor& maps, const GcmParams& gcm, const GmmParams& gmm) {
  return encode_graph(build_graph(maps, gcm), gmm);
}

}  // namespace

GraphMatchScorer::GraphMatchScorer(const FeatureBank& bank, const GcmParams& gcm, const GmmParams& gmm)
    : bank_(bank), gcm_(gcm), gmm_(gmm) {
  NoGradGuard guard;
  const std::size_t total = bank.size(), m = gcm.dims.nodes();
  cache_.node_count = m;
  cache_.nodes = Tensor({total * m, gcm.dims.node});
  cache_.base = Tensor({total * m, gmm.dims.update});
  constexpr std::size_t kChunk = 32;
  const Shape& s = bank.maps().shape();
  const std::size_t per = bank.maps().numel() / total;
  for (std::size_t start = 0; start < total; start += kChunk) {
    const std::size_t n = std::min(kChunk, total - start);
    Tensor chunk({n, s[1], s[2], s[3]}, std::span<const float>(bank.maps().ptr() + start * per, n * per));
    GraphEncoding enc = encode_maps(chunk, gcm, gmm);
    std::copy_n(enc.nodes.ptr(), enc.nodes.numel(), cache_.nodes.ptr() + start * m * gcm.dims.node);
    std::copy_n(enc.base.ptr(), enc.base.numel(), cache_.base.ptr() + start * m * gmm.dims.update);
  }
}

MatrixRMf GraphMatchScorer::score(const Episode& ep) {
  NoGradGuard guard;
  const std::size_t n = static_cast<std::size_t>(ep.way), k = static_cast<std::size_t>(ep.shot);
  GraphEncoding protos;
  std::vector<std::size_t> proto_index(n);
  if (k == 1) {
    protos = cache_;
    for (std::size_t c = 0; c < n; ++c) proto_index[c] = bank_.slot(ep.support[c]);
  } else {
    std::vector<Tensor> maps;
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<Tensor> shots;
      for (std::size_t j = 0; j < k; ++j) shots.push_back(bank_.map(ep.support[c * k + j]));
      maps.push_back(prototype_map(shots));
      proto_index[c] = c;
    }
    protos = encode_maps(stack_images(maps), gcm_, gmm_);
  }
  std::vector<std::size_t> ia, ib;
  for (std::size_t q : ep.query)
    for (std::size_t c = 0; c < n; ++c) {
      ia.push_back(bank_.slot(q));
      ib.push_back(proto_index[c]);
    }
  Tensor s = score_pairs(cache_, ia, protos, ib, gmm_, &diagnostics_);
  return ConstMapMatf(s.ptr(), static_cast<Eigen::Index>(ep.query.size()), static_cast<Eigen::Index>(n));
}

// ---------------------------------------------------------------------------
// Evaluation

double ci95_half_width(std::span<const double> acc) {
  if (acc.empty()) return 0.0;
  const double e = static_cast<double>(acc.size());
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / e;
  double var = 0.0;
  for (double a : acc) var += (a - mean) * (a - mean);
  return 1.96 * std::sqrt(var / e) / std::sqrt(e);
}

int argmax_lowest(std::span<const float> scores, bool* tied) {
  int best = 0;
  bool shared = false;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[static_cast<std::size_t>(best)]) {
      best = static_cast<int>(i);
      shared = false;
    } else if (scores[i] == scores[static_cast<std::size_t>(best)]) {
      shared = true;
    }
  }
  if (tied) *tied = shared;
  return best;
}

EvalReport evaluate(EpisodeScorer& scorer, const SplitView& split, int way, int shot, int queries, int episodes,
                    std::uint64_t seed) {
  if (episodes < 1) throw ArgumentError("evaluate: episode count must be positive");
  std::mt19937_64 rng(seed);
  EvalReport report;
  report.episodes = static_cast<std::size_t>(episodes);
  for (int e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(split, way, shot, queries, rng);
    const MatrixRMf s = scorer.score(ep);
    std::size_t correct = 0;
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      bool tied = false;
      const int pred = argmax_lowest(
          std::span<const float>(s.data() + q * static_cast<std::size_t>(way), static_cast<std::size_t>(way)), &tied);
      report.tie_count += tied;
      correct += pred == ep.query_labels[q];
    }
    report.accuracies.push_back(static_cast<double>(correct) / static_cast<double>(ep.query.size()));
  }
  report.mean_accuracy =
      std::accumulate(report.accuracies.begin(), report.accuracies.end(), 0.0) / static_cast<double>(episodes);
  report.ci95 = ci95_half_width(report.accuracies);
  return report;
}

// ---------------------------------------------------------------------------
// Meta-training

MatcherModel MatcherModel::init(const GraphDims& dims, const Ablation& ablation, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x6d61746368ull);
  MatcherModel m;
  m.gcm = GcmParams::init(dims, rng);
  m.gmm = GmmParams::init(dims, ablation, rng);
  return m;
}

TensorList MatcherModel::parameters() const {
  TensorList out = gcm.parameters();
  for (auto& p : gmm.parameters()) out.push_back(p);
  return out;
}

double meta_train_step(MatcherModel& model, OptimizerState& optimizer, const FeatureBank& bank,
                       const Episode& episode, std::size_t step, std::uint64_t episode_seed) {
  const std::size_t n = static_cast<std::size_t>(episode.way), k = static_cast<std::size_t>(episode.shot);
  std::vector<Tensor> maps;
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<Tensor> shots;
    for (std::size_t j = 0; j < k; ++j) shots.push_back(bank.map(episode.support[c * k + j]));
    maps.push_back(prototype_map(shots));
  }
  for (std::size_t q : episode.query) maps.push_back(bank.map(q));

  std::vector<std::size_t> ia, ib;
  for (std::size_t q = 0; q < episode.query.size(); ++q)
    for (std::size_t c = 0; c < n; ++c) {
      ia.push_back(n + q);
      ib.push_back(c);
    }
  const std::vector<float> targets = episode_targets(episode);

  TensorList params = model.parameters();
  Tape tape;
  GraphEncoding enc = encode_graph(build_graph_train(stack_images(maps), model.gcm), model.gmm);
  Tensor scores = score_pairs(enc, ia, enc, ib, model.gmm);
  Tensor loss = mse(scores, Tensor({targets.size()}, targets));
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NumericError("meta-training loss is " + std::to_string(value) + " at step " + std::to_string(step) +
                       " (episode seed " + std::to_string(episode_seed) + ")");
  tape.backward(loss);
  optimizer_step(params, optimizer);
  zero_grad(params);
  return value;
}

MetaTrainResult meta_train(const FeatureBank& train_bank, const SplitView& train_split, const FeatureBank& val_bank,
                           const SplitView& val_split, const GraphDims& dims, const Ablation& ablation,
                           const MetaTrainOptions& options, const std::function<void(const MetaEpoch&)>& on_epoch) {
  if (options.epochs < 1 || options.episodes_per_epoch < 1)
    throw ArgumentError("meta_train: episode budget must be positive");
  MetaTrainResult result;
  MatcherModel model = MatcherModel::init(dims, ablation, options.seed);
  auto opt = OptimizerState::adam(options.learning_rate, options.weight_decay);
  std::mt19937_64 master(options.seed);
  const std::uint64_t val_seed = options.seed ^ 0x76616c6964ull;
  std::size_t step = 0;
  int stale = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (int i = 0; i < options.episodes_per_epoch; ++i, ++step) {
      const std::uint64_t ep_seed = master();
      std::mt19937_64 rng(ep_seed);
      const Episode ep = sample_episode(train_split, options.way, options.shot, options.queries, rng);
      loss_sum += meta_train_step(model, opt, train_bank, ep, step, ep_seed);
    }
    MetaEpoch log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / options.episodes_per_epoch;
    {
      GraphMatchScorer scorer(val_bank, model.gcm, model.gmm);
      log.val_accuracy = evaluate(scorer, val_split, options.way, options.shot, options.val_queries,
                                  options.val_episodes, val_seed)
                             .mean_accuracy;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = log.val_accuracy;
      result.best_epoch = epoch;
      result.model = load_matcher(matcher_checkpoint(model));
      stale = 0;
    } else if (options.patience > 0 && ++stale >= options.patience) {
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::vector<float> dims_vector(const GraphDims& d) {
  return {static_cast<float>(d.channels), static_cast<float>(d.grid),        static_cast<float>(d.node_hidden),
          static_cast<float>(d.node),     static_cast<float>(d.edge_hidden), static_cast<float>(d.edge),
          static_cast<float>(d.prop_hidden), static_cast<float>(d.prop),     static_cast<float>(d.update)};
}

}  // namespace

Checkpoint matcher_checkpoint(const MatcherModel& model) {
  TensorList all = model.gcm.state();
  for (auto& p : model.gmm.parameters()) all.push_back(p);
  const auto dv = dims_vector(model.gcm.dims);
  all.push_back({"meta.dims", Tensor({dv.size()}, dv)});
  all.push_back({"meta.ablation", Tensor({2}, {model.gmm.ablation.no_propagation ? 1.0f : 0.0f,
                                               model.gmm.ablation.no_interaction ? 1.0f : 0.0f})});
  return Checkpoint(std::move(all));
}

MatcherModel load_matcher(const Checkpoint& ckpt) {
  const Tensor dv = ckpt.get("meta.dims", {9});
  const Tensor ab = ckpt.get("meta.ablation", {2});
  auto dim = [&](std::size_t i) {
    const float v = dv[i];
    if (!(v >= 1.0f) || v != std::floor(v)) throw DataError("matcher checkpoint: invalid layer width");
    return static_cast<std::size_t>(v);
  };
  GraphDims d;
  d.channels = dim(0);
  d.grid = dim(1);
  d.node_hidden = dim(2);
  d.node = dim(3);
  d.edge_hidden = dim(4);
  d.edge = dim(5);
  d.prop_hidden = dim(6);
  d.prop = dim(7);
  d.update = dim(8);
  Ablation a{ab[0] != 0.0f, ab[1] != 0.0f};
  MatcherModel m = MatcherModel::init(d, a, 0);
  TensorList state = m.gcm.state();
  for (auto& p : m.gmm.parameters()) state.push_back(p);
  ckpt.assign_to(state);
  return m;
}

}  // namespace sgm
