#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "sgm/episodic.hpp"
#include "sgm/errors.hpp"

using namespace sgm;

namespace {

// `classes` classes of `per` samples each; sample s belongs to class s / per.
SplitView make_split(int classes, std::size_t per) {
  SplitView v;
  for (int c = 0; c < classes; ++c) {
    v.classes.push_back(100 + c);
    v.members.emplace_back();
    for (std::size_t i = 0; i < per; ++i) v.members.back().push_back(static_cast<std::size_t>(c) * per + i);
  }
  return v;
}

// Class-dependent maps with noise, one per sample of make_split.
Tensor class_maps(int classes, std::size_t per, const GraphDims& d, std::mt19937_64& rng, float noise = 0.3f) {
  const std::size_t n = static_cast<std::size_t>(classes) * per, sz = d.channels * d.nodes();
  Tensor maps({n, d.channels, d.grid, d.grid});
  std::vector<Tensor> centers;
  for (int c = 0; c < classes; ++c) centers.push_back(Tensor::uniform({sz}, rng, 0.0f, 1.0f));
  std::uniform_real_distribution<float> jitter(-noise, noise);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < sz; ++i) maps[s * sz + i] = std::max(0.0f, centers[s / per][i] + jitter(rng));
  return maps;
}

std::vector<int> predictions(EpisodeScorer& scorer, const Episode& ep) {
  const MatrixRMf s = scorer.score(ep);
  std::vector<int> out;
  for (Eigen::Index q = 0; q < s.rows(); ++q) {
    std::vector<float> row(s.row(q).data(), s.row(q).data() + s.cols());
    out.push_back(argmax_lowest(row));
  }
  return out;
}

}  // namespace

TEST_CASE("episode layout") {
  SplitView split = make_split(6, 10);
  std::mt19937_64 rng(1);
  Episode ep = sample_episode(split, 5, 2, 3, rng);
  CHECK(ep.classes.size() == 5);
  CHECK(ep.support.size() == 10);
  CHECK(ep.query.size() == 15);
  std::set<std::size_t> used(ep.support.begin(), ep.support.end());
  used.insert(ep.query.begin(), ep.query.end());
  CHECK(used.size() == 25);
  for (std::size_t i = 0; i < ep.support.size(); ++i) CHECK(100 + static_cast<int>(ep.support[i] / 10) == ep.classes[i / 2]);
  for (std::size_t i = 0; i < ep.query.size(); ++i)
    CHECK(100 + static_cast<int>(ep.query[i] / 10) == ep.classes[static_cast<std::size_t>(ep.query_labels[i])]);

  const auto t = episode_targets(ep);
  CHECK(t.size() == 75);
  CHECK(std::accumulate(t.begin(), t.end(), 0.0f) == 15.0f);
}

TEST_CASE("episodes are deterministic in the seed") {
  SplitView split = make_split(8, 12);
  std::mt19937_64 a(7), b(7), c(8);
  const Episode ea = sample_episode(split, 5, 1, 4, a);
  CHECK(ea == sample_episode(split, 5, 1, 4, b));
  CHECK_FALSE(ea == sample_episode(split, 5, 1, 4, c));
}

TEST_CASE("class selection is uniform") {
  SplitView split = make_split(10, 3);
  std::mt19937_64 rng(3);
  std::map<int, int> counts;
  const int episodes = 1000;
  for (int e = 0; e < episodes; ++e)
    for (int c : sample_episode(split, 5, 1, 1, rng).classes) ++counts[c];
  const double p = 0.5, sigma = std::sqrt(episodes * p * (1 - p));
  for (const auto& [c, n] : counts) CHECK(std::abs(n - episodes * p) < 3 * sigma);
  CHECK(counts.size() == 10);
}

TEST_CASE("capacity errors") {
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(sample_episode(make_split(4, 10), 5, 1, 1, rng), CapacityError);
  CHECK_THROWS_AS(sample_episode(make_split(6, 3), 5, 1, 3, rng), CapacityError);
}

TEST_CASE("argmax tie-break and confidence interval") {
  bool tied = false;
  const float scores[] = {0.2f, 0.7f, 0.7f};
  CHECK(argmax_lowest(scores, &tied) == 1);
  CHECK(tied);
  const float clear[] = {0.9f, 0.7f};
  CHECK(argmax_lowest(clear, &tied) == 0);
  CHECK_FALSE(tied);

  const double one[] = {1.0};
  CHECK(ci95_half_width(one) == 0.0);
  std::mt19937_64 rng(5);
  std::vector<double> acc(600);
  for (auto& a : acc) a = std::uniform_real_distribution<double>(0.3, 0.9)(rng);
  double mean = 0, var = 0;
  for (double a : acc) mean += a / 600.0;
  for (double a : acc) var += (a - mean) * (a - mean) / 600.0;
  CHECK(std::abs(ci95_half_width(acc) - 1.96 * std::sqrt(var) / std::sqrt(600.0)) < 1e-9);
}

TEST_CASE("forced ties give chance accuracy") {
  SplitView split = make_split(6, 20);
  ConstantScorer scorer;
  const EvalReport r = evaluate(scorer, split, 5, 1, 15, 600, 11);
  const double sigma = std::sqrt(0.2 * 0.8 / (600.0 * 75.0));
  CHECK(std::abs(r.mean_accuracy - 0.2) <= 3 * sigma);
  CHECK(r.tie_count == 600u * 75u);
  CHECK(r.episodes == 600);
}

TEST_CASE("prototype baselines") {
  GraphDims d = GraphDims::mini();
  std::mt19937_64 rng(6);
  SplitView split = make_split(6, 8);
  Tensor maps = class_maps(6, 8, d, rng, 0.3f);
  FeatureBank bank = FeatureBank::from_maps(maps);

  SUBCASE("a query identical to its support is recognized") {
    Tensor copy = maps.clone();
    const std::size_t sz = d.channels * d.nodes();
    // Sample 1 duplicates sample 0 (same class).
    std::copy_n(copy.ptr(), sz, copy.ptr() + sz);
    FeatureBank dup = FeatureBank::from_maps(copy);
    Episode ep;
    ep.way = 2;
    ep.shot = 1;
    ep.queries = 1;
    ep.classes = {100, 101};
    ep.support = {0, 8};
    ep.query = {1};
    ep.query_labels = {0};
    PrototypeScorer euclid(dup, Metric::Euclidean);
    const MatrixRMf s = euclid.score(ep);
    CHECK(s(0, 0) == 0.0f);
    CHECK(predictions(euclid, ep)[0] == 0);
  }
  SUBCASE("cosine predictions are scale-invariant") {
    Tensor doubled = maps.clone();
    doubled.vec() *= 2.0f;
    FeatureBank big = FeatureBank::from_maps(doubled);
    PrototypeScorer a(bank, Metric::Cosine), b(big, Metric::Cosine);
    std::mt19937_64 er(7);
    for (int e = 0; e < 20; ++e) {
      const Episode ep = sample_episode(split, 5, 2, 3, er);
      CHECK(predictions(a, ep) == predictions(b, ep));
    }
  }
  SUBCASE("euclidean predictions match a brute-force nearest centroid") {
    PrototypeScorer euclid(bank, Metric::Euclidean);
    std::mt19937_64 er(8);
    for (int e = 0; e < 10; ++e) {
      const Episode ep = sample_episode(split, 5, 3, 4, er);
      std::vector<int> expected;
      for (std::size_t q : ep.query) {
        const Eigen::VectorXf fq = bank.pooled(q);
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < ep.way; ++c) {
          Eigen::VectorXd centroid = Eigen::VectorXd::Zero(fq.size());
          for (int k = 0; k < ep.shot; ++k)
            centroid += bank.pooled(ep.support[static_cast<std::size_t>(c * ep.shot + k)]).cast<double>() / ep.shot;
          double dist = 0;
          for (Eigen::Index i = 0; i < fq.size(); ++i) dist += (fq[i] - centroid[i]) * (fq[i] - centroid[i]);
          if (dist < best_d) {
            best_d = dist;
            best = c;
          }
        }
        expected.push_back(best);
      }
      CHECK(predictions(euclid, ep) == expected);
    }
  }
  SUBCASE("evaluation is reproducible and paired across scorers") {
    PrototypeScorer cos(bank, Metric::Cosine);
    const EvalReport r1 = evaluate(cos, split, 5, 1, 5, 50, 3);
    const EvalReport r2 = evaluate(cos, split, 5, 1, 5, 50, 3);
    CHECK(r1.accuracies == r2.accuracies);
    CHECK(r1.mean_accuracy > 0.5);
  }
}

TEST_CASE("graph scorer agrees with direct matching") {
  GraphDims d = GraphDims::mini();
  std::mt19937_64 rng(9);
  SplitView split = make_split(5, 6);
  FeatureBank bank = FeatureBank::from_maps(class_maps(5, 6, d, rng));
  MatcherModel model = MatcherModel::init(d, {}, 3);
  GraphMatchScorer scorer(bank, model.gcm, model.gmm);
  std::mt19937_64 er(10);
  for (int shot : {1, 2}) {
    const Episode ep = sample_episode(split, 3, shot, 2, er);
    const MatrixRMf s = scorer.score(ep);
    for (std::size_t q = 0; q < ep.query.size(); ++q)
      for (int c = 0; c < ep.way; ++c) {
        std::vector<Tensor> support;
        for (int k = 0; k < shot; ++k) support.push_back(bank.map(ep.support[static_cast<std::size_t>(c * shot + k)]));
        const float expected =
            match(class_prototype_graph(support, model.gcm), build_graph(bank.map(ep.query[q]), model.gcm), model.gmm);
        CHECK(s(static_cast<Eigen::Index>(q), c) == doctest::Approx(expected).epsilon(1e-5));
      }
  }
}

TEST_CASE("meta-training steps") {
  GraphDims d = GraphDims::mini();
  std::mt19937_64 rng(11);
  SplitView split = make_split(6, 8);
  FeatureBank bank = FeatureBank::from_maps(class_maps(6, 8, d, rng));
  std::mt19937_64 er(12);
  const Episode ep = sample_episode(split, 5, 1, 2, er);

  SUBCASE("uniform scores give the documented loss") {
    const auto t = episode_targets(ep);
    Tensor target({t.size()}, t);
    CHECK(mse(Tensor::full({t.size()}, 0.5f), target).item() == doctest::Approx(0.25));
  }
  SUBCASE("learning rate zero leaves parameters unchanged") {
    MatcherModel model = MatcherModel::init(d, {}, 1);
    std::vector<Eigen::VectorXf> before;
    for (const auto& p : model.parameters()) before.push_back(p.tensor.vec());
    auto opt = OptimizerState::adam(0.0f, 5e-4f);
    const double loss = meta_train_step(model, opt, bank, ep, 0, 12);
    CHECK(std::isfinite(loss));
    const auto after = model.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i].tensor.vec() == before[i]);
  }
  SUBCASE("a non-finite loss names the step and the episode seed") {
    Tensor bad = bank.maps().clone();
    bad[0] = std::numeric_limits<float>::quiet_NaN();
    for (std::size_t i = 0; i < bad.numel(); ++i) bad[i] = std::numeric_limits<float>::quiet_NaN();
    FeatureBank nan_bank = FeatureBank::from_maps(bad);
    MatcherModel model = MatcherModel::init(d, {}, 1);
    auto opt = OptimizerState::adam(1e-3f, 0.0f);
    try {
      meta_train_step(model, opt, nan_bank, ep, 17, 4242);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("17") != std::string::npos);
      CHECK(msg.find("4242") != std::string::npos);
    }
  }
}

TEST_CASE("meta-training run selects the best validation epoch and round-trips") {
  GraphDims d = GraphDims::mini();
  std::mt19937_64 rng(13);
  SplitView train = make_split(6, 8);
  FeatureBank bank = FeatureBank::from_maps(class_maps(6, 8, d, rng, 0.2f));
  MetaTrainOptions o;
  o.way = 3;
  o.queries = 2;
  o.epochs = 3;
  o.episodes_per_epoch = 10;
  o.val_episodes = 10;
  o.val_queries = 3;
  o.learning_rate = 1e-3f;
  o.seed = 5;
  std::vector<MetaEpoch> seen;
  const auto r1 = meta_train(bank, train, bank, train, d, {}, o, [&](const MetaEpoch& e) { seen.push_back(e); });
  const auto r2 = meta_train(bank, train, bank, train, d, {}, o);
  CHECK(seen.size() == 3);
  CHECK(r1.best_epoch >= 0);
  double best = -1;
  for (const auto& e : r1.epochs) best = std::max(best, e.val_accuracy);
  CHECK(r1.best_val_accuracy == best);
  CHECK(checksum(r1.model.parameters()) == checksum(r2.model.parameters()));

  const Checkpoint ck = matcher_checkpoint(r1.model);
  const MatcherModel back = load_matcher(Checkpoint::deserialize(ck.serialize()));
  CHECK(checksum(back.parameters()) == checksum(r1.model.parameters()));
  CHECK(back.gmm.ablation == r1.model.gmm.ablation);
  CHECK(back.gcm.dims == d);
}
