#include <cmath>
#include <random>

#include "doctest.h"
#include "sgm/backbone.hpp"
#include "sgm/errors.hpp"
#include "sgm/synthscene.hpp"

using namespace sgm;

namespace {

constexpr std::array<std::size_t, 6> kTiny{3, 4, 4, 8, 8, 8};

Tensor constant_image(float v, std::size_t n = 16) { return Tensor::full({3, n, n}, v); }

double pooled_cosine(const Conv5Backbone& net, const Tensor& a, const Tensor& b) {
  const Tensor fa = extract_spatial(net, a), fb = extract_spatial(net, b);
  const std::size_t c = fa.dim(0), hw = fa.numel() / c;
  Eigen::VectorXd pa = Eigen::VectorXd::Zero(c), pb = Eigen::VectorXd::Zero(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) {
      pa[ch] += fa[ch * hw + i];
      pb[ch] += fb[ch * hw + i];
    }
  const double denom = pa.norm() * pb.norm();
  return denom > 0 ? pa.dot(pb) / denom : 0.0;
}

}  // namespace

TEST_CASE("spatial representation shape and validation") {
  std::mt19937_64 rng(1);
  Conv5Backbone net = Conv5Backbone::init(rng, kTiny);
  CHECK(extract_spatial(net, Tensor::zeros({3, 64, 64})).shape() == Shape{8, 4, 4});
  CHECK(extract_spatial(net, Tensor::zeros({2, 3, 32, 32})).shape() == Shape{2, 8, 2, 2});
  CHECK_THROWS_AS(extract_spatial(net, Tensor::zeros({3, 20, 20})), DimensionError);
  CHECK_THROWS_AS(extract_spatial(net, Tensor::zeros({1, 16, 16})), DimensionError);
}

TEST_CASE("zero image gives zero features and extraction is deterministic") {
  std::mt19937_64 rng(2);
  Conv5Backbone net = Conv5Backbone::init(rng, kTiny);
  for (float v : extract_spatial(net, Tensor::zeros({3, 32, 32})).data()) CHECK(v == 0.0f);
  Tensor img = Tensor::uniform({3, 32, 32}, rng, 0, 1);
  CHECK(extract_spatial(net, img).vec() == extract_spatial(net, img).vec());
}

TEST_CASE("rot90 turns counter-clockwise and has period four") {
  Tensor img({1, 2, 2}, {1, 2, 3, 4});  // [[1,2],[3,4]]
  Tensor r = rot90(img, 1);
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{2, 4, 1, 3});
  std::mt19937_64 rng(3);
  Tensor x = Tensor::uniform({3, 5, 5}, rng, 0, 1);
  CHECK(rot90(rot90(x, 3), 1).vec() == x.vec());
  CHECK(rot90(x, 4).vec() == x.vec());
  CHECK(rot90(x, -1).vec() == rot90(x, 3).vec());
}

TEST_CASE("learning-rate schedule") {
  CHECK(pretrain_learning_rate(1.0f, 5, 10) == 1.0f);
  CHECK(pretrain_learning_rate(1.0f, 6, 10) == doctest::Approx(0.1));
  CHECK(pretrain_learning_rate(1.0f, 8, 10) == doctest::Approx(0.01));
  CHECK(pretrain_learning_rate(1.0f, 9, 10) == doctest::Approx(0.001));
}

TEST_CASE("separable constant-color classes are learned within five epochs") {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> wobble(-0.02f, 0.02f);
  for (int i = 0; i < 32; ++i) {
    images.push_back(constant_image(i % 2 ? 0.8f + wobble(rng) : 0.2f + wobble(rng)));
    labels.push_back(i % 2);
  }
  PretrainOptions opt;
  opt.epochs = 5;
  opt.batch = 8;
  opt.channels = kTiny;
  opt.seed = 4;
  auto res = pretrain(images, labels, 2, opt);
  CHECK(res.epochs.size() == 5);
  CHECK(res.epochs.back().train_accuracy == 1.0);
  CHECK(class_accuracy(res.backbone, res.heads, images, labels) == 1.0);
  // Loss is non-increasing on a 3-epoch moving average, within 5%.
  std::vector<double> smooth;
  for (std::size_t e = 2; e < res.epochs.size(); ++e)
    smooth.push_back((res.epochs[e - 2].mean_loss + res.epochs[e - 1].mean_loss + res.epochs[e].mean_loss) / 3.0);
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] <= smooth[i - 1] * 1.05);

  SUBCASE("memorized pair and single sample") {
    std::vector<Tensor> two{images[0], images[1]};
    std::vector<int> two_labels{0, 1};
    CHECK(class_accuracy(res.backbone, res.heads, two, two_labels) == 1.0);
    CHECK(class_accuracy(res.backbone, res.heads, std::span(two).first(1), std::span(two_labels).first(1)) == 1.0);
  }
  SUBCASE("checkpoint round trip preserves features") {
    const Checkpoint ck = backbone_checkpoint(res.backbone, res.heads);
    Conv5Backbone back = load_backbone(Checkpoint::deserialize(ck.serialize()));
    CHECK(extract_spatial(back, images[3]).vec() == extract_spatial(res.backbone, images[3]).vec());
    CHECK(load_heads(ck).classes() == 2);
  }
}

TEST_CASE("rotation weight zero reduces the loss to class cross-entropy") {
  std::mt19937_64 rng(5);
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) {
    images.push_back(Tensor::uniform({3, 16, 16}, rng, 0, 1));
    labels.push_back(i % 3);
  }
  PretrainOptions opt;
  opt.epochs = 2;
  opt.batch = 4;
  opt.channels = kTiny;
  opt.rotation_weight = 0.0f;
  auto res = pretrain(images, labels, 3, opt);
  REQUIRE(!res.steps.empty());
  for (const auto& s : res.steps) {
    CHECK(s.total_loss == s.class_loss);
    CHECK(s.rotation_loss == 0.0);
  }
}

TEST_CASE("initial class loss is close to log C") {
  std::mt19937_64 rng(6);
  std::vector<Tensor> images;
  std::vector<int> labels;
  const int classes = 6;
  for (int i = 0; i < 48; ++i) {
    images.push_back(Tensor::uniform({3, 16, 16}, rng, 0, 1));
    labels.push_back(i % classes);
  }
  PretrainOptions opt;
  opt.epochs = 1;
  opt.batch = 48;
  opt.channels = kTiny;
  auto res = pretrain(images, labels, classes, opt);
  CHECK(std::abs(res.steps.front().class_loss - std::log(static_cast<double>(classes))) < 0.2);
}

TEST_CASE("untrained accuracy sits near chance") {
  std::mt19937_64 rng(7);
  Conv5Backbone net = Conv5Backbone::init(rng, kTiny);
  const std::size_t classes = 4;
  PretrainHeads heads = PretrainHeads::init(net.out_channels(), classes, rng);
  std::vector<Tensor> images;
  std::vector<int> labels;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    images.push_back(Tensor::uniform({3, 16, 16}, rng, 0, 1));
    labels.push_back(i % 4);
  }
  const double acc = class_accuracy(net, heads, images, labels);
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  CHECK(std::abs(acc - 0.25) < 3 * sigma);
  CHECK_THROWS_AS(class_accuracy(net, heads, {}, {}), ArgumentError);
}

TEST_CASE("bad labels name the sample") {
  std::vector<Tensor> images{constant_image(0.1f), constant_image(0.2f)};
  std::vector<int> labels{0, 5};
  PretrainOptions opt;
  opt.channels = kTiny;
  try {
    pretrain(images, labels, 2, opt);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("rotation pre-training makes pooled features more rotation-stable") {
  // Paired runs that differ only in the rotation weight; direction only.
  const auto m = DatasetManifest::default_manifest();
  std::vector<Tensor> train, test;
  std::vector<int> labels;
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 0; i < 24; ++i) {
      train.push_back(image_to_tensor(render_scene(m.find(m.train[c]), 64, 0, i)));
      labels.push_back(static_cast<int>(c));
    }
  for (std::size_t i = 0; i < 50; ++i)
    test.push_back(image_to_tensor(render_scene(m.find(m.test[i % m.test.size()]), 64, 0, i)));

  PretrainOptions opt;
  opt.epochs = 4;
  opt.batch = 16;
  opt.channels = {3, 8, 8, 16, 16, 16};
  opt.seed = 8;
  auto with = pretrain(train, labels, 6, opt);
  opt.rotation_weight = 0.0f;
  auto without = pretrain(train, labels, 6, opt);
  double s_with = 0, s_without = 0;
  for (const auto& img : test) {
    const Tensor r = rot90(img, 1);
    s_with += pooled_cosine(with.backbone, img, r) / 50.0;
    s_without += pooled_cosine(without.backbone, img, r) / 50.0;
  }
  INFO("with rotation " << s_with << ", without " << s_without);
  CHECK(s_with >= s_without);
}
